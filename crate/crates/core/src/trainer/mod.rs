//! Deterministic training loop used as the reference host process.
//!
//! A small MLP is fitted with plain SGD to seeded synthetic regression data.
//! Every batch ends with `notify("batch", last_batch_of_epoch)` and every
//! epoch with `notify("epoch", true)`; the learning rate and a stop flag are
//! writable from clients.

pub mod mlp;

use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{Agent, AgentError};
use crate::value::{Record, Value};
pub use mlp::Mlp;

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub seed: u64,
    pub epochs: u32,
    pub batches_per_epoch: u32,
    pub batch_size: u32,
    /// Input width first, then hidden widths, then 1.
    pub layer_sizes: Vec<usize>,
    pub learning_rate: f64,
    /// Sleep after each batch, for interactive sessions.
    pub batch_delay: Duration,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            seed: 42,
            epochs: 10,
            batches_per_epoch: 50,
            batch_size: 32,
            layer_sizes: vec![8, 16, 1],
            learning_rate: 0.05,
            batch_delay: Duration::ZERO,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: &str| Err(TrainerError::Config(m.to_owned()));
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, batches_per_epoch and batch_size must be positive");
        }
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return bad("layer_sizes needs at least two positive sizes");
        }
        if self.layer_sizes.last() != Some(&1) {
            return bad("the output layer must have size 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be a positive number");
        }
        Ok(())
    }
}

/// Fixed training set: `batches` batches of `batch_size` samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
    pub batch_size: usize,
}

impl Dataset {
    pub fn synthetic(seed: u64, inputs: usize, samples: usize, batch_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        let mut xs = Vec::with_capacity(samples);
        let mut ys = Vec::with_capacity(samples);
        for _ in 0..samples {
            let x: Vec<f64> = (0..inputs).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let noise = rng.gen_range(-0.05..=0.05);
            ys.push(target(&x) + noise);
            xs.push(x);
        }
        Dataset { xs, ys, batch_size }
    }

    pub fn batch(&self, i: usize) -> (&[Vec<f64>], &[f64]) {
        let r = i * self.batch_size..(i + 1) * self.batch_size;
        (&self.xs[r.clone()], &self.ys[r])
    }
}

fn target(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let s: f64 = x.iter().enumerate().map(|(i, v)| v * (1.0 + i as f64) / d).sum();
    s.sin() + 0.3 * x[0] * x[x.len() - 1]
}

/// Current values of the registered observables.
#[derive(Debug, Clone, Default)]
struct Metrics {
    epoch: i64,
    batch: i64,
    loss: f64,
    duration: f64,
    grad_abs_mean: Vec<f64>,
    weight_abs_mean: Vec<f64>,
    sample_pred: Record,
    epoch_loss: f64,
    lr: f64,
    stop_requested: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_completed: u32,
    pub batches_run: u64,
    pub stopped: bool,
    pub batch_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub final_learning_rate: f64,
}

impl TrainSummary {
    pub fn to_record(&self) -> Record {
        let floats = |v: &[f64]| Value::List(v.iter().map(|x| Value::Float(*x)).collect());
        let mut r = Record::new();
        r.insert("epochs_completed".into(), Value::Int(self.epochs_completed.into()));
        r.insert("batches".into(), Value::Int(self.batches_run as i64));
        r.insert("stopped".into(), Value::Bool(self.stopped));
        r.insert("first_epoch_loss".into(), self.epoch_losses.first().copied().into());
        r.insert("final_epoch_loss".into(), self.epoch_losses.last().copied().into());
        r.insert("epoch_losses".into(), floats(&self.epoch_losses));
        r.insert("learning_rate".into(), Value::Float(self.final_learning_rate));
        r
    }
}

fn positive_rate(v: Value) -> Result<f64, String> {
    match v.as_f64() {
        Some(x) if x.is_finite() && x > 0.0 => Ok(x),
        _ => Err(format!("learning rate must be a positive number, got {v}")),
    }
}

fn register(agent: &mut Agent, m: &Arc<Mutex<Metrics>>) -> Result<(), TrainerError> {
    macro_rules! getter {
        ($name:literal, |$s:ident| $e:expr) => {{
            let m = m.clone();
            agent.register_observable($name, move || {
                let $s = m.lock();
                Value::from($e)
            })?;
        }};
    }
    getter!("epoch", |s| s.epoch);
    getter!("batch", |s| s.batch);
    getter!("loss", |s| s.loss);
    getter!("duration", |s| s.duration);
    getter!("grad_abs_mean", |s| s.grad_abs_mean.clone());
    getter!("weight_abs_mean", |s| s.weight_abs_mean.clone());
    getter!("sample_pred", |s| Value::Record(s.sample_pred.clone()));
    getter!("epoch_loss", |s| s.epoch_loss);
    for name in ["lr", "learning_rate"] {
        let (g, s) = (m.clone(), m.clone());
        agent.register_settable(name, move || Value::Float(g.lock().lr), move |v| {
            s.lock().lr = positive_rate(v)?;
            Ok(())
        })?;
    }
    let (g, s) = (m.clone(), m.clone());
    agent.register_settable("stop_requested", move || Value::Bool(g.lock().stop_requested), move |v| match v {
        Value::Bool(b) => {
            s.lock().stop_requested = b;
            Ok(())
        }
        other => Err(format!("stop_requested must be a bool, got {other}")),
    })?;
    agent.declare_event("batch");
    agent.declare_event("epoch");
    Ok(())
}

/// A configured training run. Call [`Trainer::instrument`] to expose its
/// observables before [`Trainer::run`] so clients can attach early.
pub struct Trainer {
    config: TrainerConfig,
    metrics: Arc<Mutex<Metrics>>,
}

impl Trainer {
    pub fn new(config: TrainerConfig) -> Result<Self, TrainerError> {
        config.validate()?;
        let metrics = Arc::new(Mutex::new(Metrics { lr: config.learning_rate, ..Metrics::default() }));
        Ok(Trainer { config, metrics })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    /// Registers observables and declares the `batch` and `epoch` events.
    pub fn instrument(&self, agent: &mut Agent) -> Result<(), TrainerError> {
        register(agent, &self.metrics)
    }

    pub fn run(&self, mut agent: Option<&mut Agent>) -> TrainSummary {
        let config = &self.config;
        let metrics = &self.metrics;
        let sizes = &config.layer_sizes;
        let batches = config.batches_per_epoch as usize;
        let data = Dataset::synthetic(config.seed, sizes[0], batches * config.batch_size as usize, config.batch_size as usize);
        let mut net = Mlp::random(sizes, &mut ChaCha8Rng::seed_from_u64(config.seed));
        let mut sampler = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

        let mut summary = TrainSummary {
            epochs_completed: 0,
            batches_run: 0,
            stopped: false,
            batch_losses: Vec::new(),
            epoch_losses: Vec::new(),
            final_learning_rate: config.learning_rate,
        };
        'epochs: for epoch in 0..config.epochs {
            let mut epoch_total = 0.0;
            for b in 0..batches {
                if let Some(agent) = agent.as_deref_mut() {
                    agent.poll();
                }
                let lr = {
                    let m = metrics.lock();
                    if m.stop_requested {
                        summary.stopped = true;
                        break 'epochs;
                    }
                    m.lr
                };
                let started = Instant::now();
                let (xs, ys) = data.batch(b);
                let (loss, grads) = net.gradients(xs, ys);
                net.sgd_step(&grads, lr);
                let duration = started.elapsed().as_secs_f64();

                let k = sampler.gen_range(0..xs.len());
                let mut sample = Record::new();
                sample.insert("input".into(), Value::from(xs[k].clone()));
                sample.insert("predicted".into(), Value::Float(net.predict(&xs[k])));
                sample.insert("target".into(), Value::Float(ys[k]));
                {
                    let mut m = metrics.lock();
                    m.epoch = epoch.into();
                    m.batch = b as i64;
                    m.loss = loss;
                    m.duration = duration;
                    m.grad_abs_mean = mlp::grad_abs_mean(&grads);
                    m.weight_abs_mean = net.weight_abs_mean();
                    m.sample_pred = sample;
                }
                epoch_total += loss;
                summary.batch_losses.push(loss);
                summary.batches_run += 1;
                if let Some(agent) = agent.as_deref_mut() {
                    agent.notify("batch", b + 1 == batches);
                }
                if !config.batch_delay.is_zero() {
                    std::thread::sleep(config.batch_delay);
                }
            }
            let epoch_loss = epoch_total / batches as f64;
            metrics.lock().epoch_loss = epoch_loss;
            summary.epoch_losses.push(epoch_loss);
            summary.epochs_completed += 1;
            if let Some(agent) = agent.as_deref_mut() {
                agent.notify("epoch", true);
            }
        }
        summary.final_learning_rate = metrics.lock().lr;
        summary
    }
}

/// Trains per `config`, instrumenting and reporting to `agent` when given.
pub fn run(config: &TrainerConfig, mut agent: Option<&mut Agent>) -> Result<TrainSummary, TrainerError> {
    let trainer = Trainer::new(config.clone())?;
    if let Some(agent) = agent.as_deref_mut() {
        trainer.instrument(agent)?;
    }
    Ok(trainer.run(agent))
}

/// Max relative error between backprop gradients and central finite
/// differences (step 1e-5) on the first batch of the synthetic data.
pub fn gradient_check(config: &TrainerConfig) -> Result<f64, TrainerError> {
    config.validate()?;
    let sizes = &config.layer_sizes;
    let data = Dataset::synthetic(config.seed, sizes[0], config.batch_size as usize, config.batch_size as usize);
    let (xs, ys) = data.batch(0);
    let mut net = Mlp::random(sizes, &mut ChaCha8Rng::seed_from_u64(config.seed));
    Ok(max_relative_error(&mut net, xs, ys))
}

pub fn max_relative_error(net: &mut Mlp, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    const H: f64 = 1e-5;
    let analytic = mlp::flatten(&net.gradients(xs, ys).1);
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let orig = *net.param_mut(k);
        *net.param_mut(k) = orig + H;
        let up = net.loss(xs, ys);
        *net.param_mut(k) = orig - H;
        let down = net.loss(xs, ys);
        *net.param_mut(k) = orig;
        let numeric = (up - down) / (2.0 * H);
        let scale = a.abs().max(numeric.abs());
        let err = if scale < 1e-8 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
        worst = worst.max(err);
    }
    worst
}
