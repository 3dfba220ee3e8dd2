use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense layer; `w` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer { inputs, outputs, w: vec![0.0; inputs * outputs], b: vec![0.0; outputs] }
    }

    pub fn params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn abs_mean(&self) -> f64 {
        let total: f64 = self.w.iter().chain(&self.b).map(|x| x.abs()).sum();
        total / self.params() as f64
    }
}

/// tanh hidden layers, linear scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Gradients with the same shape as the network.
pub type Gradients = Vec<Layer>;

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        Mlp { layers: sizes.windows(2).map(|p| Layer::zeros(p[0], p[1])).collect() }
    }

    /// Uniform in ±1/sqrt(fan_in); biases start at zero.
    pub fn random(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut net = Self::zeros(sizes);
        for layer in &mut net.layers {
            let scale = 1.0 / (layer.inputs as f64).sqrt();
            for w in &mut layer.w {
                *w = rng.gen_range(-scale..scale);
            }
        }
        net
    }

    pub fn params(&self) -> usize {
        self.layers.iter().map(Layer::params).sum()
    }

    /// Activations of every layer, input first.
    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let input = &acts[li];
            let mut out = layer.b.clone();
            for (o, slot) in out.iter_mut().enumerate() {
                let row = &layer.w[o * layer.inputs..(o + 1) * layer.inputs];
                *slot += row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
                if li != last {
                    *slot = slot.tanh();
                }
            }
            acts.push(out);
        }
        acts
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.forward_all(x).last().unwrap()[0]
    }

    /// Mean squared error over the batch.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        let total: f64 = xs.iter().zip(ys).map(|(x, y)| (self.predict(x) - y).powi(2)).sum();
        total / xs.len() as f64
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn gradients(&self, xs: &[Vec<f64>], ys: &[f64]) -> (f64, Gradients) {
        let n = xs.len() as f64;
        let mut grads: Gradients = self.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect();
        let mut loss = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let acts = self.forward_all(x);
            let err = acts.last().unwrap()[0] - y;
            loss += err * err;
            let mut delta = vec![2.0 * err / n];
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let input = &acts[li];
                let g = &mut grads[li];
                for (o, d) in delta.iter().enumerate() {
                    g.b[o] += d;
                    for (i, a) in input.iter().enumerate() {
                        g.w[o * layer.inputs + i] += d * a;
                    }
                }
                if li == 0 {
                    break;
                }
                // Back through tanh of the previous layer's output.
                delta = (0..layer.inputs)
                    .map(|i| {
                        let s: f64 = delta.iter().enumerate().map(|(o, d)| d * layer.w[o * layer.inputs + i]).sum();
                        s * (1.0 - input[i] * input[i])
                    })
                    .collect();
            }
        }
        (loss / n, grads)
    }

    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            for (w, d) in layer.w.iter_mut().zip(&g.w) {
                *w -= lr * d;
            }
            for (b, d) in layer.b.iter_mut().zip(&g.b) {
                *b -= lr * d;
            }
        }
    }

    pub fn weight_abs_mean(&self) -> Vec<f64> {
        self.layers.iter().map(Layer::abs_mean).collect()
    }

    pub fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for layer in &mut self.layers {
            if k < layer.w.len() {
                return &mut layer.w[k];
            }
            k -= layer.w.len();
            if k < layer.b.len() {
                return &mut layer.b[k];
            }
            k -= layer.b.len();
        }
        panic!("parameter index out of range");
    }
}

pub fn grad_abs_mean(grads: &Gradients) -> Vec<f64> {
    grads.iter().map(Layer::abs_mean).collect()
}

pub fn flatten(grads: &Gradients) -> Vec<f64> {
    grads.iter().flat_map(|l| l.w.iter().chain(&l.b).copied()).collect()
}
