//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line
//! each; exits non-zero if any fails. Pass substrings as arguments to run
//! a subset.

mod support;

use std::sync::mpsc;
use std::time::{Duration, Instant};

use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use livewatch::client::{Session, StreamHandle};
use livewatch::dsl::{self, Aggregator, WindowMode};
use livewatch::engine::{Output, StreamItem, StreamProcessor};
use livewatch::persistence::{self, Speed, StreamWriter};
use livewatch::trainer::{self, Trainer, TrainerConfig};
use livewatch::wire::{self, DataKind, DataMessage, WireMessage};
use livewatch::{Agent, AgentConfig, Record, Value};
use support::{approx_eq, fold, split_windows, Sample};

type Check = fn() -> Result<String, String>;

const GOLDEN_FIRST_EPOCH_LOSS: f64 = 0.19253741185567785;
const GOLDEN_FINAL_EPOCH_LOSS: f64 = 0.04800083992396516;
const WAIT: Duration = Duration::from_secs(10);

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("windowed map-reduce oracle equivalence", oracle_equivalence),
        ("idle overhead", idle_overhead),
        ("lazy pull", lazy_pull),
        ("end-to-end aggregation", end_to_end_aggregation),
        ("gradient correctness", gradient_correctness),
        ("persistence round trip", persistence_round_trip),
        ("multi-client isolation", multi_client_isolation),
        ("live mutation", live_mutation),
        ("protocol round trip", protocol_round_trip),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name} [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} [{secs:.1}s] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn oracle_equivalence() -> Result<String, String> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c1e);
    let aggs = [
        Aggregator::Sum,
        Aggregator::Avg,
        Aggregator::Min,
        Aggregator::Max,
        Aggregator::Count,
        Aggregator::Last,
        Aggregator::Hist(5),
    ];
    let mut runs = 0;
    let mut emissions = 0;
    for case in 0..1000 {
        let len = rng.gen_range(0..=1000);
        let b_rate = rng.gen_range(0.0..0.3);
        let ints = rng.gen_bool(0.5);
        let mut t = 0.0;
        let items: Vec<Sample> = (0..len)
            .map(|_| {
                t += rng.gen_range(0.0..0.1);
                let x = if ints || rng.gen_bool(0.2) {
                    Value::Int(rng.gen_range(-1000..=1000))
                } else {
                    Value::Float(rng.gen_range(-1e3..1e3))
                };
                Sample { x, keep: rng.gen_bool(0.7), b: rng.gen_bool(b_rate), t }
            })
            .collect();
        let filtered = case % 2 == 1;
        let windows = [WindowMode::Group, WindowMode::Count(rng.gen_range(1..=50)), WindowMode::Time(rng.gen_range(0.05..3.0))];
        let events: Vec<Value> = items
            .iter()
            .map(|s| {
                let mut r = Record::new();
                r.insert("x".into(), s.x.clone());
                r.insert("keep".into(), Value::Bool(s.keep));
                Value::Record(r)
            })
            .collect();
        for agg in aggs {
            for window in windows {
                let lambda = if agg == Aggregator::Count { "" } else { ", b -> b.x" };
                let filter = if filtered { "where(b -> b.keep) | " } else { "" };
                let query = format!("{filter}reduce({agg}{lambda}) | window({window})");
                let mut p = StreamProcessor::new(&dsl::parse(&query).map_err(|e| e.to_string())?);
                let mut got = Vec::new();
                for (i, (s, ev)) in items.iter().zip(&events).enumerate() {
                    match p.post(&StreamItem::new(ev.clone()).group_end(s.b).at(i as u64, s.t)) {
                        Output::Emit(v) => got.push(v),
                        Output::Silent => {}
                        Output::Error(e) => return Err(format!("case {case} {query}: unexpected error {e}")),
                    }
                }
                if let Output::Emit(v) = p.flush() {
                    got.push(v);
                }
                let want: Vec<Value> = split_windows(&items, window, filtered).iter().map(|w| fold(agg, w)).collect();
                ensure(got.len() == want.len(), || format!("case {case} {query}: {} emissions, oracle {}", got.len(), want.len()))?;
                for (g, w) in got.iter().zip(&want) {
                    ensure(approx_eq(g, w, 1e-9), || format!("case {case} {query}: {g} vs oracle {w}"))?;
                }
                runs += 1;
                emissions += got.len();
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1}s, limit 30s"))?;
    Ok(format!("{runs} runs, {emissions} emissions matched in {secs:.1}s"))
}

fn idle_overhead() -> Result<String, String> {
    let config = TrainerConfig { epochs: 10, batches_per_epoch: 100, ..TrainerConfig::default() };
    let mut agent = Agent::serve(AgentConfig::ephemeral()).map_err(|e| e.to_string())?;
    for i in 0..10_000 {
        agent.register_observable(&format!("dummy{i}"), move || Value::Int(i)).map_err(|e| e.to_string())?;
    }
    let with_agent = Trainer::new(config.clone()).map_err(|e| e.to_string())?;
    with_agent.instrument(&mut agent).map_err(|e| e.to_string())?;
    let without = Trainer::new(config).map_err(|e| e.to_string())?;

    let mut base = Vec::new();
    let mut instrumented = Vec::new();
    without.run(None);
    for _ in 0..15 {
        let t = Instant::now();
        without.run(None);
        base.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        with_agent.run(Some(&mut agent));
        instrumented.push(t.elapsed().as_secs_f64());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (b, a) = (median(&mut base), median(&mut instrumented));
    let pulls = agent.total_pulls();
    ensure(pulls == 0, || format!("{pulls} observable pulls with no streams"))?;
    let ratio = a / b;
    ensure(ratio <= 1.05, || format!("median {a:.4}s with agent vs {b:.4}s without ({:+.1}%)", (ratio - 1.0) * 100.0))?;
    Ok(format!("0 pulls, median {a:.4}s vs {b:.4}s ({:+.2}%)", (ratio - 1.0) * 100.0))
}

fn lazy_pull() -> Result<String, String> {
    let mut agent = Agent::in_process();
    let trainer = Trainer::new(TrainerConfig::default()).map_err(|e| e.to_string())?;
    trainer.instrument(&mut agent).map_err(|e| e.to_string())?;
    for i in 0..100 {
        agent.register_observable(&format!("dummy{i}"), move || Value::Int(i)).map_err(|e| e.to_string())?;
    }
    let reply = agent.handle_control(WireMessage::CreateStream { event: "batch".into(), query: "map(b -> b.loss)".into(), stream_id: None });
    ensure(matches!(reply, WireMessage::Ok(_)), || format!("create failed: {reply:?}"))?;
    let summary = trainer.run(Some(&mut agent));
    let loss_pulls = agent.pull_count("loss").unwrap_or(0);
    ensure(loss_pulls == summary.batches_run, || format!("loss pulled {loss_pulls} times for {} batches", summary.batches_run))?;
    let others = agent.total_pulls() - loss_pulls;
    ensure(others == 0, || format!("{others} pulls of observables other than loss"))?;
    Ok(format!("loss pulled {loss_pulls} times, every other observable 0 times"))
}

/// Messages until `closed`, which is not included.
fn drain_until_closed(h: &StreamHandle) -> Result<Vec<DataMessage>, String> {
    let mut out = Vec::new();
    loop {
        let m = h.recv_timeout(WAIT).map_err(|e| format!("stream {}: {e}", h.id()))?;
        if m.kind == DataKind::Closed {
            return Ok(out);
        }
        out.push(m);
    }
}

fn item_values(msgs: &[DataMessage]) -> Result<Vec<Value>, String> {
    msgs.iter()
        .map(|m| match m.kind {
            DataKind::Item => Ok(m.value.clone().unwrap_or(Value::Null)),
            _ => Err(format!("unexpected {:?} message at seq {}", m.kind, m.seq)),
        })
        .collect()
}

fn end_to_end_aggregation() -> Result<String, String> {
    let config = TrainerConfig { seed: 42, ..TrainerConfig::default() };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut agent = Agent::serve(AgentConfig::ephemeral()).map_err(|e| e.to_string())?;
    let trainer = Trainer::new(config.clone()).map_err(|e| e.to_string())?;
    trainer.instrument(&mut agent).map_err(|e| e.to_string())?;
    let session = Session::open(agent.control_addr().unwrap()).map_err(|e| e.to_string())?;
    let avg = session.create_stream("batch", "reduce(avg, b -> b.loss)", None).map_err(|e| e.to_string())?;
    let losses = session.create_stream("batch", "map(b -> b.loss)", None).map_err(|e| e.to_string())?;
    let path = dir.path().join("loss.twstream");
    persistence::record(&losses, &path).map_err(|e| e.to_string())?;

    let summary = trainer.run(Some(&mut agent));
    agent.shutdown();
    let avgs: Vec<f64> = item_values(&drain_until_closed(&avg)?)?.iter().filter_map(Value::as_f64).collect();
    drain_until_closed(&losses)?;

    let recorded: Vec<f64> = persistence::replay(&path, Speed::Max)
        .map_err(|e| e.to_string())?
        .map(|m| m.map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|m| m.kind == DataKind::Item)
        .filter_map(|m| m.value.and_then(|v| v.as_f64()))
        .collect();
    let per_epoch = config.batches_per_epoch as usize;
    ensure(recorded.len() == per_epoch * config.epochs as usize, || format!("recording holds {} losses", recorded.len()))?;
    let offline: Vec<f64> = recorded.chunks(per_epoch).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();

    ensure(avgs.len() == config.epochs as usize, || format!("{} avg emissions for {} epochs", avgs.len(), config.epochs))?;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
    for (i, (a, o)) in avgs.iter().zip(&offline).enumerate() {
        ensure(rel(*a, *o) <= 1e-9, || format!("epoch {i}: streamed {a} vs offline {o}"))?;
    }
    ensure(avgs[avgs.len() - 1] < avgs[0], || format!("final epoch mean {} not below first {}", avgs[avgs.len() - 1], avgs[0]))?;
    ensure(rel(avgs[0], GOLDEN_FIRST_EPOCH_LOSS) <= 1e-9, || format!("first epoch {} vs golden {GOLDEN_FIRST_EPOCH_LOSS}", avgs[0]))?;
    let last = avgs[avgs.len() - 1];
    ensure(rel(last, GOLDEN_FINAL_EPOCH_LOSS) <= 1e-9, || format!("final epoch {last} vs golden {GOLDEN_FINAL_EPOCH_LOSS}"))?;
    ensure(summary.epoch_losses == avgs || avgs.iter().zip(&summary.epoch_losses).all(|(a, b)| rel(*a, *b) <= 1e-9), || {
        "stream disagrees with trainer summary".into()
    })?;
    Ok(format!("{} epochs, first {:.6} -> final {:.6}, all within 1e-9 of offline means", avgs.len(), avgs[0], last))
}

fn gradient_correctness() -> Result<String, String> {
    let config = TrainerConfig { seed: 7, layer_sizes: vec![2, 3, 1], batch_size: 4, ..TrainerConfig::default() };
    let params = trainer::Mlp::zeros(&config.layer_sizes).params();
    ensure(params <= 30, || format!("{params} parameters"))?;
    let err = trainer::gradient_check(&config).map_err(|e| e.to_string())?;
    ensure(err < 1e-4, || format!("max relative error {err:e}"))?;
    Ok(format!("{params} parameters, max relative error {err:.3e}"))
}

fn persistence_round_trip() -> Result<String, String> {
    let config = TrainerConfig { epochs: 3, batches_per_epoch: 20, ..TrainerConfig::default() };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut agent = Agent::serve(AgentConfig::ephemeral()).map_err(|e| e.to_string())?;
    let trainer = Trainer::new(config).map_err(|e| e.to_string())?;
    trainer.instrument(&mut agent).map_err(|e| e.to_string())?;
    let session = Session::open(agent.control_addr().unwrap()).map_err(|e| e.to_string())?;
    let h = session.create_stream("batch", "map(b -> b.sample_pred)", None).map_err(|e| e.to_string())?;
    let first = dir.path().join("first.twstream");
    persistence::record(&h, &first).map_err(|e| e.to_string())?;
    trainer.run(Some(&mut agent));
    agent.shutdown();
    let live = item_values(&drain_until_closed(&h)?)?;

    let replay = persistence::replay(&first, Speed::Max).map_err(|e| e.to_string())?;
    let second = dir.path().join("second.twstream");
    let mut writer = StreamWriter::create(&second, replay.header()).map_err(|e| e.to_string())?;
    let mut replayed = Vec::new();
    for m in replay {
        let m = m.map_err(|e| e.to_string())?;
        writer.write(&m).map_err(|e| e.to_string())?;
        if m.kind == DataKind::Item {
            replayed.push(m.value.clone().unwrap_or(Value::Null));
        }
    }
    drop(writer);
    let body = |p: &std::path::Path| -> Result<Vec<u8>, String> {
        let bytes = std::fs::read(p).map_err(|e| e.to_string())?;
        let at = bytes.iter().position(|b| *b == b'\n').ok_or("no header line")?;
        Ok(bytes[at + 1..].to_vec())
    };
    let (a, b) = (body(&first)?, body(&second)?);
    ensure(a == b, || "re-recorded body differs from the original".into())?;
    ensure(replayed == live, || format!("replayed {} values, live {}", replayed.len(), live.len()))?;
    let lines = a.iter().filter(|c| **c == b'\n').count();
    Ok(format!("{lines} body lines byte-identical, {} values equal to live", live.len()))
}

/// Checks seqs are consecutive apart from gaps announced by `dropped`
/// notices; returns the items by seq.
fn check_seqs(msgs: &[DataMessage]) -> Result<(Vec<(u64, Value)>, u64), String> {
    let mut next = 0u64;
    let mut items = Vec::new();
    let mut dropped = 0;
    for m in msgs {
        match m.kind {
            DataKind::Dropped => {
                let lost = m.count.unwrap_or(0);
                ensure(m.seq + 1 >= next && m.seq + 1 - next == lost, || {
                    format!("dropped notice seq {} count {lost} does not cover gap from {next}", m.seq)
                })?;
                dropped += lost;
                next = m.seq + 1;
            }
            DataKind::Item => {
                ensure(m.seq == next, || format!("seq {} where {next} expected", m.seq))?;
                items.push((m.seq, m.value.clone().unwrap_or(Value::Null)));
                next += 1;
            }
            other => return Err(format!("unexpected {other:?} message")),
        }
    }
    Ok((items, dropped))
}

fn multi_client_isolation() -> Result<String, String> {
    const EVENTS: i64 = 10_000;
    let mut agent = Agent::serve(AgentConfig::ephemeral()).map_err(|e| e.to_string())?;
    let counter = std::sync::Arc::new(std::sync::atomic::AtomicI64::new(0));
    let c = counter.clone();
    agent.register_observable("n", move || Value::Int(c.load(std::sync::atomic::Ordering::SeqCst))).map_err(|e| e.to_string())?;
    agent.declare_event("tick");
    let addr = agent.control_addr().unwrap();
    let a = Session::open(addr).map_err(|e| e.to_string())?;
    let b = Session::open(addr).map_err(|e| e.to_string())?;
    let ha = a.create_stream("tick", "where(b -> b.n % 2 == 0) | map(b -> b.n)", None).map_err(|e| e.to_string())?;
    let hb = b.create_stream("tick", "map(b -> b.n * 3 + 1)", None).map_err(|e| e.to_string())?;

    let (ra, rb) = std::thread::scope(|s| {
        let ja = s.spawn(|| drain_until_closed(&ha));
        let jb = s.spawn(|| drain_until_closed(&hb));
        for i in 0..EVENTS {
            counter.store(i, std::sync::atomic::Ordering::SeqCst);
            agent.notify("tick", false);
        }
        agent.shutdown();
        (ja.join().unwrap(), jb.join().unwrap())
    });
    let (ma, mb) = (ra?, rb?);
    for (h, msgs) in [(&ha, &ma), (&hb, &mb)] {
        let foreign = h.foreign_messages() + msgs.iter().filter(|m| m.stream != h.id()).count() as u64;
        ensure(foreign == 0, || format!("{foreign} foreign messages on {}", h.id()))?;
        ensure(h.unexplained_gaps() == 0, || format!("{} unexplained gaps on {}", h.unexplained_gaps(), h.id()))?;
    }
    let (ia, da) = check_seqs(&ma).map_err(|e| format!("session A: {e}"))?;
    let (ib, db) = check_seqs(&mb).map_err(|e| format!("session B: {e}"))?;
    for (seq, v) in &ia {
        ensure(*v == Value::Int(2 * *seq as i64), || format!("session A seq {seq}: {v}"))?;
    }
    for (seq, v) in &ib {
        ensure(*v == Value::Int(3 * *seq as i64 + 1), || format!("session B seq {seq}: {v}"))?;
    }
    ensure(ia.len() as u64 + da == EVENTS as u64 / 2, || format!("session A accounted for {} of {}", ia.len() as u64 + da, EVENTS / 2))?;
    ensure(ib.len() as u64 + db == EVENTS as u64, || format!("session B accounted for {} of {EVENTS}", ib.len() as u64 + db))?;
    Ok(format!("A {} items ({da} dropped), B {} items ({db} dropped), 0 cross-talk", ia.len(), ib.len()))
}

fn live_mutation() -> Result<String, String> {
    let config = TrainerConfig { epochs: 5, batches_per_epoch: 20, batch_delay: Duration::from_millis(10), ..TrainerConfig::default() };
    let (addr_tx, addr_rx) = mpsc::channel();
    let (go_tx, go_rx) = mpsc::channel::<()>();
    let host = std::thread::spawn(move || -> Result<trainer::TrainSummary, String> {
        let mut agent = Agent::serve(AgentConfig::ephemeral()).map_err(|e| e.to_string())?;
        let trainer = Trainer::new(config).map_err(|e| e.to_string())?;
        trainer.instrument(&mut agent).map_err(|e| e.to_string())?;
        addr_tx.send(agent.control_addr().unwrap()).unwrap();
        go_rx.recv().map_err(|e| e.to_string())?;
        let s = trainer.run(Some(&mut agent));
        agent.shutdown();
        Ok(s)
    });
    let addr = addr_rx.recv_timeout(WAIT).map_err(|e| e.to_string())?;
    let session = Session::open(addr).map_err(|e| e.to_string())?;
    let lr = session.create_stream("batch", "map(b -> b.lr)", None).map_err(|e| e.to_string())?;
    let epoch = session.create_stream("batch", "map(b -> b.epoch)", None).map_err(|e| e.to_string())?;
    go_tx.send(()).unwrap();

    let mut lr_msgs = Vec::new();
    while lr_msgs.len() < 5 {
        lr_msgs.push(lr.recv_timeout(WAIT).map_err(|e| e.to_string())?);
    }
    let sent = livewatch::agent::now_seconds();
    session.set_observable("lr", Value::Float(0.01), None).map_err(|e| e.to_string())?;
    let acked = livewatch::agent::now_seconds();

    let mut epochs = Vec::new();
    let mut stop_at = None;
    loop {
        let m = epoch.recv_timeout(WAIT).map_err(|e| e.to_string())?;
        if m.kind == DataKind::Closed {
            break;
        }
        let e = m.value.as_ref().and_then(Value::as_f64).unwrap_or(-1.0) as i64;
        epochs.push(e);
        if e == 1 && stop_at.is_none() {
            session.set_observable("stop_requested", Value::Bool(true), None).map_err(|e| e.to_string())?;
            stop_at = Some(epochs.len());
        }
    }
    lr_msgs.extend(drain_until_closed(&lr)?);
    let summary = host.join().map_err(|_| "host panicked".to_string())??;

    let mut switched = 0;
    for m in &lr_msgs {
        let v = m.value.as_ref().and_then(Value::as_f64).unwrap_or(f64::NAN);
        if m.t < sent {
            ensure(v == 0.05, || format!("lr {v} at seq {} before the set was sent", m.seq))?;
        } else if m.t >= acked {
            ensure(v == 0.01, || format!("lr {v} at seq {} after the set was acknowledged", m.seq))?;
            switched += 1;
        }
    }
    ensure(switched > 0, || "no batches after the lr change".into())?;
    let max_epoch = epochs.iter().copied().max().unwrap_or(-1);
    ensure(summary.stopped, || "run was not stopped".into())?;
    ensure(max_epoch == 1, || format!("batches ran in epoch {max_epoch}"))?;
    ensure(summary.epochs_completed <= 2, || format!("{} epochs completed", summary.epochs_completed))?;
    Ok(format!("lr switched for {switched} later batches; stop after {} batches, last epoch index {max_epoch}", summary.batches_run))
}

fn protocol_round_trip() -> Result<String, String> {
    let mut runner = TestRunner::new_with_rng(Config::default(), TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let strategy = support::gen::arb_wire_message();
    let mut msgs: Vec<WireMessage> = (0..990)
        .map(|_| strategy.new_tree(&mut runner).map(|t| t.current()).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    for special in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY, -0.0, f64::MIN_POSITIVE, f64::MAX] {
        msgs.push(WireMessage::Data(DataMessage::item("s", 1, 0.5, Value::Float(special))));
    }
    for s in ["NaN", "Inf", "-Inf", "\\u004eaN"] {
        msgs.push(WireMessage::SetObservable { name: s.into(), value: Value::from(s), at_event: Some(s.into()) });
    }
    let mut nonfinite = 0;
    for (i, m) in msgs.iter().enumerate() {
        let line = wire::encode(m);
        nonfinite += line.matches("\"NaN\"").count() + line.matches("Inf\"").count();
        let back = wire::decode(line.as_bytes()).map_err(|e| format!("message {i}: {e}\n{line}"))?;
        ensure(&back == m, || format!("message {i} changed:\n{m:?}\n{back:?}"))?;
        ensure(wire::encode(&back) == line, || format!("message {i} re-encodes differently"))?;
    }
    Ok(format!("{} messages, {nonfinite} non-finite float or look-alike string encodings", msgs.len()))
}
