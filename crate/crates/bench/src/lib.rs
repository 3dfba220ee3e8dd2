//! Shared inputs for the benchmarks.

use livewatch::{Record, Value};

/// A trainer-like batch record.
pub fn batch_record(i: i64) -> Value {
    let mut r = Record::new();
    r.insert("epoch".into(), Value::Int(i / 50));
    r.insert("batch".into(), Value::Int(i % 50));
    r.insert("loss".into(), Value::Float(1.0 / (i + 1) as f64));
    r.insert("duration".into(), Value::Float(0.0004 + (i % 7) as f64 * 1e-5));
    r.insert("grad_abs_mean".into(), Value::List(vec![Value::Float(0.02), Value::Float(0.15)]));
    Value::Record(r)
}
