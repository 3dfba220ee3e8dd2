use std::cmp::Ordering;

use crate::dsl::{compare_numbers, evaluate, Aggregator, EvalError, Lambda, StageScope, WindowMode};
use crate::value::{Record, Value};

use super::StreamItem;

#[derive(Debug, Clone, Copy)]
enum Num {
    Int(i64),
    Float(f64),
}

impl Num {
    fn from_value(v: &Value, agg: Aggregator) -> Result<Num, EvalError> {
        match *v {
            Value::Int(i) => Ok(Num::Int(i)),
            Value::Float(f) => Ok(Num::Float(f)),
            ref other => Err(EvalError::new(format!("reduce({agg}) expects numbers, got {}", other.kind()))),
        }
    }

    fn add(self, other: Num) -> Result<Num, EvalError> {
        match (self, other) {
            (Num::Int(a), Num::Int(b)) => a.checked_add(b).map(Num::Int).ok_or_else(|| EvalError::new("integer overflow in sum")),
            (a, b) => Ok(Num::Float(a.as_f64() + b.as_f64())),
        }
    }

    fn as_f64(self) -> f64 {
        match self {
            Num::Int(i) => i as f64,
            Num::Float(f) => f,
        }
    }

    fn into_value(self) -> Value {
        match self {
            Num::Int(i) => Value::Int(i),
            Num::Float(f) => Value::Float(f),
        }
    }
}

/// A validated, not yet applied, contribution to the accumulator.
enum Delta {
    Sum(Num),
    Extremum(Option<Value>),
    Last(Value),
    Count,
    Sample(f64),
}

#[derive(Debug, Clone, Default)]
struct Acc {
    n: u64,
    sum: Option<Num>,
    extremum: Option<Value>,
    last: Option<Value>,
    samples: Vec<f64>,
}

impl Acc {
    fn prepare(&self, agg: Aggregator, v: Value) -> Result<Delta, EvalError> {
        Ok(match agg {
            Aggregator::Sum | Aggregator::Avg => {
                let x = Num::from_value(&v, agg)?;
                Delta::Sum(match self.sum {
                    None => x,
                    Some(s) => s.add(x)?,
                })
            }
            Aggregator::Min | Aggregator::Max => {
                Num::from_value(&v, agg)?;
                let want = if agg == Aggregator::Min { Ordering::Less } else { Ordering::Greater };
                let replace = match &self.extremum {
                    None => true,
                    Some(cur) => compare_numbers(&v, cur) == Some(want),
                };
                Delta::Extremum(replace.then_some(v))
            }
            Aggregator::Count => Delta::Count,
            Aggregator::Last => Delta::Last(v),
            Aggregator::Hist(_) => {
                let x = Num::from_value(&v, agg)?.as_f64();
                if !x.is_finite() {
                    return Err(EvalError::new("reduce(hist) expects finite numbers"));
                }
                Delta::Sample(x)
            }
        })
    }

    fn apply(&mut self, d: Delta) {
        self.n += 1;
        match d {
            Delta::Sum(s) => self.sum = Some(s),
            Delta::Extremum(Some(v)) => self.extremum = Some(v),
            Delta::Extremum(None) | Delta::Count => {}
            Delta::Last(v) => self.last = Some(v),
            Delta::Sample(x) => self.samples.push(x),
        }
    }

    fn result(self, agg: Aggregator) -> Option<Value> {
        if self.n == 0 {
            return None;
        }
        match agg {
            Aggregator::Sum => self.sum.map(Num::into_value),
            Aggregator::Avg => self.sum.map(|s| Value::Float(s.as_f64() / self.n as f64)),
            Aggregator::Min | Aggregator::Max => self.extremum,
            Aggregator::Count => Some(Value::Int(self.n as i64)),
            Aggregator::Last => self.last,
            Aggregator::Hist(k) => Some(histogram(&self.samples, k)),
        }
    }
}

/// Equal-width histogram of finite samples.
///
/// Edges run from the sample minimum to the maximum; the last bin is closed
/// on the right. When every sample is equal the result is a single bin
/// `[min, min + 1]`.
pub fn histogram(samples: &[f64], bins: usize) -> Value {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (edges, counts) = if samples.is_empty() {
        (Vec::new(), Vec::new())
    } else if lo == hi {
        (vec![lo, lo + 1.0], vec![samples.len() as i64])
    } else {
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|i| lo + i as f64 * width).collect();
        edges.push(hi);
        let mut counts = vec![0i64; bins];
        for &x in samples {
            let mut i = (((x - lo) / width) as usize).min(bins - 1);
            // Align with the edge comparisons so rounding never misplaces a sample.
            while i > 0 && x < edges[i] {
                i -= 1;
            }
            while i + 1 < bins && x >= edges[i + 1] {
                i += 1;
            }
            counts[i] += 1;
        }
        (edges, counts)
    };
    Value::record([
        ("edges", Value::List(edges.into_iter().map(Value::Float).collect())),
        ("counts", Value::List(counts.into_iter().map(Value::Int).collect())),
    ])
}

#[derive(Debug, Clone)]
pub(super) struct Reducer {
    agg: Aggregator,
    lambda: Option<Lambda>,
    window: WindowMode,
    acc: Acc,
    window_start: Option<f64>,
}

impl Reducer {
    pub(super) fn new(agg: Aggregator, lambda: Option<Lambda>, window: WindowMode) -> Self {
        Reducer { agg, lambda, window, acc: Acc::default(), window_start: None }
    }

    pub(super) fn window(&self) -> WindowMode {
        self.window
    }

    pub(super) fn pending(&self) -> u64 {
        self.acc.n
    }

    pub(super) fn reset(&mut self) {
        self.acc = Acc::default();
        self.window_start = None;
    }

    pub(super) fn close(&mut self) -> Option<Value> {
        self.window_start = None;
        std::mem::take(&mut self.acc).result(self.agg)
    }

    pub(super) fn accept(&mut self, value: Value, event: Option<&Record>, item: &StreamItem) -> Result<Option<Value>, EvalError> {
        let v = match &self.lambda {
            Some(l) => evaluate(&l.body, &StageScope { binder: &l.binder, value: &value, event })?,
            None => value,
        };
        match self.window {
            WindowMode::Group => {
                let d = self.acc.prepare(self.agg, v)?;
                self.acc.apply(d);
                Ok(if item.group_end { self.close() } else { None })
            }
            WindowMode::Count(n) => {
                let d = self.acc.prepare(self.agg, v)?;
                self.acc.apply(d);
                Ok(if self.acc.n >= n { self.close() } else { None })
            }
            WindowMode::Time(secs) => {
                let expired = self.window_start.is_some_and(|start| item.t_wall >= start + secs);
                let d = if expired { Acc::default().prepare(self.agg, v)? } else { self.acc.prepare(self.agg, v)? };
                let out = if expired { self.close() } else { None };
                if self.window_start.is_none() {
                    self.window_start = Some(item.t_wall);
                }
                self.acc.apply(d);
                Ok(out)
            }
        }
    }
}
