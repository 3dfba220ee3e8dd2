//! Independent oracles and generators shared by the property and
//! acceptance tests. Nothing here calls into the engine or evaluator.
#![allow(dead_code)]

pub mod gen;

use livewatch::dsl::{Aggregator, BinaryOp, Builtin, Expr, UnaryOp, WindowMode};
use livewatch::{Record, Value};

/// One input to the windowed oracle.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Value,
    pub keep: bool,
    pub b: bool,
    pub t: f64,
}

/// Splits `items` into the windows the engine should emit for, in order,
/// including the partial window a stream close flushes.
pub fn split_windows(items: &[Sample], window: WindowMode, filtered: bool) -> Vec<Vec<Value>> {
    let accepted = |s: &Sample| !filtered || s.keep;
    let mut out = Vec::new();
    match window {
        WindowMode::Group => {
            let mut group = Vec::new();
            for s in items {
                if accepted(s) {
                    group.push(s.x.clone());
                }
                if s.b {
                    out.push(std::mem::take(&mut group));
                }
            }
        }
        WindowMode::Count(n) => {
            let xs: Vec<Value> = items.iter().filter(|s| accepted(s)).map(|s| s.x.clone()).collect();
            for chunk in xs.chunks(n as usize) {
                out.push(chunk.to_vec());
            }
        }
        WindowMode::Time(secs) => {
            let mut start = None;
            let mut cur = Vec::new();
            for s in items.iter().filter(|s| accepted(s)) {
                match start {
                    Some(t0) if s.t >= t0 + secs => {
                        out.push(std::mem::take(&mut cur));
                        start = Some(s.t);
                    }
                    None => start = Some(s.t),
                    _ => {}
                }
                cur.push(s.x.clone());
            }
            out.push(cur);
        }
    }
    out.retain(|w| !w.is_empty());
    out
}

fn to_f64(v: &Value) -> f64 {
    match v {
        Value::Int(i) => *i as f64,
        Value::Float(f) => *f,
        other => panic!("oracle expects numbers, got {other:?}"),
    }
}

fn less(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => x < y,
        _ => to_f64(a) < to_f64(b),
    }
}

/// Brute-force fold of one non-empty window.
pub fn fold(agg: Aggregator, xs: &[Value]) -> Value {
    let all_int = xs.iter().all(|v| matches!(v, Value::Int(_)));
    match agg {
        Aggregator::Count => Value::Int(xs.len() as i64),
        Aggregator::Last => xs.last().unwrap().clone(),
        Aggregator::Sum if all_int => Value::Int(xs.iter().map(|v| if let Value::Int(i) = v { *i } else { 0 }).sum()),
        Aggregator::Sum => Value::Float(xs.iter().map(to_f64).sum()),
        Aggregator::Avg => Value::Float(xs.iter().map(to_f64).sum::<f64>() / xs.len() as f64),
        Aggregator::Min => xs.iter().fold(xs[0].clone(), |m, v| if less(v, &m) { v.clone() } else { m }),
        Aggregator::Max => xs.iter().fold(xs[0].clone(), |m, v| if less(&m, v) { v.clone() } else { m }),
        Aggregator::Hist(k) => reference_histogram(&xs.iter().map(to_f64).collect::<Vec<_>>(), k),
    }
}

/// Edges split [min, max] evenly; a sample lands in the last bin whose
/// lower edge it reaches, the maximum in the final bin.
pub fn reference_histogram(xs: &[f64], k: usize) -> Value {
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (edges, counts) = if lo == hi {
        (vec![lo, lo + 1.0], vec![xs.len() as i64])
    } else {
        let width = (hi - lo) / k as f64;
        let mut edges: Vec<f64> = (0..k).map(|i| lo + i as f64 * width).collect();
        edges.push(hi);
        let mut counts = vec![0i64; k];
        for &x in xs {
            let bin = (0..k).rev().find(|&i| x >= edges[i]).unwrap_or(0);
            counts[bin] += 1;
        }
        (edges, counts)
    };
    let mut r = Record::new();
    r.insert("edges".into(), Value::List(edges.into_iter().map(Value::Float).collect()));
    r.insert("counts".into(), Value::List(counts.into_iter().map(Value::Int).collect()));
    Value::Record(r)
}

/// Exact for ints and structure, relative tolerance for floats.
pub fn approx_eq(a: &Value, b: &Value, rel: f64) -> bool {
    match (a, b) {
        (Value::Float(x), Value::Float(y)) => {
            (x.is_nan() && y.is_nan()) || x == y || (x - y).abs() <= rel * x.abs().max(y.abs())
        }
        (Value::List(x), Value::List(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| approx_eq(p, q, rel)),
        (Value::Record(x), Value::Record(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|((k1, v1), (k2, v2))| k1 == k2 && approx_eq(v1, v2, rel))
        }
        _ => a == b,
    }
}

/// Reference evaluator: `Err(())` stands for any evaluation error.
pub fn ref_eval(e: &Expr, env: &Record) -> Result<Value, ()> {
    match e {
        Expr::Literal(v) => Ok(v.clone()),
        Expr::Ident(n) => env.get(n).cloned().ok_or(()),
        Expr::Field(base, f) => match ref_eval(base, env)? {
            Value::Record(r) => r.get(f).cloned().ok_or(()),
            _ => Err(()),
        },
        Expr::Index(base, idx) => {
            let i = ref_eval(idx, env)?;
            match (ref_eval(base, env)?, i) {
                (Value::List(l), Value::Int(i)) if i >= 0 => l.get(i as usize).cloned().ok_or(()),
                _ => Err(()),
            }
        }
        Expr::Unary(UnaryOp::Neg, x) => match ref_eval(x, env)? {
            Value::Int(i) => int(-(i as i128)),
            Value::Float(f) => Ok(Value::Float(-f)),
            _ => Err(()),
        },
        Expr::Unary(UnaryOp::Not, x) => match ref_eval(x, env)? {
            Value::Bool(b) => Ok(Value::Bool(!b)),
            _ => Err(()),
        },
        Expr::Binary(BinaryOp::And, l, r) => match ref_eval(l, env)? {
            Value::Bool(false) => Ok(Value::Bool(false)),
            Value::Bool(true) => boolean(ref_eval(r, env)?),
            _ => Err(()),
        },
        Expr::Binary(BinaryOp::Or, l, r) => match ref_eval(l, env)? {
            Value::Bool(true) => Ok(Value::Bool(true)),
            Value::Bool(false) => boolean(ref_eval(r, env)?),
            _ => Err(()),
        },
        Expr::Binary(op, l, r) => {
            let a = ref_eval(l, env)?;
            let b = ref_eval(r, env)?;
            ref_binary(*op, a, b)
        }
        Expr::Call(f, args) => {
            let vals: Vec<Value> = args.iter().map(|a| ref_eval(a, env)).collect::<Result<_, _>>()?;
            ref_call(*f, &vals)
        }
    }
}

fn int(x: i128) -> Result<Value, ()> {
    i64::try_from(x).map(Value::Int).map_err(|_| ())
}

fn boolean(v: Value) -> Result<Value, ()> {
    matches!(v, Value::Bool(_)).then_some(v).ok_or(())
}

fn number(v: &Value) -> Result<f64, ()> {
    match v {
        Value::Int(i) => Ok(*i as f64),
        Value::Float(f) => Ok(*f),
        _ => Err(()),
    }
}

fn ref_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => x == y,
        (Value::Int(_) | Value::Float(_), Value::Int(_) | Value::Float(_)) => number(a) == number(b),
        (Value::List(x), Value::List(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| ref_equal(p, q)),
        (Value::Record(x), Value::Record(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| ref_equal(v, w)))
        }
        (Value::Null, Value::Null) => true,
        (Value::Bool(x), Value::Bool(y)) => x == y,
        (Value::Str(x), Value::Str(y)) => x == y,
        _ => false,
    }
}

fn ref_binary(op: BinaryOp, a: Value, b: Value) -> Result<Value, ()> {
    use BinaryOp::*;
    match op {
        Eq => return Ok(Value::Bool(ref_equal(&a, &b))),
        Ne => return Ok(Value::Bool(!ref_equal(&a, &b))),
        _ => {}
    }
    if let (Value::Int(x), Value::Int(y)) = (&a, &b) {
        let (x, y) = (*x as i128, *y as i128);
        return match op {
            Add => int(x + y),
            Sub => int(x - y),
            Mul => int(x * y),
            Rem if y == 0 => Err(()),
            Rem => int(x % y),
            Div if y == 0 => Err(()),
            Div => Ok(Value::Float(x as f64 / y as f64)),
            Lt => Ok(Value::Bool(x < y)),
            Le => Ok(Value::Bool(x <= y)),
            Gt => Ok(Value::Bool(x > y)),
            Ge => Ok(Value::Bool(x >= y)),
            _ => unreachable!(),
        };
    }
    let (x, y) = (number(&a)?, number(&b)?);
    match op {
        Add => Ok(Value::Float(x + y)),
        Sub => Ok(Value::Float(x - y)),
        Mul => Ok(Value::Float(x * y)),
        Div if y == 0.0 => Err(()),
        Div => Ok(Value::Float(x / y)),
        Rem => Err(()),
        Lt => Ok(Value::Bool(x < y)),
        Le => Ok(Value::Bool(x <= y)),
        Gt => Ok(Value::Bool(x > y)),
        Ge => Ok(Value::Bool(x >= y)),
        _ => unreachable!(),
    }
}

fn ref_call(f: Builtin, a: &[Value]) -> Result<Value, ()> {
    let float = |x: f64| Ok(Value::Float(x));
    match f {
        Builtin::Abs => match a[0] {
            Value::Int(i) => int((i as i128).abs()),
            _ => float(number(&a[0])?.abs()),
        },
        Builtin::Sqrt => match number(&a[0])? {
            x if x < 0.0 => Err(()),
            x => float(x.sqrt()),
        },
        Builtin::Exp => float(number(&a[0])?.exp()),
        Builtin::Ln => match number(&a[0])? {
            x if x <= 0.0 => Err(()),
            x => float(x.ln()),
        },
        Builtin::Round => match a[0] {
            Value::Int(i) => Ok(Value::Int(i)),
            _ => float(number(&a[0])?.round()),
        },
        Builtin::Len => match &a[0] {
            Value::Str(s) => Ok(Value::Int(s.chars().count() as i64)),
            Value::List(l) => Ok(Value::Int(l.len() as i64)),
            Value::Record(r) => Ok(Value::Int(r.len() as i64)),
            _ => Err(()),
        },
        Builtin::Min | Builtin::Max => {
            let want_min = f == Builtin::Min;
            if let (Value::Int(x), Value::Int(y)) = (&a[0], &a[1]) {
                return Ok(Value::Int(if (x < y) == want_min { *x } else { *y }));
            }
            let (x, y) = (number(&a[0])?, number(&a[1])?);
            float(if want_min { x.min(y) } else { x.max(y) })
        }
        Builtin::Clamp => {
            if let (Value::Int(x), Value::Int(lo), Value::Int(hi)) = (&a[0], &a[1], &a[2]) {
                return if lo > hi { Err(()) } else { Ok(Value::Int((*x).max(*lo).min(*hi))) };
            }
            let (x, lo, hi) = (number(&a[0])?, number(&a[1])?, number(&a[2])?);
            if !(lo <= hi) {
                return Err(());
            }
            float(if x < lo { lo } else if x > hi { hi } else { x })
        }
    }
}
