use std::cmp::Ordering;
use std::collections::HashMap;

use super::ast::{BinaryOp, Builtin, Expr, UnaryOp};
use super::EvalError;
use crate::value::{Record, Value};

/// Name resolution for identifiers.
pub trait Scope {
    fn lookup(&self, name: &str) -> Option<&Value>;
}

impl Scope for HashMap<String, Value> {
    fn lookup(&self, name: &str) -> Option<&Value> {
        self.get(name)
    }
}

impl Scope for Record {
    fn lookup(&self, name: &str) -> Option<&Value> {
        self.get(name)
    }
}

/// One stage binder layered over the event record.
pub struct StageScope<'a> {
    pub binder: &'a str,
    pub value: &'a Value,
    pub event: Option<&'a Record>,
}

impl Scope for StageScope<'_> {
    fn lookup(&self, name: &str) -> Option<&Value> {
        if name == self.binder {
            Some(self.value)
        } else {
            self.event.and_then(|r| r.get(name))
        }
    }
}

fn err<T>(message: impl Into<String>) -> Result<T, EvalError> {
    Err(EvalError::new(message))
}

pub fn evaluate(expr: &Expr, scope: &dyn Scope) -> Result<Value, EvalError> {
    match expr {
        Expr::Literal(v) => Ok(v.clone()),
        Expr::Ident(name) => match scope.lookup(name) {
            Some(v) => Ok(v.clone()),
            None => err(format!("unknown identifier '{name}'")),
        },
        Expr::Field(base, field) => {
            // Borrow through identifiers to avoid cloning whole records.
            if let Expr::Ident(name) = base.as_ref() {
                if let Some(v) = scope.lookup(name) {
                    return field_of(v, field).cloned();
                }
            }
            let v = evaluate(base, scope)?;
            field_of(&v, field).cloned()
        }
        Expr::Index(base, idx) => {
            let i = evaluate(idx, scope)?;
            let v = evaluate(base, scope)?;
            index_of(&v, &i).cloned()
        }
        Expr::Unary(op, e) => unary(*op, evaluate(e, scope)?),
        Expr::Binary(BinaryOp::And, l, r) => match evaluate(l, scope)? {
            Value::Bool(false) => Ok(Value::Bool(false)),
            Value::Bool(true) => expect_bool(evaluate(r, scope)?, "&&"),
            other => err(format!("'&&' expects bool operands, got {}", other.kind())),
        },
        Expr::Binary(BinaryOp::Or, l, r) => match evaluate(l, scope)? {
            Value::Bool(true) => Ok(Value::Bool(true)),
            Value::Bool(false) => expect_bool(evaluate(r, scope)?, "||"),
            other => err(format!("'||' expects bool operands, got {}", other.kind())),
        },
        Expr::Binary(op, l, r) => {
            let a = evaluate(l, scope)?;
            let b = evaluate(r, scope)?;
            binary(*op, &a, &b)
        }
        Expr::Call(f, args) => {
            let vals = args.iter().map(|a| evaluate(a, scope)).collect::<Result<Vec<_>, _>>()?;
            call(*f, &vals)
        }
    }
}

fn expect_bool(v: Value, op: &str) -> Result<Value, EvalError> {
    match v {
        Value::Bool(_) => Ok(v),
        other => err(format!("'{op}' expects bool operands, got {}", other.kind())),
    }
}

fn field_of<'v>(v: &'v Value, field: &str) -> Result<&'v Value, EvalError> {
    match v {
        Value::Record(r) => r.get(field).ok_or_else(|| EvalError::new(format!("missing field '{field}'"))),
        other => err(format!("cannot read field '{field}' of {}", other.kind())),
    }
}

fn index_of<'v>(v: &'v Value, idx: &Value) -> Result<&'v Value, EvalError> {
    match (v, idx) {
        (Value::List(items), Value::Int(i)) => {
            if *i < 0 {
                return err(format!("negative index {i}"));
            }
            items.get(*i as usize).ok_or_else(|| EvalError::new(format!("index {i} out of range (len {})", items.len())))
        }
        (Value::List(_), other) => err(format!("list index must be int, got {}", other.kind())),
        (other, _) => err(format!("cannot index into {}", other.kind())),
    }
}

fn unary(op: UnaryOp, v: Value) -> Result<Value, EvalError> {
    match (op, v) {
        (UnaryOp::Neg, Value::Int(i)) => i.checked_neg().map(Value::Int).ok_or_else(|| EvalError::new("integer overflow")),
        (UnaryOp::Neg, Value::Float(f)) => Ok(Value::Float(-f)),
        (UnaryOp::Not, Value::Bool(b)) => Ok(Value::Bool(!b)),
        (UnaryOp::Neg, other) => err(format!("cannot negate {}", other.kind())),
        (UnaryOp::Not, other) => err(format!("'!' expects bool, got {}", other.kind())),
    }
}

/// Equality used by `==`/`!=`: numeric across Int/Float, structural otherwise,
/// `false` for mismatched kinds.
pub fn values_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => x == y,
        (Value::Int(_) | Value::Float(_), Value::Int(_) | Value::Float(_)) => a.as_f64() == b.as_f64(),
        (Value::Null, Value::Null) => true,
        (Value::Bool(x), Value::Bool(y)) => x == y,
        (Value::Str(x), Value::Str(y)) => x.as_bytes() == y.as_bytes(),
        (Value::List(x), Value::List(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| values_equal(p, q)),
        (Value::Record(x), Value::Record(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| values_equal(v, w)))
        }
        _ => false,
    }
}

/// Numeric ordering; `None` when either side is NaN.
pub fn compare_numbers(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => Some(x.cmp(y)),
        _ => a.as_f64()?.partial_cmp(&b.as_f64()?),
    }
}

fn arith_int(op: BinaryOp, x: i64, y: i64) -> Result<Value, EvalError> {
    let r = match op {
        BinaryOp::Add => x.checked_add(y),
        BinaryOp::Sub => x.checked_sub(y),
        BinaryOp::Mul => x.checked_mul(y),
        _ => unreachable!(),
    };
    r.map(Value::Int).ok_or_else(|| EvalError::new("integer overflow"))
}

fn binary(op: BinaryOp, a: &Value, b: &Value) -> Result<Value, EvalError> {
    use BinaryOp::*;
    match op {
        Add | Sub | Mul => match (a, b) {
            (Value::Int(x), Value::Int(y)) => arith_int(op, *x, *y),
            _ if a.is_numeric() && b.is_numeric() => {
                let (x, y) = (a.as_f64().unwrap(), b.as_f64().unwrap());
                Ok(Value::Float(match op {
                    Add => x + y,
                    Sub => x - y,
                    _ => x * y,
                }))
            }
            _ => err(format!("'{}' not defined for {} and {}", op.symbol(), a.kind(), b.kind())),
        },
        Div => match (a.as_f64(), b.as_f64()) {
            (Some(_), Some(y)) if y == 0.0 => err("division by zero"),
            (Some(x), Some(y)) => Ok(Value::Float(x / y)),
            _ => err(format!("'/' not defined for {} and {}", a.kind(), b.kind())),
        },
        Rem => match (a, b) {
            (Value::Int(_), Value::Int(0)) => err("division by zero"),
            (Value::Int(x), Value::Int(y)) => x.checked_rem(*y).map(Value::Int).ok_or_else(|| EvalError::new("integer overflow")),
            _ => err(format!("'%' requires two ints, got {} and {}", a.kind(), b.kind())),
        },
        Eq => Ok(Value::Bool(values_equal(a, b))),
        Ne => Ok(Value::Bool(!values_equal(a, b))),
        Lt | Le | Gt | Ge => {
            if !(a.is_numeric() && b.is_numeric()) {
                return err(format!("'{}' not defined for {} and {}", op.symbol(), a.kind(), b.kind()));
            }
            let ord = compare_numbers(a, b);
            Ok(Value::Bool(match op {
                Lt => ord == Some(Ordering::Less),
                Le => matches!(ord, Some(Ordering::Less | Ordering::Equal)),
                Gt => ord == Some(Ordering::Greater),
                _ => matches!(ord, Some(Ordering::Greater | Ordering::Equal)),
            }))
        }
        And | Or => unreachable!("short-circuited in evaluate"),
    }
}

fn num(f: Builtin, v: &Value) -> Result<f64, EvalError> {
    v.as_f64().ok_or_else(|| EvalError::new(format!("{}() expects a number, got {}", f.name(), v.kind())))
}

fn call(f: Builtin, args: &[Value]) -> Result<Value, EvalError> {
    match f {
        Builtin::Abs => match &args[0] {
            Value::Int(i) => i.checked_abs().map(Value::Int).ok_or_else(|| EvalError::new("integer overflow")),
            v => Ok(Value::Float(num(f, v)?.abs())),
        },
        Builtin::Sqrt => {
            let x = num(f, &args[0])?;
            if x < 0.0 {
                return err(format!("sqrt() of negative number {x}"));
            }
            Ok(Value::Float(x.sqrt()))
        }
        Builtin::Exp => Ok(Value::Float(num(f, &args[0])?.exp())),
        Builtin::Ln => {
            let x = num(f, &args[0])?;
            if x <= 0.0 {
                return err(format!("ln() of non-positive number {x}"));
            }
            Ok(Value::Float(x.ln()))
        }
        Builtin::Round => match &args[0] {
            Value::Int(i) => Ok(Value::Int(*i)),
            v => Ok(Value::Float(num(f, v)?.round())),
        },
        Builtin::Len => match &args[0] {
            Value::Str(s) => Ok(Value::Int(s.chars().count() as i64)),
            Value::List(l) => Ok(Value::Int(l.len() as i64)),
            Value::Record(r) => Ok(Value::Int(r.len() as i64)),
            v => err(format!("len() not defined for {}", v.kind())),
        },
        Builtin::Min | Builtin::Max => {
            let (a, b) = (&args[0], &args[1]);
            let pick_min = f == Builtin::Min;
            match (a, b) {
                (Value::Int(x), Value::Int(y)) => Ok(Value::Int(if pick_min { *x.min(y) } else { *x.max(y) })),
                _ => {
                    let (x, y) = (num(f, a)?, num(f, b)?);
                    Ok(Value::Float(if pick_min { x.min(y) } else { x.max(y) }))
                }
            }
        }
        Builtin::Clamp => {
            let (x, lo, hi) = (&args[0], &args[1], &args[2]);
            if let (Value::Int(x), Value::Int(lo), Value::Int(hi)) = (x, lo, hi) {
                if lo > hi {
                    return err("clamp() lower bound exceeds upper bound");
                }
                return Ok(Value::Int(*x.clamp(lo, hi)));
            }
            let (x, lo, hi) = (num(f, x)?, num(f, lo)?, num(f, hi)?);
            if lo > hi || lo.is_nan() || hi.is_nan() {
                return err("clamp() lower bound exceeds upper bound");
            }
            Ok(Value::Float(x.clamp(lo, hi)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse_expr;
    use super::*;

    fn eval_with(src: &str, pairs: &[(&str, Value)]) -> Result<Value, EvalError> {
        let scope: HashMap<String, Value> = pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        evaluate(&parse_expr(src).unwrap(), &scope)
    }

    fn eval(src: &str) -> Result<Value, EvalError> {
        eval_with(src, &[])
    }

    #[test]
    fn field_arithmetic() {
        let x = Value::record([("loss", Value::Float(0.5))]);
        assert_eq!(eval_with("x.loss * 2", &[("x", x)]).unwrap(), Value::Float(1.0));
    }

    #[test]
    fn division_is_always_float() {
        assert_eq!(eval("1 / 4").unwrap(), Value::Float(0.25));
        assert_eq!(eval("4 / 2").unwrap(), Value::Float(2.0));
        assert!(eval("1 / 0").is_err());
        assert!(eval("1.0 / 0.0").is_err());
    }

    #[test]
    fn zero_based_indexing() {
        let x = Value::record([("grads", Value::from(vec![0.1, 0.2]))]);
        assert_eq!(eval_with("x.grads[1]", &[("x", x.clone())]).unwrap(), Value::Float(0.2));
        assert!(eval_with("x.grads[2]", &[("x", x.clone())]).is_err());
        assert!(eval_with("x.grads[-1]", &[("x", x)]).is_err());
    }

    #[test]
    fn coercion_and_comparison() {
        assert_eq!(eval("1 + 2").unwrap(), Value::Int(3));
        assert_eq!(eval("1 + 2.5").unwrap(), Value::Float(3.5));
        assert_eq!(eval("1 == 1.0").unwrap(), Value::Bool(true));
        assert_eq!(eval("2 < 2.5").unwrap(), Value::Bool(true));
        assert_eq!(eval("\"a\" == 1").unwrap(), Value::Bool(false));
        assert_eq!(eval("\"a\" == \"a\"").unwrap(), Value::Bool(true));
        assert_eq!(eval("null == false").unwrap(), Value::Bool(false));
        assert!(eval("\"a\" < \"b\"").is_err());
        assert!(eval("\"a\" + 1").is_err());
        assert!(eval("7 % 2.0").is_err());
        assert_eq!(eval("-7 % 2").unwrap(), Value::Int(-1));
        assert!(eval("9223372036854775807 + 1").is_err());
    }

    #[test]
    fn errors_for_missing_data() {
        let x = Value::record([("a", Value::Int(1))]);
        assert!(eval_with("x.b", &[("x", x.clone())]).is_err());
        assert!(eval_with("x.a.b", &[("x", x)]).is_err());
        assert!(eval("nope").is_err());
    }

    #[test]
    fn logic_short_circuits() {
        assert_eq!(eval("false && nope").unwrap(), Value::Bool(false));
        assert_eq!(eval("true || nope").unwrap(), Value::Bool(true));
        assert!(eval("1 && true").is_err());
        assert!(eval("true && 1").is_err());
    }

    #[test]
    fn builtins() {
        assert_eq!(eval("abs(-3)").unwrap(), Value::Int(3));
        assert_eq!(eval("sqrt(4)").unwrap(), Value::Float(2.0));
        assert!(eval("sqrt(-1)").is_err());
        assert!(eval("ln(0)").is_err());
        assert_eq!(eval("exp(0)").unwrap(), Value::Float(1.0));
        assert_eq!(eval("round(2.5)").unwrap(), Value::Float(3.0));
        assert_eq!(eval("len(\"héllo\")").unwrap(), Value::Int(5));
        assert_eq!(eval("min(3, 2)").unwrap(), Value::Int(2));
        assert_eq!(eval("max(3, 2.5)").unwrap(), Value::Float(3.0));
        assert_eq!(eval("clamp(5, 0, 3)").unwrap(), Value::Int(3));
        assert_eq!(eval("clamp(0.5, 0, 3)").unwrap(), Value::Float(0.5));
        assert!(eval("clamp(1, 3, 0)").is_err());
        assert!(eval("len(1)").is_err());
    }
}
