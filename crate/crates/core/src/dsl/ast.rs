use std::collections::BTreeSet;
use std::fmt;

use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Rem => "%",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
            BinaryOp::And => "&&",
            BinaryOp::Or => "||",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    Abs,
    Sqrt,
    Exp,
    Ln,
    Round,
    Len,
    Min,
    Max,
    Clamp,
}

impl Builtin {
    pub fn from_name(name: &str) -> Option<Builtin> {
        Some(match name {
            "abs" => Builtin::Abs,
            "sqrt" => Builtin::Sqrt,
            "exp" => Builtin::Exp,
            "ln" => Builtin::Ln,
            "round" => Builtin::Round,
            "len" => Builtin::Len,
            "min" => Builtin::Min,
            "max" => Builtin::Max,
            "clamp" => Builtin::Clamp,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Abs => "abs",
            Builtin::Sqrt => "sqrt",
            Builtin::Exp => "exp",
            Builtin::Ln => "ln",
            Builtin::Round => "round",
            Builtin::Len => "len",
            Builtin::Min => "min",
            Builtin::Max => "max",
            Builtin::Clamp => "clamp",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Builtin::Min | Builtin::Max => 2,
            Builtin::Clamp => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(Value),
    Ident(String),
    Field(Box<Expr>, String),
    Index(Box<Expr>, Box<Expr>),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Call(Builtin, Vec<Expr>),
}

impl Expr {
    /// Collects identifiers read by this expression, excluding `binder`.
    pub fn free_identifiers(&self, binder: &str, out: &mut BTreeSet<String>) {
        match self {
            Expr::Literal(_) => {}
            Expr::Ident(name) => {
                if name != binder {
                    out.insert(name.clone());
                }
            }
            Expr::Field(base, _) => base.free_identifiers(binder, out),
            Expr::Index(base, idx) => {
                base.free_identifiers(binder, out);
                idx.free_identifiers(binder, out);
            }
            Expr::Unary(_, e) => e.free_identifiers(binder, out),
            Expr::Binary(_, l, r) => {
                l.free_identifiers(binder, out);
                r.free_identifiers(binder, out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.free_identifiers(binder, out)),
        }
    }

    /// Fields read directly off `binder` (`b.loss`). Returns `false` if the
    /// binder is used in any other way, meaning the whole value is needed.
    pub fn binder_fields(&self, binder: &str, out: &mut BTreeSet<String>) -> bool {
        match self {
            Expr::Literal(_) => true,
            Expr::Ident(name) => name != binder,
            Expr::Field(base, field) => match base.as_ref() {
                Expr::Ident(name) if name == binder => {
                    out.insert(field.clone());
                    true
                }
                other => other.binder_fields(binder, out),
            },
            Expr::Index(base, idx) => base.binder_fields(binder, out) & idx.binder_fields(binder, out),
            Expr::Unary(_, e) => e.binder_fields(binder, out),
            Expr::Binary(_, l, r) => l.binder_fields(binder, out) & r.binder_fields(binder, out),
            Expr::Call(_, args) => args.iter().fold(true, |ok, a| a.binder_fields(binder, out) & ok),
        }
    }
}

/// Prints in a fully parenthesized form that parses back to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Literal(v) => write_literal(f, v),
            Expr::Ident(name) => f.write_str(name),
            Expr::Field(base, field) => write!(f, "{base}.{field}"),
            Expr::Index(base, idx) => write!(f, "{base}[{idx}]"),
            Expr::Unary(UnaryOp::Neg, e) => write!(f, "(-{e})"),
            Expr::Unary(UnaryOp::Not, e) => write!(f, "(!{e})"),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Expr::Call(b, args) => {
                write!(f, "{}(", b.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

fn write_literal(f: &mut fmt::Formatter<'_>, v: &Value) -> fmt::Result {
    match v {
        Value::Float(x) => {
            let s = format!("{x:?}");
            match s.find(['e', 'E']) {
                Some(at) if !s[..at].contains('.') => write!(f, "{}.0{}", &s[..at], &s[at..]),
                _ => f.write_str(&s),
            }
        }
        Value::Str(s) => {
            f.write_str("\"")?;
            for c in s.chars() {
                match c {
                    '"' => f.write_str("\\\"")?,
                    '\\' => f.write_str("\\\\")?,
                    '\n' => f.write_str("\\n")?,
                    c => write!(f, "{c}")?,
                }
            }
            f.write_str("\"")
        }
        other => write!(f, "{other}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    Sum,
    Avg,
    Min,
    Max,
    Count,
    Last,
    /// Equal-width histogram with this many bins.
    Hist(usize),
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregator::Sum => f.write_str("sum"),
            Aggregator::Avg => f.write_str("avg"),
            Aggregator::Min => f.write_str("min"),
            Aggregator::Max => f.write_str("max"),
            Aggregator::Count => f.write_str("count"),
            Aggregator::Last => f.write_str("last"),
            Aggregator::Hist(k) => write!(f, "hist[{k}]"),
        }
    }
}

impl Aggregator {
    pub const ALL: [Aggregator; 7] = [
        Aggregator::Sum,
        Aggregator::Avg,
        Aggregator::Min,
        Aggregator::Max,
        Aggregator::Count,
        Aggregator::Last,
        Aggregator::Hist(4),
    ];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowMode {
    /// Emission driven by the host's group-end flag.
    Group,
    Count(u64),
    Time(f64),
}

impl fmt::Display for WindowMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WindowMode::Group => f.write_str("group"),
            WindowMode::Count(n) => write!(f, "count={n}"),
            WindowMode::Time(s) => {
                f.write_str("seconds=")?;
                write_literal(f, &Value::Float(*s))
            }
        }
    }
}

/// Parses the command-line spelling: `group`, `count=N` or `seconds=T`.
impl std::str::FromStr for WindowMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("bad window `{s}` (expected group, count=N or seconds=T)");
        match s.trim().split_once('=') {
            None if s.trim() == "group" => Ok(WindowMode::Group),
            Some(("count", n)) => match n.trim().parse::<u64>() {
                Ok(n) if n >= 1 => Ok(WindowMode::Count(n)),
                _ => Err(bad()),
            },
            Some(("seconds", t)) => match t.trim().parse::<f64>() {
                Ok(t) if t.is_finite() && t > 0.0 => Ok(WindowMode::Time(t)),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lambda {
    pub binder: String,
    pub body: Expr,
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", self.binder, self.body)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Map(Lambda),
    Where(Lambda),
    Reduce(Aggregator, Option<Lambda>),
    Window(WindowMode),
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Map(l) => write!(f, "map({l})"),
            Stage::Where(l) => write!(f, "where({l})"),
            Stage::Reduce(agg, None) => write!(f, "reduce({agg})"),
            Stage::Reduce(agg, Some(l)) => write!(f, "reduce({agg}, {l})"),
            Stage::Window(w) => write!(f, "window({w})"),
        }
    }
}

/// A validated query pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub stages: Vec<Stage>,
}

impl Pipeline {
    pub fn reduce(&self) -> Option<(Aggregator, Option<&Lambda>)> {
        self.stages.iter().find_map(|s| match s {
            Stage::Reduce(agg, l) => Some((*agg, l.as_ref())),
            _ => None,
        })
    }

    /// The explicit window, or `Group` when none is given.
    pub fn window(&self) -> WindowMode {
        self.stages
            .iter()
            .find_map(|s| match s {
                Stage::Window(w) => Some(*w),
                _ => None,
            })
            .unwrap_or(WindowMode::Group)
    }

    /// Identifiers read from the event scope, excluding each stage's binder.
    pub fn free_identifiers(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for stage in &self.stages {
            if let Some(l) = stage.lambda() {
                l.body.free_identifiers(&l.binder, &mut out);
            }
        }
        out
    }

    /// Event-record fields this pipeline reads.
    ///
    /// Binders of stages up to and including the first `map` are bound to the
    /// event record, so `b.loss` there needs `loss`. Bare free identifiers
    /// anywhere resolve to observables as well.
    pub fn needed_fields(&self) -> FieldNeeds {
        let mut fields = self.free_identifiers();
        let mut whole = false;
        for stage in &self.stages {
            if let Some(l) = stage.lambda() {
                whole |= !l.body.binder_fields(&l.binder, &mut fields);
            }
            if matches!(stage, Stage::Map(_) | Stage::Reduce(..)) {
                break;
            }
        }
        if whole {
            FieldNeeds::All
        } else {
            FieldNeeds::Fields(fields)
        }
    }
}

impl Stage {
    pub fn lambda(&self) -> Option<&Lambda> {
        match self {
            Stage::Map(l) | Stage::Where(l) => Some(l),
            Stage::Reduce(_, l) => l.as_ref(),
            Stage::Window(_) => None,
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                f.write_str(" | ")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldNeeds {
    /// The whole event record is used as a value.
    All,
    Fields(BTreeSet<String>),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_flag_spellings() {
        assert_eq!("group".parse(), Ok(WindowMode::Group));
        assert_eq!("count=5".parse(), Ok(WindowMode::Count(5)));
        assert_eq!("seconds=0.5".parse(), Ok(WindowMode::Time(0.5)));
        for bad in ["count=0", "seconds=-1", "seconds=inf", "minutes=2", "", "count"] {
            assert!(bad.parse::<WindowMode>().is_err(), "{bad}");
        }
    }

    #[test]
    fn window_display_parses_back() {
        for w in [WindowMode::Group, WindowMode::Count(3), WindowMode::Time(2.5)] {
            assert_eq!(w.to_string().parse(), Ok(w));
        }
    }
}
