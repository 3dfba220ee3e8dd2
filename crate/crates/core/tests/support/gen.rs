use proptest::collection::vec;
use proptest::prelude::*;

use livewatch::dsl::{Aggregator, BinaryOp, Builtin, Expr, UnaryOp, WindowMode};
use livewatch::wire::{DataKind, DataMessage, ErrorCode, Subscription, WireMessage};
use livewatch::{Record, Value};

pub fn arb_float() -> impl Strategy<Value = f64> {
    prop_oneof![
        6 => any::<f64>(),
        2 => -1e6..1e6f64,
        1 => Just(f64::NAN),
        1 => Just(f64::INFINITY),
        1 => Just(f64::NEG_INFINITY),
        1 => Just(-0.0),
        1 => Just(f64::MIN_POSITIVE / 4.0),
    ]
}

pub fn arb_string() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => any::<String>(),
        2 => "[a-z_\"\\\\\n\t/ ]{0,12}",
        1 => prop_oneof![Just("NaN"), Just("Inf"), Just("-Inf"), Just(""), Just("\u{0}"), Just("é😀")].prop_map(String::from),
    ]
}

fn arb_key() -> impl Strategy<Value = String> {
    prop_oneof![3 => "[a-z]{1,6}", 1 => any::<String>().prop_filter("non-empty", |s| !s.is_empty())]
}

pub fn arb_record_of<S: Strategy<Value = Value>>(inner: S, max: usize) -> impl Strategy<Value = Record> {
    vec((arb_key(), inner), 0..max).prop_map(|pairs| {
        let mut r = Record::new();
        for (k, v) in pairs {
            r.entry(k).or_insert(v);
        }
        r
    })
}

pub fn arb_value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::Int),
        arb_float().prop_map(Value::Float),
        arb_string().prop_map(Value::Str),
    ];
    leaf.prop_recursive(4, 48, 6, |inner| {
        prop_oneof![
            vec(inner.clone(), 0..6).prop_map(Value::List),
            arb_record_of(inner, 6).prop_map(Value::Record),
        ]
    })
}

fn arb_error_code() -> impl Strategy<Value = ErrorCode> {
    prop_oneof![
        Just(ErrorCode::ParseError),
        Just(ErrorCode::UnknownEvent),
        Just(ErrorCode::UnknownObservable),
        Just(ErrorCode::UnknownStream),
        Just(ErrorCode::Readonly),
        Just(ErrorCode::Internal),
    ]
}

pub fn arb_data_message() -> impl Strategy<Value = DataMessage> {
    let head = (arb_string(), 0..=i64::MAX as u64, prop_oneof![any::<f64>().prop_filter("finite", |t| t.is_finite()), 0.0..2e9f64]);
    (head, 0..4u8, arb_value(), arb_string(), 1..=i64::MAX as u64).prop_map(|((stream, seq, t), kind, value, msg, count)| {
        match kind {
            0 => DataMessage::item(stream, seq, t, value),
            1 => DataMessage::error(stream, seq, t, msg),
            2 => DataMessage::closed(stream, seq, t),
            _ => DataMessage::dropped(stream, seq, t, count),
        }
    })
}

pub fn arb_wire_message() -> impl Strategy<Value = WireMessage> {
    let opt_str = || proptest::option::of(arb_string());
    prop_oneof![
        (any::<i64>(), proptest::option::of(any::<u16>())).prop_map(|(proto, data_port)| WireMessage::Hello { proto, data_port }),
        (arb_string(), arb_string(), opt_str()).prop_map(|(event, query, stream_id)| WireMessage::CreateStream { event, query, stream_id }),
        arb_string().prop_map(|stream_id| WireMessage::CloseStream { stream_id }),
        Just(WireMessage::ListEvents),
        Just(WireMessage::ListStreams),
        (arb_string(), arb_value(), opt_str()).prop_map(|(name, value, at_event)| WireMessage::SetObservable { name, value, at_event }),
        arb_record_of(arb_value(), 5)
            .prop_map(|mut r| {
                r.shift_remove("type");
                WireMessage::Ok(r)
            }),
        (arb_error_code(), arb_string()).prop_map(|(code, message)| WireMessage::Error { code, message }),
        prop_oneof![Just(Subscription::All), vec(arb_string(), 0..4).prop_map(Subscription::Streams)].prop_map(WireMessage::Subscribe),
        arb_data_message().prop_map(WireMessage::Data),
    ]
}

pub fn kinds_of(msg: &DataMessage) -> DataKind {
    msg.kind
}

/// Identifiers bound by [`eval_env`].
pub const IDENTS: [&str; 6] = ["x", "y", "z", "s", "l", "r"];

pub fn eval_env() -> Record {
    let mut inner = Record::new();
    inner.insert("a".into(), Value::Int(3));
    inner.insert("b".into(), Value::Float(-0.5));
    let mut env = Record::new();
    env.insert("x".into(), Value::Int(7));
    env.insert("y".into(), Value::Float(2.5));
    env.insert("z".into(), Value::Int(0));
    env.insert("s".into(), Value::from("héllo"));
    env.insert("l".into(), Value::List(vec![Value::Int(1), Value::Float(2.0), Value::from("three")]));
    env.insert("r".into(), Value::Record(inner));
    env
}

fn arb_literal() -> impl Strategy<Value = Value> {
    prop_oneof![
        3 => (0..20i64).prop_map(Value::Int),
        1 => (0..=i64::MAX).prop_map(Value::Int),
        2 => (0.0..100.0f64).prop_map(Value::Float),
        1 => prop_oneof![Just(1e300), Just(2.5e-8), Just(0.0)].prop_map(Value::Float),
        1 => "[a-z\"\\\\\n ]{0,5}".prop_map(Value::Str),
        1 => any::<bool>().prop_map(Value::Bool),
        1 => Just(Value::Null),
    ]
}

fn arb_binop() -> impl Strategy<Value = BinaryOp> {
    use BinaryOp::*;
    prop_oneof![
        Just(Add), Just(Sub), Just(Mul), Just(Div), Just(Rem), Just(Eq), Just(Ne),
        Just(Lt), Just(Le), Just(Gt), Just(Ge), Just(And), Just(Or)
    ]
}

fn arb_builtin() -> impl Strategy<Value = Builtin> {
    use Builtin::*;
    prop_oneof![Just(Abs), Just(Sqrt), Just(Exp), Just(Ln), Just(Round), Just(Len), Just(Min), Just(Max), Just(Clamp)]
}

pub fn arb_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        arb_literal().prop_map(Expr::Literal),
        proptest::sample::select(IDENTS.to_vec()).prop_map(|s| Expr::Ident(s.into())),
    ];
    leaf.prop_recursive(5, 40, 3, |inner| {
        prop_oneof![
            (inner.clone(), prop_oneof![Just("a"), Just("b"), Just("c")]).prop_map(|(e, f)| Expr::Field(Box::new(e), f.into())),
            (inner.clone(), inner.clone()).prop_map(|(e, i)| Expr::Index(Box::new(e), Box::new(i))),
            (prop_oneof![Just(UnaryOp::Neg), Just(UnaryOp::Not)], inner.clone()).prop_map(|(op, e)| Expr::Unary(op, Box::new(e))),
            (arb_binop(), inner.clone(), inner.clone()).prop_map(|(op, l, r)| Expr::Binary(op, Box::new(l), Box::new(r))),
            (arb_builtin(), vec(inner, 3)).prop_map(|(f, mut args)| {
                args.truncate(f.arity());
                Expr::Call(f, args)
            }),
        ]
    })
}

pub fn arb_aggregator() -> impl Strategy<Value = Aggregator> {
    prop_oneof![
        Just(Aggregator::Sum),
        Just(Aggregator::Avg),
        Just(Aggregator::Min),
        Just(Aggregator::Max),
        Just(Aggregator::Count),
        Just(Aggregator::Last),
        (1..8usize).prop_map(Aggregator::Hist),
    ]
}

pub fn arb_window() -> impl Strategy<Value = WindowMode> {
    prop_oneof![
        Just(WindowMode::Group),
        (1..12u64).prop_map(WindowMode::Count),
        prop_oneof![Just(0.5), Just(1.0), Just(2.5), Just(1e-3)].prop_map(WindowMode::Time),
    ]
}

/// Pipeline text built from generated pieces; may fail validation.
pub fn arb_query() -> impl Strategy<Value = String> {
    let stage = (prop_oneof![Just("map"), Just("where")], arb_expr()).prop_map(|(k, e)| format!("{k}(b -> {e})"));
    let reduce = proptest::option::of((arb_aggregator(), arb_expr()).prop_map(|(a, e)| format!("reduce({a}, v -> {e})")));
    let window = proptest::option::of(arb_window().prop_map(|w| format!("window({w})")));
    (vec(stage, 1..4), reduce, window).prop_map(|(mut stages, r, w)| {
        stages.extend(r);
        stages.extend(w);
        stages.join(" | ")
    })
}
