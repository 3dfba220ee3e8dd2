//! Message schema and line framing shared by the agent, clients and gateway.
//!
//! Every message is one line of canonical text (see [`text`]) followed by
//! `\n`. Control messages carry a `"type"` field; data-channel messages are
//! identified by their `"stream"`/`"kind"` fields and the subscribe header by
//! its `"subscribe"` field.
//!
//! Control connection: agent sends `hello` (with its data port), then answers
//! each request line with `ok` or `error`. Data connection: agent sends
//! `hello`, client sends the subscribe header, agent answers `ok` once the
//! subscription is live and then streams data messages.

pub mod text;

use std::fmt;
use std::str::FromStr;

use crate::value::{Record, Value};

pub const PROTO_VERSION: i64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    ParseError,
    UnknownEvent,
    UnknownObservable,
    UnknownStream,
    Readonly,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::ParseError => "parse_error",
            ErrorCode::UnknownEvent => "unknown_event",
            ErrorCode::UnknownObservable => "unknown_observable",
            ErrorCode::UnknownStream => "unknown_stream",
            ErrorCode::Readonly => "readonly",
            ErrorCode::Internal => "internal",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCode {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "parse_error" => ErrorCode::ParseError,
            "unknown_event" => ErrorCode::UnknownEvent,
            "unknown_observable" => ErrorCode::UnknownObservable,
            "unknown_stream" => ErrorCode::UnknownStream,
            "readonly" => ErrorCode::Readonly,
            "internal" => ErrorCode::Internal,
            _ => return Err(()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataKind {
    Item,
    Error,
    Closed,
    Dropped,
}

impl DataKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DataKind::Item => "item",
            DataKind::Error => "error",
            DataKind::Closed => "closed",
            DataKind::Dropped => "dropped",
        }
    }
}

impl FromStr for DataKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "item" => DataKind::Item,
            "error" => DataKind::Error,
            "closed" => DataKind::Closed,
            "dropped" => DataKind::Dropped,
            _ => return Err(()),
        })
    }
}

/// One data-channel delivery.
///
/// `value` carries the item for `kind=item` and the error text for
/// `kind=error`; `count` is set only on `kind=dropped`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMessage {
    pub stream: String,
    pub seq: u64,
    pub t: f64,
    pub kind: DataKind,
    pub value: Option<Value>,
    pub count: Option<u64>,
}

impl DataMessage {
    pub fn item(stream: impl Into<String>, seq: u64, t: f64, value: Value) -> Self {
        DataMessage { stream: stream.into(), seq, t, kind: DataKind::Item, value: Some(value), count: None }
    }

    pub fn error(stream: impl Into<String>, seq: u64, t: f64, message: impl Into<String>) -> Self {
        DataMessage {
            stream: stream.into(),
            seq,
            t,
            kind: DataKind::Error,
            value: Some(Value::Str(message.into())),
            count: None,
        }
    }

    pub fn closed(stream: impl Into<String>, seq: u64, t: f64) -> Self {
        DataMessage { stream: stream.into(), seq, t, kind: DataKind::Closed, value: None, count: None }
    }

    pub fn dropped(stream: impl Into<String>, seq: u64, t: f64, count: u64) -> Self {
        DataMessage { stream: stream.into(), seq, t, kind: DataKind::Dropped, value: None, count: Some(count) }
    }

    pub fn to_record(&self) -> Record {
        let mut r = Record::new();
        r.insert("stream".into(), Value::Str(self.stream.clone()));
        r.insert("seq".into(), Value::Int(self.seq as i64));
        r.insert("t".into(), Value::Float(self.t));
        r.insert("kind".into(), Value::Str(self.kind.as_str().into()));
        if let Some(v) = &self.value {
            r.insert("value".into(), v.clone());
        }
        if let Some(c) = self.count {
            r.insert("count".into(), Value::Int(c as i64));
        }
        r
    }

    pub fn from_record(rec: &Record) -> Result<Self, DecodeError> {
        let kind_text = req_str(rec, "kind")?;
        let kind = kind_text.parse().map_err(|_| malformed(format!("unknown data kind '{kind_text}'")))?;
        Ok(DataMessage {
            stream: req_str(rec, "stream")?.to_owned(),
            seq: req_u64(rec, "seq")?,
            t: req_f64(rec, "t")?,
            kind,
            value: rec.get("value").cloned(),
            count: opt_u64(rec, "count")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Subscription {
    All,
    Streams(Vec<String>),
}

impl Subscription {
    pub fn matches(&self, stream: &str) -> bool {
        match self {
            Subscription::All => true,
            Subscription::Streams(ids) => ids.iter().any(|s| s == stream),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    /// First line on both endpoints. The control endpoint also advertises
    /// its data port so a client needs only one address.
    Hello { proto: i64, data_port: Option<u16> },
    CreateStream { event: String, query: String, stream_id: Option<String> },
    CloseStream { stream_id: String },
    ListEvents,
    ListStreams,
    SetObservable { name: String, value: Value, at_event: Option<String> },
    /// Success response; the record holds every field except `type`.
    Ok(Record),
    Error { code: ErrorCode, message: String },
    Subscribe(Subscription),
    Data(DataMessage),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("malformed line at byte {offset}: {message}")]
    MalformedLine { offset: usize, message: String },
    #[error("unknown message type '{0}'")]
    UnknownType(String),
}

fn malformed(message: impl Into<String>) -> DecodeError {
    DecodeError::MalformedLine { offset: 0, message: message.into() }
}

fn req<'a>(rec: &'a Record, key: &str) -> Result<&'a Value, DecodeError> {
    rec.get(key).ok_or_else(|| malformed(format!("missing field '{key}'")))
}

fn req_str<'a>(rec: &'a Record, key: &str) -> Result<&'a str, DecodeError> {
    req(rec, key)?.as_str().ok_or_else(|| malformed(format!("field '{key}' must be a string")))
}

fn opt_str(rec: &Record, key: &str) -> Result<Option<String>, DecodeError> {
    match rec.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Str(s)) => Ok(Some(s.clone())),
        Some(_) => Err(malformed(format!("field '{key}' must be a string"))),
    }
}

fn req_u64(rec: &Record, key: &str) -> Result<u64, DecodeError> {
    match req(rec, key)? {
        Value::Int(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(malformed(format!("field '{key}' must be a non-negative integer"))),
    }
}

fn opt_u64(rec: &Record, key: &str) -> Result<Option<u64>, DecodeError> {
    match rec.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(_) => req_u64(rec, key).map(Some),
    }
}

fn req_f64(rec: &Record, key: &str) -> Result<f64, DecodeError> {
    req(rec, key)?.as_f64().ok_or_else(|| malformed(format!("field '{key}' must be a number")))
}

fn typed(kind: &str, fields: impl IntoIterator<Item = (&'static str, Value)>) -> Record {
    let mut r = Record::new();
    r.insert("type".into(), Value::Str(kind.into()));
    for (k, v) in fields {
        r.insert(k.into(), v);
    }
    r
}

impl WireMessage {
    pub fn ok() -> Self {
        WireMessage::Ok(Record::new())
    }

    pub fn ok_with<K: Into<String>>(fields: impl IntoIterator<Item = (K, Value)>) -> Self {
        WireMessage::Ok(fields.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        WireMessage::Error { code, message: message.into() }
    }

    pub fn to_record(&self) -> Record {
        match self {
            WireMessage::Hello { proto, data_port } => {
                let mut r = typed("hello", [("proto", Value::Int(*proto))]);
                if let Some(p) = data_port {
                    r.insert("data_port".into(), Value::Int(i64::from(*p)));
                }
                r
            }
            WireMessage::CreateStream { event, query, stream_id } => {
                let mut r = typed("create_stream", [("event", event.as_str().into()), ("query", query.as_str().into())]);
                if let Some(id) = stream_id {
                    r.insert("stream_id".into(), id.as_str().into());
                }
                r
            }
            WireMessage::CloseStream { stream_id } => typed("close_stream", [("stream_id", stream_id.as_str().into())]),
            WireMessage::ListEvents => typed("list_events", []),
            WireMessage::ListStreams => typed("list_streams", []),
            WireMessage::SetObservable { name, value, at_event } => {
                let mut r = typed("set_observable", [("name", name.as_str().into()), ("value", value.clone())]);
                if let Some(ev) = at_event {
                    r.insert("at_event".into(), ev.as_str().into());
                }
                r
            }
            WireMessage::Ok(fields) => {
                let mut r = typed("ok", []);
                for (k, v) in fields {
                    if k != "type" {
                        r.insert(k.clone(), v.clone());
                    }
                }
                r
            }
            WireMessage::Error { code, message } => {
                typed("error", [("code", code.as_str().into()), ("message", message.as_str().into())])
            }
            WireMessage::Subscribe(sub) => {
                let v = match sub {
                    Subscription::All => Value::Str("*".into()),
                    Subscription::Streams(ids) => Value::List(ids.iter().map(|s| s.as_str().into()).collect()),
                };
                let mut r = Record::new();
                r.insert("subscribe".into(), v);
                r
            }
            WireMessage::Data(d) => d.to_record(),
        }
    }

    pub fn from_record(rec: &Record) -> Result<Self, DecodeError> {
        let Some(kind) = rec.get("type") else {
            if let Some(sub) = rec.get("subscribe") {
                return decode_subscription(sub).map(WireMessage::Subscribe);
            }
            if rec.contains_key("stream") && rec.contains_key("kind") {
                return DataMessage::from_record(rec).map(WireMessage::Data);
            }
            return Err(malformed("message has no 'type'"));
        };
        let kind = kind.as_str().ok_or_else(|| malformed("field 'type' must be a string"))?;
        Ok(match kind {
            "hello" => WireMessage::Hello {
                proto: match req(rec, "proto")? {
                    Value::Int(p) => *p,
                    _ => return Err(malformed("field 'proto' must be an integer")),
                },
                data_port: opt_u64(rec, "data_port")?
                    .map(|p| u16::try_from(p).map_err(|_| malformed("data_port out of range")))
                    .transpose()?,
            },
            "create_stream" => WireMessage::CreateStream {
                event: req_str(rec, "event")?.to_owned(),
                query: req_str(rec, "query")?.to_owned(),
                stream_id: opt_str(rec, "stream_id")?,
            },
            "close_stream" => WireMessage::CloseStream { stream_id: req_str(rec, "stream_id")?.to_owned() },
            "list_events" => WireMessage::ListEvents,
            "list_streams" => WireMessage::ListStreams,
            "set_observable" => WireMessage::SetObservable {
                name: req_str(rec, "name")?.to_owned(),
                value: req(rec, "value")?.clone(),
                at_event: opt_str(rec, "at_event")?,
            },
            "ok" => WireMessage::Ok(rec.iter().filter(|(k, _)| *k != "type").map(|(k, v)| (k.clone(), v.clone())).collect()),
            "error" => {
                let code = req_str(rec, "code")?;
                WireMessage::Error {
                    code: code.parse().map_err(|_| malformed(format!("unknown error code '{code}'")))?,
                    message: opt_str(rec, "message")?.unwrap_or_default(),
                }
            }
            other => return Err(DecodeError::UnknownType(other.to_owned())),
        })
    }
}

fn decode_subscription(v: &Value) -> Result<Subscription, DecodeError> {
    match v {
        Value::Str(s) if s == "*" => Ok(Subscription::All),
        Value::List(items) => items
            .iter()
            .map(|i| i.as_str().map(str::to_owned).ok_or_else(|| malformed("subscribe entries must be strings")))
            .collect::<Result<_, _>>()
            .map(Subscription::Streams),
        _ => Err(malformed("subscribe must be \"*\" or a list of stream ids")),
    }
}

/// Encodes a record as one `\n`-terminated line.
pub fn encode_record_line(rec: &Record) -> String {
    let mut out = String::with_capacity(64);
    text::write_record(&mut out, rec);
    out.push('\n');
    out
}

pub fn encode(msg: &WireMessage) -> String {
    encode_record_line(&msg.to_record())
}

pub fn encode_data(msg: &DataMessage) -> String {
    encode_record_line(&msg.to_record())
}

/// Decodes one line into a record. A single trailing `\n` (or `\r\n`) is allowed.
pub fn decode_record_line(line: &[u8]) -> Result<Record, DecodeError> {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    let text = std::str::from_utf8(line)
        .map_err(|e| DecodeError::MalformedLine { offset: e.valid_up_to(), message: "invalid utf-8".into() })?;
    match text::decode_value(text) {
        Ok(Value::Record(rec)) => Ok(rec),
        Ok(_) => Err(malformed("line is not an object")),
        Err(e) => Err(DecodeError::MalformedLine { offset: e.offset, message: e.message }),
    }
}

pub fn decode(line: &[u8]) -> Result<WireMessage, DecodeError> {
    WireMessage::from_record(&decode_record_line(line)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ok_response_line() {
        let msg = WireMessage::ok_with([("stream_id", Value::from("s1"))]);
        assert_eq!(encode(&msg), "{\"type\":\"ok\",\"stream_id\":\"s1\"}\n");
    }

    #[test]
    fn data_item_line() {
        let msg = WireMessage::Data(DataMessage::item("s1", 0, 100.5, Value::Float(2.0)));
        assert_eq!(encode(&msg), "{\"stream\":\"s1\",\"seq\":0,\"t\":100.5,\"kind\":\"item\",\"value\":2.0}\n");
    }

    #[test]
    fn decodes_close_stream() {
        let msg = decode(b"{\"type\":\"close_stream\",\"stream_id\":\"s1\"}").unwrap();
        assert_eq!(msg, WireMessage::CloseStream { stream_id: "s1".into() });
    }

    #[test]
    fn unknown_type_is_reported() {
        assert_eq!(decode(b"{\"type\":\"frobnicate\"}"), Err(DecodeError::UnknownType("frobnicate".into())));
    }

    #[test]
    fn truncated_line_is_malformed() {
        assert!(matches!(
            decode(b"{\"type\":\"close_stream\",\"stream_id\":\"s"),
            Err(DecodeError::MalformedLine { .. })
        ));
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let msg = decode(b"{\"type\":\"list_events\",\"future\":[1,2]}\n").unwrap();
        assert_eq!(msg, WireMessage::ListEvents);
    }

    #[test]
    fn integer_t_is_accepted() {
        let msg = decode(b"{\"stream\":\"s1\",\"seq\":3,\"t\":100,\"kind\":\"closed\"}").unwrap();
        assert_eq!(msg, WireMessage::Data(DataMessage::closed("s1", 3, 100.0)));
    }

    #[test]
    fn subscribe_header() {
        let all = WireMessage::Subscribe(Subscription::All);
        assert_eq!(encode(&all), "{\"subscribe\":\"*\"}\n");
        assert_eq!(decode(encode(&all).as_bytes()).unwrap(), all);
        let some = WireMessage::Subscribe(Subscription::Streams(vec!["s1".into(), "s2".into()]));
        assert_eq!(decode(encode(&some).as_bytes()).unwrap(), some);
    }
}
