use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::Router;

use livewatch::persistence::Speed;
use livewatch::wire::text;
use livewatch::{Record, Value};

use crate::state::{ApiFailure, Filter, Shared};

pub(crate) fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/agents", get(list_agents).post(add_agent))
        .route("/agents/{id}/events", get(agent_events))
        .route("/streams", get(list_streams).post(create_stream))
        .route("/streams/{gid}", delete(close_stream))
        .route("/observables", post(set_observable))
        .route("/replays", post(add_replay))
        .route("/ws", get(ws_upgrade))
        .with_state(shared)
}

struct Json(Value);

impl IntoResponse for Json {
    fn into_response(self) -> Response {
        ([(header::CONTENT_TYPE, "application/json")], text::encode_value(&self.0)).into_response()
    }
}

fn ok(pairs: Record) -> Json {
    Json(Value::Record(pairs))
}

struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, code: "bad_request".into(), message: message.into() }
    }
}

impl From<ApiFailure> for ApiError {
    fn from(f: ApiFailure) -> Self {
        let (status, code, message) = match f {
            ApiFailure::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request".to_owned(), m),
            ApiFailure::UnknownAgent(id) => (StatusCode::NOT_FOUND, "unknown_agent".to_owned(), format!("no agent {id}")),
            ApiFailure::UnknownStream(id) => (StatusCode::NOT_FOUND, "unknown_stream".to_owned(), format!("no stream {id}")),
            ApiFailure::Unreachable(m) => (StatusCode::BAD_GATEWAY, "agent_unreachable".to_owned(), m),
            ApiFailure::Rejected { code, message } => (StatusCode::BAD_REQUEST, code.as_str().to_owned(), message),
        };
        ApiError { status, code, message }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Value::record([("code", Value::from(self.code)), ("message", Value::from(self.message))]);
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Json, ApiError>;

/// Request body as a record in the canonical text encoding.
struct Body(Record);

impl Body {
    fn parse(raw: &str) -> Result<Body, ApiError> {
        match text::decode_value(raw) {
            Ok(Value::Record(r)) => Ok(Body(r)),
            Ok(_) => Err(ApiError::bad_request("body must be an object")),
            Err(e) => Err(ApiError::bad_request(format!("invalid body: {e}"))),
        }
    }

    fn str(&self, key: &str) -> Result<&str, ApiError> {
        match self.0.get(key) {
            Some(Value::Str(s)) => Ok(s),
            Some(_) => Err(ApiError::bad_request(format!("`{key}` must be a string"))),
            None => Err(ApiError::bad_request(format!("missing `{key}`"))),
        }
    }

    fn opt_str(&self, key: &str) -> Result<Option<&str>, ApiError> {
        match self.0.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(_) => self.str(key).map(Some),
        }
    }
}

async fn list_agents(State(shared): State<Arc<Shared>>) -> Json {
    Json(Value::record([("agents", shared.agents())]))
}

async fn add_agent(State(shared): State<Arc<Shared>>, raw: String) -> ApiResult {
    let body = Body::parse(&raw)?;
    let address = body.str("address")?.to_owned();
    let (id, state) = shared.add_agent(address).await;
    Ok(ok(Record::from_iter([
        ("agent_id".to_owned(), Value::from(id)),
        ("state".to_owned(), Value::from(state.as_str())),
    ])))
}

async fn agent_events(State(shared): State<Arc<Shared>>, Path(id): Path<String>) -> ApiResult {
    Ok(ok(shared.events(&id).await?))
}

async fn list_streams(State(shared): State<Arc<Shared>>) -> Json {
    Json(Value::record([("streams", shared.streams())]))
}

async fn create_stream(State(shared): State<Arc<Shared>>, raw: String) -> ApiResult {
    let body = Body::parse(&raw)?;
    let agent_id = body.str("agent_id")?;
    let event = body.str("event")?;
    let mut query = body.str("query")?.to_owned();
    if let Some(w) = body.opt_str("window")? {
        query = format!("{query} | window({w})");
    }
    Ok(ok(shared.create_stream(agent_id, event, &query).await?))
}

async fn close_stream(State(shared): State<Arc<Shared>>, Path(gid): Path<String>) -> ApiResult {
    shared.close_stream(&gid).await?;
    Ok(ok(Record::new()))
}

async fn set_observable(State(shared): State<Arc<Shared>>, raw: String) -> ApiResult {
    let body = Body::parse(&raw)?;
    let agent_id = body.str("agent_id")?;
    let name = body.str("name")?;
    let value = body.0.get("value").cloned().ok_or_else(|| ApiError::bad_request("missing `value`"))?;
    let at_event = body.opt_str("at_event")?.map(str::to_owned);
    shared.set_observable(agent_id, name, value, at_event).await?;
    Ok(ok(Record::new()))
}

async fn add_replay(State(shared): State<Arc<Shared>>, raw: String) -> ApiResult {
    let body = Body::parse(&raw)?;
    let path = body.str("path")?.into();
    let speed = match body.0.get("speed") {
        None | Some(Value::Null) => Speed::Max,
        Some(Value::Str(s)) => s.parse().map_err(|_| ApiError::bad_request(format!("bad speed `{s}`")))?,
        Some(v) => match v.as_f64() {
            Some(f) if f.is_finite() && f > 0.0 => Speed::Factor(f),
            _ => return Err(ApiError::bad_request("speed must be `max` or a positive number")),
        },
    };
    Ok(ok(shared.add_replay(path, speed)?))
}

async fn ws_upgrade(
    State(shared): State<Arc<Shared>>,
    Query(params): Query<HashMap<String, String>>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let filter = match params.get("streams").map(String::as_str) {
        None | Some("*") => Filter::All,
        Some(list) => {
            let ids: HashSet<String> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect();
            if ids.is_empty() {
                return Err(ApiError::bad_request("empty `streams` list"));
            }
            Filter::Ids(ids)
        }
    };
    Ok(ws.on_upgrade(move |socket| pump(shared, filter, socket)))
}

async fn pump(shared: Arc<Shared>, filter: Filter, mut socket: WebSocket) {
    let sub = shared.subscribe(filter);
    let mut stopped = shared.stopped();
    'outer: loop {
        while let Some(m) = sub.queue.try_recv() {
            let payload = text::encode_value(&Value::Record(shared.payload(&m)));
            if socket.send(Message::Text(payload.into())).await.is_err() {
                break 'outer;
            }
        }
        if sub.queue.is_closed() {
            break;
        }
        tokio::select! {
            _ = sub.wake.notified() => {}
            _ = stopped.wait_for(|s| *s) => break,
            incoming = socket.recv() => match incoming {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => break,
                Some(Ok(_)) => {}
            },
        }
    }
    sub.queue.close();
    let _ = socket.send(Message::Close(None)).await;
}
