//! Routes. Handlers only translate between HTTP and owner requests.

use std::convert::Infallible;
use std::num::NonZeroU32;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use futures::Stream;
use homelink_core::{
    CodecError, ControllerError, DeviceKind, EventRecord, FailureMode, InputError, SmsChannelConfig,
};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::oneshot;

use crate::owner::{Request, StepError};
use crate::Service;

pub fn router(service: Service) -> Router {
    Router::new()
        .route("/api/commands", post(post_command))
        .route("/api/tickets", get(list_tickets))
        .route("/api/tickets/{id}", get(get_ticket))
        .route("/api/devices", get(get_devices))
        .route("/api/devices/{kind}/{index}/failure", put(put_failure))
        .route("/api/channel", get(get_channel).put(put_channel))
        .route("/api/sim/step", post(post_step))
        .route("/api/status", get(get_status))
        .route("/api/events", get(events))
        .route("/api/log", get(get_log))
        .with_state(service)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn unavailable() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "simulation is not running")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = match self.field {
            Some(field) => json!({"error": self.message, "field": field}),
            None => json!({"error": self.message}),
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text())
    }
}

impl From<InputError> for ApiError {
    fn from(e: InputError) -> Self {
        let status = match &e {
            InputError::Controller(ControllerError::UnknownDevice { .. }) => StatusCode::NOT_FOUND,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let field = match &e {
            InputError::Invalid { field, .. } => Some(field.clone()),
            InputError::Codec(CodecError::UnrecognizedUtterance(_)) => Some("utterance".into()),
            _ => None,
        };
        Self {
            status,
            message: e.to_string(),
            field,
        }
    }
}

/// Sends one request to the owner and waits for its answer.
async fn ask<T>(
    service: &Service,
    make: impl FnOnce(oneshot::Sender<T>) -> Request,
) -> Result<T, ApiError> {
    let (tx, rx) = oneshot::channel();
    service
        .intake
        .send(make(tx))
        .await
        .map_err(|_| ApiError::unavailable())?;
    rx.await.map_err(|_| ApiError::unavailable())
}

#[derive(Deserialize)]
struct CommandBody {
    utterance: String,
}

async fn post_command(
    State(service): State<Service>,
    body: Result<Json<CommandBody>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(CommandBody { utterance }) = body?;
    let ticket = ask(&service, |reply| Request::Command { utterance, reply }).await??;
    Ok((StatusCode::ACCEPTED, Json(json!({"ticket": ticket}))))
}

async fn list_tickets(State(service): State<Service>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(
        ask(&service, |reply| Request::Tickets { reply }).await?,
    ))
}

async fn get_ticket(
    State(service): State<Service>,
    Path(id): Path<u64>,
) -> Result<impl IntoResponse, ApiError> {
    match ask(&service, |reply| Request::Ticket { id, reply }).await? {
        Some(ticket) => Ok(Json(ticket)),
        None => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("no ticket {id}"),
        )),
    }
}

async fn get_devices(State(service): State<Service>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(
        ask(&service, |reply| Request::Devices { reply }).await?,
    ))
}

async fn put_failure(
    State(service): State<Service>,
    Path((kind, index)): Path<(String, u32)>,
    body: Result<Json<FailureMode>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let kind: DeviceKind = kind
        .parse()
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, format!("no device kind {kind:?}")))?;
    let index = NonZeroU32::new(index)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "device indices start at 1"))?;
    let Json(mode) = body?;
    let snapshot = ask(&service, |reply| Request::SetFailure {
        kind,
        index,
        mode,
        reply,
    })
    .await??;
    Ok(Json(snapshot))
}

async fn get_channel(State(service): State<Service>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(
        ask(&service, |reply| Request::Channel { reply }).await?,
    ))
}

async fn put_channel(
    State(service): State<Service>,
    body: Result<Json<SmsChannelConfig>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(config) = body?;
    Ok(Json(
        ask(&service, |reply| Request::SetChannel { config, reply }).await??,
    ))
}

#[derive(Deserialize)]
struct StepBody {
    seconds: f64,
}

async fn post_step(
    State(service): State<Service>,
    body: Result<Json<StepBody>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(StepBody { seconds }) = body?;
    match ask(&service, |reply| Request::Step { seconds, reply }).await? {
        Ok(status) => Ok(Json(status)),
        Err(e @ StepError::NotStepped) => Err(ApiError::new(StatusCode::CONFLICT, e.to_string())),
        Err(e @ StepError::BadDuration(_)) => Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            e.to_string(),
        )),
    }
}

async fn get_status(State(service): State<Service>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(
        ask(&service, |reply| Request::Status { reply }).await?,
    ))
}

async fn get_log(State(service): State<Service>) -> Result<impl IntoResponse, ApiError> {
    let text = ask(&service, |reply| Request::Log { reply }).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text))
}

#[derive(Deserialize)]
struct EventsQuery {
    after: Option<u64>,
}

/// Server-sent events: one `record` event per log record with `id` = seq.
/// Resume with `?after=k` or the standard `Last-Event-ID` header.
async fn events(
    State(service): State<Service>,
    Query(query): Query<EventsQuery>,
    headers: HeaderMap,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let last_event_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let after = query.after.or(last_event_id);
    let subscription = service.hub.subscribe(after);
    let mut closing = service.closing.subscribe();

    let records = futures::stream::unfold(subscription, |mut sub| async move {
        let record = sub.next().await?;
        Some((Ok(to_event(&record)), sub))
    });
    let stream = futures::StreamExt::take_until(records, async move {
        let _ = closing.wait_for(|closed| *closed).await;
    });

    let heartbeat = Event::default()
        .event("heartbeat")
        .data(r#"{"kind":"HEARTBEAT"}"#);
    Sse::new(stream).keep_alive(
        KeepAlive::new()
            .interval(service.heartbeat)
            .event(heartbeat),
    )
}

fn to_event(record: &EventRecord) -> Event {
    Event::default()
        .event("record")
        .id(record.seq.to_string())
        .data(record.to_json_line())
}
