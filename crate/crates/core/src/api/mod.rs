//! HTTP JSON API.
//!
//! Handlers authenticate with a bearer token, then hand the (synchronous)
//! core call to the blocking pool. Request bodies are never logged.

mod error;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, FromRequestParts, Multipart, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tracing::warn;

pub use error::{ApiError, ErrorBody, ERROR_CODES};

use crate::clock::Clock;
use crate::config::Config;
use crate::directory::{ContactInput, Directory};
use crate::dispatch::{Alert, Dispatcher, MailTransport};
use crate::history::{append_history, query_history, HistoryEvent, HistoryKind, HistoryQuery};
use crate::model::{EmergencyContact, ScheduleId, UserId};
use crate::ping::{CheckInSchedule, PingError, SafetyPing, SosRequest};
use crate::questionnaire::{record_assessment, score_responses, Assessment, Questionnaire, QuestionnaireRegistry, ResponseSet};
use crate::store::Store;
use crate::tox::{
    analyze_image, analyze_text, build_scorer, CommandExtractor, Scorer, ScorerConfig, TextExtractor, ToxicityReport,
};

/// Last time each background loop completed a pass.
#[derive(Debug)]
pub struct Health {
    scheduler_tick: Mutex<DateTime<Utc>>,
    dispatcher_tick: Mutex<DateTime<Utc>>,
}

impl Health {
    pub fn new(now: DateTime<Utc>) -> Self {
        Self {
            scheduler_tick: Mutex::new(now),
            dispatcher_tick: Mutex::new(now),
        }
    }

    pub fn scheduler_ticked(&self, at: DateTime<Utc>) {
        *self.scheduler_tick.lock().unwrap() = at;
    }

    pub fn dispatcher_ticked(&self, at: DateTime<Utc>) {
        *self.dispatcher_tick.lock().unwrap() = at;
    }

    pub fn last_scheduler_tick(&self) -> DateTime<Utc> {
        *self.scheduler_tick.lock().unwrap()
    }
}

/// Everything a handler or background loop needs.
#[derive(Clone)]
pub struct AppState {
    pub store: Arc<dyn Store>,
    pub clock: Arc<dyn Clock>,
    pub scorer: Arc<dyn Scorer>,
    pub scorer_config: Arc<ScorerConfig>,
    pub extractor: Option<Arc<dyn TextExtractor>>,
    pub dispatcher: Arc<Dispatcher>,
    pub ping: Arc<SafetyPing>,
    pub questionnaires: Arc<QuestionnaireRegistry>,
    pub transport: Arc<dyn MailTransport>,
    pub health: Arc<Health>,
    pub tick_secs: u64,
    pub max_body_bytes: usize,
    pub max_image_bytes: usize,
}

impl AppState {
    pub fn new(
        config: &Config,
        store: Arc<dyn Store>,
        clock: Arc<dyn Clock>,
        transport: Arc<dyn MailTransport>,
    ) -> anyhow::Result<Self> {
        let scorer: Arc<dyn Scorer> = Arc::from(build_scorer(&config.scorer)?);
        let extractor = config
            .extractor
            .program
            .as_ref()
            .map(|p| Arc::new(CommandExtractor::new(p.clone(), config.extractor.args.clone())) as Arc<dyn TextExtractor>);
        let mut questionnaires = QuestionnaireRegistry::with_bundled();
        for path in &config.questionnaires {
            questionnaires.insert(
                Questionnaire::load(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?,
            );
        }
        let dispatcher = Arc::new(Dispatcher::new(store.clone(), config.dispatch()));
        let ping = Arc::new(SafetyPing::new(store.clone(), clock.clone(), dispatcher.clone(), config.ping()));
        Ok(Self {
            health: Arc::new(Health::new(clock.now())),
            store,
            clock,
            scorer,
            scorer_config: Arc::new(config.scorer.clone()),
            extractor,
            dispatcher,
            ping,
            questionnaires: Arc::new(questionnaires),
            transport,
            tick_secs: config.tick_seconds,
            max_body_bytes: config.max_body_bytes,
            max_image_bytes: config.max_image_bytes,
        })
    }

    fn directory(&self) -> Directory<'_> {
        Directory::new(self.store.as_ref())
    }

    fn record(&self, user: &UserId, kind: HistoryKind, summary: String) {
        let event = HistoryEvent::new(user.clone(), kind, summary, self.clock.now());
        if let Err(e) = append_history(self.store.as_ref(), event) {
            warn!(error = %e, "could not append history event");
        }
    }
}

pub fn router(state: AppState) -> Router {
    let text_limit = state.max_body_bytes;
    let image_limit = state.max_image_bytes;
    Router::new()
        .route(
            "/api/analyze/text",
            post(analyze_text_handler).layer(DefaultBodyLimit::max(text_limit)),
        )
        .route(
            "/api/analyze/image",
            post(analyze_image_handler).layer(DefaultBodyLimit::max(image_limit)),
        )
        .route("/api/schedules", post(create_schedule).get(list_schedules))
        .route("/api/schedules/{id}/checkin", post(check_in))
        .route("/api/schedules/{id}/pause", post(pause))
        .route("/api/schedules/{id}/resume", post(resume))
        .route("/api/schedules/{id}/disarm", post(disarm))
        .route("/api/sos", post(sos))
        .route("/api/contacts", put(set_contacts).get(get_contacts))
        .route("/api/questionnaire/{id}", get(get_questionnaire))
        .route("/api/questionnaire/{id}/submit", post(submit_questionnaire))
        .route("/api/history", get(history))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(text_limit))
        .with_state(state)
}

/// Runs a synchronous core call on the blocking pool.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

/// Authenticated caller.
pub struct AuthUser(pub UserId);

impl FromRequestParts<AppState> for AuthUser {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .ok_or_else(ApiError::unauthenticated)?;
        match state.directory().authenticate(token) {
            Ok(Some(user)) => Ok(AuthUser(user)),
            Ok(None) => Err(ApiError::unauthenticated()),
            Err(e) => Err(e.into()),
        }
    }
}

/// JSON body whose rejections never echo the payload.
pub struct ApiJson<T>(pub T);

impl<T, S> FromRequest<S> for ApiJson<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(ApiJson(v)),
            Err(rejection) => Err(json_rejection(&rejection)),
        }
    }
}

fn json_rejection(rejection: &JsonRejection) -> ApiError {
    match rejection.status() {
        StatusCode::PAYLOAD_TOO_LARGE => ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", "request body is too large"),
        StatusCode::UNSUPPORTED_MEDIA_TYPE => ApiError::bad_request("expected Content-Type: application/json"),
        _ => ApiError::bad_request("request body does not match the expected JSON shape"),
    }
}

#[derive(Debug, Deserialize)]
pub struct AnalyzeTextRequest {
    pub text: String,
}

async fn analyze_text_handler(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    ApiJson(body): ApiJson<AnalyzeTextRequest>,
) -> Result<Json<ToxicityReport>, ApiError> {
    blocking(move || {
        let report = analyze_text(&body.text, state.scorer.as_ref(), &state.scorer_config)?;
        state.record(&user, HistoryKind::AnalysisPerformed, report.summary());
        Ok(Json(report))
    })
    .await
}

async fn analyze_image_handler(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    mut multipart: Multipart,
) -> Result<Json<ToxicityReport>, ApiError> {
    let mut image = None;
    loop {
        let field = match multipart.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) if e.status() == StatusCode::PAYLOAD_TOO_LARGE => {
                return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", "image is too large"))
            }
            Err(_) => return Err(ApiError::bad_request("malformed multipart body")),
        };
        if field.name() == Some("image") {
            let bytes = field.bytes().await.map_err(|e| {
                if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
                    ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", "image is too large")
                } else {
                    ApiError::bad_request("malformed multipart body")
                }
            })?;
            image = Some(bytes);
        }
    }
    let image = image.ok_or_else(|| ApiError::bad_request("multipart field \"image\" is required"))?;
    if image.is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_input", "uploaded image is empty"));
    }
    let extractor = state
        .extractor
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::BAD_GATEWAY, "extraction_failed", "no text extractor is configured"))?;
    blocking(move || {
        let report = analyze_image(&image, extractor.as_ref(), state.scorer.as_ref(), &state.scorer_config)?;
        state.record(&user, HistoryKind::AnalysisPerformed, report.summary());
        Ok(Json(report))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct CreateScheduleRequest {
    pub interval_seconds: u64,
}

async fn create_schedule(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    ApiJson(body): ApiJson<CreateScheduleRequest>,
) -> Result<(StatusCode, Json<CheckInSchedule>), ApiError> {
    blocking(move || {
        let s = state.ping.create_schedule(&user, body.interval_seconds)?;
        Ok((StatusCode::CREATED, Json(s)))
    })
    .await
}

async fn list_schedules(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
) -> Result<Json<Vec<CheckInSchedule>>, ApiError> {
    blocking(move || Ok(Json(state.ping.list_for_user(&user)?))).await
}

/// Schedules of other users are reported as missing.
fn owned(state: &AppState, user: &UserId, id: &ScheduleId) -> Result<(), ApiError> {
    let s = state.ping.get(id)?;
    if &s.user_id != user {
        return Err(PingError::NotFound(id.clone()).into());
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckInResponse {
    #[serde(flatten)]
    pub schedule: CheckInSchedule,
    pub late: bool,
    /// Alert fired for a deadline that passed before this check-in.
    pub alert_id: Option<String>,
}

async fn check_in(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(id): Path<String>,
) -> Result<Json<CheckInResponse>, ApiError> {
    blocking(move || {
        let id = ScheduleId::new(id);
        owned(&state, &user, &id)?;
        let out = state.ping.check_in(&id)?;
        Ok(Json(CheckInResponse {
            schedule: out.schedule,
            late: out.late,
            alert_id: out.alert.map(|a| a.alert_id.to_string()),
        }))
    })
    .await
}

async fn lifecycle(
    state: AppState,
    user: UserId,
    id: String,
    op: fn(&SafetyPing, &ScheduleId) -> Result<CheckInSchedule, PingError>,
) -> Result<Json<CheckInSchedule>, ApiError> {
    blocking(move || {
        let id = ScheduleId::new(id);
        owned(&state, &user, &id)?;
        Ok(Json(op(&state.ping, &id)?))
    })
    .await
}

async fn pause(State(state): State<AppState>, AuthUser(user): AuthUser, Path(id): Path<String>) -> Result<Json<CheckInSchedule>, ApiError> {
    lifecycle(state, user, id, SafetyPing::pause).await
}

async fn resume(State(state): State<AppState>, AuthUser(user): AuthUser, Path(id): Path<String>) -> Result<Json<CheckInSchedule>, ApiError> {
    lifecycle(state, user, id, SafetyPing::resume).await
}

async fn disarm(State(state): State<AppState>, AuthUser(user): AuthUser, Path(id): Path<String>) -> Result<Json<CheckInSchedule>, ApiError> {
    lifecycle(state, user, id, SafetyPing::disarm).await
}

async fn sos(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    ApiJson(body): ApiJson<SosRequest>,
) -> Result<(StatusCode, Json<Alert>), ApiError> {
    blocking(move || {
        let alert = state.ping.trigger_sos(&user, &body)?;
        Ok((StatusCode::CREATED, Json(alert)))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ContactsBody<T> {
    pub contacts: Vec<T>,
}

async fn set_contacts(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    ApiJson(body): ApiJson<ContactsBody<ContactInput>>,
) -> Result<Json<ContactsBody<EmergencyContact>>, ApiError> {
    blocking(move || {
        let contacts = state.directory().set_contacts(&user, body.contacts)?;
        Ok(Json(ContactsBody { contacts }))
    })
    .await
}

async fn get_contacts(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
) -> Result<Json<ContactsBody<EmergencyContact>>, ApiError> {
    blocking(move || {
        Ok(Json(ContactsBody {
            contacts: state.directory().contacts(&user)?,
        }))
    })
    .await
}

async fn get_questionnaire(
    State(state): State<AppState>,
    AuthUser(_): AuthUser,
    Path(id): Path<String>,
) -> Result<Json<Questionnaire>, ApiError> {
    Ok(Json(state.questionnaires.get(&id)?.clone()))
}

#[derive(Debug, Deserialize)]
pub struct SubmitRequest {
    pub answers: BTreeMap<String, usize>,
    /// Defaults to the served version.
    #[serde(default)]
    pub version: Option<u32>,
}

async fn submit_questionnaire(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<SubmitRequest>,
) -> Result<Json<Assessment>, ApiError> {
    blocking(move || {
        let q = state.questionnaires.get(&id)?;
        let now = state.clock.now();
        let responses = ResponseSet {
            questionnaire_id: q.id.clone(),
            version: body.version.unwrap_or(q.version),
            answers: body.answers,
            submitted_at: Some(now),
        };
        let assessment = score_responses(q, &responses, now)?;
        record_assessment(state.store.as_ref(), &user, &assessment)?;
        Ok(Json(assessment))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct HistoryParams {
    pub since: Option<String>,
    pub kind: Option<String>,
}

async fn history(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    params: Result<Query<HistoryParams>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<Vec<HistoryEvent>>, ApiError> {
    let Query(params) = params.map_err(|_| ApiError::bad_request("invalid query string"))?;
    let since = params
        .since
        .as_deref()
        .map(|s| {
            DateTime::parse_from_rfc3339(s)
                .map(|t| t.with_timezone(&Utc))
                .map_err(|_| ApiError::bad_request("since must be an RFC 3339 timestamp"))
        })
        .transpose()?;
    let kind = params
        .kind
        .as_deref()
        .map(|k| k.parse::<HistoryKind>().map_err(|_| ApiError::bad_request(format!("unknown history kind {k:?}"))))
        .transpose()?;
    blocking(move || {
        let events = query_history(state.store.as_ref(), &user, &HistoryQuery { since, kind })?;
        Ok(Json(events))
    })
    .await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthReport {
    pub status: String,
    pub scheduler_tick_age_s: i64,
    pub outbox_pending: usize,
}

async fn healthz(State(state): State<AppState>) -> Response {
    let age = (state.clock.now() - state.health.last_scheduler_tick()).num_seconds().max(0);
    let stalled = age > 3 * state.tick_secs as i64;
    match state.dispatcher.pending_count() {
        Ok(pending) => Json(HealthReport {
            status: if stalled { "degraded" } else { "ok" }.into(),
            scheduler_tick_age_s: age,
            outbox_pending: pending,
        })
        .into_response(),
        Err(e) => ApiError::from(e).into_response(),
    }
}
