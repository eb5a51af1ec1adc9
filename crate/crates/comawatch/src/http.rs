//! JSON API used by the dashboard, plus the device ingest endpoint.
//!
//! Every `/api` route except `login`, `health` and `ingest` needs an
//! `Authorization: Bearer <token>` header from a prior login.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use comawatch_core::{AlertEvent, Measurement, SensorKind, Thresholds, VitalSample};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::server::auth::{authorize, Action, AuthError, Role, Session};
use crate::server::escalation::{ChannelStates, ImmediateNotifier};
use crate::server::registry::{PatientRecord, ThresholdsDto};
use crate::server::{Server, ServerError};

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    })
}

#[derive(Clone)]
pub struct AppState {
    server: Arc<Mutex<Server>>,
    clock: Clock,
}

impl AppState {
    pub fn new(server: Server, clock: Clock) -> AppState {
        AppState {
            server: Arc::new(Mutex::new(server)),
            clock,
        }
    }

    pub fn server(&self) -> MutexGuard<'_, Server> {
        // a panic while holding the lock leaves the store usable: every
        // mutation is applied in a single step after validation
        self.server.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn now(&self) -> u64 {
        (self.clock)()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/login", post(login))
        .route("/api/logout", post(logout))
        .route("/api/patients", get(list_patients).post(add_patient))
        .route("/api/patients/{id}/vitals", get(vitals))
        .route("/api/patients/{id}/thresholds", put(set_thresholds))
        .route("/api/alerts", get(alerts))
        .route("/api/alerts/{id}/ack", post(ack_alert))
        .route("/api/users", post(add_user))
        .route("/api/ingest", post(ingest))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<ServerError> for ApiError {
    fn from(e: ServerError) -> Self {
        let status = match &e {
            ServerError::UnknownPatient(_) | ServerError::UnknownAlert(_) => StatusCode::NOT_FOUND,
            ServerError::Forbidden(_) => StatusCode::FORBIDDEN,
            ServerError::Auth(a) => return (*a).into(),
            ServerError::DuplicateUser(_) | ServerError::DuplicatePatient(_) | ServerError::DeviceTaken(_) => {
                StatusCode::CONFLICT
            }
            ServerError::InvalidId(_) | ServerError::InvalidThresholds(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        let status = match e {
            AuthError::Invalid | AuthError::NoSession => StatusCode::UNAUTHORIZED,
            AuthError::Locked => StatusCode::LOCKED,
        };
        ApiError(status, e.to_string())
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(axum::http::header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
}

/// Resolves the caller's session and checks the role matrix.
fn require(state: &AppState, headers: &HeaderMap, action: Action) -> Result<Session, ApiError> {
    let token = bearer(headers).ok_or(AuthError::NoSession)?;
    let session = state.server().session(token, state.now())?;
    authorize(session.role, action).map_err(ServerError::from)?;
    Ok(session)
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let stats = state.server().stats();
    Json(json!({
        "status": "ok",
        "log_entries": stats.log_entries,
        "samples": stats.samples,
        "alerts": stats.alerts,
        "pending_alerts": stats.pending_alerts,
    }))
}

#[derive(Deserialize)]
struct LoginRequest {
    username: String,
    password: String,
}

async fn login(State(state): State<AppState>, Json(req): Json<LoginRequest>) -> Result<Json<Session>, ApiError> {
    let now = state.now();
    let session = state.server().authenticate(&req.username, &req.password, now)?;
    Ok(Json(session))
}

async fn logout(State(state): State<AppState>, headers: HeaderMap) -> StatusCode {
    if let Some(token) = bearer(&headers) {
        state.server().logout(token);
    }
    StatusCode::NO_CONTENT
}

#[derive(Serialize, Deserialize)]
struct PatientDto {
    patient_id: String,
    display_name: String,
    device_id: String,
    #[serde(default)]
    thresholds: Option<ThresholdsDto>,
}

impl From<&PatientRecord> for PatientDto {
    fn from(p: &PatientRecord) -> Self {
        PatientDto {
            patient_id: p.patient_id.clone(),
            display_name: p.display_name.clone(),
            device_id: p.assigned_device_id.clone(),
            thresholds: Some(p.thresholds.into()),
        }
    }
}

async fn list_patients(State(state): State<AppState>, headers: HeaderMap) -> Result<Json<Vec<PatientDto>>, ApiError> {
    require(&state, &headers, Action::ReadPatients)?;
    let server = state.server();
    Ok(Json(server.registry().patients.values().map(PatientDto::from).collect()))
}

async fn add_patient(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<PatientDto>,
) -> Result<(StatusCode, Json<PatientDto>), ApiError> {
    require(&state, &headers, Action::ManagePatients)?;
    let record = PatientRecord {
        patient_id: req.patient_id,
        display_name: req.display_name,
        assigned_device_id: req.device_id,
        thresholds: req.thresholds.map_or_else(Thresholds::default, Thresholds::from),
    };
    let dto = PatientDto::from(&record);
    state.server().add_patient(record)?;
    Ok((StatusCode::CREATED, Json(dto)))
}

async fn set_thresholds(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(req): Json<ThresholdsDto>,
) -> Result<Json<ThresholdsDto>, ApiError> {
    require(&state, &headers, Action::EditThresholds)?;
    state.server().set_thresholds(&id, req.into())?;
    Ok(Json(req))
}

#[derive(Deserialize)]
struct VitalsQuery {
    from: Option<u64>,
    to: Option<u64>,
    /// Comma-separated kind codes, e.g. `HR,BP`.
    kinds: Option<String>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum ValueDto {
    Scalar(f64),
    Pressure { systolic: f64, diastolic: f64 },
    Edge { rising: bool },
}

#[derive(Serialize)]
struct VitalDto {
    device_id: String,
    seq: u64,
    t_ms: u64,
    kind: &'static str,
    value: ValueDto,
}

impl From<VitalSample> for VitalDto {
    fn from(s: VitalSample) -> Self {
        let value = match s.value {
            Measurement::Bpm(v) | Measurement::Celsius(v) => ValueDto::Scalar(v),
            Measurement::Pressure {
                systolic,
                diastolic,
            } => ValueDto::Pressure {
                systolic,
                diastolic,
            },
            Measurement::DigitalEdge { rising } => ValueDto::Edge { rising },
        };
        VitalDto {
            device_id: s.device_id,
            seq: s.seq,
            t_ms: s.t_ms,
            kind: s.kind.code(),
            value,
        }
    }
}

async fn vitals(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<VitalsQuery>,
) -> Result<Json<Vec<VitalDto>>, ApiError> {
    require(&state, &headers, Action::ReadVitals)?;
    let kinds = match q.kinds.as_deref().filter(|k| !k.is_empty()) {
        None => None,
        Some(list) => Some(
            list.split(',')
                .map(|c| SensorKind::from_code(c.trim()).ok_or_else(|| bad_request(format!("unknown kind `{c}`"))))
                .collect::<Result<Vec<_>, _>>()?,
        ),
    };
    let samples = state.server().query_vitals(
        &id,
        q.from.unwrap_or(0),
        q.to.unwrap_or(u64::MAX),
        kinds.as_deref(),
    )?;
    Ok(Json(samples.into_iter().map(VitalDto::from).collect()))
}

#[derive(Serialize)]
struct DispatchDto {
    channel: &'static str,
    dispatched_at_ms: u64,
    delivered_at_ms: Option<u64>,
}

#[derive(Serialize)]
struct AckDto {
    user_id: String,
    ack_at_ms: u64,
}

#[derive(Serialize)]
struct AlertDto {
    alert_id: String,
    device_id: String,
    patient_id: String,
    cause: &'static str,
    severity: &'static str,
    raised_at_ms: u64,
    dispatches: Vec<DispatchDto>,
    ack: Option<AckDto>,
    pending: bool,
}

fn alert_dto(a: &AlertEvent, pending: bool) -> AlertDto {
    AlertDto {
        alert_id: a.alert_id.clone(),
        device_id: a.device_id.clone(),
        patient_id: a.patient_id.clone(),
        cause: a.cause.code(),
        severity: a.severity.code(),
        raised_at_ms: a.raised_at_ms,
        dispatches: a
            .dispatches
            .iter()
            .map(|d| DispatchDto {
                channel: d.channel.code(),
                dispatched_at_ms: d.dispatched_at_ms,
                delivered_at_ms: d.delivered_at_ms,
            })
            .collect(),
        ack: a.ack.as_ref().map(|k| AckDto {
            user_id: k.user_id.clone(),
            ack_at_ms: k.ack_at_ms,
        }),
        pending,
    }
}

#[derive(Deserialize)]
struct AlertsQuery {
    since: Option<u64>,
}

async fn alerts(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<AlertsQuery>,
) -> Result<Json<Vec<AlertDto>>, ApiError> {
    require(&state, &headers, Action::ReadAlerts)?;
    let server = state.server();
    let out = server
        .alerts_since(q.since.unwrap_or(0))
        .into_iter()
        .map(|a| alert_dto(a, server.is_pending(&a.alert_id)))
        .collect();
    Ok(Json(out))
}

async fn ack_alert(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<AlertDto>, ApiError> {
    let session = require(&state, &headers, Action::AcknowledgeAlert)?;
    let now = state.now();
    let mut server = state.server();
    let alert = server.acknowledge_alert(&id, &session, now)?;
    Ok(Json(alert_dto(&alert, server.is_pending(&id))))
}

#[derive(Deserialize)]
struct NewUser {
    username: String,
    password: String,
    role: Role,
}

async fn add_user(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<NewUser>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    require(&state, &headers, Action::ManageUsers)?;
    let account = state.server().add_user(&req.username, &req.password, req.role)?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "user_id": account.user_id, "username": account.username, "role": account.role })),
    ))
}

/// Device uplink: one wire record per line. The response has one line per
/// input line, either the ack or `ERR|<reason>`.
async fn ingest(State(state): State<AppState>, body: String) -> String {
    let now = state.now();
    let mut server = state.server();
    let mut out = String::new();
    for line in body.lines().map(str::trim).filter(|l| !l.is_empty()) {
        match server.ingest(line, now) {
            Ok(ing) => {
                out.push_str(&ing.ack().encode());
                if let Some(id) = &ing.new_alert {
                    server.escalate(id, ChannelStates::ALL_UP, &mut ImmediateNotifier, now);
                }
            }
            Err(e) => {
                out.push_str("ERR|");
                out.push_str(&e.to_string().replace(['|', '\n'], " "));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::auth::HashParams;
    use crate::server::registry::Registry;
    use crate::server::ServerConfig;
    use axum::body::Body;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use std::sync::atomic::{AtomicU64, Ordering};
    use tower::ServiceExt;

    struct Harness {
        state: AppState,
        time: Arc<AtomicU64>,
    }

    impl Harness {
        fn new() -> Harness {
            let config = ServerConfig {
                hash: HashParams::insecure_fast(),
                ..ServerConfig::default()
            };
            let mut server = Server::in_memory(config, Registry::default());
            server.add_user("root", "rootpw", Role::Admin).unwrap();
            server.add_user("nina", "nursepw", Role::Nurse).unwrap();
            server.add_user("doc", "docpw", Role::Doctor).unwrap();
            server
                .add_patient(PatientRecord {
                    patient_id: "p1".into(),
                    display_name: "Bed 1".into(),
                    assigned_device_id: "dev1".into(),
                    thresholds: Thresholds::default(),
                })
                .unwrap();
            let time = Arc::new(AtomicU64::new(1_000));
            let t = time.clone();
            Harness {
                state: AppState::new(server, Arc::new(move || t.load(Ordering::SeqCst))),
                time,
            }
        }

        async fn call(&self, method: &str, uri: &str, token: Option<&str>, body: Option<String>) -> (StatusCode, String) {
            let mut req = Request::builder().method(method).uri(uri);
            if let Some(t) = token {
                req = req.header("authorization", format!("Bearer {t}"));
            }
            let body = match body {
                Some(b) => {
                    req = req.header("content-type", "application/json");
                    Body::from(b)
                }
                None => Body::empty(),
            };
            let resp = router(self.state.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
            let status = resp.status();
            let bytes = resp.into_body().collect().await.unwrap().to_bytes();
            (status, String::from_utf8(bytes.to_vec()).unwrap())
        }

        async fn login(&self, user: &str, pw: &str) -> String {
            let (status, body) = self
                .call("POST", "/api/login", None, Some(json!({"username": user, "password": pw}).to_string()))
                .await;
            assert_eq!(status, StatusCode::OK, "{body}");
            let v: serde_json::Value = serde_json::from_str(&body).unwrap();
            v["token"].as_str().unwrap().to_owned()
        }

        async fn ingest(&self, lines: &str) -> String {
            let req = Request::builder()
                .method("POST")
                .uri("/api/ingest")
                .body(Body::from(lines.to_owned()))
                .unwrap();
            let resp = router(self.state.clone()).oneshot(req).await.unwrap();
            let bytes = resp.into_body().collect().await.unwrap().to_bytes();
            String::from_utf8(bytes.to_vec()).unwrap()
        }
    }

    fn parse(body: &str) -> serde_json::Value {
        serde_json::from_str(body).unwrap()
    }

    #[tokio::test]
    async fn health_needs_no_session() {
        let h = Harness::new();
        let (status, body) = h.call("GET", "/api/health", None, None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(parse(&body)["status"], "ok");
    }

    #[tokio::test]
    async fn login_failures() {
        let h = Harness::new();
        let (status, _) = h
            .call("POST", "/api/login", None, Some(json!({"username": "nina", "password": "nope"}).to_string()))
            .await;
        assert_eq!(status, StatusCode::UNAUTHORIZED);
        for _ in 0..4 {
            h.call("POST", "/api/login", None, Some(json!({"username": "nina", "password": "nope"}).to_string()))
                .await;
        }
        let (status, _) = h
            .call("POST", "/api/login", None, Some(json!({"username": "nina", "password": "nursepw"}).to_string()))
            .await;
        assert_eq!(status, StatusCode::LOCKED);
    }

    #[tokio::test]
    async fn vitals_flow() {
        let h = Harness::new();
        let acks = h
            .ingest("V1|dev1|2|2000|HR|75\nV1|dev1|1|1000|BP|120/80\nV1|dev9|1|0|HR|70\nV1|dev1|3|2500|BLINK|1\nnonsense\n")
            .await;
        let lines: Vec<&str> = acks.lines().collect();
        assert_eq!(lines[0], "ACK|dev1|2");
        assert_eq!(lines[1], "ACK|dev1|1");
        assert!(lines[2].starts_with("ERR|unknown device"));
        assert!(lines[4].starts_with("ERR|malformed"));

        let token = h.login("nina", "nursepw").await;
        let (status, body) = h.call("GET", "/api/patients/p1/vitals?from=0&to=5000", Some(&token), None).await;
        assert_eq!(status, StatusCode::OK);
        let v = parse(&body);
        assert_eq!(v.as_array().unwrap().len(), 3);
        assert_eq!(v[0]["kind"], "BP");
        assert_eq!(v[0]["value"]["systolic"], 120.0);
        assert_eq!(v[1]["value"], 75.0);
        assert_eq!(v[2]["value"]["rising"], true);

        let (_, body) = h.call("GET", "/api/patients/p1/vitals?kinds=HR", Some(&token), None).await;
        assert_eq!(parse(&body).as_array().unwrap().len(), 1);
        let (status, _) = h.call("GET", "/api/patients/p1/vitals?kinds=XX", Some(&token), None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        let (status, _) = h.call("GET", "/api/patients/zz/vitals", Some(&token), None).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        let (status, _) = h.call("GET", "/api/patients/p1/vitals", None, None).await;
        assert_eq!(status, StatusCode::UNAUTHORIZED);
        let (status, _) = h.call("GET", "/api/patients/p1/vitals", Some("bogus"), None).await;
        assert_eq!(status, StatusCode::UNAUTHORIZED);
    }

    #[tokio::test]
    async fn alert_feed_and_first_ack_wins() {
        let h = Harness::new();
        h.ingest("A1|dev1|5|1000|LOW_HR|CRIT\nA1|dev1|6|3000|BLINK|NOTE\n").await;
        let nurse = h.login("nina", "nursepw").await;
        let doc = h.login("doc", "docpw").await;
        let (_, body) = h.call("GET", "/api/alerts?since=0", Some(&nurse), None).await;
        let feed = parse(&body);
        assert_eq!(feed[0]["alert_id"], "dev1-6");
        assert_eq!(feed[1]["alert_id"], "dev1-5");
        assert_eq!(feed[1]["severity"], "CRIT");
        assert_eq!(feed[1]["pending"], false);
        let (_, body) = h.call("GET", "/api/alerts?since=2000", Some(&nurse), None).await;
        assert_eq!(parse(&body).as_array().unwrap().len(), 1);

        h.time.store(9_000, Ordering::SeqCst);
        let (status, body) = h.call("POST", "/api/alerts/dev1-5/ack", Some(&nurse), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(parse(&body)["ack"]["ack_at_ms"], 9000);
        h.time.store(9_500, Ordering::SeqCst);
        let (_, body) = h.call("POST", "/api/alerts/dev1-5/ack", Some(&doc), None).await;
        assert_eq!(parse(&body)["ack"]["ack_at_ms"], 9000);
        let (status, _) = h.call("POST", "/api/alerts/dev1-99/ack", Some(&doc), None).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
    }

    #[tokio::test]
    async fn role_gates() {
        let h = Harness::new();
        let nurse = h.login("nina", "nursepw").await;
        let doc = h.login("doc", "docpw").await;
        let admin = h.login("root", "rootpw").await;
        let new_user = json!({"username": "sam", "password": "pw", "role": "nurse"}).to_string();
        let (status, _) = h.call("POST", "/api/users", Some(&nurse), Some(new_user.clone())).await;
        assert_eq!(status, StatusCode::FORBIDDEN);
        let (status, _) = h.call("POST", "/api/users", Some(&admin), Some(new_user.clone())).await;
        assert_eq!(status, StatusCode::CREATED);
        let (status, _) = h.call("POST", "/api/users", Some(&admin), Some(new_user)).await;
        assert_eq!(status, StatusCode::CONFLICT);

        let th = serde_json::to_string(&ThresholdsDto::from(Thresholds::default())).unwrap();
        let (status, _) = h.call("PUT", "/api/patients/p1/thresholds", Some(&nurse), Some(th.clone())).await;
        assert_eq!(status, StatusCode::FORBIDDEN);
        let (status, _) = h.call("PUT", "/api/patients/p1/thresholds", Some(&doc), Some(th)).await;
        assert_eq!(status, StatusCode::OK);

        let patient = json!({"patient_id": "p2", "display_name": "Bed 2", "device_id": "dev2"}).to_string();
        let (status, _) = h.call("POST", "/api/patients", Some(&doc), Some(patient.clone())).await;
        assert_eq!(status, StatusCode::FORBIDDEN);
        let (status, _) = h.call("POST", "/api/patients", Some(&admin), Some(patient)).await;
        assert_eq!(status, StatusCode::CREATED);
        let (_, body) = h.call("GET", "/api/patients", Some(&nurse), None).await;
        let list = parse(&body);
        assert_eq!(list.as_array().unwrap().len(), 2);
        assert_eq!(list[1]["thresholds"]["hr_min"], 50.0);
    }

    #[tokio::test]
    async fn logout_and_expiry() {
        let h = Harness::new();
        let token = h.login("nina", "nursepw").await;
        let (status, _) = h.call("GET", "/api/patients", Some(&token), None).await;
        assert_eq!(status, StatusCode::OK);
        h.time.fetch_add(crate::server::auth::DEFAULT_SESSION_TTL_MS, Ordering::SeqCst);
        let (status, _) = h.call("GET", "/api/patients", Some(&token), None).await;
        assert_eq!(status, StatusCode::UNAUTHORIZED);
        let token = h.login("nina", "nursepw").await;
        let (status, _) = h.call("POST", "/api/logout", Some(&token), None).await;
        assert_eq!(status, StatusCode::NO_CONTENT);
        let (status, _) = h.call("GET", "/api/patients", Some(&token), None).await;
        assert_eq!(status, StatusCode::UNAUTHORIZED);
    }
}
