//! HTTP JSON service for interactive interventions on the test split.
//!
//! The model and test split are shared read-only. Each session owns an
//! override mask guarded by its own lock, so sessions never interfere.
//! Every prediction goes through [`intervened_logits`], the same path the
//! offline curves use.

use std::collections::HashMap;
use std::net::{Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use syncb_core::data::ConceptDataset;
use syncb_core::intervention::{
    estimate_epsilons, intervened_logits, is_uncertain, uncertainty_counts, usi_order, EpsilonProfile, EvalMode,
};
use syncb_core::metrics::task_accuracy;
use syncb_core::model::{Branch, Overrides, SynCbModel};
use syncb_core::nn::{argmax, softmax_rows, Tensor};

use crate::error::{CliError, CliResult, Classify};

/// An HTTP error with a `{code, message}` body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self { status: StatusCode::NOT_FOUND, message: message.into() }
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self { status: StatusCode::CONFLICT, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, message: message.into() }
    }

    fn code(&self) -> &'static str {
        match self.status {
            StatusCode::BAD_REQUEST => "usage",
            StatusCode::NOT_FOUND => "not_found",
            StatusCode::CONFLICT => "conflict",
            _ => "internal",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.code().into(), message: self.message };
        (self.status, Json(body)).into_response()
    }
}

impl From<syncb_core::Error> for ApiError {
    fn from(err: syncb_core::Error) -> Self {
        Self::internal(err.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// The immutable half of the service state.
pub struct ServedModel {
    model: SynCbModel,
    test: ConceptDataset,
    eval_mode: EvalMode,
    epsilons: EpsilonProfile,
    /// Concept probabilities without overrides.
    probs: Tensor,
    baseline_accuracy: f64,
}

impl ServedModel {
    pub fn new(model: SynCbModel, test: ConceptDataset, eval_mode: EvalMode) -> CliResult<Self> {
        if !model.config().has_concepts() {
            return Err(CliError::usage("serving needs a model with concepts"));
        }
        crate::experiment::check_compatible(&model, &test)?;
        let out = model.predict(test.features(), None)?;
        let probs = out.concept_probs()?.clone();
        let epsilons = estimate_epsilons(&probs)?;
        let logits = intervened_logits(&model, &test, &Overrides::none(test.len(), test.n_concepts()), eval_mode)?;
        let baseline_accuracy = task_accuracy(&logits, test.labels());
        Ok(Self { model, test, eval_mode, epsilons, probs, baseline_accuracy })
    }

    pub fn model(&self) -> &SynCbModel {
        &self.model
    }

    pub fn test(&self) -> &ConceptDataset {
        &self.test
    }

    pub fn eval_mode(&self) -> EvalMode {
        self.eval_mode
    }

    pub fn epsilons(&self) -> &EpsilonProfile {
        &self.epsilons
    }

    fn total_units(&self) -> usize {
        self.test.len() * self.test.n_concepts()
    }

    fn fraction(&self, units: usize) -> f64 {
        units as f64 / self.total_units() as f64
    }

    fn accuracy(&self, overrides: &Overrides) -> Result<f64, ApiError> {
        let logits = intervened_logits(&self.model, &self.test, overrides, self.eval_mode)?;
        Ok(task_accuracy(&logits, self.test.labels()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricPoint {
    pub budget_units: usize,
    pub budget_fraction: f64,
    pub accuracy: f64,
}

struct Session {
    overrides: Overrides,
    history: Vec<MetricPoint>,
}

pub struct AppState {
    served: ServedModel,
    sessions: Mutex<HashMap<u64, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(served: ServedModel) -> Self {
        Self { served, sessions: Mutex::new(HashMap::new()), next_id: AtomicU64::new(1) }
    }

    pub fn served(&self) -> &ServedModel {
        &self.served
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let unknown = || ApiError::not_found(format!("unknown session '{id}'"));
        let id: u64 = id.parse().map_err(|_| unknown())?;
        let sessions = self.sessions.lock().map_err(|_| ApiError::internal("session table poisoned"))?;
        sessions.get(&id).cloned().ok_or_else(unknown)
    }

    fn sample(&self, sid: &str) -> Result<usize, ApiError> {
        let unknown = || ApiError::not_found(format!("unknown sample '{sid}'"));
        let s: usize = sid.parse().map_err(|_| unknown())?;
        if s >= self.served.test.len() {
            return Err(unknown());
        }
        Ok(s)
    }
}

fn lock(session: &Mutex<Session>) -> Result<std::sync::MutexGuard<'_, Session>, ApiError> {
    session.lock().map_err(|_| ApiError::internal("session poisoned"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub kind: String,
    pub n_concepts: usize,
    pub n_classes: usize,
    pub n_samples: usize,
    pub concept_names: Vec<String>,
    pub groups: Vec<Vec<usize>>,
    pub epsilon: Vec<f64>,
    pub eval_mode: EvalMode,
    pub baseline_accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: u64,
    pub budget_units: usize,
    pub budget_fraction: f64,
    pub n_samples: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueueItem {
    pub sample: usize,
    pub uncertain_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Queue {
    pub policy: String,
    pub items: Vec<QueueItem>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ConceptView {
    pub index: usize,
    pub name: String,
    pub probability: f64,
    pub uncertain: bool,
    #[serde(rename = "override")]
    pub override_value: Option<u8>,
    pub truth: u8,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleView {
    pub sample: usize,
    pub label: usize,
    pub concepts: Vec<ConceptView>,
    pub cb_probs: Vec<f64>,
    pub cb_class: usize,
    pub nn_probs: Option<Vec<f64>>,
    pub routing_score: Option<f64>,
    pub branch: Branch,
    pub final_logits: Vec<f64>,
    pub final_probs: Vec<f64>,
    pub prediction: usize,
    pub budget_units: usize,
    pub budget_fraction: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub session: u64,
    pub budget_units: usize,
    pub budget_fraction: f64,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    pub history: Vec<MetricPoint>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverrideRequest {
    pub index: usize,
    pub value: u8,
}

fn sample_view(state: &AppState, session: &Session, s: usize) -> Result<SampleView, ApiError> {
    let served = &state.served;
    let row = served.test.subset(&[s]);
    let overrides = session.overrides.select_rows(&[s]);
    let out = served.model.predict(row.features(), Some(&overrides))?;
    let final_logits = intervened_logits(&served.model, &row, &overrides, served.eval_mode)?;
    let cb = out.cb_logits()?;
    let concepts = (0..served.test.n_concepts())
        .map(|i| {
            let p = served.probs.get(s, i);
            ConceptView {
                index: i,
                name: served.test.concept_names()[i].clone(),
                probability: p,
                uncertain: is_uncertain(p, served.epsilons.epsilons[i]),
                override_value: session.overrides.get(s, i),
                truth: served.test.concept(s, i),
            }
        })
        .collect();
    let units = session.overrides.count();
    Ok(SampleView {
        sample: s,
        label: served.test.labels()[s],
        concepts,
        cb_probs: softmax_rows(cb).row(0).to_vec(),
        cb_class: argmax(cb.row(0)),
        nn_probs: out.nn_logits.as_ref().map(|l| softmax_rows(l).row(0).to_vec()),
        routing_score: out.routing_scores.as_ref().map(|r| r[0]),
        branch: out.branches[0],
        final_probs: softmax_rows(&final_logits).row(0).to_vec(),
        prediction: argmax(final_logits.row(0)),
        final_logits: final_logits.row(0).to_vec(),
        budget_units: units,
        budget_fraction: served.fraction(units),
    })
}

fn record(state: &AppState, session: &mut Session) -> Result<(), ApiError> {
    let units = session.overrides.count();
    let accuracy = state.served.accuracy(&session.overrides)?;
    session.history.push(MetricPoint { budget_units: units, budget_fraction: state.served.fraction(units), accuracy });
    Ok(())
}

async fn model_info(State(state): State<Arc<AppState>>) -> ApiResult<ModelInfo> {
    let s = &state.served;
    Ok(Json(ModelInfo {
        kind: s.model.kind().name().into(),
        n_concepts: s.test.n_concepts(),
        n_classes: s.test.n_classes(),
        n_samples: s.test.len(),
        concept_names: s.test.concept_names().to_vec(),
        groups: s.test.groups().to_vec(),
        epsilon: s.epsilons.epsilons.clone(),
        eval_mode: s.eval_mode,
        baseline_accuracy: s.baseline_accuracy,
    }))
}

async fn create_session(State(state): State<Arc<AppState>>) -> Result<(StatusCode, Json<SessionInfo>), ApiError> {
    let s = &state.served;
    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    let session = Session {
        overrides: Overrides::none(s.test.len(), s.test.n_concepts()),
        history: vec![MetricPoint { budget_units: 0, budget_fraction: 0.0, accuracy: s.baseline_accuracy }],
    };
    state
        .sessions
        .lock()
        .map_err(|_| ApiError::internal("session table poisoned"))?
        .insert(id, Arc::new(Mutex::new(session)));
    let info = SessionInfo { id, budget_units: 0, budget_fraction: 0.0, n_samples: s.test.len() };
    Ok((StatusCode::CREATED, Json(info)))
}

async fn session_info(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<SessionInfo> {
    let session = state.session(&id)?;
    let units = lock(&session)?.overrides.count();
    Ok(Json(SessionInfo {
        id: id.parse().unwrap_or_default(),
        budget_units: units,
        budget_fraction: state.served.fraction(units),
        n_samples: state.served.test.len(),
    }))
}

async fn queue(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Queue> {
    state.session(&id)?;
    let s = &state.served;
    let counts = uncertainty_counts(&s.probs, &s.epsilons);
    let policy = params.get("policy").map_or("usi", String::as_str);
    let order = match policy {
        "usi" => usi_order(&s.probs, &s.epsilons),
        "index" => (0..s.test.len()).collect(),
        other => return Err(ApiError::bad_request(format!("unknown queue policy '{other}' (expected usi or index)"))),
    };
    let items = order.into_iter().map(|i| QueueItem { sample: i, uncertain_count: counts[i] }).collect();
    Ok(Json(Queue { policy: policy.into(), items }))
}

async fn get_sample(
    State(state): State<Arc<AppState>>,
    Path((id, sid)): Path<(String, String)>,
) -> ApiResult<SampleView> {
    let session = state.session(&id)?;
    let s = state.sample(&sid)?;
    let guard = lock(&session)?;
    Ok(Json(sample_view(&state, &guard, s)?))
}

async fn intervene(
    State(state): State<Arc<AppState>>,
    Path((id, sid)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<SampleView> {
    let session = state.session(&id)?;
    let s = state.sample(&sid)?;
    let req: OverrideRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid override body: {e}")))?;
    let n = state.served.test.n_concepts();
    if req.index >= n {
        return Err(ApiError::bad_request(format!("concept index {} out of range for {n} concepts", req.index)));
    }
    if req.value > 1 {
        return Err(ApiError::bad_request(format!("override value {} is not 0 or 1", req.value)));
    }
    let mut guard = lock(&session)?;
    match guard.overrides.get(s, req.index) {
        Some(v) if v == req.value => {}
        Some(v) => {
            return Err(ApiError::conflict(format!(
                "concept {} of sample {s} is already overridden with {v}",
                req.index
            )))
        }
        None => {
            guard.overrides.set(s, req.index, req.value);
            record(&state, &mut guard)?;
        }
    }
    Ok(Json(sample_view(&state, &guard, s)?))
}

async fn remove_override(
    State(state): State<Arc<AppState>>,
    Path((id, sid, index)): Path<(String, String, String)>,
) -> ApiResult<SampleView> {
    let session = state.session(&id)?;
    let s = state.sample(&sid)?;
    let n = state.served.test.n_concepts();
    let i: usize = index
        .parse()
        .ok()
        .filter(|&i| i < n)
        .ok_or_else(|| ApiError::bad_request(format!("invalid concept index '{index}'")))?;
    let mut guard = lock(&session)?;
    if guard.overrides.get(s, i).is_none() {
        return Err(ApiError::not_found(format!("concept {i} of sample {s} has no override")));
    }
    guard.overrides.clear(s, i);
    record(&state, &mut guard)?;
    Ok(Json(sample_view(&state, &guard, s)?))
}

async fn metrics(
    State(state): State<Arc<AppState>>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Metrics> {
    let id = params.get("session").ok_or_else(|| ApiError::bad_request("missing 'session' query parameter"))?;
    let session = state.session(id)?;
    let guard = lock(&session)?;
    let units = guard.overrides.count();
    Ok(Json(Metrics {
        session: id.parse().unwrap_or_default(),
        budget_units: units,
        budget_fraction: state.served.fraction(units),
        accuracy: state.served.accuracy(&guard.overrides)?,
        baseline_accuracy: state.served.baseline_accuracy,
        history: guard.history.clone(),
    }))
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/model", get(model_info))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(session_info))
        .route("/api/sessions/{id}/queue", get(queue))
        .route("/api/sessions/{id}/samples/{sid}", get(get_sample))
        .route("/api/sessions/{id}/samples/{sid}/intervene", post(intervene))
        .route("/api/sessions/{id}/samples/{sid}/intervene/{index}", delete(remove_override))
        .route("/api/metrics", get(metrics))
        .fallback(fallback)
        .with_state(state)
}

/// Bind `127.0.0.1:port` and serve until the process ends.
pub async fn serve(state: Arc<AppState>, port: u16) -> CliResult<()> {
    let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, port));
    let listener = tokio::net::TcpListener::bind(addr).await.runtime_err(|| format!("binding {addr}"))?;
    let local = listener.local_addr().runtime_err(|| "reading bound address".into())?;
    eprintln!("listening on http://{local}");
    axum::serve(listener, router(state)).await.runtime_err(|| "serving".into())
}
