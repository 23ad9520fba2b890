//! HTTP service over one solved session.
//!
//! Reads take a cheap snapshot of the current state. Mutations queue on a
//! single async mutex, run on the blocking pool against a clone of the
//! snapshot, and swap it in only on success.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use demandforge::counts::{Band, SourceKind, SEGMENTS};
use demandforge::netgraph::{Approach, Movement};
use demandforge::qipsolve::RouteSolution;
use demandforge::refine::{
    get_counts, refine_item, ConstraintSpec, FeedbackItem, IntersectionCounts, LlmClient, RefineError,
    RefinementState, Tallies, Verdicts,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::pipeline::Pipeline;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Idle,
    Solving,
    Refining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub phase: Phase,
    pub done: usize,
    pub total: usize,
    pub iteration: usize,
    pub constraints: usize,
    pub last_error: Option<String>,
}

pub struct AppState {
    pipeline: Arc<Pipeline>,
    snapshot: RwLock<Arc<RefinementState>>,
    writer: tokio::sync::Mutex<()>,
    client: Arc<Mutex<Box<dyn LlmClient>>>,
    status: Arc<Mutex<Status>>,
}

impl AppState {
    pub fn new(pipeline: Arc<Pipeline>, state: RefinementState, client: Box<dyn LlmClient>) -> Arc<Self> {
        let status = Status {
            phase: Phase::Idle,
            done: state.solutions.len(),
            total: state.solutions.len(),
            iteration: state.iteration,
            constraints: state.atoms().count(),
            last_error: None,
        };
        Arc::new(Self {
            pipeline,
            snapshot: RwLock::new(Arc::new(state)),
            writer: tokio::sync::Mutex::new(()),
            client: Arc::new(Mutex::new(client)),
            status: Arc::new(Mutex::new(status)),
        })
    }

    pub fn snapshot(&self) -> Arc<RefinementState> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn swap(&self, state: RefinementState) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(state);
    }

    fn set_status(&self, f: impl FnOnce(&mut Status)) {
        f(&mut self.status.lock().expect("status lock"));
    }

    fn finish(&self, error: Option<String>) {
        let snap = self.snapshot();
        self.set_status(|s| {
            s.phase = Phase::Idle;
            s.iteration = snap.iteration;
            s.constraints = snap.atoms().count();
            s.last_error = error;
        });
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/counts", get(counts))
        .route("/api/intersections", get(intersections))
        .route("/api/feedback", post(feedback))
        .route("/api/resolve", post(resolve))
        .route("/api/report", get(report))
        .route("/api/status", get(status))
        .route("/api/constraints", get(constraints))
        .fallback(|| async { ApiError::BadRequest("no such endpoint".into()).with_status(StatusCode::NOT_FOUND) })
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> Result<(), ApiError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ApiError::Config(format!("cannot bind {addr}: {e}")))?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))
}

impl ApiError {
    fn with_status(self, status: StatusCode) -> Response {
        (status, Json(self.to_json())).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationCount {
    pub location: usize,
    pub intersection: u32,
    pub approach: Approach,
    pub movement: Movement,
    pub count: i64,
    pub cv: Option<Band>,
    pub ld: Option<Band>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountsView {
    pub segment: usize,
    pub iteration: usize,
    pub locations: Vec<LocationCount>,
}

fn parse_segment(q: &HashMap<String, String>) -> Result<usize, ApiError> {
    let raw = q
        .get("segment")
        .ok_or_else(|| ApiError::BadRequest("missing query parameter segment".into()))?;
    match raw.parse::<usize>() {
        Ok(t) if t < SEGMENTS => Ok(t),
        _ => Err(ApiError::BadRequest(format!(
            "segment must be an integer in 0..{SEGMENTS}, got {raw:?}"
        ))),
    }
}

async fn counts(
    State(app): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<CountsView>, ApiError> {
    let t = parse_segment(&q)?;
    let snap = app.snapshot();
    let p = &app.pipeline;
    let locations = p
        .network
        .locations()
        .iter()
        .map(|l| {
            Ok(LocationCount {
                location: l.id,
                intersection: l.intersection,
                approach: l.approach,
                movement: l.movement,
                count: get_counts(&snap.solutions, &p.incidence, l.id, t)?,
                cv: p.bands_cv.get(l.id, t),
                ld: p.bands_ld.get(l.id, t),
            })
        })
        .collect::<Result<Vec<_>, RefineError>>()?;
    Ok(Json(CountsView {
        segment: t,
        iteration: snap.iteration,
        locations,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationRef {
    pub location: usize,
    pub approach: Approach,
    pub movement: Movement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionView {
    pub id: u32,
    pub approaches: Vec<Approach>,
    pub locations: Vec<LocationRef>,
}

async fn intersections(State(app): State<Arc<AppState>>) -> Json<Vec<IntersectionView>> {
    let mut by_id: BTreeMap<u32, IntersectionView> = BTreeMap::new();
    for l in app.pipeline.network.locations() {
        let v = by_id.entry(l.intersection).or_insert_with(|| IntersectionView {
            id: l.intersection,
            approaches: Vec::new(),
            locations: Vec::new(),
        });
        if !v.approaches.contains(&l.approach) {
            v.approaches.push(l.approach);
        }
        v.locations.push(LocationRef {
            location: l.id,
            approach: l.approach,
            movement: l.movement,
        });
    }
    Json(
        by_id
            .into_values()
            .map(|mut v| {
                v.approaches.sort();
                v
            })
            .collect(),
    )
}

/// Feedback body; `k` defaults to one past the accepted item count.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackRequest {
    #[serde(default)]
    k: Option<usize>,
    segment: usize,
    intersection: u32,
    text: String,
}

/// Counts nested as approach → movement → count.
pub type NestedCounts = BTreeMap<String, BTreeMap<String, i64>>;

pub fn nest(counts: &IntersectionCounts) -> NestedCounts {
    let mut out = NestedCounts::new();
    for ((a, m), &c) in counts {
        out.entry(a.to_string()).or_default().insert(m.to_string(), c);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackView {
    pub accepted: bool,
    pub k: usize,
    pub segment: usize,
    pub intersection: u32,
    pub verdicts: Verdicts,
    pub tallies: Tallies,
    pub before: NestedCounts,
    pub after: Option<NestedCounts>,
    pub spec: Option<ConstraintSpec>,
    pub iteration: usize,
}

async fn feedback(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: FeedbackRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("feedback body: {e}")))?;
    if req.text.trim().is_empty() {
        return Err(ApiError::BadRequest("feedback text is empty".into()));
    }
    let _turn = app.writer.lock().await;
    let snap = app.snapshot();
    let item = FeedbackItem {
        k: req.k.unwrap_or(snap.specs.len() + 1),
        segment: req.segment,
        intersection: req.intersection,
        text: req.text,
    };
    app.set_status(|s| {
        s.phase = Phase::Refining;
        s.last_error = None;
    });
    let client = app.client.clone();
    let max_attempts = app.pipeline.config.max_attempts;
    let job_item = item.clone();
    let joined = tokio::task::spawn_blocking(move || {
        let mut state = (*snap).clone();
        let mut client = client.lock().map_err(|_| RefineError::Client("client poisoned".into()))?;
        refine_item(&job_item, &mut state, client.as_mut(), max_attempts).map(|o| (o, state))
    })
    .await;
    let result = match joined {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::Internal(format!("feedback task failed: {e}"))),
    };
    let (outcome, state) = match result {
        Ok(v) => v,
        Err(e) => {
            app.finish(Some(e.to_string()));
            return Err(e);
        }
    };
    let view = FeedbackView {
        accepted: outcome.accepted,
        k: item.k,
        segment: item.segment,
        intersection: item.intersection,
        verdicts: outcome.verdicts,
        tallies: outcome.tallies,
        before: nest(&outcome.before),
        after: outcome.after.as_ref().map(nest),
        spec: outcome.spec.clone(),
        iteration: if outcome.accepted { state.iteration } else { app.snapshot().iteration },
    };
    if outcome.accepted {
        app.swap(state);
        app.finish(None);
        return Ok(Json(view).into_response());
    }
    let err = ApiError::Refine(outcome.rejection.unwrap_or(RefineError::AttemptsExhausted {
        k: item.k,
        tallies: outcome.tallies,
    }));
    app.finish(Some(err.to_string()));
    let mut body = serde_json::to_value(&view)?;
    body["error"] = json!(err.kind());
    body["detail"] = json!(err.to_string());
    Ok((StatusCode::UNPROCESSABLE_ENTITY, Json(body)).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolveView {
    pub segments: usize,
    pub total_volume: i64,
    pub constraints: usize,
    pub constraints_hold: bool,
    pub iteration: usize,
}

async fn resolve(State(app): State<Arc<AppState>>) -> Result<Json<ResolveView>, ApiError> {
    let _turn = app.writer.lock().await;
    let snap = app.snapshot();
    app.set_status(|s| {
        s.phase = Phase::Solving;
        s.done = 0;
        s.total = snap.base.len();
        s.last_error = None;
    });
    let status = app.status.clone();
    let joined = tokio::task::spawn_blocking(move || {
        let solutions = snap.solve_all_with_progress(|t, _: &RouteSolution| {
            status.lock().expect("status lock").done = t + 1;
        })?;
        let mut state = (*snap).clone();
        state.solutions = solutions;
        Ok::<_, RefineError>(state)
    })
    .await;
    let result = match joined {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::Internal(format!("resolve task failed: {e}"))),
    };
    match result {
        Ok(state) => {
            let view = ResolveView {
                segments: state.solutions.len(),
                total_volume: state.solutions.iter().map(RouteSolution::total).sum(),
                constraints: state.atoms().count(),
                constraints_hold: state.constraints_hold(),
                iteration: state.iteration,
            };
            app.swap(state);
            app.finish(None);
            Ok(Json(view))
        }
        Err(e) => {
            app.finish(Some(e.to_string()));
            Err(e)
        }
    }
}

async fn report(
    State(app): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<Value>, ApiError> {
    let source = match q.get("source") {
        None => SourceKind::CV,
        Some(s) => SourceKind::from_str(s).map_err(|e| ApiError::BadRequest(format!("unknown source {e:?}")))?,
    };
    let snap = app.snapshot();
    let report = app.pipeline.report(&snap, source)?;
    Ok(Json(serde_json::to_value(report)?))
}

async fn status(State(app): State<Arc<AppState>>) -> Json<Status> {
    Json(app.status.lock().expect("status lock").clone())
}

async fn constraints(State(app): State<Arc<AppState>>) -> Json<Vec<ConstraintSpec>> {
    Json(app.snapshot().specs.clone())
}
