//! JSON routes under `/v1`.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use cmab_core::engine::ArmMean;
use cmab_core::{Engine, Intervention, Rating, Scope, SessionSummary};

use crate::error::ApiError;

pub type SharedEngine = Arc<Mutex<Engine>>;

pub fn router(engine: SharedEngine) -> Router {
    Router::new()
        .route("/v1/sessions", post(start_session))
        .route("/v1/sessions/{sid}/choice", post(submit_choice))
        .route("/v1/sessions/{sid}/feedback", post(submit_feedback))
        .route("/v1/inventory", get(inventory))
        .route("/v1/users/{id}", get(user))
        .route("/v1/metrics", get(metrics))
        .route("/v1/admin/refit", post(refit))
        .with_state(engine)
}

fn lock(engine: &SharedEngine) -> MutexGuard<'_, Engine> {
    // A panic mid-command cannot leave a half-applied event behind, so a
    // poisoned lock still guards consistent state.
    engine.lock().unwrap_or_else(|p| p.into_inner())
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionView {
    pub id: String,
    pub title: String,
    pub description: String,
    pub image: String,
}

impl From<&Intervention> for InterventionView {
    fn from(x: &Intervention) -> Self {
        Self { id: x.id.clone(), title: x.title.clone(), description: x.description.clone(), image: x.image.clone() }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartRequest {
    user_id: String,
    context: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartResponse {
    pub session_id: String,
    pub scope_used: Scope,
    pub recommendations: Vec<InterventionView>,
}

async fn start_session(
    State(engine): State<SharedEngine>,
    body: Bytes,
) -> Result<(StatusCode, Json<StartResponse>), ApiError> {
    let req: StartRequest = parse(&body)?;
    if req.user_id.is_empty() {
        return Err(ApiError::bad_request("user_id must not be empty"));
    }
    let mut engine = lock(&engine);
    let reco = engine.start_session(&req.user_id, &req.context)?;
    let inventory = engine.inventory();
    let recommendations = reco
        .arms
        .iter()
        .map(|id| InterventionView::from(inventory.get(id).expect("offered arms come from the inventory")))
        .collect();
    Ok((
        StatusCode::CREATED,
        Json(StartResponse { session_id: reco.session_id, scope_used: reco.scope_used, recommendations }),
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChoiceRequest {
    intervention_id: String,
}

async fn submit_choice(
    State(engine): State<SharedEngine>,
    Path(sid): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let req: ChoiceRequest = parse(&body)?;
    lock(&engine).submit_choice(&sid, &req.intervention_id)?;
    Ok(Json(serde_json::json!({ "session_id": sid, "choice": req.intervention_id })))
}

/// `rating` may be absent or null (no feedback); otherwise it must be an
/// integer in `0..=5`.
fn parse_rating(body: &Bytes) -> Result<Option<Rating>, ApiError> {
    let value: Value = if body.iter().all(u8::is_ascii_whitespace) { Value::Null } else { parse(body)? };
    let raw = match &value {
        Value::Null => return Ok(None),
        Value::Object(map) => {
            if let Some(key) = map.keys().find(|k| k.as_str() != "rating") {
                return Err(ApiError::bad_request(format!("unknown field {key:?}")));
            }
            match map.get("rating") {
                None | Some(Value::Null) => return Ok(None),
                Some(r) => r,
            }
        }
        _ => return Err(ApiError::bad_request("expected a JSON object")),
    };
    let n = raw
        .as_i64()
        .ok_or_else(|| ApiError::invalid_rating(format!("rating must be an integer from 0 to 5, got {raw}")))?;
    Ok(Some(Rating::new(n)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub summary: SummaryView,
}

/// Wire form of a finished session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryView {
    pub session_id: String,
    pub user_id: String,
    pub scope_used: Scope,
    pub choice: Option<String>,
    pub rating: Option<u8>,
    pub imputed: bool,
    pub imputed_reward: Option<f64>,
    pub session_num: u64,
    pub arm_means: Vec<ArmMeanView>,
    pub refitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMeanView {
    pub id: String,
    pub mean: Option<f64>,
    pub pulls: u64,
}

impl From<&ArmMean> for ArmMeanView {
    fn from(m: &ArmMean) -> Self {
        Self { id: m.id.clone(), mean: m.mean, pulls: m.pulls }
    }
}

impl From<SessionSummary> for SummaryView {
    fn from(s: SessionSummary) -> Self {
        Self {
            arm_means: s.arm_means.iter().map(ArmMeanView::from).collect(),
            session_id: s.session_id,
            user_id: s.user_id,
            scope_used: s.scope_used,
            choice: s.choice,
            rating: s.rating,
            imputed: s.imputed,
            imputed_reward: s.imputed_reward,
            session_num: s.session_num,
            refitted: s.refitted,
        }
    }
}

async fn submit_feedback(
    State(engine): State<SharedEngine>,
    Path(sid): Path<String>,
    body: Bytes,
) -> Result<Json<FeedbackResponse>, ApiError> {
    let rating = parse_rating(&body)?;
    let summary = lock(&engine).submit_feedback(&sid, rating)?;
    Ok(Json(FeedbackResponse { summary: summary.into() }))
}

#[derive(Debug, Serialize)]
struct InventoryItem<'a> {
    id: &'a str,
    title: &'a str,
    description: &'a str,
    image: &'a str,
    context: &'a str,
}

async fn inventory(State(engine): State<SharedEngine>) -> Json<Value> {
    let engine = lock(&engine);
    let inv = engine.inventory();
    let items: Vec<InventoryItem> = inv
        .interventions()
        .iter()
        .map(|x| InventoryItem {
            id: &x.id,
            title: &x.title,
            description: &x.description,
            image: &x.image,
            context: &x.context,
        })
        .collect();
    Json(serde_json::json!({
        "recommend_count": inv.recommend_count(),
        "contexts": inv.contexts(),
        "interventions": items,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserView {
    pub user_id: String,
    pub session_num: u64,
    pub cluster: Option<usize>,
    /// Personal means per context over the arms eligible there.
    pub means: BTreeMap<String, Vec<ArmMeanView>>,
}

async fn user(State(engine): State<SharedEngine>, Path(id): Path<String>) -> Result<Json<UserView>, ApiError> {
    let engine = lock(&engine);
    let profile = engine.user(&id).ok_or_else(|| ApiError::unknown_user(&id))?;
    let inv = engine.inventory();
    let means = inv
        .contexts()
        .iter()
        .map(|ctx| {
            let arms = inv.eligible_arms(ctx).expect("declared context");
            let row = arms
                .iter()
                .map(|arm| {
                    let s = profile.personal_table.get(ctx, &arm.id);
                    ArmMeanView { id: arm.id.clone(), mean: s.mean(), pulls: s.total_pulls() }
                })
                .collect();
            (ctx.clone(), row)
        })
        .collect();
    Ok(Json(UserView {
        user_id: id.clone(),
        session_num: profile.session_num,
        cluster: engine.user_cluster(&id),
        means,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    pub total_sessions: u64,
    pub sessions_by_scope: BTreeMap<Scope, u64>,
    pub open_sessions: usize,
    pub users: usize,
    pub refits: u64,
    pub last_refit_seq: Option<u64>,
    pub last_seq: u64,
}

async fn metrics(State(engine): State<SharedEngine>) -> Json<MetricsView> {
    let engine = lock(&engine);
    let state = engine.state();
    let mut by_scope: BTreeMap<Scope, u64> = [Scope::Global, Scope::Personal, Scope::Cluster].map(|s| (s, 0)).into();
    by_scope.extend(state.metrics.started_by_scope.iter().map(|(s, n)| (*s, *n)));
    Json(MetricsView {
        total_sessions: state.metrics.total_sessions,
        sessions_by_scope: by_scope,
        open_sessions: state.sessions.len(),
        users: state.users.len(),
        refits: state.metrics.refits,
        last_refit_seq: state.metrics.last_refit_seq,
        last_seq: state.last_seq,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefitView {
    pub refitted: bool,
    pub clusters: usize,
    pub clustered_users: usize,
}

async fn refit(State(engine): State<SharedEngine>) -> Result<Json<RefitView>, ApiError> {
    let mut engine = lock(&engine);
    let refitted = engine.refit()?;
    let model = &engine.state().clusters;
    Ok(Json(RefitView {
        refitted,
        clusters: model.centroids().len(),
        clustered_users: model.memberships().len(),
    }))
}
