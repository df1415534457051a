//! JSON API consumed by the annotation UI.
//!
//! | method | path                      | body                          |
//! |--------|---------------------------|-------------------------------|
//! | GET    | `/tasks`                  | [`TaskPage`]                  |
//! | GET    | `/tasks/{id}`             | [`TaskDetail`]                |
//! | POST   | `/tasks/{id}/responses`   | [`Response`] in, [`Receipt`] out |
//! | GET    | `/labels`                 | [`LabelsPayload`]             |
//! | GET    | `/spec`                   | [`SpuriositySpec`]            |
//! | GET    | `/rankings/{class}`       | [`RankingPayload`]            |
//!
//! Errors are `{"error": "..."}` with 400, 404, 409 or 500.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response as HttpResponse};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use spuriosity::annotation::{
    AnnotationError, AnnotationStore, FeatureLabel, Response, SpuriositySpec, TaskFilter, TaskPage,
    TaskStatus, ValidationOutcome,
};
use spuriosity::importance::AnnotationTask;
use spuriosity::scoring::{
    class_feature_stats, rank_class, spuriosity_scores, ClassStats, ScoringError,
};
use spuriosity::tensor_store::{ActivationSet, Split};
use tower_http::services::ServeDir;

pub const DEFAULT_RANKING_K: usize = 10;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let status = match e {
            AnnotationError::NotFound(_) => StatusCode::NOT_FOUND,
            AnnotationError::Conflict(_) => StatusCode::CONFLICT,
            AnnotationError::Io { .. } | AnnotationError::CorruptLog { .. } => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.to_string())
    }
}

impl From<ScoringError> for ApiError {
    fn from(e: ScoringError) -> Self {
        let status = match e {
            ScoringError::NoSpuriousFeatures(_) => StatusCode::NOT_FOUND,
            ScoringError::Io(_) | ScoringError::Csv(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> HttpResponse {
        (self.status, Json(ErrorBody { error: &self.message })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Shared server state. The store lock serialises writers; readers see the
/// store as of their lock acquisition.
#[derive(Clone)]
pub struct AppState {
    store: Arc<RwLock<AnnotationStore>>,
    acts: Arc<ActivationSet>,
    stats: Arc<ClassStats>,
    base_spec: Arc<SpuriositySpec>,
    asset_prefix: String,
}

impl AppState {
    /// `base_spec` seeds S(c); aggregated labels are applied on top of it.
    pub fn new(
        store: AnnotationStore,
        acts: ActivationSet,
        base_spec: SpuriositySpec,
    ) -> Result<Self, ScoringError> {
        let stats = class_feature_stats(&acts)?;
        Ok(Self {
            store: Arc::new(RwLock::new(store)),
            acts: Arc::new(acts),
            stats: Arc::new(stats),
            base_spec: Arc::new(base_spec),
            asset_prefix: "/assets".into(),
        })
    }

    pub fn store(&self) -> Arc<RwLock<AnnotationStore>> {
        Arc::clone(&self.store)
    }

    /// Spec currently in force.
    pub fn current_spec(&self) -> SpuriositySpec {
        let labels = self.store.read().expect("store lock poisoned").labels();
        self.base_spec.with_labels(&labels)
    }

    fn asset_url(&self, path: &str) -> String {
        if path.contains("://") || path.starts_with('/') {
            path.to_string()
        } else {
            format!("{}/{}", self.asset_prefix, path)
        }
    }
}

/// Directories served next to the API.
#[derive(Debug, Clone, Default)]
pub struct StaticDirs {
    /// Served under `/assets`.
    pub assets: Option<PathBuf>,
    /// Served at the root for any path the API does not claim.
    pub ui: Option<PathBuf>,
}

pub fn router(state: AppState, dirs: &StaticDirs) -> Router {
    let mut app = Router::new()
        .route("/tasks", get(list_tasks))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/responses", get(get_responses).post(post_response))
        .route("/labels", get(get_labels))
        .route("/spec", get(get_spec))
        .route("/rankings/{class}", get(get_ranking))
        .with_state(state);
    if let Some(assets) = &dirs.assets {
        app = app.nest_service("/assets", ServeDir::new(assets));
    }
    if let Some(ui) = &dirs.ui {
        app = app.fallback_service(ServeDir::new(ui));
    }
    app
}

pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app).await
}

async fn list_tasks(State(state): State<AppState>, Query(filter): Query<TaskFilter>) -> Json<TaskPage> {
    Json(state.store.read().expect("store lock poisoned").list_tasks(&filter))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDetail {
    pub task: AnnotationTask,
    pub status: TaskStatus,
    pub responses: Vec<Response>,
}

async fn get_task(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<TaskDetail>> {
    let store = state.store.read().expect("store lock poisoned");
    let mut task = store
        .task(&id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown task {id:?}")))?;
    for item in task.panels.iter_mut().flat_map(|p| p.items.iter_mut()) {
        for path in [&mut item.image, &mut item.heatmap, &mut item.feature_attack]
            .into_iter()
            .flatten()
        {
            *path = state.asset_url(path);
        }
    }
    let responses = store.responses(&id).to_vec();
    let status = store
        .list_tasks(&TaskFilter::default())
        .tasks
        .into_iter()
        .find(|t| t.task_id == id)
        .map_or(TaskStatus::Pending, |t| t.status);
    Ok(Json(TaskDetail {
        task,
        status,
        responses,
    }))
}

async fn get_responses(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Vec<Response>>> {
    let store = state.store.read().expect("store lock poisoned");
    if store.task(&id).is_none() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown task {id:?}")));
    }
    Ok(Json(store.responses(&id).to_vec()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub task_id: String,
    pub worker_id: String,
    pub num_responses: usize,
}

async fn post_response(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(response): Json<Response>,
) -> ApiResult<(StatusCode, Json<Receipt>)> {
    if response.task_id() != id {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("body is for task {:?} but was posted to {id:?}", response.task_id()),
        ));
    }
    let mut store = state.store.write().expect("store lock poisoned");
    let worker_id = response.worker_id().to_string();
    store.record_response(response)?;
    Ok((
        StatusCode::CREATED,
        Json(Receipt {
            num_responses: store.responses(&id).len(),
            task_id: id,
            worker_id,
        }),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsPayload {
    pub labels: Vec<FeatureLabel>,
    pub validations: Vec<ValidationOutcome>,
}

async fn get_labels(State(state): State<AppState>) -> Json<LabelsPayload> {
    let store = state.store.read().expect("store lock poisoned");
    Json(LabelsPayload {
        labels: store.labels(),
        validations: store.validations(),
    })
}

async fn get_spec(State(state): State<AppState>) -> Json<SpuriositySpec> {
    Json(state.current_spec())
}

#[derive(Debug, Clone, Deserialize)]
pub struct RankingQuery {
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Start of the `entries` page.
    #[serde(default)]
    pub offset: usize,
}

fn default_split() -> Split {
    Split::Val
}

fn default_k() -> usize {
    DEFAULT_RANKING_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub rank: usize,
    pub image_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingPayload {
    pub class: usize,
    pub class_name: String,
    pub split: Split,
    pub features: Vec<usize>,
    pub total: usize,
    pub k: usize,
    /// Most spurious first.
    pub top: Vec<RankedEntry>,
    /// Least spurious first.
    pub bottom: Vec<RankedEntry>,
    pub offset: usize,
    /// `k` entries of the full ranking starting at `offset`.
    pub entries: Vec<RankedEntry>,
}

async fn get_ranking(
    State(state): State<AppState>,
    Path(class): Path<usize>,
    Query(q): Query<RankingQuery>,
) -> ApiResult<Json<RankingPayload>> {
    let manifest = state.acts.manifest();
    if class >= manifest.num_classes {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown class {class}")));
    }
    if q.k == 0 {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "k must be positive"));
    }
    let spec = state.current_spec();
    let scores = spuriosity_scores(&state.acts, &spec, &state.stats)?;
    let ranking = rank_class(&scores, class, q.split)?;
    let entry = |rank: usize| {
        let e = &ranking.entries[rank];
        let row = state.acts.row_of(&e.image_id).expect("ranked ids come from the manifest");
        RankedEntry {
            rank: rank + 1,
            image_id: e.image_id.clone(),
            score: e.score,
            image: manifest.images[row].asset_path.as_deref().map(|p| state.asset_url(p)),
        }
    };
    let n = ranking.len();
    let k = q.k.min(n);
    Ok(Json(RankingPayload {
        class,
        class_name: manifest.class_names[class].clone(),
        split: q.split,
        features: spec.features(class).collect(),
        total: n,
        k,
        top: (0..k).map(entry).collect(),
        bottom: (0..k).map(|i| entry(n - 1 - i)).collect(),
        offset: q.offset,
        entries: (q.offset.min(n)..(q.offset + k).min(n)).map(entry).collect(),
    }))
}
