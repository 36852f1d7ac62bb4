//! Read-only HTTP API over saved run artifacts, plus ephemeral reclustering.
//!
//! Every response is derived from the artifact files under the runs
//! directory. Nothing here writes to disk.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::OnceCell;
use tower_http::services::ServeDir;

use introspect_core::artifacts::{export_report, list_runs, load_manifest, load_run, ExportFormat, RunArtifact, RunKind};
use introspect_core::cluster::ClusterParams;
use introspect_core::dataset::BridgeSpec;
use introspect_core::explain::Method;
use introspect_core::introspect::{recluster, FragmentationReport};
use introspect_core::ErrorKind;

type Cell = Arc<OnceCell<Arc<RunArtifact>>>;

/// Shared handler state: the runs directory and a read-once artifact cache.
#[derive(Clone)]
pub struct AppState {
    runs_dir: PathBuf,
    cache: Arc<Mutex<HashMap<String, Cell>>>,
}

impl AppState {
    pub fn new(runs_dir: impl Into<PathBuf>) -> Self {
        AppState {
            runs_dir: runs_dir.into(),
            cache: Default::default(),
        }
    }

    pub fn runs_dir(&self) -> &Path {
        &self.runs_dir
    }

    /// Loads a run at most once; concurrent callers for the same id share the load.
    async fn run(&self, id: &str) -> Result<Arc<RunArtifact>, ApiError> {
        if !valid_run_id(id) {
            return Err(ApiError::not_found(format!("unknown run `{id}`")));
        }
        let dir = self.runs_dir.join(id);
        if !dir.join("manifest.json").is_file() {
            return Err(ApiError::not_found(format!("unknown run `{id}`")));
        }
        let cell = self
            .cache
            .lock()
            .expect("cache lock poisoned")
            .entry(id.to_string())
            .or_default()
            .clone();
        let run = cell
            .get_or_try_init(|| async {
                tokio::task::spawn_blocking(move || load_run(&dir))
                    .await
                    .map_err(|e| ApiError::internal(e.to_string()))?
                    .map(Arc::new)
                    .map_err(ApiError::from)
            })
            .await?;
        Ok(run.clone())
    }
}

/// Run ids are lowercase hex digests; anything else cannot name a run.
fn valid_run_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.bytes().all(|b| b.is_ascii_hexdigit())
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<introspect_core::Error> for ApiError {
    fn from(e: introspect_core::Error) -> Self {
        let status = match e.kind() {
            ErrorKind::Argument => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub kind: RunKind,
    pub dataset: String,
    pub bridge: Option<BridgeSpec>,
    pub method: Option<Method>,
    pub accuracy: Option<f32>,
    pub flagged: Vec<u16>,
    pub eps: f64,
    pub num_classes: usize,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub instance_id: i32,
    pub predicted_label: i32,
    pub true_label: i32,
    pub original_label: i32,
    pub cluster: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceListing {
    pub class: u16,
    pub cluster: Option<i32>,
    /// Matching instances before `limit` was applied.
    pub total: usize,
    pub instances: Vec<InstanceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub instance_id: usize,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub predicted_label: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVariance {
    pub class: u16,
    pub count: usize,
    pub within_class_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSummary {
    pub k: usize,
    pub explained_variance_ratio: Vec<f32>,
    pub classes: Vec<ClassVariance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReclusterRequest {
    pub eps: f64,
    pub min_pts: usize,
    #[serde(default)]
    pub class_filter: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReclusterResponse {
    pub params: ReclusterRequest,
    pub report: FragmentationReport,
}

#[derive(Debug, Deserialize)]
struct InstanceQuery {
    cluster: Option<i32>,
    limit: Option<usize>,
}

fn summarize(dir: &Path) -> introspect_core::Result<RunSummary> {
    let m = load_manifest(dir)?;
    let report_path = dir.join("report.json");
    let text = std::fs::read_to_string(&report_path).map_err(|e| introspect_core::Error::io(&report_path, e))?;
    let report: FragmentationReport = serde_json::from_str(&text)?;
    Ok(RunSummary {
        run_id: m.run_id,
        kind: m.kind,
        dataset: m.dataset.name,
        bridge: m.dataset.bridge,
        method: m.explain.map(|e| e.method),
        accuracy: m.model.and_then(|x| x.test_accuracy),
        flagged: report.flagged_classes(),
        eps: report.params.eps,
        num_classes: m.dataset.num_classes,
        instances: m.dataset.instances,
    })
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn runs(State(st): State<AppState>) -> ApiResult<Json<Vec<RunSummary>>> {
    let dir = st.runs_dir.clone();
    let out = tokio::task::spawn_blocking(move || -> introspect_core::Result<Vec<RunSummary>> {
        list_runs(&dir)?.iter().map(|d| summarize(d)).collect()
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(out))
}

async fn report(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let run = st.run(&id).await?;
    let body = export_report(&run.report, &run.manifest.dataset.class_members, ExportFormat::Json)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

fn check_class(run: &RunArtifact, class: u16) -> ApiResult<()> {
    if (class as usize) < run.manifest.dataset.num_classes {
        Ok(())
    } else {
        Err(ApiError::not_found(format!("unknown class {class}")))
    }
}

async fn class_instances(
    State(st): State<AppState>,
    UrlPath((id, class)): UrlPath<(String, u16)>,
    Query(q): Query<InstanceQuery>,
) -> ApiResult<Json<InstanceListing>> {
    let run = st.run(&id).await?;
    check_class(&run, class)?;
    let groups = run.labels("groups")?;
    let truth = run.labels("true_labels")?;
    let original = run.labels("original_labels")?;
    let clusters = run.labels("cluster_labels")?;
    let ids = run.labels("instance_ids")?;
    let matching: Vec<usize> = (0..groups.len())
        .filter(|&i| groups[i] == class as i32 && q.cluster.is_none_or(|c| clusters[i] == c))
        .collect();
    let limit = q.limit.unwrap_or(usize::MAX);
    let instances = matching
        .iter()
        .take(limit)
        .map(|&i| InstanceRow {
            instance_id: ids[i],
            predicted_label: groups[i],
            true_label: truth[i],
            original_label: original[i],
            cluster: clusters[i],
        })
        .collect();
    Ok(Json(InstanceListing {
        class,
        cluster: q.cluster,
        total: matching.len(),
        instances,
    }))
}

async fn explanation(
    State(st): State<AppState>,
    UrlPath((id, i)): UrlPath<(String, usize)>,
) -> ApiResult<Json<Explanation>> {
    let run = st.run(&id).await?;
    let n = run.manifest.dataset.instances;
    if i >= n {
        return Err(ApiError::not_found(format!("unknown instance {i}")));
    }
    let vectors = run.matrix(&run.manifest.vector_array)?;
    let mut shape = run.manifest.dataset.feature_shape.clone();
    if shape.iter().product::<usize>() != vectors.cols() {
        shape = vec![vectors.cols()];
    }
    Ok(Json(Explanation {
        instance_id: i,
        shape,
        values: vectors.row(i).to_vec(),
        predicted_label: run.labels("groups")?[i],
    }))
}

async fn pca(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<PcaSummary>> {
    let run = st.run(&id).await?;
    Ok(Json(PcaSummary {
        k: run.manifest.pca.k,
        explained_variance_ratio: run.manifest.pca.explained_variance_ratio.clone(),
        classes: run
            .report
            .classes
            .iter()
            .map(|c| ClassVariance {
                class: c.class,
                count: c.count,
                within_class_variance: c.within_class_variance,
            })
            .collect(),
    }))
}

async fn recluster_run(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<ReclusterResponse>> {
    let req: ReclusterRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))?;
    let params = ClusterParams {
        eps: req.eps,
        min_pts: req.min_pts,
    };
    params.validate()?;
    if !req.eps.is_finite() {
        return Err(ApiError::bad_request("eps must be finite"));
    }
    let run = st.run(&id).await?;
    if let Some(c) = req.class_filter {
        if c as usize >= run.manifest.dataset.num_classes {
            return Err(ApiError::bad_request(format!("class_filter {c} is not a class of this run")));
        }
    }
    let report = tokio::task::spawn_blocking(move || -> introspect_core::Result<FragmentationReport> {
        let projections = run.matrix("projections")?;
        let groups = run.groups()?;
        let (mut report, _) = recluster(
            &projections,
            &groups,
            run.manifest.dataset.num_classes,
            &run.report,
            params,
        )?;
        if let Some(c) = req.class_filter {
            report.classes.retain(|x| x.class == c);
        }
        Ok(report)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(ReclusterResponse { params: req, report }))
}

/// API routes, plus static files from `static_dir` at `/` when given.
pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/runs", get(runs))
        .route("/api/runs/{id}/report", get(report))
        .route("/api/runs/{id}/classes/{class}/instances", get(class_instances))
        .route("/api/runs/{id}/instances/{instance}/explanation", get(explanation))
        .route("/api/runs/{id}/pca", get(pca))
        .route("/api/runs/{id}/recluster", post(recluster_run))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, runs_dir: PathBuf, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let app = router(AppState::new(runs_dir), static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("serving on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await
}
