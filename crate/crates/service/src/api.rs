//! `/v1` HTTP API consumed by the correction workbench.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use cotloop_core::aggregation::CorrectionPolicy;
use cotloop_core::camlop::{
    curves, evaluate_plans, reference_accuracies, Budget, CamlopError, CamlopModel, Curves, GoodsPricing, Plan,
    PlanRow, UtilitySpec,
};
use cotloop_core::correction::{
    classify_session, taxonomy_report, CorrectionOp, ErrorTaxonomyReport, LeaseError, LeaseManager,
};
use cotloop_core::domain::{AnswerFormat, AnswerKind, Strategy, Vote};
use cotloop_core::filtering::{partition_report, PartitionReport};
use cotloop_core::store::{
    ingest_dataset, RunConfig, RunMode, RunRecord, RunReport, RunStatus, StoreError, Uncorrected,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;
use uuid::Uuid;

use crate::pipeline::{Pipeline, PipelineError};

pub struct AppState {
    pub pipeline: Arc<Pipeline>,
    /// `<datasets>/<task>.jsonl` backs `POST /runs`.
    pub datasets: PathBuf,
    /// Defaults for fields a run request leaves out.
    pub base_config: RunConfig,
    leases: Mutex<LeaseManager>,
    submitted: Mutex<HashMap<Uuid, CorrectionReply>>,
    run_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl AppState {
    pub fn new(pipeline: Arc<Pipeline>, datasets: PathBuf, base_config: RunConfig, lease_ttl: Duration) -> Self {
        Self {
            pipeline,
            datasets,
            base_config,
            leases: Mutex::new(LeaseManager::new(lease_ttl)),
            submitted: Mutex::new(HashMap::new()),
            run_locks: Mutex::new(HashMap::new()),
        }
    }

    fn run_lock(&self, run_id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.run_locks.lock().unwrap().entry(run_id.to_string()).or_default().clone()
    }
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::UnknownRun(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Store(StoreError::UnknownRun(_)) | PipelineError::UnknownSample(_) => StatusCode::NOT_FOUND,
            PipelineError::NotQueued(_) | PipelineError::AlreadyCorrected(_) => StatusCode::CONFLICT,
            PipelineError::Correction(_) | PipelineError::InvalidConfig(_) | PipelineError::UnknownPromptSet(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            PipelineError::Sampling(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<LeaseError> for ApiError {
    fn from(e: LeaseError) -> Self {
        Self::new(StatusCode::CONFLICT, e.to_string())
    }
}

impl From<CamlopError> for ApiError {
    fn from(e: CamlopError) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Arc<AppState>, ui_dir: Option<PathBuf>, cors_origin: Option<&str>) -> Router {
    let cors =
        CorsLayer::new().allow_methods([Method::GET, Method::POST]).allow_headers([axum::http::header::CONTENT_TYPE]);
    let cors = match cors_origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(origin) => cors.allow_origin(origin),
        None => cors.allow_origin(Any),
    };
    let api = Router::new()
        .route("/runs", post(create_run))
        .route("/runs/{run_id}", get(get_run))
        .route("/queue", get(get_queue))
        .route("/queue/{sample_id}/lease", post(lease_sample))
        .route("/corrections", post(post_correction))
        .route("/results/{run_id}", get(get_results))
        .route("/camlop/plans", get(get_plans))
        .route("/camlop/curves", get(get_curves))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no such endpoint") })
        .with_state(state);
    let app = Router::new().nest("/v1", api).layer(cors);
    match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

fn safe_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub n: Option<usize>,
    pub temperature: Option<f64>,
    pub alpha: Option<f64>,
    pub strategy: Option<Strategy>,
    pub policy: Option<CorrectionPolicy>,
    pub uncorrected: Option<Uncorrected>,
    pub no_redecode: Option<bool>,
    pub answer_kind: Option<AnswerKind>,
    pub prompt_set: Option<String>,
}

impl ConfigOverrides {
    pub fn apply(self, mut config: RunConfig) -> RunConfig {
        if let Some(n) = self.n {
            config.sampling.n = n;
        }
        if let Some(t) = self.temperature {
            config.sampling.temperature = t;
        }
        if let Some(a) = self.alpha {
            config.alpha = a;
        }
        if let Some(s) = self.strategy {
            config.strategy = s;
        }
        if let Some(p) = self.policy {
            config.policy = p;
        }
        if let Some(u) = self.uncorrected {
            config.uncorrected = u;
        }
        if let Some(b) = self.no_redecode {
            config.no_redecode = b;
        }
        if let Some(k) = self.answer_kind {
            config.answer_format = AnswerFormat::new(k);
        }
        if let Some(p) = self.prompt_set {
            config.prompt_set = p;
        }
        config
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    pub task: String,
    pub mode: RunMode,
    #[serde(default)]
    pub config: ConfigOverrides,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunCreated {
    pub run_id: String,
}

/// Records the run and its samples, then samples in the background.
async fn create_run(State(state): State<Arc<AppState>>, Json(req): Json<RunRequest>) -> Result<Response, ApiError> {
    if !safe_name(&req.task) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid task name {:?}", req.task)));
    }
    let path = state.datasets.join(format!("{}.jsonl", req.task));
    if !path.is_file() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown task {:?}", req.task)));
    }
    let mut config = req.config.apply(state.base_config.clone());
    config.mode = req.mode;
    let samples = ingest_dataset(&path, &req.task, &config.answer_format, &config.prompt_set)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let run_id = Uuid::new_v4().simple().to_string();
    state.pipeline.start(&run_id, &req.task, &samples, &config)?;
    let lock = state.run_lock(&run_id);
    let guard = lock.clone().lock_owned().await;
    let pipeline = state.pipeline.clone();
    let id = run_id.clone();
    tokio::spawn(async move {
        let _guard = guard;
        if let Err(e) = pipeline.execute(&id, &Default::default()).await {
            tracing::error!(run = %id, error = %e, "run failed");
        }
    });
    Ok((StatusCode::ACCEPTED, Json(RunCreated { run_id })).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunView {
    pub run_id: String,
    pub task: String,
    pub status: RunStatus,
    pub config: RunConfig,
    pub report: RunReport,
}

async fn get_run(State(state): State<Arc<AppState>>, Path(run_id): Path<String>) -> ApiResult<RunView> {
    let record = state.pipeline.store.load_run(&run_id)?;
    Ok(Json(RunView {
        report: record.report(),
        run_id: record.run_id,
        task: record.task,
        status: record.status,
        config: record.config,
    }))
}

#[derive(Debug, Deserialize)]
struct RunQuery {
    run_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VoteCount {
    pub answer: String,
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LeaseView {
    pub operator: String,
    pub expires_in_ms: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueueItem {
    pub sample_id: String,
    pub question: String,
    pub rank: usize,
    pub entropy: f64,
    pub votes: Vec<VoteCount>,
    pub rationale_index: usize,
    pub sublogics: Vec<String>,
    pub pending: bool,
    pub final_answer: Option<Vote>,
    pub lease: Option<LeaseView>,
}

/// Queued samples, highest entropy first.
async fn get_queue(State(state): State<Arc<AppState>>, Query(q): Query<RunQuery>) -> ApiResult<Vec<QueueItem>> {
    let record = state.pipeline.store.load_run(&q.run_id)?;
    let now = Instant::now();
    let leases = state.leases.lock().unwrap();
    let items = record
        .queue()
        .into_iter()
        .map(|s| {
            let rationale_index = s.correction_rationale.unwrap_or(0);
            QueueItem {
                sample_id: s.sample.id.clone(),
                question: s.sample.question.clone(),
                rank: s.queue_rank.unwrap_or(0),
                entropy: s.entropy.map_or(0.0, |e| e.value),
                votes: s
                    .distribution
                    .iter()
                    .flat_map(|d| &d.entries)
                    .map(|e| VoteCount { answer: e.vote.to_string(), count: e.count })
                    .collect(),
                rationale_index,
                sublogics: s
                    .rationales
                    .iter()
                    .find(|r| r.index == rationale_index)
                    .map(|r| r.sublogics.clone())
                    .unwrap_or_default(),
                pending: s.pending(),
                final_answer: s.final_answer.clone(),
                lease: leases.holder(&lease_key(&record.run_id, &s.sample.id), now).map(|l| LeaseView {
                    operator: l.operator.clone(),
                    expires_in_ms: l.remaining(now).as_millis() as u64,
                }),
            }
        })
        .collect();
    Ok(Json(items))
}

fn lease_key(run_id: &str, sample_id: &str) -> String {
    format!("{run_id}/{sample_id}")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaseRequest {
    pub run_id: String,
    pub operator: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LeaseGranted {
    pub token: Uuid,
    pub run_id: String,
    pub sample_id: String,
    pub expires_in_ms: u64,
}

async fn lease_sample(
    State(state): State<Arc<AppState>>,
    Path(sample_id): Path<String>,
    Json(req): Json<LeaseRequest>,
) -> ApiResult<LeaseGranted> {
    if req.operator.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "operator must not be empty"));
    }
    let record = state.pipeline.store.load_run(&req.run_id)?;
    state.pipeline.queued_item(&record, &sample_id)?;
    let now = Instant::now();
    let lease = state.leases.lock().unwrap().acquire(&lease_key(&req.run_id, &sample_id), &req.operator, now)?;
    Ok(Json(LeaseGranted {
        token: lease.token,
        run_id: req.run_id,
        sample_id,
        expires_in_ms: lease.remaining(now).as_millis() as u64,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionRequest {
    pub lease: Uuid,
    pub ops: Vec<CorrectionOp>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectionReply {
    pub run_id: String,
    pub sample_id: String,
    pub resulting_sublogics: Vec<String>,
    pub final_answer: Option<Vote>,
    pub correct: Option<bool>,
    pub status: RunStatus,
}

/// Applies a session under a valid lease. Resubmitting with a consumed
/// lease returns the original reply instead of recording a second session.
async fn post_correction(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CorrectionRequest>,
) -> ApiResult<CorrectionReply> {
    if let Some(reply) = state.submitted.lock().unwrap().get(&req.lease) {
        return Ok(Json(reply.clone()));
    }
    let lease = state.leases.lock().unwrap().validate(req.lease, Instant::now())?.clone();
    let (run_id, sample_id) = lease.key.split_once('/').expect("lease keys are run/sample");
    let lock = state.run_lock(run_id);
    let _guard = lock.lock().await;
    if let Some(reply) = state.submitted.lock().unwrap().get(&req.lease) {
        return Ok(Json(reply.clone()));
    }
    state.leases.lock().unwrap().validate(req.lease, Instant::now())?;
    let record = state.pipeline.submit(run_id, sample_id, req.ops, &lease.operator, Utc::now()).await?;
    state.leases.lock().unwrap().complete(req.lease, Instant::now())?;
    let item = record.sample(sample_id).expect("submitted sample exists");
    let reply = CorrectionReply {
        run_id: run_id.to_string(),
        sample_id: sample_id.to_string(),
        resulting_sublogics: item.session.as_ref().map(|s| s.resulting_sublogics.clone()).unwrap_or_default(),
        final_answer: item.final_answer.clone(),
        correct: item.correct(),
        status: record.status.clone(),
    };
    state.submitted.lock().unwrap().insert(req.lease, reply.clone());
    Ok(Json(reply))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResultsView {
    pub run_id: String,
    pub status: RunStatus,
    pub report: RunReport,
    /// Accuracy of the uncorrected answers split by unanimity.
    pub partition: PartitionReport,
    pub taxonomy: ErrorTaxonomyReport,
}

async fn get_results(State(state): State<Arc<AppState>>, Path(run_id): Path<String>) -> ApiResult<ResultsView> {
    let record = state.pipeline.store.load_run(&run_id)?;
    Ok(Json(results_view(&record)))
}

pub fn results_view(record: &RunRecord) -> ResultsView {
    let graded: Vec<_> = record.samples.iter().filter_map(|s| Some((s.entropy?, s.initially_correct()?))).collect();
    let classified: Vec<_> =
        record.samples.iter().filter_map(|s| Some(classify_session(s.session.as_ref()?, s.correct()?))).collect();
    ResultsView {
        run_id: record.run_id.clone(),
        status: record.status.clone(),
        report: record.report(),
        partition: partition_report(&graded),
        taxonomy: taxonomy_report(&classified),
    }
}

#[derive(Debug, Deserialize)]
struct PlansQuery {
    run_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlansView {
    pub pricing: GoodsPricing,
    /// Plan whose accuracy was measured by the run, if any.
    pub measured: Option<Plan>,
    pub rows: Vec<PlanRow>,
}

/// The plan a run executed.
pub fn plan_of(config: &RunConfig) -> Plan {
    let n = config.sampling.n as u32;
    match config.mode {
        RunMode::Cot => Plan::Cot,
        RunMode::SelfConsistency => Plan::SelfConsistency { n },
        RunMode::Mcs => Plan::Mcs { n, alpha: config.alpha },
        RunMode::McsSc => Plan::McsSelfConsistency { n, alpha: config.alpha },
    }
}

/// Reference accuracies with the run's measured accuracy substituted for its
/// own plan, priced with the run's pricing.
pub fn plans_view(record: Option<&RunRecord>, default_pricing: GoodsPricing) -> Result<PlansView, CamlopError> {
    let mut plans = Plan::standard();
    let mut accuracy = reference_accuracies();
    let mut pricing = default_pricing;
    let mut measured = None;
    if let Some(record) = record {
        pricing = record.config.pricing;
        if let Some(acc) = record.report().accuracy {
            let plan = plan_of(&record.config);
            accuracy.retain(|(p, _)| *p != plan);
            accuracy.push((plan, 100.0 * acc));
            if !plans.contains(&plan) {
                plans.push(plan);
            }
            measured = Some(plan);
        }
    }
    let rows = evaluate_plans(&plans, &pricing, &accuracy, &UtilitySpec::default())?;
    Ok(PlansView { pricing, measured, rows })
}

async fn get_plans(State(state): State<Arc<AppState>>, Query(q): Query<PlansQuery>) -> ApiResult<PlansView> {
    let record = q.run_id.map(|id| state.pipeline.store.load_run(&id)).transpose()?;
    Ok(Json(plans_view(record.as_ref(), state.base_config.pricing)?))
}

#[derive(Debug, Deserialize)]
struct CurvesQuery {
    c: f64,
    d: f64,
    m: f64,
    p1: f64,
    p2: f64,
    points: Option<usize>,
}

async fn get_curves(Query(q): Query<CurvesQuery>) -> ApiResult<Curves> {
    let points = q.points.unwrap_or(101);
    if points > 10_000 {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "at most 10000 points"));
    }
    let model = CamlopModel::new(q.c, q.d)?;
    let budget = Budget::new(q.p1, q.p2, q.m)?;
    Ok(Json(curves(&model, &budget, points)?))
}
