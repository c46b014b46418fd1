//! JSON-over-HTTP service under `/api`: scene browsing, generation jobs
//! run by a single background worker, and entity-map heatmaps.
//!
//! Jobs persist as `<jobs>/<id>.json` with frames in `<jobs>/<id>/`.

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use crate::config::Config;
use crate::diffusion::VideoModel;
use crate::entity_rep::{ConditioningMode, Trajectory};
use crate::error::{Error, Result};
use crate::evalkit::evaluate::clip_condition;
use crate::geometry::MaskRle;
use crate::pipeline;
use crate::synth::dataset::{EntitySummary, IndexEntry};
use crate::synth::{Dataset, LabeledClip, Split};

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceOptions {
    pub queue_depth: usize,
    pub sampling_steps: usize,
    pub split: Split,
}

impl ServiceOptions {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            queue_depth: cfg.service.queue_depth,
            sampling_steps: cfg.service.sampling_steps,
            split: cfg.service.split,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Generate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub scene_id: String,
    pub trajectories: Vec<Trajectory>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub mode: Option<ConditioningMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTiming {
    pub created_ms: u64,
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    /// Normalized request: one `L`-point trajectory per entity, steps and
    /// mode filled in.
    pub request: GenerateRequest,
    pub state: JobState,
    /// Frame URIs, present once the job is done.
    pub artifacts: Vec<String>,
    pub timing: JobTiming,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateAccepted {
    pub job_id: String,
    pub state: JobState,
    /// Trajectories as the worker will use them.
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneListing {
    pub id: String,
    pub entities: Vec<EntitySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntity {
    pub id: u32,
    pub color: [u8; 3],
    /// Visible first-frame mask.
    pub mask: MaskRle,
    /// Incircle center `[x, y]` in pixels.
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneView {
    pub id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `data:image/png;base64,...`
    pub first_frame: String,
    pub entities: Vec<SceneEntity>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn png_bytes(img: &image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

struct JobStore {
    dir: PathBuf,
    jobs: BTreeMap<String, Job>,
    next: u64,
}

impl JobStore {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut jobs = BTreeMap::new();
        let mut next = 1;
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let job: Job = serde_json::from_slice(&std::fs::read(&path)?)?;
                if let Some(n) = job.id.strip_prefix("job-").and_then(|n| n.parse::<u64>().ok()) {
                    next = next.max(n + 1);
                }
                jobs.insert(job.id.clone(), job);
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            jobs,
            next,
        })
    }

    fn persist(&self, job: &Job) -> Result<()> {
        write_atomic(&self.dir.join(format!("{}.json", job.id)), &serde_json::to_vec_pretty(job)?)
    }

    fn frame_path(&self, id: &str, i: usize) -> PathBuf {
        self.dir.join(id).join(format!("frame_{i:03}.png"))
    }

    fn pending(&self) -> usize {
        self.jobs
            .values()
            .filter(|j| matches!(j.state, JobState::Queued | JobState::Running))
            .count()
    }
}

struct Inner {
    model: Arc<VideoModel>,
    dataset: Dataset,
    opts: ServiceOptions,
    cache: Mutex<HashMap<String, Arc<LabeledClip>>>,
    store: Mutex<JobStore>,
    queue: mpsc::UnboundedSender<String>,
    receiver: Mutex<Option<mpsc::UnboundedReceiver<String>>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl AppState {
    /// Opens the job store and re-queues unfinished jobs. Jobs only run
    /// after [`AppState::start_worker`].
    pub fn open(model: Arc<VideoModel>, dataset: Dataset, jobs_dir: &Path, opts: ServiceOptions) -> Result<Self> {
        let mut store = JobStore::open(jobs_dir)?;
        let (tx, rx) = mpsc::unbounded_channel();
        let ids: Vec<String> = store.jobs.keys().cloned().collect();
        for id in ids {
            let job = store.jobs.get_mut(&id).expect("listed above");
            if job.state == JobState::Running {
                job.state = JobState::Queued;
                job.timing.started_ms = None;
                let job = job.clone();
                store.persist(&job)?;
            }
            if store.jobs[&id].state == JobState::Queued {
                tx.send(id).map_err(|_| Error::fault("job queue closed"))?;
            }
        }
        Ok(Self(Arc::new(Inner {
            model,
            dataset,
            opts,
            cache: Mutex::new(HashMap::new()),
            store: Mutex::new(store),
            queue: tx,
            receiver: Mutex::new(Some(rx)),
        })))
    }

    /// Spawns the generation worker on the current runtime; later calls
    /// return `None`.
    pub fn start_worker(&self) -> Option<tokio::task::JoinHandle<()>> {
        let mut rx = lock(&self.0.receiver).take()?;
        let state = self.clone();
        Some(tokio::spawn(async move {
            while let Some(id) = rx.recv().await {
                state.run_job(&id).await;
            }
        }))
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        lock(&self.0.store).jobs.get(id).cloned()
    }

    fn scene_ids(&self) -> impl Iterator<Item = &IndexEntry> {
        self.0.dataset.split(self.0.opts.split)
    }

    fn scene(&self, id: &str) -> std::result::Result<Arc<LabeledClip>, ApiError> {
        if let Some(c) = lock(&self.0.cache).get(id) {
            return Ok(c.clone());
        }
        let entry = self
            .scene_ids()
            .find(|e| e.clip_id == id)
            .ok_or_else(|| ApiError::not_found(format!("unknown scene `{id}`")))?;
        let clip = Arc::new(self.0.dataset.load(entry)?);
        lock(&self.0.cache).insert(id.to_string(), clip.clone());
        Ok(clip)
    }

    async fn run_job(&self, id: &str) {
        let request = {
            let mut store = lock(&self.0.store);
            let Some(job) = store.jobs.get_mut(id) else { return };
            if job.state != JobState::Queued {
                return;
            }
            job.state = JobState::Running;
            job.timing.started_ms = Some(now_ms());
            let job = job.clone();
            if let Err(e) = store.persist(&job) {
                log::error!("cannot persist job {id}: {e}");
            }
            job.request
        };
        let state = self.clone();
        let job_id = id.to_string();
        let result = tokio::task::spawn_blocking(move || state.render_job(&job_id, &request))
            .await
            .unwrap_or_else(|e| Err(Error::fault(format!("worker panicked: {e}"))));
        let mut store = lock(&self.0.store);
        let Some(job) = store.jobs.get_mut(id) else { return };
        match result {
            Ok(frames) => {
                job.state = JobState::Done;
                job.artifacts = (0..frames).map(|i| format!("/api/jobs/{id}/frames/{i}")).collect();
            }
            Err(e) => {
                log::error!("job {id} failed: {e}");
                job.state = JobState::Failed;
                job.error = Some(e.to_string());
            }
        }
        job.timing.finished_ms = Some(now_ms());
        let job = job.clone();
        if let Err(e) = store.persist(&job) {
            log::error!("cannot persist job {id}: {e}");
        }
    }

    fn render_job(&self, id: &str, req: &GenerateRequest) -> Result<usize> {
        let clip = self.scene(&req.scene_id).map_err(|e| Error::Spec(e.message))?;
        let video = pipeline::generate(
            &self.0.model,
            &clip,
            &req.trajectories,
            req.mode.unwrap_or(ConditioningMode::Full),
            req.steps.unwrap_or(self.0.opts.sampling_steps),
            req.seed,
        )?;
        let paths: Vec<PathBuf> = {
            let store = lock(&self.0.store);
            (0..video.frames()).map(|i| store.frame_path(id, i)).collect()
        };
        if let Some(dir) = paths.first().and_then(|p| p.parent()) {
            std::fs::create_dir_all(dir)?;
        }
        for (i, p) in paths.iter().enumerate() {
            write_atomic(p, &png_bytes(&image::DynamicImage::ImageRgb8(video.image(i)))?)?;
        }
        Ok(video.frames())
    }

    fn submit(&self, req: GenerateRequest) -> std::result::Result<GenerateAccepted, ApiError> {
        let clip = self.scene(&req.scene_id)?;
        let steps = req.steps.unwrap_or(self.0.opts.sampling_steps);
        let t = self.0.model.config().timesteps;
        if steps == 0 || steps > t {
            return Err(ApiError::unprocessable(format!("steps must lie in 1..={t}")));
        }
        let trajectories = pipeline::complete_trajectories(&clip, &req.trajectories)?;
        let request = GenerateRequest {
            scene_id: req.scene_id,
            trajectories: trajectories.clone(),
            seed: req.seed,
            steps: Some(steps),
            mode: Some(req.mode.unwrap_or(ConditioningMode::Full)),
        };
        let mut store = lock(&self.0.store);
        if store.pending() >= self.0.opts.queue_depth {
            return Err(ApiError {
                status: StatusCode::CONFLICT,
                message: format!("job queue is full ({} pending)", self.0.opts.queue_depth),
            });
        }
        let id = format!("job-{:06}", store.next);
        store.next += 1;
        let job = Job {
            id: id.clone(),
            kind: JobKind::Generate,
            request,
            state: JobState::Queued,
            artifacts: Vec::new(),
            timing: JobTiming {
                created_ms: now_ms(),
                started_ms: None,
                finished_ms: None,
            },
            error: None,
        };
        store.persist(&job)?;
        store.jobs.insert(id.clone(), job);
        drop(store);
        self.0.queue.send(id.clone()).map_err(|_| ApiError::internal("job queue closed"))?;
        Ok(GenerateAccepted {
            job_id: id,
            state: JobState::Queued,
            trajectories,
        })
    }

    fn heatmap(&self, clip: &LabeledClip, drags: &[Trajectory], frame: usize) -> Result<Vec<u8>> {
        let trajectories = pipeline::complete_trajectories(clip, drags)?;
        let model = &self.0.model;
        let cond = clip_condition(clip, &trajectories, model.dtype(), model.device())?;
        let (_, maps) = model.conditioning(&[&cond], &[ConditioningMode::Full])?;
        let magnitude = maps
            .get(frame)?
            .to_dtype(candle_core::DType::F32)?
            .sqr()?
            .sum(0)?
            .sqrt()?
            .to_vec2::<f32>()?;
        let peak = magnitude.iter().flatten().fold(0f32, |a, &b| a.max(b));
        let (h, w) = (magnitude.len(), magnitude.first().map_or(0, Vec::len));
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            let m = magnitude[y as usize][x as usize];
            let v = if m > 0.0 && peak > 0.0 { (255.0 * m / peak).round().max(1.0) as u8 } else { 0 };
            image::Luma([v])
        });
        png_bytes(&image::DynamicImage::ImageLuma8(img))
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Spec(_)
            | Error::LengthMismatch { .. }
            | Error::MissingTrajectory(_)
            | Error::Config(_)
            | Error::Undefined(_)
            | Error::EmptyMask => StatusCode::UNPROCESSABLE_ENTITY,
            Error::NotReady(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    status: u16,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::to_vec(&ErrorBody {
            error: &self.message,
            status: self.status.as_u16(),
        })
        .unwrap_or_default();
        (self.status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
    }
}

type ApiResult = std::result::Result<Response, ApiError>;

fn json<T: Serialize>(status: StatusCode, value: &T) -> ApiResult {
    let body = serde_json::to_vec(value).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((status, [(header::CONTENT_TYPE, "application/json")], body).into_response())
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> std::result::Result<T, ApiError> + Send + 'static,
) -> std::result::Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn health(State(s): State<AppState>) -> ApiResult {
    let pending = lock(&s.0.store).pending();
    json(
        StatusCode::OK,
        &serde_json::json!({ "status": "ok", "pending_jobs": pending, "queue_depth": s.0.opts.queue_depth }),
    )
}

async fn list_scenes(State(s): State<AppState>) -> ApiResult {
    let scenes: Vec<SceneListing> = s
        .scene_ids()
        .map(|e| SceneListing {
            id: e.clip_id.clone(),
            entities: e.entities.clone(),
        })
        .collect();
    json(StatusCode::OK, &scenes)
}

async fn get_scene(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let view = blocking(move || {
        let clip = s.scene(&id)?;
        let first = png_bytes(&image::DynamicImage::ImageRgb8(clip.video.image(0)))?;
        let colors = clip.colors();
        let entities = clip
            .entities()?
            .into_iter()
            .map(|e| {
                let k = clip.spec.shapes.iter().position(|s| s.id == e.id).unwrap_or(0);
                SceneEntity {
                    id: e.id,
                    color: colors[k],
                    mask: e.mask.to_rle(),
                    center: [e.incircle.center.x, e.incircle.center.y],
                    radius: e.incircle.radius,
                }
            })
            .collect();
        Ok(SceneView {
            id,
            frames: clip.spec.frames,
            height: clip.spec.height,
            width: clip.spec.width,
            first_frame: format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(first)),
            entities,
        })
    })
    .await?;
    json(StatusCode::OK, &view)
}

async fn first_frame(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let bytes = blocking(move || {
        let clip = s.scene(&id)?;
        Ok(png_bytes(&image::DynamicImage::ImageRgb8(clip.video.image(0)))?)
    })
    .await?;
    Ok(png(bytes))
}

#[derive(Debug, Deserialize)]
struct HeatmapQuery {
    frame: Option<usize>,
    /// JSON array of trajectories.
    traj: Option<String>,
}

async fn heatmap(State(s): State<AppState>, UrlPath(id): UrlPath<String>, Query(q): Query<HeatmapQuery>) -> ApiResult {
    let bytes = blocking(move || {
        let clip = s.scene(&id)?;
        let frame = q.frame.unwrap_or(0);
        if frame >= clip.spec.frames {
            return Err(ApiError::not_found(format!("scene has {} frames", clip.spec.frames)));
        }
        let drags: Vec<Trajectory> = match &q.traj {
            Some(t) => serde_json::from_str(t).map_err(|e| ApiError::unprocessable(format!("malformed trajectories: {e}")))?,
            None => Vec::new(),
        };
        Ok(s.heatmap(&clip, &drags, frame)?)
    })
    .await?;
    Ok(png(bytes))
}

async fn post_generate(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let req: GenerateRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("malformed request: {e}")))?;
    let accepted = blocking(move || s.submit(req)).await?;
    json(StatusCode::ACCEPTED, &accepted)
}

async fn get_job(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let job = s.job(&id).ok_or_else(|| ApiError::not_found(format!("unknown job `{id}`")))?;
    json(StatusCode::OK, &job)
}

async fn get_frame(State(s): State<AppState>, UrlPath((id, i)): UrlPath<(String, String)>) -> ApiResult {
    let job = s.job(&id).ok_or_else(|| ApiError::not_found(format!("unknown job `{id}`")))?;
    let i: usize = i.parse().map_err(|_| ApiError::not_found(format!("no frame `{i}`")))?;
    if job.state != JobState::Done || i >= job.artifacts.len() {
        return Err(ApiError::not_found(format!("job `{id}` has no frame {i}")));
    }
    let path = lock(&s.0.store).frame_path(&id, i);
    let bytes = tokio::fs::read(&path).await.map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(png(bytes))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/scenes", get(list_scenes))
        .route("/api/scenes/{id}", get(get_scene))
        .route("/api/scenes/{id}/first_frame.png", get(first_frame))
        .route("/api/scenes/{id}/heatmap", get(heatmap))
        .route("/api/generate", post(post_generate))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/jobs/{id}/frames/{i}", get(get_frame))
        .with_state(state)
}

/// Loads the checkpoint and scene store named by `cfg` and serves until
/// interrupted.
pub async fn serve(cfg: &Config) -> Result<()> {
    let dataset = Dataset::open(&cfg.paths.data)?;
    let model = pipeline::load_model(&cfg.paths.checkpoint, cfg.service.use_ema)?;
    let state = AppState::open(Arc::new(model), dataset, &cfg.paths.jobs, ServiceOptions::from_config(cfg))?;
    state.start_worker();
    let listener = tokio::net::TcpListener::bind(&cfg.service.bind).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
