//! Read-only HTTP/JSON facade over a trained checkpoint: list samples, serve
//! predicted MotionMaps, decode the forecast at any heatmap cell and show the
//! action labels behind each populated codebook cell.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use motionmap::data::Sample;
use motionmap::embedding::HeatmapCell;
use motionmap::kinematics::PoseSequence;
use motionmap::motionmap::extract_maxima;
use motionmap::pipeline::{CellForecast, MotionMapModel, RankedForecast};
use motionmap::train::Checkpoint;
use motionmap::autoencoder::UncertaintyGrid;
use motionmap::Error;

/// Everything the service answers from; never mutated after construction.
#[derive(Debug)]
pub struct SessionState {
    model: MotionMapModel,
    samples: BTreeMap<usize, Sample>,
    checkpoint_hash: String,
}

impl SessionState {
    /// Loads the model and rebuilds the corpus windows of `checkpoint`.
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> motionmap::Result<Self> {
        let model = checkpoint.model()?;
        let data = checkpoint.dataset()?;
        let digest = Sha256::digest(checkpoint.to_bytes());
        Ok(Self {
            model,
            samples: data.samples.into_iter().map(|s| (s.id, s)).collect(),
            checkpoint_hash: digest.iter().map(|b| format!("{b:02x}")).collect(),
        })
    }

    pub fn model(&self) -> &MotionMapModel {
        &self.model
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    pub fn sample(&self, id: usize) -> Option<&Sample> {
        self.samples.get(&id)
    }
}

/// Error body for every failed request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(skip)]
    status: u16,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            status: status.as_u16(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn unknown_sample(id: usize) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_sample", format!("no sample with id {id}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::NoPopulatedCell { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "no_populated_cell", e.to_string()),
            Error::CellOutOfRange { .. } => Self::bad_request(e.to_string()),
            Error::UnknownSample(id) => Self::unknown_sample(id),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: usize,
    pub action_label: String,
    #[serde(rename = "T_o")]
    pub obs_frames: usize,
    #[serde(rename = "T_f")]
    pub future_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModePayload {
    pub row: usize,
    pub col: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionMapPayload {
    pub m: usize,
    /// Row-major cell values.
    pub values: Vec<f64>,
    /// Sorted by confidence, highest first.
    pub modes: Vec<ModePayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPayload {
    pub row: usize,
    pub col: usize,
}

impl From<HeatmapCell> for CellPayload {
    fn from(c: HeatmapCell) -> Self {
        Self { row: c.row, col: c.col }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyPayload {
    pub frames: usize,
    pub joints: usize,
    /// Frame-major σ² per joint.
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastPayload {
    /// `T_f` poses, each a flat `[J × 3]` array in meters.
    pub frames: Vec<Vec<f64>>,
    /// `T_o` reconstructed observation poses.
    pub reconstruction: Vec<Vec<f64>>,
    pub uncertainty: UncertaintyPayload,
    pub used_cell: CellPayload,
}

fn flat_frames(seq: &PoseSequence) -> Vec<Vec<f64>> {
    seq.frames().map(|f| f.iter().flatten().copied().collect()).collect()
}

impl ForecastPayload {
    fn build(forecast: &PoseSequence, reconstruction: &PoseSequence, u: &UncertaintyGrid, cell: HeatmapCell) -> Self {
        Self {
            frames: flat_frames(forecast),
            reconstruction: flat_frames(reconstruction),
            uncertainty: UncertaintyPayload {
                frames: u.frames,
                joints: u.joints,
                variance: u.variance.clone(),
            },
            used_cell: cell.into(),
        }
    }
}

impl From<&CellForecast> for ForecastPayload {
    fn from(f: &CellForecast) -> Self {
        Self::build(&f.forecast, &f.reconstruction, &f.uncertainty, f.used_cell)
    }
}

impl From<&RankedForecast> for ForecastPayload {
    fn from(f: &RankedForecast) -> Self {
        Self::build(&f.forecast, &f.reconstruction, &f.uncertainty, f.used_cell)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCell {
    pub row: usize,
    pub col: usize,
    pub label_histogram: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMapPayload {
    pub cells: Vec<ActionCell>,
}

type Params = Query<HashMap<String, String>>;

fn param(q: &HashMap<String, String>, name: &str) -> std::result::Result<usize, ApiError> {
    let raw = q
        .get(name)
        .ok_or_else(|| ApiError::bad_request(format!("missing query parameter `{name}`")))?;
    raw.parse()
        .map_err(|_| ApiError::bad_request(format!("`{name}` must be a non-negative integer, got `{raw}`")))
}

fn sample_of<'a>(state: &'a SessionState, q: &HashMap<String, String>) -> std::result::Result<&'a Sample, ApiError> {
    let id = param(q, "sample")?;
    state.sample(id).ok_or_else(|| ApiError::unknown_sample(id))
}

pub fn health(state: &SessionState) -> Health {
    Health {
        status: "ok".into(),
        checkpoint_hash: state.checkpoint_hash.clone(),
    }
}

pub fn samples(state: &SessionState) -> Vec<SampleSummary> {
    state
        .samples
        .values()
        .map(|s| SampleSummary {
            id: s.id,
            action_label: s.action_label.clone(),
            obs_frames: s.x.num_frames(),
            future_frames: s.y.num_frames(),
        })
        .collect()
}

pub fn motionmap(state: &SessionState, sample: &Sample) -> motionmap::Result<MotionMapPayload> {
    let hm = state.model.motionmap(&sample.x)?;
    let modes = extract_maxima(&hm, &state.model.inference.maxima)
        .into_iter()
        .map(|m| ModePayload {
            row: m.cell.row,
            col: m.cell.col,
            confidence: m.confidence,
        })
        .collect();
    Ok(MotionMapPayload {
        m: hm.side(),
        values: hm.values().to_vec(),
        modes,
    })
}

pub fn forecast(state: &SessionState, sample: &Sample, row: usize, col: usize) -> motionmap::Result<ForecastPayload> {
    let m = state.model.grid_size();
    if row >= m || col >= m {
        return Err(Error::CellOutOfRange { row, col, m });
    }
    let f = state.model.forecast_at_cell(&sample.x, HeatmapCell::new(row, col))?;
    Ok(ForecastPayload::from(&f))
}

/// Action labels of the training futures behind every populated codebook cell.
pub fn action_map(state: &SessionState) -> ActionMapPayload {
    let mut cells: BTreeMap<HeatmapCell, BTreeMap<String, usize>> = BTreeMap::new();
    for (id, cell) in &state.model.future_cells {
        if let Some(s) = state.samples.get(id) {
            *cells.entry(*cell).or_default().entry(s.action_label.clone()).or_default() += 1;
        }
    }
    ActionMapPayload {
        cells: cells
            .into_iter()
            .map(|(c, label_histogram)| ActionCell {
                row: c.row,
                col: c.col,
                label_histogram,
            })
            .collect(),
    }
}

async fn get_health(State(s): State<Arc<SessionState>>) -> Json<Health> {
    Json(health(&s))
}

async fn get_samples(State(s): State<Arc<SessionState>>) -> Json<Vec<SampleSummary>> {
    Json(samples(&s))
}

async fn get_motionmap(State(s): State<Arc<SessionState>>, Query(q): Params) -> ApiResult<MotionMapPayload> {
    let sample = sample_of(&s, &q)?;
    Ok(Json(motionmap(&s, sample)?))
}

async fn get_forecast(State(s): State<Arc<SessionState>>, Query(q): Params) -> ApiResult<ForecastPayload> {
    let sample = sample_of(&s, &q)?;
    let (row, col) = (param(&q, "row")?, param(&q, "col")?);
    Ok(Json(forecast(&s, sample, row, col)?))
}

async fn get_actionmap(State(s): State<Arc<SessionState>>, Query(q): Params) -> ApiResult<ActionMapPayload> {
    sample_of(&s, &q)?;
    Ok(Json(action_map(&s)))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

/// All API routes; with `static_dir`, unmatched paths are served from it.
pub fn router(state: Arc<SessionState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/healthz", get(get_health))
        .route("/api/samples", get(get_samples))
        .route("/api/motionmap", get(get_motionmap))
        .route("/api/forecast", get(get_forecast))
        .route("/api/actionmap", get(get_actionmap))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.fallback(not_found),
    }
}

/// Serves `router` on `addr` until the process ends.
pub async fn serve(state: Arc<SessionState>, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state, static_dir)).await
}
