//! HTTP routes.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use inpaint_core::engine::{load_request, EarlyStop, InpaintRequest};
use inpaint_core::imaging::{decode_image_native, decode_mask, decode_sketch, gray_from_png, FillPolicy};
use serde::Serialize;
use serde_json::json;

use crate::bundles::{BundleEntry, LoadError};
use crate::jobs::{JobState, JobStatus};
use crate::multipart::{self, Part};
use crate::AppState;

const MAX_BODY: usize = 64 << 20;
const MAX_CYCLES: usize = 200;

/// An error response: status plus a message and, for bad input, the field.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn field(field: &str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: format!("{field}: {}", message.into()),
            field: Some(field.to_string()),
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/api/jobs", post(submit_job).get(list_jobs))
        .route("/api/jobs/{id}", get(job_status))
        .route("/api/jobs/{id}/replay", post(replay_job))
        .route("/api/jobs/{id}/cycles/{file}", get(cycle_artifact))
        .route("/api/jobs/{id}/refined/{file}", get(refined_cycle_artifact))
        .route("/api/jobs/{id}/{file}", get(job_artifact))
        .route("/api/bundles", get(list_bundles))
        .route("/api/bundles/{name}/load", post(load_bundle))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(state)
}

#[derive(Serialize)]
struct JobUrls {
    input: String,
    mask: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    sketch: Option<String>,
    cycles: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coarse: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    refined: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    refined_cycles: Vec<String>,
}

#[derive(Serialize)]
struct JobView {
    job_id: String,
    state: JobState,
    progress: usize,
    total_cycles: usize,
    bundle: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    scores: Option<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    selected_cycle: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stopped_early: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    urls: JobUrls,
}

fn view(s: &JobStatus) -> JobView {
    let base = format!("/api/jobs/{}", s.id);
    let files = s.manifest.as_ref().map(|m| m.files.clone()).unwrap_or_default();
    let has = |f: &str| files.iter().any(|x| x == f);
    let refined_cycles = files
        .iter()
        .filter_map(|f| f.strip_prefix("refined_").and_then(|r| r.strip_suffix(".png")))
        .map(|i| format!("{base}/refined/{i}.png"))
        .collect();
    JobView {
        job_id: s.id.clone(),
        state: s.state,
        progress: s.progress,
        total_cycles: s.total_cycles,
        bundle: s.bundle.clone(),
        scores: s.use_discriminator.then(|| s.scores.clone()),
        selected_cycle: s.manifest.as_ref().and_then(|m| m.selected_cycle),
        stopped_early: s.manifest.as_ref().map(|m| m.stopped_early),
        error: s.error.clone(),
        urls: JobUrls {
            input: format!("{base}/input.png"),
            mask: format!("{base}/mask.png"),
            sketch: has("sketch.png").then(|| format!("{base}/sketch.png")),
            cycles: (0..s.progress).map(|i| format!("{base}/cycles/{i}.png")).collect(),
            coarse: has("coarse.png").then(|| format!("{base}/coarse.png")),
            refined: has("refined.png").then(|| format!("{base}/refined.png")),
            refined_cycles,
        },
    }
}

fn status_of(state: &AppState, id: &str) -> ApiResult<JobStatus> {
    state
        .jobs
        .snapshot(id)
        .ok_or_else(|| ApiError::not_found(format!("no job {id:?}")))
}

async fn list_jobs(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "jobs": state.jobs.ids() }))
}

async fn job_status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobView>> {
    Ok(Json(view(&status_of(&state, &id)?)))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn read_artifact(state: &AppState, id: &str, file: &str) -> ApiResult<Response> {
    let path = state.jobs.dir_of(id).join(file);
    std::fs::read(&path)
        .map(png)
        .map_err(|_| ApiError::not_found(format!("job {id} has no {file}")))
}

/// `"{i}.png"` → `i`.
fn cycle_index(file: &str) -> Option<usize> {
    let digits = file.strip_suffix(".png")?;
    (!digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()))
        .then(|| digits.parse().ok())
        .flatten()
}

fn pending(id: &str, what: &str) -> ApiError {
    ApiError::new(StatusCode::CONFLICT, format!("job {id}: {what} is not ready yet"))
}

async fn cycle_artifact(
    State(state): State<Arc<AppState>>,
    Path((id, file)): Path<(String, String)>,
) -> ApiResult<Response> {
    let s = status_of(&state, &id)?;
    let i = cycle_index(&file).ok_or_else(|| ApiError::not_found(format!("no cycle artifact {file:?}")))?;
    let running = matches!(s.state, JobState::Queued | JobState::Running);
    if running && i >= s.progress && i < s.total_cycles {
        return Err(pending(&id, &format!("cycle {i}")));
    }
    if i >= s.progress {
        return Err(ApiError::not_found(format!("job {id} has no cycle {i}")));
    }
    read_artifact(&state, &id, &format!("cycle_{i}.png"))
}

async fn refined_cycle_artifact(
    State(state): State<Arc<AppState>>,
    Path((id, file)): Path<(String, String)>,
) -> ApiResult<Response> {
    let s = status_of(&state, &id)?;
    let i = cycle_index(&file).ok_or_else(|| ApiError::not_found(format!("no refined artifact {file:?}")))?;
    if s.use_discriminator || !s.refine || i >= s.total_cycles {
        return Err(ApiError::not_found(format!("job {id} has no refined cycle {i}")));
    }
    if matches!(s.state, JobState::Queued | JobState::Running) {
        return Err(pending(&id, &format!("refined cycle {i}")));
    }
    read_artifact(&state, &id, &format!("refined_{i}.png"))
}

async fn job_artifact(
    State(state): State<Arc<AppState>>,
    Path((id, file)): Path<(String, String)>,
) -> ApiResult<Response> {
    let s = status_of(&state, &id)?;
    let running = matches!(s.state, JobState::Queued | JobState::Running);
    match file.as_str() {
        "input.png" | "mask.png" | "sketch.png" => read_artifact(&state, &id, &file),
        "coarse.png" | "refined.png" => {
            let produced = s.use_discriminator && (file == "coarse.png" || s.refine);
            if !produced || s.state == JobState::Failed {
                Err(ApiError::not_found(format!("job {id} has no {file}")))
            } else if running {
                Err(pending(&id, &file))
            } else {
                read_artifact(&state, &id, &file)
            }
        }
        _ => Err(ApiError::not_found(format!("unknown artifact {file:?}"))),
    }
}

fn parse_bool(field: &str, v: &str) -> ApiResult<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        other => Err(ApiError::field(field, format!("expected a boolean, got {other:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, v: &str) -> ApiResult<T> {
    v.trim()
        .parse()
        .map_err(|_| ApiError::field(field, format!("cannot parse {v:?}")))
}

fn parse_color(v: &str) -> ApiResult<[f32; 3]> {
    let vals: Vec<f32> = v
        .split(',')
        .map(|p| parse_num::<f32>("constant_color", p))
        .collect::<ApiResult<_>>()?;
    match vals.as_slice() {
        [r, g, b] if vals.iter().all(|c| (-1.0..=1.0).contains(c)) => Ok([*r, *g, *b]),
        _ => Err(ApiError::field(
            "constant_color",
            "expected three comma-separated values in [-1, 1]",
        )),
    }
}

/// Builds an engine request from form fields, validated against a bundle
/// working at `resolution`.
pub fn parse_submission(
    parts: &[Part],
    resolution: usize,
    has_discriminator: bool,
    has_refiner: bool,
    default_seed: u64,
) -> ApiResult<InpaintRequest> {
    let mut seen = std::collections::BTreeSet::new();
    for p in parts {
        if !seen.insert(p.name.as_str()) {
            return Err(ApiError::field(&p.name, "given more than once"));
        }
    }
    let find = |name: &str| parts.iter().find(|p| p.name == name);
    let text = |name: &str| -> ApiResult<Option<String>> {
        find(name)
            .map(|p| p.text().map(|t| t.trim().to_string()).map_err(|e| ApiError::field(name, e.to_string())))
            .transpose()
    };
    const KNOWN: [&str; 12] = [
        "image",
        "mask",
        "sketch",
        "fill",
        "constant_color",
        "noise_sigma",
        "cycles",
        "use_discriminator",
        "refine",
        "seed",
        "early_stop",
        "bundle",
    ];
    if let Some(p) = parts.iter().find(|p| !KNOWN.contains(&p.name.as_str())) {
        return Err(ApiError::field(&p.name, "unknown field"));
    }

    let image_part = find("image").ok_or_else(|| ApiError::field("image", "missing"))?;
    let image = decode_image_native(&image_part.data).map_err(|e| ApiError::field("image", e.to_string()))?;
    let (h, w) = (image.height(), image.width());
    let mask_part = find("mask").ok_or_else(|| ApiError::field("mask", "missing"))?;
    let gray = gray_from_png(&mask_part.data).map_err(|e| ApiError::field("mask", e.to_string()))?;
    let mask = decode_mask(&gray, (h, w)).map_err(|e| ApiError::field("mask", e.to_string()))?;
    let sketch = find("sketch")
        .map(|p| decode_sketch(&p.data, (h, w)).map_err(|e| ApiError::field("sketch", e.to_string())))
        .transpose()?;

    let seed = text("seed")?.map(|v| parse_num::<u64>("seed", &v)).transpose()?.unwrap_or(default_seed);
    let fill_kind = text("fill")?.unwrap_or_else(|| if sketch.is_some() { "sketch" } else { "mean" }.to_string());
    let sigma = text("noise_sigma")?
        .map(|v| parse_num::<f32>("noise_sigma", &v))
        .transpose()?;
    if sigma.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
        return Err(ApiError::field("noise_sigma", "must be positive"));
    }
    let color = text("constant_color")?;
    if sketch.is_some() && fill_kind != "sketch" {
        return Err(ApiError::field("sketch", "a sketch needs fill=sketch"));
    }
    let fill = match fill_kind.to_ascii_lowercase().as_str() {
        "mean" => FillPolicy::Mean,
        "noise" => FillPolicy::ZeroMeanNoise {
            sigma: sigma.unwrap_or(inpaint_core::imaging::DEFAULT_NOISE_SIGMA),
            seed,
        },
        "white" => FillPolicy::white(),
        "black" => FillPolicy::black(),
        "constant" => {
            let c = color.ok_or_else(|| ApiError::field("constant_color", "required when fill=constant"))?;
            FillPolicy::Constant { color: parse_color(&c)? }
        }
        "sketch" => {
            let s = sketch.ok_or_else(|| ApiError::field("sketch", "required when fill=sketch"))?;
            FillPolicy::Sketch(s.clipped_to(&mask).map_err(|e| ApiError::field("sketch", e.to_string()))?)
        }
        other => {
            return Err(ApiError::field(
                "fill",
                format!("unknown fill {other:?}; expected mean, noise, white, black, constant or sketch"),
            ))
        }
    };

    let mut req = InpaintRequest::new(image, mask, fill);
    req.seed = seed;
    if let Some(v) = text("cycles")? {
        req.cycles = parse_num("cycles", &v)?;
        if req.cycles == 0 || req.cycles > MAX_CYCLES {
            return Err(ApiError::field("cycles", format!("must be between 1 and {MAX_CYCLES}")));
        }
    }
    if let Some(v) = text("use_discriminator")? {
        req.use_discriminator = parse_bool("use_discriminator", &v)?;
    }
    if let Some(v) = text("refine")? {
        req.refine = parse_bool("refine", &v)?;
    }
    if let Some(v) = text("early_stop")? {
        req.early_stop = parse_bool("early_stop", &v)?.then(EarlyStop::default);
    }
    if req.use_discriminator && !has_discriminator {
        return Err(ApiError::field("use_discriminator", "the active bundle has no artifact discriminator"));
    }
    if req.refine && !has_refiner {
        return Err(ApiError::field("refine", "the active bundle has no refiner"));
    }
    req.fit_to(resolution).map_err(|e| ApiError::field("mask", e.to_string()))
}

async fn submit_job(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let active = state
        .bundles
        .active()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no bundle is loaded"))?;
    let ctype = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default();
    let parts = multipart::parse(ctype, &body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    if let Some(p) = parts.iter().find(|p| p.name == "bundle") {
        let wanted = p.text().unwrap_or_default().trim();
        if !wanted.is_empty() && wanted != active.name {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("bundle {wanted:?} is not the active bundle ({})", active.name),
            ));
        }
    }
    let state2 = state.clone();
    let id = tokio::task::spawn_blocking(move || {
        let b = &active.bundle;
        let req = parse_submission(&parts, b.arch.resolution, b.discriminator.is_some(), b.refiner.is_some(), state2.default_seed)?;
        state2
            .pool
            .submit(&state2.jobs, req, active)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response())
}

async fn replay_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = status_of(&state, &id)?;
    if s.state != JobState::Done {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("job {id} has not finished")));
    }
    let active = state
        .bundles
        .active()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no bundle is loaded"))?;
    let req = load_request(&state.jobs.dir_of(&id))
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let new_id = state
        .pool
        .submit(&state.jobs, req, active)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": new_id, "replay_of": id }))).into_response())
}

async fn list_bundles(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let s = state.clone();
    let list: Vec<BundleEntry> = tokio::task::spawn_blocking(move || s.bundles.list())
        .await
        .unwrap_or_default();
    let active = state.bundles.active().map(|a| a.name);
    Json(json!({ "bundles": list, "active": active }))
}

async fn load_bundle(State(state): State<Arc<AppState>>, Path(name): Path<String>) -> ApiResult<Json<BundleEntry>> {
    let s = state.clone();
    tokio::task::spawn_blocking(move || s.bundles.load(&name))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map(Json)
        .map_err(|e| match e {
            LoadError::NotFound(m) => ApiError::not_found(m),
            LoadError::Corrupt(m) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m),
        })
}
