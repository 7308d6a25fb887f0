//! HTTP service backing the interactive debugging workbench.
//!
//! One [`Session`] holds the model, dataset and intervention log. Reads see
//! a consistent snapshot; disable and enable are serialized, each appends
//! one log entry and bumps the model version when the sheet changes.

mod session;

use std::collections::HashMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pipnet::datasets::Split;
use pipnet::debugger::{Action, Thresholds};
use pipnet::explainer::{crop, explain, global_explanation, top_patches_from, Status};
use pipnet::protomodel::PixelRect;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

pub use session::{Job, JobStatus, Mutation, Session};

/// JSON error response: `{"error": kind, "message": ...}`.
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
        ApiError::new(StatusCode::NOT_FOUND, message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<pipnet::Error> for ApiError {
    fn from(e: pipnet::Error) -> Self {
        let status = match e {
            pipnet::Error::InvalidArgument(_) | pipnet::Error::Shape { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            pipnet::Error::Precondition(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let kind = match self.status {
            StatusCode::NOT_FOUND => "not_found",
            StatusCode::CONFLICT => "conflict",
            StatusCode::UNPROCESSABLE_ENTITY => "unprocessable",
            _ => "internal",
        };
        (self.status, Json(json!({ "error": kind, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<Session>;

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable(format!("malformed request body: {e}")))
}

fn query_value<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str, default: T) -> ApiResult<T> {
    match q.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::unprocessable(format!("query parameter {key}: cannot parse {v:?}"))),
    }
}

fn subset(name: Option<&str>, default: Split) -> ApiResult<Split> {
    match name {
        None => Ok(default),
        Some(s) => Split::parse(s).ok_or_else(|| {
            ApiError::unprocessable(format!("unknown subset {s:?}; expected train, test or counterfactual"))
        }),
    }
}

fn check_id(session: &Session, id: usize) -> ApiResult<()> {
    let n = session.snapshot().0.num_prototypes();
    if id >= n {
        return Err(ApiError::not_found(format!("no prototype {id}; the model has {n}")));
    }
    Ok(())
}

fn thresholds(q: &HashMap<String, String>) -> ApiResult<Thresholds> {
    let d = Thresholds::default();
    Ok(Thresholds {
        presence: query_value(q, "presence_thr", d.presence)?,
        overlap: query_value(q, "overlap_thr", d.overlap)?,
    })
}

fn png(image: &image::RgbImage) -> ApiResult<Response> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], buf.into_inner()).into_response())
}

fn crop_url(image: &str, rect: &PixelRect) -> String {
    format!(
        "/assets/crop?image={image}&rect={},{},{},{}",
        rect.top, rect.left, rect.bottom, rect.right
    )
}

/// Every prototype, most influential first (largest effective class
/// weight, then id); irrelevant and disabled ones follow with zero weight.
async fn list_prototypes(State(s): State<Shared>) -> ApiResult<Json<Value>> {
    let (model, version) = s.snapshot();
    let sheet = model.sheet();
    let mut rows: Vec<(usize, Vec<f32>, f32)> = (0..model.num_prototypes())
        .map(|i| {
            let w = sheet.effective_row(i);
            let m = w.iter().copied().fold(0.0f32, f32::max);
            (i, w, m)
        })
        .collect();
    rows.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let prototypes: Vec<Value> = rows
        .into_iter()
        .map(|(i, w, m)| {
            json!({
                "id": i,
                "status": if sheet.is_disabled(i) { Status::Disabled } else { Status::Active },
                "relevant": sheet.is_relevant(i),
                "weights": w,
                "max_weight": m,
            })
        })
        .collect();
    Ok(Json(json!({
        "version": version,
        "global_size": sheet.global_size(),
        "sparsity_ratio": sheet.sparsity_ratio(),
        "prototypes": prototypes,
    })))
}

async fn prototype_patches(
    State(s): State<Shared>,
    Path(id): Path<usize>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    check_id(&s, id)?;
    let k: usize = query_value(&q, "k", 10)?;
    let split = subset(q.get("subset").map(String::as_str), Split::Train)?;
    blocking(move || {
        let (model, version) = s.snapshot();
        let scan = s.scan(split)?;
        let card = top_patches_from(&model, &scan, id, k)?;
        let patches: Vec<Value> = card
            .patches
            .iter()
            .map(|p| {
                json!({
                    "image": p.image,
                    "cell": p.cell,
                    "rect": p.rect,
                    "presence": p.presence,
                    "image_url": format!("/assets/images/{}", p.image),
                    "crop_url": crop_url(&p.image, &p.rect),
                })
            })
            .collect();
        Ok(Json(json!({
            "version": version,
            "prototype": card.prototype,
            "status": card.status,
            "weights": card.weights,
            "patches": patches,
        })))
    })
    .await
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActorBody {
    actor: Option<String>,
}

async fn mutate(s: Shared, id: usize, action: Action, body: Bytes) -> ApiResult<Json<Mutation>> {
    check_id(&s, id)?;
    let body: ActorBody = parse_body(&body)?;
    let actor = body.actor.unwrap_or_else(|| "workbench".to_string());
    Ok(Json(s.set_state(id, action, &actor)?))
}

async fn disable_prototype(State(s): State<Shared>, Path(id): Path<usize>, body: Bytes) -> ApiResult<Json<Mutation>> {
    mutate(s, id, Action::Disable, body).await
}

async fn enable_prototype(State(s): State<Shared>, Path(id): Path<usize>, body: Bytes) -> ApiResult<Json<Mutation>> {
    mutate(s, id, Action::Enable, body).await
}

async fn metrics(State(s): State<Shared>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Json<Value>> {
    let split = subset(q.get("subset").map(String::as_str), Split::Test)?;
    blocking(move || {
        let (version, report) = s.metrics(split)?;
        Ok(Json(json!({ "version": version, "subset": split, "metrics": report })))
    })
    .await
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluateBody {
    subset: Option<String>,
}

async fn evaluate(State(s): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let body: EvaluateBody = parse_body(&body)?;
    let split = subset(body.subset.as_deref(), Split::Test)?;
    let job = match s.start_job(split) {
        Ok(job) => job,
        Err(running) => {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("evaluation of {} is already running as job {running}", split.dir()),
            ))
        }
    };
    let id = job.id;
    let worker = s.clone();
    tokio::task::spawn_blocking(move || worker.run_job(id));
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id, "status": job.status }))).into_response())
}

async fn job_status(State(s): State<Shared>, Path(id): Path<u64>) -> ApiResult<Json<Job>> {
    s.job(id).map(Json).ok_or_else(|| ApiError::not_found(format!("no job {id}")))
}

/// Predicts an uploaded PNG (raw request body) and explains it.
async fn predict(State(s): State<Shared>, body: Bytes) -> ApiResult<Json<Value>> {
    let image = image::load_from_memory(&body)
        .map_err(|e| ApiError::unprocessable(format!("request body is not a decodable image: {e}")))?
        .to_rgb8();
    blocking(move || {
        let (model, version) = s.snapshot();
        let tensor = model.preprocess(&image)?;
        let prediction = model.predict(&tensor)?;
        let explanation = explain(&model, &prediction)?;
        Ok(Json(json!({
            "version": version,
            "label": prediction.label,
            "scores": prediction.scores,
            "abstain": prediction.label.is_abstain(),
            "explanation": explanation,
        })))
    })
    .await
}

async fn global(State(s): State<Shared>) -> Json<Value> {
    let (model, version) = s.snapshot();
    Json(json!({ "version": version, "prototypes": global_explanation(&model) }))
}

async fn shortcuts(State(s): State<Shared>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Json<Value>> {
    let thr = thresholds(&q)?;
    let split = subset(q.get("subset").map(String::as_str), Split::Train)?;
    blocking(move || {
        let (version, report) = s.shortcuts(split, thr)?;
        Ok(Json(json!({
            "version": version,
            "subset": split,
            "flagged": report.flagged(),
            "report": report,
        })))
    })
    .await
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CounterfactualBody {
    target_class: Option<usize>,
    prototypes: Option<Vec<usize>>,
    presence_thr: Option<f32>,
    overlap_thr: Option<f64>,
    seed: Option<u64>,
}

async fn counterfactual(State(s): State<Shared>, body: Bytes) -> ApiResult<Json<Value>> {
    let body: CounterfactualBody = parse_body(&body)?;
    let d = Thresholds::default();
    let thr = Thresholds {
        presence: body.presence_thr.unwrap_or(d.presence),
        overlap: body.overlap_thr.unwrap_or(d.overlap),
    };
    if let Some(ids) = &body.prototypes {
        for &id in ids {
            check_id(&s, id)?;
        }
    }
    blocking(move || {
        let target = body.target_class.unwrap_or(s.positive_class());
        let (version, report) = s.counterfactual(target, body.prototypes, thr, body.seed.unwrap_or(0))?;
        Ok(Json(json!({ "version": version, "report": report })))
    })
    .await
}

async fn log(State(s): State<Shared>) -> Json<Value> {
    let (version, entries) = s.log_entries();
    Json(json!({ "version": version, "entries": entries }))
}

async fn asset_image(State(s): State<Shared>, Path(relpath): Path<String>) -> ApiResult<Response> {
    let item = s
        .dataset()
        .get(&relpath)
        .ok_or_else(|| ApiError::not_found(format!("no image {relpath}")))?;
    png(&item.image)
}

fn parse_rect(text: &str) -> Option<PixelRect> {
    let v: Vec<usize> = text.split(',').map(|t| t.trim().parse().ok()).collect::<Option<_>>()?;
    match v[..] {
        [top, left, bottom, right] if top < bottom && left < right => Some(PixelRect { top, left, bottom, right }),
        _ => None,
    }
}

/// Crop of a dataset image; `rect` is `top,left,bottom,right` (exclusive).
async fn asset_crop(State(s): State<Shared>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let id = q.get("image").ok_or_else(|| ApiError::unprocessable("missing query parameter image"))?;
    let item = s.dataset().get(id).ok_or_else(|| ApiError::not_found(format!("no image {id}")))?;
    let rect = q
        .get("rect")
        .and_then(|r| parse_rect(r))
        .ok_or_else(|| ApiError::unprocessable("rect must be top,left,bottom,right with top<bottom, left<right"))?;
    if rect.bottom > item.image.height() as usize || rect.right > item.image.width() as usize {
        return Err(ApiError::unprocessable("rect lies outside the image"));
    }
    png(&crop(&item.image, &rect))
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such route")
}

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route("/prototypes", get(list_prototypes))
        .route("/prototypes/{id}/patches", get(prototype_patches))
        .route("/prototypes/{id}/disable", post(disable_prototype))
        .route("/prototypes/{id}/enable", post(enable_prototype))
        .route("/global", get(global))
        .route("/metrics", get(metrics))
        .route("/evaluate", post(evaluate))
        .route("/jobs/{id}", get(job_status))
        .route("/predict", post(predict))
        .route("/shortcuts", get(shortcuts))
        .route("/counterfactual", post(counterfactual))
        .route("/log", get(log))
        .route("/assets/images/{*relpath}", get(asset_image))
        .route("/assets/crop", get(asset_crop))
        .fallback(fallback)
        .with_state(session)
}

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub addr: SocketAddr,
    /// Intervention log file; entries are appended as JSON lines.
    pub log_path: Option<PathBuf>,
    pub positive_class: usize,
}

/// Loads the session and serves until ctrl-c.
pub async fn serve(config: ServeConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let session = Session::load(
        &config.checkpoint,
        &config.dataset,
        config.log_path.as_ref(),
        config.positive_class,
    )?;
    let listener = tokio::net::TcpListener::bind(config.addr).await?;
    log::info!("workbench listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(session)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
