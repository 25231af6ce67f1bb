//! HTTP/JSON labeling service backed by a manifest file.
//!
//! Reads run concurrently. Every manifest mutation happens under the write
//! half of one lock and is persisted with an atomic rename before the lock is
//! released, so the file on disk always matches the in-memory manifest.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex as SyncMutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use likenet_core::data::{audit_sample, load_image, Dataset, Entry, Manifest, MeanImage};
use likenet_core::optim::predict_dataset;
use likenet_core::{estimate_label_noise, Checkpoint, Error};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};

/// Like-probabilities from a two-class checkpoint, with dropout off.
pub struct Scorer {
    ckpt: Checkpoint,
    mean: Option<MeanImage>,
}

impl Scorer {
    pub fn new(ckpt: Checkpoint, mean: Option<MeanImage>) -> likenet_core::Result<Scorer> {
        let classes = ckpt.spec.num_classes()?;
        if classes != 2 {
            return Err(Error::Config(format!(
                "scoring needs a two-class model, got {classes} classes"
            )));
        }
        if let Some(m) = &mean {
            if m.shape != ckpt.spec.input_shape {
                return Err(Error::Shape {
                    op: "mean image".into(),
                    expected: format!("{:?}", ckpt.spec.input_shape),
                    got: format!("{:?}", m.shape),
                });
            }
        }
        Ok(Scorer { ckpt, mean })
    }

    /// Probability of class 1 for each image, in order.
    pub fn p_like(&self, paths: &[PathBuf]) -> likenet_core::Result<Vec<f64>> {
        let [c, side, _] = self.ckpt.spec.input_shape;
        let mut out = Vec::with_capacity(paths.len());
        // bounded chunks keep decoded images from piling up in memory
        for chunk in paths.chunks(64) {
            let mut ds = Dataset::new([c, side, side]);
            for (i, p) in chunk.iter().enumerate() {
                let mut img = load_image(p, side)?;
                if let Some(m) = &self.mean {
                    m.apply_to(img.data_mut())?;
                }
                ds.push(i.to_string(), img.data(), 0)?;
            }
            out.extend(
                predict_dataset(&self.ckpt, &ds)?
                    .iter()
                    .map(|row| row[1] as f64),
            );
        }
        Ok(out)
    }
}

pub struct AppState {
    manifest_path: PathBuf,
    base: PathBuf,
    manifest: RwLock<Manifest>,
    scorer: Option<Arc<Scorer>>,
    scores: SyncMutex<HashMap<String, f64>>,
    session: Mutex<Option<Session>>,
}

impl AppState {
    /// Loads the manifest; image paths resolve against its directory.
    pub fn open(
        manifest_path: impl Into<PathBuf>,
        scorer: Option<Scorer>,
    ) -> likenet_core::Result<AppState> {
        let manifest_path = manifest_path.into();
        let manifest = Manifest::load(&manifest_path)?;
        let base = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(AppState {
            manifest_path,
            base,
            manifest: RwLock::new(manifest),
            scorer: scorer.map(Arc::new),
            scores: SyncMutex::new(HashMap::new()),
            session: Mutex::new(None),
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/next", get(next))
        .route("/label", post(label))
        .route("/predict/{id}", get(predict))
        .route("/stats", get(stats))
        .route("/image/{id}", get(image))
        .route("/consistency", get(consistency_state))
        .route("/consistency/start", get(consistency_start))
        .route("/consistency/answer", post(consistency_answer))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
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

    fn not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, format!("unknown id {id:?}"))
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }

    fn no_model() -> Self {
        ApiError::new(
            StatusCode::CONFLICT,
            "no model loaded; start the service with --model",
        )
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Ingestion { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Item {
    pub id: String,
    pub image_url: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub model_score: Option<f64>,
}

impl Item {
    fn new(id: &str) -> Item {
        Item {
            id: id.to_string(),
            image_url: format!("/image/{id}"),
            model_score: None,
        }
    }
}

fn params(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<u64>> {
    q.get(key)
        .map(|v| {
            v.parse::<u64>()
                .map_err(|_| ApiError::bad_request(format!("{key} must be a non-negative integer")))
        })
        .transpose()
}

#[derive(Deserialize)]
struct LabelBody {
    id: String,
    label: serde_json::Value,
}

fn parse_label_body(body: &[u8]) -> ApiResult<LabelBody> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("expected {{\"id\", \"label\"}}: {e}")))
}

fn binary_label(v: &serde_json::Value) -> ApiResult<u8> {
    match v.as_u64() {
        Some(l @ (0 | 1)) => Ok(l as u8),
        _ => Err(ApiError::bad_request(format!(
            "label must be 0 or 1, got {v}"
        ))),
    }
}

/// Scores for `items`, computing only the ones not cached yet.
async fn scores_for(
    state: &Arc<AppState>,
    scorer: &Arc<Scorer>,
    items: &[(String, PathBuf)],
) -> ApiResult<Vec<f64>> {
    let missing: Vec<(String, PathBuf)> = {
        let cache = state.scores.lock().unwrap();
        items
            .iter()
            .filter(|(id, _)| !cache.contains_key(id))
            .cloned()
            .collect()
    };
    if !missing.is_empty() {
        let sc = Arc::clone(scorer);
        let paths: Vec<PathBuf> = missing.iter().map(|(_, p)| p.clone()).collect();
        let fresh = tokio::task::spawn_blocking(move || sc.p_like(&paths))
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
        let mut cache = state.scores.lock().unwrap();
        for ((id, _), p) in missing.into_iter().zip(fresh) {
            cache.insert(id, p);
        }
    }
    let cache = state.scores.lock().unwrap();
    Ok(items.iter().map(|(id, _)| cache[id]).collect())
}

async fn next(
    State(state): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let uncertainty = match q.get("strategy").map(String::as_str) {
        None | Some("sequential") => false,
        Some("uncertainty") => true,
        Some(other) => return Err(ApiError::bad_request(format!("unknown strategy {other:?}"))),
    };
    if uncertainty && state.scorer.is_none() {
        return Err(ApiError::no_model());
    }
    let unlabeled: Vec<(String, PathBuf)> = {
        let m = state.manifest.read().await;
        let iter = m.entries.iter().filter(|e| e.label.is_none());
        let take = if uncertainty { usize::MAX } else { 1 };
        iter.take(take)
            .map(|e| (e.id.clone(), state.base.join(&e.path)))
            .collect()
    };
    if unlabeled.is_empty() {
        return Ok(StatusCode::NO_CONTENT.into_response());
    }
    let Some(scorer) = &state.scorer else {
        return Ok(Json(Item::new(&unlabeled[0].0)).into_response());
    };
    let scores = scores_for(&state, scorer, &unlabeled).await?;
    // strict comparison keeps the earliest entry on ties
    let mut best = 0;
    for (i, p) in scores.iter().enumerate() {
        if (p - 0.5).abs() < (scores[best] - 0.5).abs() {
            best = i;
        }
    }
    let mut item = Item::new(&unlabeled[best].0);
    item.model_score = Some(scores[best]);
    Ok(Json(item).into_response())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct LabelResponse {
    pub id: String,
    pub label: u8,
    pub n_labeled: usize,
    pub n_likes: usize,
    pub like_fraction: Option<f64>,
}

fn like_fraction(labeled: usize, likes: usize) -> Option<f64> {
    (labeled > 0).then(|| likes as f64 / labeled as f64)
}

async fn label(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<LabelResponse>> {
    let body = parse_label_body(&body)?;
    let mut m = state.manifest.write().await;
    let entry = m
        .get_mut(&body.id)
        .ok_or_else(|| ApiError::not_found(&body.id))?;
    let label = binary_label(&body.label)?;
    let previous = entry.label.replace(label);
    if let Err(e) = m.save(&state.manifest_path) {
        m.get_mut(&body.id).unwrap().label = previous;
        return Err(e.into());
    }
    let (n_labeled, n_likes) = m.label_counts();
    Ok(Json(LabelResponse {
        id: body.id,
        label,
        n_labeled,
        n_likes,
        like_fraction: like_fraction(n_labeled, n_likes),
    }))
}

async fn predict(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let scorer = state.scorer.as_ref().ok_or_else(ApiError::no_model)?;
    let path = {
        let m = state.manifest.read().await;
        state
            .base
            .join(&m.get(&id).ok_or_else(|| ApiError::not_found(&id))?.path)
    };
    let p = scores_for(&state, scorer, &[(id.clone(), path)]).await?[0];
    Ok(Json(serde_json::json!({ "id": id, "p_like": p })))
}

#[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct SplitCounts {
    pub entries: usize,
    pub labeled: usize,
    pub likes: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Stats {
    pub n_entries: usize,
    pub n_labeled: usize,
    pub n_likes: usize,
    pub like_fraction: Option<f64>,
    pub splits: BTreeMap<String, SplitCounts>,
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<Stats> {
    let m = state.manifest.read().await;
    let mut splits: BTreeMap<String, SplitCounts> = BTreeMap::new();
    for e in &m.entries {
        let s = splits.entry(e.split.to_string()).or_default();
        s.entries += 1;
        s.labeled += usize::from(e.label.is_some());
        s.likes += usize::from(e.label == Some(1));
    }
    let (n_labeled, n_likes) = m.label_counts();
    Json(Stats {
        n_entries: m.len(),
        n_labeled,
        n_likes,
        like_fraction: like_fraction(n_labeled, n_likes),
        splits,
    })
}

async fn image(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let path = {
        let m = state.manifest.read().await;
        state
            .base
            .join(&m.get(&id).ok_or_else(|| ApiError::not_found(&id))?.path)
    };
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())))?;
    let mime = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

/// A relabeling pass over already-labelled entries with the stored labels hidden.
pub struct Session {
    items: Vec<(String, u8)>,
    answers: Vec<bool>,
    disagreed: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionView {
    pub active: bool,
    pub n: usize,
    pub answered: usize,
    pub agreements: usize,
    pub disagreements: usize,
    pub done: bool,
    pub agreement_rate: Option<f64>,
    pub noise_estimate: Option<f64>,
    pub disagreement_ids: Vec<String>,
    pub next: Option<Item>,
}

impl Session {
    fn view(&self) -> SessionView {
        let answered = self.answers.len();
        let agreements = self.answers.iter().filter(|&&a| a).count();
        let disagreements = answered - agreements;
        SessionView {
            active: true,
            n: self.items.len(),
            answered,
            agreements,
            disagreements,
            done: answered == self.items.len(),
            agreement_rate: (answered > 0).then(|| agreements as f64 / answered as f64),
            noise_estimate: estimate_label_noise(answered as u64, disagreements as u64).ok(),
            disagreement_ids: self.disagreed.clone(),
            next: self.items.get(answered).map(|(id, _)| Item::new(id)),
        }
    }
}

fn inactive() -> SessionView {
    SessionView {
        active: false,
        n: 0,
        answered: 0,
        agreements: 0,
        disagreements: 0,
        done: false,
        agreement_rate: None,
        noise_estimate: None,
        disagreement_ids: Vec::new(),
        next: None,
    }
}

async fn consistency_state(State(state): State<Arc<AppState>>) -> Json<SessionView> {
    Json(
        state
            .session
            .lock()
            .await
            .as_ref()
            .map_or_else(inactive, Session::view),
    )
}

async fn consistency_start(
    State(state): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<SessionView>> {
    let n = params(&q, "n")?.ok_or_else(|| ApiError::bad_request("missing n"))? as usize;
    let seed = params(&q, "seed")?.unwrap_or(0);
    let labeled: Vec<Entry> = {
        let m = state.manifest.read().await;
        m.entries
            .iter()
            .filter(|e| e.label.is_some())
            .cloned()
            .collect()
    };
    if n == 0 || n > labeled.len() {
        return Err(ApiError::bad_request(format!(
            "n must be between 1 and the {} labelled entries",
            labeled.len()
        )));
    }
    let pool = Manifest { entries: labeled };
    let items = audit_sample(&pool, n, seed)?
        .into_iter()
        .map(|e| (e.id, e.label.expect("filtered to labelled entries")))
        .collect();
    let session = Session {
        items,
        answers: Vec::new(),
        disagreed: Vec::new(),
    };
    let view = session.view();
    *state.session.lock().await = Some(session);
    Ok(Json(view))
}

async fn consistency_answer(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<Json<SessionView>> {
    let body = parse_label_body(&body)?;
    let mut guard = state.session.lock().await;
    let session = guard.as_mut().ok_or_else(|| {
        ApiError::new(
            StatusCode::CONFLICT,
            "no consistency session; call /consistency/start",
        )
    })?;
    let Some((expected, stored)) = session.items.get(session.answers.len()).cloned() else {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "consistency session already finished",
        ));
    };
    if body.id != expected {
        let status = if session.items.iter().any(|(id, _)| *id == body.id) {
            StatusCode::CONFLICT
        } else {
            StatusCode::NOT_FOUND
        };
        return Err(ApiError::new(
            status,
            format!("expected an answer for {expected:?}, got {:?}", body.id),
        ));
    }
    let label = binary_label(&body.label)?;
    session.answers.push(label == stored);
    if label != stored {
        session.disagreed.push(expected);
    }
    Ok(Json(session.view()))
}
