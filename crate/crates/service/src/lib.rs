//! JSON-over-HTTP access to a trained checkpoint.
//!
//! Token positions in requests and responses count `[CLS]` as position 0,
//! exactly as the tokenizer does; `tokens` arrays in responses list every
//! position including `[CLS]` and `[SEP]`.
//!
//! | route | body | reply |
//! |---|---|---|
//! | `GET /info` | | [`Info`] |
//! | `POST /classify` | [`ClassifyRequest`] | [`ClassifyResponse`] |
//! | `POST /revise` | [`ReviseRequest`] | [`RevisionReport`] |
//! | `POST /session` | [`CreateSession`] | [`SessionView`] |
//! | `GET /session/{id}` | | [`SessionView`] |
//! | `POST /session/{id}/select` | [`SelectRequest`] | [`SessionView`] |
//! | `POST /session/{id}/step` | | [`SessionView`] with `pending` set |
//! | `POST /session/{id}/accept` | | [`SessionView`] |
//! | `POST /session/{id}/undo` | | [`SessionView`] |
//!
//! Errors are `{"error": "..."}` with status 400 (bad input or span), 404
//! (unknown session), 409 (step without a selection when auto-select is
//! off, accept without a proposal, nothing to undo) or 503 (no checkpoint).

pub mod error;
pub mod session;
pub mod store;

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::HeaderValue;
use axum::routing::{get, post};
use axum::{Json, Router};
use reviser_core::model::Checkpoint;
use reviser_core::revision::{
    revise_text, score_and_disagreement, ConfigOverrides, RevisionReport, SpanSelection, TraceLine,
};
use reviser_core::tokenizer::{TokenSequence, Vocabulary};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

pub use error::ApiError;
pub use session::{Event, NewSession, Proposal, Session, Snapshot};
pub use store::SessionStore;

pub const DEFAULT_UNDO_CAP: usize = 64;

#[derive(Clone)]
pub struct AppState {
    pub checkpoint: Option<Arc<Checkpoint>>,
    pub store: Arc<SessionStore>,
    pub undo_cap: usize,
}

impl AppState {
    pub fn new(checkpoint: Option<Checkpoint>, store: SessionStore) -> Self {
        Self {
            checkpoint: checkpoint.map(Arc::new),
            store: Arc::new(store),
            undo_cap: DEFAULT_UNDO_CAP,
        }
    }

    fn ckpt(&self) -> Result<Arc<Checkpoint>, ApiError> {
        self.checkpoint.clone().ok_or(ApiError::Unavailable)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Info {
    pub attributes: Vec<String>,
    pub vocab_size: usize,
    pub checkpoint: String,
    pub sessions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyRequest {
    pub text: String,
    /// Attribute the disagreement scores point toward. Defaults to the
    /// least probable one, i.e. the attribute a revision would aim for.
    #[serde(default)]
    pub target: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub tokens: Vec<String>,
    pub attributes: Vec<String>,
    pub probs: Vec<f64>,
    pub target: String,
    /// One score per entry of `tokens`.
    pub disagreement: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviseRequest {
    pub text: String,
    pub target: String,
    #[serde(default)]
    pub config: ConfigOverrides,
    /// Revise this span once instead of running the automatic loop.
    #[serde(default)]
    pub span: Option<SpanSelection>,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub text: String,
    pub target: String,
    #[serde(default)]
    pub config: ConfigOverrides,
    #[serde(default = "default_true")]
    pub auto_select: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectRequest {
    pub t: usize,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalView {
    pub tokens: Vec<String>,
    pub text: String,
    pub zeta: f64,
    pub record: TraceLine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub target: String,
    pub delta: f64,
    pub auto_select: bool,
    pub tokens: Vec<String>,
    pub text: String,
    pub zeta: f64,
    /// Target probability of every committed state, oldest first.
    pub zeta_history: Vec<f64>,
    pub disagreement: Vec<f64>,
    pub selection: Option<SpanSelection>,
    pub pending: Option<ProposalView>,
    pub can_undo: bool,
    pub undo_depth: usize,
    pub trace: Vec<TraceLine>,
}

fn token_strings(vocab: &Vocabulary, seq: &TokenSequence) -> Vec<String> {
    seq.ids()
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("[UNK]").to_string())
        .collect()
}

pub fn session_view(ckpt: &Checkpoint, s: &Session) -> Result<SessionView, ApiError> {
    let vocab = &ckpt.vocab;
    let cur = &s.current;
    let (_, disagreement) = score_and_disagreement(&ckpt.params, &cur.seq, s.config.target)?;
    let trace = cur
        .trace
        .iter()
        .map(|r| TraceLine::new(r, cur.zetas[r.iteration + 1], vocab))
        .collect();
    let pending = s.pending.as_ref().map(|p| ProposalView {
        tokens: token_strings(vocab, &p.record.output),
        text: vocab.decode(p.record.output.ids()),
        zeta: p.zeta,
        record: TraceLine::new(&p.record, p.zeta, vocab),
    });
    Ok(SessionView {
        id: s.id.clone(),
        target: s.target.clone(),
        delta: s.config.delta,
        auto_select: s.auto_select,
        tokens: token_strings(vocab, &cur.seq),
        text: vocab.decode(cur.seq.ids()),
        zeta: *cur.zetas.last().expect("at least the initial score"),
        zeta_history: cur.zetas.clone(),
        disagreement,
        selection: s.selection,
        can_undo: s.pending.is_some() || !s.undo.is_empty(),
        undo_depth: s.undo.len(),
        pending,
        trace,
    })
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))
}

/// Model work runs off the async workers.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn info(State(st): State<AppState>) -> Result<Json<Info>, ApiError> {
    let ck = st.ckpt()?;
    Ok(Json(Info {
        attributes: ck.attributes.clone(),
        vocab_size: ck.vocab.len(),
        checkpoint: ck.hash(),
        sessions: st.store.len(),
    }))
}

pub fn classify(ck: &Checkpoint, req: &ClassifyRequest) -> Result<ClassifyResponse, ApiError> {
    if req.text.trim().is_empty() {
        return Err(ApiError::BadRequest("empty text".into()));
    }
    let seq = ck.vocab.encode(&req.text);
    let probs = ck.params.attribute_distribution(&ck.params.forward(&seq)?)?;
    let target = match &req.target {
        Some(name) => ck.attribute_index(name)?,
        None => probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p < probs[best] { i } else { best }),
    };
    let (_, disagreement) = score_and_disagreement(&ck.params, &seq, target)?;
    Ok(ClassifyResponse {
        tokens: token_strings(&ck.vocab, &seq),
        attributes: ck.attributes.clone(),
        probs,
        target: ck.attributes[target].clone(),
        disagreement,
    })
}

async fn classify_handler(State(st): State<AppState>, body: Bytes) -> Result<Json<ClassifyResponse>, ApiError> {
    let ck = st.ckpt()?;
    let req: ClassifyRequest = parse(&body)?;
    blocking(move || classify(&ck, &req)).await.map(Json)
}

/// The stateless revision behind `POST /revise`; also what the command line
/// runs.
pub fn revise(ck: &Checkpoint, req: &ReviseRequest) -> Result<RevisionReport, ApiError> {
    let target = ck.attribute_index(&req.target)?;
    let config = req.config.resolve(target);
    config.validate(ck.attributes.len())?;
    Ok(revise_text(ck, &req.text, &config, req.span)?)
}

async fn revise_handler(State(st): State<AppState>, body: Bytes) -> Result<Json<RevisionReport>, ApiError> {
    let ck = st.ckpt()?;
    let req: ReviseRequest = parse(&body)?;
    blocking(move || revise(&ck, &req)).await.map(Json)
}

async fn create_session(State(st): State<AppState>, body: Bytes) -> Result<Json<SessionView>, ApiError> {
    let ck = st.ckpt()?;
    let req: CreateSession = parse(&body)?;
    blocking(move || {
        let target = ck.attribute_index(&req.target)?;
        let session = Session::create(
            &ck,
            NewSession {
                id: uuid::Uuid::new_v4().simple().to_string(),
                text: &req.text,
                target: &req.target,
                config: req.config.resolve(target),
                auto_select: req.auto_select,
                undo_cap: st.undo_cap,
            },
        )?;
        let view = session_view(&ck, &session)?;
        st.store.insert(session)?;
        Ok(Json(view))
    })
    .await
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let ck = st.ckpt()?;
    let shared = st.store.get(&id)?;
    blocking(move || session_view(&ck, &shared.lock()).map(Json)).await
}

#[derive(Clone, Copy)]
enum Action {
    Select(SelectRequest),
    Step,
    Accept,
    Undo,
}

/// Runs one session action under the session lock, so actions on one
/// session are serialized while other sessions proceed.
async fn act(st: AppState, id: String, action: Action) -> Result<Json<SessionView>, ApiError> {
    let ck = st.ckpt()?;
    let shared = st.store.get(&id)?;
    blocking(move || {
        let mut s = shared.lock();
        let event = match action {
            Action::Select(r) => s.select_event(SpanSelection { start: r.t, len: r.n })?,
            Action::Step => s.step_event(&ck)?,
            Action::Accept => s.accept_event()?,
            Action::Undo => s.undo_event()?,
        };
        st.store.record(&mut s, event)?;
        session_view(&ck, &s).map(Json)
    })
    .await
}

async fn select(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SessionView>, ApiError> {
    // Unknown sessions report 404 before the body is looked at.
    st.store.get(&id)?;
    let req: SelectRequest = parse(&body)?;
    act(st, id, Action::Select(req)).await
}

async fn step(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    act(st, id, Action::Step).await
}

async fn accept(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    act(st, id, Action::Accept).await
}

async fn undo(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    act(st, id, Action::Undo).await
}

/// `allow_origin = None` accepts any origin.
pub fn router(state: AppState, allow_origin: Option<HeaderValue>) -> Router {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match allow_origin {
        Some(o) => cors.allow_origin(o),
        None => cors.allow_origin(Any),
    };
    Router::new()
        .route("/info", get(info))
        .route("/classify", post(classify_handler))
        .route("/revise", post(revise_handler))
        .route("/session", post(create_session))
        .route("/session/{id}", get(get_session))
        .route("/session/{id}/select", post(select))
        .route("/session/{id}/step", post(step))
        .route("/session/{id}/accept", post(accept))
        .route("/session/{id}/undo", post(undo))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    allow_origin: Option<HeaderValue>,
) -> std::io::Result<()> {
    axum::serve(listener, router(state, allow_origin)).await
}
