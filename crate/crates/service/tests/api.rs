use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use reviser_core::model::{Checkpoint, ModelConfig, ModelParams};
use reviser_core::revision::RevisionReport;
use reviser_core::synthdata::{generate_corpus, TemplateConfig};
use reviser_core::tokenizer::Vocabulary;
use reviser_service::{router, AppState, ClassifyResponse, Session, SessionStore, SessionView};
use serde_json::{json, Value};
use tower::ServiceExt;

fn checkpoint() -> Checkpoint {
    let corpus = generate_corpus(200, &TemplateConfig::default(), 1).unwrap().to_labeled();
    let vocab = Vocabulary::build(corpus.texts(), 1).unwrap();
    let config = ModelConfig::desk_scale(vocab.len(), corpus.attributes.len());
    Checkpoint::new(ModelParams::init(&config, 2).unwrap(), vocab, corpus.attributes.clone()).unwrap()
}

fn app_with(store: SessionStore, undo_cap: usize) -> (Router, AppState) {
    let mut state = AppState::new(Some(checkpoint()), store);
    state.undo_cap = undo_cap;
    (router(state.clone(), None), state)
}

fn app() -> Router {
    app_with(SessionStore::in_memory(), 8).0
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(b) => Body::from(b.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

const TEXT: &str = "Anna will grab the stuff at the park .";

#[tokio::test]
async fn classify_contract() {
    let app = app();
    let (s, v) = call(&app, "POST", "/classify", Some(json!({"text": TEXT}))).await;
    assert_eq!(s, StatusCode::OK);
    let r: ClassifyResponse = serde_json::from_value(v).unwrap();
    assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(r.disagreement.iter().all(|&a| a >= 0.0));
    assert_eq!(r.disagreement.len(), r.tokens.len());
    let ck = checkpoint();
    let ids = ck.vocab.encode(TEXT);
    let expected: Vec<&str> = ids.ids().iter().map(|&i| ck.vocab.token(i).unwrap()).collect();
    assert_eq!(r.tokens, expected);

    let (s, _) = call(&app, "POST", "/classify", Some(json!({"text": "  "}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/classify", Some(json!({"text": TEXT, "target": "nope"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/classify", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn no_checkpoint_is_503() {
    let app = router(AppState::new(None, SessionStore::in_memory()), None);
    for (m, u) in [("POST", "/classify"), ("POST", "/revise"), ("POST", "/session"), ("GET", "/info")] {
        let (s, _) = call(&app, m, u, Some(json!({"text": TEXT, "target": "formal"}))).await;
        assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE, "{u}");
    }
}

#[tokio::test]
async fn revise_is_deterministic_and_round_trips() {
    let app = app();
    let body = json!({"text": TEXT, "target": "formal", "config": {"iters": 2}});
    let (s, a) = call(&app, "POST", "/revise", Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK, "{a}");
    let (_, b) = call(&app, "POST", "/revise", Some(body)).await;
    assert_eq!(a, b);
    let r: RevisionReport = serde_json::from_value(a.clone()).unwrap();
    assert_eq!(serde_json::to_value(&r).unwrap(), a);
    let max = r
        .records
        .iter()
        .map(|l| l.output_zeta)
        .chain(r.records.first().map(|l| l.zeta))
        .fold(f64::NEG_INFINITY, f64::max);
    if !r.records.is_empty() {
        assert_eq!(r.summary.zeta, max);
    }
    assert_eq!(r.summary.output, r.output);

    let (s, _) = call(&app, "POST", "/revise", Some(json!({"text": TEXT, "target": "formal", "config": {"delta": 2.0}}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/revise", Some(json!({"text": TEXT, "target": "formal", "config": {"bogus": 1}}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/revise", Some(json!({"text": TEXT, "target": "formal", "span": {"start": 0, "len": 1}}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

async fn session(app: &Router, auto: bool) -> SessionView {
    let (s, v) = call(app, "POST", "/session", Some(json!({"text": TEXT, "target": "formal", "auto_select": auto}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn act(app: &Router, id: &str, op: &str, body: Option<Value>) -> (StatusCode, Value) {
    call(app, "POST", &format!("/session/{id}/{op}"), body).await
}

#[tokio::test]
async fn session_errors() {
    let app = app();
    let (s, _) = call(&app, "GET", "/session/missing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = act(&app, "missing", "step", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = act(&app, "missing", "select", Some(json!({"t": 1, "n": 1}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let v = session(&app, false).await;
    let (s, _) = act(&app, &v.id, "step", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = act(&app, &v.id, "accept", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = act(&app, &v.id, "undo", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    for (t, n) in [(0, 1), (1, 0), (v.tokens.len() - 1, 1), (3, 100)] {
        let (s, _) = act(&app, &v.id, "select", Some(json!({"t": t, "n": n}))).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{t}:{n}");
    }
}

#[tokio::test]
async fn step_accept_undo_contract() {
    let app = app();
    let v0 = session(&app, false).await;
    assert_eq!(v0.zeta_history.len(), 1);

    // select -> step -> undo leaves the committed text alone.
    let (s, _) = act(&app, &v0.id, "select", Some(json!({"t": 3, "n": 1}))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = act(&app, &v0.id, "step", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let stepped: SessionView = serde_json::from_value(v).unwrap();
    assert_eq!(stepped.tokens, v0.tokens);
    assert!(stepped.pending.is_some());
    let (_, v) = act(&app, &v0.id, "undo", None).await;
    let undone: SessionView = serde_json::from_value(v).unwrap();
    assert_eq!(undone.tokens, v0.tokens);
    assert!(undone.pending.is_none());

    // accept commits exactly one record.
    act(&app, &v0.id, "step", None).await;
    let (s, v) = act(&app, &v0.id, "accept", None).await;
    assert_eq!(s, StatusCode::OK);
    let accepted: SessionView = serde_json::from_value(v).unwrap();
    assert_eq!(accepted.trace.len(), 1);
    assert_eq!(accepted.zeta_history.len(), 2);
    assert_eq!(accepted.tokens, stepped.pending.unwrap().tokens);
    assert!(accepted.selection.is_none());

    let (_, v) = act(&app, &v0.id, "undo", None).await;
    let back: SessionView = serde_json::from_value(v).unwrap();
    assert_eq!(back.tokens, v0.tokens);
    assert_eq!(back.trace.len(), 0);
    assert_eq!(back.zeta_history, v0.zeta_history);
}

#[tokio::test]
async fn undo_stack_is_capped() {
    let (app, _) = app_with(SessionStore::in_memory(), 2);
    let v = session(&app, true).await;
    for _ in 0..3 {
        assert_eq!(act(&app, &v.id, "step", None).await.0, StatusCode::OK);
        assert_eq!(act(&app, &v.id, "accept", None).await.0, StatusCode::OK);
    }
    let (_, got) = call(&app, "GET", &format!("/session/{}", v.id), None).await;
    let got: SessionView = serde_json::from_value(got).unwrap();
    assert_eq!(got.undo_depth, 2);
    assert_eq!(got.trace.len(), 3);
}

#[tokio::test]
async fn journal_restores_sessions_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (app, state) = app_with(SessionStore::persistent(dir.path(), None).unwrap(), 8);
    let v = session(&app, true).await;
    act(&app, &v.id, "step", None).await;
    act(&app, &v.id, "accept", None).await;
    act(&app, &v.id, "select", Some(json!({"t": 2, "n": 2}))).await;
    act(&app, &v.id, "step", None).await;
    let other = session(&app, false).await;

    let before: Vec<String> = state
        .store
        .ids()
        .iter()
        .map(|id| serde_json::to_string(&*state.store.get(id).unwrap().lock()).unwrap())
        .collect();
    let ck = checkpoint().hash();
    let restored = SessionStore::persistent(dir.path(), Some(&ck)).unwrap();
    assert_eq!(restored.ids(), state.store.ids());
    let after: Vec<String> = restored
        .ids()
        .iter()
        .map(|id| serde_json::to_string(&*restored.get(id).unwrap().lock()).unwrap())
        .collect();
    assert_eq!(before, after);
    assert!(restored.ids().contains(&other.id));

    // A different checkpoint does not adopt the sessions.
    assert!(SessionStore::persistent(dir.path(), Some("other")).unwrap().is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_accepts_on_one_session_serialize() {
    let (app, state) = app_with(SessionStore::in_memory(), 8);
    let v = session(&app, true).await;
    act(&app, &v.id, "step", None).await;
    let mut handles = Vec::new();
    for _ in 0..6 {
        let app = app.clone();
        let id = v.id.clone();
        handles.push(tokio::spawn(async move { act(&app, &id, "accept", None).await.0 }));
    }
    let mut ok = 0;
    for h in handles {
        match h.await.unwrap() {
            StatusCode::OK => ok += 1,
            s => assert_eq!(s, StatusCode::CONFLICT),
        }
    }
    assert_eq!(ok, 1);
    let s: Arc<parking_lot::Mutex<Session>> = state.store.get(&v.id).unwrap();
    assert_eq!(s.lock().current.trace.len(), 1);
}

#[test]
fn fuzz_seeds_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let journal = root.join("journal/session");
    let s = reviser_service::store::load_journal(&journal).unwrap();
    assert_eq!(s.current.trace.len(), 0);
    assert!(s.pending.is_none());
    for name in ["classify", "revise", "session", "select"] {
        let body = std::fs::read(root.join("requests").join(name)).unwrap();
        let v: Value = serde_json::from_slice(&body).unwrap();
        assert!(v.is_object(), "{name}");
    }
    let r: reviser_service::ReviseRequest =
        serde_json::from_slice(&std::fs::read(root.join("requests/revise")).unwrap()).unwrap();
    assert_eq!(r.config.iters, Some(4));
}
