//! HTTP contract: responses agree bit-for-bit with the in-process engine.

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::Rng;
use serde_json::{json, Value};
use syncb::experiment::train_seed;
use syncb::server::{router, AppState, ServedModel};
use syncb_core::data::{generate_synthetic, split, SplitDataset, SynthConfig};
use syncb_core::intervention::{estimate_epsilons, intervened_logits, uncertainty_counts, usi_order, EvalMode};
use syncb_core::metrics::task_accuracy;
use syncb_core::model::{ModelKind, ModelWidths, Overrides, SynCbModel};
use syncb_core::training::{LossWeights, TrainConfig};

fn trained() -> (SynCbModel, SplitDataset) {
    let data = generate_synthetic(&SynthConfig { n_samples: 400, concept_noise_rate: 0.15, ..SynthConfig::default() }).unwrap();
    let splits = split(&data, [0.6, 0.2, 0.2], 0).unwrap();
    let widths = ModelWidths { embedding_dim: 4, backbone_hidden: vec![24], neural_hidden: 16, routing_hidden: 16, task_head_hidden: 16 };
    let cfg = TrainConfig { epochs: 8, ..TrainConfig::default() };
    let (model, _) = train_seed(ModelKind::SynCbm, &widths, &splits, &cfg, &LossWeights::default(), 3).unwrap();
    (model, splits)
}

fn app(model: &SynCbModel, splits: &SplitDataset, mode: EvalMode) -> Router {
    let served = ServedModel::new(model.clone(), splits.test.clone(), mode).unwrap();
    router(Arc::new(AppState::new(served)))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    use tower::ServiceExt;
    let builder = Request::builder().method(method).uri(uri);
    let request = match body {
        Some(b) => builder.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => builder.body(Body::empty()),
    }
    .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn open_session(app: &Router) -> u64 {
    let (status, body) = call(app, "POST", "/api/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    body["id"].as_u64().unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[tokio::test]
async fn model_endpoint_schema() {
    let (model, splits) = trained();
    let app = app(&model, &splits, EvalMode::Routed);
    let (status, info) = call(&app, "GET", "/api/model", None).await;
    assert_eq!(status, StatusCode::OK);
    let test = &splits.test;
    assert_eq!(info["kind"], "syncbm");
    assert_eq!(info["n_concepts"], test.n_concepts());
    assert_eq!(info["n_classes"], test.n_classes());
    assert_eq!(info["n_samples"], test.len());
    assert_eq!(info["eval_mode"], "routed");
    assert_eq!(info["concept_names"].as_array().unwrap().len(), test.n_concepts());
    assert_eq!(info["groups"], json!(test.groups()));
    let probs = model.predict(test.features(), None).unwrap().concept_probs.unwrap();
    assert_eq!(floats(&info["epsilon"]), estimate_epsilons(&probs).unwrap().epsilons);
    assert!(floats(&info["epsilon"]).iter().all(|&e| e == 0.2 || e == 0.4));
}

#[tokio::test]
async fn queue_follows_usi_ranking() {
    let (model, splits) = trained();
    let app = app(&model, &splits, EvalMode::Routed);
    let id = open_session(&app).await;
    let probs = model.predict(splits.test.features(), None).unwrap().concept_probs.unwrap();
    let profile = estimate_epsilons(&probs).unwrap();
    let counts = uncertainty_counts(&probs, &profile);

    let (status, queue) = call(&app, "GET", &format!("/api/sessions/{id}/queue?policy=usi"), None).await;
    assert_eq!(status, StatusCode::OK);
    let items = queue["items"].as_array().unwrap();
    let order: Vec<usize> = items.iter().map(|i| i["sample"].as_u64().unwrap() as usize).collect();
    assert_eq!(order, usi_order(&probs, &profile));
    for (item, &s) in items.iter().zip(&order) {
        assert_eq!(item["uncertain_count"].as_u64().unwrap() as usize, counts[s]);
    }
    assert!(items.windows(2).all(|w| w[0]["uncertain_count"].as_u64() >= w[1]["uncertain_count"].as_u64()));

    let (_, by_index) = call(&app, "GET", &format!("/api/sessions/{id}/queue?policy=index"), None).await;
    let order: Vec<u64> = by_index["items"].as_array().unwrap().iter().map(|i| i["sample"].as_u64().unwrap()).collect();
    assert_eq!(order, (0..splits.test.len() as u64).collect::<Vec<_>>());

    let (status, err) = call(&app, "GET", &format!("/api/sessions/{id}/queue?policy=random"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "usage");
    assert!(err["message"].as_str().unwrap().contains("random"));
}

#[tokio::test]
async fn single_override_matches_engine() {
    let (model, splits) = trained();
    let test = &splits.test;
    let app = app(&model, &splits, EvalMode::Routed);
    let id = open_session(&app).await;
    let s = 5;
    let (_, before) = call(&app, "GET", &format!("/api/sessions/{id}/samples/{s}"), None).await;
    assert_eq!(before["budget_units"], 0);

    let (status, after) =
        call(&app, "POST", &format!("/api/sessions/{id}/samples/{s}/intervene"), Some(json!({"index": 3, "value": 1}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(after["budget_units"], 1);
    let mut ov = Overrides::none(test.len(), test.n_concepts());
    ov.set(s, 3, 1);
    let engine = model.predict(test.features(), Some(&ov)).unwrap();
    assert_eq!(bits(&floats(&after["final_logits"])), bits(engine.final_logits.row(s)));
    assert_eq!(after["concepts"][3]["override"], 1);
    assert_eq!(after["concepts"][2]["override"], Value::Null);
    assert_eq!(after["routing_score"].as_f64().unwrap(), engine.routing_scores.unwrap()[s]);

    // Undo restores the original prediction.
    let (status, undone) = call(&app, "DELETE", &format!("/api/sessions/{id}/samples/{s}/intervene/3"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(undone["budget_units"], 0);
    assert_eq!(undone["final_logits"], before["final_logits"]);
}

#[tokio::test]
async fn error_statuses() {
    let (model, splits) = trained();
    let app = app(&model, &splits, EvalMode::Routed);
    let id = open_session(&app).await;
    let n = splits.test.len();
    let intervene = format!("/api/sessions/{id}/samples/0/intervene");
    let cases: Vec<(&str, String, Option<Value>, StatusCode)> = vec![
        ("GET", "/api/sessions/999/queue".into(), None, StatusCode::NOT_FOUND),
        ("GET", "/api/sessions/abc".into(), None, StatusCode::NOT_FOUND),
        ("GET", format!("/api/sessions/{id}/samples/{n}"), None, StatusCode::NOT_FOUND),
        ("GET", "/api/metrics?session=42".into(), None, StatusCode::NOT_FOUND),
        ("GET", "/api/metrics".into(), None, StatusCode::BAD_REQUEST),
        ("GET", "/api/nothing".into(), None, StatusCode::NOT_FOUND),
        ("POST", intervene.clone(), Some(json!({"index": 0, "value": 2})), StatusCode::BAD_REQUEST),
        ("POST", intervene.clone(), Some(json!({"index": 99, "value": 0})), StatusCode::BAD_REQUEST),
        ("POST", intervene.clone(), Some(json!({"index": 0})), StatusCode::BAD_REQUEST),
        ("POST", intervene.clone(), Some(json!("nonsense")), StatusCode::BAD_REQUEST),
        ("DELETE", format!("{intervene}/0"), None, StatusCode::NOT_FOUND),
        ("DELETE", format!("{intervene}/x"), None, StatusCode::BAD_REQUEST),
    ];
    for (method, uri, body, expected) in cases {
        let (status, err) = call(&app, method, &uri, body).await;
        assert_eq!(status, expected, "{method} {uri}");
        assert!(err["code"].is_string() && err["message"].is_string(), "{method} {uri}: {err}");
    }

    let ok = call(&app, "POST", &intervene, Some(json!({"index": 1, "value": 0}))).await;
    assert_eq!(ok.0, StatusCode::OK);
    let again = call(&app, "POST", &intervene, Some(json!({"index": 1, "value": 0}))).await;
    assert_eq!(again.0, StatusCode::OK);
    assert_eq!(again.1["budget_units"], 1);
    let (status, err) = call(&app, "POST", &intervene, Some(json!({"index": 1, "value": 1}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["code"], "conflict");
}

#[tokio::test]
async fn sessions_are_independent() {
    let (model, splits) = trained();
    let app = app(&model, &splits, EvalMode::ForcedCb);
    let a = open_session(&app).await;
    let b = open_session(&app).await;
    assert_ne!(a, b);
    call(&app, "POST", &format!("/api/sessions/{a}/samples/2/intervene"), Some(json!({"index": 0, "value": 1}))).await;
    let (_, mb) = call(&app, "GET", &format!("/api/metrics?session={b}"), None).await;
    assert_eq!(mb["budget_units"], 0);
    assert_eq!(mb["accuracy"], mb["baseline_accuracy"]);
    let (_, ma) = call(&app, "GET", &format!("/api/metrics?session={a}"), None).await;
    assert_eq!(ma["budget_units"], 1);
    assert_eq!(ma["history"].as_array().unwrap().len(), 2);
}

/// Twenty seeded sequences of set / repeat / conflicting set / remove
/// actions, half under each eval mode. After every action the served
/// prediction, budget and session accuracy must equal the engine's.
#[tokio::test]
async fn scripted_sequences_keep_engine_and_budget_parity() {
    let (model, splits) = trained();
    let test = &splits.test;
    let (n_samples, n) = (test.len(), test.n_concepts());
    let apps = [app(&model, &splits, EvalMode::Routed), app(&model, &splits, EvalMode::ForcedCb)];
    let modes = [EvalMode::Routed, EvalMode::ForcedCb];

    for script in 0..20u64 {
        let which = (script % 2) as usize;
        let (app, mode) = (&apps[which], modes[which]);
        let id = open_session(app).await;
        let mut rng = syncb_core::seeded_rng(1000 + script);
        let pool: Vec<usize> = (0..3).map(|_| rng.random_range(0..n_samples)).collect();
        let mut mirror = Overrides::none(n_samples, n);
        for _ in 0..15 {
            let s = pool[rng.random_range(0..pool.len())];
            let i = rng.random_range(0..n);
            let base = format!("/api/sessions/{id}/samples/{s}/intervene");
            let (status, view) = if rng.random_bool(0.3) {
                let r = call(app, "DELETE", &format!("{base}/{i}"), None).await;
                let expected = if mirror.get(s, i).is_some() { StatusCode::OK } else { StatusCode::NOT_FOUND };
                assert_eq!(r.0, expected, "script {script}");
                if r.0 == StatusCode::OK {
                    mirror.clear(s, i);
                }
                r
            } else {
                let value = u8::from(rng.random_bool(0.5));
                let r = call(app, "POST", &base, Some(json!({"index": i, "value": value}))).await;
                match mirror.get(s, i) {
                    Some(v) if v != value => assert_eq!(r.0, StatusCode::CONFLICT, "script {script}"),
                    _ => {
                        assert_eq!(r.0, StatusCode::OK, "script {script}");
                        mirror.set(s, i, value);
                    }
                }
                r
            };
            let logits = intervened_logits(&model, test, &mirror, mode).unwrap();
            if status == StatusCode::OK {
                assert_eq!(bits(&floats(&view["final_logits"])), bits(logits.row(s)), "script {script}");
                assert_eq!(view["budget_units"].as_u64().unwrap() as usize, mirror.count());
                for c in 0..n {
                    assert_eq!(view["concepts"][c]["override"].as_u64().map(|v| v as u8), mirror.get(s, c));
                }
            }
            let (_, metrics) = call(app, "GET", &format!("/api/metrics?session={id}"), None).await;
            assert_eq!(metrics["budget_units"].as_u64().unwrap() as usize, mirror.count(), "script {script}");
            assert_eq!(metrics["accuracy"].as_f64().unwrap(), task_accuracy(&logits, test.labels()));
            let expected_fraction = mirror.count() as f64 / (n_samples * n) as f64;
            assert_eq!(metrics["budget_fraction"].as_f64().unwrap(), expected_fraction);
        }
    }
}
