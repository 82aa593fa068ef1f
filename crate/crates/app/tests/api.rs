use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dext::api::router;
use dext::ops::load_model;
use dext::session::Session;
use dext_core::image::Image;
use dext_core::saliency::{Baseline, MethodParams};
use dext_core::scene::{generate, SceneConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Harness {
    _dir: tempfile::TempDir,
    session: Arc<Session>,
    app: Router,
}

fn harness() -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let mut session = Session::open(dir.path(), Arc::new(load_model(None).unwrap())).unwrap();
    session.study_params =
        MethodParams { ig_steps: 8, ig_baseline: Baseline::Black, sg_samples: 2, sg_noise: 0.1, seed: 0 };
    let session = Arc::new(session);
    Harness { app: router(session.clone()), session, _dir: dir }
}

fn scene_png(seed: u64) -> Vec<u8> {
    generate(&SceneConfig::default(), seed).image.to_png().unwrap()
}

async fn send(app: &Router, method: &str, uri: &str, body: Body, content_type: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", content_type).body(body).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, "GET", uri, Body::empty(), "application/json").await
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b) = send(app, "POST", uri, Body::from(body.to_string()), "application/json").await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn upload(app: &Router, png: Vec<u8>) -> String {
    let (s, b) = send(app, "POST", "/images", Body::from(png), "image/png").await;
    assert_eq!(s, StatusCode::CREATED);
    let v: Value = serde_json::from_slice(&b).unwrap();
    v["image_id"].as_str().unwrap().to_string()
}

/// First scene seed whose image has at least one detection.
async fn upload_with_detections(app: &Router) -> (String, Vec<Value>) {
    for seed in 0.. {
        let id = upload(app, scene_png(seed)).await;
        let (_, body) = get(app, &format!("/images/{id}/detections")).await;
        let dets: Vec<Value> = serde_json::from_slice(&body).unwrap();
        if !dets.is_empty() {
            return (id, dets);
        }
    }
    unreachable!()
}

#[tokio::test]
async fn upload_is_content_addressed() {
    let h = harness();
    let a = upload(&h.app, scene_png(1)).await;
    let b = upload(&h.app, scene_png(1)).await;
    let c = upload(&h.app, scene_png(2)).await;
    assert_eq!(a, b);
    assert_ne!(a, c);
    let (s, png) = get(&h.app, &format!("/images/{a}/image.png")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(png, scene_png(1));
}

#[tokio::test]
async fn upload_resizes_to_model_input() {
    let h = harness();
    let big = Image::filled(64, 48, 0.25).to_png().unwrap();
    let (s, b) = send(&h.app, "POST", "/images", Body::from(big), "image/png").await;
    assert_eq!(s, StatusCode::CREATED);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["resized"], true);
    assert_eq!((v["original_height"].as_u64(), v["original_width"].as_u64()), (Some(64), Some(48)));
    assert_eq!(v["height"], 32);
}

#[tokio::test]
async fn bad_png_is_unprocessable() {
    let h = harness();
    let (s, b) = send(&h.app, "POST", "/images", Body::from("not a png"), "image/png").await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert!(v["error"].as_str().unwrap().contains("png"));
}

#[tokio::test]
async fn unknown_ids_are_not_found() {
    let h = harness();
    assert_eq!(get(&h.app, "/images/deadbeef/detections").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&h.app, "/images/../etc/detections").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&h.app, "/explanations/00ff/heatmap.png").await.0, StatusCode::NOT_FOUND);
    let (s, _) =
        post_json(&h.app, "/manipulate", json!({"saliency_id": "abcd", "cause": "deletion", "fraction": 0.5})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post_json(
        &h.app,
        "/explanations",
        json!({"image_id": "abcd", "detection": 0, "decision": "class", "method": "gbp"}),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn detections_are_idempotent() {
    let h = harness();
    let (id, dets) = upload_with_detections(&h.app).await;
    let first = get(&h.app, &format!("/images/{id}/detections")).await.1;
    let second = get(&h.app, &format!("/images/{id}/detections")).await.1;
    assert_eq!(first, second);
    let d = &dets[0];
    assert_eq!(d["box"].as_array().unwrap().len(), 4);
    assert_eq!(d["logits"].as_array().unwrap().len(), 5);
    assert!(d["class_id"].as_u64().unwrap() >= 1);
}

#[tokio::test]
async fn explanation_validation() {
    let h = harness();
    let (id, dets) = upload_with_detections(&h.app).await;
    let bad_method = json!({"image_id": id, "detection": 0, "decision": "class", "method": "lime"});
    let (s, v) = post_json(&h.app, "/explanations", bad_method).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("method"));
    let bad_decision = json!({"image_id": id, "detection": 0, "decision": "width", "method": "gbp"});
    assert_eq!(post_json(&h.app, "/explanations", bad_decision).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let bad_params =
        json!({"image_id": id, "detection": 0, "decision": "class", "method": "ig", "params": {"ig_steps": 0}});
    assert_eq!(post_json(&h.app, "/explanations", bad_params).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let missing = json!({"image_id": id, "detection": dets.len(), "decision": "class", "method": "gbp"});
    assert_eq!(post_json(&h.app, "/explanations", missing).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn explain_then_slide() {
    let h = harness();
    let (id, dets) = upload_with_detections(&h.app).await;
    let req =
        json!({"image_id": id, "detection": 0, "decision": "y_max", "method": "SGBP", "params": {"sg_samples": 3}});
    let (s, v) = post_json(&h.app, "/explanations", req.clone()).await;
    assert_eq!(s, StatusCode::OK);
    let sid = v["saliency_id"].as_str().unwrap().to_string();
    assert_eq!(post_json(&h.app, "/explanations", req).await.1["saliency_id"], sid.as_str());

    let (s, heat) = get(&h.app, v["heatmap_url"].as_str().unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&heat[1..4], b"PNG");

    let (s, m) =
        post_json(&h.app, "/manipulate", json!({"saliency_id": sid, "cause": "deletion", "fraction": 0.0})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(m["detections"], Value::Array(dets.clone()));
    assert_eq!(m["pixels_manipulated"], 0);
    let (_, img) = get(&h.app, m["image_url"].as_str().unwrap()).await;
    assert_eq!(img, get(&h.app, &format!("/images/{id}/image.png")).await.1);

    let (s, m) =
        post_json(&h.app, "/manipulate", json!({"saliency_id": sid, "cause": "deletion", "fraction": 0.8})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(m["pixels_manipulated"], 819);
    assert!(m["detections"].is_array());

    let (s, m) =
        post_json(&h.app, "/manipulate", json!({"saliency_id": sid, "cause": "insertion", "fraction": 1.0})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(m["detections"], Value::Array(dets));

    let bad = json!({"saliency_id": sid, "cause": "deletion", "fraction": 1.5});
    assert_eq!(post_json(&h.app, "/manipulate", bad).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let bad = json!({"saliency_id": sid, "cause": "erase", "fraction": 0.5});
    assert_eq!(post_json(&h.app, "/manipulate", bad).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn evaluation_payload() {
    let h = harness();
    let (id, dets) = upload_with_detections(&h.app).await;
    let req = json!({"image_id": id, "detection": 0, "decision": "class", "method": "gbp", "cause": "deletion", "effect": "C", "setting": "S"});
    let (s, v) = post_json(&h.app, "/evaluations", req.clone()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["code"], "DCS");
    let points = v["points"].as_array().unwrap();
    assert_eq!(points.len(), 101);
    assert_eq!(points[0][1].as_f64().unwrap() as f32, dets[0]["score"].as_f64().unwrap() as f32);
    let csv = v["csv"].as_str().unwrap();
    assert_eq!(csv.lines().count(), 102);
    assert_eq!(post_json(&h.app, "/evaluations", req).await.1, v);

    let bad = json!({"image_id": id, "detection": 0, "decision": "class", "method": "gbp", "cause": "deletion", "effect": "Q", "setting": "S"});
    assert_eq!(post_json(&h.app, "/evaluations", bad).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn visualization_overlay() {
    let h = harness();
    let (id, _) = upload_with_detections(&h.app).await;
    let uri = format!("/visualizations?image_id={id}&movis_method=convex_polygon&decision=class&method=gbp");
    let (s, a) = get(&h.app, &uri).await;
    assert_eq!(s, StatusCode::OK);
    let overlay = Image::from_png(&a).unwrap();
    assert_eq!((overlay.height(), overlay.width()), (256, 256));
    assert_eq!(get(&h.app, &uri).await.1, a);
    let bad = format!("/visualizations?image_id={id}&movis_method=heatmap&decision=class&method=gbp");
    assert_eq!(get(&h.app, &bad).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn study_round_trip() {
    let h = harness();
    let (s, _) = post_json(&h.app, "/study/next", json!({})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    upload_with_detections(&h.app).await;

    let (s, q) = post_json(&h.app, "/study/next", json!({})).await;
    assert_eq!(s, StatusCode::OK);
    let text = q.to_string();
    for name in ["GBP", "SGBP", "\"IG\"", "SIG", "method"] {
        assert!(!text.contains(name), "question leaks {name}: {text}");
    }
    let qid = q["question_id"].as_str().unwrap().to_string();
    let record = h.session.question(&qid).unwrap();
    let (a, b) = record.unblind();
    assert_ne!(a, b);

    let (s, r) = post_json(&h.app, "/study/answer", json!({"question_id": qid, "score": 2})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["robot_a"], a.name());
    assert_eq!(r["robot_b"], b.name());
    // both at 1000 before the first game: K * (1 - 0.5)
    assert_eq!(r["rating_change"].as_f64().unwrap(), 16.0);
    let (s, _) = post_json(&h.app, "/study/answer", json!({"question_id": qid, "score": 1})).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, q2) = post_json(&h.app, "/study/next", json!({})).await;
    assert_eq!(s, StatusCode::OK);
    assert_ne!(q2["question_id"], q["question_id"]);
    let (s, _) = post_json(&h.app, "/study/answer", json!({"question_id": q2["question_id"], "score": 3})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = post_json(&h.app, "/study/answer", json!({"question_id": "ffff", "score": 1})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, v) = post_json(&h.app, "/study/vote", json!({"option": "none"})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["none"], 1);
    assert_eq!(
        post_json(&h.app, "/study/vote", json!({"option": "heatmap"})).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );

    let (s, body) = get(&h.app, "/study/ranking").await;
    assert_eq!(s, StatusCode::OK);
    let ranking: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(ranking["games"], 1);
    assert_eq!(ranking["ratings"][0]["method"], a.name());
    assert_eq!(ranking["ratings"][0]["rating"].as_f64().unwrap(), 1016.0);
    assert_eq!(ranking["votes"]["none"], 1);
    let total: f64 = ranking["ratings"].as_array().unwrap().iter().map(|r| r["rating"].as_f64().unwrap()).sum();
    assert!((total - 4000.0).abs() < 1e-9);
}

#[tokio::test]
async fn ranking_before_any_game() {
    let h = harness();
    let (s, body) = get(&h.app, "/study/ranking").await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["games"], 0);
    assert_eq!(v["ratings"].as_array().unwrap().len(), 4);
}
