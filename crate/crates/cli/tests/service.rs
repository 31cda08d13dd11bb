use std::net::SocketAddr;
use std::sync::Arc;

use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use sketchlab::models::{RasterEncoderConfig, StrokeHierEncoder};
use sketchlab::retrieval::RetrievalModel;
use sketchlab::rng;
use sketchlab::sketch::{gen_synthetic_dataset, read_pgm, SynthConfig, SyntheticInstance};
use sketchlab_cli::service::{bind, AppState};
use sketchlab_cli::session::{ServiceModels, StrokeResponse};

fn dataset() -> Vec<SyntheticInstance> {
    gen_synthetic_dataset(&SynthConfig {
        seed: 4,
        n_classes: 4,
        n_instances_per_class: 3,
        noise_strokes_per_sketch: 1,
        ..Default::default()
    })
    .unwrap()
}

fn models(k: usize) -> ServiceModels {
    let mut r = rng::stream(9, &[]);
    let cfg = RasterEncoderConfig {
        channels: 8,
        dim: 8,
        ..Default::default()
    };
    let retrieval = RetrievalModel::new(cfg, &mut r);
    let selector = StrokeHierEncoder::new("selector", 8, &mut r);
    ServiceModels::new(retrieval, None, Some(selector), &dataset(), k).unwrap()
}

async fn start(models: ServiceModels) -> (String, Arc<AppState>) {
    let state = AppState::new(models);
    let (addr, server) = bind(state.clone(), SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
    tokio::spawn(server);
    (format!("http://{addr}"), state)
}

async fn new_session(c: &Client, base: &str, body: Value) -> u64 {
    let r = c.post(format!("{base}/session")).json(&body).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    r.json::<Value>().await.unwrap()["session_id"].as_u64().unwrap()
}

async fn stroke(c: &Client, base: &str, id: u64, points: &[[f64; 2]]) -> reqwest::Response {
    c.post(format!("{base}/session/{id}/stroke")).json(&json!({ "points": points })).send().await.unwrap()
}

fn strokes_of(inst: &SyntheticInstance) -> Vec<Vec<[f64; 2]>> {
    inst.sketch.polylines().into_iter().filter(|s| s.len() >= 2).collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_and_gallery() {
    let (base, state) = start(models(5)).await;
    let c = Client::new();
    assert_eq!(c.get(format!("{base}/healthz")).send().await.unwrap().status(), StatusCode::OK);
    let r = c.get(format!("{base}/gallery/2.pgm")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let photo = read_pgm(&r.bytes().await.unwrap()[..]).unwrap();
    assert_eq!(photo.dims(), state.models.photo(2).unwrap().dims());
    for bad in ["999.pgm", "2.png", "x.pgm"] {
        assert_eq!(c.get(format!("{base}/gallery/{bad}")).send().await.unwrap().status(), StatusCode::NOT_FOUND);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn first_stroke_shape_and_errors() {
    let data = dataset();
    let (base, _) = start(models(5)).await;
    let c = Client::new();
    let id = new_session(&c, &base, json!({})).await;
    let s = strokes_of(&data[0]);
    let r: Value = stroke(&c, &base, id, &s[0]).await.json().await.unwrap();
    assert_eq!(r["topk"].as_array().unwrap().len(), 5.min(data.len()));
    assert!(r["rank_percentile"].is_null());
    assert!(r["retrievability"].is_f64());
    assert_eq!(r["stroke_select_prob"].as_array().unwrap().len(), 1);

    let wide = new_session(&c, &base, json!({})).await;
    let (wbase, _) = start(models(50)).await;
    let wid = new_session(&c, &wbase, json!({})).await;
    let r: Value = stroke(&c, &wbase, wid, &s[0]).await.json().await.unwrap();
    assert_eq!(r["topk"].as_array().unwrap().len(), data.len());

    assert_eq!(stroke(&c, &base, 12345, &s[0]).await.status(), StatusCode::NOT_FOUND);
    assert_eq!(stroke(&c, &base, wide, &[[0.5, 0.5]]).await.status(), StatusCode::BAD_REQUEST);
    assert_eq!(stroke(&c, &base, wide, &[[0.5, 0.5], [1.5, 0.2]]).await.status(), StatusCode::BAD_REQUEST);
    let raw = c.post(format!("{base}/session/{wide}/stroke")).body("{\"points\": [[0.1]]}").send().await.unwrap();
    assert_eq!(raw.status(), StatusCode::BAD_REQUEST);
    let raw = c.post(format!("{base}/session/{wide}/stroke")).body("not json").send().await.unwrap();
    assert_eq!(raw.status(), StatusCode::BAD_REQUEST);
    let del = c.delete(format!("{base}/session/{wide}/stroke")).send().await.unwrap();
    assert_eq!(del.status(), StatusCode::CONFLICT);
    let del = c.delete(format!("{base}/session/777/stroke")).send().await.unwrap();
    assert_eq!(del.status(), StatusCode::NOT_FOUND);
    let bad_target = c.post(format!("{base}/session")).json(&json!({"target": 999})).send().await.unwrap();
    assert_eq!(bad_target.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn undo_then_redraw_gives_identical_response() {
    let data = dataset();
    let (base, _) = start(models(5)).await;
    let c = Client::new();
    let target = data[5].instance_id;
    let id = new_session(&c, &base, json!({ "target": target })).await;
    let s = strokes_of(&data[5]);
    let first: StrokeResponse = stroke(&c, &base, id, &s[0]).await.json().await.unwrap();
    let second: StrokeResponse = stroke(&c, &base, id, &s[1]).await.json().await.unwrap();
    let undo: Value = c.delete(format!("{base}/session/{id}/stroke")).send().await.unwrap().json().await.unwrap();
    assert_eq!(undo["strokes"], 1);
    assert_eq!(serde_json::from_value::<StrokeResponse>(undo["last"].clone()).unwrap(), first);
    let again: StrokeResponse = stroke(&c, &base, id, &s[1]).await.json().await.unwrap();
    assert_eq!(again, second);
    assert_eq!(again.stroke_select_prob.len(), 2);
    assert!(again.rank.is_some());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_replay_the_offline_trace() {
    let data = dataset();
    let (base, state) = start(models(5)).await;
    let c = Client::new();
    let mut handles = Vec::new();
    for inst in data.iter().take(6) {
        let (c, base, state) = (c.clone(), base.clone(), state.clone());
        let (target, strokes) = (inst.instance_id, strokes_of(inst));
        handles.push(tokio::spawn(async move {
            let id = new_session(&c, &base, json!({ "target": target })).await;
            let mut online = Vec::new();
            for s in &strokes {
                online.push(stroke(&c, &base, id, s).await.json::<StrokeResponse>().await.unwrap());
            }
            let offline = state.models.offline_trace(&strokes, Some(target)).unwrap();
            (online, offline)
        }));
    }
    for h in handles {
        let (online, offline) = h.await.unwrap();
        assert!(!online.is_empty());
        assert_eq!(online, offline);
    }
}
