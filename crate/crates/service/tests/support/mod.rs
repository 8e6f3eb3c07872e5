#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use bayescan::can::{synth_capture, AttackKind, FrameRecord, SynthProfile};
use bayescan::checkpoint::Checkpoint;
use bayescan::model::InitConfig;
use bayescan::variational::PriorSpec;
use bayescan::{CanFrame, Mode, ModelSpec, ModelState};
use bayescan_service::{router, Service, ServiceConfig};
use serde_json::{json, Value};
use std::sync::Arc;
use tower::ServiceExt;

/// Untrained model: near-uniform outputs, so the default policy flags
/// every window.
pub fn fresh_model(window_len: usize, mode: Mode) -> Checkpoint {
    let spec = ModelSpec::default_for(window_len, mode);
    let state = ModelState::init(spec, &InitConfig::default(), PriorSpec::default(), 3).unwrap();
    Checkpoint::new(state, None, Vec::new())
}

pub fn config(window_len: usize) -> ServiceConfig {
    ServiceConfig {
        window_len,
        mc_samples: 8,
        seed: 17,
        ..Default::default()
    }
}

pub fn app(cfg: ServiceConfig, model: Checkpoint) -> (Arc<Service>, Router) {
    let svc = Service::new(cfg, Some(model), Vec::new()).unwrap();
    let r = router(Arc::clone(&svc));
    (svc, r)
}

pub fn records(frames: &[CanFrame]) -> Vec<FrameRecord> {
    frames.iter().map(FrameRecord::from).collect()
}

/// Frames of a capture with one attack type injected throughout.
pub fn attack_frames(kind: AttackKind, count: usize, seed: u64) -> Vec<CanFrame> {
    let profile = SynthProfile::single(kind, count as f64 / 1500.0 * 1.2, 1000.0, 500.0);
    let mut frames = synth_capture(&profile, seed).unwrap();
    assert!(frames.len() >= count);
    frames.truncate(count);
    frames
}

pub fn frames_body(stream: &str, frames: &[CanFrame]) -> Value {
    json!({"v": 1, "stream": stream, "frames": records(frames)})
}

pub async fn call_raw(
    app: &Router,
    method: &str,
    uri: &str,
    body: Vec<u8>,
    token: Option<&str>,
) -> (StatusCode, Value) {
    let mut req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json");
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let res = app.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let bytes = body.map(|b| serde_json::to_vec(&b).unwrap()).unwrap_or_default();
    call_raw(app, method, uri, bytes, None).await
}

/// Poll a retrain job until it leaves the running state.
pub async fn wait_job(app: &Router, id: u64) -> Value {
    for _ in 0..6000 {
        let (s, v) = call(app, "GET", &format!("/v1/retrain/{id}"), None).await;
        assert_eq!(s, StatusCode::OK);
        if v["job"]["state"] != "running" {
            return v["job"].clone();
        }
        tokio::time::sleep(std::time::Duration::from_millis(50)).await;
    }
    panic!("retrain job {id} did not finish");
}

/// What one run of the ingest → flag → label → retrain → swap loop saw.
#[derive(Debug, Default)]
pub struct LoopReport {
    pub windows_scored: usize,
    pub flagged_items: usize,
    pub labeled: usize,
    pub version_before: u64,
    pub version_after: u64,
    pub job_state: String,
    /// Ingest calls that started and finished while the job was running.
    pub ingests_during_training: usize,
    pub ingest_failures: usize,
    /// Responses whose every prediction reproduces bit-exactly from the
    /// single model version the response names.
    pub responses_checked: usize,
    pub responses_consistent: usize,
    pub post_swap_version: u64,
}

impl LoopReport {
    pub fn passes(&self) -> bool {
        self.flagged_items >= 1
            && self.labeled >= 1
            && self.job_state == "succeeded"
            && self.version_after == self.version_before + 1
            && self.ingests_during_training >= 1
            && self.ingest_failures == 0
            && self.responses_checked > 0
            && self.responses_consistent == self.responses_checked
            && self.post_swap_version == self.version_after
    }
}

pub const LOOP_W: usize = 8;

/// Small Bayesian model trained briefly on a base set, plus that set.
pub fn trained_base(seed: u64) -> (Checkpoint, Vec<bayescan::FeatureWindow>) {
    use bayescan::dataset::{build_synthetic_dataset, SyntheticDatasetConfig};
    use bayescan::features::split_dataset;
    use bayescan::train::{train, AdamConfig, TrainConfig};
    let base = build_synthetic_dataset(&SyntheticDatasetConfig {
        windows_per_class: 60,
        window_len: LOOP_W,
        seed,
        ..Default::default()
    })
    .unwrap();
    let split = split_dataset(base.clone(), (0.8, 0.2, 0.0), seed).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 16,
        adam: AdamConfig {
            lr: 3e-3,
            ..Default::default()
        },
        seed,
        val_samples: 4,
        ..Default::default()
    };
    let spec = ModelSpec::default_for(LOOP_W, Mode::Bayesian);
    let state = ModelState::init(spec, &InitConfig::default(), PriorSpec::default(), seed).unwrap();
    let out = train(state, &split.train, &split.val, &cfg).unwrap();
    (Checkpoint::new(out.last, Some(cfg), out.metrics), base)
}

struct Posted {
    stream: String,
    frames: Vec<CanFrame>,
    response: Value,
}

/// Ingest a capture with injected attacks, label a flagged window, retrain
/// on base ∪ labeled while ingestion continues, and check the swap.
pub async fn service_loop_scenario(store: &std::path::Path) -> LoopReport {
    use bayescan::features::{LabelRule, StreamWindower};
    use bayescan::uncertainty::predict_batch;
    use bayescan::{FeatureWindow, WindowConfig};
    use std::collections::HashMap;

    let (model, base) = trained_base(21);
    let mut cfg = config(LOOP_W);
    cfg.stride = LOOP_W;
    cfg.mc_samples = 10;
    cfg.store_path = Some(store.to_path_buf());
    cfg.retrain.epochs = 15;
    let svc = Service::new(cfg.clone(), Some(model), base).unwrap();
    let app = router(Arc::clone(&svc));
    let mut report = LoopReport::default();
    let mut posted: Vec<Posted> = Vec::new();

    let capture = synth_capture(
        &SynthProfile::bursts(AttackKind::Fuzzing, 0.4, 1000.0, 600.0, 0.05, 0.05),
        5,
    )
    .unwrap();
    let (_, m) = call(&app, "GET", "/v1/model", None).await;
    report.version_before = m["version"].as_u64().unwrap();
    for chunk in capture.chunks(64) {
        let (s, v) = call(&app, "POST", "/v1/frames", Some(frames_body("bus", chunk))).await;
        if s != StatusCode::OK {
            report.ingest_failures += 1;
            continue;
        }
        posted.push(Posted {
            stream: "bus".into(),
            frames: chunk.to_vec(),
            response: v,
        });
    }
    let (_, q) = call(&app, "GET", "/v1/triage?status=pending&limit=500", None).await;
    report.flagged_items = q["total"].as_u64().unwrap() as usize;
    if let Some(item) = q["items"].as_array().and_then(|a| a.first()) {
        let id = item["id"].as_u64().unwrap();
        let truth = item["frames"]
            .as_array()
            .unwrap()
            .iter()
            .map(|f| f["class"].as_u64().unwrap())
            .find(|&c| c != 0)
            .unwrap_or(0);
        let (s, _) = call(
            &app,
            "POST",
            &format!("/v1/triage/{id}/label"),
            Some(json!({"v": 1, "label": truth, "engineer": "loop"})),
        )
        .await;
        if s == StatusCode::OK {
            report.labeled = svc.ledger().labeled.len();
        }
    }

    let (s, v) = call(&app, "POST", "/v1/retrain", Some(json!({"v": 1}))).await;
    if s != StatusCode::ACCEPTED {
        report.job_state = format!("not started: {s} {v}");
        return report;
    }
    let job_id = v["job"]["id"].as_u64().unwrap();
    let live = synth_capture(
        &SynthProfile::bursts(AttackKind::RpmSpoof, 2.0, 1000.0, 600.0, 0.05, 0.05),
        6,
    )
    .unwrap();
    let mut chunks = live.chunks(16);
    let job_running = |app: Router| async move {
        let (_, j) = call(&app, "GET", &format!("/v1/retrain/{job_id}"), None).await;
        j["job"]["state"] == "running"
    };
    loop {
        let before = job_running(app.clone()).await;
        let Some(chunk) = chunks.next() else { break };
        let (s, v) = call(&app, "POST", "/v1/frames", Some(frames_body("live", chunk))).await;
        let after = job_running(app.clone()).await;
        if s != StatusCode::OK {
            report.ingest_failures += 1;
            continue;
        }
        if before && after {
            report.ingests_during_training += 1;
        }
        posted.push(Posted {
            stream: "live".into(),
            frames: chunk.to_vec(),
            response: v,
        });
        if !after {
            break;
        }
    }
    let job = wait_job(&app, job_id).await;
    report.job_state = job["state"].as_str().unwrap_or("?").to_string();
    let (_, m) = call(&app, "GET", "/v1/model", None).await;
    report.version_after = m["version"].as_u64().unwrap();
    if let Some(chunk) = chunks.next() {
        let (s, v) = call(&app, "POST", "/v1/frames", Some(frames_body("live", chunk))).await;
        if s == StatusCode::OK {
            report.post_swap_version = v["model_version"].as_u64().unwrap();
            posted.push(Posted {
                stream: "live".into(),
                frames: chunk.to_vec(),
                response: v,
            });
        }
    }

    // Replay windowing locally and rescore each response with the model
    // version it names.
    let mut windowers: HashMap<String, StreamWindower> = HashMap::new();
    let mut models: HashMap<u64, ModelState> = HashMap::new();
    for p in &posted {
        let w = windowers.entry(p.stream.clone()).or_insert_with(|| {
            let wc = WindowConfig {
                window_len: LOOP_W,
                stride: LOOP_W,
                label_rule: LabelRule::AnyInjected,
            };
            StreamWindower::new(wc, 0).unwrap()
        });
        let windows: Vec<FeatureWindow> = p.frames.iter().filter_map(|f| w.push(*f)).map(|(win, _)| win).collect();
        let version = p.response["model_version"].as_u64().unwrap();
        let state = models.entry(version).or_insert_with(|| {
            Checkpoint::read_file(&store.join("models").join(format!("v{version}.json")))
                .unwrap()
                .state
        });
        let results = p.response["results"].as_array().unwrap();
        report.windows_scored += results.len();
        report.responses_checked += 1;
        if windows.len() != results.len() {
            continue;
        }
        if windows.is_empty() {
            report.responses_consistent += 1;
            continue;
        }
        let refs: Vec<&FeatureWindow> = windows.iter().collect();
        let expect = predict_batch(state, &refs, cfg.mc_samples, svc.mc_seed(version)).unwrap();
        let same = expect.iter().zip(results).all(|(e, r)| {
            let got: Vec<f64> = serde_json::from_value(r["prediction"]["mean"].clone()).unwrap();
            got.iter().zip(e.mean).all(|(a, b)| a.to_bits() == b.to_bits())
        });
        if same {
            report.responses_consistent += 1;
        }
    }
    report
}
