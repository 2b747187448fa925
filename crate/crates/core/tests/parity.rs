//! Numerical parity against reference outputs dumped by
//! `tests/fixtures/gen_fixtures.py` from the PyTorch implementations.

use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{Device, Tensor};
use decay_bench::detect::mtcnn::{Mtcnn, MtcnnConfig, MtcnnNets};
use decay_bench::detect::FaceDetector;
use decay_bench::frame::resnet::{self, Pass};
use decay_bench::nn::ParamStore;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn load(name: &str) -> HashMap<String, Tensor> {
    candle_core::safetensors::load(fixture(name), &Device::Cpu).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.dims(), b.dims());
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap()
}

fn prefixed_store(tensors: &HashMap<String, Tensor>) -> ParamStore {
    let mut store = ParamStore::new();
    for (k, t) in tensors {
        let Some(name) = k.strip_prefix("model.") else { continue };
        if name.ends_with("running_mean") || name.ends_with("running_var") {
            store.insert_buffer(name, t.clone());
        } else {
            store.insert_param(name, t).unwrap();
        }
    }
    store
}

type Stage = fn(&MtcnnNets, &Tensor) -> decay_bench::Result<(Tensor, Tensor)>;

#[test]
fn mtcnn_networks_match_reference() {
    let t = load("mtcnn_parity.safetensors");
    let det = Mtcnn::packaged(MtcnnConfig::default()).unwrap();
    let stages: [(&str, Stage); 3] = [("pnet", |n, x| n.pnet(x)), ("rnet", |n, x| n.rnet(x)), ("onet", |n, x| n.onet(x))];
    for (name, run) in stages {
        let (reg, prob) = run(det.nets(), &t[&format!("{name}.input")]).unwrap();
        assert!(max_abs_diff(&reg, &t[&format!("{name}.reg")]) < 1e-4, "{name} regression");
        assert!(max_abs_diff(&prob, &t[&format!("{name}.prob")]) < 1e-5, "{name} probabilities");
    }
}

#[test]
fn mtcnn_detects_reference_face() {
    #[derive(serde::Deserialize)]
    struct Expected {
        boxes: Vec<[f32; 4]>,
        probs: Vec<f32>,
    }
    let expected: Expected =
        serde_json::from_str(&std::fs::read_to_string(fixture("astronaut_256_mtcnn.json")).unwrap()).unwrap();
    let img = image::open(fixture("astronaut_256.png")).unwrap().to_rgb8();
    let found = Mtcnn::packaged(MtcnnConfig::default()).unwrap().detect(&img).unwrap();
    assert_eq!(found.len(), expected.boxes.len());
    for (d, (b, p)) in found.iter().zip(expected.boxes.iter().zip(&expected.probs)) {
        for k in 0..4 {
            assert!((d.bbox[k] - b[k]).abs() < 0.5, "box {:?} vs {:?}", d.bbox, b);
        }
        assert!((d.confidence - p).abs() < 1e-4);
    }
}

#[test]
fn narrow_resnet_matches_reference() {
    let t = load("resnet_w4.safetensors");
    let store = prefixed_store(&t);
    let x = &t["input"];

    let mut pass = Pass::eval(&store);
    let feats = pass.features(x).unwrap();
    let logits = pass.head(&feats).unwrap();
    assert!(max_abs_diff(&feats, &t["embedding"]) < 1e-4);
    assert!(max_abs_diff(&logits, &t["logits"]) < 1e-4);

    let mut pass = Pass { store: &store, batch_stats: [true; 5], updates: Vec::new() };
    let feats = pass.features(x).unwrap();
    let logits = pass.head(&feats).unwrap();
    // batch statistics over two samples at 1x1 resolution in the last stage
    // amplify float32 round-off, hence the looser bound
    assert!(max_abs_diff(&logits, &t["train_logits"]) < 5e-3);
    assert_eq!(resnet::embedding_dim(4), 128);
}

/// Needs a dump from `gen_fixtures.py --facenet <path>`, pointed to by
/// `DECAY_BENCH_FACENET_PARITY`.
#[test]
#[ignore]
fn facenet_matches_reference() {
    let path = std::env::var("DECAY_BENCH_FACENET_PARITY").expect("DECAY_BENCH_FACENET_PARITY not set");
    let bytes = std::fs::read(&path).unwrap();
    let model = decay_bench::frame::baseline::FaceNet::from_safetensors_bytes(&bytes).unwrap();
    let t = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu).unwrap();
    let emb = model.forward(&t["input"]).unwrap();
    assert!(max_abs_diff(&emb, &t["embedding"]) < 1e-4);
}

#[test]
fn bidirectional_gru_matches_reference() {
    use decay_bench::temporal::gru::{self, GruShape};
    let t = load("gru_bidir.safetensors");
    let mut store = ParamStore::new();
    for (k, v) in &t {
        if k.starts_with("gru.") {
            store.insert_param(k.as_str(), v).unwrap();
        }
    }
    let shape = GruShape { input_dim: 6, hidden_dim: 5, layers: 2, bidirectional: true };
    let (out, h_n) = gru::forward(&t["input"], &store, "gru", shape, None).unwrap();
    assert!(max_abs_diff(&out, &t["output"]) < 1e-5);
    assert!(max_abs_diff(&h_n, &t["h_n"]) < 1e-5);
}
