//! Acceptance criteria A1-A8. Each test prints one `A<n> PASS|FAIL` line
//! straight to stdout (bypassing capture) before asserting.
//!
//! A3 and A8 run the whole synthetic pipeline and take minutes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{Device, Tensor};
use decay_bench::detect::{BlobConfig, DetectorConfig};
use decay_bench::embeddings::EmbeddingSequence;
use decay_bench::eval::{auroc, confusion_metrics, pca_features, pr_curve};
use decay_bench::extraction::{build_frame_dataset, ExtractionConfig, FrameCache, FrameIndex};
use decay_bench::finetune::{finetune_frame_model, FinetunePlan};
use decay_bench::frame::resnet::{self, Pass};
use decay_bench::frame::{aggregate_video, predict_frames, AugmentationPolicy, FrameModel, FrameModelConfig, FrameTrainData, Init};
use decay_bench::manifest::{
    kfold_identity_splits, split_identities, subset_by_identity_fraction, ClassScheme, DatasetManifest, Label, Split,
    Technique, VideoRecord,
};
use decay_bench::nn::softmax_rows;
use decay_bench::pipeline::{Experiment, ExperimentConfig, Stage, StageRecord};
use decay_bench::rng::{round_half_up, SeededRng};
use decay_bench::synthetic::{generate_dataset, generate_decay_study, DecayStudy, SyntheticConfig};
use decay_bench::temporal::{mask_features, masked_columns, standardize_length, Mode};
use nalgebra::DMatrix;
use ndarray::Array2;

fn report(id: &str, pass: bool, detail: &str) {
    let line = format!("{id} {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().write_all(line.as_bytes());
}

fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut count, mut pairs) = (0.0, 0usize);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1;
                if si > sj {
                    count += 1.0;
                } else if si == sj {
                    count += 0.5;
                }
            }
        }
    }
    count / pairs as f64 * 100.0
}

#[test]
fn a1_metric_oracles() {
    let start = Instant::now();
    let mut rng = SeededRng::new(101);
    let names: Vec<String> = ["real", "fake", "c2"].iter().map(|s| s.to_string()).collect();
    let mut failures = Vec::new();
    for case in 0..1000 {
        let n = 2 + rng.below(199) as usize;
        let coarse = rng.bernoulli(0.5);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> =
            (0..n).map(|_| if coarse { (rng.below(11) as f64) / 10.0 } else { rng.unit() }).collect();
        let got = auroc(&scores, &labels).unwrap();
        if got != brute_auroc(&scores, &labels) {
            failures.push(format!("auroc case {case}"));
        }

        let k = 2 + (case % 2);
        let truth: Vec<usize> = (0..n).map(|_| rng.below(k as u64) as usize).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.below(k as u64) as usize).collect();
        let m = confusion_metrics(&truth, &pred, &names[..k]).unwrap();
        let mut naive = vec![vec![0usize; k]; k];
        for (t, p) in truth.iter().zip(&pred) {
            naive[*t][*p] += 1;
        }
        let correct = truth.iter().zip(&pred).filter(|(t, p)| t == p).count();
        if m.confusion != naive || (m.accuracy - 100.0 * correct as f64 / n as f64).abs() > 1e-9 {
            failures.push(format!("confusion case {case}"));
        }
        for c in 0..k {
            let tp = naive[c][c] as f64;
            let col: usize = (0..k).map(|t| naive[t][c]).sum();
            let row: usize = naive[c].iter().sum();
            let p = if col == 0 { 0.0 } else { 100.0 * tp / col as f64 };
            let r = if row == 0 { 0.0 } else { 100.0 * tp / row as f64 };
            if (m.per_class[c].precision - p).abs() > 1e-9 || (m.per_class[c].recall - r).abs() > 1e-9 {
                failures.push(format!("per-class case {case}"));
            }
        }

        let curve = pr_curve(&scores, &labels).unwrap();
        let last = curve.last().unwrap();
        let prevalence = labels.iter().filter(|l| **l).count() as f64 / n as f64;
        if (last.recall - 1.0).abs() > 1e-9 || (last.precision - prevalence).abs() > 1e-9 {
            failures.push(format!("pr endpoint case {case}"));
        }
        if curve.windows(2).any(|w| w[1].recall < w[0].recall) {
            failures.push(format!("pr recall order case {case}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 30.0;
    report("A1", pass, &format!("metric oracles on 1000 instances, {} mismatches, {secs:.1}s", failures.len()));
    assert!(pass, "{failures:?}");
}

fn random_manifest(rng: &mut SeededRng) -> DatasetManifest {
    let n_ids = 2 + rng.below(60) as usize;
    let mut records = Vec::new();
    for i in 0..n_ids {
        let split = if rng.bernoulli(0.2) { Split::Test } else { Split::Train };
        for v in 0..1 + rng.below(5) {
            let fake = rng.bernoulli(0.5);
            records.push(VideoRecord {
                video_id: format!("p{i}-v{v}"),
                path: format!("p{i}-v{v}.y4m").into(),
                label: if fake { Label::Fake } else { Label::Real },
                technique: if fake { Technique::FaceSwap } else { Technique::Real },
                engine: if fake { "e".into() } else { "none".into() },
                identity_id: format!("p{i}"),
                dataset_version: "v".into(),
                split,
            });
        }
    }
    DatasetManifest::new(records, ClassScheme::Binary).unwrap()
}

#[test]
fn a2_protocol_invariants() {
    let start = Instant::now();
    let mut rng = SeededRng::new(202);
    let mut failures = Vec::new();
    for case in 0..500 {
        let m = random_manifest(&mut rng);
        let train_ids: BTreeSet<String> = m.partition(Split::Train).identities().into_iter().collect();
        let n = train_ids.len();
        let seed = rng.below(1000);

        if n >= 2 {
            let frac = rng.uniform(0.05, 0.95);
            let s = split_identities(&m, frac, seed).unwrap();
            let union: BTreeSet<String> = s.train_identities.union(&s.held_identities).cloned().collect();
            if !s.train_identities.is_disjoint(&s.held_identities) || union != train_ids {
                failures.push(format!("split case {case}"));
            }
            if s.held_identities.len() != round_half_up(frac * n as f64).clamp(1, n - 1) {
                failures.push(format!("split size case {case}"));
            }
        }

        let all = m.identities().len();
        let f = rng.uniform(0.01, 1.0);
        let sub = subset_by_identity_fraction(&m, f, seed).unwrap();
        let kept = sub.identities();
        if kept.len() != round_half_up(f * all as f64).clamp(1, all) {
            failures.push(format!("subset size case {case}"));
        }
        let kept_set: BTreeSet<&String> = kept.iter().collect();
        let expected_videos = m.records.iter().filter(|r| kept_set.contains(&r.identity_id)).count();
        if sub.len() != expected_videos {
            failures.push(format!("subset videos case {case}"));
        }

        let k = 2 + rng.below(4) as usize;
        if n >= k {
            let folds = kfold_identity_splits(&m, k, seed).unwrap();
            let mut seen = BTreeSet::new();
            for fold in &folds {
                if !fold.train_identities.is_disjoint(&fold.held_identities) {
                    failures.push(format!("fold overlap case {case}"));
                }
                for id in &fold.held_identities {
                    if !seen.insert(id.clone()) {
                        failures.push(format!("fold repeat case {case}"));
                    }
                }
            }
            let sizes: Vec<usize> = folds.iter().map(|f| f.held_identities.len()).collect();
            if seen != train_ids || sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 {
                failures.push(format!("fold partition case {case}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 30.0;
    report("A2", pass, &format!("protocol invariants on 500 manifests, {} violations, {secs:.1}s", failures.len()));
    assert!(pass, "{failures:?}");
}

#[test]
fn a4_standardization_and_masking() {
    let start = Instant::now();
    let mut rng = SeededRng::new(404);
    let mut failures = Vec::new();
    for case in 0..1000 {
        let t = 1 + rng.below(80) as usize;
        let target = 1 + rng.below(80) as usize;
        let d = 1 + rng.below(24) as usize;
        let seq = EmbeddingSequence {
            video_id: format!("v{case}"),
            embeddings: Array2::from_shape_fn((t, d), |_| rng.normal() as f32),
            label: 0,
            identity_id: "p".into(),
        };
        let seed = rng.below(100);
        let eval = standardize_length(&seq, target, Mode::Eval, seed).unwrap();
        let again = standardize_length(&seq, target, Mode::Eval, seed + 1).unwrap();
        let train = standardize_length(&seq, target, Mode::Train, seed).unwrap();
        if eval.len() != target || train.len() != target || eval.embeddings != again.embeddings {
            failures.push(format!("length/determinism case {case}"));
        }
        for i in 0..target {
            let src = i.min(t - 1);
            if eval.embeddings.row(i) != seq.embeddings.row(src) {
                failures.push(format!("eval rows case {case}"));
                break;
            }
        }
        if t == target && (train.embeddings != seq.embeddings || eval.embeddings != seq.embeddings) {
            failures.push(format!("identity case {case}"));
        }

        let epoch = rng.below(50) as usize;
        let masked = mask_features(&eval, 0.1, seed, epoch);
        let cols = masked_columns(&eval.video_id, d, 0.1, seed, epoch);
        if cols.len() != round_half_up(0.1 * d as f64) || masked.embeddings != mask_features(&eval, 0.1, seed, epoch).embeddings {
            failures.push(format!("mask count/reproducibility case {case}"));
        }
        for j in 0..d {
            let col = masked.embeddings.column(j);
            let ok = if cols.contains(&j) {
                col.iter().all(|v| v.to_bits() == 0)
            } else {
                col.iter().zip(eval.embeddings.column(j)).all(|(a, b)| a.to_bits() == b.to_bits())
            };
            if !ok {
                failures.push(format!("mask columns case {case}"));
                break;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 10.0;
    report("A4", pass, &format!("standardize/mask contracts on 1000 pairs, {} violations, {secs:.1}s", failures.len()));
    assert!(pass, "{failures:?}");
}

/// Small frame dataset extracted from synthetic videos.
fn tiny_frames(root: &Path, identities: usize) -> (DatasetManifest, FrameIndex) {
    let synth = SyntheticConfig { identities, videos_per_identity: 2, frames: 3, ..Default::default() };
    let manifest = generate_dataset(&root.join("data"), &synth).unwrap();
    let extraction = ExtractionConfig {
        box_side: 40,
        margin: 4,
        max_frames: 3,
        detector: DetectorConfig::ForegroundBlob(BlobConfig::default()),
        ..Default::default()
    };
    let (index, _) = build_frame_dataset(&manifest, &extraction, &FrameCache::new(root.join("cache")), 1).unwrap();
    (manifest, index)
}

fn tiny_model_config(frozen: &[u8]) -> FrameModelConfig {
    FrameModelConfig {
        width: 4,
        input_size: 32,
        init: Init::Random,
        frozen_blocks: frozen.iter().copied().collect(),
        learning_rate: 1e-2,
        max_epochs: 2,
        early_stop_patience: 10,
        batch_size: 8,
        ..Default::default()
    }
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap().into_iter().map(f32::to_bits).collect()
}

fn changed(before: &BTreeMap<String, Tensor>, after: &BTreeMap<String, Tensor>) -> BTreeSet<String> {
    before.iter().filter(|(k, v)| bits(v) != bits(&after[*k])).map(|(k, _)| k.clone()).collect()
}

#[test]
fn a5_freeze_contracts() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (manifest, index) = tiny_frames(dir.path(), 6);
    let split = split_identities(&manifest.partition(Split::Train), 0.25, 0).unwrap();
    let train = index.restrict_to_identities(&split.train_identities);
    let val = index.restrict_to_identities(&split.held_identities);
    let data = FrameTrainData { train: &train, val: &val, cache_root: &dir.path().join("cache"), train_manifest_hash: String::new() };
    let augmentation = AugmentationPolicy::disabled();

    let mut model = FrameModel::build(&tiny_model_config(&[1, 2])).unwrap();
    let init = model.store().snapshot().unwrap();
    let trained = decay_bench::frame::train_model(&mut model, &data, &augmentation).unwrap();
    assert_eq!(trained.provenance.epochs_trained, 2);
    let after_train = model.store().snapshot().unwrap();
    let moved = changed(&init, &after_train);
    let frozen_moved: Vec<&String> = moved.iter().filter(|k| resnet::block_of(k) <= 2).collect();
    let trainable_moved = moved.iter().any(|k| resnet::block_of(k) >= 3);

    let plan = FinetunePlan { recipe: tiny_model_config(&[]), learning_rate: 1e-2, ..Default::default() };
    let mut tuned = FrameModel::from_checkpoint(&model.to_checkpoint(Default::default()).unwrap()).unwrap();
    tuned.config.max_epochs = 2;
    let before_ft = tuned.store().snapshot().unwrap();
    finetune_frame_model(&mut tuned, &data, &plan, &augmentation).unwrap();
    let moved_ft = changed(&before_ft, &tuned.store().snapshot().unwrap());
    let outside: Vec<&String> = moved_ft.iter().filter(|k| resnet::block_of(k) < 4).collect();
    let head_moved = moved_ft.iter().any(|k| k.starts_with("fc."));
    let block4_moved = moved_ft.iter().any(|k| resnet::block_of(k) == 4);

    let secs = start.elapsed().as_secs_f64();
    let pass = frozen_moved.is_empty() && trainable_moved && outside.is_empty() && head_moved && block4_moved && secs < 300.0;
    report(
        "A5",
        pass,
        &format!(
            "frozen {{1,2}} changed {}, fine-tune changed {} outside block 4/head ({} inside), {secs:.1}s",
            frozen_moved.len(),
            outside.len(),
            moved_ft.len() - outside.len()
        ),
    );
    assert!(pass, "frozen_moved={frozen_moved:?} outside={outside:?}");
}

#[test]
fn a6_aggregation_and_stage_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let (_, index) = tiny_frames(dir.path(), 18);
    let cache_root = dir.path().join("cache");
    let model = FrameModel::build(&tiny_model_config(&[])).unwrap();

    let mut rng = SeededRng::new(606);
    let probs = Array2::from_shape_fn((7, 4), |_| rng.unit());
    let agg = aggregate_video(&probs).unwrap();
    let exact = (0..4).all(|c| agg[c] == probs.column(c).iter().sum::<f64>() / 7.0);

    let mut worst = 0f64;
    let mut frames = 0usize;
    for video_id in index.video_ids() {
        if frames >= 100 {
            break;
        }
        let set = index.frame_set(&cache_root, &video_id).unwrap();
        let direct = predict_frames(&model, &set).unwrap();
        let images: Vec<_> = set.images().collect();
        let emb = model.embed_images(&images).unwrap();
        let feats = Tensor::from_vec(emb.iter().copied().collect::<Vec<f32>>(), emb.dim(), &Device::Cpu).unwrap();
        let via_head = softmax_rows(&Pass::eval(model.store()).head(&feats).unwrap()).unwrap();
        for (i, row) in via_head.iter().enumerate() {
            for (c, p) in row.iter().enumerate() {
                worst = worst.max((p - direct[[i, c]]).abs());
            }
        }
        frames += set.len();
    }
    let pass = exact && worst <= 1e-5 && frames >= 100;
    report("A6", pass, &format!("column means exact: {exact}; head-on-embeddings max diff {worst:.2e} over {frames} frames"));
    assert!(pass);
}

#[test]
fn a7_pca_oracle() {
    let start = Instant::now();
    let mut rng = SeededRng::new(707);
    let mut worst_angle = 0f64;
    let mut ordered = true;
    let mut ratio_err = 0f64;
    for _ in 0..200 {
        let scales: Vec<f64> = (0..10).map(|_| rng.uniform(0.2, 3.0)).collect();
        let x = Array2::from_shape_fn((50, 10), |(_, j)| rng.normal() * scales[j]);
        let pca = pca_features(&x, 2).unwrap();
        ordered &= pca.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1]);

        let mean: Vec<f64> = (0..10).map(|j| x.column(j).sum() / 50.0).collect();
        let xc = DMatrix::from_fn(50, 10, |i, j| x[[i, j]] - mean[j]);
        let eig = (xc.transpose() * &xc).symmetric_eigen();
        let mut order: Vec<usize> = (0..10).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let trace: f64 = eig.eigenvalues.iter().sum();
        let v = DMatrix::from_fn(10, 2, |r, c| eig.eigenvectors[(r, order[c])]);
        let d = DMatrix::from_fn(10, 2, |r, c| pca.directions[[c, r]]);
        // largest principal angle: sin of it is the norm of d's component outside span(v)
        let residual = &d - &v * (v.transpose() * &d);
        let sin = residual.singular_values().max();
        worst_angle = worst_angle.max(sin.clamp(0.0, 1.0).asin());
        for c in 0..2 {
            ratio_err = ratio_err.max((pca.explained_variance_ratio[c] - eig.eigenvalues[order[c]] / trace).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_angle < 1e-6 && ordered && ratio_err < 1e-9 && secs < 10.0;
    report("A7", pass, &format!("max principal angle {worst_angle:.2e}, ratio error {ratio_err:.2e}, {secs:.1}s"));
    assert!(pass);
}

fn stage_records(exp: &Experiment) -> BTreeMap<String, StageRecord> {
    Stage::ALL
        .iter()
        .filter_map(|s| exp.completed(*s).unwrap().map(|r| (s.name().to_string(), r)))
        .collect()
}

fn run_study(root: &Path, study: &DecayStudy) -> Experiment {
    let config_path = generate_decay_study(root, study).unwrap();
    let exp = Experiment::open(ExperimentConfig::load(&config_path).unwrap()).unwrap();
    exp.run_all().unwrap();
    exp
}

#[test]
fn a3_synthetic_decay_experiment() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let exp = run_study(dir.path(), &DecayStudy::default());
    let reports = exp.evaluation_reports().unwrap();
    let a_key = &exp.train.key;
    let b_key = &exp.evals[0].key;
    let a = &reports[&format!("frame__{a_key}")];
    let b = &reports[&format!("frame__{b_key}")];
    let auroc_a = a.scalar("auroc").unwrap();
    let recall_a = a.scalar("recall/fake").unwrap();
    let recall_b = b.scalar("recall/fake").unwrap();
    let sweep = exp.sweep_result().unwrap().unwrap();
    let recall_ft = match &sweep.cells[0].outcome {
        decay_bench::finetune::CellOutcome::Done { metrics, .. } => metrics.per_class[1].recall,
        decay_bench::finetune::CellOutcome::Failed { message, .. } => panic!("fine-tuning failed: {message}"),
    };
    let temporal_a = reports[&format!("temporal__{a_key}")].scalar("auroc").unwrap_or(f64::NAN);
    let temporal_b = reports[&format!("temporal__{b_key}")].scalar("recall/fake").unwrap_or(f64::NAN);
    let drop = recall_a - recall_b;
    let recovered = recall_ft - recall_b;
    let secs = start.elapsed().as_secs_f64();
    let checks = [auroc_a >= 95.0, drop >= 15.0, recovered >= 0.5 * drop, secs <= 1200.0];
    let pass = checks.iter().all(|c| *c);
    report(
        "A3",
        pass,
        &format!(
            "AUROC on A {auroc_a:.2}; fake recall A {recall_a:.2} -> B {recall_b:.2} (drop {drop:.2}); \
             after fine-tuning on {} B identities {recall_ft:.2} (recovered {recovered:.2}); \
             temporal AUROC on A {temporal_a:.2}, temporal fake recall on B {temporal_b:.2}; {secs:.0}s",
            sweep.cells[0].identity_count
        ),
    );
    assert!(pass, "{checks:?}");
}

#[test]
fn a8_reproducibility_and_provenance() {
    let study = DecayStudy { identities: 10, videos_per_identity: 4, frames: 4, ..Default::default() };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let e1 = run_study(d1.path(), &study);
    let e2 = run_study(d2.path(), &study);
    let read = |e: &Experiment| -> serde_json::Value {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(e.stage_dir(Stage::Report).join("report.json")).unwrap()).unwrap();
        serde_json::json!({ "evaluations": v["evaluations"], "finetune": v["finetune"]["cells"].as_array().map(|c| c.iter().map(|c| c["outcome"]["metrics"].clone()).collect::<Vec<_>>()) })
    };
    let same_hash = e1.config_hash == e2.config_hash;
    let same_scalars = read(&e1) == read(&e2);

    // provenance: every stage's upstream fingerprints resolve to completed stages,
    // and every report names checkpoints and manifests that exist
    let records = stage_records(&e1);
    let mut gaps = Vec::new();
    for (name, rec) in &records {
        for (up, fp) in &rec.upstream {
            if records.get(up).map(|r| &r.fingerprint) != Some(fp) {
                gaps.push(format!("{name} -> {up}"));
            }
        }
    }
    let artifact_hashes: BTreeSet<&String> = records.values().flat_map(|r| r.artifacts.values()).collect();
    let mut manifest_hashes: BTreeSet<String> = BTreeSet::new();
    for entry in e1.manifests() {
        manifest_hashes.insert(entry.manifest.partition(Split::Test).content_hash());
    }
    for (name, r) in e1.evaluation_reports().unwrap() {
        if r.provenance.checkpoint_hashes.is_empty() || r.provenance.checkpoint_hashes.iter().any(|h| !artifact_hashes.contains(h)) {
            gaps.push(format!("{name} checkpoint"));
        }
        if !manifest_hashes.contains(&r.provenance.manifest_hash) || r.provenance.config_hash != e1.config_hash {
            gaps.push(format!("{name} manifest/config"));
        }
    }
    let ckpt = decay_bench::checkpoint::ModelCheckpoint::load(&e1.frame_checkpoint_path()).unwrap();
    if ckpt.meta.provenance.train_manifest_hash.is_empty() {
        gaps.push("frame checkpoint manifest".into());
    }
    let extract: serde_json::Value =
        serde_json::from_slice(&std::fs::read(e1.stage_dir(Stage::Extract).join("summary.json")).unwrap()).unwrap();
    for entry in e1.manifests() {
        if extract[&entry.key]["manifest_hash"] != serde_json::json!(entry.manifest.content_hash()) {
            gaps.push(format!("extract {}", entry.key));
        }
    }

    // re-running changes nothing
    let rerun = e1.run_all().unwrap();
    let idempotent = rerun.iter().all(|o| o.cached) && stage_records(&e1) == records;

    let pass = same_hash && same_scalars && gaps.is_empty() && idempotent && records.len() == Stage::ALL.len();
    report(
        "A8",
        pass,
        &format!(
            "config hash equal {same_hash}, report scalars equal {same_scalars}, provenance gaps {}, rerun cached {idempotent}",
            gaps.len()
        ),
    );
    assert!(pass, "{gaps:?}");
}
