//! Scoring of per-video predictions: confusion-matrix metrics, AUROC,
//! precision-recall curves, multi-model aggregation, cross-version
//! evaluation and the report files.

pub mod metrics;
pub mod pca;
pub mod plot;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::write_json_atomic;
use crate::error::{Error, Result};
use crate::manifest::{ClassScheme, VideoRecord};

pub use metrics::{
    auroc, confusion_metrics, mean_std, multiclass_auroc, pr_curve, roc_curve, ClassMetrics, ConfusionMetrics, PrPoint,
    RocPoint,
};
pub use pca::{pca_features, Pca};

const PROB_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: String,
    pub identity_id: String,
    pub true_class: usize,
    pub predicted_class: usize,
    pub probs: Vec<f64>,
    pub dataset_version: String,
    pub technique: String,
    pub engine: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub class_names: Vec<String>,
    pub predictions: Vec<Prediction>,
}

fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
}

impl Prediction {
    pub fn from_record(record: &VideoRecord, scheme: ClassScheme, probs: Vec<f64>) -> Self {
        Self {
            video_id: record.video_id.clone(),
            identity_id: record.identity_id.clone(),
            true_class: record.class_id(scheme),
            predicted_class: argmax(&probs),
            probs,
            dataset_version: record.dataset_version.clone(),
            technique: record.technique.to_string(),
            engine: record.engine.clone(),
        }
    }
}

impl PredictionSet {
    pub fn new(class_names: Vec<String>, predictions: Vec<Prediction>) -> Result<Self> {
        let k = class_names.len();
        for p in &predictions {
            if p.probs.len() != k || p.true_class >= k {
                return Err(Error::Precondition(format!("prediction for {} does not match {k} classes", p.video_id)));
            }
            if (p.probs.iter().sum::<f64>() - 1.0).abs() > PROB_TOL {
                return Err(Error::Precondition(format!("probabilities for {} do not sum to 1", p.video_id)));
            }
            if p.predicted_class != argmax(&p.probs) {
                return Err(Error::Precondition(format!("predicted class of {} is not the argmax", p.video_id)));
            }
        }
        Ok(Self { class_names, predictions })
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.class_names.len() == 2
    }

    /// Real versus fake: class 0 stays real, every other class's
    /// probability is summed into the fake score.
    pub fn to_binary(&self) -> PredictionSet {
        let predictions = self
            .predictions
            .iter()
            .map(|p| {
                let fake: f64 = p.probs[1..].iter().sum();
                let probs = vec![p.probs[0], fake];
                Prediction {
                    true_class: usize::from(p.true_class > 0),
                    predicted_class: argmax(&probs),
                    probs,
                    ..p.clone()
                }
            })
            .collect();
        PredictionSet { class_names: vec!["real".into(), "fake".into()], predictions }
    }

    pub fn filter(&self, keep: impl Fn(&Prediction) -> bool) -> PredictionSet {
        PredictionSet {
            class_names: self.class_names.clone(),
            predictions: self.predictions.iter().filter(|p| keep(p)).cloned().collect(),
        }
    }

    pub fn truth(&self) -> Vec<usize> {
        self.predictions.iter().map(|p| p.true_class).collect()
    }

    pub fn predicted(&self) -> Vec<usize> {
        self.predictions.iter().map(|p| p.predicted_class).collect()
    }

    /// Binary scores and labels for the positive (last) class.
    pub fn positive_scores(&self) -> (Vec<f64>, Vec<bool>) {
        let pos = self.class_names.len() - 1;
        self.predictions.iter().map(|p| (p.probs[pos], p.true_class == pos)).unzip()
    }
}

/// Metrics of one model on one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub accuracy: f64,
    /// `None` when only one true class is present.
    pub auroc: Option<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    /// Accuracy restricted to each generation engine.
    pub per_engine: BTreeMap<String, f64>,
    pub pr_curve: Option<Vec<PrPoint>>,
}

pub fn evaluate_predictions(set: &PredictionSet) -> Result<ModelMetrics> {
    let cm = confusion_metrics(&set.truth(), &set.predicted(), &set.class_names)?;
    let auroc = if set.is_binary() {
        let (s, l) = set.positive_scores();
        optional(auroc(&s, &l))?
    } else {
        let probs: Vec<Vec<f64>> = set.predictions.iter().map(|p| p.probs.clone()).collect();
        optional(multiclass_auroc(&probs, &set.truth()))?
    };
    let pr = if set.is_binary() {
        let (s, l) = set.positive_scores();
        optional(pr_curve(&s, &l))?
    } else {
        None
    };
    let mut per_engine: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for p in &set.predictions {
        let e = per_engine.entry(p.engine.clone()).or_default();
        e.0 += usize::from(p.true_class == p.predicted_class);
        e.1 += 1;
    }
    Ok(ModelMetrics {
        accuracy: cm.accuracy,
        auroc,
        confusion: cm.confusion,
        per_class: cm.per_class,
        per_engine: per_engine.into_iter().map(|(k, (c, n))| (k, 100.0 * c as f64 / n as f64)).collect(),
        pr_curve: pr,
    })
}

fn optional<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::SingleClass) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&values);
        Self { mean, std, values }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub config_hash: String,
    pub checkpoint_hashes: Vec<String>,
    pub manifest_hash: String,
    pub train_versions: Vec<String>,
    pub test_versions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub title: String,
    pub class_names: Vec<String>,
    pub n_videos: usize,
    /// How multiple models are combined into each scalar.
    pub aggregation: String,
    pub scalars: BTreeMap<String, Stat>,
    /// Confusion counts summed over models.
    pub confusion: Vec<Vec<usize>>,
    pub models: Vec<ModelMetrics>,
    pub warnings: Vec<String>,
    pub provenance: ReportProvenance,
}

impl EvaluationReport {
    pub fn scalar(&self, key: &str) -> Option<f64> {
        self.scalars.get(key).map(|s| s.mean)
    }
}

/// Scores every model's predictions (all on the same videos) and reports
/// each scalar as mean and population standard deviation across models.
pub fn summarize(title: &str, sets: &[PredictionSet]) -> Result<EvaluationReport> {
    let first = sets.first().ok_or_else(|| Error::EmptyInput("no prediction sets to summarize".into()))?;
    let models = sets.iter().map(evaluate_predictions).collect::<Result<Vec<_>>>()?;
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut warnings = Vec::new();
    for m in &models {
        columns.entry("accuracy".into()).or_default().push(m.accuracy);
        if let Some(a) = m.auroc {
            columns.entry("auroc".into()).or_default().push(a);
        }
        for c in &m.per_class {
            for (name, v) in [("precision", c.precision), ("recall", c.recall), ("f1", c.f1)] {
                columns.entry(format!("{name}/{}", c.class)).or_default().push(v);
            }
        }
        for (engine, acc) in &m.per_engine {
            columns.entry(format!("engine_accuracy/{engine}")).or_default().push(*acc);
        }
    }
    if models.iter().any(|m| m.auroc.is_none()) {
        warnings.push("AUROC undefined for at least one model: only one true class present".into());
    }
    for (i, c) in models[0].per_class.iter().enumerate() {
        if c.precision_undefined {
            warnings.push(format!("no video predicted as {} (model 0); precision reported as 0", first.class_names[i]));
        }
    }
    let k = first.class_names.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for m in &models {
        for (row, r) in confusion.iter_mut().zip(&m.confusion) {
            for (c, v) in row.iter_mut().zip(r) {
                *c += v;
            }
        }
    }
    let aggregation = if sets.len() == 1 {
        "single model".to_string()
    } else {
        format!("mean and population std over {} models", sets.len())
    };
    Ok(EvaluationReport {
        title: title.into(),
        class_names: first.class_names.clone(),
        n_videos: first.len(),
        aggregation,
        scalars: columns.into_iter().map(|(k, v)| (k, Stat::of(v))).collect(),
        confusion,
        models,
        warnings,
        provenance: ReportProvenance::default(),
    })
}

/// Binary real/fake evaluation of models trained on `train_version` data
/// against predictions on another version's test set.
pub fn cross_evaluate(title: &str, sets: &[PredictionSet], train_version: &str) -> Result<EvaluationReport> {
    let binary: Vec<PredictionSet> = sets.iter().map(PredictionSet::to_binary).collect();
    let mut report = summarize(title, &binary)?;
    let test_versions: std::collections::BTreeSet<String> =
        sets.iter().flat_map(|s| s.predictions.iter().map(|p| p.dataset_version.clone())).collect();
    if test_versions.contains(train_version) {
        report.warnings.push(format!("test data shares dataset version {train_version} with the training data"));
    }
    report.provenance.train_versions = vec![train_version.to_string()];
    report.provenance.test_versions = test_versions.into_iter().collect();
    Ok(report)
}

fn pm(s: Option<&Stat>) -> String {
    match s {
        Some(s) if s.values.len() > 1 => format!("{:.2} ± {:.2}", s.mean, s.std),
        Some(s) => format!("{:.2}", s.mean),
        None => "n/a".into(),
    }
}

pub fn render_markdown(report: &EvaluationReport) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# {}\n", report.title);
    let _ = writeln!(md, "{} videos; {}.\n", report.n_videos, report.aggregation);
    let _ = writeln!(md, "| Accuracy (%) | AUROC (%) |\n|---|---|");
    let _ = writeln!(md, "| {} | {} |\n", pm(report.scalars.get("accuracy")), pm(report.scalars.get("auroc")));
    let _ = writeln!(md, "| Class | Precision (%) | Recall (%) | F1 (%) |\n|---|---|---|---|");
    for c in &report.class_names {
        let get = |m: &str| pm(report.scalars.get(&format!("{m}/{c}")));
        let _ = writeln!(md, "| {c} | {} | {} | {} |", get("precision"), get("recall"), get("f1"));
    }
    let _ = writeln!(md, "\nConfusion (rows true, columns predicted, summed over models):\n");
    let _ = writeln!(md, "| | {} |", report.class_names.join(" | "));
    let _ = writeln!(md, "|---|{}", "---|".repeat(report.class_names.len()));
    for (name, row) in report.class_names.iter().zip(&report.confusion) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(md, "| {name} | {} |", cells.join(" | "));
    }
    let engines: Vec<(&String, &Stat)> =
        report.scalars.iter().filter(|(k, _)| k.starts_with("engine_accuracy/")).collect();
    if !engines.is_empty() {
        let _ = writeln!(md, "\n| Engine | Accuracy (%) |\n|---|---|");
        for (k, s) in engines {
            let _ = writeln!(md, "| {} | {} |", &k["engine_accuracy/".len()..], pm(Some(s)));
        }
    }
    if !report.warnings.is_empty() {
        let _ = writeln!(md, "\nWarnings:\n");
        for w in &report.warnings {
            let _ = writeln!(md, "- {w}");
        }
    }
    md
}

/// Writes `report.json`, `report.md` and, for binary reports, `pr_curve.svg`.
pub fn write_report(dir: &Path, report: &EvaluationReport) -> Result<()> {
    write_json_atomic(&dir.join("report.json"), report)?;
    crate::artifact::write_atomic(&dir.join("report.md"), render_markdown(report).as_bytes())?;
    let curves: Vec<(String, Vec<PrPoint>)> = report
        .models
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.pr_curve.clone().map(|c| (format!("model {i}"), c)))
        .collect();
    if !curves.is_empty() {
        plot::pr_curves(&dir.join("pr_curve.svg"), &report.title, &curves)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(id: &str, truth: usize, probs: Vec<f64>) -> Prediction {
        Prediction {
            video_id: id.into(),
            identity_id: "p".into(),
            true_class: truth,
            predicted_class: argmax(&probs),
            probs,
            dataset_version: "v2".into(),
            technique: "face_swap".into(),
            engine: "e".into(),
        }
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn multiclass_reduces_by_summing_fake_probabilities() {
        let set = PredictionSet::new(
            names(&["real", "face_swap", "lip_sync", "avatar"]),
            vec![pred("a", 2, vec![0.3, 0.3, 0.2, 0.2])],
        )
        .unwrap();
        let b = set.to_binary();
        let p = &b.predictions[0];
        assert!((p.probs[1] - 0.7).abs() < 1e-12);
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!((p.true_class, p.predicted_class), (1, 1));
    }

    #[test]
    fn five_models_give_mean_and_std() {
        let sets: Vec<PredictionSet> = (0..5)
            .map(|i| {
                let x = 0.15 * i as f64;
                PredictionSet::new(
                    names(&["real", "fake"]),
                    vec![pred("a", 0, vec![0.9 - x, 0.1 + x]), pred("b", 1, vec![0.2, 0.8])],
                )
                .unwrap()
            })
            .collect();
        let r = cross_evaluate("t", &sets, "v1").unwrap();
        assert!(r.scalars.values().all(|s| s.values.len() == 5));
        assert!(r.warnings.is_empty());
        let acc = &r.scalars["accuracy"];
        assert_eq!(acc.values, vec![100.0, 100.0, 100.0, 50.0, 50.0]);
        assert!((acc.mean - 80.0).abs() < 1e-12 && (acc.std - 600f64.sqrt()).abs() < 1e-9);
        let same = cross_evaluate("t", &sets[..1], "v2").unwrap();
        assert_eq!(same.warnings.len(), 1);
        assert!(render_markdown(&r).contains("±"));
    }

    #[test]
    fn rejects_unnormalized_probabilities() {
        let bad = pred("a", 0, vec![0.5, 0.6]);
        assert!(PredictionSet::new(names(&["real", "fake"]), vec![bad]).is_err());
    }
}
