//! Report bundle: one versioned JSON document, the cost/performance/
//! reliability/ranking tables, and per-model ROC, learning-curve and
//! confusion CSVs. Output bytes depend only on the inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchReport;
use crate::error::{Error, Result};
use crate::explain::{interpretability_rank, ExplainQualityReport, RankEntry};
use crate::metrics::{ConfusionMatrix, MetricsReport, RocReport};
use crate::nn::{ParamPartition, TrainHistory};

pub const REPORT_FORMAT: &str = "trafx-report";
pub const REPORT_VERSION: u32 = 1;

pub const TABLE_COST: &str = "table3_cost.csv";
pub const TABLE_PERFORMANCE: &str = "table4_performance.csv";
pub const TABLE_RELIABILITY: &str = "table5_reliability.csv";
pub const TABLE_RANKING: &str = "table8_ranking.csv";
pub const REPORT_JSON: &str = "report.json";

/// Test-set evaluation of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEvaluation {
    pub model: String,
    pub params: ParamPartition,
    pub metrics: MetricsReport,
    pub roc: RocReport,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportInputs {
    pub class_names: Vec<String>,
    pub seed: u64,
    pub config_hash: Option<String>,
    pub evaluations: Vec<ModelEvaluation>,
    pub bench: Vec<BenchReport>,
    pub quality: Vec<(String, ExplainQualityReport)>,
    pub histories: Vec<(String, TrainHistory)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub model: String,
    pub params: ParamPartition,
    pub metrics: MetricsReport,
    pub bench: Option<BenchReport>,
    pub quality: Option<ExplainQualityReport>,
    pub history: Option<TrainHistory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: Option<String>,
    pub class_names: Vec<String>,
    pub models: Vec<ModelSection>,
    pub ranking: Vec<RankEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub document: ReportDocument,
    /// File name to contents, including `report.json`.
    pub files: BTreeMap<String, Vec<u8>>,
}

impl ReportBundle {
    pub fn write_to(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

pub fn load_report(path: &Path) -> Result<ReportDocument> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let doc: ReportDocument =
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("report: {e}")))?;
    if doc.format != REPORT_FORMAT || doc.version != REPORT_VERSION {
        return Err(Error::Format(format!(
            "unsupported report {} v{}",
            doc.format, doc.version
        )));
    }
    Ok(doc)
}

fn check_names<'a>(
    what: &str,
    expected: &BTreeSet<&str>,
    names: impl Iterator<Item = &'a str>,
) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Consistency(format!("{what}: model {n} appears twice")));
        }
    }
    if !seen.is_empty() && &seen != expected {
        return Err(Error::Consistency(format!(
            "{what} covers models {seen:?}, evaluations cover {expected:?}"
        )));
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(format!("report csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("report csv: {e}")))
}

fn file_stem(model: &str) -> String {
    model
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

/// Assembles the report; every non-empty input list must name exactly the
/// evaluated models.
pub fn emit_report(inputs: &ReportInputs) -> Result<ReportBundle> {
    if inputs.evaluations.is_empty() {
        return Err(Error::Consistency("report needs at least one evaluated model".into()));
    }
    let expected: BTreeSet<&str> = inputs.evaluations.iter().map(|e| e.model.as_str()).collect();
    if expected.len() != inputs.evaluations.len() {
        return Err(Error::Consistency("evaluations name a model twice".into()));
    }
    check_names("bench", &expected, inputs.bench.iter().map(|b| b.model.as_str()))?;
    check_names("quality", &expected, inputs.quality.iter().map(|q| q.0.as_str()))?;
    check_names("histories", &expected, inputs.histories.iter().map(|h| h.0.as_str()))?;
    for e in &inputs.evaluations {
        if e.metrics.classes != inputs.class_names.len() || e.confusion.k() != inputs.class_names.len() {
            return Err(Error::Consistency(format!(
                "{} was evaluated on {} classes, report has {}",
                e.model,
                e.metrics.classes,
                inputs.class_names.len()
            )));
        }
    }
    for b in &inputs.bench {
        b.validate()?;
    }

    let mut evaluations: Vec<&ModelEvaluation> = inputs.evaluations.iter().collect();
    evaluations.sort_by(|a, b| a.model.cmp(&b.model));
    let bench: BTreeMap<&str, &BenchReport> = inputs.bench.iter().map(|b| (b.model.as_str(), b)).collect();
    let quality: BTreeMap<&str, &ExplainQualityReport> =
        inputs.quality.iter().map(|(n, q)| (n.as_str(), q)).collect();
    let histories: BTreeMap<&str, &TrainHistory> =
        inputs.histories.iter().map(|(n, h)| (n.as_str(), h)).collect();

    let mut quality_sorted: Vec<(String, ExplainQualityReport)> = inputs.quality.clone();
    quality_sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let ranking = interpretability_rank(&quality_sorted);

    let models: Vec<ModelSection> = evaluations
        .iter()
        .map(|e| {
            let name = e.model.as_str();
            ModelSection {
                model: e.model.clone(),
                params: e.params,
                metrics: e.metrics.clone(),
                bench: bench.get(name).map(|b| (*b).clone()),
                quality: quality.get(name).map(|q| **q),
                history: histories.get(name).map(|h| (*h).clone()),
            }
        })
        .collect();
    let document = ReportDocument {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        seed: inputs.seed,
        config_hash: inputs.config_hash.clone(),
        class_names: inputs.class_names.clone(),
        models,
        ranking,
    };

    let mut files = BTreeMap::new();
    let mut json = serde_json::to_vec_pretty(&document).map_err(|e| Error::Format(format!("report: {e}")))?;
    json.push(b'\n');
    files.insert(REPORT_JSON.to_string(), json);

    let cost = document
        .models
        .iter()
        .map(|m| {
            let b = m.bench.as_ref();
            vec![
                m.model.clone(),
                m.params.total.to_string(),
                m.params.trainable.to_string(),
                m.params.non_trainable.to_string(),
                opt(b.map(|b| b.train_wall_time)),
                opt(b.map(|b| b.inference_mean)),
                opt(b.map(|b| b.inference_std)),
                b.map(|b| b.trials.to_string()).unwrap_or_default(),
                b.map(|b| b.sample_count.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    files.insert(
        TABLE_COST.into(),
        csv_bytes(
            &[
                "model",
                "total_params",
                "trainable_params",
                "non_trainable_params",
                "train_time_s",
                "inference_mean_s_per_sample",
                "inference_std_s_per_sample",
                "trials",
                "samples",
            ],
            cost,
        )?,
    );

    let perf = document
        .models
        .iter()
        .map(|m| {
            let x = &m.metrics;
            vec![
                m.model.clone(),
                x.accuracy.to_string(),
                x.precision.to_string(),
                x.recall.to_string(),
                x.f1.to_string(),
                opt(x.auc_macro),
                x.se.to_string(),
                x.ci95.0.to_string(),
                x.ci95.1.to_string(),
            ]
        })
        .collect();
    files.insert(
        TABLE_PERFORMANCE.into(),
        csv_bytes(
            &["model", "accuracy", "precision", "recall", "f1", "auc_macro", "se", "ci95_low", "ci95_high"],
            perf,
        )?,
    );

    let rel = document
        .models
        .iter()
        .map(|m| {
            let x = &m.metrics;
            vec![
                m.model.clone(),
                opt(x.kappa),
                x.hamming_loss.to_string(),
                opt(x.mcc),
                x.balanced_accuracy.to_string(),
                x.log_loss.to_string(),
                opt(x.youden_macro),
            ]
        })
        .collect();
    files.insert(
        TABLE_RELIABILITY.into(),
        csv_bytes(
            &["model", "kappa", "hamming_loss", "mcc", "balanced_accuracy", "log_loss", "youden_macro"],
            rel,
        )?,
    );

    let rank = document
        .ranking
        .iter()
        .map(|r| {
            let mut row = vec![r.rank.to_string(), r.model.clone(), r.score.to_string()];
            row.extend(r.raw.axes().iter().map(f64::to_string));
            row
        })
        .collect();
    files.insert(
        TABLE_RANKING.into(),
        csv_bytes(
            &[
                "rank",
                "model",
                "score",
                "spatial_compactness",
                "background_suppression",
                "class_consistency",
                "shap_magnitude",
                "pos_neg_separation",
            ],
            rank,
        )?,
    );

    for e in &evaluations {
        let stem = file_stem(&e.model);
        let mut roc = Vec::new();
        e.roc.write_csv(&inputs.class_names, &mut roc)?;
        files.insert(format!("roc_{stem}.csv"), roc);
        let mut cm = Vec::new();
        e.confusion.write_csv(&inputs.class_names, &mut cm)?;
        files.insert(format!("confusion_{stem}.csv"), cm);
        if let Some(h) = histories.get(e.model.as_str()) {
            let mut lc = Vec::new();
            h.write_csv(&mut lc)?;
            files.insert(format!("learning_curve_{stem}.csv"), lc);
        }
    }
    Ok(ReportBundle { document, files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{confusion, evaluate, roc_auc, IntervalMetric, PredictionSet};

    fn evaluation(name: &str) -> ModelEvaluation {
        let preds = PredictionSet::new(
            vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.6, 0.4], vec![0.1, 0.9]],
            vec![0, 1, 1, 1],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        ModelEvaluation {
            model: name.into(),
            params: ParamPartition {
                trainable: 10,
                non_trainable: 5,
                total: 15,
            },
            metrics: evaluate(&preds, IntervalMetric::MacroF1).unwrap(),
            roc: roc_auc(&preds),
            confusion: confusion(&preds),
        }
    }

    fn inputs(names: &[&str]) -> ReportInputs {
        ReportInputs {
            class_names: vec!["a".into(), "b".into()],
            seed: 7,
            config_hash: Some("abc".into()),
            evaluations: names.iter().map(|n| evaluation(n)).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn single_model_one_row_per_table() {
        let b = emit_report(&inputs(&["m"])).unwrap();
        for t in [TABLE_COST, TABLE_PERFORMANCE, TABLE_RELIABILITY] {
            let text = String::from_utf8(b.files[t].clone()).unwrap();
            assert_eq!(text.lines().count(), 2, "{t}");
        }
        assert!(b.files.contains_key("roc_m.csv"));
        assert!(b.files.contains_key("confusion_m.csv"));
    }

    #[test]
    fn json_round_trip_and_byte_stability() {
        let b = emit_report(&inputs(&["y", "x"])).unwrap();
        let again = emit_report(&inputs(&["x", "y"])).unwrap();
        assert_eq!(b.files, again.files);
        let doc: ReportDocument = serde_json::from_slice(&b.files[REPORT_JSON]).unwrap();
        assert_eq!(doc, b.document);
    }

    #[test]
    fn mismatched_names_rejected() {
        let mut i = inputs(&["m"]);
        i.quality.push((
            "other".into(),
            ExplainQualityReport {
                spatial_compactness: 0.5,
                background_suppression: 0.5,
                class_consistency: 0.5,
                shap_magnitude: 0.1,
                pos_neg_separation: 0.5,
            },
        ));
        assert!(matches!(emit_report(&i), Err(Error::Consistency(_))));
    }
}
