//! Multi-class reliability statistics computed from class-probability
//! predictions: confusion counts, agreement and correlation coefficients,
//! macro averages, one-vs-rest ROC, log loss and normal-approximation
//! intervals.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-6;
const LOG_FLOOR: f64 = 1e-12;
/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

/// Per-sample class-probability vectors with their true labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub probs: Vec<Vec<f64>>,
    pub true_labels: Vec<usize>,
    pub class_names: Vec<String>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl PredictionSet {
    pub fn new(probs: Vec<Vec<f64>>, true_labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let k = class_names.len();
        if probs.is_empty() {
            return Err(Error::DegenerateDataset("prediction set is empty".into()));
        }
        if probs.len() != true_labels.len() {
            return Err(Error::Consistency(format!(
                "{} probability rows but {} labels",
                probs.len(),
                true_labels.len()
            )));
        }
        for (i, (row, &label)) in probs.iter().zip(&true_labels).enumerate() {
            if row.len() != k {
                return Err(Error::shape(
                    "PredictionSet",
                    format!("row {i} has {} entries for {k} classes", row.len()),
                ));
            }
            if label >= k {
                return Err(Error::Consistency(format!("row {i}: label {label} >= {k}")));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= -SIMPLEX_TOL)) || (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Numeric(format!(
                    "row {i} is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(PredictionSet {
            probs,
            true_labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Argmax per row, ties to the lowest class index.
    pub fn predicted_labels(&self) -> Vec<usize> {
        self.probs.iter().map(|r| argmax(r)).collect()
    }
}

/// `K x K` counts; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("ConfusionMatrix", "rows must form a square matrix"));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }

    pub fn from_labels(truth: &[usize], predicted: &[usize], k: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Consistency("label vectors differ in length".into()));
        }
        let mut cm = ConfusionMatrix::zeros(k);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::Consistency(format!("label {t}/{p} outside {k} classes")));
            }
            cm.counts[t * k + p] += 1;
        }
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Row sums `t_k`.
    pub fn true_totals(&self) -> Vec<u64> {
        (0..self.k).map(|t| (0..self.k).map(|p| self.get(t, p)).sum()).collect()
    }

    /// Column sums `p_k`.
    pub fn predicted_totals(&self) -> Vec<u64> {
        (0..self.k).map(|p| (0..self.k).map(|t| self.get(t, p)).sum()).collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn write_csv<W: Write>(&self, class_names: &[String], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::Format(format!("confusion csv: {e}"));
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(class_names.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for (t, row) in self.rows().iter().enumerate() {
            let mut rec = vec![class_names.get(t).cloned().unwrap_or_else(|| t.to_string())];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::Format(format!("confusion csv: {e}")))
    }
}

pub fn confusion(preds: &PredictionSet) -> ConfusionMatrix {
    ConfusionMatrix::from_labels(&preds.true_labels, &preds.predicted_labels(), preds.num_classes())
        .expect("prediction set labels validated at construction")
}

fn require_samples(cm: &ConfusionMatrix, metric: &'static str) -> Result<f64> {
    match cm.total() {
        0 => Err(Error::UndefinedMetric {
            metric,
            reason: "no samples".into(),
        }),
        n => Ok(n as f64),
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let n = require_samples(cm, "accuracy")?;
    Ok(cm.trace() as f64 / n)
}

/// Single-label Hamming loss, `1 - accuracy`.
pub fn hamming(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(1.0 - accuracy(cm)?)
}

/// Cohen's kappa `(P_o - P_e) / (1 - P_e)`.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = require_samples(cm, "kappa")?;
    let p_o = cm.trace() as f64 / n;
    let p_e: f64 = cm
        .true_totals()
        .iter()
        .zip(cm.predicted_totals())
        .map(|(&t, p)| (t as f64 / n) * (p as f64 / n))
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(Error::UndefinedMetric {
            metric: "kappa",
            reason: "chance agreement is 1 (single class in truth and predictions)".into(),
        });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Multi-class Matthews correlation:
/// `(N * trace - sum_k t_k p_k) / sqrt((N^2 - sum_k p_k^2) (N^2 - sum_k t_k^2))`.
pub fn mcc_multiclass(cm: &ConfusionMatrix) -> Result<f64> {
    let n = require_samples(cm, "mcc")?;
    let t = cm.true_totals();
    let p = cm.predicted_totals();
    let tp: f64 = t.iter().zip(&p).map(|(&a, &b)| a as f64 * b as f64).sum();
    let numerator = n * cm.trace() as f64 - tp;
    let pp = n * n - p.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
    let tt = n * n - t.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
    if pp <= 0.0 || tt <= 0.0 {
        return Err(Error::UndefinedMetric {
            metric: "mcc",
            reason: "truth or predictions fall in a single class".into(),
        });
    }
    Ok(numerator / (pp * tt).sqrt())
}

/// One-vs-rest `(TPR, TNR)` per class; `None` where a rate's denominator is zero.
pub fn one_vs_rest_rates(cm: &ConfusionMatrix) -> Vec<Option<(f64, f64)>> {
    let n = cm.total();
    let t = cm.true_totals();
    let p = cm.predicted_totals();
    (0..cm.k())
        .map(|i| {
            let tp = cm.get(i, i);
            let positives = t[i];
            let negatives = n - t[i];
            if positives == 0 || negatives == 0 {
                return None;
            }
            let fp = p[i] - tp;
            let tn = negatives - fp;
            Some((tp as f64 / positives as f64, tn as f64 / negatives as f64))
        })
        .collect()
}

/// Macro Youden index over classes whose rates are defined.
pub fn youden_macro(cm: &ConfusionMatrix) -> Result<f64> {
    let rates = one_vs_rest_rates(cm);
    let defined: Vec<(f64, f64)> = rates.iter().flatten().copied().collect();
    if defined.len() < rates.len() {
        log::warn!(
            "youden: {} class(es) without positives or negatives excluded",
            rates.len() - defined.len()
        );
    }
    if defined.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "youden",
            reason: "no class has both positives and negatives".into(),
        });
    }
    Ok(defined.iter().map(|(tpr, tnr)| tpr + tnr - 1.0).sum::<f64>() / defined.len() as f64)
}

fn ratio_or_zero(num: u64, den: u64, what: &str, class: usize) -> f64 {
    if den == 0 {
        log::warn!("{what} of class {class} has a zero denominator; using 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision and recall (zero-denominator entries are 0).
pub fn per_class_precision_recall(cm: &ConfusionMatrix) -> Vec<(f64, f64)> {
    let t = cm.true_totals();
    let p = cm.predicted_totals();
    (0..cm.k())
        .map(|i| {
            (
                ratio_or_zero(cm.get(i, i), p[i], "precision", i),
                ratio_or_zero(cm.get(i, i), t[i], "recall", i),
            )
        })
        .collect()
}

/// Unweighted class means of precision, recall and F1.
pub fn macro_prf(cm: &ConfusionMatrix) -> Result<(f64, f64, f64)> {
    require_samples(cm, "macro precision/recall/F1")?;
    let pr = per_class_precision_recall(cm);
    let k = pr.len() as f64;
    let f1 = pr
        .iter()
        .map(|&(p, r)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
        .sum::<f64>()
        / k;
    let precision = pr.iter().map(|x| x.0).sum::<f64>() / k;
    let recall = pr.iter().map(|x| x.1).sum::<f64>() / k;
    Ok((precision, recall, f1))
}

/// Mean per-class true-positive rate.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(macro_prf(cm)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Score threshold at or above which samples are called positive.
    /// The opening point's infinite threshold is stored as JSON null.
    #[serde(with = "infinite_as_null")]
    pub threshold: f64,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRoc {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    /// `None` for classes without positives or without negatives.
    pub per_class: Vec<Option<ClassRoc>>,
    pub macro_auc: Option<f64>,
}

impl RocReport {
    pub fn write_csv<W: Write>(&self, class_names: &[String], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::Format(format!("roc csv: {e}"));
        w.write_record(["class", "fpr", "tpr", "threshold"]).map_err(err)?;
        for (c, roc) in self.per_class.iter().enumerate() {
            let Some(roc) = roc else { continue };
            for pt in &roc.points {
                w.write_record([
                    class_names.get(c).cloned().unwrap_or_else(|| c.to_string()),
                    pt.fpr.to_string(),
                    pt.tpr.to_string(),
                    pt.threshold.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::Format(format!("roc csv: {e}")))
    }
}

/// ROC curve of one score column by threshold sweep; tied scores form a
/// single step, so the trapezoid area equals the Mann-Whitney statistic.
pub fn binary_roc(scores: &[f64], positive: &[bool]) -> Option<ClassRoc> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().unwrap();
        let pt = RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold: s,
        };
        auc += (pt.fpr - prev.fpr) * (pt.tpr + prev.tpr) / 2.0;
        points.push(pt);
    }
    Some(ClassRoc { points, auc })
}

/// One-vs-rest ROC per class and the unweighted macro AUC over defined classes.
pub fn roc_auc(preds: &PredictionSet) -> RocReport {
    let per_class: Vec<Option<ClassRoc>> = (0..preds.num_classes())
        .map(|c| {
            let scores: Vec<f64> = preds.probs.iter().map(|r| r[c]).collect();
            let positive: Vec<bool> = preds.true_labels.iter().map(|&l| l == c).collect();
            let roc = binary_roc(&scores, &positive);
            if roc.is_none() {
                log::warn!("AUC undefined for class {c}: needs positives and negatives");
            }
            roc
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().map(|r| r.auc).collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    RocReport {
        per_class,
        macro_auc,
    }
}

/// Mean negative log probability of the true class, clipped to `[1e-12, 1]`.
pub fn log_loss(preds: &PredictionSet) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "log_loss",
            reason: "no samples".into(),
        });
    }
    let total: f64 = preds
        .probs
        .iter()
        .zip(&preds.true_labels)
        .map(|(r, &l)| -r[l].clamp(LOG_FLOOR, 1.0).ln())
        .sum();
    Ok(total / preds.len() as f64)
}

/// Standard error `sqrt(m (1 - m) / N)` of a proportion and its 95% normal
/// interval clipped to `[0, 1]`.
pub fn se_and_ci(metric: f64, n: usize) -> Result<(f64, (f64, f64))> {
    if n == 0 {
        return Err(Error::UndefinedMetric {
            metric: "standard error",
            reason: "no samples".into(),
        });
    }
    let se = (metric * (1.0 - metric) / n as f64).max(0.0).sqrt();
    let lo = (metric - Z95 * se).clamp(0.0, 1.0);
    let hi = (metric + Z95 * se).clamp(0.0, 1.0);
    Ok((se, (lo, hi)))
}

/// Proportion-type statistic the SE/CI columns describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMetric {
    Accuracy,
    #[default]
    MacroF1,
    BalancedAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub classes: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc_per_class: Vec<Option<f64>>,
    pub auc_macro: Option<f64>,
    pub interval_metric: IntervalMetric,
    pub se: f64,
    pub ci95: (f64, f64),
    pub kappa: Option<f64>,
    pub hamming_loss: f64,
    pub mcc: Option<f64>,
    pub balanced_accuracy: f64,
    pub log_loss: f64,
    pub youden_macro: Option<f64>,
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric { metric, reason }) => {
            log::warn!("{metric} undefined: {reason}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Every statistic at once, with undefined coefficients reported as `None`.
pub fn evaluate(preds: &PredictionSet, interval: IntervalMetric) -> Result<MetricsReport> {
    let cm = confusion(preds);
    let (precision, recall, f1) = macro_prf(&cm)?;
    let acc = accuracy(&cm)?;
    let roc = roc_auc(preds);
    let m = match interval {
        IntervalMetric::Accuracy => acc,
        IntervalMetric::MacroF1 => f1,
        IntervalMetric::BalancedAccuracy => recall,
    };
    let (se, ci95) = se_and_ci(m, preds.len())?;
    Ok(MetricsReport {
        samples: preds.len(),
        classes: preds.num_classes(),
        accuracy: acc,
        precision,
        recall,
        f1,
        auc_per_class: roc.per_class.iter().map(|r| r.as_ref().map(|r| r.auc)).collect(),
        auc_macro: roc.macro_auc,
        interval_metric: interval,
        se,
        ci95,
        kappa: optional(kappa(&cm))?,
        hamming_loss: hamming(&cm)?,
        mcc: optional(mcc_multiclass(&cm))?,
        balanced_accuracy: balanced_accuracy(&cm)?,
        log_loss: log_loss(preds)?,
        youden_macro: optional(youden_macro(&cm))?,
    })
}
