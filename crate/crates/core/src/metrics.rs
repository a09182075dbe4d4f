//! Binary classification metrics and the report format used for probe
//! evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(labels: &[bool], predictions: &[bool]) -> Result<ConfusionCounts> {
    if labels.len() != predictions.len() {
        return Err(Error::Contract(format!(
            "confusion: {} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2tp / (2tp + fp + fn)`; 1.0 when nothing was positive on either side.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

pub fn sensitivity(c: &ConfusionCounts) -> Result<f64> {
    let denom = c.tp + c.fn_;
    if denom == 0 {
        return Err(Error::UndefinedMetric {
            metric: "sensitivity",
            detail: "no positive labels".into(),
        });
    }
    Ok(c.tp as f64 / denom as f64)
}

pub fn specificity(c: &ConfusionCounts) -> Result<f64> {
    let denom = c.tn + c.fp;
    if denom == 0 {
        return Err(Error::UndefinedMetric {
            metric: "specificity",
            detail: "no negative labels".into(),
        });
    }
    Ok(c.tn as f64 / denom as f64)
}

pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    if c.total() == 0 {
        return Err(Error::UndefinedMetric {
            metric: "accuracy",
            detail: "no samples".into(),
        });
    }
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

/// Mann-Whitney AUROC with midranks for ties.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Contract(format!(
            "auroc: {} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "auroc" });
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric {
            metric: "auroc",
            detail: format!("needs both classes, got {n_pos} positive and {n_neg} negative"),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie block i..=j shares their mean
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotMetrics {
    pub name: String,
    pub accuracy: f64,
    pub f1: f64,
    pub auroc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub auroc: f64,
    pub specificity: f64,
    pub sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub n: usize,
    pub mean: Averages,
    pub std: Averages,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub slots: Vec<SlotMetrics>,
    pub averages: Averages,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub slots: Vec<SlotMetrics>,
    pub averages: Averages,
    pub seeds: SeedStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_seed: Option<Vec<SeedRun>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Per-slot outcome of one evaluation: labels and sigmoid scores.
#[derive(Clone, Debug)]
pub struct SlotScores {
    pub name: String,
    pub labels: Vec<bool>,
    pub scores: Vec<f64>,
}

pub const THRESHOLD: f64 = 0.5;

/// One seed's slots and averages.
pub fn evaluate_slots(slots: &[SlotScores]) -> Result<(Vec<SlotMetrics>, Averages)> {
    if slots.is_empty() {
        return Err(Error::Contract("no slots to evaluate".into()));
    }
    let mut out = Vec::with_capacity(slots.len());
    let (mut auc_sum, mut spec_sum, mut sens_sum) = (0.0, 0.0, 0.0);
    for s in slots {
        if s.labels.is_empty() {
            return Err(Error::Contract(format!(
                "empty test set for slot {}",
                s.name
            )));
        }
        let preds: Vec<bool> = s.scores.iter().map(|&p| p >= THRESHOLD).collect();
        let c = confusion(&s.labels, &preds)?;
        let auc = auroc(&s.labels, &s.scores)?;
        auc_sum += auc;
        spec_sum += specificity(&c)?;
        sens_sum += sensitivity(&c)?;
        out.push(SlotMetrics {
            name: s.name.clone(),
            accuracy: accuracy(&c)?,
            f1: f1(&c),
            auroc: auc,
        });
    }
    let k = slots.len() as f64;
    Ok((
        out,
        Averages {
            auroc: auc_sum / k,
            specificity: spec_sum / k,
            sensitivity: sens_sum / k,
        },
    ))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsReport {
    /// Combines seed runs (in the given order). Slot metrics are seed means;
    /// `seeds` holds mean and sample standard deviation of the averages.
    pub fn from_runs(runs: Vec<SeedRun>) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::Contract("no seed runs to report".into()))?;
        let n_slots = first.slots.len();
        if runs.iter().any(|r| r.slots.len() != n_slots) {
            return Err(Error::Contract("seed runs disagree on slot count".into()));
        }
        let n = runs.len() as f64;
        let slots = (0..n_slots)
            .map(|j| SlotMetrics {
                name: first.slots[j].name.clone(),
                accuracy: runs.iter().map(|r| r.slots[j].accuracy).sum::<f64>() / n,
                f1: runs.iter().map(|r| r.slots[j].f1).sum::<f64>() / n,
                auroc: runs.iter().map(|r| r.slots[j].auroc).sum::<f64>() / n,
            })
            .collect();
        let stat = |f: fn(&Averages) -> f64| {
            mean_std(&runs.iter().map(|r| f(&r.averages)).collect::<Vec<_>>())
        };
        let (auc_m, auc_s) = stat(|a| a.auroc);
        let (spec_m, spec_s) = stat(|a| a.specificity);
        let (sens_m, sens_s) = stat(|a| a.sensitivity);
        let mean = Averages {
            auroc: auc_m,
            specificity: spec_m,
            sensitivity: sens_m,
        };
        Ok(Self {
            slots,
            averages: mean,
            seeds: SeedStats {
                n: runs.len(),
                mean,
                std: Averages {
                    auroc: auc_s,
                    specificity: spec_s,
                    sensitivity: sens_s,
                },
            },
            per_seed: (runs.len() > 1).then_some(runs),
            config_hash: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
