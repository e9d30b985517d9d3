//! Classification metrics, cross-validation aggregation and pooling-frequency
//! biomarker extraction.

use std::collections::BTreeMap;

use crate::encoder::PoolTrace;
use crate::error::{Error, Result};

/// Confusion-derived metrics for one evaluation. `auc` is absent when the
/// label set has a single class; `zero_division` flags precision/recall
/// denominators that were empty and reported as 0.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub zero_division: bool,
}

/// Metrics from positive-class probabilities at threshold 0.5 (`p >= 0.5`
/// predicts the positive class). AUC uses the rank statistic with midrank
/// ties, equivalent to the area under the full threshold sweep.
pub fn compute_metrics(pos_probs: &[f64], labels: &[u8]) -> Result<MetricReport> {
    if pos_probs.is_empty() || pos_probs.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} probabilities for {} labels",
            pos_probs.len(),
            labels.len()
        )));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in pos_probs.iter().zip(labels) {
        let pred = p >= 0.5;
        match (pred, y) {
            (true, 1) => tp += 1,
            (true, 0) => fp += 1,
            (false, 1) => fn_ += 1,
            (false, 0) => tn += 1,
            _ => return Err(Error::InvalidInput(format!("label {y} is not binary"))),
        }
    }
    let total = (tp + tn + fp + fn_) as f64;
    let accuracy = (tp + tn) as f64 / total;
    let mut zero_division = false;
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        zero_division = true;
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        zero_division = true;
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricReport {
        accuracy,
        precision,
        recall,
        f1,
        auc: auc_rank(pos_probs, labels),
        tp,
        tn,
        fp,
        fn_,
        zero_division,
    })
}

/// Mann-Whitney AUC with midranks; `None` when a class is missing.
pub fn auc_rank(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based: items i..=j share the midrank.
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Mean and population standard deviation of each metric across folds.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FoldSummary {
    pub accuracy: (f64, f64),
    pub precision: (f64, f64),
    pub recall: (f64, f64),
    pub f1: (f64, f64),
    /// Aggregated over the folds where AUC was defined.
    pub auc: Option<(f64, f64)>,
    pub folds: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate_folds(reports: &[MetricReport]) -> Result<FoldSummary> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no folds to aggregate".into()));
    }
    let collect = |f: fn(&MetricReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    let aucs: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
    Ok(FoldSummary {
        accuracy: mean_std(&collect(|r| r.accuracy)),
        precision: mean_std(&collect(|r| r.precision)),
        recall: mean_std(&collect(|r| r.recall)),
        f1: mean_std(&collect(|r| r.f1)),
        auc: if aucs.is_empty() { None } else { Some(mean_std(&aucs)) },
        folds: reports.len(),
    })
}

/// ROI retention counts across pooled test graphs, most-retained first.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BiomarkerReport {
    /// Count per ROI index, for every ROI that ever appeared.
    pub roi_counts: BTreeMap<usize, usize>,
    /// `(roi, count)` sorted by count descending, ties to the lower index.
    pub top: Vec<(usize, usize)>,
}

/// Tally how often each original ROI survives pooling at the given stack
/// layer, across all subjects and segments, and keep the `top_n` most
/// frequent.
pub fn biomarker_frequency(
    traces: &[PoolTrace],
    layer: usize,
    top_n: usize,
) -> Result<BiomarkerReport> {
    if traces.is_empty() {
        return Err(Error::InvalidInput("no pooling traces".into()));
    }
    let mut roi_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for trace in traces {
        let segments = trace.layers.get(layer).ok_or_else(|| {
            Error::InvalidInput(format!(
                "trace has {} layers, requested layer {layer}",
                trace.layers.len()
            ))
        })?;
        for retained in segments {
            for &roi in retained {
                *roi_counts.entry(roi).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(usize, usize)> = roi_counts.iter().map(|(&r, &c)| (r, c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_n);
    Ok(BiomarkerReport {
        roi_counts,
        top: ranked,
    })
}

/// Report row in the shape `model,acc±std,f1±std,auc±std`, percentages.
pub fn report_row(model: &str, summary: &FoldSummary) -> String {
    let fmt = |m: f64, s: f64| format!("{:.1}±{:.2}", m * 100.0, s * 100.0);
    let auc = match summary.auc {
        Some((m, s)) => fmt(m, s),
        None => "na".to_string(),
    };
    format!(
        "{model},{},{},{auc}",
        fmt(summary.accuracy.0, summary.accuracy.1),
        fmt(summary.f1.0, summary.f1.1),
    )
}
