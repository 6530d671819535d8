//! Ranking metrics and the percentile bootstrap.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::objectives::LabelBatch;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_ALPHA: f64 = 0.05;

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    Ok(())
}

/// Mann–Whitney AUC: `(concordant + ½·tied) / (n_pos·n_neg)`, computed from
/// mid-ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return dim_err("roc_auc", format!("{} scores vs {} labels", scores.len(), labels.len()));
    }
    check_scores(scores)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({n_pos} positives, {n_neg} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the positives' rank sum, ranks starting at 1, ties sharing the mid-rank
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        let pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += mid2 * pos;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// AP: mean over positives of precision at their rank; descending scores,
/// ties kept in original order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return dim_err("average_precision", format!("{} scores vs {} labels", scores.len(), labels.len()));
    }
    check_scores(scores)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AP needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &k) in order.iter().enumerate() {
        if labels[k] {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

fn check_panel(scores: &Tensor, labels: &LabelBatch) -> Result<()> {
    if scores.shape() != [labels.rows(), labels.classes()] {
        return dim_err(
            "metrics",
            format!("scores {:?} vs labels {}×{}", scores.shape(), labels.rows(), labels.classes()),
        );
    }
    Ok(())
}

fn column(scores: &Tensor, labels: &LabelBatch, k: usize) -> (Vec<f64>, Vec<bool>) {
    labels
        .known_column(k)
        .into_iter()
        .map(|(i, y)| (scores.at(&[i, k]), y))
        .unzip()
}

/// Per-class AUCs; `None` for classes lacking positives or negatives.
pub fn per_class_auc(scores: &Tensor, labels: &LabelBatch) -> Result<Vec<Option<f64>>> {
    check_panel(scores, labels)?;
    (0..labels.classes())
        .map(|k| {
            let (s, y) = column(scores, labels, k);
            match roc_auc(&s, &y) {
                Ok(v) => Ok(Some(v)),
                Err(Error::UndefinedMetric(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Mean AUC over valid classes, plus the skipped class indices.
pub fn macro_auc(scores: &Tensor, labels: &LabelBatch) -> Result<(f64, Vec<usize>)> {
    let per = per_class_auc(scores, labels)?;
    let valid: Vec<f64> = per.iter().flatten().copied().collect();
    let skipped: Vec<usize> = per.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(k, _)| k).collect();
    if valid.is_empty() {
        return Err(Error::UndefinedMetric("every class skipped for macro AUC".into()));
    }
    Ok((valid.iter().sum::<f64>() / valid.len() as f64, skipped))
}

/// AUC of all known (sample, class) decisions pooled together.
pub fn micro_auc(scores: &Tensor, labels: &LabelBatch) -> Result<f64> {
    check_panel(scores, labels)?;
    let (mut s, mut y) = (Vec::new(), Vec::new());
    for (k, &v) in labels.values().iter().enumerate() {
        if v != -1 {
            s.push(scores.data()[k]);
            y.push(v == 1);
        }
    }
    roc_auc(&s, &y)
}

/// Mean AP over classes with at least one known positive, plus skipped ids.
pub fn mean_average_precision(scores: &Tensor, labels: &LabelBatch) -> Result<(f64, Vec<usize>)> {
    check_panel(scores, labels)?;
    let mut aps = Vec::new();
    let mut skipped = Vec::new();
    for k in 0..labels.classes() {
        let (s, y) = column(scores, labels, k);
        match average_precision(&s, &y) {
            Ok(v) => aps.push(v),
            Err(Error::UndefinedMetric(_)) => skipped.push(k),
            Err(e) => return Err(e),
        }
    }
    if aps.is_empty() {
        return Err(Error::UndefinedMetric("no class has a positive for mAP".into()));
    }
    Ok((aps.iter().sum::<f64>() / aps.len() as f64, skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub macro_auc: f64,
    pub micro_auc: f64,
    pub map: f64,
    pub per_class_auc: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
}

pub fn evaluate(scores: &Tensor, labels: &LabelBatch) -> Result<EvalResult> {
    let per_class_auc = per_class_auc(scores, labels)?;
    let (macro_auc, skipped_classes) = macro_auc(scores, labels)?;
    Ok(EvalResult {
        macro_auc,
        micro_auc: micro_auc(scores, labels)?,
        map: mean_average_precision(scores, labels)?.0,
        per_class_auc,
        skipped_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub resamples: usize,
    pub degenerate: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Set when the point estimate falls outside `[lo, hi]`.
    pub flagged: bool,
}

/// Nearest-rank percentile of sorted values: index `ceil(q·n) − 1`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let r = (q * n as f64).ceil() as isize - 1;
    sorted[r.clamp(0, n as isize - 1) as usize]
}

/// Row indices of resample `r`.
pub fn resample_indices(seed: u64, r: usize, rows: usize) -> Vec<usize> {
    let mut rng = Rng::new(seed ^ r as u64);
    (0..rows).map(|_| rng.below(rows)).collect()
}

/// Percentile bootstrap over sample rows. Resamples where the metric is
/// undefined are skipped and counted; more than half skipped is an error.
pub fn bootstrap_ci<F>(
    metric: F,
    scores: &Tensor,
    labels: &LabelBatch,
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapCi>
where
    F: Fn(&Tensor, &LabelBatch) -> Result<f64> + Sync,
{
    if resamples == 0 {
        return Err(Error::Config("bootstrap needs at least one resample".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0, 1]")));
    }
    check_panel(scores, labels)?;
    let point = metric(scores, labels)?;
    let rows = labels.rows();
    let values: Vec<Option<f64>> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let idx = resample_indices(seed, r, rows);
            let s = scores.select_rows(&idx)?;
            match metric(&s, &labels.select_rows(&idx)) {
                Ok(v) => Ok(Some(v)),
                Err(Error::UndefinedMetric(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut valid: Vec<f64> = values.iter().flatten().copied().collect();
    let degenerate = resamples - valid.len();
    if 2 * degenerate > resamples {
        return Err(Error::Degenerate(format!(
            "{degenerate} of {resamples} bootstrap resamples degenerate"
        )));
    }
    valid.sort_by(f64::total_cmp);
    let lo = nearest_rank(&valid, alpha / 2.0);
    let hi = nearest_rank(&valid, 1.0 - alpha / 2.0);
    Ok(BootstrapCi {
        point,
        lo,
        hi,
        resamples,
        degenerate,
        alpha,
        seed,
        flagged: !(lo <= point && point <= hi),
    })
}

/// One metric in the eval report; CI bounds only when bootstrapped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub point: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: BTreeMap<String, MetricReport>,
    pub skipped_classes: Vec<usize>,
    pub resamples: usize,
    pub alpha: f64,
    pub seed: u64,
    pub aggregation_mode: String,
}

pub type MetricFn = fn(&Tensor, &LabelBatch) -> Result<f64>;

pub fn macro_metric(s: &Tensor, l: &LabelBatch) -> Result<f64> {
    macro_auc(s, l).map(|v| v.0)
}

pub fn micro_metric(s: &Tensor, l: &LabelBatch) -> Result<f64> {
    micro_auc(s, l)
}

pub fn map_metric(s: &Tensor, l: &LabelBatch) -> Result<f64> {
    mean_average_precision(s, l).map(|v| v.0)
}

/// The three headline metrics under their report names.
pub fn standard_metrics() -> [(&'static str, MetricFn); 3] {
    [
        ("macro_auc", macro_metric as MetricFn),
        ("micro_auc", micro_metric as MetricFn),
        ("map", map_metric as MetricFn),
    ]
}

/// Point estimates (and CIs when `resamples > 0`) for named metrics, each
/// bootstrapped independently from the same seed.
pub fn report_metrics(
    named: &[(String, MetricFn)],
    scores: &Tensor,
    labels: &LabelBatch,
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<BTreeMap<String, MetricReport>> {
    let mut out = BTreeMap::new();
    for (name, f) in named {
        let entry = if resamples == 0 {
            MetricReport {
                point: f(scores, labels)?,
                lo: None,
                hi: None,
            }
        } else {
            let ci = bootstrap_ci(f, scores, labels, resamples, alpha, seed)?;
            MetricReport {
                point: ci.point,
                lo: Some(ci.lo),
                hi: Some(ci.hi),
            }
        };
        out.insert(name.clone(), entry);
    }
    Ok(out)
}
