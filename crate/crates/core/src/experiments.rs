//! GZSL evaluation, the template baseline, ablations and the prompt-length
//! sweep, all on one synthetic dataset.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classifier::{baseline_frozen, predict_frozen, AggregationMode, ClassifierOutput};
use crate::decoder::DecoderLayout;
use crate::error::{dim_err, Result};
use crate::metrics::{macro_metric, report_metrics, standard_metrics, EvalReport, MetricFn, MetricReport};
use crate::model::{Model, ModelConfig, SpatialFeatures};
use crate::objectives::LabelBatch;
use crate::params::ParamStore;
use crate::synth::{self, Dataset, SplitName, SynthConfig};
use crate::tensor::Tensor;
use crate::train::{train_pretrain, train_prompt, TrainConfig, TrainOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub resamples: usize,
    pub alpha: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            resamples: crate::metrics::DEFAULT_RESAMPLES,
            alpha: crate::metrics::DEFAULT_ALPHA,
            seed: 0,
            batch_size: 256,
        }
    }
}

/// Columns `cols` of a `[B, N]` tensor.
pub fn select_columns(t: &Tensor, cols: &[usize]) -> Result<Tensor> {
    if t.rank() != 2 || cols.iter().any(|&c| c >= t.shape()[1]) {
        return dim_err("select_columns", format!("{:?} with columns {cols:?}", t.shape()));
    }
    let (b, n) = (t.shape()[0], t.shape()[1]);
    let mut out = Vec::with_capacity(b * cols.len());
    for i in 0..b {
        out.extend(cols.iter().map(|&c| t.data()[i * n + c]));
    }
    Tensor::new(vec![b, cols.len()], out)
}

/// Standard metrics over all classes plus `seen_macro_auc` and
/// `unseen_macro_auc` on the respective column subsets.
pub fn gzsl_report(
    scores: &Tensor,
    labels: &LabelBatch,
    seen: &[usize],
    opts: &EvalOptions,
    aggregation: AggregationMode,
) -> Result<EvalReport> {
    let named: Vec<(String, MetricFn)> = standard_metrics().iter().map(|(n, f)| (n.to_string(), *f)).collect();
    let mut metrics = report_metrics(&named, scores, labels, opts.resamples, opts.alpha, opts.seed)?;
    let unseen: Vec<usize> = (0..labels.classes()).filter(|k| !seen.contains(k)).collect();
    let macro_only: Vec<(String, MetricFn)> = vec![("macro_auc".into(), macro_metric)];
    for (name, cols) in [("seen_macro_auc", seen.to_vec()), ("unseen_macro_auc", unseen)] {
        if cols.is_empty() {
            continue;
        }
        let s = select_columns(scores, &cols)?;
        let l = labels.select_classes(&cols);
        let r = report_metrics(&macro_only, &s, &l, opts.resamples, opts.alpha, opts.seed)?;
        metrics.insert(name.to_string(), r["macro_auc"].clone());
    }
    let (_, skipped_classes) = crate::metrics::macro_auc(scores, labels)?;
    Ok(EvalReport {
        metrics,
        skipped_classes,
        resamples: opts.resamples,
        alpha: opts.alpha,
        seed: opts.seed,
        aggregation_mode: aggregation.to_string(),
    })
}

/// PsPG predictions over every class of `ds` for one split.
pub fn predict_split(model: &Model, store: &ParamStore, ds: &Dataset, split: SplitName, batch_size: usize) -> Result<ClassifierOutput> {
    let s = ds.split(split);
    let (global, local) = model.image_features(store, &s.images)?;
    let class_feats = model.class_features(store, &ds.class_tokens)?;
    predict_frozen(model, store, &global, &local, &class_feats, &ds.class_tokens, Some(batch_size))
}

/// Template-baseline predictions over every class of `ds`.
pub fn baseline_split(model: &Model, store: &ParamStore, ds: &Dataset, split: SplitName) -> Result<ClassifierOutput> {
    let s = ds.split(split);
    let (global, local) = model.image_features(store, &s.images)?;
    let all: Vec<usize> = (0..ds.n_classes()).collect();
    let (pos, neg) = ds.templates(&all);
    baseline_frozen(model, store, &global, &local, &pos, &neg, model.cfg.aggregation)
}

pub fn evaluate_split(model: &Model, store: &ParamStore, ds: &Dataset, split: SplitName, opts: &EvalOptions) -> Result<EvalReport> {
    let out = predict_split(model, store, ds, split, opts.batch_size)?;
    gzsl_report(&out.probs, &ds.split(split).labels, ds.seen(), opts, model.cfg.aggregation)
}

pub fn evaluate_baseline(model: &Model, store: &ParamStore, ds: &Dataset, split: SplitName, opts: &EvalOptions) -> Result<EvalReport> {
    let out = baseline_split(model, store, ds, split)?;
    gzsl_report(&out.probs, &ds.split(split).labels, ds.seen(), opts, model.cfg.aggregation)
}

/// Scores `x·p_k` against the generator's own prototypes: the best any
/// model can do with linear evidence.
pub fn prototype_oracle(ds: &Dataset, split: SplitName) -> Result<Tensor> {
    let protos = synth::generator_prototypes(&ds.config)?;
    let x = &ds.split(split).images;
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let n = protos.shape()[0];
    let mut out = Vec::with_capacity(b * n);
    for i in 0..b {
        let row = &x.data()[i * d..(i + 1) * d];
        for k in 0..n {
            out.push(row.iter().zip(protos.row(k)).map(|(a, p)| a * p).sum());
        }
    }
    Tensor::new(vec![b, n], out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub data: SynthConfig,
    pub pretrain: TrainConfig,
    pub prompt: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: SynthConfig::default(),
            pretrain: TrainConfig::pretrain(),
            prompt: TrainConfig::prompt(),
            eval: EvalOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub dataset: Dataset,
    pub backbone: TrainOutput,
    pub prompt: TrainOutput,
    pub pspg: EvalReport,
    pub baseline: EvalReport,
}

/// gen-data → pretrain → prompt-learn → GZSL eval on the test split.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    let dataset = synth::generate(&cfg.data)?;
    let backbone = train_pretrain(&cfg.pretrain, &dataset)?;
    let prompt = train_prompt(&cfg.prompt, &backbone.store, &dataset, None)?;
    let model = Model::new(cfg.prompt.model.clone())?;
    let pspg = evaluate_split(&model, &prompt.store, &dataset, SplitName::Test, &cfg.eval)?;
    let baseline = evaluate_baseline(&model, &backbone.store, &dataset, SplitName::Test, &cfg.eval)?;
    Ok(PipelineRun {
        dataset,
        backbone,
        prompt,
        pspg,
        baseline,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub report: EvalReport,
    pub best_epoch: Option<usize>,
}

/// Trains and evaluates one prompt-phase configuration on a fixed backbone.
pub fn run_variant(name: &str, cfg: &TrainConfig, backbone: &ParamStore, ds: &Dataset, opts: &EvalOptions) -> Result<VariantResult> {
    let out = train_prompt(cfg, backbone, ds, None)?;
    let model = Model::new(cfg.model.clone())?;
    Ok(VariantResult {
        name: name.to_string(),
        report: evaluate_split(&model, &out.store, ds, SplitName::Test, opts)?,
        best_epoch: out.best_epoch,
    })
}

fn with_model(base: &TrainConfig, f: impl FnOnce(&mut ModelConfig)) -> TrainConfig {
    let mut c = base.clone();
    f(&mut c.model);
    c
}

/// Decoder layouts followed by fusion on/off, in table order.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    vec![
        ("dual-decoder", with_model(base, |m| m.decoder.layout = DecoderLayout::Dual)),
        ("single-decoder", with_model(base, |m| m.decoder.layout = DecoderLayout::Single)),
        ("pos-only", with_model(base, |m| m.decoder.layout = DecoderLayout::PosOnly)),
        ("global-local-fused", with_model(base, |m| m.features = SpatialFeatures::Fused)),
        ("global-local", with_model(base, |m| m.features = SpatialFeatures::GlobalLocal)),
        ("global-only", with_model(base, |m| m.features = SpatialFeatures::Global)),
    ]
}

pub fn run_ablations(base: &TrainConfig, backbone: &ParamStore, ds: &Dataset, opts: &EvalOptions) -> Result<Vec<VariantResult>> {
    ablation_configs(base)
        .iter()
        .map(|(name, cfg)| run_variant(name, cfg, backbone, ds, opts))
        .collect()
}

pub const SWEEP_LENGTHS: [usize; 3] = [8, 16, 32];

pub fn run_length_sweep(base: &TrainConfig, lengths: &[usize], backbone: &ParamStore, ds: &Dataset, opts: &EvalOptions) -> Result<Vec<VariantResult>> {
    lengths
        .iter()
        .map(|&n| {
            let cfg = with_model(base, |m| m.decoder.n = n);
            run_variant(&format!("n={n}"), &cfg, backbone, ds, opts)
        })
        .collect()
}

fn cell(m: Option<&MetricReport>) -> String {
    match m {
        None => "-".into(),
        Some(MetricReport { point, lo: Some(lo), hi: Some(hi) }) => format!("{point:.4} [{lo:.4}, {hi:.4}]"),
        Some(m) => format!("{:.4}", m.point),
    }
}

pub const TABLE_METRICS: [&str; 5] = ["seen_macro_auc", "unseen_macro_auc", "macro_auc", "micro_auc", "map"];

/// Markdown table, one row per variant, `point [lo, hi]` cells.
pub fn format_table(rows: &[VariantResult]) -> String {
    let mut s = String::from("| variant |");
    for m in TABLE_METRICS {
        let _ = write!(s, " {m} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(TABLE_METRICS.len()));
    s.push('\n');
    for r in rows {
        let _ = write!(s, "| {} |", r.name);
        for m in TABLE_METRICS {
            let _ = write!(s, " {} |", cell(r.report.metrics.get(m)));
        }
        s.push('\n');
    }
    s
}

/// Whether the CIs of `a` and `b` for `metric` intersect.
pub fn ci_overlap(a: &EvalReport, b: &EvalReport, metric: &str) -> Option<bool> {
    let (x, y) = (a.metrics.get(metric)?, b.metrics.get(metric)?);
    Some(x.lo? <= y.hi? && y.lo? <= x.hi?)
}
