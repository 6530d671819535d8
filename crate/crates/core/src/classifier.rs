//! Dual-prompt multi-label zero-shot classification.
//!
//! Per-position cosine similarities between image positions and a prompt
//! feature are collapsed to one score per class (mean or max over
//! positions), and the positive/negative scores are combined by a two-way
//! softmax at temperature τ.
//!
//! When the spatial fusion gate is active the mean is weighted by the gate.
//! Cosine similarity is invariant to the gate's per-position rescaling, so
//! this weighting is how the fusion kernel acts on the scores.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backbone::{cosine_sim, encode_texts, temperature, TextTokens};
use crate::error::{dim_err, Result};
use crate::model::{FrozenInputs, Model};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for AggregationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            _ => Err(format!("unknown aggregation `{s}` (expected mean or max)")),
        }
    }
}

impl std::fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Max => "max",
        })
    }
}

/// Aggregated cosine similarity of the rows of `u_gl [L, D]` with `w`.
pub fn class_similarity(u_gl: &Tensor, w: &[f64], mode: AggregationMode) -> Result<f64> {
    if u_gl.rank() != 2 || u_gl.shape()[0] == 0 {
        return dim_err("class_similarity", format!("expected [L, D], got {:?}", u_gl.shape()));
    }
    let sims = (0..u_gl.shape()[0])
        .map(|k| cosine_sim(u_gl.row(k), w))
        .collect::<Result<Vec<f64>>>()?;
    Ok(match mode {
        AggregationMode::Mean => sims.iter().sum::<f64>() / sims.len() as f64,
        AggregationMode::Max => sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// `exp(a/τ) / (exp(a/τ) + exp(b/τ))`, evaluated without overflow.
pub fn dual_softmax(s_pos: f64, s_neg: f64, tau: f64) -> f64 {
    let d = (s_pos - s_neg) / tau;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Graph form of [`class_similarity`] for a batch: positions `[B, L, D]`,
/// prompt features `[N, D]`, optional gate `[B, L]`; returns `[B, N]`.
pub fn aggregated_similarity(
    g: &mut Graph,
    positions: Var,
    gate: Option<Var>,
    w: Var,
    mode: AggregationMode,
) -> Result<Var> {
    let s = g.shape(positions)?.to_vec();
    let sw = g.shape(w)?.to_vec();
    if s.len() != 3 || sw.len() != 2 || s[2] != sw[1] {
        return dim_err("class_similarity", format!("positions {s:?} vs prompts {sw:?}"));
    }
    let (b, l, d) = (s[0], s[1], s[2]);
    let n = sw[0];
    let flat = g.reshape(positions, &[b * l, d])?;
    let un = g.normalize_last(flat)?;
    let wn = g.normalize_last(w)?;
    let cos = g.matmul_t(un, wn)?;
    let cos = g.reshape(cos, &[b, l, n])?;
    match (mode, gate) {
        (AggregationMode::Max, _) => g.max_axis(cos, 1),
        (AggregationMode::Mean, None) => g.mean_axis(cos, 1),
        (AggregationMode::Mean, Some(a)) => {
            let total = g.sum_axis(a, 1)?;
            let inv = g.pow(total, -1.0)?;
            let weights = g.mul_last_fibre(a, inv)?;
            let weights = g.reshape(weights, &[b, 1, l])?;
            let out = g.bmm(weights, cos, false)?;
            g.reshape(out, &[b, n])
        }
    }
}

/// Per-class probabilities and the raw aggregated similarities, `[B, N_c]`.
/// `neg_sims` is zero for positive-only prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutput {
    pub probs: Tensor,
    pub pos_sims: Tensor,
    pub neg_sims: Tensor,
}

impl ClassifierOutput {
    fn concat(parts: Vec<ClassifierOutput>) -> Result<ClassifierOutput> {
        let n = parts.first().map_or(0, |p| p.probs.shape()[1]);
        let rows: usize = parts.iter().map(|p| p.probs.shape()[0]).sum();
        let join = |f: &dyn Fn(&ClassifierOutput) -> &Tensor| -> Result<Tensor> {
            let data: Vec<f64> = parts.iter().flat_map(|p| f(p).data().iter().copied()).collect();
            Tensor::new(vec![rows, n], data)
        };
        Ok(ClassifierOutput {
            probs: join(&|p| &p.probs)?,
            pos_sims: join(&|p| &p.pos_sims)?,
            neg_sims: join(&|p| &p.neg_sims)?,
        })
    }
}

/// Zero-shot prediction for `images [B, d_raw]` over an arbitrary class set.
///
/// Images are processed in chunks of `batch_size` (all at once for `None`);
/// each chunk's global features are the decoder's context.
pub fn predict(
    model: &Model,
    store: &ParamStore,
    images: &Tensor,
    class_tokens: &[TextTokens],
    batch_size: Option<usize>,
) -> Result<ClassifierOutput> {
    let (global, local) = model.image_features(store, images)?;
    let class_feats = model.class_features(store, class_tokens)?;
    predict_frozen(model, store, &global, &local, &class_feats, class_tokens, batch_size)
}

/// [`predict`] from precomputed backbone features.
pub fn predict_frozen(
    model: &Model,
    store: &ParamStore,
    global: &Tensor,
    local: &Tensor,
    class_feats: &Tensor,
    class_tokens: &[TextTokens],
    batch_size: Option<usize>,
) -> Result<ClassifierOutput> {
    let b = global.shape()[0];
    if b == 0 || class_tokens.is_empty() {
        return dim_err("predict", "need at least one image and one class");
    }
    let chunk = batch_size.unwrap_or(b).max(1);
    let mut parts = Vec::new();
    for start in (0..b).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(b)).collect();
        let gl = global.select_rows(&idx)?;
        let lo = local.select_rows(&idx)?;
        let inputs = FrozenInputs {
            global: &gl,
            local: &lo,
            class_feats,
            class_tokens,
        };
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, &inputs)?;
        let pos_sims = g.value(out.pos_sim)?;
        let neg_sims = match out.neg_sim {
            Some(v) => g.value(v)?,
            None => Tensor::zeros(pos_sims.shape()),
        };
        parts.push(ClassifierOutput {
            probs: g.value(out.probs)?,
            pos_sims,
            neg_sims,
        });
    }
    ClassifierOutput::concat(parts)
}

/// Fixed-template dual-prompt baseline: prompts are the encoded template
/// token sequences, positions are global + local features, plain mean.
pub fn predict_baseline(
    model: &Model,
    store: &ParamStore,
    images: &Tensor,
    pos_templates: &[TextTokens],
    neg_templates: &[TextTokens],
    mode: AggregationMode,
) -> Result<ClassifierOutput> {
    let (global, local) = model.image_features(store, images)?;
    baseline_frozen(model, store, &global, &local, pos_templates, neg_templates, mode)
}

pub fn baseline_frozen(
    model: &Model,
    store: &ParamStore,
    global: &Tensor,
    local: &Tensor,
    pos_templates: &[TextTokens],
    neg_templates: &[TextTokens],
    mode: AggregationMode,
) -> Result<ClassifierOutput> {
    if pos_templates.len() != neg_templates.len() || pos_templates.is_empty() {
        return dim_err("predict_baseline", "template lists differ in length or are empty");
    }
    let bcfg = &model.cfg.backbone;
    let scale = 1.0 / temperature(store)?;
    let mut g = Graph::new();
    let gl = g.constant(global.clone())?;
    let lo = g.constant(local.clone())?;
    let positions = crate::fusion::concat_positions(&mut g, gl, lo)?;
    let pos_refs: Vec<&TextTokens> = pos_templates.iter().collect();
    let neg_refs: Vec<&TextTokens> = neg_templates.iter().collect();
    let wp = encode_texts(&mut g, store, bcfg, &pos_refs)?;
    let wn = encode_texts(&mut g, store, bcfg, &neg_refs)?;
    let sp = aggregated_similarity(&mut g, positions, None, wp, mode)?;
    let sn = aggregated_similarity(&mut g, positions, None, wn, mode)?;
    let d = g.sub(sp, sn)?;
    let d = g.scale(d, scale)?;
    let probs = g.sigmoid(d)?;
    Ok(ClassifierOutput {
        probs: g.value(probs)?,
        pos_sims: g.value(sp)?,
        neg_sims: g.value(sn)?,
    })
}

/// Writes `sample_id,class_id,prob,pos_sim,neg_sim` rows.
pub fn write_predictions_csv<W: Write>(
    mut w: W,
    out: &ClassifierOutput,
    sample_ids: &[usize],
    class_ids: &[usize],
) -> Result<()> {
    let s = out.probs.shape();
    if s != [sample_ids.len(), class_ids.len()] {
        return dim_err("write_predictions_csv", format!("{s:?} vs {} × {} ids", sample_ids.len(), class_ids.len()));
    }
    writeln!(w, "sample_id,class_id,prob,pos_sim,neg_sim")?;
    for (i, sid) in sample_ids.iter().enumerate() {
        for (k, cid) in class_ids.iter().enumerate() {
            writeln!(
                w,
                "{sid},{cid},{},{},{}",
                out.probs.at(&[i, k]),
                out.pos_sims.at(&[i, k]),
                out.neg_sims.at(&[i, k])
            )?;
        }
    }
    Ok(())
}
