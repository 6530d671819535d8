//! Training losses: asymmetric loss, batch-level pairwise co-occurrence loss
//! (SPCL) and its per-sample variant (PCL).

use serde::{Deserialize, Serialize};

use crate::backbone::{encode_text_embedded, BackboneConfig};
use crate::error::{dim_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

pub const EPS: f64 = 1e-7;

/// `B×N_c` labels over {1 positive, 0 negative, −1 unknown}, samples as rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    rows: usize,
    classes: usize,
    values: Vec<i8>,
}

impl LabelBatch {
    pub fn new(rows: usize, classes: usize, values: Vec<i8>) -> Result<Self> {
        if values.len() != rows * classes {
            return dim_err("labels", format!("{} values for {rows}×{classes}", values.len()));
        }
        if let Some(v) = values.iter().find(|v| !matches!(v, -1..=1)) {
            return Err(Error::Config(format!("label value {v} outside {{-1, 0, 1}}")));
        }
        Ok(Self { rows, classes, values })
    }

    pub fn from_rows(rows: &[Vec<i8>]) -> Result<Self> {
        let classes = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != classes) {
            return dim_err("labels", "ragged rows");
        }
        Self::new(rows.len(), classes, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn get(&self, i: usize, k: usize) -> i8 {
        self.values[i * self.classes + k]
    }

    pub fn row(&self, i: usize) -> &[i8] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }

    pub fn select_rows(&self, idx: &[usize]) -> LabelBatch {
        let mut values = Vec::with_capacity(idx.len() * self.classes);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        LabelBatch {
            rows: idx.len(),
            classes: self.classes,
            values,
        }
    }

    pub fn select_classes(&self, cls: &[usize]) -> LabelBatch {
        let mut values = Vec::with_capacity(self.rows * cls.len());
        for i in 0..self.rows {
            values.extend(cls.iter().map(|&k| self.get(i, k)));
        }
        LabelBatch {
            rows: self.rows,
            classes: cls.len(),
            values,
        }
    }

    /// Column `k` with unknown entries dropped: `(row index, positive)`.
    pub fn known_column(&self, k: usize) -> Vec<(usize, bool)> {
        (0..self.rows)
            .filter_map(|i| match self.get(i, k) {
                -1 => None,
                v => Some((i, v == 1)),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub clip: f64,
    pub spcl_enabled: bool,
    /// Use the per-sample PCL variant instead of SPCL.
    pub pcl_variant: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma_plus: 1.0,
            gamma_minus: 2.0,
            clip: 0.05,
            spcl_enabled: true,
            pcl_variant: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_plus >= 0.0 && self.gamma_minus >= 0.0) {
            return Err(Error::Config("ASL exponents must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.clip) {
            return Err(Error::Config("ASL clip must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Loss value plus the number of probabilities pushed into `[ε, 1−ε]`.
#[derive(Debug, Clone, Copy)]
pub struct LossOut {
    pub loss: Var,
    pub clamped: usize,
}

fn clamp_probs(g: &mut Graph, p: Var) -> Result<(Var, usize)> {
    let clamped = g.data(p)?.iter().filter(|&&v| !(v > EPS && v < 1.0 - EPS)).count();
    Ok((g.clamp(p, EPS, 1.0 - EPS)?, clamped))
}

fn pow_or_one(g: &mut Graph, x: Var, e: f64) -> Result<Option<Var>> {
    if e == 0.0 {
        Ok(None)
    } else {
        g.pow(x, e).map(Some)
    }
}

/// Asymmetric loss averaged over known entries of `p [B, N_c]`.
///
/// With no known entries the loss is a constant zero.
pub fn asl_loss(g: &mut Graph, p: Var, labels: &LabelBatch, cfg: &LossConfig) -> Result<LossOut> {
    cfg.validate()?;
    let s = g.shape(p)?.to_vec();
    if s != [labels.rows(), labels.classes()] {
        return dim_err("asl_loss", format!("probs {s:?} vs labels {}×{}", labels.rows(), labels.classes()));
    }
    let pos_mask: Vec<f64> = labels.values().iter().map(|&v| (v == 1) as u8 as f64).collect();
    let neg_mask: Vec<f64> = labels.values().iter().map(|&v| (v == 0) as u8 as f64).collect();
    let known = labels.values().iter().filter(|&&v| v != -1).count();
    if known == 0 {
        let loss = g.constant(Tensor::scalar(0.0))?;
        return Ok(LossOut { loss, clamped: 0 });
    }
    let (p, clamped) = clamp_probs(g, p)?;

    // positives: (1−p)^γ+ · ln p
    let ln_p = g.ln(p)?;
    let one_minus = g.neg(p)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let pos = match pow_or_one(g, one_minus, cfg.gamma_plus)? {
        Some(w) => g.mul(w, ln_p)?,
        None => ln_p,
    };

    // negatives: p_m^γ− · ln(1−p_m), p_m = max(p − c, 0)
    let shifted = g.add_scalar(p, -cfg.clip)?;
    let pm = g.clamp(shifted, 0.0, f64::INFINITY)?;
    let q = g.neg(pm)?;
    let q = g.add_scalar(q, 1.0)?;
    let ln_q = g.ln(q)?;
    let neg = match pow_or_one(g, pm, cfg.gamma_minus)? {
        Some(w) => g.mul(w, ln_q)?,
        None => ln_q,
    };

    let pm_v = g.constant(Tensor::new(s.clone(), pos_mask)?)?;
    let nm_v = g.constant(Tensor::new(s, neg_mask)?)?;
    let a = g.mul(pos, pm_v)?;
    let b = g.mul(neg, nm_v)?;
    let both = g.add(a, b)?;
    let total = g.sum(both)?;
    let loss = g.scale(total, -1.0 / known as f64)?;
    Ok(LossOut { loss, clamped })
}

/// `Ω = AᵀA` with unknown entries counted as 0.
pub fn cooccurrence_matrix(labels: &LabelBatch) -> Vec<Vec<u64>> {
    let n = labels.classes();
    let mut omega = vec![vec![0u64; n]; n];
    for r in 0..labels.rows() {
        let row = labels.row(r);
        for i in 0..n {
            if row[i] != 1 {
                continue;
            }
            for j in 0..n {
                if row[j] == 1 {
                    omega[i][j] += 1;
                }
            }
        }
    }
    omega
}

/// Pairs `(i, j)`, `i < j`, in row-major strict-upper-triangle order.
pub fn class_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Binarised strict upper triangle of `Ω`.
pub fn cooccurrence_targets(labels: &LabelBatch) -> Vec<u8> {
    let omega = cooccurrence_matrix(labels);
    class_pairs(labels.classes())
        .into_iter()
        .map(|(i, j)| (omega[i][j] >= 1) as u8)
        .collect()
}

/// Encodes each concatenated pair `P_i P_j` of positive prompts
/// `[N_c, n, D_out]` into `[C(N_c, 2), d_vlp]`. `None` when `N_c < 2`.
pub fn pairwise_prompt_features(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &BackboneConfig,
    prompts: Var,
) -> Result<Option<Var>> {
    let s = g.shape(prompts)?.to_vec();
    if s.len() != 3 {
        return dim_err("pairwise_prompt_features", format!("expected [N_c, n, D], got {s:?}"));
    }
    let pairs = class_pairs(s[0]);
    if pairs.is_empty() {
        return Ok(None);
    }
    let left: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let a = g.index_select(prompts, 0, &left)?;
    let b = g.index_select(prompts, 0, &right)?;
    let seq = g.concat(&[a, b], 1)?;
    encode_text_embedded(g, store, cfg, seq, None).map(Some)
}

/// Mean BCE of `p` against `targets` (same shape), ε-clamped.
fn bce_mean(g: &mut Graph, p: Var, targets: Tensor) -> Result<LossOut> {
    let n = targets.numel();
    if n == 0 {
        return dim_err("bce", "empty target set");
    }
    let (p, clamped) = clamp_probs(g, p)?;
    let inv: Vec<f64> = targets.data().iter().map(|t| 1.0 - t).collect();
    let inv = Tensor::new(targets.shape().to_vec(), inv)?;
    let t = g.constant(targets)?;
    let ti = g.constant(inv)?;
    let ln_p = g.ln(p)?;
    let q = g.neg(p)?;
    let q = g.add_scalar(q, 1.0)?;
    let ln_q = g.ln(q)?;
    let a = g.mul(t, ln_p)?;
    let b = g.mul(ti, ln_q)?;
    let s = g.add(a, b)?;
    let s = g.sum(s)?;
    let loss = g.scale(s, -1.0 / n as f64)?;
    Ok(LossOut { loss, clamped })
}

/// SPCL from pairwise probabilities `p [B, P]`: max-pool over the batch,
/// then BCE against `q`, normalised by the pair count.
pub fn spcl_loss(g: &mut Graph, pair_probs: Var, q: &[u8]) -> Result<LossOut> {
    let s = g.shape(pair_probs)?.to_vec();
    if s.len() != 2 || s[1] != q.len() || s[0] == 0 {
        return dim_err("spcl_loss", format!("probs {s:?} vs {} targets", q.len()));
    }
    let pooled = g.max_axis(pair_probs, 0)?;
    let pooled = g.reshape(pooled, &[1, q.len()])?;
    let t = Tensor::new(vec![1, q.len()], q.iter().map(|&v| v as f64).collect())?;
    bce_mean(g, pooled, t)
}

/// PCL: per-sample pair targets `a_i·a_j`, BCE averaged over all entries of
/// `p [B, P]`.
pub fn pcl_loss(g: &mut Graph, pair_probs: Var, labels: &LabelBatch) -> Result<LossOut> {
    let s = g.shape(pair_probs)?.to_vec();
    let pairs = class_pairs(labels.classes());
    if s != [labels.rows(), pairs.len()] {
        return dim_err("pcl_loss", format!("probs {s:?} vs {} rows × {} pairs", labels.rows(), pairs.len()));
    }
    let mut t = Vec::with_capacity(s[0] * s[1]);
    for r in 0..labels.rows() {
        let row = labels.row(r);
        t.extend(pairs.iter().map(|&(i, j)| (row[i] == 1 && row[j] == 1) as u8 as f64));
    }
    bce_mean(g, pair_probs, Tensor::new(s, t)?)
}

/// `L = L_ASL + L_SPCL`; `L_ASL` alone when the pairwise term is absent.
pub fn total_loss(g: &mut Graph, asl: Var, spcl: Option<Var>) -> Result<Var> {
    match spcl {
        Some(s) => g.add(asl, s),
        None => Ok(asl),
    }
}
