//! Shared layers: linear maps, the GRU cell and multi-head attention.
//!
//! Layers are described by a name prefix into a [`ParamStore`]; forward
//! functions bind the parameters they need into the current graph.

use crate::error::{dim_err, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// `x · W (+ b)` for `x` of shape `[rows, in]`.
pub fn linear(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    weight: &str,
    bias: Option<&str>,
) -> Result<Var> {
    let w = store.bind(g, weight)?;
    let y = g.matmul(x, w)?;
    match bias {
        Some(b) => {
            let b = store.bind(g, b)?;
            g.add_trailing(y, b)
        }
        None => Ok(y),
    }
}

/// Parameter names of a GRU cell under `prefix`.
pub struct GruNames {
    pub w_z: String,
    pub u_z: String,
    pub b_z: String,
    pub w_r: String,
    pub u_r: String,
    pub b_r: String,
    pub w_h: String,
    pub u_h: String,
    pub b_h: String,
}

impl GruNames {
    pub fn new(prefix: &str) -> Self {
        let n = |s: &str| format!("{prefix}.{s}");
        Self {
            w_z: n("w_z"),
            u_z: n("u_z"),
            b_z: n("b_z"),
            w_r: n("w_r"),
            u_r: n("u_r"),
            b_r: n("b_r"),
            w_h: n("w_h"),
            u_h: n("u_h"),
            b_h: n("b_h"),
        }
    }
}

pub fn init_gru(store: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize, std: f64, rng: &mut Rng) {
    let n = GruNames::new(prefix);
    for (w, u, b) in [(&n.w_z, &n.u_z, &n.b_z), (&n.w_r, &n.u_r, &n.b_r), (&n.w_h, &n.u_h, &n.b_h)] {
        store.init_randn(w, &[d_in, d_h], std, rng);
        store.init_randn(u, &[d_h, d_h], std, rng);
        store.init_zeros(b, &[d_h]);
    }
}

/// One GRU update:
/// `z = σ(W_z t + U_z h + b_z)`, `r = σ(W_r t + U_r h + b_r)`,
/// `ĥ = tanh(W t + U (r ⊙ h) + b)`, `h' = (1 − z) ⊙ h + z ⊙ ĥ`.
pub fn gru_step(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, h: Var) -> Result<Var> {
    let n = GruNames::new(prefix);
    let gate = |g: &mut Graph, w: &str, u: &str, b: &str, hin: Var| -> Result<Var> {
        let wx = linear(g, store, x, w, None)?;
        let uh = linear(g, store, hin, u, None)?;
        let s = g.add(wx, uh)?;
        let bv = store.bind(g, b)?;
        g.add_trailing(s, bv)
    };
    let z_pre = gate(g, &n.w_z, &n.u_z, &n.b_z, h)?;
    let z = g.sigmoid(z_pre)?;
    let r_pre = gate(g, &n.w_r, &n.u_r, &n.b_r, h)?;
    let r = g.sigmoid(r_pre)?;
    let rh = g.mul(r, h)?;
    let cand_pre = gate(g, &n.w_h, &n.u_h, &n.b_h, rh)?;
    let cand = g.tanh(cand_pre)?;
    let neg_z = g.neg(z)?;
    let keep = g.add_scalar(neg_z, 1.0)?;
    let kept = g.mul(keep, h)?;
    let upd = g.mul(z, cand)?;
    g.add(kept, upd)
}

/// Multi-head scaled dot-product attention with bias-free `q/k/v/o`
/// projections stored under `prefix`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
}

/// Keys and values already projected and split into heads:
/// `[groups·heads, tokens, head_dim]`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedMemory {
    pub keys: Var,
    pub values: Var,
    pub groups: usize,
    pub tokens: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::Error::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            dim,
            heads,
        })
    }

    fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut Rng) {
        for p in ["q", "k", "v", "o"] {
            store.init_randn(&self.name(p), &[self.dim, self.dim], std, rng);
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `[rows, dim] -> [rows, heads, head_dim]`
    fn project_split(&self, g: &mut Graph, store: &ParamStore, x: Var, which: &str) -> Result<Var> {
        let rows = g.shape(x)?[0];
        let y = linear(g, store, x, &self.name(which), None)?;
        g.reshape(y, &[rows, self.heads, self.head_dim()])
    }

    /// Self-attention across the rows of `x: [n, dim]`.
    pub fn self_attend(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x)?.to_vec();
        if s.len() != 2 || s[1] != self.dim {
            return dim_err("self_attention", format!("input {s:?}, dim {}", self.dim));
        }
        let n = s[0];
        let mut qkv = Vec::with_capacity(3);
        for w in ["q", "k", "v"] {
            let p = self.project_split(g, store, x, w)?;
            qkv.push(g.permute(p, &[1, 0, 2])?); // [heads, n, hd]
        }
        let scores = g.bmm(qkv[0], qkv[1], true)?;
        let scores = g.scale(scores, 1.0 / (self.head_dim() as f64).sqrt())?;
        let attn = g.softmax(scores, 2)?;
        let ctx = g.bmm(attn, qkv[2], false)?; // [heads, n, hd]
        let ctx = g.permute(ctx, &[1, 0, 2])?;
        let ctx = g.reshape(ctx, &[n, self.dim])?;
        linear(g, store, ctx, &self.name("o"), None)
    }

    /// Projects a per-group memory `[groups, tokens, dim]` into keys/values.
    pub fn project_memory(&self, g: &mut Graph, store: &ParamStore, mem: Var) -> Result<ProjectedMemory> {
        let s = g.shape(mem)?.to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return dim_err("cross_attention", format!("memory {s:?}, dim {}", self.dim));
        }
        let (groups, tokens) = (s[0], s[1]);
        if tokens == 0 {
            return dim_err("cross_attention", "memory has no tokens");
        }
        let flat = g.reshape(mem, &[groups * tokens, self.dim])?;
        let mut kv = Vec::with_capacity(2);
        for w in ["k", "v"] {
            let y = linear(g, store, flat, &self.name(w), None)?;
            let y = g.reshape(y, &[groups, tokens, self.heads, self.head_dim()])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            kv.push(g.reshape(y, &[groups * self.heads, tokens, self.head_dim()])?);
        }
        Ok(ProjectedMemory {
            keys: kv[0],
            values: kv[1],
            groups,
            tokens,
        })
    }

    /// One query row per group attends over that group's memory.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, query: Var, mem: &ProjectedMemory) -> Result<Var> {
        let s = g.shape(query)?.to_vec();
        if s != [mem.groups, self.dim] {
            return dim_err(
                "cross_attention",
                format!("query {s:?} vs {} groups of dim {}", mem.groups, self.dim),
            );
        }
        let q = self.project_split(g, store, query, "q")?;
        let q = g.reshape(q, &[mem.groups * self.heads, 1, self.head_dim()])?;
        let scores = g.bmm(q, mem.keys, true)?;
        let scores = g.scale(scores, 1.0 / (self.head_dim() as f64).sqrt())?;
        let attn = g.softmax(scores, 2)?;
        let ctx = g.bmm(attn, mem.values, false)?;
        let ctx = g.reshape(ctx, &[mem.groups, self.dim])?;
        linear(g, store, ctx, &self.name("o"), None)
    }
}

/// Constant all-zero tensor of the given shape.
pub fn zeros(g: &mut Graph, shape: &[usize]) -> Result<Var> {
    g.constant(Tensor::zeros(shape))
}
