//! Three-parameter spatial attention over concatenated global and local
//! image features.
//!
//! Positions are ordered global first, then the `c_local` locals. For every
//! position the feature-axis mean and max are taken, each is filtered by the
//! same 3-tap zero-padded 1-D kernel, the two responses are summed and passed
//! through a sigmoid, and the resulting gate multiplies that position's
//! feature row.

use crate::error::{dim_err, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

pub const KERNEL: &str = "fusion.kernel";

pub fn init_params(store: &mut ParamStore, rng: &mut Rng) {
    store.init_randn(KERNEL, &[3], 0.1, rng);
}

/// Fused features and the per-position gate that produced them.
#[derive(Debug, Clone, Copy)]
pub struct FusedVars {
    /// `[B, c_local + 1, d_vlp]`
    pub features: Var,
    /// `[B, c_local + 1]`, strictly inside (0, 1).
    pub gate: Var,
}

/// Stacks `global [B, D]` in front of `local [B, C, D]`.
pub fn concat_positions(g: &mut Graph, global: Var, local: Var) -> Result<Var> {
    let sg = g.shape(global)?.to_vec();
    let sl = g.shape(local)?.to_vec();
    if sg.len() != 2 || sl.len() != 3 || sg[0] != sl[0] || sg[1] != sl[2] {
        return dim_err("fuse", format!("global {sg:?} vs local {sl:?}"));
    }
    let g3 = g.reshape(global, &[sg[0], 1, sg[1]])?;
    g.concat(&[g3, local], 1)
}

/// Gated fusion of stacked positions `x: [B, L, D]` with kernel `[3]`.
pub fn fuse_positions(g: &mut Graph, x: Var, kernel: Var) -> Result<FusedVars> {
    let s = g.shape(x)?.to_vec();
    if s.len() != 3 {
        return dim_err("fuse", format!("expected [B, L, D], got {s:?}"));
    }
    let avg = g.mean_axis(x, 2)?;
    let max = g.max_axis(x, 2)?;
    let ca = g.conv1d3(avg, kernel)?;
    let cm = g.conv1d3(max, kernel)?;
    let logits = g.add(ca, cm)?;
    let gate = g.sigmoid(logits)?;
    let features = g.mul_last_fibre(x, gate)?;
    Ok(FusedVars { features, gate })
}

/// Graph-level fusion of a batch of encoded images.
pub fn fuse_batch(g: &mut Graph, store: &ParamStore, global: Var, local: Var) -> Result<FusedVars> {
    let x = concat_positions(g, global, local)?;
    let k = store.bind(g, KERNEL)?;
    fuse_positions(g, x, k)
}

/// Value-level fusion of one image: `U_g [1, D]`, `U_l [C, D]` to
/// `[(C + 1), D]`.
pub fn fuse(global: &Tensor, local: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    if global.rank() != 2 || local.rank() != 2 || global.shape()[0] != 1 || global.shape()[1] != local.shape()[1] {
        return dim_err(
            "fuse",
            format!("global {:?} vs local {:?}", global.shape(), local.shape()),
        );
    }
    kernel.check_shape(&[3], "fuse kernel")?;
    let (c, d) = (local.shape()[0], local.shape()[1]);
    let mut g = Graph::new();
    let gv = g.constant(global.clone())?;
    let lv = g.constant(local.reshaped(&[1, c, d])?)?;
    let kv = g.leaf(kernel)?;
    let x = concat_positions(&mut g, gv, lv)?;
    let out = fuse_positions(&mut g, x, kv)?;
    g.value(out.features)?.reshaped(&[c + 1, d])
}
