//! Tape-style reverse-mode autodiff.
//!
//! A [`Graph`] owns every intermediate value. Nodes are appended in execution
//! order, so the node vector is already a topological order and backward is a
//! single reverse sweep that touches each node once.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use super::{round_all, Tensor};
use crate::error::{dim_err, Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `x + b` with `b` broadcast over the leading axes of `x`.
    AddTrailing(usize, usize),
    /// `x[.., j] * a[..]`: scales each last-axis fibre by one entry of `a`.
    MulLastFibre(usize, usize),
    Scale(usize, f64),
    /// `x * s` for a single-element `s`.
    ScaleBy(usize, usize),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
        trans_b: bool,
    },
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Pow(usize, f64),
    Clamp(usize, f64, f64),
    Sum(usize),
    SumAxis {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaxAxis {
        x: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        inputs: Vec<(usize, usize)>,
        outer: usize,
        inner: usize,
    },
    IndexSelect {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
        indices: Vec<usize>,
    },
    NormalizeLast {
        x: usize,
        norms: Vec<f64>,
    },
    Conv1d3 {
        x: usize,
        k: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `out (m×n) += op(a) (m×kk) · op(b) (kk×n)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    kk: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for l in 0..kk {
                    let av = a[i * kk + l];
                    let brow = &b[l * n..(l + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * kk..(i + 1) * kk];
                for j in 0..n {
                    let brow = &b[j * kk..(j + 1) * kk];
                    let mut s = 0.0;
                    for (x, y) in arow.iter().zip(brow) {
                        s += x * y;
                    }
                    out[i * n + j] += s;
                }
            }
        }
        (true, false) => {
            for l in 0..kk {
                let brow = &b[l * n..(l + 1) * n];
                for i in 0..m {
                    let av = a[l * m + i];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for l in 0..kk {
                        s += a[l * m + i] * b[j * kk + l];
                    }
                    out[i * n + j] += s;
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Detached);
        }
        Ok(v.idx)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        round_all(&mut data);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    /// Adds a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let node = Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        };
        if node.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(node);
        Ok(Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push("constant", shape, data, Op::Leaf, false)
    }

    /// Binds a named parameter once per graph; repeated calls return the same
    /// node so gradients from every use accumulate on it.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.leaf(t)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Makes later [`Graph::param`] calls for `name` return `v`.
    pub fn bind_param(&mut self, name: &str, v: Var) -> Result<()> {
        self.check(v)?;
        self.params.insert(name.to_string(), v);
        Ok(())
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].shape)
    }

    pub fn data(&self, v: Var) -> Result<&[f64]> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].data)
    }

    pub fn value(&self, v: Var) -> Result<Tensor> {
        let i = self.check(v)?;
        Tensor::new(self.nodes[i].shape.clone(), self.nodes[i].data.clone())
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let d = self.data(v)?;
        if d.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(v)?.to_vec()));
        }
        Ok(d[0])
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ---- elementwise binary ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return dim_err(
                name,
                format!("{:?} vs {:?}", self.nodes[ia].shape, self.nodes[ib].shape),
            );
        }
        let data = self.nodes[ia]
            .data
            .iter()
            .zip(&self.nodes[ib].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(&[ia, ib]);
        self.push(name, shape, data, op(ia, ib), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// `x + b` where `b`'s shape equals the trailing axes of `x`.
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(b)?);
        let xs = &self.nodes[ix].shape;
        let bs = &self.nodes[ib].shape;
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != bs[..] {
            return dim_err("add_trailing", format!("{xs:?} vs {bs:?}"));
        }
        let inner = self.nodes[ib].data.len().max(1);
        let bd = &self.nodes[ib].data;
        let data = self.nodes[ix]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % inner])
            .collect();
        let shape = xs.clone();
        let rg = self.rg(&[ix, ib]);
        self.push("add_trailing", shape, data, Op::AddTrailing(ix, ib), rg)
    }

    /// Multiplies every last-axis fibre of `x` by the matching entry of `a`,
    /// where `a.shape == x.shape[..rank-1]`.
    pub fn mul_last_fibre(&mut self, x: Var, a: Var) -> Result<Var> {
        let (ix, ia) = (self.check(x)?, self.check(a)?);
        let xs = &self.nodes[ix].shape;
        let as_ = &self.nodes[ia].shape;
        if xs.is_empty() || xs[..xs.len() - 1] != as_[..] {
            return dim_err("mul_last_fibre", format!("{xs:?} vs {as_:?}"));
        }
        let n = *xs.last().unwrap();
        let ad = &self.nodes[ia].data;
        let data = self.nodes[ix]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ad[i / n])
            .collect();
        let shape = xs.clone();
        let rg = self.rg(&[ix, ia]);
        self.push("mul_last_fibre", shape, data, Op::MulLastFibre(ix, ia), rg)
    }

    // ---- scalar-parameterised unary ----

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let data = self.nodes[ix].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[ix].shape.clone();
        let rg = self.rg(&[ix]);
        self.push("scale", shape, data, Op::Scale(ix, c), rg)
    }

    /// Multiplies `x` by a single-element variable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.check(x)?, self.check(s)?);
        if self.nodes[is].data.len() != 1 {
            return dim_err("scale_by", format!("scale has shape {:?}", self.nodes[is].shape));
        }
        let c = self.nodes[is].data[0];
        let data = self.nodes[ix].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[ix].shape.clone();
        let rg = self.rg(&[ix, is]);
        self.push("scale_by", shape, data, Op::ScaleBy(ix, is), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let data = self.nodes[ix].data.iter().map(|v| v + c).collect();
        let shape = self.nodes[ix].shape.clone();
        let rg = self.rg(&[ix]);
        self.push("add_scalar", shape, data, Op::AddScalar(ix), rg)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let ix = self.check(x)?;
        let data = self.nodes[ix].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[ix].shape.clone();
        let rg = self.rg(&[ix]);
        self.push(name, shape, data, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(ix))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        self.unary("tanh", x, f64::tanh, Op::Tanh(ix))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        self.unary("exp", x, f64::exp, Op::Exp(ix))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        self.unary("ln", x, f64::ln, Op::Ln(ix))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(ix))
    }

    /// `x^e` for real exponent `e`; `x^0 == 1` including at `x == 0`.
    pub fn pow(&mut self, x: Var, e: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let f = move |v: f64| if e == 0.0 { 1.0 } else { v.powf(e) };
        self.unary("pow", x, f, Op::Pow(ix, e))
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let ix = self.check(x)?;
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp(ix, lo, hi))
    }

    // ---- matrix products ----

    /// `a (m×k) · b (k×p)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a (m×k) · bᵀ` with `b` stored as `p×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 2 || sb.len() != 2 {
            return dim_err("matmul", format!("expected 2-D operands, got {sa:?}, {sb:?}"));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, p) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return dim_err("matmul", format!("inner extents differ: {sa:?} x {sb:?}"));
        }
        let mut out = vec![0.0; m * p];
        gemm(&self.nodes[ia].data, &self.nodes[ib].data, &mut out, m, k, p, false, trans_b);
        let rg = self.rg(&[ia, ib]);
        let op = Op::MatMul {
            a: ia,
            b: ib,
            batch: 1,
            m,
            k,
            p,
            trans_b,
        };
        self.push("matmul", vec![m, p], out, op, rg)
    }

    /// Batched product over the leading axis: `a (N×m×k) · b (N×k×p)`, or
    /// `a · bᵀ` with `b` stored `N×p×k` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return dim_err("bmm", format!("{sa:?} x {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return dim_err("bmm", format!("inner extents differ: {sa:?} x {sb:?}"));
        }
        let mut out = vec![0.0; batch * m * p];
        {
            let (ad, bd) = (&self.nodes[ia].data, &self.nodes[ib].data);
            for n in 0..batch {
                gemm(
                    &ad[n * m * k..(n + 1) * m * k],
                    &bd[n * k * p..(n + 1) * k * p],
                    &mut out[n * m * p..(n + 1) * m * p],
                    m,
                    k,
                    p,
                    false,
                    trans_b,
                );
            }
        }
        let rg = self.rg(&[ia, ib]);
        let op = Op::MatMul {
            a: ia,
            b: ib,
            batch,
            m,
            k,
            p,
            trans_b,
        };
        self.push("bmm", vec![batch, m, p], out, op, rg)
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        if shape.iter().product::<usize>() != self.nodes[ix].data.len() {
            return dim_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.nodes[ix].shape),
            );
        }
        let data = self.nodes[ix].data.clone();
        let rg = self.rg(&[ix]);
        self.push("reshape", shape.to_vec(), data, Op::Reshape(ix), rg)
    }

    /// General axis permutation; `axes[i]` is the input axis placed at output
    /// position `i`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].shape.clone();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return dim_err("permute", format!("axes {axes:?} invalid for shape {s:?}"));
        }
        let map = permute_map(&s, axes);
        let src = &self.nodes[ix].data;
        let data = map.iter().map(|&o| src[o]).collect();
        let out_shape = axes.iter().map(|&a| s[a]).collect();
        let rg = self.rg(&[ix]);
        self.push("permute", out_shape, data, Op::Permute(ix, map), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return dim_err("concat", "no inputs");
        }
        let idx: Vec<usize> = xs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let first = self.nodes[idx[0]].shape.clone();
        if axis >= first.len() {
            return dim_err("concat", format!("axis {axis} out of range for {first:?}"));
        }
        for &i in &idx[1..] {
            let s = &self.nodes[i].shape;
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return dim_err("concat", format!("{first:?} vs {s:?} along axis {axis}"));
            }
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = idx.iter().map(|&i| self.nodes[i].shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let len = self.nodes[i].shape[axis];
                let d = &self.nodes[i].data;
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(&idx);
        let inputs = idx.iter().map(|&i| (i, self.nodes[i].shape[axis])).collect();
        self.push("concat", shape, data, Op::Concat { inputs, outer, inner }, rg)
    }

    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].shape.clone();
        if axis >= s.len() {
            return dim_err("index_select", format!("axis {axis} out of range for {s:?}"));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return dim_err("index_select", format!("index {bad} >= extent {len}"));
        }
        let src = &self.nodes[ix].data;
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &t in indices {
                let base = (o * len + t) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut shape = s;
        shape[axis] = indices.len();
        let rg = self.rg(&[ix]);
        let op = Op::IndexSelect {
            x: ix,
            outer,
            len,
            inner,
            indices: indices.to_vec(),
        };
        self.push("index_select", shape, data, op, rg)
    }

    /// Picks one position along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let picked = self.index_select(x, axis, &[index])?;
        let mut shape = self.shape(picked)?.to_vec();
        shape.remove(axis);
        self.reshape(picked, &shape)
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s: f64 = self.nodes[ix].data.iter().sum();
        let rg = self.rg(&[ix]);
        self.push("sum", vec![], vec![s], Op::Sum(ix), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x)?.len();
        if n == 0 {
            return dim_err("mean", "empty tensor");
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    fn axis_parts(&self, ix: usize, axis: usize, name: &'static str) -> Result<(usize, usize, usize)> {
        let s = &self.nodes[ix].shape;
        if axis >= s.len() {
            return dim_err(name, format!("axis {axis} out of range for {s:?}"));
        }
        Ok(split_axis(s, axis))
    }

    fn reduced_shape(&self, ix: usize, axis: usize) -> Vec<usize> {
        let mut s = self.nodes[ix].shape.clone();
        s.remove(axis);
        s
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let (outer, len, inner) = self.axis_parts(ix, axis, "sum_axis")?;
        let src = &self.nodes[ix].data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                let base = (o * len + t) * inner;
                for j in 0..inner {
                    out[o * inner + j] += src[base + j];
                }
            }
        }
        let shape = self.reduced_shape(ix, axis);
        let rg = self.rg(&[ix]);
        let op = Op::SumAxis { x: ix, outer, len, inner };
        self.push("sum_axis", shape, out, op, rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)?
            .get(axis)
            .ok_or_else(|| Error::Dimension { op: "mean_axis", detail: format!("axis {axis}") })?;
        if len == 0 {
            return dim_err("mean_axis", "empty axis");
        }
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Maximum along `axis`; ties route the gradient to the first maximiser.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let (outer, len, inner) = self.axis_parts(ix, axis, "max_axis")?;
        if len == 0 {
            return dim_err("max_axis", "empty axis");
        }
        let src = &self.nodes[ix].data;
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                let base = (o * len + t) * inner;
                for j in 0..inner {
                    let k = o * inner + j;
                    if src[base + j] > out[k] {
                        out[k] = src[base + j];
                        argmax[k] = base + j;
                    }
                }
            }
        }
        let shape = self.reduced_shape(ix, axis);
        let rg = self.rg(&[ix]);
        self.push("max_axis", shape, out, Op::MaxAxis { x: ix, argmax }, rg)
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let (outer, len, inner) = self.axis_parts(ix, axis, "softmax")?;
        if len == 0 {
            return dim_err("softmax", "empty axis");
        }
        let src = &self.nodes[ix].data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |t: usize| (o * len + t) * inner + j;
                let mx = (0..len).map(|t| src[at(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for t in 0..len {
                    let e = (src[at(t)] - mx).exp();
                    out[at(t)] = e;
                    z += e;
                }
                for t in 0..len {
                    out[at(t)] /= z;
                }
            }
        }
        let shape = self.nodes[ix].shape.clone();
        let rg = self.rg(&[ix]);
        let op = Op::Softmax { x: ix, outer, len, inner };
        self.push("softmax", shape, out, op, rg)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let (outer, len, inner) = self.axis_parts(ix, axis, "log_softmax")?;
        if len == 0 {
            return dim_err("log_softmax", "empty axis");
        }
        let src = &self.nodes[ix].data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |t: usize| (o * len + t) * inner + j;
                let mx = (0..len).map(|t| src[at(t)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..len).map(|t| (src[at(t)] - mx).exp()).sum::<f64>().ln();
                for t in 0..len {
                    out[at(t)] = src[at(t)] - lse;
                }
            }
        }
        let shape = self.nodes[ix].shape.clone();
        let rg = self.rg(&[ix]);
        let op = Op::LogSoftmax { x: ix, outer, len, inner };
        self.push("log_softmax", shape, out, op, rg)
    }

    /// L2-normalises every last-axis fibre. A zero-norm fibre is an error.
    pub fn normalize_last(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = &self.nodes[ix].shape;
        let n = *s.last().ok_or_else(|| Error::Dimension {
            op: "normalize_last",
            detail: "rank-0 input".into(),
        })?;
        let src = &self.nodes[ix].data;
        let rows = if n == 0 { 0 } else { src.len() / n };
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(nrm > 0.0) {
                return Err(Error::Degenerate(format!("zero-norm vector at row {r}")));
            }
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = v / nrm;
            }
            norms.push(nrm);
        }
        let shape = s.clone();
        let rg = self.rg(&[ix]);
        self.push("normalize_last", shape, out, Op::NormalizeLast { x: ix, norms }, rg)
    }

    /// Three-tap cross-correlation along the last axis with zero padding:
    /// `y[l] = k0·x[l-1] + k1·x[l] + k2·x[l+1]`.
    pub fn conv1d3(&mut self, x: Var, k: Var) -> Result<Var> {
        let (ix, ik) = (self.check(x)?, self.check(k)?);
        if self.nodes[ik].shape != [3] {
            return dim_err("conv1d3", format!("kernel shape {:?}", self.nodes[ik].shape));
        }
        let s = &self.nodes[ix].shape;
        let len = *s.last().ok_or_else(|| Error::Dimension {
            op: "conv1d3",
            detail: "rank-0 input".into(),
        })?;
        let kd = &self.nodes[ik].data;
        let src = &self.nodes[ix].data;
        let rows = if len == 0 { 0 } else { src.len() / len };
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * len..(r + 1) * len];
            for l in 0..len {
                let left = if l > 0 { row[l - 1] } else { 0.0 };
                let right = if l + 1 < len { row[l + 1] } else { 0.0 };
                out[r * len + l] = kd[0] * left + kd[1] * row[l] + kd[2] * right;
            }
        }
        let shape = s.clone();
        let rg = self.rg(&[ix, ik]);
        self.push("conv1d3", shape, out, Op::Conv1d3 { x: ix, k: ik }, rg)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        if self.nodes[li].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[li].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            graph: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            leaves: self
                .nodes
                .iter()
                .map(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
                .collect(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.idx)).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.data;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[j].requires_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![0.0; self.nodes[j].data.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bd[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * ad[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / bd[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] -= g[k] * ad[k] / (bd[k] * bd[k]);
                    }
                });
            }
            Op::AddTrailing(x, b) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| {
                    let inner = d.len().max(1);
                    for (k, gv) in g.iter().enumerate() {
                        d[k % inner] += gv;
                    }
                });
            }
            Op::MulLastFibre(x, a) => {
                let n = *node.shape.last().unwrap();
                let (xd, ad) = (&self.nodes[*x].data, &self.nodes[*a].data);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * ad[k / n];
                    }
                });
                acc(*a, &mut |d| {
                    for (k, gv) in g.iter().enumerate() {
                        d[k / n] += gv * xd[k];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c)),
            Op::ScaleBy(x, s) => {
                let (xd, c) = (&self.nodes[*x].data, self.nodes[*s].data[0]);
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c));
                acc(*s, &mut |d| d[0] += g.iter().zip(xd).map(|(g, x)| g * x).sum::<f64>());
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g))
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
                trans_b,
            } => {
                let (m, k, p, tb) = (*m, *k, *p, *trans_b);
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                acc(*a, &mut |d| {
                    for n in 0..*batch {
                        let gc = &g[n * m * p..(n + 1) * m * p];
                        let bs = &bd[n * k * p..(n + 1) * k * p];
                        // dA = dC · op(B)ᵀ
                        gemm(gc, bs, &mut d[n * m * k..(n + 1) * m * k], m, p, k, false, !tb);
                    }
                });
                acc(*b, &mut |d| {
                    for n in 0..*batch {
                        let gc = &g[n * m * p..(n + 1) * m * p];
                        let as_ = &ad[n * m * k..(n + 1) * m * k];
                        let db = &mut d[n * k * p..(n + 1) * k * p];
                        if tb {
                            // B stored p×k: dB = dCᵀ · A
                            gemm(gc, as_, db, p, m, k, true, false);
                        } else {
                            // dB = Aᵀ · dC
                            gemm(as_, gc, db, k, m, p, true, false);
                        }
                    }
                });
            }
            Op::Permute(x, map) => acc(*x, &mut |d| {
                for (o, &src) in map.iter().enumerate() {
                    d[src] += g[o];
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * y[k];
                }
            }),
            Op::Ln(x) => {
                let xd = &self.nodes[*x].data;
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / xd[k];
                    }
                })
            }
            Op::Sqrt(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * 0.5 / y[k];
                }
            }),
            Op::Pow(x, e) => {
                let xd = &self.nodes[*x].data;
                let e = *e;
                acc(*x, &mut |d| {
                    if e == 0.0 {
                        return;
                    }
                    for k in 0..d.len() {
                        let dv = if e == 1.0 { 1.0 } else { e * xd[k].powf(e - 1.0) };
                        d[k] += g[k] * dv;
                    }
                })
            }
            Op::Clamp(x, lo, hi) => {
                let xd = &self.nodes[*x].data;
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if xd[k] > *lo && xd[k] < *hi {
                            d[k] += g[k];
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::SumAxis { x, outer, len, inner } => acc(*x, &mut |d| {
                for o in 0..*outer {
                    for t in 0..*len {
                        let base = (o * len + t) * inner;
                        for j in 0..*inner {
                            d[base + j] += g[o * inner + j];
                        }
                    }
                }
            }),
            Op::MaxAxis { x, argmax } => acc(*x, &mut |d| {
                for (k, &src) in argmax.iter().enumerate() {
                    d[src] += g[k];
                }
            }),
            Op::Softmax { x, outer, len, inner } => acc(*x, &mut |d| {
                for o in 0..*outer {
                    for j in 0..*inner {
                        let at = |t: usize| (o * len + t) * inner + j;
                        let dot: f64 = (0..*len).map(|t| g[at(t)] * y[at(t)]).sum();
                        for t in 0..*len {
                            d[at(t)] += y[at(t)] * (g[at(t)] - dot);
                        }
                    }
                }
            }),
            Op::LogSoftmax { x, outer, len, inner } => acc(*x, &mut |d| {
                for o in 0..*outer {
                    for j in 0..*inner {
                        let at = |t: usize| (o * len + t) * inner + j;
                        let gs: f64 = (0..*len).map(|t| g[at(t)]).sum();
                        for t in 0..*len {
                            d[at(t)] += g[at(t)] - y[at(t)].exp() * gs;
                        }
                    }
                }
            }),
            Op::Concat { inputs, outer, inner } => {
                let total: usize = inputs.iter().map(|(_, l)| l).sum();
                let mut offset = 0;
                for &(src, len) in inputs {
                    acc(src, &mut |d| {
                        for o in 0..*outer {
                            let from = (o * total + offset) * inner;
                            let to = o * len * inner;
                            for q in 0..len * inner {
                                d[to + q] += g[from + q];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::IndexSelect {
                x,
                outer,
                len,
                inner,
                indices,
            } => acc(*x, &mut |d| {
                let m = indices.len();
                for o in 0..*outer {
                    for (t, &src) in indices.iter().enumerate() {
                        let from = (o * m + t) * inner;
                        let to = (o * len + src) * inner;
                        for j in 0..*inner {
                            d[to + j] += g[from + j];
                        }
                    }
                }
            }),
            Op::NormalizeLast { x, norms } => {
                let n = *node.shape.last().unwrap();
                acc(*x, &mut |d| {
                    for (r, nrm) in norms.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (q, dv) in d[span].iter_mut().enumerate() {
                            *dv += (gr[q] - yr[q] * dot) / nrm;
                        }
                    }
                })
            }
            Op::Conv1d3 { x, k } => {
                let len = *node.shape.last().unwrap();
                let (xd, kd) = (&self.nodes[*x].data, &self.nodes[*k].data);
                let rows = if len == 0 { 0 } else { xd.len() / len };
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        for l in 0..len {
                            let gv = g[r * len + l];
                            if l > 0 {
                                d[r * len + l - 1] += kd[0] * gv;
                            }
                            d[r * len + l] += kd[1] * gv;
                            if l + 1 < len {
                                d[r * len + l + 1] += kd[2] * gv;
                            }
                        }
                    }
                });
                acc(*k, &mut |d| {
                    for r in 0..rows {
                        let row = &xd[r * len..(r + 1) * len];
                        for l in 0..len {
                            let gv = g[r * len + l];
                            if l > 0 {
                                d[0] += gv * row[l - 1];
                            }
                            d[1] += gv * row[l];
                            if l + 1 < len {
                                d[2] += gv * row[l + 1];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += out_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= out_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    map
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    leaves: Vec<bool>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`. Differentiable nodes the loss does not
    /// depend on get an all-zero gradient; non-differentiable nodes get `None`.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if v.graph != self.graph || v.idx >= self.grads.len() {
            return None;
        }
        let shape = self.shapes[v.idx].clone();
        match &self.grads[v.idx] {
            Some(g) => {
                let mut g = g.clone();
                round_all(&mut g);
                Tensor::new(shape, g).ok()
            }
            None if self.leaves[v.idx] => Some(Tensor::zeros(&shape)),
            None => None,
        }
    }

    /// Stores the gradient of `v` on `target.grad`.
    pub fn apply_to(&self, v: Var, target: &mut Tensor) -> Result<()> {
        let g = self.get(v).ok_or(Error::Detached)?;
        target.set_grad(g.into_data())
    }

    /// Gradients of every named parameter bound with [`Graph::param`] that
    /// requires a gradient.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, i)| self.leaves[*i])
            .filter_map(|(name, i)| {
                self.get(Var {
                    graph: self.graph,
                    idx: *i,
                })
                .map(|t| (name.clone(), t))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{precision_scope, Precision};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_ones() {
        let mut g = Graph::new();
        let i2 = g.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.data(out).unwrap(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.leaf(&t(&[1, 2], &[1.0, 1.0])).unwrap();
        let b = g.leaf(&t(&[2, 1], &[1.0, 1.0])).unwrap();
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.data(out).unwrap(), &[2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let _p = precision_scope(Precision::F64);
        let mut rng = Rng::new(11);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let mut naive = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for l in 0..4 {
                    naive[i * 2 + j] += a.at(&[i, l]) * b.at(&[l, j]);
                }
            }
        }
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(&a).unwrap(), g.leaf(&b).unwrap());
        let out = g.matmul(va, vb).unwrap();
        for (x, y) in g.data(out).unwrap().iter().zip(&naive) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3])).unwrap();
        let b = g.leaf(&Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let _p = precision_scope(Precision::F64);
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[0.0, 0.0])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.data(s).unwrap(), &[0.5, 0.5]);

        let x = g.leaf(&t(&[2], &[2f64.ln(), 0.0])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        let d = g.data(s).unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-12 && (d[1] - 1.0 / 3.0).abs() < 1e-12);

        let a = g.leaf(&t(&[2], &[5.0, 7.5])).unwrap();
        let b = g.leaf(&t(&[2], &[0.0, 2.5])).unwrap();
        let (sa, sb) = (g.softmax(a, 0).unwrap(), g.softmax(b, 0).unwrap());
        let (da, db) = (g.data(sa).unwrap().to_vec(), g.data(sb).unwrap().to_vec());
        for (x, y) in da.iter().zip(&db) {
            assert!((x - y).abs() < 1e-15);
        }

        let e = g.leaf(&Tensor::zeros(&[2, 0])).unwrap();
        assert!(g.softmax(e, 1).is_err());
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]).with_grad()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_constant_gives_zero() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]).with_grad()).unwrap();
        let c = g.leaf(&Tensor::scalar(4.0)).unwrap();
        let loss = g.scale(c, 2.0).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_sum_softmax_is_zero() {
        let _p = precision_scope(Precision::F64);
        let mut g = Graph::new();
        let x = g.leaf(&t(&[4], &[0.3, -1.0, 2.0, 0.0]).with_grad()).unwrap();
        let s = g.softmax(x, 0).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]).with_grad()).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let mut other = Graph::new();
        let y = other.leaf(&Tensor::scalar(1.0).with_grad()).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Detached)));
    }

    #[test]
    fn apply_to_populates_tensor_grad() {
        let mut x = t(&[2], &[3.0, -1.0]).with_grad();
        let mut g = Graph::new();
        let v = g.leaf(&x).unwrap();
        let loss = g.sum(v).unwrap();
        g.backward(loss).unwrap().apply_to(v, &mut x).unwrap();
        assert_eq!(x.grad().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn nonfinite_forward_is_error() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1], &[0.0])).unwrap();
        assert!(matches!(g.ln(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.leaf(&t(&[2, 3, 4], &data)).unwrap();
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p).unwrap(), &[4, 2, 3]);
        let v = g.value(p).unwrap();
        assert_eq!(v.at(&[3, 1, 2]), 1.0 * 12.0 + 2.0 * 4.0 + 3.0);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.data(back).unwrap(), &data[..]);
    }

    #[test]
    fn param_binding_is_cached() {
        let mut g = Graph::new();
        let w = Tensor::full(&[2], 1.0).with_grad();
        let a = g.param("w", &w).unwrap();
        let b = g.param("w", &w).unwrap();
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s).unwrap();
        let named = g.backward(loss).unwrap().named();
        assert_eq!(named["w"].data(), &[2.0, 2.0]);
    }
}
