//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation as an append-only node holding its
//! forward value and the rule needed to pull gradients back to its parents.
//! Parents always precede children, so a single reverse sweep suffices.

use std::collections::HashMap;

use super::interp::{grid_dims, stencil, BoundsPolicy, Stencil};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision of recorded values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    /// Values are rounded to single precision as they are recorded.
    F32,
}

/// Affine map from world coordinates into grid index coordinates:
/// `g = p * scale + offset`, applied per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridMap {
    pub scale: [f64; 3],
    pub offset: [f64; 3],
}

impl GridMap {
    pub const IDENTITY: GridMap = GridMap { scale: [1.0; 3], offset: [0.0; 3] };

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] * self.scale[0] + self.offset[0],
            p[1] * self.scale[1] + self.offset[1],
            p[2] * self.scale[2] + self.offset[2],
        ]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Reshape(Var),
    Sum(Var),
    Dot(Var, Vec<f64>),
    SumSquares(Var),
    Linear { x: Var, w: Var, b: Option<Var>, inp: usize, out: usize },
    Conv3d { x: Var, w: Var, b: Option<Var>, dims: [usize; 3], cin: usize, cout: usize },
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    BroadcastRows(Var),
    Trilinear { grid: Var, points: Var, stencils: Vec<Stencil>, scale: [f64; 3] },
    Sinusoidal { x: Var, freqs: Vec<f64> },
    Alpha { s: Var, log_z: Var },
    Transmittance(Var),
    RowDot(Var, Vec<f64>),
    MaskedL1 { pred: Var, target: Vec<f64>, mask: Vec<bool>, count: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
            Op::SumSquares(_) => "sum_squares",
            Op::Linear { .. } => "linear",
            Op::Conv3d { .. } => "conv3d",
            Op::Concat { .. } => "concat",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::Trilinear { .. } => "trilinear",
            Op::Sinusoidal { .. } => "sinusoidal",
            Op::Alpha { .. } => "alpha",
            Op::Transmittance(_) => "transmittance",
            Op::RowDot(..) => "row_dot",
            Op::MaskedL1 { .. } => "masked_l1",
        }
    }
}

/// Names of every differentiable operation, usable with [`Tape::inject_fault`].
pub const OP_NAMES: &[&str] = &[
    "add", "sub", "mul", "scale", "relu", "softplus", "sigmoid", "exp", "reshape", "sum", "dot",
    "sum_squares", "linear", "conv3d", "concat", "broadcast_rows", "trilinear", "sinusoidal",
    "alpha", "transmittance", "row_dot", "masked_l1",
];

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    precision: Precision,
    fault: Option<String>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Vec<f64>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a node, `None` when nothing flowed into it.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        let g = &self.nodes[v.0];
        (!g.is_empty()).then_some(g.as_slice())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|v| self.of(*v))
    }

    /// Dense gradient for every parameter in `store`, zero where unused.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        store
            .iter()
            .map(|(id, p)| match self.param(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.value.numel()],
            })
            .collect()
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(sigmoid(x))`, finite for every finite `x`.
fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

fn add_into(dst: &mut Vec<f64>, n: usize, src: impl Iterator<Item = f64>) {
    if dst.is_empty() {
        dst.resize(n, 0.0);
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape { precision, ..Self::default() }
    }

    /// Makes the backward rule of every op named `op` scale its incoming
    /// gradient by 1.5. Used to prove that gradient checks catch bad rules.
    pub fn inject_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            value.round_to_f32();
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A non-parameter leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.requires_grad);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// `sum(a * c)` against a constant array of the same size.
    pub fn dot(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).numel() {
            return Err(Error::contract("dot: constant length differs from operand"));
        }
        let s = self.data(a).iter().zip(&c).map(|(x, y)| x * y).sum();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, c), ng))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().map(|x| x * x).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), ng)
    }

    /// Row-wise affine map: `x [B, in]`, `w [out, in]`, `b [out]` to `[B, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (out, inp) = match self.shape(w) {
            [o, i] => (*o, *i),
            s => return Err(Error::contract(format!("linear weight must be 2-d, got {s:?}"))),
        };
        let xs = self.value(x);
        if xs.last_dim() != inp {
            return Err(Error::contract(format!(
                "linear: input width {} does not match weight {out}x{inp}",
                xs.last_dim()
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::contract(format!("linear bias must be [{out}]")));
            }
        }
        let rows = xs.rows();
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = out;
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = b.map(|b| self.data(b));
        let mut data = vec![0.0; rows * out];
        for (r, orow) in data.chunks_mut(out).enumerate() {
            let xr = &xd[r * inp..(r + 1) * inp];
            for (o, dst) in orow.iter_mut().enumerate() {
                let wr = &wd[o * inp..(o + 1) * inp];
                let mut acc = bd.map_or(0.0, |b| b[o]);
                for (a, c) in xr.iter().zip(wr) {
                    acc += a * c;
                }
                *dst = acc;
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(shape, data)?, Op::Linear { x, w, b, inp, out }, ng))
    }

    /// Dense 3-D convolution, kernel 3, stride 1, zero padding 1, channel-last.
    ///
    /// `x [D, H, W, cin]`, `w [cout, 3, 3, 3, cin]`, `b [cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let dims = grid_dims(self.value(x))?;
        let cin = self.value(x).last_dim();
        let cout = match self.shape(w) {
            [co, 3, 3, 3, ci] if *ci == cin => *co,
            s => {
                return Err(Error::contract(format!(
                    "conv3d weight {s:?} incompatible with {cin} input channels"
                )))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::contract(format!("conv3d bias must be [{cout}]")));
            }
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = b.map(|b| self.data(b));
        let [d, h, wdim] = dims;
        let k = 27 * cin;
        let mut data = vec![0.0; d * h * wdim * cout];
        let mut patch = vec![0.0; k];
        for vox in 0..d * h * wdim {
            gather_patch(xd, dims, cin, vox, &mut patch);
            let orow = &mut data[vox * cout..(vox + 1) * cout];
            for (o, dst) in orow.iter_mut().enumerate() {
                let wr = &wd[o * k..(o + 1) * k];
                let mut acc = bd.map_or(0.0, |b| b[o]);
                for (a, c) in patch.iter().zip(wr) {
                    acc += a * c;
                }
                *dst = acc;
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let value = Tensor::new(vec![d, h, wdim, cout], data)?;
        Ok(self.push(value, Op::Conv3d { x, w, b, dims, cin, cout }, ng))
    }

    /// Concatenates along the trailing axis; all parts must agree on the leading axes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::contract(format!(
                    "concat: leading shape {:?} differs from {lead:?}",
                    &s[..s.len() - 1]
                )));
            }
            widths.push(self.value(p).last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wid) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * wid..(r + 1) * wid]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { parts: parts.to_vec(), widths }, ng))
    }

    /// Repeats a vector `[c]` into `lead ++ [c]`.
    pub fn broadcast_rows(&mut self, a: Var, lead: &[usize]) -> Result<Var> {
        if self.shape(a).len() != 1 {
            return Err(Error::contract("broadcast_rows expects a 1-d operand"));
        }
        let rows: usize = lead.iter().product();
        let row = self.data(a).to_vec();
        let mut data = Vec::with_capacity(rows * row.len());
        for _ in 0..rows {
            data.extend_from_slice(&row);
        }
        let mut shape = lead.to_vec();
        shape.push(row.len());
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::BroadcastRows(a), ng))
    }

    /// Interpolates `grid [D, H, W, C]` at every row of `points [B, 3]`,
    /// mapped into grid coordinates by `map`. Output is `[B, C]`.
    pub fn trilinear(&mut self, grid: Var, points: Var, map: GridMap, policy: BoundsPolicy) -> Result<Var> {
        let dims = grid_dims(self.value(grid))?;
        let c = self.value(grid).last_dim();
        if self.value(points).last_dim() != 3 {
            return Err(Error::contract("trilinear points must be [B, 3]"));
        }
        let pts = self.data(points);
        let b = pts.len() / 3;
        let mut stencils = Vec::with_capacity(b);
        for row in pts.chunks(3) {
            stencils.push(stencil(map.apply([row[0], row[1], row[2]]), dims, policy)?);
        }
        let gd = self.data(grid);
        let mut data = vec![0.0; b * c];
        for (st, orow) in stencils.iter().zip(data.chunks_mut(c)) {
            for k in 0..8 {
                let w = st.weight[k];
                if w == 0.0 {
                    continue;
                }
                let src = &gd[st.index[k] * c..(st.index[k] + 1) * c];
                for (o, v) in orow.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        let ng = self.ng(grid) || self.ng(points);
        let op = Op::Trilinear { grid, points, stencils, scale: map.scale };
        Ok(self.push(Tensor::new(vec![b, c], data)?, op, ng))
    }

    /// Sinusoidal encoding of each row of `x [B, k]` into `[B, 2 * k * freqs.len()]`.
    pub fn sinusoidal(&mut self, x: Var, freqs: &[f64]) -> Result<Var> {
        let k = self.value(x).last_dim();
        let rows = self.value(x).rows();
        let width = 2 * k * freqs.len();
        let mut data = Vec::with_capacity(rows * width);
        for &v in self.data(x) {
            for &w in freqs {
                let (s, c) = (v * w).sin_cos();
                data.push(s);
                data.push(c);
            }
        }
        let ng = self.ng(x);
        let op = Op::Sinusoidal { x, freqs: freqs.to_vec() };
        Ok(self.push(Tensor::new(vec![rows, width], data)?, op, ng))
    }

    /// Per-interval opacity from consecutive SDF samples along each row of
    /// `s [M, N]`, with sharpness `z = exp(log_z)`. Output `[M, N-1]`:
    /// `alpha = max((Phi(s_n) - Phi(s_{n+1})) / Phi(s_n), 0)`, evaluated in log space.
    pub fn alpha(&mut self, s: Var, log_z: Var) -> Result<Var> {
        let (m, n) = match self.shape(s) {
            [m, n] if *n >= 2 => (*m, *n),
            sh => return Err(Error::contract(format!("alpha expects [M, N>=2] samples, got {sh:?}"))),
        };
        if self.value(log_z).numel() != 1 {
            return Err(Error::contract("alpha sharpness must be a scalar"));
        }
        let z = self.scalar(log_z).exp();
        let sd = self.data(s);
        let mut data = Vec::with_capacity(m * (n - 1));
        for row in sd.chunks(n) {
            for pair in row.windows(2) {
                data.push(alpha_value(pair[0], pair[1], z));
            }
        }
        let ng = self.ng(s) || self.ng(log_z);
        Ok(self.push(Tensor::new(vec![m, n - 1], data)?, Op::Alpha { s, log_z }, ng))
    }

    /// Exclusive cumulative product of `1 - alpha` along each row.
    pub fn transmittance(&mut self, alpha: Var) -> Result<Var> {
        let k = match self.shape(alpha) {
            [_, k] => *k,
            sh => return Err(Error::contract(format!("transmittance expects [M, K], got {sh:?}"))),
        };
        let mut data = Vec::with_capacity(self.value(alpha).numel());
        for row in self.data(alpha).chunks(k) {
            let mut t = 1.0;
            for a in row {
                data.push(t);
                t *= 1.0 - a;
            }
        }
        let shape = self.shape(alpha).to_vec();
        let ng = self.ng(alpha);
        Ok(self.push(Tensor::new(shape, data)?, Op::Transmittance(alpha), ng))
    }

    /// `out[m] = sum_k a[m, k] * c[m, k]` against a constant.
    pub fn row_dot(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let (m, k) = match self.shape(a) {
            [m, k] => (*m, *k),
            sh => return Err(Error::contract(format!("row_dot expects [M, K], got {sh:?}"))),
        };
        if c.len() != m * k {
            return Err(Error::contract("row_dot: constant size mismatch"));
        }
        let data = self
            .data(a)
            .chunks(k)
            .zip(c.chunks(k))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![m], data)?, Op::RowDot(a, c), ng))
    }

    /// Mean absolute error over entries where `mask` is set.
    pub fn masked_l1(&mut self, pred: Var, target: Vec<f64>, mask: Vec<bool>) -> Result<Var> {
        let n = self.value(pred).numel();
        if target.len() != n || mask.len() != n {
            return Err(Error::contract("masked_l1: prediction, target and mask lengths differ"));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::contract("masked_l1 over an empty mask"));
        }
        let total: f64 = self
            .data(pred)
            .iter()
            .zip(&target)
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|((p, t), _)| (p - t).abs())
            .sum();
        let ng = self.ng(pred);
        let op = Op::MaskedL1 { pred, target, mask, count };
        Ok(self.push(Tensor::scalar(total / count as f64), op, ng))
    }

    /// Which side of its kink every non-smooth input sits on: relu inputs,
    /// masked L1 residuals and the `alpha` clamp. Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => sig.extend(self.data(*a).iter().map(|x| *x > 0.0)),
                Op::MaskedL1 { pred, target, mask, .. } => {
                    for ((p, t), m) in self.data(*pred).iter().zip(target).zip(mask) {
                        if *m {
                            sig.push(p > t);
                        }
                    }
                }
                Op::Alpha { s, .. } => {
                    let n = self.shape(*s)[1];
                    for row in self.data(*s).chunks(n) {
                        sig.extend(row.windows(2).map(|w| w[1] >= w[0]));
                    }
                }
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[root.0] = vec![1.0];
        for i in (0..=root.0).rev() {
            if grads[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            let mut g = std::mem::take(&mut grads[i]);
            let node = &self.nodes[i];
            if self.fault.as_deref() == Some(node.op.name()) {
                for v in &mut g {
                    *v *= 1.5;
                }
            }
            self.pull(node, &g, &mut grads);
            grads[i] = g;
        }
        Ok(Gradients { nodes: grads, params: self.params.clone() })
    }

    fn pull(&self, node: &Node, g: &[f64], grads: &mut [Vec<f64>]) {
        let out = node.value.data();
        let n = g.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, g.iter().zip(db).map(|(g, y)| g * y));
                self.acc(grads, *b, g.iter().zip(da).map(|(g, x)| g * x));
            }
            Op::Scale(a, k) => self.acc(grads, *a, g.iter().map(|v| v * k)),
            Op::Relu(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }));
            }
            Op::Softplus(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, g.iter().zip(x).map(|(g, x)| g * sigmoid(*x)));
            }
            Op::Sigmoid(a) => self.acc(grads, *a, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y))),
            Op::Exp(a) => self.acc(grads, *a, g.iter().zip(out).map(|(g, y)| g * y)),
            Op::Reshape(a) => self.acc(grads, *a, g.iter().copied()),
            Op::Sum(a) => {
                let len = self.value(*a).numel();
                self.acc(grads, *a, std::iter::repeat_n(g[0], len));
            }
            Op::Dot(a, c) => self.acc(grads, *a, c.iter().map(|c| g[0] * c)),
            Op::SumSquares(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, x.iter().map(|x| 2.0 * g[0] * x));
            }
            Op::Linear { x, w, b, inp, out: o } => {
                let (inp, o) = (*inp, *o);
                let rows = n / o;
                let (xd, wd) = (self.data(*x), self.data(*w));
                if self.ng(*x) {
                    let mut dx = vec![0.0; rows * inp];
                    for r in 0..rows {
                        let dxr = &mut dx[r * inp..(r + 1) * inp];
                        for (j, gv) in g[r * o..(r + 1) * o].iter().enumerate() {
                            if *gv == 0.0 {
                                continue;
                            }
                            for (d, wv) in dxr.iter_mut().zip(&wd[j * inp..(j + 1) * inp]) {
                                *d += gv * wv;
                            }
                        }
                    }
                    self.acc(grads, *x, dx.into_iter());
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; o * inp];
                    for r in 0..rows {
                        let xr = &xd[r * inp..(r + 1) * inp];
                        for (j, gv) in g[r * o..(r + 1) * o].iter().enumerate() {
                            if *gv == 0.0 {
                                continue;
                            }
                            for (d, xv) in dw[j * inp..(j + 1) * inp].iter_mut().zip(xr) {
                                *d += gv * xv;
                            }
                        }
                    }
                    self.acc(grads, *w, dw.into_iter());
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; o];
                    for row in g.chunks(o) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.acc(grads, *b, db.into_iter());
                }
            }
            Op::Conv3d { x, w, b, dims, cin, cout } => {
                let (cin, cout) = (*cin, *cout);
                let k = 27 * cin;
                let (xd, wd) = (self.data(*x), self.data(*w));
                let nvox = dims.iter().product::<usize>();
                let want_x = self.ng(*x);
                let want_w = self.ng(*w);
                let mut dx = if want_x { vec![0.0; nvox * cin] } else { Vec::new() };
                let mut dw = if want_w { vec![0.0; cout * k] } else { Vec::new() };
                let mut patch = vec![0.0; k];
                let mut dpatch = vec![0.0; k];
                for vox in 0..nvox {
                    let gr = &g[vox * cout..(vox + 1) * cout];
                    if gr.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    if want_w {
                        gather_patch(xd, *dims, cin, vox, &mut patch);
                        for (o, gv) in gr.iter().enumerate() {
                            for (d, p) in dw[o * k..(o + 1) * k].iter_mut().zip(&patch) {
                                *d += gv * p;
                            }
                        }
                    }
                    if want_x {
                        dpatch.iter_mut().for_each(|v| *v = 0.0);
                        for (o, gv) in gr.iter().enumerate() {
                            for (d, wv) in dpatch.iter_mut().zip(&wd[o * k..(o + 1) * k]) {
                                *d += gv * wv;
                            }
                        }
                        scatter_patch(&mut dx, *dims, cin, vox, &dpatch);
                    }
                }
                if want_x {
                    self.acc(grads, *x, dx.into_iter());
                }
                if want_w {
                    self.acc(grads, *w, dw.into_iter());
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; cout];
                    for row in g.chunks(cout) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.acc(grads, *b, db.into_iter());
                }
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = n / total;
                let mut offset = 0;
                for (&p, &wid) in parts.iter().zip(widths) {
                    if self.ng(p) {
                        let it = (0..rows).flat_map(|r| {
                            g[r * total + offset..r * total + offset + wid].iter().copied()
                        });
                        self.acc(grads, p, it);
                    }
                    offset += wid;
                }
            }
            Op::BroadcastRows(a) => {
                let c = self.value(*a).numel();
                let mut da = vec![0.0; c];
                for row in g.chunks(c) {
                    for (d, v) in da.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.acc(grads, *a, da.into_iter());
            }
            Op::Trilinear { grid, points, stencils, scale } => {
                let gd = self.data(*grid);
                let c = self.value(*grid).last_dim();
                if self.ng(*grid) {
                    let mut dg = vec![0.0; gd.len()];
                    for (st, gr) in stencils.iter().zip(g.chunks(c)) {
                        for k in 0..8 {
                            let w = st.weight[k];
                            if w == 0.0 {
                                continue;
                            }
                            let dst = &mut dg[st.index[k] * c..(st.index[k] + 1) * c];
                            for (d, v) in dst.iter_mut().zip(gr) {
                                *d += w * v;
                            }
                        }
                    }
                    self.acc(grads, *grid, dg.into_iter());
                }
                if self.ng(*points) {
                    let mut dp = Vec::with_capacity(stencils.len() * 3);
                    for (st, gr) in stencils.iter().zip(g.chunks(c)) {
                        let mut acc = [0.0; 3];
                        for k in 0..8 {
                            let f = &gd[st.index[k] * c..(st.index[k] + 1) * c];
                            let proj: f64 = f.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ax in 0..3 {
                                acc[ax] += st.dweight[k][ax] * proj;
                            }
                        }
                        dp.extend((0..3).map(|ax| acc[ax] * scale[ax]));
                    }
                    self.acc(grads, *points, dp.into_iter());
                }
            }
            Op::Sinusoidal { x, freqs } => {
                let xd = self.data(*x);
                let nf = freqs.len();
                let dx = xd.iter().enumerate().map(|(i, _)| {
                    let base = i * 2 * nf;
                    freqs
                        .iter()
                        .enumerate()
                        .map(|(f, w)| {
                            let (s, c) = (out[base + 2 * f], out[base + 2 * f + 1]);
                            g[base + 2 * f] * w * c - g[base + 2 * f + 1] * w * s
                        })
                        .sum::<f64>()
                });
                let dx: Vec<f64> = dx.collect();
                self.acc(grads, *x, dx.into_iter());
            }
            Op::Alpha { s, log_z } => {
                let sd = self.data(*s);
                let nn = self.shape(*s)[1];
                let z = self.scalar(*log_z).exp();
                let mut ds = vec![0.0; sd.len()];
                let mut dlogz = 0.0;
                for (r, row) in sd.chunks(nn).enumerate() {
                    for j in 0..nn - 1 {
                        let gv = g[r * (nn - 1) + j];
                        let (a, b) = (row[j], row[j + 1]);
                        let (za, zb) = (z * a, z * b);
                        let u = log_sigmoid(zb) - log_sigmoid(za);
                        if u >= 0.0 || gv == 0.0 {
                            continue;
                        }
                        // alpha = 1 - e^u
                        let dalpha_du = -u.exp();
                        let (sa, sb) = (sigmoid(-za), sigmoid(-zb));
                        ds[r * nn + j] += gv * dalpha_du * (-z * sa);
                        ds[r * nn + j + 1] += gv * dalpha_du * (z * sb);
                        dlogz += gv * dalpha_du * z * (b * sb - a * sa);
                    }
                }
                if self.ng(*s) {
                    self.acc(grads, *s, ds.into_iter());
                }
                if self.ng(*log_z) {
                    self.acc(grads, *log_z, std::iter::once(dlogz));
                }
            }
            Op::Transmittance(a) => {
                let ad = self.data(*a);
                let k = self.shape(*a)[1];
                let mut da = vec![0.0; ad.len()];
                for (r, row) in ad.chunks(k).enumerate() {
                    let trow = &out[r * k..(r + 1) * k];
                    let grow = &g[r * k..(r + 1) * k];
                    // tail_i = sum_{n>i} g_n prod_{i<j<n} (1 - a_j)
                    let mut tail = 0.0;
                    for i in (0..k).rev() {
                        da[r * k + i] = -trow[i] * tail;
                        tail = grow[i] + (1.0 - row[i]) * tail;
                    }
                }
                self.acc(grads, *a, da.into_iter());
            }
            Op::RowDot(a, c) => {
                let k = self.shape(*a)[1];
                self.acc(grads, *a, c.iter().enumerate().map(|(i, c)| g[i / k] * c));
            }
            Op::MaskedL1 { pred, target, mask, count } => {
                let pd = self.data(*pred);
                let scale = g[0] / *count as f64;
                let it = pd.iter().zip(target).zip(mask).map(|((p, t), m)| {
                    if *m {
                        scale * sign(p - t)
                    } else {
                        0.0
                    }
                });
                self.acc(grads, *pred, it);
            }
        }
    }

    fn acc(&self, grads: &mut [Vec<f64>], v: Var, it: impl Iterator<Item = f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        add_into(&mut grads[v.0], n, it);
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scalar opacity of one interval; shared by the tape op and the renderer.
pub fn alpha_value(s_near: f64, s_far: f64, z: f64) -> f64 {
    let u = log_sigmoid(z * s_far) - log_sigmoid(z * s_near);
    if u >= 0.0 {
        0.0
    } else {
        -u.exp_m1()
    }
}

/// Copies the zero-padded 3x3x3 neighbourhood of `vox` into `patch`
/// in `[kz, ky, kx, c]` order.
fn gather_patch(x: &[f64], dims: [usize; 3], cin: usize, vox: usize, patch: &mut [f64]) {
    let [d, h, w] = dims;
    let (z, y, xx) = (vox / (h * w), (vox / w) % h, vox % w);
    let mut k = 0;
    for dz in 0..3 {
        for dy in 0..3 {
            for dx in 0..3 {
                let dst = &mut patch[k * cin..(k + 1) * cin];
                k += 1;
                let (nz, ny, nx) = (z + dz, y + dy, xx + dx);
                if nz == 0 || ny == 0 || nx == 0 || nz > d || ny > h || nx > w {
                    dst.iter_mut().for_each(|v| *v = 0.0);
                    continue;
                }
                let src = ((nz - 1) * h + (ny - 1)) * w + (nx - 1);
                dst.copy_from_slice(&x[src * cin..(src + 1) * cin]);
            }
        }
    }
}

fn scatter_patch(dx: &mut [f64], dims: [usize; 3], cin: usize, vox: usize, patch: &[f64]) {
    let [d, h, w] = dims;
    let (z, y, xx) = (vox / (h * w), (vox / w) % h, vox % w);
    let mut k = 0;
    for dz in 0..3 {
        for dy in 0..3 {
            for ddx in 0..3 {
                let src = &patch[k * cin..(k + 1) * cin];
                k += 1;
                let (nz, ny, nx) = (z + dz, y + dy, xx + ddx);
                if nz == 0 || ny == 0 || nx == 0 || nz > d || ny > h || nx > w {
                    continue;
                }
                let dst = ((nz - 1) * h + (ny - 1)) * w + (nx - 1);
                for (a, b) in dx[dst * cin..(dst + 1) * cin].iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
    }
}
