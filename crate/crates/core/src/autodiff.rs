//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation with its forward value; [`Tape::backward`]
//! walks the records in reverse and returns one gradient per node. Operations
//! are coarse (layer norm, blocked multi-head attention, Householder Q) so the
//! batched model graph stays small.

use crate::encoder::{gelu_with_grad, select_active_queries, softmax_in_place, sparsity_measure, LAYER_NORM_EPS};
use crate::encoder::active_query_count;
use crate::error::{Error, Result};
use crate::linalg::{dot, householder_qr, stable_sigmoid, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the Householder Q factor is differentiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QrGradient {
    /// Exact adjoint of the QR map.
    #[default]
    Exact,
    /// Backward pass treats the projection as the identity.
    StraightThrough,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionKind {
    Full,
    /// Sampling factor `c`.
    ProbSparse(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Adds a `1×n` row to every row.
    AddRow(Var, Var),
    /// Adds an `n×c` table to each consecutive block of `n` rows.
    AddTiled(Var, Var),
    /// Multiplies column `j` by `s[0, j]`.
    ColScale(Var, Var),
    /// Keeps the derivative at the input.
    Gelu(Var, Matrix),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        heads: usize,
        /// Softmax weights per `(block, head)`.
        weights: Vec<Matrix>,
        /// Active-query mask per `(block, head)`; `None` when every query is active.
        active: Vec<Option<Vec<bool>>>,
    },
    BlockMean(Var, usize),
    HouseholderQ {
        a: Var,
        r: Matrix,
        mode: QrGradient,
    },
    ConcatCols(Vec<Var>),
    RowSqNorm(Var),
    Mean(Var),
    /// `out[b, h·d + c] = Σ_p w[h, p] · trend[b, p·d + c]`.
    TrendHead {
        w: Var,
        trend: Var,
        channels: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(context: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            context,
            format!("{}x{}", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A fixed input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(value, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(row));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::shape("add_row", format!("1x{}", x.cols()), format!("{}x{}", b.rows(), b.cols())));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (v, bias) in value.row_mut(r).iter_mut().zip(b.as_slice()) {
                *v += bias;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn add_tiled(&mut self, a: Var, table: Var) -> Result<Var> {
        let (x, t) = (self.value(a), self.value(table));
        if t.cols() != x.cols() || t.rows() == 0 || x.rows() % t.rows() != 0 {
            return Err(Error::shape(
                "add_tiled",
                format!("a row count dividing {} and {} columns", x.rows(), x.cols()),
                format!("{}x{}", t.rows(), t.cols()),
            ));
        }
        let n = t.rows();
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (v, p) in value.row_mut(r).iter_mut().zip(t.row(r % n)) {
                *v += p;
            }
        }
        Ok(self.push(value, Op::AddTiled(a, table), &[a, table]))
    }

    pub fn col_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, sv) = (self.value(a), self.value(s));
        if sv.rows() != 1 || sv.cols() != x.cols() {
            return Err(Error::shape("col_scale", format!("1x{}", x.cols()), format!("{}x{}", sv.rows(), sv.cols())));
        }
        let value = Matrix::from_fn(x.rows(), x.cols(), |r, c| x[(r, c)] * sv.as_slice()[c]);
        Ok(self.push(value, Op::ColScale(a, s), &[a, s]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), x.cols());
        let mut slope = Matrix::zeros(x.rows(), x.cols());
        for ((v, s), xv) in value.as_mut_slice().iter_mut().zip(slope.as_mut_slice()).zip(x.as_slice()) {
            (*v, *s) = gelu_with_grad(*xv);
        }
        self.push(value, Op::Gelu(a, slope), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(stable_sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// Row-wise layer norm; `gamma`, `beta` are `1×n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let pv = self.value(p);
            if pv.shape() != (1, n) {
                return Err(Error::shape("layer_norm", format!("{name} 1x{n}"), format!("{}x{}", pv.rows(), pv.cols())));
            }
        }
        let (g, b) = (self.value(gamma).as_slice(), self.value(beta).as_slice());
        let nf = n as f64;
        let mut xhat = xv.clone();
        let mut value = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / nf;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for v in xh.iter_mut() {
                *v = (*v - mean) * inv;
            }
            let out = value.row_mut(r);
            for c in 0..n {
                out[c] = xh[c] * g[c] + b[c];
            }
        }
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head scaled dot-product attention applied independently to each
    /// block of `block` consecutive rows. Heads are equal column slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, block: usize, heads: usize, kind: AttentionKind) -> Result<Var> {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        same_shape("attention keys", qm, km)?;
        same_shape("attention values", qm, vm)?;
        let (rows, width) = qm.shape();
        if block == 0 || rows % block != 0 || heads == 0 || width % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("rows divisible by block {block}, width divisible by {heads} heads"),
                format!("{rows}x{width}"),
            ));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_blocks = rows / block;
        let mut out = Matrix::zeros(rows, width);
        let mut weights = Vec::with_capacity(n_blocks * heads);
        let mut active_masks = Vec::with_capacity(n_blocks * heads);
        for b in 0..n_blocks {
            let r0 = b * block;
            for h in 0..heads {
                let c0 = h * dh;
                let qh = Matrix::from_fn(block, dh, |r, c| qm[(r0 + r, c0 + c)]);
                let kh = Matrix::from_fn(block, dh, |r, c| km[(r0 + r, c0 + c)]);
                let vh = Matrix::from_fn(block, dh, |r, c| vm[(r0 + r, c0 + c)]);
                let mut a = qh.matmul_t_unchecked(&kh).scale(scale);
                let mask = match kind {
                    AttentionKind::ProbSparse(factor) => {
                        let u = active_query_count(block, factor);
                        (u < block).then(|| {
                            let measure: Vec<f64> = (0..block).map(|r| sparsity_measure(a.row(r))).collect();
                            let mut m = vec![false; block];
                            for i in select_active_queries(&measure, u) {
                                m[i] = true;
                            }
                            m
                        })
                    }
                    AttentionKind::Full => None,
                };
                for r in 0..block {
                    softmax_in_place(a.row_mut(r));
                }
                let o = a.matmul_unchecked(&vh);
                let mean_v = mask.as_ref().map(|_| vh.column_means());
                for r in 0..block {
                    let dst = &mut out.row_mut(r0 + r)[c0..c0 + dh];
                    match (&mask, &mean_v) {
                        (Some(m), Some(mv)) if !m[r] => dst.copy_from_slice(mv.as_slice()),
                        _ => dst.copy_from_slice(o.row(r)),
                    }
                }
                weights.push(a);
                active_masks.push(mask);
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                block,
                heads,
                weights,
                active: active_masks,
            },
            &[q, k, v],
        ))
    }

    /// Mean over each block of `block` consecutive rows.
    pub fn block_mean(&mut self, a: Var, block: usize) -> Result<Var> {
        let x = self.value(a);
        if block == 0 || x.rows() % block != 0 {
            return Err(Error::shape("block_mean", format!("rows divisible by {block}"), x.rows()));
        }
        let n_blocks = x.rows() / block;
        let mut out = Matrix::zeros(n_blocks, x.cols());
        for b in 0..n_blocks {
            let acc = out.row_mut(b);
            for r in 0..block {
                for (o, v) in acc.iter_mut().zip(x.row(b * block + r)) {
                    *o += v;
                }
            }
            for o in acc.iter_mut() {
                *o /= block as f64;
            }
        }
        Ok(self.push(out, Op::BlockMean(a, block), &[a]))
    }

    /// Sign-fixed Householder Q factor of a square matrix.
    pub fn householder_q(&mut self, a: Var, mode: QrGradient) -> Result<Var> {
        let qr = householder_qr(self.value(a))?;
        if mode == QrGradient::Exact && (0..qr.r.rows()).any(|i| qr.r[(i, i)] == 0.0) {
            return Err(Error::NonFinite("singular matrix in differentiable QR".into()));
        }
        Ok(self.push(qr.q, Op::HouseholderQ { a, r: qr.r, mode }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::shape("concat_cols", format!("{rows} rows in every part"), "mixed row counts"));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut c0 = 0;
            for p in parts {
                let src = self.nodes[p.0].value.row(r);
                dst[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Squared Euclidean norm of each row, as a column.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Matrix::from_fn(x.rows(), 1, |r, _| dot(x.row(r), x.row(r)));
        self.push(out, Op::RowSqNorm(a), &[a])
    }

    /// Mean of all entries, as `1×1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = (x.rows() * x.cols()).max(1) as f64;
        let out = Matrix::filled(1, 1, x.as_slice().iter().sum::<f64>() / n);
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn trend_head(&mut self, w: Var, trend: Var, channels: usize) -> Result<Var> {
        let (wm, tm) = (self.value(w), self.value(trend));
        let (horizon, p) = wm.shape();
        if channels == 0 || tm.cols() != p * channels {
            return Err(Error::shape("trend_head", format!("{} columns", p * channels), tm.cols()));
        }
        let mut out = Matrix::zeros(tm.rows(), horizon * channels);
        for b in 0..tm.rows() {
            let src = tm.row(b);
            let dst = out.row_mut(b);
            for h in 0..horizon {
                let o = &mut dst[h * channels..(h + 1) * channels];
                for (pi, &wv) in wm.row(h).iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    for (c, ov) in o.iter_mut().enumerate() {
                        *ov += wv * src[pi * channels + c];
                    }
                }
            }
        }
        Ok(self.push(out, Op::TrendHead { w, trend, channels }, &[w, trend]))
    }

    /// Gradients of the `1×1` node `loss` with respect to every node.
    /// Entries are `None` for nodes the loss does not depend on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::shape("backward", "1x1 loss", format!("{}x{}", lv.rows(), lv.cols())));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.matmul_t_unchecked(val(*b)));
                }
                if self.wants(*b) {
                    acc(*b, val(*a).t_matmul_unchecked(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.matmul_unchecked(val(*b)));
                }
                if self.wants(*b) {
                    acc(*b, g.t_matmul_unchecked(val(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, Matrix::from_fn(g.rows(), g.cols(), |r, c| g[(r, c)] * bv[(r, c)]));
                acc(*b, Matrix::from_fn(g.rows(), g.cols(), |r, c| g[(r, c)] * av[(r, c)]));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.wants(*row) {
                    acc(*row, g.column_means().scale(g.rows() as f64).to_row());
                }
            }
            Op::AddTiled(a, table) => {
                acc(*a, g.clone());
                if self.wants(*table) {
                    let n = val(*table).rows();
                    let mut t = Matrix::zeros(n, g.cols());
                    for r in 0..g.rows() {
                        for (tv, gv) in t.row_mut(r % n).iter_mut().zip(g.row(r)) {
                            *tv += gv;
                        }
                    }
                    acc(*table, t);
                }
            }
            Op::ColScale(a, s) => {
                let (x, sv) = (val(*a), val(*s));
                if self.wants(*a) {
                    acc(*a, Matrix::from_fn(g.rows(), g.cols(), |r, c| g[(r, c)] * sv.as_slice()[c]));
                }
                if self.wants(*s) {
                    let mut ds = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            ds[(0, c)] += g[(r, c)] * x[(r, c)];
                        }
                    }
                    acc(*s, ds);
                }
            }
            Op::Gelu(a, slope) => acc(*a, g.hadamard(slope).expect("gelu gradient shape")),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, Matrix::from_fn(g.rows(), g.cols(), |r, c| if x[(r, c)] > 0.0 { g[(r, c)] } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, Matrix::from_fn(g.rows(), g.cols(), |r, c| g[(r, c)] * y[(r, c)] * (1.0 - y[(r, c)])));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma).as_slice();
                let n = xhat.cols();
                if self.wants(*beta) {
                    acc(*beta, g.column_means().scale(g.rows() as f64).to_row());
                }
                if self.wants(*gamma) {
                    let mut dg = Matrix::zeros(1, n);
                    for r in 0..g.rows() {
                        for c in 0..n {
                            dg[(0, c)] += g[(r, c)] * xhat[(r, c)];
                        }
                    }
                    acc(*gamma, dg);
                }
                if self.wants(*x) {
                    let nf = n as f64;
                    let mut dx = Matrix::zeros(g.rows(), n);
                    let mut dxh = vec![0.0; n];
                    for r in 0..g.rows() {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut sum = 0.0;
                        let mut sum_x = 0.0;
                        for c in 0..n {
                            dxh[c] = gr[c] * gam[c];
                            sum += dxh[c];
                            sum_x += dxh[c] * xr[c];
                        }
                        let inv = inv_std[r];
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv / nf * (nf * dxh[c] - sum - xr[c] * sum_x);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                block,
                heads,
                weights,
                active,
            } => {
                let (qm, km, vm) = (val(*q), val(*k), val(*v));
                let (rows, width) = qm.shape();
                let (block, heads) = (*block, *heads);
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(rows, width);
                let mut dk = Matrix::zeros(rows, width);
                let mut dv = Matrix::zeros(rows, width);
                for b in 0..rows / block {
                    let r0 = b * block;
                    for h in 0..heads {
                        let c0 = h * dh;
                        let a = &weights[b * heads + h];
                        let mask = &active[b * heads + h];
                        let is_active = |r: usize| mask.as_ref().is_none_or(|m| m[r]);
                        let qh = Matrix::from_fn(block, dh, |r, c| qm[(r0 + r, c0 + c)]);
                        let kh = Matrix::from_fn(block, dh, |r, c| km[(r0 + r, c0 + c)]);
                        let vh = Matrix::from_fn(block, dh, |r, c| vm[(r0 + r, c0 + c)]);
                        let go = Matrix::from_fn(block, dh, |r, c| if is_active(r) { g[(r0 + r, c0 + c)] } else { 0.0 });

                        let mut dvh = a.t_matmul_unchecked(&go);
                        if mask.is_some() {
                            let mut passive = vec![0.0; dh];
                            for r in (0..block).filter(|r| !is_active(*r)) {
                                for (p, gv) in passive.iter_mut().zip(&g.row(r0 + r)[c0..c0 + dh]) {
                                    *p += gv;
                                }
                            }
                            for r in 0..block {
                                for (o, p) in dvh.row_mut(r).iter_mut().zip(&passive) {
                                    *o += p / block as f64;
                                }
                            }
                        }
                        let mut ds = go.matmul_t_unchecked(&vh);
                        for r in 0..block {
                            let ar = a.row(r);
                            let row = ds.row_mut(r);
                            let inner = dot(row, ar);
                            for (d, w) in row.iter_mut().zip(ar) {
                                *d = w * (*d - inner) * scale;
                            }
                        }
                        let dqh = ds.matmul_unchecked(&kh);
                        let dkh = ds.t_matmul_unchecked(&qh);
                        for r in 0..block {
                            dq.row_mut(r0 + r)[c0..c0 + dh].copy_from_slice(dqh.row(r));
                            dk.row_mut(r0 + r)[c0..c0 + dh].copy_from_slice(dkh.row(r));
                            dv.row_mut(r0 + r)[c0..c0 + dh].copy_from_slice(dvh.row(r));
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::BlockMean(a, block) => {
                let rows = val(*a).rows();
                let inv = 1.0 / *block as f64;
                acc(*a, Matrix::from_fn(rows, g.cols(), |r, c| g[(r / block, c)] * inv));
            }
            Op::HouseholderQ { a, r, mode } => match mode {
                QrGradient::StraightThrough => acc(*a, g.clone()),
                QrGradient::Exact => acc(*a, qr_q_adjoint(&node.value, r, g)),
            },
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let w = val(*p).cols();
                    acc(*p, g.column_block(c0, w));
                    c0 += w;
                }
            }
            Op::RowSqNorm(a) => {
                let x = val(*a);
                acc(*a, Matrix::from_fn(x.rows(), x.cols(), |r, c| 2.0 * x[(r, c)] * g[(r, 0)]));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let n = (x.rows() * x.cols()).max(1) as f64;
                acc(*a, Matrix::filled(x.rows(), x.cols(), g[(0, 0)] / n));
            }
            Op::TrendHead { w, trend, channels } => {
                let (wm, tm) = (val(*w), val(*trend));
                let d = *channels;
                let (horizon, p) = wm.shape();
                if self.wants(*w) {
                    let mut dw = Matrix::zeros(horizon, p);
                    for b in 0..tm.rows() {
                        let (gr, tr) = (g.row(b), tm.row(b));
                        for h in 0..horizon {
                            for pi in 0..p {
                                dw[(h, pi)] += dot(&gr[h * d..(h + 1) * d], &tr[pi * d..(pi + 1) * d]);
                            }
                        }
                    }
                    acc(*w, dw);
                }
                if self.wants(*trend) {
                    let mut dt = Matrix::zeros(tm.rows(), p * d);
                    for b in 0..tm.rows() {
                        for h in 0..horizon {
                            for pi in 0..p {
                                let wv = wm[(h, pi)];
                                for c in 0..d {
                                    dt[(b, pi * d + c)] += wv * g[(b, h * d + c)];
                                }
                            }
                        }
                    }
                    acc(*trend, dt);
                }
            }
        }
    }
}

/// `Ā = Q · tril₋(G − Gᵀ) · R⁻ᵀ` with `G = Qᵀ Q̄`, the adjoint of `A ↦ Q`
/// for square `A = QR` with a positive `R` diagonal.
fn qr_q_adjoint(q: &Matrix, r: &Matrix, q_bar: &Matrix) -> Matrix {
    let n = q.rows();
    let g = q.t_matmul_unchecked(q_bar);
    let m = Matrix::from_fn(n, n, |i, j| if i > j { g[(i, j)] - g[(j, i)] } else { 0.0 });
    let qm = q.matmul_unchecked(&m);
    // Solve X Rᵀ = QM row by row: R xᵀ = rowᵀ, back substitution.
    let mut x = Matrix::zeros(n, n);
    for row in 0..n {
        let rhs = qm.row(row);
        let out = x.row_mut(row);
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for j in i + 1..n {
                s -= r[(i, j)] * out[j];
            }
            out[i] = s / r[(i, i)];
        }
    }
    x
}

/// Per-node gradients from [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
