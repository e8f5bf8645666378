use crate::error::{Error, Result};

use super::{gemm, Tensor};

/// Guard added to row norms below this threshold.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Silu(Var),
    Scale(Var, f64),
    Shift(Var),
    AddRow(Var, Var),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    NormalizeRows { x: Var, denom: Vec<f64>, norm: Vec<f64> },
    PairwiseSqDist(Var, Var),
    SelfSqDist(Var),
    LogMeanExp(Var),
    /// Softmax weights over all `(i, k)` pairs, `B×K` row-major.
    SqDistLogMeanExp { z: Var, m: Var, scale: f64, weights: Vec<f64> },
}

/// Records a forward computation and differentiates it in reverse.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` walks it once from the loss downwards.
/// A tape is built and consumed by a single training step.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Accumulated gradient; `None` for values that do not require grad or
    /// before the first `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad[v.0])
    }

    /// Same values, cut from the gradient graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.values[x.0].clone();
        self.push(value, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.values[a.0].matmul(&self.values[b.0])?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let y = tb.data()[0];
            Ok(ta.map(|x| f(x, y)))
        } else if ta.is_scalar() {
            let x = ta.data()[0];
            Ok(tb.map(|y| f(x, y)))
        } else {
            Err(Error::dim(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, a: Var, out: Tensor, op: Op) -> Var {
        let rg = self.requires_grad[a.0];
        self.push(out, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|x| -x);
        self.unary(a, out, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(f64::exp);
        self.unary(a, out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = &self.values[a.0];
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let out = x.map(f64::ln);
        Ok(self.unary(a, out, Op::Log(a)))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|x| x * sigmoid(x));
        self.unary(a, out, Op::Silu(a))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.values[a.0].map(|x| x * c);
        self.unary(a, out, Op::Scale(a, c))
    }

    /// Add a constant.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let out = self.values[a.0].map(|x| x + c);
        self.unary(a, out, Op::Shift(a))
    }

    /// `x[B×N] + bias[N]` applied to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.values[x.0], &self.values[bias.0]);
        let (_, n) = tx.dims2()?;
        if tb.numel() != n || tb.rank() != 1 {
            return Err(Error::dim("add_row", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let b = tb.data();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    /// Rows `table[idx[r]]` stacked into a `len(idx) × H` matrix.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.values[table.0];
        let (rows, h) = t.dims2()?;
        if idx.is_empty() {
            return Err(Error::Shape("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * h);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index(format!("row {i} of table with {rows} rows")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), h, data)?;
        let rg = self.requires_grad[table.0];
        Ok(self.push(out, Op::GatherRows(table, idx.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.values[a.0].sum());
        self.unary(a, out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.unary(a, out, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.values[a.0].reshape(shape)?;
        Ok(self.unary(a, out, Op::Reshape(a)))
    }

    /// Divide every row of a matrix by its Euclidean norm.
    ///
    /// Rows whose norm is below `1e-12` are divided by `norm + 1e-12`, so a
    /// zero row maps to zero instead of NaN.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        let (rows, cols) = t.dims2()?;
        let mut out = t.clone();
        let mut denom = Vec::with_capacity(rows);
        let mut norm = Vec::with_capacity(rows);
        for r in out.data_mut().chunks_exact_mut(cols) {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = if n < NORM_EPS { n + NORM_EPS } else { n };
            for v in r.iter_mut() {
                *v /= d;
            }
            denom.push(d);
            norm.push(n);
        }
        Ok(self.unary(x, out, Op::NormalizeRows { x, denom, norm }))
    }

    /// `out[i][k] = ||z_i - m_k||²`.
    ///
    /// `m` is read as a constant: no gradient is ever propagated into it.
    pub fn pairwise_sqdist(&mut self, z: Var, m: Var) -> Result<Var> {
        let (tz, tm) = (&self.values[z.0], &self.values[m.0]);
        let (b, d) = tz.dims2()?;
        let (k, d2) = tm.dims2()?;
        if d != d2 {
            return Err(Error::dim("pairwise_sqdist", format!("feature dims {d} vs {d2}")));
        }
        let mut out = vec![0.0; b * k];
        gemm(b, d, k, tz.data(), false, tm.data(), true, &mut out, 0.0);
        let zn: Vec<f64> = (0..b).map(|i| sqnorm(tz.row(i))).collect();
        let mn: Vec<f64> = (0..k).map(|j| sqnorm(tm.row(j))).collect();
        for (i, row) in out.chunks_exact_mut(k).enumerate() {
            for (j, o) in row.iter_mut().enumerate() {
                *o = (zn[i] + mn[j] - 2.0 * *o).max(0.0);
            }
        }
        let out = Tensor::matrix(b, k, out)?;
        let rg = self.requires_grad[z.0];
        Ok(self.push(out, Op::PairwiseSqDist(z, m), rg))
    }

    /// `out[i][j] = ||z_i - z_j||²` with gradient flowing through both
    /// members of every pair.
    pub fn pairwise_sqdist_self(&mut self, z: Var) -> Result<Var> {
        let tz = &self.values[z.0];
        let (b, d) = tz.dims2()?;
        let mut out = vec![0.0; b * b];
        gemm(b, d, b, tz.data(), false, tz.data(), true, &mut out, 0.0);
        let zn: Vec<f64> = (0..b).map(|i| sqnorm(tz.row(i))).collect();
        for (i, row) in out.chunks_exact_mut(b).enumerate() {
            for (j, o) in row.iter_mut().enumerate() {
                *o = if i == j { 0.0 } else { (zn[i] + zn[j] - 2.0 * *o).max(0.0) };
            }
        }
        let out = Tensor::matrix(b, b, out)?;
        let rg = self.requires_grad[z.0];
        Ok(self.push(out, Op::SelfSqDist(z), rg))
    }

    /// `log(mean(exp(x)))` over all elements, evaluated with a max shift.
    pub fn log_mean_exp(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let mx = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = t.data().iter().map(|&v| (v - mx).exp()).sum();
        let out = Tensor::scalar(mx + (s / t.numel() as f64).ln());
        self.unary(a, out, Op::LogMeanExp(a))
    }

    /// `log mean_{i,k} exp(scale · ||z_i - m_k||²)` as one node.
    ///
    /// Equivalent to `log_mean_exp(scale(pairwise_sqdist(z, m)))` but keeps a
    /// single `B×K` buffer. `m` is read as a constant.
    pub fn sqdist_log_mean_exp(&mut self, z: Var, m: Var, scale: f64) -> Result<Var> {
        let (tz, tm) = (&self.values[z.0], &self.values[m.0]);
        let (b, d) = tz.dims2()?;
        let (k, d2) = tm.dims2()?;
        if d != d2 {
            return Err(Error::dim("sqdist_log_mean_exp", format!("feature dims {d} vs {d2}")));
        }
        let mut w = vec![0.0; b * k];
        gemm(b, d, k, tz.data(), false, tm.data(), true, &mut w, 0.0);
        let zn: Vec<f64> = (0..b).map(|i| sqnorm(tz.row(i))).collect();
        let mn: Vec<f64> = (0..k).map(|j| sqnorm(tm.row(j))).collect();
        let mut mx = f64::NEG_INFINITY;
        for (i, row) in w.chunks_exact_mut(k).enumerate() {
            for (j, o) in row.iter_mut().enumerate() {
                *o = scale * (zn[i] + mn[j] - 2.0 * *o).max(0.0);
                mx = mx.max(*o);
            }
        }
        let mut sum = 0.0;
        for o in w.iter_mut() {
            *o = (*o - mx).exp();
            sum += *o;
        }
        w.iter_mut().for_each(|o| *o /= sum);
        let out = Tensor::scalar(mx + (sum / (b * k) as f64).ln());
        let rg = self.requires_grad[z.0];
        Ok(self.push(out, Op::SqDistLogMeanExp { z, m, scale, weights: w }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients are added to whatever is already stored, so two calls
    /// without [`Tape::zero_grad`] in between accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        if self.requires_grad[loss.0] {
            adj[loss.0] = Some(Tensor::full(self.values[loss.0].shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            match &mut self.grads[i] {
                Some(acc) => add_into(acc.data_mut(), g.data()),
                slot @ None => *slot = Some(g),
            }
        }
        for i in 0..self.values.len() {
            if self.requires_grad[i] && self.grads[i].is_none() {
                self.grads[i] = Some(Tensor::zeros(self.values[i].shape()));
            }
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.requires_grad[v.0] {
            return None;
        }
        let shape = self.values[v.0].shape();
        Some(adj[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.ops[i] {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.values[a.0].dims2().expect("matmul lhs");
                let n = self.values[b.0].shape()[1];
                if let Some(ga) = self.slot(adj, *a) {
                    gemm(m, n, k, gd, false, self.values[b.0].data(), true, ga, 1.0);
                }
                if let Some(gb) = self.slot(adj, *b) {
                    gemm(k, m, n, self.values[a.0].data(), true, gd, false, gb, 1.0);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.ops[i], Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    let bcast = self.values[v.0].numel() != gd.len();
                    if let Some(gv) = self.slot(adj, v) {
                        if bcast {
                            gv[0] += s * gd.iter().sum::<f64>();
                        } else {
                            for (o, &x) in gv.iter_mut().zip(gd) {
                                *o += s * x;
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, w) in [(*a, *b), (*b, *a)] {
                    let other = self.values[w.0].data();
                    let bcast = self.values[v.0].numel() != gd.len();
                    if let Some(gv) = self.slot(adj, v) {
                        if bcast {
                            gv[0] += gd.iter().zip(other).map(|(x, y)| x * y).sum::<f64>();
                        } else if other.len() == 1 {
                            for (o, &x) in gv.iter_mut().zip(gd) {
                                *o += x * other[0];
                            }
                        } else {
                            for ((o, &x), &y) in gv.iter_mut().zip(gd).zip(other) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            Op::Neg(a) => self.elementwise_vjp(adj, *a, gd, |_, _| -1.0),
            Op::Exp(a) => {
                let out = self.values[i].data();
                if let Some(ga) = self.slot(adj, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(gd).zip(out) {
                        *o += x * y;
                    }
                }
            }
            Op::Log(a) => self.elementwise_vjp(adj, *a, gd, |x, _| 1.0 / x),
            Op::Silu(a) => self.elementwise_vjp(adj, *a, gd, |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }),
            Op::Scale(a, c) => {
                let c = *c;
                self.elementwise_vjp(adj, *a, gd, move |_, _| c)
            }
            Op::Shift(a) | Op::Reshape(a) => self.elementwise_vjp(adj, *a, gd, |_, _| 1.0),
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.slot(adj, *x) {
                    add_into(gx, gd);
                }
                if let Some(gb) = self.slot(adj, *bias) {
                    let n = gb.len();
                    for row in gd.chunks_exact(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::GatherRows(table, idx) => {
                let h = self.values[table.0].shape()[1];
                if let Some(gt) = self.slot(adj, *table) {
                    for (r, &t) in idx.iter().enumerate() {
                        add_into(&mut gt[t * h..(t + 1) * h], &gd[r * h..(r + 1) * h]);
                    }
                }
            }
            Op::Sum(a) => {
                let s = gd[0];
                if let Some(ga) = self.slot(adj, *a) {
                    ga.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Mean(a) => {
                let s = gd[0] / self.values[a.0].numel() as f64;
                if let Some(ga) = self.slot(adj, *a) {
                    ga.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::NormalizeRows { x, denom, norm } => {
                let xv = self.values[x.0].data();
                let cols = self.values[x.0].shape()[1];
                if let Some(gx) = self.slot(adj, *x) {
                    for r in 0..denom.len() {
                        let (d, n) = (denom[r], norm[r]);
                        let span = r * cols..(r + 1) * cols;
                        let (xr, gr) = (&xv[span.clone()], &gd[span.clone()]);
                        let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let coef = if n > 0.0 { xg / (d * d * n) } else { 0.0 };
                        for ((o, &xi), &gi) in gx[span].iter_mut().zip(xr).zip(gr) {
                            *o += gi / d - xi * coef;
                        }
                    }
                }
            }
            Op::PairwiseSqDist(z, m) => {
                let (b, d) = self.values[z.0].dims2().expect("sqdist lhs");
                let k = self.values[m.0].shape()[0];
                let zv = self.values[z.0].data();
                if let Some(gz) = self.slot(adj, *z) {
                    // grad_i = 2 * (rowsum(G)_i * z_i - (G m)_i)
                    let mut gm = vec![0.0; b * d];
                    gemm(b, k, d, gd, false, self.values[m.0].data(), false, &mut gm, 0.0);
                    for r in 0..b {
                        let rs: f64 = gd[r * k..(r + 1) * k].iter().sum();
                        for c in 0..d {
                            gz[r * d + c] += 2.0 * (rs * zv[r * d + c] - gm[r * d + c]);
                        }
                    }
                }
            }
            Op::SelfSqDist(z) => {
                let (b, d) = self.values[z.0].dims2().expect("sqdist input");
                let zv = self.values[z.0].data();
                if let Some(gz) = self.slot(adj, *z) {
                    let mut sym = vec![0.0; b * b];
                    for r in 0..b {
                        for c in 0..b {
                            sym[r * b + c] = gd[r * b + c] + gd[c * b + r];
                        }
                    }
                    let mut gm = vec![0.0; b * d];
                    gemm(b, b, d, &sym, false, zv, false, &mut gm, 0.0);
                    for r in 0..b {
                        let rs: f64 = sym[r * b..(r + 1) * b].iter().sum();
                        for c in 0..d {
                            gz[r * d + c] += 2.0 * (rs * zv[r * d + c] - gm[r * d + c]);
                        }
                    }
                }
            }
            Op::SqDistLogMeanExp { z, m, scale, weights } => {
                let (b, d) = self.values[z.0].dims2().expect("sqdist lhs");
                let k = self.values[m.0].shape()[0];
                let zv = self.values[z.0].data();
                let c = 2.0 * scale * gd[0];
                if let Some(gz) = self.slot(adj, *z) {
                    let mut pm = vec![0.0; b * d];
                    gemm(b, k, d, weights, false, self.values[m.0].data(), false, &mut pm, 0.0);
                    for r in 0..b {
                        let rs: f64 = weights[r * k..(r + 1) * k].iter().sum();
                        for col in 0..d {
                            gz[r * d + col] += c * (rs * zv[r * d + col] - pm[r * d + col]);
                        }
                    }
                }
            }
            Op::LogMeanExp(a) => {
                let out = self.values[i].data()[0];
                let n = self.values[a.0].numel() as f64;
                let s = gd[0];
                let av = self.values[a.0].data();
                if let Some(ga) = self.slot(adj, *a) {
                    for (o, &x) in ga.iter_mut().zip(av) {
                        *o += s * (x - out).exp() / n;
                    }
                }
            }
        }
    }

    /// Adds `g * f(x, y)` to the adjoint of `a`, with `x` the input and `y`
    /// the output of node elementwise.
    fn elementwise_vjp(&self, adj: &mut [Option<Tensor>], a: Var, gd: &[f64], f: impl Fn(f64, f64) -> f64) {
        let xs = self.values[a.0].data();
        if let Some(ga) = self.slot(adj, a) {
            for ((o, &g), &x) in ga.iter_mut().zip(gd).zip(xs) {
                *o += g * f(x, 0.0);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sqnorm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}
