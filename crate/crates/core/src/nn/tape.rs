//! Reverse-mode automatic differentiation over 2-D values.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters are borrowed
//! from a [`ParamSet`] without copying; intermediate values are owned by the
//! tape. Calling [`Tape::backward`] walks the recorded nodes in reverse and
//! returns dense gradients for every parameter (zero for untouched ones).

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::kernels::{self, NormStats};
use crate::nn::{ParamId, ParamSet, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: NormStats<T>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherCols(Var, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
    Sum(Var),
    Nll {
        p: Var,
        targets: Vec<usize>,
        floor: T,
    },
    SoftCe {
        p: Var,
        t: Var,
        floor: T,
    },
}

struct Node<'p, T: Real> {
    rows: usize,
    cols: usize,
    value: Cow<'p, [T]>,
    op: Op<T>,
}

pub struct Tape<'p, T: Real = f64> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<'p, T>>,
    param_vars: HashMap<usize, Var>,
}

/// Gradients produced by one backward pass.
pub struct Grads<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of the loss with respect to a recorded value, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> &[T] {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Vec<T>> {
        self.params
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::dim(op, &[a.0, a.1], &[b.0, b.1])
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let (r, c) = self.shape(v);
        Tensor::new(&[r, c], self.value(v).to_vec()).expect("tape values are well-shaped")
    }

    /// Records a constant (no gradient flows out of the tape through it, but
    /// its own gradient is available from [`Grads::wrt`]).
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf)
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::dim("matrix", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![T::zero(); rows * cols], Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id.0) {
            return v;
        }
        let t = &self.params.get(id).tensor;
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            value: Cow::Borrowed(t.data()),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id.0, v);
        v
    }

    /// Copies a value into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).to_vec();
        self.push(r, c, data, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::mm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul_t", (m, k), (n, k2)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::mm_t_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(c, r, out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let (r, c) = self.shape(a);
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(shape_err("add_row", (r, c), self.shape(row)));
        }
        let b = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|x| x.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(r, c, out, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let (r, c) = self.shape(a);
        Ok(self.push(r, c, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, out, Op::Relu(a))
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let (r, c) = self.shape(a);
        Ok(self.push(r, c, out, Op::MulConst(a, mask)))
    }

    /// Row-wise softmax; `mask` (row-major, `true` = attend) removes entries.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::dim("softmax mask", &[r, c], &[m.len()]));
            }
        }
        let out = kernels::softmax_rows(self.value(a), c, mask);
        Ok(self.push(r, c, out, Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(shape_err("layer_norm", (r, c), self.shape(gain)));
        }
        let (out, stats) = kernels::layer_norm(
            self.value(x),
            c,
            self.value(gain),
            self.value(bias),
            T::lit(eps),
        );
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
        ))
    }

    /// Selects rows of `a` by index (embedding lookup when `a` is a table).
    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("row index {bad} out of range for {r} rows")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(ids.len(), c, out, Op::GatherRows(a, ids.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.rows(parts[0]);
        if let Some(&bad) = parts.iter().find(|&&p| self.rows(p) != r) {
            return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(bad)));
        }
        let c: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.cols(p);
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(r, c, out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.cols(parts[0]);
        if let Some(&bad) = parts.iter().find(|&&p| self.cols(p) != c) {
            return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(bad)));
        }
        let r: usize = parts.iter().map(|&p| self.rows(p)).sum();
        let mut out = Vec::with_capacity(r * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(r, c, out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", (r, c), (start, len)));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(r, len, out, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > r {
            return Err(shape_err("slice_rows", (r, c), (start, len)));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push(len, c, out, Op::SliceRows(a, start)))
    }

    /// `out[p, q] = a[p, idx[p·out_cols + q]]`
    pub fn gather_cols(&mut self, a: Var, idx: &[usize], out_cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if idx.len() != r * out_cols || idx.iter().any(|&i| i >= c) {
            return Err(shape_err("gather_cols", (r, c), (r, out_cols)));
        }
        let src = self.value(a);
        let out = idx
            .iter()
            .enumerate()
            .map(|(k, &j)| src[(k / out_cols) * c + j])
            .collect();
        Ok(self.push(r, out_cols, out, Op::GatherCols(a, idx.to_vec())))
    }

    /// `out[p, idx[p·c + q]] += a[p, q]` into a `rows × width` result.
    pub fn scatter_cols(&mut self, a: Var, idx: &[usize], width: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if idx.len() != r * c || idx.iter().any(|&i| i >= width) {
            return Err(shape_err("scatter_cols", (r, c), (r, width)));
        }
        let mut out = vec![T::zero(); r * width];
        for (k, (&v, &j)) in self.value(a).iter().zip(idx).enumerate() {
            out[(k / c) * width + j] += v;
        }
        Ok(self.push(r, width, out, Op::ScatterCols(a, idx.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    /// `Σ_r −log max(p[r, targets[r]], floor)` over probability rows.
    pub fn nll(&mut self, p: Var, targets: &[usize], floor: f64) -> Result<Var> {
        let (r, c) = self.shape(p);
        if targets.len() != r {
            return Err(shape_err("nll", (r, c), (targets.len(), 1)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Label(format!("target class {bad} out of range for {c} classes")));
        }
        let floor = T::lit(floor);
        let vals = self.value(p);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -kernels::log_clamped(vals[i * c + t], floor))
            .sum();
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::Nll {
                p,
                targets: targets.to_vec(),
                floor,
            },
        ))
    }

    /// Soft cross-entropy `−Σ t · log max(p, floor)`; gradients reach both operands.
    pub fn soft_ce(&mut self, p: Var, t: Var, floor: f64) -> Result<Var> {
        if self.shape(p) != self.shape(t) {
            return Err(shape_err("soft_ce", self.shape(p), self.shape(t)));
        }
        let floor = T::lit(floor);
        let loss = self
            .value(p)
            .iter()
            .zip(self.value(t))
            .map(|(&pv, &tv)| -tv * kernels::log_clamped(pv, floor))
            .sum();
        Ok(self.push(1, 1, vec![loss], Op::SoftCe { p, t, floor }))
    }

    /// Reverse sweep from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err("backward", self.shape(loss), (1, 1)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        fn acc<'g, T: Real>(
            grads: &'g mut [Option<Vec<T>>],
            nodes: &[Node<'_, T>],
            v: Var,
        ) -> &'g mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf | Op::Param => {}
                &Op::MatMul(a, b) => {
                    let (m, k) = self.shape(a);
                    let n = node.cols;
                    kernels::mm_t_acc(&g, self.value(b), acc(&mut grads, nodes, a), m, n, k);
                    kernels::t_mm_acc(self.value(a), &g, acc(&mut grads, nodes, b), m, k, n);
                }
                &Op::MatMulT(a, b) => {
                    let (m, k) = self.shape(a);
                    let n = node.cols;
                    kernels::mm_acc(&g, self.value(b), acc(&mut grads, nodes, a), m, n, k);
                    kernels::t_mm_acc(&g, self.value(a), acc(&mut grads, nodes, b), m, n, k);
                }
                &Op::Transpose(a) => {
                    let (r, c) = self.shape(a);
                    let ga = acc(&mut grads, nodes, a);
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                }
                &Op::Add(a, b) => {
                    add_into(acc(&mut grads, nodes, a), &g);
                    add_into(acc(&mut grads, nodes, b), &g);
                }
                &Op::AddRow(a, row) => {
                    add_into(acc(&mut grads, nodes, a), &g);
                    let c = node.cols;
                    let gr = acc(&mut grads, nodes, row);
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                }
                &Op::Mul(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let ga = acc(&mut grads, nodes, a);
                    for ((o, &gi), &y) in ga.iter_mut().zip(&g).zip(vb) {
                        *o += gi * y;
                    }
                    let gb = acc(&mut grads, nodes, b);
                    for ((o, &gi), &x) in gb.iter_mut().zip(&g).zip(va) {
                        *o += gi * x;
                    }
                }
                &Op::Scale(a, s) => {
                    let ga = acc(&mut grads, nodes, a);
                    for (o, &gi) in ga.iter_mut().zip(&g) {
                        *o += gi * s;
                    }
                }
                Op::MulConst(a, mask) => {
                    let ga = acc(&mut grads, nodes, *a);
                    for ((o, &gi), &m) in ga.iter_mut().zip(&g).zip(mask) {
                        *o += gi * m;
                    }
                }
                &Op::Relu(a) => {
                    let va = self.value(a);
                    let ga = acc(&mut grads, nodes, a);
                    for ((o, &gi), &x) in ga.iter_mut().zip(&g).zip(va) {
                        if x > T::zero() {
                            *o += gi;
                        }
                    }
                }
                &Op::Softmax(a) => {
                    let c = node.cols;
                    let y = &node.value;
                    let ga = acc(&mut grads, nodes, a);
                    for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    stats,
                } => {
                    let c = node.cols;
                    let n = T::lit(c as f64);
                    let (vx, vg) = (self.value(*x), self.value(*gain));
                    let mut dgain = vec![T::zero(); c];
                    let mut dbias = vec![T::zero(); c];
                    let mut dx = vec![T::zero(); vx.len()];
                    let mut xhat = vec![T::zero(); c];
                    let mut dxhat = vec![T::zero(); c];
                    for (r, (xr, gr)) in vx.chunks(c).zip(g.chunks(c)).enumerate() {
                        let (mu, rs) = (stats.mean[r], stats.rstd[r]);
                        for j in 0..c {
                            xhat[j] = (xr[j] - mu) * rs;
                            dxhat[j] = gr[j] * vg[j];
                            dgain[j] += gr[j] * xhat[j];
                            dbias[j] += gr[j];
                        }
                        let mean_d: T = dxhat.iter().copied().sum::<T>() / n;
                        let mean_dx: T =
                            dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..c {
                            dx[r * c + j] = rs * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                    add_into(acc(&mut grads, nodes, *x), &dx);
                    add_into(acc(&mut grads, nodes, *gain), &dgain);
                    add_into(acc(&mut grads, nodes, *bias), &dbias);
                }
                Op::GatherRows(a, ids) => {
                    let c = node.cols;
                    let ga = acc(&mut grads, nodes, *a);
                    for (k, &id) in ids.iter().enumerate() {
                        add_into(&mut ga[id * c..(id + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
                Op::ConcatCols(parts) => {
                    let r = node.rows;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.cols(p);
                        let gp = acc(&mut grads, nodes, p);
                        for x in 0..r {
                            let src = &g[x * node.cols + offset..x * node.cols + offset + pc];
                            add_into(&mut gp[x * pc..(x + 1) * pc], src);
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        add_into(acc(&mut grads, nodes, p), &g[offset..offset + len]);
                        offset += len;
                    }
                }
                &Op::SliceCols(a, start) => {
                    let ac = self.cols(a);
                    let len = node.cols;
                    let ga = acc(&mut grads, nodes, a);
                    for (x, gr) in g.chunks(len).enumerate() {
                        add_into(&mut ga[x * ac + start..x * ac + start + len], gr);
                    }
                }
                &Op::SliceRows(a, start) => {
                    let c = node.cols;
                    let ga = acc(&mut grads, nodes, a);
                    add_into(&mut ga[start * c..start * c + g.len()], &g);
                }
                Op::GatherCols(a, idx) => {
                    let ac = self.cols(*a);
                    let oc = node.cols;
                    let ga = acc(&mut grads, nodes, *a);
                    for (k, (&gi, &j)) in g.iter().zip(idx).enumerate() {
                        ga[(k / oc) * ac + j] += gi;
                    }
                }
                Op::ScatterCols(a, idx) => {
                    let ac = self.cols(*a);
                    let w = node.cols;
                    let ga = acc(&mut grads, nodes, *a);
                    for (k, (o, &j)) in ga.iter_mut().zip(idx).enumerate() {
                        *o += g[(k / ac) * w + j];
                    }
                }
                &Op::Sum(a) => {
                    let ga = acc(&mut grads, nodes, a);
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
                Op::Nll { p, targets, floor } => {
                    let c = self.cols(*p);
                    let vp = self.value(*p);
                    let gp = acc(&mut grads, nodes, *p);
                    for (r, &t) in targets.iter().enumerate() {
                        let pv = vp[r * c + t];
                        if pv > *floor {
                            gp[r * c + t] -= g[0] / pv;
                        }
                    }
                }
                Op::SoftCe { p, t, floor } => {
                    let (vp, vt) = (self.value(*p), self.value(*t));
                    let gp = acc(&mut grads, nodes, *p);
                    for ((o, &pv), &tv) in gp.iter_mut().zip(vp).zip(vt) {
                        if pv > *floor {
                            *o -= g[0] * tv / pv;
                        }
                    }
                    let gt = acc(&mut grads, nodes, *t);
                    for (o, &pv) in gt.iter_mut().zip(vp) {
                        *o -= g[0] * kernels::log_clamped(pv, *floor);
                    }
                }
            }
            grads[i] = Some(g);
        }

        let params = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| match self.param_vars.get(&i) {
                Some(v) => grads[v.0]
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); p.tensor.len()]),
                None => vec![T::zero(); p.tensor.len()],
            })
            .collect();
        Ok(Grads {
            nodes: grads,
            params,
        })
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{numeric_gradient, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(&[rows, cols], data).unwrap()
    }

    fn weighted_sum(tape: &mut Tape<'_, f64>, y: Var) -> Var {
        let (r, c) = tape.shape(y);
        let w = (0..r * c).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let wv = tape.matrix(r, c, w).unwrap();
        let p = tape.mul(y, wv).unwrap();
        tape.sum(p)
    }

    /// Checks d/dx of `Σ w ⊙ f(x)` against central differences.
    fn check(x: Tensor, f: impl Fn(&mut Tape<'_, f64>, Var) -> Var) {
        let params = ParamSet::new();
        let eval = |data: &[f64]| -> f64 {
            let mut tape = Tape::new(&params);
            let xv = tape.matrix(x.rows(), x.cols(), data.to_vec()).unwrap();
            let y = f(&mut tape, xv);
            let s = weighted_sum(&mut tape, y);
            tape.scalar(s)
        };
        let mut tape = Tape::new(&params);
        let xv = tape.constant(&x);
        let y = f(&mut tape, xv);
        let s = weighted_sum(&mut tape, y);
        let grads = tape.backward(s).unwrap();
        let analytic = grads
            .wrt(xv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()]);
        let numeric = numeric_gradient(x.data(), 1e-5, eval);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            assert!(
                relative_error(*a, *n) <= 1e-6,
                "coord {i}: analytic {a} numeric {n}"
            );
        }
    }

    #[test]
    fn elementwise_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let other = random(3, 4, &mut rng);
        let row = random(1, 4, &mut rng);
        check(random(3, 4, &mut rng), |t, x| t.transpose(x));
        check(random(3, 4, &mut rng), |t, x| {
            let o = t.constant(&other);
            let a = t.add(x, o).unwrap();
            t.mul(a, x).unwrap()
        });
        check(random(3, 4, &mut rng), |t, x| {
            let r = t.constant(&row);
            let y = t.add_row(x, r).unwrap();
            t.scale(y, -2.5)
        });
        check(random(3, 4, &mut rng), |t, x| t.relu(x));
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(random(3, 4, &mut rng), |t, x| {
            let a = t.slice_cols(x, 1, 2).unwrap();
            let c = t.concat_cols(&[a, x, a]).unwrap();
            let b = t.slice_rows(c, 1, 2).unwrap();
            t.concat_rows(&[c, b]).unwrap()
        });
        check(random(3, 4, &mut rng), |t, x| t.gather_rows(x, &[2, 0, 2, 1]).unwrap());
        check(random(3, 3, &mut rng), |t, x| {
            let idx = [0, 1, 1, 2, 2, 2, 0, 0, 1];
            let g = t.gather_cols(x, &idx, 3).unwrap();
            t.scatter_cols(g, &idx, 3).unwrap()
        });
    }

    #[test]
    fn matmul_variants_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random(4, 2, &mut rng);
        let bt = random(5, 4, &mut rng);
        check(random(3, 4, &mut rng), |t, x| {
            let bv = t.constant(&b);
            t.matmul(x, bv).unwrap()
        });
        check(random(3, 4, &mut rng), |t, x| {
            let bv = t.constant(&bt);
            t.matmul_t(x, bv).unwrap()
        });
        // right-hand operand
        check(random(4, 2, &mut rng), |t, x| {
            let a = t.constant(&bt);
            t.matmul(a, x).unwrap()
        });
        check(random(5, 4, &mut rng), |t, x| {
            let a = t.constant(&b);
            let at = t.transpose(a);
            t.matmul_t(at, x).unwrap()
        });
    }

    #[test]
    fn softmax_norm_and_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mask = [true, false, true, true, true, true, false, true, true];
        check(random(3, 3, &mut rng), |t, x| t.softmax(x, None).unwrap());
        check(random(3, 3, &mut rng), |t, x| t.softmax(x, Some(&mask)).unwrap());
        let gain = random(1, 5, &mut rng);
        check(random(2, 5, &mut rng), |t, x| {
            let g = t.constant(&gain);
            let b = t.zeros(1, 5);
            t.layer_norm(x, g, b, 1e-6).unwrap()
        });
        check(random(3, 4, &mut rng), |t, x| {
            let p = t.softmax(x, None).unwrap();
            t.nll(p, &[3, 0, 1], 1e-12).unwrap()
        });
        let target = random(3, 4, &mut rng);
        check(random(3, 4, &mut rng), |t, x| {
            let p = t.softmax(x, None).unwrap();
            let tv = t.constant(&target);
            let q = t.softmax(tv, None).unwrap();
            t.soft_ce(p, q, 1e-12).unwrap()
        });
        // gradient into the target operand
        let pred = random(3, 4, &mut rng);
        check(random(3, 4, &mut rng), |t, x| {
            let pv = t.constant(&pred);
            let p = t.softmax(pv, None).unwrap();
            let q = t.softmax(x, None).unwrap();
            t.soft_ce(p, q, 1e-12).unwrap()
        });
    }

    #[test]
    fn masked_softmax_matches_brute_force() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let x = tape.matrix(1, 3, vec![0.3, 2.0, -1.0]).unwrap();
        let y = tape.softmax(x, Some(&[true, false, true])).unwrap();
        let z = (0.3f64).exp() + (-1.0f64).exp();
        let got = tape.value(y);
        assert!((got[0] - 0.3f64.exp() / z).abs() < 1e-15);
        assert_eq!(got[1], 0.0);
        assert!((got[2] - (-1.0f64).exp() / z).abs() < 1e-15);

        let all = tape.softmax(x, Some(&[false, false, false])).unwrap();
        assert!(tape.value(all).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let x = tape.constant(&random(20, 17, &mut rng));
        let x = tape.scale(x, 40.0);
        let y = tape.softmax(x, None).unwrap();
        for row in tape.value(y).chunks(17) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn dropout_modes() {
        let params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new(&params);
        let x = tape.matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.3, false, &mut rng).unwrap(), x);
        assert!(matches!(
            tape.dropout(x, 1.0, true, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(tape.dropout(x, -0.1, false, &mut rng).is_err());

        let n = 100_000;
        let ones = tape.matrix(1, n, vec![1.0; n]).unwrap();
        let y = tape.dropout(ones, 0.3, true, &mut rng).unwrap();
        let vals = tape.value(y);
        let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = vals.iter().sum::<f64>() / n as f64;
        assert!((kept - 0.7).abs() <= 0.01, "kept {kept}");
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn dropout_is_reproducible_per_seed() {
        let params = ParamSet::new();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new(&params);
            let x = tape.matrix(1, 64, vec![1.0; 64]).unwrap();
            let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
            tape.value(y).to_vec()
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }

    #[test]
    fn untouched_params_get_zero_gradients() {
        let mut params = ParamSet::new();
        let used = params.register("used", Tensor::filled(&[1, 2], 1.5)).unwrap();
        params.register("unused", Tensor::zeros(&[3])).unwrap();
        let mut tape = Tape::new(&params);
        let u = tape.param(used);
        let again = tape.param(used);
        assert_eq!(u, again);
        let s = tape.sum(u);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.params()[0], vec![1.0, 1.0]);
        assert_eq!(grads.params()[1], vec![0.0; 3]);
    }
}
