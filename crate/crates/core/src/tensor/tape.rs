use std::sync::Arc;

use super::{gemm, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
///
/// A `Var` is only meaningful for the tape that produced it.
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
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, bias: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Tanh(Var),
    Log(Var),
    Clip { a: Var, lo: f64, hi: f64 },
    Reshape(Var),
    Transpose { a: Var, rows: usize, cols: usize },
    Sum(Var),
    Mean(Var),
    Gather { a: Var, index: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of tensor operations.
///
/// Nodes only ever refer to earlier nodes, so the graph is acyclic and the
/// reverse pass is a single sweep over the node list.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `sqrt(2/pi)` for the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.shape.clone(),
        rhs: rhs.shape.clone(),
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Gradients are only propagated towards leaves that
    /// were created with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a leaf without copying its data.
    pub fn shared_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out },
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// `[m,k] · [n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, true, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out },
            Op::MatMulNt { a, b, m, k, n },
            rg,
        ))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector along the last axis, broadcasting over all leading axes.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rank() != 1 || ta.last_dim() != tb.shape[0] || ta.rank() == 0 {
            return Err(mismatch("add_row", ta, tb));
        }
        let c = tb.shape[0];
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c) {
            for (x, &b) in row.iter_mut().zip(&tb.data) {
                *x += b;
            }
        }
        let value = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(&[a, bias]);
        Ok(self.push(value, Op::AddRow { a, bias }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    fn rowwise(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(&[f64], &mut [f64]),
        op: Op,
    ) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() == 0 {
            return Err(TensorError::InvalidShape {
                op: name,
                shape: vec![],
                reason: "needs at least one axis".into(),
            });
        }
        let c = ta.last_dim();
        let mut data = vec![0.0; ta.len()];
        for (src, dst) in ta.data.chunks(c).zip(data.chunks_mut(c)) {
            f(src, dst);
        }
        let value = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(&[a]);
        Ok(self.push(value, op, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise("softmax", a, softmax_row, Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise(
            "log_softmax",
            a,
            |src, dst| {
                let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s - lse;
                }
            },
            Op::LogSoftmax(a),
        )
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gamma * xhat + beta`. A constant row normalizes to zeros.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.last_dim();
        if tx.rank() == 0 || tg.shape != [c] || tb.shape != [c] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let src = &tx.data[r * c..(r + 1) * c];
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (src[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data[j] + tb.data[j];
            }
        }
        let value = Tensor { shape: tx.shape.clone(), data: out };
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            rg,
        ))
    }

    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(value, Op::Log(a), rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is passed only where the input
    /// lies strictly inside the interval.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(value, Op::Clip { a, lo, hi }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = (*self.nodes[a.0].value).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: ta.shape.clone(),
                reason: "expected a matrix".into(),
            });
        }
        let (rows, cols) = (ta.shape[0], ta.shape[1]);
        let mut data = vec![0.0; ta.len()];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = ta.data[i * cols + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor { shape: vec![cols, rows], data },
            Op::Transpose { a, rows, cols },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != index.len() {
            return Err(TensorError::InvalidShape {
                op: "gather",
                shape: shape.to_vec(),
                reason: format!("{} indices", index.len()),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= ta.len()) {
            return Err(TensorError::InvalidShape {
                op: "gather",
                shape: ta.shape.clone(),
                reason: format!("index {bad} out of range"),
            });
        }
        let data = index.iter().map(|&i| ta.data[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor { shape: shape.to_vec(), data },
            Op::Gather { a, index },
            rg,
        ))
    }

    /// Single element as a scalar.
    pub fn pick(&mut self, a: Var, flat_index: usize) -> Result<Var> {
        self.gather(a, vec![flat_index], &[])
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || len == 0 || start + len > ta.shape[1] {
            return Err(TensorError::InvalidShape {
                op: "slice_cols",
                shape: ta.shape.clone(),
                reason: format!("columns {start}..{}", start + len),
            });
        }
        let (rows, cols) = (ta.shape[0], ta.shape[1]);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.data[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor { shape: vec![rows, len], data },
            Op::SliceCols { a, start },
            rg,
        ))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || len == 0 || start + len > ta.shape[0] {
            return Err(TensorError::InvalidShape {
                op: "slice_rows",
                shape: ta.shape.clone(),
                reason: format!("rows {start}..{}", start + len),
            });
        }
        let cols = ta.shape[1];
        let index = (start * cols..(start + len) * cols).collect();
        self.gather(a, index, &[len, cols])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let rows = first.shape[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape[0] != rows {
                return Err(mismatch("concat_cols", first, t));
            }
            widths.push(t.shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&t.data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor { shape: vec![rows, total], data },
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let cols = first.last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape[1] != cols {
                return Err(mismatch("concat_rows", first, t));
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor { shape: vec![rows, cols], data },
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits[K]` against class `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let k = self.value(logits).len();
        if self.value(logits).rank() != 1 || label >= k {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape: self.shape(logits).to_vec(),
                reason: format!("label {label}"),
            });
        }
        let lp = self.log_softmax(logits)?;
        let picked = self.pick(lp, label)?;
        Ok(self.scale(picked, -1.0))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// `∂loss/∂input`; zeros when `input` does not influence `loss`.
    pub fn grad_input(&self, loss: Var, input: Var) -> Result<Tensor> {
        Ok(self.gradients(loss)?.wrt(self, input))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, &self.value(*b).data, true, ga, true);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, &self.value(*a).data, true, g, false, gb, true);
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].requires_grad {
                    // dA = G · B
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, &self.value(*b).data, false, ga, true);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Gᵀ · A
                    let gb = slot(grads, *b, n * k);
                    gemm(n, m, k, g, true, &self.value(*a).data, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                self.accumulate(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y));
                self.accumulate(grads, *b, g.iter().zip(va).map(|(g, x)| g * x));
            }
            Op::AddRow { a, bias } => {
                self.accumulate(grads, *a, g.iter().copied());
                if self.nodes[bias.0].requires_grad {
                    let c = self.value(*bias).len();
                    let gb = slot(grads, *bias, c);
                    for row in g.chunks(c) {
                        for (d, v) in gb.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.iter().map(|v| v * s)),
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, g.iter().copied()),
            Op::Softmax(a) => {
                let c = node.value.last_dim();
                let mut d = vec![0.0; g.len()];
                for ((y, gr), dr) in out.chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        dr[j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, d.into_iter());
            }
            Op::LogSoftmax(a) => {
                let c = node.value.last_dim();
                let mut d = vec![0.0; g.len()];
                for ((y, gr), dr) in out.chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        dr[j] = gr[j] - y[j].exp() * total;
                    }
                }
                self.accumulate(grads, *a, d.into_iter());
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = node.value.last_dim();
                let gam = &self.value(*gamma).data;
                if self.nodes[gamma.0].requires_grad {
                    let gg = slot(grads, *gamma, c);
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.nodes[beta.0].requires_grad {
                    let gb = slot(grads, *beta, c);
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            gb[j] += gr[j];
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut d = vec![0.0; g.len()];
                    let cf = c as f64;
                    for (r, ((gr, hr), dr)) in
                        g.chunks(c).zip(xhat.chunks(c)).zip(d.chunks_mut(c)).enumerate()
                    {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            dr[j] = inv_std[r] / cf * (cf * dh - s1 - hr[j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, d.into_iter());
                }
            }
            Op::Gelu(a) => {
                let x = &self.value(*a).data;
                self.accumulate(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(g, &x)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    }),
                );
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)))
            }
            Op::Log(a) => {
                let x = &self.value(*a).data;
                self.accumulate(grads, *a, g.iter().zip(x).map(|(g, x)| g / x));
            }
            Op::Clip { a, lo, hi } => {
                let x = &self.value(*a).data;
                self.accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > *lo && x < *hi { g } else { 0.0 }),
                );
            }
            Op::Transpose { a, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let mut d = vec![0.0; g.len()];
                for i in 0..rows {
                    for j in 0..cols {
                        d[i * cols + j] = g[j * rows + i];
                    }
                }
                self.accumulate(grads, *a, d.into_iter());
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, std::iter::repeat(g[0]).take(n));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, std::iter::repeat(g[0] / n as f64).take(n));
            }
            Op::Gather { a, index } => {
                if self.nodes[a.0].requires_grad {
                    let n = self.value(*a).len();
                    let ga = slot(grads, *a, n);
                    for (&i, &v) in index.iter().zip(g) {
                        ga[i] += v;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if self.nodes[a.0].requires_grad {
                    let src = self.value(*a);
                    let (rows, cols) = (src.shape[0], src.shape[1]);
                    let len = node.value.shape[1];
                    let ga = slot(grads, *a, rows * cols);
                    for r in 0..rows {
                        for j in 0..len {
                            ga[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape[1];
                let rows = node.value.shape[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape[1];
                    if self.nodes[p.0].requires_grad {
                        let gp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, g[offset..offset + n].iter().copied());
                    offset += n;
                }
            }
        }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        values: impl Iterator<Item = f64>,
    ) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let n = self.value(target).len();
        let dst = slot(grads, target, n);
        for (d, v) in dst.iter_mut().zip(values) {
            *d += v;
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

/// Result of one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, shaped like `v`'s value.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor { shape, data: g.clone() },
            None => Tensor::zeros(&shape),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` around `x`.
    fn numeric_grad(x: &Tensor, h: f64, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let scale = a
            .data()
            .iter()
            .chain(b.data())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-8);
        a.max_abs_diff(b) / scale
    }

    /// Builds `sum(w ⊙ op(x))` with a fixed random weighting `w` so that every
    /// output element contributes to the scalar.
    fn check_op(x: &Tensor, build: &dyn Fn(&mut Tape, Var) -> Var) {
        let probe = |x: &Tensor| -> (f64, Option<Tensor>) {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let y = build(&mut tape, xv);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let w = random(&mut rng, tape.shape(y));
            let wv = tape.constant(w);
            let prod = tape.mul(y, wv).unwrap();
            let loss = tape.sum(prod);
            let v = tape.value(loss).data()[0];
            (v, Some(tape.grad_input(loss, xv).unwrap()))
        };
        let analytic = probe(x).1.unwrap();
        let numeric = numeric_grad(x, 1e-5, &|x| probe(x).0);
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 5], 3.7));
        let g = tape.constant(Tensor::full(&[5], 1.0));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 4], 0.3), true);
        let s = tape.sum(x);
        let g = tape.grad_input(s, x).unwrap();
        assert_eq!(g, Tensor::full(&[2, 3, 4], 1.0));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        assert_eq!(tape.grad_input(s, x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_input_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], 1.0), true);
        let y = tape.leaf(Tensor::full(&[2], 1.0), true);
        let s = tape.sum(y);
        assert_eq!(tape.grad_input(s, x).unwrap(), Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], 1.0), true);
        assert!(matches!(
            tape.grad_input(x, x),
            Err(TensorError::NotScalar(_))
        ));
    }

    #[test]
    fn finite_differences_per_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 5]);
        let c = random(&mut rng, &[6, 4]);
        let bias = random(&mut rng, &[4]);
        let pos = random(&mut rng, &[3, 4]).map(|v| v.abs() + 0.2);

        let bb = b.clone();
        check_op(&a, &move |tp, x| {
            let w = tp.constant(bb.clone());
            tp.matmul(x, w).unwrap()
        });
        let aa = a.clone();
        check_op(&b, &move |tp, x| {
            let w = tp.constant(aa.clone());
            tp.matmul(w, x).unwrap()
        });
        let cc = c.clone();
        check_op(&a, &move |tp, x| {
            let w = tp.constant(cc.clone());
            tp.matmul_nt(x, w).unwrap()
        });
        let aa = a.clone();
        check_op(&c, &move |tp, x| {
            let w = tp.constant(aa.clone());
            tp.matmul_nt(w, x).unwrap()
        });
        let bi = bias.clone();
        check_op(&a, &move |tp, x| {
            let w = tp.constant(bi.clone());
            tp.add_row(x, w).unwrap()
        });
        let aa = a.clone();
        check_op(&bias, &move |tp, x| {
            let w = tp.constant(aa.clone());
            tp.add_row(w, x).unwrap()
        });
        let aa = a.clone();
        check_op(&a, &move |tp, x| {
            let w = tp.constant(aa.clone());
            let s = tp.sub(x, w).unwrap();
            let m = tp.mul(s, x).unwrap();
            tp.add(m, x).unwrap()
        });
        check_op(&a, &|tp, x| tp.scale(x, -2.5));
        check_op(&a, &|tp, x| tp.add_scalar(x, 0.7));
        check_op(&a, &|tp, x| tp.softmax(x).unwrap());
        check_op(&a, &|tp, x| tp.log_softmax(x).unwrap());
        check_op(&a, &|tp, x| tp.gelu(x));
        check_op(&a, &|tp, x| tp.tanh(x));
        check_op(&pos, &|tp, x| tp.log(x));
        check_op(&a, &|tp, x| tp.clip(x, -0.5, 0.5));
        check_op(&a, &|tp, x| tp.reshape(x, &[2, 6]).unwrap());
        check_op(&a, &|tp, x| tp.transpose(x).unwrap());
        check_op(&a, &|tp, x| tp.sum(x));
        check_op(&a, &|tp, x| tp.mean(x));
        check_op(&a, &|tp, x| tp.gather(x, vec![3, 3, 0, 11], &[2, 2]).unwrap());
        check_op(&a, &|tp, x| tp.slice_cols(x, 1, 2).unwrap());
        check_op(&a, &|tp, x| tp.slice_rows(x, 1, 2).unwrap());
        check_op(&a, &|tp, x| {
            let l = tp.slice_cols(x, 0, 1).unwrap();
            let r = tp.slice_cols(x, 2, 2).unwrap();
            tp.concat_cols(&[r, l, r]).unwrap()
        });
        check_op(&a, &|tp, x| {
            let l = tp.slice_rows(x, 0, 1).unwrap();
            tp.concat_rows(&[l, x]).unwrap()
        });
        check_op(&a, &|tp, x| {
            let r = tp.reshape(x, &[12]).unwrap();
            tp.cross_entropy(r, 5).unwrap()
        });
        let (g, bta) = (random(&mut rng, &[4]), random(&mut rng, &[4]));
        let (g2, b2) = (g.clone(), bta.clone());
        check_op(&a, &move |tp, x| {
            let gv = tp.constant(g2.clone());
            let bv = tp.constant(b2.clone());
            tp.layer_norm(x, gv, bv).unwrap()
        });
        let (a2, b2) = (a.clone(), bta.clone());
        check_op(&g, &move |tp, x| {
            let xv = tp.constant(a2.clone());
            let bv = tp.constant(b2.clone());
            tp.layer_norm(xv, x, bv).unwrap()
        });
        let (a2, g2) = (a.clone(), g.clone());
        check_op(&bta, &move |tp, x| {
            let xv = tp.constant(a2.clone());
            let gv = tp.constant(g2.clone());
            tp.layer_norm(xv, gv, x).unwrap()
        });
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[4, 4]), true);
        let w = tape.constant(random(&mut rng, &[4, 3]));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h);
        let s = tape.softmax(h).unwrap();
        let loss = tape.mean(s);
        let g1 = tape.grad_input(loss, x).unwrap();
        let g2 = tape.grad_input(loss, x).unwrap();
        assert_eq!(g1, g2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gradient_is_linear_in_the_loss(
            seed in 0u64..1000,
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xv = random(&mut rng, &[3, 5]);
            let mut tape = Tape::new();
            let x = tape.leaf(xv, true);
            let t1 = tape.tanh(x);
            let l1 = tape.sum(t1);
            let s = tape.softmax(x).unwrap();
            let lg = tape.log(s);
            let l2 = tape.mean(lg);
            let al1 = tape.scale(l1, a);
            let bl2 = tape.scale(l2, b);
            let combo = tape.add(al1, bl2).unwrap();
            let g = tape.grad_input(combo, x).unwrap();
            let g1 = tape.grad_input(l1, x).unwrap();
            let g2 = tape.grad_input(l2, x).unwrap();
            for i in 0..g.len() {
                let expect = a * g1.data()[i] + b * g2.data()[i];
                prop_assert!((g.data()[i] - expect).abs() < 1e-9);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..1000, rows in 1usize..8, cols in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[rows, cols]).map(|v| v * 50.0);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let y = tape.softmax(xv).unwrap();
            for r in 0..rows {
                let s: f64 = tape.value(y).row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn random_small_ops_match_finite_differences(
            seed in 0u64..1000,
            m in 1usize..8,
            k in 1usize..8,
            n in 1usize..8,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[m, k]);
            let w = random(&mut rng, &[k, n]);
            let gam = random(&mut rng, &[n]);
            let bet = random(&mut rng, &[n]);
            check_op(&x, &move |tp, x| {
                let wv = tp.constant(w.clone());
                let h = tp.matmul(x, wv).unwrap();
                let gv = tp.constant(gam.clone());
                let bv = tp.constant(bet.clone());
                let h = tp.layer_norm(h, gv, bv).unwrap();
                let h = tp.gelu(h);
                tp.softmax(h).unwrap()
            });
        }
    }
}
