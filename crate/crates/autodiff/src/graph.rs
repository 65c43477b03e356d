use crate::error::AutodiffError;
use crate::tensor::Tensor;

/// Lower bound on the per-row variance used by [`Graph::layer_norm`].
pub const LAYER_NORM_VAR_FLOOR: f64 = 1e-8;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Param,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
        floored: Vec<bool>,
    },
    Silu(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    SqErr(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    StopGradient,
    PartialDetach {
        input: Var,
        keep: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Forward record of primitive operations, replayed in reverse by [`Graph::backward`].
///
/// Nodes are appended in evaluation order, so the record is always a valid
/// topological order. Only parameters and values derived from them carry
/// gradient; constants and stop-gradient outputs are recorded but never
/// receive or propagate a gradient.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients of a scalar loss with respect to every parameter of a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.entries
            .binary_search_by_key(&var, |(v, _)| *v)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    /// Parameter gradients in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.entries.iter().map(|(v, t)| (*v, t))
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.entries.into_iter().map(|(_, t)| t).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize), AutodiffError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(AutodiffError::shape(op, s, &[0, 0])),
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: impl Iterator<Item = f64>, len: usize) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    for (d, s) in buf.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Param, true);
        self.params.push(v);
        v
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::shape(name, ta.shape(), tb.shape()));
        }
        let out = ta.zip_with(tb, f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let d = ta.last_dim();
        if tb.numel() != d {
            return Err(AutodiffError::shape(name, ta.shape(), tb.shape()));
        }
        let row = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, row[i % d]))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    /// `a + b` with `b` broadcast along every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.row_broadcast("add_row", a, b, |x, y| x + y, Op::AddRow(a, b))
    }

    /// `a * b` with `b` broadcast along every row of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.row_broadcast("mul_row", a, b, |x, y| x * y, Op::MulRow(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = require_rank2("matmul", ta)?;
        let (k2, m) = require_rank2("matmul", tb)?;
        if k != k2 {
            return Err(AutodiffError::shape("matmul", ta.shape(), tb.shape()));
        }
        let out = matmul_nn(ta.data(), tb.data(), n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = require_rank2("matmul_nt", ta)?;
        let (m, k2) = require_rank2("matmul_nt", tb)?;
        if k != k2 {
            return Err(AutodiffError::shape("matmul_nt", ta.shape(), tb.shape()));
        }
        let out = matmul_nt(ta.data(), tb.data(), n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        let (r, c) = require_rank2("transpose", ta)?;
        let out = transpose(ta.data(), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        let d = ta.last_dim();
        if d == 0 {
            return Err(AutodiffError::Empty("softmax"));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a), rg))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance,
    /// without affine terms. The variance is floored at [`LAYER_NORM_VAR_FLOOR`].
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        let d = ta.last_dim();
        if d == 0 {
            return Err(AutodiffError::Empty("layer_norm"));
        }
        let rows = ta.rows();
        let mut out = ta.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        let mut floored = Vec::with_capacity(rows);
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is_floored = var < LAYER_NORM_VAR_FLOOR;
            let s = 1.0 / var.max(LAYER_NORM_VAR_FLOOR).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * s;
            }
            inv_std.push(s);
            floored.push(is_floored);
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                input: a,
                inv_std,
                floored,
            },
            rg,
        ))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        if ta.numel() == 0 {
            return Err(AutodiffError::Empty("mean"));
        }
        let s = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = ta.last_dim();
        let data: Vec<f64> = ta.data().chunks(d).map(|r| r.iter().sum()).collect();
        let mut shape = ta.shape().to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[a]);
        let out = Tensor::new(shape, data).expect("row count matches leading dims");
        self.push(out, Op::SumLast(a), rg)
    }

    /// Sum of squared differences, `Σ (a - b)²`.
    pub fn sq_err(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::shape("sq_err", ta.shape(), tb.shape()));
        }
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::SqErr(a, b), rg))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = inputs.first().ok_or(AutodiffError::Empty("concat"))?;
        let (r0, c0) = require_rank2("concat", self.value(*first))?;
        let mut rows = 0;
        let mut cols = 0;
        for v in inputs {
            let t = self.value(*v);
            let (r, c) = require_rank2("concat", t)?;
            match axis {
                0 if c == c0 => rows += r,
                1 if r == r0 => cols += c,
                _ => {
                    return Err(AutodiffError::shape(
                        "concat",
                        self.value(*first).shape(),
                        t.shape(),
                    ))
                }
            }
        }
        let (out_r, out_c) = if axis == 0 { (rows, c0) } else { (r0, cols) };
        let mut data = vec![0.0; out_r * out_c];
        let mut offset = 0;
        for v in inputs {
            let t = self.value(*v);
            let (r, c) = (t.shape()[0], t.shape()[1]);
            if axis == 0 {
                data[offset * out_c..(offset + r) * out_c].copy_from_slice(t.data());
                offset += r;
            } else {
                for i in 0..r {
                    data[i * out_c + offset..i * out_c + offset + c].copy_from_slice(t.row(i));
                }
                offset += c;
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(vec![out_r, out_c], data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Takes `len` rows (`axis` 0) or columns (`axis` 1) of a rank-2 tensor starting at `start`.
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        let (r, c) = require_rank2("slice", ta)?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(AutodiffError::Index {
                op: "slice",
                index: start + len,
                extent,
            });
        }
        let (out_shape, data) = if axis == 0 {
            (
                vec![len, c],
                ta.data()[start * c..(start + len) * c].to_vec(),
            )
        } else {
            let mut d = Vec::with_capacity(r * len);
            for i in 0..r {
                d.extend_from_slice(&ta.row(i)[start..start + len]);
            }
            (vec![r, len], d)
        };
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Gathers rows of `table: [vocab, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let tt = self.value(table);
        let (vocab, d) = require_rank2("embedding", tt)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(AutodiffError::Index {
                    op: "embedding",
                    index: id,
                    extent: vocab,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Same value as `a`; no gradient flows back through this edge.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// `alpha·sg(a) + (1 - alpha)·a`.
    ///
    /// The forward value is a bit-exact copy of `a`; the backward gradient
    /// through this edge is multiplied by `1 - alpha`.
    pub fn partial_detach(&mut self, a: Var, alpha: f64) -> Result<Var, AutodiffError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(AutodiffError::InvalidRatio(alpha));
        }
        let out = self.value(a).clone();
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::PartialDetach {
                input: a,
                keep: 1.0 - alpha,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`, returning the gradient of every parameter.
    ///
    /// Parameters the loss does not depend on get an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Param) {
                continue;
            }
            // Every consumer of node i has a larger index, so its gradient is final here.
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
        }
        let entries = self
            .params
            .iter()
            .map(|&p| {
                let shape = self.value(p).shape().to_vec();
                let data = grads
                    .get(p.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; self.value(p).numel()]);
                (
                    p,
                    Tensor::new(shape, data).expect("gradient matches parameter shape"),
                )
            })
            .collect();
        Ok(Gradients { entries })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contribution: &mut dyn Iterator<Item = f64>| {
            if self.nodes[v.0].requires_grad {
                let len = self.nodes[v.0].value.numel();
                add_into(&mut grads[v.0], contribution, len);
            }
        };
        match &node.op {
            Op::Param | Op::Constant | Op::StopGradient => {}
            Op::Add(a, b) => {
                send(*a, &mut g.iter().copied());
                send(*b, &mut g.iter().copied());
            }
            Op::Sub(a, b) => {
                send(*a, &mut g.iter().copied());
                send(*b, &mut g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &mut g.iter().zip(vb).map(|(g, y)| g * y));
                send(*b, &mut g.iter().zip(va).map(|(g, x)| g * x));
            }
            Op::Scale(a, s) => send(*a, &mut g.iter().map(|x| x * s)),
            Op::AddRow(a, b) => {
                send(*a, &mut g.iter().copied());
                let d = self.value(*b).numel();
                let mut acc = vec![0.0; d];
                for row in g.chunks(d) {
                    for (s, x) in acc.iter_mut().zip(row) {
                        *s += x;
                    }
                }
                send(*b, &mut acc.into_iter());
            }
            Op::MulRow(a, b) => {
                let vb = self.value(*b).data();
                let d = vb.len();
                send(*a, &mut g.iter().enumerate().map(|(k, x)| x * vb[k % d]));
                let va = self.value(*a).data();
                let mut acc = vec![0.0; d];
                for (row_g, row_a) in g.chunks(d).zip(va.chunks(d)) {
                    for j in 0..d {
                        acc[j] += row_g[j] * row_a[j];
                    }
                }
                send(*b, &mut acc.into_iter());
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                // dA = G·Bᵀ, dB = Aᵀ·G
                if self.nodes[a.0].requires_grad {
                    let da = matmul_nt(g, tb.data(), n, m, k);
                    send(*a, &mut da.into_iter());
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_tn(ta.data(), g, n, k, m);
                    send(*b, &mut db.into_iter());
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[0];
                // out = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                if self.nodes[a.0].requires_grad {
                    let da = matmul_nn(g, tb.data(), n, m, k);
                    send(*a, &mut da.into_iter());
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_tn(g, ta.data(), n, m, k);
                    send(*b, &mut db.into_iter());
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                send(*a, &mut transpose(g, r, c).into_iter());
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut out = vec![0.0; y.len()];
                for ((o, yr), gr) in out.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*a, &mut out.into_iter());
            }
            Op::LayerNorm {
                input,
                inv_std,
                floored,
            } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut out = vec![0.0; y.len()];
                for (r, ((o, yr), gr)) in out
                    .chunks_mut(d)
                    .zip(y.chunks(d))
                    .zip(g.chunks(d))
                    .enumerate()
                {
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    // Under the floor the scale is constant and only the centering remains.
                    let mean_gy = if floored[r] {
                        0.0
                    } else {
                        yr.iter().zip(gr).map(|(y, g)| y * g).sum::<f64>() / d as f64
                    };
                    for j in 0..d {
                        o[j] = inv_std[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                send(*input, &mut out.into_iter());
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                send(
                    *a,
                    &mut g.iter().zip(x).map(|(g, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * (s + x * s * (1.0 - s))
                    }),
                );
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                send(*a, &mut std::iter::repeat_n(g[0], n));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, &mut std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::SumLast(a) => {
                let d = self.value(*a).last_dim();
                send(*a, &mut g.iter().flat_map(|&x| std::iter::repeat_n(x, d)));
            }
            Op::SqErr(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let diff: Vec<f64> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| 2.0 * g[0] * (x - y))
                    .collect();
                send(*a, &mut diff.iter().copied());
                send(*b, &mut diff.iter().map(|x| -x));
            }
            Op::Concat { inputs, axis } => {
                let out_c = node.value.shape()[1];
                let mut offset = 0;
                for v in inputs {
                    let t = self.value(*v);
                    let (r, c) = (t.shape()[0], t.shape()[1]);
                    if *axis == 0 {
                        let part = g[offset * out_c..(offset + r) * out_c].to_vec();
                        send(*v, &mut part.into_iter());
                        offset += r;
                    } else {
                        let mut part = Vec::with_capacity(r * c);
                        for i in 0..r {
                            part.extend_from_slice(&g[i * out_c + offset..i * out_c + offset + c]);
                        }
                        send(*v, &mut part.into_iter());
                        offset += c;
                    }
                }
            }
            Op::Slice { input, axis, start } => {
                let t = self.value(*input);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let mut full = vec![0.0; r * c];
                if *axis == 0 {
                    full[start * c..start * c + g.len()].copy_from_slice(g);
                } else {
                    let len = node.value.shape()[1];
                    for i in 0..r {
                        full[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                }
                send(*input, &mut full.into_iter());
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut full = vec![0.0; t.numel()];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        full[id * d + j] += g[k * d + j];
                    }
                }
                send(*table, &mut full.into_iter());
            }
            Op::PartialDetach { input, keep } => send(*input, &mut g.iter().map(|x| x * keep)),
        }
    }
}

fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

/// `a: [n, k]`, `b: [m, k]` → `a · bᵀ: [n, m]`.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a: [n, k]`, `b: [n, m]` → `aᵀ · b: [k, m]`.
fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[i * k + p];
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
