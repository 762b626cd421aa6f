//! Dense f64 tensors and reverse-mode automatic differentiation on a tape.
//!
//! The design follows the classic Wengert-list pattern: a [`Tape`] owns an
//! arena of nodes, operations append nodes and return lightweight [`Var`]
//! handles, and [`Tape::backward`] walks the arena once in reverse creation
//! order (which is a topological order, since operands always precede their
//! results). Gradient contributions from fan-out accumulate additively, and
//! all iteration is in fixed index order, so two backward passes over the
//! same graph produce bit-identical gradients.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Plain tensor storage used outside the tape: parameters, datasets,
/// checkpoint payloads. Row-major, shape `[rows, cols]` for matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        TensorData { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dim {
                op: "from_vec",
                details: format!("shape {:?} holds {} elements, got {}", shape, n, data.len()),
            });
        }
        Ok(TensorData { shape: shape.to_vec(), data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// 2-D element access; panics on rank/bounds misuse (internal tooling).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    /// Plain (non-differentiable) matrix product.
    pub fn matmul(&self, other: &TensorData) -> Result<TensorData> {
        let (m, k) = dims2("matmul", &self.shape)?;
        let (k2, n) = dims2("matmul", &other.shape)?;
        if k != k2 {
            return Err(Error::Dim {
                op: "matmul",
                details: format!("left {:?}, right {:?}", self.shape, other.shape),
            });
        }
        Ok(TensorData { shape: vec![m, n], data: mm(&self.data, &other.data, m, k, n) })
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::Dim { op, details: format!("expected rank 2, got shape {:?}", shape) });
    }
    Ok((shape[0], shape[1]))
}

/// `a[m,k] * b[k,n]`, ikj loop order.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `a[m,k] * b[n,k]^T -> [m,n]` (rows dotted with rows).
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `a[k,m]^T * b[k,n] -> [m,n]`, accumulated rank-1 style.
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Standard normal CDF, used by GELU.
fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal PDF.
fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU: `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * norm_cdf(x)
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// A tape node's value plus gradient slot.
#[derive(Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    /// `a * b^T`; avoids materializing transposes in attention.
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddBias { x: Var, bias: Var },
    Relu { x: Var },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, keep: Vec<bool>, scale: f64 },
    SliceCols { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SumAll { x: Var },
    MeanAll { x: Var },
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Arena of tensors plus the operation record connecting them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            tensor: Tensor { shape, data, requires_grad: needs_grad, grad: None },
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: &TensorData) -> Var {
        self.push(value.shape.clone(), value.data.clone(), Op::Leaf, true)
    }

    /// Non-trainable leaf (inputs, fixed matrices).
    pub fn constant(&mut self, value: &TensorData) -> Var {
        self.push(value.shape.clone(), value.data.clone(), Op::Leaf, false)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    /// Copy a node's value out of the tape.
    pub fn value(&self, v: Var) -> TensorData {
        let t = &self.nodes[v.0].tensor;
        TensorData { shape: t.shape.clone(), data: t.data.clone() }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::Dim {
                op: "matmul",
                details: format!("left {:?}, right {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data = mm(self.data(a), self.data(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, Op::Matmul { a, b }, ng))
    }

    /// `a * b^T` where `a` is `[m,k]` and `b` is `[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_nt", self.shape(a))?;
        let (n, k2) = dims2("matmul_nt", self.shape(b))?;
        if k != k2 {
            return Err(Error::Dim {
                op: "matmul_nt",
                details: format!("left {:?}, right {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data = mm_nt(self.data(a), self.data(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, Op::MatmulNT { a, b }, ng))
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim {
                op: op_name,
                details: format!("left {:?}, right {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub { a, b }, ng))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::Scale { x, c }, ng)
    }

    /// Row-broadcast bias add: `x[n,d] + bias[d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = dims2("add_bias", self.shape(x))?;
        if self.shape(bias) != [d] {
            return Err(Error::Dim {
                op: "add_bias",
                details: format!("input {:?}, bias {:?}", self.shape(x), self.shape(bias)),
            });
        }
        let xs = self.data(x);
        let bs = self.data(bias);
        let mut data = xs.to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += bs[j];
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(vec![n, d], data, Op::AddBias { x, bias }, ng))
    }

    /// `x @ w + b` convenience.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::Relu { x }, ng)
    }

    /// Exact GELU (`x * Phi(x)` with the Gaussian CDF, no tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| gelu_scalar(*v)).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::Gelu { x }, ng)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Param {
                name: "axis",
                details: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        let mut data = self.data(x).to_vec();
        for_each_lane(&shape, axis, |base, step, dim| {
            let mut mx = f64::NEG_INFINITY;
            for t in 0..dim {
                mx = mx.max(data[base + t * step]);
            }
            let mut sum = 0.0;
            for t in 0..dim {
                let e = (data[base + t * step] - mx).exp();
                data[base + t * step] = e;
                sum += e;
            }
            for t in 0..dim {
                data[base + t * step] /= sum;
            }
        });
        let ng = self.needs(x);
        Ok(self.push(shape, data, Op::Softmax { x, axis }, ng))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Param { name: "eps", details: format!("must be > 0, got {eps}") });
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Dim {
            op: "layer_norm",
            details: "rank 0 input".into(),
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dim {
                op: "layer_norm",
                details: format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    shape,
                    self.shape(gain),
                    self.shape(bias)
                ),
            });
        }
        let rows = self.data(x).len() / d;
        let xs = self.data(x);
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * is;
            }
        }
        let gs = self.data(gain);
        let bs = self.data(bias);
        let mut data = vec![0.0; xs.len()];
        for r in 0..rows {
            for j in 0..d {
                data[r * d + j] = gs[j] * xhat[r * d + j] + bs[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(shape, data, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    /// Inverted dropout: keeps each element with probability `1 - p` and
    /// rescales by `1/(1-p)`. Identity when `training` is false or `p == 0`
    /// (no node is recorded and no randomness is consumed in that case).
    pub fn dropout(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param {
                name: "p",
                details: format!("dropout probability must be in [0, 1), got {p}"),
            });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep: Vec<bool> = (0..self.data(x).len()).map(|_| rng.random::<f64>() >= p).collect();
        let scale = 1.0 / (1.0 - p);
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .zip(&keep)
            .map(|(v, k)| if *k { v * scale } else { 0.0 })
            .collect();
        let ng = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), data, Op::Dropout { x, keep, scale }, ng))
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = dims2("slice_cols", self.shape(x))?;
        if start + len > d || len == 0 {
            return Err(Error::Dim {
                op: "slice_cols",
                details: format!("range {}..{} out of {:?}", start, start + len, self.shape(x)),
            });
        }
        let xs = self.data(x);
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xs[i * d + start..i * d + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(vec![n, len], data, Op::SliceCols { x, start }, ng))
    }

    /// Vertical stack of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Param { name: "parts", details: "empty concat".into() });
        }
        let (_, d) = dims2("concat_rows", self.shape(parts[0]))?;
        let mut rows = 0;
        for &p in parts {
            let (r, dp) = dims2("concat_rows", self.shape(p))?;
            if dp != d {
                return Err(Error::Dim {
                    op: "concat_rows",
                    details: format!("parts {:?} vs {:?}", self.shape(parts[0]), self.shape(p)),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * d);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, d], data, Op::ConcatRows { parts: parts.to_vec() }, ng))
    }

    /// Horizontal stack of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Param { name: "parts", details: "empty concat".into() });
        }
        let (n, _) = dims2("concat_cols", self.shape(parts[0]))?;
        let mut width = 0;
        for &p in parts {
            let (np, c) = dims2("concat_cols", self.shape(p))?;
            if np != n {
                return Err(Error::Dim {
                    op: "concat_cols",
                    details: format!("parts {:?} vs {:?}", self.shape(parts[0]), self.shape(p)),
                });
            }
            width += c;
        }
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                let ps = self.data(p);
                data.extend_from_slice(&ps[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![n, width], data, Op::ConcatCols { parts: parts.to_vec() }, ng))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![s], Op::SumAll { x }, ng)
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.data(x).len();
        let s: f64 = self.data(x).iter().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![s / n as f64], Op::MeanAll { x }, ng)
    }

    /// Mean squared error between two same-shape tensors, as a `[1]` tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every node that
    /// the loss depends on through differentiable paths; leaves created with
    /// `param` thus always receive gradients when they contribute. Gradients
    /// from earlier `backward` calls are overwritten, not accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.tensor.grad = g;
        }
        Ok(())
    }

    /// Send this node's upstream gradient `g` into its parents.
    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Local helper: add a computed contribution into a parent's slot.
        fn add_into(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
            match slot {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                None => *slot = Some(contrib),
            }
        }

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA = g * B^T
                    let da = mm_nt(g, self.data(*b), m, n, k);
                    add_into(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    // dB = A^T * g
                    let db = mm_tn(self.data(*a), g, m, k, n);
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::MatmulNT { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.needs(*a) {
                    // out = A B^T  =>  dA = g * B
                    let da = mm(g, self.data(*b), m, n, k);
                    add_into(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    // dB = g^T * A
                    let db = mm_tn(g, self.data(*a), m, n, k);
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if self.needs(*b) {
                    add_into(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if self.needs(*b) {
                    add_into(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da = g.iter().zip(self.data(*b)).map(|(gv, bv)| gv * bv).collect();
                    add_into(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    let db = g.iter().zip(self.data(*a)).map(|(gv, av)| gv * av).collect();
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    add_into(&mut grads[x.0], g.iter().map(|v| v * c).collect());
                }
            }
            Op::AddBias { x, bias } => {
                let d = self.shape(*bias)[0];
                if self.needs(*x) {
                    add_into(&mut grads[x.0], g.to_vec());
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; d];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % d] += gv;
                    }
                    add_into(&mut grads[bias.0], db);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let dx = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let dx = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(gv, xv)| gv * (norm_cdf(*xv) + xv * norm_pdf(*xv)))
                        .collect();
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let y = self.data(Var(idx));
                    let shape = self.shape(Var(idx)).to_vec();
                    let mut dx = vec![0.0; y.len()];
                    for_each_lane(&shape, *axis, |base, step, dim| {
                        let mut dot = 0.0;
                        for t in 0..dim {
                            dot += g[base + t * step] * y[base + t * step];
                        }
                        for t in 0..dim {
                            let i = base + t * step;
                            dx[i] = y[i] * (g[i] - dot);
                        }
                    });
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.shape(*gain)[0];
                let rows = g.len() / d;
                if self.needs(*gain) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    add_into(&mut grads[gain.0], dg);
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    add_into(&mut grads[bias.0], db);
                }
                if self.needs(*x) {
                    let gs = self.data(*gain);
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gs[j];
                            m1 += dh;
                            m2 += dh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = g[r * d + j] * gs[j];
                            dx[r * d + j] = inv_std[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::Dropout { x, keep, scale } => {
                if self.needs(*x) {
                    let dx = g
                        .iter()
                        .zip(keep)
                        .map(|(gv, k)| if *k { gv * scale } else { 0.0 })
                        .collect();
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let (n, len) = (self.shape(Var(idx))[0], self.shape(Var(idx))[1]);
                    let d = self.shape(*x)[1];
                    let mut dx = vec![0.0; self.data(*x).len()];
                    for i in 0..n {
                        for j in 0..len {
                            dx[i * d + start + j] = g[i * len + j];
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let sz = self.data(p).len();
                    if self.needs(p) {
                        add_into(&mut grads[p.0], g[offset..offset + sz].to_vec());
                    }
                    offset += sz;
                }
            }
            Op::ConcatCols { parts } => {
                let n = self.shape(Var(idx))[0];
                let width = self.shape(Var(idx))[1];
                let mut col = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.needs(p) {
                        let mut dp = vec![0.0; n * c];
                        for i in 0..n {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&g[i * width + col..i * width + col + c]);
                        }
                        add_into(&mut grads[p.0], dp);
                    }
                    col += c;
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    add_into(&mut grads[x.0], vec![g[0]; self.data(*x).len()]);
                }
            }
            Op::MeanAll { x } => {
                if self.needs(*x) {
                    let n = self.data(*x).len();
                    add_into(&mut grads[x.0], vec![g[0] / n as f64; n]);
                }
            }
        }
    }
}

/// Visit every 1-D lane along `axis` of a row-major tensor. The callback
/// receives the lane's base offset, its stride, and its length.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * dim * inner + i, inner, dim);
        }
    }
}
