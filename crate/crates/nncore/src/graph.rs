//! The tape: forward ops record themselves, `backward` replays them in reverse.

use std::collections::{BTreeMap, HashMap};

use crate::error::{NnError, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// BCE probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Swish(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    MeanRows(Var),
    MeanStdPool {
        x: Var,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    RepeatRows {
        x: Var,
        factor: usize,
    },
    BroadcastRows(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        labels: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// A recording of one forward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    inputs: HashMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient for a parameter; `None` when it was not on the tape.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Gradient for a parameter, zero-filled when it was not reached.
    pub fn param_or_zero(&self, store: &ParameterStore, name: &str) -> Result<Tensor> {
        match self.params.get(name) {
            Some(t) => Ok(t.clone()),
            None => Ok(Tensor::zeros(store.get(name)?.shape())),
        }
    }

    /// Gradient for every parameter in `store`, zeros for unreached ones.
    pub fn complete(&self, store: &ParameterStore) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .map(|(name, t)| {
                let g = self.params.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.to_string(), g)
            })
            .collect()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Parameter gradients in name order.
    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Gradient with respect to a tracked input created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
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
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Places a copy of a stored parameter on the tape.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let t = store.get(name)?.clone();
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    fn mat(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(NnError::invalid(op, format!("expected a matrix, got shape {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.mat("matmul", a)?;
        let (k2, m) = self.mat("matmul", b)?;
        if k != k2 {
            return Err(NnError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; n * m];
        gemm_nn(n, k, m, self.value(a).data(), self.value(b).data(), &mut out, false);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.mat("matmul_nt", a)?;
        let (m, k2) = self.mat("matmul_nt", b)?;
        if k != k2 {
            return Err(NnError::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; n * m];
        gemm_nt(n, k, m, self.value(a).data(), self.value(b).data(), &mut out, false);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMulNT(a, b), ng))
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::shape(op_name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, op_name: &'static str, x: Var, r: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let xs = self.shape(x);
        let rs = self.shape(r);
        if xs.is_empty() || xs.len() > 2 || rs.len() != 1 || rs[0] != xs[xs.len() - 1] {
            return Err(NnError::shape(op_name, xs, rs));
        }
        let c = rs[0];
        let rv = self.value(r).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, rv[i % c]))
            .collect();
        let t = Tensor::new(xs.to_vec(), data)?;
        let ng = self.ng(&[x, r]);
        Ok(self.push(t, op, ng))
    }

    /// Adds a `[m]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, b, |v, r| v + r, Op::AddRow(x, b))
    }

    /// Scales every row of `x` elementwise by a `[m]` vector.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, s, |v, r| v * r, Op::MulRow(x, s))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect()).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |a| a * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// `x · sigmoid(x)`
    pub fn swish(&mut self, x: Var) -> Var {
        self.map(x, |a| a * sigmoid(a), Op::Swish(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(NnError::invalid("softmax", "scalar input"));
        }
        let c = v.cols();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Normalizes the last axis, then applies `gamma · x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(NnError::invalid("layer_norm", "eps must be positive"));
        }
        let v = self.value(x);
        let c = v.cols();
        if v.rank() == 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(NnError::shape("layer_norm", v.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = v.len() / c;
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for (r, row) in v.data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// Same-padded 1-D convolution over time: `x: [T, C_in]`, `w: [K, C_in, C_out]`,
    /// `b: [C_out]`, odd `K`, zero padding of `dilation·(K−1)/2` on each side.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (t_len, cin) = self.mat("conv1d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin || self.shape(b) != [ws[2]] {
            return Err(NnError::shape("conv1d", self.shape(x), &ws));
        }
        let (k, cout) = (ws[0], ws[2]);
        if k % 2 == 0 || dilation == 0 {
            return Err(NnError::invalid("conv1d", format!("kernel {} must be odd and dilation {} positive", k, dilation)));
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = Vec::with_capacity(t_len * cout);
        for _ in 0..t_len {
            out.extend_from_slice(self.value(b).data());
        }
        for tap in 0..k {
            let (t0, t1, off) = conv_span(t_len, tap, k, dilation);
            if t0 >= t1 {
                continue;
            }
            let xs = &xd[((t0 as isize + off) as usize) * cin..];
            gemm_nn(t1 - t0, cin, cout, xs, &wd[tap * cin * cout..(tap + 1) * cin * cout], &mut out[t0 * cout..t1 * cout], true);
        }
        let t = Tensor::matrix(t_len, cout, out)?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(t, Op::Conv1d { x, w, b, dilation }, ng))
    }

    /// Per-channel same-padded convolution: `x: [T, C]`, `w: [K, C]`, `b: [C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t_len, c) = self.mat("depthwise_conv1d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != c || self.shape(b) != [c] {
            return Err(NnError::shape("depthwise_conv1d", self.shape(x), &ws));
        }
        let k = ws[0];
        if k.is_multiple_of(2) {
            return Err(NnError::invalid("depthwise_conv1d", format!("kernel {} must be odd", k)));
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; t_len * c];
        for t in 0..t_len {
            out[t * c..(t + 1) * c].copy_from_slice(bd);
        }
        for tap in 0..k {
            let (t0, t1, off) = conv_span(t_len, tap, k, 1);
            let wrow = &wd[tap * c..(tap + 1) * c];
            for t in t0..t1 {
                let src = ((t as isize + off) as usize) * c;
                for j in 0..c {
                    out[t * c + j] += xd[src + j] * wrow[j];
                }
            }
        }
        let t = Tensor::matrix(t_len, c, out)?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(t, Op::DepthwiseConv1d { x, w, b }, ng))
    }

    /// Column means of `[T, D]` as a `[D]` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (t_len, d) = self.mat("mean_rows", x)?;
        if t_len == 0 {
            return Err(NnError::invalid("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; d];
        for row in self.value(x).data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= t_len as f64);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x), ng))
    }

    /// Concatenated per-column mean and (population) standard deviation, `[2D]`.
    pub fn mean_std_pool(&mut self, x: Var) -> Result<Var> {
        let (t_len, d) = self.mat("mean_std_pool", x)?;
        if t_len == 0 {
            return Err(NnError::invalid("mean_std_pool", "no rows"));
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0; d];
        for row in xd.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t_len as f64);
        let mut var = vec![0.0; d];
        for row in xd.chunks(d) {
            for j in 0..d {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / t_len as f64).sqrt()).collect();
        let mut out = mean.clone();
        out.extend_from_slice(&std);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MeanStdPool { x, mean, std }, ng))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| NnError::invalid("concat_cols", "nothing to concatenate"))?;
        let (rows, _) = self.mat("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat("concat_cols", p)?;
            if r != rows {
                return Err(NnError::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, c) = self.mat("slice_cols", x)?;
        if start + len > c {
            return Err(NnError::invalid("slice_cols", format!("columns {}..{} of {}", start, start + len, c)));
        }
        let mut out = Vec::with_capacity(rows * len);
        for row in self.value(x).data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(rows, len, out)?, Op::SliceCols { x, start }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, ng))
    }

    /// Repeats each row `factor` times in place (`[a, b] → [a, a, b, b]` for 2).
    pub fn repeat_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (rows, c) = self.mat("repeat_rows", x)?;
        if factor == 0 {
            return Err(NnError::invalid("repeat_rows", "factor must be positive"));
        }
        let mut out = Vec::with_capacity(rows * factor * c);
        for row in self.value(x).data().chunks(c) {
            for _ in 0..factor {
                out.extend_from_slice(row);
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(rows * factor, c, out)?, Op::RepeatRows { x, factor }, ng))
    }

    /// Stacks a `[D]` vector `n` times into `[n, D]`.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let s = self.shape(v);
        if s.len() != 1 {
            return Err(NnError::invalid("broadcast_rows", format!("expected a vector, got {:?}", s)));
        }
        let d = s[0];
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(self.value(v).data());
        }
        let ng = self.ng(&[v]);
        Ok(self.push(Tensor::matrix(n, d, out)?, Op::BroadcastRows(v), ng))
    }

    /// Scales each row (or the single vector) to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() == 0 || v.rank() > 2 {
            return Err(NnError::invalid("l2_normalize", format!("shape {:?}", v.shape())));
        }
        let c = v.cols();
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(c) {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            out.extend(row.iter().map(|a| a / n));
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::L2Normalize { x, norms }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `labels`,
    /// with `p` clamped to `[1e−7, 1 − 1e−7]`.
    pub fn bce(&mut self, p: Var, labels: &Tensor) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != labels.shape() {
            return Err(NnError::shape("bce", pv.shape(), labels.shape()));
        }
        let n = pv.len().max(1) as f64;
        let loss = pv
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&p, &y)| {
                let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        let ng = self.ng(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                labels: labels.data().to_vec(),
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy of `[n, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.mat("cross_entropy", logits)?;
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(NnError::invalid("cross_entropy", format!("{} targets for {} rows of {} classes", targets.len(), n, c)));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Each recorded op is visited once,
    /// in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match &node.param {
                    Some(name) => match out.params.get_mut(name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                        None => {
                            out.params.insert(name.clone(), t);
                        }
                    },
                    None => {
                        out.inputs.insert(Var(i), t);
                    }
                }
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(out)
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.shape(*a));
                let m = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm_nt(n, m, k, g, bv, ga, true);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm_tn(k, n, m, av, g, gb, true);
                }
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = dims2(self.shape(*a));
                let m = self.shape(*b)[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm_nn(n, m, k, g, bv, ga, true);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm_tn(m, n, k, g, av, gb, true);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    axpy(gb, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(x, b) => {
                let c = self.shape(*b)[0];
                if let Some(gx) = self.grad_slot(grads, *x) {
                    axpy(gx, g, 1.0);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for row in g.chunks(c) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::MulRow(x, s) => {
                let c = self.shape(*s)[0];
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * sv[i % c];
                    }
                }
                if let Some(gs) = self.grad_slot(grads, *s) {
                    for i in 0..g.len() {
                        gs[i % c] += g[i] * xv[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    axpy(gx, g, *c);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Swish(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for i in 0..g.len() {
                        let s = sigmoid(xv[i]);
                        gx[i] += g[i] * (s + xv[i] * s * (1.0 - s));
                    }
                }
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((yr, gr), gxr) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = node.value.cols();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    for gr in g.chunks(c) {
                        axpy(gb, gr, 1.0);
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let cf = c as f64;
                    for (r, ((gr, hr), gxr)) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            gxr[j] += inv / cf * (cf * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, dilation } => {
                let (t_len, cin) = dims2(self.shape(*x));
                let ws = self.shape(*w);
                let (k, cout) = (ws[0], ws[2]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for gr in g.chunks(cout) {
                        axpy(gb, gr, 1.0);
                    }
                }
                if let Some(gw) = self.grad_slot(grads, *w) {
                    for tap in 0..k {
                        let (t0, t1, off) = conv_span(t_len, tap, k, *dilation);
                        if t0 >= t1 {
                            continue;
                        }
                        let src = ((t0 as isize + off) as usize) * cin;
                        gemm_tn(cin, t1 - t0, cout, &xv[src..], &g[t0 * cout..t1 * cout], &mut gw[tap * cin * cout..(tap + 1) * cin * cout], true);
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for tap in 0..k {
                        let (t0, t1, off) = conv_span(t_len, tap, k, *dilation);
                        if t0 >= t1 {
                            continue;
                        }
                        let dst = ((t0 as isize + off) as usize) * cin;
                        let rows = t1 - t0;
                        gemm_nt(rows, cout, cin, &g[t0 * cout..t1 * cout], &wv[tap * cin * cout..(tap + 1) * cin * cout], &mut gx[dst..dst + rows * cin], true);
                    }
                }
            }
            Op::DepthwiseConv1d { x, w, b } => {
                let (t_len, c) = dims2(self.shape(*x));
                let k = self.shape(*w)[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for gr in g.chunks(c) {
                        axpy(gb, gr, 1.0);
                    }
                }
                if let Some(gw) = self.grad_slot(grads, *w) {
                    for tap in 0..k {
                        let (t0, t1, off) = conv_span(t_len, tap, k, 1);
                        for t in t0..t1 {
                            let src = ((t as isize + off) as usize) * c;
                            for j in 0..c {
                                gw[tap * c + j] += g[t * c + j] * xv[src + j];
                            }
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for tap in 0..k {
                        let (t0, t1, off) = conv_span(t_len, tap, k, 1);
                        for t in t0..t1 {
                            let dst = ((t as isize + off) as usize) * c;
                            for j in 0..c {
                                gx[dst + j] += g[t * c + j] * wv[tap * c + j];
                            }
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                let (t_len, d) = dims2(self.shape(*x));
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let inv = 1.0 / t_len as f64;
                    for gxr in gx.chunks_mut(d) {
                        axpy(gxr, g, inv);
                    }
                }
            }
            Op::MeanStdPool { x, mean, std } => {
                let (t_len, d) = dims2(self.shape(*x));
                let xv = self.value(*x).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let tf = t_len as f64;
                    for (xr, gxr) in xv.chunks(d).zip(gx.chunks_mut(d)) {
                        for j in 0..d {
                            let mut v = g[j] / tf;
                            if std[j] > 1e-12 {
                                v += g[d + j] * (xr[j] - mean[j]) / (tf * std[j]);
                            }
                            gxr[j] += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for (r, gpr) in gp.chunks_mut(c).enumerate() {
                            axpy(gpr, &g[r * total + offset..r * total + offset + c], 1.0);
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = node.value.cols();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (gxr, gr) in gx.chunks_mut(c).zip(g.chunks(len)) {
                        axpy(&mut gxr[*start..*start + len], gr, 1.0);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    axpy(&mut gx[start * c..start * c + g.len()], g, 1.0);
                }
            }
            Op::RepeatRows { x, factor } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (r, gxr) in gx.chunks_mut(c).enumerate() {
                        for k in 0..*factor {
                            let src = (r * factor + k) * c;
                            axpy(gxr, &g[src..src + c], 1.0);
                        }
                    }
                }
            }
            Op::BroadcastRows(v) => {
                let d = self.value(*v).len();
                if let Some(gv) = self.grad_slot(grads, *v) {
                    for gr in g.chunks(d) {
                        axpy(gv, gr, 1.0);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let c = node.value.cols();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (r, ((yr, gr), gxr)) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    axpy(gx, g, 1.0);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let s = g[0] / gx.len().max(1) as f64;
                    gx.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::Bce { p, labels } => {
                let pv = self.value(*p).data();
                if let Some(gp) = self.grad_slot(grads, *p) {
                    let n = pv.len().max(1) as f64;
                    for i in 0..pv.len() {
                        let q = pv[i];
                        if q > BCE_CLAMP && q < 1.0 - BCE_CLAMP {
                            let yl = labels[i];
                            gp[i] += g[0] * (-yl / q + (1.0 - yl) / (1.0 - q)) / n;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                let n = targets.len() as f64;
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    for (r, (&t, pr)) in targets.iter().zip(probs.chunks(c)).enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += g[0] * (pr[j] - onehot) / n;
                        }
                    }
                }
            }
        }
    }
}

fn dims2(s: &[usize]) -> (usize, usize) {
    (s[0], s[1])
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Output rows `t0..t1` that read input row `t + off` for kernel tap `tap`.
fn conv_span(t_len: usize, tap: usize, k: usize, dilation: usize) -> (usize, usize, isize) {
    let off = (tap as isize - (k as isize - 1) / 2) * dilation as isize;
    let t0 = (-off).max(0) as usize;
    let t1 = (t_len as isize - off).clamp(0, t_len as isize) as usize;
    (t0.min(t_len), t1, off)
}
