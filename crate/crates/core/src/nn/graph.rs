//! Reverse-mode automatic differentiation on a per-example tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, records every operation
//! as a node, and [`Graph::backward`] walks the tape in reverse to produce
//! [`Gradients`] keyed by parameter index. Graphs are independent of each
//! other, so examples of a batch can be differentiated in parallel and their
//! gradients summed in a fixed order.

use std::collections::HashMap;

use rand::Rng;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Per-class mean losses averaged over classes present in the batch.
    Macro,
    /// Plain average over samples.
    Mean,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Mask { x: Var, mask: Vec<f64> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { a: Var, idx: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    SwapLeading(Var),
    MeanRows(Var),
    Sum(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, dlogits: Vec<f64> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar objective with respect to parameters, indexed like
/// the [`ParamStore`] they were computed against.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, index: usize) -> Option<&Tensor> {
        self.grads.get(index).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, index: usize) -> Option<&mut Tensor> {
        self.grads.get_mut(index).and_then(Option::as_mut)
    }

    pub fn get_by_name<'a>(&'a self, store: &ParamStore, name: &str) -> Option<&'a Tensor> {
        store.index_of(name).and_then(|i| self.get(i))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn set(&mut self, index: usize, t: Tensor) {
        self.grads[index] = Some(t);
    }

    /// Elementwise sum; `other` must come from the same store layout.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => {
                    for (a, b) in m.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// `C = A·B + beta·C` over strided operands (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (ars, acs): (usize, usize),
    b: &[f64],
    (brs, bcs): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            ars as isize,
            acs as isize,
            b.as_ptr(),
            brs as isize,
            bcs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (shape.iter().product::<usize>() / cols.max(1), cols)
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.ho * g.wo;
    let mut out = vec![0.0; g.c * g.kh * g.kw * cols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oi in 0..g.ho {
                    let ii = (oi * g.sh + ki) as isize - g.ph as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.sw + kj) as isize - g.pw as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[oi * g.wo + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols = g.ho * g.wo;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &dcols[row * cols..(row + 1) * cols];
                for oi in 0..g.ho {
                    let ii = (oi * g.sh + ki) as isize - g.ph as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.wo {
                        let jj = (oj * g.sw + kj) as isize - g.pw as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dx[base + jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Weight of each sample's negative log-likelihood in the batch loss.
/// Labels must already be in `[0, k)`.
pub fn loss_coefficients(
    labels: &[usize],
    k: usize,
    mode: LossMode,
    class_weights: Option<&[f64]>,
) -> Vec<f64> {
    let cw = |c: usize| class_weights.map_or(1.0, |w| w[c]);
    match mode {
        LossMode::Mean => {
            let denom: f64 = labels.iter().map(|&l| cw(l)).sum();
            labels.iter().map(|&l| cw(l) / denom).collect()
        }
        LossMode::Macro => {
            let mut counts = vec![0usize; k];
            for &l in labels {
                counts[l] += 1;
            }
            let denom: f64 = (0..k).filter(|&c| counts[c] > 0).map(cw).sum();
            labels
                .iter()
                .map(|&l| cw(l) / (counts[l] as f64 * denom))
                .collect()
        }
    }
}

/// Loss value and d(loss)/d(logits) for a `[B, K]` logit matrix.
pub fn cross_entropy_with_grad(
    logits: &Tensor,
    labels: &[usize],
    mode: LossMode,
    class_weights: Option<&[f64]>,
) -> Result<(f64, Tensor)> {
    let (b, k) = as_matrix(logits.shape());
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{} labels for {b} rows of logits",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label(format!("label {bad} outside [0, {k})")));
    }
    if let Some(w) = class_weights {
        if w.len() != k {
            return Err(Error::Shape(format!("{} class weights for {k} classes", w.len())));
        }
    }
    if b == 0 {
        return Err(Error::Shape("cross-entropy on an empty batch".into()));
    }
    let x = logits.data();
    let mut probs = vec![0.0; b * k];
    let mut losses = vec![0.0; b];
    for i in 0..b {
        let row = &x[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for j in 0..k {
            probs[i * k + j] = (row[j] - lse).exp();
        }
        losses[i] = lse - row[labels[i]];
    }
    let coef = loss_coefficients(labels, k, mode, class_weights);
    let loss = losses.iter().zip(&coef).map(|(l, c)| l * c).sum();
    let mut grad = probs;
    for i in 0..b {
        grad[i * k + labels[i]] -= 1.0;
        for j in 0..k {
            grad[i * k + j] *= coef[i];
        }
    }
    Ok((loss, Tensor::from_parts(logits.shape().to_vec(), grad)))
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
    first_nonfinite: Option<String>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            bound: HashMap::new(),
            first_nonfinite: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => &self.params.get_index(*i).expect("bound param").1.value,
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(format!("{op:?}").chars().take(60).collect());
        }
        let requires_grad = match &op {
            Op::Constant | Op::Param(_) => false,
            Op::MatMul { a, b, .. } => self.rg(*a) || self.rg(*b),
            Op::Linear { x, w, b } => self.rg(*x) || self.rg(*w) || b.is_some_and(|b| self.rg(b)),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.rg(*a) || self.rg(*b),
            Op::AddRow { a, row } => self.rg(*a) || self.rg(*row),
            Op::LayerNorm { x, gamma, beta, .. } => {
                self.rg(*x) || self.rg(*gamma) || self.rg(*beta)
            }
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(|v| self.rg(*v)),
            Op::Conv2d { x, w, b, .. } => {
                self.rg(*x) || self.rg(*w) || b.is_some_and(|b| self.rg(b))
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Sqrt(a)
            | Op::SoftmaxRows(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::SwapLeading(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::Mask { x: a, .. }
            | Op::SliceCols { a, .. }
            | Op::GatherRows { a, .. }
            | Op::MaxPool2d { x: a, .. }
            | Op::CrossEntropy { logits: a, .. } => self.rg(*a),
        };
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Error naming the first operation that produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match &self.first_nonfinite {
            None => Ok(()),
            Some(op) => Err(Error::Training(format!("non-finite value produced by {op}"))),
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Bind a stored parameter. Repeated binds of one name return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::config(name, "parameter not found in store"))?;
        if let Some(&v) = self.bound.get(&idx) {
            return Ok(v);
        }
        let trainable = self.params.get_index(idx).unwrap().1.trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(idx),
            requires_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(idx, v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `[m,k]·[k,n]`, or `[m,k]·[n,k]ᵀ` when `trans_b`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = as_matrix(self.shape(a));
        let (br, bc) = as_matrix(self.shape(b));
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul: {:?} · {:?}{} inner dimensions differ",
                self.shape(a),
                self.shape(b),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        let bs = if trans_b { (1, bc) } else { (bc, 1) };
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), bs, &mut out, 0.0);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, trans_b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    /// `x·Wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (rows, inp) = as_matrix(&xs);
        let ws = self.shape(w);
        if ws.len() != 2 || ws[1] != inp {
            return Err(Error::Shape(format!(
                "linear: input {xs:?} does not match weight {ws:?}"
            )));
        }
        let out_dim = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} does not match weight {ws:?}",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![0.0; rows * out_dim];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in 0..rows {
                out[r * out_dim..(r + 1) * out_dim].copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            inp,
            out_dim,
            self.value(x).data(),
            (inp, 1),
            self.value(w).data(),
            (1, inp),
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let mut shape = xs;
        match shape.last_mut() {
            Some(l) => *l = out_dim,
            None => shape.push(out_dim),
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }))
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_op(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Add a `[c]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(a));
        if self.value(row).len() != c {
            return Err(Error::Shape(format!(
                "add_row: row {:?} vs matrix {:?}",
                self.shape(row),
                self.shape(a)
            )));
        }
        let rv = self.value(row).data();
        let av = self.value(a).data();
        let data = (0..r * c).map(|i| av[i] + rv[i % c]).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow { a, row }))
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_op(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map_op(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_op(a, gelu, Op::Gelu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map_op(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = as_matrix(t.shape());
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c.max(1)).take(r) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::SoftmaxRows(a))
    }

    /// Per-row standardization followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (r, d) = as_matrix(t.shape());
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Shape(format!(
                "layer_norm: gain/bias {:?}/{:?} vs input {:?}",
                self.shape(gamma),
                self.shape(beta),
                t.shape()
            )));
        }
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let mut out = vec![0.0; r * d];
        let mut means = Vec::with_capacity(r);
        let mut rstds = Vec::with_capacity(r);
        for (i, row) in t.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * rstd * g[j] + bta[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = t.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Inverted dropout: kept units scaled by 1/(1-p). Identity unless training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R, training: bool) -> Var {
        if !training || p == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Mask { x, mask })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(a));
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} out of {c} columns",
                start + len
            )));
        }
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let shape = if self.shape(a).len() == 1 {
            vec![len]
        } else {
            vec![r, len]
        };
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = as_matrix(self.shape(parts[0])).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = as_matrix(self.shape(p));
            if pr != r {
                return Err(Error::Shape(format!("concat_cols: row counts {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let shape = if self.shape(parts[0]).len() == 1 {
            vec![total]
        } else {
            vec![r, total]
        };
        Ok(self.push(Tensor::from_parts(shape, data), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = as_matrix(self.shape(parts[0])).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = as_matrix(self.shape(p));
            if pc != c {
                return Err(Error::Shape(format!("concat_rows: widths {pc} vs {c}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += pr;
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], data),
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(a));
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("gather_rows: row {bad} of {r}")));
        }
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], data),
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let r = self.gather_rows(a, &[i])?;
        let c = self.shape(r)[1];
        self.reshape(r, &[c])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose of rank-{} tensor", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let av = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = av[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a)))
    }

    /// `[A, B, C] → [B, A, C]`.
    pub fn swap_leading(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("swap_leading of rank-{} tensor", s.len())));
        }
        let (d0, d1, d2) = (s[0], s[1], s[2]);
        let av = self.value(a).data();
        let mut data = vec![0.0; av.len()];
        for i in 0..d0 {
            for j in 0..d1 {
                let src = (i * d1 + j) * d2;
                let dst = (j * d0 + i) * d2;
                data[dst..dst + d2].copy_from_slice(&av[src..src + d2]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![d1, d0, d2], data), Op::SwapLeading(a)))
    }

    /// Mean over rows: `[r, c] → [c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = as_matrix(self.shape(a));
        let av = self.value(a).data();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += av[i * c + j];
            }
        }
        data.iter_mut().for_each(|v| *v /= r as f64);
        self.push(Tensor::from_parts(vec![c], data), Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// 2-D cross-correlation of `x: [C, H, W]` with `w: [O, C, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::Shape(format!(
                "conv2d: input {xs:?} incompatible with kernel {ws:?}"
            )));
        }
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (sh, sw) = stride;
        let (ph, pw) = padding;
        if sh == 0 || sw == 0 || h + 2 * ph < kh || wd + 2 * pw < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * ph,
                wd + 2 * pw
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::Shape(format!("conv2d: bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            ho: (h + 2 * ph - kh) / sh + 1,
            wo: (wd + 2 * pw - kw) / sw + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let n = geom.ho * geom.wo;
        let ckk = c * kh * kw;
        let mut out = vec![0.0; o * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for oc in 0..o {
                out[oc * n..(oc + 1) * n].fill(bias[oc]);
            }
        }
        gemm(
            o,
            ckk,
            n,
            self.value(w).data(),
            (ckk, 1),
            &cols,
            (n, 1),
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        Ok(self.push(
            Tensor::from_parts(vec![o, geom.ho, geom.wo], out),
            Op::Conv2d { x, w, b, geom },
        ))
    }

    /// 1-D cross-correlation of `x: [C, L]` with `w: [O, C, k]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 3 {
            return Err(Error::Shape(format!(
                "conv1d: input {xs:?} incompatible with kernel {ws:?}"
            )));
        }
        let x4 = self.reshape(x, &[xs[0], 1, xs[1]])?;
        let w4 = self.reshape(w, &[ws[0], ws[1], 1, ws[2]])?;
        let y = self.conv2d(x4, w4, b, (1, stride), (0, padding))?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[2]])
    }

    /// Non-overlapping-or-strided max pooling on `[C, H, W]` (floor mode).
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] < kernel || xs[2] < kernel || kernel == 0 || stride == 0 {
            return Err(Error::Shape(format!(
                "max_pool2d: kernel {kernel} on input {xs:?}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let ho = (h - kernel) / stride + 1;
        let wo = (w - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for a in 0..kernel {
                        for b in 0..kernel {
                            let idx = (ch * h + i * stride + a) * w + j * stride + b;
                            if xv[idx] > best {
                                best = xv[idx];
                                at = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, ho, wo], out),
            Op::MaxPool2d { x, argmax },
        ))
    }

    /// Cross-entropy of `[B, K]` logits against class indices.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        mode: LossMode,
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let (loss, dlogits) =
            cross_entropy_with_grad(self.value(logits), labels, mode, class_weights)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                dlogits: dlogits.into_data(),
            },
        ))
    }

    /// Reverse pass from `out`. `seed` defaults to ones (i.e. d out/d out = 1
    /// for scalars).
    pub fn backward(&self, out: Var, seed: Option<&Tensor>) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let out_len = self.value(out).len();
        let seed = match seed {
            Some(s) if s.len() != out_len => {
                return Err(Error::Shape(format!(
                    "backward seed has {} values, output has {out_len}",
                    s.len()
                )))
            }
            Some(s) => s.data().to_vec(),
            None => vec![1.0; out_len],
        };
        grads[out.0] = Some(seed);
        let mut result = Gradients::empty(self.params.len());

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad && !matches!(node.op, Op::Param(_)) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads, &mut result)?;
        }
        Ok(result)
    }

    fn backward_node(
        &self,
        i: usize,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        result: &mut Gradients,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.as_ref();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = self.value(v).len();
                grads[v.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        match &node.op {
            Op::Constant => {}
            Op::Param(p) => {
                let shape = self.params.get_index(*p).unwrap().1.value.shape().to_vec();
                let t = Tensor::from_parts(shape, gy.to_vec());
                match result.get_mut(*p) {
                    Some(existing) => {
                        for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    None => result.set(*p, t),
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = as_matrix(self.shape(*a));
                let (br, bc) = as_matrix(self.shape(*b));
                let n = if *trans_b { br } else { bc };
                if self.rg(*a) {
                    let bv = self.value(*b).data().to_vec();
                    let ga = acc!(*a);
                    // dA = dC · Bᵀ   (or dC · B when B was transposed)
                    let bs = if *trans_b { (bc, 1) } else { (1, bc) };
                    gemm(m, n, k, gy, (n, 1), &bv, bs, ga, 1.0);
                }
                if self.rg(*b) {
                    let av = self.value(*a).data().to_vec();
                    let gb = acc!(*b);
                    if *trans_b {
                        // dB[n,k] = dCᵀ · A
                        gemm(n, m, k, gy, (1, n), &av, (k, 1), gb, 1.0);
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        gemm(k, m, n, &av, (1, k), gy, (n, 1), gb, 1.0);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, inp) = as_matrix(self.shape(*x));
                let out_dim = self.shape(*w)[0];
                if self.rg(*x) {
                    let wv = self.value(*w).data().to_vec();
                    let gx = acc!(*x);
                    gemm(rows, out_dim, inp, gy, (out_dim, 1), &wv, (inp, 1), gx, 1.0);
                }
                if self.rg(*w) {
                    let xv = self.value(*x).data().to_vec();
                    let gw = acc!(*w);
                    gemm(out_dim, rows, inp, gy, (1, out_dim), &xv, (inp, 1), gw, 1.0);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let gb = acc!(*b);
                        for r in 0..rows {
                            for j in 0..out_dim {
                                gb[j] += gy[r * out_dim + j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.rg(v) {
                        acc!(v).iter_mut().zip(gy).for_each(|(g, d)| *g += sign * d);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.rg(v) {
                        acc!(v).iter_mut().zip(gy).for_each(|(g, d)| *g += sign * d);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data().to_vec();
                    let ga = acc!(*a);
                    for j in 0..gy.len() {
                        ga[j] += gy[j] * bv[j];
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data().to_vec();
                    let gb = acc!(*b);
                    for j in 0..gy.len() {
                        gb[j] += gy[j] * av[j];
                    }
                }
            }
            Op::AddRow { a, row } => {
                if self.rg(*a) {
                    acc!(*a).iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if self.rg(*row) {
                    let c = self.value(*row).len();
                    let gr = acc!(*row);
                    for (j, d) in gy.iter().enumerate() {
                        gr[j % c] += d;
                    }
                }
            }
            Op::Scale(a, c) => {
                acc!(*a).iter_mut().zip(gy).for_each(|(g, d)| *g += c * d);
            }
            Op::AddScalar(a) => {
                acc!(*a).iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data().to_vec();
                let ga = acc!(*a);
                for j in 0..gy.len() {
                    if xv[j] > 0.0 {
                        ga[j] += gy[j];
                    }
                }
            }
            Op::Tanh(a) => {
                let yv = y.unwrap().data();
                let ga = acc!(*a);
                for j in 0..gy.len() {
                    ga[j] += gy[j] * (1.0 - yv[j] * yv[j]);
                }
            }
            Op::Sigmoid(a) => {
                let yv = y.unwrap().data();
                let ga = acc!(*a);
                for j in 0..gy.len() {
                    ga[j] += gy[j] * yv[j] * (1.0 - yv[j]);
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data().to_vec();
                let ga = acc!(*a);
                for j in 0..gy.len() {
                    ga[j] += gy[j] * gelu_grad(xv[j]);
                }
            }
            Op::Sqrt(a) => {
                let yv = y.unwrap().data();
                let ga = acc!(*a);
                for j in 0..gy.len() {
                    ga[j] += gy[j] * 0.5 / yv[j];
                }
            }
            Op::SoftmaxRows(a) => {
                let yt = y.unwrap();
                let (_, c) = as_matrix(yt.shape());
                let yv = yt.data();
                let ga = acc!(*a);
                for (r, (yrow, grow)) in yv.chunks(c).zip(gy.chunks(c)).enumerate() {
                    let dot: f64 = yrow.iter().zip(grow).map(|(p, g)| p * g).sum();
                    for j in 0..c {
                        ga[r * c + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (_, d) = as_matrix(self.shape(*x));
                let xv = self.value(*x).data().to_vec();
                let gv = self.value(*gamma).data().to_vec();
                if self.rg(*gamma) {
                    let gg = acc!(*gamma);
                    for (r, row) in xv.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += gy[r * d + j] * (row[j] - mean[r]) * rstd[r];
                        }
                    }
                }
                if self.rg(*beta) {
                    let gb = acc!(*beta);
                    for (j, g) in gy.iter().enumerate() {
                        gb[j % d] += g;
                    }
                }
                if self.rg(*x) {
                    let gx = acc!(*x);
                    let mut dxhat = vec![0.0; d];
                    let mut xhat = vec![0.0; d];
                    for (r, row) in xv.chunks(d).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            xhat[j] = (row[j] - mean[r]) * rstd[r];
                            dxhat[j] = gy[r * d + j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - inv_d * s1 - xhat[j] * inv_d * s2);
                        }
                    }
                }
            }
            Op::Mask { x, mask } => {
                let gx = acc!(*x);
                for j in 0..gy.len() {
                    gx[j] += gy[j] * mask[j];
                }
            }
            Op::SliceCols { a, start } => {
                let (r, c) = as_matrix(self.shape(*a));
                let len = gy.len() / r.max(1);
                let ga = acc!(*a);
                for i in 0..r {
                    for j in 0..len {
                        ga[i * c + start + j] += gy[i * len + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = as_matrix(y.unwrap().shape()).1;
                let r = gy.len() / total.max(1);
                let mut off = 0;
                for &p in parts {
                    let w = as_matrix(self.shape(p)).1;
                    if self.rg(p) {
                        let gp = acc!(p);
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += gy[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        acc!(p)
                            .iter_mut()
                            .zip(&gy[off..off + n])
                            .for_each(|(g, d)| *g += d);
                    }
                    off += n;
                }
            }
            Op::GatherRows { a, idx } => {
                let c = as_matrix(self.shape(*a)).1;
                let ga = acc!(*a);
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[r * c + j] += gy[k * c + j];
                    }
                }
            }
            Op::Reshape(a) => {
                acc!(*a).iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let ga = acc!(*a);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += gy[j * r + i];
                    }
                }
            }
            Op::SwapLeading(a) => {
                let s = self.shape(*a).to_vec();
                let (d0, d1, d2) = (s[0], s[1], s[2]);
                let ga = acc!(*a);
                for i in 0..d0 {
                    for j in 0..d1 {
                        let src = (j * d0 + i) * d2;
                        let dst = (i * d1 + j) * d2;
                        for k in 0..d2 {
                            ga[dst + k] += gy[src + k];
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = as_matrix(self.shape(*a));
                let ga = acc!(*a);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += gy[j] / r as f64;
                    }
                }
            }
            Op::Sum(a) => {
                let g = gy[0];
                acc!(*a).iter_mut().for_each(|v| *v += g);
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = geom.ho * geom.wo;
                let ckk = geom.c * geom.kh * geom.kw;
                if let Some(b) = b {
                    if self.rg(*b) {
                        let gb = acc!(*b);
                        for oc in 0..geom.o {
                            gb[oc] += gy[oc * n..(oc + 1) * n].iter().sum::<f64>();
                        }
                    }
                }
                if self.rg(*w) {
                    let cols = im2col(self.value(*x).data(), geom);
                    let gw = acc!(*w);
                    // dW[O, CKK] = dY[O, N] · colsᵀ
                    gemm(geom.o, n, ckk, gy, (n, 1), &cols, (1, n), gw, 1.0);
                }
                if self.rg(*x) {
                    let wv = self.value(*w).data().to_vec();
                    let mut dcols = vec![0.0; ckk * n];
                    // dcols[CKK, N] = Wᵀ · dY
                    gemm(ckk, geom.o, n, &wv, (1, ckk), gy, (n, 1), &mut dcols, 0.0);
                    let gx = acc!(*x);
                    col2im_add(&dcols, geom, gx);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let gx = acc!(*x);
                for (k, &src) in argmax.iter().enumerate() {
                    gx[src] += gy[k];
                }
            }
            Op::CrossEntropy { logits, dlogits } => {
                let g = gy[0];
                let gl = acc!(*logits);
                for (a, d) in gl.iter_mut().zip(dlogits) {
                    *a += g * d;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn linear_hand_example() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.5, -0.5]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[3.5, 1.5]);
        assert_eq!(g.shape(y), &[2]);
    }

    #[test]
    fn linear_identity_and_shape_error() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.constant(Tensor::matrix(3, 3, eye).unwrap());
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        match g.linear(x, bad, None) {
            Err(Error::Shape(m)) => assert!(m.contains("[2, 3]") && m.contains("[3, 2]"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn softmax_properties() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::zeros(&[6]));
        let p = g.softmax(x);
        assert!(g.value(p).data().iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
        let a = g.constant(Tensor::vector(vec![1.0, -3.0, 0.2, 7.0]));
        let b = g.constant(Tensor::vector(vec![101.0, 97.0, 100.2, 107.0]));
        let (pa, pb) = (g.softmax(a), g.softmax(b));
        assert!(g.value(pa).max_abs_diff(g.value(pb)) < 1e-7);
        assert!((g.value(pa).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_of_constant_is_beta() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::full(&[5], 3.3));
        let ga = g.constant(Tensor::full(&[5], 1.0));
        let be = g.constant(Tensor::zeros(&[5]));
        let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_preserves_mean() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::full(&[100_000], 1.0));
        let mut r = crate::rng::stream(&[5]);
        let y = g.dropout(x, 0.5, &mut r, false);
        assert_eq!(y, x);
        let y = g.dropout(x, 0.5, &mut r, true);
        let mean = g.value(y).data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn conv_trivial_cases() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::new(&[1, 3, 3], vec![1.0; 9]).unwrap());
        let k = g.constant(Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let y = g.conv2d(x, k, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);

        let data: Vec<f64> = (0..2 * 4 * 5).map(|i| i as f64 * 0.1).collect();
        let x = g.constant(Tensor::new(&[2, 4, 5], data).unwrap());
        // identity 1x1 kernel mapping channel c -> c
        let k = g.constant(Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = g.conv2d(x, k, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_output_size_formula() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::zeros(&[2, 11, 7]));
        let k = g.constant(Tensor::zeros(&[3, 2, 3, 2]));
        let y = g.conv2d(x, k, None, (2, 3), (1, 1)).unwrap();
        assert_eq!(g.shape(y), &[3, (11 + 2 - 3) / 2 + 1, (7 + 2 - 2) / 3 + 1]);
        let big = g.constant(Tensor::zeros(&[3, 2, 20, 20]));
        assert!(g.conv2d(x, big, None, (1, 1), (0, 0)).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let logits = Tensor::matrix(1, 6, vec![0.0; 6]).unwrap();
        let (l, _) = cross_entropy_with_grad(&logits, &[2], LossMode::Mean, None).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-12);
        assert!((l - 1.791_759).abs() < 1e-6);

        let confident = Tensor::matrix(1, 3, vec![0.0, 800.0, 0.0]).unwrap();
        let (l, _) = cross_entropy_with_grad(&confident, &[1], LossMode::Mean, None).unwrap();
        assert_eq!(l, 0.0);

        assert!(matches!(
            cross_entropy_with_grad(&logits, &[6], LossMode::Mean, None),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn macro_cross_entropy_hand_case() {
        // classes A=0 (3 samples) and B=1 (1 sample), K = 2
        let raw = [[0.3, -0.2], [1.0, 0.5], [-0.4, 0.1], [0.2, 0.9]];
        let labels = [0, 0, 0, 1];
        let logits = Tensor::matrix(4, 2, raw.concat()).unwrap();
        let nll = |row: [f64; 2], y: usize| {
            let lse = (row[0].exp() + row[1].exp()).ln();
            lse - row[y]
        };
        let la: Vec<f64> = (0..3).map(|i| nll(raw[i], 0)).collect();
        let lb = nll(raw[3], 1);
        let expect = 0.5 * (la.iter().sum::<f64>() / 3.0 + lb);
        let (l, _) = cross_entropy_with_grad(&logits, &labels, LossMode::Macro, None).unwrap();
        assert!((l - expect).abs() < 1e-12);
        let plain = (la.iter().sum::<f64>() + lb) / 4.0;
        let (l, _) = cross_entropy_with_grad(&logits, &labels, LossMode::Mean, None).unwrap();
        assert!((l - plain).abs() < 1e-12);
    }

    #[test]
    fn repeated_param_binding_accumulates_gradient() {
        let s = store_with(&[("w", Tensor::vector(vec![2.0]))]);
        let mut g = Graph::new(&s);
        let a = g.param("w").unwrap();
        let b = g.param("w").unwrap();
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let y = g.sum(y);
        let grads = g.backward(y, None).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[4.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut s = store_with(&[("w", Tensor::vector(vec![2.0])), ("v", Tensor::vector(vec![3.0]))]);
        s.set_trainable("w", false).unwrap();
        let mut g = Graph::new(&s);
        let w = g.param("w").unwrap();
        let v = g.param("v").unwrap();
        let y = g.mul(w, v).unwrap();
        let y = g.sum(y);
        let grads = g.backward(y, None).unwrap();
        assert!(grads.get(0).is_none());
        assert_eq!(grads.get(1).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_finite_values_are_reported() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::vector(vec![-1.0]));
        assert!(g.check_finite().is_ok());
        let _ = g.sqrt(x);
        assert!(matches!(g.check_finite(), Err(Error::Training(_))));
    }
}
