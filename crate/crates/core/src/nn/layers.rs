//! Parameterized building blocks. Each layer has an `init_*` function that
//! registers its tensors under a name prefix and a forward function that
//! binds them from a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{trunc_normal, uniform, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    d_in: usize,
    d_out: usize,
) -> Result<()> {
    store.insert(join(name, "weight"), trunc_normal(rng, &[d_out, d_in], INIT_STD))?;
    store.insert(join(name, "bias"), Tensor::zeros(&[d_out]))
}

pub fn linear(g: &mut Graph, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&join(name, "weight"))?;
    let b = g.param(&join(name, "bias"))?;
    g.linear(x, w, Some(b))
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    store.insert(join(name, "weight"), Tensor::full(&[d], 1.0))?;
    store.insert(join(name, "bias"), Tensor::zeros(&[d]))
}

pub fn layer_norm(g: &mut Graph, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&join(name, "weight"))?;
    let b = g.param(&join(name, "bias"))?;
    g.layer_norm(x, w, b, LN_EPS)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
}

impl BlockConfig {
    pub fn new(d: usize, n_heads: usize) -> Self {
        Self {
            d,
            n_heads,
            mlp_ratio: 4,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::config(
                field,
                format!("d={} is not divisible by n_heads={}", self.d, self.n_heads),
            ));
        }
        Ok(())
    }
}

pub fn init_attention<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    d: usize,
) -> Result<()> {
    for p in ["query", "key", "value", "out"] {
        init_linear(store, rng, &join(name, p), d, d)?;
    }
    Ok(())
}

/// Scaled dot-product self-attention over the rows of `x: [T, d]`.
/// Also returns the per-head `[T, T]` weight matrices.
pub fn multi_head_self_attention_with_weights(
    g: &mut Graph,
    name: &str,
    x: Var,
    n_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = *g.shape(x).last().unwrap_or(&0);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::config(
            "n_heads",
            format!("d={d} is not divisible by n_heads={n_heads}"),
        ));
    }
    let dh = d / n_heads;
    let q = linear(g, &join(name, "query"), x)?;
    let k = linear(g, &join(name, "key"), x)?;
    let v = linear(g, &join(name, "value"), x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale);
        let a = g.softmax(s);
        heads.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    Ok((linear(g, &join(name, "out"), cat)?, weights))
}

pub fn multi_head_self_attention(g: &mut Graph, name: &str, x: Var, n_heads: usize) -> Result<Var> {
    Ok(multi_head_self_attention_with_weights(g, name, x, n_heads)?.0)
}

pub fn init_transformer_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    cfg: &BlockConfig,
) -> Result<()> {
    cfg.validate(name)?;
    let d = cfg.d;
    init_layer_norm(store, &join(name, "norm1"), d)?;
    init_attention(store, rng, &join(name, "attn"), d)?;
    init_layer_norm(store, &join(name, "norm2"), d)?;
    init_linear(store, rng, &join(name, "mlp.fc1"), d, d * cfg.mlp_ratio)?;
    init_linear(store, rng, &join(name, "mlp.fc2"), d * cfg.mlp_ratio, d)
}

/// Pre-norm residual block: `x + attn(ln(x))`, then `+ mlp(ln(·))`.
pub fn transformer_block(g: &mut Graph, name: &str, x: Var, cfg: &BlockConfig) -> Result<Var> {
    let h = layer_norm(g, &join(name, "norm1"), x)?;
    let h = multi_head_self_attention(g, &join(name, "attn"), h, cfg.n_heads)?;
    let x = g.add(x, h)?;
    let h = layer_norm(g, &join(name, "norm2"), x)?;
    let h = linear(g, &join(name, "mlp.fc1"), h)?;
    let h = cfg.activation.apply(g, h);
    let h = linear(g, &join(name, "mlp.fc2"), h)?;
    g.add(x, h)
}

/// Kernel and bias drawn from U(±1/√fan_in).
pub fn init_conv2d<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: (usize, usize),
) -> Result<()> {
    let bound = 1.0 / ((c_in * kernel.0 * kernel.1) as f64).sqrt();
    store.insert(
        join(name, "weight"),
        uniform(rng, &[c_out, c_in, kernel.0, kernel.1], bound),
    )?;
    store.insert(join(name, "bias"), uniform(rng, &[c_out], bound))
}

pub fn conv2d(
    g: &mut Graph,
    name: &str,
    x: Var,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Var> {
    let w = g.param(&join(name, "weight"))?;
    let b = g.param(&join(name, "bias"))?;
    g.conv2d(x, w, Some(b), stride, padding)
}

pub fn init_conv1d<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
) -> Result<()> {
    let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
    store.insert(join(name, "weight"), uniform(rng, &[c_out, c_in, kernel], bound))?;
    store.insert(join(name, "bias"), uniform(rng, &[c_out], bound))
}

pub fn conv1d(g: &mut Graph, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = g.param(&join(name, "weight"))?;
    let b = g.param(&join(name, "bias"))?;
    g.conv1d(x, w, Some(b), stride, padding)
}

fn init_lstm_direction<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    d_in: usize,
    hidden: usize,
) -> Result<()> {
    let bound = 1.0 / (hidden as f64).sqrt();
    store.insert(join(name, "w_ih"), uniform(rng, &[4 * hidden, d_in], bound))?;
    store.insert(join(name, "w_hh"), uniform(rng, &[4 * hidden, hidden], bound))?;
    store.insert(join(name, "b_ih"), uniform(rng, &[4 * hidden], bound))?;
    store.insert(join(name, "b_hh"), uniform(rng, &[4 * hidden], bound))
}

/// Registers `{name}.fwd.*` and, when bidirectional, `{name}.bwd.*`.
/// Gate rows are ordered input, forget, cell, output.
pub fn init_lstm<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    d_in: usize,
    hidden: usize,
    bidirectional: bool,
) -> Result<()> {
    init_lstm_direction(store, rng, &join(name, "fwd"), d_in, hidden)?;
    if bidirectional {
        init_lstm_direction(store, rng, &join(name, "bwd"), d_in, hidden)?;
    }
    Ok(())
}

fn lstm_direction(g: &mut Graph, name: &str, x: Var) -> Result<Var> {
    let w_ih = g.param(&join(name, "w_ih"))?;
    let w_hh = g.param(&join(name, "w_hh"))?;
    let b_ih = g.param(&join(name, "b_ih"))?;
    let b_hh = g.param(&join(name, "b_hh"))?;
    let hidden = g.shape(w_hh)[1];
    let t_len = g.shape(x)[0];
    let pre = g.linear(x, w_ih, Some(b_ih))?;
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    let mut c = g.constant(Tensor::zeros(&[1, hidden]));
    let mut outs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xt = g.gather_rows(pre, &[t])?;
        let rec = g.linear(h, w_hh, Some(b_hh))?;
        let z = g.add(xt, rec)?;
        let zi = g.slice_cols(z, 0, hidden)?;
        let zf = g.slice_cols(z, hidden, hidden)?;
        let zg = g.slice_cols(z, 2 * hidden, hidden)?;
        let zo = g.slice_cols(z, 3 * hidden, hidden)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let fc = g.mul(f, c)?;
        let ig = g.mul(i, cand)?;
        c = g.add(fc, ig)?;
        let tc = g.tanh(c);
        h = g.mul(o, tc)?;
        outs.push(h);
    }
    g.concat_rows(&outs)
}

/// LSTM over `x: [T, in]`, returning `[T, H]` or `[T, 2H]`. The backward
/// direction reads the sequence reversed and its outputs are re-aligned so
/// row `t` of both halves refers to input step `t`.
pub fn lstm(g: &mut Graph, name: &str, x: Var, bidirectional: bool) -> Result<Var> {
    let t_len = g.shape(x).first().copied().unwrap_or(0);
    if t_len == 0 {
        return Err(Error::EmptySequence("lstm input has no time steps".into()));
    }
    let fwd = lstm_direction(g, &join(name, "fwd"), x)?;
    if !bidirectional {
        return Ok(fwd);
    }
    let rev: Vec<usize> = (0..t_len).rev().collect();
    let xr = g.gather_rows(x, &rev)?;
    let bwd = lstm_direction(g, &join(name, "bwd"), xr)?;
    let bwd = g.gather_rows(bwd, &rev)?;
    g.concat_cols(&[fwd, bwd])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, project_to_scalar, GradCheckOptions};
    use crate::rng;

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
        let mut r = rng::stream(&[999, seed]);
        uniform(&mut r, shape, 1.0)
    }

    #[test]
    fn single_token_attention_is_value_then_out_projection() {
        let mut s = ParamStore::new();
        let mut r = rng::stream(&[1]);
        init_attention(&mut s, &mut r, "a", 8).unwrap();
        let x = rand_tensor(2, &[1, 8]);
        let mut g = Graph::new(&s);
        let xv = g.constant(x.clone());
        let (y, w) = multi_head_self_attention_with_weights(&mut g, "a", xv, 2).unwrap();
        for a in w {
            assert_eq!(g.value(a).data(), &[1.0]);
        }
        let xv2 = g.constant(x);
        let v = linear(&mut g, "a.value", xv2).unwrap();
        let o = linear(&mut g, "a.out", v).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(o)) < 1e-12);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut s = ParamStore::new();
        let mut r = rng::stream(&[1]);
        init_attention(&mut s, &mut r, "a", 8).unwrap();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::zeros(&[2, 8]));
        assert!(matches!(
            multi_head_self_attention(&mut g, "a", x, 3),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut s = ParamStore::new();
        let mut r = rng::stream(&[3]);
        init_attention(&mut s, &mut r, "a", 8).unwrap();
        let x = rand_tensor(4, &[5, 8]);
        let perm = [3usize, 0, 4, 1, 2];
        let mut g = Graph::new(&s);
        let xv = g.constant(x);
        let (y, weights) = multi_head_self_attention_with_weights(&mut g, "a", xv, 2).unwrap();
        for a in weights {
            for row in g.value(a).data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let xp = g.gather_rows(xv, &perm).unwrap();
        let yp = multi_head_self_attention(&mut g, "a", xp, 2).unwrap();
        let y_then_p = g.gather_rows(y, &perm).unwrap();
        assert!(g.value(yp).max_abs_diff(g.value(y_then_p)) < 1e-12);
    }

    #[test]
    fn block_with_zero_output_projections_is_identity() {
        let mut s = ParamStore::new();
        let mut r = rng::stream(&[5]);
        let cfg = BlockConfig::new(8, 2);
        init_transformer_block(&mut s, &mut r, "b", &cfg).unwrap();
        for n in ["b.attn.out.weight", "b.mlp.fc2.weight"] {
            let p = s.get_mut(n).unwrap();
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for t in [1, 7, 16] {
            let x = rand_tensor(t as u64, &[t, 8]);
            let mut g = Graph::new(&s);
            let xv = g.constant(x.clone());
            let y = transformer_block(&mut g, "b", xv, &cfg).unwrap();
            assert_eq!(g.value(y), &x);
        }
    }

    #[test]
    fn block_gradient_check() {
        let mut s = ParamStore::new();
        let mut r = rng::stream(&[6]);
        let cfg = BlockConfig::new(8, 2);
        init_transformer_block(&mut s, &mut r, "b", &cfg).unwrap();
        // wider weights so attention is far from uniform
        for i in 0..s.len() {
            let (_, p) = s.get_index_mut(i).unwrap();
            p.value.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
        let x = rand_tensor(7, &[3, 8]);
        let report = grad_check(
            &s,
            |g| {
                let xv = g.constant(x.clone());
                let y = transformer_block(g, "b", xv, &cfg)?;
                project_to_scalar(g, y, 11)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn linear_and_layer_norm_gradient_checks() {
        let mut s = ParamStore::new();
        let mut r = rng::stream(&[8]);
        init_linear(&mut s, &mut r, "lin", 3, 2).unwrap();
        init_layer_norm(&mut s, "ln", 2).unwrap();
        let x = rand_tensor(9, &[4, 3]);
        let report = grad_check(
            &s,
            |g| {
                let xv = g.constant(x.clone());
                let y = linear(g, "lin", xv)?;
                Ok(g.mean(y))
            },
            &GradCheckOptions {
                eps: 1e-3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");

        let mut s = ParamStore::new();
        s.insert("ln.weight", rand_tensor(10, &[8])).unwrap();
        s.insert("ln.bias", rand_tensor(11, &[8])).unwrap();
        s.insert("x", rand_tensor(12, &[3, 8])).unwrap();
        let report = grad_check(
            &s,
            |g| {
                let xv = g.param("x")?;
                let y = layer_norm(g, "ln", xv)?;
                project_to_scalar(g, y, 13)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut s = ParamStore::new();
        init_layer_norm(&mut s, "ln", 16).unwrap();
        let x = rand_tensor(14, &[4, 16]);
        let mut g = Graph::new(&s);
        let xv = g.constant(x);
        let y = layer_norm(&mut g, "ln", xv).unwrap();
        for row in g.value(y).data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn zero_lstm_gives_zero_output() {
        let mut s = ParamStore::new();
        let mut r = rng::stream(&[15]);
        init_lstm(&mut s, &mut r, "l", 4, 5, true).unwrap();
        for i in 0..s.len() {
            let (_, p) = s.get_index_mut(i).unwrap();
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&s);
        let x = g.constant(rand_tensor(16, &[6, 4]));
        let y = lstm(&mut g, "l", x, true).unwrap();
        assert_eq!(g.shape(y), &[6, 10]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_step_matches_scalar_oracle() {
        let mut s = ParamStore::new();
        let mut r = rng::stream(&[17]);
        let (d_in, hid) = (3, 2);
        init_lstm(&mut s, &mut r, "l", d_in, hid, false).unwrap();
        let x = rand_tensor(18, &[1, d_in]);
        let mut g = Graph::new(&s);
        let xv = g.constant(x.clone());
        let y = lstm(&mut g, "l", xv, false).unwrap();

        let w = s.value("l.fwd.w_ih").unwrap().data();
        let b1 = s.value("l.fwd.b_ih").unwrap().data();
        let b2 = s.value("l.fwd.b_hh").unwrap().data();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        for j in 0..hid {
            let gate = |k: usize| {
                let row = k * hid + j;
                let mut z = b1[row] + b2[row];
                for m in 0..d_in {
                    z += w[row * d_in + m] * x.data()[m];
                }
                z
            };
            let c = sig(gate(0)) * gate(2).tanh();
            let h = sig(gate(3)) * c.tanh();
            assert!((g.value(y).data()[j] - h).abs() < 1e-6);
        }
    }

    #[test]
    fn lstm_gradient_check() {
        let mut s = ParamStore::new();
        let mut r = rng::stream(&[19]);
        init_lstm(&mut s, &mut r, "l", 4, 5, true).unwrap();
        let x = rand_tensor(20, &[3, 4]);
        let report = grad_check(
            &s,
            |g| {
                let xv = g.constant(x.clone());
                let y = lstm(g, "l", xv, true)?;
                project_to_scalar(g, y, 21)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn conv_matches_naive_loops_and_gradients() {
        let (c, h, w, o, k) = (2, 6, 5, 3, 3);
        let (stride, pad) = ((2, 1), (1, 0));
        let mut s = ParamStore::new();
        let mut r = rng::stream(&[22]);
        init_conv2d(&mut s, &mut r, "c", c, o, (k, k)).unwrap();
        s.insert("x", rand_tensor(23, &[c, h, w])).unwrap();
        let mut g = Graph::new(&s);
        let xv = g.param("x").unwrap();
        let y = conv2d(&mut g, "c", xv, stride, pad).unwrap();
        let ho = (h + 2 * pad.0 - k) / stride.0 + 1;
        let wo = (w + 2 * pad.1 - k) / stride.1 + 1;
        assert_eq!(g.shape(y), &[o, ho, wo]);
        let xd = s.value("x").unwrap().data();
        let kd = s.value("c.weight").unwrap().data();
        let bd = s.value("c.bias").unwrap().data();
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bd[oc];
                    for ic in 0..c {
                        for a in 0..k {
                            for b in 0..k {
                                let ii = (i * stride.0 + a) as isize - pad.0 as isize;
                                let jj = (j * stride.1 + b) as isize - pad.1 as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    acc += kd[((oc * c + ic) * k + a) * k + b]
                                        * xd[(ic * h + ii as usize) * w + jj as usize];
                                }
                            }
                        }
                    }
                    let got = g.value(y).data()[(oc * ho + i) * wo + j];
                    assert!((got - acc).abs() < 1e-5);
                }
            }
        }
        let report = grad_check(
            &s,
            |g| {
                let xv = g.param("x")?;
                let y = conv2d(g, "c", xv, stride, pad)?;
                let y = g.relu(y);
                let p = g.max_pool2d(y, 2, 1)?;
                project_to_scalar(g, p, 24)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn conv1d_gradient_check() {
        let mut s = ParamStore::new();
        let mut r = rng::stream(&[25]);
        init_conv1d(&mut s, &mut r, "c", 2, 3, 4).unwrap();
        s.insert("x", rand_tensor(26, &[2, 17])).unwrap();
        let report = grad_check(
            &s,
            |g| {
                let xv = g.param("x")?;
                let y = conv1d(g, "c", xv, 2, 1)?;
                let y = g.gelu(y);
                project_to_scalar(g, y, 27)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
