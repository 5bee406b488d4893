//! Classification heads over backbone outputs.
//!
//! Parameter names: `head.linear.{W,b}`; `head.mlp.{norm.*,W1,b1,W2,b2}`;
//! `head.attn.{W1,w2,W,b}`. The attention scorer's `W1` is unrelated to the
//! MLP's `W1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::BackboneOutput;
use crate::nn::layers::{self, INIT_STD};
use crate::nn::{trunc_normal, Graph, ParamStore, Tensor, Var};

pub const EPS_VAR: f64 = 1e-6;
pub const N_CLASSES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "linear", alias = "Linear")]
    Linear,
    #[serde(rename = "mlp", alias = "MLP", alias = "Mlp")]
    Mlp,
    #[serde(rename = "attentive_pool", alias = "AttentivePool")]
    AttentivePool,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Linear, HeadKind::Mlp, HeadKind::AttentivePool];

    pub fn label(self) -> &'static str {
        match self {
            HeadKind::Linear => "Linear",
            HeadKind::Mlp => "MLP",
            HeadKind::AttentivePool => "AttentivePool",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Backbone width; inferred from the model when absent.
    pub d_in: Option<usize>,
    pub mlp_hidden: usize,
    pub dropout_p: f64,
    pub d_att: usize,
    pub n_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Mlp,
            d_in: None,
            mlp_hidden: 256,
            dropout_p: 0.1,
            d_att: 128,
            n_classes: N_CLASSES,
        }
    }
}

impl HeadConfig {
    pub fn new(kind: HeadKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mlp_hidden == 0 {
            return Err(Error::config("head.mlp_hidden", "must be at least 1"));
        }
        if self.d_att == 0 {
            return Err(Error::config("head.d_att", "must be at least 1"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("head.n_classes", "need at least two classes"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("head.dropout_p", "must lie in [0, 1)"));
        }
        if self.d_in == Some(0) {
            return Err(Error::config("head.d_in", "must be at least 1"));
        }
        Ok(())
    }

    fn d_in(&self) -> Result<usize> {
        self.d_in
            .ok_or_else(|| Error::config("head.d_in", "backbone width was not resolved"))
    }
}

pub fn init_head<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &HeadConfig) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_in()?;
    let k = cfg.n_classes;
    match cfg.kind {
        HeadKind::Linear => {
            store.insert("head.linear.W", trunc_normal(rng, &[k, d], INIT_STD))?;
            store.insert("head.linear.b", Tensor::zeros(&[k]))
        }
        HeadKind::Mlp => {
            layers::init_layer_norm(store, "head.mlp.norm", d)?;
            store.insert("head.mlp.W1", trunc_normal(rng, &[cfg.mlp_hidden, d], INIT_STD))?;
            store.insert("head.mlp.b1", Tensor::zeros(&[cfg.mlp_hidden]))?;
            store.insert("head.mlp.W2", trunc_normal(rng, &[k, cfg.mlp_hidden], INIT_STD))?;
            store.insert("head.mlp.b2", Tensor::zeros(&[k]))
        }
        HeadKind::AttentivePool => {
            store.insert("head.attn.W1", trunc_normal(rng, &[cfg.d_att, d], INIT_STD))?;
            store.insert("head.attn.w2", trunc_normal(rng, &[1, cfg.d_att], INIT_STD))?;
            store.insert("head.attn.W", trunc_normal(rng, &[k, 2 * d], INIT_STD))?;
            store.insert("head.attn.b", Tensor::zeros(&[k]))
        }
    }
}

fn check_width(g: &Graph, v: Var, d: usize, what: &str) -> Result<()> {
    let got = *g.shape(v).last().unwrap_or(&0);
    if got != d {
        return Err(Error::Shape(format!(
            "{what} has width {got}, head expects {d}"
        )));
    }
    Ok(())
}

/// `z = W h + b`.
pub fn linear_head(g: &mut Graph, h: Var) -> Result<Var> {
    let w = g.param("head.linear.W")?;
    let b = g.param("head.linear.b")?;
    g.linear(h, w, Some(b))
}

/// `h₁ = ReLU(W₁·LayerNorm(h)+b₁)`, `z = W₂·Dropout(h₁)+b₂`.
pub fn mlp_head<R: Rng + ?Sized>(
    g: &mut Graph,
    h: Var,
    dropout_p: f64,
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    let x = layers::layer_norm(g, "head.mlp.norm", h)?;
    let w1 = g.param("head.mlp.W1")?;
    let b1 = g.param("head.mlp.b1")?;
    let h1 = g.linear(x, w1, Some(b1))?;
    let h1 = g.relu(h1);
    let h1 = g.dropout(h1, dropout_p, rng, training);
    let w2 = g.param("head.mlp.W2")?;
    let b2 = g.param("head.mlp.b2")?;
    g.linear(h1, w2, Some(b2))
}

/// Intermediate values of attentive statistics pooling.
#[derive(Clone, Copy, Debug)]
pub struct AttentivePooling {
    /// `[T]` attention weights.
    pub alpha: Var,
    /// `[d]` weighted mean.
    pub mu: Var,
    /// `[d]` weighted standard deviation.
    pub sigma: Var,
    /// `[K]`.
    pub logits: Var,
}

/// `αₜ = softmax(w₂ᵀ tanh(W₁hₜ))`, `μ = Σ αₜhₜ`,
/// `σ = √(Σ αₜ(hₜ−μ)² + eps_var)`, `z = W[μ;σ] + b`.
pub fn attentive_pooling(g: &mut Graph, tokens: Var) -> Result<AttentivePooling> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::EmptySequence(format!(
            "attentive pooling needs [T >= 1, d] tokens, got {s:?}"
        )));
    }
    let (t, d) = (s[0], s[1]);
    let w1 = g.param("head.attn.W1")?;
    let w2 = g.param("head.attn.w2")?;
    let u = g.linear(tokens, w1, None)?;
    let u = g.tanh(u);
    let scores = g.linear(u, w2, None)?;
    let scores = g.reshape(scores, &[t])?;
    let alpha = g.softmax(scores);
    let a_row = g.reshape(alpha, &[1, t])?;
    let mu = g.matmul(a_row, tokens)?;
    let neg_mu = g.scale(mu, -1.0);
    let centered = g.add_row(tokens, neg_mu)?;
    let sq = g.mul(centered, centered)?;
    let var = g.matmul(a_row, sq)?;
    let var = g.add_scalar(var, EPS_VAR);
    let sigma = g.sqrt(var);
    let stats = g.concat_cols(&[mu, sigma])?;
    let w = g.param("head.attn.W")?;
    let b = g.param("head.attn.b")?;
    let z = g.linear(stats, w, Some(b))?;
    let k = g.shape(z)[1];
    Ok(AttentivePooling {
        alpha,
        mu: g.reshape(mu, &[d])?,
        sigma: g.reshape(sigma, &[d])?,
        logits: g.reshape(z, &[k])?,
    })
}

/// Logits `[K]` for one example.
pub fn head_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &HeadConfig,
    out: &BackboneOutput,
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    let d = cfg.d_in()?;
    match cfg.kind {
        HeadKind::Linear => {
            check_width(g, out.pooled, d, "pooled representation")?;
            linear_head(g, out.pooled)
        }
        HeadKind::Mlp => {
            check_width(g, out.pooled, d, "pooled representation")?;
            mlp_head(g, out.pooled, cfg.dropout_p, rng, training)
        }
        HeadKind::AttentivePool => {
            check_width(g, out.tokens, d, "token matrix")?;
            Ok(attentive_pooling(g, out.tokens)?.logits)
        }
    }
}

/// Number of scalars in the head's tensors.
pub fn head_param_count(store: &ParamStore) -> usize {
    store
        .iter()
        .filter(|(n, _)| n.starts_with("head."))
        .map(|(_, p)| p.value.len())
        .sum()
}
