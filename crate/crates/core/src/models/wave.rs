//! Raw-waveform encoder: strided 1-D convolutions, then a small transformer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BackboneOutput;
use crate::error::{Error, Result};
use crate::nn::layers::{self, Activation, BlockConfig};
use crate::nn::{Graph, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveformConfig {
    pub conv_channels: usize,
    pub conv_layers: Vec<ConvLayer>,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
}

impl Default for WaveformConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl WaveformConfig {
    /// Overall stride 5·2⁶ = 320, so 16 kHz audio yields 50 tokens per second.
    pub fn default_layers() -> Vec<ConvLayer> {
        let mut v = vec![ConvLayer {
            kernel: 5,
            stride: 5,
            padding: 0,
        }];
        v.extend(std::iter::repeat_n(
            ConvLayer {
                kernel: 4,
                stride: 2,
                padding: 1,
            },
            6,
        ));
        v
    }

    pub fn toy() -> Self {
        Self {
            conv_channels: 32,
            conv_layers: Self::default_layers(),
            embed_dim: 128,
            n_blocks: 2,
            n_heads: 4,
            mlp_ratio: 4,
            activation: Activation::Relu,
        }
    }

    pub fn full() -> Self {
        Self {
            conv_channels: 512,
            embed_dim: 768,
            n_heads: 12,
            ..Self::toy()
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            d: self.embed_dim,
            n_heads: self.n_heads,
            mlp_ratio: self.mlp_ratio,
            activation: self.activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() {
            return Err(Error::config("model.conv_layers", "needs at least one layer"));
        }
        if self.conv_layers.iter().any(|l| l.kernel == 0 || l.stride == 0) {
            return Err(Error::config("model.conv_layers", "kernel and stride must be ≥ 1"));
        }
        if self.conv_channels == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("model.embed_dim", "dimensions must be ≥ 1"));
        }
        self.block().validate("model.n_heads")
    }

    /// Number of output tokens for `len` input samples, if any.
    pub fn n_tokens(&self, len: usize) -> Option<usize> {
        self.conv_layers
            .iter()
            .try_fold(len, |l, layer| layer.out_len(l))
            .filter(|&n| n > 0)
    }
}

pub fn init_waveform_encoder<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &WaveformConfig,
) -> Result<()> {
    cfg.validate()?;
    let mut c_in = 1;
    for (i, l) in cfg.conv_layers.iter().enumerate() {
        layers::init_conv1d(store, rng, &format!("conv.{i}"), c_in, cfg.conv_channels, l.kernel)?;
        c_in = cfg.conv_channels;
    }
    layers::init_layer_norm(store, "feature_norm", cfg.conv_channels)?;
    layers::init_linear(store, rng, "feature_proj", cfg.conv_channels, cfg.embed_dim)?;
    for b in 0..cfg.n_blocks {
        layers::init_transformer_block(store, rng, &format!("blocks.{b}"), &cfg.block())?;
    }
    layers::init_layer_norm(store, "norm", cfg.embed_dim)
}

/// `x` holds raw samples `[L]`. Pooled output is the mean hidden state.
pub fn waveform_encoder_forward(
    g: &mut Graph,
    x: &Tensor,
    cfg: &WaveformConfig,
) -> Result<BackboneOutput> {
    let len = x.len();
    if cfg.n_tokens(len).is_none() {
        return Err(Error::Shape(format!(
            "waveform of {len} samples is shorter than the encoder's receptive field"
        )));
    }
    let mut h = g.constant(x.clone().reshape(&[1, len])?);
    for (i, l) in cfg.conv_layers.iter().enumerate() {
        h = layers::conv1d(g, &format!("conv.{i}"), h, l.stride, l.padding)?;
        h = g.gelu(h);
    }
    let h = g.transpose(h)?;
    let h = layers::layer_norm(g, "feature_norm", h)?;
    let mut h = layers::linear(g, "feature_proj", h)?;
    let block = cfg.block();
    for b in 0..cfg.n_blocks {
        h = layers::transformer_block(g, &format!("blocks.{b}"), h, &block)?;
    }
    let tokens = layers::layer_norm(g, "norm", h)?;
    let pooled = g.mean_rows(tokens);
    Ok(BackboneOutput { pooled, tokens })
}
