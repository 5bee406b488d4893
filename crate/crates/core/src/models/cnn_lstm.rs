//! Convolutional front end over (time, coefficient) followed by stacked
//! bidirectional LSTMs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BackboneOutput;
use crate::error::{Error, Result};
use crate::nn::layers;
use crate::nn::{Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnLstmConfig {
    pub conv_channels: Vec<usize>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Input is mapped to `(x + input_shift) / input_scale`.
    pub input_shift: f64,
    pub input_scale: f64,
}

impl Default for CnnLstmConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![32, 64, 64, 128],
            lstm_hidden: 128,
            lstm_layers: 3,
            input_shift: 0.0,
            input_scale: 10.0,
        }
    }
}

impl CnnLstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::config("model.conv_channels", "needs ≥ 1 layer of ≥ 1 channel"));
        }
        if self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return Err(Error::config("model.lstm_hidden", "LSTM sizes must be ≥ 1"));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::config("model.input_scale", "must be positive"));
        }
        Ok(())
    }

    /// Pooled width: final forward state and first backward state.
    pub fn d_out(&self) -> usize {
        2 * self.lstm_hidden
    }

    /// Feature width seen by the first LSTM for `n_coeffs` input columns.
    pub fn lstm_input(&self, n_coeffs: usize) -> usize {
        let f = n_coeffs >> self.conv_channels.len();
        f * self.conv_channels.last().copied().unwrap_or(0)
    }
}

pub fn init_cnn_lstm<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &CnnLstmConfig,
    n_coeffs: usize,
) -> Result<()> {
    cfg.validate()?;
    let mut c_in = 1;
    for (i, &c) in cfg.conv_channels.iter().enumerate() {
        layers::init_conv2d(store, rng, &format!("conv.{i}"), c_in, c, (3, 3))?;
        c_in = c;
    }
    let d_in = cfg.lstm_input(n_coeffs);
    if d_in == 0 {
        return Err(Error::config(
            "features.n_mfcc",
            format!(
                "{n_coeffs} coefficients vanish after {} pooling stages",
                cfg.conv_channels.len()
            ),
        ));
    }
    let mut d = d_in;
    for l in 0..cfg.lstm_layers {
        layers::init_lstm(store, rng, &format!("lstm.{l}"), d, cfg.lstm_hidden, true)?;
        d = 2 * cfg.lstm_hidden;
    }
    Ok(())
}

/// `x` is `[frames, coeffs]`.
pub fn cnn_lstm_forward(g: &mut Graph, x: &Tensor, cfg: &CnnLstmConfig) -> Result<BackboneOutput> {
    let s = x.shape().to_vec();
    if s.len() != 2 {
        return Err(Error::Shape(format!("expected [frames, coeffs], got {s:?}")));
    }
    let min = 1usize << cfg.conv_channels.len();
    if s[0] < min || s[1] < min {
        return Err(Error::Shape(format!(
            "input {}x{} is smaller than the {min}x{min} pooling footprint",
            s[0], s[1]
        )));
    }
    let scaled: Vec<f64> = x
        .data()
        .iter()
        .map(|v| (v + cfg.input_shift) / cfg.input_scale)
        .collect();
    let mut h = g.constant(Tensor::new(&[1, s[0], s[1]], scaled)?);
    for i in 0..cfg.conv_channels.len() {
        h = layers::conv2d(g, &format!("conv.{i}"), h, (1, 1), (1, 1))?;
        h = g.relu(h);
        h = g.max_pool2d(h, 2, 2)?;
    }
    // [C, T', F'] -> [T', C·F']
    let h = g.swap_leading(h)?;
    let hs = g.shape(h).to_vec();
    let mut h = g.reshape(h, &[hs[0], hs[1] * hs[2]])?;
    for l in 0..cfg.lstm_layers {
        h = layers::lstm(g, &format!("lstm.{l}"), h, true)?;
    }
    let t_len = g.shape(h)[0];
    let hid = cfg.lstm_hidden;
    let last = g.gather_rows(h, &[t_len - 1])?;
    let first = g.gather_rows(h, &[0])?;
    let fwd = g.slice_cols(last, 0, hid)?;
    let bwd = g.slice_cols(first, hid, hid)?;
    let pooled = g.concat_cols(&[fwd, bwd])?;
    let pooled = g.reshape(pooled, &[2 * hid])?;
    Ok(BackboneOutput { pooled, tokens: h })
}
