//! The three backbone families and the model wrapper that pairs a backbone
//! with a classification head.

mod cnn_lstm;
mod patch;
mod wave;

pub use cnn_lstm::{cnn_lstm_forward, init_cnn_lstm, CnnLstmConfig};
pub use patch::{
    assemble, embed_patches, init_patch_transformer, passt_forward, patchify, patchout,
    surviving_cells, DropAmount, PatchConfig, PatchGrid, PatchSequence,
};
pub use wave::{init_waveform_encoder, waveform_encoder_forward, ConvLayer, WaveformConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio_io::Waveform;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor};
use crate::heads::{head_forward, init_head, HeadConfig};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::rng::{self, purpose};

/// What a backbone hands to a head: a single summary vector `[d]` and the
/// per-token hidden states `[T, d]`.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    pub pooled: Var,
    pub tokens: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelConfig {
    #[serde(alias = "passt")]
    PatchTransformer(PatchConfig),
    #[serde(alias = "distilhubert")]
    WaveformEncoder(WaveformConfig),
    CnnLstm(CnnLstmConfig),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::PatchTransformer(PatchConfig::toy())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    LogMel,
    Mfcc,
    Waveform,
}

impl InputKind {
    pub fn name(self) -> &'static str {
        match self {
            InputKind::LogMel => "log_mel",
            InputKind::Mfcc => "mfcc",
            InputKind::Waveform => "waveform",
        }
    }
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::PatchTransformer(_) => "patch_transformer",
            ModelConfig::WaveformEncoder(_) => "waveform_encoder",
            ModelConfig::CnnLstm(_) => "cnn_lstm",
        }
    }

    pub fn input_kind(&self) -> InputKind {
        match self {
            ModelConfig::PatchTransformer(_) => InputKind::LogMel,
            ModelConfig::WaveformEncoder(_) => InputKind::Waveform,
            ModelConfig::CnnLstm(_) => InputKind::Mfcc,
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            ModelConfig::PatchTransformer(c) => c.embed_dim,
            ModelConfig::WaveformEncoder(c) => c.embed_dim,
            ModelConfig::CnnLstm(c) => c.d_out(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::PatchTransformer(c) => c.validate(),
            ModelConfig::WaveformEncoder(c) => c.validate(),
            ModelConfig::CnnLstm(c) => c.validate(),
        }
    }
}

/// Everything needed to rebuild a model and its input pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub head: HeadConfig,
    pub features: FeatureConfig,
}

impl ModelSpec {
    /// Validate, fill in the head's input width, and check feature settings
    /// that the backbone depends on.
    pub fn resolve(mut self) -> Result<Self> {
        self.model.validate()?;
        self.head.validate()?;
        let d = self.model.d_out();
        match self.head.d_in {
            None => self.head.d_in = Some(d),
            Some(given) if given != d => {
                return Err(Error::config(
                    "head.d_in",
                    format!("{given} does not match the backbone width {d}"),
                ))
            }
            _ => {}
        }
        if self.model.input_kind() != InputKind::Waveform {
            self.features.validate(crate::audio_io::CANONICAL_RATE)?;
        }
        Ok(self)
    }
}

/// Turns canonical waveforms into the input a model family expects.
#[derive(Clone)]
pub struct Featurizer {
    kind: InputKind,
    extractor: Option<FeatureExtractor>,
}

impl Featurizer {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let kind = spec.model.input_kind();
        let extractor = match kind {
            InputKind::Waveform => None,
            _ => Some(FeatureExtractor::canonical(&spec.features)?),
        };
        Ok(Self { kind, extractor })
    }

    pub fn kind(&self) -> InputKind {
        self.kind
    }

    /// `[frames, bins]` for spectral inputs, `[samples]` for raw audio.
    /// Values are held at single precision.
    pub fn apply(&self, w: &Waveform) -> Result<Tensor> {
        let t = match (self.kind, &self.extractor) {
            (InputKind::Waveform, _) => Tensor::vector(w.samples.clone()),
            (InputKind::LogMel, Some(fx)) => {
                let s = fx.log_mel(w)?;
                Tensor::new(&[s.n_frames, s.n_bins], s.data)?
            }
            (InputKind::Mfcc, Some(fx)) => {
                let s = fx.mfcc(w)?;
                Tensor::new(&[s.n_frames, s.n_bins], s.data)?
            }
            _ => unreachable!("spectral featurizer without extractor"),
        };
        let mut t = t;
        crate::nn::round_f32(t.data_mut());
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
}

impl Model {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let spec = spec.resolve()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(&[purpose::INIT, seed]);
        match &spec.model {
            ModelConfig::PatchTransformer(c) => init_patch_transformer(&mut store, &mut r, c)?,
            ModelConfig::WaveformEncoder(c) => init_waveform_encoder(&mut store, &mut r, c)?,
            ModelConfig::CnnLstm(c) => init_cnn_lstm(&mut store, &mut r, c, spec.features.n_mfcc)?,
        }
        init_head(&mut store, &mut r, &spec.head)?;
        Ok(Self { spec, store })
    }

    pub fn featurizer(&self) -> Result<Featurizer> {
        Featurizer::new(&self.spec)
    }

    /// Eval-mode logits `[K]`.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let mut r = rng::stream(&[0]);
        let z = forward(&self.spec, &mut g, input, &mut r, false)?;
        g.check_finite()?;
        Ok(g.value(z).clone())
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Backbone then head; returns logits `[K]`.
pub fn forward<R: Rng + ?Sized>(
    spec: &ModelSpec,
    g: &mut Graph,
    input: &Tensor,
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    let out = backbone_forward(&spec.model, g, input, rng, training)?;
    head_forward(g, &spec.head, &out, rng, training)
}

pub fn backbone_forward<R: Rng + ?Sized>(
    model: &ModelConfig,
    g: &mut Graph,
    input: &Tensor,
    rng: &mut R,
    training: bool,
) -> Result<BackboneOutput> {
    match model {
        ModelConfig::PatchTransformer(c) => Ok(passt_forward(g, input, c, rng, training)?.0),
        ModelConfig::WaveformEncoder(c) => waveform_encoder_forward(g, input, c),
        ModelConfig::CnnLstm(c) => cnn_lstm_forward(g, input, c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadKind;

    #[test]
    fn family_tag_selects_variant() {
        #[derive(Deserialize)]
        struct W {
            model: ModelConfig,
        }
        let w: W = toml::from_str("[model]\nfamily = \"cnn_lstm\"\nlstm_hidden = 16").unwrap();
        match w.model {
            ModelConfig::CnnLstm(c) => assert_eq!(c.lstm_hidden, 16),
            other => panic!("{other:?}"),
        }
        let bad = toml::from_str::<W>("[model]\nfamily = \"cnn_lstm\"\nbogus = 1");
        assert!(bad.is_err());
    }

    #[test]
    fn mismatched_head_width_is_rejected() {
        let spec = ModelSpec {
            model: ModelConfig::default(),
            head: HeadConfig {
                d_in: Some(64),
                ..HeadConfig::new(HeadKind::Linear)
            },
            features: FeatureConfig::default(),
        };
        match spec.resolve() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "head.d_in"),
            other => panic!("{other:?}"),
        }
    }
}
