//! Patch-based spectrogram transformer with structured patchout.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BackboneOutput;
use crate::error::{Error, Result};
use crate::nn::layers::{self, Activation, BlockConfig};
use crate::nn::{trunc_normal, Graph, ParamStore, Tensor, Var};

/// How many rows/columns (or what share of them) patchout removes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DropAmount {
    Count(usize),
    Fraction(f64),
}

impl Default for DropAmount {
    fn default() -> Self {
        DropAmount::Count(0)
    }
}

impl DropAmount {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            DropAmount::Count(k) => k.min(n),
            DropAmount::Fraction(f) => ((f * n as f64).round() as usize).min(n),
        }
    }

    fn validate(self, field: &str) -> Result<()> {
        if let DropAmount::Fraction(f) = self {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(field, format!("fraction {f} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub patchout_time: DropAmount,
    pub patchout_freq: DropAmount,
    /// Share of the surviving patches removed at random after the
    /// structured drop.
    pub patchout_unstructured: f64,
    pub max_time_patches: usize,
    pub max_freq_patches: usize,
    /// Input is mapped to `(x + input_shift) / input_scale` before patching.
    pub input_shift: f64,
    pub input_scale: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl PatchConfig {
    pub fn toy() -> Self {
        Self {
            patch_h: 16,
            patch_w: 16,
            embed_dim: 128,
            n_blocks: 2,
            n_heads: 4,
            mlp_ratio: 4,
            activation: Activation::Relu,
            patchout_time: DropAmount::Count(2),
            patchout_freq: DropAmount::Count(1),
            patchout_unstructured: 0.0,
            max_time_patches: 100,
            max_freq_patches: 8,
            input_shift: 4.5,
            input_scale: 5.0,
        }
    }

    pub fn full() -> Self {
        Self {
            embed_dim: 768,
            n_blocks: 12,
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
        let f = |n: &str| format!("model.{n}");
        for (name, v) in [
            ("patch_h", self.patch_h),
            ("patch_w", self.patch_w),
            ("embed_dim", self.embed_dim),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("max_time_patches", self.max_time_patches),
            ("max_freq_patches", self.max_freq_patches),
        ] {
            if v == 0 {
                return Err(Error::config(f(name), "must be at least 1"));
            }
        }
        self.block().validate(&f("n_heads"))?;
        self.patchout_time.validate(&f("patchout_time"))?;
        self.patchout_freq.validate(&f("patchout_freq"))?;
        if !(0.0..1.0).contains(&self.patchout_unstructured) {
            return Err(Error::config(f("patchout_unstructured"), "must lie in [0, 1)"));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::config(f("input_scale"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub n_freq: usize,
    pub n_time: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.n_freq * self.n_time
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(freq row, time column)` of patch `n`.
    pub fn position(&self, n: usize) -> (usize, usize) {
        (n / self.n_time, n % self.n_time)
    }
}

/// Embedded patches: row 0 of `tokens` is CLS, row `r + 1` is original
/// patch `kept_indices[r]`.
#[derive(Clone, Debug)]
pub struct PatchSequence {
    pub tokens: Var,
    pub grid: PatchGrid,
    pub kept_indices: Vec<usize>,
}

/// Split a `[frames, bins]` matrix into non-overlapping patches enumerated
/// freq-major (`n = f·n_time + t`). Each patch is flattened bin-major.
/// Frames and bins beyond a whole patch are dropped.
pub fn patchify(x: &Tensor, patch_h: usize, patch_w: usize) -> Result<(Tensor, PatchGrid)> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("patchify expects [frames, bins], got {s:?}")));
    }
    let (frames, bins) = (s[0], s[1]);
    if frames < patch_w || bins < patch_h {
        return Err(Error::Shape(format!(
            "spectrogram of {bins} bins x {frames} frames is smaller than one {patch_h}x{patch_w} patch"
        )));
    }
    let grid = PatchGrid {
        n_freq: bins / patch_h,
        n_time: frames / patch_w,
    };
    let p = patch_h * patch_w;
    let mut out = vec![0.0; grid.len() * p];
    let xd = x.data();
    for n in 0..grid.len() {
        let (fi, ti) = grid.position(n);
        for m in 0..patch_h {
            for t in 0..patch_w {
                let frame = ti * patch_w + t;
                let bin = fi * patch_h + m;
                out[n * p + m * patch_w + t] = xd[frame * bins + bin];
            }
        }
    }
    Ok((Tensor::from_parts(vec![grid.len(), p], out), grid))
}

/// Inverse of [`patchify`] on the trimmed region.
pub fn assemble(patches: &Tensor, grid: PatchGrid, patch_h: usize, patch_w: usize) -> Tensor {
    let frames = grid.n_time * patch_w;
    let bins = grid.n_freq * patch_h;
    let p = patch_h * patch_w;
    let mut out = vec![0.0; frames * bins];
    let pd = patches.data();
    for n in 0..grid.len() {
        let (fi, ti) = grid.position(n);
        for m in 0..patch_h {
            for t in 0..patch_w {
                out[(ti * patch_w + t) * bins + fi * patch_h + m] = pd[n * p + m * patch_w + t];
            }
        }
    }
    Tensor::from_parts(vec![frames, bins], out)
}

pub fn init_patch_transformer<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &PatchConfig,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    layers::init_linear(store, rng, "patch_embed.proj", cfg.patch_h * cfg.patch_w, d)?;
    store.insert("pos.time", trunc_normal(rng, &[cfg.max_time_patches, d], layers::INIT_STD))?;
    store.insert("pos.freq", trunc_normal(rng, &[cfg.max_freq_patches, d], layers::INIT_STD))?;
    store.insert("cls", trunc_normal(rng, &[1, d], layers::INIT_STD))?;
    for b in 0..cfg.n_blocks {
        layers::init_transformer_block(store, rng, &format!("blocks.{b}"), &cfg.block())?;
    }
    layers::init_layer_norm(store, "norm", d)
}

/// Project patches, add time and frequency embeddings, prepend CLS.
pub fn embed_patches(
    g: &mut Graph,
    patches: &Tensor,
    grid: PatchGrid,
    cfg: &PatchConfig,
) -> Result<PatchSequence> {
    if grid.n_time > cfg.max_time_patches || grid.n_freq > cfg.max_freq_patches {
        return Err(Error::Shape(format!(
            "patch grid {}x{} exceeds the positional tables ({}x{})",
            grid.n_freq, grid.n_time, cfg.max_freq_patches, cfg.max_time_patches
        )));
    }
    let x = g.constant(patches.clone());
    let e = layers::linear(g, "patch_embed.proj", x)?;
    let (fidx, tidx): (Vec<usize>, Vec<usize>) = (0..grid.len()).map(|n| grid.position(n)).unzip();
    let time_table = g.param("pos.time")?;
    let freq_table = g.param("pos.freq")?;
    let tpos = g.gather_rows(time_table, &tidx)?;
    let fpos = g.gather_rows(freq_table, &fidx)?;
    let e = g.add(e, tpos)?;
    let e = g.add(e, fpos)?;
    let cls = g.param("cls")?;
    let tokens = g.concat_rows(&[cls, e])?;
    Ok(PatchSequence {
        tokens,
        grid,
        kept_indices: (0..grid.len()).collect(),
    })
}

/// Indices of the grid cells that survive dropping `drop_freq` rows and
/// `drop_time` columns.
pub fn surviving_cells(grid: PatchGrid, drop_freq: &[usize], drop_time: &[usize]) -> Vec<usize> {
    (0..grid.len())
        .filter(|&n| {
            let (f, t) = grid.position(n);
            !drop_freq.contains(&f) && !drop_time.contains(&t)
        })
        .collect()
}

/// Training-time removal of whole frequency rows and time columns, plus an
/// optional random share of the remainder. Identity in eval mode.
pub fn patchout<R: Rng + ?Sized>(
    g: &mut Graph,
    seq: PatchSequence,
    cfg: &PatchConfig,
    rng: &mut R,
    training: bool,
) -> Result<PatchSequence> {
    let grid = seq.grid;
    let n_f = cfg.patchout_freq.resolve(grid.n_freq);
    let n_t = cfg.patchout_time.resolve(grid.n_time);
    if !training || (n_f == 0 && n_t == 0 && cfg.patchout_unstructured == 0.0) {
        return Ok(seq);
    }
    let drop_f = sample(rng, grid.n_freq, n_f).into_vec();
    let drop_t = sample(rng, grid.n_time, n_t).into_vec();
    let mut keep: Vec<usize> = seq
        .kept_indices
        .iter()
        .copied()
        .filter(|&n| {
            let (f, t) = grid.position(n);
            !drop_f.contains(&f) && !drop_t.contains(&t)
        })
        .collect();
    if cfg.patchout_unstructured > 0.0 && !keep.is_empty() {
        let n_drop = (cfg.patchout_unstructured * keep.len() as f64).round() as usize;
        let n_drop = n_drop.min(keep.len());
        let mut gone = sample(rng, keep.len(), n_drop).into_vec();
        gone.sort_unstable();
        for i in gone.into_iter().rev() {
            keep.remove(i);
        }
    }
    if keep.is_empty() {
        return Err(Error::config(
            "model.patchout_time",
            format!(
                "patchout removes every patch of a {}x{} grid",
                grid.n_freq, grid.n_time
            ),
        ));
    }
    // rows in the current token matrix (CLS stays at 0)
    let mut rows = Vec::with_capacity(keep.len() + 1);
    rows.push(0);
    let mut pos = 0;
    for &n in &keep {
        while seq.kept_indices[pos] != n {
            pos += 1;
        }
        rows.push(pos + 1);
    }
    let tokens = g.gather_rows(seq.tokens, &rows)?;
    Ok(PatchSequence {
        tokens,
        grid,
        kept_indices: keep,
    })
}

/// Full backbone: patchify, embed, patchout, blocks, final norm. `x` is a
/// `[frames, mel bins]` log-mel matrix.
pub fn passt_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    x: &Tensor,
    cfg: &PatchConfig,
    rng: &mut R,
    training: bool,
) -> Result<(BackboneOutput, PatchSequence)> {
    let scaled = Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .map(|v| (v + cfg.input_shift) / cfg.input_scale)
            .collect(),
    );
    let (patches, grid) = patchify(&scaled, cfg.patch_h, cfg.patch_w)?;
    let seq = embed_patches(g, &patches, grid, cfg)?;
    let seq = patchout(g, seq, cfg, rng, training)?;
    let block = cfg.block();
    let mut h = seq.tokens;
    for b in 0..cfg.n_blocks {
        h = layers::transformer_block(g, &format!("blocks.{b}"), h, &block)?;
    }
    let h = layers::layer_norm(g, "norm", h)?;
    let pooled = g.row(h, 0)?;
    let n = g.shape(h)[0];
    let idx: Vec<usize> = (1..n).collect();
    let tokens = g.gather_rows(h, &idx)?;
    Ok((BackboneOutput { pooled, tokens }, seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ramp(frames: usize, bins: usize) -> Tensor {
        Tensor::new(&[frames, bins], (0..frames * bins).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn patch_counts_and_trim() {
        let (p, grid) = patchify(&ramp(96, 128), 16, 16).unwrap();
        assert_eq!(grid, PatchGrid { n_freq: 8, n_time: 6 });
        assert_eq!(p.shape(), &[48, 256]);
        let (p2, grid2) = patchify(&ramp(100, 128), 16, 16).unwrap();
        assert_eq!(grid2, grid);
        assert_eq!(p2.shape(), &[48, 256]);
        assert!(matches!(patchify(&ramp(10, 128), 16, 16), Err(Error::Shape(_))));
    }

    #[test]
    fn assemble_inverts_patchify() {
        let x = ramp(100, 130);
        let (p, grid) = patchify(&x, 16, 16).unwrap();
        let back = assemble(&p, grid, 16, 16);
        assert_eq!(back.shape(), &[96, 128]);
        for f in 0..96 {
            for b in 0..128 {
                assert_eq!(back.data()[f * 128 + b], x.data()[f * 130 + b]);
            }
        }
    }

    #[test]
    fn patchout_drop_counts() {
        let grid = PatchGrid { n_freq: 8, n_time: 6 };
        let cfg = PatchConfig {
            patchout_freq: DropAmount::Count(2),
            patchout_time: DropAmount::Count(1),
            ..PatchConfig::toy()
        };
        let s = ParamStore::new();
        for seed in 0..20 {
            let mut g = Graph::new(&s);
            let tokens = g.constant(Tensor::zeros(&[49, 4]));
            let seq = PatchSequence {
                tokens,
                grid,
                kept_indices: (0..48).collect(),
            };
            let mut r = rng::stream(&[seed]);
            let out = patchout(&mut g, seq, &cfg, &mut r, true).unwrap();
            assert_eq!(out.kept_indices.len(), 30);
            assert_eq!(g.shape(out.tokens), &[31, 4]);
        }
    }

    #[test]
    fn dropping_everything_is_a_config_error() {
        let grid = PatchGrid { n_freq: 2, n_time: 2 };
        let cfg = PatchConfig {
            patchout_freq: DropAmount::Fraction(1.0),
            ..PatchConfig::toy()
        };
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let tokens = g.constant(Tensor::zeros(&[5, 4]));
        let seq = PatchSequence {
            tokens,
            grid,
            kept_indices: (0..4).collect(),
        };
        let mut r = rng::stream(&[0]);
        assert!(matches!(
            patchout(&mut g, seq, &cfg, &mut r, true),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn drop_amount_parses_count_or_fraction() {
        #[derive(Deserialize)]
        struct W {
            a: DropAmount,
            b: DropAmount,
        }
        let w: W = toml::from_str("a = 2\nb = 0.25").unwrap();
        assert_eq!(w.a, DropAmount::Count(2));
        assert_eq!(w.b, DropAmount::Fraction(0.25));
        assert_eq!(DropAmount::Fraction(0.25).resolve(8), 2);
    }
}
