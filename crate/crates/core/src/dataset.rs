//! Corpus manifests, speaker-independent splits, the synthetic toy corpus,
//! batching, and the feature cache.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_io::{self, Waveform, CANONICAL_RATE};
use crate::augment::{augment_pipeline, AugmentConfig};
use crate::error::{Error, Result};
use crate::models::Featurizer;
use crate::nn::Tensor;
use crate::rng::{self, purpose};

pub const CREMA_D_CLIPS: usize = 7442;
pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Angry,
    Disgust,
    Fear,
    Happy,
    Neutral,
    Sad,
}

impl Emotion {
    pub const ALL: [Emotion; 6] = [
        Emotion::Angry,
        Emotion::Disgust,
        Emotion::Fear,
        Emotion::Happy,
        Emotion::Neutral,
        Emotion::Sad,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            Emotion::Angry => "ANG",
            Emotion::Disgust => "DIS",
            Emotion::Fear => "FEA",
            Emotion::Happy => "HAP",
            Emotion::Neutral => "NEU",
            Emotion::Sad => "SAD",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Angry => "angry",
            Emotion::Disgust => "disgust",
            Emotion::Fear => "fear",
            Emotion::Happy => "happy",
            Emotion::Neutral => "neutral",
            Emotion::Sad => "sad",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.code() == code)
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s || e.code() == s)
            .ok_or_else(|| Error::Label(format!("unknown emotion `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub path: PathBuf,
    pub actor_id: u32,
    pub sentence: String,
    pub emotion: Emotion,
    pub intensity: String,
}

impl SampleMeta {
    /// Stable identifier used as the feature-cache key.
    pub fn id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn label(&self) -> usize {
        self.emotion.index()
    }
}

/// Parse `ActorID_Sentence_Emotion_Intensity.wav`.
pub fn parse_crema_filename(name: &str) -> Result<SampleMeta> {
    let base = Path::new(name)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string());
    let stem = base.strip_suffix(".wav").unwrap_or(&base);
    let fields: Vec<&str> = stem.split('_').collect();
    if fields.len() != 4 {
        return Err(Error::Manifest(format!(
            "{base}: expected ActorID_Sentence_Emotion_Intensity, found {} field(s)",
            fields.len()
        )));
    }
    let actor_id = fields[0]
        .parse::<u32>()
        .map_err(|_| Error::Manifest(format!("{base}: actor id `{}` is not an integer", fields[0])))?;
    let emotion = Emotion::from_code(fields[2])
        .ok_or_else(|| Error::Manifest(format!("{base}: unknown emotion code `{}`", fields[2])))?;
    Ok(SampleMeta {
        path: PathBuf::from(name),
        actor_id,
        sentence: fields[1].to_string(),
        emotion,
        intensity: fields[3].to_string(),
    })
}

/// Result of scanning a directory: parsed samples plus the files that did
/// not follow the naming convention.
#[derive(Clone, Debug, Default)]
pub struct ManifestScan {
    pub samples: Vec<SampleMeta>,
    pub rejected: Vec<(PathBuf, String)>,
}

/// Recursively collect `*.wav` files under `dir`, sorted by path.
pub fn scan_directory(dir: &Path) -> Result<ManifestScan> {
    if !dir.is_dir() {
        return Err(Error::Manifest(format!("{} is not a directory", dir.display())));
    }
    let pattern = dir.join("**").join("*.wav");
    let pattern = pattern.to_string_lossy();
    let mut paths: Vec<PathBuf> = glob::glob(&pattern)
        .map_err(|e| Error::Manifest(format!("bad directory pattern: {e}")))?
        .filter_map(|p| p.ok())
        .collect();
    paths.sort();
    let parsed: Vec<(PathBuf, Result<SampleMeta>)> = paths
        .into_par_iter()
        .map(|p| {
            let r = parse_crema_filename(&p.to_string_lossy());
            (p, r)
        })
        .collect();
    let mut scan = ManifestScan::default();
    for (p, r) in parsed {
        match r {
            Ok(m) => scan.samples.push(m),
            Err(e) => scan.rejected.push((p, e.to_string())),
        }
    }
    if scan.samples.len() != CREMA_D_CLIPS {
        log::warn!(
            "manifest has {} clips; the complete corpus has {CREMA_D_CLIPS}",
            scan.samples.len()
        );
    }
    Ok(scan)
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    actor_id: u32,
    sentence: String,
    emotion: Emotion,
    intensity: String,
}

pub fn write_manifest(path: &Path, samples: &[SampleMeta]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        w.serialize(ManifestRow {
            path: s.path.to_string_lossy().into_owned(),
            actor_id: s.actor_id,
            sentence: s.sentence.clone(),
            emotion: s.emotion,
            intensity: s.intensity.clone(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleMeta>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::Manifest(format!("{} row {}: {e}", path.display(), i + 1)))?;
        out.push(SampleMeta {
            path: PathBuf::from(row.path),
            actor_id: row.actor_id,
            sentence: row.sentence,
            emotion: row.emotion,
            intensity: row.intensity,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config("split", format!("unknown split `{s}` (train, val, test)")))
    }
}

/// Disjoint actor sets per split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub train_actors: Vec<u32>,
    pub val_actors: Vec<u32>,
    pub test_actors: Vec<u32>,
}

impl SplitAssignment {
    pub fn actors(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train_actors,
            Split::Val => &self.val_actors,
            Split::Test => &self.test_actors,
        }
    }

    pub fn split_of(&self, actor: u32) -> Option<Split> {
        Split::ALL.into_iter().find(|&s| self.actors(s).contains(&actor))
    }

    /// Error if any actor appears in two splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for s in Split::ALL {
            for &a in self.actors(s) {
                if let Some(prev) = seen.insert(a, s) {
                    return Err(Error::Split(format!(
                        "actor {a} is in both {} and {}",
                        prev.name(),
                        s.name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn select<'a>(&self, samples: &'a [SampleMeta], split: Split) -> Vec<&'a SampleMeta> {
        let actors: BTreeSet<u32> = self.actors(split).iter().copied().collect();
        samples.iter().filter(|m| actors.contains(&m.actor_id)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        s.check_disjoint()?;
        Ok(s)
    }
}

/// Shuffle actors with `seed`, then hand each to the split whose sample
/// count lags its target the most. Splits still empty when only as many
/// actors remain as there are empty splits are filled first.
pub fn speaker_independent_split(
    samples: &[SampleMeta],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    if ratios.iter().any(|&r| !(r > 0.0 && r.is_finite()))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6
    {
        return Err(Error::config(
            "dataset.split_ratios",
            format!("ratios {ratios:?} must be positive and sum to 1"),
        ));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for m in samples {
        *counts.entry(m.actor_id).or_default() += 1;
    }
    if counts.len() < 3 {
        return Err(Error::Split(format!(
            "{} distinct actor(s); a three-way split needs at least 3",
            counts.len()
        )));
    }
    let mut actors: Vec<u32> = counts.keys().copied().collect();
    actors.shuffle(&mut rng::stream(&[purpose::SPLIT, seed]));
    let total = samples.len() as f64;
    let targets: Vec<f64> = ratios.iter().map(|r| r * total).collect();
    let mut got = [0usize; 3];
    let mut members: [Vec<u32>; 3] = Default::default();
    for (i, &a) in actors.iter().enumerate() {
        let remaining = actors.len() - i;
        let empty: Vec<usize> = (0..3).filter(|&s| members[s].is_empty()).collect();
        let s = if !empty.is_empty() && remaining <= empty.len() {
            *empty
                .iter()
                .max_by(|&&x, &&y| targets[x].total_cmp(&targets[y]).then(y.cmp(&x)))
                .unwrap()
        } else {
            (0..3)
                .max_by(|&x, &y| {
                    let dx = targets[x] - got[x] as f64;
                    let dy = targets[y] - got[y] as f64;
                    dx.total_cmp(&dy).then(y.cmp(&x))
                })
                .unwrap()
        };
        got[s] += counts[&a];
        members[s].push(a);
    }
    for m in members.iter_mut() {
        m.sort_unstable();
    }
    let [train_actors, val_actors, test_actors] = members;
    let split = SplitAssignment {
        seed,
        train_actors,
        val_actors,
        test_actors,
    };
    split.check_disjoint()?;
    Ok(split)
}

/// Per-epoch shuffled index batches; the last batch may be short.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(&[purpose::SHUFFLE, seed, epoch]));
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Hex digest of an epoch's batch order, for comparing data order across runs.
pub fn batch_order_hash(batches: &[Vec<usize>]) -> String {
    let mut h = Sha256::new();
    for b in batches {
        for &i in b {
            h.update((i as u64).to_le_bytes());
        }
        h.update(u64::MAX.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Synthetic corpus

pub const TOY_SECONDS: f64 = 2.0;
pub const TOY_CLIPS_PER_ACTOR: usize = 5;
const TOY_FIRST_ACTOR: u32 = 2001;

/// Generation recipe of one pseudo-emotion.
#[derive(Clone, Copy, Debug)]
pub struct ToyRecipe {
    pub f0: f64,
    pub am_rate: f64,
    pub noise: f64,
    /// Harmonic `k` has amplitude `k^-tilt`.
    pub tilt: f64,
}

pub fn toy_recipe(e: Emotion) -> ToyRecipe {
    let (f0, am_rate, noise, tilt) = match e {
        Emotion::Angry => (230.0, 7.0, 0.08, 0.6),
        Emotion::Disgust => (140.0, 3.0, 0.15, 1.2),
        Emotion::Fear => (320.0, 11.0, 0.05, 1.0),
        Emotion::Happy => (270.0, 4.5, 0.03, 0.8),
        Emotion::Neutral => (170.0, 0.0, 0.02, 1.5),
        Emotion::Sad => (115.0, 1.5, 0.06, 2.0),
    };
    ToyRecipe {
        f0,
        am_rate,
        noise,
        tilt,
    }
}

#[derive(Clone, Debug)]
pub struct LabelledWave {
    pub meta: SampleMeta,
    pub wave: Waveform,
}

fn sentence_code(i: usize) -> String {
    let a = (b'A' + (i / 26 % 26) as u8) as char;
    let b = (b'A' + (i % 26) as u8) as char;
    format!("T{a}{b}")
}

fn toy_actor_factor(seed: u64, actor: u32) -> f64 {
    rng::stream(&[purpose::TOY, seed, actor as u64, 0xac]).random_range(0.92..1.08)
}

fn synth_clip(recipe: ToyRecipe, actor_factor: f64, seed: u64, index: u64) -> Waveform {
    let mut r = rng::stream(&[purpose::TOY, seed, index]);
    let n = (TOY_SECONDS * CANONICAL_RATE as f64) as usize;
    let rate = CANONICAL_RATE as f64;
    let f0 = recipe.f0 * actor_factor * r.random_range(0.97..1.03);
    let am = if recipe.am_rate > 0.0 {
        recipe.am_rate * r.random_range(0.9..1.1)
    } else {
        0.0
    };
    let am_phase = r.random_range(0.0..std::f64::consts::TAU);
    let n_harm = 6;
    let phases: Vec<f64> = (0..n_harm).map(|_| r.random_range(0.0..std::f64::consts::TAU)).collect();
    let fade = (0.05 * rate) as usize;
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let mut s = 0.0;
            for (k, ph) in phases.iter().enumerate() {
                let h = (k + 1) as f64;
                if h * f0 < rate / 2.0 {
                    s += h.powf(-recipe.tilt) * (std::f64::consts::TAU * h * f0 * t + ph).sin();
                }
            }
            let env = if am > 0.0 {
                0.6 + 0.4 * (std::f64::consts::TAU * am * t + am_phase).sin()
            } else {
                1.0
            };
            let ramp = (i.min(n - 1 - i) as f64 / fade as f64).min(1.0);
            s * env * ramp
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for v in x.iter_mut() {
        let noise: f64 = r.sample(StandardNormal);
        *v = 0.5 * *v / peak + recipe.noise * noise;
    }
    audio_io::peak_normalize(&Waveform::new(x, CANONICAL_RATE))
}

fn toy_actor_slot(class: usize, j: usize, n_per_class: usize) -> usize {
    if n_per_class >= 3 * TOY_CLIPS_PER_ACTOR {
        j / TOY_CLIPS_PER_ACTOR
    } else {
        // (actor, j % 5) stays unique within a class because j < 15
        (class * n_per_class + j) % 3
    }
}

/// Six pseudo-emotion classes with `n_per_class` clips each, 2 s at 16 kHz.
/// Consecutive groups of five clips per class share a synthetic actor whose
/// voice shifts every fundamental by a common factor. Corpora too small for
/// three such groups deal their clips round-robin over three actors instead,
/// so a speaker-independent split always exists.
pub fn synthesize_toy_dataset(n_per_class: usize, seed: u64) -> Vec<LabelledWave> {
    let jobs: Vec<(Emotion, usize)> = Emotion::ALL
        .into_iter()
        .flat_map(|e| (0..n_per_class).map(move |j| (e, j)))
        .collect();
    jobs.into_par_iter()
        .enumerate()
        .map(|(index, (e, j))| {
            let actor = TOY_FIRST_ACTOR + toy_actor_slot(e.index(), j, n_per_class) as u32;
            let sentence = sentence_code(j % TOY_CLIPS_PER_ACTOR);
            let name = format!("{actor}_{sentence}_{}_XX.wav", e.code());
            let wave = synth_clip(toy_recipe(e), toy_actor_factor(seed, actor), seed, index as u64);
            LabelledWave {
                meta: SampleMeta {
                    path: PathBuf::from(name),
                    actor_id: actor,
                    sentence,
                    emotion: e,
                    intensity: "XX".into(),
                },
                wave,
            }
        })
        .collect()
}

/// Write toy clips as PCM16 WAVs under `dir`; returned metadata points at
/// the written files.
pub fn write_toy_corpus(dir: &Path, clips: &[LabelledWave]) -> Result<Vec<SampleMeta>> {
    fs::create_dir_all(dir)?;
    clips
        .par_iter()
        .map(|c| {
            let path = dir.join(&c.meta.path);
            audio_io::write_wav(&path, &c.wave)?;
            Ok(SampleMeta {
                path,
                ..c.meta.clone()
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Examples fed to the trainer

/// Indexed, labelled model inputs. `epoch` lets training sources vary their
/// augmentation per pass.
pub trait Examples: Sync {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> usize;
    fn input(&self, i: usize, epoch: usize) -> Result<Cow<'_, Tensor>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }
}

/// Precomputed inputs.
#[derive(Clone, Debug, Default)]
pub struct FixedExamples {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Examples for FixedExamples {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn input(&self, i: usize, _epoch: usize) -> Result<Cow<'_, Tensor>> {
        Ok(Cow::Borrowed(&self.inputs[i]))
    }
}

/// Canonical, peak-normalized audio held in memory or read on demand.
#[derive(Clone, Debug)]
pub enum AudioSource {
    Memory(Vec<Waveform>),
    Files { paths: Vec<PathBuf>, max_seconds: f64 },
}

impl AudioSource {
    pub fn len(&self) -> usize {
        match self {
            AudioSource::Memory(w) => w.len(),
            AudioSource::Files { paths, .. } => paths.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(&self, i: usize) -> Result<Cow<'_, Waveform>> {
        match self {
            AudioSource::Memory(w) => Ok(Cow::Borrowed(&w[i])),
            AudioSource::Files { paths, max_seconds } => {
                let w = audio_io::load_canonical(&paths[i], *max_seconds).map_err(|e| match e {
                    Error::Io(io) => Error::Manifest(format!("{}: {io}", paths[i].display())),
                    other => other,
                })?;
                Ok(Cow::Owned(audio_io::peak_normalize(&w)))
            }
        }
    }
}

/// Audio turned into model inputs on request. With an augmentation config
/// every request runs the augmentation pipeline seeded by (index, epoch);
/// without one the evaluation pipeline is used, and its inputs are
/// precomputed for in-memory audio or served from `cache` when given.
pub struct AudioExamples {
    source: AudioSource,
    labels: Vec<usize>,
    ids: Vec<String>,
    augment: Option<AugmentConfig>,
    featurizer: Featurizer,
    cache: Option<FeatureCache>,
    fixed: Option<Vec<Tensor>>,
}

impl AudioExamples {
    pub fn new(
        source: AudioSource,
        labels: Vec<usize>,
        ids: Vec<String>,
        augment: Option<AugmentConfig>,
        featurizer: Featurizer,
        cache: Option<FeatureCache>,
    ) -> Result<Self> {
        if labels.len() != source.len() || ids.len() != source.len() {
            return Err(Error::Shape(format!(
                "{} clips, {} labels, {} ids",
                source.len(),
                labels.len(),
                ids.len()
            )));
        }
        let augment = augment.filter(|a| !a.is_identity());
        let mut me = Self {
            source,
            labels,
            ids,
            augment,
            featurizer,
            cache,
            fixed: None,
        };
        if me.augment.is_none() && matches!(me.source, AudioSource::Memory(_)) {
            let fixed = (0..me.len())
                .into_par_iter()
                .map(|i| me.clean_input(i))
                .collect::<Result<Vec<_>>>()?;
            me.fixed = Some(fixed);
        }
        Ok(me)
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    fn clean_input(&self, i: usize) -> Result<Tensor> {
        if let Some(c) = &self.cache {
            if let Some(t) = c.get(&self.ids[i])? {
                return Ok(t);
            }
        }
        let t = self.featurizer.apply(self.source.load(i)?.as_ref())?;
        if let Some(c) = &self.cache {
            c.put(&self.ids[i], &t)?;
        }
        Ok(t)
    }
}

impl Examples for AudioExamples {
    fn len(&self) -> usize {
        self.source.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn input(&self, i: usize, epoch: usize) -> Result<Cow<'_, Tensor>> {
        if let Some(f) = &self.fixed {
            return Ok(Cow::Borrowed(&f[i]));
        }
        match &self.augment {
            Some(a) => {
                let w = augment_pipeline(self.source.load(i)?.as_ref(), a, i as u64, epoch as u64)?;
                Ok(Cow::Owned(self.featurizer.apply(&w)?))
            }
            None => Ok(Cow::Owned(self.clean_input(i)?)),
        }
    }
}

// ---------------------------------------------------------------------------
// Feature cache

pub const CACHE_ENV: &str = "SER_FORGE_CACHE";
const CACHE_MAGIC: &[u8; 8] = b"SERFFEAT";

/// On-disk store of un-augmented model inputs keyed by pipeline hash and
/// sample id.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    root: PathBuf,
    key: String,
}

impl FeatureCache {
    /// `key` should identify everything that shapes the features (feature
    /// settings, input kind, clip length).
    pub fn new(root: impl Into<PathBuf>, key: impl Into<String>) -> Self {
        Self {
            root: root.into(),
            key: key.into(),
        }
    }

    /// Cache rooted at `$SER_FORGE_CACHE`, if set.
    pub fn from_env(key: impl Into<String>) -> Option<Self> {
        std::env::var_os(CACHE_ENV)
            .filter(|v| !v.is_empty())
            .map(|root| Self::new(PathBuf::from(root), key))
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(&self.key)
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir().join(format!("{id}.feat"))
    }

    pub fn get(&self, id: &str) -> Result<Option<Tensor>> {
        let p = self.path(id);
        if !p.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&p)?;
        decode_tensor(&bytes)
            .map(Some)
            .map_err(|e| Error::Serialization(format!("{}: {e}", p.display())))
    }

    pub fn put(&self, id: &str, t: &Tensor) -> Result<()> {
        fs::create_dir_all(self.dir())?;
        let tmp = self.path(&format!("{id}.tmp{}", std::process::id()));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode_tensor(t))?;
        drop(f);
        fs::rename(tmp, self.path(id))?;
        Ok(())
    }
}

fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = CACHE_MAGIC.to_vec();
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn decode_tensor(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let rest = bytes.strip_prefix(CACHE_MAGIC).ok_or("bad magic")?;
    let rank = u32::from_le_bytes(rest.get(..4).ok_or("truncated")?.try_into().unwrap()) as usize;
    let mut pos = 4;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = rest.get(pos..pos + 8).ok_or("truncated")?;
        shape.push(u64::from_le_bytes(d.try_into().unwrap()) as usize);
        pos += 8;
    }
    let n: usize = shape.iter().product();
    let payload = rest.get(pos..pos + 4 * n).ok_or("truncated payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&shape, data).map_err(|e| e.to_string())
}
