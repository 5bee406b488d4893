//! The work behind each subcommand, callable from tests as plain functions.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio_io::{self, Waveform, CANONICAL_RATE};
use crate::augment::{augment_pipeline, AugmentConfig};
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::dataset::{
    read_manifest, scan_directory, speaker_independent_split, synthesize_toy_dataset,
    write_manifest, write_toy_corpus, AudioExamples, AudioSource, Emotion, Examples, FeatureCache,
    SampleMeta, Split, SplitAssignment, DEFAULT_RATIOS,
};
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate, measure_inference, EvalReport, InferenceTiming};
use crate::heads::{HeadConfig, HeadKind};
use crate::models::{Featurizer, Model, ModelConfig};
use crate::train::{
    model_from_checkpoint, save_checkpoint, smoke_step, train, TrainHistory,
};

/// Knobs that change how a run executes but not what it computes.
#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Reports must be byte-reproducible: wall-clock timings go to
    /// `timing.json` instead of the report.
    pub deterministic: bool,
    pub timing_warmup: usize,
    pub timing_reps: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            deterministic: false,
            timing_warmup: 10,
            timing_reps: 100,
        }
    }
}

// ---------------------------------------------------------------------------
// Data

/// A corpus with its split. Toy clips live in memory; real clips are read
/// from disk on demand.
pub struct PreparedData {
    pub samples: Vec<SampleMeta>,
    pub split: SplitAssignment,
    memory: Option<Vec<Waveform>>,
    max_seconds: f64,
    /// Identifies the audio behind each sample id, for cache keys.
    pub source_key: String,
}

impl PreparedData {
    pub fn load(ds: &DatasetConfig, seed: u64) -> Result<Self> {
        ds.validate()?;
        if let Some(n) = ds.toy_per_class {
            let clips = synthesize_toy_dataset(n, seed);
            let samples: Vec<SampleMeta> = clips.iter().map(|c| c.meta.clone()).collect();
            let split = speaker_independent_split(&samples, ds.split_ratios, seed)?;
            return Ok(Self {
                samples,
                split,
                memory: Some(clips.into_iter().map(|c| c.wave).collect()),
                max_seconds: ds.max_seconds,
                source_key: format!("toy{n}-seed{seed}"),
            });
        }
        let samples = if let Some(dir) = &ds.crema_dir {
            let scan = scan_directory(dir)?;
            for (p, why) in &scan.rejected {
                log::warn!("skipping {}: {why}", p.display());
            }
            scan.samples
        } else {
            let path = ds.manifest.as_ref().expect("validated source");
            read_manifest(path)?
        };
        if samples.is_empty() {
            return Err(Error::Manifest("no usable WAV files".into()));
        }
        let split = match &ds.split_file {
            Some(p) => {
                let s = SplitAssignment::load(p)?;
                let missing = samples.iter().find(|m| s.split_of(m.actor_id).is_none());
                if let Some(m) = missing {
                    return Err(Error::Split(format!(
                        "actor {} is in no split of {}",
                        m.actor_id,
                        p.display()
                    )));
                }
                s
            }
            None => speaker_independent_split(&samples, ds.split_ratios, seed)?,
        };
        Ok(Self {
            samples,
            split,
            memory: None,
            max_seconds: ds.max_seconds,
            source_key: format!("files-{}s", ds.max_seconds),
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        let actors: std::collections::BTreeSet<u32> =
            self.split.actors(split).iter().copied().collect();
        (0..self.samples.len())
            .filter(|&i| actors.contains(&self.samples[i].actor_id))
            .collect()
    }

    /// Model inputs for one split; `augment` only applies to training data.
    pub fn examples(
        &self,
        split: Split,
        featurizer: &Featurizer,
        augment: Option<&AugmentConfig>,
        cache: Option<FeatureCache>,
    ) -> Result<AudioExamples> {
        let idx = self.indices(split);
        let source = match &self.memory {
            Some(w) => AudioSource::Memory(idx.iter().map(|&i| w[i].clone()).collect()),
            None => AudioSource::Files {
                paths: idx.iter().map(|&i| self.samples[i].path.clone()).collect(),
                max_seconds: self.max_seconds,
            },
        };
        AudioExamples::new(
            source,
            idx.iter().map(|&i| self.samples[i].label()).collect(),
            idx.iter().map(|&i| self.samples[i].id()).collect(),
            augment.cloned(),
            featurizer.clone(),
            cache,
        )
    }

    /// Feature-cache namespace for this corpus under `cfg`'s input pipeline.
    pub fn cache_key(&self, cfg: &ExperimentConfig) -> String {
        format!(
            "{}-{}-{}",
            cfg.model.input_kind().name(),
            cfg.features.hash(),
            self.source_key
        )
    }
}

// ---------------------------------------------------------------------------
// prepare

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub n_samples: usize,
    pub rejected: Vec<String>,
    pub counts: BTreeMap<String, BTreeMap<Emotion, usize>>,
    pub actors: BTreeMap<String, usize>,
}

impl fmt::Display for PrepareSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} clips, {} rejected", self.n_samples, self.rejected.len())?;
        write!(f, "{:<8}{:>7}", "split", "actors")?;
        for e in Emotion::ALL {
            write!(f, "{:>9}", e.name())?;
        }
        writeln!(f, "{:>8}", "total")?;
        for s in Split::ALL {
            let row = &self.counts[s.name()];
            write!(f, "{:<8}{:>7}", s.name(), self.actors[s.name()])?;
            for e in Emotion::ALL {
                write!(f, "{:>9}", row.get(&e).copied().unwrap_or(0))?;
            }
            writeln!(f, "{:>8}", row.values().sum::<usize>())?;
        }
        Ok(())
    }
}

pub enum PrepareSource<'a> {
    Directory(&'a Path),
    Toy { n_per_class: usize },
}

/// Write `manifest.csv` and `split.json` under `out`. Toy corpora are also
/// written as WAV files under `out/wav`.
pub fn cmd_prepare(source: PrepareSource, out: &Path, seed: u64) -> Result<PrepareSummary> {
    fs::create_dir_all(out)?;
    let (samples, rejected) = match source {
        PrepareSource::Directory(dir) => {
            let scan = scan_directory(dir)?;
            let rejected: Vec<String> = scan
                .rejected
                .iter()
                .map(|(p, why)| format!("{}: {why}", p.display()))
                .collect();
            if scan.samples.is_empty() {
                return Err(Error::Manifest(format!(
                    "no valid WAV files under {} ({} rejected)",
                    dir.display(),
                    rejected.len()
                )));
            }
            (scan.samples, rejected)
        }
        PrepareSource::Toy { n_per_class } => {
            if n_per_class == 0 {
                return Err(Error::config("toy", "clips per class must be ≥ 1"));
            }
            let clips = synthesize_toy_dataset(n_per_class, seed);
            (write_toy_corpus(&out.join("wav"), &clips)?, Vec::new())
        }
    };
    let split = speaker_independent_split(&samples, DEFAULT_RATIOS, seed)?;
    write_manifest(&out.join("manifest.csv"), &samples)?;
    split.save(&out.join("split.json"))?;
    let mut counts = BTreeMap::new();
    let mut actors = BTreeMap::new();
    for s in Split::ALL {
        let mut row: BTreeMap<Emotion, usize> = Emotion::ALL.iter().map(|&e| (e, 0)).collect();
        for m in split.select(&samples, s) {
            *row.get_mut(&m.emotion).expect("all emotions present") += 1;
        }
        counts.insert(s.name().to_string(), row);
        actors.insert(s.name().to_string(), split.actors(s).len());
    }
    Ok(PrepareSummary {
        n_samples: samples.len(),
        rejected,
        counts,
        actors,
    })
}

// ---------------------------------------------------------------------------
// train / ablate

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub history: TrainHistory,
    pub report: EvalReport,
    pub timing: Option<InferenceTiming>,
    pub model: Model,
}

fn cache_for(cfg: &ExperimentConfig, data: &PreparedData) -> Option<FeatureCache> {
    FeatureCache::from_env(data.cache_key(cfg))
}

/// Train, evaluate the best checkpoint on the test split, and write the run
/// directory: `config.toml`, `split.json`, `history.{csv,json}`,
/// `checkpoint.bin` and the report files.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    let mut model = Model::init(cfg.model_spec(), cfg.seed)?;
    let featurizer = model.featurizer()?;
    let cache = cache_for(cfg, data);
    let train_ex = data.examples(Split::Train, &featurizer, Some(&cfg.augment), cache.clone())?;
    let val_ex = data.examples(Split::Val, &featurizer, None, cache.clone())?;
    let test_ex = data.examples(Split::Test, &featurizer, None, cache)?;
    log::info!(
        "{}: {} train / {} val / {} test, {} parameters",
        cfg.model.name(),
        train_ex.len(),
        val_ex.len(),
        test_ex.len(),
        model.num_params()
    );

    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    data.split.save(&dir.join("split.json"))?;

    let history = train(&mut model, &train_ex, &val_ex, &cfg.train)?;
    history.write_csv(&dir.join("history.csv"))?;
    history.write_json(&dir.join("history.json"))?;
    save_checkpoint(
        &dir.join("checkpoint.bin"),
        &model,
        serde_json::json!({ "experiment": cfg }),
    )?;

    let mut report = evaluate(&model, &test_ex, Split::Test.name(), &cfg.hash())?;
    let timing = time_model(&model, &test_ex, opts)?;
    attach_timing(&dir, &mut report, timing, opts)?;
    emit_report(&dir, std::slice::from_ref(&report))?;
    Ok(RunOutcome {
        run_dir: dir,
        history,
        report,
        timing,
        model,
    })
}

fn time_model(
    model: &Model,
    data: &dyn Examples,
    opts: &RunOptions,
) -> Result<Option<InferenceTiming>> {
    if opts.timing_reps == 0 || data.is_empty() {
        return Ok(None);
    }
    let inputs = (0..data.len().min(8))
        .map(|i| data.input(i, 0).map(|c| c.into_owned()))
        .collect::<Result<Vec<_>>>()?;
    measure_inference(model, &inputs, opts.timing_warmup, opts.timing_reps).map(Some)
}

fn attach_timing(
    dir: &Path,
    report: &mut EvalReport,
    timing: Option<InferenceTiming>,
    opts: &RunOptions,
) -> Result<()> {
    if opts.deterministic {
        if let Some(t) = timing {
            fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&t)?)?;
        }
    } else {
        report.inference = timing;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DryRunSummary {
    pub n_params: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Validate the config, build the model and run one forward/backward pass.
pub fn cmd_dry_run(cfg: &ExperimentConfig) -> Result<DryRunSummary> {
    let data = PreparedData::load(&cfg.dataset, cfg.seed)?;
    let model = Model::init(cfg.model_spec(), cfg.seed)?;
    let featurizer = model.featurizer()?;
    let ex = data.examples(Split::Train, &featurizer, Some(&cfg.augment), None)?;
    let (loss, grad_norm) = smoke_step(&model, &ex, cfg.seed)?;
    Ok(DryRunSummary {
        n_params: model.num_params(),
        loss,
        grad_norm,
    })
}

pub fn cmd_train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let data = PreparedData::load(&cfg.dataset, cfg.seed)?;
    run_experiment(cfg, &data, opts)
}

pub struct AblationOutcome {
    pub runs: Vec<RunOutcome>,
    pub reports: Vec<EvalReport>,
}

fn head_dir_name(kind: HeadKind) -> &'static str {
    match kind {
        HeadKind::Linear => "head_linear",
        HeadKind::Mlp => "head_mlp",
        HeadKind::AttentivePool => "head_attentive_pool",
    }
}

/// Train the patch transformer once per head kind with identical data,
/// seeds and settings, then write a combined report to `output_dir`.
pub fn cmd_ablate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<AblationOutcome> {
    if !matches!(cfg.model, ModelConfig::PatchTransformer(_)) {
        return Err(Error::config(
            "model.family",
            format!("head ablation needs patch_transformer, got {}", cfg.model.name()),
        ));
    }
    let data = PreparedData::load(&cfg.dataset, cfg.seed)?;
    let mut runs = Vec::new();
    for kind in HeadKind::ALL {
        let mut c = cfg.clone();
        c.head = HeadConfig {
            kind,
            d_in: None,
            ..cfg.head.clone()
        };
        c.output_dir = cfg.output_dir.join(head_dir_name(kind));
        let c = c.resolve()?;
        log::info!("ablation: {} head", kind.label());
        runs.push(run_experiment(&c, &data, opts)?);
    }
    let hashes: Vec<Vec<&str>> = runs
        .iter()
        .map(|r| r.history.epochs.iter().map(|e| e.batch_hash.as_str()).collect())
        .collect();
    let shortest = hashes.iter().map(Vec::len).min().unwrap_or(0);
    let same_order = hashes.iter().all(|h| h[..shortest] == hashes[0][..shortest]);
    if !same_order {
        return Err(Error::Training(
            "head runs saw different batch orders despite equal seeds".into(),
        ));
    }
    let reports: Vec<EvalReport> = runs
        .iter()
        .map(|r| {
            let mut rep = r.report.clone();
            rep.notes = format!(
                "best epoch {}; batch order {}",
                r.history.best_epoch,
                r.history.epochs.first().map_or("-", |e| e.batch_hash.as_str())
            );
            rep
        })
        .collect();
    emit_report(&cfg.output_dir, &reports)?;
    Ok(AblationOutcome { runs, reports })
}

// ---------------------------------------------------------------------------
// eval / featurize / augment-preview

/// Evaluate a checkpoint on one split of the corpus it was trained with.
pub fn cmd_eval(
    checkpoint: &Path,
    split: Split,
    out: Option<&Path>,
    opts: &RunOptions,
) -> Result<EvalReport> {
    let (model, meta) = model_from_checkpoint(checkpoint)?;
    let cfg_value = meta.extra.get("experiment").cloned().ok_or_else(|| {
        Error::Checkpoint(format!(
            "{} carries no experiment config",
            checkpoint.display()
        ))
    })?;
    let cfg: ExperimentConfig = serde_json::from_value(cfg_value)?;
    let data = PreparedData::load(&cfg.dataset, cfg.seed)?;
    let featurizer = model.featurizer()?;
    let ex = data.examples(split, &featurizer, None, cache_for(&cfg, &data))?;
    let mut report = evaluate(&model, &ex, split.name(), &cfg.hash())?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{}", split.name())),
    };
    fs::create_dir_all(&dir)?;
    let timing = time_model(&model, &ex, opts)?;
    attach_timing(&dir, &mut report, timing, opts)?;
    emit_report(&dir, std::slice::from_ref(&report))?;
    Ok(report)
}

fn wav_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let pattern = input.join("**").join("*.wav");
        let mut v: Vec<PathBuf> = glob::glob(&pattern.to_string_lossy())
            .map_err(|e| Error::config("in", e.to_string()))?
            .filter_map(|p| p.ok())
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Error::Manifest(format!("no WAV files under {}", input.display())));
        }
        Ok(v)
    } else {
        Ok(vec![input.to_path_buf()])
    }
}

/// Write each input WAV's model input as `<stem>.csv` (one row per frame,
/// or a single row of samples for waveform models). Returns files written.
pub fn cmd_featurize(input: &Path, out: &Path, cfg: &ExperimentConfig) -> Result<usize> {
    let featurizer = Featurizer::new(&cfg.model_spec().resolve()?)?;
    fs::create_dir_all(out)?;
    let files = wav_inputs(input)?;
    for f in &files {
        let w = audio_io::peak_normalize(&audio_io::load_canonical(f, cfg.dataset.max_seconds)?);
        let t = featurizer.apply(&w)?;
        let cols = *t.shape().last().unwrap_or(&1);
        let stem = f.file_stem().map_or("clip".into(), |s| s.to_string_lossy().into_owned());
        let mut wtr = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(out.join(format!("{stem}.csv")))?;
        for row in t.data().chunks(cols.max(1)) {
            wtr.write_record(row.iter().map(|v| (*v as f32).to_string()))?;
        }
        wtr.flush()?;
    }
    Ok(files.len())
}

/// Fill a feature cache rooted at `out` with the un-augmented inputs of
/// every sample in `cfg`'s corpus. Pointing `SER_FORGE_CACHE` at `out`
/// afterwards makes training read them instead of recomputing.
pub fn cmd_featurize_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<usize> {
    let data = PreparedData::load(&cfg.dataset, cfg.seed)?;
    let featurizer = Featurizer::new(&cfg.model_spec().resolve()?)?;
    let cache = FeatureCache::new(out, data.cache_key(cfg));
    let mut n = 0;
    for s in Split::ALL {
        let ex = data.examples(s, &featurizer, None, Some(cache.clone()))?;
        for i in 0..ex.len() {
            let t = ex.input(i, 0)?;
            if cache.get(ex.id(i))?.is_none() {
                cache.put(ex.id(i), &t)?;
            }
            n += 1;
        }
    }
    Ok(n)
}

/// Write the augmented version of `input` for listening. The clip is
/// resampled to 16 kHz but not padded.
pub fn cmd_augment_preview(
    input: &Path,
    out: &Path,
    seed: u64,
    epoch: u64,
    augment: &AugmentConfig,
) -> Result<()> {
    let w = audio_io::resample(&audio_io::read_wav(input)?, CANONICAL_RATE)?;
    let cfg = AugmentConfig {
        seed,
        ..augment.clone()
    };
    cfg.validate()?;
    let a = augment_pipeline(&w, &cfg, 0, epoch)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    audio_io::write_wav(out, &a)
}
