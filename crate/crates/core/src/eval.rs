//! Metrics, confusion matrices, latency and size measurement, and the
//! model/emotion/head comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Emotion, Examples};
use crate::error::{Error, Result};
use crate::heads::head_param_count;
use crate::models::Model;
use crate::nn::{ParamStore, Tensor};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax of `[B, K]` logits (a `[K]` vector is one row).
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&0);
    if k == 0 {
        return Vec::new();
    }
    logits.data().chunks(k).map(argmax).collect()
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_rows(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { counts })
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} true labels vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k || p >= k {
            return Err(Error::Label(format!("pair ({t}, {p}) outside [0, {k})")));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Per class; 0 when nothing was predicted as that class.
    pub precision: Vec<f64>,
    /// Per class recall, i.e. per-class accuracy; `None` for classes with
    /// no true samples.
    pub recall: Vec<Option<f64>>,
    pub f1: Vec<f64>,
}

/// Macro means run over classes that occur in the ground truth.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyEval("confusion matrix has no samples".into()));
    }
    let k = cm.k();
    let mut precision = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    let (mut sp, mut sr, mut sf, mut present) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..k {
        let tp = cm.counts[c][c] as f64;
        let col = cm.col_sum(c);
        let row = cm.row_sum(c);
        let p = if col == 0 { 0.0 } else { tp / col as f64 };
        let r = (row > 0).then(|| tp / row as f64);
        let rv = r.unwrap_or(0.0);
        let f = if p + rv == 0.0 { 0.0 } else { 2.0 * p * rv / (p + rv) };
        if row > 0 {
            sp += p;
            sr += rv;
            sf += f;
            present += 1;
        }
        precision.push(p);
        recall.push(r);
        f1.push(f);
    }
    let n = present as f64;
    Ok(Metrics {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: sp / n,
        macro_recall: sr / n,
        macro_f1: sf / n,
        precision,
        recall,
        f1,
    })
}

/// Eval-mode logits `[N, K]` for every example, computed in parallel.
pub fn batch_logits(model: &Model, data: &dyn Examples) -> Result<Tensor> {
    let rows = (0..data.len())
        .into_par_iter()
        .map(|i| model.logits(data.input(i, 0)?.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let k = rows.first().map_or(0, |r| r.len());
    let flat = rows.into_iter().flat_map(|r| r.into_data()).collect();
    Tensor::new(&[data.len(), k], flat)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceTiming {
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub reps: usize,
}

/// Median and interquartile range (linear interpolation between order
/// statistics).
pub fn summarize_timings(ms: &[f64]) -> Option<(f64, f64)> {
    if ms.is_empty() {
        return None;
    }
    let mut v = ms.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some((q(0.5), q(0.75) - q(0.25)))
}

/// Single-sample eval-mode forward latency on the calling thread.
pub fn measure_inference(
    model: &Model,
    inputs: &[Tensor],
    warmup: usize,
    reps: usize,
) -> Result<InferenceTiming> {
    if inputs.is_empty() || reps == 0 {
        return Err(Error::EmptyEval("no samples to time".into()));
    }
    for i in 0..warmup {
        model.logits(&inputs[i % inputs.len()])?;
    }
    let mut ms = Vec::with_capacity(reps);
    for i in 0..reps {
        let t = Instant::now();
        let z = model.logits(&inputs[i % inputs.len()])?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(z);
    }
    let (median_ms, iqr_ms) = summarize_timings(&ms).expect("reps > 0");
    Ok(InferenceTiming {
        median_ms,
        iqr_ms,
        reps,
    })
}

const BYTES_PER_PARAM: f64 = 4.0;

/// Float32 footprint in MiB.
pub fn model_size_mb(store: &ParamStore) -> f64 {
    store.num_scalars() as f64 * BYTES_PER_PARAM / (1u64 << 20) as f64
}

pub fn head_size_mb(store: &ParamStore) -> f64 {
    head_param_count(store) as f64 * BYTES_PER_PARAM / (1u64 << 20) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Row label, e.g. `patch_transformer+mlp`.
    pub label: String,
    pub model: String,
    pub head: String,
    pub split: String,
    pub n_samples: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Absent for emotions with no samples in the evaluated split.
    pub per_class_accuracy: BTreeMap<Emotion, Option<f64>>,
    pub cm: ConfusionMatrix,
    /// Left out of deterministic runs, whose reports must be reproducible.
    pub inference: Option<InferenceTiming>,
    pub model_size_mb: f64,
    pub head_size_mb: f64,
    pub n_params: u64,
    pub head_params: u64,
    pub config_hash: String,
    #[serde(default)]
    pub notes: String,
}

impl EvalReport {
    pub fn build(
        model: &Model,
        split: &str,
        truth: &[usize],
        pred: &[usize],
        config_hash: &str,
    ) -> Result<Self> {
        let cm = confusion(truth, pred, model.spec.head.n_classes)?;
        let m = metrics(&cm)?;
        let per_class_accuracy = Emotion::ALL
            .iter()
            .zip(m.recall.iter().chain(std::iter::repeat(&None)))
            .map(|(&e, &r)| (e, r))
            .collect();
        Ok(Self {
            label: format!("{}+{}", model.spec.model.name(), model.spec.head.kind.label()),
            model: model.spec.model.name().to_string(),
            head: model.spec.head.kind.label().to_string(),
            split: split.to_string(),
            n_samples: truth.len() as u64,
            accuracy: m.accuracy,
            macro_precision: m.macro_precision,
            macro_recall: m.macro_recall,
            macro_f1: m.macro_f1,
            per_class_accuracy,
            cm,
            inference: None,
            model_size_mb: model_size_mb(&model.store),
            head_size_mb: head_size_mb(&model.store),
            n_params: model.store.num_scalars() as u64,
            head_params: head_param_count(&model.store) as u64,
            config_hash: config_hash.to_string(),
            notes: String::new(),
        })
    }
}

/// Predict every example and build the report.
pub fn evaluate(
    model: &Model,
    data: &dyn Examples,
    split: &str,
    config_hash: &str,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyEval(format!("{split} split is empty")));
    }
    let logits = batch_logits(model, data)?;
    EvalReport::build(model, split, &data.labels(), &predict(&logits), config_hash)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn text_table(title: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = format!("{title}\n");
    out += &line(header.to_vec());
    out.push('\n');
    out += &"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1));
    out.push('\n');
    for r in rows {
        out += &line(r.iter().map(String::as_str).collect());
        out.push('\n');
    }
    out
}

/// Write `report.json`, `table1.csv` (model comparison), `table2.csv`
/// (per-emotion accuracy), `table3.csv` (head comparison),
/// `cm_<label>.csv` per report and a plain-text `tables.txt`.
pub fn emit_report(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::EmptyEval("no reports to emit".into()));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(reports)?)?;

    let h1 = ["model", "accuracy_pct", "f1_pct", "precision_pct", "recall_pct", "inference_ms", "size_mb", "head_size_mb"];
    let t1: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                pct(r.accuracy),
                pct(r.macro_f1),
                pct(r.macro_precision),
                pct(r.macro_recall),
                r.inference.map_or("-".into(), |t| format!("{:.2}", t.median_ms)),
                format!("{:.2}", r.model_size_mb),
                format!("{:.2}", r.head_size_mb),
            ]
        })
        .collect();
    write_csv(&dir.join("table1.csv"), &h1, &t1)?;

    let mut h2 = vec!["emotion".to_string()];
    h2.extend(reports.iter().map(|r| r.label.clone()));
    let t2: Vec<Vec<String>> = Emotion::ALL
        .iter()
        .map(|e| {
            let mut row = vec![e.name().to_string()];
            row.extend(reports.iter().map(|r| {
                r.per_class_accuracy
                    .get(e)
                    .copied()
                    .flatten()
                    .map_or("-".into(), pct)
            }));
            row
        })
        .collect();
    let h2r: Vec<&str> = h2.iter().map(String::as_str).collect();
    write_csv(&dir.join("table2.csv"), &h2r, &t2)?;

    let h3 = ["head", "accuracy_pct", "f1_pct", "head_params", "notes"];
    let t3: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.head.clone(),
                pct(r.accuracy),
                pct(r.macro_f1),
                r.head_params.to_string(),
                r.notes.clone(),
            ]
        })
        .collect();
    write_csv(&dir.join("table3.csv"), &h3, &t3)?;

    for r in reports {
        let k = r.cm.k();
        let mut header = vec!["true\\pred".to_string()];
        header.extend((0..k).map(|c| Emotion::from_index(c).map_or(c.to_string(), |e| e.name().into())));
        let rows: Vec<Vec<String>> = (0..k)
            .map(|t| {
                let mut row = vec![header[t + 1].clone()];
                row.extend(r.cm.counts[t].iter().map(u64::to_string));
                row
            })
            .collect();
        let hr: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&dir.join(format!("cm_{}.csv", safe_name(&r.label))), &hr, &rows)?;
    }

    let mut txt = String::new();
    let _ = writeln!(txt, "{}", text_table("Model comparison", &h1, &t1));
    let _ = writeln!(txt, "{}", text_table("Per-emotion accuracy (%)", &h2r, &t2));
    let _ = write!(txt, "{}", text_table("Classification heads", &h3, &t3));
    fs::write(dir.join("tables.txt"), txt)?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.9, 0.0, 0.0, 0.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0; 6]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn small_confusion() {
        let cm = confusion(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
        assert!(matches!(confusion(&[0, 2], &[0, 0], 2), Err(Error::Label(_))));
    }

    #[test]
    fn pinned_two_class_case() {
        let cm = ConfusionMatrix::from_rows(vec![vec![3, 1], vec![2, 4]]).unwrap();
        let m = metrics(&cm).unwrap();
        assert_eq!(m.accuracy, 0.7);
        assert!((m.precision[0] - 0.6).abs() < 1e-15 && (m.precision[1] - 0.8).abs() < 1e-15);
        assert_eq!(m.recall, vec![Some(0.75), Some(4.0 / 6.0)]);
        assert!((m.macro_precision - 0.7).abs() < 1e-15);
        assert!((m.macro_recall - 17.0 / 24.0).abs() < 1e-15);
        assert!((m.f1[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1[1] - 8.0 / 11.0).abs() < 1e-15);
        assert!((m.macro_f1 - 23.0 / 33.0).abs() < 1e-15);
    }

    #[test]
    fn empty_row_is_absent_and_empty_matrix_errors() {
        let cm = ConfusionMatrix::from_rows(vec![vec![2, 0], vec![0, 0]]).unwrap();
        let m = metrics(&cm).unwrap();
        assert_eq!(m.recall, vec![Some(1.0), None]);
        assert_eq!(m.macro_f1, 1.0);
        assert!(matches!(metrics(&ConfusionMatrix::zeros(3)), Err(Error::EmptyEval(_))));
    }

    #[test]
    fn timing_summary_resists_one_outlier() {
        let base: Vec<f64> = (0..100).map(|i| 5.0 + 0.01 * (i % 7) as f64).collect();
        let (m0, _) = summarize_timings(&base).unwrap();
        let mut hit = base.clone();
        hit[37] *= 10.0;
        let (m1, _) = summarize_timings(&hit).unwrap();
        assert!((m1 - m0).abs() / m0 <= 0.01);
        assert_eq!(summarize_timings(&[1.0, 2.0, 3.0, 4.0]).unwrap(), (2.5, 1.5));
    }

    #[test]
    fn megabyte_arithmetic() {
        let mut s = ParamStore::new();
        assert_eq!(model_size_mb(&s), 0.0);
        s.insert("w", Tensor::zeros(&[1024, 1024])).unwrap();
        assert_eq!(format!("{:.2}", model_size_mb(&s)), "4.00");
        s.set_all_trainable(false);
        assert_eq!(model_size_mb(&s), 4.0);
    }
}
