//! Classification and localization metrics, and aggregation over repeats.

use std::fmt::Write as _;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{batch_images, Dataset, Location};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::model::Model;
use crate::tensor::kernels;
use crate::tensor::Scalar;

/// Class index treated as positive (malignant).
pub const POSITIVE_CLASS: usize = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    /// One-vs-rest counts with [`POSITIVE_CLASS`] as positive.
    pub fn from_labels(predicted: &[usize], truth: &[usize]) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p == POSITIVE_CLASS, t == POSITIVE_CLASS) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Which metrics hit a zero denominator and were reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Degenerate {
    pub precision: bool,
    pub sensitivity: bool,
    pub specificity: bool,
    pub f1: bool,
}

impl Degenerate {
    pub fn any(&self) -> bool {
        self.precision || self.sensitivity || self.specificity || self.f1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub degenerate: Degenerate,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn classification_metrics(c: &ConfusionCounts) -> ClassificationMetrics {
    let (precision, dp) = ratio(c.tp, c.tp + c.fp);
    let (sensitivity, ds) = ratio(c.tp, c.tp + c.fn_);
    let (specificity, dsp) = ratio(c.tn, c.tn + c.fp);
    let (accuracy, _) = ratio(c.tp + c.tn, c.total());
    let denom = precision + sensitivity;
    let (f1, df) = if denom > 0.0 {
        (2.0 * precision * sensitivity / denom, false)
    } else {
        (0.0, true)
    };
    ClassificationMetrics {
        precision,
        sensitivity,
        specificity,
        f1,
        accuracy,
        degenerate: Degenerate {
            precision: dp,
            sensitivity: ds,
            specificity: dsp,
            f1: df,
        },
    }
}

/// Corner-aligned bilinear resize of one `h x w` plane.
pub fn upsample(values: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if h == out_h && w == out_w {
        return values.to_vec();
    }
    let rows = kernels::lerp_table(h, out_h);
    let cols = kernels::lerp_table(w, out_w);
    kernels::resize_forward(values, 1, h, w, &rows, &cols)
}

/// Upsamples an `s x s` probability map to `out_w x out_h`, then keeps `>= threshold`.
pub fn binarize_mask(probs: &[f64], s: usize, out_w: usize, out_h: usize, threshold: f64) -> Result<Mask> {
    if probs.len() != s * s {
        return Err(Error::Validation(format!(
            "mask of {} values is not {s}x{s}",
            probs.len()
        )));
    }
    let up = upsample(probs, s, s, out_h, out_w);
    Mask::new(out_w, out_h, up.iter().map(|&p| p >= threshold).collect())
}

/// Minimum rectangle holding the positive pixels, optionally of the largest
/// connected component only.
pub fn mask_to_bbox(mask: &Mask, largest_component: bool) -> Option<BBox> {
    if largest_component {
        mask.largest_component().bbox()
    } else {
        mask.bbox()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Jsi {
    pub value: f64,
    /// Both regions were empty; `value` is 1 by convention.
    pub both_empty: bool,
}

fn jsi_from(inter: usize, union: usize) -> Jsi {
    if union == 0 {
        Jsi {
            value: 1.0,
            both_empty: true,
        }
    } else {
        Jsi {
            value: inter as f64 / union as f64,
            both_empty: false,
        }
    }
}

pub fn jsi(a: &Mask, b: &Mask) -> Result<Jsi> {
    let (inter, union) = a.overlap(b)?;
    Ok(jsi_from(inter, union))
}

/// JSI of two (possibly absent) boxes over their rasterized pixel sets.
pub fn jsi_bbox(a: Option<&BBox>, b: Option<&BBox>) -> Jsi {
    let inter = match (a, b) {
        (Some(a), Some(b)) => a.intersection_area(b),
        _ => 0,
    };
    let union = a.map_or(0, BBox::area) + b.map_or(0, BBox::area) - inter;
    jsi_from(inter, union)
}

pub fn dice_from_jsi(j: f64) -> f64 {
    2.0 * j / (1.0 + j)
}

/// Mean and 95% t-interval half-width over repeats.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub half_width: f64,
    pub values: Vec<f64>,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Usage("cannot summarize zero runs".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let half_width = if n == 1 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map_err(|e| Error::Internal(format!("t distribution: {e}")))?
            .inverse_cdf(0.975);
        t * (var / n as f64).sqrt()
    };
    Ok(Summary {
        mean,
        half_width,
        values: values.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Compare boxes when the ground truth is a box.
    pub as_bbox: bool,
    pub largest_component: bool,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            as_bbox: false,
            largest_component: false,
            threads: 1,
        }
    }
}

/// Metrics of one model on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub counts: ConfusionCounts,
    pub classification: ClassificationMetrics,
    /// Mean JSI over located samples; `None` without a branch or located samples.
    pub jsi: Option<f64>,
    pub num_located: usize,
    /// Located samples where prediction and ground truth were both empty.
    pub both_empty: usize,
    pub predictions: Vec<usize>,
}

fn sample_jsi(probs: &[f64], s: usize, loc: &Location, w: usize, h: usize, opts: &EvalOptions) -> Result<Jsi> {
    let pred = binarize_mask(probs, s, w, h, 0.5)?;
    match loc {
        Location::BBox(gt) if opts.as_bbox => {
            Ok(jsi_bbox(mask_to_bbox(&pred, opts.largest_component).as_ref(), Some(gt)))
        }
        _ => {
            let pred = if opts.largest_component {
                pred.largest_component()
            } else {
                pred
            };
            jsi(&pred, &loc.to_mask(w, h))
        }
    }
}

/// Runs the model on every sample: argmax class, and the binarized,
/// upsampled mask scored against located samples.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset, opts: &EvalOptions) -> Result<RunMetrics> {
    if dataset.is_empty() {
        return Err(Error::Usage("evaluation dataset is empty".into()));
    }
    let size = model.config.fex.input_size;
    dataset.check_image_size(size)?;
    let s = model.config.fex.top_size();
    let channels = model.config.fex.in_channels;
    let n = dataset.len();
    let threads = opts.threads.clamp(1, n);
    let per = n.div_ceil(threads);
    let chunks: Vec<&[crate::data::Sample]> = dataset.samples.chunks(per).collect();
    let score = |chunk: &[crate::data::Sample]| -> Result<Vec<(usize, Option<Jsi>)>> {
        let refs: Vec<_> = chunk.iter().collect();
        let images = batch_images::<T>(&refs, channels)?;
        let preds = model.predict(&images, 16)?;
        chunk
            .iter()
            .zip(preds)
            .map(|(sample, p)| {
                let j = match (&p.mask, &sample.location) {
                    (Some(m), Some(loc)) => Some(sample_jsi(m, s, loc, size, size, opts)?),
                    _ => None,
                };
                Ok((p.class(), j))
            })
            .collect()
    };
    let results: Vec<_> = if chunks.len() == 1 {
        vec![score(chunks[0])?]
    } else {
        std::thread::scope(|sc| {
            let handles: Vec<_> = chunks.iter().map(|c| sc.spawn(|| score(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| Error::Internal("evaluation worker panicked".into()))?)
                .collect::<Result<Vec<_>>>()
        })?
    };
    let scored: Vec<_> = results.into_iter().flatten().collect();
    let predictions: Vec<usize> = scored.iter().map(|(c, _)| *c).collect();
    let truth: Vec<usize> = dataset.samples.iter().map(|s| s.class_label).collect();
    let counts = ConfusionCounts::from_labels(&predictions, &truth);
    let jsis: Vec<Jsi> = scored.iter().filter_map(|(_, j)| *j).collect();
    let jsi = (!jsis.is_empty()).then(|| jsis.iter().map(|j| j.value).sum::<f64>() / jsis.len() as f64);
    Ok(RunMetrics {
        counts,
        classification: classification_metrics(&counts),
        jsi,
        num_located: jsis.len(),
        both_empty: jsis.iter().filter(|j| j.both_empty).count(),
        predictions,
    })
}

/// Metrics aggregated over repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<(String, Summary)>,
    pub runs: usize,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn from_runs(runs: &[RunMetrics]) -> Result<Self> {
        let pick = |f: fn(&RunMetrics) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        let mut rows = vec![
            ("accuracy".to_string(), summarize(&pick(|r| r.classification.accuracy))?),
            ("precision".to_string(), summarize(&pick(|r| r.classification.precision))?),
            ("sensitivity".to_string(), summarize(&pick(|r| r.classification.sensitivity))?),
            ("specificity".to_string(), summarize(&pick(|r| r.classification.specificity))?),
            ("f1".to_string(), summarize(&pick(|r| r.classification.f1))?),
        ];
        let mut notes = Vec::new();
        if runs.iter().any(|r| r.classification.degenerate.any()) {
            notes.push("some classification metrics had zero denominators and were reported as 0".into());
        }
        let jsis: Option<Vec<f64>> = runs.iter().map(|r| r.jsi).collect();
        match jsis {
            Some(j) => {
                let dice: Vec<f64> = j.iter().map(|&v| dice_from_jsi(v)).collect();
                rows.push(("jsi".to_string(), summarize(&j)?));
                rows.push(("dice".to_string(), summarize(&dice)?));
                let empty: usize = runs.iter().map(|r| r.both_empty).sum();
                if empty > 0 {
                    notes.push(format!("{empty} located samples had empty prediction and ground truth (JSI 1)"));
                }
            }
            None => notes.push("JSI omitted: no localization branch or no located samples".into()),
        }
        Ok(EvalReport {
            rows,
            runs: runs.len(),
            notes,
        })
    }

    pub fn get(&self, metric: &str) -> Option<&Summary> {
        self.rows.iter().find(|(m, _)| m == metric).map(|(_, s)| s)
    }

    /// `metric,mean,ci95_half_width,run1,run2,...`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,mean,ci95_half_width");
        for i in 0..self.runs {
            let _ = write!(out, ",run{}", i + 1);
        }
        out.push('\n');
        for (name, s) in &self.rows {
            let _ = write!(out, "{name},{},{}", s.mean, s.half_width);
            for v in &s.values {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12} {:>10} {:>10}\n", "metric", "mean", "±95%");
        for (name, s) in &self.rows {
            let _ = writeln!(out, "{name:<12} {:>10.4} {:>10.4}", s.mean, s.half_width);
        }
        let _ = writeln!(out, "runs: {}", self.runs);
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}
