//! Histogram-based precision/recall evaluation.
//!
//! Probabilities are quantized once, to 256 levels (`floor(p * 255)`), and
//! every downstream number is derived from the resulting per-label histogram.
//! Stored prediction planes hold exactly these quantized levels, so
//! evaluating a saved prediction is lossless, and fixed-threshold metrics
//! agree with the corresponding point on the curve.
//!
//! The PR curve sweeps 257 thresholds: a sentinel above 1.0 (nothing
//! predicted positive; precision defined as 1.0) followed by 255/255 down to
//! 0/255. The area under the curve uses the average-precision step rule
//! `sum (R_i - R_{i-1}) * P_i` over descending thresholds, which makes a
//! constant predictor score exactly the positive prevalence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{Depth, Raster};

/// `floor(p * 255)` clamped into 0..=255; p = 1.0 maps to 255.
#[inline]
pub fn quantize_prob(p: f32) -> u8 {
    let b = (p as f64 * 255.0).floor();
    b.clamp(0.0, 255.0) as u8
}

/// Per-label histogram over the 256 quantized probability levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    /// counts[label][bin]
    counts: [Box<[u64; 256]>; 2],
}

impl Default for Histogram {
    fn default() -> Self {
        Self::new()
    }
}

impl Histogram {
    pub fn new() -> Self {
        Histogram {
            counts: [Box::new([0; 256]), Box::new([0; 256])],
        }
    }

    pub fn count(&self, label: bool, bin: u8) -> u64 {
        self.counts[label as usize][bin as usize]
    }

    pub fn add(&mut self, label: bool, bin: u8) {
        self.counts[label as usize][bin as usize] += 1;
    }

    pub fn total(&self, label: bool) -> u64 {
        self.counts[label as usize].iter().sum()
    }

    pub fn merge(&mut self, other: &Histogram) {
        for l in 0..2 {
            for b in 0..256 {
                self.counts[l][b] += other.counts[l][b];
            }
        }
    }

    /// Accumulates one plane of probabilities against a binary label plane.
    /// `probs` may be unit-float (quantized here) or byte (already levels).
    /// Pixels where `domain` is 0 are skipped when a domain mask is given.
    pub fn accumulate(
        &mut self,
        probs: &Raster,
        labels: &Raster,
        domain: Option<&Raster>,
    ) -> Result<()> {
        check_eval_planes(probs, labels, domain)?;
        let lab = labels.bytes()?;
        let dom = match domain {
            Some(d) => Some(d.bytes()?),
            None => None,
        };
        match probs.depth() {
            Depth::UnitFloat => {
                let p = probs.floats()?;
                for i in 0..p.len() {
                    if dom.map_or(true, |d| d[i] != 0) {
                        self.add(lab[i] != 0, quantize_prob(p[i]));
                    }
                }
            }
            Depth::Byte => {
                let p = probs.bytes()?;
                for i in 0..p.len() {
                    if dom.map_or(true, |d| d[i] != 0) {
                        self.add(lab[i] != 0, p[i]);
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_eval_planes(probs: &Raster, labels: &Raster, domain: Option<&Raster>) -> Result<()> {
    if probs.channels() != 1 || labels.channels() != 1 {
        return Err(Error::invalid("evaluation planes are single-channel"));
    }
    if probs.width() != labels.width() || probs.height() != labels.height() {
        return Err(Error::DimensionMismatch(format!(
            "probs {}x{} vs labels {}x{}",
            probs.width(),
            probs.height(),
            labels.width(),
            labels.height()
        )));
    }
    if labels.bytes()?.iter().any(|&v| v > 1) {
        return Err(Error::invalid("label plane contains values other than 0/1"));
    }
    if let Some(d) = domain {
        if d.channels() != 1 || d.width() != probs.width() || d.height() != probs.height() {
            return Err(Error::DimensionMismatch("domain mask shape".into()));
        }
    }
    Ok(())
}

/// Precision/recall curve over the 257-threshold sweep.
#[derive(Debug, Clone)]
pub struct PrCurve {
    /// Descending; `thresholds[0]` is the above-one sentinel (256/255).
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub auc: f64,
    pub positives: u64,
    pub negatives: u64,
}

impl PrCurve {
    pub fn from_histogram(h: &Histogram) -> Result<PrCurve> {
        let pos = h.total(true);
        let neg = h.total(false);
        if pos == 0 {
            return Err(Error::invalid("no positive pixels in evaluation set"));
        }
        let n = 257;
        let mut thresholds = Vec::with_capacity(n);
        let mut precision = Vec::with_capacity(n);
        let mut recall = Vec::with_capacity(n);
        let mut f1 = Vec::with_capacity(n);

        // Sentinel row: nothing predicted positive.
        thresholds.push(256.0 / 255.0);
        precision.push(1.0);
        recall.push(0.0);
        f1.push(0.0);

        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut auc = 0f64;
        let mut prev_recall = 0f64;
        for k in (0..=255u32).rev() {
            tp += h.count(true, k as u8);
            fp += h.count(false, k as u8);
            let p = if tp + fp == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let r = tp as f64 / pos as f64;
            thresholds.push(k as f64 / 255.0);
            precision.push(p);
            recall.push(r);
            f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
            auc += (r - prev_recall) * p;
            prev_recall = r;
        }
        Ok(PrCurve {
            thresholds,
            precision,
            recall,
            f1,
            auc,
            positives: pos,
            negatives: neg,
        })
    }

    /// Maximum F1 over the sweep and the threshold achieving it; ties break
    /// toward the higher threshold.
    pub fn max_f1(&self) -> (f64, f64) {
        let mut best = (self.f1[0], self.thresholds[0]);
        for i in 1..self.f1.len() {
            if self.f1[i] > best.0 {
                best = (self.f1[i], self.thresholds[i]);
            }
        }
        best
    }
}

/// Fixed-threshold confusion counts for one slide.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlideMetrics {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    /// None when tp + fn = 0 (no positive ground truth on the slide).
    pub sensitivity: Option<f64>,
    /// None when tn + fp = 0.
    pub specificity: Option<f64>,
    /// None when tp + fn = 0.
    pub f1: Option<f64>,
}

/// Smallest quantized level counted as positive for `threshold`.
fn threshold_bin(threshold: f64) -> u32 {
    if threshold <= 0.0 {
        return 0;
    }
    // Guard against the threshold itself being a rounded k/255 value.
    (threshold * 255.0 - 1e-9).ceil().max(0.0).min(256.0) as u32
}

pub fn slide_metrics(
    probs: &Raster,
    labels: &Raster,
    threshold: f64,
    domain: Option<&Raster>,
) -> Result<SlideMetrics> {
    let mut h = Histogram::new();
    h.accumulate(probs, labels, domain)?;
    let k0 = threshold_bin(threshold);
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for bin in 0..256u32 {
        let is_pos = bin >= k0;
        if is_pos {
            tp += h.count(true, bin as u8);
            fp += h.count(false, bin as u8);
        } else {
            fn_ += h.count(true, bin as u8);
            tn += h.count(false, bin as u8);
        }
    }
    let sensitivity = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    let specificity = (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64);
    let f1 = (tp + fn_ > 0).then(|| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
    Ok(SlideMetrics {
        tp,
        fp,
        tn,
        fn_,
        sensitivity,
        specificity,
        f1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxplotStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Five-number summary with quartiles by inclusive linear interpolation
/// (`h = p * (n - 1)` on the sorted values).
pub fn boxplot_stats(values: &[f64]) -> Result<BoxplotStats> {
    if values.is_empty() {
        return Err(Error::invalid("boxplot over empty set"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("boxplot over non-finite values"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let h = p * (v.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    Ok(BoxplotStats {
        min: v[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: v[v.len() - 1],
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Writes `pr_curve.csv`, `summary.json`, `per_slide.csv`, `boxplot.csv`.
pub fn write_reports(
    dir: &Path,
    curve: &PrCurve,
    per_slide: &[(String, SlideMetrics)],
    threshold: f64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut pr = String::from("threshold,precision,recall,f1\n");
    for i in 0..curve.thresholds.len() {
        pr.push_str(&format!(
            "{},{},{},{}\n",
            curve.thresholds[i], curve.precision[i], curve.recall[i], curve.f1[i]
        ));
    }
    let p = dir.join("pr_curve.csv");
    fs::write(&p, pr).map_err(|e| Error::io(&p, e))?;

    let (max_f1, max_f1_threshold) = curve.max_f1();
    let summary = serde_json::json!({
        "auc": curve.auc,
        "max_f1": max_f1,
        "max_f1_threshold": max_f1_threshold,
        "positives": curve.positives,
        "negatives": curve.negatives,
        "slide_threshold": threshold,
    });
    let p = dir.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(&summary).unwrap()).map_err(|e| Error::io(&p, e))?;

    let mut ps = String::from(
        "slide,sensitivity,specificity,f1,sensitivity_defined,specificity_defined,f1_defined\n",
    );
    for (id, m) in per_slide {
        ps.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            id,
            fmt_opt(m.sensitivity),
            fmt_opt(m.specificity),
            fmt_opt(m.f1),
            m.sensitivity.is_some(),
            m.specificity.is_some(),
            m.f1.is_some()
        ));
    }
    let p = dir.join("per_slide.csv");
    fs::write(&p, ps).map_err(|e| Error::io(&p, e))?;

    let mut bx = String::from("metric,min,q1,median,q3,max\n");
    let mut rows: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (_, m) in per_slide {
        if let Some(v) = m.sensitivity {
            rows.entry("sensitivity").or_default().push(v);
        }
        if let Some(v) = m.specificity {
            rows.entry("specificity").or_default().push(v);
        }
        if let Some(v) = m.f1 {
            rows.entry("f1").or_default().push(v);
        }
    }
    for metric in ["sensitivity", "specificity", "f1"] {
        if let Some(vals) = rows.get(metric) {
            let s = boxplot_stats(vals)?;
            bx.push_str(&format!(
                "{},{},{},{},{},{}\n",
                metric, s.min, s.q1, s.median, s.q3, s.max
            ));
        }
    }
    let p = dir.join("boxplot.csv");
    fs::write(&p, bx).map_err(|e| Error::io(&p, e))?;
    Ok(())
}
