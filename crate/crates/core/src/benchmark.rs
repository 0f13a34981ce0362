//! Relative-error tables over the test split and wall-clock comparisons.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, ManifestEntry, Split, Subject};
use crate::error::{Error, Result};
use crate::estimator::Estimator;
use crate::metrics::{central_slice_range, slice_relative_error};
use crate::volume::{EchoStack, FMap, Mask, ParamMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReRow {
    pub method: String,
    pub subject: String,
    /// `inf` denotes the noiseless stack.
    pub snr: f64,
    pub slice_lo: usize,
    pub slice_hi: usize,
    /// Mean of the slice-wise R2* relative errors in `[slice_lo, slice_hi)`.
    pub re_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReReport {
    pub methods: Vec<String>,
    pub snrs: Vec<f64>,
    pub rows: Vec<ReRow>,
    pub slice_rule: String,
}

impl ReReport {
    /// Mean over subjects for one table cell.
    pub fn mean(&self, method: &str, snr: f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && same_snr(r.snr, snr))
            .map(|r| r.re_percent)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,subject,snr,slice_lo,slice_hi,re_percent\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6}",
                r.method,
                r.subject,
                snr_label(r.snr),
                r.slice_lo,
                r.slice_hi,
                r.re_percent
            );
        }
        out
    }

    /// Methods as rows, SNR sets as columns.
    pub fn to_text_table(&self) -> String {
        let width = self.methods.iter().map(String::len).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}", "Method");
        for s in &self.snrs {
            let _ = write!(out, " | {:>9}", format!("SNR={}", snr_label(*s)));
        }
        out.push('\n');
        out.push_str(&"-".repeat(width + 12 * self.snrs.len()));
        out.push('\n');
        for m in &self.methods {
            let _ = write!(out, "{m:<width$}");
            for s in &self.snrs {
                match self.mean(m, *s) {
                    Some(v) => {
                        let _ = write!(out, " | {:>8.2}%", v);
                    }
                    None => {
                        let _ = write!(out, " | {:>9}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn same_snr(a: f64, b: f64) -> bool {
    a == b || (a.is_infinite() && b.is_infinite())
}

fn snr_label(s: f64) -> String {
    if s.is_infinite() {
        "inf".into()
    } else {
        format!("{s}")
    }
}

/// One method output, handed to the caller's sink (e.g. to render panels).
pub struct EstimateRecord<'a> {
    pub method: &'a str,
    pub entry: &'a ManifestEntry,
    pub subject: &'a Subject,
    pub snr: f64,
    pub estimate: &'a ParamMap,
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkOptions {
    /// Use this method's output as the reference instead of the phantom truth.
    pub reference_method: Option<String>,
}

fn stack_for(manifest: &DatasetManifest, entry: &ManifestEntry, subject: &Subject, snr: f64) -> Result<EchoStack> {
    if snr.is_infinite() {
        return Ok(subject.clean.clone());
    }
    let copy = entry.fixed_copy(snr).ok_or_else(|| {
        Error::Config(format!("subject {} has no fixed test set at SNR {snr}", entry.id))
    })?;
    manifest.load_copy(copy)
}

fn slice_mean(estimate: &ParamMap, reference: &ParamMap, mask: &Mask) -> Result<(usize, usize, f64)> {
    let (lo, hi) = central_slice_range(mask.dims().nz);
    let mut acc = Vec::new();
    for z in lo..hi {
        if let Some(re) = slice_relative_error(estimate, reference, mask, z)? {
            acc.push(re);
        }
    }
    if acc.is_empty() {
        return Err(Error::ZeroNormTruth);
    }
    Ok((lo, hi, acc.iter().sum::<f64>() / acc.len() as f64))
}

/// Mean slice-wise R2* RE of every method on every fixed-SNR test set.
pub fn benchmark_table(
    manifest: &DatasetManifest,
    methods: &[Box<dyn Estimator>],
    snrs: &[f64],
    opts: &BenchmarkOptions,
    mut sink: impl FnMut(&EstimateRecord<'_>),
) -> Result<ReReport> {
    let tests: Vec<&ManifestEntry> = manifest.split(Split::Test).collect();
    if tests.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    if let Some(r) = &opts.reference_method {
        if !methods.iter().any(|m| m.name() == r) {
            return Err(Error::Config(format!("reference method {r} is not among the methods")));
        }
    }
    let mut rows = Vec::new();
    for entry in tests {
        let subject = manifest.load_subject(entry)?;
        for &snr in snrs {
            let stack = stack_for(manifest, entry, &subject, snr)?;
            let estimates = methods
                .iter()
                .map(|m| m.estimate(&stack, Some(&subject.fmap), &subject.mask))
                .collect::<Result<Vec<_>>>()?;
            let reference = match &opts.reference_method {
                Some(r) => {
                    let k = methods.iter().position(|m| m.name() == r).unwrap();
                    estimates[k].clone()
                }
                None => subject.truth.clone(),
            };
            for (m, est) in methods.iter().zip(&estimates) {
                let (lo, hi, re) = slice_mean(est, &reference, &subject.mask)?;
                rows.push(ReRow {
                    method: m.name().to_string(),
                    subject: entry.id.clone(),
                    snr,
                    slice_lo: lo,
                    slice_hi: hi,
                    re_percent: re,
                });
                sink(&EstimateRecord {
                    method: m.name(),
                    entry,
                    subject: &subject,
                    snr,
                    estimate: est,
                });
            }
        }
    }
    Ok(ReReport {
        methods: methods.iter().map(|m| m.name().to_string()).collect(),
        snrs: snrs.to_vec(),
        rows,
        slice_rule: "half-open central window: lo = round(0.341 Z), len = min(30, round(Z/2))".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub nlls_seconds: f64,
    pub net_seconds: f64,
    pub speedup: f64,
}

/// Wall-clock a baseline and a learned estimator on identical inputs.
pub fn timing_benchmark(
    stack: &EchoStack,
    fmap: &FMap,
    mask: &Mask,
    baseline: &dyn Estimator,
    learned: &dyn Estimator,
) -> Result<Timing> {
    let t0 = Instant::now();
    baseline.estimate(stack, Some(fmap), mask)?;
    let nlls_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    learned.estimate(stack, None, mask)?;
    let net_seconds = t1.elapsed().as_secs_f64().max(1e-9);
    Ok(Timing {
        nlls_seconds,
        net_seconds,
        speedup: nlls_seconds / net_seconds,
    })
}
