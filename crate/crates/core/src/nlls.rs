//! Voxel-wise nonlinear least-squares fitting of `(S0, R2*)`.
//!
//! Each voxel is initialized from a log-linear fit and refined with a
//! two-parameter Levenberg-Marquardt loop using Marquardt diagonal scaling.
//! Bounds `S0 >= 0`, `0 <= R2* <= r2_max` are enforced by projecting every
//! trial point.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{forward_into, VoxelParams};
use crate::volume::{EchoStack, FMap, Mask, ParamMap};

const USABLE_EPS: f64 = 1e-6;
const FALLBACK_R2: f64 = 0.02;
const LAMBDA_MAX: f64 = 1e16;
const LAMBDA_MIN: f64 = 1e-16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Stop once the relative decrease of the squared residual falls below this.
    pub grad_tol: f64,
    pub lm_lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Upper bound on R2*, 1/ms.
    pub r2_max: f64,
    /// Run exactly `max_iters` iterations per voxel, no early stopping.
    pub fixed_iters: bool,
    /// Worker threads for [`fit_volume`]; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 400,
            grad_tol: 1e-10,
            lm_lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            r2_max: 0.5,
            fixed_iters: false,
            workers: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        for (name, v) in [
            ("grad_tol", self.grad_tol),
            ("lm_lambda0", self.lm_lambda0),
            ("r2_max", self.r2_max),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if !(self.lambda_up > 1.0 && self.lambda_down > 0.0 && self.lambda_down < 1.0) {
            return Err(Error::Config("need lambda_up > 1 and 0 < lambda_down < 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }

    fn project(&self, s0: f64, r2: f64) -> (f64, f64) {
        (s0.max(0.0), r2.clamp(0.0, self.r2_max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLinearInit {
    pub params: VoxelParams,
    pub degenerate: bool,
}

/// Straight-line fit of `ln(s/f)` against echo time over echoes where both
/// signal and `f` exceed 1e-6.
pub fn init_loglinear(signal: &[f64], f: &[f64], echo_times_ms: &[f64], r2_max: f64) -> Result<LogLinearInit> {
    if signal.len() != echo_times_ms.len() || f.len() != echo_times_ms.len() {
        return Err(Error::LengthMismatch {
            what: "signal/f",
            expected: echo_times_ms.len(),
            found: signal.len().min(f.len()),
        });
    }
    let (mut n, mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((s, fv), t) in signal.iter().zip(f).zip(echo_times_ms) {
        if *s > USABLE_EPS && *fv > USABLE_EPS {
            let y = (s / fv).ln();
            n += 1.0;
            st += t;
            sy += y;
            stt += t * t;
            sty += t * y;
        }
    }
    let denom = n * stt - st * st;
    if n < 2.0 || denom <= 0.0 {
        let s0 = match (signal.first(), f.first()) {
            (Some(s), Some(fv)) if *fv > USABLE_EPS && *s > 0.0 => s / fv,
            _ => 0.0,
        };
        // With no signal at all R2* is unidentifiable; report the sentinel.
        let r2 = if s0 > 0.0 { FALLBACK_R2 } else { 0.0 };
        return Ok(LogLinearInit {
            params: VoxelParams::new(s0, r2),
            degenerate: true,
        });
    }
    let slope = (n * sty - st * sy) / denom;
    let intercept = (sy - slope * st) / n;
    Ok(LogLinearInit {
        params: VoxelParams::new(intercept.exp(), (-slope).clamp(0.0, r2_max)),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelFit {
    pub params: VoxelParams,
    /// Euclidean norm of the final residual vector.
    pub residual_norm: f64,
    pub iters: usize,
    pub degenerate: bool,
}

fn sq_cost(s0: f64, r2: f64, signal: &[f64], f: &[f64], times: &[f64], scratch: &mut [f64]) -> f64 {
    forward_into(s0, r2, times, f, scratch);
    scratch.iter().zip(signal).map(|(m, s)| (m - s) * (m - s)).sum()
}

pub fn fit_voxel(signal: &[f64], f: &[f64], echo_times_ms: &[f64], cfg: &FitConfig) -> Result<VoxelFit> {
    if signal.iter().chain(f).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let init = init_loglinear(signal, f, echo_times_ms, cfg.r2_max)?;
    if init.degenerate {
        return Ok(VoxelFit {
            params: init.params,
            residual_norm: signal.iter().map(|s| s * s).sum::<f64>().sqrt(),
            iters: 0,
            degenerate: true,
        });
    }

    let n = echo_times_ms.len();
    let mut scratch = vec![0.0; n];
    let (mut s0, mut r2) = cfg.project(init.params.s0, init.params.r2star);
    let mut cost = sq_cost(s0, r2, signal, f, echo_times_ms, &mut scratch);
    let mut lambda = cfg.lm_lambda0;
    let mut iters = 0;

    while iters < cfg.max_iters {
        iters += 1;
        // Normal equations at the current point.
        let (mut a11, mut a12, mut a22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let t = echo_times_ms[i];
            let d_s0 = (-r2 * t).exp() * f[i];
            let d_r2 = -t * s0 * d_s0;
            let res = s0 * d_s0 - signal[i];
            a11 += d_s0 * d_s0;
            a12 += d_s0 * d_r2;
            a22 += d_r2 * d_r2;
            g1 += d_s0 * res;
            g2 += d_r2 * res;
        }
        let m11 = a11 + lambda * a11.max(1e-12);
        let m22 = a22 + lambda * a22.max(1e-12);
        let det = m11 * m22 - a12 * a12;
        let accepted = if det > 0.0 && det.is_finite() {
            let step_s0 = -(m22 * g1 - a12 * g2) / det;
            let step_r2 = -(m11 * g2 - a12 * g1) / det;
            let (ts0, tr2) = cfg.project(s0 + step_s0, r2 + step_r2);
            let trial = sq_cost(ts0, tr2, signal, f, echo_times_ms, &mut scratch);
            if trial < cost {
                let rel = (cost - trial) / cost.max(f64::MIN_POSITIVE);
                s0 = ts0;
                r2 = tr2;
                cost = trial;
                lambda = (lambda * cfg.lambda_down).max(LAMBDA_MIN);
                Some(rel)
            } else {
                None
            }
        } else {
            None
        };
        match accepted {
            Some(rel) if !cfg.fixed_iters && (rel < cfg.grad_tol || cost == 0.0) => break,
            Some(_) => {}
            None => {
                lambda *= cfg.lambda_up;
                if lambda > LAMBDA_MAX {
                    if !cfg.fixed_iters {
                        break;
                    }
                    lambda = LAMBDA_MAX;
                }
            }
        }
    }

    Ok(VoxelFit {
        params: VoxelParams::new(s0, r2),
        residual_norm: cost.sqrt(),
        iters,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub pmap: ParamMap,
    pub residual_norm: Vec<f32>,
    pub iters_used: Vec<u32>,
    pub degenerate_voxels: usize,
}

/// Fit every masked voxel independently. Output does not depend on the
/// worker count.
pub fn fit_volume(stack: &EchoStack, fmap: &FMap, mask: &Mask, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let dims = stack.dims();
    if fmap.dims() != dims || mask.dims() != dims {
        return Err(Error::DimensionMismatch(format!(
            "stack {:?}, fmap {:?}, mask {:?}",
            dims.as_array(),
            fmap.dims().as_array(),
            mask.dims().as_array()
        )));
    }
    if fmap.n_echoes() != stack.n_echoes() {
        return Err(Error::LengthMismatch {
            what: "fmap echoes",
            expected: stack.n_echoes(),
            found: fmap.n_echoes(),
        });
    }
    let times = stack.echo_times_ms();
    let voxels = mask.indices();
    let run = || -> Result<Vec<VoxelFit>> {
        voxels
            .par_iter()
            .map(|&v| fit_voxel(&stack.voxel_signal(v), &fmap.voxel_values(v), times, cfg))
            .collect()
    };
    let fits = match cfg.workers {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run)?,
        None => run()?,
    };

    let n = dims.voxels();
    let (mut s0, mut r2) = (vec![0.0f32; n], vec![0.0f32; n]);
    let mut residual_norm = vec![0.0f32; n];
    let mut iters_used = vec![0u32; n];
    let mut degenerate_voxels = 0;
    for (&v, fit) in voxels.iter().zip(&fits) {
        s0[v] = fit.params.s0 as f32;
        r2[v] = fit.params.r2star as f32;
        residual_norm[v] = fit.residual_norm as f32;
        iters_used[v] = fit.iters as u32;
        degenerate_voxels += fit.degenerate as usize;
    }
    Ok(FitResult {
        pmap: ParamMap::new(s0, r2, mask.clone())?,
        residual_norm,
        iters_used,
        degenerate_voxels,
    })
}
