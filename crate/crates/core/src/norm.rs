//! Per-volume intensity normalization by the masked echo-1 mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{EchoStack, Mask, ParamMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    norm_factor: f64,
}

impl NormRecord {
    pub fn new(norm_factor: f64) -> Result<Self> {
        if !(norm_factor.is_finite() && norm_factor > 0.0) {
            return Err(Error::Invariant(format!("norm_factor must be > 0, got {norm_factor}")));
        }
        Ok(Self { norm_factor })
    }

    pub fn identity() -> Self {
        Self { norm_factor: 1.0 }
    }

    pub fn factor(&self) -> f64 {
        self.norm_factor
    }
}

/// Mean of the first echo over masked voxels.
pub fn compute_norm_factor(stack: &EchoStack, mask: &Mask) -> Result<NormRecord> {
    if stack.dims() != mask.dims() {
        return Err(Error::DimensionMismatch("stack and mask".into()));
    }
    let echo1 = stack.echo(0);
    let (sum, count) = mask
        .values()
        .iter()
        .zip(echo1)
        .filter(|(m, _)| **m)
        .fold((0.0f64, 0usize), |(s, c), (_, v)| (s + *v as f64, c + 1));
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mean = sum / count as f64;
    if mean <= 0.0 {
        return Err(Error::ZeroNorm);
    }
    NormRecord::new(mean)
}

pub fn normalize(stack: &EchoStack, norm: &NormRecord) -> Result<EchoStack> {
    let f = norm.factor();
    stack.map(|v| (v as f64 / f) as f32)
}

/// Bring a normalized-scale S0 back to the raw intensity scale; R2* is untouched.
pub fn denormalize_s0(pmap: &ParamMap, norm: &NormRecord) -> Result<ParamMap> {
    pmap.with_s0_scaled(norm.factor())
}
