//! Error metrics on parameter maps.

use crate::error::{Error, Result};
use crate::volume::{Mask, ParamMap, ScalarVolume};

fn check_dims(estimate: &ParamMap, truth: &ParamMap, mask: &Mask) -> Result<()> {
    if estimate.dims() != truth.dims() || truth.dims() != mask.dims() {
        return Err(Error::DimensionMismatch(format!(
            "estimate {:?}, truth {:?}, mask {:?}",
            estimate.dims().as_array(),
            truth.dims().as_array(),
            mask.dims().as_array()
        )));
    }
    Ok(())
}

/// `100 * ||a - b|| / ||b||` over the voxels selected by `select`.
fn re_over(est: &[f32], truth: &[f32], select: impl Iterator<Item = usize>) -> Result<f64> {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for i in select {
        let (e, t) = (est[i] as f64, truth[i] as f64);
        num += (e - t) * (e - t);
        den += t * t;
    }
    if den == 0.0 {
        return Err(Error::ZeroNormTruth);
    }
    Ok(100.0 * (num / den).sqrt())
}

/// Relative error of R2* inside `mask`, in percent.
pub fn relative_error(estimate: &ParamMap, truth: &ParamMap, mask: &Mask) -> Result<f64> {
    check_dims(estimate, truth, mask)?;
    re_over(estimate.r2star(), truth.r2star(), mask.indices().into_iter())
}

/// Relative error of S0 inside `mask`, in percent.
pub fn relative_error_s0(estimate: &ParamMap, truth: &ParamMap, mask: &Mask) -> Result<f64> {
    check_dims(estimate, truth, mask)?;
    re_over(estimate.s0(), truth.s0(), mask.indices().into_iter())
}

/// R2* relative error of one axial slice; `None` when the slice has no
/// masked truth signal.
pub fn slice_relative_error(estimate: &ParamMap, truth: &ParamMap, mask: &Mask, z: usize) -> Result<Option<f64>> {
    check_dims(estimate, truth, mask)?;
    let s = mask.dims().slice_len();
    let sel = (z * s..(z + 1) * s).filter(|i| mask.get(*i));
    match re_over(estimate.r2star(), truth.r2star(), sel) {
        Ok(v) => Ok(Some(v)),
        Err(Error::ZeroNormTruth) => Ok(None),
        Err(e) => Err(e),
    }
}

/// `|r2_est - r2_truth|` inside the truth mask, zero elsewhere.
pub fn difference_map(estimate: &ParamMap, truth: &ParamMap) -> Result<ScalarVolume> {
    if estimate.dims() != truth.dims() {
        return Err(Error::DimensionMismatch("estimate vs truth".into()));
    }
    let data = estimate
        .r2star()
        .iter()
        .zip(truth.r2star())
        .zip(truth.mask().values())
        .map(|((e, t), m)| if *m { (e - t).abs() } else { 0.0 })
        .collect();
    Ok(ScalarVolume {
        dims: truth.dims(),
        data,
    })
}

/// Half-open window `[lo, hi)` of central "brain" slices.
///
/// Reproduces the reference windows 25-55 of 72, 20-50 of 60 and 30-60 of 88
/// slices; other sizes scale the start (0.341 Z) and use a length of
/// `min(30, Z / 2)`.
pub fn central_slice_range(nz: usize) -> (usize, usize) {
    let lo = (0.341 * nz as f64).round() as usize;
    let len = ((nz as f64 / 2.0).round() as usize).clamp(1, 30.min(nz.max(1)));
    let lo = lo.min(nz.saturating_sub(len));
    (lo, (lo + len).min(nz))
}
