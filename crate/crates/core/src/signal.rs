//! Magnitude mGRE signal model `s(t) = S0 exp(-R2* t) |F(t)|`, its
//! derivatives, the complex form, and a sinc surrogate for `|F(t)|`.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{Dims, EchoStack, FMap, ParamMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelParams {
    pub s0: f64,
    /// 1/ms
    pub r2star: f64,
    /// rad/ms; only the complex model uses it.
    pub omega: f64,
}

impl VoxelParams {
    pub fn new(s0: f64, r2star: f64) -> Self {
        Self {
            s0,
            r2star,
            omega: 0.0,
        }
    }
}

fn check_lengths(times: &[f64], other: usize) -> Result<()> {
    if times.len() != other {
        return Err(Error::LengthMismatch {
            what: "f",
            expected: times.len(),
            found: other,
        });
    }
    Ok(())
}

/// Non-allocating form of [`forward_magnitude`]; lengths must already agree.
#[inline]
pub fn forward_into(s0: f64, r2star: f64, times: &[f64], f: &[f64], out: &mut [f64]) {
    for ((o, t), fv) in out.iter_mut().zip(times).zip(f) {
        *o = s0 * (-r2star * t).exp() * fv;
    }
}

pub fn forward_magnitude(params: &VoxelParams, echo_times_ms: &[f64], f: &[f64]) -> Result<Vec<f64>> {
    check_lengths(echo_times_ms, f.len())?;
    let mut out = vec![0.0; f.len()];
    forward_into(params.s0, params.r2star, echo_times_ms, f, &mut out);
    Ok(out)
}

/// Partial derivatives `(ds/dS0, ds/dR2*)` for every echo.
pub fn jacobian_voxel(params: &VoxelParams, echo_times_ms: &[f64], f: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_lengths(echo_times_ms, f.len())?;
    Ok(echo_times_ms
        .iter()
        .zip(f)
        .map(|(t, fv)| {
            let d_s0 = (-params.r2star * t).exp() * fv;
            (d_s0, -t * params.s0 * d_s0)
        })
        .collect())
}

pub fn forward_complex(params: &VoxelParams, echo_times_ms: &[f64], f_complex: &[Complex64]) -> Result<Vec<Complex64>> {
    check_lengths(echo_times_ms, f_complex.len())?;
    Ok(echo_times_ms
        .iter()
        .zip(f_complex)
        .map(|(t, fv)| {
            let decay = params.s0 * (-params.r2star * t).exp();
            Complex64::from_polar(decay, -params.omega * t) * fv
        })
        .collect())
}

/// Apply the magnitude model to every voxel. Voxels with `S0 = 0` (including
/// everything outside the map's mask) produce a zero signal.
pub fn forward_magnitude_volume(pmap: &ParamMap, fmap: &FMap, echo_times_ms: &[f64]) -> Result<EchoStack> {
    let dims = pmap.dims();
    if fmap.dims() != dims {
        return Err(Error::DimensionMismatch(format!(
            "param map {:?} vs fmap {:?}",
            dims.as_array(),
            fmap.dims().as_array()
        )));
    }
    if fmap.n_echoes() != echo_times_ms.len() {
        return Err(Error::LengthMismatch {
            what: "fmap echoes",
            expected: echo_times_ms.len(),
            found: fmap.n_echoes(),
        });
    }
    let n = dims.voxels();
    let mut data = vec![0.0f32; n * echo_times_ms.len()];
    data.par_chunks_mut(n).enumerate().for_each(|(e, echo)| {
        let t = echo_times_ms[e];
        let fv = &fmap.values()[e * n..(e + 1) * n];
        for (i, out) in echo.iter_mut().enumerate() {
            let s0 = pmap.s0()[i] as f64;
            if s0 == 0.0 {
                continue;
            }
            let r2 = pmap.r2star()[i] as f64;
            *out = (s0 * (-r2 * t).exp() * fv[i] as f64) as f32;
        }
    });
    EchoStack::new(dims, echo_times_ms.to_vec(), data)
}

/// Per-voxel through-plane dephasing rate (1/ms) driving the sinc surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct InhomogeneityField {
    pub dims: Dims,
    pub g: Vec<f64>,
}

impl InhomogeneityField {
    pub fn new(dims: Dims, g: Vec<f64>) -> Result<Self> {
        if g.len() != dims.voxels() {
            return Err(Error::LengthMismatch {
                what: "g",
                expected: dims.voxels(),
                found: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invariant("g must be finite and >= 0".into()));
        }
        Ok(Self { dims, g })
    }

    pub fn uniform(dims: Dims, g: f64) -> Result<Self> {
        Self::new(dims, vec![g; dims.voxels()])
    }
}

pub fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-8 {
        1.0 - u * u / 6.0
    } else {
        u.sin() / u
    }
}

/// `|sinc(g t)|` per echo, followed by a running minimum across echoes so the
/// factor never rebounds on a side lobe.
pub fn make_fmap_sinc(field: &InhomogeneityField, echo_times_ms: &[f64]) -> Result<FMap> {
    let dims = field.dims;
    let n = dims.voxels();
    let mut values = vec![0.0f32; n * echo_times_ms.len()];
    for (i, g) in field.g.iter().enumerate() {
        let mut running = 1.0f64;
        for (e, t) in echo_times_ms.iter().enumerate() {
            running = running.min(sinc(g * t).abs());
            values[e * n + i] = running.clamp(0.0, 1.0) as f32;
        }
    }
    FMap::new(dims, echo_times_ms.to_vec(), values)
}
