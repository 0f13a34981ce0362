//! In-memory volumetric containers.
//!
//! All 4-D arrays use the QVOL element order
//! `offset = ((e * Z + z) * Y + y) * X + x`, so every echo volume and every
//! axial slice of an echo is contiguous.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    /// Number of voxels in one 3-D volume.
    pub const fn voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Number of pixels in one axial slice.
    pub const fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::Invariant(format!("dims must be >= 1, got {:?}", self.as_array())));
        }
        Ok(())
    }
}

fn check_echo_times(times: &[f64], n_echoes: usize) -> Result<()> {
    if times.len() != n_echoes {
        return Err(Error::LengthMismatch {
            what: "echo_times_ms",
            expected: n_echoes,
            found: times.len(),
        });
    }
    if n_echoes == 0 {
        return Err(Error::Invariant("at least one echo required".into()));
    }
    if times.iter().any(|t| !t.is_finite() || *t <= 0.0) {
        return Err(Error::Invariant("echo times must be finite and > 0".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invariant("echo times must be strictly increasing".into()));
    }
    Ok(())
}

fn check_len(what: &'static str, data_len: usize, expected: usize) -> Result<()> {
    if data_len != expected {
        return Err(Error::LengthMismatch {
            what,
            expected,
            found: data_len,
        });
    }
    Ok(())
}

/// Magnitude multi-echo volume.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoStack {
    dims: Dims,
    echo_times_ms: Vec<f64>,
    data: Vec<f32>,
}

impl EchoStack {
    pub fn new(dims: Dims, echo_times_ms: Vec<f64>, data: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        check_echo_times(&echo_times_ms, echo_times_ms.len())?;
        check_len("mgre payload", data.len(), dims.voxels() * echo_times_ms.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if data.iter().any(|v| *v < 0.0) {
            return Err(Error::Invariant("magnitude values must be >= 0".into()));
        }
        Ok(Self {
            dims,
            echo_times_ms,
            data,
        })
    }

    pub fn zeros(dims: Dims, echo_times_ms: Vec<f64>) -> Result<Self> {
        let n = dims.voxels() * echo_times_ms.len();
        Self::new(dims, echo_times_ms, vec![0.0; n])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n_echoes(&self) -> usize {
        self.echo_times_ms.len()
    }

    pub fn echo_times_ms(&self) -> &[f64] {
        &self.echo_times_ms
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn echo(&self, e: usize) -> &[f32] {
        let n = self.dims.voxels();
        &self.data[e * n..(e + 1) * n]
    }

    pub fn at(&self, x: usize, y: usize, z: usize, e: usize) -> f32 {
        self.data[e * self.dims.voxels() + self.dims.index(x, y, z)]
    }

    /// Signal of one voxel across echoes.
    pub fn voxel_signal(&self, voxel: usize) -> Vec<f64> {
        let n = self.dims.voxels();
        (0..self.n_echoes()).map(|e| self.data[e * n + voxel] as f64).collect()
    }

    /// Axial slice `z` as a channel-major `N x Y x X` buffer.
    pub fn slice_channels(&self, z: usize) -> Vec<f32> {
        let (n, s) = (self.dims.voxels(), self.dims.slice_len());
        let mut out = Vec::with_capacity(s * self.n_echoes());
        for e in 0..self.n_echoes() {
            let start = e * n + z * s;
            out.extend_from_slice(&self.data[start..start + s]);
        }
        out
    }

    /// Elementwise map; result is revalidated.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.dims, self.echo_times_ms.clone(), self.data.iter().map(|v| f(*v)).collect())
    }
}

/// Magnitude of the macroscopic field-inhomogeneity factor per voxel and echo.
#[derive(Debug, Clone, PartialEq)]
pub struct FMap {
    dims: Dims,
    echo_times_ms: Vec<f64>,
    values: Vec<f32>,
}

impl FMap {
    pub fn new(dims: Dims, echo_times_ms: Vec<f64>, values: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        check_echo_times(&echo_times_ms, echo_times_ms.len())?;
        check_len("fmap payload", values.len(), dims.voxels() * echo_times_ms.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invariant("fmap values must lie in [0, 1]".into()));
        }
        Ok(Self {
            dims,
            echo_times_ms,
            values,
        })
    }

    /// F = 1 everywhere: the model reduces to a mono-exponential.
    pub fn ones(dims: Dims, echo_times_ms: Vec<f64>) -> Result<Self> {
        let n = dims.voxels() * echo_times_ms.len();
        Self::new(dims, echo_times_ms, vec![1.0; n])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n_echoes(&self) -> usize {
        self.echo_times_ms.len()
    }

    pub fn echo_times_ms(&self) -> &[f64] {
        &self.echo_times_ms
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn voxel_values(&self, voxel: usize) -> Vec<f64> {
        let n = self.dims.voxels();
        (0..self.n_echoes()).map(|e| self.values[e * n + voxel] as f64).collect()
    }

    pub fn slice_channels(&self, z: usize) -> Vec<f32> {
        let (n, s) = (self.dims.voxels(), self.dims.slice_len());
        let mut out = Vec::with_capacity(s * self.n_echoes());
        for e in 0..self.n_echoes() {
            let start = e * n + z * s;
            out.extend_from_slice(&self.values[start..start + s]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    values: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, values: Vec<bool>) -> Result<Self> {
        dims.validate()?;
        check_len("mask payload", values.len(), dims.voxels())?;
        Ok(Self { dims, values })
    }

    pub fn full(dims: Dims) -> Self {
        Self {
            dims,
            values: vec![true; dims.voxels()],
        }
    }

    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            values: vec![false; dims.voxels()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, voxel: usize) -> bool {
        self.values[voxel]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|v| *v)
    }

    pub fn slice(&self, z: usize) -> &[bool] {
        let s = self.dims.slice_len();
        &self.values[z * s..(z + 1) * s]
    }

    /// Indices of masked voxels, in memory order.
    pub fn indices(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.then_some(i))
            .collect()
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch(format!(
                "mask {:?} vs {:?}",
                self.dims.as_array(),
                other.dims.as_array()
            )));
        }
        Ok(Mask {
            dims: self.dims,
            values: self.values.iter().zip(&other.values).map(|(a, b)| *a && *b).collect(),
        })
    }
}

/// Paired S0 and R2* maps. R2* is in 1/ms. Voxels outside the mask hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMap {
    dims: Dims,
    s0: Vec<f32>,
    r2star: Vec<f32>,
    mask: Mask,
}

impl ParamMap {
    pub fn new(s0: Vec<f32>, r2star: Vec<f32>, mask: Mask) -> Result<Self> {
        let dims = mask.dims();
        check_len("s0", s0.len(), dims.voxels())?;
        check_len("r2star", r2star.len(), dims.voxels())?;
        if s0.iter().chain(&r2star).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        for i in 0..dims.voxels() {
            if mask.get(i) {
                if s0[i] < 0.0 || r2star[i] < 0.0 {
                    return Err(Error::Invariant(format!("negative parameter at voxel {i}")));
                }
            } else if s0[i] != 0.0 || r2star[i] != 0.0 {
                return Err(Error::Invariant(format!("non-sentinel value outside mask at voxel {i}")));
            }
        }
        Ok(Self { dims, s0, r2star, mask })
    }

    /// Build from arbitrary arrays, zeroing everything outside `mask`.
    pub fn masked(mut s0: Vec<f32>, mut r2star: Vec<f32>, mask: Mask) -> Result<Self> {
        let dims = mask.dims();
        check_len("s0", s0.len(), dims.voxels())?;
        check_len("r2star", r2star.len(), dims.voxels())?;
        for (i, m) in mask.values().iter().enumerate() {
            if !m {
                s0[i] = 0.0;
                r2star[i] = 0.0;
            }
        }
        Self::new(s0, r2star, mask)
    }

    pub fn zeros(mask: Mask) -> Self {
        let n = mask.dims().voxels();
        Self {
            dims: mask.dims(),
            s0: vec![0.0; n],
            r2star: vec![0.0; n],
            mask,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn s0(&self) -> &[f32] {
        &self.s0
    }

    pub fn r2star(&self) -> &[f32] {
        &self.r2star
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn into_parts(self) -> (Vec<f32>, Vec<f32>, Mask) {
        (self.s0, self.r2star, self.mask)
    }

    /// Restrict to a (sub-)mask; voxels leaving the mask become 0.
    pub fn restrict(&self, mask: &Mask) -> Result<Self> {
        let m = self.mask.intersect(mask)?;
        Self::masked(self.s0.clone(), self.r2star.clone(), m)
    }

    pub fn with_s0_scaled(&self, factor: f64) -> Result<Self> {
        let s0 = self.s0.iter().map(|v| (*v as f64 * factor) as f32).collect();
        Self::new(s0, self.r2star.clone(), self.mask.clone())
    }
}

/// A plain scalar 3-D volume, e.g. a difference map.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub dims: Dims,
    pub data: Vec<f32>,
}

impl ScalarVolume {
    pub fn slice(&self, z: usize) -> &[f32] {
        let s = self.dims.slice_len();
        &self.data[z * s..(z + 1) * s]
    }
}

/// Any of the four QVOL payload kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Mgre(EchoStack),
    Fmap(FMap),
    Param(ParamMap),
    Mask(Mask),
}

impl Volume {
    pub fn kind(&self) -> &'static str {
        match self {
            Volume::Mgre(_) => "mgre",
            Volume::Fmap(_) => "fmap",
            Volume::Param(_) => "param",
            Volume::Mask(_) => "mask",
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            Volume::Mgre(v) => v.dims(),
            Volume::Fmap(v) => v.dims(),
            Volume::Param(v) => v.dims(),
            Volume::Mask(v) => v.dims(),
        }
    }
}

macro_rules! volume_from {
    ($t:ident, $v:ident) => {
        impl From<$t> for Volume {
            fn from(v: $t) -> Self {
                Volume::$v(v)
            }
        }
    };
}

volume_from!(EchoStack, Mgre);
volume_from!(FMap, Fmap);
volume_from!(ParamMap, Param);
volume_from!(Mask, Mask);
