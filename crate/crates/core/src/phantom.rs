//! Brain-like synthetic phantoms, clean signal synthesis and noise injection.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::signal::{forward_magnitude_volume, InhomogeneityField};
use crate::volume::{Dims, EchoStack, FMap, Mask, ParamMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    /// Number of elliptical tissue regions; the first is the whole brain.
    pub n_regions: usize,
    /// Range of region-mean R2*, 1/ms.
    pub r2_range: [f64; 2],
    pub s0_range: [f64; 2],
    /// Relative amplitude of the smooth multiplicative texture.
    pub texture_amplitude: f64,
    /// Range of the dephasing rate `g`, 1/ms.
    pub g_range: [f64; 2],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: Dims::new(96, 96, 12),
            n_regions: 7,
            r2_range: [0.010, 0.060],
            s0_range: [0.5, 1.5],
            texture_amplitude: 0.1,
            g_range: [0.0, 0.06],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if d.nx < 16 || d.ny < 16 || d.nz < 2 {
            return Err(Error::Config(format!("phantom dims must be >= (16,16,2), got {:?}", d.as_array())));
        }
        if self.n_regions < 1 {
            return Err(Error::Config("n_regions must be >= 1".into()));
        }
        for (name, r) in [("r2_range", self.r2_range), ("s0_range", self.s0_range)] {
            if !(r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and ordered")));
            }
        }
        let g = self.g_range;
        if !(g[0] >= 0.0 && g[1] >= g[0] && g[1].is_finite()) {
            return Err(Error::Config("g_range must be non-negative and ordered".into()));
        }
        if !(0.0..1.0).contains(&self.texture_amplitude) {
            return Err(Error::Config("texture_amplitude must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Low-frequency random field normalized to `[-1, 1]`.
fn smooth_field<R: Rng>(dims: Dims, rng: &mut R, components: usize) -> Vec<f64> {
    let waves: Vec<[f64; 5]> = (0..components)
        .map(|_| {
            [
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-0.75..0.75),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.5..1.0),
            ]
        })
        .collect();
    let mut out = Vec::with_capacity(dims.voxels());
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let (u, v, w) = (
                    x as f64 / dims.nx as f64,
                    y as f64 / dims.ny as f64,
                    z as f64 / dims.nz as f64,
                );
                let val: f64 = waves
                    .iter()
                    .map(|[fx, fy, fz, ph, a]| a * (std::f64::consts::TAU * (fx * u + fy * v + fz * w) + ph).cos())
                    .sum();
                out.push(val);
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v /= peak);
    }
    out
}

struct Ellipse {
    center: [f64; 3],
    axes: [f64; 3],
    angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let (dx, dy, dz) = (x - self.center[0], y - self.center[1], z - self.center[2]);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        (u / self.axes[0]).powi(2) + (v / self.axes[1]).powi(2) + (dz / self.axes[2]).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub truth: ParamMap,
    pub mask: Mask,
    pub field: InhomogeneityField,
}

/// Deterministic phantom: ellipsoidal brain mask, overlapping elliptical
/// regions with their own mean S0/R2*, smooth texture, and a dephasing field
/// that grows toward the inferior (z = 0) end.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let mut rng = seed::rng(spec.seed);
    let (cx, cy, cz) = (
        (dims.nx as f64 - 1.0) / 2.0,
        (dims.ny as f64 - 1.0) / 2.0,
        (dims.nz as f64 - 1.0) / 2.0,
    );
    let brain = Ellipse {
        center: [cx, cy, cz],
        axes: [0.40 * dims.nx as f64, 0.46 * dims.ny as f64, 0.62 * dims.nz as f64],
        angle: 0.0,
    };

    let mut regions = vec![(
        brain,
        rng.random_range(spec.r2_range[0]..=spec.r2_range[1]),
        rng.random_range(spec.s0_range[0]..=spec.s0_range[1]),
    )];
    for _ in 1..spec.n_regions {
        let rho = rng.random_range(0.0f64..0.65);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let e = Ellipse {
            center: [
                cx + rho * phi.cos() * 0.40 * dims.nx as f64,
                cy + rho * phi.sin() * 0.46 * dims.ny as f64,
                cz + rng.random_range(-0.25..0.25) * dims.nz as f64,
            ],
            axes: [
                rng.random_range(0.06..0.22) * dims.nx as f64,
                rng.random_range(0.06..0.22) * dims.ny as f64,
                rng.random_range(0.25..0.7) * dims.nz as f64,
            ],
            angle: rng.random_range(0.0..std::f64::consts::PI),
        };
        let r2 = rng.random_range(spec.r2_range[0]..=spec.r2_range[1]);
        let s0 = rng.random_range(spec.s0_range[0]..=spec.s0_range[1]);
        regions.push((e, r2, s0));
    }
    let tex_r2 = smooth_field(dims, &mut rng, 6);
    let tex_s0 = smooth_field(dims, &mut rng, 6);
    let g_shape = smooth_field(dims, &mut rng, 4);

    let n = dims.voxels();
    let mut mask = vec![false; n];
    let mut s0 = vec![0.0f32; n];
    let mut r2 = vec![0.0f32; n];
    let mut g = vec![0.0f64; n];
    let amp = spec.texture_amplitude;
    for z in 0..dims.nz {
        let depth = if dims.nz > 1 {
            1.0 - z as f64 / (dims.nz as f64 - 1.0)
        } else {
            1.0
        };
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let i = dims.index(x, y, z);
                let weight = depth.powf(1.5) * (0.5 + 0.5 * g_shape[i]);
                g[i] = spec.g_range[0] + (spec.g_range[1] - spec.g_range[0]) * weight;
                let (xf, yf, zf) = (x as f64, y as f64, z as f64);
                if !regions[0].0.contains(xf, yf, zf) {
                    continue;
                }
                mask[i] = true;
                let (_, mut rv, mut sv) = regions[0];
                for (e, rr, ss) in &regions[1..] {
                    if e.contains(xf, yf, zf) {
                        rv = *rr;
                        sv = *ss;
                    }
                }
                r2[i] = (rv * (1.0 + amp * tex_r2[i])) as f32;
                s0[i] = (sv * (1.0 + amp * tex_s0[i])) as f32;
            }
        }
    }
    let mask = Mask::new(dims, mask)?;
    Ok(Phantom {
        truth: ParamMap::new(s0, r2, mask.clone())?,
        mask,
        field: InhomogeneityField::new(dims, g)?,
    })
}

/// Clean magnitude data from ground-truth maps.
pub fn synthesize_mgre(truth: &ParamMap, fmap: &FMap, echo_times_ms: &[f64]) -> Result<EchoStack> {
    forward_magnitude_volume(truth, fmap, echo_times_ms)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub snr: f64,
    pub seed: u64,
}

/// Noise standard deviation: mean S0 over the whole volume (background
/// included) divided by the SNR.
pub fn noise_sigma(truth: &ParamMap, snr: f64) -> Result<f64> {
    if !(snr > 0.0) {
        return Err(Error::Invariant(format!("snr must be > 0, got {snr}")));
    }
    let n = truth.dims().voxels();
    let mean = truth.s0().iter().map(|v| *v as f64).sum::<f64>() / n as f64;
    if mean <= 0.0 {
        return Err(Error::ZeroMeanS0);
    }
    Ok(mean / snr)
}

/// Add i.i.d. Gaussian noise to every element, then clamp at zero.
pub fn add_noise(stack: &EchoStack, truth: &ParamMap, noise: &NoiseSpec) -> Result<EchoStack> {
    if stack.dims() != truth.dims() {
        return Err(Error::DimensionMismatch("stack and truth".into()));
    }
    let sigma = noise_sigma(truth, noise.snr)?;
    if sigma == 0.0 {
        return Ok(stack.clone());
    }
    let mut rng = seed::rng(noise.seed);
    let data = stack
        .data()
        .iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            (*v as f64 + sigma * e).max(0.0) as f32
        })
        .collect();
    EchoStack::new(stack.dims(), stack.echo_times_ms().to_vec(), data)
}
