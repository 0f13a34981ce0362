//! Applying a checkpoint: single slices, whole volumes, gradients, and the
//! `net` estimator kind.

use std::path::PathBuf;

use r2map_core::estimator::{Estimator, EstimatorRegistry, MethodSpec};
use r2map_core::norm::{compute_norm_factor, denormalize_s0, normalize};
use r2map_core::{EchoStack, FMap, Mask, NormRecord, ParamMap};
use rayon::prelude::*;
use serde::Deserialize;

use crate::checkpoint::NetCheckpoint;
use crate::error::{NetError, Result};
use crate::unet::Plan;

/// A checkpoint together with its derived layer plan.
pub struct Network {
    ckpt: NetCheckpoint,
    plan: Plan,
}

impl Network {
    pub fn new(ckpt: NetCheckpoint) -> Result<Self> {
        ckpt.validate()?;
        let plan = ckpt.plan();
        Ok(Self { ckpt, plan })
    }

    pub fn checkpoint(&self) -> &NetCheckpoint {
        &self.ckpt
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    /// `N x H x W` slice in, `2 x H x W` (S0, R2*) out.
    pub fn forward(&self, slice: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
        let c = self.plan.in_channels();
        if h == 0 || w == 0 || slice.len() != c * h * w {
            let found = if h * w == 0 { 0 } else { slice.len() / (h * w) };
            return Err(NetError::Channels { expected: c, found });
        }
        Ok(self.plan.predict(&self.ckpt.weights, slice, h, w))
    }

    fn check_schedule(&self, times: &[f64]) -> Result<()> {
        let ours = &self.ckpt.echo_times_ms;
        let same = ours.len() == times.len() && ours.iter().zip(times).all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0));
        if !same {
            return Err(NetError::EchoSchedule {
                expected: ours.clone(),
                found: times.to_vec(),
            });
        }
        Ok(())
    }

    /// Slice-wise inference over a raw stack. S0 stays on the normalized
    /// scale; every voxel is mapped (full mask).
    pub fn infer_volume(&self, stack: &EchoStack, norm: &NormRecord) -> Result<ParamMap> {
        self.check_schedule(stack.echo_times_ms())?;
        let stack = normalize(stack, norm)?;
        let dims = stack.dims();
        let (nx, ny) = (dims.nx, dims.ny);
        let slices: Vec<Vec<f32>> = (0..dims.nz)
            .into_par_iter()
            .map(|z| self.forward(&stack.slice_channels(z), ny, nx))
            .collect::<Result<_>>()?;
        let s = dims.slice_len();
        let mut s0 = Vec::with_capacity(dims.voxels());
        let mut r2 = Vec::with_capacity(dims.voxels());
        for out in &slices {
            s0.extend_from_slice(&out[..s]);
            r2.extend_from_slice(&out[s..]);
        }
        Ok(ParamMap::new(s0, r2, Mask::full(dims))?)
    }
}

pub fn net_init(config: crate::NetConfig, echo_times_ms: Vec<f64>) -> Result<NetCheckpoint> {
    NetCheckpoint::init(config, echo_times_ms)
}

pub fn net_forward(ckpt: &NetCheckpoint, slice: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    Network::new(ckpt.clone())?.forward(slice, h, w)
}

pub fn net_infer_volume(ckpt: &NetCheckpoint, stack: &EchoStack, norm: &NormRecord) -> Result<ParamMap> {
    Network::new(ckpt.clone())?.infer_volume(stack, norm)
}

/// `d loss / d weights` for one slice, where `loss_fn` maps the network
/// output to `(loss, d loss / d output)`.
pub fn net_gradients(
    ckpt: &NetCheckpoint,
    slice: &[f32],
    h: usize,
    w: usize,
    loss_fn: impl FnOnce(&[f32]) -> Result<(f64, Vec<f32>)>,
) -> Result<(f64, Vec<f32>)> {
    let plan = ckpt.plan();
    if slice.len() != plan.in_channels() * h * w {
        return Err(NetError::Channels {
            expected: plan.in_channels(),
            found: slice.len() / (h * w).max(1),
        });
    }
    let (out, cache) = plan.forward(&ckpt.weights, slice, h, w);
    let (loss, dout) = loss_fn(&out)?;
    if !loss.is_finite() || dout.iter().any(|g| !g.is_finite()) {
        return Err(NetError::NonFiniteLoss("net_gradients".into()));
    }
    if dout.len() != out.len() {
        return Err(NetError::Shape(format!("loss gradient has {} values, output {}", dout.len(), out.len())));
    }
    let mut grads = vec![0.0f32; plan.total];
    plan.backward(&ckpt.weights, cache, &dout, &mut grads);
    Ok((loss, grads))
}

/// Magnitude-only estimator backed by a trained checkpoint.
pub struct NetEstimator {
    name: String,
    net: Network,
}

impl NetEstimator {
    pub fn new(name: impl Into<String>, ckpt: NetCheckpoint) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            net: Network::new(ckpt)?,
        })
    }
}

impl Estimator for NetEstimator {
    fn name(&self) -> &str {
        &self.name
    }

    fn requires_fmap(&self) -> bool {
        false
    }

    fn estimate(&self, stack: &EchoStack, _fmap: Option<&FMap>, mask: &Mask) -> r2map_core::Result<ParamMap> {
        let wrap = |e: NetError| match e {
            NetError::Core(c) => c,
            other => r2map_core::Error::Estimator {
                name: self.name.clone(),
                reason: other.to_string(),
            },
        };
        let norm = compute_norm_factor(stack, mask)?;
        let p = self.net.infer_volume(stack, &norm).map_err(wrap)?;
        denormalize_s0(&p, &norm)?.restrict(mask)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NetOptions {
    checkpoint: PathBuf,
}

/// Add the `net` kind; options are `{"checkpoint": "<path>"}`.
pub fn register(registry: &mut EstimatorRegistry) {
    registry.register(
        "net",
        Box::new(|spec: &MethodSpec| {
            let opts: NetOptions = serde_json::from_value(spec.options.clone())?;
            let fail = |e: NetError| r2map_core::Error::Estimator {
                name: spec.name.clone(),
                reason: e.to_string(),
            };
            let ckpt = NetCheckpoint::load(&opts.checkpoint).map_err(fail)?;
            Ok(Box::new(NetEstimator::new(spec.name.clone(), ckpt).map_err(fail)?) as Box<dyn Estimator>)
        }),
    );
}
