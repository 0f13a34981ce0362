//! Training objectives on one slice of network output.
//!
//! Predictions are channel-major `2 x H x W` (S0 then R2*), signals and
//! F-values `N x H x W`. Losses are averaged over selected elements and
//! returned in `f64`; gradients with respect to the prediction are `f32`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMaskPolicy {
    #[default]
    BrainMask,
    WholeSlice,
}

impl LossMaskPolicy {
    pub fn select(&self, mask: &[bool]) -> Vec<bool> {
        match self {
            LossMaskPolicy::BrainMask => mask.to_vec(),
            LossMaskPolicy::WholeSlice => vec![true; mask.len()],
        }
    }
}

/// One training slice. Shared per-subject planes sit behind `Arc` so noisy
/// copies of the same subject do not duplicate them.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub h: usize,
    pub w: usize,
    /// Normalized network input, `N x H x W`.
    pub input: Arc<[f32]>,
    /// Normalized clean signal, `N x H x W`.
    pub clean: Arc<[f32]>,
    pub fmap: Arc<[f32]>,
    /// S0 (normalized) and R2* planes, `2 x H x W`.
    pub truth: Arc<[f32]>,
    pub mask: Arc<[bool]>,
}

impl SliceSample {
    pub fn n_echoes(&self) -> usize {
        self.input.len() / (self.h * self.w)
    }

    /// Copy out an `ch x cw` window with top-left corner `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> SliceSample {
        let (h, w) = (self.h, self.w);
        let cut = |plane: &[f32]| -> Arc<[f32]> {
            let c = plane.len() / (h * w);
            let mut out = Vec::with_capacity(c * ch * cw);
            for k in 0..c {
                for y in y0..y0 + ch {
                    let row = k * h * w + y * w;
                    out.extend_from_slice(&plane[row + x0..row + x0 + cw]);
                }
            }
            out.into()
        };
        let mut mask = Vec::with_capacity(ch * cw);
        for y in y0..y0 + ch {
            mask.extend_from_slice(&self.mask[y * w + x0..y * w + x0 + cw]);
        }
        SliceSample {
            h: ch,
            w: cw,
            input: cut(&self.input),
            clean: cut(&self.clean),
            fmap: cut(&self.fmap),
            truth: cut(&self.truth),
            mask: mask.into(),
        }
    }
}

fn remap<T: Copy>(plane: &[T], h: usize, w: usize, flip_y: bool, flip_x: bool, transpose: bool) -> Arc<[T]> {
    let c = plane.len() / (h * w);
    let (oh, ow) = if transpose { (w, h) } else { (h, w) };
    let mut out = Vec::with_capacity(plane.len());
    for k in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (mut sy, mut sx) = if transpose { (x, y) } else { (y, x) };
                if flip_y {
                    sy = h - 1 - sy;
                }
                if flip_x {
                    sx = w - 1 - sx;
                }
                out.push(plane[k * h * w + sy * w + sx]);
            }
        }
    }
    out.into()
}

impl SliceSample {
    /// One of the eight flips/transposes of the square, selected by the low
    /// three bits of `code` (transpose is skipped for non-square slices).
    pub fn dihedral(&self, code: u8) -> SliceSample {
        let (fy, fx) = (code & 1 != 0, code & 2 != 0);
        let tr = code & 4 != 0 && self.h == self.w;
        let (h, w) = (self.h, self.w);
        SliceSample {
            h: if tr { w } else { h },
            w: if tr { h } else { w },
            input: remap(&self.input, h, w, fy, fx, tr),
            clean: remap(&self.clean, h, w, fy, fx, tr),
            fmap: remap(&self.fmap, h, w, fy, fx, tr),
            truth: remap(&self.truth, h, w, fy, fx, tr),
            mask: remap(&self.mask, h, w, fy, fx, tr),
        }
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(NetError::Shape(format!("{what}: expected {expected} values, found {found}")));
    }
    Ok(())
}

/// Mean squared mismatch between the model signal of `pred` and `target`
/// over selected pixels and all echoes. Writes `d loss / d pred` into `grad`
/// when given.
pub fn measurement_loss(
    pred: &[f32],
    target: &[f32],
    fmap: &[f32],
    times: &[f64],
    sel: &[bool],
    mut grad: Option<&mut [f32]>,
) -> Result<f64> {
    let hw = sel.len();
    let n = times.len();
    check_len("prediction", 2 * hw, pred.len())?;
    check_len("target signal", n * hw, target.len())?;
    check_len("F-map", n * hw, fmap.len())?;
    if let Some(g) = grad.as_deref_mut() {
        check_len("gradient", 2 * hw, g.len())?;
        g.fill(0.0);
    }
    let count = sel.iter().filter(|s| **s).count();
    if count == 0 {
        return Ok(0.0);
    }
    let scale = 1.0 / (count * n) as f64;
    let mut total = 0.0f64;
    for p in (0..hw).filter(|p| sel[*p]) {
        let s0 = pred[p] as f64;
        let r2 = pred[hw + p] as f64;
        let (mut g0, mut g1) = (0.0f64, 0.0f64);
        for (e, t) in times.iter().enumerate() {
            let decay = (-r2 * t).exp() * fmap[e * hw + p] as f64;
            let r = s0 * decay - target[e * hw + p] as f64;
            total += r * r;
            g0 += r * decay;
            g1 -= r * t * s0 * decay;
        }
        if let Some(g) = grad.as_deref_mut() {
            g[p] = (2.0 * scale * g0) as f32;
            g[hw + p] = (2.0 * scale * g1) as f32;
        }
    }
    Ok(total * scale)
}

/// Self-supervised loss: the model signal of the prediction against the
/// same measurement the network was given.
pub fn loss_selfsup(pred: &[f32], signal: &[f32], fmap: &[f32], times: &[f64], sel: &[bool]) -> Result<f64> {
    measurement_loss(pred, signal, fmap, times, sel, None)
}

/// Denoising loss: `pred` was computed from a noisy input, the model signal
/// is compared to the clean one.
pub fn loss_denoise(pred: &[f32], clean: &[f32], fmap: &[f32], times: &[f64], sel: &[bool]) -> Result<f64> {
    measurement_loss(pred, clean, fmap, times, sel, None)
}

/// Mean square of each truth channel over selected pixels of a batch, used
/// to balance the supervised loss. Channels with no energy get 1.
pub fn channel_mean_squares<'a>(batch: impl IntoIterator<Item = (&'a [f32], &'a [bool])>) -> [f64; 2] {
    let mut acc = [0.0f64; 2];
    let mut count = 0usize;
    for (truth, sel) in batch {
        let hw = sel.len();
        for p in (0..hw).filter(|p| sel[*p]) {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += (truth[c * hw + p] as f64).powi(2);
            }
            count += 1;
        }
    }
    acc.map(|a| if count > 0 && a > 0.0 { a / count as f64 } else { 1.0 })
}

/// Image-domain loss against true parameter maps, each channel divided by
/// its mean square `ms` so S0 does not dominate R2*.
pub fn supervised_loss(pred: &[f32], truth: &[f32], sel: &[bool], ms: [f64; 2], mut grad: Option<&mut [f32]>) -> Result<f64> {
    let hw = sel.len();
    check_len("prediction", 2 * hw, pred.len())?;
    check_len("truth", 2 * hw, truth.len())?;
    if let Some(g) = grad.as_deref_mut() {
        check_len("gradient", 2 * hw, g.len())?;
        g.fill(0.0);
    }
    let count = sel.iter().filter(|s| **s).count();
    if count == 0 {
        return Ok(0.0);
    }
    let scale = 1.0 / (2 * count) as f64;
    let mut total = 0.0f64;
    for c in 0..2 {
        for p in (0..hw).filter(|p| sel[*p]) {
            let k = c * hw + p;
            let d = pred[k] as f64 - truth[k] as f64;
            total += d * d / ms[c];
            if let Some(g) = grad.as_deref_mut() {
                g[k] = (2.0 * scale * d / ms[c]) as f32;
            }
        }
    }
    Ok(total * scale)
}

pub fn loss_supervised(pred: &[f32], truth: &[f32], sel: &[bool]) -> Result<f64> {
    let ms = channel_mean_squares([(truth, sel)]);
    supervised_loss(pred, truth, sel, ms, None)
}

/// Per-batch state an objective may need before scoring samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub channel_ms: [f64; 2],
}

impl Default for BatchStats {
    fn default() -> Self {
        Self { channel_ms: [1.0, 1.0] }
    }
}

/// A training objective, selected by mode name.
pub trait Objective: Send + Sync {
    fn mode(&self) -> &'static str;

    fn batch_stats(&self, _batch: &[&SliceSample], _policy: LossMaskPolicy) -> BatchStats {
        BatchStats::default()
    }

    /// Loss of `pred` for `sample`; fills `grad` with `d loss / d pred`.
    fn loss(
        &self,
        pred: &[f32],
        sample: &SliceSample,
        times: &[f64],
        policy: LossMaskPolicy,
        stats: &BatchStats,
        grad: Option<&mut [f32]>,
    ) -> Result<f64>;
}

pub struct SelfSup;
pub struct Denoise;
pub struct Supervised;

impl Objective for SelfSup {
    fn mode(&self) -> &'static str {
        "selfsup"
    }

    fn loss(&self, pred: &[f32], s: &SliceSample, times: &[f64], policy: LossMaskPolicy, _: &BatchStats, grad: Option<&mut [f32]>) -> Result<f64> {
        measurement_loss(pred, &s.input, &s.fmap, times, &policy.select(&s.mask), grad)
    }
}

impl Objective for Denoise {
    fn mode(&self) -> &'static str {
        "denoise"
    }

    fn loss(&self, pred: &[f32], s: &SliceSample, times: &[f64], policy: LossMaskPolicy, _: &BatchStats, grad: Option<&mut [f32]>) -> Result<f64> {
        measurement_loss(pred, &s.clean, &s.fmap, times, &policy.select(&s.mask), grad)
    }
}

impl Objective for Supervised {
    fn mode(&self) -> &'static str {
        "supervised"
    }

    fn batch_stats(&self, batch: &[&SliceSample], policy: LossMaskPolicy) -> BatchStats {
        let sels: Vec<Vec<bool>> = batch.iter().map(|s| policy.select(&s.mask)).collect();
        BatchStats {
            channel_ms: channel_mean_squares(batch.iter().zip(&sels).map(|(s, m)| (&s.truth[..], &m[..]))),
        }
    }

    fn loss(&self, pred: &[f32], s: &SliceSample, _: &[f64], policy: LossMaskPolicy, stats: &BatchStats, grad: Option<&mut [f32]>) -> Result<f64> {
        supervised_loss(pred, &s.truth, &policy.select(&s.mask), stats.channel_ms, grad)
    }
}

pub struct ObjectiveRegistry {
    entries: BTreeMap<&'static str, Arc<dyn Objective>>,
}

impl ObjectiveRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, objective: Arc<dyn Objective>) {
        self.entries.insert(objective.mode(), objective);
    }

    pub fn modes(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, mode: &str) -> Result<Arc<dyn Objective>> {
        self.entries
            .get(mode)
            .cloned()
            .ok_or_else(|| NetError::Config(format!("unknown training mode {mode:?}; known: {:?}", self.modes())))
    }
}

impl Default for ObjectiveRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(SelfSup));
        r.register(Arc::new(Denoise));
        r.register(Arc::new(Supervised));
        r
    }
}
