//! Mini-batch Adam training over a shuffled pool of slices.

use std::sync::Arc;
use std::time::Instant;

use r2map_core::dataset::{DatasetManifest, Split};
use r2map_core::metrics::relative_error;
use r2map_core::norm::{compute_norm_factor, normalize};
use r2map_core::seed;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::checkpoint::{NetCheckpoint, TrainingMeta};
use crate::config::NetConfig;
use crate::error::{NetError, Result};
use crate::infer::Network;
use crate::objective::{BatchStats, LossMaskPolicy, Objective, ObjectiveRegistry, SliceSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `selfsup`, `denoise` or `supervised`.
    pub mode: String,
    pub epochs: usize,
    /// Slices per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub seed: u64,
    pub loss_mask_policy: LossMaskPolicy,
    /// Validate every this many epochs (and always after the last one).
    pub val_interval: usize,
    /// Train on random square crops of this size instead of whole slices.
    pub crop: Option<usize>,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Decay of an exponential moving average of the weights; when set, the
    /// average is what gets validated and saved.
    pub ema: Option<f64>,
    /// Random flips and transposes of each training sample.
    pub augment: bool,
    /// Process batch samples serially.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: "denoise".into(),
            epochs: 40,
            batch_size: 8,
            learning_rate: 1e-3,
            adam_betas: [0.9, 0.999],
            seed: 0,
            loss_mask_policy: LossMaskPolicy::BrainMask,
            val_interval: 5,
            crop: None,
            lr_decay: 1.0,
            ema: None,
            augment: false,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetError::Config(m.into()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("adam_betas must lie in [0, 1)");
        }
        if self.val_interval < 1 {
            return bad("val_interval must be >= 1");
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.ema.is_some_and(|d| !(0.0..1.0).contains(&d)) {
            return bad("ema must lie in [0, 1)");
        }
        if self.crop == Some(0) {
            return bad("crop must be >= 1");
        }
        ObjectiveRegistry::default().get(&self.mode)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean R2* relative error (%) over the validation split, when evaluated.
    pub val_re: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_re: Option<f64>,
    pub wall_clock_seconds: f64,
    pub checkpoint_path: Option<String>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_re,seconds\n");
        for e in &self.epochs {
            let re = e.val_re.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{:.9e},{},{:.3}\n", e.epoch, e.train_loss, re, e.seconds));
        }
        s
    }
}

struct ValVolume {
    stack: r2map_core::EchoStack,
    mask: r2map_core::Mask,
    truth: r2map_core::ParamMap,
}

/// Slices of every training copy, normalized per volume before slicing.
/// All modes read noisy inputs; the objective decides what they are
/// compared against.
pub fn training_slices(manifest: &DatasetManifest, split: Split) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for entry in manifest.split(split) {
        let subject = manifest.load_subject(entry)?;
        let dims = subject.clean.dims();
        let (nx, ny, s) = (dims.nx, dims.ny, dims.slice_len());
        for copy in entry.training_copies() {
            let noisy = manifest.load_copy(copy)?;
            let norm = compute_norm_factor(&noisy, &subject.mask)?;
            let noisy = normalize(&noisy, &norm)?;
            let clean = normalize(&subject.clean, &norm)?;
            let inv = 1.0 / norm.factor();
            for z in 0..dims.nz {
                let mask: Arc<[bool]> = subject.mask.slice(z).into();
                let mut truth = Vec::with_capacity(2 * s);
                truth.extend(subject.truth.s0()[z * s..(z + 1) * s].iter().map(|v| (*v as f64 * inv) as f32));
                truth.extend_from_slice(&subject.truth.r2star()[z * s..(z + 1) * s]);
                out.push(SliceSample {
                    h: ny,
                    w: nx,
                    input: noisy.slice_channels(z).into(),
                    clean: clean.slice_channels(z).into(),
                    fmap: subject.fmap.slice_channels(z).into(),
                    truth: truth.into(),
                    mask,
                });
            }
        }
    }
    Ok(out)
}

fn validation_volumes(manifest: &DatasetManifest) -> Result<Vec<ValVolume>> {
    let mut out = Vec::new();
    for entry in manifest.split(Split::Val) {
        let subject = manifest.load_subject(entry)?;
        for copy in entry.training_copies() {
            out.push(ValVolume {
                stack: manifest.load_copy(copy)?,
                mask: subject.mask.clone(),
                truth: subject.truth.clone(),
            });
        }
    }
    Ok(out)
}

/// Mean R2* relative error (%) of `ckpt` over `vols`.
fn validate(ckpt: &NetCheckpoint, vols: &[ValVolume]) -> Result<f64> {
    let net = Network::new(ckpt.clone())?;
    let mut total = 0.0;
    for v in vols {
        let norm = compute_norm_factor(&v.stack, &v.mask)?;
        let p = net.infer_volume(&v.stack, &norm)?.restrict(&v.mask)?;
        total += relative_error(&p, &v.truth, &v.mask)?;
    }
    Ok(total / vols.len() as f64)
}

/// Pick a crop containing at least one loss pixel; falls back to the last draw.
fn draw_crop(sample: &SliceSample, size: usize, policy: LossMaskPolicy, rng: &mut impl Rng) -> SliceSample {
    let (ch, cw) = (size.min(sample.h), size.min(sample.w));
    let mut crop = None;
    for _ in 0..8 {
        let y0 = rng.random_range(0..=sample.h - ch);
        let x0 = rng.random_range(0..=sample.w - cw);
        let c = sample.crop(y0, x0, ch, cw);
        let hit = policy == LossMaskPolicy::WholeSlice || c.mask.iter().any(|m| *m);
        crop = Some(c);
        if hit {
            break;
        }
    }
    crop.unwrap()
}

struct StepOutput {
    loss: f64,
    grads: Vec<f32>,
}

fn sample_step(
    net: &crate::unet::Plan,
    weights: &[f32],
    objective: &dyn Objective,
    sample: &SliceSample,
    times: &[f64],
    policy: LossMaskPolicy,
    stats: &BatchStats,
) -> Result<StepOutput> {
    let (out, cache) = net.forward(weights, &sample.input, sample.h, sample.w);
    let mut dout = vec![0.0f32; out.len()];
    let loss = objective.loss(&out, sample, times, policy, stats, Some(&mut dout))?;
    let mut grads = vec![0.0f32; weights.len()];
    net.backward(weights, cache, &dout, &mut grads);
    Ok(StepOutput { loss, grads })
}

/// Train a fresh network. Returns the checkpoint with the best validation
/// R2* error (the last epoch when no validation split exists).
pub fn train(manifest: &DatasetManifest, net_cfg: &NetConfig, cfg: &TrainConfig) -> Result<(NetCheckpoint, TrainReport)> {
    cfg.validate()?;
    net_cfg.validate()?;
    manifest.check_split_exclusivity()?;
    let objective = ObjectiveRegistry::default().get(&cfg.mode)?;
    let times = manifest.echo_times_ms.clone();
    if times.len() != net_cfg.in_channels {
        return Err(NetError::Channels {
            expected: net_cfg.in_channels,
            found: times.len(),
        });
    }
    let pool = training_slices(manifest, Split::Train)?;
    if pool.is_empty() {
        return Err(NetError::Dataset("training split is empty".into()));
    }
    let val = validation_volumes(manifest)?;
    if val.is_empty() {
        return Err(NetError::Dataset("validation split is empty".into()));
    }

    let started = Instant::now();
    let mut ckpt = NetCheckpoint::init(net_cfg.clone(), times.clone())?;
    let plan = ckpt.plan();
    let mut opt = Adam::new(plan.total, cfg.learning_rate, cfg.adam_betas);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    let mut average = cfg.ema.map(|_| ckpt.weights.clone());
    let policy = cfg.loss_mask_policy;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut rng = seed::rng(seed::derive(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_count) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch: Vec<SliceSample> = match cfg.crop {
                Some(size) => chunk.iter().map(|i| draw_crop(&pool[*i], size, policy, &mut rng)).collect(),
                None => chunk.iter().map(|i| pool[*i].clone()).collect(),
            };
            if cfg.augment {
                for s in &mut batch {
                    *s = s.dihedral(rng.random_range(0..8u8));
                }
            }
            let refs: Vec<&SliceSample> = batch.iter().collect();
            let stats = objective.batch_stats(&refs, policy);
            let step = |s: &SliceSample| sample_step(&plan, &ckpt.weights, objective.as_ref(), s, &times, policy, &stats);
            let outputs: Vec<StepOutput> = if cfg.deterministic {
                batch.iter().map(step).collect::<Result<_>>()?
            } else {
                batch.par_iter().map(step).collect::<Result<_>>()?
            };
            // reduce in sample order so the result does not depend on scheduling
            let scale = 1.0 / outputs.len() as f32;
            let mut grads = vec![0.0f32; plan.total];
            let mut batch_loss = 0.0;
            for o in &outputs {
                batch_loss += o.loss;
                for (g, v) in grads.iter_mut().zip(&o.grads) {
                    *g += v * scale;
                }
            }
            batch_loss /= outputs.len() as f64;
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(NetError::NonFiniteLoss(format!("epoch {epoch}, batch {b}")));
            }
            opt.update(&mut ckpt.weights, &grads);
            if let (Some(avg), Some(d)) = (average.as_mut(), cfg.ema) {
                let d = d as f32;
                for (a, w) in avg.iter_mut().zip(&ckpt.weights) {
                    *a = d * *a + (1.0 - d) * w;
                }
            }
            loss_sum += batch_loss * outputs.len() as f64;
            loss_count += outputs.len();
        }
        opt.lr *= cfg.lr_decay;
        let train_loss = loss_sum / loss_count as f64;
        let val_re = if (epoch + 1) % cfg.val_interval == 0 || epoch + 1 == cfg.epochs {
            let candidate = match &average {
                Some(avg) => NetCheckpoint {
                    weights: avg.clone(),
                    ..ckpt.clone()
                },
                None => ckpt.clone(),
            };
            let re = validate(&candidate, &val)?;
            if best.as_ref().is_none_or(|(b, _, _)| re < *b) {
                best = Some((re, epoch, candidate.weights));
            }
            Some(re)
        } else {
            None
        };
        let seconds = t0.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: loss {train_loss:.4e}{} ({seconds:.1}s)",
            val_re.map(|r| format!(", val RE {r:.2}%")).unwrap_or_default()
        );
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_re,
            seconds,
        });
    }

    let (best_re, best_epoch, weights) = best.expect("last epoch always validates");
    ckpt.weights = weights;
    ckpt.training = Some(TrainingMeta {
        mode: cfg.mode.clone(),
        epochs: cfg.epochs,
        best_epoch,
        train_loss: records.iter().map(|r| r.train_loss).collect(),
        val_re: records.iter().map(|r| r.val_re).collect(),
        seed: cfg.seed,
    });
    let report = TrainReport {
        mode: cfg.mode.clone(),
        epochs: records,
        best_epoch,
        best_val_re: Some(best_re),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        checkpoint_path: None,
    };
    Ok((ckpt, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { mode: "bogus".into(), ..Default::default() },
            TrainConfig { crop: Some(0), ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"mode":"selfsup","epochs":3}"#).is_ok());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch":3}"#).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let r = TrainReport {
            mode: "denoise".into(),
            epochs: vec![
                EpochRecord { epoch: 0, train_loss: 0.5, val_re: None, seconds: 1.0 },
                EpochRecord { epoch: 1, train_loss: 0.25, val_re: Some(12.5), seconds: 1.0 },
            ],
            best_epoch: 1,
            best_val_re: Some(12.5),
            wall_clock_seconds: 2.0,
            checkpoint_path: None,
        };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_re,seconds");
        assert!(lines[1].starts_with("0,") && lines[1].contains(",,"));
        assert!(lines[2].contains("12.500000"));
    }
}
