//! Network checkpoints: configuration, echo schedule and flat weights in a
//! QVOL-framed file of kind `ckpt`.

use std::path::Path;

use r2map_core::qvol::{read_container, write_container};
use serde::{Deserialize, Serialize};

use crate::config::NetConfig;
use crate::error::{NetError, Result};
use crate::unet::{ParamEntry, Plan};

/// Inputs are divided by the masked mean of echo 1; S0 is predicted on that scale.
pub const NORM_CONVENTION: &str = "echo1_brain_mean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub mode: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_re: Vec<Option<f64>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetCheckpoint {
    pub config: NetConfig,
    pub weights: Vec<f32>,
    pub echo_times_ms: Vec<f64>,
    pub norm_convention: String,
    pub training: Option<TrainingMeta>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    dtype: String,
    n_weights: usize,
    config: NetConfig,
    layout: Vec<ParamEntry>,
    echo_times_ms: Vec<f64>,
    norm_convention: String,
    #[serde(default)]
    training: Option<TrainingMeta>,
}

impl NetCheckpoint {
    /// Freshly initialized weights, deterministic in `config.seed`.
    pub fn init(config: NetConfig, echo_times_ms: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if echo_times_ms.len() != config.in_channels {
            return Err(NetError::Channels {
                expected: config.in_channels,
                found: echo_times_ms.len(),
            });
        }
        let plan = Plan::new(&config);
        let weights = plan.init(&mut r2map_core::seed::rng(config.seed));
        Ok(Self {
            config,
            weights,
            echo_times_ms,
            norm_convention: NORM_CONVENTION.into(),
            training: None,
        })
    }

    pub fn plan(&self) -> Plan {
        Plan::new(&self.config)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let plan = self.plan();
        if self.weights.len() != plan.total {
            return Err(NetError::Checkpoint(format!(
                "config implies {} weights, store has {}",
                plan.total,
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(NetError::Checkpoint("non-finite weight".into()));
        }
        if self.echo_times_ms.len() != self.config.in_channels {
            return Err(NetError::Checkpoint("echo schedule length differs from in_channels".into()));
        }
        if self.norm_convention != NORM_CONVENTION {
            return Err(NetError::Checkpoint(format!("unsupported norm convention {:?}", self.norm_convention)));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let header = Header {
            kind: "ckpt".into(),
            dtype: "f32le".into(),
            n_weights: self.weights.len(),
            config: self.config.clone(),
            layout: self.plan().entries,
            echo_times_ms: self.echo_times_ms.clone(),
            norm_convention: self.norm_convention.clone(),
            training: self.training.clone(),
        };
        let payload: Vec<u8> = self.weights.iter().flat_map(|w| w.to_le_bytes()).collect();
        write_container(path, &header, &payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (json, payload) = read_container(path)?;
        let header: Header = serde_json::from_value(json)
            .map_err(|e| NetError::Checkpoint(format!("{}: {e}", path.display())))?;
        if header.kind != "ckpt" {
            return Err(r2map_core::Error::UnknownKind(header.kind).into());
        }
        if header.dtype != "f32le" {
            return Err(NetError::Checkpoint(format!("unsupported dtype {:?}", header.dtype)));
        }
        if payload.len() != header.n_weights * 4 {
            return Err(r2map_core::Error::PayloadLength {
                expected: header.n_weights * 4,
                found: payload.len(),
            }
            .into());
        }
        if Plan::new(&header.config).entries != header.layout {
            return Err(NetError::Checkpoint("layout table does not match config".into()));
        }
        let weights = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ckpt = Self {
            config: header.config,
            weights,
            echo_times_ms: header.echo_times_ms,
            norm_convention: header.norm_convention,
            training: header.training,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            depth: 1,
            base_width: 4,
            seed: 3,
            ..NetConfig::default()
        }
    }

    fn times() -> Vec<f64> {
        r2map_core::default_echo_times_ms()
    }

    #[test]
    fn same_seed_same_weights() {
        let a = NetCheckpoint::init(tiny(), times()).unwrap();
        let b = NetCheckpoint::init(tiny(), times()).unwrap();
        assert_eq!(a.weights, b.weights);
        assert!(a.weights.iter().all(|w| w.is_finite()));
        let c = NetCheckpoint::init(NetConfig { seed: 4, ..tiny() }, times()).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut a = NetCheckpoint::init(tiny(), times()).unwrap();
        a.training = Some(TrainingMeta {
            mode: "denoise".into(),
            epochs: 2,
            best_epoch: 1,
            train_loss: vec![0.5, 0.25],
            val_re: vec![None, Some(12.5)],
            seed: 9,
        });
        a.save(&path).unwrap();
        let b = NetCheckpoint::load(&path).unwrap();
        assert_eq!(a, b);
        let (json, _) = read_container(&path).unwrap();
        assert_eq!(json["kind"], "ckpt");
        assert_eq!(json["layout"][0]["name"], "enc0.conv1.weight");
    }

    #[test]
    fn truncated_weights_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        NetCheckpoint::init(tiny(), times()).unwrap().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(NetCheckpoint::load(&path).is_err());
    }

    #[test]
    fn echo_count_must_match_channels() {
        assert!(NetCheckpoint::init(tiny(), vec![4.0, 8.0]).is_err());
    }
}
