//! Interchangeable R2* estimators selected by name at runtime.
//!
//! Every mapping method (voxel-wise NLLS, a trained network, ...) implements
//! [`Estimator`]. An [`EstimatorRegistry`] maps a `kind` string to a factory
//! so evaluation configs can list methods declaratively:
//!
//! ```json
//! {"name": "nlls", "kind": "nlls", "options": {"max_iters": 400}}
//! ```
//!
//! This crate registers `nlls`; downstream crates add their own kinds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nlls::{fit_volume, FitConfig};
use crate::volume::{EchoStack, FMap, Mask, ParamMap};

pub trait Estimator: Send + Sync {
    fn name(&self) -> &str;

    /// Whether [`Estimator::estimate`] needs the inhomogeneity factor.
    fn requires_fmap(&self) -> bool;

    /// Estimate `(S0, R2*)` on the raw intensity scale. Voxels outside `mask`
    /// receive the sentinel 0.
    fn estimate(&self, stack: &EchoStack, fmap: Option<&FMap>, mask: &Mask) -> Result<ParamMap>;
}

/// Declarative method description, as found in evaluation configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    /// Label used in reports.
    pub name: String,
    /// Registry key.
    pub kind: String,
    #[serde(default)]
    pub options: serde_json::Value,
}

impl MethodSpec {
    pub fn new(name: impl Into<String>, kind: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: kind.into(),
            options: serde_json::Value::Null,
        }
    }
}

pub type EstimatorFactory = Box<dyn Fn(&MethodSpec) -> Result<Box<dyn Estimator>> + Send + Sync>;

pub struct EstimatorRegistry {
    factories: BTreeMap<String, EstimatorFactory>,
}

impl EstimatorRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, kind: impl Into<String>, factory: EstimatorFactory) {
        self.factories.insert(kind.into(), factory);
    }

    pub fn kinds(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, spec: &MethodSpec) -> Result<Box<dyn Estimator>> {
        let factory = self.factories.get(&spec.kind).ok_or_else(|| Error::Estimator {
            name: spec.name.clone(),
            reason: format!("unknown kind {:?}; registered: {:?}", spec.kind, self.kinds()),
        })?;
        factory(spec)
    }
}

impl Default for EstimatorRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(
            "nlls",
            Box::new(|spec: &MethodSpec| {
                let cfg: FitConfig = if spec.options.is_null() {
                    FitConfig::default()
                } else {
                    serde_json::from_value(spec.options.clone())?
                };
                cfg.validate()?;
                Ok(Box::new(NllsEstimator::new(spec.name.clone(), cfg)) as Box<dyn Estimator>)
            }),
        );
        r
    }
}

/// Voxel-wise Levenberg-Marquardt fit with a known inhomogeneity factor.
#[derive(Debug, Clone)]
pub struct NllsEstimator {
    name: String,
    cfg: FitConfig,
}

impl NllsEstimator {
    pub fn new(name: impl Into<String>, cfg: FitConfig) -> Self {
        Self { name: name.into(), cfg }
    }

    pub fn config(&self) -> &FitConfig {
        &self.cfg
    }
}

impl Estimator for NllsEstimator {
    fn name(&self) -> &str {
        &self.name
    }

    fn requires_fmap(&self) -> bool {
        true
    }

    fn estimate(&self, stack: &EchoStack, fmap: Option<&FMap>, mask: &Mask) -> Result<ParamMap> {
        let fmap = fmap.ok_or_else(|| Error::Estimator {
            name: self.name.clone(),
            reason: "NLLS requires an fmap".into(),
        })?;
        Ok(fit_volume(stack, fmap, mask, &self.cfg)?.pmap)
    }
}
