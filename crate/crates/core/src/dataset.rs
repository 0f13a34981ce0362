//! Train/val/test dataset materialization and the JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{add_noise, make_phantom, synthesize_mgre, NoiseSpec, PhantomSpec};
use crate::qvol::{self, write_qvol};
use crate::seed;
use crate::signal::make_fmap_sinc;
use crate::volume::{EchoStack, FMap, Mask, ParamMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyCopy {
    pub path: String,
    pub snr: f64,
    pub seed: u64,
    /// Member of a fixed-SNR evaluation set rather than a training copy.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub clean: String,
    pub noisy: Vec<NoisyCopy>,
    pub fmap: String,
    pub mask: String,
    pub truth: String,
}

impl ManifestEntry {
    pub fn training_copies(&self) -> impl Iterator<Item = &NoisyCopy> {
        self.noisy.iter().filter(|c| !c.fixed)
    }

    /// The fixed-SNR evaluation copy at `snr`, if one exists.
    pub fn fixed_copy(&self, snr: f64) -> Option<&NoisyCopy> {
        self.noisy.iter().find(|c| c.fixed && c.snr == snr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub global_seed: u64,
    pub echo_times_ms: Vec<f64>,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check_split_exclusivity()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Every subject id appears in exactly one split.
    pub fn check_split_exclusivity(&self) -> Result<()> {
        let mut seen = std::collections::HashMap::new();
        for e in &self.entries {
            if let Some(prev) = seen.insert(e.id.as_str(), e.split) {
                if prev != e.split {
                    return Err(Error::Invariant(format!("subject {} appears in two splits", e.id)));
                }
                return Err(Error::Invariant(format!("duplicate subject {}", e.id)));
            }
        }
        Ok(())
    }

    pub fn load_subject(&self, entry: &ManifestEntry) -> Result<Subject> {
        Ok(Subject {
            clean: qvol::read_mgre(&self.resolve(&entry.clean))?,
            fmap: qvol::read_fmap(&self.resolve(&entry.fmap))?,
            mask: qvol::read_mask(&self.resolve(&entry.mask))?,
            truth: qvol::read_param(&self.resolve(&entry.truth))?,
        })
    }

    pub fn load_copy(&self, copy: &NoisyCopy) -> Result<EchoStack> {
        qvol::read_mgre(&self.resolve(&copy.path))
    }
}

/// All ground-truth artifacts of one phantom subject.
#[derive(Debug, Clone)]
pub struct Subject {
    pub clean: EchoStack,
    pub fmap: FMap,
    pub mask: Mask,
    pub truth: ParamMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_subjects: usize,
    /// Template; its seed is replaced per subject.
    pub phantom: PhantomSpec,
    pub copies: usize,
    pub snr_interval: [f64; 2],
    /// `[train, val, test]` subject counts.
    pub split_counts: [usize; 3],
    pub fixed_test_snrs: Vec<f64>,
    pub echo_times_ms: Vec<f64>,
    pub global_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_subjects: 8,
            phantom: PhantomSpec::default(),
            copies: 4,
            snr_interval: [5.0, 20.0],
            split_counts: [5, 1, 2],
            fixed_test_snrs: vec![5.0, 10.0, 15.0],
            echo_times_ms: crate::default_echo_times_ms(),
            global_seed: 2020,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.split_counts.iter().sum::<usize>() != self.n_subjects {
            return Err(Error::Config(format!(
                "split counts {:?} do not sum to n_subjects {}",
                self.split_counts, self.n_subjects
            )));
        }
        if self.copies < 1 {
            return Err(Error::Config("copies must be >= 1".into()));
        }
        let [lo, hi] = self.snr_interval;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config("snr_interval must be positive and ordered".into()));
        }
        if self.fixed_test_snrs.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("fixed test SNRs must be > 0".into()));
        }
        EchoStack::zeros(crate::volume::Dims::new(1, 1, 1), self.echo_times_ms.clone())
            .map_err(|e| Error::Config(e.to_string()))?;
        self.phantom.validate()
    }

    fn split_of(&self, index: usize) -> Split {
        let [train, val, _] = self.split_counts;
        if index < train {
            Split::Train
        } else if index < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

fn rel(id: &str, name: &str) -> String {
    format!("{id}/{name}")
}

fn build_subject(cfg: &DatasetConfig, index: usize, out_dir: &Path) -> Result<ManifestEntry> {
    let id = format!("subj{index:02}");
    let split = cfg.split_of(index);
    let subject_seed = seed::derive(cfg.global_seed, index as u64);
    let dir = out_dir.join(&id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let phantom = make_phantom(&PhantomSpec {
        seed: subject_seed,
        ..cfg.phantom.clone()
    })?;
    let fmap = make_fmap_sinc(&phantom.field, &cfg.echo_times_ms)?;
    let clean = synthesize_mgre(&phantom.truth, &fmap, &cfg.echo_times_ms)?;

    let mut entry = ManifestEntry {
        id: id.clone(),
        split,
        clean: rel(&id, "clean.qvol"),
        noisy: Vec::new(),
        fmap: rel(&id, "fmap.qvol"),
        mask: rel(&id, "mask.qvol"),
        truth: rel(&id, "truth.qvol"),
    };
    write_qvol(&out_dir.join(&entry.truth), &phantom.truth.clone().into())?;
    write_qvol(&out_dir.join(&entry.mask), &phantom.mask.clone().into())?;
    write_qvol(&out_dir.join(&entry.fmap), &fmap.into())?;
    write_qvol(&out_dir.join(&entry.clean), &clean.clone().into())?;

    let mut snr_rng = seed::rng(seed::derive(subject_seed, 1));
    let noisy = |snr: f64, stream: u64, name: String, fixed: bool| -> Result<NoisyCopy> {
        let spec = NoiseSpec {
            snr,
            seed: seed::derive(subject_seed, stream),
        };
        let stack = add_noise(&clean, &phantom.truth, &spec)?;
        let path = rel(&id, &name);
        write_qvol(&out_dir.join(&path), &stack.into())?;
        Ok(NoisyCopy {
            path,
            snr,
            seed: spec.seed,
            fixed,
        })
    };
    for c in 0..cfg.copies {
        let snr = snr_rng.random_range(cfg.snr_interval[0]..=cfg.snr_interval[1]);
        entry.noisy.push(noisy(snr, 100 + c as u64, format!("noisy_c{c}.qvol"), false)?);
    }
    if split == Split::Test {
        for (k, snr) in cfg.fixed_test_snrs.iter().enumerate() {
            entry
                .noisy
                .push(noisy(*snr, 200 + k as u64, format!("test_snr{snr:02}.qvol"), true)?);
        }
    }
    Ok(entry)
}

/// Generate every subject and write `manifest.json` into `out_dir`.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| build_subject(cfg, i, out_dir))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        global_seed: cfg.global_seed,
        echo_times_ms: cfg.echo_times_ms.clone(),
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.check_split_exclusivity()?;
    manifest.save(&out_dir.join(DatasetManifest::FILE_NAME))?;
    Ok(manifest)
}
