//! Subcommands of the `r2map` binary.
//!
//! Every command reads its inputs, validates any JSON config before doing
//! work, and writes results under `--out-dir`. Inputs are never modified.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use r2map_core::benchmark::{benchmark_table, timing_benchmark, BenchmarkOptions, EstimateRecord, ReReport, Timing};
use r2map_core::dataset::{build_dataset, DatasetConfig, DatasetManifest, Split};
use r2map_core::estimator::{Estimator, EstimatorRegistry, MethodSpec};
use r2map_core::metrics::{central_slice_range, difference_map, relative_error, relative_error_s0};
use r2map_core::nlls::{fit_volume, FitConfig};
use r2map_core::norm::{compute_norm_factor, denormalize_s0};
use r2map_core::phantom::{add_noise, NoiseSpec};
use r2map_core::qvol;
use r2map_core::render::export_png;
use r2map_core::{Mask, Volume};
use r2map_net::{NetCheckpoint, NetConfig, Network, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "r2map", version, about = "R2* mapping from multi-echo magnitude data: phantoms, NLLS, trained networks")]
pub struct Cli {
    /// Seed overriding the one in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for voxel- and slice-parallel stages.
    #[arg(long, global = true, env = "QMAP_THREADS")]
    pub threads: Option<usize>,
    /// Serial reductions; bit-reproducible training.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate phantoms, clean and noisy stacks, and a dataset manifest.
    Synth {
        /// Dataset config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Add calibrated Gaussian noise to a clean stack.
    AddNoise {
        #[arg(long)]
        input: PathBuf,
        /// Truth parameter map; its mean S0 sets the noise scale.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        snr: f64,
        /// Output file name inside the output directory.
        #[arg(long, default_value = "noisy.qvol")]
        output: String,
    },
    /// Voxel-wise NLLS fit with a known F-map.
    FitNlls {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        fmap: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Fit config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run exactly this many iterations per voxel.
        #[arg(long)]
        fixed_iters: Option<usize>,
        /// Truth map; prints the relative error when given.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Train a network on a dataset manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// `{"net": {...}, "train": {...}}` (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Apply a checkpoint to a magnitude stack. No F-map is used.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Brain mask; defines the normalization region and the output support.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Relative-error table of several methods on the fixed-SNR test sets.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Evaluation config (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// `eval` plus an NLLS-versus-network timing run.
    Compare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

/// Failure classes, mapped to process exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or config: exit 2.
    Config(anyhow::Error),
    /// Anything going wrong while doing the work: exit 1.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => e,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Outcome<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(config_err)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(config_err)
}

fn read_json_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Outcome<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn out_dir(cli: &Cli) -> Outcome<PathBuf> {
    let dir = cli.out_dir.clone().ok_or_else(|| config_err(anyhow!("--out-dir is required")))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Configure the global worker pool. Later calls in the same process are
/// ignored by rayon, which only matters for in-process tests.
fn init_threads(cli: &Cli) {
    let n = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = n.filter(|n| *n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn run(cli: &Cli) -> Outcome {
    init_threads(cli);
    match &cli.command {
        Command::Synth { config } => cmd_synth(cli, config.as_deref()),
        Command::AddNoise {
            input,
            truth,
            snr,
            output,
        } => cmd_add_noise(cli, input, truth, *snr, output),
        Command::FitNlls {
            input,
            fmap,
            mask,
            config,
            fixed_iters,
            truth,
        } => cmd_fit_nlls(cli, input, fmap, mask, config.as_deref(), *fixed_iters, truth.as_deref()),
        Command::Train { manifest, config } => cmd_train(cli, manifest, config.as_deref()),
        Command::Infer {
            checkpoint,
            input,
            mask,
            truth,
        } => cmd_infer(cli, checkpoint, input, mask.as_deref(), truth.as_deref()),
        Command::Eval { manifest, config } => cmd_eval(cli, manifest, config).map(|_| ()),
        Command::Compare { manifest, config } => cmd_compare(cli, manifest, config),
    }
}

pub fn cmd_synth(cli: &Cli, config: Option<&Path>) -> Outcome {
    let mut cfg: DatasetConfig = read_json_or_default(config)?;
    if let Some(seed) = cli.seed {
        cfg.global_seed = seed;
    }
    cfg.validate().map_err(config_err)?;
    let dir = out_dir(cli)?;
    let manifest = build_dataset(&cfg, &dir)?;
    println!(
        "wrote {} subjects to {}",
        manifest.entries.len(),
        dir.join(DatasetManifest::FILE_NAME).display()
    );
    Ok(())
}

pub fn cmd_add_noise(cli: &Cli, input: &Path, truth: &Path, snr: f64, output: &str) -> Outcome {
    if !(snr > 0.0) {
        return Err(config_err(anyhow!("snr must be > 0")));
    }
    let dir = out_dir(cli)?;
    let stack = qvol::read_mgre(input)?;
    let truth = qvol::read_param(truth)?;
    let noisy = add_noise(
        &stack,
        &truth,
        &NoiseSpec {
            snr,
            seed: cli.seed.unwrap_or(0),
        },
    )?;
    let path = dir.join(output);
    qvol::write_qvol(&path, &Volume::from(noisy))?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct FitSummary {
    pub voxels: usize,
    pub degenerate_voxels: usize,
    pub mean_iters: f64,
    pub max_iters: u32,
    pub seconds: f64,
    pub re_r2star_percent: Option<f64>,
    pub re_s0_percent: Option<f64>,
}

pub fn cmd_fit_nlls(
    cli: &Cli,
    input: &Path,
    fmap: &Path,
    mask: &Path,
    config: Option<&Path>,
    fixed_iters: Option<usize>,
    truth: Option<&Path>,
) -> Outcome {
    let mut cfg: FitConfig = read_json_or_default(config)?;
    if let Some(n) = fixed_iters {
        cfg.max_iters = n;
        cfg.fixed_iters = true;
    }
    if cfg.workers.is_none() {
        cfg.workers = cli.threads;
    }
    cfg.validate().map_err(config_err)?;
    let dir = out_dir(cli)?;
    let stack = qvol::read_mgre(input)?;
    let fmap = qvol::read_fmap(fmap)?;
    let mask = qvol::read_mask(mask)?;
    if mask.is_empty() {
        return Err(anyhow!("mask selects no voxels; nothing to fit").into());
    }
    let t0 = Instant::now();
    let fit = fit_volume(&stack, &fmap, &mask, &cfg)?;
    let seconds = t0.elapsed().as_secs_f64();
    let idx = mask.indices();
    let iters: Vec<u32> = idx.iter().map(|i| fit.iters_used[*i]).collect();
    let (re, re_s0) = match truth {
        Some(p) => {
            let t = qvol::read_param(p)?;
            (
                Some(relative_error(&fit.pmap, &t, &mask)?),
                Some(relative_error_s0(&fit.pmap, &t, &mask)?),
            )
        }
        None => (None, None),
    };
    let summary = FitSummary {
        voxels: idx.len(),
        degenerate_voxels: fit.degenerate_voxels,
        mean_iters: iters.iter().map(|v| *v as f64).sum::<f64>() / iters.len() as f64,
        max_iters: iters.iter().copied().max().unwrap_or(0),
        seconds,
        re_r2star_percent: re,
        re_s0_percent: re_s0,
    };
    qvol::write_qvol(&dir.join("nlls_param.qvol"), &Volume::from(fit.pmap))?;
    write_json(&dir.join("fit_summary.json"), &summary)?;
    println!("fitted {} voxels in {seconds:.2}s", summary.voxels);
    if let (Some(r), Some(s)) = (re, re_s0) {
        println!("RE r2star {r:.4}%  RE s0 {s:.4}%");
    }
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
}

pub fn cmd_train(cli: &Cli, manifest: &Path, config: Option<&Path>) -> Outcome {
    let mut cfg: TrainRunConfig = read_json_or_default(config)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.net.seed = seed;
    }
    if cli.deterministic {
        cfg.train.deterministic = true;
    }
    cfg.net.validate().map_err(config_err)?;
    cfg.train.validate().map_err(config_err)?;
    let dir = out_dir(cli)?;
    let manifest = DatasetManifest::load(manifest)?;
    let (ckpt, mut report) = r2map_net::train(&manifest, &cfg.net, &cfg.train)?;
    let path = dir.join("model.ckpt");
    ckpt.save(&path)?;
    report.checkpoint_path = Some(path.display().to_string());
    write_json(&dir.join("train_report.json"), &report)?;
    fs::write(dir.join("train_report.csv"), report.to_csv())?;
    println!(
        "trained {} epochs in {:.1}s; best validation RE {:.2}% at epoch {}",
        report.epochs.len(),
        report.wall_clock_seconds,
        report.best_val_re.unwrap_or(f64::NAN),
        report.best_epoch
    );
    Ok(())
}

pub fn cmd_infer(cli: &Cli, checkpoint: &Path, input: &Path, mask: Option<&Path>, truth: Option<&Path>) -> Outcome {
    let dir = out_dir(cli)?;
    let ckpt = NetCheckpoint::load(checkpoint)?;
    let stack = qvol::read_mgre(input)?;
    let mask = match mask {
        Some(p) => qvol::read_mask(p)?,
        None => {
            log::warn!("no mask given; normalizing over the whole volume");
            Mask::full(stack.dims())
        }
    };
    let net = Network::new(ckpt).map_err(|e| match e {
        r2map_net::NetError::Config(_) => config_err(e),
        other => other.into(),
    })?;
    let norm = compute_norm_factor(&stack, &mask)?;
    let t0 = Instant::now();
    let p = denormalize_s0(&net.infer_volume(&stack, &norm)?, &norm)?.restrict(&mask)?;
    let seconds = t0.elapsed().as_secs_f64();
    qvol::write_qvol_with_norm(&dir.join("net_param.qvol"), &Volume::from(p.clone()), Some(norm.factor()))?;
    println!("inferred {} slices in {seconds:.2}s", stack.dims().nz);
    if let Some(t) = truth {
        let t = qvol::read_param(t)?;
        println!("RE r2star {:.4}%", relative_error(&p, &t, &mask)?);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<MethodSpec>,
    pub snrs: Vec<f64>,
    /// Score against this method instead of the phantom truth.
    pub reference_method: Option<String>,
    /// Render central-slice R2* and difference panels.
    pub render: bool,
    /// R2* display window in 1/s.
    pub window_per_s: [f64; 2],
    /// Noise level of the test volume timed by `compare`; the first entry
    /// of `snrs` when absent.
    pub timing_snr: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: vec![MethodSpec::new("nlls", "nlls")],
            snrs: vec![5.0, 10.0, 15.0],
            reference_method: None,
            render: true,
            window_per_s: [0.0, 60.0],
            timing_snr: None,
        }
    }
}

impl EvalConfig {
    fn validate(&self) -> anyhow::Result<()> {
        if self.methods.is_empty() {
            return Err(anyhow!("no methods listed"));
        }
        if self.snrs.is_empty() || self.snrs.iter().any(|s| !(*s > 0.0)) {
            return Err(anyhow!("snrs must be a non-empty list of positive values"));
        }
        if self.window_per_s[0] >= self.window_per_s[1] {
            return Err(anyhow!("window_per_s must satisfy lo < hi"));
        }
        Ok(())
    }
}

pub fn registry() -> EstimatorRegistry {
    let mut r = EstimatorRegistry::default();
    r2map_net::register(&mut r);
    r
}

/// Build the listed methods; learned methods whose checkpoint file is
/// missing are skipped with a warning.
fn build_methods(cfg: &EvalConfig) -> Outcome<(Vec<Box<dyn Estimator>>, Vec<String>)> {
    let reg = registry();
    let mut methods = Vec::new();
    let mut skipped = Vec::new();
    for spec in &cfg.methods {
        if let Some(ck) = spec.options.get("checkpoint").and_then(|v| v.as_str()) {
            if !Path::new(ck).exists() {
                log::warn!("skipping {}: checkpoint {ck} not found", spec.name);
                skipped.push(spec.name.clone());
                continue;
            }
        }
        let m = reg.build(spec).map_err(|e| match e {
            r2map_core::Error::Estimator { .. } | r2map_core::Error::Json(_) | r2map_core::Error::Config(_) => config_err(e),
            other => other.into(),
        })?;
        methods.push(m);
    }
    Ok((methods, skipped))
}

fn render_panels(dir: &Path, rec: &EstimateRecord<'_>, window: [f64; 2]) -> anyhow::Result<()> {
    let dims = rec.estimate.dims();
    let (lo, hi) = central_slice_range(dims.nz);
    let z = (lo + hi) / 2;
    let to_per_s = |v: &[f32]| v.iter().map(|x| x * 1000.0).collect::<Vec<f32>>();
    let s = dims.slice_len();
    let tag = format!("{}_snr{}", rec.entry.id, rec.snr);
    let r2 = to_per_s(&rec.estimate.r2star()[z * s..(z + 1) * s]);
    export_png(&r2, dims.nx, dims.ny, (window[0], window[1]), &dir.join(format!("{tag}_{}_r2.png", rec.method)))?;
    let diff = difference_map(rec.estimate, &rec.subject.truth)?;
    let d = to_per_s(diff.slice(z));
    let span = (window[1] - window[0]) / 4.0;
    export_png(&d, dims.nx, dims.ny, (0.0, span), &dir.join(format!("{tag}_{}_diff.png", rec.method)))?;
    let truth = dir.join(format!("{}_truth_r2.png", rec.entry.id));
    if !truth.exists() {
        let t = to_per_s(&rec.subject.truth.r2star()[z * s..(z + 1) * s]);
        export_png(&t, dims.nx, dims.ny, (window[0], window[1]), &truth)?;
    }
    Ok(())
}

pub fn cmd_eval(cli: &Cli, manifest: &Path, config: &Path) -> Outcome<(ReReport, Vec<Box<dyn Estimator>>, EvalConfig)> {
    let cfg: EvalConfig = read_json(config)?;
    cfg.validate().map_err(config_err)?;
    let dir = out_dir(cli)?;
    let manifest = DatasetManifest::load(manifest)?;
    let (methods, skipped) = build_methods(&cfg)?;
    if methods.is_empty() {
        return Err(config_err(anyhow!("every listed method was skipped")));
    }
    let png_dir = dir.join("png");
    if cfg.render {
        fs::create_dir_all(&png_dir)?;
    }
    let mut render_error = None;
    let report = benchmark_table(
        &manifest,
        &methods,
        &cfg.snrs,
        &BenchmarkOptions {
            reference_method: cfg.reference_method.clone(),
        },
        |rec| {
            if cfg.render && render_error.is_none() {
                render_error = render_panels(&png_dir, rec, cfg.window_per_s).err();
            }
        },
    )?;
    if let Some(e) = render_error {
        return Err(e.into());
    }
    fs::write(dir.join("re_report.csv"), report.to_csv())?;
    let mut table = report.to_text_table();
    for s in &skipped {
        table.push_str(&format!("skipped: {s} (checkpoint not found)\n"));
    }
    fs::write(dir.join("re_table.txt"), &table)?;
    print!("{table}");
    Ok((report, methods, cfg))
}

pub fn cmd_compare(cli: &Cli, manifest_path: &Path, config: &Path) -> Outcome {
    let (_, methods, cfg) = cmd_eval(cli, manifest_path, config)?;
    let dir = out_dir(cli)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let baseline = methods.iter().find(|m| m.requires_fmap());
    let learned = methods.iter().find(|m| !m.requires_fmap());
    let (Some(baseline), Some(learned)) = (baseline, learned) else {
        log::warn!("timing needs one F-map method and one magnitude-only method; skipped");
        return Ok(());
    };
    let entry = manifest
        .split(Split::Test)
        .next()
        .ok_or_else(|| anyhow!("test split is empty"))?;
    let subject = manifest.load_subject(entry)?;
    let snr = cfg.timing_snr.unwrap_or(cfg.snrs[0]);
    let stack = if snr.is_infinite() {
        subject.clean.clone()
    } else {
        let copy = entry
            .fixed_copy(snr)
            .ok_or_else(|| config_err(anyhow!("no fixed test set at SNR {snr}")))?;
        manifest.load_copy(copy)?
    };
    let timing: Timing = timing_benchmark(&stack, &subject.fmap, &subject.mask, baseline.as_ref(), learned.as_ref())?;
    write_json(&dir.join("timing.json"), &timing)?;
    println!(
        "timing on {}: {} {:.3}s, {} {:.3}s, speedup {:.1}x",
        entry.id,
        baseline.name(),
        timing.nlls_seconds,
        learned.name(),
        timing.net_seconds,
        timing.speedup
    );
    Ok(())
}
