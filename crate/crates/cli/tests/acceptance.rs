//! End-to-end acceptance run. Builds the desk-scale dataset, trains the
//! denoising and supervised networks through the `r2map` binary, and checks
//! every acceptance criterion. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use r2map_core::benchmark::{benchmark_table, timing_benchmark, BenchmarkOptions, ReReport};
use r2map_core::dataset::{DatasetManifest, Split};
use r2map_core::estimator::{Estimator, NllsEstimator};
use r2map_core::metrics::{central_slice_range, relative_error, relative_error_s0, slice_relative_error};
use r2map_core::nlls::{fit_volume, FitConfig};
use r2map_core::norm::{compute_norm_factor, denormalize_s0};
use r2map_core::phantom::{add_noise, make_phantom, noise_sigma, synthesize_mgre, NoiseSpec, PhantomSpec};
use r2map_core::qvol::{read_param, read_qvol, write_qvol};
use r2map_core::signal::{forward_magnitude, jacobian_voxel, make_fmap_sinc, sinc};
use r2map_core::{default_echo_times_ms, Dims, EchoStack, Mask, ParamMap, Volume, VoxelParams};
use r2map_net::objective::measurement_loss;
use r2map_net::{net_gradients, NetCheckpoint, NetConfig, NetEstimator, Network};
use serde_json::json;

type Check = Result<(bool, String), String>;

const DENOISE_TRAIN: &str = r#"{
  "net": {"depth": 3, "base_width": 16},
  "train": {"mode": "denoise", "epochs": 300, "batch_size": 4, "crop": 32, "val_interval": 20,
            "learning_rate": 0.002, "lr_decay": 0.99, "ema": 0.995, "augment": true}
}"#;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_r2map")
}

fn r2map(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "r2map {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

struct Context {
    root: PathBuf,
    manifest_path: PathBuf,
    manifest: DatasetManifest,
    denoise: Option<PathBuf>,
    supervised: Option<PathBuf>,
    table: Option<ReReport>,
}

impl Context {
    fn new(root: PathBuf) -> Result<Self, String> {
        let ds = root.join("dataset");
        r2map(&["--out-dir", p(&ds), "synth"])?;
        let manifest_path = ds.join(DatasetManifest::FILE_NAME);
        let manifest = DatasetManifest::load(&manifest_path).map_err(e)?;
        Ok(Self {
            root,
            manifest_path,
            manifest,
            denoise: None,
            supervised: None,
            table: None,
        })
    }

    fn train(&self, mode: &str) -> Result<PathBuf, String> {
        let cfg = DENOISE_TRAIN.replace("\"denoise\"", &format!("\"{mode}\""));
        let cfg_path = self.root.join(format!("{mode}.json"));
        fs::write(&cfg_path, cfg).map_err(e)?;
        let out = self.root.join(format!("train_{mode}"));
        let t0 = Instant::now();
        let msg = r2map(&["--out-dir", p(&out), "train", "--manifest", p(&self.manifest_path), "--config", p(&cfg_path)])?;
        println!("  [{mode}] {} ({:.0}s)", msg.trim(), t0.elapsed().as_secs_f64());
        Ok(out.join("model.ckpt"))
    }

    fn denoise(&mut self) -> Result<PathBuf, String> {
        if self.denoise.is_none() {
            self.denoise = Some(self.train("denoise")?);
        }
        Ok(self.denoise.clone().unwrap())
    }

    fn supervised(&mut self) -> Result<PathBuf, String> {
        if self.supervised.is_none() {
            self.supervised = Some(self.train("supervised")?);
        }
        Ok(self.supervised.clone().unwrap())
    }

    fn net_estimator(&self, name: &str, ckpt: &Path) -> Result<Box<dyn Estimator>, String> {
        let ck = NetCheckpoint::load(ckpt).map_err(e)?;
        Ok(Box::new(NetEstimator::new(name, ck).map_err(e)?))
    }

    fn table(&mut self) -> Result<ReReport, String> {
        if self.table.is_none() {
            let den = self.denoise()?;
            let sup = self.supervised()?;
            let methods: Vec<Box<dyn Estimator>> = vec![
                Box::new(NllsEstimator::new("nlls", FitConfig::default())),
                self.net_estimator("denoise", &den)?,
                self.net_estimator("supervised", &sup)?,
            ];
            let report = benchmark_table(&self.manifest, &methods, &[5.0, 10.0, 15.0], &BenchmarkOptions::default(), |_| {})
                .map_err(e)?;
            for line in report.to_text_table().lines() {
                println!("  {line}");
            }
            self.table = Some(report);
        }
        Ok(self.table.clone().unwrap())
    }
}

fn noiseless_volume() -> Result<(EchoStack, r2map_core::FMap, ParamMap, Mask), String> {
    let times = default_echo_times_ms();
    let ph = make_phantom(&PhantomSpec {
        seed: 12,
        ..PhantomSpec::default()
    })
    .map_err(e)?;
    let fmap = make_fmap_sinc(&ph.field, &times).map_err(e)?;
    let stack = synthesize_mgre(&ph.truth, &fmap, &times).map_err(e)?;
    Ok((stack, fmap, ph.truth, ph.mask))
}

fn exact_recovery() -> Check {
    let (stack, fmap, truth, mask) = noiseless_volume()?;
    let d = stack.dims();
    let t0 = Instant::now();
    let fit = fit_volume(&stack, &fmap, &mask, &FitConfig::default()).map_err(e)?;
    let secs = t0.elapsed().as_secs_f64();
    let re = relative_error(&fit.pmap, &truth, &mask).map_err(e)?;
    let re_s0 = relative_error_s0(&fit.pmap, &truth, &mask).map_err(e)?;
    Ok((
        re < 0.1 && re_s0 < 0.1 && secs < 300.0,
        format!(
            "{}x{}x{}x{}: RE r2star {re:.2e}%, RE s0 {re_s0:.2e}%, {secs:.2}s on {} thread(s)",
            d.nx,
            d.ny,
            d.nz,
            stack.n_echoes(),
            rayon::current_num_threads()
        ),
    ))
}

fn jacobian_check() -> Check {
    let times = default_echo_times_ms();
    let mut rng = r2map_core::seed::rng(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let s0 = rng.random_range(0.1..3.0);
        let r2 = rng.random_range(0.002..0.2);
        let g = rng.random_range(0.0..0.06);
        let f: Vec<f64> = times.iter().map(|t| sinc(g * t).abs().max(0.05)).collect();
        let jac = jacobian_voxel(&VoxelParams::new(s0, r2), &times, &f).map_err(e)?;
        let model = |a: f64, b: f64| forward_magnitude(&VoxelParams::new(a, b), &times, &f).unwrap();
        let (h0, h2) = (1e-6 * s0, 1e-6 * r2);
        let (p0, m0) = (model(s0 + h0, r2), model(s0 - h0, r2));
        let (p2, m2) = (model(s0, r2 + h2), model(s0, r2 - h2));
        for n in 0..times.len() {
            let fd0 = (p0[n] - m0[n]) / (2.0 * h0);
            let fd2 = (p2[n] - m2[n]) / (2.0 * h2);
            worst = worst.max((jac[n].0 - fd0).abs() / fd0.abs());
            worst = worst.max((jac[n].1 - fd2).abs() / fd2.abs());
        }
    }
    Ok((worst < 1e-6, format!("50 draws x 10 echoes x 2 partials, worst relative error {worst:.2e}")))
}

fn network_gradient_check() -> Check {
    let times = default_echo_times_ms();
    let cfg = NetConfig {
        depth: 1,
        base_width: 4,
        seed: 9,
        ..NetConfig::default()
    };
    let ck = NetCheckpoint::init(cfg, times.clone()).map_err(e)?;
    let (h, w) = (8, 8);
    let mut rng = r2map_core::seed::rng(21);
    let mut input = vec![0.0f32; 10 * h * w];
    let mut fmap = vec![0.0f32; 10 * h * w];
    for px in 0..h * w {
        let (s0, r2, g) = (rng.random_range(0.5..1.5), rng.random_range(0.01..0.06), rng.random_range(0.0..0.06));
        for (n, t) in times.iter().enumerate() {
            let f = sinc(g * t).abs();
            fmap[n * h * w + px] = f as f32;
            input[n * h * w + px] = (s0 * (-r2 * t).exp() * f) as f32 + rng.random_range(-0.02..0.02);
        }
    }
    let sel = vec![true; h * w];
    let plan = ck.plan();
    let loss_at = |weights: &[f32]| -> f64 {
        let out = plan.predict(weights, &input, h, w);
        measurement_loss(&out, &input, &fmap, &times, &sel, None).unwrap()
    };
    let (_, g) = net_gradients(&ck, &input, h, w, |out| {
        let mut d = vec![0.0f32; out.len()];
        let l = measurement_loss(out, &input, &fmap, &times, &sel, Some(&mut d))?;
        Ok((l, d))
    })
    .map_err(e)?;
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    while checked < 25 {
        if skipped > 200 {
            return Ok((false, format!("only {checked} smooth coordinates found")));
        }
        let i = rng.random_range(0..plan.total);
        let fd = |step: f32| {
            let mut q = ck.weights.clone();
            q[i] += step;
            let lp = loss_at(&q);
            q[i] -= 2.0 * step;
            (lp - loss_at(&q)) / (2.0 * step as f64)
        };
        let (fine, coarse) = (fd(1e-3), fd(2e-3));
        // A ReLU or pooling switch inside the probe interval makes the
        // difference quotient meaningless; such coordinates are redrawn.
        if (fine - coarse).abs() > 1e-2 * fine.abs().max(1e-4) + 1e-6 {
            skipped += 1;
            continue;
        }
        let an = g[i] as f64;
        let rel = (fine - an).abs() / fine.abs().max(an.abs()).max(1e-4);
        worst = worst.max(rel);
        checked += 1;
    }
    Ok((
        worst < 1e-2,
        format!("{checked} coordinates of {} (redrawn at kinks: {skipped}), worst relative error {worst:.2e}", plan.total),
    ))
}

fn table_trend(ctx: &mut Context) -> Check {
    let t = ctx.table()?;
    let get = |m: &str, s: f64| t.mean(m, s).ok_or_else(|| format!("missing {m} at SNR {s}"));
    let (n5, n10, n15) = (get("nlls", 5.0)?, get("nlls", 10.0)?, get("nlls", 15.0)?);
    let (d5, d10, d15) = (get("denoise", 5.0)?, get("denoise", 10.0)?, get("denoise", 15.0)?);
    let ok = d5 <= 0.8 * n5 && d10 <= n10 && (n5 - d5) > (n15 - d15);
    Ok((
        ok,
        format!(
            "NLLS {n5:.2}/{n10:.2}/{n15:.2}% vs network {d5:.2}/{d10:.2}/{d15:.2}% at SNR 5/10/15; ratio at 5 = {:.2}, gap 5 = {:.2} pp, gap 15 = {:.2} pp",
            d5 / n5,
            n5 - d5,
            n15 - d15
        ),
    ))
}

fn supervised_parity(ctx: &mut Context) -> Check {
    let t = ctx.table()?;
    let d = t.mean("denoise", 5.0).ok_or("missing denoise")?;
    let s = t.mean("supervised", 5.0).ok_or("missing supervised")?;
    let rel = (s - d).abs() / d.min(s);
    Ok((rel <= 0.25, format!("SNR 5: supervised {s:.2}% vs self-supervised {d:.2}%, relative gap {:.1}%", 100.0 * rel)))
}

fn noise_calibration() -> Check {
    let times = default_echo_times_ms();
    let dims = Dims::new(100, 100, 10);
    let truth = ParamMap::new(vec![1.0; dims.voxels()], vec![0.0; dims.voxels()], Mask::full(dims)).map_err(e)?;
    let clean = EchoStack::new(dims, times.clone(), vec![1.0; dims.voxels() * 10]).map_err(e)?;
    let snr = 10.0;
    let noisy = add_noise(&clean, &truth, &NoiseSpec { snr, seed: 77 }).map_err(e)?;
    let n = noisy.data().len();
    let var = noisy.data().iter().map(|v| (*v as f64 - 1.0).powi(2)).sum::<f64>() / n as f64;
    let sigma = var.sqrt();
    let want = noise_sigma(&truth, snr).map_err(e)?;
    let sigma_dev = (sigma / want - 1.0).abs();
    let measured_snr = 1.0 / sigma;
    let snr_dev = (measured_snr / snr - 1.0).abs();

    // Same check on a phantom at SNR 5, away from the clamp at zero.
    let ph = make_phantom(&PhantomSpec {
        seed: 4,
        ..PhantomSpec::default()
    })
    .map_err(e)?;
    let fmap = make_fmap_sinc(&ph.field, &times).map_err(e)?;
    let c = synthesize_mgre(&ph.truth, &fmap, &times).map_err(e)?;
    let nz = add_noise(&c, &ph.truth, &NoiseSpec { snr: 5.0, seed: 78 }).map_err(e)?;
    let s5 = noise_sigma(&ph.truth, 5.0).map_err(e)?;
    let (mut k, mut ss) = (0usize, 0.0f64);
    for (a, b) in nz.data().iter().zip(c.data()) {
        if (*b as f64) > 5.0 * s5 {
            ss += ((*a - *b) as f64).powi(2);
            k += 1;
        }
    }
    let phantom_dev = ((ss / k as f64).sqrt() / s5 - 1.0).abs();
    Ok((
        sigma_dev < 0.01 && snr_dev < 0.02 && phantom_dev < 0.01,
        format!(
            "{n} samples: sigma off by {:.3}%, measured SNR {measured_snr:.3} vs {snr} ({:.3}%); phantom SNR 5 over {k} samples: {:.3}%",
            100.0 * sigma_dev,
            100.0 * snr_dev,
            100.0 * phantom_dev
        ),
    ))
}

fn re_metric_suite() -> Check {
    let dims = Dims::new(7, 5, 3);
    let mut rng = r2map_core::seed::rng(8);
    let s0: Vec<f32> = (0..dims.voxels()).map(|_| rng.random_range(0.5f32..1.5)).collect();
    let r2: Vec<f32> = (0..dims.voxels()).map(|_| rng.random_range(0.01f32..0.06)).collect();
    let mask = Mask::new(dims, (0..dims.voxels()).map(|i| i % 4 != 0).collect()).map_err(e)?;
    let truth = ParamMap::masked(s0.clone(), r2.clone(), mask.clone()).map_err(e)?;
    let zero = ParamMap::masked(vec![0.0; s0.len()], vec![0.0; r2.len()], mask.clone()).map_err(e)?;
    let mut lines = Vec::new();
    let mut ok = true;
    let id = relative_error(&truth, &truth, &mask).map_err(e)?;
    ok &= id == 0.0;
    lines.push(format!("identity {id}"));
    let z = relative_error(&zero, &truth, &mask).map_err(e)?;
    ok &= (z - 100.0).abs() < 1e-9;
    lines.push(format!("zero {z}"));
    for c in [0.5f32, 0.9, 1.25, 2.0, 3.0] {
        let scaled = ParamMap::masked(s0.clone(), r2.iter().map(|v| v * c).collect(), mask.clone()).map_err(e)?;
        let re = relative_error(&scaled, &truth, &mask).map_err(e)?;
        let want = (c as f64 - 1.0).abs() * 100.0;
        ok &= (re - want).abs() <= 1e-5 * want.max(1.0);
        lines.push(format!("c={c}: {re:.7} vs {want}"));
    }
    Ok((ok, lines.join(", ")))
}

fn normalization_invariance(ctx: &mut Context) -> Check {
    let ck = NetCheckpoint::load(&ctx.denoise()?).map_err(e)?;
    let net = Network::new(ck).map_err(e)?;
    let entry = ctx.manifest.split(Split::Test).next().ok_or("no test subject")?;
    let subject = ctx.manifest.load_subject(entry).map_err(e)?;
    let stack = ctx.manifest.load_copy(entry.fixed_copy(10.0).ok_or("no SNR 10 copy")?).map_err(e)?;
    let scaled = stack.map(|v| v * 10.0).map_err(e)?;
    let run = |s: &EchoStack| -> Result<ParamMap, String> {
        let norm = compute_norm_factor(s, &subject.mask).map_err(e)?;
        denormalize_s0(&net.infer_volume(s, &norm).map_err(e)?, &norm).map_err(e)
    };
    let (a, b) = (run(&stack)?, run(&scaled)?);
    let r2_diff = a.r2star().iter().zip(b.r2star()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    let s0_dev = a
        .s0()
        .iter()
        .zip(b.s0())
        .filter(|(x, _)| **x > 0.0)
        .map(|(x, y)| ((*y as f64) / (*x as f64) / 10.0 - 1.0).abs())
        .fold(0.0f64, f64::max);
    Ok((
        r2_diff < 1e-6 && s0_dev < 1e-5,
        format!("x10 input: max |dR2*| {r2_diff:.2e} /ms, max |s0 ratio/10 - 1| {s0_dev:.2e}"),
    ))
}

fn speed(ctx: &mut Context) -> Check {
    let ckpt = ctx.denoise()?;
    let net = ctx.net_estimator("denoise", &ckpt)?;
    let entry = ctx.manifest.split(Split::Test).next().ok_or("no test subject")?;
    let subject = ctx.manifest.load_subject(entry).map_err(e)?;
    let stack = ctx.manifest.load_copy(entry.fixed_copy(10.0).ok_or("no SNR 10 copy")?).map_err(e)?;
    let fixed = NllsEstimator::new(
        "nlls",
        FitConfig {
            fixed_iters: true,
            ..FitConfig::default()
        },
    );
    let t = timing_benchmark(&stack, &subject.fmap, &subject.mask, &fixed, net.as_ref()).map_err(e)?;
    let early = NllsEstimator::new("nlls", FitConfig::default());
    let te = timing_benchmark(&stack, &subject.fmap, &subject.mask, &early, net.as_ref()).map_err(e)?;
    Ok((
        t.speedup >= 10.0,
        format!(
            "{} threads, {} masked voxels: NLLS (400 iterations) {:.3}s vs network {:.3}s = {:.1}x (early-stopping NLLS {:.3}s = {:.1}x)",
            rayon::current_num_threads(),
            subject.mask.count(),
            t.nlls_seconds,
            t.net_seconds,
            t.speedup,
            te.nlls_seconds,
            te.speedup
        ),
    ))
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

fn same_tree(a: &Path, b: &Path, skip: &[&str]) -> Result<usize, String> {
    let (fa, fb) = (files_under(a), files_under(b));
    let rel = |root: &Path, v: &[PathBuf]| -> Vec<PathBuf> {
        v.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect()
    };
    if rel(a, &fa) != rel(b, &fb) {
        return Err("file sets differ".into());
    }
    let mut n = 0;
    for (x, y) in fa.iter().zip(&fb) {
        let name = x.file_name().unwrap().to_str().unwrap();
        if skip.contains(&name) {
            continue;
        }
        if fs::read(x).map_err(e)? != fs::read(y).map_err(e)? {
            return Err(format!("{} differs", x.display()));
        }
        n += 1;
    }
    Ok(n)
}

fn strip_seconds(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism(ctx: &mut Context) -> Check {
    let root = ctx.root.join("determinism");
    let (sa, sb) = (root.join("synth_a"), root.join("synth_b"));
    r2map(&["--seed", "31", "--out-dir", p(&sa), "synth"])?;
    r2map(&["--seed", "31", "--out-dir", p(&sb), "synth"])?;
    let synth_files = same_tree(&sa, &sb, &[])?;

    let cfg = root.join("train.json");
    fs::write(
        &cfg,
        json!({
            "net": {"depth": 2, "base_width": 8},
            "train": {"mode": "denoise", "epochs": 3, "batch_size": 4, "crop": 32, "val_interval": 1,
                      "ema": 0.9, "augment": true, "lr_decay": 0.95}
        })
        .to_string(),
    )
    .map_err(e)?;
    let manifest = sa.join(DatasetManifest::FILE_NAME);
    let (ta, tb) = (root.join("train_a"), root.join("train_b"));
    for out in [&ta, &tb] {
        r2map(&["--deterministic", "--seed", "31", "--out-dir", p(out), "train", "--manifest", p(&manifest), "--config", p(&cfg)])?;
    }
    let ckpt_same = fs::read(ta.join("model.ckpt")).map_err(e)? == fs::read(tb.join("model.ckpt")).map_err(e)?;
    let csv = |d: &Path| fs::read_to_string(d.join("train_report.csv")).map(|s| strip_seconds(&s)).map_err(e);
    let csv_same = csv(&ta)? == csv(&tb)?;

    // Every QVOL kind: write, read, write again.
    let (stack, fmap, truth, mask) = noiseless_volume()?;
    let vols: Vec<Volume> = vec![stack.into(), fmap.into(), truth.into(), mask.into()];
    let mut round_trips = 0;
    for (k, v) in vols.iter().enumerate() {
        let (p1, p2) = (root.join(format!("v{k}a.qvol")), root.join(format!("v{k}b.qvol")));
        write_qvol(&p1, v).map_err(e)?;
        let back = read_qvol(&p1).map_err(e)?;
        write_qvol(&p2, &back).map_err(e)?;
        if &back == v && fs::read(&p1).map_err(e)? == fs::read(&p2).map_err(e)? {
            round_trips += 1;
        }
    }
    Ok((
        ckpt_same && csv_same && round_trips == vols.len(),
        format!(
            "synth: {synth_files} identical files; train: checkpoint identical {ckpt_same}, loss log identical {csv_same}; QVOL round trips {round_trips}/{}",
            vols.len()
        ),
    ))
}

fn slice_mean(est: &ParamMap, truth: &ParamMap, mask: &Mask) -> Result<f64, String> {
    let (lo, hi) = central_slice_range(mask.dims().nz);
    let mut v = Vec::new();
    for z in lo..hi {
        if let Some(re) = slice_relative_error(est, truth, mask, z).map_err(e)? {
            v.push(re);
        }
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

fn magnitude_only(ctx: &mut Context) -> Check {
    let ckpt = ctx.denoise()?;
    let mut rows = Vec::new();
    let (mut net_sum, mut nlls_sum, mut net_whole, mut nlls_whole) = (0.0, 0.0, 0.0, 0.0);
    let tests: Vec<_> = ctx.manifest.split(Split::Test).cloned().collect();
    for entry in &tests {
        let copy = entry.fixed_copy(15.0).ok_or("no SNR 15 copy")?;
        let input = ctx.manifest.resolve(&copy.path);
        let mask_path = ctx.manifest.resolve(&entry.mask);
        let out = ctx.root.join(format!("infer_{}", entry.id));
        r2map(&["--out-dir", p(&out), "infer", "--checkpoint", p(&ckpt), "--input", p(&input), "--mask", p(&mask_path)])?;
        let net = read_param(&out.join("net_param.qvol")).map_err(e)?;
        let subject = ctx.manifest.load_subject(entry).map_err(e)?;
        let stack = ctx.manifest.load_copy(copy).map_err(e)?;
        let fit = fit_volume(&stack, &subject.fmap, &subject.mask, &FitConfig::default()).map_err(e)?;
        let (a, b) = (slice_mean(&net, &subject.truth, &subject.mask)?, slice_mean(&fit.pmap, &subject.truth, &subject.mask)?);
        let (wa, wb) = (
            relative_error(&net, &subject.truth, &subject.mask).map_err(e)?,
            relative_error(&fit.pmap, &subject.truth, &subject.mask).map_err(e)?,
        );
        rows.push(format!("{} net {a:.2}% / NLLS+F {b:.2}%", entry.id));
        net_sum += a;
        nlls_sum += b;
        net_whole += wa;
        nlls_whole += wb;
    }
    let k = tests.len() as f64;
    let (net, nlls) = (net_sum / k, nlls_sum / k);
    Ok((
        net <= nlls + 2.0,
        format!(
            "SNR 15, no F-map given to the network: mean RE {net:.2}% vs NLLS with true F {nlls:.2}% ({}); whole-mask RE {:.2}% vs {:.2}%",
            rows.join(", "),
            net_whole / k,
            nlls_whole / k
        ),
    ))
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let tmp = tempfile::TempDir::new().expect("temp dir");
    let started = Instant::now();
    println!("acceptance: working in {}", tmp.path().display());
    let mut ctx = match Context::new(tmp.path().to_path_buf()) {
        Ok(c) => c,
        Err(err) => {
            println!("acceptance: could not build the dataset: {err}");
            std::process::exit(1);
        }
    };
    type Criterion = fn(&mut Context) -> Check;
    let criteria: Vec<(&str, Criterion)> = vec![
        ("exact recovery (noiseless NLLS)", |_| exact_recovery()),
        ("signal model jacobian", |_| jacobian_check()),
        ("network gradient", |_| network_gradient_check()),
        ("noise-level trend vs NLLS", table_trend),
        ("supervised vs self-supervised parity", supervised_parity),
        ("noise calibration", |_| noise_calibration()),
        ("RE metric", |_| re_metric_suite()),
        ("normalization invariance", normalization_invariance),
        ("speed ordering", speed),
        ("determinism", determinism),
        ("magnitude-only inference", magnitude_only),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| f == &id) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let (ok, detail) = match check(&mut ctx) {
            Ok(r) => r,
            Err(err) => (false, format!("error: {err}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {:<4} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {}/{ran} criteria passed in {:.0}s",
        ran - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
