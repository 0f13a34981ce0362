use r2map_core::benchmark::{benchmark_table, BenchmarkOptions};
use r2map_core::dataset::{build_dataset, DatasetConfig, DatasetManifest, Split};
use r2map_core::estimator::{Estimator, EstimatorRegistry, MethodSpec};
use r2map_core::metrics::{relative_error, relative_error_s0};
use r2map_core::nlls::{fit_volume, FitConfig};
use r2map_core::phantom::{add_noise, make_phantom, noise_sigma, synthesize_mgre, NoiseSpec, PhantomSpec};
use r2map_core::qvol::{read_fmap, read_mgre, read_param, write_qvol};
use r2map_core::signal::make_fmap_sinc;
use r2map_core::{default_echo_times_ms, Dims};
use tempfile::TempDir;

fn small_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        dims: Dims::new(32, 32, 4),
        n_regions: 5,
        seed,
        ..PhantomSpec::default()
    }
}

fn tiny_dataset(dir: &std::path::Path) -> DatasetManifest {
    let cfg = DatasetConfig {
        n_subjects: 3,
        phantom: small_spec(0),
        copies: 1,
        split_counts: [1, 1, 1],
        fixed_test_snrs: vec![5.0, 20.0],
        ..DatasetConfig::default()
    };
    build_dataset(&cfg, dir).unwrap()
}

#[test]
fn file_round_trip_then_fit_recovers_truth() {
    let tmp = TempDir::new().unwrap();
    let times = default_echo_times_ms();
    let ph = make_phantom(&small_spec(7)).unwrap();
    let fmap = make_fmap_sinc(&ph.field, &times).unwrap();
    let clean = synthesize_mgre(&ph.truth, &fmap, &times).unwrap();

    let (ps, pf, pt) = (tmp.path().join("s.qvol"), tmp.path().join("f.qvol"), tmp.path().join("t.qvol"));
    write_qvol(&ps, &clean.clone().into()).unwrap();
    write_qvol(&pf, &fmap.clone().into()).unwrap();
    write_qvol(&pt, &ph.truth.clone().into()).unwrap();
    let stack = read_mgre(&ps).unwrap();
    assert_eq!(stack, clean);
    assert_eq!(read_fmap(&pf).unwrap(), fmap);
    assert_eq!(read_param(&pt).unwrap(), ph.truth);

    let fit = fit_volume(&stack, &fmap, &ph.mask, &FitConfig::default()).unwrap();
    assert!(relative_error(&fit.pmap, &ph.truth, &ph.mask).unwrap() < 0.1);
    assert!(relative_error_s0(&fit.pmap, &ph.truth, &ph.mask).unwrap() < 0.1);
    assert_eq!(fit.degenerate_voxels, 0);
}

#[test]
fn noise_hurts_the_fit_and_more_noise_hurts_more() {
    let times = default_echo_times_ms();
    let ph = make_phantom(&small_spec(11)).unwrap();
    let fmap = make_fmap_sinc(&ph.field, &times).unwrap();
    let clean = synthesize_mgre(&ph.truth, &fmap, &times).unwrap();
    let re_at = |snr: f64| {
        let noisy = add_noise(&clean, &ph.truth, &NoiseSpec { snr, seed: 4 }).unwrap();
        let fit = fit_volume(&noisy, &fmap, &ph.mask, &FitConfig::default()).unwrap();
        relative_error(&fit.pmap, &ph.truth, &ph.mask).unwrap()
    };
    let (r5, r20) = (re_at(5.0), re_at(20.0));
    assert!(r5 > 5.0, "{r5}");
    assert!(r5 > 2.0 * r20, "{r5} vs {r20}");
}

#[test]
fn injected_noise_matches_requested_sigma() {
    let times = default_echo_times_ms();
    let ph = make_phantom(&PhantomSpec {
        dims: Dims::new(64, 64, 25),
        ..small_spec(3)
    })
    .unwrap();
    let fmap = make_fmap_sinc(&ph.field, &times).unwrap();
    let clean = synthesize_mgre(&ph.truth, &fmap, &times).unwrap();
    let noisy = add_noise(&clean, &ph.truth, &NoiseSpec { snr: 10.0, seed: 1 }).unwrap();
    let sigma = noise_sigma(&ph.truth, 10.0).unwrap();
    // Clamping at zero biases voxels near zero, so use well-above-zero signal only.
    let (mut n, mut ss) = (0usize, 0.0f64);
    for (a, b) in noisy.data().iter().zip(clean.data()) {
        if *b as f64 > 6.0 * sigma {
            let d = (*a - *b) as f64;
            ss += d * d;
            n += 1;
        }
    }
    assert!(n > 200_000, "{n}");
    let est = (ss / n as f64).sqrt();
    assert!((est / sigma - 1.0).abs() < 0.01, "{est} vs {sigma}");
}

#[test]
fn dataset_benchmark_ranks_noise_levels() {
    let tmp = TempDir::new().unwrap();
    let manifest = tiny_dataset(tmp.path());
    let reloaded = DatasetManifest::load(&tmp.path().join(DatasetManifest::FILE_NAME)).unwrap();
    assert_eq!(reloaded.entries, manifest.entries);
    reloaded.check_split_exclusivity().unwrap();
    assert_eq!(reloaded.split(Split::Test).count(), 1);

    let reg = EstimatorRegistry::default();
    let methods: Vec<Box<dyn Estimator>> = vec![reg.build(&MethodSpec::new("nlls", "nlls")).unwrap()];
    let mut seen = 0;
    let report = benchmark_table(
        &reloaded,
        &methods,
        &[5.0, 20.0, f64::INFINITY],
        &BenchmarkOptions::default(),
        |rec| {
            assert_eq!(rec.entry.split, Split::Test);
            seen += 1;
        },
    )
    .unwrap();
    assert_eq!(seen, 3);
    let (r5, r20, rinf) = (
        report.mean("nlls", 5.0).unwrap(),
        report.mean("nlls", 20.0).unwrap(),
        report.mean("nlls", f64::INFINITY).unwrap(),
    );
    assert!(r5 > r20 && r20 > rinf, "{r5} {r20} {rinf}");
    assert!(rinf < 0.1);

    let self_ref = benchmark_table(
        &reloaded,
        &methods,
        &[5.0],
        &BenchmarkOptions {
            reference_method: Some("nlls".into()),
        },
        |_| {},
    )
    .unwrap();
    assert_eq!(self_ref.mean("nlls", 5.0).unwrap(), 0.0);
}

#[test]
fn unknown_method_kind_is_rejected() {
    let reg = EstimatorRegistry::default();
    assert!(reg.build(&MethodSpec::new("x", "no-such-kind")).is_err());
}
