//! Acceptance gate: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion. Select a subset with
//! `ACCEPTANCE_CRITERIA=1,3,9`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tomo_denoise::experiment::{
    run_ab, run_cross_geometry, run_sweep, sweep_csv, sweep_means, ExperimentConfig, SimulationConfig,
};
use tomo_denoise::fbp::fbp_reconstruct;
use tomo_denoise::image::circle_mask;
use tomo_denoise::metrics::psnr_masked;
use tomo_denoise::net::{init_model, Activation, Architecture};
use tomo_denoise::noise::{postlog, simulate_counts};
use tomo_denoise::oracle::{
    adjoint_geometry, dense_oracle_error, network_gradient_error, projector_adjoint_error, ran2i_gradient_error,
    verify_prop1, Prop1Config,
};
use tomo_denoise::phantom::make_shepp_logan;
use tomo_denoise::projector::{back_project, forward_project};
use tomo_denoise::rotate::RotationMode;
use tomo_denoise::split::{interleave, partition_angles, split_sinogram};
use tomo_denoise::train::{loss_ran2i, train, LossKind, TrainConfig, TrainingSample};
use tomo_denoise::{BeamKind, ImageGrid, Precision, ScanGeometry, Sinogram};

/// Interior PSNR of noiseless Shepp-Logan FBP (64×64, 180 parallel views),
/// frozen from the first verified run.
const FBP_GOLDEN_DB: f64 = 28.14;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn c1_adjoint() -> Outcome {
    let mut worst: f64 = 0.0;
    for (kind, seed) in [(BeamKind::Parallel, 1), (BeamKind::Fan, 2)] {
        let g = adjoint_geometry(kind).unwrap();
        worst = worst.max(projector_adjoint_error::<f64>(&g, 16, 1.0, 100, seed, back_project::<f64>).unwrap());
    }
    outcome(worst < 1e-12, format!("max relative adjoint error {worst:.2e} (< 1e-12)"))
}

fn c2_dense() -> Outcome {
    let mut worst: f64 = 0.0;
    for (g, seed) in [
        (ScanGeometry::parallel(ScanGeometry::uniform_angles(BeamKind::Parallel, 12), 13, 1.0).unwrap(), 3),
        (ScanGeometry::fan(ScanGeometry::uniform_angles(BeamKind::Fan, 12), 13, 1.5, 30.0, 15.0).unwrap(), 4),
    ] {
        worst = worst.max(dense_oracle_error(&g, 8, 1.0, 20, seed).unwrap());
    }
    outcome(worst < 1e-10, format!("max relative dense/sparse difference {worst:.2e} (< 1e-10)"))
}

fn c3_fbp() -> Outcome {
    let n = 64;
    let p = make_shepp_logan::<f64>(n, 1.0, 0.2).unwrap();
    let g = ScanGeometry::parallel(ScanGeometry::uniform_angles(BeamKind::Parallel, 180), 192, 0.5).unwrap();
    let r = fbp_reconstruct(&forward_project(&p, &g).unwrap(), n, 1.0).unwrap();
    let psnr = psnr_masked(&r, &p, 0.2, &circle_mask(n, 0.9)).unwrap();
    let gate = FBP_GOLDEN_DB - 0.5;
    outcome(
        psnr >= gate && psnr >= 25.0,
        format!("interior PSNR {psnr:.3} dB (golden {FBP_GOLDEN_DB}, gate >= {gate:.2})"),
    )
}

fn flat_sinogram(value: f64, angles: usize, detectors: usize) -> Sinogram<f64> {
    let g = ScanGeometry::parallel(ScanGeometry::uniform_angles(BeamKind::Parallel, angles), detectors, 1.0).unwrap();
    Sinogram::new(g, vec![value; angles * detectors]).unwrap()
}

fn c4_noise() -> Outcome {
    const DRAWS: usize = 100_000;
    let i0 = 1e4;
    let mut ok = true;
    let mut notes = Vec::new();
    // moments at y* = ln 2: mean count 5000
    let sino = flat_sinogram(std::f64::consts::LN_2, 100, 1000);
    let counts = simulate_counts(&sino, i0, 17).unwrap();
    let c: Vec<f64> = counts.counts().iter().map(|&v| v as f64).collect();
    let mean = c.iter().sum::<f64>() / DRAWS as f64;
    let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (DRAWS - 1) as f64;
    let dispersion = var / mean;
    ok &= (4900.0..=5100.0).contains(&mean) && (0.97..=1.03).contains(&dispersion);
    notes.push(format!("mean {mean:.1}, var/mean {dispersion:.4}"));
    // distinct rays: 10^5 independent acquisitions of a 4-ray sinogram
    let small = flat_sinogram(1.0, 1, 4);
    let (mut a, mut b, mut d) = (Vec::with_capacity(DRAWS), Vec::with_capacity(DRAWS), Vec::with_capacity(DRAWS));
    for s in 0..DRAWS as u64 {
        let cd = simulate_counts(&small, i0, s).unwrap();
        a.push(cd.counts()[0] as f64);
        b.push(cd.counts()[1] as f64);
        d.push(cd.counts()[3] as f64);
    }
    let corr = |x: &[f64], y: &[f64]| {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(p, q)| (p - mx) * (q - my)).sum();
        let vx: f64 = x.iter().map(|p| (p - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|q| (q - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    };
    let worst_corr = corr(&a, &b).abs().max(corr(&a, &d).abs());
    ok &= worst_corr < 0.01;
    notes.push(format!("cross-ray |corr| {worst_corr:.4}"));
    // conditional bias of the log transform
    for y_star in [0.5, 1.5, 3.0] {
        let sino = flat_sinogram(y_star, 100, 1000);
        let post: Sinogram<f64> = postlog(&simulate_counts(&sino, i0, 23).unwrap());
        let e: Vec<f64> = post.data().iter().map(|v| v - y_star).collect();
        let m = e.iter().sum::<f64>() / DRAWS as f64;
        let se = (e.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (DRAWS - 1) as f64 / DRAWS as f64).sqrt();
        let bound = 10.0 * y_star.exp() / (2.0 * i0) + 3.0 * se;
        ok &= m.abs() < bound;
        notes.push(format!("bias@{y_star} {m:+.2e} (< {bound:.2e})"));
    }
    outcome(ok, notes.join(", "))
}

fn c5_partition() -> Outcome {
    let mut cases = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 1..=512usize {
        for s in 2..=8usize {
            if k % s != 0 {
                continue;
            }
            cases += 1;
            let p = partition_angles(k, s).unwrap();
            let mut seen = vec![0u8; k];
            for (j, sub) in p.subsets().iter().enumerate() {
                let expect: Vec<usize> = (j..k).step_by(s).collect();
                if sub != &expect {
                    return outcome(false, format!("subset {j} of ({k}, {s}) is not interleaved"));
                }
                for &a in sub {
                    seen[a] += 1;
                }
            }
            if seen.iter().any(|&c| c != 1) {
                return outcome(false, format!("({k}, {s}) is not a disjoint cover"));
            }
            for (j, sec) in p.sections().iter().enumerate() {
                let complement: Vec<usize> = (0..s).filter(|&i| i != j).collect();
                if sec.target != vec![j] || sec.input != complement {
                    return outcome(false, format!("section {j} of ({k}, {s}) is wrong"));
                }
            }
            let g = ScanGeometry::parallel(ScanGeometry::uniform_angles(BeamKind::Parallel, k), 3, 1.0).unwrap();
            let sino = Sinogram::new(g.clone(), (0..3 * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let back = interleave(&split_sinogram(&sino, &p).unwrap(), &p, &g).unwrap();
            if back != sino {
                return outcome(false, format!("({k}, {s}) round trip is not bit-exact"));
            }
        }
    }
    outcome(true, format!("{cases} (k, s) pairs: disjoint interleaved cover, sections, bit-exact round trip"))
}

fn c6_gradient() -> Outcome {
    let mut notes = Vec::new();
    let mut worst: f64 = 0.0;
    let linear = Architecture {
        depth: 2,
        channels: 2,
        residual: false,
        normalize: false,
        activation: Activation::Identity,
    };
    let plain_relu = Architecture {
        normalize: false,
        ..Architecture::new(2, 2, false).unwrap()
    };
    for (name, arch) in [
        ("conv", linear),
        ("conv+relu", plain_relu),
        ("conv+scale+relu", Architecture::new(2, 2, false).unwrap()),
        ("residual", Architecture::new(2, 2, true).unwrap()),
    ] {
        let e = network_gradient_error(&arch, 8, 31).unwrap();
        notes.push(format!("{name} {e:.1e}"));
        worst = worst.max(e);
    }
    let e = ran2i_gradient_error(&Architecture::new(2, 2, true).unwrap(), 8, &[37.0, 90.0, 213.5], 1.0, 32).unwrap();
    notes.push(format!("ran2i loss {e:.1e}"));
    worst = worst.max(e);
    outcome(worst < 1e-6, format!("max relative FD error {worst:.2e} (< 1e-6): {}", notes.join(", ")))
}

fn c7_decomposition() -> Outcome {
    let r = verify_prop1(&Prop1Config::default_run(10_000, 2024)).unwrap();
    outcome(
        r.passed,
        format!(
            "lhs - rhs {:+.3e} ± {:.3e}, cross terms {:+.3e} ± {:.3e} / {:+.3e} ± {:.3e} (4 SE)",
            r.difference.mean, r.difference.se, r.cross[0].mean, r.cross[0].se, r.cross[1].mean, r.cross[1].se
        ),
    )
}

fn c8_unitary_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for trial in 0..5u64 {
        let m = init_model::<f64>(3, 4, true, trial).unwrap();
        let mut img = || ImageGrid::new(12, 12, 1.0, (0..144).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (x, t) = (img(), img());
        for lambda in [0.5, 1.0, 2.0] {
            let (v, _) = loss_ran2i(&m, &x, &t, &[90.0, 180.0, 270.0], lambda).unwrap();
            worst = worst.max((v.total - (1.0 + lambda) * v.base).abs() / ((1.0 + lambda) * v.base));
        }
    }
    let sim = SimulationConfig {
        count: 4,
        n: 16,
        angles: 16,
        n_detectors: 48,
        ..SimulationConfig::desk(4, 9)
    };
    let data = tomo_denoise::experiment::simulate_dataset::<f32>(&sim).unwrap();
    let partition = sim.partition().unwrap();
    let samples: Vec<TrainingSample<f32>> = data
        .iter()
        .map(|d| TrainingSample::Splits {
            sub_recons: d.sub_recons.clone(),
            partition: partition.clone(),
        })
        .collect();
    let mut cfg = TrainConfig::desk(LossKind::N2i, 3, 4);
    cfg.architecture = Architecture::new(3, 4, true).unwrap();
    cfg.precision = Precision::F32;
    let (n2i, _) = train(&cfg, &samples).unwrap();
    cfg.loss_kind = LossKind::Ran2i;
    cfg.aug_weight = 0.0;
    let (ran2i, _) = train(&cfg, &samples).unwrap();
    let identical = n2i == ran2i;
    outcome(
        worst < 1e-6 && identical,
        format!("quarter-turn loss ratio error {worst:.2e} (< 1e-6), lambda=0 training bitwise identical: {identical}"),
    )
}

fn c9_ab() -> Outcome {
    let exp = ExperimentConfig::desk();
    let r = run_ab::<f32>(&exp).unwrap();
    for line in r.to_text().lines() {
        println!("      {line}");
    }
    let margin = 1.0;
    let beats_input = r.n2i_psnr >= r.input_psnr + margin && r.ran2i_psnr >= r.input_psnr + margin;
    let ordered = r.ran2i_psnr >= r.n2i_psnr;
    outcome(
        beats_input && ordered,
        format!(
            "RAN2I {:.3} dB vs N2I {:.3} dB (need RAN2I >= N2I: {ordered}); input {:.3} dB (both >= input + 1 dB: {beats_input})",
            r.ran2i_psnr, r.n2i_psnr, r.input_psnr
        ),
    )
}

fn c10_sweep() -> Outcome {
    let exp = ExperimentConfig::desk();
    let rows = run_sweep::<f32>(&exp, &[2, 4], &[RotationMode::Fixed, RotationMode::Random]).unwrap();
    let csv = sweep_csv(&rows);
    for line in csv.lines() {
        println!("      {line}");
    }
    let finite = rows.len() == 12 && rows.iter().all(|r| r.psnr_db.is_finite() && r.ssim.is_finite() && r.final_loss.is_finite());
    let means = sweep_means(&rows);
    let mean_of = |r: usize, mode: RotationMode| means.iter().find(|m| m.0 == r && m.1 == mode).map(|m| m.2).unwrap_or(f64::NAN);
    let mut order = Vec::new();
    for mode in [RotationMode::Fixed, RotationMode::Random] {
        let (two, four) = (mean_of(2, mode), mean_of(4, mode));
        order.push(format!("{mode:?}: r=2 {two:.3} dB vs r=4 {four:.3} dB (r=2 >= r=4: {})", two >= four));
    }
    outcome(finite, format!("{} finite runs; reported: {}", rows.len(), order.join("; ")))
}

fn c11_cross_geometry() -> Outcome {
    let mut exp = ExperimentConfig::desk();
    exp.training.epochs = 20;
    let fan = SimulationConfig::desk_fan(exp.test_count, 4048);
    let report = run_cross_geometry::<f32>(&exp, &fan).unwrap();
    for line in report.to_table().lines() {
        println!("      {line}");
    }
    outcome(
        report.all_finite() && report.rows.len() == 3,
        format!("{} methods evaluated on parallel and fan test sets, all metrics finite", report.rows.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        (1, "projector adjoint", Duration::from_secs(5), c1_adjoint),
        (2, "dense operator oracle", Duration::from_secs(5), c2_dense),
        (3, "FBP fidelity", Duration::from_secs(10), c3_fbp),
        (4, "noise model", Duration::from_secs(30), c4_noise),
        (5, "angular partition", Duration::from_secs(5), c5_partition),
        (6, "gradients", Duration::from_secs(30), c6_gradient),
        (7, "prediction-error decomposition", Duration::from_secs(120), c7_decomposition),
        (8, "unitary reduction", Duration::from_secs(10), c8_unitary_reduction),
        (9, "N2I vs RAN2I trend", Duration::from_secs(20 * 60), c9_ab),
        (10, "rotation sweep", Duration::from_secs(80 * 60), c10_sweep),
        (11, "cross-geometry protocol", Duration::from_secs(5 * 60), c11_cross_geometry),
    ];
    let selected: Option<Vec<u32>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failures = 0;
    let mut lines = Vec::new();
    for (id, name, budget, run) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let started = Instant::now();
        let result = run();
        let elapsed = started.elapsed();
        let in_time = elapsed <= budget;
        let passed = result.passed && in_time;
        if !passed {
            failures += 1;
        }
        let line = format!(
            "[{}] {id:>2} {name}: {} [{:.1}s, budget {}s{}]",
            if passed { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("{l}");
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}
