//! Verification harness: Monte-Carlo check of the prediction-error
//! decomposition, image-domain noise correlation, and a gated suite of
//! adjoint and gradient identities.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::experiment::derive_seed;
use crate::fbp::{fbp_reconstruct, fbp_subset};
use crate::geometry::{BeamKind, ScanGeometry, Sinogram};
use crate::image::ImageGrid;
use crate::net::{Activation, Architecture, DenoiserModel};
use crate::noise::{postlog, simulate_counts};
use crate::phantom::make_shepp_logan;
use crate::projector::{back_project, build_dense_operator, forward_project};
use crate::real::Real;
use crate::rotate::{rotate_adjoint, rotate_image, rotation_matrix};
use crate::split::partition_angles;
use crate::train::loss_ran2i;

/// Gates are this many Monte-Carlo standard errors wide.
pub const SE_GATE: f64 = 4.0;
pub const MAX_ORACLE_SIZE: usize = 16;
pub const MAX_ORACLE_ANGLES: usize = 24;

const TAG_TRIAL: u64 = 11;
const TAG_SECOND: u64 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            se: (var / n).sqrt(),
        }
    }

    /// `|mean| < k·se`, or an exact zero when the spread vanishes.
    pub fn within(&self, k: f64) -> bool {
        if self.se == 0.0 {
            self.mean == 0.0
        } else {
            self.mean.abs() < k * self.se
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MeasurementNoise {
    None,
    /// Additive zero-mean Gaussian on the line integrals.
    Gaussian { sigma: f64 },
    /// Poisson counts followed by the log transform.
    Poisson { i0: f64 },
}

#[derive(Clone, Debug)]
pub enum Prop1Denoiser {
    /// Fixed dense map `0.5·I + G` with `G_ij ~ N(0, 1/d)`.
    RandomLinear { seed: u64 },
    /// Returns the noiseless target-subset reconstruction regardless of input.
    Oracle,
    Model(DenoiserModel<f64>),
}

#[derive(Clone, Debug)]
pub struct Prop1Config {
    pub trials: usize,
    pub seed: u64,
    pub n: usize,
    pub angles: usize,
    pub n_detectors: usize,
    pub detector_pitch: f64,
    pub rotation_deg: f64,
    pub noise: MeasurementNoise,
    pub denoiser: Prop1Denoiser,
}

impl Prop1Config {
    /// 16×16 Shepp-Logan, 24 parallel views, two splits, Gaussian noise,
    /// random linear denoiser, quarter-turn rotation.
    pub fn default_run(trials: usize, seed: u64) -> Self {
        Self {
            trials,
            seed,
            n: 16,
            angles: 24,
            n_detectors: 48,
            detector_pitch: 0.5,
            rotation_deg: 90.0,
            noise: MeasurementNoise::Gaussian { sigma: 0.5 },
            denoiser: Prop1Denoiser::RandomLinear { seed },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub trials: usize,
    pub rotation_deg: f64,
    pub noise: MeasurementNoise,
    pub lhs: MeanSe,
    pub rhs: MeanSe,
    /// Per-trial `lhs - rhs`, which equals the sum of the cross terms.
    pub difference: MeanSe,
    /// `‖f - x*‖²`, `‖x* - x̂‖²`, `‖T f - T x*‖²`, `‖T x* - T x̂‖²`.
    pub terms: [MeanSe; 4],
    /// `2⟨f - x*, x* - x̂⟩` and its rotated counterpart.
    pub cross: [MeanSe; 2],
    /// Mean of `‖T e‖² - ‖e‖²` for the prediction error `e`, using the
    /// explicit rotation matrix; zero for quarter turns.
    pub non_unitarity_residual: f64,
    pub passed: bool,
}

impl Prop1Report {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "prediction-error decomposition: {} trials, rotation {}°, noise {:?}", self.trials, self.rotation_deg, self.noise);
        let row = |out: &mut String, name: &str, v: &MeanSe| {
            let _ = writeln!(out, "  {name:<28} {:>14.6e} ± {:.3e}", v.mean, v.se);
        };
        row(&mut out, "lhs", &self.lhs);
        row(&mut out, "rhs", &self.rhs);
        row(&mut out, "lhs - rhs", &self.difference);
        for (i, t) in self.terms.iter().enumerate() {
            row(&mut out, &format!("term {}", i + 1), t);
        }
        row(&mut out, "cross (plain)", &self.cross[0]);
        row(&mut out, "cross (rotated)", &self.cross[1]);
        let _ = writeln!(out, "  non-unitarity residual       {:>14.6e}", self.non_unitarity_residual);
        let _ = writeln!(out, "  gate ({SE_GATE} SE): {}", if self.passed { "PASS" } else { "FAIL" });
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn noisy_copy(clean: &Sinogram<f64>, noise: MeasurementNoise, seed: u64) -> Result<Sinogram<f64>> {
    match noise {
        MeasurementNoise::None => Ok(clean.clone()),
        MeasurementNoise::Gaussian { sigma } => {
            let normal = Normal::new(0.0, sigma).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = clean.data().iter().map(|&v| v + normal.sample(&mut rng)).collect();
            Sinogram::new(clean.geometry().clone(), data)
        }
        MeasurementNoise::Poisson { i0 } => Ok(postlog(&simulate_counts(clean, i0, seed)?)),
    }
}

/// Monte-Carlo estimate of both sides of the prediction-error decomposition
/// for a fixed object, fixed denoiser and one section `(J, J^C)` of a two-way split.
pub fn verify_prop1(cfg: &Prop1Config) -> Result<Prop1Report> {
    if cfg.n > MAX_ORACLE_SIZE || cfg.angles > MAX_ORACLE_ANGLES {
        return invalid(format!(
            "instance too large: image ≤ {MAX_ORACLE_SIZE}, angles ≤ {MAX_ORACLE_ANGLES}"
        ));
    }
    if cfg.trials < 2 {
        return invalid("at least two trials are required");
    }
    match cfg.noise {
        MeasurementNoise::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
            return invalid("noise sigma must be finite and non-negative")
        }
        MeasurementNoise::Poisson { i0 } if !(i0 > 0.0 && i0.is_finite()) => return invalid("i0 must be positive"),
        _ => {}
    }
    let n = cfg.n;
    let d = n * n;
    let geometry = ScanGeometry::parallel(
        ScanGeometry::uniform_angles(BeamKind::Parallel, cfg.angles),
        cfg.n_detectors,
        cfg.detector_pitch,
    )?;
    let x = make_shepp_logan::<f64>(n, 1.0, 1.0)?;
    let clean = forward_project(&x, &geometry)?;
    let partition = partition_angles(cfg.angles, 2)?;
    let section = &partition.sections()[0];
    let (target_set, input_set) = (&section.target, &section.input);
    let target_angles: Vec<usize> = target_set.iter().flat_map(|&j| partition.subsets()[j].iter().copied()).collect();
    let input_angles: Vec<usize> = input_set.iter().flat_map(|&j| partition.subsets()[j].iter().copied()).collect();
    let x_star = fbp_subset(&clean, &target_angles, n, 1.0)?;
    let linear: Option<Vec<f64>> = match &cfg.denoiser {
        Prop1Denoiser::RandomLinear { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
            let mut m: Vec<f64> = (0..d * d).map(|_| normal.sample(&mut rng)).collect();
            for i in 0..d {
                m[i * d + i] += 0.5;
            }
            Some(m)
        }
        _ => None,
    };
    if let Prop1Denoiser::Model(model) = &cfg.denoiser {
        let _ = model.forward(&ImageGrid::zeros(n, 1.0));
    }
    let apply = |input: &ImageGrid<f64>| -> Vec<f64> {
        match &cfg.denoiser {
            Prop1Denoiser::RandomLinear { .. } => {
                let m = linear.as_ref().expect("matrix built");
                (0..d).map(|i| dot(&m[i * d..(i + 1) * d], input.data())).collect()
            }
            Prop1Denoiser::Oracle => x_star.data().to_vec(),
            Prop1Denoiser::Model(model) => model.forward(input).into_data(),
        }
    };
    let rot = |v: &[f64]| rotate_image(&ImageGrid::from_raw(n, 1.0, v.to_vec()), cfg.rotation_deg).into_data();
    let matrix = rotation_matrix(n, cfg.rotation_deg);
    let xs = x_star.data();
    let t_xs = rot(xs);

    let per_trial: Vec<[f64; 9]> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<[f64; 9]> {
            let y = noisy_copy(&clean, cfg.noise, derive_seed(cfg.seed, TAG_TRIAL, t as u64))?;
            let x_hat = fbp_subset(&y, &target_angles, n, 1.0)?;
            let x_in = fbp_subset(&y, &input_angles, n, 1.0)?;
            let f = apply(&x_in);
            let xh = x_hat.data();
            let (t_f, t_xh) = (rot(&f), rot(xh));
            let lhs = sq_dist(&f, xh) + sq_dist(&t_f, &t_xh);
            let terms = [
                sq_dist(&f, xs),
                sq_dist(xs, xh),
                sq_dist(&t_f, &t_xs),
                sq_dist(&t_xs, &t_xh),
            ];
            let c0 = 2.0 * dot(&sub(&f, xs), &sub(xs, xh));
            let c1 = 2.0 * dot(&sub(&t_f, &t_xs), &sub(&t_xs, &t_xh));
            let rhs: f64 = terms.iter().sum();
            let e = sub(&f, xh);
            let te = matrix.apply(&e);
            let residual = dot(&te, &te) - dot(&e, &e);
            Ok([lhs, rhs, terms[0], terms[1], terms[2], terms[3], c0, c1, residual])
        })
        .collect::<Result<_>>()?;
    let col = |k: usize| MeanSe::of(&per_trial.iter().map(|r| r[k]).collect::<Vec<_>>());
    let difference = MeanSe::of(&per_trial.iter().map(|r| r[0] - r[1]).collect::<Vec<_>>());
    let cross = [col(6), col(7)];
    let passed = difference.within(SE_GATE) && cross.iter().all(|c| c.within(SE_GATE));
    Ok(Prop1Report {
        trials: cfg.trials,
        rotation_deg: cfg.rotation_deg,
        noise: cfg.noise,
        lhs: col(0),
        rhs: col(1),
        difference,
        terms: [col(2), col(3), col(4), col(5)],
        cross,
        non_unitarity_residual: col(8).mean,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationConfig {
    pub n: usize,
    pub angles: usize,
    pub n_detectors: usize,
    pub detector_pitch: f64,
    /// `None` simulates noiseless acquisitions.
    pub i0: Option<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl CorrelationConfig {
    pub fn default_run(i0: Option<f64>, trials: usize, seed: u64) -> Self {
        Self {
            n: 16,
            angles: 24,
            n_detectors: 48,
            detector_pitch: 0.5,
            i0,
            trials,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub trials: usize,
    /// Pooled pixel-wise correlation between noise images of two independent
    /// acquisitions; `None` when the noise variance is zero.
    pub cross_correlation: Option<f64>,
    /// Pooled correlation of horizontally adjacent pixels within one noise image.
    pub adjacent_correlation: Option<f64>,
    pub passed: bool,
}

impl CorrelationReport {
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("N/A".to_string(), |c| format!("{c:+.4}"));
        format!(
            "image-domain noise correlation ({} trials)\n  independent acquisitions: {} (gate |c| < 0.05)\n  adjacent pixels:          {} (gate |c| > 0.1)\n  result: {}\n",
            self.trials,
            fmt(self.cross_correlation),
            fmt(self.adjacent_correlation),
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Pearson correlation of paired samples; `None` if either side is constant.
fn pooled_correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Noise images `R y - R y*` of independent acquisitions of a fixed phantom.
pub fn measure_image_noise_correlation(cfg: &CorrelationConfig) -> Result<CorrelationReport> {
    if cfg.n > 2 * MAX_ORACLE_SIZE || cfg.angles > 4 * MAX_ORACLE_ANGLES {
        return invalid("instance too large for the correlation oracle");
    }
    if cfg.trials < 2 {
        return invalid("at least two trials are required");
    }
    let n = cfg.n;
    let geometry = ScanGeometry::parallel(
        ScanGeometry::uniform_angles(BeamKind::Parallel, cfg.angles),
        cfg.n_detectors,
        cfg.detector_pitch,
    )?;
    let x = make_shepp_logan::<f64>(n, 1.0, 0.05)?;
    let clean = forward_project(&x, &geometry)?;
    let base = fbp_reconstruct(&clean, n, 1.0)?;
    let noise = match cfg.i0 {
        Some(i0) => MeasurementNoise::Poisson { i0 },
        None => MeasurementNoise::None,
    };
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<_> {
            let one = |tag| -> Result<Vec<f64>> {
                let y = noisy_copy(&clean, noise, derive_seed(cfg.seed, tag, t as u64))?;
                Ok(sub(fbp_reconstruct(&y, n, 1.0)?.data(), base.data()))
            };
            Ok((one(TAG_TRIAL)?, one(TAG_SECOND)?))
        })
        .collect::<Result<_>>()?;
    // centre each pixel across trials so pooled statistics ignore the pixel mean
    let centre = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<Vec<f64>> {
        let mut mean = vec![0.0; n * n];
        for p in &pairs {
            for (m, v) in mean.iter_mut().zip(pick(p)) {
                *m += v / cfg.trials as f64;
            }
        }
        pairs.iter().map(|p| sub(pick(p), &mean)).collect()
    };
    let first = centre(|p| &p.0);
    let second = centre(|p| &p.1);
    let flat = |v: &Vec<Vec<f64>>| v.iter().flatten().copied().collect::<Vec<f64>>();
    let cross = pooled_correlation(&flat(&first), &flat(&second));
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for img in &first {
        for r in 0..n {
            for c in 0..n - 1 {
                left.push(img[r * n + c]);
                right.push(img[r * n + c + 1]);
            }
        }
    }
    let adjacent = pooled_correlation(&left, &right);
    let passed = match (cross, adjacent) {
        (Some(c), Some(a)) => c.abs() < 0.05 && a.abs() > 0.1,
        _ => cfg.i0.is_none(),
    };
    Ok(CorrelationReport {
        trials: cfg.trials,
        cross_correlation: cross,
        adjacent_correlation: adjacent,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckResult {
    fn below(name: &str, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            measured,
            threshold,
            passed: measured < threshold,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {:<40} measured {:.3e} threshold {:.3e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.threshold
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn random_positive(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// Largest `|⟨Ax, y⟩ - ⟨x, Bᵀy⟩| / |⟨Ax, y⟩|` over random positive pairs,
/// where `back` stands in for the adjoint.
pub fn projector_adjoint_error<T: Real>(
    geometry: &ScanGeometry,
    n: usize,
    pixel_size: f64,
    pairs: usize,
    seed: u64,
    back: impl Fn(&Sinogram<T>, usize, f64) -> Result<ImageGrid<T>>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let x: Vec<T> = random_positive(n * n, &mut rng).into_iter().map(T::of).collect();
        let y: Vec<T> = random_positive(geometry.n_rays(), &mut rng).into_iter().map(T::of).collect();
        let x = ImageGrid::new(n, n, pixel_size, x)?;
        let y = Sinogram::new(geometry.clone(), y)?;
        let lhs = forward_project(&x, geometry)?.dot(&y);
        let rhs = x.dot(&back(&y, n, pixel_size)?);
        worst = worst.max((lhs - rhs).abs() / lhs.abs());
    }
    Ok(worst)
}

/// Largest relative difference between the matrix-free projector and the
/// dense operator, on random images.
pub fn dense_oracle_error(geometry: &ScanGeometry, n: usize, pixel_size: f64, pairs: usize, seed: u64) -> Result<f64> {
    let dense = build_dense_operator(geometry, n, pixel_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let x = random_positive(n * n, &mut rng);
        let image = ImageGrid::new(n, n, pixel_size, x.clone())?;
        let sparse = forward_project(&image, geometry)?;
        let reference = dense.apply(&x)?;
        let diff = sq_dist(sparse.data(), &reference).sqrt();
        let norm = dot(&reference, &reference).sqrt();
        worst = worst.max(diff / norm);
        let y = random_positive(geometry.n_rays(), &mut rng);
        let bp = back_project(&Sinogram::new(geometry.clone(), y.clone())?, n, pixel_size)?;
        let reference = dense.apply_transpose(&y)?;
        worst = worst.max(sq_dist(bp.data(), &reference).sqrt() / dot(&reference, &reference).sqrt());
    }
    Ok(worst)
}

/// Relative error of analytic against central finite-difference derivatives,
/// with magnitudes below `floor` treated as `floor`.
fn fd_relative(fd: f64, analytic: f64, floor: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_FLOOR: f64 = 1e-3;

/// Worst finite-difference error over every parameter of `arch` for a
/// scalar loss of the model output, plus the input gradient.
pub fn network_gradient_error(arch: &Architecture, n: usize, seed: u64) -> Result<f64> {
    let base = DenoiserModel::<f64>::init(arch.clone(), seed)?;
    let mut params = base.params().clone();
    for s in params.scales.iter_mut().flatten() {
        *s = 0.8;
    }
    let model = DenoiserModel::from_parameters(arch.clone(), params.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
    let x = ImageGrid::new(n, n, 1.0, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let probe: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    // loss = Σ (½ out² · probe + out), upstream = out · probe + 1
    let loss = |m: &DenoiserModel<f64>, input: &ImageGrid<f64>| -> f64 {
        m.forward(input).data().iter().zip(&probe).map(|(o, p)| 0.5 * o * o * p + o).sum()
    };
    let out = model.forward(&x);
    let upstream = ImageGrid::new(n, n, 1.0, out.data().iter().zip(&probe).map(|(o, p)| o * p + 1.0).collect())?;
    let (grads, gx) = model.backward(&x, &upstream)?;
    let analytic = grads.flatten();
    let mut worst: f64 = 0.0;
    let mut idx = 0;
    let count = params.kernels.len() + params.scales.len();
    for t in 0..count {
        let len = params.tensors().nth(t).map_or(0, |v| v.len());
        for e in 0..len {
            let shifted = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                p.tensors_mut().nth(t).expect("tensor exists")[e] += delta;
                Ok(loss(&DenoiserModel::from_parameters(arch.clone(), p)?, &x))
            };
            let fd = (shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max(fd_relative(fd, analytic[idx], FD_FLOOR));
            idx += 1;
        }
    }
    for p in 0..n * n {
        let shifted = |delta: f64| -> Result<f64> {
            let mut v = x.data().to_vec();
            v[p] += delta;
            Ok(loss(&model, &ImageGrid::new(n, n, 1.0, v)?))
        };
        let fd = (shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP);
        worst = worst.max(fd_relative(fd, gx.data()[p], FD_FLOOR));
    }
    Ok(worst)
}

/// Worst finite-difference error of the full rotation-augmented loss.
pub fn ran2i_gradient_error(arch: &Architecture, n: usize, angles: &[f64], aug_weight: f64, seed: u64) -> Result<f64> {
    let model = DenoiserModel::<f64>::init(arch.clone(), seed)?;
    let params = model.params().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A);
    let mut img = || ImageGrid::new(n, n, 1.0, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (x, t) = (img()?, img()?);
    let (_, grads) = loss_ran2i(&model, &x, &t, angles, aug_weight)?;
    let analytic = grads.flatten();
    let mut worst: f64 = 0.0;
    let mut idx = 0;
    for ti in 0..params.kernels.len() + params.scales.len() {
        let len = params.tensors().nth(ti).map_or(0, |v| v.len());
        for e in 0..len {
            let shifted = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                p.tensors_mut().nth(ti).expect("tensor exists")[e] += delta;
                let m = DenoiserModel::from_parameters(arch.clone(), p)?;
                Ok(loss_ran2i(&m, &x, &t, angles, aug_weight)?.0.total)
            };
            let fd = (shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max(fd_relative(fd, analytic[idx], FD_FLOOR));
            idx += 1;
        }
    }
    Ok(worst)
}

/// `|⟨T x, y⟩ - ⟨x, Tᵀ y⟩| / |⟨T x, y⟩|` for a random positive pair.
pub fn rotation_adjoint_error(n: usize, degrees: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = ImageGrid::new(n, n, 1.0, random_positive(n * n, &mut rng))?;
    let y = ImageGrid::new(n, n, 1.0, random_positive(n * n, &mut rng))?;
    let lhs = rotate_image(&x, degrees).dot(&y);
    let rhs = x.dot(&rotate_adjoint(&y, degrees));
    Ok((lhs - rhs).abs() / lhs.abs())
}

/// Standard instance for the projector adjoint gates: 16×16, 24 views, 23 detectors.
pub fn adjoint_geometry(kind: BeamKind) -> Result<ScanGeometry> {
    let angles = ScanGeometry::uniform_angles(kind, 24);
    match kind {
        BeamKind::Parallel => ScanGeometry::parallel(angles, 23, 1.0),
        BeamKind::Fan => ScanGeometry::fan(angles, 23, 2.0, 40.0, 20.0),
    }
}

/// Runs every projector and network identity check with the given backprojector.
pub fn adjoint_and_gradient_suite_with(
    back64: impl Fn(&Sinogram<f64>, usize, f64) -> Result<ImageGrid<f64>> + Copy,
) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    let par = adjoint_geometry(BeamKind::Parallel)?;
    let fan = adjoint_geometry(BeamKind::Fan)?;
    let par64 = projector_adjoint_error::<f64>(&par, 16, 1.0, 100, 1, back64)?;
    report.checks.push(CheckResult::below("projector adjoint, parallel, f64", par64, 1e-12));
    let fan64 = projector_adjoint_error::<f64>(&fan, 16, 1.0, 100, 2, back64)?;
    report.checks.push(CheckResult::below("projector adjoint, fan, f64", fan64, 1e-12));
    let par32 = projector_adjoint_error::<f32>(&par, 16, 1.0, 100, 1, back_project::<f32>)?;
    report.checks.push(CheckResult::below("projector adjoint, parallel, f32", par32, 1e-4));
    // f64 must be at least three orders of magnitude tighter than f32
    let ratio = if par32 == 0.0 { f64::INFINITY } else { par64 / par32 };
    report.checks.push(CheckResult::below("precision scaling f64/f32", ratio, 1e-3));
    let small = ScanGeometry::parallel(ScanGeometry::uniform_angles(BeamKind::Parallel, 12), 13, 1.0)?;
    report.checks.push(CheckResult::below("dense operator oracle, 8x8", dense_oracle_error(&small, 8, 1.0, 10, 3)?, 1e-10));
    for (name, deg) in [("rotation adjoint, 37 deg", 37.0), ("rotation adjoint, 270 deg", 270.0)] {
        report.checks.push(CheckResult::below(name, rotation_adjoint_error(16, deg, 4)?, 1e-12));
    }
    let linear = Architecture {
        depth: 2,
        channels: 2,
        residual: false,
        normalize: false,
        activation: Activation::Identity,
    };
    let relu = Architecture::new(2, 2, false)?;
    let residual = Architecture::new(3, 2, true)?;
    for (name, arch) in [
        ("gradient: conv layers", linear),
        ("gradient: conv + scale + relu", relu),
        ("gradient: residual depth 3", residual),
    ] {
        report.checks.push(CheckResult::below(name, network_gradient_error(&arch, 8, 5)?, 1e-6));
    }
    let ran2i = ran2i_gradient_error(&Architecture::new(2, 2, true)?, 8, &[37.0, 90.0], 1.0, 6)?;
    report.checks.push(CheckResult::below("gradient: rotation-augmented loss", ran2i, 1e-6));
    Ok(report)
}

pub fn adjoint_and_gradient_suite() -> Result<SuiteReport> {
    adjoint_and_gradient_suite_with(back_project::<f64>)
}
