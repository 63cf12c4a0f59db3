//! Phantom datasets and the denoising experiments built on them.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fbp::{fbp_reconstruct, fbp_subset};
use crate::geometry::{BeamKind, ScanGeometry, Sinogram};
use crate::image::ImageGrid;
use crate::metrics::{metric_psnr, metric_ssim};
use crate::net::DenoiserModel;
use crate::noise::{postlog, simulate_counts, CountData};
use crate::phantom::{make_random_phantom, make_shepp_logan};
use crate::real::Real;
use crate::rotate::RotationMode;
use crate::split::{partition_angles, split_sinogram, AngularPartition};
use crate::train::{infer_average, section_inputs, train, LossKind, TrainConfig, TrainingSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub phantom: PhantomKind,
    pub count: usize,
    pub n: usize,
    pub pixel_size: f64,
    /// Peak attenuation in mm⁻¹.
    pub contrast: f64,
    pub beam: BeamKind,
    pub angles: usize,
    pub n_detectors: usize,
    pub detector_pitch: f64,
    pub dso: f64,
    pub dod: f64,
    /// Incident photons per ray; `None` simulates noiseless data.
    pub i0: Option<f64>,
    pub splits: usize,
    pub seed: u64,
}

impl SimulationConfig {
    /// 64×64 random-ellipse phantoms, 64 parallel views over 192 detectors
    /// of 0.5 mm, 10⁴ photons, two splits.
    pub fn desk(count: usize, seed: u64) -> Self {
        Self {
            phantom: PhantomKind::RandomEllipses,
            count,
            n: 64,
            pixel_size: 1.0,
            contrast: 0.02,
            beam: BeamKind::Parallel,
            angles: 64,
            n_detectors: 192,
            detector_pitch: 0.5,
            dso: 200.0,
            dod: 100.0,
            i0: Some(1e4),
            splits: 2,
            seed,
        }
    }

    /// Same object grid as [`SimulationConfig::desk`] under a flat-detector fan beam.
    pub fn desk_fan(count: usize, seed: u64) -> Self {
        Self {
            beam: BeamKind::Fan,
            detector_pitch: 0.75,
            ..Self::desk(count, seed)
        }
    }

    pub fn geometry(&self) -> Result<ScanGeometry> {
        let angles = ScanGeometry::uniform_angles(self.beam, self.angles);
        match self.beam {
            BeamKind::Parallel => ScanGeometry::parallel(angles, self.n_detectors, self.detector_pitch),
            BeamKind::Fan => ScanGeometry::fan(angles, self.n_detectors, self.detector_pitch, self.dso, self.dod),
        }
    }

    pub fn partition(&self) -> Result<AngularPartition> {
        partition_angles(self.angles, self.splits)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return invalid("phantom count must be at least 1");
        }
        if let Some(i0) = self.i0 {
            if !(i0 > 0.0 && i0.is_finite()) {
                return invalid(format!("i0 must be positive, got {i0}"));
            }
        }
        if !(self.contrast > 0.0 && self.contrast.is_finite()) {
            return invalid("contrast must be positive");
        }
        self.partition()?;
        self.geometry()?.check_image_fits(self.n, self.pixel_size)
    }
}

/// Independent 64-bit seed for item `index` of stream `tag`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_PHANTOM: u64 = 1;
const TAG_NOISE: u64 = 2;

#[derive(Clone, Debug)]
pub struct SimulatedImage<T> {
    pub clean: ImageGrid<T>,
    pub clean_sinogram: Sinogram<T>,
    pub counts: Option<CountData>,
    pub noisy_sinogram: Sinogram<T>,
    pub sub_sinograms: Vec<Sinogram<T>>,
    pub sub_recons: Vec<ImageGrid<T>>,
    pub full_recon: ImageGrid<T>,
}

pub fn simulate_image<T: Real>(cfg: &SimulationConfig, index: usize) -> Result<SimulatedImage<T>> {
    let geometry = cfg.geometry()?;
    let partition = cfg.partition()?;
    let clean: ImageGrid<T> = match cfg.phantom {
        PhantomKind::SheppLogan => make_shepp_logan(cfg.n, cfg.pixel_size, cfg.contrast)?,
        PhantomKind::RandomEllipses => make_random_phantom(
            cfg.n,
            cfg.pixel_size,
            cfg.contrast,
            derive_seed(cfg.seed, TAG_PHANTOM, index as u64),
        )?,
    };
    let clean_sinogram = crate::projector::forward_project(&clean, &geometry)?;
    let (counts, noisy_sinogram) = match cfg.i0 {
        Some(i0) => {
            let counts = simulate_counts(&clean_sinogram, i0, derive_seed(cfg.seed, TAG_NOISE, index as u64))?;
            let sino = postlog(&counts);
            (Some(counts), sino)
        }
        None => (None, clean_sinogram.clone()),
    };
    let sub_sinograms = split_sinogram(&noisy_sinogram, &partition)?;
    let sub_recons = partition
        .subsets()
        .iter()
        .map(|s| fbp_subset(&noisy_sinogram, s, cfg.n, cfg.pixel_size))
        .collect::<Result<Vec<_>>>()?;
    let full_recon = fbp_reconstruct(&noisy_sinogram, cfg.n, cfg.pixel_size)?;
    Ok(SimulatedImage {
        clean,
        clean_sinogram,
        counts,
        noisy_sinogram,
        sub_sinograms,
        sub_recons,
        full_recon,
    })
}

/// Simulates `cfg.count` images; each depends only on `(seed, index)`.
pub fn simulate_dataset<T: Real>(cfg: &SimulationConfig) -> Result<Vec<SimulatedImage<T>>> {
    cfg.validate()?;
    (0..cfg.count).into_par_iter().map(|i| simulate_image(cfg, i)).collect()
}

/// Training samples of the kind `loss` consumes.
pub fn training_samples<T: Real>(
    images: &[SimulatedImage<T>],
    partition: &AngularPartition,
    loss: LossKind,
) -> Result<Vec<TrainingSample<T>>> {
    images
        .iter()
        .map(|im| match loss {
            LossKind::N2i | LossKind::Ran2i => Ok(TrainingSample::Splits {
                sub_recons: im.sub_recons.clone(),
                partition: partition.clone(),
            }),
            LossKind::Supervised => Ok(TrainingSample::NoisyClean {
                noisy: im.full_recon.clone(),
                clean: im.clean.clone(),
            }),
            LossKind::N2n => invalid("independent acquisition pairs are not part of a single-scan dataset"),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// PSNR and SSIM against `reference`, with data range `max - min` of the reference.
pub fn score<T: Real>(image_id: usize, x: &ImageGrid<T>, reference: &ImageGrid<T>) -> Result<ImageScore> {
    let range = (reference.max_value() - reference.min_value()).as_f64();
    Ok(ImageScore {
        image_id,
        psnr_db: metric_psnr(x, reference, range)?,
        ssim: metric_ssim(x, reference, range)?,
    })
}

/// Denoised estimate of one image: the model averaged over section inputs.
pub fn denoise<T: Real>(
    model: &DenoiserModel<T>,
    image: &SimulatedImage<T>,
    partition: &AngularPartition,
    loss: LossKind,
) -> Result<ImageGrid<T>> {
    match loss {
        LossKind::Supervised | LossKind::N2n => Ok(model.forward(&image.full_recon)),
        LossKind::N2i | LossKind::Ran2i => infer_average(model, &section_inputs(&image.sub_recons, partition)?),
    }
}

pub fn evaluate_model<T: Real>(
    model: &DenoiserModel<T>,
    test: &[SimulatedImage<T>],
    partition: &AngularPartition,
    loss: LossKind,
) -> Result<Vec<ImageScore>> {
    test.par_iter()
        .enumerate()
        .map(|(i, im)| score(i, &denoise(model, im, partition, loss)?, &im.clean))
        .collect()
}

/// Scores of the noisy split reconstructions: per image, the mean over subsets.
pub fn split_input_scores<T: Real>(test: &[SimulatedImage<T>]) -> Result<Vec<ImageScore>> {
    test.iter()
        .enumerate()
        .map(|(i, im)| {
            let parts = im
                .sub_recons
                .iter()
                .map(|r| score(i, r, &im.clean))
                .collect::<Result<Vec<_>>>()?;
            let k = parts.len() as f64;
            Ok(ImageScore {
                image_id: i,
                psnr_db: parts.iter().map(|s| s.psnr_db).sum::<f64>() / k,
                ssim: parts.iter().map(|s| s.ssim).sum::<f64>() / k,
            })
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

pub fn summarize(scores: &[ImageScore]) -> ScoreSummary {
    let (psnr_mean, psnr_std) = mean_std(&scores.iter().map(|s| s.psnr_db).collect::<Vec<_>>());
    let (ssim_mean, ssim_std) = mean_std(&scores.iter().map(|s| s.ssim).collect::<Vec<_>>());
    ScoreSummary {
        psnr_mean,
        psnr_std,
        ssim_mean,
        ssim_std,
    }
}

/// Evaluation CSV: one row per image and method, then mean and std rows.
pub fn evaluation_csv(rows: &[(String, Vec<ImageScore>)]) -> String {
    let mut out = String::from("image_id,method,psnr_db,ssim\n");
    for (method, scores) in rows {
        for s in scores {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", s.image_id, method, s.psnr_db, s.ssim);
        }
    }
    for (method, scores) in rows {
        let sum = summarize(scores);
        let _ = writeln!(out, "mean,{},{:.6},{:.6}", method, sum.psnr_mean, sum.ssim_mean);
        let _ = writeln!(out, "std,{},{:.6},{:.6}", method, sum.psnr_std, sum.ssim_std);
    }
    out
}

/// Shared setup for the A/B comparison, the rotation sweep and the
/// cross-geometry protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub simulation: SimulationConfig,
    pub train_count: usize,
    pub test_count: usize,
    pub training: TrainConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// 32 phantoms split 24/8, 40 epochs, seeds 1..=3.
    pub fn desk() -> Self {
        Self {
            simulation: SimulationConfig::desk(32, 2024),
            train_count: 24,
            test_count: 8,
            training: TrainConfig::desk(LossKind::Ran2i, 40, 1),
            seeds: vec![1, 2, 3],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.train_count == 0 || self.test_count == 0 {
            return invalid("train and test counts must be positive");
        }
        if self.train_count + self.test_count > self.simulation.count {
            return invalid("train + test count exceeds the simulated count");
        }
        if self.seeds.is_empty() {
            return invalid("at least one seed is required");
        }
        self.training.validate()
    }
}

/// Trains `loss` with `seed` and scores it on `test`.
fn train_and_score<T: Real>(
    exp: &ExperimentConfig,
    train_set: &[SimulatedImage<T>],
    test_sets: &[(&[SimulatedImage<T>], &AngularPartition)],
    partition: &AngularPartition,
    loss: LossKind,
    seed: u64,
    tweak: impl FnOnce(&mut TrainConfig),
) -> Result<(Vec<Vec<ImageScore>>, f64)> {
    let mut cfg = exp.training.clone();
    cfg.loss_kind = loss;
    cfg.seed = seed;
    cfg.rotation.seed = seed;
    tweak(&mut cfg);
    let samples = training_samples(train_set, partition, loss)?;
    let (model, history) = train(&cfg, &samples)?;
    let scores = test_sets
        .iter()
        .map(|(set, p)| evaluate_model(&model, set, p, loss))
        .collect::<Result<Vec<_>>>()?;
    Ok((scores, history.final_quartile_mean()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbSeedResult {
    pub seed: u64,
    pub n2i_psnr: f64,
    pub ran2i_psnr: f64,
    pub n2i_ssim: f64,
    pub ran2i_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    pub input_psnr: f64,
    pub input_ssim: f64,
    pub per_seed: Vec<AbSeedResult>,
    pub n2i_psnr: f64,
    pub ran2i_psnr: f64,
}

impl AbReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "noisy split FBP input: PSNR {:.3} dB, SSIM {:.4}", self.input_psnr, self.input_ssim);
        for r in &self.per_seed {
            let _ = writeln!(
                out,
                "seed {}: N2I {:.3} dB / {:.4}, RAN2I {:.3} dB / {:.4}",
                r.seed, r.n2i_psnr, r.n2i_ssim, r.ran2i_psnr, r.ran2i_ssim
            );
        }
        let _ = writeln!(out, "mean: N2I {:.3} dB, RAN2I {:.3} dB", self.n2i_psnr, self.ran2i_psnr);
        out
    }
}

/// N2I against RAN2I on the same data for every seed in `exp.seeds`.
pub fn run_ab<T: Real>(exp: &ExperimentConfig) -> Result<AbReport> {
    exp.validate()?;
    let data = simulate_dataset::<T>(&exp.simulation)?;
    let partition = exp.simulation.partition()?;
    let (train_set, rest) = data.split_at(exp.train_count);
    let test = &rest[..exp.test_count];
    let input = summarize(&split_input_scores(test)?);
    let mut per_seed = Vec::new();
    for &seed in &exp.seeds {
        let run = |loss| -> Result<ScoreSummary> {
            let (scores, _) = train_and_score(exp, train_set, &[(test, &partition)], &partition, loss, seed, |_| {})?;
            Ok(summarize(&scores[0]))
        };
        let n2i = run(LossKind::N2i)?;
        let ran2i = run(LossKind::Ran2i)?;
        per_seed.push(AbSeedResult {
            seed,
            n2i_psnr: n2i.psnr_mean,
            ran2i_psnr: ran2i.psnr_mean,
            n2i_ssim: n2i.ssim_mean,
            ran2i_ssim: ran2i.ssim_mean,
        });
    }
    let avg = |f: fn(&AbSeedResult) -> f64| per_seed.iter().map(f).sum::<f64>() / per_seed.len() as f64;
    Ok(AbReport {
        input_psnr: input.psnr_mean,
        input_ssim: input.ssim_mean,
        n2i_psnr: avg(|r| r.n2i_psnr),
        ran2i_psnr: avg(|r| r.ran2i_psnr),
        per_seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: usize,
    pub mode: RotationMode,
    pub seed: u64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub final_loss: f64,
}

pub const SWEEP_CSV_HEADER: &str = "r,mode,seed,psnr_db,ssim,final_loss";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for row in rows {
        let mode = match row.mode {
            RotationMode::Fixed => "fixed",
            RotationMode::Random => "random",
        };
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.9e}",
            row.r, mode, row.seed, row.psnr_db, row.ssim, row.final_loss
        );
    }
    out
}

/// Mean PSNR per `(r, mode)` over seeds, in first-seen order.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(usize, RotationMode, f64)> {
    let mut keys: Vec<(usize, RotationMode)> = Vec::new();
    for row in rows {
        if !keys.contains(&(row.r, row.mode)) {
            keys.push((row.r, row.mode));
        }
    }
    keys.into_iter()
        .map(|(r, mode)| {
            let vals: Vec<f64> = rows.iter().filter(|x| x.r == r && x.mode == mode).map(|x| x.psnr_db).collect();
            (r, mode, mean_std(&vals).0)
        })
        .collect()
}

/// RAN2I over the cross product of rotation counts, modes and seeds.
pub fn run_sweep<T: Real>(exp: &ExperimentConfig, rotations: &[usize], modes: &[RotationMode]) -> Result<Vec<SweepRow>> {
    exp.validate()?;
    if rotations.is_empty() || modes.is_empty() || rotations.contains(&0) {
        return invalid("sweep needs at least one positive rotation count and one mode");
    }
    let data = simulate_dataset::<T>(&exp.simulation)?;
    let partition = exp.simulation.partition()?;
    let (train_set, rest) = data.split_at(exp.train_count);
    let test = &rest[..exp.test_count];
    let mut rows = Vec::new();
    for &r in rotations {
        for &mode in modes {
            for &seed in &exp.seeds {
                let (scores, final_loss) =
                    train_and_score(exp, train_set, &[(test, &partition)], &partition, LossKind::Ran2i, seed, |c| {
                        c.rotation.r = r;
                        c.rotation.mode = mode;
                    })?;
                let s = summarize(&scores[0]);
                rows.push(SweepRow {
                    r,
                    mode,
                    seed,
                    psnr_db: s.psnr_mean,
                    ssim: s.ssim_mean,
                    final_loss,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossGeometryRow {
    pub method: String,
    pub parallel: ScoreSummary,
    pub fan: ScoreSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossGeometryReport {
    pub rows: Vec<CrossGeometryRow>,
}

impl CrossGeometryReport {
    /// Methods as rows, test geometry as column groups, `mean ± std` cells.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| Method | Parallel PSNR (dB) | Parallel SSIM | Fan PSNR (dB) | Fan SSIM |");
        let _ = writeln!(out, "|---|---|---|---|---|");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {:.2} ± {:.2} | {:.4} ± {:.4} | {:.2} ± {:.2} | {:.4} ± {:.4} |",
                row.method,
                row.parallel.psnr_mean,
                row.parallel.psnr_std,
                row.parallel.ssim_mean,
                row.parallel.ssim_std,
                row.fan.psnr_mean,
                row.fan.psnr_std,
                row.fan.ssim_mean,
                row.fan.ssim_std
            );
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| {
            [&r.parallel, &r.fan]
                .iter()
                .all(|s| s.psnr_mean.is_finite() && s.ssim_mean.is_finite() && s.psnr_std.is_finite() && s.ssim_std.is_finite())
        })
    }
}

/// Trains on `exp.simulation` (parallel beam) and tests on both that geometry
/// and `fan`, which must share the detector count. Uses the first seed.
pub fn run_cross_geometry<T: Real>(exp: &ExperimentConfig, fan: &SimulationConfig) -> Result<CrossGeometryReport> {
    exp.validate()?;
    if fan.n_detectors != exp.simulation.n_detectors || fan.n != exp.simulation.n {
        return invalid("test geometry must match detector count and image size");
    }
    if fan.count < exp.test_count {
        return invalid("fan dataset smaller than the test count");
    }
    let data = simulate_dataset::<T>(&exp.simulation)?;
    let partition = exp.simulation.partition()?;
    let fan_partition = fan.partition()?;
    let (train_set, rest) = data.split_at(exp.train_count);
    let test = &rest[..exp.test_count];
    let fan_data = simulate_dataset::<T>(fan)?;
    let fan_test = &fan_data[..exp.test_count];
    let seed = exp.seeds[0];
    let mut rows = Vec::new();
    for (name, loss) in [
        ("Supervised", LossKind::Supervised),
        ("N2I", LossKind::N2i),
        ("RAN2I", LossKind::Ran2i),
    ] {
        let (scores, _) = train_and_score(
            exp,
            train_set,
            &[(test, &partition), (fan_test, &fan_partition)],
            &partition,
            loss,
            seed,
            |_| {},
        )?;
        rows.push(CrossGeometryRow {
            method: name.to_string(),
            parallel: summarize(&scores[0]),
            fan: summarize(&scores[1]),
        });
    }
    Ok(CrossGeometryReport { rows })
}
