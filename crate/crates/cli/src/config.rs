//! TOML run configuration. Every section is optional and falls back to the
//! desk-scale defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tomo_denoise::experiment::{PhantomKind, SimulationConfig};
use tomo_denoise::net::{Activation, Architecture};
use tomo_denoise::rotate::{RotationMode, RotationSchedule};
use tomo_denoise::train::{LossKind, TrainConfig};
use tomo_denoise::{BeamKind, Precision};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub simulation: SimulationSection,
    pub training: TrainingSection,
    pub sweep: SweepSection,
    /// Test-time acquisition for cross-geometry sweeps.
    pub test_simulation: Option<SimulationSection>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub phantom: PhantomKind,
    pub count: usize,
    pub n: usize,
    pub pixel_size: f64,
    pub contrast: f64,
    pub beam: BeamKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub detectors: usize,
    pub detector_pitch: f64,
    pub dso: f64,
    pub dod: f64,
    /// Photons per ray; `inf` disables noise.
    #[serde(rename = "I0")]
    pub i0: f64,
    #[serde(rename = "S")]
    pub s: usize,
    pub seed: u64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self::from_core(&SimulationConfig::desk(32, 2024))
    }
}

impl SimulationSection {
    pub fn from_core(c: &SimulationConfig) -> Self {
        Self {
            phantom: c.phantom,
            count: c.count,
            n: c.n,
            pixel_size: c.pixel_size,
            contrast: c.contrast,
            beam: c.beam,
            k: c.angles,
            detectors: c.n_detectors,
            detector_pitch: c.detector_pitch,
            dso: c.dso,
            dod: c.dod,
            i0: c.i0.unwrap_or(f64::INFINITY),
            s: c.splits,
            seed: c.seed,
        }
    }

    pub fn to_core(&self) -> Result<SimulationConfig, CliError> {
        if self.i0.is_nan() || self.i0 <= 0.0 {
            return Err(CliError::Usage(format!("I0 must be positive or inf, got {}", self.i0)));
        }
        let cfg = SimulationConfig {
            phantom: self.phantom,
            count: self.count,
            n: self.n,
            pixel_size: self.pixel_size,
            contrast: self.contrast,
            beam: self.beam,
            angles: self.k,
            n_detectors: self.detectors,
            detector_pitch: self.detector_pitch,
            dso: self.dso,
            dod: self.dod,
            i0: self.i0.is_finite().then_some(self.i0),
            splits: self.s,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| CliError::Usage(format!("invalid simulation config: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub loss: LossKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub r: usize,
    pub rotation: RotationMode,
    pub lambda: f64,
    pub depth: usize,
    pub channels: usize,
    pub residual: bool,
    pub normalize: bool,
    /// Leading images used for training; the rest are denoised as test output.
    pub train_count: Option<usize>,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            loss: LossKind::Ran2i,
            epochs: 40,
            lr: 1e-3,
            batch_size: 1,
            r: 2,
            rotation: RotationMode::Random,
            lambda: 1.0,
            depth: 5,
            channels: 16,
            residual: true,
            normalize: true,
            train_count: None,
            seed: 1,
        }
    }
}

impl TrainingSection {
    pub fn to_core(&self, precision: Precision) -> Result<TrainConfig, CliError> {
        let usage = |e: tomo_denoise::Error| CliError::Usage(format!("invalid training config: {e}"));
        let mut architecture = Architecture::new(self.depth, self.channels, self.residual).map_err(usage)?;
        architecture.normalize = self.normalize;
        architecture.activation = Activation::Relu;
        let cfg = TrainConfig {
            loss_kind: self.loss,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            rotation: RotationSchedule::new(self.rotation, self.r, self.seed).map_err(usage)?,
            aug_weight: self.lambda,
            seed: self.seed,
            precision,
            architecture,
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// RAN2I over rotation counts × modes × seeds.
    Rotation,
    /// Train on `[simulation]`, test on `[simulation]` and `[test_simulation]`.
    CrossGeometry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub kind: SweepKind,
    pub r: Vec<usize>,
    pub modes: Vec<RotationMode>,
    pub seeds: Vec<u64>,
    pub train_count: usize,
    pub test_count: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            kind: SweepKind::Rotation,
            r: vec![2, 4, 8, 16],
            modes: vec![RotationMode::Fixed, RotationMode::Random],
            seeds: vec![1, 2, 3],
            train_count: 24,
            test_count: 8,
        }
    }
}
