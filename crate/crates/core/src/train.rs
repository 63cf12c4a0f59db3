//! Losses, training loops and sub-reconstruction inference.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::ImageGrid;
use crate::net::{adam_step, AdamState, Architecture, DenoiserModel, Gradients, Params};
use crate::real::{Precision, Real};
use crate::rotate::{draw_rotations, rotate_adjoint, rotate_image, RotationMode, RotationSchedule};
use crate::split::{make_training_pair, AngularPartition};

pub use crate::metrics::{metric_psnr, metric_ssim};

/// Stream offset separating shuffle generators from other seeded streams.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Supervised,
    N2n,
    N2i,
    Ran2i,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "supervised" => Ok(Self::Supervised),
            "n2n" => Ok(Self::N2n),
            "n2i" => Ok(Self::N2i),
            "ran2i" => Ok(Self::Ran2i),
            other => Err(format!("unknown loss kind '{other}'")),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Supervised => "supervised",
            Self::N2n => "n2n",
            Self::N2i => "n2i",
            Self::Ran2i => "ran2i",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub rotation: RotationSchedule,
    pub aug_weight: f64,
    pub seed: u64,
    pub precision: Precision,
    pub architecture: Architecture,
}

impl TrainConfig {
    /// Desk-scale defaults: depth 5, 16 channels, residual, batch 1, lr 1e-3,
    /// random rotations with r = 2 and λ = 1.
    pub fn desk(loss_kind: LossKind, epochs: usize, seed: u64) -> Self {
        Self {
            loss_kind,
            epochs,
            lr: 1e-3,
            batch_size: 1,
            rotation: RotationSchedule {
                mode: RotationMode::Random,
                r: 2,
                seed,
            },
            aug_weight: 1.0,
            seed,
            precision: Precision::F32,
            architecture: Architecture::new(5, 16, true).expect("valid default"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch size must be at least 1");
        }
        if !(self.aug_weight >= 0.0 && self.aug_weight.is_finite()) {
            return invalid(format!("augmentation weight must be >= 0, got {}", self.aug_weight));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.rotation.r == 0 {
            return invalid("rotation count must be at least 1");
        }
        Ok(())
    }
}

/// One training image with the data its loss kind needs.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainingSample<T> {
    /// Supervised: full noisy reconstruction and its clean reference.
    NoisyClean { noisy: ImageGrid<T>, clean: ImageGrid<T> },
    /// Two reconstructions of independent acquisitions of one object.
    NoisyNoisy { first: ImageGrid<T>, second: ImageGrid<T> },
    /// Sub-reconstructions of one acquisition, one per angular subset.
    Splits { sub_recons: Vec<ImageGrid<T>>, partition: AngularPartition },
}

impl<T: Real> TrainingSample<T> {
    fn accepts(&self, kind: LossKind) -> bool {
        matches!(
            (self, kind),
            (Self::NoisyClean { .. }, LossKind::Supervised)
                | (Self::NoisyNoisy { .. }, LossKind::N2n)
                | (Self::Splits { .. }, LossKind::N2i | LossKind::Ran2i)
        )
    }

    /// Input/target pairs; split samples yield one pair per section.
    pub fn pairs(&self) -> Result<Vec<(ImageGrid<T>, ImageGrid<T>)>> {
        match self {
            Self::NoisyClean { noisy, clean } => Ok(vec![(noisy.clone(), clean.clone())]),
            Self::NoisyNoisy { first, second } => Ok(vec![
                (first.clone(), second.clone()),
                (second.clone(), first.clone()),
            ]),
            Self::Splits { sub_recons, partition } => partition
                .sections()
                .iter()
                .map(|s| make_training_pair(sub_recons, s))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub total_loss: Vec<f64>,
    pub base_loss: Vec<f64>,
    pub rot_loss: Vec<f64>,
    pub seconds: Vec<f64>,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.total_loss.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total_loss,base_loss,rot_loss,seconds\n");
        for e in 0..self.epochs() {
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e},{:.3}\n",
                e + 1,
                self.total_loss[e],
                self.base_loss[e],
                self.rot_loss[e],
                self.seconds[e]
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Mean total loss over the last quarter of epochs (at least one).
    pub fn final_quartile_mean(&self) -> f64 {
        let n = self.epochs();
        let q = (n / 4).max(1);
        self.total_loss[n - q..].iter().sum::<f64>() / q as f64
    }
}

/// Mean squared error over pixels and its gradient `2(a - b)/d` with respect to `a`.
pub fn loss_mse<T: Real>(a: &ImageGrid<T>, b: &ImageGrid<T>) -> Result<(f64, ImageGrid<T>)> {
    if !a.same_shape(b) {
        return invalid(format!("loss inputs differ in shape: {} vs {}", a.size(), b.size()));
    }
    let d = a.data().len() as f64;
    let value = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).as_f64().powi(2))
        .sum::<f64>()
        / d;
    let scale = T::of(2.0 / d);
    Ok((value, a.zip_map(b, |x, y| scale * (x - y))))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub base: f64,
    /// Weighted rotation term `(λ/r) Σ_g mse(T_g f, T_g t)`.
    pub rotation: f64,
}

/// Value and output-gradient of `mse(y, t) + (λ/r) Σ_g mse(T_g y, T_g t)`.
pub fn ran2i_output_loss<T: Real>(
    output: &ImageGrid<T>,
    target: &ImageGrid<T>,
    angles: &[f64],
    aug_weight: f64,
) -> Result<(LossValue, ImageGrid<T>)> {
    let (base, mut grad) = loss_mse(output, target)?;
    let mut rotation = 0.0;
    if aug_weight > 0.0 {
        if angles.is_empty() {
            return invalid("rotation term needs at least one angle");
        }
        let w = aug_weight / angles.len() as f64;
        let wt = T::of(w);
        for &deg in angles {
            let ro = rotate_image(output, deg);
            let rt = rotate_image(target, deg);
            let (v, g) = loss_mse(&ro, &rt)?;
            rotation += w * v;
            let back = rotate_adjoint(&g, deg);
            grad = grad.zip_map(&back, |a, b| a + wt * b);
        }
    }
    Ok((
        LossValue {
            total: base + rotation,
            base,
            rotation,
        },
        grad,
    ))
}

/// Rotation-augmented loss of one input/target pair and its parameter gradient.
/// With `λ = 0` this is exactly the plain pair loss.
pub fn loss_ran2i<T: Real>(
    model: &DenoiserModel<T>,
    input: &ImageGrid<T>,
    target: &ImageGrid<T>,
    angles: &[f64],
    aug_weight: f64,
) -> Result<(LossValue, Gradients<T>)> {
    if aug_weight < 0.0 {
        return invalid("augmentation weight must be >= 0");
    }
    if aug_weight > 0.0 && angles.is_empty() {
        return invalid("rotation term needs at least one angle");
    }
    if !input.same_shape(target) {
        return invalid("input and target differ in shape");
    }
    let mut value = None;
    let (_, grads) = model.forward_backward(input, |out| {
        let (v, g) = ran2i_output_loss(out, target, angles, aug_weight)?;
        value = Some(v);
        Ok((v.total, g))
    })?;
    Ok((value.expect("loss evaluated"), grads))
}

/// Trains a fresh model from `config.seed`.
pub fn train<T: Real>(config: &TrainConfig, dataset: &[TrainingSample<T>]) -> Result<(DenoiserModel<T>, TrainHistory)> {
    config.validate()?;
    let model = DenoiserModel::init(config.architecture.clone(), config.seed)?;
    train_from(config, model, dataset)
}

/// Continues training `model` on `dataset`.
pub fn train_from<T: Real>(
    config: &TrainConfig,
    mut model: DenoiserModel<T>,
    dataset: &[TrainingSample<T>],
) -> Result<(DenoiserModel<T>, TrainHistory)> {
    config.validate()?;
    if dataset.is_empty() {
        return invalid("training dataset is empty");
    }
    if let Some(bad) = dataset.iter().position(|s| !s.accepts(config.loss_kind)) {
        return invalid(format!(
            "sample {bad} does not provide the data required by loss '{}'",
            config.loss_kind
        ));
    }
    let pairs: Vec<Vec<(ImageGrid<T>, ImageGrid<T>)>> = dataset.iter().map(|s| s.pairs()).collect::<Result<_>>()?;
    let weight = match config.loss_kind {
        LossKind::Ran2i => config.aug_weight,
        _ => 0.0,
    };
    let mut adam = AdamState::new(&model, config.lr);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step: u64 = 0;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SHUFFLE_STREAM + epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut total, mut base, mut rot, mut count) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let angles = if weight > 0.0 {
                draw_rotations(&config.rotation, step)
            } else {
                Vec::new()
            };
            let mut grads: Params<T> = Params::zeros(model.architecture());
            let mut in_batch = 0usize;
            for &i in batch {
                for (input, target) in &pairs[i] {
                    let (v, g) = loss_ran2i(&model, input, target, &angles, weight)?;
                    grads.add_scaled(&g, T::one());
                    total += v.total;
                    base += v.base;
                    rot += v.rotation;
                    count += 1;
                    in_batch += 1;
                }
            }
            grads.scale(T::one() / T::of(in_batch as f64));
            adam_step(&mut model, &mut adam, &grads)?;
            step += 1;
        }
        let c = count as f64;
        history.total_loss.push(total / c);
        history.base_loss.push(base / c);
        history.rot_loss.push(rot / c);
        history.seconds.push(started.elapsed().as_secs_f64());
    }
    if history.total_loss.iter().any(|v| !v.is_finite()) {
        return invalid("training diverged: non-finite loss");
    }
    Ok((model, history))
}

/// Elementwise mean of the model applied to each sub-input.
pub fn infer_average<T: Real>(model: &DenoiserModel<T>, sub_inputs: &[ImageGrid<T>]) -> Result<ImageGrid<T>> {
    if sub_inputs.is_empty() {
        return invalid("inference needs at least one input");
    }
    let outputs: Vec<ImageGrid<T>> = sub_inputs.iter().map(|x| model.forward(x)).collect();
    let refs: Vec<&ImageGrid<T>> = outputs.iter().collect();
    ImageGrid::mean_of(&refs)
}

/// Network inputs used at inference: the `J^C` mean of every section.
pub fn section_inputs<T: Real>(sub_recons: &[ImageGrid<T>], partition: &AngularPartition) -> Result<Vec<ImageGrid<T>>> {
    partition
        .sections()
        .iter()
        .map(|s| make_training_pair(sub_recons, s).map(|(input, _)| input))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_model, Activation};
    use crate::rotate::rotation_matrix;
    use crate::split::partition_angles;
    use rand::Rng;

    fn random_image(n: usize, seed: u64) -> ImageGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::new(n, n, 1.0, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn smooth_image(n: usize, phase: f64) -> ImageGrid<f64> {
        let data = (0..n * n)
            .map(|i| {
                let (r, c) = ((i / n) as f64, (i % n) as f64);
                (0.3 * r + phase).sin() * (0.2 * c).cos() + 0.5
            })
            .collect();
        ImageGrid::new(n, n, 1.0, data).unwrap()
    }

    #[test]
    fn mse_basics() {
        let a = random_image(7, 1);
        let (v, g) = loss_mse(&a, &a).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
        let (v, _) = loss_mse(&a.map(|x| x + 1.0), &a).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let b = random_image(7, 2);
        let mut brute = 0.0;
        for r in 0..7 {
            for c in 0..7 {
                brute += (a.get(r, c) - b.get(r, c)).powi(2);
            }
        }
        let (v, _) = loss_mse(&a, &b).unwrap();
        assert!((v - brute / 49.0).abs() < 1e-12);
        assert!(loss_mse(&a, &random_image(6, 1)).is_err());
    }

    #[test]
    fn zero_weight_reduces_to_base_term() {
        let m = init_model::<f64>(3, 3, true, 4).unwrap();
        let (x, t) = (random_image(8, 1), random_image(8, 2));
        let (v0, g0) = loss_ran2i(&m, &x, &t, &[], 0.0).unwrap();
        let (v1, g1) = loss_ran2i(&m, &x, &t, &[37.0, 200.0], 0.0).unwrap();
        assert_eq!(v0, v1);
        assert_eq!(g0, g1);
        assert_eq!(v0.rotation, 0.0);
        let (plain, _) = loss_mse(&m.forward(&x), &t).unwrap();
        assert_eq!(v0.base, plain);
        assert!(loss_ran2i(&m, &x, &t, &[], 1.0).is_err());
    }

    #[test]
    fn quarter_turns_scale_base_term() {
        let m = init_model::<f64>(3, 3, true, 4).unwrap();
        let (x, t) = (random_image(9, 1), random_image(9, 2));
        for lambda in [0.5, 1.0, 3.0] {
            let (v, _) = loss_ran2i(&m, &x, &t, &[90.0, 180.0, 270.0], lambda).unwrap();
            let rel = (v.total - (1.0 + lambda) * v.base).abs() / v.total;
            assert!(rel < 1e-12, "{rel}");
        }
    }

    #[test]
    fn rotation_term_matches_explicit_matrix() {
        let n = 16;
        let m = init_model::<f64>(2, 2, false, 6).unwrap();
        let (x, t) = (smooth_image(n, 0.0), smooth_image(n, 1.3));
        let deg = 33.0;
        let (v, _) = loss_ran2i(&m, &x, &t, &[deg], 1.0).unwrap();
        let mat = rotation_matrix(n, deg);
        let f = m.forward(&x);
        let rf = mat.apply(f.data());
        let rt = mat.apply(t.data());
        let expect: f64 = rf.iter().zip(&rt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (n * n) as f64;
        assert!((v.rotation - expect).abs() < 1e-10);
        let base: f64 = f.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (n * n) as f64;
        assert!((v.base - base).abs() < 1e-12);
    }

    #[test]
    fn ran2i_gradient_finite_differences() {
        let arch = Architecture::new(2, 2, true).unwrap();
        let base = DenoiserModel::<f64>::init(arch.clone(), 12).unwrap();
        let (x, t) = (random_image(8, 3), random_image(8, 4));
        let angles = [41.0, 90.0, 305.5];
        let (_, g) = loss_ran2i(&base, &x, &t, &angles, 0.8).unwrap();
        let analytic = g.flatten();
        let params = base.params().clone();
        let h = 1e-4;
        let mut idx = 0;
        let tensors = params.kernels.len() + params.scales.len();
        for ti in 0..tensors {
            let len = params.tensors().nth(ti).unwrap().len();
            for e in 0..len {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p.tensors_mut().nth(ti).unwrap()[e] += delta;
                    let m = DenoiserModel::from_parameters(arch.clone(), p).unwrap();
                    loss_ran2i(&m, &x, &t, &angles, 0.8).unwrap().0.total
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-4);
                assert!(rel < 1e-6, "param {idx}: fd {fd} analytic {}", analytic[idx]);
                idx += 1;
            }
        }
    }

    fn split_samples(count: usize) -> Vec<TrainingSample<f64>> {
        let partition = partition_angles(8, 2).unwrap();
        (0..count)
            .map(|i| TrainingSample::Splits {
                sub_recons: vec![smooth_image(8, i as f64), smooth_image(8, i as f64 + 0.2)],
                partition: partition.clone(),
            })
            .collect()
    }

    fn small_config(kind: LossKind, epochs: usize) -> TrainConfig {
        let mut c = TrainConfig::desk(kind, epochs, 3);
        c.architecture = Architecture::new(3, 4, true).unwrap();
        c.precision = Precision::F64;
        c
    }

    #[test]
    fn zero_weight_training_matches_n2i() {
        let data = split_samples(3);
        let (a, ha) = train(&small_config(LossKind::N2i, 3), &data).unwrap();
        let mut cfg = small_config(LossKind::Ran2i, 3);
        cfg.aug_weight = 0.0;
        let (b, hb) = train(&cfg, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.total_loss, hb.total_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let data = split_samples(3);
        let cfg = small_config(LossKind::Ran2i, 4);
        let (a, ha) = train(&cfg, &data).unwrap();
        let (b, hb) = train(&cfg, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.total_loss, hb.total_loss);
        assert_eq!(ha.rot_loss, hb.rot_loss);
        assert!(ha.rot_loss.iter().all(|&v| v > 0.0));
        let csv = ha.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("epoch,total_loss,base_loss,rot_loss,seconds"));
    }

    #[test]
    fn fittable_pair_descends() {
        let img = smooth_image(8, 0.4);
        let data = vec![TrainingSample::NoisyClean {
            noisy: img.clone(),
            clean: img.clone(),
        }];
        let mut cfg = small_config(LossKind::Supervised, 1);
        cfg.batch_size = 1;
        let model = DenoiserModel::init(cfg.architecture.clone(), cfg.seed).unwrap();
        let (start, _) = loss_mse(&model.forward(&img), &img).unwrap();
        let (trained, _) = train_from(&cfg, model, &data).unwrap();
        let (end, _) = loss_mse(&trained.forward(&img), &img).unwrap();
        assert!(end <= start, "{end} > {start}");
        // longer runs keep descending on average
        let (_, hist) = train(&small_config(LossKind::Supervised, 20), &data).unwrap();
        assert!(hist.final_quartile_mean() < hist.total_loss[0]);
    }

    #[test]
    fn role_and_emptiness_checks() {
        let data = split_samples(1);
        assert!(train(&small_config(LossKind::Supervised, 1), &data).is_err());
        assert!(train::<f64>(&small_config(LossKind::N2i, 1), &[]).is_err());
        let mut cfg = small_config(LossKind::N2i, 1);
        cfg.batch_size = 0;
        assert!(train(&cfg, &data).is_err());
        cfg.batch_size = 1;
        cfg.aug_weight = -1.0;
        assert!(train(&cfg, &data).is_err());
    }

    #[test]
    fn pair_loss_is_symmetric_for_identity_model() {
        // with f = id, the two directions of a split pair have equal loss
        let arch = Architecture {
            depth: 2,
            channels: 1,
            residual: true,
            normalize: false,
            activation: Activation::Relu,
        };
        let m = DenoiserModel::from_parameters(arch.clone(), Params::zeros(&arch)).unwrap();
        let pairs = split_samples(1)[0].pairs().unwrap();
        let l0 = loss_ran2i(&m, &pairs[0].0, &pairs[0].1, &[], 0.0).unwrap().0.total;
        let l1 = loss_ran2i(&m, &pairs[1].0, &pairs[1].1, &[], 0.0).unwrap().0.total;
        assert_eq!(l0, l1);
    }

    #[test]
    fn inference_averaging() {
        let arch = Architecture::new(2, 1, true).unwrap();
        let mut p = Params::zeros(&arch);
        p.scales[0][0] = 1.0;
        let identity = DenoiserModel::<f64>::from_parameters(arch, p).unwrap();
        let (a, b) = (random_image(6, 1), random_image(6, 2));
        let avg = infer_average(&identity, &[a.clone(), b.clone()]).unwrap();
        let expect = a.zip_map(&b, |x, y| (x + y) / 2.0);
        for (u, v) in avg.data().iter().zip(expect.data()) {
            assert!((u - v).abs() < 1e-15);
        }
        let m = init_model::<f64>(3, 2, true, 1).unwrap();
        assert_eq!(infer_average(&m, std::slice::from_ref(&a)).unwrap(), m.forward(&a));
        let two = infer_average(&m, &[a.clone(), b.clone()]).unwrap();
        let (fa, fb) = (m.forward(&a), m.forward(&b));
        for i in 0..36 {
            assert!((two.data()[i] - 0.5 * (fa.data()[i] + fb.data()[i])).abs() < 1e-15);
        }
        assert!(infer_average::<f64>(&m, &[]).is_err());
    }
}
