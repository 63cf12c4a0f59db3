//! Bias-free convolutional denoiser with exact reverse-mode gradients and Adam.
//!
//! Layer `l < depth-1`: 3×3 conv (same padding, zero border) → per-channel
//! positive scale → ReLU. The last layer is a linear 3×3 conv to one channel.
//! In residual mode the network predicts the noise and returns `x - raw`.
//! There are no additive parameters, so `f(αx) = α f(x)` for `α > 0`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Error, Result};
use crate::image::ImageGrid;
use crate::io::{push_json_block, Reader};
use crate::real::{Precision, Real};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TLNN";
/// Lower bound applied to normalization scales after each optimizer step.
pub const MIN_SCALE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Linear hidden layers; only used to check convolution adjoints.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub depth: usize,
    pub channels: usize,
    pub residual: bool,
    /// Learnable per-channel scales on hidden layers.
    pub normalize: bool,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(depth: usize, channels: usize, residual: bool) -> Result<Self> {
        let arch = Self {
            depth,
            channels,
            residual,
            normalize: true,
            activation: Activation::Relu,
        };
        arch.validate()?;
        Ok(arch)
    }

    fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return invalid(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.channels < 1 {
            return invalid("channels must be at least 1");
        }
        Ok(())
    }

    pub fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 { 1 } else { self.channels }
    }

    pub fn out_channels(&self, layer: usize) -> usize {
        if layer + 1 == self.depth { 1 } else { self.channels }
    }

    pub fn kernel_len(&self, layer: usize) -> usize {
        9 * self.in_channels(layer) * self.out_channels(layer)
    }

    pub fn scale_len(&self, layer: usize) -> usize {
        if self.normalize && layer + 1 < self.depth {
            self.channels
        } else {
            0
        }
    }

    pub fn parameter_count(&self) -> usize {
        (0..self.depth)
            .map(|l| self.kernel_len(l) + self.scale_len(l))
            .sum()
    }
}

/// Parameter-shaped buffers: conv kernels (`out × in × 3 × 3` per layer)
/// followed by per-channel scales. Used for weights, gradients and moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub kernels: Vec<Vec<T>>,
    pub scales: Vec<Vec<T>>,
}

impl<T: Real> Params<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            kernels: (0..arch.depth).map(|l| vec![T::zero(); arch.kernel_len(l)]).collect(),
            scales: (0..arch.depth).map(|l| vec![T::zero(); arch.scale_len(l)]).collect(),
        }
    }

    /// Tensors in declaration order: all kernels, then all scales.
    pub fn tensors(&self) -> impl Iterator<Item = &Vec<T>> {
        self.kernels.iter().chain(self.scales.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.kernels.iter_mut().chain(self.scales.iter_mut())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.kernels.len() == other.kernels.len()
            && self.scales.len() == other.scales.len()
            && self.tensors().zip(other.tensors()).all(|(a, b)| a.len() == b.len())
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= alpha;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .flat_map(|t| t.iter())
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }
}

pub type Gradients<T> = Params<T>;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel<T> {
    arch: Architecture,
    params: Params<T>,
}

pub fn init_model<T: Real>(depth: usize, channels: usize, residual: bool, seed: u64) -> Result<DenoiserModel<T>> {
    DenoiserModel::init(Architecture::new(depth, channels, residual)?, seed)
}

impl<T: Real> DenoiserModel<T> {
    /// He fan-in normal kernels, unit scales.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros(&arch);
        for (l, k) in params.kernels.iter_mut().enumerate() {
            let std = (2.0 / (9.0 * arch.in_channels(l) as f64)).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            for w in k.iter_mut() {
                *w = T::of(normal.sample(&mut rng));
            }
        }
        for s in params.scales.iter_mut() {
            s.fill(T::one());
        }
        Ok(Self { arch, params })
    }

    pub fn from_parameters(arch: Architecture, params: Params<T>) -> Result<Self> {
        arch.validate()?;
        if !params.same_shape(&Params::zeros(&arch)) {
            return invalid("parameter shapes do not match architecture");
        }
        if params.scales.iter().flatten().any(|s| !(s.as_f64() > 0.0)) {
            return invalid("normalization scales must be positive");
        }
        if params.tensors().flatten().any(|v| !v.is_finite()) {
            return invalid("parameters must be finite");
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.arch.parameter_count()
    }

    pub fn cast<U: Real>(&self) -> DenoiserModel<U> {
        let conv = |v: &Vec<Vec<T>>| -> Vec<Vec<U>> {
            v.iter()
                .map(|t| t.iter().map(|x| U::of(x.as_f64())).collect())
                .collect()
        };
        DenoiserModel {
            arch: self.arch.clone(),
            params: Params {
                kernels: conv(&self.params.kernels),
                scales: conv(&self.params.scales),
            },
        }
    }

    pub fn forward(&self, x: &ImageGrid<T>) -> ImageGrid<T> {
        let n = x.size();
        let trace = self.run(x.data(), n);
        ImageGrid::from_raw(n, x.pixel_size(), trace.output)
    }

    fn run(&self, x: &[T], n: usize) -> Trace<T> {
        let arch = &self.arch;
        let mut inputs: Vec<Vec<T>> = Vec::with_capacity(arch.depth);
        let mut pre_act: Vec<Vec<T>> = Vec::with_capacity(arch.depth);
        let mut conv_out: Vec<Vec<T>> = Vec::with_capacity(arch.depth);
        let mut current = x.to_vec();
        for l in 0..arch.depth {
            let cin = arch.in_channels(l);
            let cout = arch.out_channels(l);
            let y = conv_forward(&current, &self.params.kernels[l], cin, cout, n);
            inputs.push(current);
            if l + 1 == arch.depth {
                conv_out.push(Vec::new());
                pre_act.push(Vec::new());
                current = y;
                break;
            }
            let z = if arch.normalize {
                apply_scales(&y, &self.params.scales[l], n * n)
            } else {
                y.clone()
            };
            current = match arch.activation {
                Activation::Relu => z.iter().map(|&v| v.max(T::zero())).collect(),
                Activation::Identity => z.clone(),
            };
            conv_out.push(y);
            pre_act.push(z);
        }
        let raw = current;
        let output = if arch.residual {
            x.iter().zip(&raw).map(|(&a, &b)| a - b).collect()
        } else {
            raw
        };
        Trace {
            inputs,
            conv_out,
            pre_act,
            output,
        }
    }

    /// Reverse-mode pass: returns parameter gradients and the gradient with
    /// respect to `x`, given the upstream gradient of the output.
    pub fn backward(&self, x: &ImageGrid<T>, upstream: &ImageGrid<T>) -> Result<(Gradients<T>, ImageGrid<T>)> {
        if !x.same_shape(upstream) {
            return invalid("upstream gradient shape does not match the input");
        }
        let n = x.size();
        let trace = self.run(x.data(), n);
        let (grads, gx) = self.backward_trace(&trace, upstream.data(), n);
        Ok((grads, ImageGrid::from_raw(n, x.pixel_size(), gx)))
    }

    /// Forward pass and the parameter gradient of `loss_grad(output)` in one go.
    pub(crate) fn forward_backward(
        &self,
        x: &ImageGrid<T>,
        loss: impl FnOnce(&ImageGrid<T>) -> Result<(f64, ImageGrid<T>)>,
    ) -> Result<(f64, Gradients<T>)> {
        let n = x.size();
        let trace = self.run(x.data(), n);
        let out = ImageGrid::from_raw(n, x.pixel_size(), trace.output.clone());
        let (value, g) = loss(&out)?;
        let (grads, _) = self.backward_trace(&trace, g.data(), n);
        Ok((value, grads))
    }

    fn backward_trace(&self, trace: &Trace<T>, upstream: &[T], n: usize) -> (Gradients<T>, Vec<T>) {
        let arch = &self.arch;
        let mut grads = Params::zeros(arch);
        let mut g: Vec<T> = if arch.residual {
            upstream.iter().map(|&v| -v).collect()
        } else {
            upstream.to_vec()
        };
        for l in (0..arch.depth).rev() {
            let cin = arch.in_channels(l);
            let cout = arch.out_channels(l);
            if l + 1 < arch.depth {
                if arch.activation == Activation::Relu {
                    for (gv, &z) in g.iter_mut().zip(&trace.pre_act[l]) {
                        if z <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                }
                if arch.normalize {
                    let plane = n * n;
                    let scales = &self.params.scales[l];
                    for c in 0..cout {
                        let gs = &mut g[c * plane..(c + 1) * plane];
                        let ys = &trace.conv_out[l][c * plane..(c + 1) * plane];
                        grads.scales[l][c] = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum();
                        for v in gs.iter_mut() {
                            *v *= scales[c];
                        }
                    }
                }
            }
            grads.kernels[l] = conv_weight_grad(&trace.inputs[l], &g, cin, cout, n);
            g = conv_input_grad(&g, &self.params.kernels[l], cin, cout, n);
        }
        if arch.residual {
            for (gv, &u) in g.iter_mut().zip(upstream) {
                *gv += u;
            }
        }
        (grads, g)
    }

    pub fn encode(&self, metadata: &serde_json::Value) -> Vec<u8> {
        let header = CheckpointHeader {
            precision: T::PRECISION,
            architecture: self.arch.clone(),
            metadata: metadata.clone(),
        };
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        push_json_block(&mut out, &header);
        for t in self.params.tensors() {
            for &v in t {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Decodes a checkpoint, converting stored parameters to `T` if needed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return format_err("bad checkpoint magic");
        }
        let header: CheckpointHeader = r.json_block()?;
        header
            .architecture
            .validate()
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut params = Params::zeros(&header.architecture);
        let flag = header.precision.flag();
        for t in params.tensors_mut() {
            let len = t.len();
            *t = r.floats::<T>(len, flag)?;
        }
        r.finish()?;
        let model = Self::from_parameters(header.architecture, params)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok((model, header.metadata))
    }

    pub fn save(&self, path: impl AsRef<Path>, metadata: &serde_json::Value) -> Result<()> {
        std::fs::write(path, self.encode(metadata))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    precision: Precision,
    architecture: Architecture,
    #[serde(default)]
    metadata: serde_json::Value,
}

struct Trace<T> {
    inputs: Vec<Vec<T>>,
    conv_out: Vec<Vec<T>>,
    pre_act: Vec<Vec<T>>,
    output: Vec<T>,
}

fn apply_scales<T: Real>(y: &[T], scales: &[T], plane: usize) -> Vec<T> {
    y.chunks_exact(plane)
        .zip(scales)
        .flat_map(|(ch, &s)| ch.iter().map(move |&v| v * s))
        .collect()
}

/// Column range `[lo, hi)` of output pixels whose tap `kx` lands inside the row.
#[inline]
fn tap_cols(kx: usize, n: usize) -> (usize, usize) {
    match kx {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

/// Same-padded 3×3 cross-correlation: `out[o] = Σ_i w[o,i] ⋆ in[i]`.
pub(crate) fn conv_forward<T: Real>(input: &[T], w: &[T], cin: usize, cout: usize, n: usize) -> Vec<T> {
    let plane = n * n;
    let mut out = vec![T::zero(); cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(o, dst)| {
        for i in 0..cin {
            let src = &input[i * plane..(i + 1) * plane];
            let k = &w[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
            for r in 0..n {
                let drow = &mut dst[r * n..(r + 1) * n];
                for ky in 0..3 {
                    let rr = r as isize + ky as isize - 1;
                    if rr < 0 || rr >= n as isize {
                        continue;
                    }
                    let srow = &src[rr as usize * n..(rr as usize + 1) * n];
                    for kx in 0..3 {
                        let wt = k[ky * 3 + kx];
                        let (lo, hi) = tap_cols(kx, n);
                        if lo >= hi {
                            continue;
                        }
                        let s = &srow[lo + kx - 1..hi + kx - 1];
                        for (d, &v) in drow[lo..hi].iter_mut().zip(s) {
                            *d += wt * v;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the convolution input (the adjoint map).
pub(crate) fn conv_input_grad<T: Real>(g: &[T], w: &[T], cin: usize, cout: usize, n: usize) -> Vec<T> {
    let plane = n * n;
    let mut out = vec![T::zero(); cin * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(i, dst)| {
        for o in 0..cout {
            let src = &g[o * plane..(o + 1) * plane];
            let k = &w[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
            for r in 0..n {
                let srow = &src[r * n..(r + 1) * n];
                for ky in 0..3 {
                    let rr = r as isize + ky as isize - 1;
                    if rr < 0 || rr >= n as isize {
                        continue;
                    }
                    let drow = &mut dst[rr as usize * n..(rr as usize + 1) * n];
                    for kx in 0..3 {
                        let wt = k[ky * 3 + kx];
                        let (lo, hi) = tap_cols(kx, n);
                        if lo >= hi {
                            continue;
                        }
                        let d = &mut drow[lo + kx - 1..hi + kx - 1];
                        for (dv, &v) in d.iter_mut().zip(&srow[lo..hi]) {
                            *dv += wt * v;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the kernel: correlation of upstream and input.
pub(crate) fn conv_weight_grad<T: Real>(input: &[T], g: &[T], cin: usize, cout: usize, n: usize) -> Vec<T> {
    let plane = n * n;
    let mut out = vec![T::zero(); cout * cin * 9];
    out.par_chunks_mut(cin * 9).enumerate().for_each(|(o, dst)| {
        let go = &g[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let (lo, hi) = tap_cols(kx, n);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for r in 0..n {
                        let rr = r as isize + ky as isize - 1;
                        if rr < 0 || rr >= n as isize {
                            continue;
                        }
                        let grow = &go[r * n + lo..r * n + hi];
                        let srow = &src[rr as usize * n + lo + kx - 1..rr as usize * n + hi + kx - 1];
                        acc += grow.iter().zip(srow).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    dst[i * 9 + ky * 3 + kx] = acc;
                }
            }
        }
    });
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Params<T>,
    second: Params<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &DenoiserModel<T>, lr: f64) -> Self {
        Self::with_constants(model, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants(model: &DenoiserModel<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
            first: Params::zeros(&model.arch),
            second: Params::zeros(&model.arch),
        }
    }

    pub fn first_moment(&self) -> &Params<T> {
        &self.first
    }

    pub fn second_moment(&self) -> &Params<T> {
        &self.second
    }
}

/// One bias-corrected Adam update; scales are clamped to `MIN_SCALE` afterwards.
pub fn adam_step<T: Real>(model: &mut DenoiserModel<T>, state: &mut AdamState<T>, grads: &Gradients<T>) -> Result<()> {
    if !grads.same_shape(&model.params) || !state.first.same_shape(&model.params) {
        return invalid("gradient shapes do not match the model");
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::of(state.beta1);
    let b2 = T::of(state.beta2);
    let c1 = T::of(1.0 - state.beta1.powi(t));
    let c2 = T::of(1.0 - state.beta2.powi(t));
    let lr = T::of(state.lr);
    let eps = T::of(state.eps);
    let one = T::one();
    let tensors = model
        .params
        .tensors_mut()
        .zip(state.first.tensors_mut())
        .zip(state.second.tensors_mut())
        .zip(grads.tensors());
    for (((p, m), v), g) in tensors {
        for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    let floor = T::of(MIN_SCALE);
    for s in model.params.scales.iter_mut().flatten() {
        if *s < floor {
            *s = floor;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image<T: Real>(n: usize, seed: u64) -> ImageGrid<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::new(n, n, 1.0, (0..n * n).map(|_| T::of(rng.random_range(-1.0..1.0))).collect())
            .unwrap()
    }

    #[test]
    fn parameter_counts() {
        let m = init_model::<f64>(2, 1, false, 0).unwrap();
        assert_eq!(m.parameter_count(), 9 + 9 + 1);
        let m = init_model::<f32>(5, 16, true, 0).unwrap();
        assert_eq!(m.parameter_count(), 9 * 16 + 3 * (9 * 16 * 16) + 9 * 16 + 4 * 16);
        assert_eq!(m.params().flatten().len(), m.parameter_count());
        assert!(init_model::<f64>(1, 4, true, 0).is_err());
        assert!(init_model::<f64>(3, 0, true, 0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_model::<f32>(3, 4, true, 9).unwrap(), init_model::<f32>(3, 4, true, 9).unwrap());
        assert_ne!(init_model::<f32>(3, 4, true, 9).unwrap(), init_model::<f32>(3, 4, true, 10).unwrap());
    }

    #[test]
    fn zero_maps_to_zero_and_homogeneity() {
        let m = init_model::<f32>(4, 6, true, 3).unwrap();
        let zero = ImageGrid::<f32>::zeros(10, 1.0);
        assert!(m.forward(&zero).data().iter().all(|&v| v == 0.0));
        let x = random_image::<f32>(10, 4);
        let fx = m.forward(&x);
        for alpha in [0.5f32, 2.0, 10.0] {
            let fa = m.forward(&x.scaled(alpha));
            let num: f64 = fa
                .data()
                .iter()
                .zip(fx.data())
                .map(|(a, b)| ((*a - alpha * *b) as f64).powi(2))
                .sum();
            let rel = (num / (fa.norm_sq())).sqrt();
            assert!(rel < 1e-5, "alpha {alpha}: {rel}");
        }
    }

    #[test]
    fn identity_kernel_model_is_relu() {
        let arch = Architecture::new(2, 1, false).unwrap();
        let mut k = vec![0.0f64; 9];
        k[4] = 1.0;
        let params = Params {
            kernels: vec![k.clone(), k],
            scales: vec![vec![1.0], vec![]],
        };
        let m = DenoiserModel::from_parameters(arch, params).unwrap();
        let x = random_image::<f64>(6, 1);
        assert_eq!(m.forward(&x), x.map(|v| v.max(0.0)));
    }

    #[test]
    fn residual_consistency() {
        let m = init_model::<f64>(3, 4, true, 5).unwrap();
        let mut direct_arch = m.architecture().clone();
        direct_arch.residual = false;
        let d = DenoiserModel::from_parameters(direct_arch, m.params().clone()).unwrap();
        let x = random_image::<f64>(8, 2);
        let expect = x.zip_map(&d.forward(&x), |a, b| a - b);
        assert_eq!(m.forward(&x), expect);
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let m = init_model::<f64>(3, 3, true, 1).unwrap();
        let x = random_image::<f64>(7, 3);
        let (g, gx) = m.backward(&x, &ImageGrid::zeros(7, 1.0)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(m.backward(&x, &ImageGrid::zeros(6, 1.0)).is_err());
    }

    #[test]
    fn input_gradient_of_linear_layer_is_flipped_kernel_correlation() {
        // sum-output gradient of a single linear conv: each input pixel collects
        // the kernel taps whose output position lies inside the image
        let n = 5;
        let w: Vec<f64> = (0..9).map(|i| i as f64 * 0.5 - 1.7).collect();
        let ones = vec![1.0; n * n];
        let gx = conv_input_grad(&ones, &w, 1, 1, n);
        for r in 0..n {
            for c in 0..n {
                let mut expect = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        // output (r', c') reads input (r'+ky-1, c'+kx-1)
                        let ro = r as isize - ky as isize + 1;
                        let co = c as isize - kx as isize + 1;
                        if ro >= 0 && co >= 0 && ro < n as isize && co < n as isize {
                            expect += w[ky * 3 + kx];
                        }
                    }
                }
                assert!((gx[r * n + c] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv_adjoint_identity() {
        let (cin, cout, n) = (3, 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rand_vec = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let x = rand_vec(cin * n * n);
        let y = rand_vec(cout * n * n);
        let w = rand_vec(cout * cin * 9);
        let ax = conv_forward(&x, &w, cin, cout, n);
        let aty = conv_input_grad(&y, &w, cin, cout, n);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn scalar_loss(m: &DenoiserModel<f64>, x: &ImageGrid<f64>, probe: &ImageGrid<f64>) -> f64 {
        let out = m.forward(x);
        out.data().iter().zip(probe.data()).map(|(a, b)| 0.5 * a * a * b + a).sum()
    }

    #[test]
    fn finite_difference_gradients() {
        for (residual, normalize) in [(false, true), (true, true), (true, false)] {
            let mut arch = Architecture::new(3, 2, residual).unwrap();
            arch.normalize = normalize;
            let base = DenoiserModel::<f64>::init(arch.clone(), 21).unwrap();
            // move scales away from 1 so their gradients are exercised
            let mut params = base.params().clone();
            for s in params.scales.iter_mut().flatten() {
                *s = 0.7;
            }
            let m = DenoiserModel::from_parameters(arch.clone(), params.clone()).unwrap();
            let x = random_image::<f64>(8, 22);
            let probe = random_image::<f64>(8, 23);
            let out = m.forward(&x);
            let upstream = out.zip_map(&probe, |a, b| a * b + 1.0);
            let (g, gx) = m.backward(&x, &upstream).unwrap();
            let h = 1e-3;
            let analytic = g.flatten();
            let mut idx = 0;
            let mut worst: f64 = 0.0;
            for t in 0..(params.kernels.len() + params.scales.len()) {
                let len = params.tensors().nth(t).unwrap().len();
                for e in 0..len {
                    let mut plus = params.clone();
                    plus.tensors_mut().nth(t).unwrap()[e] += h;
                    let mut minus = params.clone();
                    minus.tensors_mut().nth(t).unwrap()[e] -= h;
                    let mp = DenoiserModel::from_parameters(arch.clone(), plus).unwrap();
                    let mm = DenoiserModel::from_parameters(arch.clone(), minus).unwrap();
                    let fd = (scalar_loss(&mp, &x, &probe) - scalar_loss(&mm, &x, &probe)) / (2.0 * h);
                    let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-3);
                    worst = worst.max(rel);
                    idx += 1;
                }
            }
            assert!(worst < 1e-6, "residual={residual} normalize={normalize}: {worst}");
            for p in [0usize, 9, 27, 63] {
                let mut xp = x.clone();
                xp.data_mut()[p] += h;
                let mut xm = x.clone();
                xm.data_mut()[p] -= h;
                let fd = (scalar_loss(&m, &xp, &probe) - scalar_loss(&m, &xm, &probe)) / (2.0 * h);
                let rel = (fd - gx.data()[p]).abs() / fd.abs().max(1e-3);
                assert!(rel < 1e-6, "input grad {p}: {rel}");
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut m = init_model::<f64>(2, 2, true, 1).unwrap();
        let before = m.clone();
        let mut st = AdamState::new(&m, 1e-3);
        let zero = Params::zeros(m.architecture());
        adam_step(&mut m, &mut st, &zero).unwrap();
        assert_eq!(m, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        // first step from zero moments: m̂ = g, v̂ = g², update = -lr·g/(|g|+eps)
        let arch = Architecture { depth: 2, channels: 1, residual: false, normalize: false, activation: Activation::Relu };
        let params = Params { kernels: vec![vec![0.5; 9], vec![-0.25; 9]], scales: vec![vec![], vec![]] };
        let mut m = DenoiserModel::from_parameters(arch.clone(), params).unwrap();
        let mut st = AdamState::new(&m, 1e-3);
        let mut g = Params::zeros(&arch);
        g.kernels[0][0] = 0.3;
        g.kernels[1][4] = -2.0;
        adam_step(&mut m, &mut st, &g).unwrap();
        let expect0: f64 = 0.5 - 1e-3 * 0.3 / (0.3 + 1e-8);
        let expect1: f64 = -0.25 - 1e-3 * -2.0 / (2.0 + 1e-8);
        assert!((m.params().kernels[0][0] - expect0).abs() < 1e-15);
        assert!((m.params().kernels[1][4] - expect1).abs() < 1e-15);
        assert_eq!(m.params().kernels[0][1], 0.5);
        // second step with the same gradient, by hand
        adam_step(&mut m, &mut st, &g).unwrap();
        let (b1, b2) = (0.9f64, 0.999f64);
        let m2 = b1 * (1.0 - b1) * 0.3 + (1.0 - b1) * 0.3;
        let v2 = b2 * (1.0 - b2) * 0.09 + (1.0 - b2) * 0.09;
        let upd = 1e-3 * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + 1e-8);
        assert!((m.params().kernels[0][0] - (expect0 - upd)).abs() < 1e-15);
    }

    #[test]
    fn adam_clamps_scales() {
        let mut m = init_model::<f64>(2, 1, false, 1).unwrap();
        let mut st = AdamState::new(&m, 10.0);
        let mut g = Params::zeros(m.architecture());
        g.scales[0][0] = 1.0;
        adam_step(&mut m, &mut st, &g).unwrap();
        assert_eq!(m.params().scales[0][0], MIN_SCALE);
        let wrong = Params::<f64>::zeros(&Architecture::new(3, 1, false).unwrap());
        assert!(adam_step(&mut m, &mut st, &wrong).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = init_model::<f32>(3, 4, true, 2).unwrap();
        let meta = serde_json::json!({"splits": 2});
        let (back, meta2) = DenoiserModel::<f32>::decode(&m.encode(&meta)).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
        let bytes = m.encode(&meta);
        assert!(DenoiserModel::<f32>::decode(&bytes[..bytes.len() - 1]).is_err());
        let (wide, _) = DenoiserModel::<f64>::decode(&bytes).unwrap();
        assert_eq!(wide.cast::<f32>(), m);
    }
}
