//! Image rotations `T_g` and the rotation schedules used by the augmented loss.
//!
//! Rotation is counter-clockwise about the image centre with bilinear
//! interpolation and zero fill. Multiples of 90° take an exact permutation
//! path. Only the loss arguments are ever rotated; the network input is not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::ImageGrid;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationMode {
    Fixed,
    Random,
}

impl std::str::FromStr for RotationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown rotation mode '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationSchedule {
    pub mode: RotationMode,
    pub r: usize,
    pub seed: u64,
}

impl RotationSchedule {
    pub fn new(mode: RotationMode, r: usize, seed: u64) -> Result<Self> {
        if r == 0 {
            return invalid("rotation count must be at least 1");
        }
        Ok(Self { mode, r, seed })
    }

    /// `{360/r, 2·360/r, …, 360}` degrees.
    pub fn fixed_angles(&self) -> Vec<f64> {
        (1..=self.r).map(|i| 360.0 * i as f64 / self.r as f64).collect()
    }
}

/// Angles (degrees) used at training step `step`. Random mode draws `r`
/// uniform angles in [1, 360] from a generator keyed by `(seed, step)`.
pub fn draw_rotations(schedule: &RotationSchedule, step: u64) -> Vec<f64> {
    match schedule.mode {
        RotationMode::Fixed => schedule.fixed_angles(),
        RotationMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
            rng.set_stream(step);
            (0..schedule.r).map(|_| rng.random_range(1.0..=360.0)).collect()
        }
    }
}

/// Number of quarter turns if `degrees` is an exact multiple of 90°.
fn quarter_turns(degrees: f64) -> Option<usize> {
    let q = degrees / 90.0;
    (q.fract() == 0.0).then(|| (q as i64).rem_euclid(4) as usize)
}

/// Source pixel of output pixel `(row, col)` under `quarters` CCW quarter turns.
#[inline]
fn permuted_source(n: usize, row: usize, col: usize, quarters: usize) -> usize {
    let m = n - 1;
    match quarters {
        0 => row * n + col,
        1 => col * n + (m - row),
        2 => (m - row) * n + (m - col),
        _ => (m - col) * n + row,
    }
}

/// Bilinear taps `(source_index, weight)` of output pixel `(row, col)`.
#[inline]
fn bilinear_taps(n: usize, row: usize, col: usize, sin: f64, cos: f64) -> [(usize, f64); 4] {
    let c = (n as f64 - 1.0) / 2.0;
    let x = col as f64 - c;
    let y = c - row as f64;
    // inverse rotation of the output position
    let xs = x * cos + y * sin;
    let ys = -x * sin + y * cos;
    let fc = xs + c;
    let fr = c - ys;
    let c0 = fc.floor();
    let r0 = fr.floor();
    let tc = fc - c0;
    let tr = fr - r0;
    let mut taps = [(0usize, 0.0f64); 4];
    let corners = [
        (r0, c0, (1.0 - tr) * (1.0 - tc)),
        (r0, c0 + 1.0, (1.0 - tr) * tc),
        (r0 + 1.0, c0, tr * (1.0 - tc)),
        (r0 + 1.0, c0 + 1.0, tr * tc),
    ];
    for (slot, &(r, cc, w)) in taps.iter_mut().zip(&corners) {
        if r >= 0.0 && cc >= 0.0 && r < n as f64 && cc < n as f64 {
            *slot = (r as usize * n + cc as usize, w);
        }
    }
    taps
}

pub fn rotate_image<T: Real>(image: &ImageGrid<T>, degrees: f64) -> ImageGrid<T> {
    let n = image.size();
    let src = image.data();
    let mut out = vec![T::zero(); n * n];
    if let Some(q) = quarter_turns(degrees) {
        for row in 0..n {
            for col in 0..n {
                out[row * n + col] = src[permuted_source(n, row, col, q)];
            }
        }
    } else {
        let (sin, cos) = degrees.to_radians().sin_cos();
        for row in 0..n {
            for col in 0..n {
                let mut acc = T::zero();
                for (i, w) in bilinear_taps(n, row, col, sin, cos) {
                    if w != 0.0 {
                        acc += T::of(w) * src[i];
                    }
                }
                out[row * n + col] = acc;
            }
        }
    }
    ImageGrid::from_raw(n, image.pixel_size(), out)
}

/// Transpose of [`rotate_image`] as a linear map.
pub fn rotate_adjoint<T: Real>(image: &ImageGrid<T>, degrees: f64) -> ImageGrid<T> {
    let n = image.size();
    let src = image.data();
    let mut out = vec![T::zero(); n * n];
    if let Some(q) = quarter_turns(degrees) {
        for row in 0..n {
            for col in 0..n {
                out[permuted_source(n, row, col, q)] = src[row * n + col];
            }
        }
    } else {
        let (sin, cos) = degrees.to_radians().sin_cos();
        for row in 0..n {
            for col in 0..n {
                let v = src[row * n + col];
                for (i, w) in bilinear_taps(n, row, col, sin, cos) {
                    if w != 0.0 {
                        out[i] += T::of(w) * v;
                    }
                }
            }
        }
    }
    ImageGrid::from_raw(n, image.pixel_size(), out)
}

/// Row-major sparse matrix given as per-row `(column, value)` lists.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub dim: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * x[j]).sum())
            .collect()
    }
}

/// The rotation as an explicit `n²`×`n²` sparse matrix.
pub fn rotation_matrix(n: usize, degrees: f64) -> SparseMatrix {
    let mut rows = Vec::with_capacity(n * n);
    if let Some(q) = quarter_turns(degrees) {
        for row in 0..n {
            for col in 0..n {
                rows.push(vec![(permuted_source(n, row, col, q), 1.0)]);
            }
        }
    } else {
        let (sin, cos) = degrees.to_radians().sin_cos();
        for row in 0..n {
            for col in 0..n {
                rows.push(
                    bilinear_taps(n, row, col, sin, cos)
                        .into_iter()
                        .filter(|&(_, w)| w != 0.0)
                        .collect(),
                );
            }
        }
    }
    SparseMatrix { dim: n * n, rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{apply_mask, circle_mask};
    use rand::Rng;

    fn smooth(n: usize) -> ImageGrid<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let data = (0..n * n)
            .map(|i| {
                let x = (i % n) as f64 - c;
                let y = (i / n) as f64 - c;
                (-(x * x + y * y) / (2.0 * (n as f64 / 6.0).powi(2))).exp()
                    * (1.0 + 0.3 * (x / 5.0).sin())
            })
            .collect();
        ImageGrid::new(n, n, 1.0, data).unwrap()
    }

    fn random(n: usize, seed: u64) -> ImageGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::new(n, n, 1.0, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_and_quarter_turns() {
        let x = random(7, 1);
        assert_eq!(rotate_image(&x, 0.0), x);
        assert_eq!(rotate_image(&x, 360.0), x);
        assert_eq!(rotate_image(&rotate_image(&x, 90.0), 270.0), x);
        assert_eq!(rotate_image(&rotate_image(&x, 180.0), -180.0), x);
        let sorted = |im: &ImageGrid<f64>| {
            let mut v = im.data().to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        assert_eq!(sorted(&rotate_image(&x, 90.0)), sorted(&x));
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        // top-right corner moves to top-left
        let mut data = vec![0.0f64; 9];
        data[2] = 1.0;
        let x = ImageGrid::new(3, 3, 1.0, data).unwrap();
        let y = rotate_image(&x, 90.0);
        assert_eq!(y.get(0, 0), 1.0);
        // bilinear path agrees with the permutation path near 90°
        let z = rotate_image(&x, 90.0 + 1e-9);
        assert!((z.get(0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn general_rotation_roundtrip() {
        let n = 64;
        let x = smooth(n);
        let back = rotate_image(&rotate_image(&x, 37.0), -37.0);
        let mask = circle_mask(n, 0.8);
        let diff = apply_mask(&back.zip_map(&x, |a, b| a - b), &mask);
        let rel = (diff.norm_sq() / apply_mask(&x, &mask).norm_sq()).sqrt();
        assert!(rel < 0.02, "{rel}");
    }

    #[test]
    fn near_unitary_on_smooth_images() {
        let n = 64;
        let x = smooth(n);
        let mask = circle_mask(n, 0.8);
        for deg in [13.0, 37.0, 121.5, 300.0] {
            let y = rotate_image(&x, deg);
            let ratio = (apply_mask(&y, &mask).norm_sq() / apply_mask(&x, &mask).norm_sq()).sqrt();
            assert!((ratio - 1.0).abs() < 0.02, "{deg}: {ratio}");
        }
    }

    #[test]
    fn linear_in_values() {
        let a = random(9, 2);
        let b = random(9, 3);
        let combo = a.zip_map(&b, |u, v| 1.5 * u - 2.0 * v);
        let lhs = rotate_image(&combo, 23.0);
        let ra = rotate_image(&a, 23.0);
        let rb = rotate_image(&b, 23.0);
        for ((l, u), v) in lhs.data().iter().zip(ra.data()).zip(rb.data()) {
            assert!((l - (1.5 * u - 2.0 * v)).abs() < 1e-13);
        }
    }

    #[test]
    fn adjoint_identity() {
        for deg in [90.0, 270.0, 33.0, 211.7] {
            let x = random(11, 4);
            let y = random(11, 5);
            let lhs = rotate_image(&x, deg).dot(&y);
            let rhs = x.dot(&rotate_adjoint(&y, deg));
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()), "{deg}");
        }
    }

    #[test]
    fn matrix_matches_image_path() {
        let x = random(10, 6);
        for deg in [180.0, 47.0] {
            let m = rotation_matrix(10, deg);
            let mx = m.apply(x.data());
            let rx = rotate_image(&x, deg);
            for (a, b) in mx.iter().zip(rx.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn schedules() {
        let fixed = RotationSchedule::new(RotationMode::Fixed, 4, 0).unwrap();
        assert_eq!(draw_rotations(&fixed, 17), vec![90.0, 180.0, 270.0, 360.0]);
        let two = RotationSchedule::new(RotationMode::Fixed, 2, 0).unwrap();
        assert_eq!(draw_rotations(&two, 0), vec![180.0, 360.0]);
        let rnd = RotationSchedule::new(RotationMode::Random, 5, 42).unwrap();
        let a = draw_rotations(&rnd, 3);
        assert_eq!(a, draw_rotations(&rnd, 3));
        assert_ne!(a, draw_rotations(&rnd, 4));
        assert_eq!(a.len(), 5);
        for step in 0..200 {
            assert!(draw_rotations(&rnd, step).iter().all(|&d| (1.0..=360.0).contains(&d)));
        }
        assert!(RotationSchedule::new(RotationMode::Random, 0, 1).is_err());
    }
}
