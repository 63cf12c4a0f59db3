//! Analytic ellipse phantoms: the modified Shepp-Logan head and a seeded
//! random-ellipse family used to build training sets of any size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::ImageGrid;
use crate::real::Real;

/// Ellipse in normalized coordinates: the image square spans [-1, 1] on both axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub intensity: f64,
    pub a: f64,
    pub b: f64,
    pub x0: f64,
    pub y0: f64,
    pub phi_deg: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.phi_deg.to_radians().sin_cos();
        let dx = x - self.x0;
        let dy = y - self.y0;
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        (xr / self.a).powi(2) + (yr / self.b).powi(2) <= 1.0
    }

    /// Area in normalized units.
    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.a * self.b
    }
}

/// Modified (high-contrast) Shepp-Logan table with the skull at intensity 1.
pub const SHEPP_LOGAN: [Ellipse; 10] = [
    el(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    el(-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    el(-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    el(-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    el(0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    el(0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    el(0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    el(0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    el(0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    el(0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

const fn el(intensity: f64, a: f64, b: f64, x0: f64, y0: f64, phi_deg: f64) -> Ellipse {
    Ellipse {
        intensity,
        a,
        b,
        x0,
        y0,
        phi_deg,
    }
}

/// Additive rasterization: each pixel receives the sum of the intensities of
/// the ellipses containing its centre.
pub fn rasterize<T: Real>(ellipses: &[Ellipse], n: usize, pixel_size: f64) -> ImageGrid<T> {
    let half = n as f64 / 2.0;
    let c = (n as f64 - 1.0) / 2.0;
    let mut data = vec![T::zero(); n * n];
    for row in 0..n {
        let y = (c - row as f64) / half;
        for col in 0..n {
            let x = (col as f64 - c) / half;
            let v: f64 = ellipses
                .iter()
                .filter(|e| e.contains(x, y))
                .map(|e| e.intensity)
                .sum();
            data[row * n + col] = T::of(v);
        }
    }
    ImageGrid::from_raw(n, pixel_size, data)
}

pub fn make_shepp_logan<T: Real>(n: usize, pixel_size: f64, contrast_scale: f64) -> Result<ImageGrid<T>> {
    if n < 8 {
        return invalid(format!("phantom size must be at least 8, got {n}"));
    }
    if !(pixel_size > 0.0) || !contrast_scale.is_finite() {
        return invalid("pixel size must be positive and contrast finite");
    }
    Ok(rasterize(&scaled_shepp_logan(contrast_scale), n, pixel_size))
}

pub fn scaled_shepp_logan(contrast_scale: f64) -> Vec<Ellipse> {
    SHEPP_LOGAN
        .iter()
        .map(|e| Ellipse {
            intensity: e.intensity * contrast_scale,
            ..*e
        })
        .collect()
}

/// Sum over ellipses of area × intensity in mm²·mm⁻¹ for an `n`-pixel image.
pub fn analytic_mass(ellipses: &[Ellipse], n: usize, pixel_size: f64) -> f64 {
    let half = n as f64 * pixel_size / 2.0;
    ellipses
        .iter()
        .map(|e| e.area() * e.intensity)
        .sum::<f64>()
        * half
        * half
}

/// Seeded random-ellipse phantom: a body ellipse at `contrast_scale` with
/// 3–7 interior structures of mixed sign. Everything stays inside 85% of the
/// inscribed circle and negative sums are clipped to zero.
pub fn random_ellipses(seed: u64, contrast_scale: f64) -> Vec<Ellipse> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = Ellipse {
        intensity: contrast_scale,
        a: rng.random_range(0.65..0.85),
        b: rng.random_range(0.55..0.8),
        x0: 0.0,
        y0: 0.0,
        phi_deg: rng.random_range(0.0..180.0),
    };
    let mut out = vec![body];
    let count = rng.random_range(3..8);
    for _ in 0..count {
        let a = rng.random_range(0.04..0.25);
        let b = rng.random_range(0.04..0.25);
        let r = rng.random_range(0.0..0.45);
        let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let sign = if rng.random_bool(0.6) { 1.0 } else { -1.0 };
        out.push(Ellipse {
            intensity: sign * rng.random_range(0.2..0.8) * contrast_scale,
            a,
            b,
            x0: r * t.cos(),
            y0: r * t.sin(),
            phi_deg: rng.random_range(0.0..180.0),
        });
    }
    out
}

pub fn make_random_phantom<T: Real>(
    n: usize,
    pixel_size: f64,
    contrast_scale: f64,
    seed: u64,
) -> Result<ImageGrid<T>> {
    if n < 8 {
        return invalid(format!("phantom size must be at least 8, got {n}"));
    }
    let img: ImageGrid<T> = rasterize(&random_ellipses(seed, contrast_scale), n, pixel_size);
    Ok(img.map(|v| v.max(T::zero())))
}
