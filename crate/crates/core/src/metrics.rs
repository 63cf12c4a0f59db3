//! Image quality metrics: PSNR and Gaussian-window SSIM.

use crate::error::{invalid, Result};
use crate::image::ImageGrid;
use crate::real::Real;

pub const PSNR_CAP_DB: f64 = 200.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair<T: Real>(x: &ImageGrid<T>, reference: &ImageGrid<T>, data_range: f64) -> Result<()> {
    if !x.same_shape(reference) {
        return invalid(format!(
            "metric inputs differ in shape: {} vs {}",
            x.size(),
            reference.size()
        ));
    }
    if !(data_range > 0.0 && data_range.is_finite()) {
        return invalid(format!("data range must be positive, got {data_range}"));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn mse<T: Real>(x: &ImageGrid<T>, reference: &ImageGrid<T>) -> f64 {
    x.data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / x.data().len() as f64
}

pub fn metric_psnr<T: Real>(x: &ImageGrid<T>, reference: &ImageGrid<T>, data_range: f64) -> Result<f64> {
    check_pair(x, reference, data_range)?;
    Ok(psnr_from_mse(mse(x, reference), data_range))
}

/// PSNR restricted to pixels where `mask` is true.
pub fn psnr_masked<T: Real>(
    x: &ImageGrid<T>,
    reference: &ImageGrid<T>,
    data_range: f64,
    mask: &[bool],
) -> Result<f64> {
    check_pair(x, reference, data_range)?;
    if mask.len() != x.data().len() {
        return invalid("mask length does not match image");
    }
    let (sum, count) = x
        .data()
        .iter()
        .zip(reference.data())
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), ((a, b), _)| {
            (s + (a.as_f64() - b.as_f64()).powi(2), c + 1)
        });
    if count == 0 {
        return invalid("mask selects no pixels");
    }
    Ok(psnr_from_mse(sum / count as f64, data_range))
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering; output is `(n - w + 1)²`.
fn filter_valid(src: &[f64], n: usize, taps: &[f64]) -> Vec<f64> {
    let w = taps.len();
    let m = n - w + 1;
    let mut horiz = vec![0.0; n * m];
    for r in 0..n {
        for c in 0..m {
            horiz[r * m + c] = taps.iter().enumerate().map(|(k, t)| t * src[r * n + c + k]).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            out[r * m + c] = taps.iter().enumerate().map(|(k, t)| t * horiz[(r + k) * m + c]).sum();
        }
    }
    out
}

/// Mean SSIM over all window positions fully inside the image.
pub fn metric_ssim<T: Real>(x: &ImageGrid<T>, reference: &ImageGrid<T>, data_range: f64) -> Result<f64> {
    check_pair(x, reference, data_range)?;
    let n = x.size();
    if n < SSIM_WINDOW {
        return invalid(format!("SSIM needs images of at least {SSIM_WINDOW} pixels"));
    }
    let a: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    let b: Vec<f64> = reference.data().iter().map(|v| v.as_f64()).collect();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(u, v)| u * v).collect();
    let taps = gaussian_taps();
    let mu_a = filter_valid(&a, n, &taps);
    let mu_b = filter_valid(&b, n, &taps);
    let e_aa = filter_valid(&aa, n, &taps);
    let e_bb = filter_valid(&bb, n, &taps);
    let e_ab = filter_valid(&ab, n, &taps);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}
