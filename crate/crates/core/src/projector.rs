//! Ray-driven forward projector (Joseph's method) and its exact adjoint.
//!
//! Each ray is sampled once per pixel column (or row) along its dominant
//! axis; the sample is linearly interpolated between the two nearest pixel
//! centres on the orthogonal axis and weighted by the step length in mm.
//! Pixels outside the grid contribute zero.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::geometry::{Ray, ScanGeometry, Sinogram};
use crate::image::ImageGrid;
use crate::real::Real;

/// Angles handled per partial image during backprojection. Fixed so the
/// reduction order never depends on the thread count.
const BACKPROJECT_CHUNK: usize = 8;

/// Largest dense operator (entries) that [`build_dense_operator`] will allocate.
pub const DENSE_ENTRY_LIMIT: usize = 10_000_000;

/// Calls `visit(pixel_index, weight_mm)` for every pixel the ray touches.
pub fn ray_footprint(ray: &Ray, n: usize, pixel_size: f64, mut visit: impl FnMut(usize, f64)) {
    let c = (n as f64 - 1.0) / 2.0;
    let (ox, oy) = ray.origin;
    let (dx, dy) = ray.dir;
    if dx.abs() >= dy.abs() {
        let w = pixel_size / dx.abs();
        for col in 0..n {
            let x = (col as f64 - c) * pixel_size;
            let y = oy + (x - ox) / dx * dy;
            let r = c - y / pixel_size;
            interp_pair(r, n, w, |row, wt| visit(row * n + col, wt));
        }
    } else {
        let w = pixel_size / dy.abs();
        for row in 0..n {
            let y = (c - row as f64) * pixel_size;
            let x = ox + (y - oy) / dy * dx;
            let cpos = x / pixel_size + c;
            interp_pair(cpos, n, w, |col, wt| visit(row * n + col, wt));
        }
    }
}

#[inline]
fn interp_pair(pos: f64, n: usize, w: f64, mut visit: impl FnMut(usize, f64)) {
    if !(pos > -1.0 && pos < n as f64) {
        return;
    }
    let base = pos.floor();
    let frac = pos - base;
    let i0 = base as i64;
    if i0 >= 0 && (i0 as usize) < n && frac < 1.0 {
        let wt = (1.0 - frac) * w;
        if wt > 0.0 {
            visit(i0 as usize, wt);
        }
    }
    let i1 = i0 + 1;
    if i1 >= 0 && (i1 as usize) < n {
        let wt = frac * w;
        if wt > 0.0 {
            visit(i1 as usize, wt);
        }
    }
}

/// Line integrals of `image` along every ray of `geometry`.
pub fn forward_project<T: Real>(image: &ImageGrid<T>, geometry: &ScanGeometry) -> Result<Sinogram<T>> {
    geometry.check_image_fits(image.size(), image.pixel_size())?;
    let n = image.size();
    let ps = image.pixel_size();
    let nd = geometry.n_detectors();
    let x = image.data();
    let mut data = vec![T::zero(); geometry.n_rays()];
    data.par_chunks_mut(nd).enumerate().for_each(|(a, row)| {
        for (k, out) in row.iter_mut().enumerate() {
            let mut acc = T::zero();
            ray_footprint(&geometry.ray(a, k), n, ps, |p, w| acc += T::of(w) * x[p]);
            *out = acc;
        }
    });
    Ok(Sinogram::from_raw(geometry.clone(), data))
}

/// Exact adjoint of [`forward_project`] onto an `n`×`n` grid.
pub fn back_project<T: Real>(sino: &Sinogram<T>, n: usize, pixel_size: f64) -> Result<ImageGrid<T>> {
    let geometry = sino.geometry();
    if n == 0 {
        return invalid("backprojection grid must be nonempty");
    }
    geometry.check_image_fits(n, pixel_size)?;
    let nd = geometry.n_detectors();
    let n_angles = geometry.n_angles();
    let chunks: Vec<Vec<T>> = (0..n_angles.div_ceil(BACKPROJECT_CHUNK))
        .into_par_iter()
        .map(|ch| {
            let mut part = vec![T::zero(); n * n];
            let end = ((ch + 1) * BACKPROJECT_CHUNK).min(n_angles);
            for a in ch * BACKPROJECT_CHUNK..end {
                let row = sino.row(a);
                for (k, &v) in row.iter().enumerate().take(nd) {
                    if v == T::zero() {
                        continue;
                    }
                    ray_footprint(&geometry.ray(a, k), n, pixel_size, |p, w| {
                        part[p] += T::of(w) * v
                    });
                }
            }
            part
        })
        .collect();
    let mut out = vec![T::zero(); n * n];
    for part in &chunks {
        for (o, &v) in out.iter_mut().zip(part) {
            *o += v;
        }
    }
    Ok(ImageGrid::from_raw(n, pixel_size, out))
}

/// Explicit system matrix for tiny problems; row `i` is ray `i` in sinogram
/// order, column `j` is pixel `j` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOperator {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DenseOperator {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.cols + col]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return invalid("operand length does not match operator columns");
        }
        Ok(self
            .entries
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return invalid("operand length does not match operator rows");
        }
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.entries.chunks_exact(self.cols).zip(y) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
        Ok(out)
    }
}

pub fn build_dense_operator(geometry: &ScanGeometry, n: usize, pixel_size: f64) -> Result<DenseOperator> {
    let rows = geometry.n_rays();
    let cols = n * n;
    if rows.saturating_mul(cols) > DENSE_ENTRY_LIMIT {
        return invalid(format!(
            "dense operator of {rows}x{cols} exceeds the {DENSE_ENTRY_LIMIT} entry guard"
        ));
    }
    geometry.check_image_fits(n, pixel_size)?;
    let nd = geometry.n_detectors();
    let mut entries = vec![0.0; rows * cols];
    for a in 0..geometry.n_angles() {
        for k in 0..nd {
            let i = a * nd + k;
            ray_footprint(&geometry.ray(a, k), n, pixel_size, |p, w| {
                entries[i * cols + p] += w
            });
        }
    }
    Ok(DenseOperator {
        rows,
        cols,
        entries,
    })
}
