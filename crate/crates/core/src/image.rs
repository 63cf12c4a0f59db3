use crate::error::{invalid, Result};
use crate::real::Real;

/// Square 2D attenuation image (mm⁻¹), row-major, with a physical pixel size in mm.
///
/// Pixel `(row, col)` is centred at `x = (col - (n-1)/2)·ps`,
/// `y = ((n-1)/2 - row)·ps`, so row 0 is the top of the image and the
/// origin sits at the image centre.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid<T> {
    n: usize,
    pixel_size: f64,
    data: Vec<T>,
}

impl<T: Real> ImageGrid<T> {
    pub fn new(width: usize, height: usize, pixel_size: f64, data: Vec<T>) -> Result<Self> {
        if width != height {
            return invalid(format!("image must be square, got {width}x{height}"));
        }
        if width == 0 {
            return invalid("image must have at least one pixel");
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return invalid(format!("pixel size must be positive, got {pixel_size}"));
        }
        if data.len() != width * height {
            return invalid(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("image contains non-finite values");
        }
        Ok(Self {
            n: width,
            pixel_size,
            data,
        })
    }

    pub fn zeros(n: usize, pixel_size: f64) -> Self {
        Self::from_raw(n, pixel_size, vec![T::zero(); n * n])
    }

    /// Internal constructor for buffers produced by this crate's own numerics.
    pub(crate) fn from_raw(n: usize, pixel_size: f64, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), n * n);
        Self {
            n,
            pixel_size,
            data,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn width(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.n
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[cfg(test)]
    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.n + col]
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let c = (self.n as f64 - 1.0) / 2.0;
        (
            (col as f64 - c) * self.pixel_size,
            (c - row as f64) * self.pixel_size,
        )
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.n, self.pixel_size, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination; panics on shape mismatch (callers check shapes).
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert!(self.same_shape(other), "image shape mismatch");
        Self::from_raw(
            self.n,
            self.pixel_size,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn scaled(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn cast<U: Real>(&self) -> ImageGrid<U> {
        ImageGrid::from_raw(
            self.n,
            self.pixel_size,
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }

    /// Elementwise mean of equally shaped images.
    pub fn mean_of(images: &[&Self]) -> Result<Self> {
        let Some(first) = images.first() else {
            return invalid("cannot average an empty image list");
        };
        if images.iter().any(|im| !im.same_shape(first)) {
            return invalid("images to average differ in shape");
        }
        let mut acc = vec![T::zero(); first.data.len()];
        for im in images {
            for (a, &v) in acc.iter_mut().zip(&im.data) {
                *a += v;
            }
        }
        let inv = T::one() / T::of(images.len() as f64);
        for a in &mut acc {
            *a *= inv;
        }
        Ok(Self::from_raw(first.n, first.pixel_size, acc))
    }
}

/// Mask of pixels whose centres fall inside the inscribed circle shrunk to
/// `fraction` of its radius.
pub fn circle_mask(n: usize, fraction: f64) -> Vec<bool> {
    let c = (n as f64 - 1.0) / 2.0;
    let r = fraction * n as f64 / 2.0;
    let mut mask = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let dx = col as f64 - c;
            let dy = row as f64 - c;
            mask.push(dx * dx + dy * dy <= r * r);
        }
    }
    mask
}

/// Copy of `image` with pixels outside `mask` set to zero.
pub fn apply_mask<T: Real>(image: &ImageGrid<T>, mask: &[bool]) -> ImageGrid<T> {
    assert_eq!(mask.len(), image.data().len());
    ImageGrid::from_raw(
        image.size(),
        image.pixel_size(),
        image
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { T::zero() })
            .collect(),
    )
}
