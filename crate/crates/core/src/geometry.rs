use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeamKind {
    Parallel,
    /// Point source with a flat line detector.
    Fan,
}

/// Acquisition description shared by projector, reconstruction and I/O.
///
/// At view angle θ the central ray travels along `d = (-sin θ, cos θ)` and the
/// detector axis is `u = (cos θ, sin θ)`. Detector `k` sits at offset
/// `(k - (n-1)/2)·pitch` along `u`. For fan beam the source is at `-DSO·d`
/// and the flat detector is centred at `+DOD·d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryRecord", into = "GeometryRecord")]
pub struct ScanGeometry {
    kind: BeamKind,
    angles_deg: Vec<f64>,
    n_detectors: usize,
    detector_pitch: f64,
    source_to_origin: f64,
    origin_to_detector: f64,
}

#[derive(Serialize, Deserialize)]
struct GeometryRecord {
    kind: BeamKind,
    angles_deg: Vec<f64>,
    n_detectors: usize,
    detector_pitch: f64,
    #[serde(default)]
    source_to_origin: f64,
    #[serde(default)]
    origin_to_detector: f64,
}

impl TryFrom<GeometryRecord> for ScanGeometry {
    type Error = Error;

    fn try_from(r: GeometryRecord) -> Result<Self> {
        let g = ScanGeometry {
            kind: r.kind,
            angles_deg: r.angles_deg,
            n_detectors: r.n_detectors,
            detector_pitch: r.detector_pitch,
            source_to_origin: r.source_to_origin,
            origin_to_detector: r.origin_to_detector,
        };
        g.validate()?;
        Ok(g)
    }
}

impl From<ScanGeometry> for GeometryRecord {
    fn from(g: ScanGeometry) -> Self {
        GeometryRecord {
            kind: g.kind,
            angles_deg: g.angles_deg,
            n_detectors: g.n_detectors,
            detector_pitch: g.detector_pitch,
            source_to_origin: g.source_to_origin,
            origin_to_detector: g.origin_to_detector,
        }
    }
}

/// A single ray: a point on the line and a unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: (f64, f64),
    pub dir: (f64, f64),
}

impl ScanGeometry {
    pub fn parallel(angles_deg: Vec<f64>, n_detectors: usize, detector_pitch: f64) -> Result<Self> {
        let g = Self {
            kind: BeamKind::Parallel,
            angles_deg,
            n_detectors,
            detector_pitch,
            source_to_origin: 0.0,
            origin_to_detector: 0.0,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn fan(
        angles_deg: Vec<f64>,
        n_detectors: usize,
        detector_pitch: f64,
        source_to_origin: f64,
        origin_to_detector: f64,
    ) -> Result<Self> {
        let g = Self {
            kind: BeamKind::Fan,
            angles_deg,
            n_detectors,
            detector_pitch,
            source_to_origin,
            origin_to_detector,
        };
        g.validate()?;
        Ok(g)
    }

    /// `k` equispaced angles over the conventional range of the beam kind:
    /// [0°, 180°) for parallel beam, [0°, 360°) for fan beam.
    pub fn uniform_angles(kind: BeamKind, k: usize) -> Vec<f64> {
        let span = match kind {
            BeamKind::Parallel => 180.0,
            BeamKind::Fan => 360.0,
        };
        (0..k).map(|i| span * i as f64 / k as f64).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.angles_deg.is_empty() {
            return invalid("geometry needs at least one angle");
        }
        if self
            .angles_deg
            .iter()
            .any(|a| !a.is_finite() || *a < 0.0 || *a >= 360.0)
        {
            return invalid("angles must lie in [0, 360) degrees");
        }
        if self.angles_deg.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("angles must be strictly increasing");
        }
        if self.n_detectors == 0 {
            return invalid("geometry needs at least one detector");
        }
        if !(self.detector_pitch > 0.0 && self.detector_pitch.is_finite()) {
            return invalid("detector pitch must be positive");
        }
        if self.kind == BeamKind::Fan
            && !(self.source_to_origin > 0.0
                && self.origin_to_detector > 0.0
                && self.source_to_origin.is_finite()
                && self.origin_to_detector.is_finite())
        {
            return invalid("fan beam needs positive source and detector distances");
        }
        Ok(())
    }

    pub fn kind(&self) -> BeamKind {
        self.kind
    }

    pub fn angles_deg(&self) -> &[f64] {
        &self.angles_deg
    }

    pub fn n_angles(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn detector_pitch(&self) -> f64 {
        self.detector_pitch
    }

    pub fn source_to_origin(&self) -> f64 {
        self.source_to_origin
    }

    pub fn origin_to_detector(&self) -> f64 {
        self.origin_to_detector
    }

    pub fn n_rays(&self) -> usize {
        self.n_angles() * self.n_detectors
    }

    pub fn detector_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_pitch
    }

    /// Unit vectors `(d, u)`: central ray direction and detector axis.
    pub fn view_axes(&self, angle_index: usize) -> ((f64, f64), (f64, f64)) {
        let t = self.angles_deg[angle_index].to_radians();
        let (s, c) = t.sin_cos();
        ((-s, c), (c, s))
    }

    pub fn ray(&self, angle_index: usize, detector: usize) -> Ray {
        let (d, u) = self.view_axes(angle_index);
        let s = self.detector_offset(detector);
        match self.kind {
            BeamKind::Parallel => Ray {
                origin: (s * u.0, s * u.1),
                dir: d,
            },
            BeamKind::Fan => {
                let src = (-self.source_to_origin * d.0, -self.source_to_origin * d.1);
                let det = (
                    self.origin_to_detector * d.0 + s * u.0,
                    self.origin_to_detector * d.1 + s * u.1,
                );
                let (dx, dy) = (det.0 - src.0, det.1 - src.1);
                let len = dx.hypot(dy);
                Ray {
                    origin: src,
                    dir: (dx / len, dy / len),
                }
            }
        }
    }

    /// Radius of the disc around the origin covered by every view.
    pub fn fov_radius(&self) -> f64 {
        let half = self.n_detectors as f64 * self.detector_pitch / 2.0;
        match self.kind {
            BeamKind::Parallel => half,
            BeamKind::Fan => {
                let gamma = (half / (self.source_to_origin + self.origin_to_detector)).atan();
                self.source_to_origin * gamma.sin()
            }
        }
    }

    /// Errors unless an `n`×`n` image with the given pixel size lies inside
    /// the scanned field of view (the full image square, corners included).
    pub fn check_image_fits(&self, n: usize, pixel_size: f64) -> Result<()> {
        let half_diag = n as f64 * pixel_size * std::f64::consts::SQRT_2 / 2.0;
        let fov = self.fov_radius();
        if half_diag > fov * (1.0 + 1e-12) {
            return invalid(format!(
                "image half-diagonal {half_diag:.3} mm exceeds field of view radius {fov:.3} mm"
            ));
        }
        if self.kind == BeamKind::Fan && self.source_to_origin <= half_diag {
            return invalid("fan-beam source lies inside the image");
        }
        Ok(())
    }

    /// Geometry holding only the listed angles, in ascending index order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let idx = checked_subset(indices, self.n_angles())?;
        Ok(Self {
            angles_deg: idx.iter().map(|&i| self.angles_deg[i]).collect(),
            ..self.clone()
        })
    }
}

/// Sorted copy of `indices` after checking they are nonempty, distinct and in range.
pub(crate) fn checked_subset(indices: &[usize], n: usize) -> Result<Vec<usize>> {
    if indices.is_empty() {
        return invalid("angle subset is empty");
    }
    let mut idx = indices.to_vec();
    idx.sort_unstable();
    if idx.windows(2).any(|w| w[0] == w[1]) {
        return invalid("angle subset contains duplicate indices");
    }
    if *idx.last().unwrap() >= n {
        return invalid(format!("angle index out of range for {n} angles"));
    }
    Ok(idx)
}

/// Angles × detectors array of line integrals together with its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram<T> {
    geometry: ScanGeometry,
    data: Vec<T>,
}

impl<T: Real> Sinogram<T> {
    pub fn new(geometry: ScanGeometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geometry.n_rays() {
            return invalid(format!(
                "sinogram data length {} does not match {}x{}",
                data.len(),
                geometry.n_angles(),
                geometry.n_detectors()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("sinogram contains non-finite values");
        }
        Ok(Self { geometry, data })
    }

    pub(crate) fn from_raw(geometry: ScanGeometry, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), geometry.n_rays());
        Self { geometry, data }
    }

    pub fn zeros(geometry: ScanGeometry) -> Self {
        let len = geometry.n_rays();
        Self::from_raw(geometry, vec![T::zero(); len])
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn n_angles(&self) -> usize {
        self.geometry.n_angles()
    }

    pub fn n_detectors(&self) -> usize {
        self.geometry.n_detectors()
    }

    pub fn row(&self, angle_index: usize) -> &[T] {
        let w = self.n_detectors();
        &self.data[angle_index * w..(angle_index + 1) * w]
    }

    /// Rows for the listed angle indices, with the matching restricted geometry.
    pub fn restrict(&self, indices: &[usize]) -> Result<Self> {
        let idx = checked_subset(indices, self.n_angles())?;
        let geometry = self.geometry.subset(&idx)?;
        let mut data = Vec::with_capacity(idx.len() * self.n_detectors());
        for &i in &idx {
            data.extend_from_slice(self.row(i));
        }
        Ok(Self { geometry, data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.geometry.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.data.len() != other.data.len() || self.geometry != other.geometry {
            return invalid("sinogram geometry mismatch");
        }
        Ok(Self::from_raw(
            self.geometry.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> Sinogram<U> {
        Sinogram::from_raw(
            self.geometry.clone(),
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }
}
