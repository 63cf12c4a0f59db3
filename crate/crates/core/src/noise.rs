//! Photon-count simulation under Beer's law and the post-log transform.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{format_err, invalid, Result};
use crate::geometry::{ScanGeometry, Sinogram};
use crate::io::{push_json_block, write_header, Reader, COUNTS_FLAG, COUNTS_MAGIC};
use crate::real::Real;

/// Counts above `i0 × COUNT_CEILING_FACTOR` are clipped.
pub const COUNT_CEILING_FACTOR: f64 = 50.0;

/// Zero counts are clamped to this value before taking the logarithm.
pub const MIN_COUNT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CountData {
    geometry: ScanGeometry,
    counts: Vec<u32>,
    i0: f64,
}

impl CountData {
    pub fn new(geometry: ScanGeometry, counts: Vec<u32>, i0: f64) -> Result<Self> {
        if !(i0 > 0.0 && i0.is_finite()) {
            return invalid(format!("blank-scan intensity must be positive, got {i0}"));
        }
        if counts.len() != geometry.n_rays() {
            return invalid("count array does not match geometry");
        }
        let ceiling = i0 * COUNT_CEILING_FACTOR;
        if counts.iter().any(|&c| c as f64 > ceiling) {
            return invalid("count exceeds the practical ceiling");
        }
        Ok(Self {
            geometry,
            counts,
            i0,
        })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn i0(&self) -> f64 {
        self.i0
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.counts.len() * 4);
        write_header(
            &mut out,
            COUNTS_MAGIC,
            self.geometry.n_detectors() as u32,
            self.geometry.n_angles() as u32,
            COUNTS_FLAG,
        );
        for c in &self.counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&self.i0.to_le_bytes());
        push_json_block(&mut out, &self.geometry);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let (w, h, flag) = r.header(COUNTS_MAGIC)?;
        if flag != COUNTS_FLAG {
            return format_err(format!("count file has element flag {flag}"));
        }
        let raw = r.take(w * h * 4)?;
        let counts = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let i0 = r.f64()?;
        let geometry: ScanGeometry = r.json_block()?;
        r.finish()?;
        if geometry.n_detectors() != w || geometry.n_angles() != h {
            return format_err("count header disagrees with its geometry block");
        }
        Self::new(geometry, counts, i0).map_err(|e| crate::error::Error::Format(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Generator for ray `index` under `seed`: ChaCha8 keyed by the seed with the
/// ray index as stream id, so draws do not depend on scheduling.
pub fn ray_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws `counts[i] ~ Poisson(i0 · exp(-y*_i))` independently per ray.
pub fn simulate_counts<T: Real>(clean: &Sinogram<T>, i0: f64, seed: u64) -> Result<CountData> {
    if !(i0 > 0.0 && i0.is_finite()) {
        return invalid(format!("blank-scan intensity must be positive, got {i0}"));
    }
    if clean.data().iter().any(|v| *v < T::zero()) {
        return invalid("clean sinogram has negative line integrals");
    }
    let ceiling = (i0 * COUNT_CEILING_FACTOR).min(u32::MAX as f64);
    let counts = clean
        .data()
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let mean = i0 * (-y.as_f64()).exp();
            if mean <= 0.0 {
                return 0;
            }
            let mut rng = ray_rng(seed, i as u64);
            let draw: f64 = Poisson::new(mean)
                .expect("positive finite mean")
                .sample(&mut rng);
            draw.min(ceiling) as u32
        })
        .collect();
    CountData::new(clean.geometry().clone(), counts, i0)
}

/// `ln(i0 / max(c, 1))` for real-valued counts.
pub fn postlog_value(i0: f64, count: f64) -> f64 {
    (i0 / count.max(MIN_COUNT)).ln()
}

pub fn postlog<T: Real>(counts: &CountData) -> Sinogram<T> {
    let i0 = counts.i0();
    let data = counts
        .counts()
        .iter()
        .map(|&c| T::of(postlog_value(i0, c as f64)))
        .collect();
    Sinogram::from_raw(counts.geometry().clone(), data)
}

/// Noiseless transmission `i0 · exp(-y*)` for each ray.
pub fn expected_counts<T: Real>(clean: &Sinogram<T>, i0: f64) -> Vec<f64> {
    clean.data().iter().map(|y| i0 * (-y.as_f64()).exp()).collect()
}

/// Simulate and log-transform in one step.
pub fn noisy_sinogram<T: Real>(clean: &Sinogram<T>, i0: f64, seed: u64) -> Result<Sinogram<T>> {
    Ok(postlog(&simulate_counts(clean, i0, seed)?))
}
