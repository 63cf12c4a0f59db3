//! Interleaved angular partitions and the (input, target) pairs built from
//! sub-reconstructions.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::Sinogram;
use crate::image::ImageGrid;
use crate::real::Real;

/// Target set `J` and input set `J^C`, both indexing subsets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub target: Vec<usize>,
    pub input: Vec<usize>,
}

impl Section {
    pub fn new(target: Vec<usize>, input: Vec<usize>, s: usize) -> Result<Self> {
        let sec = Section { target, input };
        sec.validate(s)?;
        Ok(sec)
    }

    fn validate(&self, s: usize) -> Result<()> {
        if self.target.is_empty() || self.input.is_empty() {
            return invalid("both sides of a section must be nonempty");
        }
        let mut seen = vec![false; s];
        for &j in self.target.iter().chain(&self.input) {
            if j >= s {
                return invalid(format!("section index {j} out of range for {s} subsets"));
            }
            if seen[j] {
                return invalid(format!("section index {j} appears twice"));
            }
            seen[j] = true;
        }
        if seen.iter().any(|v| !v) {
            return invalid("section does not cover every subset");
        }
        Ok(())
    }
}

/// Split of `k_total` angle indices into `s` interleaved subsets; subset `j`
/// holds `{j, j+s, j+2s, …}`. Sections pair each singleton target with the
/// union of the remaining subsets as input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRecord")]
pub struct AngularPartition {
    k_total: usize,
    s: usize,
    subsets: Vec<Vec<usize>>,
    sections: Vec<Section>,
}

#[derive(Deserialize)]
struct PartitionRecord {
    k_total: usize,
    s: usize,
    subsets: Vec<Vec<usize>>,
    sections: Vec<Section>,
}

impl TryFrom<PartitionRecord> for AngularPartition {
    type Error = Error;

    fn try_from(r: PartitionRecord) -> Result<Self> {
        let p = partition_angles(r.k_total, r.s)?;
        if p.subsets != r.subsets {
            return invalid("partition subsets do not follow the interleave rule");
        }
        for sec in &r.sections {
            sec.validate(r.s)?;
        }
        Ok(AngularPartition {
            sections: r.sections,
            ..p
        })
    }
}

pub fn partition_angles(k_total: usize, s: usize) -> Result<AngularPartition> {
    if s < 2 {
        return invalid(format!("need at least 2 splits, got {s}"));
    }
    if k_total == 0 || k_total % s != 0 {
        return invalid(format!("{k_total} angles cannot be split evenly into {s} subsets"));
    }
    let subsets = (0..s).map(|j| (j..k_total).step_by(s).collect()).collect();
    let sections = (0..s)
        .map(|j| Section {
            target: vec![j],
            input: (0..s).filter(|&i| i != j).collect(),
        })
        .collect();
    Ok(AngularPartition {
        k_total,
        s,
        subsets,
        sections,
    })
}

impl AngularPartition {
    pub fn k_total(&self) -> usize {
        self.k_total
    }

    pub fn splits(&self) -> usize {
        self.s
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("partition JSON: {e}")))
    }
}

pub fn split_sinogram<T: Real>(sino: &Sinogram<T>, partition: &AngularPartition) -> Result<Vec<Sinogram<T>>> {
    if sino.n_angles() != partition.k_total() {
        return invalid(format!(
            "sinogram has {} angles, partition expects {}",
            sino.n_angles(),
            partition.k_total()
        ));
    }
    partition.subsets().iter().map(|sub| sino.restrict(sub)).collect()
}

/// Inverse of [`split_sinogram`]: rows are put back in original index order.
pub fn interleave<T: Real>(
    parts: &[Sinogram<T>],
    partition: &AngularPartition,
    full_geometry: &crate::geometry::ScanGeometry,
) -> Result<Sinogram<T>> {
    if parts.len() != partition.splits() || full_geometry.n_angles() != partition.k_total() {
        return invalid("parts do not match partition");
    }
    let nd = full_geometry.n_detectors();
    let mut data = vec![T::zero(); partition.k_total() * nd];
    for (part, sub) in parts.iter().zip(partition.subsets()) {
        if part.n_angles() != sub.len() || part.n_detectors() != nd {
            return invalid("sub-sinogram shape does not match its subset");
        }
        for (r, &a) in sub.iter().enumerate() {
            data[a * nd..(a + 1) * nd].copy_from_slice(part.row(r));
        }
    }
    Sinogram::new(full_geometry.clone(), data)
}

/// Input = mean of the `J^C` sub-reconstructions, target = mean of the `J` ones.
pub fn make_training_pair<T: Real>(
    sub_recons: &[ImageGrid<T>],
    section: &Section,
) -> Result<(ImageGrid<T>, ImageGrid<T>)> {
    section.validate(sub_recons.len())?;
    let pick = |idx: &[usize]| -> Result<ImageGrid<T>> {
        let refs: Vec<&ImageGrid<T>> = idx.iter().map(|&j| &sub_recons[j]).collect();
        ImageGrid::mean_of(&refs)
    };
    Ok((pick(&section.input)?, pick(&section.target)?))
}
