//! Grader label merging by pixel-wise majority vote.
//!
//! Three graders label every voxel as background, tissue or fluid. A voxel
//! takes the code at least two graders agree on; a three-way split is marked
//! [`codes::UNRESOLVED`] and must be settled with [`resolve`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{codes, LabelVolume, Provenance};

/// Exactly three grader label volumes of equal shape.
#[derive(Clone, Debug)]
pub struct GraderSet {
    grades: [LabelVolume; 3],
}

impl GraderSet {
    pub fn new(grades: Vec<LabelVolume>) -> Result<Self> {
        let grades: [LabelVolume; 3] = grades.try_into().map_err(|v: Vec<LabelVolume>| {
            Error::InvalidConfig(format!("expected exactly 3 graders, got {}", v.len()))
        })?;
        let shape = grades[0].shape;
        for g in &grades {
            g.validate()?;
            if g.shape != shape {
                return Err(Error::ShapeMismatch(format!(
                    "grader volumes differ in shape: {:?} vs {:?}",
                    g.shape.as_array(),
                    shape.as_array()
                )));
            }
            if g.provenance != Provenance::Grader {
                return Err(Error::InvalidConfig(format!(
                    "grader volume has provenance {:?}",
                    g.provenance
                )));
            }
            if g.unresolved_count() > 0 {
                return Err(Error::InvalidConfig(
                    "grader volumes may not contain unresolved codes".into(),
                ));
            }
        }
        let ids: Vec<_> = grades.iter().map(|g| g.grader_id.as_deref()).collect();
        if ids.iter().any(|id| id.is_none())
            || ids[0] == ids[1]
            || ids[0] == ids[2]
            || ids[1] == ids[2]
        {
            return Err(Error::InvalidConfig(
                "graders must carry three distinct grader ids".into(),
            ));
        }
        Ok(Self { grades })
    }

    pub fn grades(&self) -> &[LabelVolume; 3] {
        &self.grades
    }
}

/// Majority code of three votes, or `UNRESOLVED` when all differ.
#[inline]
pub fn vote(a: u8, b: u8, c: u8) -> u8 {
    if a == b || a == c {
        a
    } else if b == c {
        b
    } else {
        codes::UNRESOLVED
    }
}

/// Pixel-wise majority merge. Returns the merged volume and the number of
/// unresolved voxels.
pub fn vote_merge(graders: &GraderSet) -> (LabelVolume, usize) {
    let [g0, g1, g2] = &graders.grades;
    let merged_codes: Vec<u8> = g0
        .codes
        .iter()
        .zip(&g1.codes)
        .zip(&g2.codes)
        .map(|((&a, &b), &c)| vote(a, b, c))
        .collect();
    let unresolved = merged_codes
        .iter()
        .filter(|&&c| c == codes::UNRESOLVED)
        .count();
    (g0.with_codes(merged_codes, Provenance::Merged), unresolved)
}

/// A consensus decision for one unresolved voxel, `index = [b, d, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub index: [usize; 3],
    pub code: u8,
}

/// Overwrites unresolved voxels with the agreed codes.
pub fn resolve(merged: &LabelVolume, resolutions: &[Resolution]) -> Result<LabelVolume> {
    let mut out = merged.clone();
    for r in resolutions {
        let [b, d, w] = r.index;
        let s = merged.shape;
        if b >= s.n_bscans || d >= s.depth || w >= s.width {
            return Err(Error::Resolution(format!("voxel {:?} out of bounds", r.index)));
        }
        if !codes::is_class(r.code) {
            return Err(Error::Resolution(format!("invalid code {}", r.code)));
        }
        let i = s.index(b, d, w);
        if out.codes[i] != codes::UNRESOLVED {
            return Err(Error::Resolution(format!(
                "voxel {:?} is not unresolved (code {})",
                r.index, out.codes[i]
            )));
        }
        out.codes[i] = r.code;
    }
    Ok(out)
}

/// Coordinates `[b, d, w]` of every unresolved voxel, in storage order.
pub fn unresolved_voxels(labels: &LabelVolume) -> Vec<[usize; 3]> {
    labels
        .codes
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == codes::UNRESOLVED)
        .map(|(i, _)| labels.shape.coords(i))
        .collect()
}

/// Voxel count per category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelStats {
    pub background: usize,
    pub tissue: usize,
    pub fluid: usize,
    pub unresolved: usize,
}

impl LabelStats {
    pub fn total(&self) -> usize {
        self.background + self.tissue + self.fluid + self.unresolved
    }
}

pub fn label_stats(labels: &LabelVolume) -> LabelStats {
    let mut s = LabelStats::default();
    for &c in &labels.codes {
        match c {
            codes::BACKGROUND => s.background += 1,
            codes::TISSUE => s.tissue += 1,
            codes::FLUID => s.fluid += 1,
            _ => s.unresolved += 1,
        }
    }
    s
}
