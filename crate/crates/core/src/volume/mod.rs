//! In-memory volume model shared by every pipeline stage.
//!
//! All grids are indexed `(bscan, depth, width)` with width fastest, which is
//! also the on-disk order of the RFNV1 container (see [`container`]).

mod container;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{
    decode_volume, encode_volume, load_labels, load_probabilities, load_scan, load_volume,
    save_volume, MAGIC,
};

/// Free-form metadata attached to a volume header.
pub type Extras = BTreeMap<String, serde_json::Value>;

/// Label codes stored in a [`LabelVolume`].
pub mod codes {
    pub const BACKGROUND: u8 = 0;
    pub const TISSUE: u8 = 1;
    pub const FLUID: u8 = 2;
    /// Three-way grader disagreement awaiting consensus.
    pub const UNRESOLVED: u8 = 255;

    /// Class codes in network output order.
    pub const CLASSES: [u8; 3] = [BACKGROUND, TISSUE, FLUID];

    pub fn is_valid(code: u8) -> bool {
        matches!(code, BACKGROUND | TISSUE | FLUID | UNRESOLVED)
    }

    pub fn is_class(code: u8) -> bool {
        matches!(code, BACKGROUND | TISSUE | FLUID)
    }
}

/// Number of output classes (background, tissue, fluid).
pub const NUM_CLASSES: usize = 3;

/// Grid dimensions in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub n_bscans: usize,
    pub depth: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(n_bscans: usize, depth: usize, width: usize) -> Self {
        Self {
            n_bscans,
            depth,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.n_bscans * self.depth * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxels in one B-scan.
    pub fn bscan_len(&self) -> usize {
        self.depth * self.width
    }

    /// Number of lateral (en-face) positions.
    pub fn enface_len(&self) -> usize {
        self.n_bscans * self.width
    }

    #[inline]
    pub fn index(&self, b: usize, d: usize, w: usize) -> usize {
        debug_assert!(b < self.n_bscans && d < self.depth && w < self.width);
        (b * self.depth + d) * self.width + w
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let w = index % self.width;
        let rest = index / self.width;
        [rest / self.depth, rest % self.depth, w]
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.n_bscans, self.depth, self.width]
    }

    pub(crate) fn check_nonzero(&self) -> Result<()> {
        if self.n_bscans == 0 || self.depth == 0 || self.width == 0 {
            return Err(Error::Invariant(format!(
                "shape dimensions must be >= 1, got {:?}",
                self.as_array()
            )));
        }
        Ok(())
    }
}

impl From<[usize; 3]> for Shape3 {
    fn from(v: [usize; 3]) -> Self {
        Shape3::new(v[0], v[1], v[2])
    }
}

/// Physical voxel spacing in micrometers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub bscan_um: f64,
    pub axial_um: f64,
    pub lateral_um: f64,
}

impl Spacing {
    /// Lateral sampling of a 3 mm raster with 304 A-lines per B-scan.
    pub const LATERAL_3MM_304_UM: f64 = 3000.0 / 304.0;
    /// Axial sampling assumed for synthetic volumes.
    pub const DEFAULT_AXIAL_UM: f64 = 3.0;

    pub const fn new(bscan_um: f64, axial_um: f64, lateral_um: f64) -> Self {
        Self {
            bscan_um,
            axial_um,
            lateral_um,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.bscan_um, self.axial_um, self.lateral_um]
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_mm3(&self) -> f64 {
        self.bscan_um * self.axial_um * self.lateral_um / 1e9
    }

    /// Area of one en-face cell (B-scan step × A-line step) in mm².
    pub fn enface_cell_mm2(&self) -> f64 {
        self.bscan_um * self.lateral_um / 1e6
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bscan", self.bscan_um),
            ("axial", self.axial_um),
            ("lateral", self.lateral_um),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Invariant(format!(
                    "{name} spacing must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::new(
            Spacing::LATERAL_3MM_304_UM,
            Spacing::DEFAULT_AXIAL_UM,
            Spacing::LATERAL_3MM_304_UM,
        )
    }
}

impl From<[f64; 3]> for Spacing {
    fn from(v: [f64; 3]) -> Self {
        Spacing::new(v[0], v[1], v[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Oct,
    Octa,
    Fused,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Oct => "oct",
            Modality::Octa => "octa",
            Modality::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "oct" => Some(Modality::Oct),
            "octa" => Some(Modality::Octa),
            "fused" => Some(Modality::Fused),
            _ => None,
        }
    }
}

/// Reflectance (OCT), flow (OCTA) or fused intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanVolume {
    pub shape: Shape3,
    pub spacing: Spacing,
    pub modality: Modality,
    pub volume_id: String,
    pub eye_id: Option<String>,
    pub extras: Extras,
    pub voxels: Vec<f32>,
}

impl ScanVolume {
    pub fn zeros(shape: Shape3, spacing: Spacing, modality: Modality, volume_id: &str) -> Self {
        Self {
            shape,
            spacing,
            modality,
            volume_id: volume_id.to_string(),
            eye_id: None,
            extras: Extras::new(),
            voxels: vec![0.0; shape.len()],
        }
    }

    /// Wraps `voxels` and checks the type invariants.
    pub fn from_voxels(
        shape: Shape3,
        spacing: Spacing,
        modality: Modality,
        volume_id: &str,
        voxels: Vec<f32>,
    ) -> Result<Self> {
        let v = Self {
            shape,
            spacing,
            modality,
            volume_id: volume_id.to_string(),
            eye_id: None,
            extras: Extras::new(),
            voxels,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.check_nonzero()?;
        self.spacing.validate()?;
        if self.voxels.len() != self.shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} voxels for shape {:?}",
                self.voxels.len(),
                self.shape.as_array()
            )));
        }
        if let Some(i) = self
            .voxels
            .iter()
            .position(|v| !(v.is_finite() && (0.0..=1.0).contains(v)))
        {
            return Err(Error::Invariant(format!(
                "intensity {} at voxel {i} outside [0, 1]",
                self.voxels[i]
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, b: usize, d: usize, w: usize) -> f32 {
        self.voxels[self.shape.index(b, d, w)]
    }

    pub fn bscan(&self, b: usize) -> &[f32] {
        let n = self.shape.bscan_len();
        &self.voxels[b * n..(b + 1) * n]
    }

    pub fn bscan_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.shape.bscan_len();
        &mut self.voxels[b * n..(b + 1) * n]
    }

    /// Copy that keeps metadata but swaps the payload.
    pub fn with_voxels(&self, voxels: Vec<f32>) -> Self {
        debug_assert_eq!(voxels.len(), self.shape.len());
        Self {
            shape: self.shape,
            spacing: self.spacing,
            modality: self.modality,
            volume_id: self.volume_id.clone(),
            eye_id: self.eye_id.clone(),
            extras: self.extras.clone(),
            voxels,
        }
    }
}

/// Who produced a label map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Grader,
    Merged,
    Predicted,
    PhantomTruth,
}

/// Per-voxel category codes; see [`codes`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub shape: Shape3,
    pub spacing: Spacing,
    pub provenance: Provenance,
    pub volume_id: String,
    pub eye_id: Option<String>,
    pub grader_id: Option<String>,
    pub extras: Extras,
    pub codes: Vec<u8>,
}

impl LabelVolume {
    pub fn filled(
        shape: Shape3,
        spacing: Spacing,
        provenance: Provenance,
        volume_id: &str,
        code: u8,
    ) -> Self {
        Self {
            shape,
            spacing,
            provenance,
            volume_id: volume_id.to_string(),
            eye_id: None,
            grader_id: None,
            extras: Extras::new(),
            codes: vec![code; shape.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.check_nonzero()?;
        self.spacing.validate()?;
        if self.codes.len() != self.shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} codes for shape {:?}",
                self.codes.len(),
                self.shape.as_array()
            )));
        }
        if let Some(index) = self.codes.iter().position(|&c| !codes::is_valid(c)) {
            return Err(Error::InvalidLabelCode {
                code: self.codes[index],
                index,
            });
        }
        if self.provenance != Provenance::Merged {
            if let Some(index) = self.codes.iter().position(|&c| c == codes::UNRESOLVED) {
                return Err(Error::Invariant(format!(
                    "unresolved code at voxel {index} in a non-merged label volume"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, b: usize, d: usize, w: usize) -> u8 {
        self.codes[self.shape.index(b, d, w)]
    }

    pub fn bscan(&self, b: usize) -> &[u8] {
        let n = self.shape.bscan_len();
        &self.codes[b * n..(b + 1) * n]
    }

    pub fn bscan_mut(&mut self, b: usize) -> &mut [u8] {
        let n = self.shape.bscan_len();
        &mut self.codes[b * n..(b + 1) * n]
    }

    pub fn count(&self, code: u8) -> usize {
        self.codes.iter().filter(|&&c| c == code).count()
    }

    pub fn unresolved_count(&self) -> usize {
        self.count(codes::UNRESOLVED)
    }

    /// Fails with [`Error::UnresolvedLabels`] if any voxel is still 255.
    pub fn require_complete(&self) -> Result<()> {
        match self.unresolved_count() {
            0 => Ok(()),
            n => Err(Error::UnresolvedLabels(n)),
        }
    }

    pub fn with_codes(&self, codes: Vec<u8>, provenance: Provenance) -> Self {
        debug_assert_eq!(codes.len(), self.shape.len());
        Self {
            shape: self.shape,
            spacing: self.spacing,
            provenance,
            volume_id: self.volume_id.clone(),
            eye_id: self.eye_id.clone(),
            grader_id: None,
            extras: self.extras.clone(),
            codes,
        }
    }
}

/// Per-voxel class probabilities, class axis fastest in
/// `(background, tissue, fluid)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume {
    pub shape: Shape3,
    pub spacing: Spacing,
    pub volume_id: String,
    pub eye_id: Option<String>,
    pub extras: Extras,
    pub probs: Vec<f32>,
}

impl ProbabilityVolume {
    pub const CLASS_ORDER: &'static str = "background,tissue,fluid";
    pub const SUM_TOLERANCE: f32 = 1e-5;

    pub fn validate(&self) -> Result<()> {
        self.shape.check_nonzero()?;
        self.spacing.validate()?;
        if self.probs.len() != self.shape.len() * NUM_CLASSES {
            return Err(Error::ShapeMismatch(format!(
                "{} probabilities for shape {:?} x {NUM_CLASSES}",
                self.probs.len(),
                self.shape.as_array()
            )));
        }
        for (i, p) in self.probs.chunks_exact(NUM_CLASSES).enumerate() {
            if p.iter().any(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
                return Err(Error::Invariant(format!(
                    "probability outside [0, 1] at voxel {i}"
                )));
            }
            let sum: f32 = p.iter().sum();
            if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::Invariant(format!(
                    "class probabilities at voxel {i} sum to {sum}"
                )));
            }
        }
        Ok(())
    }

    /// Probability of `class` (0 background, 1 tissue, 2 fluid) at every voxel.
    pub fn class_channel(&self, class: usize) -> Vec<f32> {
        self.probs
            .chunks_exact(NUM_CLASSES)
            .map(|p| p[class])
            .collect()
    }

    /// Arg-max labels; ties resolve to the lower class index.
    pub fn argmax(&self) -> LabelVolume {
        let codes = self
            .probs
            .chunks_exact(NUM_CLASSES)
            .map(|p| {
                let mut best = 0;
                for c in 1..NUM_CLASSES {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                codes::CLASSES[best]
            })
            .collect();
        LabelVolume {
            shape: self.shape,
            spacing: self.spacing,
            provenance: Provenance::Predicted,
            volume_id: self.volume_id.clone(),
            eye_id: self.eye_id.clone(),
            grader_id: None,
            extras: self.extras.clone(),
            codes,
        }
    }
}

/// Any volume the container can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Scan(ScanVolume),
    Label(LabelVolume),
    Probability(ProbabilityVolume),
}

impl Volume {
    pub fn validate(&self) -> Result<()> {
        match self {
            Volume::Scan(v) => v.validate(),
            Volume::Label(v) => v.validate(),
            Volume::Probability(v) => v.validate(),
        }
    }

    pub fn shape(&self) -> Shape3 {
        match self {
            Volume::Scan(v) => v.shape,
            Volume::Label(v) => v.shape,
            Volume::Probability(v) => v.shape,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Volume::Scan(_) => "scan",
            Volume::Label(_) => "label",
            Volume::Probability(_) => "probability",
        }
    }
}

impl From<ScanVolume> for Volume {
    fn from(v: ScanVolume) -> Self {
        Volume::Scan(v)
    }
}

impl From<LabelVolume> for Volume {
    fn from(v: LabelVolume) -> Self {
        Volume::Label(v)
    }
}

impl From<ProbabilityVolume> for Volume {
    fn from(v: ProbabilityVolume) -> Self {
        Volume::Probability(v)
    }
}
