//! B-scan smoothing, intensity normalization, OCT/OCTA fusion and flip
//! augmentation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Modality, ScanVolume};

/// Mixing weight between OCT and OCTA intensities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub beta: f64,
}

impl FusionConfig {
    pub fn new(beta: f64) -> Result<Self> {
        let c = Self { beta };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!(
                "fusion beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Replaces every B-scan by the mean of itself and its two neighbours.
/// The first and last B-scans average over the two scans available.
pub fn smooth_bscans(volume: &ScanVolume) -> ScanVolume {
    let n = volume.shape.n_bscans;
    let len = volume.shape.bscan_len();
    let mut out = vec![0f32; volume.voxels.len()];
    for b in 0..n {
        let lo = b.saturating_sub(1);
        let hi = (b + 1).min(n - 1);
        let count = (hi - lo + 1) as f64;
        let dst = &mut out[b * len..(b + 1) * len];
        for (i, o) in dst.iter_mut().enumerate() {
            let sum: f64 = (lo..=hi).map(|k| volume.voxels[k * len + i] as f64).sum();
            *o = (sum / count) as f32;
        }
    }
    volume.with_voxels(out)
}

/// Min-max rescale to `[0, 1]`; constant volumes become all zeros.
pub fn normalize(volume: &ScanVolume) -> ScanVolume {
    let (lo, hi) = volume
        .voxels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi as f64 - lo as f64;
    let voxels = if range > 0.0 {
        volume
            .voxels
            .iter()
            .map(|&v| (((v as f64 - lo as f64) / range) as f32).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; volume.voxels.len()]
    };
    volume.with_voxels(voxels)
}

/// Voxelwise `(1 - beta) * oct + beta * octa`.
pub fn fuse(oct: &ScanVolume, octa: &ScanVolume, config: FusionConfig) -> Result<ScanVolume> {
    config.validate()?;
    if oct.shape != octa.shape {
        return Err(Error::ShapeMismatch(format!(
            "oct {:?} vs octa {:?}",
            oct.shape.as_array(),
            octa.shape.as_array()
        )));
    }
    if oct.spacing != octa.spacing {
        return Err(Error::ShapeMismatch(format!(
            "oct spacing {:?} vs octa spacing {:?}",
            oct.spacing.as_array(),
            octa.spacing.as_array()
        )));
    }
    let voxels = fuse_slices(&oct.voxels, &octa.voxels, config.beta);
    let mut out = oct.with_voxels(voxels);
    out.modality = Modality::Fused;
    out.extras
        .insert("fusion_beta".into(), serde_json::Value::from(config.beta));
    Ok(out)
}

/// [`fuse`] on raw slices of equal length; `beta` must already be validated.
pub fn fuse_slices(oct: &[f32], octa: &[f32], beta: f64) -> Vec<f32> {
    oct.iter()
        .zip(octa)
        .map(|(&a, &b)| fuse_voxel(a, b, beta))
        .collect()
}

#[inline]
pub(crate) fn fuse_voxel(oct: f32, octa: f32, beta: f64) -> f32 {
    let v = ((1.0 - beta) * oct as f64 + beta * octa as f64) as f32;
    v.clamp(oct.min(octa), oct.max(octa))
}

/// Network input for one volume: smoothed and normalized OCT, fused with the
/// smoothed and normalized OCTA when `fusion` is given.
pub fn prepare_input(
    oct: &ScanVolume,
    octa: Option<&ScanVolume>,
    fusion: Option<FusionConfig>,
) -> Result<ScanVolume> {
    let oct_n = normalize(&smooth_bscans(oct));
    match fusion {
        None => Ok(oct_n),
        Some(cfg) => {
            let octa = octa.ok_or_else(|| {
                Error::InvalidConfig("fusion requested but no OCTA volume supplied".into())
            })?;
            let octa_n = normalize(&smooth_bscans(octa));
            fuse(&oct_n, &octa_n, cfg)
        }
    }
}

/// One B-scan image, row-major `(depth, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BScanImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Label map paired with a [`BScanImage`].
#[derive(Clone, Debug, PartialEq)]
pub struct BScanLabels {
    pub height: usize,
    pub width: usize,
    pub codes: Vec<u8>,
}

fn mirror_rows<T: Copy>(data: &[T], width: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for row in out.chunks_exact_mut(width) {
        row.reverse();
    }
    out
}

/// Mirrors image and labels along the width axis.
pub fn augment_flip(image: &BScanImage, labels: &BScanLabels) -> Result<(BScanImage, BScanLabels)> {
    if (image.height, image.width) != (labels.height, labels.width)
        || image.data.len() != image.height * image.width
        || labels.codes.len() != labels.height * labels.width
    {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs labels {}x{}",
            image.height, image.width, labels.height, labels.width
        )));
    }
    Ok((
        BScanImage {
            height: image.height,
            width: image.width,
            data: mirror_rows(&image.data, image.width),
        },
        BScanLabels {
            height: labels.height,
            width: labels.width,
            codes: mirror_rows(&labels.codes, labels.width),
        },
    ))
}
