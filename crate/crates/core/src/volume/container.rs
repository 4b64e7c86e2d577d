//! RFNV1 container.
//!
//! Layout:
//!
//! ```text
//! 0..6        b"RFNV1\n"
//! 6..10       header length L, u32 little-endian
//! 10..10+L    UTF-8 JSON header
//! 10+L..      payload, little-endian, C order, width fastest
//! ```
//!
//! Scan and probability volumes store `f32`; label volumes store `u8`.
//! Probability volumes declare a trailing class axis in `shape`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Extras, LabelVolume, Modality, ProbabilityVolume, Provenance, ScanVolume, Shape3, Spacing,
    Volume, NUM_CLASSES,
};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"RFNV1\n";

const ORDER: &str = "bdw";
const MODALITY_LABEL: &str = "label";
const MODALITY_PROBABILITY: &str = "probability";

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    order: String,
    spacing_um: [f64; 3],
    modality: String,
    volume_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eye_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grader_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_order: Option<String>,
    #[serde(default, skip_serializing_if = "Extras::is_empty")]
    extras: Extras,
}

/// Serializes a validated volume to RFNV1 bytes.
pub fn encode_volume(volume: &Volume) -> Result<Vec<u8>> {
    volume.validate()?;
    let (header, payload_len) = match volume {
        Volume::Scan(v) => (
            Header {
                dtype: "f32".into(),
                shape: v.shape.as_array().to_vec(),
                order: ORDER.into(),
                spacing_um: v.spacing.as_array(),
                modality: v.modality.as_str().into(),
                volume_id: v.volume_id.clone(),
                eye_id: v.eye_id.clone(),
                provenance: None,
                grader_id: None,
                class_order: None,
                extras: v.extras.clone(),
            },
            v.voxels.len() * 4,
        ),
        Volume::Label(v) => (
            Header {
                dtype: "u8".into(),
                shape: v.shape.as_array().to_vec(),
                order: ORDER.into(),
                spacing_um: v.spacing.as_array(),
                modality: MODALITY_LABEL.into(),
                volume_id: v.volume_id.clone(),
                eye_id: v.eye_id.clone(),
                provenance: Some(v.provenance),
                grader_id: v.grader_id.clone(),
                class_order: None,
                extras: v.extras.clone(),
            },
            v.codes.len(),
        ),
        Volume::Probability(v) => {
            let mut shape = v.shape.as_array().to_vec();
            shape.push(NUM_CLASSES);
            (
                Header {
                    dtype: "f32".into(),
                    shape,
                    order: ORDER.into(),
                    spacing_um: v.spacing.as_array(),
                    modality: MODALITY_PROBABILITY.into(),
                    volume_id: v.volume_id.clone(),
                    eye_id: v.eye_id.clone(),
                    provenance: None,
                    grader_id: None,
                    class_order: Some(ProbabilityVolume::CLASS_ORDER.into()),
                    extras: v.extras.clone(),
                },
                v.probs.len() * 4,
            )
        }
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::MalformedHeader(format!("cannot serialize header: {e}")))?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::MalformedHeader("header longer than 4 GiB".into()))?;

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    match volume {
        Volume::Scan(v) => extend_f32(&mut out, &v.voxels),
        Volume::Label(v) => out.extend_from_slice(&v.codes),
        Volume::Probability(v) => extend_f32(&mut out, &v.probs),
    }
    Ok(out)
}

fn extend_f32(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Parses RFNV1 bytes and validates the resulting volume.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(Error::MalformedHeader("missing header length".into()));
    }
    let header_len = u32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
    let rest = &rest[4..];
    if rest.len() < header_len {
        return Err(Error::MalformedHeader(format!(
            "declared header length {header_len} exceeds file size"
        )));
    }
    let header: Header = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let payload = &rest[header_len..];

    if header.order != ORDER {
        return Err(Error::MalformedHeader(format!(
            "unsupported order {:?}",
            header.order
        )));
    }
    let spacing = Spacing::from(header.spacing_um);

    let volume = match (header.dtype.as_str(), header.modality.as_str()) {
        ("u8", MODALITY_LABEL) => {
            let shape = shape3(&header.shape, 3)?;
            let codes = payload_exact(payload, shape.len())?.to_vec();
            Volume::Label(LabelVolume {
                shape,
                spacing,
                provenance: header.provenance.ok_or_else(|| {
                    Error::MalformedHeader("label volume without provenance".into())
                })?,
                volume_id: header.volume_id,
                eye_id: header.eye_id,
                grader_id: header.grader_id,
                extras: header.extras,
                codes,
            })
        }
        ("f32", MODALITY_PROBABILITY) => {
            if header.shape.len() != 4 || header.shape[3] != NUM_CLASSES {
                return Err(Error::MalformedHeader(format!(
                    "probability shape must be [b, d, w, {NUM_CLASSES}], got {:?}",
                    header.shape
                )));
            }
            match header.class_order.as_deref() {
                Some(ProbabilityVolume::CLASS_ORDER) => {}
                other => {
                    return Err(Error::MalformedHeader(format!(
                        "unsupported class_order {other:?}"
                    )))
                }
            }
            let shape = shape3(&header.shape[..3], 3)?;
            let n = shape.len() * NUM_CLASSES;
            let probs = read_f32(payload_exact(payload, n * 4)?);
            Volume::Probability(ProbabilityVolume {
                shape,
                spacing,
                volume_id: header.volume_id,
                eye_id: header.eye_id,
                extras: header.extras,
                probs,
            })
        }
        ("f32", m) => {
            let modality = Modality::parse(m)
                .ok_or_else(|| Error::MalformedHeader(format!("unknown modality {m:?}")))?;
            let shape = shape3(&header.shape, 3)?;
            let voxels = read_f32(payload_exact(payload, shape.len() * 4)?);
            Volume::Scan(ScanVolume {
                shape,
                spacing,
                modality,
                volume_id: header.volume_id,
                eye_id: header.eye_id,
                extras: header.extras,
                voxels,
            })
        }
        (d, m) => {
            return Err(Error::MalformedHeader(format!(
                "unsupported dtype/modality combination {d:?}/{m:?}"
            )))
        }
    };
    volume.validate()?;
    Ok(volume)
}

fn shape3(dims: &[usize], expected_rank: usize) -> Result<Shape3> {
    if dims.len() != expected_rank {
        return Err(Error::MalformedHeader(format!(
            "expected rank-{expected_rank} shape, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::MalformedHeader(format!(
            "shape dimensions must be >= 1, got {dims:?}"
        )));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::MalformedHeader(format!("shape {dims:?} overflows")))?;
    Ok(Shape3::new(dims[0], dims[1], dims[2]))
}

fn payload_exact(payload: &[u8], expected: usize) -> Result<&[u8]> {
    use std::cmp::Ordering;
    match payload.len().cmp(&expected) {
        Ordering::Less => Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        }),
        Ordering::Greater => Err(Error::TrailingBytes {
            expected,
            found: payload.len(),
        }),
        Ordering::Equal => Ok(payload),
    }
}

fn read_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes `volume` to `destination`. The file is written next to the target
/// and renamed into place, so readers never observe a partial file.
pub fn save_volume(volume: &Volume, destination: impl AsRef<Path>) -> Result<()> {
    let destination = destination.as_ref();
    let bytes = encode_volume(volume)?;
    let file_name = destination
        .file_name()
        .ok_or_else(|| Error::io(destination, std::io::ErrorKind::InvalidInput.into()))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = destination.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, destination)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(destination, e)
    })
}

pub fn load_volume(source: impl AsRef<Path>) -> Result<Volume> {
    let source = source.as_ref();
    let bytes = fs::read(source).map_err(|e| Error::io(source, e))?;
    decode_volume(&bytes)
}

pub fn load_scan(source: impl AsRef<Path>) -> Result<ScanVolume> {
    match load_volume(source)? {
        Volume::Scan(v) => Ok(v),
        other => Err(kind_mismatch("scan", &other)),
    }
}

pub fn load_labels(source: impl AsRef<Path>) -> Result<LabelVolume> {
    match load_volume(source)? {
        Volume::Label(v) => Ok(v),
        other => Err(kind_mismatch("label", &other)),
    }
}

pub fn load_probabilities(source: impl AsRef<Path>) -> Result<ProbabilityVolume> {
    match load_volume(source)? {
        Volume::Probability(v) => Ok(v),
        other => Err(kind_mismatch("probability", &other)),
    }
}

fn kind_mismatch(expected: &str, got: &Volume) -> Error {
    Error::MalformedHeader(format!(
        "expected a {expected} volume, found a {} volume",
        got.kind()
    ))
}
