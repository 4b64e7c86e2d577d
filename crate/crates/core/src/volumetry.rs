//! Fluid quantification from a 3D label volume: volume, en-face area,
//! connected components, retinal thickness, CMT and the ETDRS grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{codes, LabelVolume, Shape3};

/// Neighbourhood used to join fluid voxels into components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours only.
    #[default]
    Six,
    /// Faces, edges and corners.
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for db in -1isize..=1 {
            for dd in -1isize..=1 {
                for dw in -1isize..=1 {
                    let manhattan = db.abs() + dd.abs() + dw.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([db, dd, dw]);
                    }
                }
            }
        }
        out
    }
}

pub fn fluid_voxel_count(labels: &LabelVolume) -> usize {
    labels.count(codes::FLUID)
}

/// Fluid voxel count times the voxel volume, in mm³.
pub fn fluid_volume(labels: &LabelVolume) -> Result<f64> {
    labels.spacing.validate()?;
    Ok(fluid_voxel_count(labels) as f64 * labels.spacing.voxel_mm3())
}

/// Lateral fluid footprint, `(n_bscans, width)` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnfaceMask {
    pub n_bscans: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub area_mm2: f64,
}

/// Marks every lateral position whose depth column holds any fluid.
pub fn enface_projection(labels: &LabelVolume) -> Result<EnfaceMask> {
    labels.spacing.validate()?;
    let s = labels.shape;
    let mut mask = vec![false; s.enface_len()];
    for b in 0..s.n_bscans {
        let scan = labels.bscan(b);
        for row in scan.chunks_exact(s.width) {
            for (w, &c) in row.iter().enumerate() {
                if c == codes::FLUID {
                    mask[b * s.width + w] = true;
                }
            }
        }
    }
    let marked = mask.iter().filter(|&&m| m).count();
    Ok(EnfaceMask {
        n_bscans: s.n_bscans,
        width: s.width,
        mask,
        area_mm2: marked as f64 * labels.spacing.enface_cell_mm2(),
    })
}

/// Inclusive voxel bounds `[b0, d0, w0, b1, d1, w1]`.
pub type BoundingBox = [usize; 6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub id: usize,
    pub voxels: usize,
    pub volume_mm3: f64,
    pub bbox: BoundingBox,
}

/// Per-voxel component index (`0` = not fluid, otherwise `id + 1`) and the
/// components in discovery order.
fn label_components(labels: &LabelVolume, conn: Connectivity) -> (Vec<u32>, Vec<(usize, BoundingBox)>) {
    let s = labels.shape;
    let offsets = conn.offsets();
    let mut comp = vec![0u32; s.len()];
    let mut found = Vec::new();
    let mut stack = Vec::new();
    for start in 0..s.len() {
        if labels.codes[start] != codes::FLUID || comp[start] != 0 {
            continue;
        }
        let id = found.len() as u32 + 1;
        comp[start] = id;
        stack.push(start);
        let [b, d, w] = s.coords(start);
        let mut bbox = [b, d, w, b, d, w];
        let mut count = 0usize;
        while let Some(i) = stack.pop() {
            count += 1;
            let [b, d, w] = s.coords(i);
            bbox[0] = bbox[0].min(b);
            bbox[1] = bbox[1].min(d);
            bbox[2] = bbox[2].min(w);
            bbox[3] = bbox[3].max(b);
            bbox[4] = bbox[4].max(d);
            bbox[5] = bbox[5].max(w);
            for o in &offsets {
                let (nb, nd, nw) = (b as isize + o[0], d as isize + o[1], w as isize + o[2]);
                if nb < 0
                    || nd < 0
                    || nw < 0
                    || nb >= s.n_bscans as isize
                    || nd >= s.depth as isize
                    || nw >= s.width as isize
                {
                    continue;
                }
                let j = s.index(nb as usize, nd as usize, nw as usize);
                if labels.codes[j] == codes::FLUID && comp[j] == 0 {
                    comp[j] = id;
                    stack.push(j);
                }
            }
        }
        found.push((count, bbox));
    }
    (comp, found)
}

/// Fluid components sorted by voxel count, largest first; ids follow that
/// order.
pub fn connected_components(labels: &LabelVolume, conn: Connectivity) -> Vec<Component> {
    let (_, found) = label_components(labels, conn);
    let voxel = labels.spacing.voxel_mm3();
    let mut comps: Vec<(usize, BoundingBox)> = found;
    // Stable: equal sizes keep discovery (storage) order.
    comps.sort_by(|a, b| b.0.cmp(&a.0));
    comps
        .into_iter()
        .enumerate()
        .map(|(id, (voxels, bbox))| Component {
            id,
            voxels,
            volume_mm3: voxels as f64 * voxel,
            bbox,
        })
        .collect()
}

/// Retinal thickness per lateral position in µm, `(n_bscans, width)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThicknessMap {
    pub n_bscans: usize,
    pub width: usize,
    pub um: Vec<f64>,
}

/// Extent from the first to the last tissue-or-fluid row of each column;
/// columns without retina get 0.
pub fn thickness_map(labels: &LabelVolume) -> Result<ThicknessMap> {
    labels.spacing.validate()?;
    let s = labels.shape;
    let mut um = vec![0.0; s.enface_len()];
    for b in 0..s.n_bscans {
        for w in 0..s.width {
            let mut first = None;
            let mut last = 0;
            for d in 0..s.depth {
                let c = labels.get(b, d, w);
                if c == codes::TISSUE || c == codes::FLUID {
                    first.get_or_insert(d);
                    last = d;
                }
            }
            if let Some(f) = first {
                um[b * s.width + w] = (last - f + 1) as f64 * labels.spacing.axial_um;
            }
        }
    }
    Ok(ThicknessMap {
        n_bscans: s.n_bscans,
        width: s.width,
        um,
    })
}

/// Radius and quadrant of a lateral position relative to the scan centre,
/// in millimetres. Quadrant 0 points toward B-scan 0, then clockwise:
/// 1 toward the last column, 2 toward the last B-scan, 3 toward column 0.
fn polar_mm(shape: Shape3, bscan_um: f64, lateral_um: f64, b: usize, w: usize) -> (f64, usize) {
    let cb = (shape.n_bscans as f64 - 1.0) / 2.0;
    let cw = (shape.width as f64 - 1.0) / 2.0;
    let y = (b as f64 - cb) * bscan_um / 1000.0;
    let x = (w as f64 - cw) * lateral_um / 1000.0;
    let r = (x * x + y * y).sqrt();
    // Angle measured from the "up" direction (toward B-scan 0), clockwise.
    let angle = x.atan2(-y).rem_euclid(std::f64::consts::TAU);
    let q = (((angle + std::f64::consts::FRAC_PI_4) / std::f64::consts::FRAC_PI_2) as usize) % 4;
    (r, q)
}

/// ETDRS zones: centre disc, then inner-ring and outer-ring quadrants.
pub const ETDRS_ZONES: [&str; 9] = [
    "center",
    "inner_up",
    "inner_right",
    "inner_down",
    "inner_left",
    "outer_up",
    "outer_right",
    "outer_down",
    "outer_left",
];

/// Mean thickness per ETDRS zone (diameters 1, 3 and 6 mm). Columns
/// without retina are excluded; zones with no samples are `None`.
pub fn etdrs_grid(map: &ThicknessMap, shape: Shape3, bscan_um: f64, lateral_um: f64) -> [Option<f64>; 9] {
    let mut sum = [0.0f64; 9];
    let mut n = [0usize; 9];
    for b in 0..map.n_bscans {
        for w in 0..map.width {
            let t = map.um[b * map.width + w];
            if t <= 0.0 {
                continue;
            }
            let (r, q) = polar_mm(shape, bscan_um, lateral_um, b, w);
            let zone = if r < 0.5 {
                0
            } else if r < 1.5 {
                1 + q
            } else if r < 3.0 {
                5 + q
            } else {
                continue;
            };
            sum[zone] += t;
            n[zone] += 1;
        }
    }
    std::array::from_fn(|z| (n[z] > 0).then(|| sum[z] / n[z] as f64))
}

/// Central macular thickness: mean over the central 1-mm disc.
pub fn central_thickness(map: &ThicknessMap, labels: &LabelVolume) -> Option<f64> {
    etdrs_grid(map, labels.shape, labels.spacing.bscan_um, labels.spacing.lateral_um)[0]
}

/// What survives when only every `keep_every`-th B-scan is acquired.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseSampling {
    pub keep_every: usize,
    pub phase: usize,
    /// Fraction of fluid voxels on retained B-scans (1 when there is no
    /// fluid).
    pub retained_fraction: f64,
    /// Components with no voxel on any retained B-scan.
    pub missed_components: usize,
}

/// Keeps B-scans `0, k, 2k, ...`.
pub fn simulate_sparse_sampling(labels: &LabelVolume, keep_every: usize) -> SparseSampling {
    simulate_sparse_sampling_with_phase(labels, keep_every, 0)
}

/// Keeps B-scans with `b % keep_every == phase % keep_every`.
pub fn simulate_sparse_sampling_with_phase(
    labels: &LabelVolume,
    keep_every: usize,
    phase: usize,
) -> SparseSampling {
    let k = keep_every.max(1);
    let phase = phase % k;
    let kept = |b: usize| b % k == phase;
    let s = labels.shape;
    let (comp, found) = label_components(labels, Connectivity::Six);
    let mut hit = vec![false; found.len()];
    let mut total = 0usize;
    let mut retained = 0usize;
    for (i, &c) in comp.iter().enumerate() {
        if c == 0 {
            continue;
        }
        total += 1;
        let b = i / s.bscan_len();
        if kept(b) {
            retained += 1;
            hit[c as usize - 1] = true;
        }
    }
    SparseSampling {
        keep_every: k,
        phase,
        retained_fraction: if total == 0 {
            1.0
        } else {
            retained as f64 / total as f64
        },
        missed_components: hit.iter().filter(|&&h| !h).count(),
    }
}

/// Everything reported for one segmented volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluidReport {
    pub volume_id: String,
    pub total_volume_mm3: f64,
    pub fluid_voxels: usize,
    pub enface_area_mm2: f64,
    pub components: Vec<Component>,
    pub cmt_um: Option<f64>,
    /// Zone means in [`ETDRS_ZONES`] order.
    pub etdrs_um: [Option<f64>; 9],
    #[serde(skip)]
    pub enface: Option<EnfaceMask>,
    #[serde(skip)]
    pub thickness: Option<ThicknessMap>,
}

pub fn fluid_report(labels: &LabelVolume, conn: Connectivity) -> Result<FluidReport> {
    labels.require_complete()?;
    let total_volume_mm3 = fluid_volume(labels)?;
    let enface = enface_projection(labels)?;
    let thickness = thickness_map(labels)?;
    let etdrs_um = etdrs_grid(
        &thickness,
        labels.shape,
        labels.spacing.bscan_um,
        labels.spacing.lateral_um,
    );
    Ok(FluidReport {
        volume_id: labels.volume_id.clone(),
        total_volume_mm3,
        fluid_voxels: fluid_voxel_count(labels),
        enface_area_mm2: enface.area_mm2,
        components: connected_components(labels, conn),
        cmt_um: etdrs_um[0],
        etdrs_um,
        enface: Some(enface),
        thickness: Some(thickness),
    })
}

/// Encodes an 8-bit grayscale image, rows top to bottom.
pub fn gray_png(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{width}x{height} image needs {} pixels, got {}",
            width * height,
            pixels.len()
        )));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        w.write_image_data(pixels).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

impl EnfaceMask {
    /// White where fluid projects, one row per B-scan.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let px: Vec<u8> = self.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        gray_png(self.width, self.n_bscans, &px)
    }
}

impl ThicknessMap {
    /// Linear gray scale with the thickest column at 255.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let max = self.um.iter().cloned().fold(0.0f64, f64::max);
        let px: Vec<u8> = self
            .um
            .iter()
            .map(|&t| if max > 0.0 { (t / max * 255.0).round() as u8 } else { 0 })
            .collect();
        gray_png(self.width, self.n_bscans, &px)
    }
}
