//! Longitudinal registration of baseline and follow-up volumes.
//!
//! Axial alignment flattens each column on the lower retinal boundary taken
//! from the labels; lateral alignment is an exhaustive integer-translation
//! search maximizing normalized cross-correlation of en-face OCTA images.
//! Shift convention: a moving image related to a fixed one by shift `s`
//! satisfies `moving(x) = fixed(x - s)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{codes, LabelVolume, Provenance, ScanVolume, Shape3};

/// Per lateral position `(b, w)` row-major, one value each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMap {
    pub n_bscans: usize,
    pub width: usize,
    pub rows: Vec<usize>,
}

impl SurfaceMap {
    pub fn get(&self, b: usize, w: usize) -> usize {
        self.rows[b * self.width + w]
    }

    /// Lower median of all rows.
    pub fn median(&self) -> usize {
        let mut v = self.rows.clone();
        v.sort_unstable();
        v[(v.len() - 1) / 2]
    }
}

/// Deepest tissue-or-fluid row of each column. Columns without retina are
/// linearly interpolated along the B-scan, and B-scans without retina copy
/// the nearest B-scan that has some.
pub fn estimate_bm_surface(labels: &LabelVolume) -> Result<SurfaceMap> {
    let s = labels.shape;
    let mut raw: Vec<Option<usize>> = vec![None; s.enface_len()];
    for b in 0..s.n_bscans {
        for w in 0..s.width {
            raw[b * s.width + w] = (0..s.depth).rev().find(|&d| {
                let c = labels.get(b, d, w);
                c == codes::TISSUE || c == codes::FLUID
            });
        }
    }
    let mut rows: Vec<Option<usize>> = vec![None; s.enface_len()];
    for b in 0..s.n_bscans {
        let line = &raw[b * s.width..(b + 1) * s.width];
        let known: Vec<usize> = (0..s.width).filter(|&w| line[w].is_some()).collect();
        if known.is_empty() {
            continue;
        }
        for w in 0..s.width {
            let v = match known.binary_search(&w) {
                Ok(_) => line[w].unwrap(),
                Err(0) => line[known[0]].unwrap(),
                Err(k) if k == known.len() => line[known[k - 1]].unwrap(),
                Err(k) => {
                    let (l, r) = (known[k - 1], known[k]);
                    let (vl, vr) = (line[l].unwrap() as f64, line[r].unwrap() as f64);
                    let t = (w - l) as f64 / (r - l) as f64;
                    (vl + t * (vr - vl)).round() as usize
                }
            };
            rows[b * s.width + w] = Some(v);
        }
    }
    let filled: Vec<usize> = (0..s.n_bscans).filter(|&b| rows[b * s.width].is_some()).collect();
    if filled.is_empty() {
        return Err(Error::Registration("no tissue anywhere in the volume".into()));
    }
    for b in 0..s.n_bscans {
        if rows[b * s.width].is_some() {
            continue;
        }
        let src = *filled
            .iter()
            .min_by_key(|&&f| (f as isize - b as isize).unsigned_abs())
            .unwrap();
        for w in 0..s.width {
            rows[b * s.width + w] = rows[src * s.width + w];
        }
    }
    Ok(SurfaceMap {
        n_bscans: s.n_bscans,
        width: s.width,
        rows: rows.into_iter().map(Option::unwrap).collect(),
    })
}

fn shift_column<T: Copy>(data: &mut [T], shape: Shape3, b: usize, w: usize, shift: i64, fill: T, buf: &mut Vec<T>) {
    buf.clear();
    buf.extend((0..shape.depth).map(|d| data[shape.index(b, d, w)]));
    for d in 0..shape.depth {
        let src = d as i64 - shift;
        data[shape.index(b, d, w)] = if src >= 0 && (src as usize) < shape.depth {
            buf[src as usize]
        } else {
            fill
        };
    }
}

/// Moves column `(b, w)` down by `shifts[b * width + w]` rows (negative moves
/// up), zero-filling vacated voxels and background-filling labels.
pub fn apply_axial_shifts(
    volume: &ScanVolume,
    labels: &LabelVolume,
    shifts: &[i64],
) -> Result<(ScanVolume, LabelVolume)> {
    let s = volume.shape;
    if labels.shape != s {
        return Err(Error::ShapeMismatch(format!(
            "volume {:?} vs labels {:?}",
            s.as_array(),
            labels.shape.as_array()
        )));
    }
    if shifts.len() != s.enface_len() {
        return Err(Error::ShapeMismatch(format!(
            "{} shifts for {} columns",
            shifts.len(),
            s.enface_len()
        )));
    }
    let mut vox = volume.voxels.clone();
    let mut lab = labels.codes.clone();
    let (mut fbuf, mut lbuf) = (Vec::new(), Vec::new());
    for b in 0..s.n_bscans {
        for w in 0..s.width {
            let sh = shifts[b * s.width + w];
            if sh != 0 {
                shift_column(&mut vox, s, b, w, sh, 0.0, &mut fbuf);
                shift_column(&mut lab, s, b, w, sh, codes::BACKGROUND, &mut lbuf);
            }
        }
    }
    let had_retina = labels.codes.iter().any(|&c| c == codes::TISSUE || c == codes::FLUID);
    let has_retina = lab.iter().any(|&c| c == codes::TISSUE || c == codes::FLUID);
    if had_retina && !has_retina {
        return Err(Error::Registration("axial shift pushed all tissue out of range".into()));
    }
    let provenance = labels.provenance;
    Ok((volume.with_voxels(vox), labels.with_codes(lab, provenance)))
}

/// Shifts every column so `surface` lands on its median row.
pub fn flatten_axial(
    volume: &ScanVolume,
    labels: &LabelVolume,
    surface: &SurfaceMap,
) -> Result<(ScanVolume, LabelVolume)> {
    let s = volume.shape;
    if surface.n_bscans != s.n_bscans || surface.width != s.width {
        return Err(Error::ShapeMismatch("surface grid does not match the volume".into()));
    }
    if surface.rows.iter().any(|&r| r >= s.depth) {
        return Err(Error::Registration("surface row outside the depth range".into()));
    }
    let target = surface.median() as i64;
    let shifts: Vec<i64> = surface.rows.iter().map(|&r| target - r as i64).collect();
    apply_axial_shifts(volume, labels, &shifts)
}

/// 2D en-face image, `(n_bscans, width)` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnfaceImage {
    pub n_bscans: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl EnfaceImage {
    pub fn new(n_bscans: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_bscans * width {
            return Err(Error::ShapeMismatch(format!(
                "{n_bscans}x{width} image needs {} values, got {}",
                n_bscans * width,
                data.len()
            )));
        }
        Ok(Self { n_bscans, width, data })
    }

    pub fn get(&self, b: usize, w: usize) -> f64 {
        self.data[b * self.width + w]
    }

    /// `out(x) = self(x - shift)`, zero outside.
    pub fn translated(&self, shift: [i64; 2]) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for b in 0..self.n_bscans {
            for w in 0..self.width {
                let (sb, sw) = (b as i64 - shift[0], w as i64 - shift[1]);
                if sb >= 0 && sw >= 0 && (sb as usize) < self.n_bscans && (sw as usize) < self.width {
                    data[b * self.width + w] = self.get(sb as usize, sw as usize);
                }
            }
        }
        Self { data, ..*self }
    }
}

/// Mean OCTA value over the tissue rows of each column; 0 where a column
/// has no tissue.
pub fn enface_vessel_image(octa: &ScanVolume, labels: &LabelVolume) -> Result<EnfaceImage> {
    let s = octa.shape;
    if labels.shape != s {
        return Err(Error::ShapeMismatch("OCTA and labels differ in shape".into()));
    }
    let mut sum = vec![0.0f64; s.enface_len()];
    let mut n = vec![0usize; s.enface_len()];
    for b in 0..s.n_bscans {
        for d in 0..s.depth {
            for w in 0..s.width {
                let i = s.index(b, d, w);
                if labels.codes[i] == codes::TISSUE {
                    sum[b * s.width + w] += octa.voxels[i] as f64;
                    n[b * s.width + w] += 1;
                }
            }
        }
    }
    let data = sum
        .iter()
        .zip(&n)
        .map(|(&v, &k)| if k > 0 { v / k as f64 } else { 0.0 })
        .collect();
    EnfaceImage::new(s.n_bscans, s.width, data)
}

/// Pearson correlation of `fixed(x)` with `moving(x + shift)` over the
/// overlap, or `None` when either side is constant there.
pub fn ncc_at(fixed: &EnfaceImage, moving: &EnfaceImage, shift: [i64; 2]) -> Option<f64> {
    let (nb, nw) = (fixed.n_bscans as i64, fixed.width as i64);
    let b0 = 0.max(-shift[0]);
    let b1 = nb.min(nb - shift[0]);
    let w0 = 0.max(-shift[1]);
    let w1 = nw.min(nw - shift[1]);
    if b0 >= b1 || w0 >= w1 {
        return None;
    }
    let count = ((b1 - b0) * (w1 - w0)) as f64;
    let (mut sf, mut sm) = (0.0, 0.0);
    for b in b0..b1 {
        for w in w0..w1 {
            sf += fixed.get(b as usize, w as usize);
            sm += moving.get((b + shift[0]) as usize, (w + shift[1]) as usize);
        }
    }
    let (mf, mm) = (sf / count, sm / count);
    let (mut cov, mut vf, mut vm) = (0.0, 0.0, 0.0);
    for b in b0..b1 {
        for w in w0..w1 {
            let f = fixed.get(b as usize, w as usize) - mf;
            let m = moving.get((b + shift[0]) as usize, (w + shift[1]) as usize) - mm;
            cov += f * m;
            vf += f * f;
            vm += m * m;
        }
    }
    if vf <= 0.0 || vm <= 0.0 {
        return None;
    }
    Some((cov / (vf * vm).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LateralMatch {
    /// `(d_bscan, d_width)`.
    pub shift: [i64; 2],
    pub peak: f64,
}

/// Candidate shifts within `±dim/4`, ordered by squared magnitude then
/// lexicographically.
fn candidate_shifts(n_bscans: usize, width: usize) -> Vec<[i64; 2]> {
    let (rb, rw) = ((n_bscans / 4) as i64, (width / 4) as i64);
    let mut out: Vec<[i64; 2]> = (-rb..=rb)
        .flat_map(|b| (-rw..=rw).map(move |w| [b, w]))
        .collect();
    out.sort_by_key(|s| (s[0] * s[0] + s[1] * s[1], s[0], s[1]));
    out
}

/// Integer translation maximizing |NCC|; the reported peak keeps its sign.
pub fn register_lateral(fixed: &EnfaceImage, moving: &EnfaceImage) -> Result<LateralMatch> {
    if fixed.n_bscans != moving.n_bscans || fixed.width != moving.width {
        return Err(Error::ShapeMismatch("en-face images differ in shape".into()));
    }
    let constant = |im: &EnfaceImage| im.data.iter().all(|&v| v == im.data[0]);
    if fixed.data.is_empty() || constant(fixed) || constant(moving) {
        return Err(Error::Registration("constant en-face image".into()));
    }
    let mut best: Option<LateralMatch> = None;
    for shift in candidate_shifts(fixed.n_bscans, fixed.width) {
        let Some(r) = ncc_at(fixed, moving, shift) else {
            continue;
        };
        if best.is_none_or(|b| r.abs() > b.peak.abs() + 1e-12) {
            best = Some(LateralMatch { shift, peak: r });
        }
    }
    best.ok_or_else(|| Error::Registration("no overlap with nonzero variance".into()))
}

/// `out(b, d, w) = data(b - shift[0], d, w - shift[1])`, `fill` outside.
pub fn translate_lateral<T: Copy>(data: &[T], shape: Shape3, shift: [i64; 2], fill: T) -> Vec<T> {
    let mut out = vec![fill; data.len()];
    for b in 0..shape.n_bscans {
        let sb = b as i64 - shift[0];
        if sb < 0 || sb as usize >= shape.n_bscans {
            continue;
        }
        for d in 0..shape.depth {
            for w in 0..shape.width {
                let sw = w as i64 - shift[1];
                if sw >= 0 && (sw as usize) < shape.width {
                    out[shape.index(b, d, w)] = data[shape.index(sb as usize, d, sw as usize)];
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub n_bscans: usize,
    pub width: usize,
    /// Rows each follow-up column moved down, after lateral resampling.
    pub axial_shift_map: Vec<i64>,
    /// Follow-up displacement relative to the baseline, `(d_bscan, d_width)`.
    pub lateral_shift: [i64; 2],
    pub correlation_peak: f64,
}

/// Follow-up data resampled into the baseline frame.
#[derive(Clone, Debug)]
pub struct Registered {
    pub result: RegistrationResult,
    pub octa: ScanVolume,
    pub labels: LabelVolume,
}

/// Lateral NCC on en-face OCTA, then per-column axial alignment of the
/// follow-up's lower retinal boundary onto the baseline's.
pub fn register_volumes(
    baseline_octa: &ScanVolume,
    baseline_labels: &LabelVolume,
    followup_octa: &ScanVolume,
    followup_labels: &LabelVolume,
) -> Result<Registered> {
    let s = baseline_octa.shape;
    for (what, sh) in [
        ("baseline labels", baseline_labels.shape),
        ("follow-up OCTA", followup_octa.shape),
        ("follow-up labels", followup_labels.shape),
    ] {
        if sh != s {
            return Err(Error::ShapeMismatch(format!(
                "{what} shape {:?} differs from baseline {:?}",
                sh.as_array(),
                s.as_array()
            )));
        }
    }
    let fixed = enface_vessel_image(baseline_octa, baseline_labels)?;
    let moving = enface_vessel_image(followup_octa, followup_labels)?;
    let m = register_lateral(&fixed, &moving)?;
    let back = [-m.shift[0], -m.shift[1]];
    let octa = followup_octa.with_voxels(translate_lateral(&followup_octa.voxels, s, back, 0.0));
    let labels = followup_labels.with_codes(
        translate_lateral(&followup_labels.codes, s, back, codes::BACKGROUND),
        followup_labels.provenance,
    );
    let base_bm = estimate_bm_surface(baseline_labels)?;
    let follow_bm = estimate_bm_surface(&labels)?;
    let shifts: Vec<i64> = base_bm
        .rows
        .iter()
        .zip(&follow_bm.rows)
        .map(|(&a, &b)| a as i64 - b as i64)
        .collect();
    let (octa, labels) = apply_axial_shifts(&octa, &labels, &shifts)?;
    Ok(Registered {
        result: RegistrationResult {
            n_bscans: s.n_bscans,
            width: s.width,
            axial_shift_map: shifts,
            lateral_shift: m.shift,
            correlation_peak: m.peak,
        },
        octa,
        labels,
    })
}

/// Fluid gained, lost and kept between two registered label volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeMap {
    pub shape: Shape3,
    #[serde(skip)]
    pub gained: Vec<bool>,
    #[serde(skip)]
    pub lost: Vec<bool>,
    #[serde(skip)]
    pub stable: Vec<bool>,
    pub gained_mm3: f64,
    pub lost_mm3: f64,
    pub stable_mm3: f64,
    pub delta_mm3: f64,
}

impl ChangeMap {
    /// One mask as a label volume (fluid where set), on the baseline grid.
    pub fn mask_volume(&self, mask: &[bool], template: &LabelVolume, volume_id: &str) -> LabelVolume {
        let mut out = template.with_codes(
            mask.iter()
                .map(|&m| if m { codes::FLUID } else { codes::BACKGROUND })
                .collect(),
            Provenance::Predicted,
        );
        out.volume_id = volume_id.to_string();
        out
    }
}

/// Set differences and intersection of the fluid masks. The follow-up must
/// already be in the baseline frame (see [`register_volumes`]).
pub fn change_map(baseline: &LabelVolume, followup: &LabelVolume) -> Result<ChangeMap> {
    if baseline.shape != followup.shape {
        return Err(Error::ShapeMismatch(format!(
            "baseline {:?} vs follow-up {:?}",
            baseline.shape.as_array(),
            followup.shape.as_array()
        )));
    }
    let n = baseline.shape.len();
    let (mut gained, mut lost, mut stable) = (vec![false; n], vec![false; n], vec![false; n]);
    for i in 0..n {
        let a = baseline.codes[i] == codes::FLUID;
        let b = followup.codes[i] == codes::FLUID;
        gained[i] = b && !a;
        lost[i] = a && !b;
        stable[i] = a && b;
    }
    let v = baseline.spacing.voxel_mm3();
    let count = |m: &[bool]| m.iter().filter(|&&x| x).count() as f64 * v;
    let (g, l, st) = (count(&gained), count(&lost), count(&stable));
    Ok(ChangeMap {
        shape: baseline.shape,
        gained,
        lost,
        stable,
        gained_mm3: g,
        lost_mm3: l,
        stable_mm3: st,
        delta_mm3: g - l,
    })
}
