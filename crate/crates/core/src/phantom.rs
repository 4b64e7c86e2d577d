//! Synthetic OCT/OCTA phantoms with exact ground truth.
//!
//! A phantom is a retina slab bounded by two smooth surfaces (ILM above,
//! Bruch's membrane below), ellipsoidal fluid pockets inside the slab,
//! random-walk flow tubes visible only in OCTA, multiplicative gamma
//! speckle, and optional shadow artifacts.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    codes, LabelVolume, Modality, Provenance, ScanVolume, Shape3, Spacing,
};

/// Amplitude (rows) and smoothness of the retinal surfaces.
///
/// Each surface is a sum of three sinusoids with frequencies `k / smoothness`
/// cycles per scan (`k = 1, 2, 3`), amplitudes `1/k`, normalized so the
/// deviation from the mean never exceeds `amplitude`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceUndulation {
    pub amplitude: f64,
    pub smoothness: f64,
}

impl Default for SurfaceUndulation {
    fn default() -> Self {
        Self {
            amplitude: 4.0,
            smoothness: 1.5,
        }
    }
}

/// Axis-aligned ellipsoid in voxel coordinates `(bscan, depth, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    pub fn contains(&self, b: f64, d: f64, w: f64) -> bool {
        let p = [b, d, w];
        let mut s = 0.0;
        for i in 0..3 {
            let t = (p[i] - self.center[i]) / self.semi_axes[i];
            s += t * t;
        }
        s <= 1.0
    }

    /// Analytic volume in voxel units.
    pub fn volume_voxels(&self) -> f64 {
        4.0 / 3.0 * PI * self.semi_axes.iter().product::<f64>()
    }

    /// Inclusive voxel bounding box clipped to `shape`, or `None` if the
    /// ellipsoid misses the grid.
    pub fn voxel_bounds(&self, shape: Shape3) -> Option<[(usize, usize); 3]> {
        let dims = shape.as_array();
        let mut out = [(0, 0); 3];
        for i in 0..3 {
            let lo = (self.center[i] - self.semi_axes[i]).ceil().max(0.0);
            let hi = (self.center[i] + self.semi_axes[i])
                .floor()
                .min(dims[i] as f64 - 1.0);
            if lo > hi {
                return None;
            }
            out[i] = (lo as usize, hi as usize);
        }
        Some(out)
    }

    /// Calls `f(b, d, w)` for every grid voxel whose center lies inside.
    pub fn for_each_voxel(&self, shape: Shape3, mut f: impl FnMut(usize, usize, usize)) {
        let Some([(b0, b1), (d0, d1), (w0, w1)]) = self.voxel_bounds(shape) else {
            return;
        };
        for b in b0..=b1 {
            for d in d0..=d1 {
                for w in w0..=w1 {
                    if self.contains(b as f64, d as f64, w as f64) {
                        f(b, d, w);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShadowKind {
    /// Narrow band of A-lines under a large vessel.
    Vessel,
    /// Blob-shaped footprint under a vitreous floater.
    Floater,
    /// Smooth lateral fall-off toward the nearer scan edge.
    Vignetting,
}

/// One shadow artifact. `location` is `(bscan, width)` in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowSpec {
    pub kind: ShadowKind,
    pub location: [f64; 2],
    pub attenuation: f64,
    /// Half-width (vessel) or footprint sigma (floater) in voxels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// First attenuated depth row.
    #[serde(default)]
    pub origin_row: usize,
}

impl ShadowSpec {
    pub fn new(kind: ShadowKind, location: [f64; 2], attenuation: f64) -> Self {
        Self {
            kind,
            location,
            attenuation,
            radius: None,
            origin_row: 0,
        }
    }
}

fn default_static_flow() -> f64 {
    0.3
}

fn default_vessel_flow() -> f64 {
    0.85
}

/// Full description of a phantom; serialized as JSON for the `synth` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `[n_bscans, depth, width]`.
    pub shape: [usize; 3],
    /// `[between-B-scan, axial, lateral]` in micrometers.
    pub spacing_um: [f64; 3],
    pub ilm_mean_row: f64,
    pub bm_mean_row: f64,
    pub surface_undulation: SurfaceUndulation,
    pub tissue_reflectance: f64,
    pub vitreous_reflectance: f64,
    pub fluid_reflectance: f64,
    pub speckle_contrast: f64,
    pub fluid_pockets: Vec<Ellipsoid>,
    pub vessel_density: f64,
    pub shadow_spec: Vec<ShadowSpec>,
    pub seed: u64,
    /// Speckle seed; defaults to `seed`. Changing it re-draws noise while
    /// keeping anatomy and vessels fixed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
    /// Mean OCTA decorrelation of static tissue.
    #[serde(default = "default_static_flow")]
    pub static_flow: f64,
    /// Mean OCTA decorrelation inside flow tubes.
    #[serde(default = "default_vessel_flow")]
    pub vessel_flow: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [64, 128, 128],
            spacing_um: Spacing::default().as_array(),
            ilm_mean_row: 32.0,
            bm_mean_row: 92.0,
            surface_undulation: SurfaceUndulation::default(),
            tissue_reflectance: 0.55,
            vitreous_reflectance: 0.04,
            fluid_reflectance: 0.1,
            speckle_contrast: 0.4,
            fluid_pockets: Vec::new(),
            vessel_density: 12.0,
            shadow_spec: Vec::new(),
            seed: 0,
            noise_seed: None,
            static_flow: default_static_flow(),
            vessel_flow: default_vessel_flow(),
        }
    }
}

/// ILM and BM depth (in rows, continuous) per lateral position `(b, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Surfaces {
    pub n_bscans: usize,
    pub width: usize,
    pub ilm: Vec<f64>,
    pub bm: Vec<f64>,
}

impl Surfaces {
    #[inline]
    pub fn ilm_row(&self, b: usize, w: usize) -> usize {
        self.ilm[b * self.width + w].round() as usize
    }

    #[inline]
    pub fn bm_row(&self, b: usize, w: usize) -> usize {
        self.bm[b * self.width + w].round() as usize
    }
}

const ILM_STREAM: u64 = 1;
const BM_STREAM: u64 = 2;
const VESSEL_STREAM: u64 = 3;
const OCT_NOISE_STREAM: u64 = 4;
const OCTA_NOISE_STREAM: u64 = 5;
const SHADOW_STREAM: u64 = 6;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn undulating_surface(
    mean: f64,
    und: SurfaceUndulation,
    n_bscans: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    const HARMONICS: usize = 3;
    let norm: f64 = (1..=HARMONICS).map(|k| 1.0 / k as f64).sum();
    let terms: Vec<(f64, f64, f64, f64)> = (1..=HARMONICS)
        .map(|k| {
            let theta = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let freq = k as f64 / und.smoothness.max(1e-6);
            (freq * theta.cos(), freq * theta.sin(), phase, 1.0 / k as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(n_bscans * width);
    for b in 0..n_bscans {
        let u = b as f64 / n_bscans as f64;
        for w in 0..width {
            let v = w as f64 / width as f64;
            let s: f64 = terms
                .iter()
                .map(|&(fu, fv, ph, a)| a * (2.0 * PI * (fu * u + fv * v) + ph).sin())
                .sum();
            out.push(mean + und.amplitude * s / norm);
        }
    }
    out
}

impl PhantomSpec {
    pub fn shape3(&self) -> Shape3 {
        Shape3::from(self.shape)
    }

    pub fn spacing(&self) -> Spacing {
        Spacing::from(self.spacing_um)
    }

    /// Deterministic surfaces for this spec's seed.
    pub fn surfaces(&self) -> Surfaces {
        let [nb, _, nw] = self.shape;
        let und = self.surface_undulation;
        Surfaces {
            n_bscans: nb,
            width: nw,
            ilm: undulating_surface(self.ilm_mean_row, und, nb, nw, &mut rng(self.seed, ILM_STREAM)),
            bm: undulating_surface(self.bm_mean_row, und, nb, nw, &mut rng(self.seed, BM_STREAM)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.shape3();
        shape.check_nonzero()?;
        self.spacing().validate()?;
        let depth = self.shape[1] as f64;
        if !(0.0 <= self.ilm_mean_row
            && self.ilm_mean_row < self.bm_mean_row
            && self.bm_mean_row < depth)
        {
            return Err(Error::Invariant(format!(
                "need 0 <= ilm_mean_row < bm_mean_row < depth, got {} / {} / {depth}",
                self.ilm_mean_row, self.bm_mean_row
            )));
        }
        let und = self.surface_undulation;
        if !(und.amplitude >= 0.0 && und.smoothness > 0.0) {
            return Err(Error::Invariant(
                "surface undulation needs amplitude >= 0 and smoothness > 0".into(),
            ));
        }
        for (name, v) in [
            ("tissue_reflectance", self.tissue_reflectance),
            ("vitreous_reflectance", self.vitreous_reflectance),
            ("fluid_reflectance", self.fluid_reflectance),
            ("speckle_contrast", self.speckle_contrast),
            ("static_flow", self.static_flow),
            ("vessel_flow", self.vessel_flow),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invariant(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.fluid_reflectance >= self.tissue_reflectance {
            return Err(Error::Invariant(
                "fluid_reflectance must be below tissue_reflectance".into(),
            ));
        }
        if !(self.vessel_density >= 0.0 && self.vessel_density.is_finite()) {
            return Err(Error::Invariant("vessel_density must be >= 0".into()));
        }
        validate_shadows(&self.shadow_spec, shape)?;

        let surfaces = self.surfaces();
        for b in 0..self.shape[0] {
            for w in 0..self.shape[2] {
                let i = b * self.shape[2] + w;
                let (top, bottom) = (surfaces.ilm[i], surfaces.bm[i]);
                if top < 0.0 || bottom > depth - 1.0 || top.round() >= bottom.round() {
                    return Err(Error::Invariant(format!(
                        "surfaces leave the grid or cross at lateral position ({b}, {w})"
                    )));
                }
            }
        }
        for (k, e) in self.fluid_pockets.iter().enumerate() {
            if e.semi_axes.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
                return Err(Error::Invariant(format!("pocket {k}: semi-axes must be > 0")));
            }
            let mut bad = None;
            e.for_each_voxel(shape, |b, d, w| {
                if bad.is_none() && !(surfaces.ilm_row(b, w) < d && d < surfaces.bm_row(b, w)) {
                    bad = Some([b, d, w]);
                }
            });
            if let Some(v) = bad {
                return Err(Error::Invariant(format!(
                    "pocket {k} reaches voxel {v:?} outside the retina (must lie strictly between ILM and BM)"
                )));
            }
        }
        Ok(())
    }
}

fn validate_shadows(shadows: &[ShadowSpec], shape: Shape3) -> Result<()> {
    for (k, s) in shadows.iter().enumerate() {
        if !(s.attenuation > 0.0 && s.attenuation < 1.0) {
            return Err(Error::Invariant(format!(
                "shadow {k}: attenuation must lie in (0, 1), got {}",
                s.attenuation
            )));
        }
        let [b, w] = s.location;
        if !(0.0..shape.n_bscans as f64).contains(&b) || !(0.0..shape.width as f64).contains(&w) {
            return Err(Error::Invariant(format!(
                "shadow {k}: location {:?} outside lateral bounds",
                s.location
            )));
        }
        if let Some(r) = s.radius {
            if !(r > 0.0) {
                return Err(Error::Invariant(format!("shadow {k}: radius must be > 0")));
            }
        }
    }
    Ok(())
}

/// Relative reflectance across the retina, `t = 0` at the ILM and `t = 1`
/// at Bruch's membrane: bright nerve-fiber band, darker nuclear band, bright
/// pigment epithelium.
fn layer_profile(t: f64) -> f64 {
    let g = |x: f64, s: f64| (-(x / s) * (x / s)).exp();
    1.0 + 0.25 * g(t, 0.08) - 0.3 * g(t - 0.6, 0.12) + 0.45 * g(1.0 - t, 0.05)
}

fn speckle(contrast: f64) -> Option<Gamma<f64>> {
    // Unit-mean gamma with standard deviation `contrast`.
    (contrast > 0.0).then(|| {
        let k = 1.0 / (contrast * contrast);
        Gamma::new(k, 1.0 / k).expect("valid gamma parameters")
    })
}

/// Output of [`generate_phantom`].
#[derive(Clone, Debug)]
pub struct Phantom {
    pub oct: ScanVolume,
    pub octa: ScanVolume,
    pub truth: LabelVolume,
}

/// Renders `spec` into an OCT volume, an OCTA volume and exact labels.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let shape = spec.shape3();
    let spacing = spec.spacing();
    let [nb, depth, nw] = spec.shape;
    let surfaces = spec.surfaces();

    let volume_id = format!("phantom-{}", spec.seed);
    let mut truth = LabelVolume::filled(
        shape,
        spacing,
        Provenance::PhantomTruth,
        &volume_id,
        codes::BACKGROUND,
    );
    for b in 0..nb {
        for w in 0..nw {
            for d in surfaces.ilm_row(b, w)..=surfaces.bm_row(b, w) {
                truth.codes[shape.index(b, d, w)] = codes::TISSUE;
            }
        }
    }
    for e in &spec.fluid_pockets {
        e.for_each_voxel(shape, |b, d, w| truth.codes[shape.index(b, d, w)] = codes::FLUID);
    }

    let vessel_mask = rasterize_vessels(spec, &surfaces, &truth);

    let noise_seed = spec.noise_seed.unwrap_or(spec.seed);
    let gamma = speckle(spec.speckle_contrast);
    let mut oct_rng = rng(noise_seed, OCT_NOISE_STREAM);
    let mut octa_rng = rng(noise_seed, OCTA_NOISE_STREAM);
    let mut oct = vec![0f32; shape.len()];
    let mut octa = vec![0f32; shape.len()];
    let choroid_peak = 0.6 * (spec.tissue_reflectance - spec.vitreous_reflectance);

    for b in 0..nb {
        for d in 0..depth {
            for w in 0..nw {
                let i = shape.index(b, d, w);
                let (top, bottom) = (surfaces.ilm_row(b, w), surfaces.bm_row(b, w));
                let (oct_mean, flow_mean) = match truth.codes[i] {
                    codes::FLUID => (spec.fluid_reflectance, 0.0),
                    codes::TISSUE => {
                        let t = (d - top) as f64 / (bottom - top).max(1) as f64;
                        let flow = if vessel_mask[i] {
                            spec.vessel_flow
                        } else {
                            spec.static_flow
                        };
                        (spec.tissue_reflectance * layer_profile(t), flow)
                    }
                    _ if d > bottom => {
                        let below = (d - bottom) as f64;
                        (
                            spec.vitreous_reflectance + choroid_peak * (-below / 10.0).exp(),
                            0.0,
                        )
                    }
                    _ => (spec.vitreous_reflectance, 0.0),
                };
                let (n1, n2) = match &gamma {
                    Some(g) => (g.sample(&mut oct_rng), g.sample(&mut octa_rng)),
                    None => (1.0, 1.0),
                };
                oct[i] = (oct_mean * n1).clamp(0.0, 1.0) as f32;
                octa[i] = (flow_mean * n2).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let mut oct = ScanVolume::from_voxels(shape, spacing, Modality::Oct, &volume_id, oct)?;
    let mut octa = ScanVolume::from_voxels(shape, spacing, Modality::Octa, &volume_id, octa)?;
    if !spec.shadow_spec.is_empty() {
        let seed = spec.seed ^ 0x5ad0_5ad0;
        let (o, a) = apply_shadows(&oct, &octa, &spec.shadow_spec, seed)?;
        oct = o;
        octa = a;
    }
    let n_shadows = serde_json::Value::from(spec.shadow_spec.len());
    oct.extras.insert("shadows".into(), n_shadows.clone());
    octa.extras.insert("shadows".into(), n_shadows);
    Ok(Phantom { oct, octa, truth })
}

fn rasterize_vessels(spec: &PhantomSpec, surfaces: &Surfaces, truth: &LabelVolume) -> Vec<bool> {
    let shape = truth.shape;
    let [nb, depth, nw] = spec.shape;
    let mut mask = vec![false; shape.len()];
    if spec.vessel_density <= 0.0 {
        return mask;
    }
    let mut r = rng(spec.seed, VESSEL_STREAM);
    let count = Poisson::new(spec.vessel_density)
        .map(|p| p.sample(&mut r) as usize)
        .unwrap_or(0);
    let turn = Normal::new(0.0, 0.15).expect("valid normal");
    let lateral_extent = nb.max(nw) as f64;

    for _ in 0..count {
        let mut b = r.random_range(0.0..nb as f64);
        let mut w = r.random_range(0.0..nw as f64);
        let mut heading = r.random_range(0.0..2.0 * PI);
        let mut rel_depth: f64 = r.random_range(0.05..0.45);
        let radius: f64 = r.random_range(2.0..4.0);
        let steps = (r.random_range(0.5..1.5) * lateral_extent) as usize;
        let rad = radius.ceil() as isize;
        for _ in 0..steps {
            if b < 0.0 || w < 0.0 || b >= nb as f64 || w >= nw as f64 {
                break;
            }
            let (bi, wi) = (b as usize, w as usize);
            let top = surfaces.ilm[bi * nw + wi];
            let bottom = surfaces.bm[bi * nw + wi];
            let d = top + rel_depth * (bottom - top);
            for db in -rad..=rad {
                for dd in -rad..=rad {
                    for dw in -rad..=rad {
                        let (pb, pd, pw) = (b + db as f64, d + dd as f64, w + dw as f64);
                        let (qb, qd, qw) = (pb.round(), pd.round(), pw.round());
                        if qb < 0.0
                            || qd < 0.0
                            || qw < 0.0
                            || qb >= nb as f64
                            || qd >= depth as f64
                            || qw >= nw as f64
                        {
                            continue;
                        }
                        let dist2 = (qb - b).powi(2) + (qd - d).powi(2) + (qw - w).powi(2);
                        if dist2 > radius * radius {
                            continue;
                        }
                        let i = shape.index(qb as usize, qd as usize, qw as usize);
                        if truth.codes[i] == codes::TISSUE {
                            mask[i] = true;
                        }
                    }
                }
            }
            heading += turn.sample(&mut r);
            rel_depth = (rel_depth + r.random_range(-0.01..0.01)).clamp(0.05, 0.5);
            b += heading.sin();
            w += heading.cos();
        }
    }
    mask
}

/// Lateral footprint `g(b, w)` in `[0, 1]` of a single shadow.
fn shadow_footprint(s: &ShadowSpec, shape: Shape3, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (nb, nw) = (shape.n_bscans, shape.width);
    let [b0, w0] = s.location;
    let mut g = vec![0.0; nb * nw];
    match s.kind {
        ShadowKind::Vessel => {
            let half = s.radius.unwrap_or(1.5);
            let phase = rng.random_range(0.0..2.0 * PI);
            let meander = rng.random_range(0.0..2.0);
            for b in 0..nb {
                let center = w0 + meander * (2.0 * PI * b as f64 / nb as f64 + phase).sin();
                for w in 0..nw {
                    if (w as f64 - center).abs() <= half {
                        g[b * nw + w] = 1.0;
                    }
                }
            }
        }
        ShadowKind::Floater => {
            let sigma = s.radius.unwrap_or(8.0);
            let sb = sigma * rng.random_range(0.7..1.3);
            let sw = sigma * rng.random_range(0.7..1.3);
            for b in 0..nb {
                for w in 0..nw {
                    let x = (b as f64 - b0) / sb;
                    let y = (w as f64 - w0) / sw;
                    g[b * nw + w] = (-0.5 * (x * x + y * y)).exp();
                }
            }
        }
        ShadowKind::Vignetting => {
            let last = (nw - 1) as f64;
            let toward_high = w0 >= last / 2.0;
            let span = if toward_high { last - w0 } else { w0 }.max(1.0);
            for w in 0..nw {
                let x = if toward_high {
                    (w as f64 - w0) / span
                } else {
                    (w0 - w as f64) / span
                };
                let v = if x <= 0.0 {
                    0.0
                } else {
                    let x = x.min(1.0);
                    x * x * (3.0 - 2.0 * x)
                };
                for b in 0..nb {
                    g[b * nw + w] = v;
                }
            }
        }
    }
    g
}

/// Multiplies intensities below each shadow's origin row by
/// `1 - (1 - attenuation) * footprint`. Labels are untouched.
pub fn apply_shadows(
    oct: &ScanVolume,
    octa: &ScanVolume,
    shadows: &[ShadowSpec],
    seed: u64,
) -> Result<(ScanVolume, ScanVolume)> {
    if oct.shape != octa.shape {
        return Err(Error::ShapeMismatch(format!(
            "oct {:?} vs octa {:?}",
            oct.shape.as_array(),
            octa.shape.as_array()
        )));
    }
    let shape = oct.shape;
    validate_shadows(shadows, shape)?;
    let mut oct_out = oct.clone();
    let mut octa_out = octa.clone();
    let mut r = rng(seed, SHADOW_STREAM);
    for s in shadows {
        let g = shadow_footprint(s, shape, &mut r);
        for b in 0..shape.n_bscans {
            for w in 0..shape.width {
                let factor = (1.0 - (1.0 - s.attenuation) * g[b * shape.width + w]) as f32;
                if factor >= 1.0 {
                    continue;
                }
                for d in s.origin_row.min(shape.depth)..shape.depth {
                    let i = shape.index(b, d, w);
                    oct_out.voxels[i] *= factor;
                    octa_out.voxels[i] *= factor;
                }
            }
        }
    }
    Ok((oct_out, octa_out))
}

/// Settings for a randomized phantom cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub count: usize,
    pub shape: [usize; 3],
    pub seed: u64,
    /// Fraction of volumes that receive one or two random shadows.
    pub shadow_fraction: f64,
    /// Fraction of volumes without fluid.
    pub healthy_fraction: f64,
    pub max_pockets: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            count: 51,
            shape: [64, 128, 128],
            seed: 2020,
            shadow_fraction: 0.5,
            healthy_fraction: 0.0,
            max_pockets: 5,
        }
    }
}

impl CohortConfig {
    /// Deterministic spec for cohort member `index`.
    pub fn member(&self, index: usize) -> PhantomSpec {
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index as u64 + 1);
        let mut r = rng(seed, 0);
        let [nb, depth, nw] = self.shape;
        let df = depth as f64;
        let mut spec = PhantomSpec {
            shape: self.shape,
            spacing_um: PhantomSpec::default().spacing_um,
            ilm_mean_row: r.random_range(0.2..0.3) * df,
            bm_mean_row: 0.0,
            surface_undulation: SurfaceUndulation {
                amplitude: r.random_range(0.01..0.05) * df,
                smoothness: r.random_range(1.0..2.0),
            },
            tissue_reflectance: r.random_range(0.45..0.6),
            vitreous_reflectance: r.random_range(0.02..0.06),
            fluid_reflectance: r.random_range(0.06..0.14),
            speckle_contrast: r.random_range(0.35..0.5),
            fluid_pockets: Vec::new(),
            vessel_density: r.random_range(8.0..20.0) * (nb * nw) as f64 / (64.0 * 128.0),
            shadow_spec: Vec::new(),
            seed,
            noise_seed: None,
            static_flow: r.random_range(0.25..0.35),
            vessel_flow: default_vessel_flow(),
        };
        spec.bm_mean_row = spec.ilm_mean_row + r.random_range(0.42..0.52) * df;

        let healthy = r.random_bool(self.healthy_fraction.clamp(0.0, 1.0));
        if !healthy {
            let surfaces = spec.surfaces();
            let n = r.random_range(1..=self.max_pockets.max(1));
            for _ in 0..n {
                if let Some(e) = random_pocket(&surfaces, self.shape, &mut r) {
                    spec.fluid_pockets.push(e);
                }
            }
        }
        if r.random_bool(self.shadow_fraction.clamp(0.0, 1.0)) {
            spec.shadow_spec = random_shadows(self.shape, &mut r);
        }
        spec
    }

    pub fn specs(&self) -> Vec<PhantomSpec> {
        (0..self.count).map(|i| self.member(i)).collect()
    }
}

/// One or two random shadows of random kinds.
pub fn random_shadows(shape: [usize; 3], r: &mut impl Rng) -> Vec<ShadowSpec> {
    let [nb, _, nw] = shape;
    let n = r.random_range(1..=2);
    (0..n)
        .map(|_| {
            let kind = match r.random_range(0..3) {
                0 => ShadowKind::Vessel,
                1 => ShadowKind::Floater,
                _ => ShadowKind::Vignetting,
            };
            let location = [
                r.random_range(0.0..nb as f64),
                match kind {
                    ShadowKind::Vignetting => {
                        if r.random_bool(0.5) {
                            r.random_range(0.0..0.3) * nw as f64
                        } else {
                            r.random_range(0.7..1.0) * (nw - 1) as f64
                        }
                    }
                    _ => r.random_range(0.1..0.9) * nw as f64,
                },
            ];
            let radius = match kind {
                ShadowKind::Vessel => Some(r.random_range(1.0..3.0)),
                ShadowKind::Floater => Some(r.random_range(5.0..15.0)),
                ShadowKind::Vignetting => None,
            };
            ShadowSpec {
                kind,
                location,
                attenuation: r.random_range(0.3..0.7),
                radius,
                origin_row: 0,
            }
        })
        .collect()
}

/// Samples an ellipsoid that fits strictly inside the retina, or `None`
/// after repeated failures.
fn random_pocket(surfaces: &Surfaces, shape: [usize; 3], r: &mut impl Rng) -> Option<Ellipsoid> {
    let [nb, _, nw] = shape;
    for _ in 0..50 {
        let ab = r.random_range(2.0..8.0f64).min(nb as f64 / 3.0).max(1.0);
        let aw = r.random_range(4.0..14.0f64).min(nw as f64 / 3.0).max(1.0);
        let cb = r.random_range(0.0..nb as f64);
        let cw = r.random_range(0.0..nw as f64);
        let b_lo = (cb - ab).ceil().max(0.0) as usize;
        let b_hi = ((cb + ab).floor() as usize).min(nb - 1);
        let w_lo = (cw - aw).ceil().max(0.0) as usize;
        let w_hi = ((cw + aw).floor() as usize).min(nw - 1);
        let mut top = 0usize;
        let mut bottom = usize::MAX;
        for b in b_lo..=b_hi {
            for w in w_lo..=w_hi {
                top = top.max(surfaces.ilm_row(b, w));
                bottom = bottom.min(surfaces.bm_row(b, w));
            }
        }
        // Strictly inside: rows top+1 ..= bottom-1.
        if bottom < top + 4 {
            continue;
        }
        let room = (bottom - top) as f64 / 2.0 - 1.0;
        let ad = r.random_range(3.0..12.0f64).min(room * 0.9);
        if ad < 1.5 {
            continue;
        }
        let lo = top as f64 + 1.0 + ad;
        let hi = bottom as f64 - 1.0 - ad;
        if lo > hi {
            continue;
        }
        let cd = r.random_range(lo..=hi);
        return Some(Ellipsoid {
            center: [cb, cd, cw],
            semi_axes: [ab, ad, aw],
        });
    }
    None
}
