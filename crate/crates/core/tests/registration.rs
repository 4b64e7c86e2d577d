use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refnet_core::phantom::{generate_phantom, Ellipsoid, PhantomSpec, SurfaceUndulation};
use refnet_core::registration::*;
use refnet_core::volume::{codes, LabelVolume, Provenance, Shape3, Spacing};

fn small_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        shape: [32, 96, 64],
        ilm_mean_row: 24.0,
        bm_mean_row: 70.0,
        vessel_density: 10.0,
        seed,
        ..PhantomSpec::default()
    }
}

/// Follow-up: same anatomy, fresh speckle, translated laterally by `shift`.
fn shifted_followup(spec: &PhantomSpec, noise_seed: u64, shift: [i64; 2]) -> (refnet_core::volume::ScanVolume, LabelVolume) {
    let mut s = spec.clone();
    s.noise_seed = Some(noise_seed);
    let p = generate_phantom(&s).unwrap();
    let shape = p.octa.shape;
    let octa = p.octa.with_voxels(translate_lateral(&p.octa.voxels, shape, shift, 0.0));
    let labels = p
        .truth
        .with_codes(translate_lateral(&p.truth.codes, shape, shift, codes::BACKGROUND), Provenance::PhantomTruth);
    (octa, labels)
}

#[test]
fn self_registration_is_identity() {
    let p = generate_phantom(&small_spec(3)).unwrap();
    let r = register_volumes(&p.octa, &p.truth, &p.octa, &p.truth).unwrap();
    assert_eq!(r.result.lateral_shift, [0, 0]);
    assert!((r.result.correlation_peak - 1.0).abs() < 1e-12);
    assert!(r.result.axial_shift_map.iter().all(|&s| s == 0));
}

#[test]
fn lateral_shifts_recovered_under_fresh_speckle() {
    let spec = small_spec(11);
    let base = generate_phantom(&spec).unwrap();
    let fixed = enface_vessel_image(&base.octa, &base.truth).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..8 {
        let shift = [rng.random_range(-8i64..=8), rng.random_range(-16i64..=16)];
        let (octa, labels) = shifted_followup(&spec, 1000 + k, shift);
        let moving = enface_vessel_image(&octa, &labels).unwrap();
        let m = register_lateral(&fixed, &moving).unwrap();
        assert_eq!(m.shift, shift);
        assert!(m.peak > 0.5, "peak {}", m.peak);
    }
}

#[test]
fn sinusoidal_bm_recovered_within_one_row() {
    let spec = PhantomSpec {
        surface_undulation: SurfaceUndulation {
            amplitude: 6.0,
            smoothness: 1.0,
        },
        ..small_spec(21)
    };
    let p = generate_phantom(&spec).unwrap();
    let est = estimate_bm_surface(&p.truth).unwrap();
    let truth = spec.surfaces();
    for b in 0..est.n_bscans {
        for w in 0..est.width {
            let d = est.get(b, w) as f64 - truth.bm[b * truth.width + w];
            assert!(d.abs() <= 1.0, "({b},{w}) off by {d}");
        }
    }
}

#[test]
fn flattening_noiseless_phantom_leaves_flat_surface() {
    let spec = PhantomSpec {
        speckle_contrast: 0.0,
        fluid_pockets: vec![Ellipsoid {
            center: [16.0, 50.0, 32.0],
            semi_axes: [5.0, 6.0, 9.0],
        }],
        ..small_spec(8)
    };
    let p = generate_phantom(&spec).unwrap();
    let surface = estimate_bm_surface(&p.truth).unwrap();
    let (_, flat) = flatten_axial(&p.oct, &p.truth, &surface).unwrap();
    let after = estimate_bm_surface(&flat).unwrap();
    let target = surface.median();
    assert!(after.rows.iter().all(|&r| r == target));
    assert_eq!(flat.count(codes::FLUID), p.truth.count(codes::FLUID));
}

#[test]
fn axial_offset_between_visits_is_removed() {
    let spec = small_spec(30);
    let base = generate_phantom(&spec).unwrap();
    let follow_spec = PhantomSpec {
        ilm_mean_row: spec.ilm_mean_row + 5.0,
        bm_mean_row: spec.bm_mean_row + 5.0,
        noise_seed: Some(77),
        ..spec.clone()
    };
    let follow = generate_phantom(&follow_spec).unwrap();
    let r = register_volumes(&base.octa, &base.truth, &follow.octa, &follow.truth).unwrap();
    assert_eq!(r.result.lateral_shift, [0, 0]);
    let a = estimate_bm_surface(&base.truth).unwrap();
    let b = estimate_bm_surface(&r.labels).unwrap();
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert!((*x as i64 - *y as i64).abs() <= 1);
    }
}

#[test]
fn grown_pocket_gain_matches_shell_volume() {
    let shape = Shape3::new(48, 64, 64);
    let sp = Spacing::new(10.0, 10.0, 10.0);
    let inner = Ellipsoid {
        center: [24.0, 32.0, 32.0],
        semi_axes: [12.0, 14.0, 16.0],
    };
    let outer = Ellipsoid {
        center: inner.center,
        semi_axes: [16.0, 18.0, 20.0],
    };
    let paint = |e: &Ellipsoid| {
        let mut l = LabelVolume::filled(shape, sp, Provenance::PhantomTruth, "x", codes::TISSUE);
        e.for_each_voxel(shape, |b, d, w| l.codes[shape.index(b, d, w)] = codes::FLUID);
        l
    };
    let c = change_map(&paint(&inner), &paint(&outer)).unwrap();
    let shell = (outer.volume_voxels() - inner.volume_voxels()) * sp.voxel_mm3();
    assert!((c.gained_mm3 - shell).abs() / shell < 0.05);
    assert_eq!(c.lost_mm3, 0.0);
    assert!((c.delta_mm3 - c.gained_mm3).abs() < 1e-15);
}

fn random_labels(seed: u64) -> LabelVolume {
    let shape = Shape3::new(4, 5, 6);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut l = LabelVolume::filled(shape, Spacing::default(), Provenance::Predicted, "r", 0);
    for c in &mut l.codes {
        *c = r.random_range(0..3u8);
    }
    l
}

proptest! {
    #[test]
    fn change_map_partitions(a in any::<u64>(), b in any::<u64>()) {
        let (x, y) = (random_labels(a), random_labels(b));
        let c = change_map(&x, &y).unwrap();
        for i in 0..x.codes.len() {
            let n = c.gained[i] as u8 + c.lost[i] as u8 + c.stable[i] as u8;
            prop_assert!(n <= 1);
            let any_fluid = x.codes[i] == codes::FLUID || y.codes[i] == codes::FLUID;
            prop_assert_eq!(n == 1, any_fluid);
        }
    }

    #[test]
    fn translated_image_registers_back(sb in -4i64..=4, sw in -4i64..=4, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..16 * 16).map(|_| r.random::<f64>()).collect();
        let fixed = EnfaceImage::new(16, 16, data).unwrap();
        let m = register_lateral(&fixed, &fixed.translated([sb, sw])).unwrap();
        prop_assert_eq!(m.shift, [sb, sw]);
    }
}
