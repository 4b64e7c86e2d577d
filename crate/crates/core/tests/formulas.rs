use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refnet_core::evaluator::*;
use refnet_core::preprocess::*;
use refnet_core::trainer::loss::*;
use refnet_core::volume::{codes, Modality, ScanVolume, Shape3, Spacing};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Softmax-normalized random probabilities and random one-hot targets for an
/// `h x w` image, class-major.
fn random_instance(r: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
    let p = h * w;
    let labels: Vec<u8> = (0..p).map(|_| r.random_range(0..3)).collect();
    let y = one_hot(&labels);
    let mut yhat = vec![0f32; 3 * p];
    for j in 0..p {
        let logits: [f32; 3] = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
        let m = logits.iter().cloned().fold(f32::MIN, f32::max);
        let e: Vec<f32> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f32 = e.iter().sum();
        for c in 0..3 {
            yhat[c * p + j] = e[c] / s;
        }
    }
    (y, yhat)
}

#[test]
fn jaccard_examples() {
    let mut y = vec![0.0f64; 400];
    y[..100].fill(1.0);
    assert!(close(jaccard_class_loss(&y, &vec![0.0; 400], 100.0).unwrap(), 50.0, 1e-12));
    assert_eq!(jaccard_class_loss(&y, &y, 100.0).unwrap(), 0.0);
    let z = vec![0.0f64; 7];
    assert_eq!(jaccard_class_loss(&z, &z, 100.0).unwrap(), 0.0);
}

#[test]
fn weighted_total_example() {
    // Fluid map has 100 missed positives (J = 50); background and tissue are
    // predicted perfectly.
    let p = 300;
    let mut codes_y = vec![codes::TISSUE; p];
    codes_y[..100].fill(codes::FLUID);
    codes_y[200..].fill(codes::BACKGROUND);
    let y = one_hot(&codes_y);
    let mut yhat = y.clone();
    for j in 0..100 {
        yhat[2 * p + j] = 0.0;
    }
    let cfg = LossConfig {
        include_cross_entropy: false,
        ..LossConfig::default()
    };
    let j = class_losses(&y, &yhat, p, 100.0).unwrap();
    assert!(close(j[2], 50.0, 1e-9));
    assert_eq!(j[0], 0.0);
    assert_eq!(j[1], 0.0);
    assert!(close(total_loss(&y, &yhat, p, &cfg).unwrap(), 25.0, 1e-9));
    assert_eq!(total_loss(&y, &y, p, &cfg).unwrap(), 0.0);
}

#[test]
fn cross_entropy_uses_clamped_log() {
    let y = one_hot(&[2]);
    let yhat = [0.5f64, 0.5, 0.0];
    let ce = cross_entropy(&y.iter().map(|&v| v as f64).collect::<Vec<_>>(), &yhat, 1).unwrap();
    assert!(close(ce, -(CE_EPSILON.ln()), 1e-9));
}

/// Analytic gradient of the total loss vs central differences on 20 random
/// 8x8 three-class instances.
#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(42);
    let cfg = LossConfig::default();
    for _ in 0..20 {
        let (y, yhat32) = random_instance(&mut r, 8, 8);
        let y: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let yhat: Vec<f64> = yhat32.iter().map(|&v| v as f64).collect();
        let (_, g) = total_loss_grad(&y, &yhat, 64, &cfg).unwrap();
        let h = 1e-5;
        let mut diff = 0.0;
        let mut norm = 0.0;
        for i in 0..yhat.len() {
            let mut up = yhat.clone();
            up[i] += h;
            let mut dn = yhat.clone();
            dn[i] -= h;
            let fd = (total_loss(&y, &up, 64, &cfg).unwrap() - total_loss(&y, &dn, 64, &cfg).unwrap()) / (2.0 * h);
            diff += (fd - g[i]).powi(2);
            norm += fd.powi(2).max(g[i].powi(2));
        }
        let rel = (diff / norm).sqrt();
        assert!(rel <= 1e-3, "relative error {rel}");
    }
}

#[test]
fn f1_and_iou_examples() {
    let c = |tp, fp, fn_| ConfusionCounts { tp, fp, fn_, tn: 0 };
    assert_eq!(f1(&c(50, 0, 0)), 1.0);
    assert_eq!(f1(&c(0, 3, 4)), 0.0);
    assert!(close(f1(&c(40, 10, 10)), 0.8, 1e-12));
    assert!(close(iou(&c(40, 10, 10)), 40.0 / 60.0, 1e-4));
    assert_eq!(iou(&c(0, 0, 0)), 1.0);
    assert_eq!(iou(&c(0, 5, 5)), 0.0);
}

#[test]
fn aroc_examples() {
    let t = [true, false, true, false];
    assert!(close(aroc(&[0.9f64, 0.8, 0.7, 0.1], &t).unwrap(), 0.75, 1e-12));
    assert_eq!(aroc(&[0.5f64; 4], &t).unwrap(), 0.5);
    assert_eq!(aroc(&[0.9f64, 0.1, 0.8, 0.2], &t).unwrap(), 1.0);
    assert!(aroc(&[0.1f64, 0.2], &[true, true]).is_err());
}

#[test]
fn confusion_counts_forced_case() {
    let truth: Vec<u8> = (0..400).map(|i| if i < 100 { codes::FLUID } else { codes::TISSUE }).collect();
    let pred = vec![codes::TISSUE; 400];
    let c = confusion_codes(&pred, &truth).unwrap();
    assert_eq!((c.tp, c.fn_, c.fp, c.tn), (0, 100, 0, 300));
    let same = confusion_codes(&truth, &truth).unwrap();
    assert_eq!(same.fp + same.fn_, 0);
}

#[test]
fn fusion_and_smoothing_examples() {
    let shape = Shape3::new(1, 1, 1);
    let mut oct = ScanVolume::zeros(shape, Spacing::default(), Modality::Oct, "x");
    oct.voxels[0] = 0.5;
    let mut octa = ScanVolume::zeros(shape, Spacing::default(), Modality::Octa, "x");
    octa.voxels[0] = 0.9;
    let f = fuse(&oct, &octa, FusionConfig::new(0.2).unwrap()).unwrap();
    assert!(close(f.voxels[0] as f64, 0.58, 1e-6));
    assert_eq!(fuse(&oct, &octa, FusionConfig::new(0.0).unwrap()).unwrap().voxels, oct.voxels);
    assert_eq!(fuse(&oct, &octa, FusionConfig::new(1.0).unwrap()).unwrap().voxels, octa.voxels);
    assert!(FusionConfig::new(1.7).is_err());

    let mut v = ScanVolume::zeros(Shape3::new(3, 2, 2), Spacing::default(), Modality::Oct, "s");
    v.bscan_mut(1).fill(0.6);
    let s = smooth_bscans(&v);
    assert!(s.bscan(1).iter().all(|&x| close(x as f64, 0.2, 1e-6)));
}

#[test]
fn normalize_examples() {
    let mut v = ScanVolume::zeros(Shape3::new(1, 2, 2), Spacing::default(), Modality::Oct, "n");
    v.voxels = vec![0.2, 0.4, 0.6, 0.8];
    let n = normalize(&v);
    assert_eq!(n.voxels[0], 0.0);
    assert_eq!(n.voxels[3], 1.0);
    v.voxels = vec![0.5; 4];
    assert!(normalize(&v).voxels.iter().all(|&x| x == 0.0));
}

fn aroc_oracle(scores: &[f64], truth: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !truth[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if truth[j] {
                continue;
            }
            den += 1.0;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

proptest! {
    #[test]
    fn aroc_matches_pairwise_oracle(
        data in prop::collection::vec((0u8..6, any::<bool>()), 2..60)
    ) {
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
        let truth: Vec<bool> = data.iter().map(|d| d.1).collect();
        let pos = truth.iter().filter(|&&t| t).count();
        prop_assume!(pos > 0 && pos < truth.len());
        prop_assert!((aroc(&scores, &truth).unwrap() - aroc_oracle(&scores, &truth)).abs() < 1e-12);
    }

    #[test]
    fn confusion_matches_brute_force(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<u8> = (0..100).map(|_| r.random_range(0..3)).collect();
        let truth: Vec<u8> = (0..100).map(|_| r.random_range(0..3)).collect();
        let c = confusion_codes(&pred, &truth).unwrap();
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (p, t) in pred.iter().zip(&truth) {
            match (*p == codes::FLUID, *t == codes::FLUID) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        prop_assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn));
        prop_assert!(f1(&c) >= iou(&c) - 1e-12);
    }

    #[test]
    fn fused_voxels_stay_in_envelope(a in 0.0f32..=1.0, b in 0.0f32..=1.0, beta in 0.0f64..=1.0) {
        let shape = Shape3::new(1, 1, 1);
        let mut oct = ScanVolume::zeros(shape, Spacing::default(), Modality::Oct, "e");
        oct.voxels[0] = a;
        let mut octa = ScanVolume::zeros(shape, Spacing::default(), Modality::Octa, "e");
        octa.voxels[0] = b;
        let f = fuse(&oct, &octa, FusionConfig::new(beta).unwrap()).unwrap().voxels[0];
        prop_assert!(f >= a.min(b) && f <= a.max(b));
    }

    #[test]
    fn jaccard_nonnegative_and_zero_on_match(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (y, yhat) = random_instance(&mut r, 4, 4);
        let j = class_losses(&y, &yhat, 16, 100.0).unwrap();
        prop_assert!(j.iter().all(|&v| v >= -1e-9));
        prop_assert!(class_losses(&y, &y, 16, 100.0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smoothing_preserves_mean_bounds(seed in any::<u64>(), n in 1usize..6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut v = ScanVolume::zeros(Shape3::new(n, 3, 3), Spacing::default(), Modality::Oct, "m");
        for x in &mut v.voxels { *x = r.random(); }
        let s = smooth_bscans(&v);
        let (lo, hi) = v.voxels.iter().fold((1f32, 0f32), |(l, h), &x| (l.min(x), h.max(x)));
        prop_assert!(s.voxels.iter().all(|&x| x >= lo - 1e-6 && x <= hi + 1e-6));
    }
}
