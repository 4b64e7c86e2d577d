use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refnet_core::groundtruth::*;
use refnet_core::volume::{codes, LabelVolume, Provenance, Shape3, Spacing};

fn majority_oracle(v: [u8; 3]) -> u8 {
    for c in codes::CLASSES {
        if v.iter().filter(|&&x| x == c).count() >= 2 {
            return c;
        }
    }
    codes::UNRESOLVED
}

fn grader(id: &str, codes: Vec<u8>, shape: Shape3) -> LabelVolume {
    let mut l = LabelVolume::filled(shape, Spacing::default(), Provenance::Grader, "v", 0);
    l.codes = codes;
    l.grader_id = Some(id.into());
    l
}

#[test]
fn all_27_triples() {
    let mut unresolved = 0;
    for a in codes::CLASSES {
        for b in codes::CLASSES {
            for c in codes::CLASSES {
                let v = vote(a, b, c);
                assert_eq!(v, majority_oracle([a, b, c]));
                unresolved += (v == codes::UNRESOLVED) as usize;
            }
        }
    }
    assert_eq!(unresolved, 6);
}

#[test]
fn merged_volume_counts_and_resolution() {
    let shape = Shape3::new(1, 1, 3);
    let set = GraderSet::new(vec![
        grader("a", vec![2, 1, 0], shape),
        grader("b", vec![2, 1, 1], shape),
        grader("c", vec![1, 1, 2], shape),
    ])
    .unwrap();
    let (merged, n) = vote_merge(&set);
    assert_eq!(merged.codes, vec![2, 1, 255]);
    assert_eq!(n, 1);
    assert_eq!(merged.provenance, Provenance::Merged);
    assert_eq!(unresolved_voxels(&merged), vec![[0, 0, 2]]);
    assert_eq!(resolve(&merged, &[]).unwrap(), merged);
    let done = resolve(&merged, &[Resolution { index: [0, 0, 2], code: 2 }]).unwrap();
    assert_eq!(done.unresolved_count(), 0);
    assert!(resolve(&merged, &[Resolution { index: [0, 0, 1], code: 2 }]).is_err());
    assert!(resolve(&merged, &[Resolution { index: [0, 0, 2], code: 9 }]).is_err());
    assert!(resolve(&merged, &[Resolution { index: [0, 1, 0], code: 2 }]).is_err());
    let s = label_stats(&merged);
    assert_eq!((s.background, s.tissue, s.fluid, s.unresolved), (0, 1, 1, 1));
    assert_eq!(s.total(), shape.len());
}

#[test]
fn grader_set_preconditions() {
    let shape = Shape3::new(1, 1, 2);
    let g = |id| grader(id, vec![0, 1], shape);
    assert!(GraderSet::new(vec![g("a"), g("b")]).is_err());
    assert!(GraderSet::new(vec![g("a"), g("a"), g("c")]).is_err());
    let other = grader("c", vec![0, 1, 1], Shape3::new(1, 1, 3));
    assert!(GraderSet::new(vec![g("a"), g("b"), other]).is_err());
    let mut merged = g("c");
    merged.provenance = Provenance::Merged;
    assert!(GraderSet::new(vec![g("a"), g("b"), merged]).is_err());
}

proptest! {
    #[test]
    fn vote_merge_is_permutation_invariant(seed in any::<u64>(), perm in 0usize..6) {
        let shape = Shape3::new(2, 3, 4);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut vols: Vec<Vec<u8>> = (0..3)
            .map(|_| (0..shape.len()).map(|_| r.random_range(0..3)).collect())
            .collect();
        let base = GraderSet::new(
            vols.iter().zip(["a", "b", "c"]).map(|(v, id)| grader(id, v.clone(), shape)).collect(),
        ).unwrap();
        let (m0, n0) = vote_merge(&base);
        let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let o = orders[perm];
        vols = o.iter().map(|&i| vols[i].clone()).collect();
        let perm_set = GraderSet::new(
            vols.iter().zip(["x", "y", "z"]).map(|(v, id)| grader(id, v.clone(), shape)).collect(),
        ).unwrap();
        let (m1, n1) = vote_merge(&perm_set);
        prop_assert_eq!(m0.codes, m1.codes);
        prop_assert_eq!(n0, n1);
    }
}
