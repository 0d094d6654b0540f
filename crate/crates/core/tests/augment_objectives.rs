//! Invariants of attentive aggregation and the contrastive separation loss.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vecaug::augment::{AugmentParams, CohortBatch, NeighborBatch};
use vecaug::autodiff::{ParamStore, Tape, Tensor};
use vecaug::objectives::{value, DisKind};

fn setup(seed: u64, dim: usize) -> (ParamStore<f64>, AugmentParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = AugmentParams::new(&mut store, &mut rng, "augment", dim, 1);
    (store, p)
}

fn vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

/// Independent softmax-weighted sum over `h_k^T W h_i` scores.
fn oracle_aggregate(w: &Tensor<f64>, h_nb: &[Vec<f64>], h_i: &[f64]) -> Vec<f64> {
    let d = h_i.len();
    let wh: Vec<f64> = (0..d).map(|r| (0..d).map(|c| w.data()[r * d + c] * h_i[c]).sum()).collect();
    let s: Vec<f64> = h_nb.iter().map(|h| h.iter().zip(&wh).map(|(a, b)| a * b).sum()).collect();
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    (0..d).map(|j| h_nb.iter().zip(&e).map(|(h, a)| a / z * h[j]).sum()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn aggregate_is_a_convex_combination(seed in any::<u64>(), dim in 1usize..8, k in 1usize..8) {
        let (store, p) = setup(seed, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let h_nb = vectors(&mut rng, k, dim);
        let h_i = vectors(&mut rng, 1, dim).remove(0);
        let (h_a, alpha) = p.attentive_aggregate(&store, &h_nb, &h_i).unwrap();
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));
        for j in 0..dim {
            let lo = h_nb.iter().map(|h| h[j]).fold(f64::INFINITY, f64::min);
            let hi = h_nb.iter().map(|h| h[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(h_a[j] >= lo - 1e-12 && h_a[j] <= hi + 1e-12);
        }
        let want = oracle_aggregate(store.value(p.attention), &h_nb, &h_i);
        for (a, b) in h_a.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn aggregate_is_permutation_invariant(seed in any::<u64>(), dim in 1usize..8, k in 2usize..8) {
        let (store, p) = setup(seed, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let h_nb = vectors(&mut rng, k, dim);
        let h_i = vectors(&mut rng, 1, dim).remove(0);
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| h_nb[i].clone()).collect();
        let (a, wa) = p.attentive_aggregate(&store, &h_nb, &h_i).unwrap();
        let (b, wb) = p.attentive_aggregate(&store, &shuffled, &h_i).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((wb[j] - wa[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_forward_matches_single_sample_helpers(seed in any::<u64>(), dim in 1usize..6, b in 1usize..5) {
        let (store, p) = setup(seed, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let h = vectors(&mut rng, b, dim);
        let aug: Vec<Vec<Vec<f64>>> = (0..b).map(|_| { let n = rng.random_range(0..4); vectors(&mut rng, n, dim) }).collect();
        let neg: Vec<Vec<Vec<f64>>> = (0..b).map(|_| { let n = rng.random_range(0..4); vectors(&mut rng, n, dim) }).collect();
        let batch = |lists: &[Vec<Vec<f64>>]| {
            let mut offsets = vec![0];
            for l in lists { offsets.push(offsets.last().unwrap() + l.len()); }
            NeighborBatch { vectors: Tensor::new(vec![*offsets.last().unwrap(), dim], lists.concat().concat()).unwrap(), offsets }
        };
        let cb = CohortBatch { aug: batch(&aug), neg: batch(&neg) };
        let mut tape = Tape::<f64>::new();
        let hv = tape.constant(Tensor::new(vec![b, dim], h.concat()).unwrap());
        let out = p.forward(&mut tape, &store, hv, &cb, true).unwrap();
        let logits = tape.value(out.logits).data().to_vec();
        let neg_logits = out.neg_logits.map(|v| tape.value(v).data().to_vec()).unwrap_or_default();
        let mut n_at = 0;
        for i in 0..b {
            let h_a = if aug[i].is_empty() {
                vec![0.0; dim]
            } else {
                let t = p.transform_neighbors(&store, &aug[i]).unwrap();
                p.attentive_aggregate(&store, &t, &h[i]).unwrap().0
            };
            let single = p.fuse_predict(&store, &h[i], &h_a).unwrap();
            prop_assert!((single - logits[i]).abs() < 1e-10);
            let t = p.transform_neighbors(&store, &neg[i]).unwrap();
            for l in p.negative_logits(&store, &h[i], &t).unwrap() {
                prop_assert!((l - neg_logits[n_at]).abs() < 1e-10);
                n_at += 1;
            }
        }
        prop_assert_eq!(n_at, neg_logits.len());
    }

    #[test]
    fn sccl_decreases_as_negatives_move_away(d_a in 0.0f64..3.0, d in prop::collection::vec(0.0f64..3.0, 1..8), j in 0usize..8, bump in 1e-3f64..2.0, tau in 0.2f64..3.0) {
        let j = j % d.len();
        let before = value::sccl_from_distances(d_a, &d, tau);
        let mut moved = d.clone();
        moved[j] += bump;
        let after = value::sccl_from_distances(d_a, &moved, tau);
        prop_assert!(before >= 0.0 && after >= 0.0);
        prop_assert!(after < before);
    }

    #[test]
    fn far_negatives_cost_almost_nothing(d_a in 0.0f64..2.0, extra in prop::collection::vec(0.0f64..5.0, 1..8), tau in 0.2f64..3.0) {
        let d: Vec<f64> = extra.iter().map(|e| d_a + 10.0 * tau + e).collect();
        prop_assert!(value::sccl_from_distances(d_a, &d, tau) <= d.len() as f64 * (-10.0f64).exp());
    }

    #[test]
    fn tape_sccl_matches_distance_form(y in 0u8..2, aug in -6.0f64..6.0, neg in prop::collection::vec(-6.0f64..6.0, 0..6), tau in 0.2f64..3.0, bce in any::<bool>()) {
        let kind = if bce { DisKind::Bce } else { DisKind::SquaredProb };
        let y = y as f64;
        let d_n: Vec<f64> = neg.iter().map(|&l| value::dis(y, l, kind)).collect();
        let want = value::sccl_from_distances(value::dis(y, aug, kind), &d_n, tau);
        let got = value::sccl(y, aug, &neg, tau, kind).unwrap();
        prop_assert!((got - want).abs() < 1e-10, "{} vs {}", got, want);
    }
}

#[test]
fn samples_without_negatives_contribute_zero_in_a_batch() {
    // Two targets: the first has two negatives, the second none. The batch loss is
    // the first target's loss divided by the batch size.
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::column(vec![0.3, -1.2]));
    let neg = tape.constant(Tensor::column(vec![1.0, -0.5]));
    let v = vecaug::objectives::sccl(&mut tape, logits, Some(neg), &[0, 2, 2], &[1.0, 0.0], 1.0, DisKind::SquaredProb).unwrap();
    let first = value::sccl(1.0, 0.3, &[1.0, -0.5], 1.0, DisKind::SquaredProb).unwrap();
    assert!((tape.scalar(v) - first / 2.0).abs() < 1e-12);
}
