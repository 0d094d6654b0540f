//! AUC and recall-at-precision against brute-force oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vecaug::metrics::{auc, evaluate, recall_at_precision, Provenance};

/// Fraction of (positive, negative) pairs ranked correctly, ties counting one half.
fn pairs_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Every distinct threshold `t` defines the prefix `score >= t`.
fn thresholds_recall(scores: &[f64], labels: &[u8], p: f64) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut best: f64 = 0.0;
    for &t in scores {
        let taken = scores.iter().filter(|&&s| s >= t).count() as f64;
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 1).count() as f64;
        if tp / taken >= p {
            best = best.max(tp / pos);
        }
    }
    best
}

fn instance(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> (Vec<f64>, Vec<u8>) {
    loop {
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        if labels.contains(&0) && labels.contains(&1) {
            return (scores, labels);
        }
    }
}

#[test]
fn auc_equals_all_pairs_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..100 {
        let n = rng.random_range(2..=500);
        // Few levels give heavy ties, many give almost none.
        let levels = if i % 2 == 0 { 7 } else { 1_000_000 };
        let (s, l) = instance(&mut rng, n, levels);
        let brute = pairs_auc(&s, &l);
        assert!((auc(&s, &l).unwrap() - brute).abs() < 1e-12, "instance {i}");
    }
}

#[test]
fn documented_examples() {
    assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
    assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
    assert_eq!(auc(&[0.8, 0.6, 0.4, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
    assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());

    assert_eq!(recall_at_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0], 0.9).unwrap(), 1.0);
    assert_eq!(recall_at_precision(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1], 0.9).unwrap(), 0.0);
    let s: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 / 10.0).collect();
    assert_eq!(recall_at_precision(&s, &[1, 1, 1, 1, 0, 1, 0, 0, 0, 0], 0.9).unwrap(), 0.8);
}

#[test]
fn tie_groups_are_taken_whole() {
    // The top tie group holds one positive and one negative: precision 0.5 at depth 2.
    assert_eq!(recall_at_precision(&[0.9, 0.9, 0.1], &[1, 0, 0], 0.9).unwrap(), 0.0);
    assert_eq!(recall_at_precision(&[0.9, 0.9, 0.1], &[1, 0, 0], 0.5).unwrap(), 1.0);
    // Depth 3 reaches precision 2/3 and full recall.
    assert_eq!(recall_at_precision(&[0.9, 0.9, 0.1], &[1, 0, 1], 0.6).unwrap(), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn recall_matches_threshold_enumeration(seed in any::<u64>(), n in 2usize..120, p in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = instance(&mut rng, n, 9);
        prop_assert_eq!(recall_at_precision(&s, &l, p).unwrap(), thresholds_recall(&s, &l, p));
    }

    #[test]
    fn auc_invariant_under_monotone_transform(seed in any::<u64>(), n in 2usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = instance(&mut rng, n, 50);
        let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
        prop_assert_eq!(auc(&s, &l).unwrap(), auc(&t, &l).unwrap());
    }

    #[test]
    fn recall_non_increasing_in_p(seed in any::<u64>(), n in 2usize..200, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = instance(&mut rng, n, 20);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(recall_at_precision(&s, &l, lo).unwrap() >= recall_at_precision(&s, &l, hi).unwrap());
    }

    #[test]
    fn slices_partition_the_positives(seed in any::<u64>(), n in 4usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = instance(&mut rng, n, 30);
        let tags: Vec<Provenance> = l.iter().map(|&label| Provenance { label, camouflaged: label == 1 && rng.random_bool(0.5) }).collect();
        let r = evaluate(&s, &tags).unwrap();
        let pos = l.iter().filter(|&&x| x == 1).count();
        prop_assert_eq!(r.camouflaged.positives + r.ring.positives, pos);
        // Slice recall uses the full-population threshold, so the positive-weighted
        // mean of slice recalls is the overall recall.
        let weighted = r.camouflaged.recall_at_p90.unwrap_or(0.0) * r.camouflaged.positives as f64
            + r.ring.recall_at_p90.unwrap_or(0.0) * r.ring.positives as f64;
        prop_assert!((weighted / pos as f64 - r.r_at_p90).abs() < 1e-12);
    }
}
