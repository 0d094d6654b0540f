//! Exact KNN against an f64 brute-force sort, and HNSW recall against exact search.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vecaug::bench::clustered_vectors;
use vecaug::vecpool::{HnswParams, LabelFilter, VectorPool, VectorRecord};

/// Brute force over all records: filter, sort by (distance, id), take `k`.
fn oracle(records: &[(u64, u8, Vec<f32>)], q: &[f32], k: usize, filter: LabelFilter, exclude: Option<u64>) -> Vec<(u64, f32)> {
    let mut all: Vec<(f64, u64)> = records
        .iter()
        .filter(|(id, label, _)| Some(*id) != exclude && filter.accepts(*label))
        .map(|(id, _, v)| {
            let d: f64 = v.iter().zip(q).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            (d, *id)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(d, id)| (id, d.sqrt() as f32)).collect()
}

/// Integer-grid pool: coordinates in `-2..=2` make distances exact and ties common.
fn grid_pool(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (VectorPool, Vec<(u64, u8, Vec<f32>)>) {
    let mut pool = VectorPool::new(dim);
    let mut records = Vec::with_capacity(n);
    // Ids are shuffled so that tie-breaking by id differs from insertion order.
    let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    for id in ids {
        let label = rng.random_range(0..2u8);
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-2..=2) as f32).collect();
        pool.add(VectorRecord {
            id,
            label,
            vector: v.clone(),
        })
        .unwrap();
        records.push((id, label, v));
    }
    (pool, records)
}

const FILTERS: [LabelFilter; 5] = [
    LabelFilter::Any,
    LabelFilter::LabelEquals(0),
    LabelFilter::LabelEquals(1),
    LabelFilter::LabelNot(0),
    LabelFilter::LabelNot(1),
];

#[test]
fn exact_knn_matches_brute_force_on_200_pools() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for p in 0..200 {
        let n = rng.random_range(1..=2000);
        let (pool, records) = grid_pool(&mut rng, n, 64);
        for _ in 0..3 {
            let q: Vec<f32> = (0..64).map(|_| rng.random_range(-2..=2) as f32).collect();
            let k = rng.random_range(1..=12);
            let exclude = rng.random_bool(0.3).then(|| records[rng.random_range(0..n)].0);
            for filter in FILTERS {
                let got: Vec<(u64, f32)> = pool
                    .knn(&q, k, filter, exclude)
                    .unwrap()
                    .into_iter()
                    .map(|nb| (nb.id, nb.distance))
                    .collect();
                assert_eq!(got, oracle(&records, &q, k, filter, exclude), "pool {p}, filter {filter:?}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn small_pools_and_k_beyond_size(seed in any::<u64>(), n in 1usize..40, k in 1usize..50, dim in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pool, records) = grid_pool(&mut rng, n, dim);
        let q: Vec<f32> = (0..dim).map(|_| rng.random_range(-2..=2) as f32).collect();
        for filter in FILTERS {
            let got: Vec<(u64, f32)> = pool.knn(&q, k, filter, None).unwrap().into_iter().map(|nb| (nb.id, nb.distance)).collect();
            let want = oracle(&records, &q, k, filter, None);
            prop_assert_eq!(got.len(), want.len().min(k));
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn results_respect_filter_and_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pool, _) = grid_pool(&mut rng, 300, 8);
        let q: Vec<f32> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        for filter in FILTERS {
            let got = pool.knn(&q, 10, filter, None).unwrap();
            for w in got.windows(2) {
                prop_assert!(w[0].distance < w[1].distance || (w[0].distance == w[1].distance && w[0].id < w[1].id));
            }
            for nb in &got {
                prop_assert!(filter.accepts(pool.get(nb.id).unwrap().0));
            }
        }
    }
}

#[test]
fn batched_queries_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let n = rng.random_range(1..=1500);
        let (pool, records) = grid_pool(&mut rng, n, 16);
        let queries: Vec<Vec<f32>> = (0..rng.random_range(1..40))
            .map(|_| (0..16).map(|_| rng.random_range(-2..=2) as f32).collect())
            .collect();
        let k = rng.random_range(1..=10);
        for f in FILTERS {
            let batch = pool.knn_batch(&queries, k, f).unwrap();
            for (q, got) in queries.iter().zip(&batch) {
                let ids: Vec<u64> = got.iter().map(|x| x.id).collect();
                let want: Vec<u64> = oracle(&records, q, k, f, None).iter().map(|x| x.0).collect();
                assert_eq!(ids, want);
            }
        }
    }
}

#[test]
fn hnsw_recall_on_10k_vectors() {
    let vectors = clustered_vectors(10_100, 64, 64, 5);
    let (base, queries) = vectors.split_at(10_000);
    let mut pool = VectorPool::new(64);
    for (i, v) in base.iter().enumerate() {
        pool.add(VectorRecord {
            id: i as u64,
            label: (i % 2) as u8,
            vector: v.clone(),
        })
        .unwrap();
    }
    pool.build_index(HnswParams::default());
    let mut hits = 0;
    for q in queries {
        let exact = pool.knn(q, 5, LabelFilter::Any, None).unwrap();
        let approx = pool.knn_approx(q, 5, LabelFilter::Any, 64, None).unwrap();
        hits += approx.iter().filter(|a| exact.iter().any(|e| e.id == a.id)).count();
    }
    let recall = hits as f64 / (5 * queries.len()) as f64;
    assert!(recall >= 0.95, "recall@5 = {recall}");
}

#[test]
fn hnsw_with_filters_and_exclusion() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut pool, records) = grid_pool(&mut rng, 500, 6);
    pool.build_index(HnswParams {
        ef_construction: 200,
        ..Default::default()
    });
    let ex = records[0].0;
    for filter in FILTERS {
        let got = pool.knn_approx(&records[0].2, 5, filter, 200, Some(ex)).unwrap();
        assert!(got.iter().all(|n| n.id != ex && filter.accepts(pool.get(n.id).unwrap().0)));
    }
}
