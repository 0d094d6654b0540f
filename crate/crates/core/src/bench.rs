//! Exact versus HNSW query throughput over growing pool sizes.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::datagen::sub_seed;
use crate::vecpool::{HnswParams, LabelFilter, Neighbor, VectorPool, VectorRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub dim: usize,
    pub k: usize,
    pub exact_queries: usize,
    pub index_queries: usize,
    pub threads: usize,
    pub hnsw: HnswParams,
    /// Gaussian clusters the synthetic vectors are drawn around.
    pub clusters: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![12_500, 25_000, 50_000, 100_000],
            dim: 64,
            k: 5,
            exact_queries: 200,
            index_queries: 2_000,
            threads: 1,
            hnsw: HnswParams {
                m: 16,
                ef_construction: 100,
                ef_search: 64,
                seed: 0x5eed,
            },
            clusters: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub index: &'static str,
    pub queries: usize,
    pub threads: usize,
    pub seconds: f64,
    pub qps: f64,
    pub build_seconds: f64,
    /// Mean overlap with the exact top-K (1 for the exact scan).
    pub recall: f64,
}

/// Vectors drawn around random cluster centres, roughly like trained embeddings.
pub fn clustered_vectors(n: usize, dim: usize, clusters: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(-1.0f32, 1.0).unwrap();
    let noise = Normal::new(0.0f32, 0.25).unwrap();
    let centres: Vec<Vec<f32>> = (0..clusters.max(1))
        .map(|_| (0..dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    (0..n)
        .map(|i| {
            let c = &centres[i % centres.len()];
            c.iter().map(|&x| x + noise.sample(&mut rng)).collect()
        })
        .collect()
}

/// Splits `queries` into one chunk per scoped worker and runs `f` on each chunk;
/// returns results in order and wall-clock seconds.
fn timed_queries<F>(queries: &[Vec<f32>], threads: usize, f: F) -> (Vec<Vec<Neighbor>>, f64)
where
    F: Fn(&[Vec<f32>]) -> Vec<Vec<Neighbor>> + Sync,
{
    let threads = threads.max(1);
    let chunk = queries.len().div_ceil(threads).max(1);
    let start = Instant::now();
    let results: Vec<Vec<Vec<Neighbor>>> = std::thread::scope(|s| {
        let handles: Vec<_> = queries
            .chunks(chunk)
            .map(|qs| {
                let f = &f;
                s.spawn(move || f(qs))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("query worker")).collect()
    });
    let secs = start.elapsed().as_secs_f64();
    (results.into_iter().flatten().collect(), secs)
}

fn overlap(a: &[Neighbor], b: &[Neighbor]) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let hits = b.iter().filter(|x| a.iter().any(|y| y.id == x.id)).count();
    hits as f64 / a.len() as f64
}

/// Measures exact and indexed throughput at every size.
pub fn run_bench(config: &BenchConfig) -> Vec<BenchRow> {
    let mut rows = Vec::new();
    let max_n = config.sizes.iter().copied().max().unwrap_or(0);
    let n_q = config.exact_queries.max(config.index_queries).max(1);
    // Queries come from the same clusters as the pool but are not pool members.
    let mut base = clustered_vectors(max_n + n_q, config.dim, config.clusters, sub_seed(config.seed, 1, 0));
    let queries = base.split_off(max_n);
    for &n in &config.sizes {
        let mut pool = VectorPool::new(config.dim);
        for (i, v) in base[..n].iter().enumerate() {
            pool.add(VectorRecord {
                id: i as u64,
                label: 0,
                vector: v.clone(),
            })
            .expect("fresh ids");
        }
        let k = config.k.min(n.max(1));
        let eq = &queries[..config.exact_queries.clamp(1, n_q)];
        let (exact, secs) = timed_queries(eq, config.threads, |qs| pool.knn_batch(qs, k, LabelFilter::Any).unwrap());
        rows.push(BenchRow {
            n,
            index: "exact",
            queries: eq.len(),
            threads: config.threads,
            seconds: secs,
            qps: eq.len() as f64 / secs,
            build_seconds: 0.0,
            recall: 1.0,
        });
        let start = Instant::now();
        pool.build_index(config.hnsw);
        let build = start.elapsed().as_secs_f64();
        let iq = &queries[..config.index_queries.clamp(1, n_q)];
        let ef = config.hnsw.ef_search;
        let (approx, secs) = timed_queries(iq, config.threads, |qs| {
            qs.iter().map(|q| pool.knn_approx(q, k, LabelFilter::Any, ef, None).unwrap()).collect()
        });
        let recall = exact.iter().zip(&approx).map(|(e, a)| overlap(e, a)).sum::<f64>() / exact.len().max(1) as f64;
        rows.push(BenchRow {
            n,
            index: "hnsw",
            queries: iq.len(),
            threads: config.threads,
            seconds: secs,
            qps: iq.len() as f64 / secs,
            build_seconds: build,
            recall,
        });
    }
    rows
}

/// Least-squares slope of `ln(cost)` on `ln(n)`.
pub fn loglog_slope(ns: &[f64], costs: &[f64]) -> f64 {
    let xs: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = costs.iter().map(|c| c.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Per-query cost slopes `(exact, hnsw)` from bench rows.
pub fn cost_slopes(rows: &[BenchRow]) -> (f64, f64) {
    let slope = |kind: &str| {
        let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.index == kind).collect();
        let ns: Vec<f64> = sel.iter().map(|r| r.n as f64).collect();
        let cost: Vec<f64> = sel.iter().map(|r| 1.0 / r.qps).collect();
        loglog_slope(&ns, &cost)
    };
    (slope("exact"), slope("hnsw"))
}

pub const BENCH_HEADER: &str = "n,index,queries,threads,seconds,qps,build_seconds,recall_at_k";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.2},{:.3},{:.4}",
            r.n, r.index, r.queries, r.threads, r.seconds, r.qps, r.build_seconds, r.recall
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let ns = [1.0, 2.0, 4.0, 8.0];
        let c: Vec<f64> = ns.iter().map(|n: &f64| 3.0 * n.powf(1.5)).collect();
        assert!((loglog_slope(&ns, &c) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn single_vector_pool_agrees() {
        let rows = run_bench(&BenchConfig {
            sizes: vec![1],
            exact_queries: 3,
            index_queries: 3,
            ..Default::default()
        });
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].recall, 1.0);
    }
}
