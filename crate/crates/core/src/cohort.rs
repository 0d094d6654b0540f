//! Cohort identification: augmentation and negative neighbours of a target sample.

use thiserror::Error;

use crate::vecpool::{LabelFilter, PoolError, VectorPool};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("train-mode retrieval needs the target {0}")]
    MissingTarget(&'static str),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CohortMode {
    /// Excludes the target itself and also retrieves opposite-label negatives.
    Train,
    /// Augmentation neighbours only, no exclusion.
    Infer,
}

/// How the pool is searched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Search {
    #[default]
    Exact,
    /// Uses the pool's HNSW graphs, which must already be built.
    Approx { ef_search: usize },
}

/// Identity of the sample a cohort is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    pub id: u64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub id: u64,
    pub label: u8,
    pub distance: f32,
    pub vector: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CohortSet {
    pub target_id: Option<u64>,
    pub aug: Vec<Member>,
    pub neg: Vec<Member>,
}

impl CohortSet {
    pub fn empty(target_id: Option<u64>) -> Self {
        Self {
            target_id,
            aug: Vec::new(),
            neg: Vec::new(),
        }
    }
}

fn members(pool: &VectorPool, hits: Vec<crate::vecpool::Neighbor>) -> Vec<Member> {
    hits.into_iter()
        .map(|n| {
            let (label, v) = pool.get(n.id).expect("neighbour id comes from the pool");
            Member {
                id: n.id,
                label,
                distance: n.distance,
                vector: v.to_vec(),
            }
        })
        .collect()
}

fn query(
    pool: &VectorPool,
    q: &[f32],
    k: usize,
    filter: LabelFilter,
    exclude: Option<u64>,
    search: Search,
) -> Result<Vec<Member>, PoolError> {
    let hits = match search {
        Search::Exact => pool.knn(q, k, filter, exclude)?,
        Search::Approx { ef_search } => pool.knn_approx(q, k, filter, ef_search, exclude)?,
    };
    Ok(members(pool, hits))
}

/// Retrieves the cohort of one sample.
///
/// `aug` is the label-unrestricted KNN result in pool order; `neg` is the KNN result
/// restricted to the opposite label and is only filled in train mode.
pub fn identify(
    pool: &VectorPool,
    target: Option<Target>,
    query_vec: &[f32],
    k: usize,
    mode: CohortMode,
    search: Search,
) -> Result<CohortSet, CohortError> {
    match mode {
        CohortMode::Infer => Ok(CohortSet {
            target_id: target.map(|t| t.id),
            aug: query(pool, query_vec, k, LabelFilter::Any, None, search)?,
            neg: Vec::new(),
        }),
        CohortMode::Train => {
            let t = target.ok_or(CohortError::MissingTarget("id and label"))?;
            let aug = query(pool, query_vec, k, LabelFilter::Any, Some(t.id), search)?;
            let neg = query(pool, query_vec, k, LabelFilter::LabelNot(t.label), Some(t.id), search)?;
            Ok(CohortSet {
                target_id: Some(t.id),
                aug,
                neg,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecpool::VectorRecord;

    fn pool() -> VectorPool {
        let mut p = VectorPool::new(2);
        for (id, label, v) in [(0u64, 0u8, [0.0f32, 0.0]), (1, 0, [1.0, 0.0]), (2, 1, [0.0, 3.0])] {
            p.add(VectorRecord {
                id,
                label,
                vector: v.to_vec(),
            })
            .unwrap();
        }
        p.freeze();
        p
    }

    #[test]
    fn train_mode_three_record_pool() {
        let p = pool();
        let c = identify(&p, Some(Target { id: 0, label: 0 }), &[0.0, 0.0], 2, CohortMode::Train, Search::Exact).unwrap();
        let aug: Vec<u64> = c.aug.iter().map(|m| m.id).collect();
        let neg: Vec<u64> = c.neg.iter().map(|m| m.id).collect();
        assert_eq!(aug, vec![1, 2]);
        assert_eq!(neg, vec![2]);
        assert_eq!(c.aug[1].vector, vec![0.0, 3.0]);
    }

    #[test]
    fn infer_mode_has_no_negatives_and_keeps_self() {
        let p = pool();
        let c = identify(&p, None, &[0.0, 0.0], 2, CohortMode::Infer, Search::Exact).unwrap();
        assert!(c.neg.is_empty());
        assert_eq!(c.aug[0].id, 0);
    }

    #[test]
    fn no_opposite_label_gives_empty_negatives() {
        let mut p = VectorPool::new(1);
        for id in 0..3u64 {
            p.add(VectorRecord {
                id,
                label: 1,
                vector: vec![id as f32],
            })
            .unwrap();
        }
        let c = identify(&p, Some(Target { id: 0, label: 1 }), &[0.0], 5, CohortMode::Train, Search::Exact).unwrap();
        assert!(c.neg.is_empty());
        assert_eq!(c.aug.len(), 2);
    }

    #[test]
    fn train_mode_requires_target() {
        let p = pool();
        assert!(matches!(
            identify(&p, None, &[0.0, 0.0], 2, CohortMode::Train, Search::Exact),
            Err(CohortError::MissingTarget(_))
        ));
    }

    #[test]
    fn dim_mismatch_is_error() {
        let p = pool();
        assert!(matches!(
            identify(&p, None, &[0.0], 2, CohortMode::Infer, Search::Exact),
            Err(CohortError::Pool(PoolError::Dim { .. }))
        ));
    }
}
