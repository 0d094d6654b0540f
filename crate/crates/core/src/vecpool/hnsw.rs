//! Hierarchical navigable small-world graph over one label partition.

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scored, VectorPool};
use crate::autodiff::squared_distance;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HnswParams {
    /// Max links per node on upper layers; layer 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 64,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HnswIndex {
    params: HnswParams,
    /// Pool row of each node.
    rows: Vec<u32>,
    /// `links[node][level]`
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    max_level: usize,
}

thread_local! {
    static VISITED: RefCell<(u32, Vec<u32>)> = const { RefCell::new((0, Vec::new())) };
}

/// Epoch-stamped visited set reused across searches on one thread.
fn with_visited<R>(n: usize, f: impl FnOnce(&mut dyn FnMut(u32) -> bool) -> R) -> R {
    VISITED.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (epoch, marks) = &mut *guard;
        if marks.len() < n {
            marks.resize(n, 0);
        }
        *epoch = epoch.wrapping_add(1);
        if *epoch == 0 {
            marks.iter_mut().for_each(|m| *m = 0);
            *epoch = 1;
        }
        let e = *epoch;
        let mut visit = |node: u32| {
            let slot = &mut marks[node as usize];
            if *slot == e {
                false
            } else {
                *slot = e;
                true
            }
        };
        f(&mut visit)
    })
}

#[derive(Clone, Copy, PartialEq, PartialOrd)]
struct Cand {
    dist: f32,
    node: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.dist.total_cmp(&other.dist).then(self.node.cmp(&other.node))
    }
}

impl HnswIndex {
    pub(super) fn build(pool: &VectorPool, rows: Vec<u32>, params: HnswParams) -> Self {
        let mut index = Self {
            params,
            rows: Vec::with_capacity(rows.len()),
            links: Vec::with_capacity(rows.len()),
            entry: None,
            max_level: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let ml = 1.0 / (params.m.max(2) as f64).ln();
        for row in rows {
            let u: f64 = rng.random::<f64>();
            let level = (-(1.0 - u).ln() * ml).floor() as usize;
            index.insert(pool, row, level);
        }
        index
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn max_links(&self, level: usize) -> usize {
        if level == 0 {
            self.params.m * 2
        } else {
            self.params.m
        }
    }

    #[inline]
    fn dist(&self, pool: &VectorPool, q: &[f32], node: u32) -> f32 {
        squared_distance(q, pool.row(self.rows[node as usize]))
    }

    fn insert(&mut self, pool: &VectorPool, row: u32, level: usize) {
        let node = self.rows.len() as u32;
        self.rows.push(row);
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(mut ep) = self.entry else {
            self.entry = Some(node);
            self.max_level = level;
            return;
        };
        let q = pool.row(row).to_vec();
        let mut ep_dist = self.dist(pool, &q, ep);
        for lc in (level + 1..=self.max_level).rev() {
            (ep, ep_dist) = self.greedy(pool, &q, ep, ep_dist, lc);
        }
        let mut entries = vec![Cand { dist: ep_dist, node: ep }];
        for lc in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(pool, &q, &entries, self.params.ef_construction, lc);
            let chosen = self.select(pool, &found, self.params.m);
            self.links[node as usize][lc] = chosen.iter().map(|c| c.node).collect();
            for c in &chosen {
                let nb = c.node as usize;
                self.links[nb][lc].push(node);
                if self.links[nb][lc].len() > self.max_links(lc) {
                    self.shrink(pool, c.node, lc);
                }
            }
            entries = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(node);
        }
    }

    fn shrink(&mut self, pool: &VectorPool, node: u32, level: usize) {
        let base = pool.row(self.rows[node as usize]).to_vec();
        let mut cands: Vec<Cand> = self.links[node as usize][level]
            .iter()
            .map(|&n| Cand {
                dist: self.dist(pool, &base, n),
                node: n,
            })
            .collect();
        cands.sort();
        let kept = self.select(pool, &cands, self.max_links(level));
        self.links[node as usize][level] = kept.iter().map(|c| c.node).collect();
    }

    /// Neighbour-diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every already kept candidate. `sorted` must be ascending.
    fn select(&self, pool: &VectorPool, sorted: &[Cand], m: usize) -> Vec<Cand> {
        let mut kept: Vec<Cand> = Vec::with_capacity(m);
        for &c in sorted {
            if kept.len() >= m {
                break;
            }
            let cv = pool.row(self.rows[c.node as usize]);
            let diverse = kept.iter().all(|k| self.dist(pool, cv, k.node) > c.dist);
            if diverse {
                kept.push(c);
            }
        }
        kept
    }

    fn greedy(&self, pool: &VectorPool, q: &[f32], mut ep: u32, mut ep_dist: f32, level: usize) -> (u32, f32) {
        loop {
            let mut moved = false;
            for &n in &self.links[ep as usize][level] {
                let d = self.dist(pool, q, n);
                if d < ep_dist || (d == ep_dist && n < ep) {
                    ep = n;
                    ep_dist = d;
                    moved = true;
                }
            }
            if !moved {
                return (ep, ep_dist);
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` candidates in ascending order.
    fn search_layer(&self, pool: &VectorPool, q: &[f32], entries: &[Cand], ef: usize, level: usize) -> Vec<Cand> {
        with_visited(self.rows.len(), |visit| {
            let mut frontier: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
            let mut best: BinaryHeap<Cand> = BinaryHeap::new();
            for &e in entries {
                if visit(e.node) {
                    frontier.push(Reverse(e));
                    best.push(e);
                }
            }
            while best.len() > ef {
                best.pop();
            }
            while let Some(Reverse(c)) = frontier.pop() {
                let worst = best.peek().map_or(f32::INFINITY, |w| w.dist);
                if c.dist > worst && best.len() >= ef {
                    break;
                }
                for &n in &self.links[c.node as usize][level] {
                    if !visit(n) {
                        continue;
                    }
                    let d = self.dist(pool, q, n);
                    let worst = best.peek().map_or(f32::INFINITY, |w| w.dist);
                    if best.len() < ef || d < worst {
                        let cand = Cand { dist: d, node: n };
                        frontier.push(Reverse(cand));
                        best.push(cand);
                        if best.len() > ef {
                            best.pop();
                        }
                    }
                }
            }
            best.into_sorted_vec()
        })
    }

    pub(super) fn search(&self, pool: &VectorPool, q: &[f32], k: usize, ef: usize) -> Vec<Scored> {
        let Some(mut ep) = self.entry else {
            return Vec::new();
        };
        let mut ep_dist = self.dist(pool, q, ep);
        for lc in (1..=self.max_level).rev() {
            (ep, ep_dist) = self.greedy(pool, q, ep, ep_dist, lc);
        }
        let found = self.search_layer(pool, q, &[Cand { dist: ep_dist, node: ep }], ef.max(k), 0);
        let mut out: Vec<Scored> = found
            .into_iter()
            .map(|c| {
                let row = self.rows[c.node as usize];
                Scored {
                    dist: c.dist,
                    id: pool.id_of(row),
                    row,
                }
            })
            .collect();
        out.sort();
        out.truncate(k);
        out
    }
}
