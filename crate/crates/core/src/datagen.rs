//! Synthetic behaviour sequences with entity-controlled fraud rings and camouflaged
//! fraudsters.
//!
//! Normal users follow per-user first-order Markov chains that perturb a shared sparse
//! prior. Every fraud entity owns one chain over its own subset of a shared fraud
//! token pool; its accounts walk that chain. A camouflaged account takes each step
//! from the normal prior with probability `camouflage_ratio` and from its entity chain
//! otherwise. All randomness is derived from `(seed, role, index)` sub-seeds, so any
//! user can be generated independently.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample_weighted;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub n_users: usize,
    pub pos_rate: f64,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_fraud_entities: usize,
    pub min_accounts: usize,
    pub max_accounts: usize,
    pub camouflage_ratio: f64,
    pub camouflaged_fraction: f64,
    /// Size of the token pool entity chains draw from.
    pub fraud_pool: usize,
    /// Tokens of the pool owned by each entity.
    pub entity_tokens: usize,
    /// Successors per state in the normal prior.
    pub normal_successors: usize,
    /// Successors per state in an entity chain.
    pub entity_successors: usize,
    /// Gamma shape of the per-user perturbation of the prior; larger is closer to it.
    pub user_concentration: f64,
    /// Weight of the entity-specific successors in an entity row; the rest is the prior row.
    pub entity_mix: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_users: 10_000,
            pos_rate: 0.01,
            vocab_size: 653,
            min_len: 50,
            max_len: 300,
            n_fraud_entities: 10,
            min_accounts: 5,
            max_accounts: 15,
            camouflage_ratio: 0.7,
            camouflaged_fraction: 0.5,
            fraud_pool: 120,
            entity_tokens: 24,
            normal_successors: 16,
            entity_successors: 6,
            user_concentration: 2.0,
            entity_mix: 0.4,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn positives(&self) -> usize {
        (self.n_users as f64 * self.pos_rate).round() as usize
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.n_users == 0 {
            return bad("n_users must be at least 1".into());
        }
        if !(self.pos_rate > 0.0 && self.pos_rate < 1.0) {
            return bad(format!("pos_rate must lie in (0, 1), got {}", self.pos_rate));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("invalid length range {}..={}", self.min_len, self.max_len));
        }
        if !(0.0..=1.0).contains(&self.camouflage_ratio) {
            return bad(format!("camouflage_ratio must lie in [0, 1], got {}", self.camouflage_ratio));
        }
        if !(0.0..=1.0).contains(&self.camouflaged_fraction) {
            return bad(format!("camouflaged_fraction must lie in [0, 1], got {}", self.camouflaged_fraction));
        }
        if self.min_accounts == 0 || self.min_accounts > self.max_accounts {
            return bad(format!("invalid accounts range {}..={}", self.min_accounts, self.max_accounts));
        }
        let pos = self.positives();
        if self.n_fraud_entities * self.max_accounts < pos {
            return bad(format!(
                "{} entities x {} accounts cannot hold {pos} positives",
                self.n_fraud_entities, self.max_accounts
            ));
        }
        if pos > self.n_users {
            return bad("more positives than users".into());
        }
        if self.fraud_pool == 0 || self.fraud_pool > self.vocab_size {
            return bad(format!("fraud_pool must lie in 1..={}", self.vocab_size));
        }
        if self.entity_tokens == 0 || self.entity_tokens > self.fraud_pool {
            return bad(format!("entity_tokens must lie in 1..={}", self.fraud_pool));
        }
        if self.normal_successors == 0 || self.entity_successors == 0 {
            return bad("successor counts must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.entity_mix) {
            return bad(format!("entity_mix must lie in [0, 1], got {}", self.entity_mix));
        }
        if !(self.user_concentration > 0.0) {
            return bad("user_concentration must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSequence {
    pub user_id: String,
    pub label: u8,
    pub actions: Vec<u32>,
    #[serde(default)]
    pub entity_id: Option<String>,
    #[serde(default)]
    pub camouflaged: bool,
}

/// splitmix64 finaliser over a combined key.
pub fn sub_seed(master: u64, role: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(role.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const ROLE_PRIOR: u64 = 1;
const ROLE_ENTITY: u64 = 2;
const ROLE_ASSIGN: u64 = 3;
const ROLE_USER: u64 = 4;
const ROLE_USER_ROW: u64 = 5;

/// Sparse transition row: successor tokens and their probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub tokens: Vec<u32>,
    pub probs: Vec<f64>,
}

impl Row {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (t, p) in self.tokens.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return *t;
            }
        }
        *self.tokens.last().unwrap()
    }

    fn from_weights(tokens: Vec<u32>, weights: Vec<f64>) -> Self {
        let z: f64 = weights.iter().sum();
        Self {
            tokens,
            probs: weights.into_iter().map(|w| w / z).collect(),
        }
    }

    /// `weight * self + (1 - weight) * other`, merged over the union of successors.
    fn mix(self, other: &Row, weight: f64) -> Self {
        if weight >= 1.0 {
            return self;
        }
        let mut merged: std::collections::BTreeMap<u32, f64> = std::collections::BTreeMap::new();
        for (t, p) in self.tokens.iter().zip(&self.probs) {
            *merged.entry(*t).or_default() += weight * p;
        }
        for (t, p) in other.tokens.iter().zip(&other.probs) {
            *merged.entry(*t).or_default() += (1.0 - weight) * p;
        }
        merged.retain(|_, p| *p > 0.0);
        Self {
            tokens: merged.keys().copied().collect(),
            probs: merged.values().copied().collect(),
        }
    }

    pub fn prob(&self, token: u32) -> f64 {
        self.tokens.iter().position(|&t| t == token).map_or(0.0, |i| self.probs[i])
    }
}

fn gamma_weights<R: Rng + ?Sized>(rng: &mut R, n: usize, shape: f64) -> Vec<f64> {
    let g = Gamma::new(shape, 1.0).expect("positive shape");
    (0..n).map(|_| g.sample(rng).max(1e-12)).collect()
}

fn weighted_distinct<R: Rng + ?Sized>(rng: &mut R, weights: &[f64], amount: usize) -> Vec<usize> {
    let mut idx = sample_weighted(rng, weights.len(), |i| weights[i], amount.min(weights.len()))
        .expect("finite non-negative weights")
        .into_vec();
    idx.sort_unstable();
    idx
}

/// The generating chains of a dataset.
#[derive(Clone, Debug)]
pub struct Chains {
    config: GenConfig,
    popularity: Vec<f64>,
    prior: Vec<Row>,
    entity_rows: Vec<Vec<Row>>,
    entity_start: Vec<Vec<u32>>,
}

impl Chains {
    pub fn new(config: &GenConfig) -> Result<Self, DataError> {
        config.validate()?;
        let v = config.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, ROLE_PRIOR, 0));
        // Zipf popularity over a random permutation of the vocabulary.
        let mut order: Vec<usize> = (0..v).collect();
        order.shuffle(&mut rng);
        let mut popularity = vec![0.0; v];
        for (rank, &tok) in order.iter().enumerate() {
            popularity[tok] = 1.0 / (rank as f64 + 1.0);
        }
        let prior: Vec<Row> = (0..v)
            .map(|_| {
                let succ = weighted_distinct(&mut rng, &popularity, config.normal_successors);
                let w = gamma_weights(&mut rng, succ.len(), 1.0);
                Row::from_weights(succ.into_iter().map(|t| t as u32).collect(), w)
            })
            .collect();
        // The fraud pool is drawn by popularity, so entity tokens are ordinary tokens
        // that fraud accounts over-use rather than tokens unseen in normal traffic.
        let pool: Vec<u32> = weighted_distinct(&mut rng, &popularity, config.fraud_pool)
            .into_iter()
            .map(|t| t as u32)
            .collect();
        let mut entity_rows = Vec::with_capacity(config.n_fraud_entities);
        let mut entity_start = Vec::with_capacity(config.n_fraud_entities);
        for e in 0..config.n_fraud_entities {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, ROLE_ENTITY, e as u64));
            let mut own: Vec<u32> = pool.choose_multiple(&mut rng, config.entity_tokens).copied().collect();
            own.sort_unstable();
            let rows = (0..v)
                .map(|state| {
                    let mut succ: Vec<u32> = own
                        .choose_multiple(&mut rng, config.entity_successors.min(own.len()))
                        .copied()
                        .collect();
                    succ.sort_unstable();
                    let w = gamma_weights(&mut rng, succ.len(), 1.0);
                    Row::from_weights(succ, w).mix(&prior[state], config.entity_mix)
                })
                .collect();
            entity_rows.push(rows);
            entity_start.push(own);
        }
        Ok(Self {
            config: config.clone(),
            popularity,
            prior,
            entity_rows,
            entity_start,
        })
    }

    pub fn prior_row(&self, state: u32) -> &Row {
        &self.prior[state as usize]
    }

    pub fn entity_row(&self, entity: usize, state: u32) -> &Row {
        &self.entity_rows[entity][state as usize]
    }

    /// Per-user perturbation of the prior row of `state`.
    pub fn user_row(&self, user_seed: u64, state: u32) -> Row {
        let base = self.prior_row(state);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(user_seed, ROLE_USER_ROW, state as u64));
        let noise = gamma_weights(&mut rng, base.tokens.len(), self.config.user_concentration);
        let w = base.probs.iter().zip(noise).map(|(p, n)| p * n).collect();
        Row::from_weights(base.tokens.clone(), w)
    }
}

/// Role of one generated user.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UserKind {
    Normal,
    Ring { entity: usize },
    Camouflaged { entity: usize },
}

/// Assigns roles to all users: which are positive, their entity, and camouflage.
pub fn assign_roles(config: &GenConfig) -> Result<Vec<UserKind>, DataError> {
    config.validate()?;
    let n = config.n_users;
    let pos = config.positives();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, ROLE_ASSIGN, 0));
    // Accounts per entity: random sizes, then top up round-robin to reach `pos`.
    let mut sizes = Vec::with_capacity(config.n_fraud_entities);
    let mut left = pos;
    for _ in 0..config.n_fraud_entities {
        let s = rng.random_range(config.min_accounts..=config.max_accounts).min(left);
        sizes.push(s);
        left -= s;
    }
    let mut e = 0;
    while left > 0 {
        if sizes[e] < config.max_accounts {
            sizes[e] += 1;
            left -= 1;
        }
        e = (e + 1) % sizes.len();
    }
    let mut fraud_entities: Vec<usize> = sizes.iter().enumerate().flat_map(|(e, &s)| std::iter::repeat_n(e, s)).collect();
    let n_camo = (config.camouflaged_fraction * pos as f64).round() as usize;
    let mut camo = vec![false; pos];
    camo[..n_camo].iter_mut().for_each(|c| *c = true);
    camo.shuffle(&mut rng);
    fraud_entities.shuffle(&mut rng);
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(&mut rng);
    let mut kinds = vec![UserKind::Normal; n];
    for (j, &slot) in slots[..pos].iter().enumerate() {
        let entity = fraud_entities[j];
        kinds[slot] = if camo[j] {
            UserKind::Camouflaged { entity }
        } else {
            UserKind::Ring { entity }
        };
    }
    Ok(kinds)
}

/// Generates the sequence of user `index` with the given role.
pub fn generate_user(chains: &Chains, index: usize, kind: UserKind) -> BehaviorSequence {
    let cfg = &chains.config;
    let user_seed = sub_seed(cfg.seed, ROLE_USER, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(user_seed);
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let mut actions = Vec::with_capacity(len);
    let mut cache: HashMap<u32, Row> = HashMap::new();
    let (label, entity_id, camouflaged) = match kind {
        UserKind::Normal => (0, None, false),
        UserKind::Ring { entity } => (1, Some(entity), false),
        UserKind::Camouflaged { entity } => (1, Some(entity), true),
    };
    let first = match kind {
        UserKind::Ring { entity } => *chains.entity_start[entity].choose(&mut rng).unwrap(),
        _ => {
            let w = &chains.popularity;
            weighted_distinct(&mut rng, w, 1)[0] as u32
        }
    };
    actions.push(first);
    let mut state = first;
    while actions.len() < len {
        state = match kind {
            UserKind::Normal => cache
                .entry(state)
                .or_insert_with(|| chains.user_row(user_seed, state))
                .sample(&mut rng),
            UserKind::Ring { entity } => chains.entity_row(entity, state).sample(&mut rng),
            UserKind::Camouflaged { entity } => {
                // Prior steps use the account's own perturbed prior, exactly as a
                // normal user would.
                if rng.random_bool(cfg.camouflage_ratio) {
                    cache
                        .entry(state)
                        .or_insert_with(|| chains.user_row(user_seed, state))
                        .sample(&mut rng)
                } else {
                    chains.entity_row(entity, state).sample(&mut rng)
                }
            }
        };
        actions.push(state);
    }
    BehaviorSequence {
        user_id: format!("u{index:07}"),
        label,
        actions,
        entity_id: entity_id.map(|e| format!("e{e:03}")),
        camouflaged,
    }
}

/// Generates the whole dataset, in user-index order.
pub fn generate(config: &GenConfig) -> Result<Vec<BehaviorSequence>, DataError> {
    let chains = Chains::new(config)?;
    let roles = assign_roles(config)?;
    Ok(roles.into_iter().enumerate().map(|(i, k)| generate_user(&chains, i, k)).collect())
}

pub fn write_jsonl(path: impl AsRef<Path>, data: &[BehaviorSequence]) -> Result<(), DataError> {
    let path = path.as_ref();
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    for seq in data {
        serde_json::to_writer(&mut w, seq).expect("plain data serialises");
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<BehaviorSequence>, DataError> {
    let path = path.as_ref();
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: BehaviorSequence = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if seq.label > 1 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("label must be 0 or 1, got {}", seq.label),
            });
        }
        out.push(seq);
    }
    Ok(out)
}

/// Counts printed after generation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Summary {
    pub users: usize,
    pub positives: usize,
    pub negatives: usize,
    pub ring: usize,
    pub camouflaged: usize,
    pub entities: usize,
}

pub fn summarize(data: &[BehaviorSequence]) -> Summary {
    let positives = data.iter().filter(|s| s.label == 1).count();
    let camouflaged = data.iter().filter(|s| s.camouflaged).count();
    let mut entities: Vec<&str> = data.iter().filter_map(|s| s.entity_id.as_deref()).collect();
    entities.sort_unstable();
    entities.dedup();
    Summary {
        users: data.len(),
        positives,
        negatives: data.len() - positives,
        ring: positives - camouflaged,
        camouflaged,
        entities: entities.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            n_users: 1000,
            ..Default::default()
        }
    }

    #[test]
    fn exact_positive_count() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.len(), 1000);
        assert_eq!(d.iter().filter(|s| s.label == 1).count(), 10);
    }

    #[test]
    fn camouflaged_count_and_tags() {
        let d = generate(&small()).unwrap();
        let s = summarize(&d);
        assert_eq!(s.camouflaged, 5);
        assert!(d.iter().all(|x| (x.label == 1) == x.entity_id.is_some()));
    }

    #[test]
    fn sequences_respect_bounds() {
        let cfg = small();
        for s in generate(&cfg).unwrap() {
            assert!((cfg.min_len..=cfg.max_len).contains(&s.actions.len()));
            assert!(s.actions.iter().all(|&t| (t as usize) < cfg.vocab_size));
        }
    }

    #[test]
    fn infeasible_config_rejected() {
        let cfg = GenConfig {
            n_users: 1000,
            pos_rate: 0.2,
            n_fraud_entities: 2,
            max_accounts: 10,
            ..Default::default()
        };
        assert!(matches!(generate(&cfg), Err(DataError::Config(_))));
    }

    #[test]
    fn users_are_order_independent() {
        let cfg = small();
        let chains = Chains::new(&cfg).unwrap();
        let roles = assign_roles(&cfg).unwrap();
        let all = generate(&cfg).unwrap();
        for i in [999, 3, 500] {
            assert_eq!(generate_user(&chains, i, roles[i]), all[i]);
        }
    }

    #[test]
    fn jsonl_round_trip_and_key_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let d = generate(&GenConfig {
            n_users: 50,
            pos_rate: 0.1,
            ..Default::default()
        })
        .unwrap();
        write_jsonl(&p, &d).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), d);
        let text = std::fs::read_to_string(&p).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("{\"user_id\":"));
        assert!(first.contains("\"entity_id\":") && first.ends_with(&format!("\"camouflaged\":{}}}", d[0].camouflaged)));
    }

    #[test]
    fn loader_ignores_missing_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "{\"user_id\":\"a\",\"label\":1,\"actions\":[1,2]}\n").unwrap();
        let d = read_jsonl(&p).unwrap();
        assert_eq!(d[0].entity_id, None);
        assert!(!d[0].camouflaged);
    }
}
