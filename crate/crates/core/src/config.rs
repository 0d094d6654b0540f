//! Flat `key=value` experiment configuration covering training and data generation.
//!
//! Every key has one canonical text form; [`ExperimentConfig::KEYS`] lists them with
//! help text, and defaults are rendered from [`ExperimentConfig::default`].

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::cohort::Search;
use crate::datagen::GenConfig;
use crate::pipeline::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("invalid value '{value}' for key '{key}': {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("line {line}: expected key=value, got '{text}'")]
    Syntax { line: usize, text: String },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub gen: GenConfig,
}

pub struct KeySpec {
    pub name: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, help }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.trim().parse::<T>().map_err(|e| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_search(key: &str, value: &str, ef: usize) -> Result<Search, ConfigError> {
    match value.trim() {
        "exact" => Ok(Search::Exact),
        "hnsw" => Ok(Search::Approx { ef_search: ef }),
        other => Err(ConfigError::Value {
            key: key.into(),
            value: other.into(),
            reason: "expected exact | hnsw".into(),
        }),
    }
}

impl ExperimentConfig {
    pub const KEYS: &'static [KeySpec] = &[
        key("seed", "master seed; every random stream is derived from it"),
        key("k", "cohort size K (neighbours per target)"),
        key("dim", "representation and burn-in vector dimension n_d"),
        key("batch_size", "mini-batch size"),
        key("lr", "Adam learning rate"),
        key("alpha", "weight of the contrastive separation loss"),
        key("beta", "weight of the alignment loss"),
        key("lambda", "decoupled weight decay coefficient"),
        key("tau", "contrastive temperature"),
        key("dis", "label/logit distance in the contrastive loss: squared-prob | bce"),
        key("max_epochs", "epoch cap per training phase"),
        key("patience", "early-stopping patience in epochs (validation AUC)"),
        key("encoder", "sequence encoder: mean-pool-mlp | gated-recurrent"),
        key("split_train", "training fraction"),
        key("split_val", "validation fraction"),
        key("split_test", "test fraction"),
        key("mlp_hidden", "hidden width of the mean-pool encoder"),
        key("head_depth", "hidden layers of the output heads"),
        key("max_len", "encoder truncation length (most recent tokens kept)"),
        key("cohort", "use cohorts in the augmented phase (false = base model)"),
        key("aggregate", "attentive aggregation of augmentation neighbours"),
        key("search", "cohort retrieval: exact | hnsw"),
        key("ef_search", "HNSW search beam width"),
        key("hnsw_m", "HNSW links per node"),
        key("ef_construction", "HNSW construction beam width"),
        key("n_users", "generated users"),
        key("pos_rate", "fraction of fraudulent users"),
        key("vocab_size", "number of action types"),
        key("seq_len_min", "shortest generated sequence"),
        key("seq_len_max", "longest generated sequence"),
        key("n_fraud_entities", "fraud entities (rings)"),
        key("accounts_min", "fewest accounts per entity"),
        key("accounts_max", "most accounts per entity"),
        key("camouflage_ratio", "probability a camouflaged account steps from the normal prior"),
        key("camouflaged_fraction", "fraction of fraud accounts that are camouflaged"),
        key("fraud_pool", "size of the token pool shared by entity chains"),
        key("entity_tokens", "pool tokens owned by each entity"),
        key("normal_successors", "successors per state in the normal prior"),
        key("entity_successors", "successors per state in an entity chain"),
        key("user_concentration", "per-user closeness to the normal prior (Gamma shape)"),
        key("entity_mix", "weight of entity-specific successors in an entity chain row"),
    ];

    pub fn get(&self, name: &str) -> Result<String, ConfigError> {
        let t = &self.train;
        let g = &self.gen;
        let w = &t.weights;
        Ok(match name {
            "seed" => t.seed.to_string(),
            "k" => t.k.to_string(),
            "dim" => t.dim.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.lr.to_string(),
            "alpha" => w.alpha.to_string(),
            "beta" => w.beta.to_string(),
            "lambda" => w.lambda.to_string(),
            "tau" => w.tau.to_string(),
            "dis" => w.dis.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "patience" => t.patience.to_string(),
            "encoder" => t.encoder.to_string(),
            "split_train" => t.split[0].to_string(),
            "split_val" => t.split[1].to_string(),
            "split_test" => t.split[2].to_string(),
            "mlp_hidden" => t.mlp_hidden.to_string(),
            "head_depth" => t.head_depth.to_string(),
            "max_len" => t.max_len.to_string(),
            "cohort" => t.cohort.to_string(),
            "aggregate" => t.aggregate.to_string(),
            "search" => match t.search {
                Search::Exact => "exact".into(),
                Search::Approx { .. } => "hnsw".into(),
            },
            "ef_search" => t.hnsw.ef_search.to_string(),
            "hnsw_m" => t.hnsw.m.to_string(),
            "ef_construction" => t.hnsw.ef_construction.to_string(),
            "n_users" => g.n_users.to_string(),
            "pos_rate" => g.pos_rate.to_string(),
            "vocab_size" => t.vocab_size.to_string(),
            "seq_len_min" => g.min_len.to_string(),
            "seq_len_max" => g.max_len.to_string(),
            "n_fraud_entities" => g.n_fraud_entities.to_string(),
            "accounts_min" => g.min_accounts.to_string(),
            "accounts_max" => g.max_accounts.to_string(),
            "camouflage_ratio" => g.camouflage_ratio.to_string(),
            "camouflaged_fraction" => g.camouflaged_fraction.to_string(),
            "fraud_pool" => g.fraud_pool.to_string(),
            "entity_tokens" => g.entity_tokens.to_string(),
            "normal_successors" => g.normal_successors.to_string(),
            "entity_successors" => g.entity_successors.to_string(),
            "user_concentration" => g.user_concentration.to_string(),
            "entity_mix" => g.entity_mix.to_string(),
            other => return Err(ConfigError::UnknownKey(other.into())),
        })
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let g = &mut self.gen;
        match name {
            "seed" => {
                t.seed = parse(name, value)?;
                g.seed = t.seed;
            }
            "k" => t.k = parse(name, value)?,
            "dim" => t.dim = parse(name, value)?,
            "batch_size" => t.batch_size = parse(name, value)?,
            "lr" => t.lr = parse(name, value)?,
            "alpha" => t.weights.alpha = parse(name, value)?,
            "beta" => t.weights.beta = parse(name, value)?,
            "lambda" => t.weights.lambda = parse(name, value)?,
            "tau" => t.weights.tau = parse(name, value)?,
            "dis" => t.weights.dis = parse(name, value)?,
            "max_epochs" => t.max_epochs = parse(name, value)?,
            "patience" => t.patience = parse(name, value)?,
            "encoder" => t.encoder = parse(name, value)?,
            "split_train" => t.split[0] = parse(name, value)?,
            "split_val" => t.split[1] = parse(name, value)?,
            "split_test" => t.split[2] = parse(name, value)?,
            "mlp_hidden" => t.mlp_hidden = parse(name, value)?,
            "head_depth" => t.head_depth = parse(name, value)?,
            "max_len" => t.max_len = parse(name, value)?,
            "cohort" => t.cohort = parse(name, value)?,
            "aggregate" => t.aggregate = parse(name, value)?,
            "search" => t.search = parse_search(name, value, t.hnsw.ef_search)?,
            "ef_search" => {
                t.hnsw.ef_search = parse(name, value)?;
                if let Search::Approx { ef_search } = &mut t.search {
                    *ef_search = t.hnsw.ef_search;
                }
            }
            "hnsw_m" => t.hnsw.m = parse(name, value)?,
            "ef_construction" => t.hnsw.ef_construction = parse(name, value)?,
            "n_users" => g.n_users = parse(name, value)?,
            "pos_rate" => g.pos_rate = parse(name, value)?,
            "vocab_size" => {
                t.vocab_size = parse(name, value)?;
                g.vocab_size = t.vocab_size;
            }
            "seq_len_min" => g.min_len = parse(name, value)?,
            "seq_len_max" => g.max_len = parse(name, value)?,
            "n_fraud_entities" => g.n_fraud_entities = parse(name, value)?,
            "accounts_min" => g.min_accounts = parse(name, value)?,
            "accounts_max" => g.max_accounts = parse(name, value)?,
            "camouflage_ratio" => g.camouflage_ratio = parse(name, value)?,
            "camouflaged_fraction" => g.camouflaged_fraction = parse(name, value)?,
            "fraud_pool" => g.fraud_pool = parse(name, value)?,
            "entity_tokens" => g.entity_tokens = parse(name, value)?,
            "normal_successors" => g.normal_successors = parse(name, value)?,
            "entity_successors" => g.entity_successors = parse(name, value)?,
            "user_concentration" => g.user_concentration = parse(name, value)?,
            "entity_mix" => g.entity_mix = parse(name, value)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            out.push_str(k.name);
            out.push('=');
            out.push_str(&self.get(k.name).expect("listed key"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn defaults_match_protocol() {
        let c = ExperimentConfig::default();
        for (k, v) in [
            ("k", "5"),
            ("dim", "64"),
            ("batch_size", "128"),
            ("lr", "0.0001"),
            ("alpha", "0.001"),
            ("beta", "0.00001"),
            ("tau", "1"),
            ("lambda", "0.00001"),
            ("patience", "20"),
            ("split_train", "0.6"),
            ("pos_rate", "0.01"),
            ("vocab_size", "653"),
        ] {
            let got: f64 = c.get(k).unwrap().parse().unwrap();
            assert_eq!(got, v.parse::<f64>().unwrap(), "{k}");
        }
    }

    #[test]
    fn unknown_key_rejected() {
        assert_eq!(
            ExperimentConfig::from_text("bogus=1"),
            Err(ConfigError::UnknownKey("bogus".into()))
        );
    }

    #[test]
    fn bad_value_and_syntax() {
        assert!(matches!(ExperimentConfig::from_text("k=x"), Err(ConfigError::Value { .. })));
        assert!(matches!(ExperimentConfig::from_text("# c\nk"), Err(ConfigError::Syntax { line: 2, .. })));
    }

    #[test]
    fn seed_and_vocab_are_shared() {
        let c = ExperimentConfig::from_text("seed=9\nvocab_size=40\nsearch=hnsw\nef_search=17").unwrap();
        assert_eq!((c.train.seed, c.gen.seed), (9, 9));
        assert_eq!((c.train.vocab_size, c.gen.vocab_size), (40, 40));
        assert_eq!(c.train.search, Search::Approx { ef_search: 17 });
    }
}
