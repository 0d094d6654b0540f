//! End-to-end pipeline behaviour on small synthetic sets: determinism, freezing,
//! leakage, prediction consistency and the no-cohort fallback.

use vecaug::datagen::{generate, BehaviorSequence, GenConfig};
use vecaug::encoders::{predict_logit, EncoderKind};
use vecaug::metrics::auc;
use vecaug::pipeline::{
    augmented_train, burnin_train, compute_cohorts, run, split, Checkpoint, PipelineError, Split, TrainConfig,
};
use vecaug::config::ExperimentConfig;

fn gen() -> GenConfig {
    GenConfig {
        n_users: 400,
        pos_rate: 0.1,
        vocab_size: 40,
        min_len: 8,
        max_len: 20,
        fraud_pool: 20,
        entity_tokens: 6,
        n_fraud_entities: 4,
        min_accounts: 8,
        max_accounts: 14,
        seed: 5,
        ..Default::default()
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        dim: 8,
        mlp_hidden: 8,
        vocab_size: 40,
        batch_size: 32,
        lr: 3e-3,
        max_epochs: 4,
        patience: 2,
        k: 3,
        seed: 9,
        ..Default::default()
    }
}

fn data() -> Vec<BehaviorSequence> {
    generate(&gen()).unwrap()
}

fn the_split(d: &[BehaviorSequence], c: &TrainConfig) -> Split {
    let labels: Vec<u8> = d.iter().map(|s| s.label).collect();
    split(&labels, c.split, c.seed).unwrap()
}

#[test]
fn runs_are_deterministic() {
    let d = data();
    let c = train_config();
    let a = run(&d, &c).unwrap();
    let b = run(&d, &c).unwrap();
    assert_eq!(a.split, b.split);
    assert_eq!(a.test, b.test);
    assert_eq!(a.trained.log, b.trained.log);
    let ids = a.trained.arch.main_params();
    assert_eq!(a.trained.store.fingerprint(&ids), b.trained.store.fingerprint(&ids));
    assert_eq!(a.burnin.unwrap().pool.records().count(), b.burnin.unwrap().pool.records().count());
}

#[test]
fn auxiliary_parameters_stay_frozen() {
    let d = data();
    let c = train_config();
    let sp = the_split(&d, &c);
    let b = burnin_train(&d, &sp, &c).unwrap();
    let co = compute_cohorts(&b, &d, &sp, &c).unwrap();
    let t = augmented_train(&d, &sp, Some(&b), Some(&co), &c).unwrap();
    let aux = b.arch.aux_params();
    for id in aux {
        assert_eq!(b.store.value(id), t.store.value(id), "{}", b.store.get(id).name);
    }
    let main = b.arch.main_params();
    assert_ne!(b.store.fingerprint(&main), t.store.fingerprint(&main));
}

#[test]
fn pool_holds_exactly_the_training_split() {
    let d = data();
    let c = train_config();
    let sp = the_split(&d, &c);
    let b = burnin_train(&d, &sp, &c).unwrap();
    let mut ids: Vec<u64> = b.pool.records().map(|(id, _, _)| id).collect();
    ids.sort_unstable();
    let want: Vec<u64> = sp.train.iter().map(|&i| i as u64).collect();
    assert_eq!(ids, want);
    assert!(b.pool.is_frozen());
    for (id, label, _) in b.pool.records() {
        assert_eq!(label, d[id as usize].label);
    }
}

#[test]
fn leaked_evaluation_ids_are_rejected() {
    let d = data();
    let c = train_config();
    let mut sp = the_split(&d, &c);
    // A test sample that also sits in the training split ends up in the pool.
    sp.train.push(sp.test[0]);
    match burnin_train(&d, &sp, &c) {
        Err(PipelineError::Leakage { count, first }) => {
            assert_eq!(count, 1);
            assert_eq!(first, sp.test[0] as u64);
        }
        other => panic!("expected leakage error, got {other:?}"),
    }
    // The augmented phase re-checks the pool it is handed.
    let clean = the_split(&d, &c);
    let b = burnin_train(&d, &clean, &c).unwrap();
    let mut leaky = clean.clone();
    leaky.val.push(clean.train[0]);
    let no_cohort = TrainConfig { cohort: false, ..c };
    assert!(matches!(
        augmented_train(&d, &leaky, Some(&b), None, &no_cohort),
        Err(PipelineError::Leakage { count: 1, .. })
    ));
}

fn checkpoint(cohort: bool) -> (Checkpoint, Vec<BehaviorSequence>) {
    let d = data();
    let c = TrainConfig {
        cohort,
        ..train_config()
    };
    let r = run(&d, &c).unwrap();
    let ck = Checkpoint {
        config: ExperimentConfig {
            train: c,
            gen: gen(),
        },
        store: r.trained.store,
        arch: r.trained.arch,
        pool: r.burnin.map(|b| b.pool),
        has_main: true,
        log: r.trained.log,
    };
    (ck, d)
}

#[test]
fn batch_prediction_equals_one_at_a_time() {
    let (ck, d) = checkpoint(true);
    let seqs: Vec<&[u32]> = d.iter().take(50).map(|s| s.actions.as_slice()).collect();
    let batch = ck.predict(&seqs).unwrap();
    for (s, p) in seqs.iter().zip(&batch) {
        let single = ck.predict(&[*s]).unwrap()[0];
        assert!((single - p).abs() < 1e-6, "{single} vs {p}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (ck, d) = checkpoint(true);
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    let seqs: Vec<&[u32]> = d.iter().take(40).map(|s| s.actions.as_slice()).collect();
    assert_eq!(ck.predict(&seqs).unwrap(), back.predict(&seqs).unwrap());
}

#[test]
fn no_cohort_model_ignores_the_pool() {
    let (ck, d) = checkpoint(false);
    assert!(ck.pool.is_none());
    let seqs: Vec<&[u32]> = d.iter().take(20).map(|s| s.actions.as_slice()).collect();
    let p = ck.predict(&seqs).unwrap();
    assert!(p.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
    assert!(ck.cohorts(&seqs).unwrap().iter().all(|c| c.aug.is_empty() && c.neg.is_empty()));
}

#[test]
fn base_variant_matches_pipeline_without_cohorts() {
    let d = data();
    let c = TrainConfig {
        cohort: false,
        ..train_config()
    };
    let direct = run(&d, &c).unwrap();
    let zeroed = TrainConfig {
        weights: vecaug::objectives::LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..c.weights
        },
        ..c.clone()
    };
    assert_eq!(run(&d, &zeroed).unwrap().test, direct.test);
}

#[test]
fn separable_toy_burn_in_reaches_high_auc() {
    // Positives draw from tokens 0..5, negatives from 5..10.
    let d: Vec<BehaviorSequence> = (0..300)
        .map(|i| {
            let label = u8::from(i % 5 == 0);
            let base = if label == 1 { 0 } else { 5 };
            BehaviorSequence {
                user_id: format!("t{i}"),
                label,
                actions: (0..12).map(|j| base + ((i * 7 + j * 3) % 5) as u32).collect(),
                entity_id: None,
                camouflaged: false,
            }
        })
        .collect();
    for encoder in [EncoderKind::MeanPoolMlp, EncoderKind::GatedRecurrent] {
        let c = TrainConfig {
            vocab_size: 10,
            encoder,
            lr: 1e-2,
            max_epochs: 15,
            patience: 15,
            ..train_config()
        };
        let sp = the_split(&d, &c);
        let b = burnin_train(&d, &sp, &c).unwrap();
        let (scores, labels): (Vec<f64>, Vec<u8>) = sp
            .val
            .iter()
            .map(|&i| {
                let v = b.arch.aux_encoder.encode(&b.store, &d[i].actions).unwrap();
                (predict_logit(&b.arch.aux_head, &b.store, &v).unwrap() as f64, d[i].label)
            })
            .unzip();
        let a = auc(&scores, &labels).unwrap();
        assert!(a >= 0.99, "{encoder}: burn-in val AUC {a}");
    }
}
