//! Central finite differences against reverse-mode gradients, in f64, for the burn-in
//! loss and every term of the augmented loss, through both encoders.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vecaug::augment::{CohortBatch, NeighborBatch};
use vecaug::autodiff::{Gradients, ParamStore, Tape, Tensor};
use vecaug::encoders::{EncoderKind, SeqBatch};
use vecaug::objectives::{DisKind, LossWeights};
use vecaug::pipeline::{augmented_loss, burnin_loss, Architecture, TrainConfig};

const H: f64 = 1e-6;
const REL: f64 = 1e-4;
/// Absolute floor for entries whose true gradient is ~0.
const ABS: f64 = 1e-8;

#[derive(Clone, Debug)]
struct Instance {
    config: TrainConfig,
    seqs: Vec<Vec<u32>>,
    labels: Vec<f64>,
    aug: Vec<Vec<Vec<f64>>>,
    neg: Vec<Vec<Vec<f64>>>,
    burnin: Vec<Vec<f64>>,
    aggregate: bool,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(2..=8);
    let vocab = rng.random_range(3..=10);
    let encoder = if rng.random_bool(0.5) { EncoderKind::MeanPoolMlp } else { EncoderKind::GatedRecurrent };
    let config = TrainConfig {
        dim,
        vocab_size: vocab,
        mlp_hidden: rng.random_range(2..=8),
        head_depth: rng.random_range(0..=2),
        encoder,
        seed,
        weights: LossWeights {
            alpha: rng.random_range(0.1..2.0),
            beta: rng.random_range(0.1..2.0),
            lambda: 0.0,
            tau: rng.random_range(0.3..2.0),
            dis: if rng.random_bool(0.5) { DisKind::SquaredProb } else { DisKind::Bce },
        },
        ..Default::default()
    };
    let b = rng.random_range(1..=4);
    let vecs = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    };
    let seqs = (0..b)
        .map(|_| {
            let len = rng.random_range(1..=6);
            (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
        })
        .collect();
    let labels = (0..b).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let aug = (0..b).map(|_| { let n = rng.random_range(0..=3); vecs(n, &mut rng) }).collect();
    let neg = (0..b).map(|_| { let n = rng.random_range(0..=3); vecs(n, &mut rng) }).collect();
    let burnin = vecs(b, &mut rng);
    Instance {
        config,
        seqs,
        labels,
        aug,
        neg,
        burnin,
        aggregate: rng.random_bool(0.8),
    }
}

fn neighbors(lists: &[Vec<Vec<f64>>], dim: usize) -> NeighborBatch<f64> {
    let mut offsets = vec![0];
    let mut data = Vec::new();
    for l in lists {
        for v in l {
            data.extend_from_slice(v);
        }
        offsets.push(offsets.last().unwrap() + l.len());
    }
    NeighborBatch {
        vectors: Tensor::new(vec![*offsets.last().unwrap(), dim], data).unwrap(),
        offsets,
    }
}

#[derive(Clone, Copy, Debug)]
enum Term {
    Burnin,
    Main,
    Sccl,
    Align,
    Total,
}

fn loss(inst: &Instance, arch: &Architecture, store: &ParamStore<f64>, term: Term) -> (f64, Gradients<f64>) {
    let batch = SeqBatch::new(&inst.seqs, inst.config.vocab_size, inst.config.max_len).unwrap();
    let mut tape = Tape::<f64>::new();
    let var = match term {
        Term::Burnin => burnin_loss(&mut tape, store, arch, &batch, &inst.labels).unwrap(),
        _ => {
            let d = inst.config.dim;
            let cohorts = CohortBatch {
                aug: neighbors(&inst.aug, d),
                neg: neighbors(&inst.neg, d),
            };
            let e = Tensor::new(vec![inst.burnin.len(), d], inst.burnin.concat()).unwrap();
            let (v, _) = augmented_loss(
                &mut tape,
                store,
                arch,
                &batch,
                &cohorts,
                Some(&e),
                &inst.labels,
                &inst.config.weights,
                inst.aggregate,
            )
            .unwrap();
            match term {
                Term::Main => v.main,
                Term::Sccl => v.sccl,
                Term::Align => v.align,
                _ => v.total,
            }
        }
    };
    let value = tape.scalar(var);
    (value, tape.backward(var).unwrap())
}

/// Compares sampled entries of every trainable parameter; passes when
/// `|a - n| <= REL * max(|a|, |n|) + ABS`.
fn check(inst: &Instance, term: Term, entries_per_param: usize) -> Result<(), String> {
    let mut store = ParamStore::<f64>::new();
    let arch = Architecture::new(&mut store, &inst.config);
    let (_, grads) = loss(inst, &arch, &store, term);
    let ids = match term {
        Term::Burnin => arch.aux_params(),
        _ => arch.main_params(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(inst.config.seed ^ 0xfd);
    for id in ids {
        let n = store.value(id).numel();
        let picks: Vec<usize> = if n <= entries_per_param {
            (0..n).collect()
        } else {
            (0..entries_per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + H;
            let up = loss(inst, &arch, &store, term).0;
            store.value_mut(id).data_mut()[j] = orig - H;
            let down = loss(inst, &arch, &store, term).0;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[j]);
            let tol = REL * analytic.abs().max(numeric.abs()) + ABS;
            if (analytic - numeric).abs() > tol {
                return Err(format!(
                    "{term:?} {} [{j}]: analytic {analytic:e} vs numeric {numeric:e}",
                    store.get(id).name
                ));
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn burnin_loss_gradients(seed in any::<u64>()) {
        let r = check(&instance(seed), Term::Burnin, 6);
        prop_assert!(r.is_ok(), "{:?}", r);
    }

    #[test]
    fn total_loss_gradients(seed in any::<u64>()) {
        let r = check(&instance(seed), Term::Total, 6);
        prop_assert!(r.is_ok(), "{:?}", r);
    }
}

#[test]
fn every_term_both_encoders() {
    for seed in 0..40u64 {
        let mut inst = instance(seed);
        inst.config.encoder = if seed % 2 == 0 { EncoderKind::MeanPoolMlp } else { EncoderKind::GatedRecurrent };
        for term in [Term::Main, Term::Sccl, Term::Align] {
            check(&inst, term, 4).unwrap();
        }
    }
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let inst = instance(3);
    let mut store = ParamStore::<f64>::new();
    let arch = Architecture::new(&mut store, &inst.config);
    let (_, grads) = loss(&inst, &arch, &store, Term::Total);
    assert!(arch.aux_params().iter().all(|id| !grads.contains(*id)));
}
