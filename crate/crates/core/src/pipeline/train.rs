//! Training loops for both phases, cohort caching and evaluation.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{LogRow, MetricsLog};
use super::model::{augmented_loss, burnin_loss, Architecture};
use super::split::{split, Split};
use super::{roles, PipelineError, TrainConfig};
use crate::augment::CohortBatch;
use crate::autodiff::{stable_sigmoid, Adam, AdamConfig, Gradients, ParamId, ParamStore, Tape, Tensor};
use crate::cohort::{identify, CohortMode, CohortSet, Search, Target};
use crate::datagen::{sub_seed, BehaviorSequence};
use crate::metrics::{self, EvalResult, Provenance};
use crate::objectives::LossReport;
use crate::vecpool::{HnswParams, VectorPool, VectorRecord};

const EVAL_CHUNK: usize = 512;

/// Result of the burn-in phase: trained auxiliary parameters and the frozen pool.
#[derive(Clone, Debug)]
pub struct BurnIn {
    pub store: ParamStore<f32>,
    pub arch: Architecture,
    pub pool: VectorPool,
    pub log: MetricsLog,
    pub best_epoch: usize,
}

/// Cached cohorts of every split. `train_vectors[j]` is the burn-in vector of
/// `split.train[j]`.
#[derive(Clone, Debug)]
pub struct Cohorts {
    pub train: Vec<CohortSet>,
    pub val: Vec<CohortSet>,
    pub test: Vec<CohortSet>,
    pub train_vectors: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub store: ParamStore<f32>,
    pub arch: Architecture,
    pub log: MetricsLog,
    pub best_epoch: usize,
    /// Mean training losses of the best epoch.
    pub best_report: LossReport,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub split: Split,
    pub burnin: Option<BurnIn>,
    pub cohorts: Option<Cohorts>,
    pub trained: Trained,
    pub val: Option<EvalResult>,
    pub test: Option<EvalResult>,
}

struct ValStats {
    auc: Option<f64>,
    r_at_p90: Option<f64>,
    loss: f64,
}

impl ValStats {
    /// Early-stopping score: AUC, or negated loss when AUC is undefined.
    fn score(&self) -> f64 {
        self.auc.unwrap_or(-self.loss)
    }
}

struct FitOutcome {
    best_epoch: usize,
    best_report: LossReport,
}

/// Shared epoch loop: shuffled mini-batches, Adam on `trainable`, validation after each
/// epoch, early stopping with patience, and restoration of the best parameters.
#[allow(clippy::too_many_arguments)]
fn fit<S, V>(
    phase: &'static str,
    store: &mut ParamStore<f32>,
    trainable: &[ParamId],
    forbidden: &[ParamId],
    n_train: usize,
    shuffle_seed: u64,
    config: &TrainConfig,
    log: &mut MetricsLog,
    mut step: S,
    mut validate: V,
) -> Result<FitOutcome, PipelineError>
where
    S: FnMut(&ParamStore<f32>, &[usize]) -> Result<(Gradients<f32>, LossReport), PipelineError>,
    V: FnMut(&ParamStore<f32>) -> Result<Option<ValStats>, PipelineError>,
{
    let mut adam = Adam::new(AdamConfig::new(config.lr, config.weights.lambda))?;
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let forbidden: HashSet<ParamId> = forbidden.iter().copied().collect();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut best: Option<(f64, usize, Vec<Tensor<f32>>, LossReport)> = None;
    let mut stale = 0;
    let mut last_report = LossReport::default();
    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_report = LossReport::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (grads, report) = step(store, chunk)?;
            if !report.total.is_finite() {
                return Err(PipelineError::Diverged {
                    phase,
                    epoch,
                    batch: b,
                    detail: format!(
                        "loss total={} main={} sccl={} align={}",
                        report.total, report.main, report.sccl, report.align
                    ),
                });
            }
            if let Some(id) = grads.ids().find(|id| forbidden.contains(id)) {
                return Err(PipelineError::Frozen(format!(
                    "gradient reached frozen parameter {} ({})",
                    id.0,
                    store.get(id).name
                )));
            }
            adam.step(store, &grads, trainable).map_err(|e| match e {
                crate::autodiff::AutodiffError::NonFinite { .. } => PipelineError::Diverged {
                    phase,
                    epoch,
                    batch: b,
                    detail: e.to_string(),
                },
                other => other.into(),
            })?;
            epoch_report.merge(&report);
        }
        epoch_report.decay = config.weights.lambda * store.squared_norm(trainable);
        epoch_report.total += epoch_report.decay;
        epochs_run = epoch;
        last_report = epoch_report;
        log.push(LogRow::train(phase, epoch, epoch_report));
        let Some(val) = validate(store)? else {
            continue;
        };
        log.push(LogRow::val(phase, epoch, val.auc, val.r_at_p90, val.loss));
        let score = val.score();
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, store.snapshot(trainable), epoch_report));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log::info!("{phase}: early stop at epoch {epoch}");
                break;
            }
        }
    }
    Ok(match best {
        Some((score, best_epoch, snapshot, report)) => {
            store.restore(trainable, snapshot);
            log::info!("{phase}: best epoch {best_epoch} (score {score:.5})");
            FitOutcome {
                best_epoch,
                best_report: report,
            }
        }
        None => FitOutcome {
            best_epoch: epochs_run,
            best_report: last_report,
        },
    })
}

fn labels_of(data: &[BehaviorSequence], idx: &[usize]) -> Vec<f32> {
    idx.iter().map(|&i| data[i].label as f32).collect()
}

fn seqs_of<'a>(data: &'a [BehaviorSequence], idx: &[usize]) -> Vec<&'a [u32]> {
    idx.iter().map(|&i| data[i].actions.as_slice()).collect()
}

fn val_stats(logits: &[f64], labels: &[u8]) -> ValStats {
    let loss = logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| l.max(0.0) - l * y as f64 + (-l.abs()).exp().ln_1p())
        .sum::<f64>()
        / logits.len().max(1) as f64;
    ValStats {
        auc: metrics::auc(logits, labels).ok(),
        r_at_p90: metrics::recall_at_precision(logits, labels, metrics::PRECISION_TARGET).ok(),
        loss,
    }
}

/// Auxiliary-model logits.
fn burnin_logits(
    store: &ParamStore<f32>,
    arch: &Architecture,
    data: &[BehaviorSequence],
    idx: &[usize],
) -> Result<Vec<f64>, PipelineError> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = arch.aux_encoder.batch(&seqs_of(data, chunk))?;
        let mut tape = Tape::new();
        let e = arch.aux_encoder.forward(&mut tape, store, &batch)?;
        let l = arch.aux_head.forward(&mut tape, store, e)?;
        out.extend(tape.value(l).data().iter().map(|&v| v as f64));
    }
    Ok(out)
}

/// Burn-in vectors of arbitrary sequences.
pub(super) fn encode_aux(
    store: &ParamStore<f32>,
    arch: &Architecture,
    seqs: &[&[u32]],
) -> Result<Vec<Vec<f32>>, PipelineError> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_CHUNK) {
        out.extend(arch.aux_encoder.encode_batch(store, chunk)?);
    }
    Ok(out)
}

/// Fails when any evaluation id is in the pool.
pub(super) fn check_leakage(pool: &VectorPool, split: &Split) -> Result<(), PipelineError> {
    let leaked: Vec<u64> = split
        .val
        .iter()
        .chain(&split.test)
        .map(|&i| i as u64)
        .filter(|&id| pool.contains(id))
        .collect();
    match leaked.first() {
        Some(&first) => Err(PipelineError::Leakage {
            count: leaked.len(),
            first,
        }),
        None => Ok(()),
    }
}

/// Trains the auxiliary encoder and head with BCE, then stores every training
/// sample's burn-in vector in a frozen pool.
pub fn burnin_train(data: &[BehaviorSequence], split: &Split, config: &TrainConfig) -> Result<BurnIn, PipelineError> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(PipelineError::Config("burn-in needs a non-empty training split".into()));
    }
    let mut store = ParamStore::new();
    let arch = Architecture::new(&mut store, config);
    let aux = arch.aux_params();
    let main = arch.main_params();
    let mut log = MetricsLog::default();
    let val_labels: Vec<u8> = split.val.iter().map(|&i| data[i].label).collect();
    let outcome = fit(
        "burnin",
        &mut store,
        &aux,
        &main,
        split.train.len(),
        sub_seed(config.seed, roles::BURNIN_SHUFFLE, 0),
        config,
        &mut log,
        |store, pos| {
            let idx: Vec<usize> = pos.iter().map(|&p| split.train[p]).collect();
            let batch = arch.aux_encoder.batch(&seqs_of(data, &idx))?;
            let labels = labels_of(data, &idx);
            let mut tape = Tape::new();
            let loss = burnin_loss(&mut tape, store, &arch, &batch, &labels)?;
            let grads = tape.backward(loss)?;
            let main = tape.scalar(loss) as f64;
            Ok((
                grads,
                LossReport {
                    main,
                    total: main,
                    batch_size: idx.len(),
                    ..Default::default()
                },
            ))
        },
        |store| {
            if split.val.is_empty() {
                return Ok(None);
            }
            let logits = burnin_logits(store, &arch, data, &split.val)?;
            Ok(Some(val_stats(&logits, &val_labels)))
        },
    )?;
    let vectors = encode_aux(&store, &arch, &seqs_of(data, &split.train))?;
    let mut pool = VectorPool::new(config.dim);
    for (&i, vector) in split.train.iter().zip(vectors) {
        pool.add(VectorRecord {
            id: i as u64,
            label: data[i].label,
            vector,
        })?;
    }
    if let Search::Approx { .. } = config.search {
        pool.build_index(HnswParams {
            seed: sub_seed(config.seed, roles::HNSW, 0),
            ..config.hnsw
        });
    }
    pool.freeze();
    check_leakage(&pool, split)?;
    Ok(BurnIn {
        store,
        arch,
        pool,
        log,
        best_epoch: outcome.best_epoch,
    })
}

/// Retrieves train-mode cohorts for training samples and infer-mode cohorts for the
/// validation and test samples.
pub fn compute_cohorts(
    burnin: &BurnIn,
    data: &[BehaviorSequence],
    split: &Split,
    config: &TrainConfig,
) -> Result<Cohorts, PipelineError> {
    let pool = &burnin.pool;
    let mut train = Vec::with_capacity(split.train.len());
    let mut train_vectors = Vec::with_capacity(split.train.len());
    for &i in &split.train {
        let (label, v) = pool
            .get(i as u64)
            .ok_or_else(|| PipelineError::Config(format!("training sample {i} missing from the pool")))?;
        let target = Target { id: i as u64, label };
        train.push(identify(pool, Some(target), v, config.k, CohortMode::Train, config.search)?);
        train_vectors.push(v.to_vec());
    }
    let infer = |idx: &[usize]| -> Result<Vec<CohortSet>, PipelineError> {
        let q = encode_aux(&burnin.store, &burnin.arch, &seqs_of(data, idx))?;
        idx.iter()
            .zip(q)
            .map(|(&i, v)| {
                let target = Target {
                    id: i as u64,
                    label: data[i].label,
                };
                Ok(identify(pool, Some(target), &v, config.k, CohortMode::Infer, config.search)?)
            })
            .collect()
    };
    Ok(Cohorts {
        train,
        val: infer(&split.val)?,
        test: infer(&split.test)?,
        train_vectors,
    })
}

/// Augmented-model logits for `idx`, with per-sample cohorts or none.
pub(super) fn augmented_logits(
    store: &ParamStore<f32>,
    arch: &Architecture,
    seqs: &[&[u32]],
    cohorts: Option<&[CohortSet]>,
    aggregate: bool,
) -> Result<Vec<f64>, PipelineError> {
    let d = arch.dim();
    let mut out = Vec::with_capacity(seqs.len());
    for (c, chunk) in seqs.chunks(EVAL_CHUNK).enumerate() {
        let batch = arch.main_encoder.batch(chunk)?;
        let cb = match cohorts {
            Some(sets) => {
                let part: Vec<&CohortSet> = sets[c * EVAL_CHUNK..c * EVAL_CHUNK + chunk.len()].iter().collect();
                CohortBatch::from_sets(&part, d)
            }
            None => CohortBatch::empty(chunk.len(), d),
        };
        let mut tape = Tape::new();
        let h = arch.main_encoder.forward(&mut tape, store, &batch)?;
        let o = arch.augment.forward(&mut tape, store, h, &cb, aggregate)?;
        out.extend(tape.value(o.logits).data().iter().map(|&v| v as f64));
    }
    Ok(out)
}

/// Trains the main encoder and augmentation layers with auxiliary parameters and the
/// pool frozen. With `config.cohort` off no neighbours are used (the base model) and
/// `burnin`/`cohorts` may be absent.
pub fn augmented_train(
    data: &[BehaviorSequence],
    split: &Split,
    burnin: Option<&BurnIn>,
    cohorts: Option<&Cohorts>,
    config: &TrainConfig,
) -> Result<Trained, PipelineError> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(PipelineError::Config("training split is empty".into()));
    }
    let cohorts = if config.cohort {
        let c = cohorts.ok_or_else(|| PipelineError::Config("cohort training needs cached cohorts".into()))?;
        if c.train.len() != split.train.len() || c.val.len() != split.val.len() {
            return Err(PipelineError::Config("cohort cache does not match the split".into()));
        }
        Some(c)
    } else {
        None
    };
    let (mut store, arch) = match burnin {
        Some(b) => {
            check_leakage(&b.pool, split)?;
            (b.store.clone(), b.arch.clone())
        }
        None => {
            let mut s = ParamStore::new();
            let a = Architecture::new(&mut s, config);
            (s, a)
        }
    };
    let aux = arch.aux_params();
    let trainable = arch.main_params();
    let frozen_before = store.fingerprint(&aux);
    let d = arch.dim();
    let mut log = MetricsLog::default();
    let val_labels: Vec<u8> = split.val.iter().map(|&i| data[i].label).collect();
    let val_seqs = seqs_of(data, &split.val);
    let outcome = fit(
        "augmented",
        &mut store,
        &trainable,
        &aux,
        split.train.len(),
        sub_seed(config.seed, roles::MAIN_SHUFFLE, 0),
        config,
        &mut log,
        |store, pos| {
            let idx: Vec<usize> = pos.iter().map(|&p| split.train[p]).collect();
            let batch = arch.main_encoder.batch(&seqs_of(data, &idx))?;
            let labels = labels_of(data, &idx);
            let (cb, e) = match cohorts {
                Some(c) => {
                    let sets: Vec<&CohortSet> = pos.iter().map(|&p| &c.train[p]).collect();
                    let mut flat = Vec::with_capacity(pos.len() * d);
                    for &p in pos {
                        flat.extend_from_slice(&c.train_vectors[p]);
                    }
                    (CohortBatch::from_sets(&sets, d), Some(Tensor::matrix(pos.len(), d, flat)?))
                }
                None => (CohortBatch::empty(pos.len(), d), None),
            };
            let mut tape = Tape::new();
            let (vars, _) = augmented_loss(
                &mut tape,
                store,
                &arch,
                &batch,
                &cb,
                e.as_ref(),
                &labels,
                &config.weights,
                config.aggregate,
            )?;
            let grads = tape.backward(vars.total)?;
            Ok((
                grads,
                LossReport {
                    main: tape.scalar(vars.main) as f64,
                    sccl: tape.scalar(vars.sccl) as f64,
                    align: tape.scalar(vars.align) as f64,
                    decay: 0.0,
                    total: tape.scalar(vars.total) as f64,
                    batch_size: idx.len(),
                },
            ))
        },
        |store| {
            if split.val.is_empty() {
                return Ok(None);
            }
            let sets = cohorts.map(|c| c.val.as_slice());
            let logits = augmented_logits(store, &arch, &val_seqs, sets, config.aggregate)?;
            Ok(Some(val_stats(&logits, &val_labels)))
        },
    )?;
    if store.fingerprint(&aux) != frozen_before {
        return Err(PipelineError::Frozen("auxiliary parameters changed during augmented training".into()));
    }
    Ok(Trained {
        store,
        arch,
        log,
        best_epoch: outcome.best_epoch,
        best_report: outcome.best_report,
    })
}

/// Logits and metrics of the trained model on `idx`.
pub fn evaluate_indices(
    trained: &Trained,
    data: &[BehaviorSequence],
    idx: &[usize],
    cohorts: Option<&[CohortSet]>,
    config: &TrainConfig,
) -> Result<(Vec<f64>, Option<EvalResult>), PipelineError> {
    let cohorts = if config.cohort { cohorts } else { None };
    let logits = augmented_logits(&trained.store, &trained.arch, &seqs_of(data, idx), cohorts, config.aggregate)?;
    let tags: Vec<Provenance> = idx
        .iter()
        .map(|&i| Provenance {
            label: data[i].label,
            camouflaged: data[i].camouflaged,
        })
        .collect();
    let eval = match metrics::evaluate(&logits, &tags) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("metrics unavailable: {e}");
            None
        }
    };
    Ok((logits, eval))
}

/// Probabilities from logits.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&l| stable_sigmoid(l)).collect()
}

/// Full pipeline: split, burn-in and cohorts (when enabled), augmented training, and
/// validation/test evaluation.
pub fn run(data: &[BehaviorSequence], config: &TrainConfig) -> Result<RunResult, PipelineError> {
    config.validate()?;
    let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
    let split = split(&labels, config.split, config.seed)?;
    let (burnin, cohorts) = if config.cohort {
        let b = burnin_train(data, &split, config)?;
        let c = compute_cohorts(&b, data, &split, config)?;
        (Some(b), Some(c))
    } else {
        (None, None)
    };
    let trained = augmented_train(data, &split, burnin.as_ref(), cohorts.as_ref(), config)?;
    let (_, val) = evaluate_indices(&trained, data, &split.val, cohorts.as_ref().map(|c| c.val.as_slice()), config)?;
    let (_, test) = evaluate_indices(&trained, data, &split.test, cohorts.as_ref().map(|c| c.test.as_slice()), config)?;
    Ok(RunResult {
        split,
        burnin,
        cohorts,
        trained,
        val,
        test,
    })
}
