//! Ablation and hyperparameter-sweep harnesses over seeds.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use super::{mean_std, EvalResult};
use crate::datagen::BehaviorSequence;
use crate::objectives::LossReport;
use crate::pipeline::{self, augmented_train, burnin_train, compute_cohorts, evaluate_indices, BurnIn, Cohorts, PipelineError, Split, TrainConfig};

/// Model variants compared in ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Main encoder and head only: no cohorts, `alpha = beta = 0`.
    Base,
    /// Burn-in cohorts with attentive aggregation, `alpha = 0`.
    Bi,
    /// Contrastive separation only: aggregation off.
    La,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Bi, Variant::La, Variant::Full];

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Base => {
                c.cohort = false;
                c.weights.alpha = 0.0;
                c.weights.beta = 0.0;
            }
            Variant::Bi => {
                c.cohort = true;
                c.aggregate = true;
                c.weights.alpha = 0.0;
            }
            Variant::La => {
                c.cohort = true;
                c.aggregate = false;
            }
            Variant::Full => {
                c.cohort = true;
                c.aggregate = true;
            }
        }
        c
    }

    pub fn needs_cohorts(self) -> bool {
        self != Variant::Base
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Bi => "bi",
            Variant::La => "la",
            Variant::Full => "full",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Variant::Base),
            "bi" => Ok(Variant::Bi),
            "la" => Ok(Variant::La),
            "full" => Ok(Variant::Full),
            other => Err(format!("unknown variant '{other}' (base | bi | la | full)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub test: EvalResult,
    pub best_epoch: usize,
    pub losses: LossReport,
}

/// Burn-in and the first cohort cache for one seed, built lazily.
struct SeedState {
    split: Split,
    burnin: Option<BurnIn>,
    cohorts: BTreeMap<usize, Cohorts>,
}

impl SeedState {
    fn new(data: &[BehaviorSequence], config: &TrainConfig) -> Result<Self, PipelineError> {
        let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
        Ok(Self {
            split: pipeline::split(&labels, config.split, config.seed)?,
            burnin: None,
            cohorts: BTreeMap::new(),
        })
    }

    fn run(&mut self, data: &[BehaviorSequence], config: &TrainConfig) -> Result<(EvalResult, usize, LossReport), PipelineError> {
        let (burnin, cohorts) = if config.cohort {
            if self.burnin.is_none() {
                self.burnin = Some(burnin_train(data, &self.split, config)?);
            }
            let b = self.burnin.as_ref().unwrap();
            if !self.cohorts.contains_key(&config.k) {
                let c = compute_cohorts(b, data, &self.split, config)?;
                self.cohorts.insert(config.k, c);
            }
            (Some(b), self.cohorts.get(&config.k))
        } else {
            (None, None)
        };
        let trained = augmented_train(data, &self.split, burnin, cohorts, config)?;
        let (_, test) = evaluate_indices(&trained, data, &self.split.test, cohorts.map(|c| c.test.as_slice()), config)?;
        let test = test.ok_or_else(|| PipelineError::Config("test split lacks one of the classes".into()))?;
        Ok((test, trained.best_epoch, trained.best_report))
    }
}

/// Trains every variant on every seed. Per seed, the split, burn-in and cohorts are
/// shared by all cohort variants, and the main-model initialisation is common to all.
pub fn ablation_run(
    data: &[BehaviorSequence],
    config: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<AblationRow>, PipelineError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let seeded = TrainConfig { seed, ..config.clone() };
        let mut state = SeedState::new(data, &seeded)?;
        for &v in variants {
            let cfg = v.apply(&seeded);
            let (test, best_epoch, losses) = state.run(data, &cfg)?;
            log::info!("seed {seed} {v}: test auc {:.4}", test.auc);
            rows.push(AblationRow {
                variant: v,
                seed,
                test,
                best_epoch,
                losses,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub auc: (f64, f64),
    pub r_at_p90: (f64, f64),
    pub camouflaged_recall: (f64, f64),
    pub camouflaged_auc: (f64, f64),
}

/// Mean and standard deviation per variant, in variant order.
pub fn summarize_runs(rows: &[AblationRow]) -> Vec<VariantSummary> {
    let mut by: BTreeMap<Variant, Vec<&AblationRow>> = BTreeMap::new();
    for r in rows {
        by.entry(r.variant).or_default().push(r);
    }
    by.into_iter()
        .map(|(variant, rs)| {
            let col = |f: &dyn Fn(&AblationRow) -> Option<f64>| -> (f64, f64) {
                let v: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
                mean_std(&v)
            };
            VariantSummary {
                variant,
                runs: rs.len(),
                auc: col(&|r| Some(r.test.auc)),
                r_at_p90: col(&|r| Some(r.test.r_at_p90)),
                camouflaged_recall: col(&|r| r.test.camouflaged.recall_at_p90),
                camouflaged_auc: col(&|r| r.test.camouflaged.auc),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub const ABLATION_HEADER: &str =
    "variant,seed,auc,r_at_p90,auc_camouflaged_slice,recall_camouflaged_slice,best_epoch,loss_main,loss_sccl,loss_align,loss_decay,loss_total";

pub fn write_ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.losses;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.seed,
            r.test.auc,
            r.test.r_at_p90,
            opt(r.test.camouflaged.auc),
            opt(r.test.camouflaged.recall_at_p90),
            r.best_epoch,
            l.main,
            l.sccl,
            l.align,
            l.decay,
            l.total
        );
    }
    s
}

/// Grid over the contrastive weight, alignment weight, temperature and cohort size.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub tau: Vec<f64>,
    pub k: Vec<usize>,
}

impl SweepGrid {
    /// Grid with one point: the values of `config`.
    pub fn single(config: &TrainConfig) -> Self {
        Self {
            alpha: vec![config.weights.alpha],
            beta: vec![config.weights.beta],
            tau: vec![config.weights.tau],
            k: vec![config.k],
        }
    }

    pub fn points(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &alpha in &self.alpha {
            for &beta in &self.beta {
                for &tau in &self.tau {
                    for &k in &self.k {
                        let mut c = Variant::Full.apply(base);
                        c.weights.alpha = alpha;
                        c.weights.beta = beta;
                        c.weights.tau = tau;
                        c.k = k;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub k: usize,
    pub seed: u64,
    pub test: EvalResult,
    pub best_epoch: usize,
    pub losses: LossReport,
}

/// One full-variant run per grid point and seed. Burn-in is shared across grid points
/// of a seed; cohorts are shared across points with the same K.
pub fn sweep(data: &[BehaviorSequence], config: &TrainConfig, grid: &SweepGrid, seeds: &[u64]) -> Result<Vec<SweepRow>, PipelineError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let seeded = TrainConfig { seed, ..config.clone() };
        let mut state = SeedState::new(data, &seeded)?;
        for cfg in grid.points(&seeded) {
            let (test, best_epoch, losses) = state.run(data, &cfg)?;
            log::info!(
                "seed {seed} alpha {} beta {} tau {} k {}: test auc {:.4}",
                cfg.weights.alpha,
                cfg.weights.beta,
                cfg.weights.tau,
                cfg.k,
                test.auc
            );
            rows.push(SweepRow {
                alpha: cfg.weights.alpha,
                beta: cfg.weights.beta,
                tau: cfg.weights.tau,
                k: cfg.k,
                seed,
                test,
                best_epoch,
                losses,
            });
        }
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str =
    "alpha,beta,tau,k,seed,auc,r_at_p90,auc_camouflaged_slice,recall_camouflaged_slice,best_epoch,loss_main,loss_sccl,loss_align,loss_decay,loss_total";

pub fn write_sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.losses;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.alpha,
            r.beta,
            r.tau,
            r.k,
            r.seed,
            r.test.auc,
            r.test.r_at_p90,
            opt(r.test.camouflaged.auc),
            opt(r.test.camouflaged.recall_at_p90),
            r.best_epoch,
            l.main,
            l.sccl,
            l.align,
            l.decay,
            l.total
        );
    }
    s
}
