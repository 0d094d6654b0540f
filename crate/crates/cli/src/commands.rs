//! Subcommand bodies. Every command resolves its configuration, does its work and
//! writes artifacts under fixed filenames.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use vecaug::bench::{bench_csv, cost_slopes, run_bench, BenchConfig};
use vecaug::config::ExperimentConfig;
use vecaug::datagen::{generate, read_jsonl, summarize, write_jsonl, BehaviorSequence};
use vecaug::metrics::{
    ablation_run, evaluate, summarize_runs, sweep as run_sweep, write_ablation_csv, write_sweep_csv, EvalResult,
    Provenance, SweepGrid, Variant,
};
use vecaug::pipeline::{
    augmented_train, burnin_train, compute_cohorts, evaluate_indices, split, BurnIn, Checkpoint, LogRow, MetricsLog,
    PipelineError, LOG_FILE, POOL_FILE,
};

use crate::{resolve_config, CliError};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const BENCH_FILE: &str = "bench.csv";

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a PathBuf {
    m.get_one::<PathBuf>(name).expect("required argument")
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn write_file(p: &Path, text: &str) -> Result<(), CliError> {
    fs::write(p, text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

fn load_data(m: &ArgMatches) -> Result<Vec<BehaviorSequence>, CliError> {
    let data = read_jsonl(path(m, "data"))?;
    if data.is_empty() {
        return Err(CliError::Data(format!("{}: no sequences", path(m, "data").display())));
    }
    Ok(data)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

fn print_eval(name: &str, r: &EvalResult) {
    println!(
        "{name}: auc={:.4} r@p90={:.4} camouflaged_auc={} camouflaged_recall={} ring_auc={} ring_recall={}",
        r.auc,
        r.r_at_p90,
        fmt_opt(r.camouflaged.auc),
        fmt_opt(r.camouflaged.recall_at_p90),
        fmt_opt(r.ring.auc),
        fmt_opt(r.ring.recall_at_p90),
    );
}

fn eval_row(phase: &str, split: &str, r: Option<&EvalResult>) -> LogRow {
    LogRow::eval(phase, 0, split, r.map(|r| r.auc), r.map(|r| r.r_at_p90), f64::NAN)
}

pub fn datagen(m: &ArgMatches) -> Result<(), CliError> {
    let cfg = resolve_config(m, ExperimentConfig::default())?;
    let data = generate(&cfg.gen)?;
    write_jsonl(path(m, "out"), &data)?;
    let s = summarize(&data);
    println!(
        "users={} positives={} negatives={} ring={} camouflaged={} entities={}",
        s.users, s.positives, s.negatives, s.ring, s.camouflaged, s.entities
    );
    Ok(())
}

pub fn burnin(m: &ArgMatches) -> Result<(), CliError> {
    let cfg = resolve_config(m, ExperimentConfig::default())?;
    let data = load_data(m)?;
    let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
    let sp = split(&labels, cfg.train.split, cfg.train.seed)?;
    let b = burnin_train(&data, &sp, &cfg.train)?;
    let out = path(m, "out-dir");
    create_dir(out)?;
    b.pool.save(out.join(POOL_FILE))?;
    b.log.write(out.join(LOG_FILE))?;
    Checkpoint {
        config: cfg,
        store: b.store,
        arch: b.arch,
        pool: Some(b.pool),
        has_main: false,
        log: b.log,
    }
    .save(out.join(CHECKPOINT_DIR))?;
    println!("burn-in: best epoch {}, pool of {} vectors", b.best_epoch, sp.train.len());
    Ok(())
}

/// Keys that fix the split, the architecture or the pool; a train run must not change
/// them relative to its burn-in.
const FROZEN_KEYS: &[&str] = &[
    "seed", "dim", "encoder", "split_train", "split_val", "split_test", "vocab_size", "mlp_hidden", "head_depth",
    "max_len",
];

pub fn train(m: &ArgMatches) -> Result<(), CliError> {
    let defaults = resolve_config(m, ExperimentConfig::default())?;
    let (cfg, burn) = if defaults.train.cohort {
        let dir = m
            .get_one::<PathBuf>("burnin")
            .ok_or_else(|| CliError::Usage("--burnin is required unless --no-cohort is given".into()))?;
        let ck = Checkpoint::load(dir.join(CHECKPOINT_DIR))?;
        let cfg = resolve_config(m, ck.config.clone())?;
        for k in FROZEN_KEYS {
            if cfg.get(k)? != ck.config.get(k)? {
                return Err(CliError::Usage(format!(
                    "--{k} differs from the burn-in run ({} vs {})",
                    cfg.get(k)?,
                    ck.config.get(k)?
                )));
            }
        }
        let pool = ck
            .pool
            .ok_or_else(|| CliError::Data(format!("{}: burn-in has no pool", dir.display())))?;
        let burn = BurnIn {
            store: ck.store,
            arch: ck.arch,
            pool,
            log: MetricsLog::default(),
            best_epoch: 0,
        };
        (cfg, Some(burn))
    } else {
        (defaults, None)
    };
    let data = load_data(m)?;
    let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
    let t = &cfg.train;
    let sp = split(&labels, t.split, t.seed)?;
    let cohorts = match &burn {
        Some(b) => Some(compute_cohorts(b, &data, &sp, t)?),
        None => None,
    };
    let trained = augmented_train(&data, &sp, burn.as_ref(), cohorts.as_ref(), t)?;
    let (_, val) = evaluate_indices(&trained, &data, &sp.val, cohorts.as_ref().map(|c| c.val.as_slice()), t)?;
    let (_, test) = evaluate_indices(&trained, &data, &sp.test, cohorts.as_ref().map(|c| c.test.as_slice()), t)?;
    let mut log = trained.log.clone();
    log.push(eval_row("augmented", "val", val.as_ref()));
    log.push(eval_row("augmented", "test", test.as_ref()));
    let out = path(m, "out-dir");
    create_dir(out)?;
    log.write(out.join(LOG_FILE))?;
    let pool = burn.map(|b| b.pool);
    if let Some(p) = &pool {
        p.save(out.join(POOL_FILE))?;
    }
    Checkpoint {
        config: cfg,
        store: trained.store,
        arch: trained.arch,
        pool,
        has_main: true,
        log,
    }
    .save(out.join(CHECKPOINT_DIR))?;
    println!("augmented: best epoch {}", trained.best_epoch);
    if let Some(r) = &val {
        print_eval("val", r);
    }
    if let Some(r) = &test {
        print_eval("test", r);
    }
    Ok(())
}

pub fn eval(m: &ArgMatches) -> Result<(), CliError> {
    let ck = Checkpoint::load(path(m, "checkpoint"))?;
    let data = load_data(m)?;
    let t = &ck.config.train;
    let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
    let sp = split(&labels, t.split, t.seed)?;
    let which = m.get_one::<String>("split").expect("defaulted").as_str();
    let idx = match which {
        "train" => &sp.train,
        "val" => &sp.val,
        _ => &sp.test,
    };
    if which != "train" {
        if let Some(pool) = &ck.pool {
            let leaked: Vec<u64> = idx.iter().map(|&i| i as u64).filter(|&i| pool.contains(i)).collect();
            if let Some(&first) = leaked.first() {
                return Err(PipelineError::Leakage {
                    count: leaked.len(),
                    first,
                }
                .into());
            }
        }
    }
    let seqs: Vec<&[u32]> = idx.iter().map(|&i| data[i].actions.as_slice()).collect();
    let logits = ck.predict_logits(&seqs)?;
    let tags: Vec<Provenance> = idx
        .iter()
        .map(|&i| Provenance {
            label: data[i].label,
            camouflaged: data[i].camouflaged,
        })
        .collect();
    let r = evaluate(&logits, &tags).map_err(|e| CliError::Data(format!("{which} split: {e}")))?;
    print_eval(which, &r);
    if let Some(out) = m.get_one::<PathBuf>("out-dir") {
        create_dir(out)?;
        let mut log = MetricsLog::default();
        log.push(eval_row("eval", which, Some(&r)));
        log.write(out.join(LOG_FILE))?;
    }
    Ok(())
}

pub fn predict(m: &ArgMatches) -> Result<(), CliError> {
    let ck = Checkpoint::load(path(m, "checkpoint"))?;
    let data = load_data(m)?;
    let seqs: Vec<&[u32]> = data.iter().map(|s| s.actions.as_slice()).collect();
    let probs = ck.predict(&seqs)?;
    let mut text = String::from("user_id,probability\n");
    for (s, p) in data.iter().zip(probs) {
        text.push_str(&format!("{},{p}\n", s.user_id));
    }
    write_file(path(m, "out"), &text)?;
    println!("wrote {} predictions", data.len());
    Ok(())
}

fn seeds(m: &ArgMatches, cfg: &ExperimentConfig) -> Vec<u64> {
    let n = *m.get_one::<u64>("seeds").expect("defaulted");
    (cfg.train.seed..cfg.train.seed + n).collect()
}

fn grid<T: std::str::FromStr>(m: &ArgMatches, name: &str, fallback: T) -> Result<Vec<T>, CliError> {
    match m.get_many::<String>(name) {
        Some(vals) => vals
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("--{name}: cannot parse '{v}'")))
            })
            .collect(),
        None => Ok(vec![fallback]),
    }
}

pub fn sweep(m: &ArgMatches) -> Result<(), CliError> {
    let cfg = resolve_config(m, ExperimentConfig::default())?;
    let data = load_data(m)?;
    let w = &cfg.train.weights;
    let g = SweepGrid {
        alpha: grid(m, "alpha-grid", w.alpha)?,
        beta: grid(m, "beta-grid", w.beta)?,
        tau: grid(m, "tau-grid", w.tau)?,
        k: grid(m, "k-grid", cfg.train.k)?,
    };
    let rows = run_sweep(&data, &cfg.train, &g, &seeds(m, &cfg))?;
    let out = path(m, "out-dir");
    create_dir(out)?;
    write_file(&out.join(SWEEP_FILE), &write_sweep_csv(&rows))?;
    for r in &rows {
        println!(
            "alpha={} beta={} tau={} k={} seed={}: auc={:.4} r@p90={:.4}",
            r.alpha, r.beta, r.tau, r.k, r.seed, r.test.auc, r.test.r_at_p90
        );
    }
    Ok(())
}

pub fn ablate(m: &ArgMatches) -> Result<(), CliError> {
    let cfg = resolve_config(m, ExperimentConfig::default())?;
    let data = load_data(m)?;
    let variants = m
        .get_many::<String>("variants")
        .expect("defaulted")
        .map(|v| v.parse::<Variant>().map_err(CliError::Usage))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = ablation_run(&data, &cfg.train, &variants, &seeds(m, &cfg))?;
    let out = path(m, "out-dir");
    create_dir(out)?;
    write_file(&out.join(ABLATION_FILE), &write_ablation_csv(&rows))?;
    for s in summarize_runs(&rows) {
        println!(
            "{}: runs={} auc={:.4}±{:.4} r@p90={:.4}±{:.4} camouflaged_recall={:.4}±{:.4} camouflaged_auc={:.4}±{:.4}",
            s.variant,
            s.runs,
            s.auc.0,
            s.auc.1,
            s.r_at_p90.0,
            s.r_at_p90.1,
            s.camouflaged_recall.0,
            s.camouflaged_recall.1,
            s.camouflaged_auc.0,
            s.camouflaged_auc.1
        );
    }
    Ok(())
}

pub fn bench(m: &ArgMatches) -> Result<(), CliError> {
    let cfg = resolve_config(m, ExperimentConfig::default())?;
    let sizes: Vec<usize> = m.get_many::<usize>("sizes").expect("defaulted").copied().collect();
    if sizes.iter().any(|&n| n == 0) {
        return Err(CliError::Usage("pool sizes must be at least 1".into()));
    }
    let queries = *m.get_one::<usize>("queries").expect("defaulted");
    let t = &cfg.train;
    let bc = BenchConfig {
        sizes,
        dim: t.dim,
        k: t.k,
        exact_queries: queries.max(1),
        index_queries: queries.max(1) * 10,
        threads: *m.get_one::<usize>("threads").expect("defaulted"),
        hnsw: t.hnsw,
        seed: t.seed,
        ..Default::default()
    };
    let rows = run_bench(&bc);
    let csv = bench_csv(&rows);
    let out = path(m, "out-dir");
    create_dir(out)?;
    write_file(&out.join(BENCH_FILE), &csv)?;
    print!("{csv}");
    if rows.len() >= 4 {
        let (e, h) = cost_slopes(&rows);
        println!("per-query cost slope vs n: exact {e:.3}, hnsw {h:.3}");
    }
    Ok(())
}
