//! `vecaug` command-line entry point: data generation, burn-in, augmented training,
//! evaluation, prediction, sweeps, ablations and the retrieval benchmark.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use thiserror::Error;
use vecaug::config::{ConfigError, ExperimentConfig};
use vecaug::datagen::DataError;
use vecaug::pipeline::PipelineError;
use vecaug::vecpool::PoolError;

/// Failure classes, one per exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else if let PipelineError::Config(_) = e {
            CliError::Usage(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<PoolError> for CliError {
    fn from(e: PoolError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn key_args() -> Vec<Arg> {
    let defaults = ExperimentConfig::default();
    ExperimentConfig::KEYS
        .iter()
        .map(|k| {
            let default = defaults.get(k.name).unwrap_or_default();
            Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .help(format!("{} [default: {default}]", k.help))
                .help_heading("Config keys")
        })
        .collect()
}

fn common_args(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("key=value config file; flags override it"),
    )
    .arg(
        Arg::new("no-cohort")
            .long("no-cohort")
            .action(ArgAction::SetTrue)
            .help("shorthand for --cohort false"),
    )
    .args(key_args())
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .required(true)
        .help(help)
}

fn out_dir() -> Arg {
    path_arg("out-dir", "directory receiving all artifacts")
}

fn seeds_arg() -> Arg {
    Arg::new("seeds")
        .long("seeds")
        .value_name("N")
        .value_parser(clap::value_parser!(u64).range(1..))
        .default_value("5")
        .help("number of seeds, starting at --seed")
}

fn cli() -> Command {
    Command::new("vecaug")
        .about("Cohort-augmented sequence classification with a frozen vector pool")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(common_args(
            Command::new("datagen")
                .about("Generate a synthetic behaviour-sequence dataset (JSONL)")
                .arg(path_arg("out", "output JSONL file")),
        ))
        .subcommand(common_args(
            Command::new("burnin")
                .about("Train the auxiliary model and build the frozen vector pool")
                .arg(path_arg("data", "JSONL dataset"))
                .arg(out_dir()),
        ))
        .subcommand(common_args(
            Command::new("train")
                .about("Cohort-augmented training on top of a burn-in directory")
                .arg(path_arg("data", "JSONL dataset"))
                .arg(path_arg("burnin", "burn-in output directory (not needed with --no-cohort)").required(false))
                .arg(out_dir()),
        ))
        .subcommand(common_args(
            Command::new("eval")
                .about("Evaluate a checkpoint on a split of the dataset")
                .arg(path_arg("checkpoint", "checkpoint directory"))
                .arg(path_arg("data", "JSONL dataset"))
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_parser(["train", "val", "test"])
                        .default_value("test")
                        .help("split to evaluate (recomputed from the checkpoint's seed)"),
                )
                .arg(path_arg("out-dir", "optional directory for metrics.csv").required(false)),
        ))
        .subcommand(
            Command::new("predict")
                .about("Write fraud probabilities for every sequence of a dataset")
                .arg(path_arg("checkpoint", "checkpoint directory"))
                .arg(path_arg("data", "JSONL dataset"))
                .arg(path_arg("out", "output CSV (user_id,probability)")),
        )
        .subcommand(common_args(
            Command::new("sweep")
                .about("Full-model grid over alpha, beta, tau and K")
                .arg(path_arg("data", "JSONL dataset"))
                .arg(out_dir())
                .arg(seeds_arg())
                .arg(grid_arg("alpha-grid", "alpha values"))
                .arg(grid_arg("beta-grid", "beta values"))
                .arg(grid_arg("tau-grid", "tau values"))
                .arg(grid_arg("k-grid", "cohort sizes")),
        ))
        .subcommand(common_args(
            Command::new("ablate")
                .about("Compare model variants over seeds")
                .arg(path_arg("data", "JSONL dataset"))
                .arg(out_dir())
                .arg(seeds_arg())
                .arg(
                    Arg::new("variants")
                        .long("variants")
                        .value_delimiter(',')
                        .default_value("base,bi,la,full")
                        .help("comma-separated variants: base, bi, la, full"),
                ),
        ))
        .subcommand(common_args(
            Command::new("bench")
                .about("Exact versus HNSW query throughput over pool sizes")
                .arg(out_dir())
                .arg(
                    Arg::new("sizes")
                        .long("sizes")
                        .value_delimiter(',')
                        .value_parser(clap::value_parser!(usize))
                        .default_value("12500,25000,50000,100000")
                        .help("comma-separated pool sizes"),
                )
                .arg(
                    Arg::new("queries")
                        .long("queries")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("200")
                        .help("exact-scan queries per size (the index gets 10x as many)"),
                )
                .arg(
                    Arg::new("threads")
                        .long("threads")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("1")
                        .help("query worker threads"),
                ),
        ))
}

fn grid_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("LIST")
        .value_delimiter(',')
        .help(format!("comma-separated {help} (default: the config value)"))
}

/// Applies the config file, key flags and `--no-cohort` on top of `base`.
pub fn resolve_config(m: &ArgMatches, mut base: ExperimentConfig) -> Result<ExperimentConfig, CliError> {
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        base.apply_text(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    for k in ExperimentConfig::KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            base.set(k.name, v)?;
        }
    }
    if m.get_flag("no-cohort") {
        base.set("cohort", "false")?;
    }
    Ok(base)
}

fn dispatch(m: &ArgMatches) -> Result<(), CliError> {
    match m.subcommand() {
        Some(("datagen", s)) => commands::datagen(s),
        Some(("burnin", s)) => commands::burnin(s),
        Some(("train", s)) => commands::train(s),
        Some(("eval", s)) => commands::eval(s),
        Some(("predict", s)) => commands::predict(s),
        Some(("sweep", s)) => commands::sweep(s),
        Some(("ablate", s)) => commands::ablate(s),
        Some(("bench", s)) => commands::bench(s),
        _ => Err(CliError::Usage("missing subcommand".into())),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_tree_is_valid() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_defaults() {
        let m = cli()
            .try_get_matches_from(["vecaug", "datagen", "--out", "x", "--pos_rate", "0.5", "--n_users", "100", "--no-cohort"])
            .unwrap();
        let (_, s) = m.subcommand().unwrap();
        let c = resolve_config(s, ExperimentConfig::default()).unwrap();
        assert_eq!(c.gen.pos_rate, 0.5);
        assert_eq!(c.gen.n_users, 100);
        assert!(!c.train.cohort);
    }

    #[test]
    fn bad_value_is_usage_error() {
        let m = cli()
            .try_get_matches_from(["vecaug", "datagen", "--out", "x", "--k", "many"])
            .unwrap();
        let (_, s) = m.subcommand().unwrap();
        assert_eq!(resolve_config(s, ExperimentConfig::default()).unwrap_err().code(), 1);
    }
}
