//! `mpt`: find sparse binary subnetworks in randomly weighted nets,
//! evaluate and pack the found tickets, and check the existence
//! constructions empirically.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use biprop::cli::{
    check_mode, cmd_eval, cmd_find, cmd_pack, cmd_sweep, cmd_verify_theory, resolve_config,
    ConfigSource,
};
use biprop::config::{preset_names, stretch_target, RunConfig, RunMode, DATA_DIR_ENV};
use biprop::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mpt",
    version,
    about = "Sparse binary subnetworks in randomly weighted nets: search, packed inference, existence checks",
    after_help = format!("Data directories resolve from data.dir, then ${DATA_DIR_ENV}/<dataset>, then (digits only) data/digits.")
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run config file.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name; see `mpt list-presets`.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Overrides train.seed after everything else.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; defaults to runs/<config-hash>-s<seed>.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dotted-path config override, repeatable: -O train.lr=0.05
    #[arg(long = "override", short = 'O', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let source = match (&self.config, &self.preset) {
            (Some(path), None) => ConfigSource::File(path.clone()),
            (None, Some(name)) => ConfigSource::Preset(name.clone()),
            (None, None) => {
                return Err(Error::Config("pass --config PATH or --preset NAME".into()));
            }
            (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
        };
        resolve_config(&source, &self.overrides, self.seed, self.out.as_deref())
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Searches for a ticket; writes metrics and a checkpoint.
    Find(Common),
    /// Reports a checkpoint's top-1 accuracy on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Strips scores from a checkpoint and reports compression.
    Pack {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Output path; defaults to <checkpoint>.packed.mptk.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Measures the existence-construction failure rate against its
    /// width bound.
    VerifyTheory(Common),
    /// Runs a grid of searches over prune percents, archs, and seeds.
    Sweep(Common),
    /// Prints the built-in presets.
    ListPresets,
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Find(common) => {
            let cfg = common.resolve()?;
            check_mode(&cfg, RunMode::Find)?;
            let art = cmd_find(&cfg)?;
            match art.final_top1 {
                Some(t) => println!("final test top-1: {:.2}%", 100.0 * t),
                None => println!("no test split; {} epochs finished", art.epochs),
            }
            println!("checkpoint: {}", art.checkpoint.display());
            println!("metrics: {} / {}", art.metrics_csv.display(), art.metrics_jsonl.display());
        }
        Cmd::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            check_mode(&cfg, RunMode::Eval)?;
            let report = cmd_eval(&cfg, &checkpoint)?;
            match report.top1 {
                Some(t) => println!(
                    "top-1: {:.2}% on {} test items (epoch {}, config {})",
                    100.0 * t,
                    report.test_items,
                    report.epoch,
                    report.checkpoint_config
                ),
                None => println!("test split is empty"),
            }
        }
        Cmd::Pack { checkpoint, out } => {
            let art = cmd_pack(&checkpoint, out.as_deref())?;
            let r = &art.report;
            println!(
                "packed: {} ({} payload + {} constant bytes, {:.1}x smaller than dense f32)",
                art.packed_checkpoint.display(),
                r.payload_bytes,
                r.constant_bytes,
                r.ratio
            );
            println!("report: {}", art.report_path.display());
        }
        Cmd::VerifyTheory(common) => {
            let cfg = common.resolve()?;
            check_mode(&cfg, RunMode::VerifyTheory)?;
            let (rows, out) = cmd_verify_theory(&cfg)?;
            println!("multiplier  k      failures/trials  rate     delta");
            for r in &rows {
                println!(
                    "{:<11} {:<6} {:>8}/{:<7} {:<8.4} {}",
                    r.multiplier, r.k, r.failures, r.trials, r.rate, r.delta
                );
            }
            println!("table: {}", out.join("theory.csv").display());
        }
        Cmd::Sweep(common) => {
            let cfg = common.resolve()?;
            check_mode(&cfg, RunMode::Sweep)?;
            let art = cmd_sweep(&cfg)?;
            println!("arch        prune%  runs  top-1 min/mean/max");
            for r in &art.rows {
                println!(
                    "{:<11} {:<7} {:<5} {:.2}% / {:.2}% / {:.2}%",
                    r.arch,
                    r.prune_percent,
                    r.runs,
                    100.0 * r.top1_min,
                    100.0 * r.top1_mean,
                    100.0 * r.top1_max
                );
            }
            println!("tables: {}", art.out_dir.display());
        }
        Cmd::ListPresets => {
            for &name in preset_names() {
                match stretch_target(name) {
                    Some(t) => println!("{name}  (stretch top-1: {t}%)"),
                    None => println!("{name}"),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
