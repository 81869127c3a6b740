//! Command implementations behind the `mpt` binary. Everything here is
//! plain library code so integration tests can drive the commands
//! without spawning processes.
//!
//! Every run writes metrics twice: a flat CSV for plotting and a JSON
//! lines file carrying the full per-layer detail. Each row of either
//! carries the config hash and seed, so any artifact traces back to the
//! exact configuration that produced it.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{apply_override, preset, RunConfig, RunMode};
use crate::packed::{compression_report, pack_network, CompressionReport};
use crate::search::{evaluate_top1, run_biprop, run_biprop_with, EpochReport};
use crate::theory::{failure_rate_study, FailureRateRow};
use crate::{Error, Result};

/// Where the base config document comes from.
#[derive(Debug, Clone)]
pub enum ConfigSource {
    File(PathBuf),
    Preset(String),
}

/// Loads the base document, applies dotted-path overrides, then the
/// typed `--seed` and `--out` flags, and validates the result.
pub fn resolve_config(
    source: &ConfigSource,
    overrides: &[String],
    seed: Option<u64>,
    out_dir: Option<&Path>,
) -> Result<RunConfig> {
    let mut doc = match source {
        ConfigSource::File(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path.as_path(), e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        ConfigSource::Preset(name) => serde_json::to_value(preset(name)?)?,
    };
    for spec in overrides {
        apply_override(&mut doc, spec)?;
    }
    let mut cfg = RunConfig::from_value(doc)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = out_dir {
        cfg.out_dir = Some(dir.to_path_buf());
    }
    Ok(cfg)
}

/// Errors when the config pins a different mode than the one invoked.
pub fn check_mode(cfg: &RunConfig, invoked: RunMode) -> Result<()> {
    match cfg.mode {
        Some(pinned) if pinned != invoked => Err(Error::Config(format!(
            "config pins mode {}, but {} was invoked",
            pinned.as_str(),
            invoked.as_str()
        ))),
        _ => Ok(()),
    }
}

fn out_dir_for(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-s{}", cfg.hash_hex(), cfg.train.seed)))
}

fn create_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = out_dir_for(cfg);
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.as_path(), e))?;
    Ok(dir)
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn mean(xs: &[f32]) -> f32 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f32>() / xs.len() as f32
    }
}

fn fmt_opt(v: Option<f32>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// JSON-lines row: the full epoch report plus provenance.
#[derive(Serialize)]
struct MetricsRow<'a> {
    config: &'a str,
    seed: u64,
    #[serde(flatten)]
    report: &'a EpochReport,
}

const METRICS_HEADER: &str =
    "epoch,lr,train_loss,test_top1,mean_alpha,mean_pruned,mean_binarization_error,config,seed";

fn metrics_csv_line(r: &EpochReport, config: &str, seed: u64) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.epoch,
        r.lr,
        r.train_loss,
        fmt_opt(r.test_top1),
        mean(&r.layer_alpha),
        mean(&r.layer_sparsity),
        mean(&r.layer_binarization_error),
        config,
        seed
    )
}

#[derive(Debug)]
pub struct FindArtifacts {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub metrics_jsonl: PathBuf,
    pub epochs: usize,
    pub final_top1: Option<f32>,
}

/// Runs the subnetwork search and writes metrics, a config snapshot,
/// and a full checkpoint of the found ticket.
pub fn cmd_find(cfg: &RunConfig) -> Result<FindArtifacts> {
    cfg.validate()?;
    let data = cfg.data()?.load()?;
    let spec = cfg.spec_for(&data)?;
    let out = create_out_dir(cfg)?;
    let hash = cfg.hash_hex();
    let seed = cfg.train.seed;

    let snapshot_path = out.join("config.json");
    let snapshot = serde_json::to_vec_pretty(cfg)?;
    fs::write(&snapshot_path, snapshot).map_err(|e| Error::io(snapshot_path.as_path(), e))?;

    let csv_path = out.join("metrics.csv");
    let jsonl_path = out.join("metrics.jsonl");
    let mut csv = writer(&csv_path)?;
    let mut jsonl = writer(&jsonl_path)?;
    writeln!(csv, "{METRICS_HEADER}").map_err(|e| Error::io(csv_path.as_path(), e))?;

    // The search callback cannot return an error, so the first write
    // failure is stashed and re-raised after the run.
    let mut write_err: Option<Error> = None;
    let (net, reports) = run_biprop_with(&spec, &data, &cfg.train, |_, report| {
        if write_err.is_some() {
            return;
        }
        let attempt = (|| -> Result<()> {
            writeln!(csv, "{}", metrics_csv_line(report, &hash, seed))
                .map_err(|e| Error::io(csv_path.as_path(), e))?;
            let row = MetricsRow { config: &hash, seed, report };
            serde_json::to_writer(&mut jsonl, &row)?;
            writeln!(jsonl).map_err(|e| Error::io(jsonl_path.as_path(), e))?;
            Ok(())
        })();
        write_err = attempt.err();
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    finish(csv, &csv_path)?;
    finish(jsonl, &jsonl_path)?;

    let mut meta = CheckpointMeta::new(hash, seed, spec);
    meta.epoch = reports.len();
    meta.metrics = reports.last().cloned();
    let checkpoint = out.join("ticket.mptk");
    save_checkpoint(&checkpoint, &net, &meta)?;

    Ok(FindArtifacts {
        out_dir: out,
        checkpoint,
        metrics_csv: csv_path,
        metrics_jsonl: jsonl_path,
        epochs: reports.len(),
        final_top1: reports.last().and_then(|r| r.test_top1),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub top1: Option<f32>,
    pub test_items: usize,
    /// Hash of the config used for this evaluation.
    pub config: String,
    /// Hash recorded in the checkpoint at search time.
    pub checkpoint_config: String,
    pub seed: u64,
    pub epoch: usize,
}

/// Evaluates a checkpointed ticket on the configured test split, using
/// the same forward pass the search used.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let (net, meta) = load_checkpoint(checkpoint)?;
    let data = cfg.data()?.load()?;
    let top1 = evaluate_top1(&net, &data.test)?;
    let report = EvalReport {
        top1,
        test_items: data.test.len(),
        config: cfg.hash_hex(),
        checkpoint_config: meta.config_hash,
        seed: meta.seed,
        epoch: meta.epoch,
    };
    let out = create_out_dir(cfg)?;
    let path = out.join("eval.json");
    let bytes = serde_json::to_vec_pretty(&report)?;
    fs::write(&path, bytes).map_err(|e| Error::io(path.as_path(), e))?;
    Ok(report)
}

#[derive(Debug)]
pub struct PackArtifacts {
    pub packed_checkpoint: PathBuf,
    pub report_path: PathBuf,
    pub report: CompressionReport,
}

#[derive(Serialize)]
struct PackReportFile<'a> {
    config: &'a str,
    seed: u64,
    file_bytes: u64,
    #[serde(flatten)]
    report: &'a CompressionReport,
}

/// Strips scores from a checkpoint, writes the packed twin, and reports
/// the resulting size against dense f32 storage.
pub fn cmd_pack(checkpoint: &Path, out: Option<&Path>) -> Result<PackArtifacts> {
    let (net, mut meta) = load_checkpoint(checkpoint)?;
    let packed = pack_network(&net)?;
    let report = compression_report(&packed);
    meta.packed_only = true;

    let packed_path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("ticket");
            checkpoint.with_file_name(format!("{stem}.packed.mptk"))
        }
    };
    save_checkpoint(&packed_path, &net, &meta)?;
    let file_bytes =
        fs::metadata(&packed_path).map_err(|e| Error::io(packed_path.as_path(), e))?.len();

    let report_path = packed_path.with_extension("report.json");
    let file = PackReportFile {
        config: &meta.config_hash,
        seed: meta.seed,
        file_bytes,
        report: &report,
    };
    let bytes = serde_json::to_vec_pretty(&file)?;
    fs::write(&report_path, bytes).map_err(|e| Error::io(report_path.as_path(), e))?;
    Ok(PackArtifacts { packed_checkpoint: packed_path, report_path, report })
}

#[derive(Serialize)]
struct TheoryRow<'a> {
    config: &'a str,
    seed: u64,
    #[serde(flatten)]
    row: &'a FailureRateRow,
}

const THEORY_HEADER: &str =
    "multiplier,k,trials,failures,rate,delta,ci_low,ci_high,config,seed";

/// Runs the construction failure-rate study and writes the table.
pub fn cmd_verify_theory(cfg: &RunConfig) -> Result<(Vec<FailureRateRow>, PathBuf)> {
    cfg.validate()?;
    let th = cfg.theory.clone().unwrap_or_default();
    let rows = failure_rate_study(th.family, th.eps, th.delta, &th.multipliers, th.trials, th.seed)?;
    let out = create_out_dir(cfg)?;
    let hash = cfg.hash_hex();

    let csv_path = out.join("theory.csv");
    let jsonl_path = out.join("theory.jsonl");
    let mut csv = writer(&csv_path)?;
    let mut jsonl = writer(&jsonl_path)?;
    writeln!(csv, "{THEORY_HEADER}").map_err(|e| Error::io(csv_path.as_path(), e))?;
    for row in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            row.multiplier,
            row.k,
            row.trials,
            row.failures,
            row.rate,
            row.delta,
            row.ci_low,
            row.ci_high,
            hash,
            th.seed
        )
        .map_err(|e| Error::io(csv_path.as_path(), e))?;
        serde_json::to_writer(&mut jsonl, &TheoryRow { config: &hash, seed: th.seed, row })?;
        writeln!(jsonl).map_err(|e| Error::io(jsonl_path.as_path(), e))?;
    }
    finish(csv, &csv_path)?;
    finish(jsonl, &jsonl_path)?;
    Ok((rows, out))
}

/// One finished grid point of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub arch: String,
    pub prune_percent: f64,
    pub seed: u64,
    pub top1: Option<f32>,
    pub train_loss: f32,
}

/// Aggregate over the seeds of one (arch, prune percent) cell.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub arch: String,
    pub prune_percent: f64,
    pub runs: usize,
    pub top1_min: f32,
    pub top1_mean: f32,
    pub top1_max: f32,
}

/// Aggregation is a pure pass over finished points: sort, group by
/// (arch, prune percent), reduce. Point order therefore cannot affect
/// the output.
pub fn aggregate_sweep(points: &[SweepPoint]) -> Vec<SweepRow> {
    let mut sorted: Vec<&SweepPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.arch, a.prune_percent, a.seed)
            .partial_cmp(&(&b.arch, b.prune_percent, b.seed))
            .expect("finite prune percents")
    });
    let mut rows: Vec<SweepRow> = Vec::new();
    for p in sorted {
        let fresh = match rows.last() {
            Some(r) => r.arch != p.arch || r.prune_percent != p.prune_percent,
            None => true,
        };
        if fresh {
            rows.push(SweepRow {
                arch: p.arch.clone(),
                prune_percent: p.prune_percent,
                runs: 0,
                top1_min: f32::INFINITY,
                top1_mean: 0.0,
                top1_max: f32::NEG_INFINITY,
            });
        }
        let row = rows.last_mut().expect("just pushed");
        if let Some(t) = p.top1 {
            // Mean is accumulated as a sum until the group closes.
            row.runs += 1;
            row.top1_min = row.top1_min.min(t);
            row.top1_mean += t;
            row.top1_max = row.top1_max.max(t);
        }
    }
    for row in &mut rows {
        if row.runs > 0 {
            row.top1_mean /= row.runs as f32;
        } else {
            row.top1_min = f32::NAN;
            row.top1_mean = f32::NAN;
            row.top1_max = f32::NAN;
        }
    }
    rows
}

#[derive(Debug)]
pub struct SweepArtifacts {
    pub out_dir: PathBuf,
    pub rows: Vec<SweepRow>,
    pub points: Vec<SweepPoint>,
}

const SWEEP_POINTS_HEADER: &str = "arch,prune_percent,seed,top1,train_loss,config";
const SWEEP_HEADER: &str = "arch,prune_percent,runs,top1_min,top1_mean,top1_max,seeds,config";

/// Runs every (arch, prune percent, seed) grid point in isolation and
/// emits both the raw points and the per-cell aggregates.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepArtifacts> {
    cfg.validate()?;
    let sweep = cfg.sweep.clone().unwrap_or_default();
    let archs = if sweep.archs.is_empty() {
        vec![cfg.network.arch.clone()]
    } else {
        sweep.archs.clone()
    };
    let data = cfg.data()?.load()?;
    let hash = cfg.hash_hex();

    let mut grid: Vec<(String, f64, u64)> = Vec::new();
    for arch in &archs {
        for &p in &sweep.prune_percents {
            for &seed in &sweep.seeds {
                grid.push((arch.clone(), p, seed));
            }
        }
    }

    let points: Vec<SweepPoint> = grid
        .par_iter()
        .map(|(arch, p, seed)| -> Result<SweepPoint> {
            let mut network = cfg.network.clone();
            network.arch = arch.clone();
            let spec = network.to_spec(data.input, data.classes)?;
            let mut train = cfg.train.clone();
            train.prune_percent = *p;
            train.seed = *seed;
            let (_, reports) = run_biprop(&spec, &data, &train)?;
            let last = reports.last();
            Ok(SweepPoint {
                arch: arch.clone(),
                prune_percent: *p,
                seed: *seed,
                top1: last.and_then(|r| r.test_top1),
                train_loss: last.map(|r| r.train_loss).unwrap_or(f32::NAN),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = aggregate_sweep(&points);

    let out = create_out_dir(cfg)?;
    let points_csv_path = out.join("sweep_points.csv");
    let mut points_csv = writer(&points_csv_path)?;
    writeln!(points_csv, "{SWEEP_POINTS_HEADER}")
        .map_err(|e| Error::io(points_csv_path.as_path(), e))?;
    for p in &points {
        writeln!(
            points_csv,
            "{},{},{},{},{},{}",
            p.arch,
            p.prune_percent,
            p.seed,
            fmt_opt(p.top1),
            p.train_loss,
            hash
        )
        .map_err(|e| Error::io(points_csv_path.as_path(), e))?;
    }
    finish(points_csv, &points_csv_path)?;

    let seeds_joined =
        sweep.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("|");
    let csv_path = out.join("sweep.csv");
    let mut csv = writer(&csv_path)?;
    writeln!(csv, "{SWEEP_HEADER}").map_err(|e| Error::io(csv_path.as_path(), e))?;
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.arch,
            r.prune_percent,
            r.runs,
            r.top1_min,
            r.top1_mean,
            r.top1_max,
            seeds_joined,
            hash
        )
        .map_err(|e| Error::io(csv_path.as_path(), e))?;
    }
    finish(csv, &csv_path)?;

    let jsonl_path = out.join("sweep.jsonl");
    let mut jsonl = writer(&jsonl_path)?;
    #[derive(Serialize)]
    struct SweepJsonRow<'a> {
        config: &'a str,
        seeds: &'a [u64],
        #[serde(flatten)]
        row: &'a SweepRow,
    }
    for row in &rows {
        serde_json::to_writer(
            &mut jsonl,
            &SweepJsonRow { config: &hash, seeds: &sweep.seeds, row },
        )?;
        writeln!(jsonl).map_err(|e| Error::io(jsonl_path.as_path(), e))?;
    }
    finish(jsonl, &jsonl_path)?;

    Ok(SweepArtifacts { out_dir: out, rows, points })
}
