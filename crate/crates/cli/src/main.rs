//! `neuralign` command-line workflow.
//!
//! Machine-readable payloads go to stdout, progress and errors to stderr.
//! Exit codes: 0 success, 1 check failure, 2 usage/config, 3 I/O,
//! 4 numerical divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use neuralign::losses::{finite_diff_check, gradcheck_instance, LossCoefficients, MAX_EPS, MIN_EPS};
use neuralign::model::Dims;
use neuralign::numerics::RngState;
use neuralign::simdata::{generate_world, load_dataset, save_dataset, simulate, WorldSpec};
use neuralign::train::{
    evaluate, load_checkpoint, rank_sweep, save_checkpoint, train_observed, write_checkpoint_tq,
    write_history_csv, write_sweep_csv, AlignmentTask, TrainConfig, HISTORY_FILE,
};
use neuralign::Error;

const SEED_ENV: &str = "NEURALIGN_SEED";
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "neuralign", version, about = "Cross-subject brain transfer matrices on synthetic fMRI")]
struct Cli {
    /// Log per-epoch progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-subject dataset.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a transfer from a novel to a known subject.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        novel: String,
        #[arg(long)]
        known: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `epochs` from the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on the shared-stimulus split (BTM only).
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Model sizes as "n,k,h,a".
        #[arg(long, default_value = "6,5,3,4")]
        dims: String,
        #[arg(long, default_value_t = 3)]
        batch: usize,
    },
    /// Write per-source-voxel transfer quantity as CSV.
    ExportTq {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per hidden size and tabulate the results.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated hidden sizes.
        #[arg(long)]
        hidden: String,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the first subject in the manifest.
        #[arg(long)]
        novel: Option<String>,
        /// Defaults to the second subject in the manifest.
        #[arg(long)]
        known: Option<String>,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn check(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Malformed { .. } | Error::Checksum { .. } | Error::Version { .. } => 3,
            Error::Divergence { .. } => 4,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out } => cmd_simulate(&config, &out),
        Command::Train { data, config, novel, known, out, epochs } => {
            cmd_train(&data, config.as_deref(), &novel, &known, &out, epochs, cli.verbose)
        }
        Command::Eval { data, ckpt, report } => cmd_eval(&data, &ckpt, report.as_deref()),
        Command::Gradcheck { seed, eps, dims, batch } => cmd_gradcheck(seed, eps, &dims, batch),
        Command::ExportTq { ckpt, out } => cmd_export_tq(&ckpt, &out),
        Command::Sweep { data, config, hidden, out, novel, known } => {
            cmd_sweep(&data, config.as_deref(), &hidden, &out, novel, known)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_json(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = env_seed()? {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn require_dir(path: &Path, what: &str) -> CmdResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure { code: 3, message: format!("{what} {} is not a directory", path.display()) })
    }
}

fn require_parent(path: &Path) -> CmdResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Failure {
            code: 3,
            message: format!("output directory {} does not exist", p.display()),
        }),
        _ => Ok(()),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Writes through a `.partial` sibling so a failed write leaves no file
/// under the final name.
fn write_atomically(path: &Path, write: impl FnOnce(&Path) -> neuralign::Result<()>) -> CmdResult {
    let tmp = sibling(path, ".partial");
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn cmd_simulate(config: &Path, out: &Path) -> CmdResult {
    let mut spec: WorldSpec = serde_json::from_str(&read_text(config)?)
        .map_err(|e| Failure::config(format!("{}: {e}", config.display())))?;
    if let Some(seed) = env_seed()? {
        spec.seed = seed;
    }
    require_parent(out)?;
    let world = generate_world(&spec)?;
    let dataset = simulate(&world)?;
    let staging = sibling(out, ".partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    save_dataset(&dataset, &staging)?;
    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::rename(&staging, out).map_err(|e| Error::io(out, e))?;
    let subjects: Vec<_> = dataset
        .subjects
        .iter()
        .map(|s| {
            json!({
                "id": s.session.subject,
                "voxels": s.session.voxels(),
                "train_samples": s.train_rows,
                "eval_samples": s.session.len() - s.train_rows,
            })
        })
        .collect();
    print_json(&json!({
        "dataset": out.display().to_string(),
        "seed": spec.seed,
        "latent_dim": spec.latent_dim,
        "embed_dim": spec.embed_dim,
        "subjects": subjects,
    }));
    Ok(())
}

fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    novel: &str,
    known: &str,
    out: &Path,
    epochs: Option<usize>,
    verbose: bool,
) -> CmdResult {
    let mut cfg = load_train_config(config)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    require_dir(data, "dataset")?;
    require_parent(out)?;
    let dataset = load_dataset(data)?;
    let task = AlignmentTask::from_dataset(&dataset, novel, known, cfg.oracle_ridge)?;
    eprintln!(
        "training {novel} -> {known}: {} pairs, h={}, {} epochs",
        task.novel_train.len(),
        cfg.hidden,
        cfg.epochs
    );
    let mut log = |r: &neuralign::train::EpochRecord| {
        if verbose || r.fsc_mean.is_some() {
            let eval = r
                .fsc_mean
                .map(|f| format!(" fsc {f:.4} transfer_error {:.4}", r.transfer_error.unwrap_or(f64::NAN)))
                .unwrap_or_default();
            eprintln!("epoch {:>4} loss {:.5e}{eval}", r.epoch, r.losses.l_total);
        }
    };
    match train_observed(&cfg, &task, cfg.epochs, &mut log) {
        Ok(outcome) => {
            save_checkpoint(out, &outcome.checkpoint)?;
            write_atomically(&out.join(HISTORY_FILE), |p| write_history_csv(p, &outcome.checkpoint.history))?;
            let marker = sibling(out, ".diverged");
            if marker.exists() {
                fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
            }
            print_json(&serde_json::to_value(&outcome.report).expect("report serializes"));
            Ok(())
        }
        Err(Error::Divergence { epoch, step, last_finite }) => {
            save_checkpoint(out, &last_finite)?;
            write_atomically(&out.join(HISTORY_FILE), |p| write_history_csv(p, &last_finite.history))?;
            let marker = sibling(out, ".diverged");
            fs::write(&marker, format!("diverged at epoch {epoch}, step {step}\n"))
                .map_err(|e| Error::io(&marker, e))?;
            Err(Failure {
                code: 4,
                message: format!(
                    "training diverged at epoch {epoch}, step {step}; last finite checkpoint (epoch {}) saved to {}",
                    last_finite.epoch,
                    out.display()
                ),
            })
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_eval(data: &Path, ckpt: &Path, report: Option<&Path>) -> CmdResult {
    require_dir(data, "dataset")?;
    require_dir(ckpt, "checkpoint")?;
    if let Some(r) = report {
        require_parent(r)?;
    }
    let checkpoint = load_checkpoint(ckpt)?;
    let dataset = load_dataset(data)?;
    let task = AlignmentTask::from_dataset(&dataset, &checkpoint.novel, &checkpoint.known, checkpoint.config.oracle_ridge)?;
    let metrics = evaluate(checkpoint.inference_model(), &task, &checkpoint.config)?;
    let value = serde_json::to_value(&metrics).expect("report serializes");
    if let Some(r) = report {
        let text = serde_json::to_string_pretty(&value).expect("report serializes");
        write_atomically(r, |p| fs::write(p, text + "\n").map_err(|e| Error::io(p, e)))?;
    }
    print_json(&value);
    Ok(())
}

fn parse_list(text: &str, what: &str) -> Result<Vec<usize>, Failure> {
    let values: Result<Vec<usize>, _> = text.split(',').map(|t| t.trim().parse::<usize>()).collect();
    match values {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(Failure::config(format!("{what} must be a comma-separated list of integers, got `{text}`"))),
    }
}

fn cmd_gradcheck(seed: u64, eps: f64, dims: &str, batch: usize) -> CmdResult {
    let d = parse_list(dims, "--dims")?;
    if d.len() != 4 {
        return Err(Failure::config(format!("--dims needs four values n,k,h,a, got `{dims}`")));
    }
    if !(MIN_EPS..=MAX_EPS).contains(&eps) {
        return Err(Failure::config(format!("--eps must lie in [{MIN_EPS:e}, {MAX_EPS:e}], got {eps:e}")));
    }
    let seed = env_seed()?.unwrap_or(seed);
    let dims = Dims::new(d[0], d[1], d[2], d[3]);
    let (model, batch_data) = gradcheck_instance(dims, batch, seed)?;
    let report = finite_diff_check(
        &model,
        &batch_data,
        LossCoefficients::default(),
        eps,
        &mut RngState::new(seed, 1),
    )?;
    let passed = report.worst <= GRADCHECK_TOLERANCE;
    let per_block: serde_json::Map<String, serde_json::Value> =
        report.per_block.iter().map(|(b, e)| (b.clone(), json!(e))).collect();
    for (b, e) in &report.per_block {
        eprintln!("{b:>10}  {e:.3e}");
    }
    print_json(&json!({
        "worst": report.worst,
        "tolerance": GRADCHECK_TOLERANCE,
        "passed": passed,
        "eps": eps,
        "seed": seed,
        "dims": dims,
        "batch": batch,
        "coordinates_checked": report.coordinates_checked,
        "per_block": per_block,
    }));
    if passed {
        Ok(())
    } else {
        Err(Failure::check(format!(
            "worst relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            report.worst
        )))
    }
}

fn cmd_export_tq(ckpt: &Path, out: &Path) -> CmdResult {
    require_dir(ckpt, "checkpoint")?;
    require_parent(out)?;
    let checkpoint = load_checkpoint(ckpt)?;
    write_atomically(out, |p| write_checkpoint_tq(&checkpoint, p))?;
    eprintln!("row-sum convention: tq_i = sum_j |M_ij| with M = A·B mapping source voxel i to target voxels j");
    print_json(&json!({
        "out": out.display().to_string(),
        "rows": checkpoint.model.dims.n,
    }));
    Ok(())
}

fn cmd_sweep(
    data: &Path,
    config: Option<&Path>,
    hidden: &str,
    out: &Path,
    novel: Option<String>,
    known: Option<String>,
) -> CmdResult {
    let cfg = load_train_config(config)?;
    let hs = parse_list(hidden, "--hidden")?;
    require_dir(data, "dataset")?;
    require_parent(out)?;
    let dataset = load_dataset(data)?;
    let ids: Vec<&str> = dataset.subjects.iter().map(|s| s.session.subject.as_str()).collect();
    let pick = |given: Option<String>, idx: usize, role: &str| -> Result<String, Failure> {
        given
            .or_else(|| ids.get(idx).map(|s| s.to_string()))
            .ok_or_else(|| Failure::config(format!("dataset has no default {role} subject")))
    };
    let novel = pick(novel, 0, "novel")?;
    let known = pick(known, 1, "known")?;
    let task = AlignmentTask::from_dataset(&dataset, &novel, &known, cfg.oracle_ridge)?;
    eprintln!("sweeping h in {hs:?} for {novel} -> {known}");
    let rows = rank_sweep(&cfg, &hs, &task);
    write_atomically(out, |p| write_sweep_csv(p, &rows))?;
    let ok = rows.iter().filter(|r| r.result.is_ok()).count();
    for r in &rows {
        if let Err(msg) = &r.result {
            eprintln!("h={} failed: {msg}", r.hidden);
        }
    }
    print_json(&json!({
        "out": out.display().to_string(),
        "rows": rows.len(),
        "succeeded": ok,
    }));
    if ok == 0 {
        Err(Failure::check("every sweep row failed"))
    } else {
        Ok(())
    }
}
