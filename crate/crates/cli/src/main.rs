//! `atm-lab`: train, ablate, export and query task-specific memory models on
//! the synthetic benchmark.
//!
//! ```text
//! atm-lab train  [--config PATH] [--preset desk|paper-scale] [--set KEY=VALUE]... [--out DIR]
//! atm-lab ablate [--config PATH] [--preset ...] [--set ...] [--arms full,no_gate] [--seeds 1..5] [--out DIR]
//! atm-lab export memory|projection --checkpoint PATH [--out DIR]
//! atm-lab infer  --checkpoint PATH --input CSV [--task K] [--out DIR]
//! ```
//!
//! Settings are applied in order: preset, then `--config`, then each `--set`.
//!
//! # Files
//!
//! Every file starts with a version line `# atm-lab <kind> v1`; readers
//! reject other major versions. CSV files use RFC-4180 quoting, `.` decimals
//! and LF line endings; floats are written in shortest round-trip form.
//! Files are written to a temporary name and renamed into place.
//!
//! | file                 | written by          | contents |
//! |----------------------|---------------------|----------|
//! | `config.cfg`         | train               | full config echo; `--config config.cfg` reproduces the run |
//! | `report.txt`         | train               | `[config]`, `[losses]`, `[metrics]` sections, then `[timing]` (wall clock, excluded from determinism checks) |
//! | `losses.csv`         | train               | `stage,step,loss`, one row per optimizer step |
//! | `checkpoint.atm`     | train               | binary snapshot: version line, config text, stage, step, named f64 matrices, FNV-1a checksum |
//! | `ablation.csv`       | ablate              | `arm,seed,gate_acc,sep_raw,sep_retrieved,final_loss,struc_sim`, one row per (arm, seed), arms outer |
//! | `memory_item_<i>.csv`| export memory       | `n,m,c,item` header, its values, then `m` rows of `c` floats |
//! | `projection.csv`     | export projection   | `x,y,label,kind`: PCA-2D of pooled raw queries and pooled retrieved rows per held-out sample (`kind` raw / retrieved, `label` = task), then every memory row (`kind` memory, `label` = item) |
//! | `outputs.csv`        | infer               | `y0..`, one decoded output row per input row |
//!
//! `gate_acc` is the accuracy of the routing used at inference: the gate for
//! adaptive arms, the seeded random router for `no_gate`.
//!
//! The `infer` input is a CSV of `d` floats per row; a header row and lines
//! starting with `#` are skipped.
//!
//! # Exit codes
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | any other failure (e.g. input of the wrong width) |
//! | 2 | invalid arguments or configuration, unknown arm |
//! | 3 | non-finite loss during training (the message names stage and step) |
//! | 4 | I/O failure or a corrupt / incompatible file |
//!
//! `ATM_LAB_THREADS` caps the number of worker threads used by `ablate`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use atm_core::checkpoint;
use atm_core::config::{ConfigError, Preset, TrainConfig};
use atm_core::report::{self, AblationRow, RunReport};
use atm_core::synthbench::{self, Arm};
use atm_core::{AtmError, Matrix};

#[derive(Parser)]
#[command(
    name = "atm-lab",
    version,
    about = "Task-specific memory experiments on a synthetic benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run stages 1-3, write a report, loss curves and a checkpoint.
    Train(ConfigArgs),
    /// Train every (arm, seed) pair and write one CSV row per run.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated arms.
        #[arg(long, default_value = "full,no_memory,no_gate,no_queries,no_details")]
        arms: String,
        /// Seeds as a comma list and/or inclusive ranges, e.g. `1..5` or `1,4,9`.
        #[arg(long, default_value = "1..5")]
        seeds: String,
    },
    /// Dump memory items or a 2-D projection from a checkpoint.
    Export {
        what: ExportKind,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Decode outputs for condition vectors with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Route every row to this memory item instead of asking the gate.
        #[arg(long)]
        task: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `KEY=VALUE`, repeatable; applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "desk")]
    preset: Preset,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    Memory,
    Projection,
}

/// Errors in the user's request rather than in the run.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<AtmError>() {
            return match e {
                AtmError::NonFinite { .. } => 3,
                AtmError::Io { .. } | AtmError::Format { .. } => 4,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => train(&args),
        Command::Ablate { config, arms, seeds } => ablate(&config, &arms, &seeds),
        Command::Export { what, checkpoint, out } => export(what, &checkpoint, &out),
        Command::Infer {
            checkpoint,
            input,
            task,
            out,
        } => infer(&checkpoint, &input, task, &out),
    }
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<TrainConfig> {
    let mut config = TrainConfig::preset(args.preset);
    if let Some(path) = &args.config {
        let text = report::read_text(path)?;
        config = TrainConfig::parse_onto(config, &text).with_context(|| format!("config {}", path.display()))?;
    }
    config.apply_overrides(&args.overrides)?;
    Ok(config)
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AtmError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(())
}

fn train(args: &ConfigArgs) -> anyhow::Result<()> {
    let config = load_config(args)?;
    ensure_dir(&args.out)?;
    let outcome = synthbench::run(&config)?;
    let report = RunReport::from_outcome(&outcome);
    let out = &args.out;
    report::write_atomic(&out.join("config.cfg"), config.to_text().as_bytes())?;
    report::write_atomic(
        &out.join("losses.csv"),
        report::losses_csv(outcome.state.history()).as_bytes(),
    )?;
    report::write_atomic(&out.join("report.txt"), report.to_text().as_bytes())?;
    checkpoint::save(&out.join("checkpoint.atm"), &outcome.state)?;
    let m = &outcome.report;
    println!(
        "seed {}: gate accuracy {:.3}, final loss {:.4}, reports in {}",
        config.seed,
        m.gate_accuracy,
        m.final_loss,
        out.display()
    );
    Ok(())
}

fn parse_arms(spec: &str) -> anyhow::Result<Vec<Arm>> {
    let arms: Vec<Arm> = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Arm>().map_err(usage))
        .collect::<anyhow::Result<_>>()?;
    if arms.is_empty() {
        return Err(usage("no arms given"));
    }
    Ok(arms)
}

fn parse_seeds(spec: &str) -> anyhow::Result<Vec<u64>> {
    let bad = |part: &str| usage(format!("bad seed list entry `{part}` (use e.g. `1..5` or `1,2,3`)"));
    let mut seeds = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad(part))?;
            let b: u64 = b.trim_start_matches('=').trim().parse().map_err(|_| bad(part))?;
            if b < a {
                return Err(bad(part));
            }
            seeds.extend(a..=b);
        } else {
            seeds.push(part.parse().map_err(|_| bad(part))?);
        }
    }
    if seeds.is_empty() {
        return Err(usage("no seeds given"));
    }
    Ok(seeds)
}

fn thread_cap() -> anyhow::Result<usize> {
    match std::env::var("ATM_LAB_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("ATM_LAB_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, usize::from)),
    }
}

fn ablate(args: &ConfigArgs, arms: &str, seeds: &str) -> anyhow::Result<()> {
    let base = load_config(args)?;
    let arms = parse_arms(arms)?;
    let seeds = parse_seeds(seeds)?;
    ensure_dir(&args.out)?;

    let jobs: Vec<(Arm, u64)> = arms.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    let threads = thread_cap()?.min(jobs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<anyhow::Result<AblationRow>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(arm, seed)) = jobs.get(i) else { break };
                let config = TrainConfig { seed, ..base.clone() };
                let row = synthbench::run_ablation(arm, &config)
                    .map(|o| AblationRow::new(arm, seed, &o.report))
                    .map_err(|e| anyhow!(e).context(format!("arm {arm}, seed {seed}")));
                results.lock().expect("no worker panics while holding the lock")[i] = Some(row);
            });
        }
    });

    let rows = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let path = args.out.join("ablation.csv");
    report::write_atomic(&path, report::ablation_csv(&rows).as_bytes())?;
    println!("{} runs written to {}", rows.len(), path.display());
    Ok(())
}

fn export(what: ExportKind, checkpoint_path: &Path, out: &Path) -> anyhow::Result<()> {
    let state = checkpoint::load(checkpoint_path)?;
    ensure_dir(out)?;
    match what {
        ExportKind::Memory => {
            let paths = report::write_memory_export(out, state.bank())?;
            println!("{} memory items written to {}", paths.len(), out.display());
        }
        ExportKind::Projection => {
            let (_, _, eval) = synthbench::train_eval_split(state.config())?;
            let points = synthbench::projection(&state, &eval)?;
            let path = out.join("projection.csv");
            report::write_atomic(&path, report::projection_csv(&points).as_bytes())?;
            println!("{} points written to {}", points.len(), path.display());
        }
    }
    Ok(())
}

fn read_inputs(path: &Path, width: usize) -> anyhow::Result<Vec<Matrix>> {
    let text = report::read_text(path)?;
    let mut rows = Vec::new();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AtmError::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let values: Result<Vec<f64>, _> = record.iter().map(|v| v.trim().parse::<f64>()).collect();
        let Ok(values) = values else {
            if i == 0 {
                continue; // header
            }
            bail!("{}: record {}: not a row of numbers", path.display(), i + 1);
        };
        if values.len() != width {
            bail!(
                "{}: record {}: expected {width} values, found {}",
                path.display(),
                i + 1,
                values.len()
            );
        }
        rows.push(Matrix::row_vector(&values));
    }
    if rows.is_empty() {
        bail!("{}: no input rows", path.display());
    }
    Ok(rows)
}

fn infer(checkpoint_path: &Path, input: &Path, task: Option<usize>, out: &Path) -> anyhow::Result<()> {
    let state = checkpoint::load(checkpoint_path)?;
    let rows = read_inputs(input, state.config().dims.d)?;
    let outputs = rows
        .iter()
        .map(|x| state.infer(x, task))
        .collect::<atm_core::Result<Vec<_>>>()?;
    ensure_dir(out)?;
    let path = out.join("outputs.csv");
    report::write_atomic(&path, report::outputs_csv(&outputs).as_bytes())?;
    println!("{} outputs written to {}", outputs.len(), path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1..5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_seeds("1..=3,9").unwrap(), vec![1, 2, 3, 9]);
        assert!(parse_seeds("5..1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn arm_lists() {
        assert_eq!(parse_arms("full, no_gate").unwrap(), vec![Arm::Full, Arm::NoGate]);
        let err = parse_arms("full,bogus").unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("no_details"));
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let nan = anyhow!(AtmError::NonFinite {
            stage: 2,
            step: 7,
            value: f64::NAN
        });
        assert_eq!(exit_code(&nan), 3);
        let io = anyhow!(AtmError::Io {
            path: "p".into(),
            message: "gone".into()
        })
        .context("while loading");
        assert_eq!(exit_code(&io), 4);
        let cfg = anyhow!(ConfigError::Invalid("x".into())).context("config f");
        assert_eq!(exit_code(&cfg), 2);
    }
}
