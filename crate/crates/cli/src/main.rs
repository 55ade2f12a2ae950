use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fbk_core::bench::{render_text, run_bench};
use fbk_core::config::RunConfig;
use fbk_core::experiments::ablate::{ablate, Ablation};
use fbk_core::experiments::gradcheck::{gradcheck_suite, GradcheckReport};
use fbk_core::experiments::oracle::oracle_compare;
use fbk_core::experiments::train::{eval_command, train_command, EpochMetrics};
use fbk_core::report::{content_hash, text_table};
use fbk_core::{FbError, Result};
use serde::Serialize;
use serde_json::{json, Value};

/// Factorized bilinear layers: verification, training and benchmarks.
#[derive(Parser, Debug)]
#[command(name = "fbk", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed; shorthand for --set seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for report.json, metrics.jsonl and checkpoints/.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference audit of the factorized layers' gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Compare the factorized kernels with brute-force references.
    OracleCompare {
        #[command(flatten)]
        common: Common,
    },
    /// Train the configured preset.
    Train {
        /// Continue from <out>/checkpoints.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Top-1 test error of a checkpoint.
    Eval {
        /// Checkpoint directory; defaults to <out>/checkpoints.
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a freshly initialized model instead.
        #[arg(long, conflicts_with = "checkpoint")]
        untrained: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Cost formulas, multiply-add counters and runtime scaling.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Train a one-factor ablation table.
    Ablate {
        #[arg(value_parser = ["k-sweep", "p-sweep", "kernel-size", "dropout-vs-dropfactor"])]
        which: String,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gradcheck { .. } => "gradcheck",
            Command::OracleCompare { .. } => "oracle-compare",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::Ablate { .. } => "ablate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Gradcheck { common }
            | Command::OracleCompare { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Bench { common }
            | Command::Ablate { common, .. } => common,
        }
    }
}

fn resolve_config(cli: &Common) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for assignment in &cli.set {
        cfg.apply_override(assignment)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Appends one JSON object per line.
struct MetricsLog(Option<BufWriter<File>>);

impl MetricsLog {
    fn open(out: Option<&Path>, append: bool) -> Result<Self> {
        let Some(dir) = out else { return Ok(MetricsLog(None)) };
        let path = dir.join("metrics.jsonl");
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| FbError::io(&path, e))?;
        Ok(MetricsLog(Some(BufWriter::new(file))))
    }

    fn write(&mut self, value: &impl Serialize) -> Result<()> {
        if let Some(w) = &mut self.0 {
            let line = serde_json::to_string(value).expect("metrics serialize");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| FbError::io("metrics.jsonl", e))?;
        }
        Ok(())
    }
}

fn print_epoch(m: &EpochMetrics) {
    println!(
        "epoch {:>3}  lr {:.4}  loss {:.4}  train err {:6.2}%  test err {:6.2}%",
        m.epoch,
        m.lr,
        m.train_loss,
        100.0 * m.train_err,
        100.0 * m.test_err
    );
}

fn print_gradcheck(r: &GradcheckReport) {
    let rows: Vec<Vec<String>> = r
        .cases
        .iter()
        .map(|c| {
            vec![
                format!("{:?}", c.shape).to_lowercase(),
                c.k.to_string(),
                format!("{:?}", c.mode).to_lowercase(),
                c.checked.to_string(),
                format!("{:.2e}", c.worst.rel_err),
                if c.passed { "ok" } else { "FAIL" }.into(),
            ]
        })
        .collect();
    print!(
        "{}",
        text_table(&["shape", "k", "mask", "coords", "max rel err", ""], &rows)
    );
    println!(
        "max relative error {:.3e} (threshold {:.0e})",
        r.max_rel_err, r.threshold
    );
    if !r.passed {
        let c = &r.cases[r.worst_case.expect("failing report has cases")];
        eprintln!(
            "worst offender: {:?} k={} {:?} {}[{}] analytic {:.9e} numeric {:.9e} rel err {:.3e}",
            c.shape, c.k, c.mode, c.worst.tensor, c.worst.index, c.worst.analytic, c.worst.numeric, c.worst.rel_err
        );
    }
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("reports serialize")
}

/// Runs the command and returns its JSON result plus whether it verified.
fn run(command: &Command, cfg: &RunConfig) -> Result<(Value, bool)> {
    let common = command.common();
    let out = common.out.as_deref();
    match command {
        Command::Gradcheck { .. } => {
            let r = gradcheck_suite(cfg)?;
            print_gradcheck(&r);
            Ok((to_value(&r), r.passed))
        }
        Command::OracleCompare { .. } => {
            let r = oracle_compare(cfg)?;
            let verdict = |ok: bool| if ok { "ok" } else { "FAIL" };
            println!(
                "naive double sum      {} instances, max |diff| {:.2e}  {}",
                r.naive.instances,
                r.naive.max_abs_diff,
                verdict(r.naive.passed)
            );
            println!(
                "bilinear pooling      pipeline {:.2e}, descriptor {:.2e}  {}",
                r.bilinear.max_pipeline_diff,
                r.bilinear.max_descriptor_diff,
                verdict(r.bilinear.passed)
            );
            let worst_exact = r.expectation.exact.iter().map(|e| e.max_abs_diff).fold(0.0, f64::max);
            let worst_z = r.expectation.mc_outputs.iter().map(|o| o.z.abs()).fold(0.0, f64::max);
            println!(
                "mask expectation      exact {:.2e}, k={} Monte-Carlo max |z| {:.2} over {} masks  {}",
                worst_exact,
                r.expectation.mc_k,
                worst_z,
                r.expectation.mc_masks,
                verdict(r.expectation.passed)
            );
            Ok((to_value(&r), r.passed))
        }
        Command::Train { resume, .. } => {
            let ckpt = out.map(|d| d.join("checkpoints"));
            if *resume && ckpt.is_none() {
                return Err(FbError::Config("--resume needs --out".into()));
            }
            let mut log = MetricsLog::open(out, *resume)?;
            let r = train_command(cfg, ckpt.as_deref(), *resume, |m| {
                print_epoch(m);
                log.write(m)
            })?;
            if r.summary.truncated {
                println!("TRUNCATED after {} epochs (wallclock cap)", r.summary.epochs_completed);
            }
            println!("final test error {:.2}%", 100.0 * r.summary.final_test_err);
            Ok((to_value(&r), true))
        }
        Command::Eval {
            checkpoint, untrained, ..
        } => {
            let dir = match (checkpoint, untrained) {
                (_, true) => None,
                (Some(d), _) => Some(d.clone()),
                (None, false) => Some(
                    out.map(|d| d.join("checkpoints"))
                        .ok_or_else(|| FbError::Config("eval needs --checkpoint, --out or --untrained".into()))?,
                ),
            };
            let r = eval_command(cfg, dir.as_deref())?;
            println!(
                "test error {:.2}% over {} samples ({} classes, chance {:.2}%)",
                100.0 * r.test_err,
                r.test_samples,
                r.classes,
                100.0 * r.chance_err
            );
            Ok((to_value(&r), true))
        }
        Command::Bench { .. } => {
            if common.threads.is_some_and(|t| t != 1) {
                eprintln!("note: timings always run on one thread");
            }
            let r = run_bench(&cfg.bench_sizes, cfg.bench_reps)?;
            print!("{}", render_text(&r));
            Ok((to_value(&r), r.passed))
        }
        Command::Ablate { which, .. } => {
            let ablation = Ablation::parse(which).expect("clap restricts the values");
            let mut log = MetricsLog::open(out, false)?;
            let r = ablate(cfg, ablation, |row, m| {
                print!("[{row}] ");
                print_epoch(m);
                log.write(&json!({ "row": row, "metrics": m }))
            })?;
            print!("{}", r.text());
            Ok((to_value(&r), true))
        }
    }
}

fn write_report(out: &Path, report: &Value) -> Result<()> {
    let path = out.join("report.json");
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| FbError::io(&path, e))
}

fn main_inner(command: &Command) -> Result<bool> {
    let cli = command.common();
    let cfg = resolve_config(cli)?;
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| FbError::Config(format!("--threads: {e}")))?;
    }
    if let Some(out) = &cli.out {
        std::fs::create_dir_all(out).map_err(|e| FbError::io(out, e))?;
    }
    let (result, passed) = run(command, &cfg)?;
    if let Some(out) = &cli.out {
        let input_hash = result
            .get("data_hash")
            .and_then(Value::as_str)
            .map_or_else(|| content_hash(b""), str::to_string);
        let report = json!({
            "command": command.name(),
            "config": cfg,
            "config_digest": cfg.digest(),
            "seed": cfg.seed,
            "input_hash": input_hash,
            "passed": passed,
            "result": result,
        });
        write_report(out, &report)?;
    }
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}: verification failed", cli.command.name());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
