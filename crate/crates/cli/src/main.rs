//! `gendd` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error,
//! 3 acceptance threshold missed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gendd::config::RunConfig;
use gendd::error::GenddError;
use gendd::pipeline::{self, EvalReport, Sweep, TrainOutcome};
use gendd::theorem::SweepConfig;

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_ACCEPTANCE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "gendd", version, about = "Knowledge distillation by conditional feature diffusion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file path or preset name (smoke, mismatch, cifar10-small).
    #[arg(long, global = true, default_value = "smoke")]
    config: String,
    /// Dotted-key override, e.g. `gendd.lambda=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to $GENDD_OUT_ROOT/<run name> or the config's.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded evaluation.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Train on raw teacher features instead of standardized ones.
    #[arg(long, global = true)]
    no_standardize: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a GenDD student and head.
    Train {
        /// Stop after this many optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a GenDD checkpoint; its stored config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the CE + KL logit-distillation baseline.
    TrainKl,
    /// Train only the teacher and save it.
    TrainTeacher,
    /// Paired runs over one config axis.
    Ablate {
        #[arg(long)]
        sweep: Option<String>,
        /// Comma-separated values; `full` is accepted for token_dim.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Positional `sweep=NAME` and `values=a,b,c` forms.
        #[arg(value_name = "KEY=VALUE")]
        rest: Vec<String>,
    },
    /// Check the surrogate-gradient theorem numerically.
    VerifyTheorem {
        #[arg(long, default_value_t = 1000)]
        scenarios: usize,
        #[arg(long, default_value_t = 0.9)]
        lambda: f64,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Write teacher feature statistics.
    ExportStats,
}

fn exit_code(e: &GenddError) -> u8 {
    match e {
        GenddError::Config(_) | GenddError::Validation(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn quoted(path: &Path) -> String {
    format!("'{}'", path.display())
}

fn default_out(run_name: &str) -> Option<PathBuf> {
    std::env::var_os("GENDD_OUT_ROOT").map(|root| PathBuf::from(root).join(run_name))
}

/// Extra overrides derived from `--out` and `--seed`.
fn flag_overrides(common: &Common, run_name: &str) -> Vec<String> {
    let mut o = common.overrides.clone();
    if let Some(out) = common.out.clone().or_else(|| default_out(run_name)) {
        o.push(format!("run.out_dir={}", quoted(&out)));
    }
    if let Some(seed) = common.seed {
        o.push(format!("run.seed={seed}"));
    }
    if common.deterministic {
        o.push("run.deterministic=true".into());
    }
    if common.no_standardize {
        o.push("gendd.standardize=false".into());
    }
    o
}

fn load_config(common: &Common) -> Result<RunConfig, GenddError> {
    let base = RunConfig::load(&common.config, &common.overrides)?;
    let name = base.run.out_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    RunConfig::load(&common.config, &flag_overrides(common, &name))
}

fn print_report(tag: &str, r: &EvalReport) {
    println!("{tag} top1 {:.4} top5 {:.4}", r.top1, r.top5);
    for g in &r.shot_groups {
        println!("{tag} {:?} ({} classes) top1 {:.4}", g.group, g.classes, g.top1);
    }
}

fn print_outcome(o: &TrainOutcome) {
    if let (Some(first), Some(last)) = (o.metrics.first(), o.metrics.last()) {
        println!("steps {} loss {:.5} -> {:.5}", o.metrics.len(), first.loss, last.loss);
    }
    println!("teacher top1 {:.4}", o.teacher_top1);
    print_report("val", &o.report);
    if let Some(b) = o.best_top1 {
        println!("best val top1 {b:.4}");
    }
    println!("checkpoint {}", o.checkpoint.display());
    println!("out {}", o.out_dir.display());
}

fn parse_ablation(sweep: Option<String>, mut values: Vec<String>, rest: &[String]) -> Result<(Sweep, Vec<String>), GenddError> {
    let mut sweep = sweep;
    for item in rest {
        match item.split_once('=') {
            Some(("sweep", v)) => sweep = Some(v.to_string()),
            Some(("values", v)) => values.extend(v.split(',').map(str::to_string)),
            _ => return Err(GenddError::Config(format!("unexpected ablation argument `{item}`"))),
        }
    }
    let sweep = sweep.ok_or_else(|| GenddError::Config("ablate needs a sweep (token_dim, lambda, optimizer, lr_schedule)".into()))?;
    let values: Vec<String> = values.into_iter().map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(GenddError::Config("ablate needs at least one value".into()));
    }
    Ok((sweep.parse()?, values))
}

fn run(cli: Cli) -> Result<u8, GenddError> {
    let common = &cli.common;
    if common.deterministic {
        // the global pool can only be built once; ignore a second attempt
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match cli.command {
        Command::Train { steps, resume } => {
            let until = steps.unwrap_or(usize::MAX);
            let outcome = match resume {
                Some(path) => {
                    let mut o = common.overrides.clone();
                    if let Some(out) = &common.out {
                        o.push(format!("run.out_dir={}", quoted(out)));
                    }
                    pipeline::resume_gendd(&path, &o, until)?
                }
                None => pipeline::train_gendd_steps(load_config(common)?, until)?,
            };
            print_outcome(&outcome);
        }
        Command::Eval { checkpoint } => {
            let mut o = common.overrides.clone();
            if let Some(out) = common.out.clone().or_else(|| default_out("eval")) {
                o.push(format!("run.out_dir={}", quoted(&out)));
            }
            if let Some(seed) = common.seed {
                o.push(format!("run.seed={seed}"));
            }
            let report = pipeline::evaluate_checkpoint(&checkpoint, &o)?;
            print_report("eval", &report);
        }
        Command::TrainKl => print_outcome(&pipeline::train_kl(load_config(common)?)?),
        Command::TrainTeacher => {
            let config = load_config(common)?;
            config.validate()?;
            let (train, val) = pipeline::load_datasets(&config)?;
            let train = std::sync::Arc::new(train);
            let path = config.run.out_dir.join(pipeline::TEACHER_CHECKPOINT);
            let (network, _) = pipeline::train_teacher(&config, &train, &path)?;
            config.write_snapshot(&config.run.out_dir)?;
            print_report("teacher", &pipeline::classifier_report(&network, &val, None)?);
            println!("checkpoint {}", path.display());
        }
        Command::Ablate { sweep, values, rest } => {
            let (sweep, values) = parse_ablation(sweep, values, &rest)?;
            let rows = pipeline::ablate(load_config(common)?, sweep, &values)?;
            println!("{:>12} {:>8} {:>8} {:>10}", sweep.name(), "top1", "top5", "final_loss");
            for r in &rows {
                println!("{:>12} {:>8.4} {:>8.4} {:>10.5}", r.value, r.top1, r.top5, r.final_loss);
            }
        }
        Command::VerifyTheorem { scenarios, lambda, dim, classes } => {
            let sweep = SweepConfig {
                scenarios_per_bucket: scenarios,
                lambda,
                feature_dim: dim,
                num_classes: classes,
                seed: common.seed.unwrap_or(0),
                ..SweepConfig::default()
            };
            let out = common.out.clone().or_else(|| default_out("theorem")).unwrap_or_else(|| PathBuf::from("runs/theorem"));
            let report = pipeline::verify_theorem(&sweep, &out)?;
            for b in &report.buckets {
                println!(
                    "bucket [{:.4}, {:.4}) n {} residual {:.5} cosine {:.6}",
                    b.confidence_bucket, b.upper, b.count, b.median_residual, b.median_cosine
                );
            }
            println!(
                "high-confidence n {} residual {:.5} cosine {:.6} monotone {}",
                report.high_confidence_count, report.high_confidence_median_residual, report.high_confidence_median_cosine, report.monotone
            );
            println!("out {}", out.display());
            if !report.passed() {
                println!("FAIL surrogate thresholds not met");
                return Ok(EXIT_ACCEPTANCE);
            }
            println!("PASS");
        }
        Command::ExportStats => {
            let config = load_config(common)?;
            let stats = pipeline::export_stats(config.clone())?;
            println!("dim {} samples {}", stats.dim(), stats.sample_count);
            println!("out {}", config.run.out_dir.join("feature_stats.csv").display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
