//! `rankmoe train | eval | gradcheck | rankscan`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rankmoe_core::config::RunConfig;
use rankmoe_core::gradcheck::audit_ops;
use rankmoe_core::optim::OptimState;
use rankmoe_core::tensor::set_checked_math;
use rankmoe_core::training::{
    audit_model, build_model, evaluate, evaluate_persistence, fit_until, load_run, save_run, TaskMetrics,
    TrainReport,
};
use rankmoe_core::Error;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "RA_SEED";
/// Relative-error threshold of `gradcheck`.
pub const AUDIT_TOLERANCE: f64 = 1e-4;
pub const AUDIT_PARAMS: usize = 50;
pub const AUDIT_RANKS: usize = 3;
pub const AUDIT_EPS: f64 = 1e-6;

pub const REPORT_FILE: &str = "report.tsv";
pub const RANKS_FILE: &str = "ranks.tsv";
pub const TRACE_FILE: &str = "rank_trace.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.urad";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Parser, Debug)]
#[command(name = "rankmoe", version, about = "Rank-adaptive MoE adapters for spatiotemporal prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write reports plus a checkpoint into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every task's test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference audit of every operation and of sampled model parameters.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the rank-search phase and print per-layer mean ranks by epoch.
    Rankscan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit status: 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code as u8;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// `--seed` beats `RA_SEED`, which beats the config file.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, configured: u64) -> std::result::Result<u64, String> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        None => Ok(configured),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> std::result::Result<RunConfig, Failure> {
    let cfg = RunConfig::load(path)?;
    let env = std::env::var(SEED_ENV).ok();
    let seed = resolve_seed(seed, env.as_deref(), cfg.seed).map_err(Failure::Usage)?;
    set_checked_math(cfg.checked_math);
    Ok(cfg.with_seed(seed))
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Train {
            config,
            out: dir,
            seed,
            resume,
        } => {
            let cfg = load_config(&config, seed)?;
            train(&cfg, &dir, resume.as_deref(), out)
        }
        Command::Eval {
            config,
            checkpoint,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let mut model = build_model(&cfg)?;
            load_run(&checkpoint, &mut model)?;
            let metrics = evaluate(&model, &cfg.suite(), cfg.train.eval_batch)?;
            let baseline = evaluate_persistence(&cfg.suite(), cfg.train.eval_batch)?;
            out.write_all(metrics_tsv(&metrics, &baseline).as_bytes())?;
            Ok(())
        }
        Command::Gradcheck { config, seed } => {
            let cfg = load_config(&config, seed)?;
            gradcheck(&cfg, out)
        }
        Command::Rankscan { config, seed, out: dir } => {
            let cfg = load_config(&config, seed)?;
            if !cfg.searches_ranks() {
                return Err(Failure::Usage(format!("variant {:?} has no rank search", cfg.variant)));
            }
            let mut model = build_model(&cfg)?;
            let mut state = OptimState::new(&model.store);
            let report = fit_until(&mut model, &mut state, &cfg, cfg.train.rank_epochs as u64)?;
            if let Some(dir) = dir {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join(RANKS_FILE), report.rank_tsv())?;
                fs::write(dir.join(TRACE_FILE), report.rank_trace_tsv())?;
            }
            out.write_all(report.rank_tsv().as_bytes())?;
            Ok(())
        }
    }
}

fn train(cfg: &RunConfig, dir: &Path, resume: Option<&Path>, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json())?;
    let mut model = build_model(cfg)?;
    let mut state = match resume {
        Some(p) => load_run(p, &mut model)?,
        None => OptimState::new(&model.store),
    };
    let ckpt = dir.join(CHECKPOINT_FILE);
    let mut report = TrainReport::default();
    // one epoch at a time so a checkpoint always exists for --resume
    let epochs = cfg.train.epochs as u64;
    loop {
        let next = (state.epoch + 1).min(epochs);
        let part = fit_until(&mut model, &mut state, cfg, next)?;
        report.layers = part.layers;
        report.rows.extend(part.rows);
        report.rank_trace.extend(part.rank_trace);
        save_run(&ckpt, &model, &state)?;
        if state.epoch >= epochs {
            break;
        }
    }
    fs::write(dir.join(REPORT_FILE), report.to_tsv())?;
    fs::write(dir.join(RANKS_FILE), report.rank_tsv())?;
    fs::write(dir.join(TRACE_FILE), report.rank_trace_tsv())?;
    let finals: Vec<TaskMetrics> = report.final_rows().iter().map(|r| r.test.clone()).collect();
    let baseline = evaluate_persistence(&cfg.suite(), cfg.train.eval_batch)?;
    out.write_all(metrics_tsv(&finals, &baseline).as_bytes())?;
    Ok(())
}

/// Per-task metrics as written by `eval` and at the end of `train`.
pub fn metrics_tsv(metrics: &[TaskMetrics], baseline: &[TaskMetrics]) -> String {
    let mut s = String::from("task\ttest_mse\tpsnr\tssim\tbaseline_psnr\tbaseline_ssim\n");
    for (m, b) in metrics.iter().zip(baseline) {
        writeln!(
            s,
            "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
            m.task, m.mse, m.psnr, m.ssim, b.psnr, b.ssim
        )
        .unwrap();
    }
    s
}

fn gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let mut worst = 0.0f64;
    for a in audit_ops(5, cfg.seed, AUDIT_EPS)? {
        writeln!(out, "op\t{}\t{:e}", a.op, a.worst)?;
        worst = worst.max(a.worst);
    }
    let report = audit_model(cfg, AUDIT_PARAMS, AUDIT_RANKS, AUDIT_EPS)?;
    for e in &report.entries {
        writeln!(out, "param\t{}[{}]\t{:e}", e.param, e.index, e.rel_error)?;
    }
    worst = worst.max(report.worst);
    writeln!(out, "worst\t{worst:e}")?;
    if worst > AUDIT_TOLERANCE {
        return Err(Failure::Runtime(format!(
            "gradient audit failed: worst relative error {worst:e} > {AUDIT_TOLERANCE:e}"
        )));
    }
    Ok(())
}
