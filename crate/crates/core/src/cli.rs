//! Command-line front end. A run lives in a directory holding a single
//! checkpoint file; writers take a lock file for the duration of a command.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::data::{synth_task, TaskKind};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_task, param_report, param_report_csv, param_report_text, verify_forgetting, MetricReport,
};
use crate::gradcheck::{run_suite, DEFAULT_INSTANCES, TOLERANCE};
use crate::model::spec_by_name;
use crate::piggyback::{partition_channels, Lambda};
use crate::ppm::write_ppm;
use crate::run::{Mode, RunState};
use crate::trainer::{train_task, TrainConfig};

pub const CHECKPOINT_FILE: &str = "run.pbgk";
pub const LOCK_FILE: &str = "run.lock";
pub const SAMPLE_COUNT: usize = 8;
const GRADCHECK_SEED: u64 = 20;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "pbgan", version, about = "Lifelong conditional GAN training with piggyback filters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Create a new run with an empty filter bank.
    Init {
        #[arg(long)]
        arch: String,
        #[arg(long)]
        lambda: Lambda,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the next task on a synthetic dataset.
    Train {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        count: usize,
        #[arg(long = "data-seed")]
        data_seed: u64,
    },
    /// Evaluate a trained task on its validation split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long = "task-index")]
        task_index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that a task's outputs are identical in two checkpoints.
    VerifyForgetting {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long = "task-index")]
        task_index: usize,
    },
    /// Print trainable and stored parameter counts per strategy.
    ReportParams {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

/// Exclusive writer lock on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

/// Worker count for read-only evaluation, from `PBGAN_THREADS` (default 1).
pub fn thread_count() -> usize {
    std::env::var("PBGAN_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Format { .. } | Error::Locked(_) => EXIT_IO,
        Error::InvalidArgument(_)
        | Error::InvalidLambda { .. }
        | Error::IncompatibleMode { .. }
        | Error::MissingTask(_)
        | Error::Unsupported(_) => EXIT_USAGE,
        _ => EXIT_FAIL,
    }
}

fn cmd_init(arch: &str, lambda: Lambda, seed: u64, out_dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let spec = spec_by_name(arch)?;
    if out_dir.exists() && fs::read_dir(out_dir)?.next().is_some() {
        return Err(Error::InvalidArgument(format!("{} exists and is not empty", out_dir.display())));
    }
    fs::create_dir_all(out_dir)?;
    let _lock = RunLock::acquire(out_dir)?;
    let run = RunState::new(spec, lambda, seed)?;
    writeln!(out, "initialized {} run, lambda {lambda}, seed {seed}", run.spec.name)?;
    writeln!(out, "partition for tasks after the first:")?;
    for (idx, l) in run.spec.shared_layers() {
        let p = partition_channels(l.c_out, lambda)?;
        writeln!(out, "  layer {idx}: c_out={} n_u={} n_p={}", l.c_out, p.n_u, p.n_p)?;
    }
    for (idx, l) in run.spec.generator.iter().enumerate().filter(|(_, l)| l.task_specific) {
        writeln!(out, "  layer {idx}: c_out={} task-specific", l.c_out)?;
    }
    checkpoint::save(&run, &checkpoint_path(out_dir))?;
    Ok(EXIT_OK)
}

fn cmd_train(
    dir: &Path,
    kind: TaskKind,
    mode: Mode,
    epochs: usize,
    count: usize,
    data_seed: u64,
    out: &mut dyn Write,
) -> Result<i32> {
    let _lock = RunLock::acquire(dir)?;
    let path = checkpoint_path(dir);
    let run = checkpoint::load(&path)?;
    run.check_mode(mode)?;
    let data = synth_task(kind, data_seed, count, run.spec.height)?;
    let cfg = TrainConfig::new(mode, epochs, run.seed);
    let (run, log) = train_task(run, &data, &cfg)?;
    let n = run.tasks.len();
    for (e, r) in log.epochs.iter().enumerate() {
        writeln!(out, "task {n} epoch {}: g_loss {:.6} d_loss {:.6} val_l1 {:.6}", e + 1, r.g_loss, r.d_loss, r.val_l1)?;
    }
    checkpoint::save(&run, &path)?;
    let final_l1 = log.final_val_l1().expect("at least one epoch");
    writeln!(out, "final validation L1 for task {n} ({kind}, {mode}): {final_l1:.12}")?;
    Ok(EXIT_OK)
}

fn cmd_eval(dir: &Path, k: usize, out_dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let run = checkpoint::load(&checkpoint_path(dir))?;
    let src = run.task(k)?.data;
    let data = synth_task(src.kind, src.seed, src.count, run.spec.height)?;
    let ev = evaluate_task(&run, k, &data, thread_count())?;
    fs::create_dir_all(out_dir)?;
    let csv = MetricReport::csv(std::slice::from_ref(&ev.report));
    fs::write(out_dir.join("metrics.csv"), &csv)?;
    for (i, fake) in ev.fakes.iter().take(SAMPLE_COUNT) {
        let p = &data.pairs[*i];
        write_ppm(&p.condition, &out_dir.join(format!("{i:04}_cond.ppm")))?;
        write_ppm(fake, &out_dir.join(format!("{i:04}_fake.ppm")))?;
        write_ppm(&p.target, &out_dir.join(format!("{i:04}_target.ppm")))?;
    }
    let r = &ev.report;
    writeln!(out, "task {k} ({}): {} validation samples", src.kind, r.samples)?;
    writeln!(out, "  l1   {:.12}", r.l1)?;
    writeln!(out, "  psnr {:.6} dB", r.psnr)?;
    match r.rp_frechet {
        Some(v) => writeln!(out, "  rp_frechet {v:.6}")?,
        None => writeln!(out, "  rp_frechet NA (fewer than 32 samples)")?,
    }
    write!(out, "{csv}")?;
    Ok(EXIT_OK)
}

fn cmd_verify(before: &Path, after: &Path, k: usize, out: &mut dyn Write) -> Result<i32> {
    let a = checkpoint::load(before)?;
    let b = checkpoint::load(after)?;
    let src = a.task(k)?.data;
    let probes = synth_task(src.kind, src.seed, src.count, a.spec.height)?;
    let report = verify_forgetting(&a, &b, &probes, k)?;
    for (task, diff) in &report.diffs {
        writeln!(out, "task {task}: max abs output difference {diff:e} over {} probes", probes.pairs.len())?;
    }
    writeln!(out, "{}", if report.pass { "PASS" } else { "FAIL" })?;
    write!(out, "{}", report.csv())?;
    Ok(if report.pass { EXIT_OK } else { EXIT_FAIL })
}

fn cmd_report_params(dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let run = checkpoint::load(&checkpoint_path(dir))?;
    let rows = param_report(&run, run.tasks.len())?;
    write!(out, "{}", param_report_text(&rows))?;
    writeln!(out)?;
    write!(out, "{}", param_report_csv(&rows))?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(out: &mut dyn Write) -> Result<i32> {
    let results = run_suite(GRADCHECK_SEED, DEFAULT_INSTANCES)?;
    let mut worst = 0.0f64;
    writeln!(out, "op,instances,worst_rel_err")?;
    for r in &results {
        writeln!(out, "{},{},{:e}", r.op, r.instances, r.worst)?;
        worst = worst.max(r.worst);
    }
    let pass = worst <= TOLERANCE;
    writeln!(out, "worst relative error {worst:e} ({})", if pass { "PASS" } else { "FAIL" })?;
    Ok(if pass { EXIT_OK } else { EXIT_FAIL })
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Init { arch, lambda, seed, out: dir } => cmd_init(&arch, lambda, seed, &dir, out),
        Command::Train { run, task, mode, epochs, count, data_seed } => {
            cmd_train(&run, task, mode, epochs, count, data_seed, out)
        }
        Command::Eval { run, task_index, out: dir } => cmd_eval(&run, task_index, &dir, out),
        Command::VerifyForgetting { before, after, task_index } => cmd_verify(&before, &after, task_index, out),
        Command::ReportParams { run } => cmd_report_params(&run, out),
        Command::Gradcheck => cmd_gradcheck(out),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
