//! `pagn`: data generation, pretraining, training, generation, evaluation
//! and self-checks for the pyramid age-progression GAN.

mod commands;
mod config;
mod selftest;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{Context, Result};
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "pagn", version, about = "Pyramid-GAN face age progression on synthetic portraits")]
struct Cli {
    /// JSON run configuration; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Age,
    Id,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Accuracy,
    Identity,
    Ablation,
    All,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Render the synthetic dataset to PPM files plus a CSV manifest
    GenData {
        /// Output directory [default: <run-dir>/data]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain and freeze the age extractor and/or identity descriptor
    Pretrain {
        #[arg(long, value_enum, default_value = "both")]
        which: Which,
    },
    /// Train the generator for --target-cluster (or every cluster)
    Train {
        /// Train clusters 1, 2 and 3 one after another
        #[arg(long)]
        all_clusters: bool,
        /// Continue from the session's last checkpoint if there is one
        #[arg(long)]
        resume: bool,
    },
    /// Age PPM images with a trained generator checkpoint
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PPM files or directories of PPM files
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Output directory [default: next to each input]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate trained generators with the analytic oracles
    Eval {
        #[arg(long, value_enum, default_value = "all")]
        mode: EvalMode,
    },
    /// Finite-difference check of every differentiable operation and loss
    Gradcheck {
        /// Random shapes per operation
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Run the built-in sanity suite of every module
    Selftest,
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::GenData { .. } => "gen-data",
            Cmd::Pretrain { .. } => "pretrain",
            Cmd::Train { .. } => "train",
            Cmd::Generate { .. } => "generate",
            Cmd::Eval { .. } => "eval",
            Cmd::Gradcheck { .. } => "gradcheck",
            Cmd::Selftest => "selftest",
        }
    }
}

/// Log sink that mirrors every line to stdout and, once opened, to the
/// command's log file.
struct Tee {
    file: &'static Mutex<Option<File>>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stdout().write_all(buf)?;
        if let Some(f) = self.file.lock().unwrap_or_else(|e| e.into_inner()).as_mut() {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stdout().flush()
    }
}

static LOG_FILE: Mutex<Option<File>> = Mutex::new(None);

/// Starts mirroring the log into `dir/log.txt`.
pub fn open_log(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("log.txt");
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    *LOG_FILE.lock().unwrap_or_else(|e| e.into_inner()) = Some(f);
    Ok(())
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .target(env_logger::Target::Pipe(Box::new(Tee { file: &LOG_FILE })))
        .init();
}

fn init_threads() -> Result<()> {
    let n = match std::env::var("PAGN_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n >= 1).ok_or_else(|| {
            config::ConfigError(format!("PAGN_THREADS must be a positive integer, got {v:?}"))
        })?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(matches: &ArgMatches) -> Result<bool> {
    let cli = Cli::from_arg_matches(matches)?;
    let mut levels = vec![matches];
    if let Some((_, sub)) = matches.subcommand() {
        levels.push(sub);
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &levels)?;
    log::debug!("command {}", cli.command.name());
    match cli.command {
        Cmd::GenData { out } => commands::gen_data(&cfg, out).map(|_| true),
        Cmd::Pretrain { which } => commands::pretrain(&cfg, which).map(|_| true),
        Cmd::Train { all_clusters, resume } => commands::train(&cfg, all_clusters, resume).map(|_| true),
        Cmd::Generate { checkpoint, inputs, out } => commands::generate(&cfg, &checkpoint, &inputs, out).map(|_| true),
        Cmd::Eval { mode } => commands::eval(&cfg, mode).map(|_| true),
        Cmd::Gradcheck { trials } => commands::gradcheck(&cfg, trials),
        Cmd::Selftest => commands::selftest(&cfg),
    }
}

fn main() -> ExitCode {
    init_logging();
    let cmd = config::add_override_args(Cli::command());
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = init_threads().and_then(|_| run(&matches));
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
