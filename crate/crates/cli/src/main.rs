mod commands;
mod manifest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cstae::config::{Preset, RunConfig};
use manifest::{now, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "cstae", version, about = "Train and evaluate CST-AE motor-imagery classifiers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; without it the physionet preset applies.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory. Every output, including the log and manifest, goes here.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for folds and grid points.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Epoch EDF/array recordings (or generate synthetic trials) into a dataset file.
    Ingest(commands::IngestArgs),
    /// Train one model on a whole dataset.
    Train(commands::TrainArgs),
    /// Subject-level cross-validation.
    Eval(commands::EvalArgs),
    /// Cross-validate model variants under identical splits and seeds.
    Ablate(commands::AblateArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(commands::GradcheckArgs),
    /// Re-render tables from a saved report, optionally testing it against another.
    Report(commands::ReportArgs),
    /// Write per-trial classifier outputs or latents of a checkpoint.
    Export(commands::ExportArgs),
    /// Rerun the command recorded in a manifest.
    Replay(commands::ReplayArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Gradcheck(_) => "gradcheck",
            Command::Report(_) => "report",
            Command::Export(_) => "export",
            Command::Replay(_) => "replay",
        }
    }
}

/// Bad flags or configuration; exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A verification step ran and failed; exit code 3.
#[derive(Debug)]
pub struct VerifyError(pub String);

impl fmt::Display for VerifyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerifyError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<VerifyError>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<cstae::Error>() {
            return match e {
                cstae::Error::Config(_) | cstae::Error::InvalidArgument(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

/// Everything a command needs besides its own flags.
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub jobs: usize,
    pub manifest: RunManifest,
}

impl Run {
    /// Records `path` as an input; fails with a data error naming the path when it is unreadable.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = manifest::InputDigest::of(path)?;
        self.manifest.inputs.push(digest);
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.outputs.push(name.to_string());
        Ok(path)
    }

    pub fn seed(&self) -> u64 {
        self.config.train.seed
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(Preset::Physionet),
    };
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    let violations = config.violations();
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("config: {v}");
        }
        return Err(usage(format!("{} configuration violation(s)", violations.len())));
    }
    Ok(config)
}

/// Drops `--out`, `--config` and `--jobs` (with their values) so the rest can be replayed
/// elsewhere; the resolved config and job count are stored separately.
fn replayable_args(argv: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in argv {
        if skip {
            skip = false;
            continue;
        }
        if a == "--out" || a == "--config" || a == "--jobs" {
            skip = true;
            continue;
        }
        if ["--out=", "--config=", "--jobs="].iter().any(|p| a.starts_with(p)) {
            continue;
        }
        out.push(a.clone());
    }
    out
}

fn init_logging(dir: &Path) -> Result<()> {
    let file = fs::File::create(dir.join("run.log"))?;
    // a second run in the same process (tests, replay) keeps the first logger
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(file)))
        .try_init();
    Ok(())
}

fn execute(argv: Vec<String>) -> Result<()> {
    let cli = Cli::try_parse_from(std::iter::once("cstae".to_string()).chain(argv.iter().cloned()))?;
    if let Command::Replay(args) = &cli.command {
        let out = cli.common.out.clone().ok_or_else(|| usage("--out is required"))?;
        return commands::replay(args, &out, cli.common.jobs, execute);
    }
    let dir = cli.common.out.clone().ok_or_else(|| usage("--out is required"))?;
    let config = load_config(&cli.common)?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    init_logging(&dir)?;

    let config_text = config.to_toml()?;
    let mut run = Run {
        dir: dir.clone(),
        jobs: cli.common.jobs.max(1),
        manifest: RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: cli.command.name().to_string(),
            args: replayable_args(&argv),
            config: config_text.clone(),
            seeds: BTreeMap::from([("seed".to_string(), config.train.seed)]),
            jobs: cli.common.jobs.max(1),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: now(),
            finished: None,
            status: "running".into(),
            exit_code: None,
        },
        config,
    };
    run.write("config.toml", &config_text)?;

    let result = commands::prepare(&cli.command, &mut run).and_then(|()| {
        run.manifest.write(&run.dir)?;
        commands::dispatch(&cli.command, &mut run)
    });
    run.manifest.finished = Some(now());
    match &result {
        Ok(()) => {
            run.manifest.status = "ok".into();
            run.manifest.exit_code = Some(0);
        }
        Err(e) => {
            run.manifest.status = format!("failed: {e:#}");
            run.manifest.exit_code = Some(i32::from(exit_code(e)));
        }
    }
    run.manifest.write(&run.dir)?;
    result
}

fn main() -> ExitCode {
    let argv: Vec<String> = match std::env::args_os().skip(1).map(OsString::into_string).collect() {
        Ok(v) => v,
        Err(bad) => {
            eprintln!("error: argument {bad:?} is not valid UTF-8");
            return ExitCode::from(1);
        }
    };
    match execute(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                let _ = clap_err.print();
                return match clap_err.kind() {
                    clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                    _ => ExitCode::from(1),
                };
            }
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
