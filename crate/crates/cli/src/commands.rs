use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use log::info;
use serde::Serialize;

use cstae::data::{apply_label_mask, make_split_plan_with, subjects_of, SplitOptions, SplitPlan, Trial};
use cstae::eval::{
    ablate, confusion_pgm, export_latents, label_fraction_experiment, parse_variants, run_cv, wilcoxon_exact,
    EvalReport, LatentLayer, Variant, WILCOXON_MAX_N,
};
use cstae::ingest::{epoch, parse_edf, read_array_bytes, read_dataset, synth_generate, write_dataset_bytes, EpochOptions, SynthSpec, ARRAY_MAGIC};
use cstae::model::{read_checkpoint, save_checkpoint};
use cstae::train::{grad_check, grid_search, mix_seed, train, GradCheckOptions, LossSelector};

use crate::manifest::RunManifest;
use crate::{usage, Command, Run, VerifyError};

const DATASET_FILE: &str = "dataset.eegd";
const DEFAULT_VARIANTS: &str =
    "full,disable-attention,disable-lstm,disable-cnn,disable-center-loss,disable-ds-loss,disable-unsupervised";

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// EDF/EDF+ or array-container recordings.
    pub inputs: Vec<PathBuf>,
    /// Generate synthetic trials instead, e.g. `subjects=4,trials=20,channels=8,samples=128,snr=1`.
    #[arg(long)]
    pub synth: Option<String>,
    /// Subject id for every input; by default taken from file names like `S001R04.edf`.
    #[arg(long)]
    pub subject: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Labeled share of the training trials; defaults to the configured label_fraction.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Pick the loss weights by grid search first.
    #[arg(long)]
    pub grid: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated label fractions; one cross-validation each.
    #[arg(long)]
    pub fractions: Option<String>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated variants, e.g. `full,disable-lstm,single-column:0`.
    #[arg(long, default_value = DEFAULT_VARIANTS)]
    pub variants: String,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Comma-separated objectives: ce, center, mse, ds, total, output-sum.
    #[arg(long, default_value = "ce,center,mse,ds,total")]
    pub loss: String,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Probe at most this many elements per tensor (useful for the full-size configs).
    #[arg(long)]
    pub max_per_tensor: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// A saved `report.json`.
    #[arg(long)]
    pub report: PathBuf,
    /// Second report over the same folds; adds a paired Wilcoxon test.
    #[arg(long)]
    pub against: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// `final-fc` or `concat-latent`.
    #[arg(long, default_value = "final-fc")]
    pub layer: String,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Records input digests; runs before any compute.
pub fn prepare(cmd: &Command, run: &mut Run) -> Result<()> {
    let inputs: Vec<&Path> = match cmd {
        Command::Ingest(a) => a.inputs.iter().map(PathBuf::as_path).collect(),
        Command::Train(a) => vec![&a.dataset],
        Command::Eval(a) => vec![&a.dataset],
        Command::Ablate(a) => vec![&a.dataset],
        Command::Gradcheck(_) => Vec::new(),
        Command::Report(a) => std::iter::once(a.report.as_path()).chain(a.against.as_deref()).collect(),
        Command::Export(a) => vec![&a.checkpoint, &a.dataset],
        Command::Replay(_) => Vec::new(),
    };
    for path in inputs {
        run.input(path)?;
    }
    Ok(())
}

pub fn dispatch(cmd: &Command, run: &mut Run) -> Result<()> {
    match cmd {
        Command::Ingest(a) => ingest(a, run),
        Command::Train(a) => train_cmd(a, run),
        Command::Eval(a) => eval_cmd(a, run),
        Command::Ablate(a) => ablate_cmd(a, run),
        Command::Gradcheck(a) => gradcheck(a, run),
        Command::Report(a) => report(a, run),
        Command::Export(a) => export(a, run),
        Command::Replay(_) => unreachable!("replay never reaches dispatch"),
    }
}

fn json(value: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

/// `S001R04` gives subject `S001`, session `R04`; other stems are the subject themselves.
fn subject_session(path: &Path) -> (String, String) {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if let Some(r) = stem.find('R') {
        let (subject, session) = stem.split_at(r);
        let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
        if subject.starts_with('S') && digits(&subject[1..]) && digits(&session[1..]) {
            return (subject.to_string(), session.to_string());
        }
    }
    (stem, "0".into())
}

#[derive(Serialize)]
struct IngestSummary {
    trials: usize,
    dropped: usize,
    per_subject: BTreeMap<String, usize>,
    per_class: BTreeMap<usize, usize>,
}

fn ingest(args: &IngestArgs, run: &mut Run) -> Result<()> {
    let cfg = &run.config;
    let classes = cfg.model.class_count;
    let mut dropped = 0;
    let trials: Vec<Trial<f32>> = match (&args.synth, args.inputs.is_empty()) {
        (Some(_), false) => return Err(usage("give either --synth or input files, not both")),
        (None, true) => return Err(usage("nothing to ingest: give input files or --synth")),
        (Some(text), true) => {
            let mut spec = SynthSpec::parse(text)?;
            if !text.contains("seed=") {
                spec.seed = run.seed();
            }
            run.manifest.seeds.insert("synth".into(), spec.seed);
            let (trials, truth) = synth_generate(&spec)?;
            run.write("synth_truth.json", json(&truth)?)?;
            trials
        }
        (None, false) => {
            let mut all = Vec::new();
            for path in &args.inputs {
                let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
                let rec = if bytes.starts_with(ARRAY_MAGIC) {
                    read_array_bytes(&bytes).map_err(|e| e.at(path))?
                } else {
                    parse_edf(&bytes).map_err(|e| e.at(path))?.1
                };
                let (mut subject, session) = subject_session(path);
                if let Some(s) = &args.subject {
                    subject.clone_from(s);
                }
                let opts = EpochOptions {
                    duration_s: cfg.ingest.duration_s,
                    offset_s: cfg.ingest.offset_s,
                    subject_id: subject,
                    session,
                    class_count: classes,
                };
                let epoched = epoch(&rec, &cfg.ingest.event_map, &opts)
                    .with_context(|| format!("epoching {}", path.display()))?;
                info!("{}: {} trials, {} dropped", path.display(), epoched.trials.len(), epoched.dropped);
                dropped += epoched.dropped;
                all.extend(epoched.trials);
            }
            all
        }
    };
    if trials.is_empty() {
        bail!(cstae::Error::InvalidArgument("no trials matched the event map".into()));
    }
    let mut summary = IngestSummary {
        trials: trials.len(),
        dropped,
        per_subject: BTreeMap::new(),
        per_class: BTreeMap::new(),
    };
    for t in &trials {
        *summary.per_subject.entry(t.subject_id.clone()).or_default() += 1;
        if let Some(y) = t.label {
            *summary.per_class.entry(y).or_default() += 1;
        }
    }
    run.write(DATASET_FILE, write_dataset_bytes(&trials))?;
    run.write("ingest.json", json(&summary)?)?;
    println!("{} trials from {} subjects", summary.trials, summary.per_subject.len());
    Ok(())
}

/// Dataset trials minus the configured exclusions, checked against the model shape.
fn load_trials(path: &Path, run: &Run) -> Result<Vec<Trial<f32>>> {
    let trials = read_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    let excluded = &run.config.split.exclude;
    let trials: Vec<Trial<f32>> = trials.into_iter().filter(|t| !excluded.contains(&t.subject_id)).collect();
    let m = &run.config.model;
    if trials.is_empty() {
        bail!(cstae::Error::Shape(format!("{}: no trials left after exclusions", path.display())));
    }
    for t in &trials {
        if t.channels() != m.channel_count || t.samples() < m.window_len {
            bail!(cstae::Error::Shape(format!(
                "{}: trial {} is {}x{}, the model needs {} channels and >= {} samples",
                path.display(),
                t.trial_id,
                t.channels(),
                t.samples(),
                m.channel_count,
                m.window_len
            )));
        }
    }
    Ok(trials)
}

fn train_cmd(args: &TrainArgs, run: &mut Run) -> Result<()> {
    let trials = load_trials(&args.dataset, run)?;
    let fraction = args.fraction.unwrap_or(run.config.split.label_fraction);
    let ids: Vec<String> = trials.iter().map(|t| t.trial_id.clone()).collect();
    let labels: Vec<Option<usize>> = trials.iter().map(|t| t.label).collect();
    let mask = apply_label_mask(&ids, &labels, fraction, mix_seed(run.seed(), 100, 0))?;
    run.write("mask.json", json(&mask)?)?;

    let model = run.config.model.clone();
    let mut cfg = run.config.train.clone();
    if args.grid {
        let result = grid_search(&trials, &mask, &model, &cfg, run.jobs)?;
        let mut csv = String::from("beta,eta,gamma,val_accuracy,best\n");
        for (i, row) in result.rows.iter().enumerate() {
            let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                join(&row.weights.beta),
                join(&row.weights.eta),
                row.weights.gamma,
                row.val_accuracy,
                u8::from(i == result.best)
            ));
        }
        run.write("grid.csv", csv)?;
        cfg.weights = result.best_weights().clone();
        info!("grid search picked {:?}", cfg.weights);
    }
    let outcome = train(&trials, &mask, &model, &cfg)?;
    run.write("best.ckpt", save_checkpoint(&outcome.best))?;
    run.write("last.ckpt", save_checkpoint(&outcome.last))?;
    run.write("history.csv", outcome.history.to_csv()?)?;
    println!(
        "best epoch {} val accuracy {:.4}",
        outcome.history.best_epoch + 1,
        outcome.history.best_val_accuracy
    );
    Ok(())
}

fn plan_for(trials: &[Trial<f32>], run: &Run) -> Result<SplitPlan> {
    let split = &run.config.split;
    let opts = SplitOptions {
        exclude: split.exclude.clone(),
    };
    Ok(make_split_plan_with(&subjects_of(trials), split.kind, split.folds, run.seed(), &opts)?)
}

/// `report.json`, per-fold CSV, mean confusion grid (CSV and PGM) under `prefix`.
fn write_report(run: &mut Run, prefix: &str, report: &EvalReport) -> Result<()> {
    run.write(&format!("{prefix}report.json"), report.to_json()?)?;
    run.write(&format!("{prefix}folds.csv"), report.folds_csv()?)?;
    run.write(&format!("{prefix}confusion.csv"), report.confusion_csv(None)?)?;
    run.write(&format!("{prefix}confusion.pgm"), confusion_pgm(&report.mean_confusion(), 32))?;
    Ok(())
}

fn summary_line(report: &EvalReport) -> String {
    let a = &report.aggregate;
    format!(
        "{} folds: accuracy {:.4} ± {:.4}, macro F1 {:.4} ± {:.4}",
        report.folds.len(),
        a.mean_accuracy,
        a.std_accuracy,
        a.mean_f1,
        a.std_f1
    )
}

fn parse_fractions(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| usage(format!("bad fraction {s:?}"))))
        .collect()
}

fn eval_cmd(args: &EvalArgs, run: &mut Run) -> Result<()> {
    let trials = load_trials(&args.dataset, run)?;
    let plan = plan_for(&trials, run)?;
    run.write("split.txt", plan.to_manifest())?;
    let (model, cfg) = (run.config.model.clone(), run.config.train.clone());
    match &args.fractions {
        Some(list) => {
            let fractions = parse_fractions(list)?;
            if fractions.is_empty() {
                return Err(usage("--fractions is empty"));
            }
            let table = label_fraction_experiment(&trials, &plan, &fractions, &model, &cfg, run.jobs)?;
            run.write("fractions.csv", table.to_csv()?)?;
            for report in &table.reports {
                write_report(run, &format!("fraction-{}/", report.label_fraction), report)?;
                println!("fraction {}: {}", report.label_fraction, summary_line(report));
            }
        }
        None => {
            let report = run_cv(&trials, &plan, run.config.split.label_fraction, &model, &cfg, run.jobs)?;
            write_report(run, "", &report)?;
            println!("{}", summary_line(&report));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct PairedTest {
    a: String,
    b: String,
    n: usize,
    mean_a: f64,
    mean_b: f64,
    /// Exact two-sided p; absent when the fold count exceeds the exact-test limit.
    p_value: Option<f64>,
}

fn paired(a_name: &str, a: &EvalReport, b_name: &str, b: &EvalReport) -> Result<PairedTest> {
    let (xa, xb) = (a.accuracies(), b.accuracies());
    if xa.len() != xb.len() {
        bail!(cstae::Error::InvalidArgument(format!(
            "reports cover {} and {} folds; a paired test needs the same folds",
            xa.len(),
            xb.len()
        )));
    }
    let diffs: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| p - q).collect();
    let p_value = if diffs.len() <= WILCOXON_MAX_N {
        Some(wilcoxon_exact(&diffs)?)
    } else {
        None
    };
    Ok(PairedTest {
        a: a_name.into(),
        b: b_name.into(),
        n: diffs.len(),
        mean_a: a.aggregate.mean_accuracy,
        mean_b: b.aggregate.mean_accuracy,
        p_value,
    })
}

fn ablate_cmd(args: &AblateArgs, run: &mut Run) -> Result<()> {
    let variants = parse_variants(&args.variants)?;
    if variants.is_empty() {
        return Err(usage("--variants is empty"));
    }
    let trials = load_trials(&args.dataset, run)?;
    let plan = plan_for(&trials, run)?;
    run.write("split.txt", plan.to_manifest())?;
    let (model, cfg) = (run.config.model.clone(), run.config.train.clone());
    let table = ablate(
        &trials,
        &plan,
        run.config.split.label_fraction,
        &model,
        &cfg,
        &variants,
        run.jobs,
    )?;
    run.write("ablation.csv", table.to_csv()?)?;
    for report in &table.reports {
        write_report(run, &format!("{}/", report.variant.replace(':', "-")), report)?;
        println!("{}: {}", report.variant, summary_line(report));
    }
    let full = Variant::Full.to_string();
    if let Some(base) = table.reports.iter().find(|r| r.variant == full) {
        let tests = table
            .reports
            .iter()
            .filter(|r| r.variant != full)
            .map(|r| paired(&full, base, &r.variant, r))
            .collect::<Result<Vec<_>>>()?;
        run.write("wilcoxon.json", json(&tests)?)?;
    }
    Ok(())
}

fn gradcheck(args: &GradcheckArgs, run: &mut Run) -> Result<()> {
    let selectors = args
        .loss
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse::<LossSelector>)
        .collect::<cstae::Result<Vec<_>>>()?;
    let model = &run.config.model;
    let mut opts = GradCheckOptions::for_config(model);
    opts.eps = args.eps;
    opts.tolerance = args.tolerance;
    opts.seed = run.seed();
    opts.max_per_tensor = args.max_per_tensor;
    opts.ds = run.config.train.ds.clone();
    let mut reports = Vec::with_capacity(selectors.len());
    for sel in selectors {
        let report = grad_check(model, sel, &opts)?;
        let worst = report.worst().map(|t| t.name.as_str()).unwrap_or("-");
        println!(
            "{sel}: max relative error {:.3e} ({worst}) {}",
            report.max_rel_error,
            if report.passed() { "pass" } else { "FAIL" }
        );
        reports.push(report);
    }
    run.write("gradcheck.json", json(&reports)?)?;
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.selector.to_string())
        .collect();
    if !failed.is_empty() {
        return Err(VerifyError(format!(
            "gradient check above tolerance {} for: {}",
            args.tolerance,
            failed.join(", ")
        ))
        .into());
    }
    Ok(())
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    EvalReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn report(args: &ReportArgs, run: &mut Run) -> Result<()> {
    let main = read_report(&args.report)?;
    write_report(run, "", &main)?;
    let mut text = format!("{}\n", summary_line(&main));
    for rep in &main.repetitions {
        text.push_str(&format!(
            "repetition {}: {} folds, accuracy {:.4}, macro F1 {:.4}\n",
            rep.repetition, rep.folds, rep.mean_accuracy, rep.mean_f1
        ));
    }
    if let Some(other_path) = &args.against {
        let other = read_report(other_path)?;
        let test = paired(&args.report.display().to_string(), &main, &other_path.display().to_string(), &other)?;
        match test.p_value {
            Some(p) => text.push_str(&format!("wilcoxon over {} folds: p = {p:.6}\n", test.n)),
            None => text.push_str(&format!("wilcoxon skipped: {} folds exceeds {WILCOXON_MAX_N}\n", test.n)),
        }
        run.write("wilcoxon.json", json(&test)?)?;
    }
    print!("{text}");
    run.write("summary.txt", text)?;
    Ok(())
}

fn export(args: &ExportArgs, run: &mut Run) -> Result<()> {
    let layer: LatentLayer = args.layer.parse()?;
    let net = read_checkpoint::<f32>(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let trials = read_dataset(&args.dataset).with_context(|| format!("loading {}", args.dataset.display()))?;
    let refs: Vec<&Trial<f32>> = trials.iter().collect();
    let csv = export_latents(&net, &refs, layer, run.config.train.eval_batch_size)?;
    run.write("latents.csv", csv)?;
    println!("{} rows", trials.len());
    Ok(())
}

/// Reruns a recorded command into `out`, refusing when any input changed.
pub fn replay(args: &ReplayArgs, out: &Path, jobs: usize, execute: fn(Vec<String>) -> Result<()>) -> Result<()> {
    let manifest = RunManifest::read(&args.manifest)?;
    if manifest.command == "replay" {
        return Err(usage("a replay manifest cannot itself be replayed"));
    }
    let changed = manifest.changed_inputs();
    if !changed.is_empty() {
        return Err(anyhow!("inputs changed since the recorded run: {}", changed.join(", ")));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let config = out.join("config.toml");
    fs::write(&config, &manifest.config).with_context(|| format!("writing {}", config.display()))?;
    let mut argv = manifest.args.clone();
    argv.extend([
        "--config".to_string(),
        config.display().to_string(),
        "--out".to_string(),
        out.display().to_string(),
        "--jobs".to_string(),
        jobs.to_string(),
    ]);
    execute(argv)
}
