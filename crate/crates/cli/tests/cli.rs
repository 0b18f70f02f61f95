use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cstae"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn cstae")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/edf").join(name)
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

const FAST: &str = "preset = \"desk\"\nepochs = 3\n";

/// A small synthetic dataset in `dir/data`.
fn synth_dataset(dir: &Path, cfg: &str) -> String {
    let out = run_in(
        dir,
        &["ingest", "--synth", "subjects=4,trials=10,channels=8,samples=112,snr=1,seed=3", "--config", cfg, "--out", "data"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    "data/dataset.eegd".into()
}

#[test]
fn ingest_edf_trial_count_matches_annotation_oracle() {
    let dir = TempDir::new().unwrap();
    let oracle: Value = serde_json::from_str(&fs::read_to_string(fixture("oracle.json")).unwrap()).unwrap();
    let ok = &oracle["edfplus_events.edf"]["ok"];
    let fs_hz = ok["fs"].as_f64().unwrap();
    let samples = ok["samples"].as_u64().unwrap() as f64;
    let duration = 0.5;
    // an event yields a trial when its whole window lies inside the recording
    let expected = ok["annotations"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|a| ["T0", "T1", "T2"].contains(&a[1].as_str().unwrap()))
        .filter(|a| (a[0].as_f64().unwrap() * fs_hz).round() + (duration * fs_hz).round() <= samples)
        .count();
    let cfg = write_config(
        dir.path(),
        &format!(
            "preset = \"miniature\"\nchannels = 2\nclasses = 3\nepoch_duration_s = {duration}\nevent_map = {{ T0 = 0, T1 = 1, T2 = 2 }}\n"
        ),
    );
    let input = fixture("edfplus_events.edf");
    let out = run_in(dir.path(), &["ingest", input.to_str().unwrap(), "--subject", "S042", "--config", &cfg, "--out", "run"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run/ingest.json")).unwrap()).unwrap();
    assert_eq!(summary["trials"].as_u64().unwrap() as usize, expected);
    assert_eq!(summary["dropped"].as_u64().unwrap(), 1);
    assert_eq!(summary["per_subject"]["S042"].as_u64().unwrap() as usize, expected);

    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn missing_input_is_a_data_error_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let out = run_in(dir.path(), &["train", "--dataset", "no/such/file.eegd", "--out", "run"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no/such/file.eegd"), "{}", stderr(&out));
}

#[test]
fn malformed_edf_reports_file_and_offset() {
    let dir = TempDir::new().unwrap();
    let input = fixture("non_numeric_count.edf");
    let out = run_in(dir.path(), &["ingest", input.to_str().unwrap(), "--out", "run"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("non_numeric_count.edf") && err.contains("byte 236"), "{err}");
}

#[test]
fn config_problems_exit_one_before_any_compute() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "preset = \"desk\"\nepochz = 3\n");
    let out = run_in(dir.path(), &["gradcheck", "--config", &cfg, "--out", "run"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("epochz"), "{}", stderr(&out));
    assert!(!dir.path().join("run").exists());

    let cfg = write_config(dir.path(), "preset = \"desk\"\nlabel_fraction = 1.5\nbeta = [0.1]\n");
    let out = run_in(dir.path(), &["gradcheck", "--config", &cfg, "--out", "run"]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("label_fraction") && err.contains("beta"), "{err}");

    let out = run_in(dir.path(), &["gradcheck"]);
    assert_eq!(code(&out), 1, "missing --out");
    let out = run_in(dir.path(), &["frobnicate", "--out", "run"]);
    assert_eq!(code(&out), 1, "unknown subcommand");
}

#[test]
fn gradcheck_on_miniature_config_passes_and_strict_tolerance_fails() {
    let dir = TempDir::new().unwrap();
    let cfg = repo_config("miniature.toml");
    let out = run_in(dir.path(), &["gradcheck", "--config", cfg.to_str().unwrap(), "--out", "ok"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let reports: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ok/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 5);

    let out = run_in(
        dir.path(),
        &["gradcheck", "--config", cfg.to_str().unwrap(), "--loss", "ce", "--tolerance", "1e-30", "--out", "strict"],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn shipped_configs_resolve() {
    let dir = TempDir::new().unwrap();
    for name in ["paper-physionet.toml", "paper-bci-iv-2a.toml", "desk.toml", "miniature.toml"] {
        let cfg = repo_config(name);
        // report fails on the missing input, after the config has been resolved and saved
        let out = run_in(dir.path(), &["report", "--report", "absent.json", "--config", cfg.to_str().unwrap(), "--out", name]);
        assert_eq!(code(&out), 2, "{name}: {}", stderr(&out));
        let saved = fs::read_to_string(dir.path().join(name).join("config.toml")).unwrap();
        let shipped = fs::read_to_string(&cfg).unwrap();
        let body: String = shipped.lines().skip_while(|l| l.starts_with('#') || l.is_empty()).map(|l| format!("{l}\n")).collect();
        assert_eq!(saved, body, "{name} is not in resolved form");
    }
    let physionet = fs::read_to_string(repo_config("paper-physionet.toml")).unwrap();
    let value = |key: &str| -> f64 {
        let line = physionet.lines().find(|l| l.starts_with(&format!("{key} ="))).unwrap();
        line.split('=').nth(1).unwrap().trim().parse().unwrap()
    };
    assert_eq!((value("window_len"), value("step"), value("epochs")), (400.0, 20.0, 250.0));
    assert_eq!(value("learning_rate"), 1e-5);
}

#[test]
fn single_threaded_runs_are_bit_identical_and_replayable() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), FAST);
    let data = synth_dataset(dir.path(), &cfg);
    for run in ["a", "b"] {
        let out = run_in(dir.path(), &["train", "--dataset", &data, "--fraction", "0.5", "--config", &cfg, "--out", &format!("train-{run}")]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = run_in(dir.path(), &["eval", "--dataset", &data, "--config", &cfg, "--out", &format!("eval-{run}")]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("train-a/best.ckpt"), read("train-b/best.ckpt"));
    assert_eq!(read("train-a/last.ckpt"), read("train-b/last.ckpt"));
    assert_eq!(read("eval-a/report.json"), read("eval-b/report.json"));

    let out = run_in(dir.path(), &["replay", "--manifest", "train-a/manifest.json", "--out", "train-c"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read("train-a/best.ckpt"), read("train-c/best.ckpt"));

    // parallel folds give the same report
    let out = run_in(dir.path(), &["replay", "--manifest", "eval-a/manifest.json", "--jobs", "3", "--out", "eval-c"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read("eval-a/report.json"), read("eval-c/report.json"));

    // a changed input refuses to replay
    let mut bytes = read(&data);
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(dir.path().join(&data), bytes).unwrap();
    let out = run_in(dir.path(), &["replay", "--manifest", "eval-a/manifest.json", "--out", "eval-d"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dataset.eegd"), "{}", stderr(&out));
}

fn tree(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        }
        out.push(p);
    }
    out.sort();
    out
}

#[test]
fn commands_write_only_inside_their_run_directory() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), FAST);
    let data = synth_dataset(dir.path(), &cfg);
    let before = tree(dir.path());
    let out = run_in(
        dir.path(),
        &["eval", "--dataset", &data, "--fractions", "0.25,0.5,1.0", "--config", &cfg, "--out", "runs/frac"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run_dir = dir.path().join("runs");
    let added: Vec<PathBuf> = tree(dir.path()).into_iter().filter(|p| !before.contains(p)).collect();
    assert!(added.iter().all(|p| p.starts_with(&run_dir)), "{added:?}");

    let table = fs::read_to_string(run_dir.join("frac/fractions.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 4, "{table}");
    assert!(rows[0].starts_with("fraction,n_labeled"));
    assert!(run_dir.join("frac/fraction-0.25/report.json").exists());
    let manifest: Value = serde_json::from_str(&fs::read_to_string(run_dir.join("frac/manifest.json")).unwrap()).unwrap();
    let outputs: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(outputs.contains(&"fractions.csv"));
}

#[test]
fn ablation_writes_table_and_paired_tests() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), FAST);
    let data = synth_dataset(dir.path(), &cfg);
    let out = run_in(
        dir.path(),
        &["ablate", "--dataset", &data, "--variants", "full,disable-attention,single-column:1", "--config", &cfg, "--out", "abl"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 4, "{table}");
    let tests: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("abl/wilcoxon.json")).unwrap()).unwrap();
    let tests = tests.as_array().unwrap();
    assert_eq!(tests.len(), 2);
    for t in tests {
        let p = t["p_value"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
    let out = run_in(dir.path(), &["ablate", "--dataset", &data, "--variants", "disable-everything", "--config", &cfg, "--out", "bad"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn export_writes_one_row_per_trial() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), FAST);
    let data = synth_dataset(dir.path(), &cfg);
    let out = run_in(dir.path(), &["train", "--dataset", &data, "--config", &cfg, "--out", "t"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for (layer, width) in [("final-fc", 2), ("concat-latent", 0)] {
        let out = run_in(
            dir.path(),
            &["export", "--checkpoint", "t/best.ckpt", "--dataset", &data, "--layer", layer, "--config", &cfg, "--out", layer],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let csv = fs::read_to_string(dir.path().join(layer).join("latents.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 40);
        let cols = lines[0].split(',').count() - 3;
        if width > 0 {
            assert_eq!(cols, width);
        } else {
            assert!(cols > 2);
        }
    }
}

#[test]
fn report_renders_saved_results() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), FAST);
    let data = synth_dataset(dir.path(), &cfg);
    let out = run_in(dir.path(), &["eval", "--dataset", &data, "--config", &cfg, "--out", "e"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run_in(dir.path(), &["report", "--report", "e/report.json", "--against", "e/report.json", "--out", "r"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(dir.path().join("e/report.json")).unwrap(), fs::read(dir.path().join("r/report.json")).unwrap());
    let pgm = fs::read(dir.path().join("r/confusion.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
    let test: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r/wilcoxon.json")).unwrap()).unwrap();
    // identical reports: every difference is zero
    assert_eq!(test["p_value"].as_f64().unwrap(), 1.0);
}
