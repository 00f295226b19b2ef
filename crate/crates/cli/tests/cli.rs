use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
n_classes = 2
n_pairs = 48
grid_side = 2
patch_dim = 4
lesion_patches = 1
text_len = 4
vocab_size = 16
keywords_per_class = 3
noise_std = 0.3
seed = 5

[encoder]
depth = 1
heads = 2
width = 8
visual_tokens = 4
text_tokens = 4
patch_dim = 4
vocab_size = 16
proj_dim = 8
mlp_ratio = 2

[train]
batch_size = 8
epochs = 3
warmup_epochs = 1
n_prototypes = 4
seed = 5

[eval]
probe_steps = 40
chance_trials = 3
"#;

fn mgca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgca")).args(args).env_remove("MGCA_THREADS").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Work {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn workspace(config: &str) -> Work {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    Work {
        data: root.join("data.json"),
        config: cfg,
        root,
        _dir: dir,
    }
}

fn generated() -> Work {
    let w = workspace(TINY);
    let o = mgca(&["gen", "--config", s(&w.config), "--out", s(&w.data)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("wrote 48 pairs"));
    w
}

fn train(w: &Work, out: &str) -> PathBuf {
    let dir = w.root.join(out);
    let o = mgca(&["train", "--config", s(&w.config), "--data", s(&w.data), "--out", s(&dir)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    dir
}

fn config_line(text: &str) -> serde_json::Value {
    let first = text.lines().next().unwrap();
    serde_json::from_str::<serde_json::Value>(first).unwrap()["config"].clone()
}

#[test]
fn gen_train_eval_export() {
    let w = generated();
    let run = train(&w, "run");
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(config_line(&log)["train"]["epochs"], 3);
    assert_eq!(log.lines().count(), 4);
    for line in log.lines().skip(1) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["total"].as_f64().unwrap().is_finite());
    }

    let ckpt = run.join("model.ckpt");
    let report = w.root.join("report.txt");
    let o = mgca(&["eval", "--ckpt", s(&ckpt), "--data", s(&w.data), "--out", s(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for key in ["recall_at_1", "nmi", "config = {"] {
        assert!(text.contains(key), "{key} missing from {text}");
    }
    assert_eq!(std::fs::read_to_string(&report).unwrap(), text);

    let export = w.root.join("export");
    let o = mgca(&["export", "--ckpt", s(&ckpt), "--data", s(&w.data), "--out", s(&export)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let attention = std::fs::read_to_string(export.join("attention.tsv")).unwrap();
    assert!(attention.lines().count() > 1);
    let embeddings = std::fs::read_to_string(export.join("embeddings.tsv")).unwrap();
    assert_eq!(embeddings.lines().count(), 1 + 48);
    assert!(embeddings.starts_with("index\tlabel\tcluster\tv0"));
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(export.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["data"]["n_pairs"], 48);
}

#[test]
fn training_twice_gives_identical_files() {
    let w = generated();
    let a = train(&w, "a");
    let b = train(&w, "b");
    for f in ["metrics.jsonl", "model.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ablate_prints_four_rows_in_order() {
    let w = generated();
    let out = w.root.join("ablation.tsv");
    let o = mgca(&["ablate", "--config", s(&w.config), "--data", s(&w.data), "--seed", "7", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("# config = {"));
    assert!(text.contains("# seeds = [7]"));
    let names: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(names, ["ITA", "ITA+CTA", "ITA+CPA", "ITA+CTA+CPA"]);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), text);
}

#[test]
fn gradcheck_exit_code_follows_the_table() {
    let w = workspace(TINY);
    let o = mgca(&["gradcheck", "--config", s(&w.config)]);
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.starts_with("config")).collect();
    assert_eq!(rows.len(), 4, "{text}");
    let all_pass = rows.iter().all(|r| r.ends_with("\tpass"));
    assert_eq!(o.status.code(), Some(if all_pass { 0 } else { 2 }), "{text}{}", stderr(&o));
    assert!(text.contains("config = {"));
    if !all_pass {
        assert!(stderr(&o).starts_with("error kind=gradcheck"));
    }
}

fn assert_one_line_error(o: &Output, kind: &str) {
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error kind={kind} ")), "{err}");
}

#[test]
fn missing_data_file_is_a_one_line_error() {
    let w = workspace(TINY);
    let o = mgca(&["train", "--config", s(&w.config), "--data", s(&w.root.join("nope.json")), "--out", s(&w.root)]);
    assert_one_line_error(&o, "file");
}

#[test]
fn unknown_config_key_is_rejected() {
    let w = workspace(&format!("{TINY}\n[sinkhorn]\nepsilon = 0.05\nmystery = 1\n"));
    let o = mgca(&["gen", "--config", s(&w.config), "--out", s(&w.data)]);
    assert_one_line_error(&o, "config");
    assert!(!w.data.exists());
}

#[test]
fn invalid_config_value_is_rejected() {
    let w = workspace(&TINY.replace("batch_size = 8", "batch_size = 0"));
    let o = mgca(&["gen", "--config", s(&w.config), "--out", s(&w.data)]);
    assert_one_line_error(&o, "config");
}

#[test]
fn bad_thread_cap_is_rejected() {
    let w = workspace(TINY);
    for bad in ["0", "many"] {
        let o = Command::new(env!("CARGO_BIN_EXE_mgca"))
            .args(["gen", "--config", s(&w.config), "--out", s(&w.data)])
            .env("MGCA_THREADS", bad)
            .output()
            .unwrap();
        assert_one_line_error(&o, "config");
    }
    let o = Command::new(env!("CARGO_BIN_EXE_mgca"))
        .args(["gen", "--config", s(&w.config), "--out", s(&w.data)])
        .env("MGCA_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn seed_flag_overrides_the_config_file() {
    let w = workspace(TINY);
    let o = mgca(&["gen", "--config", s(&w.config), "--out", s(&w.data), "--seed", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = w.root.join("run");
    let o = mgca(&["train", "--config", s(&w.config), "--data", s(&w.data), "--out", s(&dir), "--seed", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg = config_line(&std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap());
    assert_eq!(cfg["data"]["seed"], 9);
    assert_eq!(cfg["train"]["seed"], 9);
}

#[test]
fn paths_table_supplies_defaults_and_flags_win() {
    let w = workspace(TINY);
    let from_file = w.root.join("from_file.json");
    let text = format!("{TINY}\n[paths]\nout = {:?}\n", s(&from_file));
    std::fs::write(&w.config, text).unwrap();
    assert_eq!(mgca(&["gen", "--config", s(&w.config)]).status.code(), Some(0));
    assert!(from_file.exists());
    let flagged = w.root.join("flagged.json");
    assert_eq!(mgca(&["gen", "--config", s(&w.config), "--out", s(&flagged)]).status.code(), Some(0));
    assert!(flagged.exists());
}

#[test]
fn missing_required_path_is_a_usage_error() {
    let o = mgca(&["gen"]);
    assert_one_line_error(&o, "usage");
}

#[test]
fn bad_arguments_exit_one_and_help_exits_zero() {
    assert_one_line_error(&mgca(&["train", "--bogus"]), "usage");
    assert_one_line_error(&mgca(&["frobnicate"]), "usage");
    let o = mgca(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("gradcheck"));
}
