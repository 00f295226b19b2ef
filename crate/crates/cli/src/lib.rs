//! `mgca` command-line driver.
//!
//! Configuration is a TOML file whose tables mirror [`RunConfig`]
//! (`[data]`, `[split]`, `[encoder]`, `[train]`, `[loss]`, `[sinkhorn]`,
//! `[eval]`) plus an optional `[paths]` table with `data`, `out` and
//! `ckpt`. Missing keys take their defaults and unknown keys are rejected.
//! Command-line flags override the file.
//!
//! Failures print one line to stderr,
//! `error kind=<kind> code=<code> message=<json string>`, and exit with 1
//! for user errors (bad config, missing or malformed files) or 2 for
//! internal errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mgca_core::eval::{attention_cells, embedding_table, evaluate, write_attention, write_embeddings};
use mgca_core::experiment::{ablate_on, gradient_check, SEED_SUITE};
use mgca_core::synth::{generate, load_dataset, save_dataset, split, Dataset, Splits};
use mgca_core::trainer::{load_checkpoint, run_epochs, save_checkpoint};
use mgca_core::{MgcaError, RunConfig, TrainState};
use thiserror::Error;

/// Gradient-check tolerance on the max relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Samples of the test split whose attention grids are exported.
pub const EXPORT_SAMPLES: usize = 8;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: MgcaError },
    #[error(transparent)]
    Core(#[from] MgcaError),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::File { .. } => "file",
            CliError::Core(MgcaError::Config(_)) => "config",
            CliError::Core(MgcaError::Io(_)) => "io",
            CliError::Core(MgcaError::Parse { .. } | MgcaError::Version { .. }) => "format",
            CliError::Core(MgcaError::Empty(_)) => "empty",
            CliError::Core(_) => "internal",
            CliError::GradCheck(_) => "gradcheck",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "internal" | "gradcheck" => 2,
            _ => 1,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "error kind={} code={} message={}",
            self.kind(),
            self.exit_code(),
            serde_json::Value::String(self.to_string())
        )
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mgca", version, about = "Multi-granularity cross-modal alignment on synthetic paired data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sets both the data and the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint file.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset file (`--out`).
    Gen(Common),
    /// Train on the train split of `--data`; writes `model.ckpt` and
    /// `metrics.jsonl` into `--out`. With `--ckpt`, resumes from it.
    Train(Common),
    /// Evaluate `--ckpt` on `--data`; prints the report and writes it to
    /// `--out` when given.
    Eval(Common),
    /// Finite-difference check of every loss term on a small instance.
    Gradcheck(Common),
    /// Train and evaluate the four objective combinations on `--data`.
    /// Seeds default to 1, 2, 3; `--seed` runs a single one.
    Ablate(Common),
    /// Write `attention.tsv`, `embeddings.tsv` and `config.json` into
    /// `--out` for `--ckpt` on `--data`.
    Export(Common),
}

/// Paths that may come from the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
}

/// Parses a TOML config. Returns the run config and the `[paths]` table.
pub fn parse_config(text: &str) -> Result<(RunConfig, Paths)> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(one_line(&e.to_string())))?;
    let mut paths = Paths::default();
    if let Some(p) = table.remove("paths") {
        let toml::Value::Table(mut p) = p else {
            return Err(CliError::Config("[paths] must be a table".into()));
        };
        for (key, slot) in [("data", &mut paths.data), ("out", &mut paths.out), ("ckpt", &mut paths.ckpt)] {
            match p.remove(key) {
                Some(toml::Value::String(s)) => *slot = Some(PathBuf::from(s)),
                Some(_) => return Err(CliError::Config(format!("paths.{key} must be a string"))),
                None => {}
            }
        }
        if let Some(k) = p.keys().next() {
            return Err(CliError::Config(format!("unknown key paths.{k}")));
        }
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(one_line(&e.to_string())))?;
    Ok((cfg, paths))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Config file (or defaults) with flag overrides applied and validated.
pub fn resolve(common: &Common) -> Result<(RunConfig, Paths)> {
    let (mut cfg, mut paths) = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::File {
                path: p.clone(),
                source: e.into(),
            })?;
            parse_config(&text)?
        }
        None => (RunConfig::default(), Paths::default()),
    };
    if let Some(s) = common.seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
    }
    for (flag, slot) in [(&common.data, &mut paths.data), (&common.out, &mut paths.out), (&common.ckpt, &mut paths.ckpt)] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    cfg.validate()?;
    Ok((cfg, paths))
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn load_data(path: &Path) -> Result<Dataset> {
    load_dataset(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn load_ckpt(path: &Path) -> Result<TrainState> {
    load_checkpoint(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::File {
        path: path.to_path_buf(),
        source: e.into(),
    })
}

fn make_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::File {
        path: path.to_path_buf(),
        source: e.into(),
    })
}

/// Adopts the dataset's own generator settings so the run config echoes
/// what was actually trained on.
fn with_data(mut cfg: RunConfig, data: &Dataset) -> Result<RunConfig> {
    cfg.data = data.config.clone();
    cfg.validate()?;
    Ok(cfg)
}

fn splits_of(cfg: &RunConfig, data: &Dataset) -> Result<Splits> {
    Ok(split(data, cfg.split, data.config.seed)?)
}

/// `MGCA_THREADS`, if set, must be a positive integer. Every command runs
/// on one thread, which satisfies any cap.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("MGCA_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("MGCA_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

pub fn execute(cli: Cli, out: &mut String) -> Result<()> {
    thread_cap()?;
    match cli.command {
        Command::Gen(c) => cmd_gen(&c, out),
        Command::Train(c) => cmd_train(&c, out),
        Command::Eval(c) => cmd_eval(&c, out),
        Command::Gradcheck(c) => cmd_gradcheck(&c, out),
        Command::Ablate(c) => cmd_ablate(&c, out),
        Command::Export(c) => cmd_export(&c, out),
    }
}

pub fn cmd_gen(c: &Common, out: &mut String) -> Result<()> {
    let (cfg, paths) = resolve(c)?;
    let path = require(&paths.out, "out")?;
    let data = generate(&cfg.data)?;
    save_dataset(&data, path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })?;
    let _ = writeln!(out, "wrote {} pairs to {}", data.len(), path.display());
    Ok(())
}

pub fn cmd_train(c: &Common, out: &mut String) -> Result<()> {
    let (cfg, paths) = resolve(c)?;
    let data = load_data(require(&paths.data, "data")?)?;
    let dir = require(&paths.out, "out")?;
    make_dir(dir)?;
    let (mut state, cfg) = match &paths.ckpt {
        Some(p) => {
            let state = load_ckpt(p)?;
            if state.config.data != data.config {
                return Err(CliError::Config("checkpoint was trained on a different dataset".into()));
            }
            let cfg = state.config.clone();
            (state, cfg)
        }
        None => {
            let cfg = with_data(cfg, &data)?;
            (TrainState::init(&cfg)?, cfg)
        }
    };
    let splits = splits_of(&cfg, &data)?;
    let metrics = run_epochs(&mut state, &splits.train, cfg.train.epochs as u64, Some(dir))?;
    let mut log = format!("{{\"config\":{}}}\n", cfg.to_json());
    for m in &metrics {
        log.push_str(&m.to_json_line());
        log.push('\n');
    }
    write(&dir.join("metrics.jsonl"), log)?;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&state, &ckpt)?;
    if let Some(last) = metrics.last() {
        let _ = writeln!(out, "epoch {} step {} loss {:.6}", last.epoch, last.step, last.total);
    }
    let _ = writeln!(out, "wrote {}", ckpt.display());
    Ok(())
}

pub fn cmd_eval(c: &Common, out: &mut String) -> Result<()> {
    let (_, paths) = resolve(c)?;
    let state = load_ckpt(require(&paths.ckpt, "ckpt")?)?;
    let data = load_data(require(&paths.data, "data")?)?;
    let cfg = with_data(state.config.clone(), &data)?;
    let splits = splits_of(&cfg, &data)?;
    let report = evaluate(&state, &splits.train, &splits.test)?;
    let text = format!("{}config = {}\n", report.to_text(), cfg.to_json());
    out.push_str(&text);
    if let Some(p) = &paths.out {
        write(p, &text)?;
    }
    Ok(())
}

pub fn cmd_gradcheck(c: &Common, out: &mut String) -> Result<()> {
    let (cfg, _) = resolve(c)?;
    let rows = gradient_check(&cfg, cfg.train.seed, 1e-6)?;
    let _ = writeln!(out, "term\tmax_rel_error\tentries\tworst_param\tstatus");
    let mut failed = vec![];
    for r in &rows {
        let ok = r.max_rel_error <= GRADCHECK_TOL;
        if !ok {
            failed.push(format!("{} {:.3e}", r.term, r.max_rel_error));
        }
        let _ = writeln!(
            out,
            "{}\t{:.3e}\t{}\t{}\t{}",
            r.term,
            r.max_rel_error,
            r.entries,
            r.worst_param,
            if ok { "pass" } else { "fail" }
        );
    }
    let _ = writeln!(out, "config = {}", cfg.to_json());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

pub fn cmd_ablate(c: &Common, out: &mut String) -> Result<()> {
    let (cfg, paths) = resolve(c)?;
    let data = load_data(require(&paths.data, "data")?)?;
    let cfg = with_data(cfg, &data)?;
    let splits = splits_of(&cfg, &data)?;
    let seeds: Vec<u64> = match c.seed {
        Some(s) => vec![s],
        None => SEED_SUITE.to_vec(),
    };
    let rows = ablate_on(&cfg, &splits, &seeds)?;
    let mut text = format!("# config = {}\n# seeds = {seeds:?}\n", cfg.to_json());
    for r in &rows {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    out.push_str(&text);
    if let Some(p) = &paths.out {
        write(p, &text)?;
    }
    Ok(())
}

pub fn cmd_export(c: &Common, out: &mut String) -> Result<()> {
    let (_, paths) = resolve(c)?;
    let state = load_ckpt(require(&paths.ckpt, "ckpt")?)?;
    let data = load_data(require(&paths.data, "data")?)?;
    let dir = require(&paths.out, "out")?;
    let cfg = with_data(state.config.clone(), &data)?;
    let splits = splits_of(&cfg, &data)?;
    make_dir(dir)?;
    let n = EXPORT_SAMPLES.min(splits.test.len());
    let cells = attention_cells(&state, &splits.test, &(0..n).collect::<Vec<_>>())?;
    write_attention(&cells, dir.join("attention.tsv"))?;
    write_embeddings(&embedding_table(&state, &data)?, dir.join("embeddings.tsv"))?;
    write(&dir.join("config.json"), cfg.to_json())?;
    let _ = writeln!(out, "wrote {} attention rows and {} embeddings to {}", cells.len(), data.len(), dir.display());
    Ok(())
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = CliError::Usage(one_line(&e.to_string()));
            eprintln!("{}", err.line());
            return err.exit_code();
        }
    };
    let mut out = String::new();
    let result = execute(cli, &mut out);
    print!("{out}");
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
