//! Command-line front end: run configuration, overrides and subcommands.
//!
//! A run is described by one TOML file:
//!
//! ```toml
//! out_dir = "runs/toy"
//! deterministic = true
//!
//! [train]
//! variant = "prelax_rot"
//! epochs = 50
//!
//! [train.coefficients]
//! gamma = 0.1
//!
//! [augment]
//! crop_scale = [0.2, 1.0]
//!
//! [dataset]
//! kind = "synthetic"
//! n_train = 2048
//! n_test = 512
//! classes = 4
//! size = 32
//! seed = 7
//!
//! [eval]
//! pooling = "pre_projector"
//! k = 15
//! ```
//!
//! Every section and key is optional. `--set key=value` overrides are
//! applied on top; a bare key is looked up at the top level, then under
//! `train`, `train.coefficients`, `train.loss`, `train.model`, `augment` and
//! `eval`, and the first place where it is a known field wins.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::checkpoint::Checkpoint;
use crate::checks::{self, CheckOutcome};
use crate::data::{DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::eval::{extract_embeddings, knn_retrieve, linear_probe, transfer_probe, Pooling, ProbeConfig};
use crate::losses::set_r2s_sign_fault;
use crate::trainer::{pretrain, PretrainOptions, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const RETRIEVAL_FILE: &str = "retrieval.jsonl";
pub const DEFAULT_OUT_DIR: &str = "runs/latest";

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub probe: ProbeConfig,
    pub pooling: Pooling,
    /// Neighbours per query in retrieval mode.
    pub k: usize,
    /// Labeled target domain for transfer mode; the run's dataset if unset.
    pub transfer: Option<DatasetSpec>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            pooling: Pooling::default(),
            k: 15,
            transfer: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    pub deterministic: bool,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub dataset: DatasetSpec,
    pub eval: EvalSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        self.dataset.validate()?;
        self.eval.probe.validate()?;
        if self.eval.k == 0 {
            return Err(Error::config("eval.k", "must be positive"));
        }
        if let Some(t) = &self.eval.transfer {
            t.validate().map_err(|e| prefix_field(e, "eval.transfer"))?;
        }
        let size = self.train.model.input_size;
        if self.augment.output_size != size {
            return Err(Error::config(
                "augment.output_size",
                format!("{} differs from train.model.input_size {size}", self.augment.output_size),
            ));
        }
        if self.dataset.image_size() != size {
            return Err(Error::config(
                "train.model.input_size",
                format!("{size} differs from the dataset image size {}", self.dataset.image_size()),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Contract(format!("serializing config: {e}")))
    }

    /// Parses a config document and applies overrides in order.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_table(doc)
    }

    fn from_table(doc: toml::Table) -> Result<Self> {
        serde_path_to_error::deserialize(toml::Value::Table(doc)).map_err(|e| {
            let field = field_of(e.path(), e.inner());
            Error::config(field, e.inner().message().to_string())
        })
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let cfg = Self::from_toml_with_overrides(&text, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::InvalidConfig { field, reason } => {
            let rest = field.strip_prefix("dataset").unwrap_or(&field);
            Error::config(format!("{prefix}{rest}"), reason)
        }
        other => other,
    }
}

/// Best-effort dotted path of a deserialization error.
/// Dotted path of the offending key. For a missing field the path stops at
/// the enclosing table and the name only appears in the message.
fn field_of(path: &serde_path_to_error::Path, e: &toml::de::Error) -> String {
    let at = path.to_string();
    let at = if at == "." { String::new() } else { at };
    let msg = e.message();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(i) = msg.find(marker) {
            let rest = &msg[i + marker.len()..];
            if let Some(j) = rest.find('`') {
                let name = &rest[..j];
                return if at.is_empty() || at == name {
                    name.to_string()
                } else if at.ends_with(&format!(".{name}")) {
                    at
                } else {
                    format!("{at}.{name}")
                };
            }
        }
    }
    if at.is_empty() {
        "config".into()
    } else {
        at
    }
}

const OVERRIDE_SECTIONS: [&str; 7] = ["", "train", "train.coefficients", "train.loss", "train.model", "augment", "eval"];

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(doc: &mut toml::Table, path: &[&str], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = doc;
    for (i, p) in parents.iter().enumerate() {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path[..=i].join("."), "is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Applies one `key=value` override to a raw config document.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config("--set", format!("`{spec}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config("--set", format!("`{spec}` has an empty key")));
    }
    let value = parse_value(raw.trim());
    if key.contains('.') {
        let path: Vec<&str> = key.split('.').collect();
        return set_path(doc, &path, value);
    }
    // errors already in the document would otherwise be blamed on a trial
    RunConfig::from_table(doc.clone())?;
    for section in OVERRIDE_SECTIONS {
        let mut trial = doc.clone();
        let mut path: Vec<&str> = section.split('.').filter(|s| !s.is_empty()).collect();
        path.push(key);
        set_path(&mut trial, &path, value.clone())?;
        match RunConfig::from_table(trial.clone()) {
            Err(Error::InvalidConfig { field, .. }) if field == path.join(".") => {}
            // accepted, or a known field with a bad value, reported at load
            _ => {
                *doc = trial;
                return Ok(());
            }
        }
    }
    Err(Error::config(key, "unknown configuration key"))
}

#[derive(Debug, Parser)]
#[command(name = "prelax", version, about = "Residual-relaxed self-supervised pretraining and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder and write checkpoint, metrics and resolved config.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint with a linear probe, transfer probe or retrieval.
    Eval(EvalArgs),
    /// Shorthand for `eval --mode retrieve`.
    Retrieve(EvalArgs),
    /// Run the built-in property suites.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set variant=prelax_rot`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; takes precedence over the config file.
    #[arg(long, env = "PRELAX_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Single-threaded data pipeline and zero wall times, for byte-identical logs.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Linear,
    Transfer,
    Retrieve,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `pretrain`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum, default_value = "linear")]
    pub mode: EvalMode,
    /// Neighbours per query (retrieval); overrides `eval.k`.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Flip the sign of the residual term inside R2S.
    R2s,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Deliberately break a component to confirm the suites catch it.
    #[arg(long, value_enum)]
    pub inject_fault: Option<Fault>,
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a).map(|_| EXIT_OK),
        Command::Eval(a) => cmd_eval(&a, a.mode).map(|_| EXIT_OK),
        Command::Retrieve(a) => cmd_eval(&a, EvalMode::Retrieve).map(|_| EXIT_OK),
        Command::Check(a) => Ok(cmd_check(&a)),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve_out_dir(args: &ConfigArgs, cfg: &RunConfig) -> PathBuf {
    args.out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Trains from a config; returns the output directory.
pub fn cmd_pretrain(args: &PretrainArgs) -> Result<PathBuf> {
    let mut cfg = RunConfig::load(args.config.config.as_deref(), &args.config.overrides)?;
    cfg.deterministic |= args.deterministic;
    let out = resolve_out_dir(&args.config, &cfg);
    cfg.out_dir = Some(out.clone());
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let snapshot = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&snapshot, cfg.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;

    let mode = cfg.train.view_mode();
    log::info!(
        "variant {:?}, views {:?} (rotation view {}), target rule {:?}",
        cfg.train.variant,
        mode,
        if mode.has_rotation() { "active" } else { "off" },
        cfg.train.target_rule()
    );
    let data = cfg.dataset.load(Split::Train)?;
    log::info!("{} training images, {} classes", data.len(), data.class_count());
    let start = Instant::now();
    let outcome = pretrain(
        &cfg.train,
        &cfg.augment,
        &data,
        &PretrainOptions {
            out_dir: Some(out.clone()),
            deterministic: cfg.deterministic,
            prefetch: 0,
        },
    )?;
    let last = outcome.metrics.last().expect("at least one epoch");
    println!(
        "trained {} steps in {:.1}s: final loss {:.6}, residual norm {:.6}",
        outcome.steps,
        start.elapsed().as_secs_f64(),
        last.loss.total,
        last.residual_norm
    );
    println!("checkpoint: {}", out.join(CHECKPOINT_FILE).display());
    println!("metrics: {}", out.join(METRICS_FILE).display());
    Ok(out)
}

/// What an evaluation produced.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalReport {
    Accuracy(f64),
    Retrieval { path: PathBuf, queries: usize, label_precision: f64 },
}

pub fn cmd_eval(args: &EvalArgs, mode: EvalMode) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = RunConfig::load(args.config.config.as_deref(), &args.config.overrides)?;
    if args.config.config.is_none() {
        // no run config given: evaluate with the model the checkpoint describes
        cfg.train = ckpt.config.clone();
    }
    if let Some(k) = args.k {
        cfg.eval.k = k;
    }
    let (want, have) = (&cfg.train.model, &ckpt.config.model);
    if want.d_z != have.d_z {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with d_z = {} but the config asks for d_z = {}",
            have.d_z, want.d_z
        )));
    }
    if want != have {
        return Err(Error::Checkpoint(
            "checkpoint architecture differs from train.model in the config".into(),
        ));
    }
    let net = ckpt.restore()?;
    let pooling = cfg.eval.pooling;
    match mode {
        EvalMode::Linear => {
            let train = cfg.dataset.load(Split::Train)?;
            let test = cfg.dataset.load(Split::Test)?;
            let a = extract_embeddings(&net, &train, pooling)?;
            let b = extract_embeddings(&net, &test, pooling)?;
            let acc = linear_probe(&a, &b, &cfg.eval.probe)?;
            println!("{acc:.4}");
            Ok(EvalReport::Accuracy(acc))
        }
        EvalMode::Transfer => {
            let spec = cfg.eval.transfer.as_ref().unwrap_or(&cfg.dataset);
            let train = spec.load(Split::Train)?;
            let test = spec.load(Split::Test)?;
            let acc = transfer_probe(&net, &train, &test, pooling, &cfg.eval.probe)?;
            println!("{acc:.4}");
            Ok(EvalReport::Accuracy(acc))
        }
        EvalMode::Retrieve => {
            let gallery = cfg.dataset.load(Split::Train)?;
            let queries = cfg.dataset.load(Split::Test)?;
            let table = extract_embeddings(&net, &gallery, pooling)?;
            let q = extract_embeddings(&net, &queries, pooling)?;
            let k = cfg.eval.k;
            let out = resolve_out_dir(&args.config, &cfg);
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let path = out.join(RETRIEVAL_FILE);
            let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
            let mut hits = 0usize;
            for i in 0..q.len() {
                let ids = knn_retrieve(q.row(i), &table, k)?;
                let label = queries.labels()[i];
                hits += ids.iter().filter(|&&id| gallery.labels()[id as usize] == label).count();
                let line = serde_json::json!({ "query": q.ids()[i], "label": label, "neighbors": ids });
                writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
            }
            f.flush().map_err(|e| Error::io(&path, e))?;
            let precision = hits as f64 / (q.len() * k) as f64;
            println!("{} queries, k = {k}, label precision {precision:.4}", q.len());
            println!("results: {}", path.display());
            Ok(EvalReport::Retrieval {
                path,
                queries: q.len(),
                label_precision: precision,
            })
        }
    }
}

/// Prints the pass/fail table; returns 0 when every check passes.
pub fn cmd_check(args: &CheckArgs) -> i32 {
    if let Some(Fault::R2s) = args.inject_fault {
        set_r2s_sign_fault(true);
    }
    let start = Instant::now();
    let results = checks::run_all();
    set_r2s_sign_fault(false);
    print!("{}", format_table(&results));
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} checks, {} failed, {:.1}s",
        results.len(),
        failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    }
}

pub fn format_table(results: &[CheckOutcome]) -> String {
    let w_suite = results.iter().map(|r| r.suite.len()).max().unwrap_or(5).max(5);
    let w_name = results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<w_suite$}  {:<w_name$}  result  detail\n", "suite", "check");
    for r in results {
        s.push_str(&format!(
            "{:<w_suite$}  {:<w_name$}  {:<6}  {}\n",
            r.suite,
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        ));
    }
    s
}
