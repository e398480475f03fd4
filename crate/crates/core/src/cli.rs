//! Command-line driver.
//!
//! Every command reads a strict JSON config, writes plain CSV/JSON
//! artifacts into `--out`, and finishes with `manifest.json`, which holds
//! the fully resolved config, digests of every input and output file and
//! the wall-clock time. `revar replay` re-runs a manifest; apart from the
//! manifest's own timing field the outputs are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bilevel::{self, Method, Splits, Task, TrainConfig, TrainedPair};
use crate::data::{fmt_f64, read_csv, write_csv, write_text, Dataset, Standardizer};
use crate::error::{Result, RevarError};
use crate::experiments::{self, SelectiveConfig, StudyConfig, REFERENCE_R2, TABLE1_METHODS};
use crate::mcvar::McConfig;
use crate::metanet::{Conditioning, MetaCheckpoint, MetaNet};
use crate::nets::{self, NetCheckpoint, NetParams, OutputKind};
use crate::numkit::{Matrix, Rng};
use crate::seleval::{self, MetricsReport, ScoreKind};
use crate::synthgen::{self, Dims, ScenarioId, ScenarioSpec};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "revar", version, about = "Learned instance reweighting with a dropout-variance meta-objective")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed(s) named in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(Common),
    /// Train a predictor (and weighting network) on a data directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from the checkpoint in this directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Selective-prediction metrics of a trained checkpoint on test data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// g, sr, entropy or mcd; overrides the config.
        #[arg(long)]
        score: Option<ScoreKind>,
    },
    /// Target-weight fits of MWN, IBR and ReVar over the five scenarios.
    Table1(Common),
    /// Hardness share of the learned weights as the shift grows.
    Sweep(Common),
    /// g-score against softmax-response and MC-dropout on noisy labels.
    Selective(Common),
    /// Re-run the command recorded in a manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors are reported on stderr.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    let inv = match command {
        Command::Synth(c) => Invocation::from_file("synth", &c, None, None, None)?,
        Command::Train { common, data, checkpoint } => {
            Invocation::from_file("train", &common, Some(data), checkpoint, None)?
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            score,
        } => Invocation::from_file("eval", &common, Some(data), Some(checkpoint), score)?,
        Command::Table1(c) => Invocation::from_file("table1", &c, None, None, None)?,
        Command::Sweep(c) => Invocation::from_file("sweep", &c, None, None, None)?,
        Command::Selective(c) => Invocation::from_file("selective", &c, None, None, None)?,
        Command::Replay { manifest, out } => return replay(&manifest, &out),
    };
    execute(&inv)
}

// ---------------------------------------------------------------- configs

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Regression scenario; leave unset for the noisy three-class task.
    #[serde(default)]
    pub scenario: Option<ScenarioId>,
    /// Overrides the scenario's shift magnitude.
    #[serde(default)]
    pub s: Option<f64>,
    /// Selects the noisy three-class task at this noise level.
    #[serde(default)]
    pub noise_level: Option<f64>,
    #[serde(default)]
    pub dims: Dims,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    #[serde(default = "default_task")]
    pub task: Task,
    /// Standardize regression targets with training moments.
    #[serde(default = "default_true")]
    pub standardize_targets: bool,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_task() -> Task {
    Task::Regression
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score: ScoreKind,
    pub mc: McConfig,
    pub ece_bins: usize,
    /// Coverage grid of the rejection curve; the 20-point default when empty.
    pub coverages: Vec<f64>,
    pub selective_coverages: Vec<f64>,
    /// A regression prediction counts as correct when its absolute error,
    /// in standardized target units, is at most this.
    pub regression_tolerance: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score: ScoreKind::GScore,
            mc: McConfig::default(),
            ece_bins: seleval::DEFAULT_ECE_BINS,
            coverages: Vec::new(),
            selective_coverages: vec![0.5, 0.8, 1.0],
            regression_tolerance: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Table1Config {
    pub study: StudyConfig,
    pub seeds: Vec<u64>,
    pub scenarios: Vec<ScenarioId>,
    pub methods: Vec<Method>,
}

impl Default for Table1Config {
    fn default() -> Self {
        Table1Config {
            study: StudyConfig::default(),
            seeds: default_seeds(),
            scenarios: ScenarioId::ALL.to_vec(),
            methods: TABLE1_METHODS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub study: StudyConfig,
    pub seeds: Vec<u64>,
    pub scenarios: Vec<ScenarioId>,
    pub s_values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            study: StudyConfig::default(),
            seeds: default_seeds(),
            scenarios: vec![ScenarioId::S2, ScenarioId::S4],
            s_values: vec![5.0, 25.0, 50.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectiveRunConfig {
    pub selective: SelectiveConfig,
    pub seeds: Vec<u64>,
}

impl Default for SelectiveRunConfig {
    fn default() -> Self {
        SelectiveRunConfig {
            selective: SelectiveConfig::default(),
            seeds: default_seeds(),
        }
    }
}

/// Strict JSON parse that names the offending field on failure.
pub fn parse_config<T: DeserializeOwned>(value: &Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        RevarError::Config {
            field: if path == "." { "<root>".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })
}

fn seeds_nonempty(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(RevarError::Config {
            field: "seeds".into(),
            message: "need at least one seed".into(),
        });
    }
    Ok(())
}

// ------------------------------------------------------------- manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Fully resolved config, defaults filled in and `--seed` applied.
    pub config: Value,
    pub seed: Option<u64>,
    pub data: Option<String>,
    pub checkpoint: Option<String>,
    /// Input files keyed by role, e.g. `data/train.csv`.
    pub inputs: BTreeMap<String, FileDigest>,
    /// Output files relative to the output directory, in write order.
    pub outputs: Vec<FileDigest>,
    pub wall_clock_seconds: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| RevarError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// One resolved command, either from the command line or a manifest.
#[derive(Debug, Clone)]
struct Invocation {
    command: String,
    config: Value,
    seed: Option<u64>,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: PathBuf,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| RevarError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| RevarError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

impl Invocation {
    fn from_file(
        command: &str,
        common: &Common,
        data: Option<PathBuf>,
        checkpoint: Option<PathBuf>,
        score: Option<ScoreKind>,
    ) -> Result<Self> {
        let raw = read_json(&common.config)?;
        let seed = common.seed;
        // Resolve defaults and overrides now so the manifest is complete.
        let config = match command {
            "synth" => {
                let mut c: SynthConfig = parse_config(&raw)?;
                if let Some(s) = seed {
                    c.seed = s;
                }
                to_value(&c)?
            }
            "train" => {
                let mut c: TrainRunConfig = parse_config(&raw)?;
                if let Some(s) = seed {
                    c.train.seed = s;
                }
                to_value(&c)?
            }
            "eval" => {
                let mut c: EvalConfig = parse_config(&raw)?;
                if let Some(s) = seed {
                    c.seed = s;
                }
                if let Some(k) = score {
                    c.score = k;
                }
                to_value(&c)?
            }
            "table1" => {
                let mut c: Table1Config = parse_config(&raw)?;
                if let Some(s) = seed {
                    c.seeds = vec![s];
                }
                to_value(&c)?
            }
            "sweep" => {
                let mut c: SweepConfig = parse_config(&raw)?;
                if let Some(s) = seed {
                    c.seeds = vec![s];
                }
                to_value(&c)?
            }
            "selective" => {
                let mut c: SelectiveRunConfig = parse_config(&raw)?;
                if let Some(s) = seed {
                    c.seeds = vec![s];
                }
                to_value(&c)?
            }
            other => return Err(RevarError::param(format!("unknown command `{other}`"))),
        };
        Ok(Invocation {
            command: command.into(),
            config,
            seed,
            data,
            checkpoint,
            out: common.out.clone(),
        })
    }
}

/// Files under `dir` that a command reads, keyed by role.
fn input_files(role: &str, dir: &Path) -> Result<BTreeMap<String, FileDigest>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| RevarError::io(dir, e))?;
    let mut names: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| RevarError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name != MANIFEST && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    for name in names {
        let path = dir.join(&name);
        out.insert(
            format!("{role}/{name}"),
            FileDigest {
                path: path.display().to_string(),
                sha256: sha256_file(&path)?,
            },
        );
    }
    Ok(out)
}

fn execute(inv: &Invocation) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(&inv.out).map_err(|e| RevarError::io(&inv.out, e))?;
    let mut inputs = BTreeMap::new();
    if let Some(d) = &inv.data {
        inputs.extend(input_files("data", d)?);
    }
    if let Some(c) = &inv.checkpoint {
        inputs.extend(input_files("checkpoint", c)?);
    }
    let data = inv.data.as_deref();
    let checkpoint = inv.checkpoint.as_deref();
    let written = match inv.command.as_str() {
        "synth" => cmd_synth(&parse_config(&inv.config)?, &inv.out)?,
        "train" => cmd_train(
            &parse_config(&inv.config)?,
            data.ok_or_else(|| missing("--data"))?,
            checkpoint,
            &inv.out,
        )?,
        "eval" => cmd_eval(
            &parse_config(&inv.config)?,
            checkpoint.ok_or_else(|| missing("--checkpoint"))?,
            data.ok_or_else(|| missing("--data"))?,
            &inv.out,
        )?,
        "table1" => cmd_table1(&parse_config(&inv.config)?, &inv.out)?,
        "sweep" => cmd_sweep(&parse_config(&inv.config)?, &inv.out)?,
        "selective" => cmd_selective(&parse_config(&inv.config)?, &inv.out)?,
        other => return Err(RevarError::param(format!("unknown command `{other}`"))),
    };
    let mut outputs = Vec::with_capacity(written.len());
    for name in written {
        let path = inv.out.join(&name);
        outputs.push(FileDigest {
            sha256: sha256_file(&path)?,
            path: name,
        });
    }
    let manifest = RunManifest {
        command: inv.command.clone(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: inv.config.clone(),
        seed: inv.seed,
        data: inv.data.as_ref().map(|p| p.display().to_string()),
        checkpoint: inv.checkpoint.as_ref().map(|p| p.display().to_string()),
        inputs,
        outputs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&inv.out.join(MANIFEST), &manifest)
}

fn missing(flag: &str) -> RevarError {
    RevarError::Config {
        field: flag.into(),
        message: "required for this command".into(),
    }
}

/// Re-runs a manifest into `out` after checking that its inputs are
/// unchanged.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest: RunManifest = serde_json::from_value(read_json(manifest_path)?).map_err(|e| RevarError::Format {
        path: manifest_path.display().to_string(),
        message: e.to_string(),
    })?;
    for (role, file) in &manifest.inputs {
        let now = sha256_file(Path::new(&file.path))?;
        if now != file.sha256 {
            return Err(RevarError::Validation(format!(
                "input {role} ({}) changed since the manifest was written",
                file.path
            )));
        }
    }
    let inv = Invocation {
        command: manifest.command.clone(),
        config: manifest.config.clone(),
        seed: manifest.seed,
        data: manifest.data.as_ref().map(PathBuf::from),
        checkpoint: manifest.checkpoint.as_ref().map(PathBuf::from),
        out: out.to_path_buf(),
    };
    execute(&inv)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

// ---------------------------------------------------------------- synth

pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<Vec<String>> {
    match (cfg.scenario, cfg.noise_level) {
        (Some(id), None) => {
            let mut spec = ScenarioSpec::preset(id);
            if let Some(s) = cfg.s {
                spec = spec.with_shift(s);
            }
            spec.validate()?;
            let bundle = synthgen::generate_world(&spec, cfg.dims, cfg.n_train, cfg.n_val, cfg.n_test, cfg.seed)
                .map_err(as_config)?;
            synthgen::write_bundle(&bundle, cfg.seed, out)?;
            Ok(["train.csv", "val.csv", "test.csv", "params.json"].map(String::from).to_vec())
        }
        (None, Some(noise)) => {
            if cfg.s.is_some() {
                return Err(RevarError::Config {
                    field: "s".into(),
                    message: "shift applies to regression scenarios only".into(),
                });
            }
            let b = synthgen::generate_noisy_classification(cfg.dims, cfg.n_train, cfg.n_val, cfg.n_test, noise, cfg.seed)
                .map_err(as_config)?;
            let d = cfg.dims.total();
            let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
            header.extend(["y", "clean", "flip_prob"].map(String::from));
            for (name, split) in [("train", &b.train), ("val", &b.val), ("test", &b.test)] {
                let rows: Vec<Vec<f64>> = (0..split.x.rows())
                    .map(|i| {
                        let mut r = split.x.row(i).to_vec();
                        r.extend([split.y[i], split.clean[i], split.flip_prob[i]]);
                        r
                    })
                    .collect();
                write_csv(&out.join(format!("{name}.csv")), &header, &rows)?;
            }
            Ok(["train.csv", "val.csv", "test.csv"].map(String::from).to_vec())
        }
        (Some(_), Some(_)) => Err(RevarError::Config {
            field: "noise_level".into(),
            message: "set either `scenario` or `noise_level`, not both".into(),
        }),
        (None, None) => Err(RevarError::Config {
            field: "scenario".into(),
            message: "missing; set `scenario` (S1..S5) or `noise_level`".into(),
        }),
    }
}

/// Generator parameter errors come from config values.
fn as_config(e: RevarError) -> RevarError {
    match e {
        RevarError::Param(m) => RevarError::Config {
            field: "<root>".into(),
            message: m,
        },
        other => other,
    }
}

// ---------------------------------------------------------------- data

/// Labeled splits read from a data directory, in raw units.
#[derive(Debug, Clone)]
pub struct RawData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
    /// Present when the directory holds a synthetic regression bundle.
    pub bundle: Option<synthgen::SyntheticBundle>,
}

/// Reads `x<k>` feature columns and the `y` column; other columns are
/// ignored.
pub fn read_labeled(path: &Path) -> Result<Dataset> {
    let (header, rows) = read_csv(path)?;
    let fmt = |message: String| RevarError::Format {
        path: path.display().to_string(),
        message,
    };
    let features: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.len() > 1 && h.starts_with('x') && h[1..].bytes().all(|b| b.is_ascii_digit()))
        .map(|(i, _)| i)
        .collect();
    let y_col = header
        .iter()
        .position(|h| h == "y")
        .ok_or_else(|| fmt("no `y` column".into()))?;
    if features.is_empty() {
        return Err(fmt("no `x<k>` feature columns".into()));
    }
    let n = rows.len();
    let mut data = Vec::with_capacity(n * features.len());
    let mut y = Vec::with_capacity(n);
    for r in &rows {
        data.extend(features.iter().map(|&j| r[j]));
        y.push(r[y_col]);
    }
    Dataset::new(Matrix::from_vec(n, features.len(), data)?, y)
}

pub fn read_data_dir(dir: &Path) -> Result<RawData> {
    if dir.join("params.json").is_file() {
        let (bundle, _) = synthgen::read_bundle(dir)?;
        return Ok(RawData {
            train: bundle.train.dataset(),
            val: bundle.val.dataset(),
            test: Some(bundle.test.dataset()),
            bundle: Some(bundle),
        });
    }
    let test_path = dir.join("test.csv");
    Ok(RawData {
        train: read_labeled(&dir.join("train.csv"))?,
        val: read_labeled(&dir.join("val.csv"))?,
        test: if test_path.is_file() {
            Some(read_labeled(&test_path)?)
        } else {
            None
        },
        bundle: None,
    })
}

fn check_labels(task: Task, data: &Dataset, name: &str) -> Result<()> {
    if let Task::Classification { n_classes } = task {
        if let Some(bad) = data
            .y
            .iter()
            .find(|&&v| v < 0.0 || v.fract() != 0.0 || v as usize >= n_classes)
        {
            return Err(RevarError::Validation(format!(
                "{name} label {bad} is not a class index below {n_classes}"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- train

/// Everything needed to reuse a trained pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub method: Method,
    pub task: Task,
    pub standardizer: Standardizer,
    pub classifier: NetCheckpoint,
    pub meta: Option<MetaCheckpoint>,
}

pub const CHECKPOINT: &str = "checkpoint.json";

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(CHECKPOINT);
    serde_json::from_value(read_json(&path)?).map_err(|e| RevarError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn cmd_train(cfg: &TrainRunConfig, data_dir: &Path, resume: Option<&Path>, out: &Path) -> Result<Vec<String>> {
    cfg.train.validate()?;
    let raw = read_data_dir(data_dir)?;
    check_labels(cfg.task, &raw.train, "training")?;
    check_labels(cfg.task, &raw.val, "validation")?;
    let standardize_y = cfg.standardize_targets && cfg.task == Task::Regression;
    let st = Standardizer::fit(&raw.train, standardize_y);
    let splits = Splits {
        train: st.transform(&raw.train),
        val: st.transform(&raw.val),
        unlabeled: raw.test.as_ref().map(|t| st.transform_x(&t.x)),
        task: cfg.task,
    };
    let initial = match resume {
        Some(dir) => {
            let ck = read_checkpoint(dir)?;
            if ck.method != cfg.train.method {
                return Err(RevarError::Config {
                    field: "train.method".into(),
                    message: format!(
                        "checkpoint was trained with `{}`, config asks for `{}`",
                        ck.method.as_str(),
                        cfg.train.method.as_str()
                    ),
                });
            }
            if ck.task != cfg.task {
                return Err(RevarError::Config {
                    field: "task".into(),
                    message: "checkpoint was trained for a different task".into(),
                });
            }
            let meta = ck.meta.as_ref().map(MetaNet::from_checkpoint).transpose()?;
            Some((NetParams::from_checkpoint(&ck.classifier)?, meta))
        }
        None => None,
    };
    let pair = bilevel::train_from(&splits, &cfg.train, initial)?;
    let weights = experiments::training_weights(&pair, &splits.train)?;

    let ck = Checkpoint {
        method: pair.method,
        task: cfg.task,
        standardizer: st,
        classifier: pair.classifier.to_checkpoint(),
        meta: pair.meta.as_ref().map(MetaNet::to_checkpoint),
    };
    write_json(&out.join(CHECKPOINT), &ck)?;
    write_history(&out.join("history.csv"), &pair)?;
    write_csv(
        &out.join("weights.csv"),
        &["weight".to_string()],
        &weights.iter().map(|&w| vec![w]).collect::<Vec<_>>(),
    )?;
    Ok([CHECKPOINT, "history.csv", "weights.csv"].map(String::from).to_vec())
}

fn write_history(path: &Path, pair: &TrainedPair) -> Result<()> {
    let mut s = csv_line(&["epoch", "train_loss", "meta_loss", "weight_mean", "weight_sd"].map(String::from));
    for h in &pair.history {
        s.push_str(&csv_line(&[
            h.epoch.to_string(),
            fmt_f64(h.train_loss),
            fmt_f64(h.meta_loss),
            fmt_f64(h.weight_mean),
            fmt_f64(h.weight_sd),
        ]));
    }
    write_text(path, &s)
}

// ---------------------------------------------------------------- eval

pub fn cmd_eval(cfg: &EvalConfig, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<Vec<String>> {
    cfg.mc.validate()?;
    if !(cfg.regression_tolerance >= 0.0) {
        return Err(RevarError::Config {
            field: "regression_tolerance".into(),
            message: "must be non-negative".into(),
        });
    }
    let grid = if cfg.coverages.is_empty() {
        seleval::default_grid()
    } else {
        cfg.coverages.clone()
    };
    let ck = read_checkpoint(checkpoint)?;
    let net = NetParams::from_checkpoint(&ck.classifier)?;
    let meta = ck.meta.as_ref().map(MetaNet::from_checkpoint).transpose()?;
    let raw = read_data_dir(data_dir)?;
    let test_raw = raw.test.as_ref().ok_or_else(|| RevarError::Io {
        path: data_dir.join("test.csv").display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "evaluation needs a test split"),
    })?;
    if test_raw.dim() != net.input_dim() {
        return Err(RevarError::Dimension {
            context: "test features vs checkpoint",
            expected: net.input_dim(),
            got: test_raw.dim(),
        });
    }
    check_labels(ck.task, test_raw, "test")?;
    let test = ck.standardizer.transform(test_raw);

    let rng = Rng::new(cfg.seed).derive(0xe7a1);
    let uncertainty = seleval::uncertainty_scores(cfg.score, &net, meta.as_ref(), &test.x, &cfg.mc, &rng)?;
    let (correct, confidence) = match net.output_kind() {
        OutputKind::Softmax => {
            let preds = seleval::predictions(&net, &test.x)?;
            (
                preds.iter().zip(&test.y).map(|(p, &y)| p.0 as f64 == y).collect::<Vec<_>>(),
                Some(preds.iter().map(|p| p.1).collect::<Vec<_>>()),
            )
        }
        _ => {
            let ok: Result<Vec<bool>> = (0..test.len())
                .map(|i| Ok((nets::forward(&net, test.x.row(i), None)?[0] - test.y[i]).abs() <= cfg.regression_tolerance))
                .collect();
            (ok?, None)
        }
    };
    let curve = seleval::rejection_curve(&uncertainty, &correct, &grid, cfg.score)?;
    let mut report = MetricsReport {
        auarc: seleval::auarc(&curve),
        ece: confidence
            .as_ref()
            .map(|c| seleval::ece(c, &correct, cfg.ece_bins))
            .transpose()?,
        selective_ece: BTreeMap::new(),
        r2_by_scenario: BTreeMap::new(),
        spearman_by_scenario: BTreeMap::new(),
        seed: cfg.seed,
        config_digest: seleval::config_digest(&(cfg, &ck))?,
    };
    if let Some(conf) = &confidence {
        for &c in &cfg.selective_coverages {
            report.selective_ece.insert(
                MetricsReport::coverage_key(c),
                seleval::selective_ece(conf, &correct, &uncertainty, c, cfg.ece_bins)?,
            );
        }
    }
    // Target-weight fit for synthetic worlds whose feature varies within a world.
    if let (Some(bundle), Some(m)) = (&raw.bundle, &meta) {
        if m.conditioning == Conditioning::Instance && !bundle.spec.id.needs_multi_world() {
            let train = ck.standardizer.transform(&bundle.train.dataset());
            let w = bilevel::instance_weights(m, &net, &train)?;
            let fit = seleval::scenario_fit(bundle, &w, None)?;
            let key = bundle.spec.id.to_string();
            report.r2_by_scenario.insert(key.clone(), fit.r2);
            report.spearman_by_scenario.insert(key, fit.spearman);
        }
    }
    report.validate()?;

    write_text(&out.join("curve.csv"), &seleval::curve_csv(&curve))?;
    let rows: Vec<Vec<f64>> = uncertainty
        .iter()
        .zip(&correct)
        .map(|(&u, &ok)| vec![u, ok as u8 as f64])
        .collect();
    write_csv(&out.join("scores.csv"), &["uncertainty", "correct"].map(String::from), &rows)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_text(&out.join("metrics.csv"), &seleval::metrics_csv(&report))?;
    Ok(["curve.csv", "scores.csv", "metrics.json", "metrics.csv"].map(String::from).to_vec())
}

// ---------------------------------------------------------------- studies

fn csv_line(cells: &[String]) -> String {
    let mut s = cells.join(",");
    s.push('\n');
    s
}

pub fn cmd_table1(cfg: &Table1Config, out: &Path) -> Result<Vec<String>> {
    seeds_nonempty(&cfg.seeds)?;
    if cfg.scenarios.is_empty() || cfg.methods.is_empty() {
        return Err(RevarError::Config {
            field: if cfg.scenarios.is_empty() { "scenarios" } else { "methods" }.into(),
            message: "must not be empty".into(),
        });
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        rows.extend(experiments::table1_seed(&cfg.study, seed, &cfg.scenarios, &cfg.methods)?);
    }

    let mut runs = csv_line(&["seed", "scenario", "method", "r2", "spearman", "weight_cv", "n_points"].map(String::from));
    for r in &rows {
        runs.push_str(&csv_line(&[
            r.seed.to_string(),
            r.scenario.to_string(),
            r.method.as_str().to_string(),
            fmt_f64(r.r2),
            fmt_f64(r.spearman),
            fmt_f64(r.weight_cv),
            r.fit.n_points.to_string(),
        ]));
    }

    // One row per scenario, one column block per method.
    let mut header = vec!["scenario".to_string()];
    for m in &cfg.methods {
        for &seed in &cfg.seeds {
            header.push(format!("{}_r2_seed{seed}", m.as_str()));
        }
        header.push(format!("{}_r2_mean", m.as_str()));
    }
    for m in TABLE1_METHODS {
        header.push(format!("reference_{}", m.as_str()));
    }
    header.extend(["ordering_seeds", "ordering_mean"].map(String::from));
    let mut table = csv_line(&header);
    for &sc in &cfg.scenarios {
        let mut cells = vec![sc.to_string()];
        let mut means = BTreeMap::new();
        for &m in &cfg.methods {
            let vals: Vec<f64> = cfg
                .seeds
                .iter()
                .map(|&seed| {
                    rows.iter()
                        .find(|r| r.seed == seed && r.scenario == sc && r.method == m)
                        .map(|r| r.r2)
                        .unwrap_or(f64::NAN)
                })
                .collect();
            cells.extend(vals.iter().map(|&v| fmt_f64(v)));
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            means.insert(m.as_str(), mean);
            cells.push(fmt_f64(mean));
        }
        let reference = REFERENCE_R2.iter().find(|(id, _)| *id == sc).map(|(_, v)| *v);
        for k in 0..TABLE1_METHODS.len() {
            cells.push(reference.map(|p| fmt_f64(p[k])).unwrap_or_default());
        }
        let held = cfg
            .seeds
            .iter()
            .filter(|&&seed| {
                let sub: Vec<_> = rows
                    .iter()
                    .filter(|r| r.seed == seed && r.scenario == sc)
                    .cloned()
                    .collect();
                experiments::ordering_holds(&sub)
            })
            .count();
        cells.push(format!("{held}/{}", cfg.seeds.len()));
        let ordered = match (means.get("revar"), means.get("ibr"), means.get("mwn")) {
            (Some(o), Some(i), Some(m)) => o > i && i > m,
            _ => false,
        };
        cells.push(ordered.to_string());
        table.push_str(&csv_line(&cells));
    }
    write_text(&out.join("table1.csv"), &table)?;
    write_text(&out.join("table1_runs.csv"), &runs)?;
    Ok(["table1.csv", "table1_runs.csv"].map(String::from).to_vec())
}

pub fn cmd_sweep(cfg: &SweepConfig, out: &Path) -> Result<Vec<String>> {
    seeds_nonempty(&cfg.seeds)?;
    let rows = experiments::sweep(&cfg.study, &cfg.scenarios, &cfg.s_values, &cfg.seeds)?;
    let mut s = csv_line(&["seed", "scenario", "s", "lambda1", "lambda2", "intercept", "share", "r2"].map(String::from));
    for r in &rows {
        let sh = &r.share;
        s.push_str(&csv_line(&[
            r.seed.to_string(),
            r.scenario.to_string(),
            fmt_f64(sh.s),
            fmt_f64(sh.lambda1),
            fmt_f64(sh.lambda2),
            fmt_f64(sh.intercept),
            fmt_f64(sh.share),
            fmt_f64(sh.r2),
        ]));
    }
    write_text(&out.join("sweep.csv"), &s)?;
    Ok(vec!["sweep.csv".into()])
}

pub fn cmd_selective(cfg: &SelectiveRunConfig, out: &Path) -> Result<Vec<String>> {
    seeds_nonempty(&cfg.seeds)?;
    let header = [
        "seed",
        "auarc_g",
        "auarc_sr",
        "auarc_entropy",
        "auarc_mcd",
        "accuracy_revar",
        "accuracy_erm",
        "ece_revar",
        "ece_erm",
        "g_wins",
    ]
    .map(String::from);
    let mut s = csv_line(&header);
    for &seed in &cfg.seeds {
        let r = experiments::selective_study(&cfg.selective, seed)?;
        s.push_str(&csv_line(&[
            seed.to_string(),
            fmt_f64(r.auarc_g),
            fmt_f64(r.auarc_sr),
            fmt_f64(r.auarc_entropy),
            fmt_f64(r.auarc_mcd),
            fmt_f64(r.accuracy_revar),
            fmt_f64(r.accuracy_erm),
            fmt_f64(r.ece_revar),
            fmt_f64(r.ece_erm),
            r.g_wins().to_string(),
        ]));
    }
    write_text(&out.join("selective.csv"), &s)?;
    Ok(vec!["selective.csv".into()])
}
