//! Operator surface: subcommands for dataset generation, training,
//! evaluation, attack export, and diagnostics, plus the flat key=value
//! config format and the run-directory layout.
//!
//! Runs are reproducible artifacts: the resolved config is echoed into the
//! run directory, metrics land in a JSON-lines file, per-epoch summaries
//! in a CSV, and nothing written depends on wall-clock time, so identical
//! invocations produce byte-identical outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::attacks::{self, AttackConfig, AttackNorm};
use crate::data::{self, AugmentationConfig, DataError, Dataset};
use crate::diagnostics::{self, Granularity, MetricRecord};
use crate::losses::{LossAssembly, Variant};
use crate::nn::{Arch, Branch, Mode, ModelState};
use crate::tensor::Tape;
use crate::trainer::{self, TrainConfig, TrainError, Trainer};

/// Errors grouped by exit code: 2 for configuration problems, 3 for a
/// numeric abort, 4 for I/O failures.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Data(DataError::Io(io)) => CliError::Io(io.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<crate::nn::ModelError> for CliError {
    fn from(e: crate::nn::ModelError) -> Self {
        match e {
            crate::nn::ModelError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<crate::attacks::AttackError> for CliError {
    fn from(e: crate::attacks::AttackError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<crate::losses::LossError> for CliError {
    fn from(e: crate::losses::LossError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<crate::diagnostics::DiagnosticsError> for CliError {
    fn from(e: crate::diagnostics::DiagnosticsError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<crate::tensor::TensorError> for CliError {
    fn from(e: crate::tensor::TensorError) -> Self {
        CliError::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Every config key with its default. A parsed config may only use keys
/// from this table.
pub const CONFIG_DEFAULTS: &[(&str, &str)] = &[
    ("model.seed", "0"),
    ("arch.widths", "16,32,64"),
    ("arch.blocks_per_stage", "2"),
    ("trainer.epochs", "30"),
    ("trainer.base_lr", "0.05"),
    ("trainer.lr_drop_epochs", "22,27"),
    ("trainer.lr_drop_factor", "0.1"),
    ("trainer.momentum", "0.9"),
    ("trainer.weight_decay", "5e-4"),
    ("trainer.batch_size", "64"),
    ("trainer.auto_balance", "auto"),
    ("trainer.swa_start", "none"),
    ("trainer.seed", "0"),
    ("loss.variant", "v3"),
    ("loss.alpha", "1"),
    ("loss.beta", "1"),
    ("loss.gamma", "30"),
    ("loss.tags", "all"),
    ("attack.norm", "linf"),
    ("attack.epsilon", "8/255"),
    ("attack.step_size", "4/255"),
    ("attack.iterations", "3"),
    ("attack.random_init", "true"),
    ("attack.seed", "0"),
    ("eval_attack.norm", "linf"),
    ("eval_attack.epsilon", "8/255"),
    ("eval_attack.step_size", "2/255"),
    ("eval_attack.iterations", "20"),
    ("eval_attack.random_init", "true"),
    ("eval_attack.seed", "1"),
    ("data.train", ""),
    ("data.test", ""),
    ("augment.enabled", "false"),
    ("augment.pad_crop", "4"),
    ("augment.horizontal_flip", "true"),
    ("augment.seed", "0"),
    ("eval.per_epoch", "clean"),
    ("eval.branch", "main"),
];

/// Parses `key = value` lines. `#` starts a comment, blank lines are
/// skipped, duplicate keys are rejected.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "config line {}: expected key = value, got '{raw}'",
                i + 1
            )));
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(CliError::Config(format!("config line {}: empty key", i + 1)));
        }
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Config(format!(
                "config line {}: duplicate key '{key}'",
                i + 1
            )));
        }
    }
    Ok(map)
}

/// Overlays user keys onto the defaults, rejecting unknown keys.
pub fn resolve_config(user: &BTreeMap<String, String>) -> Result<BTreeMap<String, String>> {
    let mut map: BTreeMap<String, String> = CONFIG_DEFAULTS
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    for (k, v) in user {
        if !map.contains_key(k) {
            return Err(CliError::Config(format!("unknown config key '{k}'")));
        }
        map.insert(k.clone(), v.clone());
    }
    Ok(map)
}

/// Canonical echo of a resolved config: one sorted `key = value` line per
/// key. Re-parsing the echo resolves to the same configuration.
pub fn echo_config(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

/// Parses a number that may be written as a fraction like `8/255`.
pub fn parse_number(key: &str, s: &str) -> Result<f64> {
    let bad = || CliError::Config(format!("{key}: cannot parse number '{s}'"));
    if let Some((a, b)) = s.split_once('/') {
        let num: f64 = a.trim().parse().map_err(|_| bad())?;
        let den: f64 = b.trim().parse().map_err(|_| bad())?;
        if den == 0.0 || !num.is_finite() || !den.is_finite() {
            return Err(bad());
        }
        Ok(num / den)
    } else {
        let v: f64 = s.trim().parse().map_err(|_| bad())?;
        if !v.is_finite() {
            return Err(bad());
        }
        Ok(v)
    }
}

fn parse_usize(key: &str, s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse integer '{s}'")))
}

fn parse_u64(key: &str, s: &str) -> Result<u64> {
    s.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse integer '{s}'")))
}

fn parse_bool(key: &str, s: &str) -> Result<bool> {
    match s.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(CliError::Config(format!(
            "{key}: expected true or false, got '{other}'"
        ))),
    }
}

fn parse_usize_list(key: &str, s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| parse_usize(key, p)).collect()
}

fn parse_norm(key: &str, s: &str) -> Result<AttackNorm> {
    match s.trim() {
        "linf" => Ok(AttackNorm::Linf),
        "l2" => Ok(AttackNorm::L2),
        other => Err(CliError::Config(format!(
            "{key}: expected linf or l2, got '{other}'"
        ))),
    }
}

fn parse_branch(key: &str, s: &str) -> Result<Branch> {
    match s.trim() {
        "main" => Ok(Branch::Main),
        "aux" => Ok(Branch::Aux),
        other => Err(CliError::Config(format!(
            "{key}: expected main or aux, got '{other}'"
        ))),
    }
}

/// How much evaluation to run at the end of every epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerEpochEval {
    None,
    Clean,
    Robust,
}

/// A fully resolved training run, short of the datasets.
#[derive(Debug, Clone)]
pub struct ResolvedTrain {
    pub map: BTreeMap<String, String>,
    pub model_seed: u64,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub cfg: TrainConfig,
    pub tags_raw: String,
    pub train_path: String,
    pub test_path: String,
    pub augment: Option<AugmentationConfig>,
    pub per_epoch_eval: PerEpochEval,
    pub eval_branch: Branch,
}

fn attack_from_map(map: &BTreeMap<String, String>, prefix: &str, branch: Branch) -> Result<AttackConfig> {
    let key = |suffix: &str| format!("{prefix}.{suffix}");
    let get = |suffix: &str| map.get(&key(suffix)).cloned().unwrap_or_default();
    Ok(AttackConfig {
        norm: parse_norm(&key("norm"), &get("norm"))?,
        epsilon: parse_number(&key("epsilon"), &get("epsilon"))?,
        step_size: parse_number(&key("step_size"), &get("step_size"))?,
        iterations: parse_usize(&key("iterations"), &get("iterations"))?,
        random_init: parse_bool(&key("random_init"), &get("random_init"))?,
        loss_kind: Default::default(),
        branch,
        seed: parse_u64(&key("seed"), &get("seed"))?,
    })
}

/// Turns a resolved key=value map into the structured run description.
pub fn resolve_train(map: &BTreeMap<String, String>) -> Result<ResolvedTrain> {
    let get = |k: &str| map.get(k).cloned().unwrap_or_default();

    let variant: Variant = get("loss.variant")
        .parse()
        .map_err(|e: String| CliError::Config(format!("loss.variant: {e}")))?;
    let loss = LossAssembly {
        variant,
        alpha: parse_number("loss.alpha", &get("loss.alpha"))?,
        beta: parse_number("loss.beta", &get("loss.beta"))?,
        gamma: parse_number("loss.gamma", &get("loss.gamma"))?,
        capture_tags: Vec::new(),
    };
    let auto_balance = match get("trainer.auto_balance").as_str() {
        "auto" => variant == Variant::V3,
        other => parse_bool("trainer.auto_balance", other)?,
    };
    let swa_start = match get("trainer.swa_start").as_str() {
        "none" => None,
        other => Some(parse_usize("trainer.swa_start", other)?),
    };
    let cfg = TrainConfig {
        epochs: parse_usize("trainer.epochs", &get("trainer.epochs"))?,
        base_lr: parse_number("trainer.base_lr", &get("trainer.base_lr"))?,
        lr_drop_epochs: parse_usize_list("trainer.lr_drop_epochs", &get("trainer.lr_drop_epochs"))?,
        lr_drop_factor: parse_number("trainer.lr_drop_factor", &get("trainer.lr_drop_factor"))?,
        momentum: parse_number("trainer.momentum", &get("trainer.momentum"))?,
        weight_decay: parse_number("trainer.weight_decay", &get("trainer.weight_decay"))?,
        batch_size: parse_usize("trainer.batch_size", &get("trainer.batch_size"))?,
        attack: attack_from_map(map, "attack", Branch::Main)?,
        loss,
        auto_balance,
        swa_start,
        seed: parse_u64("trainer.seed", &get("trainer.seed"))?,
        eval_attack: attack_from_map(map, "eval_attack", Branch::Main)?,
    };
    let augment = if parse_bool("augment.enabled", &get("augment.enabled"))? {
        Some(AugmentationConfig {
            pad_crop: parse_usize("augment.pad_crop", &get("augment.pad_crop"))?,
            horizontal_flip: parse_bool("augment.horizontal_flip", &get("augment.horizontal_flip"))?,
            seed: parse_u64("augment.seed", &get("augment.seed"))?,
        })
    } else {
        None
    };
    let per_epoch_eval = match get("eval.per_epoch").as_str() {
        "none" => PerEpochEval::None,
        "clean" => PerEpochEval::Clean,
        "robust" => PerEpochEval::Robust,
        other => {
            return Err(CliError::Config(format!(
                "eval.per_epoch: expected none, clean, or robust, got '{other}'"
            )))
        }
    };
    Ok(ResolvedTrain {
        map: map.clone(),
        model_seed: parse_u64("model.seed", &get("model.seed"))?,
        widths: parse_usize_list("arch.widths", &get("arch.widths"))?,
        blocks_per_stage: parse_usize("arch.blocks_per_stage", &get("arch.blocks_per_stage"))?,
        cfg,
        tags_raw: get("loss.tags"),
        train_path: get("data.train"),
        test_path: get("data.test"),
        augment,
        per_epoch_eval,
        eval_branch: parse_branch("eval.branch", &get("eval.branch"))?,
    })
}

impl ResolvedTrain {
    /// Architecture implied by the config and a concrete dataset.
    pub fn arch_for(&self, ds: &Dataset) -> Result<Arch> {
        if ds.height != ds.width {
            return Err(CliError::Config(format!(
                "dataset images are {}x{}, expected square",
                ds.height, ds.width
            )));
        }
        let arch = Arch {
            in_channels: ds.channels,
            image_hw: ds.height,
            widths: self.widths.clone(),
            blocks_per_stage: self.blocks_per_stage,
            classes: ds.classes,
        };
        arch.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(arch)
    }

    /// Expands `loss.tags` against the architecture's known tags.
    pub fn capture_tags(&self, arch: &Arch) -> Result<Vec<String>> {
        let known = arch.tags();
        if self.tags_raw.trim() == "all" {
            return Ok(known);
        }
        let mut tags = Vec::new();
        for t in self.tags_raw.split(',') {
            let t = t.trim().to_string();
            if !known.contains(&t) {
                return Err(CliError::Config(format!(
                    "loss.tags: unknown tag '{t}', expected one of {known:?} or all"
                )));
            }
            tags.push(t);
        }
        Ok(tags)
    }
}

#[derive(Parser, Debug)]
#[command(name = "advlab", version, about = "Adversarial training laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct AttackFlags {
    #[arg(long = "attack.norm", default_value = "linf")]
    pub norm: String,
    #[arg(long = "attack.epsilon", default_value = "8/255")]
    pub epsilon: String,
    #[arg(long = "attack.step-size", default_value = "2/255")]
    pub step_size: String,
    #[arg(long = "attack.iterations", default_value_t = 20)]
    pub iterations: usize,
    #[arg(long = "attack.random-init", default_value_t = true, action = ArgAction::Set)]
    pub random_init: bool,
    #[arg(long = "attack.seed", default_value_t = 1)]
    pub seed: u64,
}

impl AttackFlags {
    fn to_config(&self, branch: Branch) -> Result<AttackConfig> {
        let cfg = AttackConfig {
            norm: parse_norm("attack.norm", &self.norm)?,
            epsilon: parse_number("attack.epsilon", &self.epsilon)?,
            step_size: parse_number("attack.step-size", &self.step_size)?,
            iterations: self.iterations,
            random_init: self.random_init,
            loss_kind: Default::default(),
            branch,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic grating dataset pair (train and test).
    GenData {
        /// Directory receiving train.bin and test.bin.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long = "per-class-train", default_value_t = 500)]
        per_class_train: usize,
        #[arg(long = "per-class-test", default_value_t = 200)]
        per_class_test: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
    /// Train a model from a config file into a run directory.
    Train {
        /// Path to a key=value config file.
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to $ADVLAB_RUN_ROOT/<config stem>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report clean and robust accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "main")]
        branch: String,
        /// Skip the attack and report clean accuracy twice.
        #[arg(long = "no-attack")]
        no_attack: bool,
        #[command(flatten)]
        attack: AttackFlags,
    },
    /// Craft adversarial examples and emit them as JSON lines.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "main")]
        branch: String,
        /// Cap on the number of samples attacked.
        #[arg(long)]
        limit: Option<usize>,
        /// Leave the perturbed pixels out of each record.
        #[arg(long = "no-pixels")]
        no_pixels: bool,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        attack: AttackFlags,
    },
    /// Run measurement instruments over a checkpoint or a whole run.
    Diagnose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "run-dir")]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Instruments to run; defaults depend on the input kind.
        #[arg(long = "instrument")]
        instruments: Vec<String>,
        /// Loss variant, used to pick the clean branch and loss shape.
        #[arg(long, default_value = "v3")]
        variant: String,
        /// Write per-instrument CSV series from a run's metrics.
        #[arg(long = "export-plot")]
        export_plot: bool,
        /// JSON-lines output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        attack: AttackFlags,
    },
}

/// Entry point used by the binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(2) };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Runs one subcommand to completion.
pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            classes,
            per_class_train,
            per_class_test,
            size,
            seed,
            noise,
        } => cmd_gen_data(&out, classes, per_class_train, per_class_test, size, seed, noise),
        Command::Train { config, out } => cmd_train(&config, out.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            branch,
            no_attack,
            attack,
        } => cmd_eval(&checkpoint, &data, &branch, no_attack, &attack),
        Command::Attack {
            checkpoint,
            data,
            branch,
            limit,
            no_pixels,
            out,
            attack,
        } => cmd_attack(&checkpoint, &data, &branch, limit, no_pixels, out.as_deref(), &attack),
        Command::Diagnose {
            checkpoint,
            run_dir,
            data,
            instruments,
            variant,
            export_plot,
            out,
            attack,
        } => cmd_diagnose(
            checkpoint.as_deref(),
            run_dir.as_deref(),
            data.as_deref(),
            &instruments,
            &variant,
            export_plot,
            out.as_deref(),
            &attack,
        ),
    }
}

fn cmd_gen_data(
    out: &Path,
    classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    size: usize,
    seed: u64,
    noise: f64,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let train = data::synth_generate_with_noise(classes, per_class_train, size, seed, noise)?;
    let test = data::synth_generate_with_noise(classes, per_class_test, size, seed ^ 0x7E57, noise)?;
    let train_path = out.join("train.bin");
    let test_path = out.join("test.bin");
    data::save_raw(&train, &train_path)?;
    data::save_raw(&test, &test_path)?;
    print_line(&format!(
        "wrote {} ({} samples) and {} ({} samples)",
        train_path.display(),
        train.len(),
        test_path.display(),
        test.len()
    ))?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    data::load_raw(path).map_err(|e| match e {
        DataError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::Config(format!("{}: {other}", path.display())),
    })
}

fn load_checkpoint(path: &Path) -> Result<ModelState> {
    ModelState::load(path).map_err(|e| match e {
        crate::nn::ModelError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::Config(format!("{}: {other}", path.display())),
    })
}

fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_train(config_path: &Path, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", config_path.display())))?;
    let user = parse_config_text(&text)?;
    let map = resolve_config(&user)?;
    let resolved = resolve_train(&map)?;

    let out_dir: PathBuf = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var("ADVLAB_RUN_ROOT").map_err(|_| {
                CliError::Config(
                    "no --out given and ADVLAB_RUN_ROOT is not set".to_string(),
                )
            })?;
            let stem = config_path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "run".to_string());
            Path::new(&root).join(stem)
        }
    };

    if resolved.train_path.is_empty() {
        return Err(CliError::Config("data.train is required".into()));
    }
    let train_ds = load_dataset(Path::new(&resolved.train_path))?;
    let test_ds = if resolved.test_path.is_empty() {
        None
    } else {
        Some(load_dataset(Path::new(&resolved.test_path))?)
    };

    let arch = resolved.arch_for(&train_ds)?;
    let mut cfg = resolved.cfg.clone();
    cfg.loss.capture_tags = resolved.capture_tags(&arch)?;
    cfg.validate()?;

    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("config.resolved"), echo_config(&resolved.map))?;

    let model = ModelState::init(&arch, resolved.model_seed)?;
    model.save(&out_dir.join("checkpoint_init.bin"))?;

    let mut metrics = fs::File::create(out_dir.join("metrics.jsonl"))?;
    let mut summary_rows: Vec<String> = Vec::new();
    let mut trainer = Trainer::new(cfg.clone(), model)?;

    for epoch in 0..cfg.epochs {
        let report = trainer.run_epoch(&train_ds, resolved.augment.as_ref(), epoch)?;
        let mut records = report.records.clone();

        let (mut test_clean, mut test_robust) = (None, None);
        if let Some(test) = &test_ds {
            match resolved.per_epoch_eval {
                PerEpochEval::None => {}
                PerEpochEval::Clean => {
                    let (c, _) = trainer::evaluate(&trainer.model, test, resolved.eval_branch, None)?;
                    test_clean = Some(c);
                    records.push(MetricRecord::new(epoch, "test_clean_acc", c));
                }
                PerEpochEval::Robust => {
                    let (c, r) = trainer::evaluate(
                        &trainer.model,
                        test,
                        resolved.eval_branch,
                        Some(&cfg.eval_attack),
                    )?;
                    test_clean = Some(c);
                    test_robust = Some(r);
                    records.push(MetricRecord::new(epoch, "test_clean_acc", c));
                    records.push(MetricRecord::new(epoch, "test_robust_acc", r));
                }
            }
        }

        for r in &records {
            let line = serde_json::to_string(r)
                .map_err(|e| CliError::Io(format!("metrics encoding: {e}")))?;
            writeln!(metrics, "{line}")?;
        }
        summary_rows.push(format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            epoch,
            report.lr,
            report.alpha,
            report.beta,
            report.mean_total,
            report.mean_adv_cls,
            report.mean_clean_cls,
            report.mean_invariance,
            report.train_clean_acc,
            report.train_adv_acc,
            csv_cell(test_clean),
            csv_cell(test_robust),
        ));
        trainer
            .model
            .save(&out_dir.join(format!("checkpoint_epoch_{epoch:03}.bin")))?;
        print_line(&format!(
            "epoch {epoch}: loss {:.4} clean {:.4} adv {:.4} lr {}",
            report.mean_total, report.train_clean_acc, report.train_adv_acc, report.lr
        ))?;
    }

    trainer.model.save(&out_dir.join("checkpoint_final.bin"))?;
    if let Some(swa) = trainer.swa.as_ref().filter(|s| s.count() > 0) {
        let mut swa_model = swa.averaged_model(&trainer.model)?;
        trainer::calibrate_bn(&mut swa_model, &train_ds, &cfg)?;
        swa_model.save(&out_dir.join("checkpoint_swa.bin"))?;
    }

    if let Some(test) = &test_ds {
        let (clean, robust) = trainer::evaluate(
            &trainer.model,
            test,
            resolved.eval_branch,
            Some(&cfg.eval_attack),
        )?;
        let mut final_records = vec![
            MetricRecord::new(cfg.epochs, "final_clean_acc", clean),
            MetricRecord::new(cfg.epochs, "final_robust_acc", robust),
        ];
        if let Ok(swa_bytes) = fs::read(out_dir.join("checkpoint_swa.bin")) {
            let swa_model = ModelState::from_bytes(&swa_bytes)?;
            let (sc, sr) = trainer::evaluate(
                &swa_model,
                test,
                resolved.eval_branch,
                Some(&cfg.eval_attack),
            )?;
            final_records.push(MetricRecord::new(cfg.epochs, "final_swa_clean_acc", sc));
            final_records.push(MetricRecord::new(cfg.epochs, "final_swa_robust_acc", sr));
        }
        for r in &final_records {
            let line = serde_json::to_string(r)
                .map_err(|e| CliError::Io(format!("metrics encoding: {e}")))?;
            writeln!(metrics, "{line}")?;
        }
        print_line(&format!(
            "final: clean {clean:.4} robust {robust:.4} (branch {})",
            resolved.eval_branch.as_str()
        ))?;
    }

    let mut summary = String::from(
        "epoch,lr,alpha,beta,loss_total,loss_adv_cls,loss_clean_cls,loss_invariance,train_clean_acc,train_adv_acc,test_clean_acc,test_robust_acc\n",
    );
    for row in &summary_rows {
        summary.push_str(row);
        summary.push('\n');
    }
    fs::write(out_dir.join("summary.csv"), summary)?;
    Ok(())
}

fn check_dataset_matches(model: &ModelState, ds: &Dataset) -> Result<()> {
    let arch = model.arch();
    if arch.in_channels != ds.channels
        || arch.image_hw != ds.height
        || arch.image_hw != ds.width
        || arch.classes != ds.classes
    {
        return Err(CliError::Config(format!(
            "architecture mismatch: checkpoint expects {}ch {}x{} with {} classes, dataset is {}ch {}x{} with {}",
            arch.in_channels,
            arch.image_hw,
            arch.image_hw,
            arch.classes,
            ds.channels,
            ds.height,
            ds.width,
            ds.classes
        )));
    }
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data_path: &Path,
    branch: &str,
    no_attack: bool,
    attack: &AttackFlags,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data_path)?;
    check_dataset_matches(&model, &ds)?;
    let branch = parse_branch("branch", branch)?;
    let atk = if no_attack {
        None
    } else {
        Some(attack.to_config(branch)?)
    };
    let (clean, robust) = trainer::evaluate(&model, &ds, branch, atk.as_ref())?;
    print_line(&format!(
        "clean {clean:.4} robust {robust:.4} (branch {}, {} samples)",
        branch.as_str(),
        ds.len()
    ))?;
    let json = serde_json::json!({
        "clean_acc": clean,
        "robust_acc": robust,
        "branch": branch.as_str(),
        "samples": ds.len(),
    });
    print_line(&json.to_string())?;
    Ok(())
}

fn cmd_attack(
    checkpoint: &Path,
    data_path: &Path,
    branch: &str,
    limit: Option<usize>,
    no_pixels: bool,
    out: Option<&Path>,
    attack: &AttackFlags,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data_path)?;
    check_dataset_matches(&model, &ds)?;
    let branch = parse_branch("branch", branch)?;
    let cfg = attack.to_config(branch)?;

    let n = limit.unwrap_or(ds.len()).min(ds.len());
    let idxs: Vec<usize> = (0..n).collect();
    let bound = model.bind_frozen();
    let mut lines = Vec::with_capacity(n);
    for (ci, chunk) in idxs.chunks(64).enumerate() {
        let (x, y) = ds.batch(chunk)?;
        let mut acfg = cfg.clone();
        acfg.seed = cfg.seed.wrapping_add(ci as u64);
        let x_adv = attacks::pgd(&model, &x, &y, &acfg)?;
        let mut tape = Tape::new();
        let clean_out = model.forward_eval(&mut tape, &bound, &x, branch, &[])?;
        let adv_out = model.forward_eval(&mut tape, &bound, &x_adv, branch, &[])?;
        let k = clean_out.logits.shape()[1];
        let per = x.len() / chunk.len();
        for (j, &i) in chunk.iter().enumerate() {
            let argmax = |t: &crate::tensor::Tensor| {
                let row = &t.values()[j * k..(j + 1) * k];
                let mut best = 0;
                for c in 1..k {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            };
            let clean_pred = argmax(&clean_out.logits);
            let adv_pred = argmax(&adv_out.logits);
            let delta = x_adv.values()[j * per..(j + 1) * per]
                .iter()
                .zip(&x.values()[j * per..(j + 1) * per])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            let mut record = serde_json::json!({
                "index": i,
                "label": y[j],
                "clean_pred": clean_pred,
                "adv_pred": adv_pred,
                "success": adv_pred != y[j],
                "max_abs_delta": delta,
            });
            if !no_pixels {
                record["adv"] =
                    serde_json::json!(x_adv.values()[j * per..(j + 1) * per].to_vec());
            }
            lines.push(record.to_string());
        }
    }
    write_lines(out, &lines)
}

/// Prints one stdout line. A closed pipe (`| head`) reports as Ok(false)
/// so callers can stop emitting instead of erroring out.
fn print_line(line: &str) -> Result<bool> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{line}") {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(false),
        Err(e) => Err(e.into()),
    }
}

fn write_lines(out: Option<&Path>, lines: &[String]) -> Result<()> {
    match out {
        Some(p) => {
            let mut body = lines.join("\n");
            if !body.is_empty() {
                body.push('\n');
            }
            fs::write(p, body)?;
        }
        None => {
            for l in lines {
                if !print_line(l)? {
                    break;
                }
            }
        }
    }
    Ok(())
}

/// First up-to-64 samples; the generator interleaves classes so this
/// prefix is balanced.
fn probe_batch(ds: &Dataset) -> Result<(crate::tensor::Tensor, Vec<usize>)> {
    let n = ds.len().min(64);
    let idxs: Vec<usize> = (0..n).collect();
    Ok(ds.batch(&idxs)?)
}

fn epoch_checkpoints(run_dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(run_dir)? {
        let path = entry?.path();
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        if let Some(num) = name
            .strip_prefix("checkpoint_epoch_")
            .and_then(|r| r.strip_suffix(".bin"))
        {
            if let Ok(epoch) = num.parse::<usize>() {
                found.push((epoch, path));
            }
        }
    }
    found.sort();
    Ok(found)
}

fn bn_variance_records(epoch: usize, model: &ModelState, records: &mut Vec<MetricRecord>) {
    for (name, t) in model.stats() {
        if let Some(rest) = name.strip_suffix(".mean") {
            let mut parts = rest.split('.');
            let layer = parts.next().unwrap_or_default();
            let branch = match parts.nth(1) {
                Some("aux") => Branch::Aux,
                _ => Branch::Main,
            };
            records.push(
                MetricRecord::new(epoch, "bn_stat_variance", diagnostics::population_variance(t.values()))
                    .with_layer(layer)
                    .with_branch(branch),
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_diagnose(
    checkpoint: Option<&Path>,
    run_dir: Option<&Path>,
    data_path: Option<&Path>,
    instruments: &[String],
    variant: &str,
    export_plot: bool,
    out: Option<&Path>,
    attack: &AttackFlags,
) -> Result<()> {
    let variant: Variant = variant
        .parse()
        .map_err(|e: String| CliError::Config(format!("variant: {e}")))?;
    let clean_branch = variant.clean_branch();

    let chosen: Vec<String> = if instruments.is_empty() {
        if run_dir.is_some() {
            vec!["bn-stat-variance".into(), "drift".into()]
        } else {
            vec![
                "conflict".into(),
                "feature-distance".into(),
                "similarity".into(),
                "bn-stat-variance".into(),
            ]
        }
    } else {
        instruments.to_vec()
    };
    for name in &chosen {
        if !matches!(
            name.as_str(),
            "conflict" | "feature-distance" | "similarity" | "bn-stat-variance" | "drift"
        ) {
            return Err(CliError::Config(format!(
                "unknown instrument '{name}', expected conflict, feature-distance, similarity, bn-stat-variance, or drift"
            )));
        }
    }

    if checkpoint.is_none() && run_dir.is_none() {
        return Err(CliError::Config(
            "diagnose needs --checkpoint or --run-dir".into(),
        ));
    }
    let dataset = match data_path {
        Some(p) => Some(load_dataset(p)?),
        None => None,
    };
    let need_data = |what: &str| {
        CliError::Config(format!("instrument {what} needs --data"))
    };

    let mut records: Vec<MetricRecord> = Vec::new();

    if let Some(dir) = run_dir {
        let series = epoch_checkpoints(dir)?;
        if series.is_empty() {
            return Err(CliError::Config(format!(
                "no epoch checkpoints under {}",
                dir.display()
            )));
        }
        let mut prev_adv: Option<crate::tensor::Tensor> = None;
        for (epoch, path) in &series {
            let model = load_checkpoint(path)?;
            if chosen.iter().any(|c| c == "bn-stat-variance") {
                bn_variance_records(*epoch, &model, &mut records);
            }
            if chosen.iter().any(|c| c == "drift") {
                let ds = dataset.as_ref().ok_or_else(|| need_data("drift"))?;
                check_dataset_matches(&model, ds)?;
                let (px, py) = probe_batch(ds)?;
                let cfg = attack.to_config(Branch::Main)?;
                let (_, z_adv) =
                    diagnostics::penultimate_pair(&model, &px, &py, &cfg, clean_branch)?;
                if let Some(prev) = &prev_adv {
                    records.push(MetricRecord::new(
                        *epoch,
                        "representation_drift",
                        diagnostics::representation_drift(prev, &z_adv)?,
                    ));
                }
                prev_adv = Some(z_adv);
            }
        }
        if export_plot {
            export_plot_csvs(dir)?;
        }
    } else {
        let ckpt = checkpoint.ok_or_else(|| {
            CliError::Config("diagnose needs --checkpoint or --run-dir".into())
        })?;
        let mut model = load_checkpoint(ckpt)?;
        if chosen.iter().any(|c| c == "bn-stat-variance") {
            bn_variance_records(0, &model, &mut records);
        }
        if chosen
            .iter()
            .any(|c| c == "conflict" || c == "feature-distance" || c == "similarity")
        {
            let ds = dataset
                .as_ref()
                .ok_or_else(|| need_data("conflict/feature-distance/similarity"))?;
            check_dataset_matches(&model, ds)?;
            let (px, py) = probe_batch(ds)?;
            let cfg = attack.to_config(Branch::Main)?;
            if chosen.iter().any(|c| c == "feature-distance") {
                records.push(MetricRecord::new(
                    0,
                    "feature_distance",
                    diagnostics::feature_distance(&model, &px, &py, &cfg, clean_branch)?,
                ));
            }
            if chosen.iter().any(|c| c == "similarity") {
                records.push(MetricRecord::new(
                    0,
                    "representation_similarity",
                    diagnostics::representation_similarity(&model, &px, &py, &cfg, clean_branch)?,
                ));
            }
            if chosen.iter().any(|c| c == "conflict") {
                let tags = model.arch().tags();
                let tag_refs: Vec<&str> = tags.iter().map(|s| s.as_str()).collect();
                let assembly = LossAssembly {
                    variant,
                    alpha: 1.0,
                    beta: 1.0,
                    gamma: 1.0,
                    capture_tags: tags.clone(),
                };
                let x_adv = attacks::pgd(&model, &px, &py, &cfg)?;
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let adv_out =
                    model.forward(&mut tape, &bound, &x_adv, Branch::Main, Mode::Train, &tag_refs)?;
                let clean_out =
                    model.forward(&mut tape, &bound, &px, clean_branch, Mode::Train, &tag_refs)?;
                let breakdown = crate::losses::assemble_loss(
                    &mut tape, &model, &bound, &assembly, &adv_out, &clean_out, &py,
                )?;
                let cls = {
                    let a = tape.scale(&breakdown.adv_cls, assembly.alpha)?;
                    let b = tape.scale(&breakdown.clean_cls, assembly.beta)?;
                    tape.add(&a, &b)?
                };
                let pair = diagnostics::gradient_pair(&tape, &bound, &cls, &breakdown.invariance)?;
                let report = diagnostics::conflict_report(&pair, Granularity::Block)?;
                records.push(MetricRecord::new(0, "grad_cosine", report.global_cosine));
                records.push(MetricRecord::new(
                    0,
                    "grad_conflict_fraction",
                    report.conflict_fraction,
                ));
                for (name, cos) in &report.per_parameter {
                    records.push(
                        MetricRecord::new(0, "grad_cosine_block", *cos).with_layer(name),
                    );
                }
            }
        }
        if export_plot {
            return Err(CliError::Config("--export-plot needs --run-dir".into()));
        }
    }

    let lines: Vec<String> = records
        .iter()
        .map(|r| serde_json::to_string(r).map_err(|e| CliError::Io(e.to_string())))
        .collect::<Result<_>>()?;
    write_lines(out, &lines)
}

/// Reads a run's metrics and writes one `plot_<instrument>.csv` per
/// instrument with epoch/layer/branch/value columns.
fn export_plot_csvs(run_dir: &Path) -> Result<()> {
    let text = fs::read_to_string(run_dir.join("metrics.jsonl"))?;
    let mut by_instrument: BTreeMap<String, Vec<MetricRecord>> = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let r: MetricRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Config(format!("metrics.jsonl: {e}")))?;
        by_instrument.entry(r.instrument.clone()).or_default().push(r);
    }
    for (instrument, rows) in &by_instrument {
        let mut csv = String::from("epoch,layer,branch,value\n");
        for r in rows {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                r.epoch,
                r.layer.as_deref().unwrap_or(""),
                r.branch.as_deref().unwrap_or(""),
                r.value
            );
        }
        fs::write(run_dir.join(format!("plot_{instrument}.csv")), csv)?;
    }
    Ok(())
}
