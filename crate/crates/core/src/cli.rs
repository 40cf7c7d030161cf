//! The `rainseg` command line: synthesize, quantize, split, train, evaluate,
//! predict and verify gradients.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error,
//! 3 numeric divergence.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::datagrid::synth::{synth_generate, SynthSpec};
use crate::datagrid::{
    quantize_precip, read_grid, stratified_split, tile_patches, write_labels, Dataset, Manifest, Split,
};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::{render_classmap, report_csv, scores};
use crate::model::{Checkpoint, ModelConfig};
use crate::pipeline::{
    checkpoint_with_meta, normalized_patches, prepare, split_seed, split_seed_from_checkpoint,
    stats_from_checkpoint, train_model, SPLIT_FRACTIONS,
};
use crate::tensor::set_conv_backward_fault;
use crate::trainer::{evaluate_confusion, history_csv, predict_patches, TrainConfig};
use crate::verify::gradient_suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// File names inside a training run directory.
pub const RUN_CONFIG: &str = "config.txt";
pub const RUN_HISTORY: &str = "history.csv";
pub const RUN_CHECKPOINT: &str = "checkpoint.munw";
pub const RUN_METRICS: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(name = "rainseg", version, about = "Precipitation-category segmentation of stacked rasters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (21 modality grids, rainfall, manifest).
    Synth(SynthArgs),
    /// Quantize the manifest's rainfall grid into an MLBL label file.
    Quantize(QuantizeArgs),
    /// Write the stratified train/val/test patch assignment as CSV.
    Split(SplitArgs),
    /// Train from a run config; writes checkpoint, history and metrics.
    Train(TrainArgs),
    /// Print the metrics CSV of a checkpoint on one split.
    Eval(EvalArgs),
    /// Predict a full class map (PPM image plus MLBL labels).
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 256×256, uniform class balance.
    Default,
    /// 64×64, uniform class balance.
    Tiny,
    /// 256×256 with a 2% Scarcity class.
    Imbalanced,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// Overrides the preset's height.
    #[arg(long)]
    pub height: Option<usize>,
    /// Overrides the preset's width.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub region: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Comma-separated class fractions, Scarcity first.
    #[arg(long, value_delimiter = ',')]
    pub balance: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub patch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Run seed to derive the split from; defaults to the checkpoint's own.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// PPM image path.
    #[arg(long)]
    pub out: PathBuf,
    /// MLBL path; defaults to the image path with an `.mlbl` extension.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_conv_fault: bool,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

/// Flat `key = value` run description. Blank lines and `#` comments are
/// ignored; unknown or repeated keys are errors.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Resolved against the config file's directory when relative.
    pub manifest: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.json"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Recognized keys with their defaults, in the order they are documented.
pub const RUN_CONFIG_KEYS: [(&str, &str); 17] = [
    ("manifest", "manifest.json"),
    ("seed", "42"),
    ("in_channels", "21"),
    ("num_classes", "5"),
    ("encoder_features", "64,128,256,512"),
    ("dropout_p", "0.3"),
    ("patch_size", "32"),
    ("learning_rate", "1e-4"),
    ("weight_decay", "1e-5"),
    ("batch_size", "16"),
    ("max_epochs", "50"),
    ("early_stop_patience", "10"),
    ("focal_alpha", "1"),
    ("focal_gamma", "2"),
    ("dice_epsilon", "1"),
    ("lambda_fl", "1"),
    ("lambda_dice", "1"),
];

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("line {line}: cannot parse {key} = {value:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {line}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            if !RUN_CONFIG_KEYS.iter().any(|(k, _)| *k == key) {
                return Err(Error::invalid(format!("line {line}: unknown key {key:?}")));
            }
            if seen.contains(&key) {
                return Err(Error::invalid(format!("line {line}: {key} given twice")));
            }
            seen.push(key);
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            match key {
                "manifest" => cfg.manifest = PathBuf::from(value),
                "seed" => t.seed = parse_value(line, key, value)?,
                "in_channels" => m.in_channels = parse_value(line, key, value)?,
                "num_classes" => m.num_classes = parse_value(line, key, value)?,
                "encoder_features" => {
                    m.encoder_features = value
                        .split(',')
                        .map(|v| parse_value(line, key, v.trim()))
                        .collect::<Result<_>>()?
                }
                "dropout_p" => m.dropout_p = parse_value(line, key, value)?,
                "patch_size" => m.patch_size = parse_value(line, key, value)?,
                "learning_rate" => t.learning_rate = parse_value(line, key, value)?,
                "weight_decay" => t.weight_decay = parse_value(line, key, value)?,
                "batch_size" => t.batch_size = parse_value(line, key, value)?,
                "max_epochs" => t.max_epochs = parse_value(line, key, value)?,
                "early_stop_patience" => t.early_stop_patience = parse_value(line, key, value)?,
                "focal_alpha" => t.loss.alpha = parse_value(line, key, value)?,
                "focal_gamma" => t.loss.gamma = parse_value(line, key, value)?,
                "dice_epsilon" => t.loss.epsilon = parse_value(line, key, value)?,
                "lambda_fl" => t.loss.lambda_fl = parse_value(line, key, value)?,
                "lambda_dice" => t.loss.lambda_dice = parse_value(line, key, value)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Every key at its current value, one per line, in documented order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let LossConfig {
            alpha,
            gamma,
            epsilon,
            lambda_fl,
            lambda_dice,
        } = t.loss;
        let features: Vec<String> = m.encoder_features.iter().map(|f| f.to_string()).collect();
        let values = [
            self.manifest.display().to_string(),
            t.seed.to_string(),
            m.in_channels.to_string(),
            m.num_classes.to_string(),
            features.join(","),
            m.dropout_p.to_string(),
            m.patch_size.to_string(),
            t.learning_rate.to_string(),
            t.weight_decay.to_string(),
            t.batch_size.to_string(),
            t.max_epochs.to_string(),
            t.early_stop_patience.to_string(),
            alpha.to_string(),
            gamma.to_string(),
            epsilon.to_string(),
            lambda_fl.to_string(),
            lambda_dice.to_string(),
        ];
        let mut out = String::new();
        for ((k, _), v) in RUN_CONFIG_KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Parses `args` (program name first) and runs the command. Never panics
/// on bad input; every failure maps to an exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e @ Error::NonFinite { .. }) => {
            let _ = writeln!(err, "error: training diverged ({e})");
            EXIT_DIVERGED
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_USAGE
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Quantize(a) => cmd_quantize(&a, out),
        Command::Split(a) => cmd_split(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Predict(a) => cmd_predict(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    }
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let mut spec = match a.preset {
        Preset::Default => SynthSpec::default(),
        Preset::Tiny => SynthSpec::tiny(),
        Preset::Imbalanced => SynthSpec::imbalanced(),
    };
    if let Some(h) = a.height {
        spec.height = h;
    }
    if let Some(w) = a.width {
        spec.width = w;
    }
    if let Some(r) = &a.region {
        spec.region = r.clone();
    }
    if let Some(b) = &a.balance {
        spec.class_balance = b.clone();
    }
    spec.noise = a.noise;
    let scene = synth_generate(&spec, a.seed)?;
    let m = Manifest::write_synth(&scene, &a.out)?;
    writeln!(
        out,
        "wrote {} modality grids, rainfall and manifest.json ({}x{}, {}) to {}",
        m.modalities.len(),
        m.height,
        m.width,
        m.region,
        a.out.display()
    )
    .map_err(io_out)?;
    Ok(EXIT_OK)
}

pub fn cmd_quantize(a: &QuantizeArgs, out: &mut dyn Write) -> Result<i32> {
    let manifest = Manifest::load(&a.manifest)?;
    let base = a.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let rain = manifest
        .rain
        .as_ref()
        .ok_or_else(|| Error::invalid("manifest lists no rainfall grid"))?;
    let labels = quantize_precip(&read_grid(base.join(rain))?, &manifest.scheme)?;
    if let Some(existing) = &manifest.labels {
        let p = base.join(existing);
        if p.exists() {
            let l = crate::datagrid::read_labels(&p)?;
            if l.num_classes != labels.num_classes {
                return Err(Error::invalid(format!(
                    "{} has {} classes, scheme {:?} has {}",
                    p.display(),
                    l.num_classes,
                    manifest.scheme.region,
                    labels.num_classes
                )));
            }
        }
    }
    write_labels(&labels, &a.out)?;
    let hist = labels.histogram();
    let names: Vec<String> = manifest
        .scheme
        .classes
        .iter()
        .zip(&hist)
        .map(|(c, n)| format!("{}={n}", c.name))
        .collect();
    writeln!(out, "{}", names.join(" ")).map_err(io_out)?;
    Ok(EXIT_OK)
}

pub fn cmd_split(a: &SplitArgs, out: &mut dyn Write) -> Result<i32> {
    let ds = Dataset::load(&a.manifest)?;
    let patches = tile_patches(&ds.stack, Some(ds.require_labels()?), a.patch_size)?;
    let assignment = stratified_split(&patches, SPLIT_FRACTIONS, split_seed(a.seed))?;
    let mut csv = String::from("patch_row,patch_col,split\n");
    for (p, s) in assignment.assignment.iter().enumerate() {
        if let Some(s) = s {
            let (r0, c0) = patches.origins[p];
            let _ = writeln!(csv, "{},{},{}", r0 / a.patch_size, c0 / a.patch_size, s.name());
        }
    }
    write_file(&a.out, csv)?;
    let [tr, va, te] = assignment.counts();
    writeln!(out, "train={tr} val={va} test={te}").map_err(io_out)?;
    Ok(EXIT_OK)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let text = fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let cfg = RunConfig::parse(&text)?;
    let manifest = if cfg.manifest.is_absolute() {
        cfg.manifest.clone()
    } else {
        a.config.parent().unwrap_or(Path::new("")).join(&cfg.manifest)
    };
    let ds = Dataset::load(&manifest)?;
    let labels = ds.require_labels()?;
    if ds.stack.num_channels() != cfg.model.in_channels {
        return Err(Error::invalid(format!(
            "in_channels = {} but the dataset stacks {} channels",
            cfg.model.in_channels,
            ds.stack.num_channels()
        )));
    }
    if labels.num_classes as usize != cfg.model.num_classes {
        return Err(Error::invalid(format!(
            "num_classes = {} but the scheme has {} classes",
            cfg.model.num_classes, labels.num_classes
        )));
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_file(&a.out.join(RUN_CONFIG), &text)?;

    let seed = split_seed(cfg.train.seed);
    let prepared = prepare(&ds.stack, labels, cfg.model.patch_size, seed)?;
    let [tr, va, te] = prepared.split.counts();
    writeln!(out, "patches: train={tr} val={va} test={te}").map_err(io_out)?;
    let mut log_err = None;
    let fit = train_model(&prepared, &cfg.model, &cfg.train, |r| {
        if let Err(e) = writeln!(
            out,
            "epoch {:>3}  train {:.6} (focal {:.6} dice {:.6})  val {:.6}",
            r.epoch, r.train.total, r.train.focal, r.train.dice, r.val.total
        ) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(io_out(e));
    }
    write_file(&a.out.join(RUN_HISTORY), history_csv(&fit.history))?;
    let best_epoch = fit.best_epoch;
    let mut best = fit.best;
    let test = prepared.indices(Split::Test);
    let cm = evaluate_confusion(&mut best, &prepared.patches, &test, cfg.train.batch_size)?;
    let report = report_csv(&scores(&cm)?);
    checkpoint_with_meta(best, &prepared.stats, seed)?.save(a.out.join(RUN_CHECKPOINT))?;
    write_file(&a.out.join(RUN_METRICS), &report)?;
    writeln!(out, "best epoch {best_epoch}; test split metrics:\n{report}").map_err(io_out)?;
    Ok(EXIT_OK)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let mut ck = Checkpoint::load(&a.checkpoint)?;
    let ds = Dataset::load(&a.manifest)?;
    let labels = ds.require_labels()?;
    check_compatible(&ck, &ds)?;
    let stats = stats_from_checkpoint(&ck)?;
    let z = ck.model.config.patch_size;
    let patches = normalized_patches(&ds.stack, Some(labels), z, &stats)?;
    let seed = match a.seed {
        Some(s) => split_seed(s),
        None => split_seed_from_checkpoint(&ck)
            .ok_or_else(|| Error::invalid("checkpoint records no split seed; pass --seed"))?,
    };
    let assignment = stratified_split(&patches, SPLIT_FRACTIONS, seed)?;
    let idx = assignment.indices(a.split);
    let cm = evaluate_confusion(&mut ck.model, &patches, &idx, 16)?;
    write!(out, "{}", report_csv(&scores(&cm)?)).map_err(io_out)?;
    Ok(EXIT_OK)
}

fn check_compatible(ck: &Checkpoint, ds: &Dataset) -> Result<()> {
    let cfg = &ck.model.config;
    if cfg.in_channels != ds.stack.num_channels() {
        return Err(Error::invalid(format!(
            "checkpoint expects {} channels, dataset stacks {}",
            cfg.in_channels,
            ds.stack.num_channels()
        )));
    }
    if cfg.num_classes != ds.manifest.scheme.classes.len() {
        return Err(Error::invalid(format!(
            "checkpoint predicts {} classes, scheme has {}",
            cfg.num_classes,
            ds.manifest.scheme.classes.len()
        )));
    }
    Ok(())
}

pub fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> Result<i32> {
    let mut ck = Checkpoint::load(&a.checkpoint)?;
    let ds = Dataset::load(&a.manifest)?;
    check_compatible(&ck, &ds)?;
    let stats = stats_from_checkpoint(&ck)?;
    let z = ck.model.config.patch_size;
    let patches = normalized_patches(&ds.stack, None, z, &stats)?;
    let all: Vec<usize> = (0..patches.len()).collect();
    let pred = predict_patches(&mut ck.model, &patches, &all, 16)?;
    let map = patches.untile(&pred, ck.model.config.num_classes as u8)?;
    write_file(&a.out, render_classmap(&map)?)?;
    let labels_path = a.labels.clone().unwrap_or_else(|| a.out.with_extension("mlbl"));
    write_labels(&map, &labels_path)?;
    writeln!(
        out,
        "wrote {}x{} class map to {} and {}",
        map.width,
        map.height,
        a.out.display(),
        labels_path.display()
    )
    .map_err(io_out)?;
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    set_conv_backward_fault(a.inject_conv_fault);
    let suite = gradient_suite(a.seed);
    set_conv_backward_fault(false);
    let suite = suite?;
    writeln!(out, "{:<20} {:>12} {:>10} {:>8} {:>10}  status", "item", "max_rel_err", "tolerance", "checked", "ms")
        .map_err(io_out)?;
    for s in &suite {
        writeln!(
            out,
            "{:<20} {:>12.3e} {:>10.0e} {:>8} {:>10.1}  {}",
            s.name,
            s.max_rel_error,
            s.tolerance,
            s.checked,
            s.elapsed.as_secs_f64() * 1e3,
            if s.passed() { "ok" } else { "FAIL" }
        )
        .map_err(io_out)?;
    }
    let failed: Vec<&str> = suite.iter().filter(|s| !s.passed()).map(|s| s.name).collect();
    if failed.is_empty() {
        writeln!(out, "all {} items passed", suite.len()).map_err(io_out)?;
        Ok(EXIT_OK)
    } else {
        writeln!(out, "failed: {}", failed.join(", ")).map_err(io_out)?;
        Ok(EXIT_VERIFY)
    }
}
