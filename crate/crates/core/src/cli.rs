//! Command-line front end: `synth | preprocess | featurize | train | predict |
//! evaluate | explain`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::checkpoint;
use crate::dataset::{load_any, load_labelled_dir};
use crate::error::{Result, StamError};
use crate::features::compute_motion_features;
use crate::graph::PoseGraph;
use crate::metrics::vote_predict;
use crate::model::{explain, AttentionMode, StamConfig};
use crate::pose_io::{load_sequence, read_pose_file, save_sequence, JointLayout};
use crate::preprocess::{preprocess_sequence, CleanPoseSequence, PreprocessOptions};
use crate::synth::{generate_synthetic_dataset, write_dataset, SynthConfig};
use crate::train::{evaluate, fit, split_subsequences, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "stam", version, about = "Spatio-temporal attention classifier for pose sequences")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic corpus with ground-truth bursts.
    Synth(SynthArgs),
    /// Clean and normalize raw keypoints into a coordinate sequence file.
    Preprocess(PreprocessArgs),
    /// Compute the 7-channel motion features of a coordinate sequence.
    Featurize(FeaturizeArgs),
    /// Train a model on a labelled data directory.
    Train(TrainArgs),
    /// Predict the label of one sequence.
    Predict(PredictArgs),
    /// Score every labelled sequence of a directory.
    Evaluate(EvaluateArgs),
    /// Export the joint x clip attention map of one sequence.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 40)]
    pub n_pos: usize,
    #[arg(long, default_value_t = 160)]
    pub n_neg: usize,
    #[arg(long, default_value_t = 1000)]
    pub frames: usize,
    #[arg(long, env = "STAM_SEED", default_value_t = 7)]
    pub seed: u64,
    /// Larger bursts, less noise, no distractor movements.
    #[arg(long)]
    pub easy: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Keypoint JSONL file.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
    /// Median filter window in seconds.
    #[arg(long, default_value_t = 0.5)]
    pub median_window: f64,
    /// Mean filter window in seconds.
    #[arg(long, default_value_t = 0.5)]
    pub mean_window: f64,
    /// Keypoints below this confidence count as missing.
    #[arg(long, default_value_t = crate::pose_io::DEFAULT_CONFIDENCE_THRESHOLD)]
    pub confidence: f64,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    /// Coordinate sequence file written by `preprocess`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training settings that override the config file.
#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    /// [default: 800]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 0.0001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 0.2]
    #[arg(long)]
    pub val_ratio: Option<f64>,
    /// Stop once validation ROC-AUC reaches this value [default: none]
    #[arg(long)]
    pub target_auc: Option<f64>,
    /// none | spatial | temporal | both [default: both]
    #[arg(long)]
    pub attention: Option<AttentionMode>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory with labels.csv and <id>.jsonl or <id>.seq files.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file with model and training fields; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// [default: 0]
    #[arg(long, env = "STAM_SEED")]
    pub seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV [default: <out>.loss.csv]
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

/// Sub-sequence and voting settings shared by `predict` and `evaluate`.
#[derive(Debug, Args)]
pub struct VoteArgs {
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 1000)]
    pub subseq_window: usize,
    #[arg(long, default_value_t = 200)]
    pub subseq_overlap: usize,
    /// Cap on sub-sequences per video [default: none]
    #[arg(long)]
    pub max_subsequences: Option<usize>,
}

impl VoteArgs {
    fn train_config(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            threshold: self.threshold,
            subseq_window: self.subseq_window,
            subseq_overlap: self.subseq_overlap,
            max_subsequences: self.max_subsequences,
            ..TrainConfig::default()
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Keypoint JSONL or feature sequence file.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output JSON [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub vote: VoteArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics JSON.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub vote: VoteArgs,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Normalized attention CSV, one row per joint.
    #[arg(long)]
    pub out: PathBuf,
    /// Raw alpha/beta JSON [default: <out>.json]
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Model and training settings read from one flat JSON object.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: StamConfig,
    pub train: TrainConfig,
}

fn field_names<T: Serialize>(value: &T) -> Result<Vec<String>> {
    match serde_json::to_value(value)? {
        Value::Object(m) => Ok(m.keys().cloned().collect()),
        _ => Ok(Vec::new()),
    }
}

impl RunConfig {
    /// Splits the keys between the model and training records; a key known
    /// to neither is an error.
    pub fn from_json(text: &str) -> Result<Self> {
        let obj: Map<String, Value> = serde_json::from_str(text)?;
        let model_keys = field_names(&StamConfig::default())?;
        let train_keys = field_names(&TrainConfig::default())?;
        let (mut model, mut train) = (Map::new(), Map::new());
        for (k, v) in obj {
            if model_keys.contains(&k) {
                model.insert(k, v);
            } else if train_keys.contains(&k) {
                train.insert(k, v);
            } else {
                return Err(StamError::ConfigInvalid(format!("unknown config key {k:?}")));
            }
        }
        let cfg = Self {
            model: serde_json::from_value(Value::Object(model))?,
            train: serde_json::from_value(Value::Object(train))?,
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => StamError::FileNotFound(path.display().to_string()),
        _ => e.into(),
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

/// Process exit status for an error.
pub fn exit_code(err: &StamError) -> i32 {
    match err {
        StamError::FileNotFound(_) => 2,
        StamError::Format(_)
        | StamError::MalformedInput { .. }
        | StamError::Json(_)
        | StamError::EmptyInput
        | StamError::EmptySequence => 3,
        StamError::TooShort { .. } => 4,
        StamError::NonFiniteLoss { .. } => 5,
        _ => 1,
    }
}

fn error_kind(err: &StamError) -> &'static str {
    match err {
        StamError::FileNotFound(_) => "file_not_found",
        StamError::Format(_) | StamError::MalformedInput { .. } | StamError::Json(_) => "format",
        StamError::EmptyInput | StamError::EmptySequence => "empty_input",
        StamError::TooShort { .. } => "too_short",
        StamError::NonFiniteLoss { .. } => "non_finite_loss",
        StamError::ConfigInvalid(_) => "config_invalid",
        StamError::Io(_) => "io",
        _ => "error",
    }
}

#[derive(Debug, Serialize)]
pub struct Prediction {
    pub id: String,
    pub probability: f64,
    pub label: u8,
    pub subsequences: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct AttentionSidecar<'a> {
    id: &'a str,
    clip_starts: &'a [usize],
    alpha: &'a [f64],
    /// `[clip][joint]`
    beta: &'a [Vec<f64>],
    /// `[joint][clip]`
    raw: &'a [Vec<f64>],
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let base = if a.easy { SynthConfig::easy() } else { SynthConfig::default() };
    let cfg = SynthConfig {
        n_pos: a.n_pos,
        n_neg: a.n_neg,
        frames: a.frames,
        seed: a.seed,
        burst_max_frames: base.burst_max_frames.min(a.frames.saturating_sub(1)),
        burst_min_frames: base.burst_min_frames.min(a.frames.saturating_sub(1)),
        ..base
    };
    let videos = generate_synthetic_dataset(&cfg)?;
    write_dataset(&videos, &a.out)?;
    info!("wrote {} sequences to {}", videos.len(), a.out.display());
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<()> {
    let raw = read_pose_file(&a.input, a.confidence, a.fps)?;
    let opts = PreprocessOptions {
        median_window: a.median_window,
        mean_window: a.mean_window,
    };
    let clean = preprocess_sequence(&raw, &JointLayout::default(), &opts)?;
    save_sequence(&clean.to_sequence(), &a.out)
}

fn cmd_featurize(a: &FeaturizeArgs) -> Result<()> {
    let coords = load_sequence(&a.input)?;
    let features = compute_motion_features(&CleanPoseSequence::from_sequence(&coords)?)?;
    save_sequence(&features, &a.out)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let o = &a.overrides;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(v) = o.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = o.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = o.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = o.val_ratio {
        cfg.train.val_ratio = v;
    }
    if o.target_auc.is_some() {
        cfg.train.target_auc = o.target_auc;
    }
    if let Some(v) = o.attention {
        cfg.model.attention = v;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let videos = load_labelled_dir(&a.data, &JointLayout::default(), &PreprocessOptions::default())?;
    if videos.is_empty() {
        return Err(StamError::EmptyInput);
    }
    let fitted = fit(&videos, &cfg.model, &cfg.train, &PoseGraph::default())?;
    let out = &fitted.outcome;
    checkpoint::save(&out.best, &a.out)?;
    let mut csv = String::from("epoch,loss,val_auc\n");
    for r in &out.history {
        let auc = r.val_auc.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{}\n", r.epoch, r.loss, auc));
    }
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    fs::write(&loss_path, csv)?;
    info!(
        "saved epoch {} (val auc {:?}) to {}",
        out.best_epoch,
        out.best_val_auc,
        a.out.display()
    );
    Ok(())
}

pub fn predict_file(
    ckpt: &Path,
    input: &Path,
    vote: &TrainConfig,
) -> Result<Prediction> {
    let params = checkpoint::load(ckpt)?;
    let seq = load_any(input, &JointLayout::default(), &PreprocessOptions::default())?;
    let pieces = split_subsequences(&seq, vote.subseq_window, vote.subseq_overlap, vote.max_subsequences)?;
    let graph = PoseGraph::default();
    let subsequences = pieces
        .iter()
        .map(|p| params.predict_video(p, &graph, crate::nn::Mode::Eval))
        .collect::<Result<Vec<f64>>>()?;
    let (label, probability) = vote_predict(&subsequences, vote.threshold)?;
    Ok(Prediction {
        id: seq.id,
        probability,
        label,
        subsequences,
    })
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let pred = predict_file(&a.ckpt, &a.input, &a.vote.train_config()?)?;
    write_json(&pred, a.out.as_deref())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let params = checkpoint::load(&a.ckpt)?;
    let videos = load_labelled_dir(&a.data, &JointLayout::default(), &PreprocessOptions::default())?;
    let cfg = a.vote.train_config()?;
    let report = evaluate(&params, &videos, &cfg, &PoseGraph::default())?;
    info!("roc_auc {:.4} over {} videos", report.roc_auc, videos.len());
    write_json(&report, Some(&a.out))
}

fn cmd_explain(a: &ExplainArgs) -> Result<()> {
    let params = checkpoint::load(&a.ckpt)?;
    let seq = load_any(&a.input, &JointLayout::default(), &PreprocessOptions::default())?;
    let map = explain(&seq, &params, &PoseGraph::default())?;
    fs::write(&a.out, map.to_csv())?;
    let sidecar = AttentionSidecar {
        id: &seq.id,
        clip_starts: &map.clip_starts,
        alpha: &map.alpha,
        beta: &map.beta,
        raw: &map.raw,
    };
    let json_path = a.json.clone().unwrap_or_else(|| with_suffix(&a.out, ".json"));
    write_json(&sidecar, Some(&json_path))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Featurize(a) => cmd_featurize(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Explain(a) => cmd_explain(a),
    }
}

/// Parses `args`, runs the subcommand and returns the process exit code.
/// Failures print a one-line JSON error record to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 64 } else { 0 };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(err) => {
            let code = exit_code(&err);
            let record = serde_json::json!({
                "error": error_kind(&err),
                "message": err.to_string(),
                "exit_code": code,
            });
            eprintln!("{record}");
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn run_config_splits_and_rejects() {
        let c = RunConfig::from_json(r#"{"lr": 0.001, "channels": [8, 16, 32], "attention": "spatial"}"#).unwrap();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.model.channels, vec![8, 16, 32]);
        assert_eq!(c.model.attention, AttentionMode::Spatial);
        assert_eq!(c.train.epochs, 800);
        let err = RunConfig::from_json(r#"{"lr": 0.001, "learning_rate": 1}"#).unwrap_err();
        assert!(matches!(err, StamError::ConfigInvalid(_)));
        assert!(RunConfig::from_json(r#"{"lr": -1}"#).is_err());
    }

    #[test]
    fn defaults_are_stock() {
        let c = RunConfig::default();
        assert_eq!((c.train.lr, c.train.weight_decay, c.train.epochs, c.train.batch_size), (1e-4, 1e-4, 800, 16));
        assert_eq!(c.model.channels, vec![64, 128, 256]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&StamError::FileNotFound("x".into())), 2);
        assert_eq!(exit_code(&StamError::Format("x".into())), 3);
        assert_eq!(exit_code(&StamError::TooShort { needed: 2, got: 1 }), 4);
        assert_eq!(exit_code(&StamError::NonFiniteLoss { epoch: 1, step: 0 }), 5);
    }
}
