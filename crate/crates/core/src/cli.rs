//! Command-line interface. [`run`] is the whole program minus process exit,
//! so tests can drive it in-process.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::{baseline_map, detect_focused, DetectionSet};
use crate::error::{Error, Result};
use crate::head::count_params;
use crate::io::{
    load_checkpoint, load_detections, load_json, load_map, save_checkpoint, save_map, write_file, GridFile,
    Split,
};
use crate::metrics::{optimal_threshold, ThresholdRule};
use crate::par::Exec;
use crate::pipeline::{
    history_csv, load_training_set, per_frame_csv, pooled_roc, predict_split, roc_csv, score_split, summarize,
    write_synthetic_dataset, Dataset, EvalSettings, Predictions, SplitCounts, ThresholdChoice,
};
use crate::saliency::{
    decode_grid, encode_grid, normalize_distribution, normalize_peak, GridActivation, GridSpec, SaliencyMap,
};
use crate::synth::SceneSpec;
use crate::train::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "gazegrid", version, about = "Grid-based driver attention prediction")]
pub struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train the gaze head on a manifest's training split.
    Train(TrainArgs),
    /// Write predicted saliency maps for a split.
    Predict(PredictArgs),
    /// Score detections against a saliency map.
    Map(MapArgs),
    /// Evaluate predicted maps against ground truth.
    Eval(EvalArgs),
    /// Write the object-level ROC curve and the chosen operating point.
    Roc(RocArgs),
    /// Average ground-truth maps into a baseline prediction.
    Baseline(BaselineArgs),
    /// Encode a saliency map into a grid vector.
    Encode(EncodeArgs),
    /// Decode a grid vector or activation into a saliency map.
    Decode(DecodeArgs),
    /// Describe a checkpoint.
    Info(InfoArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of training samples.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub val_count: usize,
    #[arg(long, default_value_t = 0)]
    pub test_count: usize,
    #[arg(long)]
    pub min_objects: Option<usize>,
    #[arg(long)]
    pub max_objects: Option<usize>,
    #[arg(long)]
    pub center_bias: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch mean loss as CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long, default_value = "16x16")]
    pub grid: GridSpec,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub decay: f64,
    #[arg(long, default_value_t = 10)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Binarization ratio for ground-truth encoding.
    #[arg(long, default_value_t = 0.15)]
    pub ratio: f64,
    #[arg(long, default_value = "train")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Blur sigma in pixels; defaults to half a grid cell.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// Frame to score; required when the file holds several frames.
    #[arg(long)]
    pub frame: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub th: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RuleArg {
    Gmean,
    Distance,
}

impl From<RuleArg> for ThresholdRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Gmean => ThresholdRule::GMean,
            RuleArg::Distance => ThresholdRule::Distance,
        }
    }
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of `<frame_id>.smf` predictions.
    #[arg(long, conflicts_with = "pred_map", required_unless_present = "pred_map")]
    pub pred_dir: Option<PathBuf>,
    /// A single map used as the prediction for every frame.
    #[arg(long)]
    pub pred_map: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Ground-truth focus ratio.
    #[arg(long, default_value_t = 0.15)]
    pub ratio: f64,
    #[arg(long, default_value_t = crate::metrics::METRIC_WIDTH)]
    pub metric_width: usize,
    #[arg(long, default_value_t = crate::metrics::METRIC_HEIGHT)]
    pub metric_height: usize,
}

impl SourceArgs {
    fn predictions(&self) -> Result<Predictions> {
        match (&self.pred_dir, &self.pred_map) {
            (Some(d), _) => Ok(Predictions::Dir(d.clone())),
            (None, Some(m)) => Ok(Predictions::Single(load_map(m)?)),
            (None, None) => Err(Error::InvalidArgument("one of --pred-dir or --pred-map is required".into())),
        }
    }

    fn settings(&self) -> EvalSettings {
        EvalSettings {
            gt_ratio: self.ratio,
            metric_width: self.metric_width,
            metric_height: self.metric_height,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 0.5)]
    pub th: f64,
    /// Choose the threshold from the ROC curve instead of `--th`.
    #[arg(long)]
    pub auto_th: bool,
    #[arg(long, value_enum, default_value_t = RuleArg::Gmean)]
    pub rule: RuleArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub per_frame: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RocArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, value_enum, default_value_t = RuleArg::Gmean)]
    pub rule: RuleArg,
    /// Curve as CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: Split,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long, default_value = "16x16")]
    pub grid: GridSpec,
    #[arg(long, default_value_t = 0.15)]
    pub ratio: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NormArg {
    None,
    Peak,
    Distribution,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Grid JSON with `rows`, `cols` and `values` in `[0, 1]`.
    #[arg(long)]
    pub grid_file: PathBuf,
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, value_enum, default_value_t = NormArg::None)]
    pub normalize: NormArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    #[arg(long)]
    pub model: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the text destined for stdout.
pub fn run<I, T>(args: I) -> std::result::Result<String, RunError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(RunError::Usage)?;
    execute(cli).map_err(RunError::Failed)
}

#[derive(Debug)]
pub enum RunError {
    /// Argument parsing failed, or `--help`/`--version` was requested.
    Usage(clap::Error),
    Failed(Error),
}

pub fn execute(cli: Cli) -> Result<String> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Gen(a) => gen(a, exec),
        Command::Train(a) => train_cmd(a, exec),
        Command::Predict(a) => predict(a, exec),
        Command::Map(a) => map_cmd(a),
        Command::Eval(a) => eval(a, exec),
        Command::Roc(a) => roc(a, exec),
        Command::Baseline(a) => baseline(a, exec),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Info(a) => info(a),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn emit(out: Option<&Path>, text: String) -> Result<String> {
    match out {
        Some(p) => {
            write_file(p, text.as_bytes())?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

fn gen(a: GenArgs, exec: Exec) -> Result<String> {
    let mut spec = SceneSpec::default();
    if let Some(n) = a.min_objects {
        spec.object_count_range.0 = n;
    }
    if let Some(n) = a.max_objects {
        spec.object_count_range.1 = n;
    }
    if let Some(w) = a.center_bias {
        spec.center_bias_weight = w;
    }
    let counts = SplitCounts {
        train: a.count,
        val: a.val_count,
        test: a.test_count,
    };
    let m = write_synthetic_dataset(&a.out, a.seed, counts, &spec, exec)?;
    Ok(format!("wrote {} samples to {}\n", m.records.len(), a.out.display()))
}

fn train_cmd(a: TrainArgs, exec: Exec) -> Result<String> {
    let data = Dataset::open(&a.manifest)?;
    let samples = load_training_set(&data, Some(a.split), a.grid, a.ratio, exec)?;
    let config = TrainConfig {
        epochs: a.epochs,
        base_lr: a.lr,
        decay_factor: a.decay,
        decay_every: a.decay_every,
        batch_size: a.batch_size,
        seed: a.seed,
        grid: a.grid,
    };
    let outcome = train(&samples, &config, exec)?;
    save_checkpoint(&a.out, &outcome.params)?;
    if let Some(h) = &a.history {
        write_file(h, history_csv(&outcome.history).as_bytes())?;
    }
    let last = outcome.history.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "trained on {} samples for {} epochs, final loss {last:.6}\n",
        samples.len(),
        config.epochs
    ))
}

fn predict(a: PredictArgs, exec: Exec) -> Result<String> {
    let data = Dataset::open(&a.manifest)?;
    let params = load_checkpoint(&a.model)?;
    let want = data.manifest.feature_dims()?;
    if params.input_dims != want {
        return Err(Error::InconsistentDims(format!(
            "checkpoint expects {:?}, dataset has {want:?}",
            params.input_dims
        )));
    }
    let n = predict_split(&data, &params, Some(a.split), &a.out, a.sigma, exec)?;
    Ok(format!("wrote {n} maps to {}\n", a.out.display()))
}

#[derive(serde::Serialize)]
struct ObjectFocus {
    index: usize,
    class_id: u32,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    focus_probability: f64,
    focused: bool,
    empty_intersection: bool,
}

#[derive(serde::Serialize)]
struct FocusReport<'a> {
    frame_id: &'a str,
    threshold: f64,
    focused_count: usize,
    objects: Vec<ObjectFocus>,
}

fn pick_frame(mut sets: Vec<DetectionSet>, frame: Option<&str>, path: &Path) -> Result<DetectionSet> {
    match frame {
        Some(id) => sets
            .into_iter()
            .find(|s| s.frame_id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("frame {id:?} not in {}", path.display()))),
        None if sets.len() == 1 => Ok(sets.remove(0)),
        None if sets.is_empty() => Err(Error::EmptyInput),
        None => Err(Error::InvalidArgument(format!(
            "{} holds {} frames; pass --frame",
            path.display(),
            sets.len()
        ))),
    }
}

fn map_cmd(a: MapArgs) -> Result<String> {
    let map = load_map(&a.map)?;
    let det = pick_frame(load_detections(&a.detections)?, a.frame.as_deref(), &a.detections)?;
    let res = detect_focused(&map, &det, a.th)?;
    let objects = det
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| ObjectFocus {
            index: i,
            class_id: b.class_id,
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
            focus_probability: res.focus_probability[i],
            focused: res.focused[i],
            empty_intersection: res.empty_intersection[i],
        })
        .collect();
    let report = FocusReport {
        frame_id: &det.frame_id,
        threshold: a.th,
        focused_count: res.focused_count(),
        objects,
    };
    emit(a.out.as_deref(), to_json(&report))
}

fn eval(a: EvalArgs, exec: Exec) -> Result<String> {
    let data = Dataset::open(&a.source.manifest)?;
    let frames = score_split(&data, &a.source.predictions()?, Some(a.source.split), &a.source.settings(), exec)?;
    let choice = if a.auto_th {
        ThresholdChoice::Roc(a.rule.into())
    } else {
        if !(0.0..=1.0).contains(&a.th) {
            return Err(Error::InvalidArgument(format!("--th must lie in [0, 1], got {}", a.th)));
        }
        ThresholdChoice::Fixed(a.th)
    };
    let e = summarize(frames, choice)?;
    if let Some(p) = &a.per_frame {
        write_file(p, per_frame_csv(&e).as_bytes())?;
    }
    emit(a.out.as_deref(), to_json(&e.report))
}

fn roc(a: RocArgs, exec: Exec) -> Result<String> {
    let data = Dataset::open(&a.source.manifest)?;
    let frames = score_split(&data, &a.source.predictions()?, Some(a.source.split), &a.source.settings(), exec)?;
    let curve = pooled_roc(&frames)?;
    write_file(&a.out, roc_csv(&curve).as_bytes())?;
    let op = optimal_threshold(&curve, a.rule.into())?;
    Ok(format!(
        "threshold={} tpr={} fpr={} objective={}\n",
        op.point.threshold, op.point.tpr, op.point.fpr, op.objective
    ))
}

fn baseline(a: BaselineArgs, exec: Exec) -> Result<String> {
    let data = Dataset::open(&a.manifest)?;
    let records = data.records(Some(a.split));
    let w = a.width.unwrap_or(data.manifest.frame_width);
    let h = a.height.unwrap_or(data.manifest.frame_height);
    // sum in bounded chunks so large splits never sit in memory at once
    const CHUNK: usize = 64;
    let mut acc: Option<SaliencyMap> = None;
    for chunk in records.chunks(CHUNK) {
        let maps = exec
            .map(chunk, |r| data.gt_map(r))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let part = baseline_map(&maps, w, h)?.scaled(maps.len() as f64)?;
        acc = Some(match acc {
            None => part,
            Some(prev) => {
                let v = prev.values().iter().zip(part.values()).map(|(a, b)| a + b).collect();
                SaliencyMap::new(w, h, v)?
            }
        });
    }
    let sum = acc.ok_or(Error::EmptyInput)?;
    let mean = sum.scaled(1.0 / records.len() as f64)?;
    save_map(&a.out, &mean)?;
    Ok(format!("averaged {} maps into {}\n", records.len(), a.out.display()))
}

fn encode(a: EncodeArgs) -> Result<String> {
    let v = encode_grid(&load_map(&a.map)?, a.grid, a.ratio)?;
    let file = GridFile {
        rows: v.spec.rows(),
        cols: v.spec.cols(),
        values: v.to_f64(),
    };
    emit(a.out.as_deref(), to_json(&file))
}

fn decode(a: DecodeArgs) -> Result<String> {
    let file: GridFile = load_json(&a.grid_file)?;
    let spec = GridSpec::new(file.rows, file.cols)?;
    let act = GridActivation::new(spec, file.values)?;
    let sigma = a.sigma.unwrap_or_else(|| spec.default_sigma(a.width, a.height));
    let raw = decode_grid(&act, a.width, a.height, sigma)?;
    let map = match a.normalize {
        NormArg::None => raw,
        NormArg::Peak => normalize_peak(&raw)?,
        NormArg::Distribution => normalize_distribution(&raw)?,
    };
    save_map(&a.out, &map)?;
    Ok(String::new())
}

#[derive(serde::Serialize)]
struct CheckpointInfo {
    channels: usize,
    height: usize,
    width: usize,
    grid: String,
    parameters: usize,
}

fn info(a: InfoArgs) -> Result<String> {
    let p = load_checkpoint(&a.model)?;
    Ok(to_json(&CheckpointInfo {
        channels: p.input_dims.channels,
        height: p.input_dims.height,
        width: p.input_dims.width,
        grid: p.grid.to_string(),
        parameters: count_params(&p),
    }))
}
