//! File-backed pipeline stages shared by the CLI and the integration tests:
//! dataset generation, training-set loading, prediction and evaluation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::attention::{detect_focused, label_ground_truth, DetectionSet};
use crate::error::{Error, Result};
use crate::head::{forward, FeatureTensor, ModelParams};
use crate::io::{
    self, load_detections, load_manifest, load_map, load_tensor, save_manifest, save_map, save_tensor,
    DatasetManifest, SampleRecord, Split,
};
use crate::metrics::{
    auc, confusion, kl_divergence_at, optimal_threshold, pearson_cc_at, prf_accuracy, roc_curve, Confusion,
    MetricsReport, RocCurve, ThresholdRule,
};
use crate::par::Exec;
use crate::saliency::{decode_grid, encode_grid, normalize_peak, GridSpec, GridVector, SaliencyMap};
use crate::synth::{generate_range, SceneSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Writes a synthetic dataset under `out_dir`: `features/<id>.ftn`,
/// `gt/<id>.smf`, one shared `detections.jsonl` and `manifest.json`.
/// Scene indices run train, then val, then test.
pub fn write_synthetic_dataset(
    out_dir: &Path,
    seed: u64,
    counts: SplitCounts,
    spec: &SceneSpec,
    exec: Exec,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let total = counts.train + counts.val + counts.test;
    if total == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
    }
    let split_of = |i: usize| {
        if i < counts.train {
            Split::Train
        } else if i < counts.train + counts.val {
            Split::Val
        } else {
            Split::Test
        }
    };
    let mut records = Vec::with_capacity(total);
    let mut detections = Vec::with_capacity(total);
    // bounded chunks keep at most a few hundred full-size maps in memory
    const CHUNK: usize = 256;
    let mut start = 0;
    while start < total {
        let n = CHUNK.min(total - start);
        let samples = generate_range(seed, start as u64, n, spec, exec)?;
        let written = exec.map(&samples, |s| -> Result<SampleRecord> {
            let feature_path = PathBuf::from("features").join(format!("{}.ftn", s.frame_id));
            let gt_map_path = PathBuf::from("gt").join(format!("{}.smf", s.frame_id));
            save_tensor(&out_dir.join(&feature_path), &s.features)?;
            save_map(&out_dir.join(&gt_map_path), &s.gt_map)?;
            Ok(SampleRecord {
                frame_id: s.frame_id.clone(),
                feature_path,
                gt_map_path,
                detections_path: PathBuf::from(DETECTIONS_FILE),
                split: Split::Train,
            })
        });
        for (k, (rec, s)) in written.into_iter().zip(samples).enumerate() {
            let mut rec = rec?;
            rec.split = split_of(start + k);
            records.push(rec);
            detections.push(s.detections);
        }
        start += n;
    }
    io::write_detections(&out_dir.join(DETECTIONS_FILE), &detections)?;
    let d = spec.feature_dims;
    let manifest = DatasetManifest {
        frame_width: spec.frame_width,
        frame_height: spec.frame_height,
        feature_dims: [d.channels, d.height, d.width],
        records,
    };
    save_manifest(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A manifest together with the directory its relative paths resolve from.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    detections: HashMap<PathBuf, HashMap<String, DetectionSet>>,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut detections = HashMap::new();
        for r in &manifest.records {
            if !detections.contains_key(&r.detections_path) {
                let sets = load_detections(&root.join(&r.detections_path))?;
                let by_frame = sets.into_iter().map(|s| (s.frame_id.clone(), s)).collect();
                detections.insert(r.detections_path.clone(), by_frame);
            }
        }
        Ok(Dataset {
            root,
            manifest,
            detections,
        })
    }

    pub fn records(&self, split: Option<Split>) -> Vec<&SampleRecord> {
        self.manifest.split(split).collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn features(&self, r: &SampleRecord) -> Result<FeatureTensor> {
        let t = load_tensor(&self.resolve(&r.feature_path))?;
        let want = self.manifest.feature_dims()?;
        if t.dims() != want {
            return Err(Error::InconsistentDims(format!(
                "{}: features {:?} differ from manifest {want:?}",
                r.frame_id,
                t.dims()
            )));
        }
        Ok(t)
    }

    pub fn gt_map(&self, r: &SampleRecord) -> Result<SaliencyMap> {
        load_map(&self.resolve(&r.gt_map_path))
    }

    /// Boxes for the record's frame; frames absent from the file have none.
    pub fn detections(&self, r: &SampleRecord) -> DetectionSet {
        self.detections
            .get(&r.detections_path)
            .and_then(|m| m.get(&r.frame_id))
            .cloned()
            .unwrap_or_else(|| DetectionSet {
                frame_id: r.frame_id.clone(),
                boxes: Vec::new(),
            })
    }
}

/// Features paired with grid-encoded ground truth for every record in `split`.
pub fn load_training_set(
    data: &Dataset,
    split: Option<Split>,
    grid: GridSpec,
    ratio: f64,
    exec: Exec,
) -> Result<Vec<(FeatureTensor, GridVector)>> {
    let records = data.records(split);
    exec.map(&records, |r| -> Result<(FeatureTensor, GridVector)> {
        let x = data.features(r)?;
        let y = encode_grid(&data.gt_map(r)?, grid, ratio)?;
        Ok((x, y))
    })
    .into_iter()
    .collect()
}

/// Runs the head and reconstructs a peak-normalized map at `width x height`.
/// `sigma = None` uses half a grid cell.
pub fn predict_map(
    params: &ModelParams,
    features: &FeatureTensor,
    width: usize,
    height: usize,
    sigma: Option<f64>,
) -> Result<SaliencyMap> {
    let act = forward(params, features)?;
    let sigma = sigma.unwrap_or_else(|| params.grid.default_sigma(width, height));
    normalize_peak(&decode_grid(&act, width, height, sigma)?)
}

pub fn predict_split(
    data: &Dataset,
    params: &ModelParams,
    split: Option<Split>,
    out_dir: &Path,
    sigma: Option<f64>,
    exec: Exec,
) -> Result<usize> {
    let records = data.records(split);
    let (w, h) = (data.manifest.frame_width, data.manifest.frame_height);
    exec.map(&records, |r| -> Result<()> {
        let m = predict_map(params, &data.features(r)?, w, h, sigma)?;
        save_map(&prediction_path(out_dir, &r.frame_id), &m)
    })
    .into_iter()
    .collect::<Result<Vec<()>>>()?;
    Ok(records.len())
}

pub fn prediction_path(dir: &Path, frame_id: &str) -> PathBuf {
    dir.join(format!("{frame_id}.smf"))
}

/// Where predicted maps come from during evaluation.
pub enum Predictions {
    /// `<dir>/<frame_id>.smf` per frame.
    Dir(PathBuf),
    /// One map for every frame, e.g. the mean ground-truth baseline.
    Single(SaliencyMap),
}

impl Predictions {
    fn load(&self, frame_id: &str) -> Result<SaliencyMap> {
        match self {
            Predictions::Dir(dir) => load_map(&prediction_path(dir, frame_id)),
            Predictions::Single(m) => Ok(m.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    /// Ground-truth focus ratio.
    pub gt_ratio: f64,
    pub metric_width: usize,
    pub metric_height: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            gt_ratio: 0.15,
            metric_width: crate::metrics::METRIC_WIDTH,
            metric_height: crate::metrics::METRIC_HEIGHT,
        }
    }
}

/// Per-frame scores before any threshold is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScores {
    pub frame_id: String,
    pub kl: f64,
    pub cc: f64,
    pub labels: Vec<bool>,
    pub scores: Vec<f64>,
}

/// Pixel metrics plus box labels (from `gt`) and focus scores (from `pred`).
pub fn score_frame(
    frame_id: &str,
    gt: &SaliencyMap,
    pred: &SaliencyMap,
    detections: &DetectionSet,
    settings: &EvalSettings,
) -> Result<FrameScores> {
    let (w, h) = (settings.metric_width, settings.metric_height);
    let kl = kl_divergence_at(gt, pred, w, h)?;
    let cc = pearson_cc_at(gt, pred, w, h)?;
    let labels = label_ground_truth(gt, detections, settings.gt_ratio)?;
    let scored = detect_focused(&normalize_peak(pred)?, detections, 0.0)?;
    Ok(FrameScores {
        frame_id: frame_id.to_string(),
        kl,
        cc,
        labels,
        scores: scored.focus_probability,
    })
}

pub fn score_split(
    data: &Dataset,
    preds: &Predictions,
    split: Option<Split>,
    settings: &EvalSettings,
    exec: Exec,
) -> Result<Vec<FrameScores>> {
    let records = data.records(split);
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    exec.map(&records, |r| {
        let gt = data.gt_map(r)?;
        let pred = preds.load(&r.frame_id)?;
        score_frame(&r.frame_id, &gt, &pred, &data.detections(r), settings)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdChoice {
    Fixed(f64),
    /// Pick the operating point on the ROC curve of the evaluated frames.
    Roc(ThresholdRule),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_frame: Vec<(FrameScores, Confusion)>,
}

fn pooled(frames: &[FrameScores]) -> (Vec<bool>, Vec<f64>) {
    let labels = frames.iter().flat_map(|f| f.labels.iter().copied()).collect();
    let scores = frames.iter().flat_map(|f| f.scores.iter().copied()).collect();
    (labels, scores)
}

pub fn pooled_roc(frames: &[FrameScores]) -> Result<RocCurve> {
    let (labels, scores) = pooled(frames);
    roc_curve(&labels, &scores)
}

/// Averages pixel metrics over frames and pools every box for the
/// object-level metrics.
pub fn summarize(frames: Vec<FrameScores>, choice: ThresholdChoice) -> Result<Evaluation> {
    if frames.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (labels, scores) = pooled(&frames);
    let threshold = match choice {
        ThresholdChoice::Fixed(t) => t,
        ThresholdChoice::Roc(rule) => optimal_threshold(&roc_curve(&labels, &scores)?, rule)?.point.threshold,
    };
    let area = auc(&labels, &scores)?;
    let mut total = Confusion::default();
    let mut per_frame = Vec::with_capacity(frames.len());
    for f in frames {
        let decisions: Vec<bool> = f.scores.iter().map(|s| *s > threshold).collect();
        let c = confusion(&f.labels, &decisions)?;
        total.merge(&c);
        per_frame.push((f, c));
    }
    let n = per_frame.len() as f64;
    let kl = per_frame.iter().map(|(f, _)| f.kl).sum::<f64>() / n;
    let cc = per_frame.iter().map(|(f, _)| f.cc).sum::<f64>() / n;
    let prf = prf_accuracy(&total);
    Ok(Evaluation {
        report: MetricsReport {
            kl,
            cc,
            auc: area,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            accuracy: prf.accuracy,
            tp: total.tp,
            fp: total.fp,
            tn: total.tn,
            fn_: total.fn_,
            threshold,
        },
        per_frame,
    })
}

pub fn per_frame_csv(eval: &Evaluation) -> String {
    let mut out = String::from("frame_id,kl,cc,boxes,tp,fp,tn,fn\n");
    for (f, c) in &eval.per_frame {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            f.frame_id,
            f.kl,
            f.cc,
            f.labels.len(),
            c.tp,
            c.fp,
            c.tn,
            c.fn_
        ));
    }
    out
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,tpr,fpr\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.tpr, p.fpr));
    }
    out
}

pub fn history_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (e, l) in history.iter().enumerate() {
        out.push_str(&format!("{e},{l}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(id: &str, labels: &[bool], scores: &[f64]) -> FrameScores {
        FrameScores {
            frame_id: id.into(),
            kl: 1.0,
            cc: 0.5,
            labels: labels.to_vec(),
            scores: scores.to_vec(),
        }
    }

    #[test]
    fn summarize_pools_boxes() {
        let frames = vec![
            frame("a", &[true, false], &[0.9, 0.2]),
            frame("b", &[true, false, false], &[0.4, 0.6, 0.1]),
        ];
        let e = summarize(frames.clone(), ThresholdChoice::Fixed(0.5)).unwrap();
        let r = &e.report;
        assert_eq!((r.tp, r.fp, r.tn, r.fn_), (1, 1, 2, 1));
        assert_eq!(r.threshold, 0.5);
        // pairs: (0.9 vs .2 .6 .1) 3, (0.4 vs .2 .6 .1) 2 => 5/6
        assert!((r.auc - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(e.per_frame[1].1, Confusion { tp: 0, fp: 1, tn: 1, fn_: 1 });

        let auto = summarize(frames, ThresholdChoice::Roc(ThresholdRule::GMean)).unwrap();
        assert!(auto.report.threshold < 0.9);
    }

    #[test]
    fn csv_layouts() {
        let e = summarize(vec![frame("a", &[true, false], &[0.9, 0.2])], ThresholdChoice::Fixed(0.5)).unwrap();
        assert_eq!(per_frame_csv(&e), "frame_id,kl,cc,boxes,tp,fp,tn,fn\na,1,0.5,2,1,0,1,0\n");
        assert_eq!(history_csv(&[0.5, 0.25]), "epoch,mean_loss\n0,0.5\n1,0.25\n");
    }
}
