//! Deterministic synthetic driving-like scenes.
//!
//! Each scene places rectangular objects, decides which ones a "driver"
//! attends to (object centre inside a central ellipse, or a critical class),
//! and renders a ground-truth gaze map as Gaussian blobs on the attended
//! objects plus a weaker centre-bias Gaussian. Feature tensors carry one
//! occupancy channel per class followed by bounded uniform noise channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{BoundingBox, DetectionSet};
use crate::error::{Error, Result};
use crate::head::{FeatureDims, FeatureTensor};
use crate::par::Exec;
use crate::saliency::SaliencyMap;

const PLACEMENT_TRIES: usize = 200;
const SCENE_TRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct FocusRule {
    /// Ellipse half-axes as fractions of frame width and height.
    pub ellipse_rx: f64,
    pub ellipse_ry: f64,
    pub critical_classes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub frame_width: usize,
    pub frame_height: usize,
    pub feature_dims: FeatureDims,
    pub object_count_range: (usize, usize),
    pub class_count: u32,
    pub center_bias_weight: f64,
    pub focus_rule: FocusRule,
    pub blob_sigma: f64,
    /// Box width and height ranges in pixels.
    pub box_width_range: (f64, f64),
    pub box_height_range: (f64, f64),
    /// Noise channels are uniform in `[0, noise_amplitude)`.
    pub noise_amplitude: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            frame_width: 512,
            frame_height: 288,
            feature_dims: FeatureDims {
                channels: 8,
                height: 12,
                width: 20,
            },
            object_count_range: (3, 10),
            class_count: 4,
            center_bias_weight: 0.3,
            focus_rule: FocusRule {
                ellipse_rx: 0.25,
                ellipse_ry: 0.25,
                critical_classes: vec![3],
            },
            blob_sigma: 24.0,
            box_width_range: (16.0, 64.0),
            box_height_range: (16.0, 48.0),
            noise_amplitude: 0.1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        let (w, h) = (self.frame_width as f64, self.frame_height as f64);
        if self.frame_width == 0 || self.frame_height == 0 {
            return bad("frame dims must be positive".into());
        }
        let (lo, hi) = self.object_count_range;
        if lo == 0 || lo > hi {
            return bad(format!("object count range {lo}..={hi} is empty or starts at 0"));
        }
        if self.class_count == 0 || (self.feature_dims.channels as u32) < self.class_count {
            return bad(format!(
                "need one feature channel per class: {} channels, {} classes",
                self.feature_dims.channels, self.class_count
            ));
        }
        if !(0.0..=1.0).contains(&self.center_bias_weight) {
            return bad(format!("center_bias_weight {} outside [0, 1]", self.center_bias_weight));
        }
        if !(self.blob_sigma > 0.0) {
            return bad("blob_sigma must be positive".into());
        }
        let (bw, bh) = (self.box_width_range, self.box_height_range);
        if !(bw.0 > 0.0 && bw.0 <= bw.1 && bw.1 <= w && bh.0 > 0.0 && bh.0 <= bh.1 && bh.1 <= h) {
            return bad("box size ranges must be positive, ordered and fit the frame".into());
        }
        if !(self.noise_amplitude >= 0.0) {
            return bad("noise_amplitude must be >= 0".into());
        }
        let rule = &self.focus_rule;
        if rule.critical_classes.iter().any(|c| *c >= self.class_count) {
            return bad("critical class id out of range".into());
        }
        if rule.critical_classes.is_empty() && !(rule.ellipse_rx > 0.0 && rule.ellipse_ry > 0.0) {
            return bad("empty focus ellipse and no critical class: nothing can be focused".into());
        }
        Ok(())
    }

    fn in_ellipse(&self, x: f64, y: f64) -> bool {
        let (w, h) = (self.frame_width as f64, self.frame_height as f64);
        let rx = self.focus_rule.ellipse_rx * w;
        let ry = self.focus_rule.ellipse_ry * h;
        if rx <= 0.0 || ry <= 0.0 {
            return false;
        }
        let dx = (x - w / 2.0) / rx;
        let dy = (y - h / 2.0) / ry;
        dx * dx + dy * dy <= 1.0
    }

    /// Whether an object of `class` centred at `(x, y)` is attended.
    pub fn is_focused(&self, x: f64, y: f64, class: u32) -> bool {
        self.in_ellipse(x, y) || self.focus_rule.critical_classes.contains(&class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub frame_id: String,
    pub features: FeatureTensor,
    pub gt_map: SaliencyMap,
    pub detections: DetectionSet,
    pub intended_focus: Vec<bool>,
}

pub fn frame_id(index: u64) -> String {
    format!("frame_{index:06}")
}

/// Distance from a point to the nearest point of a box.
fn point_box_distance(x: f64, y: f64, b: &BoundingBox) -> f64 {
    let dx = (b.x_min - x).max(0.0).max(x - b.x_max);
    let dy = (b.y_min - y).max(0.0).max(y - b.y_max);
    (dx * dx + dy * dy).sqrt()
}

fn random_box(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> BoundingBox {
    let (w, h) = (spec.frame_width as f64, spec.frame_height as f64);
    let bw = rng.gen_range(spec.box_width_range.0..=spec.box_width_range.1);
    let bh = rng.gen_range(spec.box_height_range.0..=spec.box_height_range.1);
    let x0 = rng.gen_range(0.0..=w - bw);
    let y0 = rng.gen_range(0.0..=h - bh);
    BoundingBox {
        x_min: x0,
        y_min: y0,
        x_max: x0 + bw,
        y_max: y0 + bh,
        class_id: rng.gen_range(0..spec.class_count),
        detector_confidence: rng.gen_range(0.5..1.0),
    }
}

/// Places `k` boxes, each kept two blob widths away from the others' centres
/// when possible.
fn place_boxes(rng: &mut ChaCha8Rng, spec: &SceneSpec, k: usize) -> Vec<BoundingBox> {
    let clearance = 2.0 * spec.blob_sigma;
    let mut boxes: Vec<BoundingBox> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut candidate = random_box(rng, spec);
        for attempt in 0..PLACEMENT_TRIES {
            let (cx, cy) = candidate.center();
            let clear = boxes.iter().all(|b| {
                let (bx, by) = b.center();
                point_box_distance(cx, cy, b) >= clearance
                    && point_box_distance(bx, by, &candidate) >= clearance
            });
            if clear {
                break;
            }
            if attempt + 1 < PLACEMENT_TRIES {
                candidate = random_box(rng, spec);
            }
        }
        boxes.push(candidate);
    }
    boxes
}

fn gaussian_1d(len: usize, center: f64, sigma: f64) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let d = (i as f64 + 0.5 - center) / sigma;
            (-0.5 * d * d).exp()
        })
        .collect()
}

fn render_gt_map(spec: &SceneSpec, boxes: &[BoundingBox], focused: &[bool]) -> Result<SaliencyMap> {
    let (w, h) = (spec.frame_width, spec.frame_height);
    let mut values = vec![0.0; w * h];
    if spec.center_bias_weight > 0.0 && spec.focus_rule.ellipse_rx > 0.0 && spec.focus_rule.ellipse_ry > 0.0 {
        let gx = gaussian_1d(w, w as f64 / 2.0, spec.focus_rule.ellipse_rx * w as f64 / 2.0);
        let gy = gaussian_1d(h, h as f64 / 2.0, spec.focus_rule.ellipse_ry * h as f64 / 2.0);
        for (y, row) in values.chunks_exact_mut(w).enumerate() {
            let s = spec.center_bias_weight * gy[y];
            for (v, g) in row.iter_mut().zip(&gx) {
                *v += s * g;
            }
        }
    }
    let reach = 5.0 * spec.blob_sigma;
    for (b, _) in boxes.iter().zip(focused).filter(|(_, f)| **f) {
        let (cx, cy) = b.center();
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(w);
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(h);
        let gx = gaussian_1d(w, cx, spec.blob_sigma);
        let gy = gaussian_1d(h, cy, spec.blob_sigma);
        for y in y0..y1 {
            let row = &mut values[y * w..(y + 1) * w];
            for x in x0..x1 {
                row[x] += gy[y] * gx[x];
            }
        }
    }
    SaliencyMap::new(w, h, values)
}

/// Per-class box coverage of each feature cell, then noise channels.
fn render_features(rng: &mut ChaCha8Rng, spec: &SceneSpec, boxes: &[BoundingBox]) -> Result<FeatureTensor> {
    let d = spec.feature_dims;
    let cell_w = spec.frame_width as f64 / d.width as f64;
    let cell_h = spec.frame_height as f64 / d.height as f64;
    let hw = d.height * d.width;
    let mut values = vec![0.0; d.len()];
    for b in boxes {
        let plane = &mut values[b.class_id as usize * hw..(b.class_id as usize + 1) * hw];
        for fy in 0..d.height {
            let oy = (b.y_max.min((fy + 1) as f64 * cell_h) - b.y_min.max(fy as f64 * cell_h)).max(0.0);
            if oy == 0.0 {
                continue;
            }
            for fx in 0..d.width {
                let ox = (b.x_max.min((fx + 1) as f64 * cell_w) - b.x_min.max(fx as f64 * cell_w)).max(0.0);
                let v = &mut plane[fy * d.width + fx];
                *v = (*v + ox * oy / (cell_w * cell_h)).min(1.0);
            }
        }
    }
    let noise_start = spec.class_count as usize * hw;
    for v in &mut values[noise_start..] {
        *v = if spec.noise_amplitude > 0.0 {
            rng.gen_range(0.0..spec.noise_amplitude)
        } else {
            0.0
        };
    }
    FeatureTensor::new(d.channels, d.height, d.width, values)
}

/// Generates scene `index` of the stream identified by `seed`.
pub fn generate_scene(seed: u64, index: u64, spec: &SceneSpec) -> Result<SyntheticSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (lo, hi) = spec.object_count_range;
    for _ in 0..SCENE_TRIES {
        let k = rng.gen_range(lo..=hi);
        let boxes = place_boxes(&mut rng, spec, k);
        let focused: Vec<bool> = boxes
            .iter()
            .map(|b| {
                let (cx, cy) = b.center();
                spec.is_focused(cx, cy, b.class_id)
            })
            .collect();
        if !focused.iter().any(|f| *f) {
            continue;
        }
        let gt_map = render_gt_map(spec, &boxes, &focused)?;
        let features = render_features(&mut rng, spec, &boxes)?;
        let id = frame_id(index);
        return Ok(SyntheticSample {
            frame_id: id.clone(),
            features,
            gt_map,
            detections: DetectionSet {
                frame_id: id,
                boxes,
            },
            intended_focus: focused,
        });
    }
    Err(Error::InfeasibleSpec(format!(
        "no scene with a focused object after {SCENE_TRIES} draws"
    )))
}

/// Scenes `start..start + count` of one seed, in index order.
pub fn generate_range(seed: u64, start: u64, count: usize, spec: &SceneSpec, exec: Exec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    exec.map_range(count, |i| generate_scene(seed, start + i as u64, spec))
        .into_iter()
        .collect()
}

pub fn generate_dataset(seed: u64, count: usize, spec: &SceneSpec, exec: Exec) -> Result<Vec<SyntheticSample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    generate_range(seed, 0, count, spec, exec)
}
