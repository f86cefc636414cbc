//! Attention-based object selection: each detected box is scored by the
//! largest saliency value inside it, and boxes scoring strictly above a
//! threshold form the focused set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::{normalize_peak, resize_bilinear, SaliencyMap};

/// Axis-aligned box in pixel coordinates, half-open on the max side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: u32,
    #[serde(rename = "confidence")]
    pub detector_confidence: f64,
}

impl BoundingBox {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err("coordinates must be finite".into());
        }
        if self.x_max <= self.x_min {
            return Err(format!("x_max {} <= x_min {}", self.x_max, self.x_min));
        }
        if self.y_max <= self.y_min {
            return Err(format!("y_max {} <= y_min {}", self.y_max, self.y_min));
        }
        if !(0.0..=1.0).contains(&self.detector_confidence) {
            return Err(format!(
                "confidence {} outside [0, 1]",
                self.detector_confidence
            ));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    pub frame_id: String,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FocusResult {
    pub focus_probability: Vec<f64>,
    pub focused: Vec<bool>,
    /// Boxes that contain no pixel center of the map; they score 0.
    pub empty_intersection: Vec<bool>,
    pub threshold_used: f64,
}

impl FocusResult {
    pub fn focused_count(&self) -> usize {
        self.focused.iter().filter(|f| **f).count()
    }
}

/// Pixel indices whose centers `i + 0.5` lie in `[lo, hi)`, clipped to `[0, n)`.
fn pixel_span(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let start = (lo - 0.5).ceil().clamp(0.0, n as f64) as usize;
    let end = (hi - 0.5).ceil().clamp(0.0, n as f64) as usize;
    start..end.max(start)
}

/// Largest map value over the pixels whose centers fall inside the box.
/// The map is expected to be peak-normalized already.
pub fn focus_probability(map: &SaliencyMap, bbox: &BoundingBox) -> Result<f64> {
    let xs = pixel_span(bbox.x_min, bbox.x_max, map.width());
    let ys = pixel_span(bbox.y_min, bbox.y_max, map.height());
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let w = map.width();
    let values = map.values();
    let mut best = 0.0f64;
    for y in ys {
        for v in &values[y * w + xs.start..y * w + xs.end] {
            best = best.max(*v);
        }
    }
    Ok(best)
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// Scores every box and marks those with probability strictly above
/// `threshold`. Boxes outside the map score 0 and are flagged.
pub fn detect_focused(map: &SaliencyMap, detections: &DetectionSet, threshold: f64) -> Result<FocusResult> {
    check_unit("threshold", threshold)?;
    let n = detections.boxes.len();
    let mut result = FocusResult {
        focus_probability: Vec::with_capacity(n),
        focused: Vec::with_capacity(n),
        empty_intersection: Vec::with_capacity(n),
        threshold_used: threshold,
    };
    for b in &detections.boxes {
        let (p, empty) = match focus_probability(map, b) {
            Ok(p) => (p, false),
            Err(Error::EmptyIntersection) => (0.0, true),
            Err(e) => return Err(e),
        };
        result.focus_probability.push(p);
        result.focused.push(p > threshold);
        result.empty_intersection.push(empty);
    }
    Ok(result)
}

/// Ground-truth focus labels: the map is peak-normalized and a box counts as
/// focused when its score strictly exceeds `ratio`.
pub fn label_ground_truth(gt_map: &SaliencyMap, detections: &DetectionSet, ratio: f64) -> Result<Vec<bool>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let normalized = normalize_peak(gt_map)?;
    Ok(detect_focused(&normalized, detections, ratio)?.focused)
}

/// Per-pixel mean of the given maps after resizing each to the output size.
pub fn baseline_map(maps: &[SaliencyMap], out_width: usize, out_height: usize) -> Result<SaliencyMap> {
    if maps.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut acc = vec![0.0; out_width * out_height];
    for m in maps {
        let r = resize_bilinear(m, out_width, out_height)?;
        for (a, v) in acc.iter_mut().zip(r.values()) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    SaliencyMap::new(out_width, out_height, acc)
}
