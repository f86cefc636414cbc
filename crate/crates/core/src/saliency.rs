//! Saliency maps and the grid-vector codec.
//!
//! A [`SaliencyMap`] is encoded into a binary [`GridVector`] by binarizing at a
//! fraction of its peak and marking every grid cell whose share of the
//! binarized mass strictly exceeds `1 / K`. The reverse direction fills each
//! cell with its predicted probability and smooths the result with a
//! separable Gaussian blur.
//!
//! Cell geometry: row `i` of an `n`-row grid covers pixel rows
//! `floor(i*H/n) .. floor((i+1)*H/n)`, and likewise for columns, so every
//! pixel lands in exactly one cell even when `H` or `W` is not a multiple of
//! the grid size.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major map of non-negative attention intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DimensionMismatch(format!(
                "map dims must be positive, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} map needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "map value {} at index {i} is negative or not finite",
                values[i]
            )));
        }
        Ok(SaliencyMap {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height])
    }

    /// Builds a map by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Pixel coordinates `(x, y)` of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// Multiplies every value by a non-negative factor.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.values.iter().map(|v| v * factor).collect(),
        )
    }
}

/// Per-pixel binarization of a [`SaliencyMap`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMap {
    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Grid geometry: `rows` cells vertically, `cols` horizontally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    rows: usize,
    cols: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid must have at least one cell per axis, got {rows}x{cols}"
            )));
        }
        Ok(GridSpec { rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of cells `K = rows * cols`.
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Half a cell, the smoothing used when reconstructing a map of the
    /// given size from grid activations.
    pub fn default_sigma(&self, width: usize, height: usize) -> f64 {
        let cell_h = height as f64 / self.rows as f64;
        let cell_w = width as f64 / self.cols as f64;
        cell_h.min(cell_w) / 2.0
    }

    /// Cell row index for every pixel row of a map with `height` rows.
    pub fn row_of_pixel(&self, height: usize) -> Vec<usize> {
        cell_index(height, self.rows)
    }

    pub fn col_of_pixel(&self, width: usize) -> Vec<usize> {
        cell_index(width, self.cols)
    }

    /// Half-open pixel range `[start, end)` covered by cell `j` (row-major).
    pub fn cell_pixel_bounds(&self, j: usize, width: usize, height: usize) -> ((usize, usize), (usize, usize)) {
        let (r, c) = (j / self.cols, j % self.cols);
        (
            (c * width / self.cols, (c + 1) * width / self.cols),
            (r * height / self.rows, (r + 1) * height / self.rows),
        )
    }
}

fn cell_index(pixels: usize, cells: usize) -> Vec<usize> {
    let mut out = vec![0; pixels];
    for i in 0..cells {
        let start = i * pixels / cells;
        let end = (i + 1) * pixels / cells;
        for slot in &mut out[start..end] {
            *slot = i;
        }
    }
    out
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    /// Parses `"NxM"`, or a single `"N"` for a square grid.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("grid must look like 16x16, got {s:?}"));
        let (r, c) = match s.split_once(['x', 'X']) {
            Some((r, c)) => (r, c),
            None => (s, s),
        };
        let rows = r.trim().parse().map_err(|_| bad())?;
        let cols = c.trim().parse().map_err(|_| bad())?;
        GridSpec::new(rows, cols)
    }
}

/// Binary target vector `y`, one entry per grid cell in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridVector {
    pub spec: GridSpec,
    pub entries: Vec<bool>,
}

impl GridVector {
    pub fn new(spec: GridSpec, entries: Vec<bool>) -> Result<Self> {
        if entries.len() != spec.cells() {
            return Err(Error::SpecMismatch(format!(
                "grid {spec} needs {} entries, got {}",
                spec.cells(),
                entries.len()
            )));
        }
        Ok(GridVector { spec, entries })
    }

    pub fn one_hot(spec: GridSpec, cell: usize) -> Self {
        let mut entries = vec![false; spec.cells()];
        entries[cell] = true;
        GridVector { spec, entries }
    }

    pub fn ones(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
            .collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.entries.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()
    }
}

/// Sigmoid outputs `ŷ` of the gaze head, one probability per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridActivation {
    pub spec: GridSpec,
    pub probs: Vec<f64>,
}

impl GridActivation {
    pub fn new(spec: GridSpec, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != spec.cells() {
            return Err(Error::SpecMismatch(format!(
                "grid {spec} needs {} probabilities, got {}",
                spec.cells(),
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        Ok(GridActivation { spec, probs })
    }
}

impl From<&GridVector> for GridActivation {
    fn from(v: &GridVector) -> Self {
        GridActivation {
            spec: v.spec,
            probs: v.to_f64(),
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "ratio must lie in (0, 1), got {ratio}"
        )));
    }
    Ok(())
}

/// Marks pixels whose value is strictly greater than `ratio * max(map)`.
pub fn binarize_map(map: &SaliencyMap, ratio: f64) -> Result<BinaryMap> {
    check_ratio(ratio)?;
    let peak = map.max();
    if peak <= 0.0 {
        return Err(Error::AllZeroMap);
    }
    let cut = ratio * peak;
    Ok(BinaryMap {
        width: map.width,
        height: map.height,
        bits: map.values.iter().map(|v| *v > cut).collect(),
    })
}

/// Encodes a saliency map as a grid vector.
pub fn encode_grid(map: &SaliencyMap, spec: GridSpec, ratio: f64) -> Result<GridVector> {
    let bin = binarize_map(map, ratio)?;
    let total = bin.count_ones();
    if total == 0 {
        return Err(Error::EmptyBinaryMap);
    }
    let row_of = spec.row_of_pixel(bin.height);
    let col_of = spec.col_of_pixel(bin.width);
    let mut counts = vec![0usize; spec.cells()];
    for (y, row) in bin.bits.chunks_exact(bin.width).enumerate() {
        let base = row_of[y] * spec.cols;
        for (x, bit) in row.iter().enumerate() {
            if *bit {
                counts[base + col_of[x]] += 1;
            }
        }
    }
    // count / total > 1 / K, compared in integers so ties are exact
    let k = spec.cells();
    let entries = counts.iter().map(|c| c * k > total).collect();
    Ok(GridVector { spec, entries })
}

/// Reconstructs a raw saliency map from grid activations: each cell's pixels
/// take the cell probability, then the map is blurred with `sigma`.
pub fn decode_grid(
    act: &GridActivation,
    out_width: usize,
    out_height: usize,
    sigma: f64,
) -> Result<SaliencyMap> {
    let spec = act.spec;
    if out_width < spec.cols || out_height < spec.rows {
        return Err(Error::DimensionMismatch(format!(
            "output {out_width}x{out_height} is smaller than grid {spec}"
        )));
    }
    let row_of = spec.row_of_pixel(out_height);
    let col_of = spec.col_of_pixel(out_width);
    let mut values = Vec::with_capacity(out_width * out_height);
    for r in &row_of {
        let base = r * spec.cols;
        values.extend(col_of.iter().map(|c| act.probs[base + c]));
    }
    let filled = SaliencyMap::new(out_width, out_height, values)?;
    gaussian_blur(&filled, sigma)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let denom = 2.0 * sigma * sigma;
    (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / denom).exp()
        })
        .collect()
}

/// 1-D pass over `len` samples spaced `stride` apart starting at `offset`.
/// Taps falling outside the signal are dropped and the rest renormalized.
fn blur_line(src: &[f64], dst: &mut [f64], offset: usize, stride: usize, len: usize, kernel: &[f64]) {
    let radius = kernel.len() / 2;
    for i in 0..len {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(len - 1);
        let mut acc = 0.0;
        let mut norm = 0.0;
        for j in lo..=hi {
            let w = kernel[j + radius - i];
            acc += w * src[offset + j * stride];
            norm += w;
        }
        dst[offset + i * stride] = acc / norm;
    }
}

/// Separable Gaussian blur with kernel radius `ceil(3*sigma)`. Weights are
/// renormalized at the borders, so constant maps stay constant. `sigma = 0`
/// returns the input unchanged.
pub fn gaussian_blur(map: &SaliencyMap, sigma: f64) -> Result<SaliencyMap> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let (w, h) = (map.width, map.height);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        blur_line(&map.values, &mut tmp, y * w, 1, w, &kernel);
    }
    let mut out = vec![0.0; w * h];
    for x in 0..w {
        blur_line(&tmp, &mut out, x, w, h, &kernel);
    }
    SaliencyMap::new(w, h, out)
}

/// Divides by the maximum so the peak becomes 1.
pub fn normalize_peak(map: &SaliencyMap) -> Result<SaliencyMap> {
    let peak = map.max();
    if peak <= 0.0 {
        return Err(Error::AllZeroMap);
    }
    map.scaled(1.0 / peak)
}

/// Divides by the total so the map sums to 1.
pub fn normalize_distribution(map: &SaliencyMap) -> Result<SaliencyMap> {
    let total = map.sum();
    if total <= 0.0 {
        return Err(Error::AllZeroMap);
    }
    SaliencyMap::new(
        map.width,
        map.height,
        map.values.iter().map(|v| v / total).collect(),
    )
}

/// Source sample positions and blend weights for one axis, pixel-center aligned.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with pixel-center alignment; edges clamp.
pub fn resize_bilinear(map: &SaliencyMap, out_width: usize, out_height: usize) -> Result<SaliencyMap> {
    if out_width == 0 || out_height == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {out_width}x{out_height}"
        )));
    }
    if out_width == map.width && out_height == map.height {
        return Ok(map.clone());
    }
    let xs = bilinear_taps(map.width, out_width);
    let ys = bilinear_taps(map.height, out_height);
    let mut out = Vec::with_capacity(out_width * out_height);
    for &(y0, y1, ty) in &ys {
        let r0 = &map.values[y0 * map.width..(y0 + 1) * map.width];
        let r1 = &map.values[y1 * map.width..(y1 + 1) * map.width];
        for &(x0, x1, tx) in &xs {
            let top = r0[x0] * (1.0 - tx) + r0[x1] * tx;
            let bottom = r1[x0] * (1.0 - tx) + r1[x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    SaliencyMap::new(out_width, out_height, out)
}
