//! The trainable gaze head: a 1x1 convolution down to 16 channels, one 2x2
//! average-pooling stage, a dense layer with one logit per grid cell, and a
//! sigmoid. Forward and backward passes are written out by hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::saliency::{GridActivation, GridSpec, GridVector};

/// Output channels of the 1x1 convolution.
pub const CONV_CHANNELS: usize = 16;

/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureDims {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::DimensionMismatch(format!(
                "feature dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        Ok(FeatureDims {
            channels,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial size after 2x2/stride-2 pooling (odd sizes round up).
    pub fn pooled(&self) -> (usize, usize) {
        (self.height.div_ceil(2), self.width.div_ceil(2))
    }

    /// Length of the flattened vector fed to the dense layer.
    pub fn dense_inputs(&self) -> usize {
        let (ph, pw) = self.pooled();
        CONV_CHANNELS * ph * pw
    }
}

/// A `c x h x w` feature map, row-major with channel outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    dims: FeatureDims,
    values: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let dims = FeatureDims::new(channels, height, width)?;
        if values.len() != dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "{channels}x{height}x{width} tensor needs {} values, got {}",
                dims.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature values must be finite".into()));
        }
        Ok(FeatureTensor { dims, values })
    }

    pub fn dims(&self) -> FeatureDims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.dims.height * self.dims.width;
        &self.values[c * hw..(c + 1) * hw]
    }
}

/// Weights and biases of the head. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub input_dims: FeatureDims,
    pub grid: GridSpec,
    /// `[CONV_CHANNELS][channels]`
    pub conv_weights: Vec<f64>,
    pub conv_bias: Vec<f64>,
    /// `[K][dense_inputs]`
    pub dense_weights: Vec<f64>,
    pub dense_bias: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(input_dims: FeatureDims, grid: GridSpec) -> Self {
        let k = grid.cells();
        ModelParams {
            input_dims,
            grid,
            conv_weights: vec![0.0; CONV_CHANNELS * input_dims.channels],
            conv_bias: vec![0.0; CONV_CHANNELS],
            dense_weights: vec![0.0; k * input_dims.dense_inputs()],
            dense_bias: vec![0.0; k],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dims, self.grid)
    }

    /// Parameter blocks in declaration order.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            &self.conv_weights,
            &self.conv_bias,
            &self.dense_weights,
            &self.dense_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.conv_weights,
            &mut self.conv_bias,
            &mut self.dense_weights,
            &mut self.dense_bias,
        ]
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.input_dims == other.input_dims && self.grid == other.grid
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Total number of weights and biases.
pub fn count_params(params: &ModelParams) -> usize {
    params.tensors().iter().map(|t| t.len()).sum()
}

/// Uniform `[-sqrt(1/fan_in), sqrt(1/fan_in)]` weights per layer, zero biases.
pub fn init_params(input_dims: FeatureDims, grid: GridSpec, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(input_dims, grid);
    let conv_bound = (1.0 / input_dims.channels as f64).sqrt();
    for w in &mut params.conv_weights {
        *w = rng.gen_range(-conv_bound..=conv_bound);
    }
    let dense_bound = (1.0 / input_dims.dense_inputs() as f64).sqrt();
    for w in &mut params.dense_weights {
        *w = rng.gen_range(-dense_bound..=dense_bound);
    }
    params
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Intermediate activations kept for the backward pass.
struct Activations {
    pooled: Vec<f64>,
    probs: Vec<f64>,
}

fn check_input(params: &ModelParams, features: &FeatureTensor) -> Result<()> {
    if features.dims != params.input_dims {
        return Err(Error::DimensionMismatch(format!(
            "features are {:?}, model expects {:?}",
            features.dims, params.input_dims
        )));
    }
    Ok(())
}

/// Number of input pixels averaged into pooled cell `(py, px)`.
#[inline]
fn window(len: usize, p: usize) -> std::ops::Range<usize> {
    2 * p..(2 * p + 2).min(len)
}

fn run_forward(params: &ModelParams, features: &FeatureTensor) -> Activations {
    let dims = params.input_dims;
    let (h, w) = (dims.height, dims.width);
    let hw = h * w;
    let (ph, pw) = dims.pooled();

    let mut conv = vec![0.0; CONV_CHANNELS * hw];
    for (k, out) in conv.chunks_exact_mut(hw).enumerate() {
        out.fill(params.conv_bias[k]);
        let wk = &params.conv_weights[k * dims.channels..(k + 1) * dims.channels];
        for (c, wkc) in wk.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(features.channel(c)) {
                *o += wkc * v;
            }
        }
    }

    let mut pooled = Vec::with_capacity(CONV_CHANNELS * ph * pw);
    for plane in conv.chunks_exact(hw) {
        for py in 0..ph {
            for px in 0..pw {
                let (rows, cols) = (window(h, py), window(w, px));
                let n = (rows.len() * cols.len()) as f64;
                let mut acc = 0.0;
                for y in rows {
                    for x in cols.clone() {
                        acc += plane[y * w + x];
                    }
                }
                pooled.push(acc / n);
            }
        }
    }

    let n_in = pooled.len();
    let probs = params
        .dense_weights
        .chunks_exact(n_in)
        .zip(&params.dense_bias)
        .map(|(row, b)| {
            let z = b + row.iter().zip(&pooled).map(|(a, f)| a * f).sum::<f64>();
            sigmoid(z)
        })
        .collect();
    Activations { pooled, probs }
}

/// Runs the head on one feature map.
pub fn forward(params: &ModelParams, features: &FeatureTensor) -> Result<GridActivation> {
    check_input(params, features)?;
    let act = run_forward(params, features);
    Ok(GridActivation {
        spec: params.grid,
        probs: act.probs,
    })
}

fn bce(probs: &[f64], target: &[f64]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(target)
        .map(|(p, y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    -total / probs.len() as f64
}

/// Mean binary cross-entropy over grid cells.
pub fn bce_loss(pred: &GridActivation, target: &GridVector) -> Result<f64> {
    if pred.spec != target.spec {
        return Err(Error::SpecMismatch(format!(
            "prediction grid {} vs target grid {}",
            pred.spec, target.spec
        )));
    }
    Ok(bce(&pred.probs, &target.to_f64()))
}

/// Loss and parameter gradients for one sample.
pub fn loss_and_gradients(
    params: &ModelParams,
    features: &FeatureTensor,
    target: &GridVector,
) -> Result<(f64, ModelParams)> {
    check_input(params, features)?;
    if target.spec != params.grid {
        return Err(Error::SpecMismatch(format!(
            "target grid {} vs model grid {}",
            target.spec, params.grid
        )));
    }
    let dims = params.input_dims;
    let (h, w) = (dims.height, dims.width);
    let hw = h * w;
    let (ph, pw) = dims.pooled();
    let k = params.grid.cells();

    let act = run_forward(params, features);
    let y = target.to_f64();
    let loss = bce(&act.probs, &y);

    let mut grads = params.zeros_like();
    // d(mean BCE)/d(logit) for sigmoid outputs
    let dz: Vec<f64> = act
        .probs
        .iter()
        .zip(&y)
        .map(|(p, t)| (p - t) / k as f64)
        .collect();

    let n_in = act.pooled.len();
    let mut d_pooled = vec![0.0; n_in];
    for (j, dzj) in dz.iter().enumerate() {
        grads.dense_bias[j] = *dzj;
        let row = &params.dense_weights[j * n_in..(j + 1) * n_in];
        let grow = &mut grads.dense_weights[j * n_in..(j + 1) * n_in];
        for i in 0..n_in {
            grow[i] = dzj * act.pooled[i];
            d_pooled[i] += dzj * row[i];
        }
    }

    // spread each pooled gradient evenly over its window
    let mut d_conv = vec![0.0; CONV_CHANNELS * hw];
    for (kc, plane) in d_conv.chunks_exact_mut(hw).enumerate() {
        for py in 0..ph {
            for px in 0..pw {
                let (rows, cols) = (window(h, py), window(w, px));
                let g = d_pooled[(kc * ph + py) * pw + px] / (rows.len() * cols.len()) as f64;
                for yy in rows {
                    for xx in cols.clone() {
                        plane[yy * w + xx] = g;
                    }
                }
            }
        }
    }

    for (kc, plane) in d_conv.chunks_exact(hw).enumerate() {
        grads.conv_bias[kc] = plane.iter().sum();
        for c in 0..dims.channels {
            grads.conv_weights[kc * dims.channels + c] = plane
                .iter()
                .zip(features.channel(c))
                .map(|(g, v)| g * v)
                .sum();
        }
    }
    Ok((loss, grads))
}

/// Analytic gradients of `bce_loss(forward(params, features), target)`.
pub fn backward(
    params: &ModelParams,
    features: &FeatureTensor,
    target: &GridVector,
) -> Result<ModelParams> {
    loss_and_gradients(params, features, target).map(|(_, g)| g)
}
