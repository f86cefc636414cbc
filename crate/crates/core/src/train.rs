//! Mini-batch training loop with a step-decay learning rate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::head::{init_params, loss_and_gradients, FeatureTensor, ModelParams};
use crate::optim::{adam_step, AdamState};
use crate::par::Exec;
use crate::saliency::{GridSpec, GridVector};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grid: GridSpec,
}

impl TrainConfig {
    /// 40 epochs, lr 0.01 decayed by 0.1 every 10 epochs, batches of 32.
    pub fn new(grid: GridSpec) -> Self {
        TrainConfig {
            epochs: 40,
            base_lr: 0.01,
            decay_factor: 0.1,
            decay_every: 10,
            batch_size: 32,
            seed: 0,
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.base_lr > 0.0) {
            return bad(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_every == 0 {
            return bad("decay_every must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

/// `base_lr * decay_factor ^ floor(epoch / decay_every)`
pub fn lr_schedule(config: &TrainConfig, epoch: usize) -> f64 {
    let drops = (epoch / config.decay_every) as i32;
    config.base_lr * config.decay_factor.powi(drops)
}

/// Visiting order for one epoch; depends only on `(seed, epoch, len)`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean per-sample loss of each epoch, measured as the epoch runs.
    pub history: Vec<f64>,
}

pub fn train(
    dataset: &[(FeatureTensor, GridVector)],
    config: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (first, _) = dataset.first().ok_or(Error::EmptyDataset)?;
    let dims = first.dims();
    for (i, (x, y)) in dataset.iter().enumerate() {
        if x.dims() != dims {
            return Err(Error::InconsistentDims(format!(
                "sample {i} has features {:?}, expected {dims:?}",
                x.dims()
            )));
        }
        if y.spec != config.grid {
            return Err(Error::InconsistentDims(format!(
                "sample {i} has grid {}, config uses {}",
                y.spec, config.grid
            )));
        }
    }

    let mut params = init_params(dims, config.grid, config.seed);
    let mut state = AdamState::new(&params);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = lr_schedule(config, epoch);
        let order = epoch_order(config.seed, epoch, dataset.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let per_sample = exec.map(batch, |&i| {
                let (x, y) = &dataset[i];
                loss_and_gradients(&params, x, y)
            });
            let mut grad = params.zeros_like();
            for r in per_sample {
                let (loss, g) = r?;
                epoch_loss += loss;
                grad.add_scaled(&g, 1.0);
            }
            let scale = 1.0 / batch.len() as f64;
            for t in grad.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= scale);
            }
            adam_step(&mut params, &grad, &mut state, lr)?;
        }
        history.push(epoch_loss / dataset.len() as f64);
    }
    Ok(TrainOutcome { params, history })
}
