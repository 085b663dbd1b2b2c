//! Mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MgtError, Network};
use crate::nn::{OptimizerState, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Seeds the batch order.
    pub seed: u64,
    /// Stop once the loss moved less than this over `patience` steps.
    pub min_delta: f64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            batch: 8,
            seed: 0,
            min_delta: 1e-9,
            patience: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// `losses[t]` is the batch loss before update `t + 1`; the last entry is
    /// measured after the final update, so there are `steps_taken + 1` values.
    pub losses: Vec<f64>,
    pub steps_taken: usize,
    pub stopped_early: bool,
}

#[derive(Debug)]
pub enum TrainError {
    Model(MgtError),
    /// The loss became NaN or infinite at this step.
    NonFinite { step: usize, loss: f64 },
}

impl From<MgtError> for TrainError {
    fn from(e: MgtError) -> Self {
        Self::Model(e)
    }
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Model(e) => e.fmt(f),
            Self::NonFinite { step, loss } => write!(f, "loss {loss} at step {step} is not finite"),
        }
    }
}

impl std::error::Error for TrainError {}

/// Batch index lists: the dataset is reshuffled every epoch, and a batch that
/// would straddle two epochs is filled from the next one.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn gather(t: &Tensor4, idx: &[usize]) -> Tensor4 {
    let [_, c, h, w] = t.shape();
    let mut data = Vec::with_capacity(idx.len() * t.sample_len());
    for &i in idx {
        data.extend_from_slice(t.sample(i));
    }
    Tensor4::from_vec([idx.len(), c, h, w], data).expect("gathered whole samples")
}

/// Trains `net` on `(images, targets)` and calls `on_step(t, loss)` for every
/// recorded loss. With a batch at least the dataset size every step sees the
/// full set in a fixed order.
pub fn train(
    net: &mut Network,
    images: &Tensor4,
    targets: &Tensor4,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome, TrainError> {
    let n = images.batch();
    if n == 0 || targets.batch() != n || cfg.batch == 0 {
        return Err(MgtError::Config(format!(
            "need a non-empty batch and matching images/targets, got {n} images, {} targets, batch {}",
            targets.batch(),
            cfg.batch
        ))
        .into());
    }
    let full = cfg.batch >= n;
    let mut batches = Batches::new(n, cfg.seed);
    let mut next_batch = || {
        if full {
            (0..n).collect::<Vec<_>>()
        } else {
            batches.next(cfg.batch)
        }
    };
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut stopped_early = false;
    let mut steps_taken = 0;
    for t in 0..cfg.steps {
        let idx = next_batch();
        let loss = net.train_step(&gather(images, &idx), &gather(targets, &idx), opt)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step: t, loss });
        }
        on_step(t, loss);
        losses.push(loss);
        steps_taken += 1;
        if cfg.patience > 0 && losses.len() > cfg.patience {
            let prev = losses[losses.len() - 1 - cfg.patience];
            if (loss - prev).abs() < cfg.min_delta {
                stopped_early = true;
                break;
            }
        }
    }
    let idx = next_batch();
    let loss = net.loss(&gather(images, &idx), &gather(targets, &idx))?;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite { step: steps_taken, loss });
    }
    on_step(steps_taken, loss);
    losses.push(loss);
    Ok(TrainOutcome {
        losses,
        steps_taken,
        stopped_early,
    })
}
