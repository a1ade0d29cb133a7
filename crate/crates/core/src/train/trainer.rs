use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::loss::{accumulate, Gradient, MAX_MARGIN, MIN_MARGIN};
use super::mining::{batch_hard_mine, sample_triplets, Triplet};
use crate::descriptor::{AffineHead, Descriptor};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// One training example: a class label and the l2-normalized pooled feature
/// that feeds the head.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub class_id: String,
    pub input: Descriptor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    #[default]
    Random,
    BatchHard,
}

impl std::str::FromStr for Mining {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Mining::Random),
            "batch_hard" | "batch-hard" => Ok(Mining::BatchHard),
            other => Err(Error::Invalid(format!("unknown mining mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mining: Mining,
    pub seed: u64,
    /// `(epoch, rate)`: from `epoch` on, `rate` replaces `learning_rate`.
    pub lr_schedule: Vec<(usize, f64)>,
    /// Backbone fine-tuning rates. Kept for provenance only; there is no
    /// backbone to train here.
    pub backbone_lr_schedule: Vec<(usize, f64)>,
    /// Embedding size; `None` keeps the input dimension.
    pub out_dim: Option<usize>,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.6,
            learning_rate: 1e-5,
            epochs: 10,
            batch_size: 64,
            mining: Mining::Random,
            seed: 0,
            lr_schedule: Vec::new(),
            backbone_lr_schedule: vec![(0, 1e-7), (10, 1e-8), (15, 1e-9)],
            out_dim: None,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_MARGIN..=MAX_MARGIN).contains(&self.margin) {
            return Err(Error::Invalid(format!(
                "margin {} outside [{MIN_MARGIN}, {MAX_MARGIN}]",
                self.margin
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        let rates = std::iter::once(self.learning_rate).chain(self.lr_schedule.iter().map(|r| r.1));
        for r in rates {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Invalid(format!("learning rate {r} must be positive")));
            }
        }
        if self.out_dim == Some(0) {
            return Err(Error::Invalid("out_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .max_by_key(|(e, _)| *e)
            .map_or(self.learning_rate, |&(_, r)| r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub active_fraction: f64,
    pub lr: f64,
}

/// Identity when square; otherwise a truncated random orthogonal matrix.
/// The bias starts at zero.
pub fn init_head(in_dim: usize, out_dim: usize, seed: u64) -> AffineHead {
    if in_dim == out_dim {
        return AffineHead::identity(in_dim);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1417_A5E5);
    let (rows, cols) = (in_dim.max(out_dim), in_dim.min(out_dim));
    let g = DMatrix::<f64>::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    let mut weights = vec![0.0; out_dim * in_dim];
    for i in 0..out_dim {
        for j in 0..in_dim {
            weights[i * in_dim + j] = if out_dim < in_dim { q[(j, i)] } else { q[(i, j)] };
        }
    }
    AffineHead::new(in_dim, out_dim, weights, vec![0.0; out_dim]).expect("shapes consistent")
}

/// Triplets folded into one partial gradient before the ordered reduction.
const GRAD_CHUNK: usize = 8;

/// Mean loss and mean gradient over `triplets`, plus the active count.
///
/// Triplets are split into fixed chunks; chunk partials are summed in chunk
/// order, so the result does not depend on `exec` or the thread count.
pub fn batch_loss_and_grad(
    head: &AffineHead,
    samples: &[TrainingSample],
    triplets: &[Triplet],
    margin: f64,
    exec: Exec,
) -> Result<(f64, Gradient, usize)> {
    let mut total = Gradient::zeros(head);
    if triplets.is_empty() {
        return Ok((0.0, total, 0));
    }
    let chunks: Vec<&[Triplet]> = triplets.chunks(GRAD_CHUNK).collect();
    let partials = par::map(exec, &chunks, |chunk| -> Result<(f64, usize, Gradient)> {
        let mut g = Gradient::zeros(head);
        let mut loss = 0.0;
        let mut active = 0;
        for t in *chunk {
            let (l, a) = accumulate(
                head,
                samples[t.query].input.values(),
                samples[t.positive].input.values(),
                samples[t.negative].input.values(),
                margin,
                1.0,
                &mut g,
            )?;
            loss += l;
            active += a as usize;
        }
        Ok((loss, active, g))
    });
    let mut loss = 0.0;
    let mut active = 0;
    for p in partials {
        let (l, a, g) = p?;
        loss += l;
        active += a;
        total.add_assign(&g);
    }
    let n = triplets.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total, active))
}

/// Trains a head on `samples` (unit pooled inputs) and returns it with the
/// per-epoch log. Identical inputs and seed give a bitwise-identical head.
pub fn train_head(samples: &[TrainingSample], config: &TrainConfig) -> Result<(AffineHead, Vec<EpochLog>)> {
    config.validate()?;
    let in_dim = samples
        .first()
        .map(|s| s.input.dim())
        .ok_or(Error::InsufficientClasses(0))?;
    for s in samples {
        crate::descriptor::check_dim(in_dim, s.input.dim())?;
    }
    let out_dim = config.out_dim.unwrap_or(in_dim);
    let mut head = init_head(in_dim, out_dim, config.seed);
    let mut adam = AdamState::new(head.param_count());
    let mut params = head.params();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Validates class structure up front for both mining modes.
    sample_triplets(samples, 1, &mut rng.clone())?;

    let steps_per_epoch = samples.len().div_ceil(config.batch_size).max(1);
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut active = 0usize;
        let mut seen = 0usize;

        if config.mining == Mining::BatchHard {
            order.shuffle(&mut rng);
        }
        for step in 0..steps_per_epoch {
            let triplets = match config.mining {
                Mining::Random => sample_triplets(samples, config.batch_size, &mut rng)?,
                Mining::BatchHard => {
                    let lo = step * config.batch_size;
                    let chunk = &order[lo..(lo + config.batch_size).min(order.len())];
                    match batch_hard_mine(samples, chunk, &head) {
                        Ok(t) => t,
                        Err(Error::InsufficientClasses(_)) => continue,
                        Err(e) => return Err(e),
                    }
                }
            };
            if triplets.is_empty() {
                continue;
            }
            let (loss, grad, n_active) =
                batch_loss_and_grad(&head, samples, &triplets, config.margin, config.exec)?;
            loss_sum += loss * triplets.len() as f64;
            active += n_active;
            seen += triplets.len();
            adam_step(&mut adam, &mut params, &grad.values, lr)?;
            head.set_params(&params)?;
        }

        let denom = seen.max(1) as f64;
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / denom,
            active_fraction: active as f64 / denom,
            lr,
        };
        tracing::debug!(epoch, mean_loss = entry.mean_loss, active = entry.active_fraction, "epoch");
        log.push(entry);
    }
    Ok((head, log))
}
