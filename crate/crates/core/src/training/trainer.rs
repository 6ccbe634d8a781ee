//! Approximate mini-batch training: every step sees only a small subset of
//! each support set, while evaluation can use the whole set.

use super::adam::{Adam, AdamConfig};
use super::graph::{backward, forward_loss, loss_value, Example};
use super::task::{CentroidTask, Episode};
use crate::encoder::SetEncoder;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Parameters, optimizer moments and the RNG driving subset and slot sampling.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub encoder: SetEncoder<T>,
    pub optimizer: Adam<T>,
    pub rng: Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(encoder: SetEncoder<T>, adam: AdamConfig, seed: u64) -> Result<Self> {
        encoder.validate()?;
        let optimizer = Adam::new(adam, encoder.param_count())?;
        Ok(Self {
            encoder,
            optimizer,
            rng: Rng::new(seed),
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Forward, backward and one optimizer update. Returns the loss before
    /// the update.
    pub fn train_step(&mut self, examples: &[Example<T>]) -> Result<T> {
        let graph = forward_loss(&self.encoder, examples)?;
        let loss = graph.loss_value();
        if !loss.is_finite() {
            return Err(Error::Training {
                step: self.optimizer.step as usize,
                detail: format!("loss is {loss}"),
            });
        }
        let grad = backward(&graph)?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training {
                step: self.optimizer.step as usize,
                detail: format!("gradient coordinate {i} is not finite"),
            });
        }
        let mut params = self.encoder.flat_params();
        self.optimizer.update(&mut params, &grad)?;
        self.encoder.set_flat_params(&params)?;
        Ok(loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Elements drawn from each support set per step.
    pub subset_size: usize,
    /// Episodes per optimizer step.
    pub episodes_per_step: usize,
    /// Evaluate every this many steps (and after the last). Zero disables.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            subset_size: 16,
            episodes_per_step: 1,
            eval_every: 50,
            eval_episodes: 8,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss_full: Option<f64>,
    pub eval_loss_partitioned: Option<f64>,
}

impl HistoryRow {
    pub const CSV_HEADER: &'static str = "step,train_loss,eval_loss_full,eval_loss_partitioned";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        format!("{},{:.17e},{},{}", self.step, self.train_loss, opt(self.eval_loss_full), opt(self.eval_loss_partitioned))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub history: Vec<HistoryRow>,
}

/// Seed of the held-out episodes and evaluation slots for a run seeded with `seed`.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_e7a1_0000_0001
}

/// Held-out episodes for a run seeded with `seed`.
pub fn eval_episodes<T: Scalar>(task: &CentroidTask, count: usize, seed: u64) -> Result<Vec<Episode<T>>> {
    let mut rng = Rng::new(eval_seed(seed));
    (0..count).map(|_| task.sample(&mut rng)).collect()
}

/// Mean loss over `episodes` when each class is encoded from the first
/// `size` support points, fed in batches of at most `batch` rows.
pub fn prefix_loss<T: Scalar>(encoder: &SetEncoder<T>, episodes: &[Episode<T>], size: usize, batch: usize, slot_seed: u64) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Parameter("evaluation needs at least one episode".into()));
    }
    let mut total = 0.0;
    for ep in episodes {
        total += loss_value(encoder, &ep.prefix_examples(size, batch, slot_seed))?.to_f64_lossy();
    }
    Ok(total / episodes.len() as f64)
}

/// [`prefix_loss`] for each size, as a single batch.
pub fn loss_by_set_size<T: Scalar>(encoder: &SetEncoder<T>, episodes: &[Episode<T>], sizes: &[usize], slot_seed: u64) -> Result<Vec<f64>> {
    sizes.iter().map(|&s| prefix_loss(encoder, episodes, s, s.max(1), slot_seed)).collect()
}

/// Trains on random `subset_size`-subsets of freshly drawn episodes.
///
/// Every step draws its episodes, subsets and slot seed from the state's
/// RNG, so a run is a pure function of `config`.
pub fn train_minibatch<T: Scalar>(encoder: SetEncoder<T>, task: &CentroidTask, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    task.validate()?;
    if config.subset_size == 0 || config.subset_size >= task.shot {
        return Err(Error::Parameter(format!("subset size {} must be in 1..{}", config.subset_size, task.shot)));
    }
    if config.episodes_per_step == 0 {
        return Err(Error::Parameter("episodes_per_step must be at least 1".into()));
    }
    if encoder.input_dim() != task.d || encoder.output_len() != task.d {
        return Err(Error::Parameter(format!(
            "encoder maps {} -> {} values but the task needs {} -> {}",
            encoder.input_dim(),
            encoder.output_len(),
            task.d,
            task.d
        )));
    }
    let held_out = if config.eval_every > 0 { eval_episodes::<T>(task, config.eval_episodes.max(1), config.seed)? } else { Vec::new() };
    let slot_seed = eval_seed(config.seed);
    let mut state = TrainState::new(encoder, config.adam, config.seed)?;
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let seed = state.rng.next_u64();
        let mut examples = Vec::new();
        for _ in 0..config.episodes_per_step {
            let ep: Episode<T> = task.sample(&mut state.rng)?;
            examples.extend(ep.subset_examples(config.subset_size, &mut state.rng, seed));
        }
        let train_loss = state.train_step(&examples)?.to_f64_lossy();
        let evaluate = config.eval_every > 0 && ((step + 1) % config.eval_every == 0 || step + 1 == config.steps);
        let (full, parts) = if evaluate {
            (
                Some(prefix_loss(&state.encoder, &held_out, task.shot, task.shot, slot_seed)?),
                Some(prefix_loss(&state.encoder, &held_out, task.shot, config.subset_size, slot_seed)?),
            )
        } else {
            (None, None)
        };
        history.push(HistoryRow {
            step: step + 1,
            train_loss,
            eval_loss_full: full,
            eval_loss_partitioned: parts,
        });
    }
    Ok(TrainOutcome { state, history })
}
