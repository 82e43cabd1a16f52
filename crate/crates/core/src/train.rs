//! Shared minibatch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EalmError, Result};
use crate::kv::KvMap;
use crate::numerics::{AdamWConfig, GradAccumulator, Graph, LrSchedule, OptimizerState, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Examples per micro-batch.
    pub batch_size: usize,
    /// Micro-batches summed per optimizer step.
    pub grad_accum: usize,
    pub schedule: LrSchedule,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 16,
            grad_accum: 2,
            schedule: LrSchedule {
                lr_start: 1e-5,
                lr_max: 2e-3,
                lr_end: 1e-4,
                warmup_tokens: 4_000,
                decay_interval_tokens: 20_000,
                decay_factor: 0.9,
            },
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KvMap, base: TrainConfig) -> Result<Self> {
        let s = base.schedule;
        let c = TrainConfig {
            epochs: kv.get_or("epochs", base.epochs)?,
            batch_size: kv.get_or("batch_size", base.batch_size)?,
            grad_accum: kv.get_or("grad_accum", base.grad_accum)?,
            schedule: LrSchedule {
                lr_start: kv.get_or("lr_start", s.lr_start)?,
                lr_max: kv.get_or("lr_max", s.lr_max)?,
                lr_end: kv.get_or("lr_end", s.lr_end)?,
                warmup_tokens: kv.get_or("warmup_tokens", s.warmup_tokens)?,
                decay_interval_tokens: kv.get_or("decay_interval_tokens", s.decay_interval_tokens)?,
                decay_factor: kv.get_or("decay_factor", s.decay_factor)?,
            },
            adamw: AdamWConfig {
                weight_decay: kv.get_or("weight_decay", base.adamw.weight_decay)?,
                ..base.adamw
            },
        };
        if c.batch_size == 0 || c.grad_accum == 0 {
            return Err(EalmError::config("batch_size and grad_accum must be positive"));
        }
        if !(c.schedule.lr_max > 0.0 && c.schedule.lr_end > 0.0 && c.schedule.lr_start > 0.0) {
            return Err(EalmError::config("learning rates must be positive"));
        }
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("grad_accum", self.grad_accum);
        kv.set("lr_start", self.schedule.lr_start);
        kv.set("lr_max", self.schedule.lr_max);
        kv.set("lr_end", self.schedule.lr_end);
        kv.set("warmup_tokens", self.schedule.warmup_tokens);
        kv.set("decay_interval_tokens", self.schedule.decay_interval_tokens);
        kv.set("decay_factor", self.schedule.decay_factor);
        kv.set("weight_decay", self.adamw.weight_decay);
        kv
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStats {
    pub optimizer_steps: u64,
    pub tokens_seen: u64,
    /// Mean loss of every micro-batch, in order.
    pub losses: Vec<f64>,
}

/// Deterministic per-step seed so dropout masks do not depend on history.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `epochs` shuffled passes over `n_examples`. `batch_loss` builds the
/// mean loss of one micro-batch and returns it with its token count.
pub fn run_training<F>(
    store: &mut ParamStore,
    n_examples: usize,
    config: &TrainConfig,
    seed: u64,
    mut batch_loss: F,
) -> Result<TrainStats>
where
    F: FnMut(&mut Graph, &ParamStore, &[usize]) -> Result<(Var, usize)>,
{
    if n_examples == 0 {
        return Err(EalmError::config("no training examples"));
    }
    let mut state = OptimizerState::for_store(config.adamw, store);
    let mut acc = GradAccumulator::new(store);
    let mut stats = TrainStats::default();
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut micro = 0u64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let last = batches.len() - 1;
        for (bi, batch) in batches.into_iter().enumerate() {
            let mut g = Graph::train(mix_seed(seed, micro));
            micro += 1;
            let (loss, tokens) = batch_loss(&mut g, store, batch)?;
            stats.losses.push(g.value(loss).item());
            g.backward(loss)?;
            acc.add(g.param_grads(store)?);
            stats.tokens_seen += tokens as u64;
            if acc.micro_batches == config.grad_accum || bi == last {
                let lr = config.schedule.lr_at(stats.tokens_seen);
                acc.step(store, &mut state, lr)?;
                stats.optimizer_steps += 1;
            }
        }
    }
    Ok(stats)
}
