use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{EalmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First/second moment estimates for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, shapes: &[&[usize]]) -> Self {
        OptimizerState {
            config,
            step: 0,
            first_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// State sized for every parameter of `store`, in store order.
    pub fn for_store(config: AdamWConfig, store: &ParamStore) -> Self {
        let shapes: Vec<&[usize]> = store.iter().map(|(_, p)| p.tensor.shape()).collect();
        Self::new(config, &shapes)
    }
}

/// One AdamW update with decoupled weight decay:
/// `p ← p·(1 − lr·λ) − lr · m̂ / (√v̂ + ε)`.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(EalmError::usage(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(EalmError::usage(format!(
                "adamw: shape mismatch at slot {i}: param {:?}, grad {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                state.first_moment[i].shape()
            )));
        }
    }
    if !(lr > 0.0) {
        return Err(EalmError::usage(format!("adamw: learning rate must be positive, got {lr}")));
    }
    state.step += 1;
    let (bc1, bc2) = bias_corrections(&state.config, state.step);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        update_slot(
            p.data_mut(),
            g.data(),
            state.first_moment[i].data_mut(),
            state.second_moment[i].data_mut(),
            &state.config,
            bc1,
            bc2,
            lr,
        );
    }
    Ok(())
}

fn bias_corrections(c: &AdamWConfig, step: u64) -> (f64, f64) {
    (1.0 - c.beta1.powi(step as i32), 1.0 - c.beta2.powi(step as i32))
}

#[allow(clippy::too_many_arguments)]
fn update_slot(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    c: &AdamWConfig,
    bc1: f64,
    bc2: f64,
    lr: f64,
) {
    for (((pv, &gv), mv), vv) in p.iter_mut().zip(g).zip(m).zip(v) {
        *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
        *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
        let mhat = *mv / bc1;
        let vhat = *vv / bc2;
        *pv = *pv * (1.0 - lr * c.weight_decay) - lr * mhat / (vhat.sqrt() + c.eps);
    }
}

/// Sums gradients over micro-batches before a single optimizer step.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    sums: Vec<Option<Tensor>>,
    pub micro_batches: usize,
}

impl GradAccumulator {
    pub fn new(store: &ParamStore) -> Self {
        GradAccumulator {
            sums: vec![None; store.len()],
            micro_batches: 0,
        }
    }

    pub fn add(&mut self, grads: Vec<(ParamId, Tensor)>) {
        for (id, g) in grads {
            match &mut self.sums[id.index()] {
                Some(t) => t
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        self.micro_batches += 1;
    }

    /// Applies one AdamW step to every trainable parameter and clears the sums.
    ///
    /// Trainable parameters without an accumulated gradient take a zero
    /// gradient so their moments and decay keep advancing.
    pub fn step(&mut self, store: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
        for (i, g) in self.sums.iter().enumerate() {
            let id = ParamId(i);
            if g.is_some() && store.is_frozen(id) {
                return Err(EalmError::contract(format!(
                    "optimizer received a gradient for frozen parameter {}",
                    store.name(id)
                )));
            }
        }
        if !(lr > 0.0) {
            return Err(EalmError::usage(format!("adamw: learning rate must be positive, got {lr}")));
        }
        if state.first_moment.len() != store.len() {
            return Err(EalmError::usage("optimizer state does not match the parameter store"));
        }
        state.step += 1;
        let (bc1, bc2) = bias_corrections(&state.config, state.step);
        let config = state.config;
        for i in 0..store.len() {
            let id = ParamId(i);
            if store.is_frozen(id) {
                continue;
            }
            let zero;
            let g = match &self.sums[i] {
                Some(g) => g.data(),
                None => {
                    zero = vec![0.0; store.get(id).len()];
                    &zero
                }
            };
            update_slot(
                store.get_mut(id).data_mut(),
                g,
                state.first_moment[i].data_mut(),
                state.second_moment[i].data_mut(),
                &config,
                bc1,
                bc2,
                lr,
            );
            store.get(id).check_finite(store.name(id))?;
        }
        self.sums.iter_mut().for_each(|s| *s = None);
        self.micro_batches = 0;
        Ok(())
    }
}
