//! LAMB with a Lookahead wrapper, global-norm clipping and the flat-then-cosine
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::Tensor;

/// Global L2 norm over all gradient buffers.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `max_norm / g` when their global norm `g`
/// exceeds `max_norm`. Returns the norm observed before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    ensure!(
        max_norm > 0.0,
        Contract,
        "max_norm must be positive, got {max_norm}"
    );
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for LambConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LambState {
    pub config: LambConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl LambState {
    pub fn new(params: &[Tensor], config: LambConfig) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

/// One LAMB update. Per tensor: bias-corrected Adam direction
/// `u = m_hat / (sqrt(v_hat) + eps) + lambda * w`, trust ratio
/// `phi = |w| / |u|` (1 if either norm is zero), then `w -= lr * phi * u`.
pub fn lamb_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut LambState, lr: f64) -> Result<()> {
    ensure!(
        lr >= 0.0,
        Contract,
        "learning rate must be non-negative, got {lr}"
    );
    ensure!(
        params.len() == grads.len() && params.len() == state.m.len(),
        Dimension,
        "{} parameters, {} gradients, {} moment buffers",
        params.len(),
        grads.len(),
        state.m.len()
    );
    let LambConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    let mut u = Vec::new();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        ensure!(
            p.len() == g.len(),
            Dimension,
            "gradient {i} has {} entries for {}",
            g.len(),
            p.len()
        );
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        u.clear();
        for k in 0..g.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            u.push(mh / (vh.sqrt() + eps) + weight_decay * p.data()[k]);
        }
        let w_norm = p.l2_norm();
        let u_norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let phi = if w_norm == 0.0 || u_norm == 0.0 {
            1.0
        } else {
            w_norm / u_norm
        };
        for (w, du) in p.data_mut().iter_mut().zip(&u) {
            *w -= lr * phi * du;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LookaheadState {
    pub alpha: f64,
    pub k: u64,
    pub slow: Vec<Tensor>,
    pub counter: u64,
}

impl LookaheadState {
    pub fn new(params: &[Tensor], alpha: f64, k: u64) -> Result<Self> {
        ensure!(k >= 1, Contract, "lookahead k must be at least 1");
        ensure!(
            (0.0..=1.0).contains(&alpha),
            Contract,
            "lookahead alpha {alpha} not in [0, 1]"
        );
        Ok(Self {
            alpha,
            k,
            slow: params.to_vec(),
            counter: 0,
        })
    }
}

/// Call once after every inner step. On every k-th call the slow weights move
/// `alpha` of the way towards the fast ones and the fast weights are reset to
/// them. Returns whether this call synchronized.
pub fn lookahead_update(fast: &mut [Tensor], state: &mut LookaheadState) -> Result<bool> {
    ensure!(
        fast.len() == state.slow.len(),
        Dimension,
        "{} fast tensors for {} slow",
        fast.len(),
        state.slow.len()
    );
    state.counter += 1;
    if !state.counter.is_multiple_of(state.k) {
        return Ok(false);
    }
    for (f, s) in fast.iter_mut().zip(&mut state.slow) {
        ensure!(f.shape() == s.shape(), Dimension, "fast/slow shape mismatch");
        for (fv, sv) in f.data_mut().iter_mut().zip(s.data_mut()) {
            *sv += state.alpha * (*fv - *sv);
            *fv = *sv;
        }
    }
    Ok(true)
}

/// Base rate for the first 70% of steps, then cosine annealing towards 0.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    ensure!(
        step < total_steps,
        Contract,
        "step {step} outside schedule of {total_steps} steps"
    );
    let t = total_steps as f64;
    let flat = 0.7 * t;
    let s = step as f64;
    if s < flat {
        return Ok(base_lr);
    }
    let progress = (s - flat) / (0.3 * t);
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
