use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::encode::{Encoded, FeatureSchema};
use super::layers::{masked_loss, npt_forward};
use super::{NptConfig, NptParams};
use crate::error::{ensure, Error, Result};
use crate::masking::sample_train_mask;
use crate::numerics::{rng_for, streams, Mode, Tape, Tensor};
use crate::optim::{
    clip_gradients, lamb_step, lookahead_update, lr_at, LambConfig, LambState, LookaheadState,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Rows per step; -1 trains on the whole set at every step.
    pub batch_size: i64,
    pub lr: f64,
    pub p_mask: f64,
    pub clip: f64,
    pub lamb: LambConfig,
    pub lookahead_alpha: f64,
    pub lookahead_k: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: -1,
            lr: 0.01,
            p_mask: 0.15,
            clip: 1.0,
            lamb: LambConfig::default(),
            lookahead_alpha: 0.5,
            lookahead_k: 6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Config, "epochs must be at least 1");
        ensure!(
            self.batch_size == -1 || self.batch_size >= 1,
            Config,
            "batch size must be -1 or positive, got {}",
            self.batch_size
        );
        ensure!(self.lr >= 0.0, Config, "learning rate must be non-negative");
        ensure!(
            self.p_mask > 0.0 && self.p_mask < 1.0,
            Config,
            "p_mask must lie in (0, 1)"
        );
        ensure!(self.clip > 0.0, Config, "clip norm must be positive");
        Ok(())
    }

    fn batch_rows(&self, n: usize) -> usize {
        if self.batch_size < 0 {
            n
        } else {
            (self.batch_size as usize).min(n)
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_rows(n))
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// Loss of every optimizer step, before its update.
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

/// Trains a fresh model by reconstructing Bernoulli-masked entries of `data`.
/// `on_step(step, total_steps, loss)` is called after every step.
pub fn train(
    data: &Encoded,
    schema: &FeatureSchema,
    config: &NptConfig,
    tc: &TrainConfig,
    mut on_step: impl FnMut(usize, usize, f64),
) -> Result<(NptParams, TrainLog)> {
    tc.validate()?;
    config.validate()?;
    ensure!(data.n >= 1, Contract, "no training rows");
    ensure!(
        data.widths == schema.widths(),
        Contract,
        "encoded data does not match the schema"
    );
    let init = NptParams::init(schema, config, &mut rng_for(tc.seed, streams::INIT))?;
    let depth = config.depth;
    let mut flat: Vec<Tensor> = init.tensors().into_iter().cloned().collect();
    let mut lamb = LambState::new(&flat, tc.lamb);
    let mut lookahead = LookaheadState::new(&flat, tc.lookahead_alpha, tc.lookahead_k)?;
    let mut rng = rng_for(tc.seed, streams::TRAIN);

    let rows = tc.batch_rows(data.n);
    let total = tc.epochs * tc.steps_per_epoch(data.n);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.n).collect();
    let mut step = 0usize;
    for _ in 0..tc.epochs {
        if rows < data.n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(rows) {
            let batch = if rows < data.n {
                data.select(chunk)
            } else {
                data.clone()
            };
            let mask = sample_train_mask(batch.n, batch.d(), tc.p_mask, &mut rng)?;

            let mut tape = Tape::new();
            let vars: Vec<_> = flat.iter().map(|t| tape.param(t.clone())).collect();
            let params = NptParams::from_flat(depth, vars.clone());
            let x = tape.constant(batch.input(&mask)?);
            let recon = npt_forward(&mut tape, &params, config, schema, x, Mode::Train, &mut rng)?;
            let out = masked_loss(&mut tape, recon, &batch.targets, &mask, &batch.widths)?;
            let loss = tape.value(out.loss).data()[0];
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss became {loss} at step {step}")));
            }
            tape.backward(out.loss)?;
            let mut grads: Vec<Vec<f64>> = vars
                .iter()
                .zip(&flat)
                .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
                .collect();
            drop(tape);

            let norm = clip_gradients(&mut grads, tc.clip)?;
            let lr = lr_at(step as u64, total as u64, tc.lr)?;
            lamb_step(&mut flat, &grads, &mut lamb, lr)?;
            lookahead_update(&mut flat, &mut lookahead)?;

            log.losses.push(loss);
            log.grad_norms.push(norm);
            on_step(step, total, loss);
            step += 1;
        }
    }
    Ok((NptParams::from_flat(depth, flat), log))
}
