//! Anomaly scores from reconstruction losses over a mask bank.
//!
//! For each bank mask, every validation row is masked with it and stacked on
//! top of the unmasked training context; one forward pass reconstructs them
//! all, and each validation row's masked-entry loss is recorded. A row's score
//! aggregates its losses over the bank.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::masking::{Mask, MaskBank, MaskMatrix};
use crate::model::{sample_losses, Encoded, NptModel};
use crate::numerics::{rng_for, streams, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum TrainContext {
    Full,
    Subsample { size: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub aggregation: Aggregation,
    pub context: TrainContext,
    /// Score each validation row in its own forward pass instead of batching
    /// all of them per mask.
    pub per_sample: bool,
    /// Largest number of rows in one forward pass; the training context is
    /// subsampled to fit.
    pub row_budget: usize,
    /// Seed for automatic context subsampling.
    pub seed: u64,
    pub keep_loss_matrix: bool,
    /// Threads for the per-mask loop; 1 runs inline.
    pub workers: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Mean,
            context: TrainContext::Full,
            per_sample: false,
            row_budget: 10_000,
            seed: 0,
            keep_loss_matrix: false,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyScores {
    pub scores: Vec<f64>,
    /// `n_val x m` losses, row-major, when requested.
    pub loss_matrix: Option<Vec<f64>>,
}

pub fn aggregate(losses: &[f64], mode: Aggregation) -> Result<f64> {
    ensure!(
        !losses.is_empty(),
        Contract,
        "cannot aggregate an empty loss vector"
    );
    Ok(match mode {
        Aggregation::Mean => losses.iter().sum::<f64>() / losses.len() as f64,
        Aggregation::Max => losses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Anything that maps a masked model input to a reconstruction.
pub trait Reconstruct: Sync {
    fn reconstruct(&self, input: Tensor) -> Result<Tensor>;
}

impl Reconstruct for NptModel {
    fn reconstruct(&self, input: Tensor) -> Result<Tensor> {
        NptModel::reconstruct(self, input)
    }
}

/// Chooses the training rows used as context, honouring the row budget.
fn context_rows(n_train: usize, n_val_batch: usize, cfg: &ScoreConfig) -> Result<Vec<usize>> {
    let (want, seed) = match cfg.context {
        TrainContext::Full => (n_train, cfg.seed),
        TrainContext::Subsample { size, seed } => {
            ensure!(
                size >= 1 && size <= n_train,
                Contract,
                "context subsample of {size} from {n_train} training rows"
            );
            (size, seed)
        }
    };
    let room = cfg.row_budget.saturating_sub(n_val_batch);
    let size = if want > room {
        log::info!(
            "event=context_subsample from={n_train} to={room} seed={seed} budget={}",
            cfg.row_budget
        );
        room
    } else {
        want
    };
    if size == n_train {
        return Ok((0..n_train).collect());
    }
    let mut idx = sample(&mut rng_for(seed, streams::CONTEXT), n_train, size).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Losses of `val` rows under one mask, each evaluated with `context` stacked
/// below them.
fn mask_losses(model: &dyn Reconstruct, val: &Encoded, context: &Encoded, mask: &Mask) -> Result<Vec<f64>> {
    let stacked = val.stack(context)?;
    let m = MaskMatrix::repeat(mask, val.n).stack(&MaskMatrix::zeros(context.n, val.d()));
    let recon = model.reconstruct(stacked.input(&m)?)?;
    recon.check_finite("reconstruction")?;
    Ok(sample_losses(
        &recon,
        &stacked.targets,
        &m,
        &stacked.widths,
        val.n,
    ))
}

fn run_masks<F>(n_masks: usize, workers: usize, f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        return pool.install(|| (0..n_masks).into_par_iter().map(&f).collect());
    }
    let _ = workers;
    (0..n_masks).map(f).collect()
}

pub fn score_batch(
    model: &dyn Reconstruct,
    train: &Encoded,
    val: &Encoded,
    bank: &MaskBank,
    cfg: &ScoreConfig,
) -> Result<AnomalyScores> {
    ensure!(!bank.is_empty(), Contract, "mask bank is empty");
    ensure!(val.n >= 1, Contract, "no validation rows to score");
    ensure!(
        bank.d == val.d() && train.widths == val.widths,
        Contract,
        "bank, training and validation encodings disagree on features"
    );
    ensure!(cfg.row_budget >= 2, Config, "row budget must be at least 2");
    let batch = if cfg.per_sample {
        1
    } else if val.n < cfg.row_budget {
        val.n
    } else {
        cfg.row_budget / 2
    };
    let ctx_idx = context_rows(train.n, batch, cfg)?;
    let context = train.select(&ctx_idx);
    let chunks: Vec<Vec<usize>> = (0..val.n)
        .collect::<Vec<_>>()
        .chunks(batch)
        .map(<[usize]>::to_vec)
        .collect();
    let val_chunks: Vec<Encoded> = if chunks.len() == 1 {
        vec![val.clone()]
    } else {
        chunks.iter().map(|c| val.select(c)).collect()
    };

    let masks = bank.masks();
    let per_mask = run_masks(masks.len(), cfg.workers, |k| {
        let mut out = Vec::with_capacity(val.n);
        for vc in &val_chunks {
            out.extend(mask_losses(model, vc, &context, &masks[k])?);
        }
        Ok(out)
    })?;

    let m = masks.len();
    let mut matrix = vec![0.0; val.n * m];
    for (k, col) in per_mask.iter().enumerate() {
        for (i, &l) in col.iter().enumerate() {
            matrix[i * m + k] = l;
        }
    }
    let scores = matrix
        .chunks_exact(m)
        .map(|row| aggregate(row, cfg.aggregation))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnomalyScores {
        scores,
        loss_matrix: cfg.keep_loss_matrix.then_some(matrix),
    })
}

/// `sample_id,score[,label]`, one row per validation sample.
pub fn write_scores_csv(path: &Path, ids: &[usize], scores: &[f64], labels: Option<&[u8]>) -> Result<()> {
    ensure!(
        ids.len() == scores.len(),
        Dimension,
        "ids and scores differ in length"
    );
    let mut out = String::from(if labels.is_some() {
        "sample_id,score,label\n"
    } else {
        "sample_id,score\n"
    });
    for (i, (&id, &s)) in ids.iter().zip(scores).enumerate() {
        match labels {
            Some(l) => out.push_str(&format!("{id},{s:?},{}\n", l[i])),
            None => out.push_str(&format!("{id},{s:?}\n")),
        }
    }
    write_file(path, out.as_bytes())
}

/// Per-mask losses: a header of mask bit strings, then one row per sample.
pub fn write_loss_matrix_csv(path: &Path, ids: &[usize], bank: &MaskBank, matrix: &[f64]) -> Result<()> {
    let m = bank.len();
    ensure!(
        matrix.len() == ids.len() * m,
        Dimension,
        "loss matrix size mismatch"
    );
    let mut out = String::from("sample_id");
    for mask in bank.masks() {
        out.push(',');
        out.push_str(&mask.to_bits_string());
    }
    out.push('\n');
    for (id, row) in ids.iter().zip(matrix.chunks_exact(m)) {
        out.push_str(&id.to_string());
        for v in row {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    use super::*;
    use crate::data::TabularDataset;
    use crate::masking::build_mask_bank;
    use crate::model::{FeatureSchema, NptConfig, NptParams, Target, Variant};

    fn encoded(rows: &[Vec<f64>]) -> (FeatureSchema, Encoded) {
        let ds = TabularDataset::from_rows("t", rows, vec![0; rows.len()]).unwrap();
        let schema = FeatureSchema::fit(&ds).unwrap();
        let enc = schema.encode(&ds).unwrap();
        (schema, enc)
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand::Rng as _;
        let mut rng = rng_for(seed, 0);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>() * 4.0).collect())
            .collect()
    }

    /// Returns the true encoded values, whatever the mask.
    struct Copier(Encoded);

    impl Reconstruct for Copier {
        fn reconstruct(&self, input: Tensor) -> Result<Tensor> {
            let n = input.shape()[0];
            let data = self.0.targets[..n * self.0.d()]
                .iter()
                .map(|t| match t {
                    Target::Value(v) => *v,
                    _ => unreachable!(),
                })
                .collect();
            Tensor::new(vec![n, self.0.d()], data)
        }
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[5.0], Aggregation::Mean).unwrap(), 5.0);
        assert_eq!(aggregate(&[5.0], Aggregation::Max).unwrap(), 5.0);
        assert_eq!(aggregate(&[0.0, 0.0, 4.0], Aggregation::Mean).unwrap(), 4.0 / 3.0);
        assert_eq!(aggregate(&[1.0, 2.0, 3.0], Aggregation::Mean).unwrap(), 2.0);
        assert_eq!(aggregate(&[1.0, 2.0, 3.0], Aggregation::Max).unwrap(), 3.0);
        assert!(aggregate(&[], Aggregation::Mean).is_err());
    }

    proptest! {
        #[test]
        fn mean_never_exceeds_max(v in prop::collection::vec(-1e6f64..1e6, 1..50)) {
            prop_assert!(
                aggregate(&v, Aggregation::Mean).unwrap() <= aggregate(&v, Aggregation::Max).unwrap() + 1e-9
            );
        }
    }

    #[test]
    fn perfect_copier_scores_zero() {
        let (_, val) = encoded(&random_rows(6, 3, 1));
        let (_, train) = encoded(&random_rows(5, 3, 2));
        let stacked = val.stack(&train).unwrap();
        let bank = build_mask_bank(3, 2).unwrap();
        let cfg = ScoreConfig {
            keep_loss_matrix: true,
            ..ScoreConfig::default()
        };
        let out = score_batch(&Copier(stacked), &train, &val, &bank, &cfg).unwrap();
        assert_eq!(out.scores, vec![0.0; 6]);
        assert_eq!(out.loss_matrix.unwrap().len(), 6 * 6);
    }

    #[test]
    fn empty_bank_is_rejected() {
        let (_, val) = encoded(&random_rows(3, 2, 1));
        let bank = MaskBank::from_masks(2, 1, vec![]);
        let r = score_batch(&Copier(val.clone()), &val, &val, &bank, &ScoreConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    fn model(schema: &FeatureSchema, variant: Variant, seed: u64) -> NptModel {
        let config = NptConfig {
            depth: 2,
            heads: 2,
            e: 4,
            variant,
            ..NptConfig::default()
        };
        let params = NptParams::init(schema, &config, &mut rng_for(seed, 0)).unwrap();
        NptModel {
            config,
            schema: schema.clone(),
            params,
        }
    }

    #[test]
    fn aba_only_ignores_context() {
        let rows = random_rows(12, 3, 3);
        let (schema, all) = encoded(&rows);
        let train = all.select(&(0..8).collect::<Vec<_>>());
        let val = all.select(&(8..12).collect::<Vec<_>>());
        let none = all.select(&[]);
        let m = model(&schema, Variant::AbaOnly, 1);
        let bank = build_mask_bank(3, 2).unwrap();
        let cfg = ScoreConfig::default();
        let with = score_batch(&m, &train, &val, &bank, &cfg).unwrap();
        let without = score_batch(&m, &none, &val, &bank, &cfg).unwrap();
        assert_eq!(with.scores, without.scores);
        let per = ScoreConfig {
            per_sample: true,
            ..cfg
        };
        assert_eq!(
            score_batch(&m, &train, &val, &bank, &per).unwrap().scores,
            with.scores
        );
    }

    #[test]
    fn npt_scores_invariances() {
        let rows = random_rows(14, 3, 4);
        let (schema, all) = encoded(&rows);
        let train = all.select(&(0..9).collect::<Vec<_>>());
        let val = all.select(&(9..14).collect::<Vec<_>>());
        let m = model(&schema, Variant::Npt, 2);
        let bank = build_mask_bank(3, 2).unwrap();
        let cfg = ScoreConfig {
            keep_loss_matrix: true,
            ..ScoreConfig::default()
        };
        let base = score_batch(&m, &train, &val, &bank, &cfg).unwrap();
        assert!(base.scores.iter().all(|&s| s >= 0.0 && s.is_finite()));
        assert_eq!(score_batch(&m, &train, &val, &bank, &cfg).unwrap(), base);

        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut rng_for(1, 1));
        let shuffled = score_batch(&m, &train.select(&perm), &val, &bank, &cfg).unwrap();
        for (a, b) in shuffled.scores.iter().zip(&base.scores) {
            assert!((a - b).abs() < 1e-10);
        }

        let mut reversed: Vec<Mask> = bank.masks().to_vec();
        reversed.reverse();
        let rbank = MaskBank::from_masks(3, 2, reversed);
        let r = score_batch(&m, &train, &val, &rbank, &cfg).unwrap();
        for (a, b) in r.scores.iter().zip(&base.scores) {
            assert!((a - b).abs() < 1e-12);
        }
        let max = ScoreConfig {
            aggregation: Aggregation::Max,
            ..cfg
        };
        let mx = score_batch(&m, &train, &val, &bank, &max).unwrap();
        let lm = base.loss_matrix.unwrap();
        for (i, s) in mx.scores.iter().enumerate() {
            let row = &lm[i * bank.len()..(i + 1) * bank.len()];
            assert_eq!(*s, row.iter().copied().fold(f64::MIN, f64::max));
        }
    }

    #[test]
    fn context_budget_and_subsample() {
        let cfg = ScoreConfig {
            row_budget: 10,
            ..ScoreConfig::default()
        };
        let rows = context_rows(20, 4, &cfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows, context_rows(20, 4, &cfg).unwrap());
        let sub = ScoreConfig {
            context: TrainContext::Subsample { size: 3, seed: 9 },
            ..ScoreConfig::default()
        };
        assert_eq!(context_rows(20, 4, &sub).unwrap().len(), 3);
        let bad = ScoreConfig {
            context: TrainContext::Subsample { size: 30, seed: 9 },
            ..ScoreConfig::default()
        };
        assert!(context_rows(20, 4, &bad).is_err());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn worker_count_does_not_change_scores() {
        let rows = random_rows(10, 3, 5);
        let (schema, all) = encoded(&rows);
        let train = all.select(&(0..6).collect::<Vec<_>>());
        let val = all.select(&(6..10).collect::<Vec<_>>());
        let m = model(&schema, Variant::Npt, 3);
        let bank = build_mask_bank(3, 3).unwrap();
        let one = score_batch(&m, &train, &val, &bank, &ScoreConfig::default()).unwrap();
        let many = ScoreConfig {
            workers: 3,
            ..ScoreConfig::default()
        };
        assert_eq!(score_batch(&m, &train, &val, &bank, &many).unwrap(), one);
    }
}
