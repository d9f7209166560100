//! Distance-based baselines on the encoded feature space: Mask-KNN
//! (reconstruct masked features by inverse-distance-weighted neighbours and
//! sum the reconstruction errors over the mask bank) and the plain k-th
//! nearest neighbour distance.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::masking::{Mask, MaskBank};
use crate::model::Encoded;
use crate::numerics::{rng_for, streams};
use crate::scoring::AnomalyScores;

pub const DEFAULT_BANK_CAP: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    /// Training rows searched for neighbours; `None` uses all of them up to
    /// [`DEFAULT_BANK_CAP`].
    pub bank_size: Option<usize>,
    pub seed: u64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 5,
            bank_size: None,
            seed: 0,
        }
    }
}

/// Payload column ranges of each feature.
fn feature_ranges(widths: &[usize]) -> Vec<std::ops::Range<usize>> {
    let mut off = 0;
    widths
        .iter()
        .map(|&w| {
            let r = off..off + w;
            off += w;
            r
        })
        .collect()
}

/// Indices of the `k` smallest distances, ties broken by smaller index,
/// in ascending order.
fn k_smallest(dist: &[f64], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| dist[*a].total_cmp(&dist[*b]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Fills the masked features of `query` from its `k` nearest bank rows,
/// measured by L2 distance on the observed columns and weighted by inverse
/// distance. Neighbours at distance zero take over entirely: the imputation
/// is their plain average.
pub fn knn_impute(
    query: &[f64],
    widths: &[usize],
    mask: &Mask,
    bank: &Encoded,
    k: usize,
) -> Result<Vec<f64>> {
    ensure!(k >= 1, Contract, "k must be at least 1");
    ensure!(
        bank.n >= k,
        Contract,
        "bank has {} rows, fewer than k={k}",
        bank.n
    );
    ensure!(
        mask.len() == widths.len() && bank.widths == widths,
        Dimension,
        "mask, widths and bank disagree"
    );
    ensure!(
        mask.count() < mask.len(),
        Contract,
        "query has no observed feature to match on"
    );
    let ranges = feature_ranges(widths);
    let observed: Vec<usize> = ranges
        .iter()
        .enumerate()
        .filter(|(j, _)| !mask.is_masked(*j))
        .flat_map(|(_, r)| r.clone())
        .collect();
    let dist: Vec<f64> = (0..bank.n)
        .map(|i| {
            let row = bank.row(i);
            observed
                .iter()
                .map(|&c| (query[c] - row[c]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let nn = k_smallest(&dist, k);
    let exact: Vec<usize> = nn.iter().copied().filter(|&i| dist[i] == 0.0).collect();
    let weights: Vec<(usize, f64)> = if exact.is_empty() {
        nn.iter().map(|&i| (i, 1.0 / dist[i])).collect()
    } else {
        exact.iter().map(|&i| (i, 1.0)).collect()
    };
    let wsum: f64 = weights.iter().map(|(_, w)| w).sum();
    let mut out = query.to_vec();
    for (j, r) in ranges.iter().enumerate() {
        if mask.is_masked(j) {
            for c in r.clone() {
                out[c] = weights.iter().map(|&(i, w)| w * bank.row(i)[c]).sum::<f64>() / wsum;
            }
        }
    }
    Ok(out)
}

/// Training rows used as the neighbour bank.
pub fn knn_bank(train: &Encoded, cfg: &KnnConfig) -> Encoded {
    let cap = cfg.bank_size.unwrap_or(DEFAULT_BANK_CAP);
    if train.n <= cap {
        return train.clone();
    }
    let mut idx = sample(&mut rng_for(cfg.seed, streams::KNN_BANK), train.n, cap).into_vec();
    idx.sort_unstable();
    log::info!(
        "event=knn_bank_subsample from={} to={cap} seed={}",
        train.n,
        cfg.seed
    );
    train.select(&idx)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn for_each_row<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sum over bank masks of the L2 distance between each validation row and
/// its KNN reconstruction.
pub fn mask_knn_score(
    val: &Encoded,
    train: &Encoded,
    bank: &MaskBank,
    cfg: &KnnConfig,
    keep_loss_matrix: bool,
) -> Result<AnomalyScores> {
    ensure!(!bank.is_empty(), Contract, "mask bank is empty");
    ensure!(
        val.widths == train.widths && bank.d == val.d(),
        Contract,
        "validation and training encodings differ"
    );
    ensure!(
        cfg.bank_size.is_none_or(|b| b >= cfg.k),
        Config,
        "bank size below k"
    );
    let nb = knn_bank(train, cfg);
    let rows = for_each_row(val.n, |i| {
        let q = val.row(i);
        bank.masks()
            .iter()
            .map(|m| Ok(l2(q, &knn_impute(q, &val.widths, m, &nb, cfg.k)?)))
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(AnomalyScores {
        scores: rows.iter().map(|r| r.iter().sum()).collect(),
        loss_matrix: keep_loss_matrix.then(|| rows.concat()),
    })
}

/// L2 distance to the k-th nearest training row.
pub fn knn_score(val: &Encoded, train: &Encoded, k: usize) -> Result<AnomalyScores> {
    ensure!(k >= 1, Contract, "k must be at least 1");
    ensure!(k <= train.n, Contract, "k={k} exceeds {} training rows", train.n);
    ensure!(val.widths == train.widths, Contract, "encodings differ");
    let scores = for_each_row(val.n, |i| {
        let q = val.row(i);
        let dist: Vec<f64> = (0..train.n).map(|t| l2(q, train.row(t))).collect();
        Ok(dist[*k_smallest(&dist, k).last().unwrap()])
    })?;
    Ok(AnomalyScores {
        scores,
        loss_matrix: None,
    })
}
