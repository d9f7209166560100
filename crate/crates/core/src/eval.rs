//! Detection metrics and multi-seed experiments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{knn_score, mask_knn_score, KnnConfig};
use crate::data::{
    gen_synthetic, load_csv, split, LoadSpec, SplitSpec, TabularDataset, CONTAMINATION_SHARES,
};
use crate::error::{ensure, Error, Result};
use crate::masking::build_mask_bank;
use crate::model::{train as train_npt, FeatureSchema, NptConfig, NptModel, TrainConfig, TrainLog, Variant};
use crate::scoring::{score_batch, write_file, ScoreConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn check_labels(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    ensure!(
        scores.len() == labels.len(),
        Dimension,
        "{} scores for {} labels",
        scores.len(),
        labels.len()
    );
    ensure!(
        scores.iter().all(|s| s.is_finite()),
        Numeric,
        "non-finite anomaly score"
    );
    ensure!(labels.iter().all(|&l| l <= 1), Contract, "labels must be 0 or 1");
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    ensure!(
        pos > 0 && neg > 0,
        Contract,
        "labels must contain both classes ({pos} positive, {neg} negative)"
    );
    Ok((pos, neg))
}

/// Precision and recall when the `a` highest scores are flagged, `a` being
/// the number of positive labels. Ties at the cutoff go to the smaller index.
pub fn precision_recall_at_count(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    let (a, _) = check_labels(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let tp = order[..a].iter().filter(|&&i| labels[i] == 1).count();
    let flagged = a;
    Ok((tp as f64 / flagged as f64, tp as f64 / a as f64))
}

pub fn f1_at_count(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, r) = precision_recall_at_count(scores, labels)?;
    // with as many flags as positives the harmonic mean is the common value
    debug_assert_eq!(p, r);
    Ok(p)
}

/// Mann-Whitney AUROC with half credit for ties, counted exactly in integers.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // twice the Mann-Whitney U statistic
    let mut u2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        u2 += 2 * p * neg_below + p * q;
        neg_below += q;
        i = j;
    }
    Ok(u2 as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Anything that turns a train/validation pair into validation scores.
pub trait Detector: Sync {
    fn detect(&self, train: &TabularDataset, val: &TabularDataset, seed: u64) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Npt,
    /// The same network without attention between datapoints.
    Transformer,
    MaskKnn,
    Knn,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Npt => "npt",
            MethodKind::Transformer => "transformer",
            MethodKind::MaskKnn => "mask-knn",
            MethodKind::Knn => "knn",
        }
    }
}

/// A detector with every hyperparameter of every method; only the ones
/// relevant to `kind` are used. Per-run seeds override the seed fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub kind: MethodKind,
    pub model: NptConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub knn: KnnConfig,
    pub r: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            kind: MethodKind::Npt,
            model: NptConfig::default(),
            train: TrainConfig::default(),
            score: ScoreConfig::default(),
            knn: KnnConfig::default(),
            r: 2,
        }
    }
}

impl MethodConfig {
    pub fn npt_config(&self) -> NptConfig {
        let mut c = self.model.clone();
        if self.kind == MethodKind::Transformer {
            c.variant = Variant::AbaOnly;
        }
        c
    }

    /// Trains a network on `train` with the given seed.
    pub fn fit(&self, train: &TabularDataset, seed: u64) -> Result<(NptModel, TrainLog)> {
        let schema = FeatureSchema::fit(train)?;
        let enc = schema.encode(train)?;
        let config = self.npt_config();
        let tc = TrainConfig {
            seed,
            ..self.train.clone()
        };
        let every = (tc.epochs * tc.steps_per_epoch(enc.n) / 10).max(1);
        let (params, log) = train_npt(&enc, &schema, &config, &tc, |step, total, loss| {
            if (step + 1) % every == 0 || step + 1 == total {
                log::info!(
                    "event=train_progress seed={seed} step={} total={total} loss={loss}",
                    step + 1
                );
            }
        })?;
        Ok((
            NptModel {
                config,
                schema,
                params,
            },
            log,
        ))
    }
}

impl Detector for MethodConfig {
    fn detect(&self, train: &TabularDataset, val: &TabularDataset, seed: u64) -> Result<Vec<f64>> {
        let scores = match self.kind {
            MethodKind::Npt | MethodKind::Transformer => {
                let (model, _) = self.fit(train, seed)?;
                let tr = model.schema.encode(train)?;
                let va = model.schema.encode(val)?;
                let bank = build_mask_bank(tr.d(), self.r)?;
                let sc = ScoreConfig {
                    seed,
                    ..self.score.clone()
                };
                score_batch(&model, &tr, &va, &bank, &sc)?
            }
            MethodKind::MaskKnn | MethodKind::Knn => {
                let schema = FeatureSchema::fit(train)?;
                let tr = schema.encode(train)?;
                let va = schema.encode(val)?;
                if self.kind == MethodKind::Knn {
                    knn_score(&va, &tr, self.knn.k)?
                } else {
                    let bank = build_mask_bank(tr.d(), self.r)?;
                    let kc = KnnConfig {
                        seed,
                        ..self.knn.clone()
                    };
                    mask_knn_score(&va, &tr, &bank, &kc, false)?
                }
            }
        };
        Ok(scores.scores)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "source")]
pub enum DataSource {
    /// A labelled CSV split by the seed.
    Csv { path: PathBuf, load: LoadSpec },
    /// The two-Gaussian generator at a training contamination share.
    Synthetic { share: f64 },
}

impl DataSource {
    pub fn name(&self) -> String {
        match self {
            DataSource::Csv { path, .. } => path.file_stem().map_or_else(
                || path.display().to_string(),
                |s| s.to_string_lossy().into_owned(),
            ),
            DataSource::Synthetic { share } => format!("synthetic-{share}"),
        }
    }
}

/// Loads a source once; the per-seed split happens in [`Prepared::parts`].
enum Prepared {
    Csv(TabularDataset),
    Synthetic(f64),
}

impl Prepared {
    fn new(source: &DataSource) -> Result<Self> {
        Ok(match source {
            DataSource::Csv { path, load } => Prepared::Csv(load_csv(path, load)?),
            DataSource::Synthetic { share } => Prepared::Synthetic(*share),
        })
    }

    fn parts(&self, seed: u64) -> Result<(TabularDataset, TabularDataset)> {
        match self {
            Prepared::Csv(ds) => split(ds, &SplitSpec::new(seed)),
            Prepared::Synthetic(share) => gen_synthetic(*share, seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub f1: f64,
    pub auroc: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_anomalies: usize,
    #[serde(skip)]
    pub ids: Vec<usize>,
    #[serde(skip)]
    pub labels: Vec<u8>,
    #[serde(skip)]
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub schema_version: u32,
    pub dataset: String,
    pub method: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedResult>,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub mean_auroc: f64,
    pub std_auroc: f64,
}

impl ScoreReport {
    pub fn new(dataset: &str, method: &str, config_hash: &str, per_seed: Vec<SeedResult>) -> Self {
        let f1: Vec<f64> = per_seed.iter().map(|s| s.f1).collect();
        let au: Vec<f64> = per_seed.iter().map(|s| s.auroc).collect();
        let (mean_f1, std_f1) = mean_std(&f1);
        let (mean_auroc, std_auroc) = mean_std(&au);
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            dataset: dataset.to_string(),
            method: method.to_string(),
            config_hash: config_hash.to_string(),
            seeds: per_seed.iter().map(|s| s.seed).collect(),
            per_seed,
            mean_f1,
            std_f1,
            mean_auroc,
            std_auroc,
        }
    }
}

/// Hex SHA-256 of the JSON serialization.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub method: MethodConfig,
    /// Threads across seeds; 1 runs them in order.
    pub workers: usize,
}

fn run_seed(data: &Prepared, detector: &dyn Detector, seed: u64) -> Result<SeedResult> {
    let (train, val) = data.parts(seed)?;
    let scores = detector.detect(&train, &val, seed)?;
    ensure!(
        scores.len() == val.n(),
        Dimension,
        "detector returned {} scores for {} rows",
        scores.len(),
        val.n()
    );
    let f1 = f1_at_count(&scores, &val.labels)?;
    let auroc = auroc(&scores, &val.labels)?;
    log::info!("event=seed_done seed={seed} f1={f1} auroc={auroc}");
    Ok(SeedResult {
        seed,
        f1,
        auroc,
        n_train: train.n(),
        n_val: val.n(),
        n_anomalies: val.n_anomalies(),
        ids: val.ids.clone(),
        labels: val.labels.clone(),
        scores,
    })
}

/// Runs `detector` once per seed on `source`. Results are ordered like
/// `seeds`; the first failing seed in that order is reported.
pub fn run_with_detector(
    source: &DataSource,
    detector: &dyn Detector,
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<SeedResult>> {
    ensure!(!seeds.is_empty(), Contract, "no seeds given");
    ensure!(workers >= 1, Config, "workers must be at least 1");
    let data = Prepared::new(source)?;
    let one = |&seed: &u64| {
        run_seed(&data, detector, seed).map_err(|e| Error::Seed {
            seed,
            source: Box::new(e),
        })
    };
    #[cfg(feature = "parallel")]
    if workers > 1 && seeds.len() > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        return pool.install(|| seeds.par_iter().map(one).collect());
    }
    seeds.iter().map(one).collect()
}

pub fn run_experiment(config: &ExperimentConfig, seeds: &[u64]) -> Result<ScoreReport> {
    let per_seed = run_with_detector(&config.data, &config.method, seeds, config.workers)?;
    Ok(ScoreReport::new(
        &config.data.name(),
        config.method.kind.name(),
        &config_hash(config)?,
        per_seed,
    ))
}

/// One experiment per contamination share on the synthetic generator.
pub fn run_contamination(
    method: &MethodConfig,
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<(f64, ScoreReport)>> {
    CONTAMINATION_SHARES
        .iter()
        .map(|&share| {
            let cfg = ExperimentConfig {
                data: DataSource::Synthetic { share },
                method: method.clone(),
                workers,
            };
            log::info!("event=contamination_share share={share}");
            Ok((share, run_experiment(&cfg, seeds)?))
        })
        .collect()
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

/// One row per seed, then a `mean` row carrying the across-seed means and
/// population standard deviations.
pub fn write_report_csv(path: &Path, report: &ScoreReport) -> Result<()> {
    let mut rows: Vec<Vec<String>> = report
        .per_seed
        .iter()
        .map(|s| {
            vec![
                report.dataset.clone(),
                report.method.clone(),
                s.seed.to_string(),
                s.f1.to_string(),
                s.auroc.to_string(),
                String::new(),
                String::new(),
            ]
        })
        .collect();
    rows.push(vec![
        report.dataset.clone(),
        report.method.clone(),
        "mean".into(),
        report.mean_f1.to_string(),
        report.mean_auroc.to_string(),
        report.std_f1.to_string(),
        report.std_auroc.to_string(),
    ]);
    let header = ["dataset", "method", "seed", "f1", "auroc", "std_f1", "std_auroc"];
    write_file(path, &csv_text(&header, &rows)?)
}

pub fn write_report_json(path: &Path, report: &ScoreReport) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(report)?;
    text.push(b'\n');
    write_file(path, &text)
}

pub fn write_curve_csv(path: &Path, curve: &[(f64, ScoreReport)]) -> Result<()> {
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|(share, r)| {
            vec![
                share.to_string(),
                r.mean_f1.to_string(),
                r.std_f1.to_string(),
                r.mean_auroc.to_string(),
                r.std_auroc.to_string(),
            ]
        })
        .collect();
    let header = ["share", "mean_F1", "std_F1", "mean_AUROC", "std_AUROC"];
    write_file(path, &csv_text(&header, &rows)?)
}
