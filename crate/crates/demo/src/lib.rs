//! Browser demo: mask bank explorer, learning-rate schedule and an anomaly
//! score heatmap over a small two-dimensional point cloud.
//!
//! The plain functions carry the logic; the `wasm_*` wrappers only convert
//! to and from JavaScript values.

use nptad::baselines::{knn_score, mask_knn_score, KnnConfig};
use nptad::data::TabularDataset;
use nptad::masking::{bank_size, build_mask_bank, MaskBank};
use nptad::model::{train, FeatureSchema, NptConfig, NptModel, TrainConfig};
use nptad::numerics::rng_for;
use nptad::optim::lr_at;
use nptad::scoring::{score_batch, ScoreConfig};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Masks listed at most; larger banks report only their size.
pub const LIST_LIMIT: usize = 2000;

#[derive(Debug, Serialize)]
pub struct BankView {
    pub d: usize,
    pub r: usize,
    pub m: String,
    /// Masked-feature bit strings, empty when the bank is too large to list.
    pub masks: Vec<String>,
}

pub fn mask_bank_view(d: usize, r: usize) -> Result<BankView, String> {
    let m = bank_size(d, r).ok_or("bank size overflows")?;
    let masks = if m as usize <= LIST_LIMIT {
        let bank: MaskBank = build_mask_bank(d, r).map_err(|e| e.to_string())?;
        bank.masks().iter().map(|m| m.to_bits_string()).collect()
    } else {
        if r == 0 || r > d {
            return Err(format!("r must lie in 1..={d}"));
        }
        Vec::new()
    };
    Ok(BankView {
        d,
        r,
        m: m.to_string(),
        masks,
    })
}

pub fn lr_curve(total: u64, base: f64) -> Result<Vec<f64>, String> {
    (0..total)
        .map(|s| lr_at(s, total, base).map_err(|e| e.to_string()))
        .collect()
}

#[derive(Clone, Debug, Deserialize)]
pub struct HeatmapRequest {
    /// `knn`, `mask-knn` or `npt`.
    pub method: String,
    pub normals: usize,
    /// Anomalies mixed into the training cloud.
    pub contamination: usize,
    pub k: usize,
    pub epochs: usize,
    pub grid: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct Heatmap {
    pub grid: usize,
    pub extent: [f64; 4],
    /// Row-major scores, first row at the bottom of the extent.
    pub scores: Vec<f64>,
    pub points: Vec<[f64; 2]>,
    pub point_labels: Vec<u8>,
}

/// A ring of normal points with optional contamination near the centre.
fn cloud(req: &HeatmapRequest) -> (Vec<Vec<f64>>, Vec<u8>) {
    let mut rng = rng_for(req.seed, 0);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..req.normals {
        let a = rng.random::<f64>() * std::f64::consts::TAU;
        let rad = 2.0 + 0.25 * rng.sample::<f64, _>(StandardNormal);
        rows.push(vec![rad * a.cos(), rad * a.sin()]);
        labels.push(0);
    }
    for _ in 0..req.contamination {
        rows.push(vec![
            0.4 * rng.sample::<f64, _>(StandardNormal),
            0.4 * rng.sample::<f64, _>(StandardNormal),
        ]);
        labels.push(1);
    }
    (rows, labels)
}

pub fn score_heatmap(req: &HeatmapRequest) -> Result<Heatmap, String> {
    let err = |e: nptad::Error| e.to_string();
    if req.grid < 2 || req.grid > 80 {
        return Err("grid must lie in 2..=80".into());
    }
    let (rows, labels) = cloud(req);
    let train_set = TabularDataset::from_rows("cloud", &rows, labels.clone()).map_err(err)?;
    let extent = [-3.5, 3.5, -3.5, 3.5];
    let g = req.grid;
    let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (g - 1) as f64;
    let grid_rows: Vec<Vec<f64>> = (0..g * g)
        .map(|c| {
            vec![
                step(extent[0], extent[1], c % g),
                step(extent[2], extent[3], c / g),
            ]
        })
        .collect();
    let grid_set = TabularDataset::from_rows("grid", &grid_rows, vec![0; g * g]).map_err(err)?;

    let schema = FeatureSchema::fit(&train_set).map_err(err)?;
    let tr = schema.encode(&train_set).map_err(err)?;
    let gr = schema.encode(&grid_set).map_err(err)?;
    let bank = build_mask_bank(2, 1).map_err(err)?;
    let scores = match req.method.as_str() {
        "knn" => knn_score(&gr, &tr, req.k),
        "mask-knn" => {
            let cfg = KnnConfig {
                k: req.k,
                ..KnnConfig::default()
            };
            mask_knn_score(&gr, &tr, &bank, &cfg, false)
        }
        "npt" => {
            let config = NptConfig {
                depth: 2,
                heads: 2,
                e: 8,
                ..NptConfig::default()
            };
            let tc = TrainConfig {
                epochs: req.epochs.max(1),
                seed: req.seed,
                ..TrainConfig::default()
            };
            let (params, _) = train(&tr, &schema, &config, &tc, |_, _, _| {}).map_err(err)?;
            let model = NptModel {
                config,
                schema: schema.clone(),
                params,
            };
            let sc = ScoreConfig {
                seed: req.seed,
                ..ScoreConfig::default()
            };
            score_batch(&model, &tr, &gr, &bank, &sc)
        }
        other => return Err(format!("unknown method {other:?}")),
    }
    .map_err(err)?;
    Ok(Heatmap {
        grid: g,
        extent,
        scores: scores.scores,
        points: rows.iter().map(|r| [r[0], r[1]]).collect(),
        point_labels: labels,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// JSON `{d, r, m, masks}`.
#[wasm_bindgen]
pub fn wasm_mask_bank(d: usize, r: usize) -> Result<String, JsError> {
    to_js(mask_bank_view(d, r))
}

#[wasm_bindgen]
pub fn wasm_lr_curve(total: u32, base: f64) -> Result<Vec<f64>, JsError> {
    lr_curve(u64::from(total), base).map_err(|e| JsError::new(&e))
}

/// Takes a JSON [`HeatmapRequest`], returns a JSON [`Heatmap`].
#[wasm_bindgen]
pub fn wasm_score_heatmap(request: &str) -> Result<String, JsError> {
    let req: HeatmapRequest = serde_json::from_str(request).map_err(|e| JsError::new(&e.to_string()))?;
    to_js(score_heatmap(&req))
}
