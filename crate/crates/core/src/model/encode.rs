use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, TabularDataset};
use crate::error::{ensure, Result};
use crate::masking::MaskMatrix;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Numerical {
        mean: f64,
        std: f64,
    },
    /// Levels seen while fitting, in one-hot order.
    Categorical {
        levels: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn width(&self) -> usize {
        match &self.kind {
            FeatureKind::Numerical { .. } => 1,
            FeatureKind::Categorical { levels } => levels.len(),
        }
    }

    pub fn type_index(&self) -> usize {
        match self.kind {
            FeatureKind::Numerical { .. } => 0,
            FeatureKind::Categorical { .. } => 1,
        }
    }
}

/// Per-feature encoding fitted on the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
}

/// Reconstruction target of one entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    /// Standardized numerical value.
    Value(f64),
    /// One-hot position of a categorical value.
    Class(usize),
    /// Categorical value never seen while fitting.
    Unknown,
}

impl FeatureSchema {
    /// Standardizes numerical columns with population statistics (a constant
    /// column gets std 1) and collects the categorical levels present.
    pub fn fit(train: &TabularDataset) -> Result<Self> {
        ensure!(train.n() > 0, Contract, "cannot fit a schema on zero rows");
        let n = train.n() as f64;
        let features = train
            .columns
            .iter()
            .enumerate()
            .map(|(j, col)| {
                let kind = match &col.kind {
                    ColumnKind::Numerical => {
                        let vals = (0..train.n()).map(|i| train.value(i, j));
                        let mean = vals.clone().sum::<f64>() / n;
                        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let std = var.sqrt();
                        FeatureKind::Numerical {
                            mean,
                            std: if std > 1e-12 { std } else { 1.0 },
                        }
                    }
                    ColumnKind::Categorical { levels } => {
                        let mut seen = vec![false; levels.len()];
                        for i in 0..train.n() {
                            seen[train.value(i, j) as usize] = true;
                        }
                        FeatureKind::Categorical {
                            levels: levels
                                .iter()
                                .zip(seen)
                                .filter(|(_, s)| *s)
                                .map(|(l, _)| l.clone())
                                .collect(),
                        }
                    }
                };
                FeatureSpec {
                    name: col.name.clone(),
                    kind,
                }
            })
            .collect();
        Ok(Self { features })
    }

    pub fn d(&self) -> usize {
        self.features.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.features.iter().map(FeatureSpec::width).collect()
    }

    /// 0 for numerical features, 1 for categorical ones.
    pub fn type_indices(&self) -> Vec<usize> {
        self.features.iter().map(FeatureSpec::type_index).collect()
    }

    pub fn input_width(&self) -> usize {
        self.widths().iter().map(|w| w + 1).sum()
    }

    pub fn output_width(&self) -> usize {
        self.widths().iter().sum()
    }

    /// Encodes every row of `ds`. Categorical values outside the fitted
    /// levels become an all-zero one-hot with an `Unknown` target.
    pub fn encode(&self, ds: &TabularDataset) -> Result<Encoded> {
        ensure!(
            ds.d() == self.d(),
            Contract,
            "dataset has {} features, schema has {}",
            ds.d(),
            self.d()
        );
        // Per column: dataset level index -> one-hot position.
        let mut lookups: Vec<Option<Vec<Option<usize>>>> = Vec::with_capacity(self.d());
        for (col, spec) in ds.columns.iter().zip(&self.features) {
            ensure!(
                col.name == spec.name,
                Contract,
                "column {:?} where the schema expects {:?}",
                col.name,
                spec.name
            );
            match (&col.kind, &spec.kind) {
                (ColumnKind::Numerical, FeatureKind::Numerical { .. }) => lookups.push(None),
                (ColumnKind::Categorical { levels }, FeatureKind::Categorical { levels: known }) => lookups
                    .push(Some(
                        levels.iter().map(|l| known.iter().position(|k| k == l)).collect(),
                    )),
                _ => {
                    return Err(crate::Error::Contract(format!(
                        "column {:?} kind differs from the schema",
                        col.name
                    )))
                }
            }
        }
        let widths = self.widths();
        let total: usize = widths.iter().sum();
        let mut payload = vec![0.0; ds.n() * total];
        let mut targets = Vec::with_capacity(ds.n() * self.d());
        let mut unknown = 0usize;
        for i in 0..ds.n() {
            let mut off = i * total;
            for (j, spec) in self.features.iter().enumerate() {
                let v = ds.value(i, j);
                match (&spec.kind, &lookups[j]) {
                    (FeatureKind::Numerical { mean, std }, _) => {
                        let z = (v - mean) / std;
                        payload[off] = z;
                        targets.push(Target::Value(z));
                    }
                    (FeatureKind::Categorical { .. }, Some(map)) => match map[v as usize] {
                        Some(p) => {
                            payload[off + p] = 1.0;
                            targets.push(Target::Class(p));
                        }
                        None => {
                            unknown += 1;
                            targets.push(Target::Unknown);
                        }
                    },
                    _ => unreachable!(),
                }
                off += widths[j];
            }
        }
        if unknown > 0 {
            log::warn!("event=unseen_category count={unknown} dataset={}", ds.name);
        }
        Ok(Encoded {
            n: ds.n(),
            widths,
            payload,
            targets,
        })
    }
}

/// Unmasked encodings of a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub n: usize,
    pub widths: Vec<usize>,
    /// `n x sum(widths)` row-major.
    pub payload: Vec<f64>,
    /// `n x d` row-major.
    pub targets: Vec<Target>,
}

impl Encoded {
    pub fn d(&self) -> usize {
        self.widths.len()
    }

    pub fn total_width(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let t = self.total_width();
        &self.payload[i * t..(i + 1) * t]
    }

    /// Per-feature encoded vectors of row `i`.
    pub fn features(&self, i: usize) -> Vec<Vec<f64>> {
        let row = self.row(i);
        let mut off = 0;
        self.widths
            .iter()
            .map(|&w| {
                let v = row[off..off + w].to_vec();
                off += w;
                v
            })
            .collect()
    }

    /// Model input `[n, sum(w_j + 1)]`: each feature's payload, zeroed where
    /// masked, followed by its mask indicator.
    pub fn input(&self, mask: &MaskMatrix) -> Result<Tensor> {
        ensure!(
            mask.n == self.n && mask.d == self.d(),
            Dimension,
            "mask {}x{} for encoded {}x{}",
            mask.n,
            mask.d,
            self.n,
            self.d()
        );
        let width: usize = self.widths.iter().map(|w| w + 1).sum();
        let mut out = Vec::with_capacity(self.n * width);
        for i in 0..self.n {
            let row = self.row(i);
            let mut off = 0;
            for (j, &w) in self.widths.iter().enumerate() {
                if mask.get(i, j) {
                    out.extend(std::iter::repeat_n(0.0, w));
                    out.push(1.0);
                } else {
                    out.extend_from_slice(&row[off..off + w]);
                    out.push(0.0);
                }
                off += w;
            }
        }
        Tensor::new(vec![self.n, width], out)
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let (t, d) = (self.total_width(), self.d());
        let mut payload = Vec::with_capacity(rows.len() * t);
        let mut targets = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            payload.extend_from_slice(self.row(i));
            targets.extend_from_slice(&self.targets[i * d..(i + 1) * d]);
        }
        Self {
            n: rows.len(),
            widths: self.widths.clone(),
            payload,
            targets,
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn stack(&self, other: &Self) -> Result<Self> {
        ensure!(
            self.widths == other.widths,
            Dimension,
            "stacking different encodings"
        );
        let mut out = self.clone();
        out.n += other.n;
        out.payload.extend_from_slice(&other.payload);
        out.targets.extend_from_slice(&other.targets);
        Ok(out)
    }
}
