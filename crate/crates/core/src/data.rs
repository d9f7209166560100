//! Tabular datasets: CSV ingestion, the normal/anomaly split, and the
//! synthetic contamination generator.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{rng_for, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Numerical,
    /// Values are stored as indices into `levels` (sorted).
    Categorical {
        levels: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

impl Column {
    pub fn numerical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numerical,
        }
    }

    pub fn cardinality(&self) -> usize {
        match &self.kind {
            ColumnKind::Numerical => 1,
            ColumnKind::Categorical { levels } => levels.len(),
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, ColumnKind::Categorical { .. })
    }
}

/// Rows of typed features with binary labels (1 = anomaly).
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    pub name: String,
    pub columns: Vec<Column>,
    values: Vec<f64>,
    pub labels: Vec<u8>,
    /// Row number in the originating file or generator.
    pub ids: Vec<usize>,
    pub provenance: String,
}

impl TabularDataset {
    pub fn new(
        name: impl Into<String>,
        columns: Vec<Column>,
        values: Vec<f64>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let d = columns.len();
        ensure!(d > 0, Schema, "dataset needs at least one feature column");
        ensure!(
            values.len() == labels.len() * d,
            Dimension,
            "{} values for {} rows of {d} features",
            values.len(),
            labels.len()
        );
        ensure!(labels.iter().all(|&l| l <= 1), Schema, "labels must be 0 or 1");
        for (j, c) in columns.iter().enumerate() {
            if let ColumnKind::Categorical { levels } = &c.kind {
                let ok = values
                    .iter()
                    .skip(j)
                    .step_by(d)
                    .all(|&v| v >= 0.0 && v.fract() == 0.0 && (v as usize) < levels.len());
                ensure!(ok, Schema, "column {} holds an invalid level index", c.name);
            }
        }
        let ids = (0..labels.len()).collect();
        Ok(Self {
            name: name.into(),
            columns,
            values,
            labels,
            ids,
            provenance: String::new(),
        })
    }

    /// All-numerical dataset from row vectors.
    pub fn from_rows(name: &str, rows: &[Vec<f64>], labels: Vec<u8>) -> Result<Self> {
        ensure!(!rows.is_empty(), Dimension, "no rows");
        let d = rows[0].len();
        ensure!(rows.iter().all(|r| r.len() == d), Dimension, "ragged rows");
        let columns = (0..d).map(|j| Column::numerical(format!("x{}", j + 1))).collect();
        Self::new(name, columns, rows.concat(), labels)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.d();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.d() + j]
    }

    pub fn n_anomalies(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * self.d());
        for &i in rows {
            values.extend_from_slice(self.row(i));
        }
        Self {
            name: self.name.clone(),
            columns: self.columns.clone(),
            values,
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Rows of `self` then rows of `other`; the column schemas must agree.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        ensure!(
            self.columns == other.columns,
            Schema,
            "cannot stack datasets with different columns"
        );
        let mut out = self.clone();
        out.values.extend_from_slice(&other.values);
        out.labels.extend_from_slice(&other.labels);
        out.ids.extend_from_slice(&other.ids);
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path, label_col: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_to_io(e, path))?;
        let mut header: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        header.push(label_col);
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self
                .columns
                .iter()
                .zip(self.row(i))
                .map(|(c, &v)| match &c.kind {
                    ColumnKind::Numerical => format!("{v:?}"),
                    ColumnKind::Categorical { levels } => levels[v as usize].clone(),
                })
                .collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_to_io(e: csv::Error, path: &Path) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// How to interpret the columns of a CSV file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    pub label_col: String,
    #[serde(default)]
    pub categorical: Vec<String>,
}

impl LoadSpec {
    pub fn new(label_col: impl Into<String>) -> Self {
        Self {
            label_col: label_col.into(),
            categorical: Vec::new(),
        }
    }

    /// Adds the categorical columns listed in a sidecar file: one column
    /// name per line, blank lines and `#` comments ignored.
    pub fn with_sidecar(mut self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() && !self.categorical.iter().any(|c| c == line) {
                self.categorical.push(line.to_string());
            }
        }
        Ok(self)
    }
}

const MISSING: &[&str] = &["", "?", "na", "nan", "null"];

fn parse_label(s: &str) -> Option<u8> {
    match s {
        "0" | "0.0" => Some(0),
        "1" | "1.0" => Some(1),
        _ => None,
    }
}

/// Reads a header-first, comma-separated file. Row numbers in diagnostics
/// count data rows from 1, excluding the header.
pub fn load_csv(path: &Path, spec: &LoadSpec) -> Result<TabularDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_to_io(e, path))?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("unknown column {name:?} (header: {header:?})")))
    };
    let label_idx = find(&spec.label_col)?;
    let mut categorical = vec![false; header.len()];
    for c in &spec.categorical {
        let j = find(c)?;
        ensure!(j != label_idx, Schema, "label column {c:?} cannot be categorical");
        categorical[j] = true;
    }
    let feature_idx: Vec<usize> = (0..header.len()).filter(|&j| j != label_idx).collect();

    let mut raw: Vec<Vec<String>> = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let row_no = r + 1;
        let rec = rec.map_err(|e| Error::Load(format!("row {row_no}: {e}")))?;
        ensure!(
            rec.len() == header.len(),
            Load,
            "row {row_no}: {} fields, header has {}",
            rec.len(),
            header.len()
        );
        for (j, field) in rec.iter().enumerate() {
            ensure!(
                !MISSING.contains(&field.to_ascii_lowercase().as_str()),
                Load,
                "row {row_no}, column {:?}: missing value",
                header[j]
            );
        }
        let lab = &rec[label_idx];
        labels.push(
            parse_label(lab)
                .ok_or_else(|| Error::Load(format!("row {row_no}: label {lab:?} is not 0 or 1")))?,
        );
        raw.push(feature_idx.iter().map(|&j| rec[j].to_string()).collect());
    }
    ensure!(!raw.is_empty(), Load, "{}: no data rows", path.display());

    let mut columns = Vec::with_capacity(feature_idx.len());
    let mut codes: Vec<Option<HashMap<&str, usize>>> = Vec::new();
    for (k, &j) in feature_idx.iter().enumerate() {
        if categorical[j] {
            let levels: Vec<String> = raw
                .iter()
                .map(|row| row[k].clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            columns.push(Column {
                name: header[j].clone(),
                kind: ColumnKind::Categorical {
                    levels: levels.clone(),
                },
            });
            codes.push(Some(HashMap::new()));
        } else {
            columns.push(Column::numerical(header[j].clone()));
            codes.push(None);
        }
    }
    for (k, c) in columns.iter().enumerate() {
        if let ColumnKind::Categorical { levels } = &c.kind {
            let map = codes[k].as_mut().unwrap();
            for (i, l) in levels.iter().enumerate() {
                map.insert(l.as_str(), i);
            }
        }
    }
    let mut values = Vec::with_capacity(raw.len() * columns.len());
    for (r, row) in raw.iter().enumerate() {
        for (k, field) in row.iter().enumerate() {
            let v = match &codes[k] {
                Some(map) => map[field.as_str()] as f64,
                None => {
                    let v: f64 = field.parse().map_err(|_| {
                        Error::Load(format!(
                            "row {}, column {:?}: cannot parse {field:?} as a number",
                            r + 1,
                            columns[k].name
                        ))
                    })?;
                    ensure!(
                        v.is_finite(),
                        Load,
                        "row {}, column {:?}: non-finite value",
                        r + 1,
                        columns[k].name
                    );
                    v
                }
            };
            values.push(v);
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut ds = TabularDataset::new(name, columns, values, labels)?;
    ds.provenance = format!("csv:{}", path.display());
    Ok(ds)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_fraction_of_normals: f64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            train_fraction_of_normals: 0.5,
        }
    }
}

/// Train on a seeded random half of the normals; validate on the other half
/// together with every anomaly. Both parts keep file order.
pub fn split(ds: &TabularDataset, spec: &SplitSpec) -> Result<(TabularDataset, TabularDataset)> {
    let mut normals: Vec<usize> = (0..ds.n()).filter(|&i| ds.labels[i] == 0).collect();
    let anomalies: Vec<usize> = (0..ds.n()).filter(|&i| ds.labels[i] == 1).collect();
    ensure!(
        normals.len() >= 2 && !anomalies.is_empty(),
        Contract,
        "split needs at least 2 normals and 1 anomaly, got {} and {}",
        normals.len(),
        anomalies.len()
    );
    let n_train = (spec.train_fraction_of_normals * normals.len() as f64).floor() as usize;
    ensure!(
        n_train >= 1 && n_train < normals.len(),
        Contract,
        "train fraction {} leaves an empty side",
        spec.train_fraction_of_normals
    );
    normals.shuffle(&mut rng_for(spec.seed, streams::SPLIT));
    let mut train = normals[..n_train].to_vec();
    let mut val: Vec<usize> = normals[n_train..].iter().chain(&anomalies).copied().collect();
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.select(&train), ds.select(&val)))
}

pub const SYNTH_DIM: usize = 4;
pub const SYNTH_TRAIN_NORMALS: usize = 900;
pub const SYNTH_ANOMALY_POOL: usize = 100;
pub const SYNTH_VAL_NORMALS: usize = 450;
pub const SYNTH_VAL_ANOMALIES: usize = 50;
pub const SYNTH_ANOMALY_MEAN: f64 = 8.0;
pub const CONTAMINATION_SHARES: [f64; 11] = [0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10];

/// Anomalies added to the 900 training normals so they form `share` of the
/// training set.
pub fn contamination_count(share: f64) -> usize {
    let exact = SYNTH_TRAIN_NORMALS as f64 * share / (1.0 - share);
    // absorb representation error so 0.10 gives exactly 100
    (exact - 1e-9).ceil().max(0.0) as usize
}

fn gaussian_rows(n: usize, mean: f64, rng: &mut crate::numerics::Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..SYNTH_DIM)
                .map(|_| mean + rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Two unit-variance Gaussians in four dimensions, normals at the origin and
/// anomalies centred at 8 in every coordinate. For a given seed the training
/// normals, the anomaly pool and the validation set do not depend on `share`.
pub fn gen_synthetic(share: f64, seed: u64) -> Result<(TabularDataset, TabularDataset)> {
    let on_grid = (share * 100.0 - (share * 100.0).round()).abs() < 1e-9;
    ensure!(
        (0.0..=0.10 + 1e-12).contains(&share) && on_grid,
        Contract,
        "contamination share {share} must be one of 0.00, 0.01, ..., 0.10"
    );
    let normals = gaussian_rows(
        SYNTH_TRAIN_NORMALS,
        0.0,
        &mut rng_for(seed, streams::SYNTH_NORMAL),
    );
    let pool = gaussian_rows(
        SYNTH_ANOMALY_POOL,
        SYNTH_ANOMALY_MEAN,
        &mut rng_for(seed, streams::SYNTH_ANOMALY),
    );
    let k = contamination_count(share);
    let mut rows = normals;
    rows.extend_from_slice(&pool[..k]);
    let mut labels = vec![0u8; SYNTH_TRAIN_NORMALS];
    labels.extend(std::iter::repeat_n(1u8, k));
    let mut train = TabularDataset::from_rows("synthetic", &rows, labels)?;
    train.provenance = format!("synthetic:share={share},seed={seed},part=train");

    let mut vrng = rng_for(seed, streams::SYNTH_VAL);
    let mut vrows = gaussian_rows(SYNTH_VAL_NORMALS, 0.0, &mut vrng);
    vrows.extend(gaussian_rows(SYNTH_VAL_ANOMALIES, SYNTH_ANOMALY_MEAN, &mut vrng));
    let mut vlabels = vec![0u8; SYNTH_VAL_NORMALS];
    vlabels.extend(std::iter::repeat_n(1u8, SYNTH_VAL_ANOMALIES));
    let mut val = TabularDataset::from_rows("synthetic", &vrows, vlabels)?;
    val.provenance = format!("synthetic:seed={seed},part=val");
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn loads_numeric_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "f.csv", "a,b,y\n1,2,0\n3.5,-1,1\n0,0,0\n");
        let ds = load_csv(&p, &LoadSpec::new("y")).unwrap();
        assert_eq!((ds.n(), ds.d()), (3, 2));
        assert_eq!(ds.row(1), &[3.5, -1.0]);
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(ds.name, "f");
    }

    #[test]
    fn categorical_column_cardinality() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.csv", "x,c,y\n1,a,0\n2,b,0\n3,a,1\n");
        let mut spec = LoadSpec::new("y");
        spec.categorical.push("c".into());
        let ds = load_csv(&p, &spec).unwrap();
        assert_eq!(ds.columns[1].cardinality(), 2);
        assert_eq!(ds.value(0, 1), 0.0);
        assert_eq!(ds.value(1, 1), 1.0);

        let side = write(&dir, "c.schema", "# categorical columns\nc\n\n");
        let spec = LoadSpec::new("y").with_sidecar(&side).unwrap();
        assert_eq!(spec.categorical, vec!["c".to_string()]);
    }

    #[test]
    fn load_errors_cite_rows_and_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("a,y\n");
        for i in 0..6 {
            body.push_str(&format!("{i},0\n"));
        }
        body.push_str("1.2.3,1\n");
        let p = write(&dir, "bad.csv", &body);
        match load_csv(&p, &LoadSpec::new("y")) {
            Err(Error::Load(msg)) => assert!(msg.contains("row 7"), "{msg}"),
            other => panic!("{other:?}"),
        }

        let p = write(&dir, "miss.csv", "a,y\n1,0\n,1\n");
        assert!(matches!(load_csv(&p, &LoadSpec::new("y")), Err(Error::Load(_))));

        let p = write(&dir, "ok.csv", "a,y\n1,0\n");
        assert!(matches!(
            load_csv(&p, &LoadSpec::new("label")),
            Err(Error::Schema(_))
        ));
        let mut spec = LoadSpec::new("y");
        spec.categorical.push("zzz".into());
        assert!(matches!(load_csv(&p, &spec), Err(Error::Schema(_))));

        let missing = dir.path().join("nope.csv");
        assert!(matches!(
            load_csv(&missing, &LoadSpec::new("y")),
            Err(Error::Io { .. })
        ));
    }

    fn labelled(normals: usize, anomalies: usize) -> TabularDataset {
        let rows: Vec<Vec<f64>> = (0..normals + anomalies).map(|i| vec![i as f64]).collect();
        let mut labels = vec![0; normals];
        labels.extend(vec![1; anomalies]);
        TabularDataset::from_rows("t", &rows, labels).unwrap()
    }

    #[test]
    fn split_counts() {
        let ds = labelled(100, 10);
        let (tr, va) = split(&ds, &SplitSpec::new(0)).unwrap();
        assert_eq!((tr.n(), va.n()), (50, 60));
        assert_eq!(tr.n_anomalies(), 0);
        assert_eq!(va.n_anomalies(), 10);

        let wine = labelled(119, 10);
        let (tr, va) = split(&wine, &SplitSpec::new(3)).unwrap();
        assert_eq!((tr.n(), va.n()), (59, 70));

        let mut seen: Vec<usize> = tr.ids.iter().chain(&va.ids).copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..129).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_seeded() {
        let ds = labelled(100, 10);
        let a = split(&ds, &SplitSpec::new(1)).unwrap().0.ids;
        let b = split(&ds, &SplitSpec::new(1)).unwrap().0.ids;
        let c = split(&ds, &SplitSpec::new(2)).unwrap().0.ids;
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(split(&labelled(1, 3), &SplitSpec::new(0)).is_err());
        assert!(split(&labelled(5, 0), &SplitSpec::new(0)).is_err());
    }

    #[test]
    fn synthetic_shares() {
        let (tr, va) = gen_synthetic(0.0, 1).unwrap();
        assert_eq!(tr.n_anomalies(), 0);
        assert_eq!(tr.n(), 900);
        for &s in &CONTAMINATION_SHARES {
            let (tr, va2) = gen_synthetic(s, 1).unwrap();
            let frac = tr.n_anomalies() as f64 / tr.n() as f64;
            assert!((frac - s).abs() * tr.n() as f64 <= 1.0, "share {s}: {frac}");
            assert_eq!(va2, va);
            assert_eq!(va2.n_anomalies() * 10, va2.n());
        }
        assert_eq!(contamination_count(0.10), 100);
        assert!(gen_synthetic(0.11, 0).is_err());
        assert!(gen_synthetic(0.015, 0).is_err());
        assert_eq!(gen_synthetic(0.05, 9).unwrap(), gen_synthetic(0.05, 9).unwrap());
    }

    #[test]
    fn synthetic_classes_are_linearly_separable() {
        // The hyperplane sum(x) = 16 sits halfway between the class means.
        let (tr, va) = gen_synthetic(0.10, 4).unwrap();
        for ds in [&tr, &va] {
            for i in 0..ds.n() {
                let s: f64 = ds.row(i).iter().sum();
                assert_eq!(s > 16.0, ds.labels[i] == 1);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (tr, _) = gen_synthetic(0.02, 0).unwrap();
        let p = dir.path().join("s.csv");
        tr.write_csv(&p, "label").unwrap();
        let back = load_csv(&p, &LoadSpec::new("label")).unwrap();
        assert_eq!(back.labels, tr.labels);
        for i in 0..tr.n() {
            assert_eq!(back.row(i), tr.row(i));
        }
    }
}
