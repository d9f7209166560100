//! Command-line front end: `train`, `score`, `bench`, `contam` and `maskbank`.
//!
//! Run settings are resolved from four JSON layers, later ones winning:
//! built-in defaults, a named dataset preset, a `--config` file and explicit
//! flags. The resolved settings are echoed to `config.json` in the output
//! directory; passing that file back with `--config` repeats the run.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baselines::{knn_score, mask_knn_score, KnnConfig};
use crate::data::{load_csv, split, LoadSpec, SplitSpec};
use crate::error::{ensure, Error, Result};
use crate::eval::{
    auroc, config_hash, f1_at_count, run_contamination, run_with_detector, write_curve_csv, write_report_csv,
    write_report_json, DataSource, MethodConfig, MethodKind, ScoreReport,
};
use crate::masking::{bank_size, build_mask_bank};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, FeatureSchema, NptModel};
use crate::scoring::{
    score_batch, write_file, write_loss_matrix_csv, write_scores_csv, Aggregation, ScoreConfig,
};

pub const EXIT_OK: i32 = 0;
/// Failures not covered below, including numeric breakdown during training.
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;
/// Input data or model files that violate a contract.
pub const EXIT_DATA: i32 = 5;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "NPTAD_OUT";

pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Io { .. } => EXIT_IO,
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Contract(_)
        | Error::Dimension(_)
        | Error::Capacity(_)
        | Error::Load(_)
        | Error::Schema(_)
        | Error::Checkpoint(_)
        | Error::Csv(_) => EXIT_DATA,
        Error::Numeric(_) | Error::Seed { .. } => EXIT_FAILURE,
    }
}

/// Per-dataset training hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct Preset {
    pub name: &'static str,
    pub epochs: usize,
    /// -1 trains full batch.
    pub batch_size: i64,
    pub lr: f64,
    pub p_mask: f64,
    pub r: usize,
    pub e: usize,
    /// Listed scoring bank size.
    pub m: u128,
}

#[allow(clippy::too_many_arguments)]
const fn p(
    name: &'static str,
    epochs: usize,
    batch_size: i64,
    lr: f64,
    p_mask: f64,
    r: usize,
    e: usize,
    m: u128,
) -> Preset {
    Preset {
        name,
        epochs,
        batch_size,
        lr,
        p_mask,
        r,
        e,
        m,
    }
}

pub const PRESETS: &[Preset] = &[
    p("wine", 1000, -1, 0.001, 0.15, 1, 8, 13),
    p("lympho", 100, -1, 0.01, 0.15, 4, 16, 3078),
    p("glass", 1000, -1, 0.01, 0.15, 4, 16, 255),
    p("vertebral", 2000, -1, 0.001, 0.15, 1, 8, 6),
    p("wbc", 100, -1, 0.01, 0.15, 3, 16, 4525),
    p("ecoli", 100, -1, 0.01, 0.15, 3, 16, 63),
    p("ionosphere", 100, -1, 0.001, 0.15, 2, 16, 561),
    p("arrhythmia", 100, -1, 0.01, 0.15, 1, 16, 274),
    p("breastw", 500, -1, 0.01, 0.15, 3, 16, 129),
    p("pima", 500, -1, 0.01, 0.15, 4, 16, 162),
    p("vowels", 1000, -1, 0.01, 0.15, 2, 16, 78),
    p("letter", 1000, -1, 0.01, 0.15, 1, 16, 32),
    p("cardio", 100, -1, 0.01, 0.15, 2, 16, 231),
    p("seismic", 100, -1, 0.01, 0.15, 2, 16, 276),
    p("musk", 100, -1, 0.01, 0.15, 2, 16, 166),
    p("speech", 1000, 512, 0.001, 0.15, 1, 8, 400),
    p("thyroid", 5000, -1, 0.01, 0.1, 2, 16, 21),
    p("abalone", 1000, -1, 0.0001, 0.15, 4, 16, 162),
    p("optdigits", 500, -1, 0.01, 0.2, 1, 16, 64),
    p("satimage-2", 100, -1, 0.01, 0.2, 1, 16, 36),
    p("satellite", 100, -1, 0.01, 0.2, 1, 16, 36),
    p("pendigits", 1000, -1, 0.01, 0.25, 2, 16, 136),
    p("annthyroid", 400, -1, 0.01, 0.15, 1, 16, 6),
    p("mnist", 1000, -1, 0.001, 0.15, 1, 32, 100),
    p("mammography", 200, -1, 0.01, 0.25, 4, 16, 56),
    p("shuttle", 100, 4096, 0.01, 0.25, 3, 64, 129),
    p("mulcross", 100, 4096, 0.001, 0.15, 2, 16, 10),
    p("forestcover", 100, 4096, 0.01, 0.15, 2, 16, 55),
    p("campaign", 100, 4096, 0.001, 0.15, 1, 16, 62),
    p("fraud", 100, 4096, 0.001, 0.2, 1, 32, 29),
    p("backdoor", 1000, 256, 0.001, 0.2, 1, 32, 196),
    // the contamination study on the two-Gaussian generator
    p("synthetic", 100, -1, 0.01, 0.15, 1, 16, 4),
];

pub fn preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

fn preset_layer(name: &str) -> Result<Value> {
    let key = name.to_ascii_lowercase();
    let p = preset(&key).ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
    Ok(json!({
        "preset": key,
        "expected_m": p.m as u64,
        "method": {
            "r": p.r,
            "model": { "e": p.e },
            "train": { "epochs": p.epochs, "batch_size": p.batch_size, "lr": p.lr, "p_mask": p.p_mask },
        }
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub label_col: String,
    pub categorical: Vec<String>,
    /// Sidecar file listing further categorical columns.
    pub schema: Option<PathBuf>,
    pub preset: Option<String>,
    /// Bank size listed with the preset, checked against the data.
    pub expected_m: Option<u64>,
    pub method: MethodConfig,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub out: PathBuf,
}

fn default_out() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("nptad-out"), PathBuf::from)
}

impl RunConfig {
    fn defaults() -> Self {
        Self {
            dataset: None,
            label_col: "label".into(),
            categorical: Vec::new(),
            schema: None,
            preset: None,
            expected_m: None,
            method: MethodConfig::default(),
            seeds: vec![0],
            workers: 1,
            out: default_out(),
        }
    }

    fn validate(&self) -> Result<()> {
        ensure!(!self.seeds.is_empty(), Config, "at least one seed is required");
        ensure!(self.workers >= 1, Config, "workers must be at least 1");
        ensure!(self.method.r >= 1, Config, "r must be at least 1");
        ensure!(self.method.knn.k >= 1, Config, "k must be at least 1");
        self.method.model.validate()?;
        self.method.train.validate()
    }

    fn data_source(&self) -> Result<DataSource> {
        let path = self
            .dataset
            .clone()
            .ok_or_else(|| Error::Config("--dataset is required".into()))?;
        let mut load = LoadSpec::new(&self.label_col);
        load.categorical = self.categorical.clone();
        if let Some(s) = &self.schema {
            load = load.with_sidecar(s)?;
        }
        Ok(DataSource::Csv { path, load })
    }

    /// Method settings for a run over `n_seeds` seeds: parallelism goes to
    /// the seeds when there are several, otherwise to the mask loop.
    fn method_for(&self, n_seeds: usize) -> (MethodConfig, usize) {
        let mut m = self.method.clone();
        if n_seeds > 1 {
            m.score.workers = 1;
            (m, self.workers)
        } else {
            m.score.workers = self.workers;
            (m, 1)
        }
    }
}

/// Overwrites `base` with `top` key by key, descending into objects.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set(v: &mut Value, path: &[&str], x: impl Serialize) {
    let mut cur = v;
    for key in &path[..path.len() - 1] {
        cur = cur
            .as_object_mut()
            .expect("object layer")
            .entry(*key)
            .or_insert_with(|| json!({}));
    }
    cur[path[path.len() - 1]] = serde_json::to_value(x).expect("serializable flag");
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Npt,
    Transformer,
    MaskKnn,
    Knn,
}

impl From<VariantArg> for MethodKind {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Npt => MethodKind::Npt,
            VariantArg::Transformer => MethodKind::Transformer,
            VariantArg::MaskKnn => MethodKind::MaskKnn,
            VariantArg::Knn => MethodKind::Knn,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AggArg {
    Mean,
    Max,
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Labelled CSV file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Name of the 0/1 label column.
    #[arg(long)]
    label_col: Option<String>,
    /// Categorical columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    categorical: Option<Vec<String>>,
    /// File listing categorical columns, one per line.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Named per-dataset hyperparameters, e.g. `pima`.
    #[arg(long)]
    preset: Option<String>,
    /// JSON run configuration, such as a previous `config.json` echo.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Rows per step; -1 for full batch.
    #[arg(long, allow_hyphen_values = true)]
    batch_size: Option<i64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    pmask: Option<f64>,
    /// Largest number of features masked together when scoring.
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Neighbours for the KNN baselines.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    agg: Option<AggArg>,
    /// Number of seeds, run as 0..N.
    #[arg(long, conflicts_with = "seed_list")]
    seeds: Option<u64>,
    /// Explicit comma separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn flag_layer(&self) -> Value {
        let mut v = json!({});
        if let Some(x) = &self.dataset {
            set(&mut v, &["dataset"], x);
        }
        if let Some(x) = &self.label_col {
            set(&mut v, &["label_col"], x);
        }
        if let Some(x) = &self.categorical {
            set(&mut v, &["categorical"], x);
        }
        if let Some(x) = &self.schema {
            set(&mut v, &["schema"], x);
        }
        if let Some(x) = self.variant {
            set(&mut v, &["method", "kind"], MethodKind::from(x));
        }
        if let Some(x) = self.epochs {
            set(&mut v, &["method", "train", "epochs"], x);
        }
        if let Some(x) = self.batch_size {
            set(&mut v, &["method", "train", "batch_size"], x);
        }
        if let Some(x) = self.lr {
            set(&mut v, &["method", "train", "lr"], x);
        }
        if let Some(x) = self.pmask {
            set(&mut v, &["method", "train", "p_mask"], x);
        }
        if let Some(x) = self.r {
            set(&mut v, &["method", "r"], x);
        }
        if let Some(x) = self.embed_dim {
            set(&mut v, &["method", "model", "e"], x);
        }
        if let Some(x) = self.depth {
            set(&mut v, &["method", "model", "depth"], x);
        }
        if let Some(x) = self.heads {
            set(&mut v, &["method", "model", "heads"], x);
        }
        if let Some(x) = self.k {
            set(&mut v, &["method", "knn", "k"], x);
        }
        if let Some(x) = self.agg {
            let a = match x {
                AggArg::Mean => Aggregation::Mean,
                AggArg::Max => Aggregation::Max,
            };
            set(&mut v, &["method", "score", "aggregation"], a);
        }
        if let Some(n) = self.seeds {
            set(&mut v, &["seeds"], (0..n).collect::<Vec<u64>>());
        }
        if let Some(x) = &self.seed_list {
            set(&mut v, &["seeds"], x);
        }
        if let Some(x) = self.workers {
            set(&mut v, &["workers"], x);
        }
        if let Some(x) = &self.out {
            set(&mut v, &["out"], x);
        }
        v
    }

    /// Resolves defaults, preset, config file and flags, in that order. The
    /// preset is the one named by the flag, else by the file, else
    /// `default_preset`.
    fn resolve(&self, default_preset: Option<&str>) -> Result<RunConfig> {
        let mut v = serde_json::to_value(RunConfig::defaults())?;
        let file = match &self.config {
            Some(p) => {
                let text = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                Some(
                    serde_json::from_slice::<Value>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                )
            }
            None => None,
        };
        let file_preset = file
            .as_ref()
            .and_then(|f| f.get("preset"))
            .and_then(Value::as_str);
        let preset = self.preset.as_deref().or(file_preset).or(default_preset);
        if let Some(name) = preset {
            merge(&mut v, preset_layer(name)?);
        }
        if let Some(f) = file {
            merge(&mut v, f);
        }
        merge(&mut v, self.flag_layer());
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Model written by `train`; defaults to `model.ckpt` in the output
    /// directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write the per-mask loss matrix.
    #[arg(long)]
    dump_losses: bool,
}

#[derive(Args, Debug)]
struct MaskbankArgs {
    /// Number of features.
    #[arg(long)]
    d: usize,
    #[arg(long)]
    r: usize,
    /// Print every mask as a 0/1 string.
    #[arg(long)]
    list: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on the training split and save a checkpoint.
    Train(RunArgs),
    /// Score the validation split with a checkpoint or a KNN baseline.
    Score(ScoreArgs),
    /// Full experiment over several seeds.
    Bench(RunArgs),
    /// Contamination sweep on the synthetic generator.
    Contam(RunArgs),
    /// Size or list the scoring mask bank.
    Maskbank(MaskbankArgs),
}

#[derive(Parser, Debug)]
#[command(
    name = "nptad",
    version,
    about = "Tabular anomaly detection by masked-feature reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let mut text = serde_json::to_vec_pretty(cfg)?;
    text.push(b'\n');
    write_file(&cfg.out.join("config.json"), &text)?;
    Ok(&cfg.out)
}

fn check_expected_m(cfg: &RunConfig, d: usize) {
    if let (Some(m), Some(have)) = (cfg.expected_m, bank_size(d, cfg.method.r)) {
        if have != u128::from(m) {
            log::warn!(
                "event=bank_size_differs preset_m={m} m={have} d={d} r={}",
                cfg.method.r
            );
        }
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    ensure!(
        matches!(cfg.method.kind, MethodKind::Npt | MethodKind::Transformer),
        Config,
        "train needs a network variant (npt or transformer), not {}",
        cfg.method.kind.name()
    );
    let DataSource::Csv { path, load } = cfg.data_source()? else {
        unreachable!()
    };
    let seed = cfg.seeds[0];
    let (train, _) = split(&load_csv(&path, &load)?, &SplitSpec::new(seed))?;
    check_expected_m(cfg, train.d());
    let out = prepare_out(cfg)?;
    let (method, _) = cfg.method_for(1);
    let (model, log) = method.fit(&train, seed)?;
    let ck = Checkpoint {
        config: model.config,
        schema: model.schema,
        params: model.params,
        meta: json!({ "seed": seed, "run": cfg }),
    };
    save_checkpoint(&out.join("model.ckpt"), &ck)?;
    let mut text = String::from("step,loss,grad_norm\n");
    for (i, (l, g)) in log.losses.iter().zip(&log.grad_norms).enumerate() {
        text.push_str(&format!("{i},{l},{g}\n"));
    }
    write_file(&out.join("train_log.csv"), text.as_bytes())?;
    let last = log.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "event=train_done seed={seed} steps={} final_loss={last} out={}",
        log.losses.len(),
        out.display()
    );
    Ok(())
}

fn cmd_score(cfg: &RunConfig, checkpoint: Option<&Path>, dump_losses: bool) -> Result<()> {
    let DataSource::Csv { path, load } = cfg.data_source()? else {
        unreachable!()
    };
    let seed = cfg.seeds[0];
    let (train, val) = split(&load_csv(&path, &load)?, &SplitSpec::new(seed))?;
    check_expected_m(cfg, train.d());
    let (method, _) = cfg.method_for(1);
    let bank = build_mask_bank(train.d(), method.r)?;
    let scores = match method.kind {
        MethodKind::Npt | MethodKind::Transformer => {
            let ck_path = checkpoint.map_or_else(|| cfg.out.join("model.ckpt"), Path::to_path_buf);
            let ck = load_checkpoint(&ck_path)?;
            let model = NptModel {
                config: ck.config,
                schema: ck.schema,
                params: ck.params,
            };
            let tr = model.schema.encode(&train)?;
            let va = model.schema.encode(&val)?;
            let sc = ScoreConfig {
                seed,
                keep_loss_matrix: dump_losses,
                ..method.score.clone()
            };
            score_batch(&model, &tr, &va, &bank, &sc)?
        }
        MethodKind::MaskKnn | MethodKind::Knn => {
            let schema = FeatureSchema::fit(&train)?;
            let tr = schema.encode(&train)?;
            let va = schema.encode(&val)?;
            if method.kind == MethodKind::Knn {
                knn_score(&va, &tr, method.knn.k)?
            } else {
                let kc = KnnConfig {
                    seed,
                    ..method.knn.clone()
                };
                mask_knn_score(&va, &tr, &bank, &kc, dump_losses)?
            }
        }
    };
    let out = prepare_out(cfg)?;
    write_scores_csv(
        &out.join("scores.csv"),
        &val.ids,
        &scores.scores,
        Some(&val.labels),
    )?;
    if let Some(lm) = &scores.loss_matrix {
        write_loss_matrix_csv(&out.join("loss_matrix.csv"), &val.ids, &bank, lm)?;
    }
    let f1 = f1_at_count(&scores.scores, &val.labels)?;
    let au = auroc(&scores.scores, &val.labels)?;
    let metrics =
        json!({ "seed": seed, "f1": f1, "auroc": au, "n_val": val.n(), "n_anomalies": val.n_anomalies() });
    let mut text = serde_json::to_vec_pretty(&metrics)?;
    text.push(b'\n');
    write_file(&out.join("metrics.json"), &text)?;
    println!(
        "event=score_done seed={seed} f1={f1} auroc={au} out={}",
        out.display()
    );
    Ok(())
}

fn cmd_bench(cfg: &RunConfig) -> Result<ScoreReport> {
    let source = cfg.data_source()?;
    let out = prepare_out(cfg)?;
    let (method, workers) = cfg.method_for(cfg.seeds.len());
    let runs = run_with_detector(&source, &method, &cfg.seeds, workers)?;
    for r in &runs {
        write_scores_csv(
            &out.join(format!("scores_seed{}.csv", r.seed)),
            &r.ids,
            &r.scores,
            Some(&r.labels),
        )?;
    }
    let report = ScoreReport::new(&source.name(), method.kind.name(), &config_hash(cfg)?, runs);
    write_report_csv(&out.join("report.csv"), &report)?;
    write_report_json(&out.join("report.json"), &report)?;
    println!(
        "event=bench_done dataset={} method={} seeds={} mean_f1={} std_f1={} mean_auroc={} std_auroc={}",
        report.dataset,
        report.method,
        report.seeds.len(),
        report.mean_f1,
        report.std_f1,
        report.mean_auroc,
        report.std_auroc
    );
    Ok(report)
}

fn cmd_contam(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let (method, workers) = cfg.method_for(cfg.seeds.len());
    let curve = run_contamination(&method, &cfg.seeds, workers)?;
    write_curve_csv(&out.join("curve.csv"), &curve)?;
    let reports: Vec<&ScoreReport> = curve.iter().map(|(_, r)| r).collect();
    let mut text = serde_json::to_vec_pretty(&reports)?;
    text.push(b'\n');
    write_file(&out.join("contam_report.json"), &text)?;
    for (share, r) in &curve {
        println!(
            "event=contam_point share={share} mean_f1={} mean_auroc={}",
            r.mean_f1, r.mean_auroc
        );
    }
    Ok(())
}

fn cmd_maskbank(a: &MaskbankArgs) -> Result<()> {
    let bank = build_mask_bank(a.d, a.r)?;
    println!("m={}", bank.len());
    if a.list {
        for m in bank.masks() {
            println!("{}", m.to_bits_string());
        }
    }
    Ok(())
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a.resolve(None)?),
        Command::Score(s) => cmd_score(&s.run.resolve(None)?, s.checkpoint.as_deref(), s.dump_losses),
        Command::Bench(a) => cmd_bench(&a.resolve(None)?).map(|_| ()),
        Command::Contam(a) => cmd_contam(&a.resolve(Some("synthetic"))?),
        Command::Maskbank(a) => cmd_maskbank(a),
    }
}

/// Runs one command and returns the process exit code. Failures print a
/// single `error:` line on stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> RunArgs {
        let mut full = vec!["nptad", "bench"];
        full.extend_from_slice(v);
        match Cli::try_parse_from(full).unwrap().command {
            Command::Bench(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn presets_match_bank_sizes_where_d_is_known() {
        // (preset, d) for datasets whose width is fixed by the preset's m
        for (name, d) in [
            ("glass", 9),
            ("wbc", 30),
            ("ionosphere", 33),
            ("pima", 8),
            ("breastw", 9),
            ("thyroid", 6),
        ] {
            let p = preset(name).unwrap();
            assert_eq!(bank_size(d, p.r), Some(p.m), "{name}");
        }
    }

    #[test]
    fn precedence() {
        let c = args(&[]).resolve(None).unwrap();
        assert_eq!(c.method.train.epochs, 100);
        assert_eq!(c.method.r, 2);

        let c = args(&["--preset", "thyroid"]).resolve(None).unwrap();
        assert_eq!(
            (
                c.method.train.epochs,
                c.method.train.lr,
                c.method.train.p_mask,
                c.method.r,
                c.method.model.e
            ),
            (5000, 0.01, 0.1, 2, 16)
        );

        let c = args(&["--preset", "thyroid", "--epochs", "7", "--batch-size", "-1"])
            .resolve(None)
            .unwrap();
        assert_eq!(c.method.train.epochs, 7);
        assert_eq!(c.method.train.lr, 0.01);

        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(
            &f,
            r#"{"preset": "pima", "method": {"train": {"epochs": 3}}, "workers": 2}"#,
        )
        .unwrap();
        let c = args(&["--config", f.to_str().unwrap()]).resolve(None).unwrap();
        // file over its preset
        assert_eq!((c.method.train.epochs, c.method.r, c.workers), (3, 4, 2));
        let c = args(&["--config", f.to_str().unwrap(), "--workers", "1", "--seeds", "3"])
            .resolve(None)
            .unwrap();
        assert_eq!((c.workers, c.seeds.clone()), (1, vec![0, 1, 2]));
    }

    #[test]
    fn echo_round_trips() {
        let c = args(&[
            "--preset",
            "pima",
            "--variant",
            "mask-knn",
            "--seed-list",
            "4,9",
            "--agg",
            "max",
        ])
        .resolve(None)
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("echo.json");
        std::fs::write(&f, serde_json::to_vec(&c).unwrap()).unwrap();
        let again = args(&["--config", f.to_str().unwrap()]).resolve(None).unwrap();
        assert_eq!(again, c);
        assert_eq!(c.method.score.aggregation, Aggregation::Max);
    }

    #[test]
    fn bad_configs() {
        let e = args(&["--preset", "nope"]).resolve(None).unwrap_err();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        let e = args(&["--pmask", "1.5"]).resolve(None).unwrap_err();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        let e = args(&["--embed-dim", "6", "--heads", "4"])
            .resolve(None)
            .unwrap_err();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"bogus": 1}"#).unwrap();
        let e = args(&["--config", f.to_str().unwrap()])
            .resolve(None)
            .unwrap_err();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        let e = args(&["--config", "/nonexistent/c.json"])
            .resolve(None)
            .unwrap_err();
        assert_eq!(exit_code(&e), EXIT_IO);
    }

    #[test]
    fn merge_is_deep() {
        let mut a = json!({"x": {"y": 1, "z": 2}, "w": [1]});
        merge(&mut a, json!({"x": {"y": 5}, "w": [2, 3]}));
        assert_eq!(a, json!({"x": {"y": 5, "z": 2}, "w": [2, 3]}));
    }
}
