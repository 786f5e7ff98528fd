//! Experiment driver: configs, the end-to-end pipeline, the metric/score
//! correlation study and result reports.
//!
//! A pipeline cell is one `(loss, seed)` pair on one synthetic task. The
//! offline data is generated once from `task.data_seed`; the run seed
//! drives the train/validation split, list sampling, initialization and
//! minibatch order. Training and search never see the oracle. Each cell
//! builds its own oracle handle and hands it only to final scoring, and
//! the recorded call count lets callers check that.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::{generate_task_dataset, score_candidates, HeavyTailNoiseSpec, NoiseSpec, OracleKind, SyntheticTask};
use crate::data::{augment, split_indices, NormStats, OfflineDataset};
use crate::diffnet::DenseNet;
use crate::losses::{LossKind, RankingLoss};
use crate::metrics::{average_ranks, evaluate, spearman, EvalSet, MetricReport, Source};
use crate::searcher::{adapt_with_predictions, ascend, select_starts, write_candidates, AscentRule, SearchConfig};
use crate::trainer::{predict_dataset, train, TrainConfig};
use crate::{par, Error, Result};

/// Every config key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("task.name", "oracle: quadratic-1d, sphere, rastrigin, random-quadratic"),
    ("task.dim", "design dimension"),
    ("task.lower", "lower bound of the sampling box"),
    ("task.upper", "upper bound of the sampling box"),
    ("task.samples", "points sampled before the OOD split"),
    (
        "task.percentile",
        "bottom percentile (by true score) kept as offline data",
    ),
    ("task.noise", "none or heavy-tail"),
    ("task.noise_nu", "Student-t degrees of freedom"),
    ("task.noise_alpha", "noise scale"),
    ("task.noise_p", "per-point corruption probability"),
    ("task.form_seed", "seed of the random quadratic form"),
    ("task.data_seed", "seed of the sampled dataset"),
    ("data.lists", "number of sampled lists n"),
    ("data.list_len", "list length m"),
    ("train.losses", "loss names, one pipeline cell per loss and seed"),
    ("train.epochs", "training epochs"),
    ("train.lr", "Adam learning rate"),
    ("train.weight_decay", "decoupled weight decay on weights"),
    ("train.batch_lists", "lists per optimizer step"),
    ("train.hidden", "hidden layer widths"),
    ("train.train_ratio", "train share of the train/validation split"),
    ("train.lambdarank_alpha", "LambdaRank sharpness"),
    ("train.approxndcg_temperature", "ApproxNDCG temperature"),
    ("search.eta", "ascent step size"),
    ("search.steps", "ascent steps T"),
    ("search.rule", "adam or plain"),
    ("search.k", "start designs and evaluated candidates"),
    ("run.seeds", "run seeds"),
    ("run.out", "output directory"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: SyntheticTask,
    pub data_seed: u64,
    pub losses: Vec<LossKind>,
    /// Number of training lists `n`.
    pub lists: usize,
    /// List length `m`.
    pub list_len: usize,
    /// Shared training settings; `loss.kind` and `seed` are set per cell.
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: SyntheticTask::new(OracleKind::Sphere, 2),
            data_seed: 0,
            losses: vec![LossKind::ListNet, LossKind::Mse],
            lists: 500,
            list_len: 50,
            train: TrainConfig::default(),
            search: SearchConfig::default(),
            seeds: vec![0],
            out: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML document of dotted keys (or the equivalent tables)
    /// on top of the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = ExperimentConfig::default();
        let mut leaves = Vec::new();
        flatten("", &table, &mut leaves);
        for (key, value) in leaves {
            cfg.set(&key, value)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies a `key=value` override, with the value in TOML syntax (bare
    /// words are taken as strings).
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        self.set(key.trim(), &value)
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &toml::Value) -> Result<()> {
        let noise = |cfg: &mut ExperimentConfig| -> HeavyTailNoiseSpec {
            match cfg.task.noise {
                NoiseSpec::HeavyTail(spec) => spec,
                NoiseSpec::None => HeavyTailNoiseSpec::default(),
            }
        };
        match key {
            "task.name" => {
                self.task.oracle = as_str(key, value)?.parse()?;
                let (lo, hi) = self.task.oracle.default_box();
                self.task.lower = lo;
                self.task.upper = hi;
                if self.task.oracle == OracleKind::Quadratic1d {
                    self.task.dim = 1;
                }
            }
            "task.dim" => self.task.dim = as_usize(key, value)?,
            "task.lower" => self.task.lower = as_f64(key, value)?,
            "task.upper" => self.task.upper = as_f64(key, value)?,
            "task.samples" => self.task.samples = as_usize(key, value)?,
            "task.percentile" => self.task.percentile = as_f64(key, value)?,
            "task.noise" => {
                self.task.noise = match as_str(key, value)? {
                    "none" => NoiseSpec::None,
                    "heavy-tail" => NoiseSpec::HeavyTail(noise(self)),
                    other => return Err(Error::Config(format!("unknown noise {other:?}"))),
                }
            }
            "task.noise_nu" | "task.noise_alpha" | "task.noise_p" => {
                let mut spec = noise(self);
                let v = as_f64(key, value)?;
                match key {
                    "task.noise_nu" => spec.nu = v,
                    "task.noise_alpha" => spec.alpha = v,
                    _ => spec.p = v,
                }
                if let NoiseSpec::HeavyTail(s) = &mut self.task.noise {
                    *s = spec;
                } else {
                    self.task.noise = NoiseSpec::HeavyTail(spec);
                }
            }
            "task.form_seed" => self.task.form_seed = as_u64(key, value)?,
            "task.data_seed" => self.data_seed = as_u64(key, value)?,
            "data.lists" => self.lists = as_usize(key, value)?,
            "data.list_len" => self.list_len = as_usize(key, value)?,
            "train.losses" => {
                self.losses = as_list(value)
                    .iter()
                    .map(|v| as_str(key, v).and_then(|s| s.parse::<LossKind>()))
                    .collect::<Result<_>>()?
            }
            "train.epochs" => self.train.epochs = as_usize(key, value)?,
            "train.lr" => self.train.lr = as_f64(key, value)?,
            "train.weight_decay" => self.train.weight_decay = as_f64(key, value)?,
            "train.batch_lists" => self.train.batch_lists = as_usize(key, value)?,
            "train.hidden" => {
                self.train.hidden = as_list(value).iter().map(|v| as_usize(key, v)).collect::<Result<_>>()?
            }
            "train.train_ratio" => self.train.train_ratio = as_f64(key, value)?,
            "train.lambdarank_alpha" => self.train.loss.alpha = as_f64(key, value)?,
            "train.approxndcg_temperature" => self.train.loss.temperature = as_f64(key, value)?,
            "search.eta" => self.search.eta = as_f64(key, value)?,
            "search.steps" => self.search.steps = as_usize(key, value)?,
            "search.rule" => self.search.rule = as_str(key, value)?.parse::<AscentRule>()?,
            "search.k" => self.search.k = as_usize(key, value)?,
            "run.seeds" => self.seeds = as_list(value).iter().map(|v| as_u64(key, v)).collect::<Result<_>>()?,
            "run.out" => self.out = PathBuf::from(as_str(key, value)?),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        self.search.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("run.seeds must not be empty".into()));
        }
        if self.losses.is_empty() {
            return Err(Error::Config("train.losses must not be empty".into()));
        }
        if self.lists == 0 || self.list_len < 2 {
            return Err(Error::Config("data.lists >= 1 and data.list_len >= 2 required".into()));
        }
        Ok(())
    }

    /// Short task label used in file names and reports.
    pub fn task_label(&self) -> String {
        let name = self.task.oracle.name();
        match self.task.oracle {
            OracleKind::Quadratic1d => name.to_string(),
            _ => format!("{name}-{}d", self.task.dim),
        }
    }

    /// Training config of one cell.
    pub fn cell_train_config(&self, loss: LossKind, seed: u64) -> TrainConfig {
        TrainConfig {
            loss: RankingLoss {
                kind: loss,
                ..self.train.loss
            },
            seed: sub_seed(seed, 3),
            ..self.train.clone()
        }
    }
}

fn flatten<'a>(prefix: &str, table: &'a toml::Table, out: &mut Vec<(String, &'a toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            leaf => out.push((key, leaf)),
        }
    }
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::Config(format!("{key} expects a number"))),
    }
}

fn as_u64(key: &str, v: &toml::Value) -> Result<u64> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(Error::Config(format!("{key} expects a non-negative integer"))),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    as_u64(key, v).map(|u| u as usize)
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| Error::Config(format!("{key} expects a string")))
}

/// A scalar is treated as a one-element list.
fn as_list(v: &toml::Value) -> Vec<toml::Value> {
    match v {
        toml::Value::Array(a) => a.clone(),
        other => vec![other.clone()],
    }
}

/// Derives an independent seed for one stage of a run (splitmix64).
pub fn sub_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Metrics of a completed cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    /// OOD metrics of the adapted predictions against z-scored true scores.
    pub ood: MetricReport,
    pub p100: f64,
    pub p50: f64,
    pub best_epoch: usize,
    /// Oracle calls made by the cell; all of them come from final scoring.
    pub oracle_calls: u64,
    /// Checkpoint path relative to the output directory.
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub task: String,
    pub loss: LossKind,
    pub seed: u64,
    pub outcome: std::result::Result<RunMetrics, String>,
    pub wall_seconds: f64,
}

/// Normalized offline data of one cell.
pub struct CellData {
    pub stats: NormStats,
    /// Training part of the train/validation split.
    pub train: OfflineDataset,
    pub val: OfflineDataset,
    /// Whole offline dataset.
    pub offline: OfflineDataset,
}

/// Splits raw offline data with the cell seed and normalizes every part with
/// the statistics of the training part.
pub fn prepare_cell_data(raw: &OfflineDataset, train_ratio: f64, seed: u64) -> Result<CellData> {
    let (tr, va) = split_indices(raw.len(), train_ratio, sub_seed(seed, 1))?;
    let stats = NormStats::fit(&raw.select(&tr))?;
    let offline = stats.apply(raw)?;
    Ok(CellData {
        train: offline.select(&tr),
        val: offline.select(&va),
        offline,
        stats,
    })
}

/// Validation list count matching the train/validation ratio.
fn val_lists(cfg: &ExperimentConfig) -> usize {
    let r = cfg.train.train_ratio;
    ((cfg.lists as f64 * (1.0 - r) / r).round() as usize).max(1)
}

/// Trains one surrogate on raw offline data: split, augment, train.
pub fn train_cell(
    cfg: &ExperimentConfig,
    raw: &OfflineDataset,
    loss: LossKind,
    seed: u64,
) -> Result<(CellData, DenseNet, crate::trainer::TrainRecord)> {
    let data = prepare_cell_data(raw, cfg.train.train_ratio, seed)?;
    let trainset = augment(&data.train, cfg.lists, cfg.list_len, sub_seed(seed, 2))?;
    let valset = augment(&data.val, val_lists(cfg), cfg.list_len, sub_seed(seed, 4))?;
    let (net, record) = train(&trainset, &valset, &cfg.cell_train_config(loss, seed))?;
    Ok((data, net, record))
}

/// Adapts a trained net on the training split and ascends from the top-k
/// offline designs. Returns candidates in raw design space.
pub fn search_cell(cfg: &ExperimentConfig, data: &CellData, net: DenseNet) -> Result<Vec<Vec<f64>>> {
    let preds = predict_dataset(&net, &data.train)?;
    let model = adapt_with_predictions(net, &preds)?;
    let starts = select_starts(&data.offline, cfg.search.k)?;
    let found = ascend(&model, &cfg.search, &starts)?;
    Ok(found.iter().map(|z| data.stats.inverse_design(z)).collect())
}

/// Runs every `(loss, seed)` cell and writes per-run artifacts under
/// `cfg.out/runs/`. A failing cell is recorded and the rest proceed.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let task_data = generate_task_dataset(&cfg.task, cfg.data_seed)?;
    let runs_dir = cfg.out.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    let cells: Vec<(LossKind, u64)> = cfg
        .losses
        .iter()
        .flat_map(|&l| cfg.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let task = cfg.task_label();
    Ok(par::map(&cells, |&(loss, seed)| {
        let start = Instant::now();
        let outcome = run_cell(cfg, &task_data, &task, loss, seed).map_err(|e| e.to_string());
        RunResult {
            task: task.clone(),
            loss,
            seed,
            outcome,
            wall_seconds: start.elapsed().as_secs_f64(),
        }
    }))
}

fn run_cell(
    cfg: &ExperimentConfig,
    task_data: &crate::bench::TaskData,
    task: &str,
    loss: LossKind,
    seed: u64,
) -> Result<RunMetrics> {
    let rel = PathBuf::from("runs").join(format!("{task}-{loss}-seed{seed}"));
    let dir = cfg.out.join(&rel);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let (data, net, record) = train_cell(cfg, &task_data.train, loss, seed)?;
    net.save(dir.join("model.ckpt"))?;
    record.write_csv(dir.join("train_record.csv"))?;

    // OOD evaluation uses the adapted model, fitted on the training split
    let train_preds = predict_dataset(&net, &data.train)?;
    let model = adapt_with_predictions(net.clone(), &train_preds)?;
    let ood = data.stats.apply(&task_data.ood)?;
    let ood_preds: Vec<f64> = predict_dataset(&net, &ood)?
        .into_iter()
        .map(|f| (f - model.mu) / model.sigma)
        .collect();
    let eval = EvalSet::new(ood_preds.clone(), ood.scores().to_vec(), Source::OutOfDistribution)?;
    let report = evaluate(&eval)?;
    crate::data::write_rows(
        &dir.join("ood_predictions.csv"),
        &["prediction".into(), "truth".into()],
        ood_preds.iter().zip(ood.scores()).map(|(&p, &t)| vec![p, t]),
    )?;

    let candidates = search_cell(cfg, &data, net)?;
    write_candidates(dir.join("candidates.csv"), &candidates)?;

    // the only place an oracle exists for this cell
    let oracle = cfg.task.build_oracle()?;
    let scores = score_candidates(&oracle, &candidates, task_data.y_min, task_data.y_max)?;
    Ok(RunMetrics {
        ood: report,
        p100: scores.p100,
        p50: scores.p50,
        best_epoch: record.best_epoch,
        oracle_calls: oracle.calls(),
        checkpoint: rel.join("model.ckpt"),
    })
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResultRow {
    task: String,
    loss: String,
    seed: u64,
    status: String,
    n: Option<usize>,
    mse: Option<f64>,
    aupcc: Option<f64>,
    spearman: Option<f64>,
    ndcg: Option<f64>,
    p100: Option<f64>,
    p50: Option<f64>,
    best_epoch: Option<usize>,
    oracle_calls: Option<u64>,
    checkpoint: Option<String>,
    error: Option<String>,
}

impl From<&RunResult> for ResultRow {
    fn from(r: &RunResult) -> Self {
        let m = r.outcome.as_ref().ok();
        ResultRow {
            task: r.task.clone(),
            loss: r.loss.name().to_string(),
            seed: r.seed,
            status: if m.is_some() { "ok" } else { "error" }.to_string(),
            n: m.map(|m| m.ood.n),
            mse: m.map(|m| m.ood.mse),
            aupcc: m.map(|m| m.ood.aupcc),
            spearman: m.map(|m| m.ood.spearman),
            ndcg: m.map(|m| m.ood.ndcg),
            p100: m.map(|m| m.p100),
            p50: m.map(|m| m.p50),
            best_epoch: m.map(|m| m.best_epoch),
            oracle_calls: m.map(|m| m.oracle_calls),
            checkpoint: m.map(|m| m.checkpoint.to_string_lossy().into_owned()),
            error: r.outcome.as_ref().err().cloned(),
        }
    }
}

impl TryFrom<ResultRow> for RunResult {
    type Error = Error;

    fn try_from(row: ResultRow) -> Result<Self> {
        let outcome = if row.status == "ok" {
            let missing = || Error::invalid(format!("incomplete ok row for seed {}", row.seed));
            Ok(RunMetrics {
                ood: MetricReport {
                    n: row.n.ok_or_else(missing)?,
                    mse: row.mse.ok_or_else(missing)?,
                    aupcc: row.aupcc.ok_or_else(missing)?,
                    spearman: row.spearman.ok_or_else(missing)?,
                    ndcg: row.ndcg.ok_or_else(missing)?,
                },
                p100: row.p100.ok_or_else(missing)?,
                p50: row.p50.ok_or_else(missing)?,
                best_epoch: row.best_epoch.ok_or_else(missing)?,
                oracle_calls: row.oracle_calls.ok_or_else(missing)?,
                checkpoint: PathBuf::from(row.checkpoint.clone().ok_or_else(missing)?),
            })
        } else {
            Err(row.error.clone().unwrap_or_default())
        };
        Ok(RunResult {
            task: row.task,
            loss: row.loss.parse()?,
            seed: row.seed,
            outcome,
            wall_seconds: 0.0,
        })
    }
}

pub fn write_results_csv(path: impl AsRef<Path>, results: &[RunResult]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in results {
        w.serialize(ResultRow::from(r)).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<RunResult>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize::<ResultRow>()
        .map(|row| row.map_err(|e| Error::csv(path, e)).and_then(RunResult::try_from))
        .collect()
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One summary line per `(task, loss)` in order of first appearance.
pub fn summarize(results: &[RunResult]) -> String {
    let mut groups: Vec<((String, LossKind), Vec<&RunResult>)> = Vec::new();
    for r in results {
        let key = (r.task.clone(), r.loss);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut out = String::new();
    for ((task, loss), runs) in groups {
        let ok: Vec<&RunMetrics> = runs.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
        let _ = write!(out, "{task} {loss}: {}/{} runs ok", ok.len(), runs.len());
        if !ok.is_empty() {
            let stat = |f: &dyn Fn(&RunMetrics) -> f64| mean_std(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
            for (name, (m, s)) in [
                ("p100", stat(&|m| m.p100)),
                ("p50", stat(&|m| m.p50)),
                ("ood_aupcc", stat(&|m| m.ood.aupcc)),
                ("ood_mse", stat(&|m| m.ood.mse)),
                ("ood_spearman", stat(&|m| m.ood.spearman)),
            ] {
                let _ = write!(out, ", {name} {m:.4} ± {s:.4}");
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `results.csv`, `summary.txt` and `timings.csv` into `dir` and
/// returns the summary. The first two depend only on the results; wall
/// times go to the third.
pub fn emit_report(results: &[RunResult], dir: impl AsRef<Path>) -> Result<String> {
    if results.is_empty() {
        return Err(Error::invalid("no results to report"));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_results_csv(dir.join("results.csv"), results)?;
    let summary = summarize(results);
    let path = dir.join("summary.txt");
    fs::write(&path, &summary).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("timings.csv");
    let mut timings = String::from("task,loss,seed,wall_seconds\n");
    for r in results {
        let _ = writeln!(timings, "{},{},{},{}", r.task, r.loss, r.seed, r.wall_seconds);
    }
    fs::write(&path, timings).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Metric values of one surrogate run used by the correlation study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyPoint {
    pub ood_mse: f64,
    pub ood_aupcc: f64,
    pub score: f64,
}

/// Rank pairs and Spearman coefficients of the metric/score study.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub runs: usize,
    /// Rank 1 is the lowest OOD-MSE.
    pub mse_ranks: Vec<f64>,
    /// Rank 1 is the highest OOD-AUPCC.
    pub aupcc_ranks: Vec<f64>,
    /// Rank 1 is the highest 100th-percentile score.
    pub score_ranks: Vec<f64>,
    /// `None` when a rank column is constant.
    pub mse_spearman: Option<f64>,
    pub aupcc_spearman: Option<f64>,
    pub degenerate: bool,
}

/// Correlates metric ranks with score ranks over any number of runs.
pub fn correlate_points(points: &[StudyPoint]) -> Result<CorrelationReport> {
    if points.len() < 2 {
        return Err(Error::invalid("correlation needs at least two runs"));
    }
    let mse_ranks = average_ranks(&points.iter().map(|p| p.ood_mse).collect::<Vec<_>>());
    let aupcc_ranks = average_ranks(&points.iter().map(|p| -p.ood_aupcc).collect::<Vec<_>>());
    let score_ranks = average_ranks(&points.iter().map(|p| -p.score).collect::<Vec<_>>());
    let corr = |a: &[f64]| match spearman(a, &score_ranks) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let mse_spearman = corr(&mse_ranks)?;
    let aupcc_spearman = corr(&aupcc_ranks)?;
    Ok(CorrelationReport {
        runs: points.len(),
        degenerate: mse_spearman.is_none() || aupcc_spearman.is_none(),
        mse_ranks,
        aupcc_ranks,
        score_ranks,
        mse_spearman,
        aupcc_spearman,
    })
}

/// Minimum completed runs for [`correlation_study`].
pub const MIN_STUDY_RUNS: usize = 8;

/// Correlation study over the completed runs of each task, keyed by task.
pub fn correlation_study(results: &[RunResult]) -> Result<BTreeMap<String, CorrelationReport>> {
    let mut by_task: BTreeMap<String, Vec<StudyPoint>> = BTreeMap::new();
    for r in results {
        if let Ok(m) = &r.outcome {
            by_task.entry(r.task.clone()).or_default().push(StudyPoint {
                ood_mse: m.ood.mse,
                ood_aupcc: m.ood.aupcc,
                score: m.p100,
            });
        }
    }
    if by_task.is_empty() {
        return Err(Error::invalid("no completed runs"));
    }
    by_task
        .into_iter()
        .map(|(task, points)| {
            if points.len() < MIN_STUDY_RUNS {
                return Err(Error::invalid(format!(
                    "task {task} has {} completed runs, need {MIN_STUDY_RUNS}",
                    points.len()
                )));
            }
            Ok((task, correlate_points(&points)?))
        })
        .collect()
}

/// Writes `correlation.csv` plus two-column scatter files per task.
pub fn write_correlation(dir: impl AsRef<Path>, reports: &BTreeMap<String, CorrelationReport>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| v.to_string());
    let mut table = String::from("task,metric,spearman,runs,degenerate\n");
    for (task, r) in reports {
        for (metric, value, ranks) in [
            ("ood_mse", r.mse_spearman, &r.mse_ranks),
            ("ood_aupcc", r.aupcc_spearman, &r.aupcc_ranks),
        ] {
            let _ = writeln!(table, "{task},{metric},{},{},{}", fmt(value), r.runs, r.degenerate);
            crate::data::write_rows(
                &dir.join(format!("scatter_{task}_{metric}.csv")),
                &[format!("{metric}_rank"), "score_rank".into()],
                ranks.iter().zip(&r.score_ranks).map(|(&a, &b)| vec![a, b]),
            )?;
        }
    }
    let path = dir.join("correlation.csv");
    fs::write(&path, table).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_and_tables_agree() {
        let a = ExperimentConfig::from_toml_str(
            "task.name = \"quadratic-1d\"\ntask.noise = \"heavy-tail\"\ntask.noise_alpha = 10\n\
             train.losses = [\"listnet\", \"rankcosine\"]\ntrain.hidden = [16]\nsearch.rule = \"plain\"\n\
             run.seeds = [1, 2]\n",
        )
        .unwrap();
        let b = ExperimentConfig::from_toml_str(
            "[task]\nname = \"quadratic-1d\"\nnoise = \"heavy-tail\"\nnoise_alpha = 10.0\n\
             [train]\nlosses = [\"listnet\", \"rankcosine\"]\nhidden = [16]\n[search]\nrule = \"plain\"\n\
             [run]\nseeds = [1, 2]\n",
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.task.dim, 1);
        assert_eq!((a.task.lower, a.task.upper), (0.0, 3.0));
        assert_eq!(
            a.task.noise,
            NoiseSpec::HeavyTail(HeavyTailNoiseSpec {
                alpha: 10.0,
                ..HeavyTailNoiseSpec::default()
            })
        );
        assert_eq!(a.losses, vec![LossKind::ListNet, LossKind::RankCosine]);
        assert_eq!(a.search.rule, AscentRule::Plain);
    }

    #[test]
    fn every_documented_key_is_settable() {
        for (key, _) in CONFIG_KEYS {
            let value = match *key {
                "task.name" => "\"sphere\"",
                "task.noise" => "\"none\"",
                "search.rule" => "\"adam\"",
                "run.out" => "\"x\"",
                "train.losses" => "[\"mse\"]",
                "train.hidden" | "run.seeds" => "[3]",
                k if k.ends_with("ratio") || k.ends_with("_p") => "0.5",
                _ => "2",
            };
            let mut cfg = ExperimentConfig::default();
            cfg.apply_override(&format!("{key}={value}")).unwrap();
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("task.nope = 1"),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_toml_str("train.epochs = \"ten\"").is_err());
        assert!(ExperimentConfig::from_toml_str("train.losses = [\"hinge\"]").is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("train.losses=listmle").unwrap();
        assert_eq!(cfg.losses, vec![LossKind::ListMle]);
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sub_seeds_differ() {
        assert_ne!(sub_seed(0, 1), sub_seed(0, 2));
        assert_ne!(sub_seed(0, 1), sub_seed(1, 1));
        assert_eq!(sub_seed(5, 3), sub_seed(5, 3));
    }

    #[test]
    fn two_point_summary_uses_population_std() {
        let (m, s) = mean_std(&[0.4, 0.6]);
        assert!((m - 0.5).abs() < 1e-15 && (s - 0.1).abs() < 1e-15);
    }

    #[test]
    fn five_run_fixture_matches_closed_form() {
        let pts: Vec<StudyPoint> = [
            (0.1, 0.9, 0.8),
            (0.2, 0.7, 0.9),
            (0.3, 0.8, 0.5),
            (0.4, 0.5, 0.6),
            (0.5, 0.6, 0.4),
        ]
        .iter()
        .map(|&(ood_mse, ood_aupcc, score)| StudyPoint {
            ood_mse,
            ood_aupcc,
            score,
        })
        .collect();
        let r = correlate_points(&pts).unwrap();
        assert_eq!(r.mse_ranks, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(r.aupcc_ranks, vec![1.0, 3.0, 2.0, 5.0, 4.0]);
        assert_eq!(r.score_ranks, vec![2.0, 1.0, 4.0, 3.0, 5.0]);
        let closed = |a: &[f64], b: &[f64]| {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
            1.0 - 6.0 * d2 / (5.0 * 24.0)
        };
        assert!((r.mse_spearman.unwrap() - closed(&r.mse_ranks, &r.score_ranks)).abs() < 1e-12);
        assert!((r.aupcc_spearman.unwrap() - closed(&r.aupcc_ranks, &r.score_ranks)).abs() < 1e-12);
        assert!(!r.degenerate);
    }

    #[test]
    fn constant_metric_flags_degenerate_study() {
        let pts: Vec<StudyPoint> = (0..8)
            .map(|i| StudyPoint {
                ood_mse: 0.0,
                ood_aupcc: 0.75,
                score: i as f64,
            })
            .collect();
        let r = correlate_points(&pts).unwrap();
        assert!(r.degenerate);
        assert_eq!((r.mse_spearman, r.aupcc_spearman), (None, None));
    }

    fn result(task: &str, loss: LossKind, seed: u64, p100: f64) -> RunResult {
        RunResult {
            task: task.into(),
            loss,
            seed,
            outcome: Ok(RunMetrics {
                ood: MetricReport {
                    n: 10,
                    mse: 0.5,
                    aupcc: 0.6,
                    spearman: 0.7,
                    ndcg: 0.8,
                },
                p100,
                p50: p100 / 2.0,
                best_epoch: 3,
                oracle_calls: 128,
                checkpoint: "runs/a/model.ckpt".into(),
            }),
            wall_seconds: 1.5,
        }
    }

    #[test]
    fn results_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rs = vec![
            result("sphere-2d", LossKind::Mse, 0, 0.4),
            result("sphere-2d", LossKind::Mse, 1, 0.6),
        ];
        rs.push(RunResult {
            outcome: Err("degenerate model: prediction std 0".into()),
            ..result("sphere-2d", LossKind::ListNet, 0, 0.0)
        });
        let summary = emit_report(&rs, dir.path()).unwrap();
        assert!(summary.starts_with("sphere-2d mse: 2/2 runs ok, p100 0.5000 ± 0.1000"));
        assert!(summary.contains("sphere-2d listnet: 0/1 runs ok\n"));
        let back = read_results_csv(dir.path().join("results.csv")).unwrap();
        for (a, b) in back.iter().zip(&rs) {
            assert_eq!(a.outcome, b.outcome);
            assert_eq!((a.loss, a.seed), (b.loss, b.seed));
        }
        let first = fs::read(dir.path().join("results.csv")).unwrap();
        emit_report(&rs, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("results.csv")).unwrap(), first);
    }

    #[test]
    fn study_requires_enough_runs() {
        let rs: Vec<RunResult> = (0..5).map(|s| result("t", LossKind::Mse, s, s as f64)).collect();
        assert!(correlation_study(&rs).is_err());
    }
}
