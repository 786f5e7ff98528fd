//! Output adaptation and gradient-ascent design search.
//!
//! A trained network is z-scored by the mean and population std of its own
//! predictions over the training data, so the same step size works whatever
//! scale the ranking loss left the outputs at. Search then climbs the
//! adapted prediction independently from each of the top-k dataset designs.

use std::path::Path;
use std::str::FromStr;

use crate::data::{write_rows, OfflineDataset};
use crate::diffnet::{AdamConfig, AdamState, DenseNet};
use crate::metrics::top_k;
use crate::trainer::predict_dataset;
use crate::{par, Error, Result};

/// Prediction spreads below this are treated as a constant model.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// A network with its outputs z-scored by in-distribution statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    pub net: DenseNet,
    pub mu: f64,
    pub sigma: f64,
}

impl AdaptedModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok((self.net.forward(x)? - self.mu) / self.sigma)
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.net.grad_input(x)?;
        g.iter_mut().for_each(|v| *v /= self.sigma);
        Ok(g)
    }
}

/// Fits the adaptation statistics on `dataset`.
pub fn adapt(net: DenseNet, dataset: &OfflineDataset) -> Result<AdaptedModel> {
    let preds = predict_dataset(&net, dataset)?;
    adapt_with_predictions(net, &preds)
}

/// Same as [`adapt`], reusing predictions already computed over the data.
pub fn adapt_with_predictions(net: DenseNet, predictions: &[f64]) -> Result<AdaptedModel> {
    if predictions.is_empty() {
        return Err(Error::invalid("adaptation needs at least one prediction"));
    }
    let n = predictions.len() as f64;
    let mu = predictions.iter().sum::<f64>() / n;
    let var = predictions.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if !sigma.is_finite() || sigma < SIGMA_FLOOR {
        return Err(Error::DegenerateModel(format!(
            "prediction std {sigma} over the training data"
        )));
    }
    Ok(AdaptedModel { net, mu, sigma })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AscentRule {
    /// `x <- x + eta * grad`.
    Plain,
    /// Adam on the design, maximizing the adapted prediction.
    Adam,
}

impl AscentRule {
    pub fn name(self) -> &'static str {
        match self {
            AscentRule::Plain => "plain",
            AscentRule::Adam => "adam",
        }
    }
}

impl FromStr for AscentRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(AscentRule::Plain),
            "adam" => Ok(AscentRule::Adam),
            other => Err(Error::invalid(format!("unknown ascent rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub eta: f64,
    pub steps: usize,
    pub rule: AscentRule,
    /// Number of start designs (and returned candidates).
    pub k: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            eta: 1e-3,
            steps: 200,
            rule: AscentRule::Adam,
            k: 128,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config("search.eta must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("search.k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Indices of the `k` highest-scoring designs, ties by ascending index.
pub fn select_start_indices(dataset: &OfflineDataset, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > dataset.len() {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", dataset.len())));
    }
    Ok(top_k(dataset.scores(), k))
}

/// The `k` highest-scoring designs, best first.
pub fn select_starts(dataset: &OfflineDataset, k: usize) -> Result<Vec<Vec<f64>>> {
    Ok(select_start_indices(dataset, k)?
        .into_iter()
        .map(|i| dataset.design(i).to_vec())
        .collect())
}

/// Final designs after `cfg.steps` ascent steps from each start.
pub fn ascend(model: &AdaptedModel, cfg: &SearchConfig, starts: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    run_all(model, cfg, starts, false).map(|paths| {
        paths
            .into_iter()
            .map(|mut p| p.pop().expect("path holds the start"))
            .collect()
    })
}

/// Every iterate `x_0, ..., x_T` for each start.
pub fn ascend_trajectories(
    model: &AdaptedModel,
    cfg: &SearchConfig,
    starts: &[Vec<f64>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    run_all(model, cfg, starts, true)
}

fn run_all(
    model: &AdaptedModel,
    cfg: &SearchConfig,
    starts: &[Vec<f64>],
    keep_path: bool,
) -> Result<Vec<Vec<Vec<f64>>>> {
    cfg.validate()?;
    let d = model.net.input_dim();
    if let Some(bad) = starts.iter().find(|s| s.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    par::map_range(starts.len(), |i| ascend_one(model, cfg, &starts[i], i, keep_path))
        .into_iter()
        .collect()
}

fn ascend_one(
    model: &AdaptedModel,
    cfg: &SearchConfig,
    start: &[f64],
    index: usize,
    keep_path: bool,
) -> Result<Vec<Vec<f64>>> {
    let mut x = start.to_vec();
    let mut path = vec![x.clone()];
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.eta,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
        x.len(),
    );
    for step in 0..cfg.steps {
        let mut g = model.grad(&x)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSearch { step, start: index });
        }
        match cfg.rule {
            AscentRule::Plain => x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi += cfg.eta * gi),
            AscentRule::Adam => {
                // Adam descends, so feed it the negated gradient
                g.iter_mut().for_each(|v| *v = -*v);
                adam.step(&mut x, &g)
                    .map_err(|_| Error::NonFiniteSearch { step, start: index })?;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSearch { step, start: index });
        }
        if keep_path {
            path.push(x.clone());
        }
    }
    if !keep_path {
        path = vec![x];
    }
    Ok(path)
}

/// Writes candidates as CSV with header `x0,...,x{d-1}`.
pub fn write_candidates(path: impl AsRef<Path>, candidates: &[Vec<f64>]) -> Result<()> {
    let d = candidates.first().map_or(0, Vec::len);
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    write_rows(path.as_ref(), &header, candidates.iter().cloned())
}

/// Writes trajectories as CSV with header `start,step,x0,...`.
pub fn write_trajectories(path: impl AsRef<Path>, paths: &[Vec<Vec<f64>>]) -> Result<()> {
    let d = paths.first().and_then(|p| p.first()).map_or(0, Vec::len);
    let header: Vec<String> = ["start".to_string(), "step".to_string()]
        .into_iter()
        .chain((0..d).map(|j| format!("x{j}")))
        .collect();
    let rows = paths.iter().enumerate().flat_map(|(s, p)| {
        p.iter()
            .enumerate()
            .map(move |(t, x)| [s as f64, t as f64].into_iter().chain(x.iter().copied()).collect())
    });
    write_rows(path.as_ref(), &header, rows)
}

/// Reads a candidate CSV written by [`write_candidates`].
pub fn read_candidates(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let row = record
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Format {
                path: path.into(),
                msg: e.to_string(),
            })?;
        out.push(row);
    }
    Ok(out)
}
