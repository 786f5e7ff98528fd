//! Ranking losses over a single list.
//!
//! Every loss takes a label vector `y` and a prediction vector `f` of equal
//! length and returns both a value and the analytic gradient `dl/df`.
//!
//! | name         | family    | labels            |
//! |--------------|-----------|-------------------|
//! | `sce`        | pointwise | min-max to [0, 1] |
//! | `bce`        | pointwise | min-max to [0, 1] |
//! | `mse`        | pointwise | raw               |
//! | `ranknet`    | pairwise  | raw               |
//! | `lambdarank` | pairwise  | min-max to [0, 1] |
//! | `rankcosine` | pairwise  | raw               |
//! | `softmax`    | listwise  | min-max to [0, 1] |
//! | `listnet`    | listwise  | raw               |
//! | `listmle`    | listwise  | raw               |
//! | `approxndcg` | listwise  | min-max to [0, 1] |
//!
//! Label preparation is the caller's job (see [`RankingLoss::prepare_labels`]);
//! the loss functions themselves evaluate whatever labels they are given.

use std::cmp::Ordering;
use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Norm floor for the cosine loss.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LossKind {
    Sce,
    Bce,
    Mse,
    RankNet,
    LambdaRank,
    RankCosine,
    Softmax,
    ListNet,
    ListMle,
    ApproxNdcg,
}

impl LossKind {
    pub const ALL: [LossKind; 10] = [
        LossKind::Sce,
        LossKind::Bce,
        LossKind::Mse,
        LossKind::RankNet,
        LossKind::LambdaRank,
        LossKind::RankCosine,
        LossKind::Softmax,
        LossKind::ListNet,
        LossKind::ListMle,
        LossKind::ApproxNdcg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Sce => "sce",
            LossKind::Bce => "bce",
            LossKind::Mse => "mse",
            LossKind::RankNet => "ranknet",
            LossKind::LambdaRank => "lambdarank",
            LossKind::RankCosine => "rankcosine",
            LossKind::Softmax => "softmax",
            LossKind::ListNet => "listnet",
            LossKind::ListMle => "listmle",
            LossKind::ApproxNdcg => "approxndcg",
        }
    }

    /// Losses that read labels as probabilities, weights or gains and so
    /// need them in `[0, 1]`.
    pub fn wants_unit_labels(self) -> bool {
        matches!(
            self,
            LossKind::Sce | LossKind::Bce | LossKind::LambdaRank | LossKind::Softmax | LossKind::ApproxNdcg
        )
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown loss {s:?}")))
    }
}

impl TryFrom<String> for LossKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LossKind> for String {
    fn from(k: LossKind) -> String {
        k.name().to_string()
    }
}

/// A loss kind together with its smoothing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingLoss {
    pub kind: LossKind,
    /// LambdaRank logistic sharpness.
    pub alpha: f64,
    /// ApproxNDCG sigmoid temperature.
    pub temperature: f64,
}

impl From<LossKind> for RankingLoss {
    fn from(kind: LossKind) -> Self {
        RankingLoss::new(kind)
    }
}

impl RankingLoss {
    pub fn new(kind: LossKind) -> Self {
        RankingLoss {
            kind,
            alpha: 1.0,
            temperature: 1.0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid("LambdaRank alpha must be positive"));
        }
        self.alpha = alpha;
        Ok(self)
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid("ApproxNDCG temperature must be positive"));
        }
        self.temperature = temperature;
        Ok(self)
    }

    /// Maps a raw score list onto the label range this loss expects.
    pub fn prepare_labels(&self, y: &[f64]) -> Vec<f64> {
        if self.kind.wants_unit_labels() {
            min_max(y)
        } else {
            y.to_vec()
        }
    }

    pub fn value(&self, y: &[f64], f: &[f64]) -> Result<f64> {
        check_pair(y, f)?;
        Ok(match self.kind {
            LossKind::Sce => sce(y, f).0,
            LossKind::Bce => bce(y, f).0,
            LossKind::Mse => mse(y, f).0,
            LossKind::RankNet => ranknet(y, f).0,
            LossKind::LambdaRank => lambdarank(y, f, self.alpha).0,
            LossKind::RankCosine => rank_cosine(y, f).0,
            LossKind::Softmax => softmax_loss(y, f).0,
            LossKind::ListNet => listnet(y, f).0,
            LossKind::ListMle => listmle(y, f).0,
            LossKind::ApproxNdcg => approx_ndcg(y, f, self.temperature).0,
        })
    }

    pub fn grad(&self, y: &[f64], f: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_grad(y, f)?.1)
    }

    pub fn value_and_grad(&self, y: &[f64], f: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_pair(y, f)?;
        Ok(match self.kind {
            LossKind::Sce => sce(y, f),
            LossKind::Bce => bce(y, f),
            LossKind::Mse => mse(y, f),
            LossKind::RankNet => ranknet(y, f),
            LossKind::LambdaRank => lambdarank(y, f, self.alpha),
            LossKind::RankCosine => rank_cosine(y, f),
            LossKind::Softmax => softmax_loss(y, f),
            LossKind::ListNet => listnet(y, f),
            LossKind::ListMle => listmle(y, f),
            LossKind::ApproxNdcg => approx_ndcg(y, f, self.temperature),
        })
    }
}

fn check_pair(y: &[f64], f: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::invalid("empty list"));
    }
    if y.len() != f.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            actual: f.len(),
        });
    }
    if !y.iter().chain(f).all(|v| v.is_finite()) {
        return Err(Error::invalid("labels and predictions must be finite"));
    }
    Ok(())
}

/// Per-list min-max scaling to `[0, 1]`; a constant list maps to 0.5.
pub fn min_max(y: &[f64]) -> Vec<f64> {
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.5; y.len()];
    }
    y.iter().map(|v| (v - lo) / span).collect()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| x - lse).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    log_softmax(v).into_iter().map(f64::exp).collect()
}

fn sce(y: &[f64], f: &[f64]) -> (f64, Vec<f64>) {
    let value = y.iter().zip(f).map(|(y, f)| -y * f + softplus(*f)).sum();
    let grad = y.iter().zip(f).map(|(y, f)| sigmoid(*f) - y).collect();
    (value, grad)
}

fn bce(y: &[f64], f: &[f64]) -> (f64, Vec<f64>) {
    // log(sigmoid(f)) = -softplus(-f), log(1 - sigmoid(f)) = -softplus(f)
    let value = y
        .iter()
        .zip(f)
        .map(|(y, f)| y * softplus(-f) + (1.0 - y) * softplus(*f))
        .sum();
    let grad = y.iter().zip(f).map(|(y, f)| sigmoid(*f) - y).collect();
    (value, grad)
}

fn mse(y: &[f64], f: &[f64]) -> (f64, Vec<f64>) {
    let value = y.iter().zip(f).map(|(y, f)| (y - f) * (y - f)).sum();
    let grad = y.iter().zip(f).map(|(y, f)| 2.0 * (f - y)).collect();
    (value, grad)
}

/// `sum_{y_i > y_j} ln(1 + exp(-(f_i - f_j)))`.
fn ranknet(y: &[f64], f: &[f64]) -> (f64, Vec<f64>) {
    let m = y.len();
    let mut value = 0.0;
    let mut grad = vec![0.0; m];
    for i in 0..m {
        for j in 0..m {
            if y[i] > y[j] {
                let d = f[i] - f[j];
                value += softplus(-d);
                let s = sigmoid(-d);
                grad[i] -= s;
                grad[j] += s;
            }
        }
    }
    (value, grad)
}

fn rank_cosine(y: &[f64], f: &[f64]) -> (f64, Vec<f64>) {
    let ny = norm(y).max(COSINE_EPS);
    let raw_nf = norm(f);
    let nf = raw_nf.max(COSINE_EPS);
    let dot: f64 = y.iter().zip(f).map(|(a, b)| a * b).sum();
    let value = 1.0 - dot / (ny * nf);
    let grad = if raw_nf > COSINE_EPS {
        let cos = dot / (ny * nf);
        y.iter()
            .zip(f)
            .map(|(yi, fi)| -(yi / (ny * nf) - cos * fi / (nf * nf)))
            .collect()
    } else {
        // clamped norm is constant, so the loss is linear in f here
        y.iter().map(|yi| -yi / (ny * nf)).collect()
    };
    (value, grad)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `-sum_i y_i log softmax(f)_i`.
fn softmax_loss(y: &[f64], f: &[f64]) -> (f64, Vec<f64>) {
    let logp = log_softmax(f);
    let total: f64 = y.iter().sum();
    let value = -y.iter().zip(&logp).map(|(y, lp)| y * lp).sum::<f64>();
    let grad = y.iter().zip(&logp).map(|(y, lp)| total * lp.exp() - y).collect();
    (value, grad)
}

/// Cross-entropy between `softmax(y)` and `softmax(f)`.
fn listnet(y: &[f64], f: &[f64]) -> (f64, Vec<f64>) {
    let target = softmax(y);
    let logp = log_softmax(f);
    let value = -target.iter().zip(&logp).map(|(t, lp)| t * lp).sum::<f64>();
    let grad = target.iter().zip(&logp).map(|(t, lp)| lp.exp() - t).collect();
    (value, grad)
}

/// Indices sorted by `values` descending, ties by ascending index.
pub(crate) fn order_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Plackett-Luce negative log-likelihood of the label ordering.
fn listmle(y: &[f64], f: &[f64]) -> (f64, Vec<f64>) {
    let m = y.len();
    let pi = order_desc(y);
    // suffix[i] = logsumexp of f over positions i..m in label order
    let mut suffix = vec![0.0; m];
    suffix[m - 1] = f[pi[m - 1]];
    for i in (0..m - 1).rev() {
        let (a, b) = (f[pi[i]], suffix[i + 1]);
        let hi = a.max(b);
        suffix[i] = hi + ((a - hi).exp() + (b - hi).exp()).ln();
    }
    let value = (0..m).map(|i| suffix[i] - f[pi[i]]).sum();

    // d/df_{pi(k)} = sum_{i <= k} exp(f_{pi(k)} - suffix[i]) - 1
    let mut grad = vec![0.0; m];
    let mut prefix = f64::NEG_INFINITY; // logsumexp_{i <= k} (-suffix[i])
    for k in 0..m {
        let s = -suffix[k];
        let hi = prefix.max(s);
        prefix = hi + ((prefix - hi).exp() + (s - hi).exp()).ln();
        grad[pi[k]] = (f[pi[k]] + prefix).exp() - 1.0;
    }
    (value, grad)
}

#[inline]
fn gain(label: f64) -> f64 {
    label.exp2() - 1.0
}

/// Discount for a 1-based rank position.
#[inline]
fn discount(position: f64) -> f64 {
    1.0 / (1.0 + position).log2()
}

/// DCG of labels listed in ranked order, with gains `2^y - 1`.
pub fn dcg(labels_in_ranked_order: &[f64]) -> f64 {
    labels_in_ranked_order
        .iter()
        .enumerate()
        .map(|(pos, &y)| gain(y) * discount(pos as f64 + 1.0))
        .sum()
}

/// DCG of the ideal (label-descending) ordering.
pub fn ideal_dcg(labels: &[f64]) -> f64 {
    let mut sorted = labels.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    dcg(&sorted)
}

/// NDCG of labels listed in ranked order; 1 when the ideal DCG is zero.
pub fn ndcg(labels_in_ranked_order: &[f64]) -> f64 {
    let ideal = ideal_dcg(labels_in_ranked_order);
    if ideal > 0.0 {
        dcg(labels_in_ranked_order) / ideal
    } else {
        1.0
    }
}

/// Absolute NDCG change from swapping the items at 0-based positions `i`
/// and `j` of a ranked label list.
pub fn delta_ndcg(labels_in_ranked_order: &[f64], i: usize, j: usize) -> Result<f64> {
    let m = labels_in_ranked_order.len();
    if i >= m || j >= m {
        return Err(Error::invalid(format!(
            "swap positions ({i}, {j}) out of range for list of {m}"
        )));
    }
    Ok(delta_ndcg_with_ideal(
        labels_in_ranked_order[i],
        labels_in_ranked_order[j],
        i,
        j,
        ideal_dcg(labels_in_ranked_order),
    ))
}

fn delta_ndcg_with_ideal(yi: f64, yj: f64, pos_i: usize, pos_j: usize, ideal: f64) -> f64 {
    if ideal <= 0.0 || pos_i == pos_j {
        return 0.0;
    }
    let dg = gain(yi) - gain(yj);
    let dd = discount(pos_i as f64 + 1.0) - discount(pos_j as f64 + 1.0);
    (dg * dd).abs() / ideal
}

/// `sum_{y_i > y_j} dNDCG(i, j) * log2(1 + exp(-alpha (f_i - f_j)))`, where
/// positions come from the current prediction order. The NDCG weights are
/// piecewise constant in `f` and are held fixed in the gradient.
fn lambdarank(y: &[f64], f: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    let m = y.len();
    let ideal = ideal_dcg(y);
    let mut grad = vec![0.0; m];
    if ideal <= 0.0 {
        return (0.0, grad);
    }
    let order = order_desc(f);
    let mut position = vec![0; m];
    for (p, &i) in order.iter().enumerate() {
        position[i] = p;
    }
    let mut value = 0.0;
    for i in 0..m {
        for j in 0..m {
            if y[i] > y[j] {
                let w = delta_ndcg_with_ideal(y[i], y[j], position[i], position[j], ideal);
                if w == 0.0 {
                    continue;
                }
                let d = alpha * (f[i] - f[j]);
                value += w * softplus(-d) / LN_2;
                let g = w * alpha * sigmoid(-d) / LN_2;
                grad[i] -= g;
                grad[j] += g;
            }
        }
    }
    (value, grad)
}

/// Smooth ranks `1/2 + sum_j sigmoid((f_j - f_i) / T)`: the highest
/// prediction gets the smallest rank, and as `T -> 0` ranks approach the
/// hard 1-based ranks.
pub fn approx_ranks(f: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    Ok(f.iter()
        .map(|fi| 0.5 + f.iter().map(|fj| sigmoid((fj - fi) / temperature)).sum::<f64>())
        .collect())
}

fn approx_ndcg(y: &[f64], f: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let m = y.len();
    let ideal = ideal_dcg(y);
    let mut grad = vec![0.0; m];
    if ideal <= 0.0 {
        return (0.0, grad);
    }
    let ranks = approx_ranks(f, temperature).expect("temperature validated");
    let gains: Vec<f64> = y.iter().map(|&v| gain(v)).collect();
    let value = -gains.iter().zip(&ranks).map(|(g, r)| g / (1.0 + r).log2()).sum::<f64>() / ideal;
    // dl/dr_i
    let dr: Vec<f64> = gains
        .iter()
        .zip(&ranks)
        .map(|(g, r)| {
            let l = (1.0 + r).log2();
            g / (ideal * LN_2 * (1.0 + r) * l * l)
        })
        .collect();
    // dr_i/df_k = s'_{ik}/T for k != i and -sum_j s'_{ij}/T for k == i,
    // with s' symmetric in (i, k).
    for k in 0..m {
        for i in 0..m {
            if i == k {
                continue;
            }
            let s = sigmoid((f[k] - f[i]) / temperature);
            grad[k] += s * (1.0 - s) * (dr[i] - dr[k]) / temperature;
        }
    }
    (value, grad)
}
