//! Surrogate evaluation metrics.
//!
//! AUPCC (area under the precision-coverage curve) compares the top-k sets
//! of predictions and ground truth for every k. Precision@k is
//! `|top_k(pred) ∩ top_k(truth)| / k`, coverage@k is `k / N`, and the area
//! is the trapezoidal sum over consecutive k. Top-k sets break ties by
//! ascending index.

use std::cmp::Ordering;

use crate::losses::{min_max, ndcg, order_desc};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    InDistribution,
    OutOfDistribution,
}

/// Predictions paired with ground truth over one dataset.
#[derive(Debug, Clone)]
pub struct EvalSet {
    predictions: Vec<f64>,
    truths: Vec<f64>,
    pub source: Source,
}

impl EvalSet {
    pub fn new(predictions: Vec<f64>, truths: Vec<f64>, source: Source) -> Result<Self> {
        if predictions.len() != truths.len() {
            return Err(Error::DimensionMismatch {
                expected: truths.len(),
                actual: predictions.len(),
            });
        }
        if truths.len() < 2 {
            return Err(Error::invalid("evaluation needs at least two points"));
        }
        if !predictions.iter().chain(&truths).all(|v| v.is_finite()) {
            return Err(Error::invalid("evaluation values must be finite"));
        }
        Ok(EvalSet {
            predictions,
            truths,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.truths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truths.is_empty()
    }

    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }

    pub fn truths(&self) -> &[f64] {
        &self.truths
    }
}

/// Indices of the `k` largest values, ties broken by ascending index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order = order_desc(values);
    order.truncate(k);
    order
}

pub fn precision_at_k(eval: &EvalSet, k: usize) -> Result<f64> {
    let n = eval.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} outside 1..={n}")));
    }
    Ok(precision_curve(eval)[k - 1])
}

/// Precision@k for every `k = 1..=N`, in one pass.
pub fn precision_curve(eval: &EvalSet) -> Vec<f64> {
    let n = eval.len();
    let by_pred = order_desc(&eval.predictions);
    let by_truth = order_desc(&eval.truths);
    let mut in_pred = vec![false; n];
    let mut in_truth = vec![false; n];
    let mut overlap = 0usize;
    let mut curve = Vec::with_capacity(n);
    for k in 0..n {
        let a = by_pred[k];
        in_pred[a] = true;
        if in_truth[a] {
            overlap += 1;
        }
        let b = by_truth[k];
        in_truth[b] = true;
        if in_pred[b] {
            overlap += 1;
        }
        curve.push(overlap as f64 / (k + 1) as f64);
    }
    curve
}

/// Area under the precision-coverage curve, in `[0, (N-1)/N]`.
pub fn aupcc(eval: &EvalSet) -> Result<f64> {
    let n = eval.len();
    if n < 2 {
        return Err(Error::invalid("AUPCC needs at least two points"));
    }
    let curve = precision_curve(eval);
    // sum of (P@(k+1) + P@k) over k, scaled by the 1/N width and the 1/2 once
    let total: f64 = curve.windows(2).map(|p| p[1] + p[0]).sum();
    Ok(total / (2.0 * n as f64))
}

/// 1-based ascending ranks; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::invalid("Spearman needs at least two points"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    if has_ties(&ra) || has_ties(&rb) {
        return pearson(&ra, &rb);
    }
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

fn has_ties(ranks: &[f64]) -> bool {
    ranks.iter().any(|r| r.fract() != 0.0) || {
        let mut seen = vec![false; ranks.len() + 1];
        ranks.iter().any(|&r| std::mem::replace(&mut seen[r as usize], true))
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("a ranked vector is constant".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn mse(eval: &EvalSet) -> f64 {
    eval.predictions
        .iter()
        .zip(&eval.truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / eval.len() as f64
}

/// NDCG of the prediction ordering over the whole set, with truths min-max
/// scaled to `[0, 1]` before taking gains.
pub fn ndcg_score(eval: &EvalSet) -> f64 {
    let labels = min_max(&eval.truths);
    let ranked: Vec<f64> = order_desc(&eval.predictions).into_iter().map(|i| labels[i]).collect();
    ndcg(&ranked)
}

/// Every metric over one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub n: usize,
    pub mse: f64,
    pub aupcc: f64,
    pub spearman: f64,
    pub ndcg: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "n,mse,aupcc,spearman,ndcg";

    pub fn to_csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.n, self.mse, self.aupcc, self.spearman, self.ndcg)
    }
}

pub fn evaluate(eval: &EvalSet) -> Result<MetricReport> {
    Ok(MetricReport {
        n: eval.len(),
        mse: mse(eval),
        aupcc: aupcc(eval)?,
        spearman: spearman(eval.predictions(), eval.truths())?,
        ndcg: ndcg_score(eval),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(p: Vec<f64>, t: Vec<f64>) -> EvalSet {
        EvalSet::new(p, t, Source::OutOfDistribution).unwrap()
    }

    /// Recomputes both top-k sets from scratch for a single k.
    fn brute_precision(pred: &[f64], truth: &[f64], k: usize) -> f64 {
        let top = |v: &[f64]| -> HashSet<usize> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            // selection by repeated argmax, lowest index wins ties
            let mut chosen = HashSet::new();
            for _ in 0..k {
                let best = idx
                    .iter()
                    .copied()
                    .filter(|i| !chosen.contains(i))
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if v[b] >= v[i] => Some(b),
                        _ => Some(i),
                    })
                    .unwrap();
                chosen.insert(best);
            }
            idx.clear();
            chosen
        };
        top(pred).intersection(&top(truth)).count() as f64 / k as f64
    }

    #[test]
    fn perfect_ranking() {
        let e = set(vec![1.0, 2.0, 3.0, 4.0], vec![10.0, 20.0, 30.0, 40.0]);
        for k in 1..=4 {
            assert_eq!(precision_at_k(&e, k).unwrap(), 1.0);
        }
        assert_eq!(aupcc(&e).unwrap(), 0.75);
    }

    #[test]
    fn reversed_pair() {
        let e = set(vec![2.0, 1.0], vec![1.0, 2.0]);
        assert_eq!(precision_at_k(&e, 1).unwrap(), 0.0);
        assert_eq!(precision_at_k(&e, 2).unwrap(), 1.0);
        assert_eq!(aupcc(&e).unwrap(), 0.25);
    }

    #[test]
    fn k_out_of_range() {
        let e = set(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]);
        assert!(precision_at_k(&e, 0).is_err());
        assert!(precision_at_k(&e, 4).is_err());
    }

    #[test]
    fn eval_set_needs_two_points() {
        assert!(EvalSet::new(vec![1.0], vec![1.0], Source::InDistribution).is_err());
        assert!(EvalSet::new(vec![1.0, 2.0], vec![1.0], Source::InDistribution).is_err());
    }

    #[test]
    fn precision_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..40 {
            let n = rng.random_range(2..=60);
            // coarse values so ties actually occur
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
            let e = set(p.clone(), t.clone());
            for k in 1..=n {
                assert_eq!(precision_at_k(&e, k).unwrap(), brute_precision(&p, &t, k));
            }
            assert_eq!(precision_at_k(&e, n).unwrap(), 1.0);
        }
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[2.0, 4.0, 9.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn average_ranks_handle_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn evaluate_examples() {
        let truths = vec![0.5, -1.0, 2.0, 0.1, 3.3];
        let r = evaluate(&set(truths.clone(), truths.clone())).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.aupcc, 4.0 / 5.0);
        assert_eq!(r.spearman, 1.0);
        assert!((r.ndcg - 1.0).abs() < 1e-15);
        assert_eq!(r.n, 5);

        let shifted: Vec<f64> = truths.iter().map(|t| t + 2.0).collect();
        let r = evaluate(&set(shifted, truths.clone())).unwrap();
        assert!((r.mse - 4.0).abs() < 1e-12);
        assert_eq!(r.spearman, 1.0);
        assert_eq!(r.aupcc, 4.0 / 5.0);

        let negated: Vec<f64> = truths.iter().map(|t| -t).collect();
        assert_eq!(evaluate(&set(negated, truths)).unwrap().spearman, -1.0);
    }

    #[test]
    fn csv_row_order() {
        let r = MetricReport {
            n: 3,
            mse: 0.5,
            aupcc: 0.25,
            spearman: -1.0,
            ndcg: 1.0,
        };
        assert_eq!(MetricReport::CSV_HEADER, "n,mse,aupcc,spearman,ndcg");
        assert_eq!(r.to_csv_row(), "3,0.5,0.25,-1,1");
    }

    #[test]
    fn identity_maximizes_aupcc() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
        let best = aupcc(&set(truth.clone(), truth.clone())).unwrap();
        assert_eq!(best, 29.0 / 30.0);
        let mut perm = truth.clone();
        for _ in 0..1000 {
            perm.shuffle(&mut rng);
            assert!(aupcc(&set(perm.clone(), truth.clone())).unwrap() <= best);
        }
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(seed in any::<u64>(), n in 2usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            // strictly increasing, far from affine
            let h: Vec<f64> = p.iter().map(|v| v.exp() * 3.0 + v.powi(3)).collect();
            let a = evaluate(&set(p.clone(), t.clone())).unwrap();
            let b = evaluate(&set(h, t)).unwrap();
            prop_assert_eq!(a.aupcc, b.aupcc);
            prop_assert_eq!(a.spearman, b.spearman);
            prop_assert!(a.mse != b.mse);
        }
    }
}
