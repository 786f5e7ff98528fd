//! Synthetic tasks with exact oracles, the heavy-tailed linear experiment,
//! normalized candidate scoring and the LTR generalization-bound calculator.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::data::{ood_split_indices, write_rows, OfflineDataset};
use crate::diffnet::{AdamConfig, AdamState};
use crate::losses::{LossKind, RankingLoss};
use crate::{par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    /// `x^2` on `[0, 3]`; one dimension only.
    Quadratic1d,
    /// `-|x|^2` on `[-5, 5]^d`.
    Sphere,
    /// Negated Rastrigin function on `[-5.12, 5.12]^d`.
    RastriginLike,
    /// `-(x - c)^T A (x - c)` with a seeded positive definite `A` and center `c`.
    RandomQuadratic,
}

impl OracleKind {
    pub const ALL: [OracleKind; 4] = [
        OracleKind::Quadratic1d,
        OracleKind::Sphere,
        OracleKind::RastriginLike,
        OracleKind::RandomQuadratic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OracleKind::Quadratic1d => "quadratic-1d",
            OracleKind::Sphere => "sphere",
            OracleKind::RastriginLike => "rastrigin",
            OracleKind::RandomQuadratic => "random-quadratic",
        }
    }

    /// Default search box `(lower, upper)` applied to every coordinate.
    pub fn default_box(self) -> (f64, f64) {
        match self {
            OracleKind::Quadratic1d => (0.0, 3.0),
            OracleKind::Sphere => (-5.0, 5.0),
            OracleKind::RastriginLike => (-5.12, 5.12),
            OracleKind::RandomQuadratic => (-3.0, 3.0),
        }
    }
}

impl fmt::Display for OracleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OracleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OracleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task {s:?}")))
    }
}

/// Heavy-tailed corruption: with probability `p` a point gets `alpha * |t|`
/// added (lower half of the box) or subtracted (upper half), `t` drawn from
/// a Student-t with `nu` degrees of freedom. In more than one dimension the
/// sign is that of `t` itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeavyTailNoiseSpec {
    pub nu: f64,
    pub alpha: f64,
    pub p: f64,
}

impl Default for HeavyTailNoiseSpec {
    fn default() -> Self {
        HeavyTailNoiseSpec {
            nu: 2.0,
            alpha: 15.0,
            p: 0.2,
        }
    }
}

impl HeavyTailNoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.alpha > 0.0 && (0.0..=1.0).contains(&self.p)) {
            return Err(Error::invalid(format!(
                "heavy-tail noise needs nu > 0, alpha > 0, p in [0, 1]; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Draws the corruption flag and magnitude for one point. Both random
/// numbers are always consumed so the stream does not depend on `p`.
fn draw_noise(rng: &mut ChaCha8Rng, spec: &HeavyTailNoiseSpec) -> (bool, f64) {
    let u: f64 = rng.random();
    let z: f64 = StandardNormal.sample(rng);
    let chi = ChiSquared::new(spec.nu).expect("validated nu").sample(rng);
    let t = z / (chi / spec.nu).sqrt();
    (u < spec.p, spec.alpha * t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSpec {
    None,
    HeavyTail(HeavyTailNoiseSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub oracle: OracleKind,
    pub dim: usize,
    pub lower: f64,
    pub upper: f64,
    pub samples: usize,
    /// Bottom percentile (by true score) kept as offline training data.
    pub percentile: f64,
    pub noise: NoiseSpec,
    /// Seed for the random quadratic form; ignored by the other oracles.
    pub form_seed: u64,
}

impl SyntheticTask {
    pub fn new(oracle: OracleKind, dim: usize) -> Self {
        let (lower, upper) = oracle.default_box();
        SyntheticTask {
            oracle,
            dim,
            lower,
            upper,
            samples: 1000,
            percentile: 50.0,
            noise: NoiseSpec::None,
            form_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("task.dim must be positive".into()));
        }
        if self.oracle == OracleKind::Quadratic1d && self.dim != 1 {
            return Err(Error::Config("quadratic-1d is one-dimensional".into()));
        }
        if !(self.lower < self.upper && self.lower.is_finite() && self.upper.is_finite()) {
            return Err(Error::Config("task box needs lower < upper".into()));
        }
        if let NoiseSpec::HeavyTail(spec) = self.noise {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn build_oracle(&self) -> Result<Oracle> {
        self.validate()?;
        Oracle::new(self.oracle, self.dim, self.form_seed)
    }
}

/// Exact objective with a call counter.
#[derive(Debug)]
pub struct Oracle {
    kind: OracleKind,
    dim: usize,
    form: Option<(Array2<f64>, Vec<f64>)>,
    calls: AtomicU64,
}

impl Oracle {
    pub fn new(kind: OracleKind, dim: usize, form_seed: u64) -> Result<Self> {
        if dim == 0 || (kind == OracleKind::Quadratic1d && dim != 1) {
            return Err(Error::invalid(format!("{kind} does not support dimension {dim}")));
        }
        let form = (kind == OracleKind::RandomQuadratic).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(form_seed);
            let g = Array2::from_shape_simple_fn((dim, dim), || StandardNormal.sample(&mut rng));
            let a = g.t().dot(&g) / dim as f64 + Array2::<f64>::eye(dim) * 0.5;
            let c = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            (a, c)
        });
        Ok(Oracle {
            kind,
            dim,
            form,
            calls: AtomicU64::new(0),
        })
    }

    pub fn kind(&self) -> OracleKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Evaluates the objective and counts the call.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(self.value(x))
    }

    /// Number of [`Oracle::eval`] calls so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Uncounted evaluation, used only to label freshly sampled data.
    fn value(&self, x: &[f64]) -> f64 {
        match self.kind {
            OracleKind::Quadratic1d => x[0] * x[0],
            OracleKind::Sphere => -x.iter().map(|v| v * v).sum::<f64>(),
            OracleKind::RastriginLike => -x
                .iter()
                .map(|v| v * v - 10.0 * (2.0 * std::f64::consts::PI * v).cos() + 10.0)
                .sum::<f64>(),
            OracleKind::RandomQuadratic => {
                let (a, c) = self.form.as_ref().expect("form built in new");
                let r: Vec<f64> = x.iter().zip(c).map(|(x, c)| x - c).collect();
                let mut q = 0.0;
                for i in 0..self.dim {
                    for j in 0..self.dim {
                        q += r[i] * a[[i, j]] * r[j];
                    }
                }
                -q
            }
        }
    }
}

/// Raw (unnormalized) data for one synthetic task instance.
#[derive(Debug)]
pub struct TaskData {
    /// Bottom-percentile points with observed (possibly noisy) scores.
    pub train: OfflineDataset,
    /// Remaining points with their true scores.
    pub ood: OfflineDataset,
    /// True scores of the training points, row-aligned with `train`.
    pub train_true: Vec<f64>,
    /// Lowest and highest true score over all sampled points.
    pub y_min: f64,
    pub y_max: f64,
    /// Fraction of all sampled points that were corrupted.
    pub corrupted_fraction: f64,
    pub oracle: Oracle,
}

/// Samples `task.samples` designs uniformly in the box, labels them with
/// the oracle, splits by true score and adds noise to the training side.
pub fn generate_task_dataset(task: &SyntheticTask, seed: u64) -> Result<TaskData> {
    let oracle = task.build_oracle()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = task.samples;
    let d = task.dim;
    let mid = 0.5 * (task.lower + task.upper);
    let mut designs = Array2::zeros((n, d));
    let mut truth = Vec::with_capacity(n);
    let mut noisy = Vec::with_capacity(n);
    let mut corrupted = 0usize;
    for i in 0..n {
        for j in 0..d {
            designs[[i, j]] = rng.random_range(task.lower..task.upper);
        }
        let x = designs.row(i).to_vec();
        let y = oracle.value(&x);
        truth.push(y);
        let noise = match task.noise {
            NoiseSpec::None => 0.0,
            NoiseSpec::HeavyTail(spec) => {
                let (hit, t) = draw_noise(&mut rng, &spec);
                corrupted += hit as usize;
                match (hit, d) {
                    (false, _) => 0.0,
                    (true, 1) if x[0] <= mid => t.abs(),
                    (true, 1) => -t.abs(),
                    (true, _) => t,
                }
            }
        };
        noisy.push(y + noise);
    }
    let (low, high) = ood_split_indices(&truth, task.percentile)?;
    let pick = |idx: &[usize], ys: &[f64]| -> Result<OfflineDataset> {
        OfflineDataset::new(
            designs.select(ndarray::Axis(0), idx),
            idx.iter().map(|&i| ys[i]).collect(),
        )
    };
    let y_min = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(TaskData {
        train: pick(&low, &noisy)?,
        ood: pick(&high, &truth)?,
        train_true: low.iter().map(|&i| truth[i]).collect(),
        y_min,
        y_max,
        corrupted_fraction: corrupted as f64 / n as f64,
        oracle,
    })
}

/// Normalized oracle scores of a candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScores {
    pub normalized: Vec<f64>,
    pub p100: f64,
    pub p50: f64,
}

/// Scores candidates with the oracle as `(y - y_min) / (y_max - y_min)` and
/// reports the 100th and 50th percentiles.
pub fn score_candidates(oracle: &Oracle, candidates: &[Vec<f64>], y_min: f64, y_max: f64) -> Result<CandidateScores> {
    if !(y_max > y_min) {
        return Err(Error::invalid(format!("y_max {y_max} must exceed y_min {y_min}")));
    }
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to score"));
    }
    let normalized = candidates
        .iter()
        .map(|x| oracle.eval(x).map(|y| (y - y_min) / (y_max - y_min)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(CandidateScores {
        p100: percentile(&normalized, 100.0),
        p50: percentile(&normalized, 50.0),
        normalized,
    })
}

/// Percentile with linear interpolation between order statistics
/// (position `q / 100 * (n - 1)` in the sorted values).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    percentile(values, 50.0)
}

/// `n` points with `x ~ U[0, 3]` and `y = x^2` plus heavy-tailed noise.
pub fn heavy_tail_points(n: usize, spec: &HeavyTailNoiseSpec, seed: u64) -> Result<Vec<(f64, f64)>> {
    let mut task = SyntheticTask::new(OracleKind::Quadratic1d, 1);
    task.samples = n;
    task.noise = NoiseSpec::HeavyTail(*spec);
    task.validate()?;
    let oracle = task.build_oracle()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let x = rng.random_range(0.0..3.0);
            let (hit, t) = draw_noise(&mut rng, spec);
            let noise = match hit {
                false => 0.0,
                true if x <= 1.5 => t.abs(),
                true => -t.abs(),
            };
            (x, oracle.value(&[x]) + noise)
        })
        .collect())
}

/// Least-squares line `y = w x + b` through `points`.
pub fn fit_least_squares(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::Singular("need at least two points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Singular("all x values are equal".into()));
    }
    let w = sxy / sxx;
    Ok((w, my - w * mx))
}

/// Fits `y = w x + b` by minimizing the RankCosine loss between the
/// predictions and labels of all points with Adam (no weight decay),
/// starting from `w, b ~ U(-1, 1)`.
pub fn fit_rankcosine(points: &[(f64, f64)], lr: f64, epochs: usize, seed: u64) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::invalid("need at least two points"));
    }
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    if y.iter().all(|&v| v == y[0]) {
        return Err(Error::invalid("need at least two distinct labels"));
    }
    let loss = RankingLoss::new(LossKind::RankCosine);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let mut adam = AdamState::new(
        AdamConfig {
            lr,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
        2,
    );
    for epoch in 0..epochs {
        let f: Vec<f64> = points.iter().map(|p| theta[0] * p.0 + theta[1]).collect();
        let (value, g) = loss
            .value_and_grad(&y, &f)
            .map_err(|_| Error::NonFiniteTraining { epoch, list: 0 })?;
        if !value.is_finite() {
            return Err(Error::NonFiniteTraining { epoch, list: 0 });
        }
        let gw: f64 = g.iter().zip(points).map(|(g, p)| g * p.0).sum();
        let gb: f64 = g.iter().sum();
        adam.step(&mut theta, &[gw, gb])
            .map_err(|_| Error::NonFiniteTraining { epoch, list: 0 })?;
    }
    Ok((theta[0], theta[1]))
}

/// Settings of the heavy-tailed slope sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub points: usize,
    pub seeds: Vec<u64>,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            points: 100,
            seeds: (0..10).collect(),
            lr: 1e-3,
            epochs: 1000,
        }
    }
}

/// Median slopes over seeds for one noise setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub parameter: f64,
    pub w_mse: f64,
    pub w_rankcosine: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "parameter,w_MSE,w_RankCosine";
}

/// Fits both lines for every `(parameter, spec)` cell and seed, reporting
/// the median slope per cell. Seed `s` drives both the data and the
/// RankCosine initialization, so cells share random numbers.
pub fn sweep_heavy_tail(cells: &[(f64, HeavyTailNoiseSpec)], cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if cfg.seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one seed"));
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let fits = par::map(&jobs, |&(c, seed)| -> Result<(f64, f64)> {
        let points = heavy_tail_points(cfg.points, &cells[c].1, seed)?;
        let (w_mse, _) = fit_least_squares(&points)?;
        let (w_rc, _) = fit_rankcosine(&points, cfg.lr, cfg.epochs, seed)?;
        Ok((w_mse, w_rc))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let per_cell = cfg.seeds.len();
    Ok(cells
        .iter()
        .zip(fits.chunks(per_cell))
        .map(|(&(parameter, _), f)| SweepRow {
            parameter,
            w_mse: median(&f.iter().map(|v| v.0).collect::<Vec<_>>()),
            w_rankcosine: median(&f.iter().map(|v| v.1).collect::<Vec<_>>()),
        })
        .collect())
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let header: Vec<String> = SweepRow::CSV_HEADER.split(',').map(String::from).collect();
    write_rows(
        path.as_ref(),
        &header,
        rows.iter().map(|r| vec![r.parameter, r.w_mse, r.w_rankcosine]),
    )
}

/// Increasing positive transformation applied to scores in the bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Linear { a: f64, b: f64 },
    Exponential { a: f64 },
    Sigmoid { a: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundAlgorithm {
    RankCosine,
    ListNet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub phi: Transform,
    /// Weight-norm bound `B`.
    pub weight_norm: f64,
    /// Design-norm bound `M`.
    pub design_norm: f64,
    /// List length `m`.
    pub list_len: u32,
    /// Number of training lists `n`.
    pub n: f64,
    pub delta: f64,
    pub algorithm: BoundAlgorithm,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let bm = self.weight_norm * self.design_norm;
        let a = match self.phi {
            Transform::Linear { a, .. } | Transform::Exponential { a } | Transform::Sigmoid { a } => a,
        };
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::invalid("transformation slope a must be positive"));
        }
        if let Transform::Linear { a, b } = self.phi {
            if !(b > a * bm) {
                return Err(Error::invalid("linear transformation needs b > aBM"));
            }
        }
        if !(self.weight_norm > 0.0 && self.design_norm > 0.0 && bm.is_finite()) {
            return Err(Error::invalid("B and M must be positive"));
        }
        if self.list_len == 0 {
            return Err(Error::invalid("list length must be positive"));
        }
        if !(self.n >= 1.0 && self.n.is_finite()) {
            return Err(Error::invalid("n must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid("delta must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Smoothness factor `N(phi)`.
    pub fn n_phi(&self) -> f64 {
        let bm = self.weight_norm * self.design_norm;
        match self.phi {
            Transform::Linear { a, .. } => a,
            Transform::Exponential { a } => a * (a * bm).exp(),
            Transform::Sigmoid { a } => a * (1.0 + (a * bm).exp()) / (1.0 + (-a * bm).exp()).powi(2),
        }
    }

    /// Algorithm-dependent factor `C_A(phi)`.
    pub fn c_algorithm(&self) -> f64 {
        let bm = self.weight_norm * self.design_norm;
        let m = f64::from(self.list_len);
        let ln_m = m.ln();
        let fact = factorial(self.list_len);
        match (self.algorithm, self.phi) {
            (BoundAlgorithm::RankCosine, Transform::Linear { a, b }) => m.sqrt() / (2.0 * (b - a * bm)),
            (BoundAlgorithm::RankCosine, Transform::Exponential { a }) => m.sqrt() * (a * bm).exp() / 2.0,
            (BoundAlgorithm::RankCosine, Transform::Sigmoid { a }) => m.sqrt() * (1.0 + (a * bm).exp()) / 2.0,
            (BoundAlgorithm::ListNet, Transform::Linear { a, b }) => {
                2.0 * fact / ((b - a * bm) * (ln_m + ((b + a * bm) / (b - a * bm)).ln()))
            }
            (BoundAlgorithm::ListNet, Transform::Exponential { a }) => {
                2.0 * fact * (a * bm).exp() / (ln_m + 2.0 * a * bm)
            }
            (BoundAlgorithm::ListNet, Transform::Sigmoid { a }) => {
                2.0 * fact * (1.0 + (a * bm).exp()) / (ln_m + a * bm)
            }
        }
    }
}

/// `m!` in floating point; infinite beyond 170.
fn factorial(m: u32) -> f64 {
    (2..=m).map(f64::from).product()
}

/// Generalization-error bound `4BM C N / sqrt(n) + sqrt(2 ln(2/delta) / n)`.
pub fn generalization_bound(inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    let bm = inp.weight_norm * inp.design_norm;
    Ok(4.0 * bm * inp.c_algorithm() * inp.n_phi() / inp.n.sqrt() + (2.0 * (2.0 / inp.delta).ln() / inp.n).sqrt())
}
