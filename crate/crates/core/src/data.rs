//! Offline datasets: CSV IO, z-scoring, train/validation splits, OOD splits
//! and the list-sampling augmentation used for ranking losses.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Standard deviations below this are treated as zero and clamped to 1.
pub const STD_FLOOR: f64 = 1e-12;

/// Affine z-score statistics for designs (per dimension) and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl NormStats {
    /// Population mean and std of every column, fitted on `data`.
    pub fn fit(data: &OfflineDataset) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::invalid("normalization needs at least two rows"));
        }
        let (x_mean, x_std) = data
            .designs
            .axis_iter(Axis(1))
            .map(|col| mean_std(col.iter().copied()))
            .unzip();
        let (y_mean, y_std) = mean_std(data.scores.iter().copied());
        Ok(NormStats {
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    pub fn transform_design(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn inverse_design(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn transform_score(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn inverse_score(&self, z: f64) -> f64 {
        z * self.y_std + self.y_mean
    }

    /// Applies these statistics to a raw dataset.
    pub fn apply(&self, raw: &OfflineDataset) -> Result<OfflineDataset> {
        if raw.stats.is_some() {
            return Err(Error::invalid("dataset is already normalized"));
        }
        if raw.dim() != self.x_mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.x_mean.len(),
                actual: raw.dim(),
            });
        }
        let mut designs = raw.designs.clone();
        for (mut col, (m, s)) in designs.axis_iter_mut(Axis(1)).zip(self.x_mean.iter().zip(&self.x_std)) {
            col.mapv_inplace(|v| (v - m) / s);
        }
        let scores = raw.scores.iter().map(|&y| self.transform_score(y)).collect();
        Ok(OfflineDataset {
            designs,
            scores,
            stats: Some(self.clone()),
        })
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std < STD_FLOOR { 1.0 } else { std })
}

/// `N` designs with their scores, plus the statistics used to normalize
/// them (if any).
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    designs: Array2<f64>,
    scores: Vec<f64>,
    stats: Option<NormStats>,
}

impl OfflineDataset {
    pub fn new(designs: Array2<f64>, scores: Vec<f64>) -> Result<Self> {
        if designs.nrows() != scores.len() {
            return Err(Error::DimensionMismatch {
                expected: designs.nrows(),
                actual: scores.len(),
            });
        }
        if designs.ncols() == 0 {
            return Err(Error::invalid("designs need at least one dimension"));
        }
        if !designs.iter().chain(&scores).all(|v| v.is_finite()) {
            return Err(Error::invalid("dataset values must be finite"));
        }
        Ok(OfflineDataset {
            designs,
            scores,
            stats: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], scores: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: bad.len(),
            });
        }
        let flat = rows.iter().flatten().copied().collect();
        let designs = Array2::from_shape_vec((rows.len(), d), flat).expect("checked shape");
        Self::new(designs, scores)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.designs.ncols()
    }

    pub fn designs(&self) -> ArrayView2<'_, f64> {
        self.designs.view()
    }

    pub fn design(&self, i: usize) -> ArrayView1<'_, f64> {
        self.designs.row(i)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn stats(&self) -> Option<&NormStats> {
        self.stats.as_ref()
    }

    pub fn is_normalized(&self) -> bool {
        self.stats.is_some()
    }

    /// Rows at `indices`, in that order, keeping the same statistics.
    pub fn select(&self, indices: &[usize]) -> OfflineDataset {
        OfflineDataset {
            designs: self.designs.select(Axis(0), indices),
            scores: indices.iter().map(|&i| self.scores[i]).collect(),
            stats: self.stats.clone(),
        }
    }

    /// Same designs, different scores.
    pub fn with_scores(&self, scores: Vec<f64>) -> Result<OfflineDataset> {
        if scores.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: scores.len(),
            });
        }
        Ok(OfflineDataset {
            designs: self.designs.clone(),
            scores,
            stats: self.stats.clone(),
        })
    }

    /// Fits z-score statistics on this dataset and applies them.
    pub fn zscore_fit_transform(&self) -> Result<OfflineDataset> {
        NormStats::fit(self)?.apply(self)
    }

    /// Undoes the normalization, returning raw-scale data.
    pub fn inverse_transform(&self) -> Result<OfflineDataset> {
        let stats = self
            .stats
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset is not normalized"))?;
        let mut designs = self.designs.clone();
        for (mut col, (m, s)) in designs
            .axis_iter_mut(Axis(1))
            .zip(stats.x_mean.iter().zip(&stats.x_std))
        {
            col.mapv_inplace(|v| v * s + m);
        }
        let scores = self.scores.iter().map(|&z| stats.inverse_score(z)).collect();
        Ok(OfflineDataset {
            designs,
            scores,
            stats: None,
        })
    }

    /// Seeded random split of a raw dataset into train and validation
    /// parts of sizes `round(N * ratio)` and the rest. Both parts are
    /// normalized with statistics fitted on the training part.
    pub fn split(&self, ratio: f64, seed: u64) -> Result<(OfflineDataset, OfflineDataset)> {
        let (train_idx, val_idx) = split_indices(self.len(), ratio, seed)?;
        let train_raw = self.select(&train_idx);
        let val_raw = self.select(&val_idx);
        let stats = NormStats::fit(&train_raw)?;
        Ok((stats.apply(&train_raw)?, stats.apply(&val_raw)?))
    }

    /// Bottom `percentile`% of rows by score (training side) and the rest.
    /// Rows are ordered by ascending score, ties by ascending index, and
    /// the first `round(N * percentile / 100)` go to training.
    pub fn ood_split(&self, percentile: f64) -> Result<(OfflineDataset, OfflineDataset)> {
        let (low, high) = ood_split_indices(&self.scores, percentile)?;
        Ok((self.select(&low), self.select(&high)))
    }

    /// Reads a CSV with header `x0,...,x{d-1},y`.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        let d = header.len().saturating_sub(1);
        let expected: Vec<String> = (0..d).map(|j| format!("x{j}")).chain(["y".into()]).collect();
        if d == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Format {
                path: path.into(),
                msg: format!("expected header {}", expected.join(",")),
            });
        }
        let mut flat = Vec::new();
        let mut scores = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::csv(path, e))?;
            let values = parse_record(&record).map_err(|msg| Error::Format {
                path: path.into(),
                msg: format!("row {}: {msg}", line + 1),
            })?;
            flat.extend_from_slice(&values[..d]);
            scores.push(values[d]);
        }
        let designs = Array2::from_shape_vec((scores.len(), d), flat).expect("row lengths checked");
        Self::new(designs, scores)
    }

    /// Writes the dataset as CSV with header `x0,...,x{d-1},y`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).chain(["y".into()]).collect();
        write_rows(
            path,
            &header,
            self.designs
                .rows()
                .into_iter()
                .zip(&self.scores)
                .map(|(row, &y)| row.iter().copied().chain([y]).collect()),
        )
    }
}

fn parse_record(record: &csv::StringRecord) -> std::result::Result<Vec<f64>, String> {
    record
        .iter()
        .map(|field| {
            field
                .trim()
                .parse::<f64>()
                .map_err(|_| format!("not a number: {field:?}"))
        })
        .collect()
}

/// Writes numeric rows as CSV under `header`.
pub(crate) fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = move || -> std::io::Result<()> {
        writeln!(out, "{}", header.join(","))?;
        for row in rows {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Seeded partition of `0..n` into `round(n * ratio)` and `n - round(n * ratio)` indices.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n_train = (n as f64 * ratio).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::invalid(format!(
            "{n} rows cannot be split at ratio {ratio} with both parts nonempty"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = perm.split_off(n_train);
    Ok((perm, val))
}

/// Indices of the bottom `percentile`% by score and of the rest.
pub fn ood_split_indices(scores: &[f64], percentile: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::invalid(format!("percentile {percentile} outside (0, 100)")));
    }
    let n = scores.len();
    let n_low = (n as f64 * percentile / 100.0).round() as usize;
    if n_low == 0 || n_low >= n {
        return Err(Error::invalid(format!(
            "percentile {percentile} of {n} rows leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps ascending index among equal scores
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let high = order.split_off(n_low);
    Ok((order, high))
}

/// `n` lists of `m` row indices into a dataset, with the data they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTrainSet {
    designs: Array2<f64>,
    scores: Vec<f64>,
    lists: Vec<Vec<usize>>,
    m: usize,
    seed: u64,
}

impl RankTrainSet {
    /// Builds a set from explicit index lists. All lists must share one
    /// nonzero length and index into `dataset`.
    pub fn from_lists(dataset: &OfflineDataset, lists: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        let m = lists.first().map_or(0, Vec::len);
        if lists.is_empty() || m == 0 {
            return Err(Error::invalid("need at least one nonempty list"));
        }
        if let Some(bad) = lists.iter().find(|l| l.len() != m) {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: bad.len(),
            });
        }
        if lists.iter().flatten().any(|&i| i >= dataset.len()) {
            return Err(Error::invalid("list index outside the dataset"));
        }
        Ok(RankTrainSet {
            designs: dataset.designs.clone(),
            scores: dataset.scores.clone(),
            lists,
            m,
            seed,
        })
    }

    pub fn num_lists(&self) -> usize {
        self.lists.len()
    }

    pub fn list_len(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.designs.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    pub fn indices(&self, list: usize) -> &[usize] {
        &self.lists[list]
    }

    /// `m x d` design matrix of one list.
    pub fn list_designs(&self, list: usize) -> Array2<f64> {
        self.designs.select(Axis(0), &self.lists[list])
    }

    pub fn list_scores(&self, list: usize) -> Vec<f64> {
        self.lists[list].iter().map(|&i| self.scores[i]).collect()
    }

    /// Designs of several lists stacked row-wise, list after list.
    pub fn stacked_designs(&self, lists: &[usize]) -> Array2<f64> {
        let rows: Vec<usize> = lists.iter().flat_map(|&l| self.lists[l].iter().copied()).collect();
        self.designs.select(Axis(0), &rows)
    }
}

/// Samples `n` lists of `m` rows each. Rows within a list are distinct when
/// `m <= N`; otherwise they are drawn with replacement.
pub fn augment(dataset: &OfflineDataset, n: usize, m: usize, seed: u64) -> Result<RankTrainSet> {
    if m < 2 {
        return Err(Error::invalid(format!("list length {m} < 2")));
    }
    if n == 0 {
        return Err(Error::invalid("list count must be positive"));
    }
    let size = dataset.len();
    if size == 0 {
        return Err(Error::invalid("cannot sample lists from an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lists = (0..n)
        .map(|_| {
            if m <= size {
                index::sample(&mut rng, size, m).into_vec()
            } else {
                (0..m).map(|_| rng.random_range(0..size)).collect()
            }
        })
        .collect();
    RankTrainSet::from_lists(dataset, lists, seed)
}
