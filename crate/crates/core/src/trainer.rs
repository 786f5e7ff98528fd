//! Surrogate training over ranked lists.
//!
//! Each step stacks a minibatch of lists into one forward pass, evaluates
//! the ranking loss list by list, averages the per-list gradients and
//! takes an Adam step. After every epoch the mean loss over the validation
//! lists is recorded, and the parameters of the best epoch are returned.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{write_rows, OfflineDataset, RankTrainSet};
use crate::diffnet::{AdamConfig, AdamState, DenseNet};
use crate::losses::{LossKind, RankingLoss};
use crate::{Error, Result};

/// Rows per forward pass when predicting over a whole dataset.
const PREDICT_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: RankingLoss,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Lists per optimizer step.
    pub batch_lists: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Fraction of the offline data used for training; the rest validates.
    pub train_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: RankingLoss::new(LossKind::ListNet),
            epochs: 100,
            lr: 3e-4,
            weight_decay: 1e-5,
            batch_lists: 32,
            seed: 0,
            hidden: vec![64, 64],
            train_ratio: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        if self.batch_lists == 0 {
            return Err(Error::Config("train.batch_lists must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("train.hidden widths must be positive".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::Config("train.train_ratio must lie in (0, 1)".into()));
        }
        RankingLoss::new(self.loss.kind)
            .with_alpha(self.loss.alpha)
            .and_then(|l| l.with_temperature(self.loss.temperature))
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Per-epoch losses and the selected epoch (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

impl TrainRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss";

    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch]
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let header: Vec<String> = Self::CSV_HEADER.split(',').map(String::from).collect();
        write_rows(
            path.as_ref(),
            &header,
            self.train_loss
                .iter()
                .zip(&self.val_loss)
                .enumerate()
                .map(|(e, (&t, &v))| vec![e as f64, t, v]),
        )
    }
}

/// Trains a fresh network on `trainset` and returns the parameters from the
/// epoch with the lowest validation loss (the first one on ties).
pub fn train(trainset: &RankTrainSet, valset: &RankTrainSet, cfg: &TrainConfig) -> Result<(DenseNet, TrainRecord)> {
    cfg.validate()?;
    if trainset.dim() != valset.dim() {
        return Err(Error::DimensionMismatch {
            expected: trainset.dim(),
            actual: valset.dim(),
        });
    }
    if trainset.list_len() != valset.list_len() {
        return Err(Error::DimensionMismatch {
            expected: trainset.list_len(),
            actual: valset.list_len(),
        });
    }
    let loss = cfg.loss;
    let m = trainset.list_len();
    let labels: Vec<Vec<f64>> = (0..trainset.num_lists())
        .map(|l| loss.prepare_labels(&trainset.list_scores(l)))
        .collect();

    let mut net = DenseNet::new(trainset.dim(), &cfg.hidden, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam(), net.num_params()).with_decay_mask(net.weight_mask());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut order: Vec<usize> = (0..trainset.num_lists()).collect();
    let mut record = TrainRecord {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_loss: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
    };
    let mut best = net.clone();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_lists) {
            let x = trainset.stacked_designs(batch);
            let tape = net.forward_tape(x.view())?;
            let f = tape.outputs();
            let scale = 1.0 / batch.len() as f64;
            let mut out_grads = Vec::with_capacity(f.len());
            for (slot, &list) in batch.iter().enumerate() {
                let fl = &f[slot * m..(slot + 1) * m];
                let (value, grad) = loss
                    .value_and_grad(&labels[list], fl)
                    .map_err(|_| Error::NonFiniteTraining { epoch, list })?;
                if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFiniteTraining { epoch, list });
                }
                epoch_loss += value;
                out_grads.extend(grad.iter().map(|g| g * scale));
            }
            let grads = net.backward(&tape, &out_grads)?;
            let first = batch[0];
            adam.step(net.params_mut(), &grads)
                .map_err(|_| Error::NonFiniteTraining { epoch, list: first })?;
            if net.check_finite().is_err() {
                return Err(Error::NonFiniteTraining { epoch, list: first });
            }
        }
        let val = list_loss_total(&net, valset, &loss, cfg.batch_lists)
            .map_err(|list| Error::NonFiniteTraining { epoch, list })?
            / valset.num_lists() as f64;
        record.train_loss.push(epoch_loss / trainset.num_lists() as f64);
        record.val_loss.push(val);
        if val < record.val_loss[record.best_epoch] || epoch == 0 {
            record.best_epoch = epoch;
            best = net.clone();
        }
    }
    Ok((best, record))
}

/// Mean ranking loss of `net` over every list of `set`, evaluated
/// `chunk` lists per forward pass.
pub fn mean_list_loss(net: &DenseNet, set: &RankTrainSet, loss: &RankingLoss, chunk: usize) -> Result<f64> {
    if net.input_dim() != set.dim() {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(),
            actual: set.dim(),
        });
    }
    list_loss_total(net, set, loss, chunk)
        .map(|total| total / set.num_lists() as f64)
        .map_err(|list| Error::invalid(format!("non-finite loss on list {list}")))
}

/// Summed loss over all lists; on failure, the index of the offending list.
fn list_loss_total(
    net: &DenseNet,
    set: &RankTrainSet,
    loss: &RankingLoss,
    chunk: usize,
) -> std::result::Result<f64, usize> {
    let m = set.list_len();
    let lists: Vec<usize> = (0..set.num_lists()).collect();
    let mut total = 0.0;
    for batch in lists.chunks(chunk.max(1)) {
        let f = net
            .forward_batch(set.stacked_designs(batch).view())
            .map_err(|_| batch[0])?;
        for (slot, &list) in batch.iter().enumerate() {
            let y = loss.prepare_labels(&set.list_scores(list));
            match loss.value(&y, &f[slot * m..(slot + 1) * m]) {
                Ok(v) if v.is_finite() => total += v,
                _ => return Err(list),
            }
        }
    }
    Ok(total)
}

/// Network predictions for every design of `dataset`, in row order.
pub fn predict_dataset(net: &DenseNet, dataset: &OfflineDataset) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot predict over an empty dataset"));
    }
    if dataset.dim() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(),
            actual: dataset.dim(),
        });
    }
    let designs = dataset.designs();
    let mut out = Vec::with_capacity(dataset.len());
    for start in (0..dataset.len()).step_by(PREDICT_CHUNK) {
        let end = (start + PREDICT_CHUNK).min(dataset.len());
        out.extend(net.forward_batch(designs.slice(ndarray::s![start..end, ..]))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::augment;
    use crate::metrics::spearman;
    use ndarray::Array2;
    use rand::Rng;

    fn linear_data(n: usize, d: usize, seed: u64) -> OfflineDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y = rows
            .iter()
            .map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.5)
            .collect();
        OfflineDataset::from_rows(&rows, y).unwrap()
    }

    fn cfg(kind: LossKind, epochs: usize) -> TrainConfig {
        TrainConfig {
            loss: RankingLoss::new(kind),
            epochs,
            lr: 1e-2,
            hidden: vec![],
            batch_lists: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mse_fits_realizable_linear_data() {
        let (train, val) = linear_data(200, 3, 1).split(0.8, 0).unwrap();
        let tr = augment(&train, 64, 10, 1).unwrap();
        let va = augment(&val, 16, 10, 2).unwrap();
        let (_, rec) = train_fn(&tr, &va, &cfg(LossKind::Mse, 200));
        // per-list loss is a sum over 10 items
        assert!(rec.best_val_loss() / 10.0 < 1e-3, "{}", rec.best_val_loss());
    }

    fn train_fn(tr: &RankTrainSet, va: &RankTrainSet, c: &TrainConfig) -> (DenseNet, TrainRecord) {
        train(tr, va, c).unwrap()
    }

    #[test]
    fn rankcosine_recovers_linear_order() {
        let (train, val) = linear_data(300, 4, 2).split(0.8, 0).unwrap();
        let tr = augment(&train, 64, 20, 3).unwrap();
        let va = augment(&val, 8, 20, 4).unwrap();
        let (net, _) = train_fn(&tr, &va, &cfg(LossKind::RankCosine, 100));
        let pred = predict_dataset(&net, &val).unwrap();
        assert!(spearman(&pred, val.scores()).unwrap() > 0.99);
    }

    #[test]
    fn best_epoch_matches_recorded_minimum() {
        let (train, val) = linear_data(120, 2, 3).split(0.8, 1).unwrap();
        let tr = augment(&train, 20, 8, 5).unwrap();
        let va = augment(&val, 6, 8, 6).unwrap();
        let mut c = cfg(LossKind::ListNet, 15);
        c.hidden = vec![8];
        c.lr = 0.05;
        let (net, rec) = train_fn(&tr, &va, &c);
        let min = rec.val_loss.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(rec.best_val_loss(), min);
        assert_eq!(rec.val_loss.iter().position(|&v| v == min), Some(rec.best_epoch));
        assert_eq!(mean_list_loss(&net, &va, &c.loss, c.batch_lists).unwrap(), min);
    }

    #[test]
    fn training_is_reproducible() {
        let (train, val) = linear_data(80, 2, 4).split(0.8, 2).unwrap();
        let tr = augment(&train, 10, 6, 7).unwrap();
        let va = augment(&val, 4, 6, 8).unwrap();
        let mut c = cfg(LossKind::LambdaRank, 5);
        c.hidden = vec![4, 4];
        let (a, ra) = train_fn(&tr, &va, &c);
        let (b, rb) = train_fn(&tr, &va, &c);
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn single_item_mse_lists_match_plain_regression() {
        let data = linear_data(40, 3, 5).zscore_fit_transform().unwrap();
        let lists: Vec<Vec<usize>> = (0..data.len()).map(|i| vec![i]).collect();
        let set = RankTrainSet::from_lists(&data, lists, 0).unwrap();
        let mut c = cfg(LossKind::Mse, 30);
        c.hidden = vec![5];
        c.batch_lists = data.len();
        let (_, rec) = train_fn(&set, &set, &c);

        let mut net = DenseNet::new(3, &[5], c.seed).unwrap();
        let mut adam = AdamState::new(c.adam(), net.num_params()).with_decay_mask(net.weight_mask());
        let n = data.len() as f64;
        let mut last = 0.0;
        for _ in 0..c.epochs {
            let f = net.forward_batch(data.designs()).unwrap();
            last = f.iter().zip(data.scores()).map(|(f, y)| (y - f) * (y - f)).sum::<f64>() / n;
            let g: Vec<f64> = f.iter().zip(data.scores()).map(|(f, y)| 2.0 * (f - y) / n).collect();
            let grads = net.grad_params(data.designs(), &g).unwrap();
            adam.step(net.params_mut(), &grads).unwrap();
        }
        assert!((rec.train_loss[c.epochs - 1] - last).abs() < 1e-8);
    }

    #[test]
    fn rejects_invalid_config_and_shapes() {
        let data = linear_data(30, 2, 6).zscore_fit_transform().unwrap();
        let a = augment(&data, 4, 5, 0).unwrap();
        let b = augment(&data, 4, 6, 0).unwrap();
        assert!(train(&a, &b, &cfg(LossKind::Mse, 1)).is_err());
        let mut c = cfg(LossKind::Mse, 0);
        assert!(train(&a, &a, &c).is_err());
        c.epochs = 1;
        c.lr = 0.0;
        assert!(matches!(train(&a, &a, &c), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_names_epoch_and_list() {
        let data = linear_data(30, 2, 7).zscore_fit_transform().unwrap();
        let set = augment(&data, 4, 5, 0).unwrap();
        let mut c = cfg(LossKind::Mse, 3);
        c.lr = 1e300;
        c.hidden = vec![4];
        match train(&set, &set, &c) {
            Err(Error::NonFiniteTraining { epoch, .. }) => assert!(epoch < 3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn predict_dataset_contract() {
        let net = DenseNet::new(2, &[3], 1).unwrap();
        let one = OfflineDataset::from_rows(&[vec![0.3, -0.2]], vec![0.0]).unwrap();
        assert_eq!(
            predict_dataset(&net, &one).unwrap(),
            vec![net.forward(&[0.3, -0.2]).unwrap()]
        );
        let empty = OfflineDataset::new(Array2::zeros((0, 2)), vec![]).unwrap();
        assert!(predict_dataset(&net, &empty).is_err());
        let wrong = OfflineDataset::from_rows(&[vec![1.0]], vec![0.0]).unwrap();
        assert!(predict_dataset(&net, &wrong).is_err());
    }

    #[test]
    fn record_csv_layout() {
        let rec = TrainRecord {
            train_loss: vec![1.5, 1.0],
            val_loss: vec![2.0, 0.5],
            best_epoch: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        rec.write_csv(&path).unwrap();
        assert_eq!(
            std::fs::read_to_string(path).unwrap(),
            "epoch,train_loss,val_loss\n0,1.5,2\n1,1,0.5\n"
        );
    }
}
