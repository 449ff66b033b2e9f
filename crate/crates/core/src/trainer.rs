//! Mini-batch training of a [`PredictorModel`] on labelled cells.

use ndarray::{s, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cellgraph::CellGraph;
use crate::encoder::{EncodeError, Encoder, FeatureTensor, NormScaler, TENSOR_LEN};
use crate::metrics::{self, MetricError};
use crate::ranking::{self, LossConfig, LossError};
use crate::tensornet::{AdamState, NetError, PredictorArch, PredictorModel};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("need at least {need} training rows, got {got}")]
    TooFew { need: usize, got: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    L1,
    #[default]
    Combined,
}

impl LossKind {
    fn min_batch(self) -> usize {
        match self {
            LossKind::Mse => 1,
            LossKind::L1 => 2,
            LossKind::Combined => 3,
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "l1" => Ok(LossKind::L1),
            "combined" => Ok(LossKind::Combined),
            other => Err(format!("unknown loss {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Clamped to the training-set size.
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Train on every augmentation of each cell, all with its label.
    pub augment: bool,
    /// Holdout KTau is computed every this many epochs and after the last.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch: 1024,
            lr: 1e-3,
            weight_decay: 5e-4,
            seed: 0,
            loss: LossKind::Combined,
            augment: false,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss; `None` before the first epoch.
    pub loss: Option<f64>,
    pub holdout_ktau: Option<f64>,
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSetup {
    pub arch: PredictorArch,
    pub encoder: Encoder,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

fn encode_rows(encoder: &Encoder, cells: &[CellGraph]) -> Result<Vec<FeatureTensor>, EncodeError> {
    cells.iter().map(|c| encoder.encode_raw(c)).collect()
}

fn stack(tensors: &[FeatureTensor], scaler: &NormScaler) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((tensors.len(), TENSOR_LEN));
    for (mut row, t) in out.outer_iter_mut().zip(tensors) {
        let mut t = t.clone();
        scaler.apply(&mut t);
        row.assign(&ArrayView1::from(t.as_slice()));
    }
    out
}

fn scores_of(model: &PredictorModel, x: &Array2<f64>) -> Result<Vec<f64>, NetError> {
    let mut out = Vec::with_capacity(x.nrows());
    for start in (0..x.nrows()).step_by(256) {
        let end = (start + 256).min(x.nrows());
        out.extend(model.forward(x.slice(s![start..end, ..]))?.scores);
    }
    Ok(out)
}

/// Trains a fresh model. The scaler is fitted on the training tensors only.
/// `on_epoch` sees the log of the initial model (epoch 0) and of every
/// finished epoch.
pub fn train(
    cells: &[CellGraph],
    labels: &[f64],
    holdout: Option<(&[CellGraph], &[f64])>,
    setup: &TrainSetup,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(PredictorModel, Vec<EpochLog>), TrainError> {
    let cfg = &setup.train;
    cfg.validate()?;
    setup.loss.validate()?;
    if cells.len() != labels.len() {
        return Err(LossError::LengthMismatch(format!("{} cells but {} labels", cells.len(), labels.len())).into());
    }

    let (train_cells, train_labels): (Vec<CellGraph>, Vec<f64>) = if cfg.augment {
        cells.iter().zip(labels).flat_map(|(c, &y)| c.augmentations().into_iter().map(move |a| (a, y))).unzip()
    } else {
        (cells.to_vec(), labels.to_vec())
    };
    let need = cfg.loss.min_batch();
    if train_cells.len() < need {
        return Err(TrainError::TooFew { need, got: train_cells.len() });
    }

    let raw = encode_rows(&setup.encoder, &train_cells)?;
    let scaler = NormScaler::fit(&raw)?;
    let x = stack(&raw, &scaler);
    let holdout_x = match holdout {
        Some((hc, hy)) => {
            if hc.len() != hy.len() {
                return Err(LossError::LengthMismatch(format!("{} holdout cells but {} labels", hc.len(), hy.len())).into());
            }
            Some((stack(&encode_rows(&setup.encoder, hc)?, &scaler), hy))
        }
        None => None,
    };

    let mut model = PredictorModel::new(setup.arch.clone(), setup.encoder, scaler, cfg.seed)?;
    let mut adam = AdamState::new(model.param_count(), cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let holdout_ktau = |model: &PredictorModel| -> Result<Option<f64>, TrainError> {
        match &holdout_x {
            Some((hx, hy)) => Ok(Some(metrics::ktau_fast(&scores_of(model, hx)?, hy)?.ktau)),
            None => Ok(None),
        }
    };

    let mut logs = Vec::with_capacity(cfg.epochs + 1);
    let first = EpochLog { epoch: 0, loss: None, holdout_ktau: holdout_ktau(&model)? };
    on_epoch(&first);
    logs.push(first);

    let n = train_cells.len();
    let batch = cfg.batch.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(batch) {
            if idx.len() < need {
                continue;
            }
            let xb = x.select(Axis(0), idx);
            let yb: Vec<f64> = idx.iter().map(|&i| train_labels[i]).collect();
            let (out, cache) = model.forward_train(xb.view())?;
            let (value, grads) = match cfg.loss {
                LossKind::Mse => {
                    let (v, d) = ranking::loss_mse(&out.scores, &yb)?;
                    (v, model.backward(&cache, &d, None)?)
                }
                LossKind::L1 => {
                    let (v, d) = ranking::loss_l1(&out.scores, &yb, &setup.loss)?;
                    (v, model.backward(&cache, &d, None)?)
                }
                LossKind::Combined => {
                    let triplets = ranking::sample_triplets(idx.len(), setup.loss.triplets_per_batch, &mut rng);
                    let c = ranking::loss_combined(&out.scores, out.embeddings.view(), &yb, &setup.loss, &triplets)?;
                    (c.value, model.backward(&cache, &c.d_scores, Some(c.d_embeddings.view()))?)
                }
            };
            adam.step(model.params_mut(), &grads)?;
            loss_sum += value;
            batches += 1;
        }
        let evaluate = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let log = EpochLog {
            epoch,
            loss: (batches > 0).then(|| loss_sum / batches as f64),
            holdout_ktau: if evaluate { holdout_ktau(&model)? } else { None },
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evosearch::enumerate_space;

    fn small_setup(loss: LossKind, epochs: usize) -> TrainSetup {
        TrainSetup {
            arch: PredictorArch { conv_channels: vec![4], hidden: vec![8, 6] },
            train: TrainConfig { epochs, batch: 16, loss, seed: 3, lr: 3e-3, ..Default::default() },
            ..Default::default()
        }
    }

    fn data() -> (Vec<CellGraph>, Vec<f64>) {
        let cells = enumerate_space(4).unwrap();
        let labels = cells.iter().map(|c| c.op_census().conv3x3 as f64 - 0.1 * c.edge_count() as f64).collect();
        (cells, labels)
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (cells, labels) = data();
        let setup = small_setup(LossKind::Combined, 0);
        let (model, logs) = train(&cells, &labels, None, &setup, |_| {}).unwrap();
        assert_eq!(logs.len(), 1);
        let raw = encode_rows(&setup.encoder, &cells).unwrap();
        let fresh = PredictorModel::new(setup.arch.clone(), setup.encoder, NormScaler::fit(&raw).unwrap(), 3).unwrap();
        assert_eq!(model, fresh);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (cells, labels) = data();
        for loss in [LossKind::Mse, LossKind::L1, LossKind::Combined] {
            let setup = small_setup(loss, 15);
            let mut seen = 0;
            let (a, logs) = train(&cells, &labels, Some((&cells, &labels)), &setup, |_| seen += 1).unwrap();
            let (b, _) = train(&cells, &labels, Some((&cells, &labels)), &setup, |_| {}).unwrap();
            assert_eq!(a, b);
            assert_eq!(seen, 16);
            let last = logs.last().unwrap().holdout_ktau.unwrap();
            assert!(last > 0.5, "{loss:?}: ktau {last}");
        }
    }

    #[test]
    fn errors() {
        let (cells, labels) = data();
        let mut setup = small_setup(LossKind::Combined, 1);
        assert!(matches!(
            train(&cells[..2], &labels[..2], None, &setup, |_| {}),
            Err(TrainError::TooFew { need: 3, got: 2 })
        ));
        assert!(matches!(train(&cells, &labels[..3], None, &setup, |_| {}), Err(TrainError::Loss(_))));
        setup.train.lr = 0.0;
        assert!(matches!(train(&cells, &labels, None, &setup, |_| {}), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn augmentation_multiplies_rows() {
        let (cells, labels) = data();
        let mut setup = small_setup(LossKind::Mse, 1);
        setup.train.augment = true;
        assert!(train(&cells, &labels, None, &setup, |_| {}).is_ok());
    }
}
