//! Training and evaluation loops.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{dal_loss, mean_ce_loss, DalConfig, DalConfigError};
use crate::metrics::{ConfusionMatrix, MetricsError, MetricsReport, MiouMode};
use crate::model::{
    argmax_classes, update_running_stats, Dianet, DianetConfig, ModelError, BN_MOMENTUM,
};
use crate::prep::{load_tile, manifest_root, read_manifest, PrepError, TileSample};
use crate::scalar::Scalar;
use crate::scene::IMAGER_BANDS;
use crate::tensor::{
    save_checkpoint, sgd_step, Graph, OptimState, ParamStore, SgdConfig, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty manifest: {0}")]
    EmptyManifest(&'static str),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("tile shapes differ within a batch")]
    RaggedBatch,
    #[error(transparent)]
    Dal(#[from] DalConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Zero-based epochs at which the learning rate drops tenfold.
    pub lr_drop_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Train with the hard-pixel loss; plain mean cross-entropy otherwise.
    pub use_dal: bool,
    pub dal: DalConfig,
    /// Validate every this many epochs; the last epoch is always validated.
    pub eval_every: usize,
    pub miou_mode: MiouMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr0: 0.01,
            lr_drop_epochs: vec![3, 6, 9],
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 0,
            use_dal: true,
            dal: DalConfig::default(),
            eval_every: 1,
            miou_mode: MiouMode::All11,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0)
        {
            return bad("momentum must be in [0, 1) and weight_decay >= 0".into());
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "lr_drop_epochs {:?} not strictly increasing",
                self.lr_drop_epochs
            ));
        }
        if self
            .lr_drop_epochs
            .last()
            .is_some_and(|&d| d >= self.epochs)
        {
            return bad(format!(
                "lr_drop_epochs {:?} must be < epochs",
                self.lr_drop_epochs
            ));
        }
        self.dal.validate()?;
        Ok(())
    }

    /// Learning rate of a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
        self.lr0 / 10f64.powi(drops as i32)
    }
}

/// Visiting order of the training tiles in one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Stacks tiles into an `[N, 14, H, W]` input and flat labels. Missing band
/// values enter the network as zero.
pub fn stack_batch<T: Scalar>(tiles: &[&TileSample]) -> Result<(Tensor<T>, Vec<u8>), TrainError> {
    let first = tiles.first().ok_or(TrainError::EmptyManifest("batch"))?;
    let (h, w) = (first.bands.rows, first.bands.cols);
    let mut data = Vec::with_capacity(tiles.len() * IMAGER_BANDS * h * w);
    let mut labels = Vec::with_capacity(tiles.len() * h * w);
    for t in tiles {
        if (t.bands.rows, t.bands.cols, t.label.rows, t.label.cols) != (h, w, h, w)
            || t.bands.bands != IMAGER_BANDS
        {
            return Err(TrainError::RaggedBatch);
        }
        data.extend(t.bands.data.iter().map(|&v| {
            if v.is_finite() {
                T::of(v as f64)
            } else {
                T::zero()
            }
        }));
        labels.extend_from_slice(&t.label.data);
    }
    Ok((
        Tensor::new([tiles.len(), IMAGER_BANDS, h, w], data)?,
        labels,
    ))
}

pub fn load_manifest_tiles(path: &Path) -> Result<Vec<TileSample>, TrainError> {
    let root = manifest_root(path);
    read_manifest(path)?
        .iter()
        .map(|r| load_tile(&root, r).map_err(TrainError::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// `None` on epochs without validation.
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_miou\n");
        for r in &self.epochs {
            let miou = r.val_miou.map(|m| format!("{m:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:e},{:.6},{}", r.epoch, r.lr, r.train_loss, miou);
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Result of a training run: parameters of the best validated epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub best: ParamStore<T>,
    pub best_epoch: usize,
    pub best_miou: f64,
    pub history: History,
}

/// Runs minibatch SGD over `train`, validating on `val`. Ties in validation
/// mIoU keep the earlier epoch.
pub fn train<T: Scalar>(
    net: &Dianet,
    params: &mut ParamStore<T>,
    train: &[TileSample],
    val: &[TileSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyManifest("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyManifest("val"));
    }
    let sgd = SgdConfig {
        lr: cfg.lr0,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut state = OptimState::for_store(sgd, params);
    let mut history = History::default();
    let mut best: Option<(usize, f64, ParamStore<T>)> = None;

    for epoch in 0..cfg.epochs {
        state.config.lr = cfg.lr_at(epoch);
        let order = epoch_order(cfg.seed, epoch, train.len());
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TileSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, labels) = stack_batch::<T>(&batch)?;
            let diverged = TrainError::Diverged { epoch, step };
            let mut g = Graph::new();
            let vars = params.bind(&mut g);
            let xv = g.input(x);
            let step_result = (|| {
                let (logits, moments) = net.forward_train(&mut g, &vars, xv)?;
                let loss = if cfg.use_dal {
                    dal_loss(&mut g, logits, &labels, &cfg.dal)?.loss
                } else {
                    mean_ce_loss(&mut g, logits, &labels, cfg.dal.ignore_index)?
                };
                Ok((loss, moments))
            })();
            let (loss, moments) = match step_result {
                Ok(v) => v,
                Err(TensorError::NonFinite(_)) => return Err(diverged),
                Err(e) => return Err(e.into()),
            };
            let value = g.value(loss).data[0].widen();
            if !value.is_finite() {
                return Err(diverged);
            }
            let grads = match g.backward(loss) {
                Ok(gr) => gr,
                Err(TensorError::NonFinite(_)) => return Err(diverged),
                Err(e) => return Err(e.into()),
            };
            let grads = params.gather_grads(&grads, &vars);
            if grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(diverged);
            }
            sgd_step(params.tensors_mut(), &grads, &mut state)?;
            update_running_stats(params, &moments, BN_MOMENTUM);
            loss_sum += value;
            steps += 1;
        }

        let last = epoch + 1 == cfg.epochs;
        let val_miou = if last || (epoch + 1) % cfg.eval_every == 0 {
            let report = evaluate(net, params, val, cfg.batch_size, cfg.miou_mode)?;
            if best.as_ref().is_none_or(|b| report.miou > b.1) {
                best = Some((epoch, report.miou, params.clone()));
            }
            Some(report.miou)
        } else {
            None
        };
        history.epochs.push(EpochRecord {
            epoch,
            lr: state.config.lr,
            train_loss: loss_sum / steps as f64,
            val_miou,
        });
    }

    let (best_epoch, best_miou, best) = best.expect("last epoch is always validated");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_miou,
        history,
    })
}

/// Per-pixel predicted classes of each tile, in input order.
pub fn predict_tiles<T: Scalar>(
    net: &Dianet,
    params: &ParamStore<T>,
    tiles: &[TileSample],
    batch_size: usize,
) -> Result<Vec<Vec<u8>>, TrainError> {
    let mut out = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(batch_size.max(1)) {
        let batch: Vec<&TileSample> = chunk.iter().collect();
        let (x, _) = stack_batch::<T>(&batch)?;
        let pred = argmax_classes(&net.predict(params, &x)?);
        let hw = pred.len() / chunk.len();
        out.extend(pred.chunks(hw).map(<[u8]>::to_vec));
    }
    Ok(out)
}

/// Confusion-matrix evaluation of argmax predictions against tile labels.
pub fn evaluate<T: Scalar>(
    net: &Dianet,
    params: &ParamStore<T>,
    tiles: &[TileSample],
    batch_size: usize,
    mode: MiouMode,
) -> Result<MetricsReport, TrainError> {
    if tiles.is_empty() {
        return Err(TrainError::EmptyManifest("eval"));
    }
    let preds = predict_tiles(net, params, tiles, batch_size)?;
    let mut cm = ConfusionMatrix::new();
    for (p, t) in preds.iter().zip(tiles) {
        cm.accumulate(p, &t.label.data)?;
    }
    Ok(cm.report(mode)?)
}

/// Report of the constant all-clear prediction.
pub fn baseline_report(tiles: &[TileSample], mode: MiouMode) -> Result<MetricsReport, TrainError> {
    let mut cm = ConfusionMatrix::new();
    for t in tiles {
        // Fill pixels are ignored whatever is predicted there.
        cm.accumulate(&vec![0; t.label.data.len()], &t.label.data)?;
    }
    Ok(cm.report(mode)?)
}

/// Checkpoint metadata written next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: DianetConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub val_miou: f64,
}

pub fn save_best<T: Scalar>(
    path: &Path,
    outcome: &TrainOutcome<T>,
    model: &DianetConfig,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let meta = CheckpointMeta {
        model: model.clone(),
        train: cfg.clone(),
        epoch: outcome.best_epoch,
        val_miou: outcome.best_miou,
    };
    let value = serde_json::to_value(&meta).map_err(|e| TensorError::Format(e.to_string()))?;
    save_checkpoint(path, &value, &outcome.best)?;
    Ok(())
}
