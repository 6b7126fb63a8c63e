//! Optimizers (SGD, Adam, Adadelta), the epoch loop, early stopping with
//! patience, and best-weight restoration.
//!
//! All randomness (validation split, per-epoch shuffling, dropout) is
//! drawn from ChaCha8 streams derived from the configured seed, so a
//! (config, seed, tiles) triple always produces the same history and the
//! same final weights.

use std::str::FromStr;
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{GraphError, Model};
use crate::metrics::{argmax, ConfusionMatrix};
use crate::nn::{self, Mat, Mode, Scalar, Tensor4};
use crate::tiler::{batch_indices, one_hot, stratified_split, TileSet, TilerError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("cannot train on an empty tile set")]
    EmptyTileSet,
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tiler(#[from] TilerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adadelta,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "SGD",
            OptimizerKind::Adam => "Adam",
            OptimizerKind::Adadelta => "Adadelta",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "adadelta" => Ok(OptimizerKind::Adadelta),
            other => Err(format!(
                "unknown optimizer '{other}' (expected SGD, Adam or Adadelta)"
            )),
        }
    }
}

/// What early stopping watches: held-out accuracy (maximized) or the
/// training loss itself (minimized, for runs without a validation split).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monitor {
    ValAccuracy,
    TrainLoss,
}

impl FromStr for Monitor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "val" => Ok(Monitor::ValAccuracy),
            "train_loss" => Ok(Monitor::TrainLoss),
            other => Err(format!(
                "unknown monitor '{other}' (expected val or train_loss)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of the training tiles held out for monitoring.
    pub val_fraction: f64,
    pub seed: u64,
    pub monitor: Monitor,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |msg: String| Err(TrainError::BadConfig(msg));
        if self.learning_rate <= 0.0 {
            return err(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return err("batch size must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return err("max epochs must be >= 1".into());
        }
        if self.patience == 0 {
            return err("patience must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return err(format!(
                "validation fraction {} not in [0, 1)",
                self.val_fraction
            ));
        }
        if self.monitor == Monitor::ValAccuracy && self.val_fraction == 0.0 {
            return err("monitoring validation accuracy requires val_fraction > 0".into());
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADADELTA_RHO: f64 = 0.95;
const EPSILON: f64 = 1e-7;

/// Per-tensor optimizer state aligned with the model's parameter visit
/// order. `slot_a`/`slot_b` hold the first/second moments for Adam and
/// the gradient/update accumulators for Adadelta; SGD is stateless.
#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    pub kind: OptimizerKind,
    lr: F,
    steps: u64,
    slot_a: Vec<Vec<F>>,
    slot_b: Vec<Vec<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, model: &Model<F>) -> Result<Self, TrainError> {
        if learning_rate <= 0.0 {
            return Err(TrainError::BadConfig(format!(
                "learning rate {learning_rate} must be > 0"
            )));
        }
        let mut shapes = Vec::new();
        model.visit_params(&mut |p| shapes.push(p.values.len()));
        let zeros: Vec<Vec<F>> = shapes.iter().map(|&n| vec![F::zero(); n]).collect();
        Ok(Self {
            kind,
            lr: F::from_f64(learning_rate),
            steps: 0,
            slot_a: zeros.clone(),
            slot_b: zeros,
        })
    }

    /// Applies one update from the gradients currently accumulated in the
    /// model. Gradients are left untouched; callers zero them per batch.
    pub fn step(&mut self, model: &mut Model<F>) {
        self.steps += 1;
        let lr = self.lr;
        let kind = self.kind;
        let t = self.steps;
        let mut ti = 0;
        let slot_a = &mut self.slot_a;
        let slot_b = &mut self.slot_b;
        model.visit_params_mut(&mut |p| {
            assert_eq!(
                slot_a[ti].len(),
                p.values.len(),
                "optimizer state does not match the model layout"
            );
            match kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in p.values.iter_mut().zip(&p.grads) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let b1 = F::from_f64(ADAM_BETA1);
                    let b2 = F::from_f64(ADAM_BETA2);
                    let eps = F::from_f64(EPSILON);
                    let corr1 = F::from_f64(1.0 - ADAM_BETA1.powi(t as i32));
                    let corr2 = F::from_f64(1.0 - ADAM_BETA2.powi(t as i32));
                    for (i, (w, &g)) in p.values.iter_mut().zip(&p.grads).enumerate() {
                        let m = &mut slot_a[ti][i];
                        *m = b1 * *m + (F::one() - b1) * g;
                        let v = &mut slot_b[ti][i];
                        *v = b2 * *v + (F::one() - b2) * g * g;
                        let m_hat = *m / corr1;
                        let v_hat = *v / corr2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                OptimizerKind::Adadelta => {
                    let rho = F::from_f64(ADADELTA_RHO);
                    let eps = F::from_f64(EPSILON);
                    for (i, (w, &g)) in p.values.iter_mut().zip(&p.grads).enumerate() {
                        let acc_g = &mut slot_a[ti][i];
                        *acc_g = rho * *acc_g + (F::one() - rho) * g * g;
                        let delta =
                            -((slot_b[ti][i] + eps).sqrt() / (*acc_g + eps).sqrt()) * g;
                        let acc_d = &mut slot_b[ti][i];
                        *acc_d = rho * *acc_d + (F::one() - rho) * delta * delta;
                        *w += lr * delta;
                    }
                }
            }
            ti += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Wall-clock seconds for the epoch; excluded from the CSV export.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights the returned model carries.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub best_monitor: f64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
            ));
        }
        out
    }
}

fn tiles_to_batch(ts: &TileSet, idx: &[usize]) -> (Tensor4<f32>, Mat<f32>) {
    let s = ts.tile_size;
    let c = ts.channels;
    let k = ts.num_classes;
    let mut data = Vec::with_capacity(idx.len() * s * s * c);
    let mut targets = Vec::with_capacity(idx.len() * k as usize);
    for &i in idx {
        data.extend_from_slice(&ts.tiles[i].data);
        targets.extend(one_hot(ts.tiles[i].label, k));
    }
    (
        Tensor4::from_vec(idx.len(), s, s, c, data),
        Mat::from_vec(idx.len(), k as usize, targets),
    )
}

/// Inference-mode pass over all tiles: confusion matrix (rows = truth,
/// argmax prediction with lowest-index ties) and mean cross-entropy loss.
pub fn evaluate(model: &Model<f32>, tiles: &TileSet) -> Result<(ConfusionMatrix, f64), TrainError> {
    if tiles.is_empty() {
        return Err(TrainError::EmptyTileSet);
    }
    let mut cm = ConfusionMatrix::with_classes(tiles.num_classes as usize);
    let mut loss_sum = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let all: Vec<usize> = (0..tiles.len()).collect();
    for chunk in all.chunks(256) {
        let (batch, targets) = tiles_to_batch(tiles, chunk);
        let pass = model.forward(&batch, Mode::Infer, &mut rng)?;
        let (loss, _, _) = nn::softmax_xent(&pass.logits, &targets);
        loss_sum += loss as f64 * chunk.len() as f64;
        for (row, &i) in chunk.iter().enumerate() {
            let truth = tiles.tiles[i].label as usize - 1;
            let pred = argmax(pass.probs.row(row));
            cm.record(truth, pred).expect("labels within num_classes");
        }
    }
    Ok((cm, loss_sum / tiles.len() as f64))
}

struct MonitorState {
    monitor: Monitor,
    best: f64,
}

impl MonitorState {
    fn new(monitor: Monitor) -> Self {
        Self {
            monitor,
            best: match monitor {
                Monitor::ValAccuracy => f64::NEG_INFINITY,
                Monitor::TrainLoss => f64::INFINITY,
            },
        }
    }

    /// Strict improvement by more than 1e-6; ties keep the earlier best.
    fn improved(&self, value: f64) -> bool {
        match self.monitor {
            Monitor::ValAccuracy => value > self.best + 1e-6,
            Monitor::TrainLoss => value < self.best - 1e-6,
        }
    }
}

/// Runs the epoch loop on `model` in place. A stratified `val_fraction`
/// of the tiles is held out for monitoring; training stops once the
/// monitor has not improved for `patience` consecutive epochs or at
/// `max_epochs`, and the weights from the best epoch are restored.
pub fn train(
    model: &mut Model<f32>,
    tiles: &TileSet,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    if tiles.is_empty() {
        return Err(TrainError::EmptyTileSet);
    }

    let (train_set, val_set) = if cfg.val_fraction > 0.0 {
        let (tr, va) = stratified_split(tiles, 1.0 - cfg.val_fraction, cfg.seed ^ 0x5eed)?;
        (tr, Some(va))
    } else {
        (tiles.clone(), None)
    };

    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut state = MonitorState::new(cfg.monitor);
    let mut best_epoch = 0;
    let mut best_params = model.param_snapshot();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_epoch: 0,
        best_monitor: state.best,
    };

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch_idx in batch_indices(train_set.len(), cfg.batch_size, cfg.seed, epoch) {
            let (batch, targets) = tiles_to_batch(&train_set, &batch_idx);
            model.zero_grad();
            let pass = model.forward(&batch, Mode::Train, &mut dropout_rng)?;
            let data_loss = model.backward(&pass, &targets);
            opt.step(model);
            loss_sum += (data_loss + model.l2_loss()) as f64 * batch_idx.len() as f64;
            for (row, &i) in batch_idx.iter().enumerate() {
                if argmax(pass.probs.row(row)) == train_set.tiles[i].label as usize - 1 {
                    correct += 1;
                }
            }
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let train_acc = 100.0 * correct as f64 / train_set.len() as f64;

        let (val_loss, val_acc) = match &val_set {
            Some(va) => {
                let (cm, loss) = evaluate(model, va)?;
                (loss, cm.overall_accuracy().expect("validation set nonempty"))
            }
            // Without a held-out split the val columns mirror the
            // training metrics.
            None => (train_loss, train_acc),
        };

        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        });

        let monitored = match cfg.monitor {
            Monitor::ValAccuracy => val_acc,
            Monitor::TrainLoss => train_loss,
        };
        if state.improved(monitored) {
            state.best = monitored;
            best_epoch = epoch;
            best_params = model.param_snapshot();
        }
        history.stopped_epoch = epoch;
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    model.restore_params(&best_params);
    history.best_epoch = best_epoch;
    history.best_monitor = state.best;
    Ok(history)
}
