//! Minibatch SGD with momentum, plateau learning-rate schedule and
//! best-holdout model selection.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{cast, Real, RegressorModel};
use crate::dataset::TrainingData;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_factor: f64,
    pub plateau_rel_threshold: f64,
    pub plateau_patience_epochs: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 2048,
            lr: 0.1,
            lr_drop_factor: 5.0,
            plateau_rel_threshold: 1e-4,
            plateau_patience_epochs: 20,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.lr > 0.0
            && self.lr_drop_factor > 1.0
            && self.plateau_rel_threshold > 0.0
            && self.plateau_patience_epochs > 0
            && (0.0..1.0).contains(&self.momentum);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training config {self:?}")))
        }
    }
}

/// Divides the learning rate when the loss has not improved by a relative
/// `threshold` on its best value for `patience` consecutive epochs; the
/// count restarts after every drop.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    threshold: f64,
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, threshold: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            threshold,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's loss; returns true when the rate was dropped.
    pub fn step(&mut self, loss: f64) -> bool {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr /= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

/// Mean over batch and components of `|pred − target|`.
pub fn l1_loss<T: Real>(pred: &[T], target: &[T]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "loss needs equal non-empty shapes, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p - t).abs().to_f64().unwrap_or(f64::NAN))
        .sum();
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// NaN when there is no holdout split.
    pub holdout_loss: f64,
    pub seconds: f64,
}

pub fn write_train_log_csv(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("epoch,lr,train_loss,holdout_loss,seconds\n");
    for r in log {
        let _ = writeln!(
            s,
            "{},{:e},{:.9e},{:.9e},{:.3}",
            r.epoch, r.lr, r.train_loss, r.holdout_loss, r.seconds
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    /// Parameters of the epoch with the lowest holdout loss (lowest training
    /// loss when there is no holdout).
    pub best: RegressorModel<T>,
    pub best_epoch: usize,
    pub last: RegressorModel<T>,
    pub log: Vec<EpochLog>,
}

struct Normalized<T> {
    images: Vec<T>,
    targets: Vec<T>,
    pixels: usize,
    k: usize,
}

impl<T: Real> Normalized<T> {
    fn new(data: &TrainingData, ids: &[usize], scale: &[f64]) -> Self {
        let pixels = data.pixels();
        let k = data.k;
        let mut images = Vec::with_capacity(ids.len() * pixels);
        let mut targets = Vec::with_capacity(ids.len() * k);
        for &i in ids {
            images.extend(data.image(i).iter().map(|&v| cast::<T>(v)));
            targets.extend(data.target(i).iter().zip(scale).map(|(&v, &s)| cast::<T>(v / s)));
        }
        Self {
            images,
            targets,
            pixels,
            k,
        }
    }

    fn len(&self) -> usize {
        self.targets.len() / self.k
    }

    fn gather(&self, ids: &[usize]) -> (Vec<T>, Vec<T>) {
        let mut x = Vec::with_capacity(ids.len() * self.pixels);
        let mut t = Vec::with_capacity(ids.len() * self.k);
        for &i in ids {
            x.extend_from_slice(&self.images[i * self.pixels..(i + 1) * self.pixels]);
            t.extend_from_slice(&self.targets[i * self.k..(i + 1) * self.k]);
        }
        (x, t)
    }
}

/// Eval-mode L1 loss in normalised units, in chunks of `batch`.
fn eval_loss<T: Real>(model: &RegressorModel<T>, set: &Normalized<T>, batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let ids: Vec<usize> = (0..set.len()).collect();
    for chunk in ids.chunks(batch) {
        let (x, t) = set.gather(chunk);
        let pred = model.forward_eval(&x)?;
        total += l1_loss(&pred, &t)? * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Trains `model` on the `train` ids of `data`, monitoring `holdout`.
/// Targets are divided by the model's target scale. Shuffling is seeded by
/// `tcfg.seed`; results are reproducible for a fixed seed.
pub fn train<T: Real>(
    mut model: RegressorModel<T>,
    data: &TrainingData,
    train_ids: &[usize],
    holdout_ids: &[usize],
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    tcfg.validate()?;
    if data.dims != model.config().input_dims || data.k != model.config().output_dim {
        return Err(Error::InvalidArgument(format!(
            "corpus ({:?}, K={}) does not match the model ({:?}, K={})",
            data.dims,
            data.k,
            model.config().input_dims,
            model.config().output_dim
        )));
    }
    if train_ids.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let scale = model.target_scale().to_vec();
    let train_set = Normalized::<T>::new(data, train_ids, &scale);
    let hold_set = (!holdout_ids.is_empty()).then(|| Normalized::<T>::new(data, holdout_ids, &scale));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut sched = PlateauScheduler::new(
        tcfg.lr,
        tcfg.lr_drop_factor,
        tcfg.plateau_rel_threshold,
        tcfg.plateau_patience_epochs,
    );
    let mut velocity = vec![T::zero(); model.params().len()];
    let mu = cast::<T>(tcfg.momentum);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(tcfg.epochs);
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let start = Instant::now();
    for epoch in 0..tcfg.epochs {
        let lr = sched.lr();
        let lr_t = cast::<T>(lr);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let (x, t) = train_set.gather(chunk);
            let cache = model.forward_train(&x)?;
            let loss = l1_loss(cache.predictions(), &t)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            sum += loss * chunk.len() as f64;
            let g = model.backward(&cache, &t)?;
            model.update_running_stats(&cache);
            for ((p, v), gi) in model.params_mut().iter_mut().zip(&mut velocity).zip(g) {
                *v = mu * *v + gi;
                *p = *p - lr_t * *v;
            }
        }
        let train_loss = sum / train_set.len() as f64;
        let holdout_loss = match &hold_set {
            Some(h) => eval_loss(&model, h, tcfg.batch_size)?,
            None => f64::NAN,
        };
        if hold_set.is_some() && !holdout_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        let monitored = if hold_set.is_some() { holdout_loss } else { train_loss };
        if monitored < best.0 {
            best = (monitored, epoch, model.clone());
        }
        sched.step(train_loss);
        let row = EpochLog {
            epoch,
            lr,
            train_loss,
            holdout_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(TrainOutcome {
        best: best.2,
        best_epoch: best.1,
        last: model,
        log,
    })
}
