//! Adam training with gradient clipping, validation-driven early stopping
//! and resumable checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::ForwardCtx;
use crate::data::{EvalInstance, UserSequence};
use crate::encoder::{encode_training, EncodedSequence};
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::model::{
    bce_loss, check_config, save_checkpoint, AnDaModel, Checkpoint, OptimizerSnapshot,
};
use crate::params::{Binder, ParamGrads, ParamStore};
use crate::tensor::{splitmix64, Tape, Tensor};

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    50
}
fn default_patience() -> usize {
    5
}
fn default_clip() -> f64 {
    5.0
}
fn default_k() -> usize {
    5
}
fn default_eval_batch() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    /// Training stops once more than this many consecutive epochs fail to
    /// improve validation HR@K.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Cut-off of the validation metric.
    #[serde(default = "default_k")]
    pub eval_k: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            patience: default_patience(),
            clip_norm: default_clip(),
            eval_k: default_k(),
            eval_batch_size: default_eval_batch(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.eval_k == 0 {
            return Err(Error::contract("batch sizes and eval_k must be at least 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::contract("clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Adam with `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        let fits = |a: &[Tensor], b: &[Tensor]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !fits(&m, &self.m) || !fits(&v, &self.v) {
            return Err(Error::contract(
                "optimizer state does not match the parameters",
            ));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One bias-corrected update. Refuses non-finite gradients, naming the
    /// first offending parameter.
    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            if !grads.get(id).is_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for id in ids {
            let g = grads.get(id).data();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let w = store.get_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                w[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPS);
            }
        }
        Ok(())
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean global gradient norm before clipping.
    pub grad_norm: f64,
    pub valid_hr: Option<f64>,
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best: AnDaModel,
    pub last: AnDaModel,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `best.ckpt`, `last.ckpt` and `run_log.jsonl` go.
    pub out_dir: Option<PathBuf>,
    /// A checkpoint with optimizer state to continue from.
    pub resume: Option<Checkpoint>,
}

/// Encodes every training user; users with fewer than two baskets are skipped.
pub fn encode_train_set(users: &[UserSequence], model: &AnDaModel) -> Result<Vec<EncodedSequence>> {
    let layout = model.layout();
    users
        .iter()
        .filter(|u| u.baskets.len() >= 2)
        .map(|u| encode_training(u, &layout))
        .collect()
}

/// Mean loss over a set of encoded sequences, in evaluation mode.
pub fn mean_loss(model: &AnDaModel, data: &[EncodedSequence]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params);
    let out = model.forward(&mut tape, &mut binder, data, &mut ForwardCtx::eval())?;
    let loss = bce_loss(&mut tape, out.logits, data, model.config().num_items)?;
    Ok(tape.value(loss).data()[0])
}

struct Sink {
    dir: PathBuf,
    log: File,
}

impl Sink {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run_log.jsonl");
        let log = OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
        })
    }

    fn record(&mut self, r: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.dir.join("run_log.jsonl"), e))
    }
}

fn snapshot(model: &AnDaModel, adam: Option<(&Adam, usize, f64, usize)>) -> Checkpoint {
    let mut ckpt = model.to_checkpoint();
    if let Some((adam, epoch, best, stale)) = adam {
        let (m, v) = adam.moments();
        ckpt.optimizer = Some(OptimizerSnapshot {
            step: adam.step,
            epoch,
            best_metric: best,
            stale_epochs: stale,
            first_moment: m.to_vec(),
            second_moment: v.to_vec(),
        });
    }
    ckpt
}

/// Trains `model` in place on `train`, selecting the epoch with the best
/// validation HR@K. Without validation users the full epoch budget runs and
/// the final parameters are returned as the best.
pub fn train(
    model: AnDaModel,
    train: &[EncodedSequence],
    validation: &[EvalInstance],
    config: &TrainConfig,
    seed: u64,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::contract("no training sequences"));
    }
    if train.iter().all(|e| e.num_targets() == 0) {
        return Err(Error::contract("no training sequence has a target basket"));
    }
    if validation.is_empty() {
        warn!("validation set is empty; running the full epoch budget without early stopping");
    }
    let mut model = model;
    let num_items = model.config().num_items;
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut start_epoch = 0;
    let mut best_metric = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut best_epoch = None;
    if let Some(ckpt) = &options.resume {
        check_config(&ckpt.config, model.config())?;
        model.params.load_values(ckpt.params.clone())?;
        let opt = ckpt
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::contract("resume checkpoint has no optimizer state"))?;
        adam.restore(
            opt.step,
            opt.first_moment.clone(),
            opt.second_moment.clone(),
        )?;
        start_epoch = opt.epoch + 1;
        best_metric = opt.best_metric;
        stale = opt.stale_epochs;
        info!("resuming at epoch {start_epoch} (step {})", adam.step);
    }
    let mut sink = match &options.out_dir {
        Some(d) => Some(Sink::open(d, options.resume.is_some())?),
        None => None,
    };
    let mut best = model.clone();
    let mut history = vec![];
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in start_epoch..config.max_epochs {
        let clock = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(epoch as u64)));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<EncodedSequence> = chunk.iter().map(|&i| train[i].clone()).collect();
            if batch.iter().all(|e| e.num_targets() == 0) {
                continue;
            }
            let mut grads = {
                let mut tape = Tape::new();
                let mut binder = Binder::new(&model.params);
                let mut ctx = ForwardCtx::train(seed, adam.step);
                let out = model.forward(&mut tape, &mut binder, &batch, &mut ctx)?;
                let loss = bce_loss(&mut tape, out.logits, &batch, num_items)?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                loss_sum += value;
                binder.collect(&tape.backward(loss)?)
            };
            norm_sum += grads.clip_global_norm(config.clip_norm);
            adam.update(&mut model.params, &grads)?;
            batches += 1;
        }
        let batches = batches.max(1) as f64;
        let valid_hr = if validation.is_empty() {
            None
        } else {
            let report =
                evaluate_model(&model, validation, &[config.eval_k], config.eval_batch_size)?;
            report.hr(config.eval_k)
        };
        let improved = match valid_hr {
            Some(hr) if hr > best_metric => {
                best_metric = hr;
                stale = 0;
                true
            }
            Some(_) => {
                stale += 1;
                false
            }
            None => true,
        };
        if improved {
            best = model.clone();
            best_epoch = Some(epoch);
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches,
            grad_norm: norm_sum / batches,
            valid_hr,
            improved,
            seconds: clock.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.5}, grad norm {:.3}, valid HR@{} {}",
            record.train_loss,
            record.grad_norm,
            config.eval_k,
            valid_hr.map_or("-".to_string(), |h| format!("{h:.4}"))
        );
        if let Some(s) = &mut sink {
            s.record(&record)?;
            if improved {
                save_checkpoint(&s.dir.join("best.ckpt"), &snapshot(&best, None))?;
            }
            save_checkpoint(
                &s.dir.join("last.ckpt"),
                &snapshot(&model, Some((&adam, epoch, best_metric, stale))),
            )?;
        }
        history.push(record);
        if stale > config.patience {
            info!("early stop after epoch {epoch}");
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch,
        best_metric: best_metric.is_finite().then_some(best_metric),
        epochs_run: history.len(),
        stopped_early,
        history,
    })
}
