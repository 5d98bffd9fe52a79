//! Optimizer, schedules, and the seeded training loop.

pub mod checkpoint;

use std::path::Path;

use crate::data::{augment, SceneSample};
use crate::decoder::{MpcmNet, NetConfig};
use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::loss::{argmax_categories, joint_loss, LabelMap, LossConfig};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::nn::{ModelParams, ParamCtx, ParamId};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// training crop extent; samples larger than this are randomly
    /// cropped (center crop at evaluation time)
    pub crop_size: usize,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
            lr_decay_every: 10,
            lr_decay_factor: 0.5,
            early_stop_patience: 20,
            batch_size: 4,
            epochs: 100,
            seed: 0,
            crop_size: 64,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
            ("lr_decay_factor", self.lr_decay_factor),
        ];
        for (name, v) in positive {
            if v <= 0.0 {
                return Err(TensorError::invalid(
                    "train_config",
                    format!("{name} must be positive, got {v}"),
                ));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(TensorError::invalid("train_config", "negative weight_decay"));
        }
        if self.batch_size == 0
            || self.epochs == 0
            || self.lr_decay_every == 0
            || self.crop_size % 16 != 0
        {
            return Err(TensorError::invalid(
                "train_config",
                "batch_size/epochs/lr_decay_every must be positive; crop divisible by 16",
            ));
        }
        Ok(())
    }
}

/// Piecewise-constant decay: `lr * factor^floor(epoch / every)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay
// ---------------------------------------------------------------------------

/// First/second-moment buffers, aligned with the trainable entries of
/// the parameter store they were built from.
pub struct AdamState<E: Elem> {
    pub step: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Elem> AdamState<E> {
    pub fn new(params: &ModelParams<E>) -> Self {
        let ids: Vec<ParamId> = params
            .ids()
            .filter(|id| params.is_trainable(*id))
            .collect();
        let m = ids.iter().map(|&id| vec![E::ZERO; params.get(id).len()]).collect();
        let v = ids.iter().map(|&id| vec![E::ZERO; params.get(id).len()]).collect();
        AdamState { step: 0, ids, m, v }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn moments(&self, slot: usize) -> (&[E], &[E]) {
        (&self.m[slot], &self.v[slot])
    }

    pub fn set_moments(&mut self, slot: usize, m: Vec<E>, v: Vec<E>) {
        assert_eq!(self.m[slot].len(), m.len());
        assert_eq!(self.v[slot].len(), v.len());
        self.m[slot] = m;
        self.v[slot] = v;
    }

    /// One update: decoupled decay `theta *= 1 - lr*wd` first, then the
    /// bias-corrected moment step. `grads` must align with the trainable
    /// entries (the layout `ParamCtx::gradients` produces).
    pub fn step(
        &mut self,
        params: &ModelParams<E>,
        grads: &[(ParamId, Vec<E>)],
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(TensorError::invalid(
                "adam_step",
                format!("{} grads for {} parameters", grads.len(), self.ids.len()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = E::from_f64(cfg.beta1);
        let b2 = E::from_f64(cfg.beta2);
        let one_m_b1 = E::from_f64(1.0 - cfg.beta1);
        let one_m_b2 = E::from_f64(1.0 - cfg.beta2);
        let corr1 = E::from_f64(1.0 - cfg.beta1.powi(t));
        let corr2 = E::from_f64(1.0 - cfg.beta2.powi(t));
        let lr_e = E::from_f64(lr);
        let eps = E::from_f64(cfg.eps);
        let decay = E::from_f64(1.0 - lr * cfg.weight_decay);

        for (slot, (id, grad)) in grads.iter().enumerate() {
            if *id != self.ids[slot] {
                return Err(TensorError::invalid(
                    "adam_step",
                    "gradient order does not match optimizer state",
                ));
            }
            let current = params.get(*id);
            if current.len() != grad.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: current.shape().to_vec(),
                    rhs: vec![grad.len()],
                });
            }
            let mut theta = current.to_vec();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..theta.len() {
                let g = grad[i];
                theta[i] *= decay;
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                theta[i] -= lr_e * m_hat / (v_hat.sqrt() + eps);
            }
            params.set(*id, Tensor::from_vec(current.shape().to_vec(), theta)?);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// early stopping
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss and the epochs since it improved.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub since_improve: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            since_improve: 0,
        }
    }

    pub fn update(&mut self, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.since_improve = 0;
            StopDecision::Improved
        } else {
            self.since_improve += 1;
            if self.since_improve >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

fn crop_sample(
    sample: &SceneSample,
    crop: usize,
    offset: Option<(usize, usize)>,
) -> (Vec<f32>, Vec<u8>) {
    let s = sample.size;
    if s == crop {
        return (sample.image.clone(), sample.labels.clone());
    }
    let (oy, ox) = offset.unwrap_or(((s - crop) / 2, (s - crop) / 2));
    let mut image = Vec::with_capacity(3 * crop * crop);
    for c in 0..3 {
        for y in 0..crop {
            let base = (c * s + oy + y) * s + ox;
            image.extend_from_slice(&sample.image[base..base + crop]);
        }
    }
    let mut labels = Vec::with_capacity(crop * crop);
    for y in 0..crop {
        let base = (oy + y) * s + ox;
        labels.extend_from_slice(&sample.labels[base..base + crop]);
    }
    (image, labels)
}

/// Stacks samples into one `B x 3 x S x S` tensor plus its label map.
/// In train mode each sample is augmented and randomly cropped using
/// draws from `rng`, in a fixed per-sample order.
pub fn stack_batch(
    samples: &[&SceneSample],
    crop: usize,
    train_rng: Option<&mut Rng>,
) -> Result<(Tensor<f32>, LabelMap)> {
    let b = samples.len();
    let mut images = Vec::with_capacity(b * 3 * crop * crop);
    let mut labels = Vec::with_capacity(b * crop * crop);
    let mut rng = train_rng;
    for sample in samples {
        if sample.size < crop {
            return Err(TensorError::invalid(
                "stack_batch",
                format!("sample size {} below crop {crop}", sample.size),
            ));
        }
        let (img, lab) = match rng.as_deref_mut() {
            Some(rng) => {
                let augmented = augment(sample, rng)
                    .map_err(|e| TensorError::invalid("stack_batch", e.to_string()))?;
                let offset = if sample.size > crop {
                    let span = sample.size - crop + 1;
                    Some((rng.below(span), rng.below(span)))
                } else {
                    None
                };
                crop_sample(&augmented, crop, offset)
            }
            None => crop_sample(sample, crop, None),
        };
        images.extend(img);
        labels.extend(lab);
    }
    // gather per-sample planar blocks into one batch tensor
    let imgs = Tensor::from_vec(vec![b, 3, crop, crop], images)?;
    let labels = LabelMap::new(b, crop, crop, labels)?;
    Ok((imgs, labels))
}

// ---------------------------------------------------------------------------
// trainer and loop
// ---------------------------------------------------------------------------

pub struct Trainer {
    pub cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub net: MpcmNet,
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub rng: Rng,
    pub epoch: usize,
    pub stopper: EarlyStopper,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ModelParams::<f32>::new(cfg.seed);
        let net = MpcmNet::new(&mut params, cfg.net)?;
        let adam = AdamState::new(&params);
        Ok(Trainer {
            stopper: EarlyStopper::new(cfg.early_stop_patience),
            rng: Rng::new(cfg.seed ^ 0x7261_696e),
            epoch: 0,
            cfg,
            loss_cfg: LossConfig::default(),
            net,
            params,
            adam,
        })
    }

    pub fn lr_now(&self) -> f64 {
        lr_schedule(self.epoch, &self.cfg)
    }

    /// One pass over the train split: shuffle, augment, step per batch.
    /// Returns the sample-weighted mean joint loss.
    pub fn train_epoch(&mut self, train: &[SceneSample]) -> Result<f64> {
        if train.is_empty() {
            return Err(TensorError::invalid("train_loop", "empty train split"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.rng.shuffle(&mut order);
        // batch-norm needs two samples; fold a trailing singleton into
        // the previous batch
        let mut batches: Vec<Vec<usize>> = order
            .chunks(self.cfg.batch_size)
            .map(|c| c.to_vec())
            .collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(last);
        }
        let lr = self.lr_now();
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in &batches {
            let samples: Vec<&SceneSample> = batch.iter().map(|&i| &train[i]).collect();
            let (imgs, labels) =
                stack_batch(&samples, self.cfg.crop_size, Some(&mut self.rng))?;
            let tape = Tape::new();
            let ctx = ParamCtx::train(&self.params, &tape);
            let logits = self.net.forward(&ctx, &imgs)?;
            let probs = logits.softmax(1)?;
            let loss = joint_loss(&probs, &labels, &self.loss_cfg)?;
            let grads = loss.backward()?;
            let grads = ctx.gradients(&grads);
            self.adam.step(&self.params, &grads, lr, &self.cfg)?;
            total += loss.item() as f64 * batch.len() as f64;
            count += batch.len();
        }
        Ok(total / count as f64)
    }

    /// Frozen-parameter evaluation: joint loss plus pixel metrics over
    /// argmax predictions.
    pub fn evaluate(&self, data: &[SceneSample]) -> Result<(f64, Metrics)> {
        if data.is_empty() {
            return Err(TensorError::invalid("evaluate", "empty split"));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        let mut cm = ConfusionMatrix::new();
        for chunk in data.chunks(self.cfg.batch_size.max(1)) {
            let samples: Vec<&SceneSample> = chunk.iter().collect();
            let (imgs, labels) = stack_batch(&samples, self.cfg.crop_size, None)?;
            let ctx = ParamCtx::eval(&self.params);
            let logits = self.net.forward(&ctx, &imgs)?;
            let probs = logits.softmax(1)?;
            let loss = joint_loss(&probs, &labels, &self.loss_cfg)?;
            total += loss.item() as f64 * chunk.len() as f64;
            count += chunk.len();
            let pred = argmax_categories(&logits)?;
            cm.accumulate(&pred.ids, &labels.ids)?;
        }
        Ok((total / count as f64, cm.metrics()?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    pub lr: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch {} train_loss {:.6} val_loss {:.6} val_miou {:.6} lr {:.6}",
            self.epoch, self.train_loss, self.val_loss, self.val_miou, self.lr
        )
    }
}

/// Runs epochs until the cap or the early-stopping patience triggers.
/// When `out_dir` is given, `last/` tracks every epoch and `best/` the
/// best-validation parameters. Resume continues from `trainer.epoch`.
pub fn train_loop(
    trainer: &mut Trainer,
    train: &[SceneSample],
    val: &[SceneSample],
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(TensorError::invalid("train_loop", "empty train split"));
    }
    let mut logs = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        let train_loss = trainer.train_epoch(train)?;
        let (val_loss, metrics) = trainer.evaluate(val)?;
        let log = EpochLog {
            epoch: trainer.epoch,
            train_loss,
            val_loss,
            val_miou: metrics.miou,
            lr: trainer.lr_now(),
        };
        on_epoch(&log);
        logs.push(log);
        let decision = trainer.stopper.update(val_loss);
        trainer.epoch += 1;
        if let Some(dir) = out_dir {
            if decision == StopDecision::Improved {
                checkpoint::save(&dir.join("best"), trainer)
                    .map_err(|e| TensorError::invalid("checkpoint", e.to_string()))?;
            }
            checkpoint::save(&dir.join("last"), trainer)
                .map_err(|e| TensorError::invalid("checkpoint", e.to_string()))?;
        }
        if decision == StopDecision::Stop {
            break;
        }
    }
    Ok(logs)
}
