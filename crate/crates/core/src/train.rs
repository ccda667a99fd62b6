//! Adam, the exponential learning-rate schedule, the epoch loop and evaluation.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{batch_iter, to_joint_layout, Batch, MotionSequence, Normalizer};
use crate::error::{Error, Result};
use crate::model::StMoeModel;
use crate::nn::{Mode, Module};
use crate::objective::{total_loss, HorizonAccumulator, LossWeights};
use crate::tensor::{backward, no_grad, set_precision, Gradients, Precision, Tensor};

/// `base · (0.1^(1/50))^epoch`.
pub fn lr_at_epoch(base: f64, epoch: usize) -> f64 {
    base * 0.1f64.powf(epoch as f64 / 50.0)
}

/// Bias-corrected Adam with per-parameter moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(base_lr: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter of `module` at rate `lr`. Parameters
    /// without a gradient are treated as having a zero gradient. With
    /// `clip_norm`, gradients are rescaled so their global norm is at most it.
    pub fn step(&mut self, module: &mut dyn Module, grads: &Gradients, lr: f64, clip_norm: Option<f64>) -> Result<()> {
        let mut gathered: Vec<(String, Option<Tensor>)> = Vec::new();
        module.visit("", &mut |name, p| gathered.push((name, grads.get(p).cloned())));
        for (name, g) in &gathered {
            if let Some(g) = g {
                if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::Training(format!(
                        "gradient of {name} is {} at flat index {i}",
                        g.data()[i]
                    )));
                }
            }
        }
        let factor = match clip_norm {
            Some(c) => {
                let norm = gathered
                    .iter()
                    .filter_map(|(_, g)| g.as_ref())
                    .flat_map(|g| g.data().iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let grads: BTreeMap<String, Option<Tensor>> = gathered.into_iter().collect();

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        let mut result = Ok(());
        module.visit_mut("", &mut |name, p| {
            if result.is_err() {
                return;
            }
            let n = p.numel();
            let (m, v) = moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                result = Err(Error::Training(format!(
                    "moment buffers of {name} do not match its shape"
                )));
                return;
            }
            let g = grads.get(&name).and_then(|g| g.as_ref());
            let mut data = p.to_vec();
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g.data()[i] * factor);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
            match p.with_data(data) {
                Ok(t) => *p = t,
                Err(e) => result = Err(e),
            }
        });
        result
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sequences per batch; persons multiply the effective batch.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub shuffle: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    /// Write a checkpoint every this many epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub precision: Precision,
    pub normalizer: Normalizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 96,
            lr: 0.01,
            seed: 0,
            shuffle: true,
            clip_norm: None,
            checkpoint_every: 0,
            precision: Precision::F64,
            normalizer: Normalizer::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if !(self.normalizer.scale > 0.0 && self.normalizer.scale.is_finite()) {
            return Err(Error::Config("normalizer.scale must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_jpe: Option<f64>,
    pub val_ape: Option<f64>,
}

/// Model, optimizer and generator state of a training run.
pub struct Trainer {
    pub model: StMoeModel,
    pub optim: Adam,
    pub rng: ChaCha8Rng,
    /// Epochs completed so far.
    pub epoch: usize,
    pub config: TrainConfig,
    pub loss: LossWeights,
}

impl Trainer {
    pub fn new(model: StMoeModel, config: TrainConfig, loss: LossWeights) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        Ok(Trainer {
            model,
            optim: Adam::new(config.lr),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            epoch: 0,
            config,
            loss,
        })
    }

    /// Rebuilds a trainer from a checkpoint; `config` and `loss` govern the
    /// epochs still to run.
    pub fn from_checkpoint(cp: Checkpoint, config: TrainConfig, loss: LossWeights) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        let model = cp.restore_model()?;
        Ok(Trainer {
            model,
            optim: cp.optim,
            rng: cp.rng,
            epoch: cp.epoch,
            config,
            loss,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.optim, &self.rng, self.epoch)
    }

    fn batch_loss(&mut self, batch: &Batch) -> Result<Tensor> {
        let norm = self.config.normalizer;
        let off = norm.offsets(&batch.history)?;
        let history = norm.normalize(&batch.history, &off)?;
        let target = norm.normalize(&batch.target, &off)?;
        let out = self.model.forward(&history, &mut Mode::Train(&mut self.rng))?;
        let j = batch.joints;
        total_loss(
            &to_joint_layout(&out.pred, j)?,
            &to_joint_layout(&target, j)?,
            self.model.config.history,
            &self.loss,
        )
    }

    /// One pass over `train`; returns the sample-weighted mean loss.
    pub fn train_epoch(&mut self, train: &[MotionSequence]) -> Result<(f64, f64)> {
        let c = &self.model.config;
        let (t, total) = (c.history, c.total);
        let lr = lr_at_epoch(self.config.lr, self.epoch);
        let shuffle = self.config.shuffle.then(|| self.rng.random::<u64>());
        let batches = batch_iter(train, self.config.batch_size, t, total, shuffle)?;
        let (mut sum, mut count) = (0.0, 0usize);
        for (i, batch) in batches.iter().enumerate() {
            let loss = self.batch_loss(batch)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {value} at batch {i} of epoch {}",
                    self.epoch + 1
                )));
            }
            let grads = backward(&loss)?;
            self.optim.step(&mut self.model, &grads, lr, self.config.clip_norm)?;
            let n = batch.indices.len();
            sum += value * n as f64;
            count += n;
        }
        self.epoch += 1;
        Ok((lr, sum / count as f64))
    }

    /// Runs `epochs` more epochs. After each, `hook` sees the record; with
    /// `out_dir` the record is appended to `train_log.jsonl` there and
    /// periodic checkpoints are written.
    pub fn fit(
        &mut self,
        train: &[MotionSequence],
        val: &[MotionSequence],
        epochs: usize,
        out_dir: Option<&Path>,
        hook: &mut dyn FnMut(&EpochRecord, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        if epochs > 0 && train.is_empty() {
            return Err(Error::Training("training set is empty".into()));
        }
        set_precision(self.config.precision);
        let result = self.fit_inner(train, val, epochs, out_dir, hook);
        set_precision(Precision::F64);
        result
    }

    fn fit_inner(
        &mut self,
        train: &[MotionSequence],
        val: &[MotionSequence],
        epochs: usize,
        out_dir: Option<&Path>,
        hook: &mut dyn FnMut(&EpochRecord, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut log = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let (lr, train_loss) = self.train_epoch(train)?;
            let (val_jpe, val_ape) = if val.is_empty() {
                (None, None)
            } else {
                let acc = evaluate(&self.model, val, self.config.batch_size, &self.config.normalizer)?;
                let r = acc.averages()?;
                (Some(r.0), Some(r.1))
            };
            let record = EpochRecord {
                epoch: self.epoch,
                lr,
                train_loss,
                val_jpe,
                val_ape,
            };
            if let Some(dir) = out_dir {
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("train_log.jsonl"))?;
                writeln!(
                    f,
                    "{}",
                    serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?
                )?;
                let every = self.config.checkpoint_every;
                if every > 0 && self.epoch % every == 0 {
                    self.checkpoint()
                        .save(&dir.join(format!("checkpoint_epoch_{:04}.stmc", self.epoch)))?;
                }
            }
            hook(&record, self)?;
            log.push(record);
        }
        Ok(log)
    }
}

/// Model prediction in millimeters for a raw `(B·M, D, t)` history.
pub fn predict(model: &StMoeModel, history: &Tensor, norm: &Normalizer) -> Result<Tensor> {
    no_grad(|| {
        let off = norm.offsets(history)?;
        let out = model.forward(&norm.normalize(history, &off)?, &mut Mode::Eval)?;
        norm.denormalize(&out.pred, &off)
    })
}

/// JPE/APE sums over the predicted frames of every sequence, in millimeters.
pub fn evaluate(
    model: &StMoeModel,
    sequences: &[MotionSequence],
    batch_size: usize,
    norm: &Normalizer,
) -> Result<HorizonAccumulator> {
    let c = &model.config;
    let (t, total) = (c.history, c.total);
    let mut acc = HorizonAccumulator::new(total - t, norm.root);
    for batch in batch_iter(sequences, batch_size, t, total, None)? {
        let pred = predict(model, &batch.history, norm)?;
        let j = batch.joints;
        acc.add(
            &to_joint_layout(&pred.slice(2, t, total)?, j)?,
            &to_joint_layout(&batch.target.slice(2, t, total)?, j)?,
        )?;
    }
    Ok(acc)
}

impl HorizonAccumulator {
    /// `(JPE, APE)` averaged over all predicted frames.
    pub fn averages(&self) -> Result<(f64, f64)> {
        let r = self.report(1.0, &[])?;
        Ok((r.jpe_avg, r.ape_avg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::model::ModelConfig;
    use crate::ssm::SsmConfig;

    struct Scalar {
        w: Tensor,
        u: Tensor,
    }

    impl Module for Scalar {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
            f(crate::nn::join(prefix, "w"), &self.w);
            f(crate::nn::join(prefix, "u"), &self.u);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
            f(crate::nn::join(prefix, "w"), &mut self.w);
            f(crate::nn::join(prefix, "u"), &mut self.u);
        }
    }

    fn scalars() -> Scalar {
        Scalar {
            w: Tensor::param(&[1], vec![2.0]).unwrap(),
            u: Tensor::param(&[1], vec![-1.0]).unwrap(),
        }
    }

    #[test]
    fn schedule_decays_a_decade_every_fifty_epochs() {
        assert_eq!(lr_at_epoch(0.01, 0), 0.01);
        assert!((lr_at_epoch(0.01, 50) - 1e-3).abs() < 1e-18);
        assert!((lr_at_epoch(0.01, 100) - 1e-4).abs() < 1e-18);
        for e in 0..300 {
            assert!(lr_at_epoch(0.01, e + 1) < lr_at_epoch(0.01, e));
            assert!(lr_at_epoch(0.01, e + 1) > 0.0);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = scalars();
        let loss = m.w.clone();
        let loss = loss.sum_all().unwrap();
        let grads = backward(&loss).unwrap();
        let mut opt = Adam::new(0.01);
        opt.step(&mut m, &grads, 0.01, None).unwrap();
        let delta = 2.0 - m.w.data()[0];
        assert!((delta - 0.01 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
        assert_eq!(m.u.data()[0], -1.0);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradients_leave_parameters_alone() {
        let mut m = scalars();
        let mut opt = Adam::new(0.01);
        let grads = backward(&m.w.scale(0.0).unwrap().sum_all().unwrap()).unwrap();
        for _ in 0..5 {
            opt.step(&mut m, &grads, 0.01, None).unwrap();
        }
        assert_eq!((m.w.data()[0], m.u.data()[0]), (2.0, -1.0));
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn parameters_update_independently() {
        let mut a = scalars();
        let mut b = scalars();
        let ga = backward(&a.w.add(&a.u.scale(-3.0).unwrap()).unwrap().sum_all().unwrap()).unwrap();
        let gb = backward(&b.w.sum_all().unwrap()).unwrap();
        let (mut oa, mut ob) = (Adam::new(0.1), Adam::new(0.1));
        oa.step(&mut a, &ga, 0.1, None).unwrap();
        ob.step(&mut b, &gb, 0.1, None).unwrap();
        assert_eq!(a.w.data(), b.w.data());
        assert_ne!(a.u.data(), b.u.data());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut m = scalars();
        let grads = backward(&m.u.scale(f64::INFINITY).unwrap().sum_all().unwrap()).unwrap();
        let err = Adam::new(0.1).step(&mut m, &grads, 0.1, None).unwrap_err().to_string();
        assert!(err.contains("u"), "{err}");
    }

    #[test]
    fn clipping_bounds_the_step_direction() {
        let mut m = scalars();
        let grads = backward(&m.w.scale(1e6).unwrap().sum_all().unwrap()).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut m, &grads, 0.1, Some(1.0)).unwrap();
        assert!((opt.moments["w"].0[0] - 0.1).abs() < 1e-12);
    }

    fn tiny_run() -> (ModelConfig, TrainConfig, Vec<MotionSequence>) {
        let model = ModelConfig {
            joints: 2,
            history: 4,
            total: 6,
            codec_hidden: 4,
            ssm: SsmConfig {
                expand: 1,
                state_dim: 2,
                conv_width: 2,
                dt_rank: None,
            },
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let data = synth_generate(&SynthSpec {
            sequences: 4,
            persons: 2,
            frames: 6,
            joints: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        (model, train, data)
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let (mc, tc, data) = tiny_run();
        let model = StMoeModel::new(mc).unwrap();
        let before = model.named_parameters();
        let mut tr = Trainer::new(model, tc, LossWeights::default()).unwrap();
        let log = tr.fit(&data, &[], 0, None, &mut |_, _| Ok(())).unwrap();
        assert!(log.is_empty());
        for ((_, a), (_, b)) in before.iter().zip(tr.model.named_parameters()) {
            assert_eq!(a, &b);
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_each_epoch() {
        let (mc, tc, data) = tiny_run();
        let run = || {
            let mut tr =
                Trainer::new(StMoeModel::new(mc.clone()).unwrap(), tc.clone(), LossWeights::default()).unwrap();
            tr.fit(&data, &data, 3, None, &mut |_, _| Ok(())).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(a[2].epoch, 3);
        assert!(a.iter().all(|r| r.val_jpe.unwrap() > 0.0));
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let (mc, tc, _) = tiny_run();
        let mut tr = Trainer::new(StMoeModel::new(mc).unwrap(), tc, LossWeights::default()).unwrap();
        assert!(tr.fit(&[], &[], 1, None, &mut |_, _| Ok(())).is_err());
    }
}
