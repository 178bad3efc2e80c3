//! Epoch loop: seeded shuffling, Adam steps on the BCE + Dice loss, a cosine
//! learning rate per epoch and test evaluation after every epoch.

use std::fmt::Write as _;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{batch, SamplePair};
use crate::error::{config_err, Error, Result};
use crate::loss::LossConfig;
use crate::metrics::{threshold_batch, MetricsReport};
use crate::model::GdcUnetModel;
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub total_epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Random horizontal flips of training pairs.
    pub flip_augment: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr_init: 1e-4,
            lr_min: 1e-5,
            beta1: 0.0,
            beta2: 0.99,
            adam_eps: 1e-8,
            total_epochs: 30,
            seed: 0,
            weight_decay: 0.0,
            grad_clip: None,
            flip_augment: false,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_epochs == 0 {
            return config_err("batch size and epoch count must be positive");
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_init) {
            return config_err(format!("need 0 < lr_min ({}) <= lr_init ({})", self.lr_min, self.lr_init));
        }
        self.adam().validate()
    }
}

/// Half-cosine from `lr_init` at epoch 0 to `lr_min` at the last epoch.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::Usage(format!("epoch {epoch} outside 0..{}", cfg.total_epochs)));
    }
    if cfg.total_epochs == 1 {
        return Ok(cfg.lr_init);
    }
    let w = 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / (cfg.total_epochs - 1) as f64).cos());
    // written as a convex combination so both endpoints are exact
    Ok(cfg.lr_init * w + cfg.lr_min * (1.0 - w))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample training loss over the epoch.
    pub train_loss: f64,
    /// Mean test metrics.
    pub test: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct BestScore<T: Scalar> {
    pub epoch: usize,
    pub report: MetricsReport,
    pub model: GdcUnetModel<T>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub log: Vec<EpochRecord>,
    /// Highest test IoU; ties keep the earlier epoch.
    pub best: BestScore<T>,
    pub optimizer: OptimizerState,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn log_csv(&self) -> String {
        epoch_log_csv(&self.log)
    }
}

pub fn epoch_log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,test_iou,test_dice\n");
    for r in log {
        let _ = writeln!(out, "{},{:e},{},{},{}", r.epoch, r.lr, r.train_loss, r.test.iou, r.test.dice);
    }
    out
}

/// Per-image reports for `samples`, run in batches of `batch_size`.
pub fn evaluate<T: Scalar>(model: &GdcUnetModel<T>, samples: &[SamplePair], batch_size: usize) -> Result<Vec<MetricsReport>> {
    let mut out = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = batch::<T>(samples, chunk)?;
        let preds = threshold_batch(&model.forward(&x)?)?;
        for (p, &i) in preds.iter().zip(chunk) {
            out.push(MetricsReport::evaluate(p, &samples[i].mask)?);
        }
    }
    Ok(out)
}

/// Mirrors image and mask left to right.
pub fn flip_horizontal(s: &SamplePair) -> SamplePair {
    let w = s.mask.width();
    let image = Tensor::from_fn(s.image.shape(), |b, i, j, c| s.image.at(b, i, w - 1 - j, c));
    let mask = crate::metrics::BinaryMask::from_fn(s.mask.height(), w, |i, j| s.mask.get(i, w - 1 - j));
    SamplePair { id: s.id.clone(), image, mask }
}

/// Forward, backward and one Adam step on the given batch. Returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut GdcUnetModel<T>,
    state: &mut OptimizerState,
    x: &Tensor<T>,
    y: &Tensor<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let logits = model.forward_tape(&mut tape, &bound, xv, None)?;
    let loss = tape.bce_dice(logits, y, cfg.loss)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Training(format!("loss became {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let grads = model.params.collect_grads(&mut grads, &bound);
    adam_step(&mut model.params, &grads, state, lr, &cfg.adam())?;
    Ok(value)
}

/// Trains in place. `observer` sees every epoch record and may stop the run
/// early; the schedule still spans `cfg.total_epochs`.
pub fn train_with<T: Scalar>(
    model: &mut GdcUnetModel<T>,
    train_set: &[SamplePair],
    test_set: &[SamplePair],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return config_err(format!("empty split: {} train, {} test", train_set.len(), test_set.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(&model.params);
    let mut log = Vec::new();
    let mut best: Option<BestScore<T>> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.total_epochs {
        let lr = cosine_lr(epoch, cfg)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = if cfg.flip_augment {
                let flipped: Vec<SamplePair> = chunk
                    .iter()
                    .map(|&i| if rng.gen_bool(0.5) { flip_horizontal(&train_set[i]) } else { train_set[i].clone() })
                    .collect();
                batch::<T>(&flipped, &(0..flipped.len()).collect::<Vec<_>>())?
            } else {
                batch::<T>(train_set, chunk)?
            };
            let l = train_step(model, &mut state, &x, &y, lr, cfg)?;
            loss_sum += l * chunk.len() as f64;
        }
        let reports = evaluate(model, test_set, cfg.batch_size)?;
        let test = MetricsReport::mean(&reports).expect("test split is non-empty");
        let record = EpochRecord { epoch, lr, train_loss: loss_sum / train_set.len() as f64, test };
        if best.as_ref().map_or(true, |b| record.test.iou > b.report.iou) {
            best = Some(BestScore { epoch, report: record.test, model: model.clone() });
        }
        let flow = observer(&record);
        log.push(record);
        if flow.is_break() {
            break;
        }
    }
    Ok(TrainOutcome { log, best: best.expect("at least one epoch ran"), optimizer: state })
}

pub fn train<T: Scalar>(
    model: &mut GdcUnetModel<T>,
    train_set: &[SamplePair],
    test_set: &[SamplePair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(model, train_set, test_set, cfg, |_| ControlFlow::Continue(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_set, SynthConfig};
    use crate::model::GdcUnetConfig;

    fn tiny_model() -> GdcUnetModel<f64> {
        let cfg = GdcUnetConfig { base_channels: 4, depth: 2, safd_encoder_levels: vec![1], safd_decoder_levels: vec![], incentive_level: Some(1), incentive_kernel: 3, ..GdcUnetConfig::with_setting(3) };
        GdcUnetModel::build(cfg, 5).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig { total_epochs: 201, ..TrainConfig::default() };
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 1e-4);
        assert_eq!(cosine_lr(200, &cfg).unwrap(), 1e-5);
        assert!((cosine_lr(100, &cfg).unwrap() - 5.5e-5).abs() < 1e-18);
        assert!(matches!(cosine_lr(201, &cfg), Err(Error::Usage(_))));
        let one = TrainConfig { total_epochs: 1, ..cfg };
        assert_eq!(cosine_lr(0, &one).unwrap(), 1e-4);
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig { lr_min: 1e-3, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn empty_split_is_config_error() {
        let data = synth_set(0, 2, &SynthConfig { size: 16, ..SynthConfig::default() }).unwrap();
        let mut m = tiny_model();
        assert!(matches!(train(&mut m, &data, &[], &TrainConfig::default()), Err(Error::Config(_))));
        assert!(matches!(train(&mut m, &[], &data, &TrainConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn short_run_logs_and_tracks_best() {
        let data = synth_set(0, 5, &SynthConfig { size: 16, ..SynthConfig::default() }).unwrap();
        let cfg = TrainConfig { total_epochs: 3, batch_size: 2, lr_init: 1e-2, lr_min: 1e-3, ..TrainConfig::default() };
        let mut m = tiny_model();
        let out = train(&mut m, &data[..3], &data[3..], &cfg).unwrap();
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.optimizer.t, 6);
        let max = out.log.iter().map(|r| r.test.iou).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best.report.iou, max);
        assert!(out.best.report.iou >= out.log.last().unwrap().test.iou);
        assert_eq!(out.log_csv().lines().count(), 4);

        let mut m2 = tiny_model();
        let again = train(&mut m2, &data[..3], &data[3..], &cfg).unwrap();
        assert_eq!(again.log, out.log);
        assert_eq!(m2.params, m.params);
    }

    #[test]
    fn observer_can_stop() {
        let data = synth_set(0, 2, &SynthConfig { size: 16, ..SynthConfig::default() }).unwrap();
        let cfg = TrainConfig { total_epochs: 10, ..TrainConfig::default() };
        let mut m = tiny_model();
        let out = train_with(&mut m, &data[..1], &data[1..], &cfg, |r| {
            if r.epoch == 1 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) }
        })
        .unwrap();
        assert_eq!(out.log.len(), 2);
        assert_eq!(out.log[1].lr, cosine_lr(1, &cfg).unwrap());
    }

    #[test]
    fn flip_is_an_involution() {
        let s = &synth_set(4, 1, &SynthConfig { size: 12, ..SynthConfig::default() }).unwrap()[0];
        assert_eq!(&flip_horizontal(&flip_horizontal(s)), s);
    }
}
