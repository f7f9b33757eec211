//! The epoch loop: patch sampling, loss, backward pass, optimizer step and
//! per-epoch validation dice.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, sample_patch, AugmentConfig, VolumeCase};
use crate::error::{Error, Result};
use crate::inference::{binarize, labels_to_regions, predict_volume, Region, RegionKind, RegionMaps, WindowConfig};
use crate::losses::{clip_grad_norm, deep_supervision_loss, poly_lr, LossConfig, SgdNesterov, INITIAL_LR, MOMENTUM};
use crate::metrics::dice;
use crate::nn::Mode;
use crate::tensor::{DType, Tape, Tensor};
use crate::unet::{Network, NetworkSpec};

pub const FOREGROUND_PROB: f64 = 1.0 / 3.0;
pub const CLIP_NORM: f64 = 12.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub minibatches_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub initial_lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub foreground_prob: f64,
    pub augment: AugmentConfig,
    /// `None` uses the default weights for the network's supervised levels.
    pub loss: Option<LossConfig>,
    pub dtype: DType,
    /// Validate every n-th epoch and after the last one; 0 disables.
    pub validate_every: usize,
    pub window: WindowConfig,
}

impl TrainConfig {
    pub fn desk(epochs: usize, minibatches_per_epoch: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            minibatches_per_epoch,
            batch_size,
            seed,
            initial_lr: INITIAL_LR,
            momentum: MOMENTUM,
            clip_norm: Some(CLIP_NORM),
            foreground_prob: FOREGROUND_PROB,
            augment: AugmentConfig::default(),
            loss: None,
            dtype: DType::F32,
            validate_every: 1,
            window: WindowConfig::default(),
        }
    }

    /// 1000 epochs of 250 minibatches.
    pub fn paper(batch_size: usize, seed: u64) -> Self {
        Self::desk(1000, 250, batch_size, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.minibatches_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs, minibatches and batch size must be positive"));
        }
        if !(self.initial_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("learning rate must be positive and momentum in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.foreground_prob) {
            return Err(Error::config("foreground probability must lie in [0, 1]"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip norm must be positive"));
            }
        }
        self.augment.validate()?;
        self.window.validate()
    }
}

/// Which cases a training run sees.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FoldPlan {
    /// Train on every fold but `fold`, validate on `fold`.
    CrossValidation { folds: Vec<Vec<String>>, fold: usize },
    /// Train on everything, no validation set.
    AllCases,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// ET, TC, WT dice on the validation cases, when validated.
    pub val_dice: Option<[f64; 3]>,
}

impl fmt::Display for EpochRecord {
    /// `epoch=3 lr=0.00973 train_loss=0.8812 val_dice_et=0.5 val_dice_tc=0.6 val_dice_wt=0.7`;
    /// validation fields read `NaN` when the epoch was not validated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} lr={:e} train_loss={}", self.epoch, self.lr, self.train_loss)?;
        let v = self.val_dice.unwrap_or([f64::NAN; 3]);
        for (r, d) in Region::ALL.iter().zip(v) {
            write!(f, " val_dice_{}={}", r.name().to_lowercase(), d)?;
        }
        Ok(())
    }
}

impl FromStr for EpochRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for kv in line.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::format(format!("log field {kv:?} is not key=value")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| -> Result<f64> {
            fields
                .get(k)
                .ok_or_else(|| Error::format(format!("log line lacks {k}")))?
                .parse::<f64>()
                .map_err(|_| Error::format(format!("log field {k} is not a number")))
        };
        let dice = [get("val_dice_et")?, get("val_dice_tc")?, get("val_dice_wt")?];
        Ok(EpochRecord {
            epoch: get("epoch")? as usize,
            lr: get("lr")?,
            train_loss: get("train_loss")?,
            val_dice: if dice.iter().any(|d| d.is_nan()) { None } else { Some(dice) },
        })
    }
}

/// Seed of the RNG that composes minibatch `step` of `epoch`.
pub fn minibatch_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    let mut z = seed ^ ((epoch as u64) << 32 | step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `batch` augmented patches; returns images `[b, 4, p]` and region
/// targets `[b, 3, p]`.
pub fn compose_minibatch(
    cases: &[VolumeCase],
    rng: &mut ChaCha8Rng,
    batch: usize,
    patch: [usize; 3],
    cfg: &TrainConfig,
) -> Result<(Tensor, Tensor)> {
    if cases.is_empty() {
        return Err(Error::Empty("training cases".into()));
    }
    let pn: usize = patch.iter().product();
    let mut images = Vec::with_capacity(batch * 4 * pn);
    let mut targets = Vec::with_capacity(batch * 3 * pn);
    for _ in 0..batch {
        let case = &cases[rng.random_range(0..cases.len())];
        let p = sample_patch(case, rng, patch, cfg.foreground_prob)?;
        let (img, lab) = augment(&p.image, &p.labels, rng, &cfg.augment)?;
        images.extend_from_slice(img.data());
        targets.extend_from_slice(labels_to_regions(&lab).values().data());
    }
    let shape = |c: usize| vec![batch, c, patch[0], patch[1], patch[2]];
    Ok((
        Tensor::new(shape(4), images, cfg.dtype)?,
        Tensor::new(shape(3), targets, cfg.dtype)?,
    ))
}

/// Mean ET/TC/WT dice of thresholded sliding-window predictions on
/// preprocessed cases.
pub fn region_dice(net: &Network, cases: &[VolumeCase], window: &WindowConfig) -> Result<[f64; 3]> {
    if cases.is_empty() {
        return Err(Error::Empty("evaluation cases".into()));
    }
    let mut sum = [0.0; 3];
    for case in cases {
        let probs = predict_volume(net, &case.image, window)?;
        let pred = binarize(&RegionMaps::new(probs.map(|v| v.clamp(0.0, 1.0)), RegionKind::Probability)?, 0.5);
        let gt = labels_to_regions(&case.labels);
        for (i, r) in Region::ALL.into_iter().enumerate() {
            sum[i] += dice(&pred.mask(r), &gt.mask(r))?;
        }
    }
    Ok(sum.map(|s| s / cases.len() as f64))
}

pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<EpochRecord>,
}

/// Trains a fresh network on preprocessed cases. `on_epoch` sees every log
/// record as it is produced.
pub fn train(
    spec: &NetworkSpec,
    cases: &[VolumeCase],
    plan: &FoldPlan,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    let (train_cases, val_cases): (Vec<VolumeCase>, Vec<VolumeCase>) = match plan {
        FoldPlan::AllCases => (cases.to_vec(), Vec::new()),
        FoldPlan::CrossValidation { folds, fold } => {
            let val_ids = folds
                .get(*fold)
                .ok_or_else(|| Error::config(format!("fold {fold} out of range for {} folds", folds.len())))?;
            for id in folds.iter().flatten() {
                if !cases.iter().any(|c| &c.case_id == id) {
                    return Err(Error::config(format!("fold plan names unknown case {id}")));
                }
            }
            cases
                .iter()
                .filter(|c| folds.iter().flatten().any(|id| id == &c.case_id))
                .cloned()
                .partition(|c| !val_ids.contains(&c.case_id))
        }
    };
    if train_cases.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let loss_cfg = cfg
        .loss
        .clone()
        .unwrap_or_else(|| LossConfig::for_levels(spec.deep_supervision_levels.len()));
    let mut net = Network::new(spec.clone(), cfg.seed, cfg.dtype)?;
    let mut opt = SgdNesterov::new(cfg.momentum);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(epoch, cfg.initial_lr, cfg.epochs, crate::losses::LR_POWER)?;
        let mut loss_sum = 0.0;
        for step in 0..cfg.minibatches_per_epoch {
            let mut rng = ChaCha8Rng::seed_from_u64(minibatch_seed(cfg.seed, epoch, step));
            let (x, y) = compose_minibatch(&train_cases, &mut rng, cfg.batch_size, spec.patch_size, cfg)?;
            let mut tape = Tape::new();
            let bound = net.params.bind(&mut tape, true);
            let xv = tape.constant(x);
            let out = net.forward(&mut tape, &bound, xv, Mode::Train)?;
            let loss = deep_supervision_loss(&mut tape, &out.outputs, &y, &loss_cfg)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, step {step}"),
                });
            }
            loss_sum += value;
            let mut grads = tape.backward_scalar(loss)?;
            let mut named = BTreeMap::new();
            for (name, var) in bound.iter() {
                if let Some(g) = grads.take(*var) {
                    named.insert(name.clone(), g);
                }
            }
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut named, c);
            }
            opt.step(&mut net.params, &named, lr)
                .map_err(|e| Error::NonFinite {
                    context: format!("epoch {epoch}, step {step}: {e}"),
                })?;
            net.apply_stat_updates(&out.stat_updates)?;
        }
        let last = epoch + 1 == cfg.epochs;
        let validate = !val_cases.is_empty() && cfg.validate_every > 0 && ((epoch + 1) % cfg.validate_every == 0 || last);
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / cfg.minibatches_per_epoch as f64,
            val_dice: if validate { Some(region_dice(&net, &val_cases, &cfg.window)?) } else { None },
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome { network: net, log })
}
