//! Region loss (BCE + soft dice), deep-supervision weighting, the polynomial
//! learning-rate schedule and SGD with Nesterov momentum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

pub const DICE_SMOOTH: f64 = 1e-5;
pub const INITIAL_LR: f64 = 0.01;
pub const LR_POWER: f64 = 0.9;
pub const MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceMode {
    /// Pools the batch axis into the dice sums.
    Batch,
    /// Averages one dice per sample.
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub dice_mode: DiceMode,
    pub smooth: f64,
    /// One weight per supervised output, highest resolution first.
    pub weights: Vec<f64>,
}

impl LossConfig {
    /// Batch dice with weights proportional to `1 / 2^level`, normalized.
    pub fn for_levels(levels: usize) -> Self {
        let raw: Vec<f64> = (0..levels).map(|l| 0.5f64.powi(l as i32)).collect();
        let total: f64 = raw.iter().sum();
        LossConfig {
            dice_mode: DiceMode::Batch,
            smooth: DICE_SMOOTH,
            weights: raw.into_iter().map(|w| w / total).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.smooth > 0.0) {
            return Err(Error::config("dice smoothing must be positive"));
        }
        if self.weights.is_empty() || self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("deep-supervision weights must be non-negative and non-empty"));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("deep-supervision weights must sum to 1, got {:?}", self.weights)));
        }
        Ok(())
    }
}

fn check_targets(logits: &Tensor, targets: &Tensor) -> Result<()> {
    if logits.shape() != targets.shape() || logits.rank() != 5 {
        return Err(Error::ShapeMismatch {
            context: "loss targets".into(),
            expected: logits.shape().to_vec(),
            actual: targets.shape().to_vec(),
        });
    }
    if let Some(i) = targets.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::config(format!("targets must be binary, found {} at {i}", targets.data()[i])));
    }
    Ok(())
}

/// Mean soft dice over region channels of `[b, c, x, y, z]` probabilities.
pub fn soft_dice(tape: &mut Tape, probs: Var, targets: Var, mode: DiceMode, smooth: f64) -> Result<Var> {
    let axes: &[usize] = match mode {
        DiceMode::Batch => &[0, 2, 3, 4],
        DiceMode::Sample => &[2, 3, 4],
    };
    let pt = tape.mul(probs, targets)?;
    let inter = tape.sum(pt, axes, false)?;
    let sp = tape.sum(probs, axes, false)?;
    let st = tape.sum(targets, axes, false)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.shift(num, smooth)?;
    let den = tape.add(sp, st)?;
    let den = tape.shift(den, smooth)?;
    let dice = tape.div(num, den)?;
    tape.mean_all(dice)
}

/// Mean binary cross-entropy plus `1 - dice`.
pub fn bce_dice_loss(tape: &mut Tape, logits: Var, targets: &Tensor, mode: DiceMode, smooth: f64) -> Result<Var> {
    check_targets(tape.value(logits), targets)?;
    let t = tape.constant(targets.to_dtype(tape.value(logits).dtype()));
    let bce = tape.bce_with_logits(logits, t)?;
    let bce = tape.mean_all(bce)?;
    let p = tape.sigmoid(logits)?;
    let dice = soft_dice(tape, p, t, mode, smooth)?;
    let one_minus = tape.scale(dice, -1.0)?;
    let one_minus = tape.shift(one_minus, 1.0)?;
    tape.add(bce, one_minus)
}

/// Nearest-neighbor subsampling of `[b, c, x, y, z]` taking index `i * factor`.
pub fn downsample_nearest(t: &Tensor, factor: [usize; 3]) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 5 || factor.contains(&0) || (0..3).any(|a| s[a + 2] % factor[a] != 0) {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("cannot subsample by {factor:?}"),
        });
    }
    let out_e = [0, 1, 2].map(|a| s[a + 2] / factor[a]);
    let mut out = Vec::with_capacity(s[0] * s[1] * out_e.iter().product::<usize>());
    for bc in 0..s[0] * s[1] {
        for x in 0..out_e[0] {
            for y in 0..out_e[1] {
                for z in 0..out_e[2] {
                    out.push(t.data()[((bc * s[2] + x * factor[0]) * s[3] + y * factor[1]) * s[4] + z * factor[2]]);
                }
            }
        }
    }
    Tensor::new(vec![s[0], s[1], out_e[0], out_e[1], out_e[2]], out, t.dtype())
}

/// Weighted sum of the region loss at every output against targets
/// subsampled to that output's resolution.
pub fn deep_supervision_loss(tape: &mut Tape, outputs: &[Var], targets: &Tensor, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    if outputs.len() != cfg.weights.len() {
        return Err(Error::config(format!(
            "{} supervised outputs but {} weights",
            outputs.len(),
            cfg.weights.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&out, &w) in outputs.iter().zip(&cfg.weights) {
        let os = tape.value(out).shape().to_vec();
        let ts = targets.shape();
        if os.len() != 5 || ts.len() != 5 || os[..2] != ts[..2] || (2..5).any(|a| os[a] == 0 || ts[a] % os[a] != 0) {
            return Err(Error::ShapeMismatch {
                context: "deep-supervision output".into(),
                expected: ts.to_vec(),
                actual: os,
            });
        }
        let t = downsample_nearest(targets, [ts[2] / os[2], ts[3] / os[3], ts[4] / os[4]])?;
        let l = bce_dice_loss(tape, out, &t, cfg.dice_mode, cfg.smooth)?;
        let l = tape.scale(l, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Empty("deep-supervision outputs".into()))
}

/// `initial * (1 - epoch / total)^power` for `0 <= epoch < total`.
pub fn poly_lr(epoch: usize, initial: f64, total: usize, power: f64) -> Result<f64> {
    if epoch >= total {
        return Err(Error::EpochOutOfRange { epoch, total });
    }
    Ok(initial * (1.0 - epoch as f64 / total as f64).powf(power))
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
            g.renormalize();
        }
    }
    norm
}

/// SGD with (optionally Nesterov) momentum:
/// `v <- mu v + g`, then `p <- p - lr (g + mu v)` (Nesterov) or `p <- p - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdNesterov {
    pub momentum: f64,
    pub nesterov: bool,
    pub buffers: BTreeMap<String, Vec<f64>>,
}

impl SgdNesterov {
    pub fn new(momentum: f64) -> Self {
        SgdNesterov {
            momentum,
            nesterov: true,
            buffers: BTreeMap::new(),
        }
    }

    /// Parameters without a gradient entry are treated as having zero
    /// gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    context: format!("gradient of {name}"),
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of {name}"),
                });
            }
        }
        let mu = self.momentum;
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let buf = self.buffers.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name);
            for (i, (pv, v)) in p.data_mut().iter_mut().zip(buf.iter_mut()).enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                *v = mu * *v + gi;
                let d = if self.nesterov { gi + mu * *v } else { *v };
                *pv -= lr * d;
            }
            p.renormalize();
        }
        Ok(())
    }
}
