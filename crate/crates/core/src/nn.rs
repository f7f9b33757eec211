//! Convolution and normalization layers over a named parameter store.
//!
//! Layers are plain descriptors. Their trainable tensors live in a
//! [`ParamStore`] keyed by `"<layer>.weight"`, `"<layer>.bias"`,
//! `"<layer>.gamma"` and `"<layer>.beta"`; a forward pass first binds the
//! store onto a [`Tape`] and then looks the variables up by name.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::{group_stats, Grouping};
use crate::tensor::{DType, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Group(usize),
}

/// A 3-D convolution, or its transpose when `transposed` is set.
///
/// Weight layout is `[out, in, kx, ky, kz]` for ordinary convolutions and
/// `[in, out, kx, ky, kz]` for transposed ones.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub transposed: bool,
    pub bias: bool,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let layer = ConvLayer {
            name: name.into(),
            in_ch,
            out_ch,
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [padding; 3],
            transposed: false,
            bias: true,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Kernel-2 stride-2 transposed convolution that doubles every extent.
    pub fn upsample(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Result<Self> {
        let layer = ConvLayer {
            name: name.into(),
            in_ch,
            out_ch,
            kernel: [2; 3],
            stride: [2; 3],
            padding: [0; 3],
            transposed: true,
            bias: true,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Drops the bias, e.g. when a normalization layer follows.
    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::config(format!("{}: channel counts must be positive", self.name)));
        }
        if self.kernel.contains(&0) {
            return Err(Error::config(format!("{}: kernel extents must be positive", self.name)));
        }
        if self.stride.iter().any(|s| !matches!(s, 1 | 2)) {
            return Err(Error::config(format!("{}: stride must be 1 or 2 per axis, got {:?}", self.name, self.stride)));
        }
        if !self.transposed && self.stride == [1; 3] && self.kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::config(format!(
                "{}: same-resolution convolution needs odd kernel extents, got {:?}",
                self.name, self.kernel
            )));
        }
        Ok(())
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let [kx, ky, kz] = self.kernel;
        if self.transposed {
            vec![self.in_ch, self.out_ch, kx, ky, kz]
        } else {
            vec![self.out_ch, self.in_ch, kx, ky, kz]
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.out_ch } else { 0 }
    }

    /// Fan-in scaled uniform weights, zero bias.
    pub fn init(&self, rng: &mut ChaCha8Rng, dtype: DType) -> Result<Vec<(String, Tensor)>> {
        let shape = self.weight_shape();
        let kvol: usize = self.kernel.iter().product();
        let fan_in = if self.transposed { self.out_ch } else { self.in_ch } * kvol;
        let weight = uniform(rng, &shape, (6.0 / fan_in as f64).sqrt(), dtype)?;
        let mut out = vec![(self.weight_name(), weight)];
        if self.bias {
            out.push((self.bias_name(), Tensor::zeros(&[self.out_ch], dtype)?));
        }
        Ok(out)
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let c = tape.value(x).shape().get(1).copied().unwrap_or(0);
        if tape.value(x).rank() != 5 || c != self.in_ch {
            return Err(Error::ChannelMismatch {
                context: self.name.clone(),
                expected: self.in_ch,
                actual: c,
            });
        }
        let w = params.get(&self.weight_name())?;
        let b = if self.bias {
            params.get(&self.bias_name())?
        } else {
            let dtype = tape.value(w).dtype();
            tape.constant(Tensor::zeros(&[self.out_ch], dtype)?)
        };
        if self.transposed {
            tape.conv_transpose3d(x, w, b, self.stride, self.padding)
        } else {
            tape.conv3d(x, w, b, self.stride, self.padding)
        }
    }
}

/// Symmetric uniform initialization in `[-bound, bound)`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64, dtype: DType) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data, dtype)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub name: String,
    pub channels: usize,
    pub kind: NormKind,
    pub eps: f64,
}

impl NormLayer {
    pub fn new(name: impl Into<String>, channels: usize, kind: NormKind) -> Result<Self> {
        let name = name.into();
        if let NormKind::Group(g) = kind {
            if g == 0 || channels % g != 0 {
                return Err(Error::config(format!(
                    "{name}: {channels} channels not divisible into {g} groups"
                )));
            }
        }
        Ok(NormLayer {
            name,
            channels,
            kind,
            eps: NORM_EPS,
        })
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.name)
    }

    pub fn beta_name(&self) -> String {
        format!("{}.beta", self.name)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn init(&self, dtype: DType) -> Result<Vec<(String, Tensor)>> {
        Ok(vec![
            (self.gamma_name(), Tensor::full(&[self.channels], 1.0, dtype)?),
            (self.beta_name(), Tensor::zeros(&[self.channels], dtype)?),
        ])
    }

    /// Normalizes `x`. In batch-norm training mode the returned update holds
    /// this batch's statistics for [`RunningStats::update`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        stats: Option<&RunningStats>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(Error::ChannelMismatch {
                context: self.name.clone(),
                expected: self.channels,
                actual: shape.get(1).copied().unwrap_or(0),
            });
        }
        let gamma = params.get(&self.gamma_name())?;
        let beta = params.get(&self.beta_name())?;
        match (self.kind, mode) {
            (NormKind::Group(g), _) => Ok((tape.group_norm(x, gamma, beta, g, self.eps)?, None)),
            (NormKind::Batch, Mode::Train) => {
                let batch = BatchStats::of(&self.name, tape.value(x));
                Ok((tape.batch_norm_train(x, gamma, beta, self.eps)?, Some(batch)))
            }
            (NormKind::Batch, Mode::Infer) => {
                let stats = stats.ok_or_else(|| Error::UninitializedStats {
                    layer: self.name.clone(),
                })?;
                if !stats.is_initialized() {
                    return Err(Error::UninitializedStats {
                        layer: self.name.clone(),
                    });
                }
                let y = self.apply_running(tape, stats, gamma, beta, x)?;
                Ok((y, None))
            }
        }
    }

    fn apply_running(&self, tape: &mut Tape, stats: &RunningStats, gamma: Var, beta: Var, x: Var) -> Result<Var> {
        let rank = tape.value(x).rank();
        let dtype = tape.value(x).dtype();
        let mut bshape = vec![1; rank];
        bshape[1] = self.channels;
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mean = tape.constant(Tensor::new(bshape.clone(), stats.mean.clone(), DType::F64)?.to_dtype(dtype));
        let inv = tape.constant(Tensor::new(bshape.clone(), inv_std, DType::F64)?.to_dtype(dtype));
        let gamma = tape.reshape(gamma, &bshape)?;
        let beta = tape.reshape(beta, &bshape)?;
        let y = tape.sub(x, mean)?;
        let y = tape.mul(y, inv)?;
        let y = tape.mul(y, gamma)?;
        tape.add(y, beta)
    }
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub layer: String,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

impl BatchStats {
    pub fn of(layer: &str, x: &Tensor) -> Self {
        let shape = x.shape();
        let (b, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let (mean, var, n) = group_stats(x.data(), b, c, spatial, Grouping::Batch);
        let correction = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        BatchStats {
            layer: layer.to_string(),
            mean,
            var: var.iter().map(|v| v * correction).collect(),
        }
    }
}

/// Exponential moving averages used by batch norm at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub batches: u64,
    pub momentum: f64,
}

impl RunningStats {
    /// Fresh stats that refuse inference until a training step or
    /// [`RunningStats::initialized`].
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            batches: 0,
            momentum: BN_MOMENTUM,
        }
    }

    /// Mean 0 / variance 1 stats that are usable for inference immediately.
    pub fn initialized(channels: usize) -> Self {
        RunningStats {
            batches: 1,
            ..RunningStats::new(channels)
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.batches > 0
    }

    pub fn update(&mut self, batch: &BatchStats) -> Result<()> {
        if batch.mean.len() != self.mean.len() {
            return Err(Error::ChannelMismatch {
                context: batch.layer.clone(),
                expected: self.mean.len(),
                actual: batch.mean.len(),
            });
        }
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - m) * *r + m * b;
        }
        self.batches += 1;
        Ok(())
    }
}

/// Named trainable tensors in deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Places every tensor on the tape: tracked leaves when `track`,
    /// constants otherwise.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if track { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Tape variables for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn bind_one(layer: &ConvLayer, w: Tensor, b: Tensor) -> (Tape, BoundParams) {
        let mut store = ParamStore::new();
        store.insert(layer.weight_name(), w);
        store.insert(layer.bias_name(), b);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        (tape, bound)
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let layer = ConvLayer::new("c", 1, 1, 1, 1, 0).unwrap();
        let w = Tensor::full(&[1, 1, 1, 1, 1], 1.0, DType::F64).unwrap();
        let (mut tape, bound) = bind_one(&layer, w, Tensor::zeros(&[1], DType::F64).unwrap());
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.75], DType::F64).unwrap());
        let y = layer.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.75]);
    }

    #[test]
    fn all_ones_kernel_sums_neighbourhood() {
        let layer = ConvLayer::new("c", 1, 1, 3, 1, 1).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0, DType::F64).unwrap();
        let (mut tape, bound) = bind_one(&layer, w, Tensor::zeros(&[1], DType::F64).unwrap());
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0, DType::F64).unwrap());
        let y = layer.forward(&mut tape, &bound, x).unwrap();
        let y = tape.value(y);
        // direct summation over in-bounds neighbours
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let span = |c: usize| if c == 1 { 3.0 } else { 2.0 };
                    assert_eq!(y.get(&[0, 0, i, j, k]), span(i) * span(j) * span(k));
                }
            }
        }
        assert_eq!(y.get(&[0, 0, 1, 1, 1]), 27.0);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let layer = ConvLayer::new("enc", 4, 8, 3, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        for (k, t) in layer.init(&mut rng, DType::F64).unwrap() {
            store.insert(k, t);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4, 4], DType::F64).unwrap());
        let err = layer.forward(&mut tape, &bound, x).unwrap_err();
        assert!(matches!(err, Error::ChannelMismatch { expected: 4, actual: 3, .. }));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ConvLayer::new("c", 1, 1, 2, 1, 0).is_err());
        assert!(ConvLayer::new("c", 1, 1, 3, 3, 1).is_err());
        assert!(NormLayer::new("n", 6, NormKind::Group(4)).is_err());
        assert!(NormLayer::new("n", 64, NormKind::Group(32)).is_ok());
    }

    #[test]
    fn param_counts() {
        assert_eq!(ConvLayer::new("c", 1, 1, 1, 1, 0).unwrap().param_count(), 2);
        assert_eq!(ConvLayer::new("c", 4, 8, 3, 1, 1).unwrap().param_count(), 4 * 8 * 27 + 8);
        assert_eq!(ConvLayer::upsample("u", 16, 8).unwrap().param_count(), 16 * 8 * 8 + 8);
        assert_eq!(ConvLayer::new("c", 4, 8, 3, 1, 1).unwrap().without_bias().param_count(), 4 * 8 * 27);
    }

    #[test]
    fn ema_matches_hand_iteration() {
        let mut stats = RunningStats::new(1);
        let (mut m, mut v) = (0.0, 1.0);
        for step in 0..10 {
            let bm = step as f64 * 0.3 - 1.0;
            let bv = 0.5 + step as f64 * 0.1;
            stats
                .update(&BatchStats {
                    layer: "n".into(),
                    mean: vec![bm],
                    var: vec![bv],
                })
                .unwrap();
            m = 0.9 * m + 0.1 * bm;
            v = 0.9 * v + 0.1 * bv;
        }
        assert!((stats.mean[0] - m).abs() < 1e-10);
        assert!((stats.var[0] - v).abs() < 1e-10);
        assert_eq!(stats.batches, 10);
    }
}
