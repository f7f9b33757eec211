//! Multi-head self-attention along single spatial axes, and the residual
//! decoder block that sums the three per-axis attentions.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{uniform, BoundParams};
use crate::tensor::counter::{with_category, MacCategory};
use crate::tensor::{DType, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    /// Position in a `[b, c, x, y, z]` tensor.
    pub fn dim(self) -> usize {
        match self {
            Axis::X => 2,
            Axis::Y => 3,
            Axis::Z => 4,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

/// Parameters of one axial attention block: projections `wq`, `wk`, `wv`
/// of shape `[channels, heads*head_dim]` and `wo` of shape
/// `[heads*head_dim, channels]`, either one set per axis or one shared set.
#[derive(Clone, Debug, PartialEq)]
pub struct AxialAttention {
    pub name: String,
    pub channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub shared_weights: bool,
    pub positional_encoding: bool,
}

impl AxialAttention {
    pub fn new(name: impl Into<String>, channels: usize, heads: usize, head_dim: usize) -> Result<Self> {
        if channels == 0 || heads == 0 || head_dim == 0 {
            return Err(Error::config("attention channels, heads and head_dim must be positive"));
        }
        Ok(AxialAttention {
            name: name.into(),
            channels,
            heads,
            head_dim,
            shared_weights: false,
            positional_encoding: false,
        })
    }

    pub fn inner(&self) -> usize {
        self.heads * self.head_dim
    }

    fn prefix(&self, axis: Axis) -> String {
        if self.shared_weights {
            self.name.clone()
        } else {
            format!("{}.{}", self.name, axis.tag())
        }
    }

    fn names(&self, axis: Axis) -> [String; 4] {
        let p = self.prefix(axis);
        ["wq", "wk", "wv", "wo"].map(|w| format!("{p}.{w}"))
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let axes: &[Axis] = if self.shared_weights { &[Axis::X] } else { &Axis::ALL };
        let (c, hd) = (self.channels, self.inner());
        axes.iter()
            .flat_map(|&a| {
                let [q, k, v, o] = self.names(a);
                [(q, vec![c, hd]), (k, vec![c, hd]), (v, vec![c, hd]), (o, vec![hd, c])]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Glorot-uniform projections.
    pub fn init(&self, rng: &mut ChaCha8Rng, dtype: DType) -> Result<Vec<(String, Tensor)>> {
        self.param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Ok((name, uniform(rng, &shape, bound, dtype)?))
            })
            .collect()
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.value(x).shape();
        if shape.len() != 5 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "attention expects [b, c, x, y, z]".into(),
            });
        }
        if shape[1] != self.channels {
            return Err(Error::ChannelMismatch {
                context: self.name.clone(),
                expected: self.channels,
                actual: shape[1],
            });
        }
        Ok(())
    }

    /// Scaled dot-product attention along every 1-D fiber of `axis`.
    pub fn axis_attention(&self, tape: &mut Tape, params: &BoundParams, x: Var, axis: Axis) -> Result<Var> {
        self.check_input(tape, x)?;
        let shape = tape.value(x).shape().to_vec();
        let a = axis.dim();
        let others: Vec<usize> = (2..5).filter(|&d| d != a).collect();
        let perm = [0, others[0], others[1], a, 1];
        let len = shape[a];
        let fibers = shape[0] * shape[others[0]] * shape[others[1]];
        let c = self.channels;

        let t = tape.permute(x, &perm)?;
        let permuted_shape = tape.value(t).shape().to_vec();
        let t = tape.reshape(t, &[fibers, len, c])?;
        let out = self.attend(tape, params, t, axis)?;
        let out = tape.reshape(out, &permuted_shape)?;
        let mut inverse = [0; 5];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        tape.permute(out, &inverse)
    }

    /// Attention over all `x*y*z` positions at once, with the weights of the
    /// x-axis set. Used for cost comparisons.
    pub fn full_attention(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let shape = tape.value(x).shape().to_vec();
        let n: usize = shape[2..].iter().product();
        let t = tape.permute(x, &[0, 2, 3, 4, 1])?;
        let t = tape.reshape(t, &[shape[0], n, self.channels])?;
        let out = self.attend(tape, params, t, Axis::X)?;
        let out = tape.reshape(out, &[shape[0], shape[2], shape[3], shape[4], self.channels])?;
        tape.permute(out, &[0, 4, 1, 2, 3])
    }

    /// Residual block: `x + sum over axes of axis_attention(x, axis)`.
    pub fn block(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let mut acc = x;
        for axis in Axis::ALL {
            let y = self.axis_attention(tape, params, x, axis)?;
            acc = tape.add(acc, y)?;
        }
        Ok(acc)
    }

    /// `tokens` is `[fibers, len, channels]`.
    fn attend(&self, tape: &mut Tape, params: &BoundParams, tokens: Var, axis: Axis) -> Result<Var> {
        let shape = tape.value(tokens).shape().to_vec();
        let (f, len) = (shape[0], shape[1]);
        let (h, d) = (self.heads, self.head_dim);
        let [q, k, v, o] = self.names(axis).map(|n| params.get(&n));
        let (wq, wk, wv, wo) = (q?, k?, v?, o?);

        let mut t = tokens;
        if self.positional_encoding {
            let dtype = tape.value(tokens).dtype();
            let pe = tape.constant(sinusoid(len, self.channels, dtype)?);
            t = tape.add(t, pe)?;
        }
        let (q, k, v) = with_category(MacCategory::Projection, || -> Result<_> {
            Ok((tape.matmul(t, wq)?, tape.matmul(t, wk)?, tape.matmul(t, wv)?))
        })?;
        let q = tape.reshape(q, &[f, len, h, d])?;
        let q = tape.permute(q, &[0, 2, 1, 3])?;
        let k = tape.reshape(k, &[f, len, h, d])?;
        let kt = tape.permute(k, &[0, 2, 3, 1])?;
        let v = tape.reshape(v, &[f, len, h, d])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;

        let scores = with_category(MacCategory::Score, || tape.matmul(q, kt))?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let weights = tape.softmax(scores)?;
        let mixed = with_category(MacCategory::Weighted, || tape.matmul(weights, v))?;
        let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = tape.reshape(mixed, &[f, len, h * d])?;
        with_category(MacCategory::Output, || tape.matmul(mixed, wo))
    }
}

/// Standard sine/cosine encoding of shape `[len, channels]`.
pub fn sinusoid(len: usize, channels: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0.0; len * channels];
    for pos in 0..len {
        for i in 0..channels {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / channels as f64);
            let angle = pos as f64 * freq;
            data[pos * channels + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, channels], data, dtype)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// The residual block: one attention per spatial axis.
    Axial,
    /// Attention along a single axis.
    SingleAxis(Axis),
    /// Attention over every position.
    Full,
}

/// Multiply-accumulate counts of one forward pass for a single sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionCost {
    pub projection: u64,
    pub score: u64,
    pub weighted: u64,
    pub output: u64,
}

impl AttentionCost {
    pub fn total(&self) -> u64 {
        self.projection + self.score + self.weighted + self.output
    }
}

/// Closed-form MAC count. With `N` positions, `hd = heads*head_dim` and
/// attended sequence length `L`, one attention costs `3*N*c*hd` for the
/// projections, `N*L*hd` each for scores and weighting, and `N*hd*c` for the
/// output projection.
pub fn attention_cost(shape: [usize; 3], channels: usize, heads: usize, head_dim: usize, kind: AttentionKind) -> AttentionCost {
    let n = shape.iter().product::<usize>() as u64;
    let (c, hd) = (channels as u64, (heads * head_dim) as u64);
    let one = |len: u64| AttentionCost {
        projection: 3 * n * c * hd,
        score: n * len * hd,
        weighted: n * len * hd,
        output: n * hd * c,
    };
    match kind {
        AttentionKind::Full => one(n),
        AttentionKind::SingleAxis(a) => one(shape[a.dim() - 2] as u64),
        AttentionKind::Axial => Axis::ALL.iter().fold(AttentionCost::default(), |acc, a| {
            let part = one(shape[a.dim() - 2] as u64);
            AttentionCost {
                projection: acc.projection + part.projection,
                score: acc.score + part.score,
                weighted: acc.weighted + part.weighted,
                output: acc.output + part.output,
            }
        }),
    }
}

/// Least-squares slope of `ln(y)` against `ln(x)`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;

    fn setup(att: &AxialAttention, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (k, t) in att.init(&mut rng, DType::F64).unwrap() {
            store.insert(k, t);
        }
        store
    }

    #[test]
    fn parameter_layout() {
        let mut att = AxialAttention::new("a", 8, 2, 4).unwrap();
        assert_eq!(att.param_count(), 3 * 4 * 8 * 8);
        att.shared_weights = true;
        assert_eq!(att.param_count(), 4 * 8 * 8);
    }

    #[test]
    fn cost_examples() {
        let s1 = attention_cost([1, 1, 1], 4, 2, 3, AttentionKind::Full);
        assert_eq!(s1, attention_cost([1, 1, 1], 4, 2, 3, AttentionKind::SingleAxis(Axis::Y)));
        let a4 = attention_cost([4; 3], 4, 2, 3, AttentionKind::Axial);
        let a8 = attention_cost([8; 3], 4, 2, 3, AttentionKind::Axial);
        let f4 = attention_cost([4; 3], 4, 2, 3, AttentionKind::Full);
        let f8 = attention_cost([8; 3], 4, 2, 3, AttentionKind::Full);
        assert_eq!(a4.score, 3 * 4u64.pow(4) * 6);
        assert_eq!(a8.score, 16 * a4.score);
        assert_eq!(f8.score, 64 * f4.score);
        assert!((f8.score as f64 / a8.score as f64 - 512.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [4.0, 8.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(4)).collect();
        assert!((loglog_slope(&xs, &ys) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_identity() {
        let att = AxialAttention::new("a", 3, 1, 2).unwrap();
        let mut store = setup(&att, 1);
        for (_, t) in store.iter_mut() {
            *t = t.map(|_| 0.0);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.constant(uniform(&mut rng, &[2, 3, 2, 3, 4], 1.0, DType::F64).unwrap());
        let y = att.block(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }
}
