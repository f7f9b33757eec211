//! Model presets, the network description and its forward pass.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AxialAttention;
use crate::error::{Error, Result};
use crate::nn::{BatchStats, BoundParams, ConvLayer, Mode, NormKind, NormLayer, ParamStore, RunningStats, LEAKY_SLOPE};
use crate::tensor::{DType, Tape, Tensor, Var};

pub const IN_CHANNELS: usize = 4;
pub const OUT_REGIONS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "BL")]
    Bl,
    #[serde(rename = "BL+L")]
    BlL,
    #[serde(rename = "BL+GN")]
    BlGn,
    #[serde(rename = "BL+AA")]
    BlAa,
    #[serde(rename = "BL+L+GN")]
    BlLGn,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Bl, Preset::BlL, Preset::BlGn, Preset::BlAa, Preset::BlLGn];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Bl => "BL",
            Preset::BlL => "BL+L",
            Preset::BlGn => "BL+GN",
            Preset::BlAa => "BL+AA",
            Preset::BlLGn => "BL+L+GN",
        }
    }

    pub fn batch_size(self) -> usize {
        match self {
            Preset::Bl => 5,
            _ => 2,
        }
    }

    pub fn large_encoder(self) -> bool {
        matches!(self, Preset::BlL | Preset::BlLGn)
    }

    pub fn group_norm(self) -> bool {
        matches!(self, Preset::BlGn | Preset::BlLGn)
    }

    pub fn attention(self) -> bool {
        self == Preset::BlAa
    }

    /// BL+L was trained on every case rather than per fold.
    pub fn trains_without_folds(self) -> bool {
        self == Preset::BlL
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace(['-', '_'], "+");
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| Error::config(format!("unknown preset {s:?}; expected one of BL, BL+L, BL+GN, BL+AA, BL+L+GN")))
    }
}

/// Size constants shared by every preset at one scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub patch: usize,
    pub levels: usize,
    pub channel_start: usize,
    pub channel_cap: usize,
    /// Cap used by the large-encoder presets.
    pub large_channel_cap: usize,
    pub norm_groups: usize,
    pub attention_heads: usize,
    pub attention_head_dim: usize,
    /// Number of highest-resolution levels without attention.
    pub attention_skip_top: usize,
}

impl ScaleConfig {
    pub fn paper() -> Self {
        ScaleConfig {
            patch: 128,
            levels: 5,
            channel_start: 32,
            channel_cap: 320,
            large_channel_cap: 512,
            norm_groups: 32,
            attention_heads: 4,
            attention_head_dim: 16,
            attention_skip_top: 1,
        }
    }

    pub fn desk() -> Self {
        ScaleConfig {
            patch: 32,
            levels: 4,
            channel_start: 8,
            channel_cap: 64,
            large_channel_cap: 128,
            norm_groups: 4,
            attention_heads: 2,
            attention_head_dim: 4,
            attention_skip_top: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub skip_top: usize,
    /// Heads and head width at the first attended level; both double per
    /// level below it.
    pub heads: usize,
    pub head_dim: usize,
    pub shared_weights: bool,
    pub positional_encoding: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub preset: Preset,
    pub levels: usize,
    pub encoder_channels: Vec<usize>,
    /// One entry per upsampled level, highest resolution first.
    pub decoder_channels: Vec<usize>,
    pub norm: NormKind,
    pub attention: Option<AttentionSpec>,
    /// Levels with an output head, highest resolution (0) first.
    pub deep_supervision_levels: Vec<usize>,
    pub patch_size: [usize; 3],
    pub in_channels: usize,
    pub out_regions: usize,
}

/// `start * 2^i` capped at `cap`, for `levels` levels.
pub fn channel_law(start: usize, cap: usize, levels: usize) -> Vec<usize> {
    (0..levels).map(|i| (start << i).min(cap)).collect()
}

pub fn build_network(preset: Preset, scale: &ScaleConfig) -> Result<NetworkSpec> {
    let levels = scale.levels;
    if levels < 2 {
        return Err(Error::config(format!("a U-Net needs at least 2 levels, got {levels}")));
    }
    let factor = 1usize << (levels - 1);
    if scale.patch == 0 || scale.patch % factor != 0 {
        return Err(Error::config(format!(
            "patch size {} is not divisible by 2^(levels-1) = {factor}",
            scale.patch
        )));
    }
    let baseline = channel_law(scale.channel_start, scale.channel_cap, levels);
    let encoder_channels = if preset.large_encoder() {
        channel_law(2 * scale.channel_start, scale.large_channel_cap, levels)
    } else {
        baseline.clone()
    };
    let norm = if preset.group_norm() {
        NormKind::Group(scale.norm_groups)
    } else {
        NormKind::Batch
    };
    let attention = preset.attention().then(|| AttentionSpec {
        skip_top: scale.attention_skip_top,
        heads: scale.attention_heads,
        head_dim: scale.attention_head_dim,
        shared_weights: false,
        positional_encoding: false,
    });
    let deep_supervision_levels = (0..levels.saturating_sub(2).max(1)).collect();
    let spec = NetworkSpec {
        preset,
        levels,
        encoder_channels,
        decoder_channels: baseline[..levels - 1].to_vec(),
        norm,
        attention,
        deep_supervision_levels,
        patch_size: [scale.patch; 3],
        in_channels: IN_CHANNELS,
        out_regions: OUT_REGIONS,
    };
    spec.validate()?;
    Ok(spec)
}

/// Two conv -> norm -> leaky ReLU stages. The convs carry no bias since
/// the normalization's beta takes its place.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub stages: Vec<(ConvLayer, NormLayer)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLevel {
    pub level: usize,
    pub up: ConvLayer,
    pub attention: Option<AxialAttention>,
    pub block: ConvBlock,
    pub head: Option<ConvLayer>,
}

/// Layer descriptors of a network, in execution order.
#[derive(Clone, Debug, PartialEq)]
pub struct Blocks {
    pub encoder: Vec<ConvBlock>,
    pub bottleneck_attention: Option<AxialAttention>,
    /// Lowest resolution first, matching execution order.
    pub decoder: Vec<DecoderLevel>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<'a> {
    Conv(&'a ConvLayer),
    Norm(&'a NormLayer),
    Attention(&'a AxialAttention),
}

impl Layer<'_> {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv(c) => &c.name,
            Layer::Norm(n) => &n.name,
            Layer::Attention(a) => &a.name,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.param_count(),
            Layer::Norm(n) => n.param_count(),
            Layer::Attention(a) => a.param_count(),
        }
    }
}

impl Blocks {
    pub fn layers(&self) -> Vec<Layer<'_>> {
        fn push_block<'a>(out: &mut Vec<Layer<'a>>, b: &'a ConvBlock) {
            for (c, n) in &b.stages {
                out.push(Layer::Conv(c));
                out.push(Layer::Norm(n));
            }
        }
        let mut out = Vec::new();
        for b in &self.encoder {
            push_block(&mut out, b);
        }
        if let Some(a) = &self.bottleneck_attention {
            out.push(Layer::Attention(a));
        }
        for d in &self.decoder {
            out.push(Layer::Conv(&d.up));
            if let Some(a) = &d.attention {
                out.push(Layer::Attention(a));
            }
            push_block(&mut out, &d.block);
            if let Some(h) = &d.head {
                out.push(Layer::Conv(h));
            }
        }
        out
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let l = self.levels;
        if self.encoder_channels.len() != l || self.decoder_channels.len() + 1 != l {
            return Err(Error::config(format!(
                "{l} levels need {l} encoder and {} decoder channel entries",
                l.saturating_sub(1)
            )));
        }
        if self.in_channels != IN_CHANNELS || self.out_regions != OUT_REGIONS {
            return Err(Error::config("networks take 4 input channels and predict 3 regions"));
        }
        if self.deep_supervision_levels.is_empty() || self.deep_supervision_levels[0] != 0 {
            return Err(Error::config("deep supervision must include the full-resolution level 0"));
        }
        if self.deep_supervision_levels.windows(2).any(|w| w[0] >= w[1]) || self.deep_supervision_levels.iter().any(|&d| d + 1 >= l) {
            return Err(Error::config("deep supervision levels must be increasing decoder levels"));
        }
        let factor = 1usize << (l - 1);
        if self.patch_size.iter().any(|&p| p == 0 || p % factor != 0) {
            return Err(Error::config(format!("patch {:?} not divisible by {factor}", self.patch_size)));
        }
        self.blocks().map(|_| ())
    }

    /// `(level, heads, head_dim)` for every attended level; level
    /// `levels - 1` is the bottleneck.
    pub fn attention_levels(&self) -> Vec<(usize, usize, usize)> {
        let Some(a) = &self.attention else {
            return Vec::new();
        };
        (a.skip_top..self.levels)
            .map(|lvl| {
                let k = lvl - a.skip_top;
                (lvl, a.heads << k, a.head_dim << k)
            })
            .collect()
    }

    /// Spatial extent at each level.
    pub fn resolutions(&self) -> Vec<[usize; 3]> {
        (0..self.levels).map(|i| self.patch_size.map(|p| p >> i)).collect()
    }

    fn attention_at(&self, level: usize, channels: usize, name: String) -> Result<Option<AxialAttention>> {
        let Some(spec) = &self.attention else {
            return Ok(None);
        };
        let Some(&(_, heads, dim)) = self.attention_levels().iter().find(|(l, _, _)| *l == level) else {
            return Ok(None);
        };
        let mut att = AxialAttention::new(name, channels, heads, dim)?;
        att.shared_weights = spec.shared_weights;
        att.positional_encoding = spec.positional_encoding;
        Ok(Some(att))
    }

    pub fn blocks(&self) -> Result<Blocks> {
        let l = self.levels;
        let enc = &self.encoder_channels;
        let dec = &self.decoder_channels;
        let block = |prefix: &str, cin: usize, cout: usize, first_stride: usize| -> Result<ConvBlock> {
            let mut stages = Vec::new();
            for j in 0..2 {
                let (ci, s) = if j == 0 { (cin, first_stride) } else { (cout, 1) };
                stages.push((
                    ConvLayer::new(format!("{prefix}.conv{j}"), ci, cout, 3, s, 1)?.without_bias(),
                    NormLayer::new(format!("{prefix}.norm{j}"), cout, self.norm)?,
                ));
            }
            Ok(ConvBlock { stages })
        };
        let mut encoder = Vec::with_capacity(l);
        for i in 0..l {
            let (cin, stride) = if i == 0 { (self.in_channels, 1) } else { (enc[i - 1], 2) };
            encoder.push(block(&format!("enc{i}"), cin, enc[i], stride)?);
        }
        let bottleneck_attention = self.attention_at(l - 1, enc[l - 1], "bottleneck.attn".into())?;
        let mut decoder = Vec::with_capacity(l - 1);
        for i in (0..l - 1).rev() {
            let below = if i == l - 2 { enc[l - 1] } else { dec[i + 1] };
            let up = ConvLayer::upsample(format!("dec{i}.up"), below, dec[i])?;
            let attention = self.attention_at(i, dec[i], format!("dec{i}.attn"))?;
            let head = if self.deep_supervision_levels.contains(&i) {
                Some(ConvLayer::new(format!("dec{i}.head"), dec[i], self.out_regions, 1, 1, 0)?)
            } else {
                None
            };
            decoder.push(DecoderLevel {
                level: i,
                up,
                attention,
                block: block(&format!("dec{i}"), dec[i] + enc[i], dec[i], 1)?,
                head,
            });
        }
        Ok(Blocks {
            encoder,
            bottleneck_attention,
            decoder,
        })
    }

    /// Exact number of trainable scalars.
    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.blocks()?.layers().iter().map(Layer::param_count).sum())
    }

    /// Trainable scalars in the encoder convolutions only.
    pub fn encoder_conv_parameter_count(&self) -> Result<usize> {
        let blocks = self.blocks()?;
        Ok(blocks
            .encoder
            .iter()
            .flat_map(|b| b.stages.iter().map(|(c, _)| c.param_count()))
            .sum())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::format(format!("serializing network spec: {e}")))
    }

    pub fn digest(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_json()?.as_bytes()).into())
    }
}

/// Logits at every supervised level plus batch-norm statistics to fold into
/// the running averages after a training step.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Highest resolution first; infer mode yields only level 0.
    pub outputs: Vec<Var>,
    pub stat_updates: Vec<BatchStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub blocks: Blocks,
    pub params: ParamStore,
    pub running: BTreeMap<String, RunningStats>,
    pub dtype: DType,
}

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64, dtype: DType) -> Result<Self> {
        let blocks = spec.blocks()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut running = BTreeMap::new();
        for layer in blocks.layers() {
            let tensors = match layer {
                Layer::Conv(c) => c.init(&mut rng, dtype)?,
                Layer::Norm(n) => {
                    if n.kind == NormKind::Batch {
                        running.insert(n.name.clone(), RunningStats::new(n.channels));
                    }
                    n.init(dtype)?
                }
                Layer::Attention(a) => a.init(&mut rng, dtype)?,
            };
            for (k, t) in tensors {
                params.insert(k, t);
            }
        }
        Ok(Network {
            spec,
            blocks,
            params,
            running,
            dtype,
        })
    }

    pub fn apply_stat_updates(&mut self, updates: &[BatchStats]) -> Result<()> {
        for u in updates {
            self.running
                .get_mut(&u.layer)
                .ok_or_else(|| Error::UnknownParameter(u.layer.clone()))?
                .update(u)?;
        }
        Ok(())
    }

    fn run_block(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        block: &ConvBlock,
        mut h: Var,
        mode: Mode,
        updates: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        for (conv, norm) in &block.stages {
            h = conv.forward(tape, params, h)?;
            let (y, upd) = norm.forward(tape, params, self.running.get(&norm.name), h, mode)?;
            updates.extend(upd);
            h = tape.leaky_relu(y, LEAKY_SLOPE)?;
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, input: Var, mode: Mode) -> Result<ForwardOutput> {
        let shape = tape.value(input).shape().to_vec();
        let p = self.spec.patch_size;
        let expected = [shape.first().copied().unwrap_or(0), self.spec.in_channels, p[0], p[1], p[2]];
        if shape.len() != 5 || shape != expected {
            return Err(Error::ShapeMismatch {
                context: "network input".into(),
                expected: expected.to_vec(),
                actual: shape,
            });
        }
        let mut updates = Vec::new();
        let mut skips = Vec::with_capacity(self.spec.levels);
        let mut h = input;
        for block in &self.blocks.encoder {
            h = self.run_block(tape, params, block, h, mode, &mut updates)?;
            skips.push(h);
        }
        if let Some(att) = &self.blocks.bottleneck_attention {
            h = att.block(tape, params, h)?;
        }
        let mut outputs = Vec::new();
        for d in &self.blocks.decoder {
            h = d.up.forward(tape, params, h)?;
            if let Some(att) = &d.attention {
                h = att.block(tape, params, h)?;
            }
            h = tape.concat(&[h, skips[d.level]], 1)?;
            h = self.run_block(tape, params, &d.block, h, mode, &mut updates)?;
            if let Some(head) = &d.head {
                if mode == Mode::Train || d.level == 0 {
                    outputs.push(head.forward(tape, params, h)?);
                }
            }
        }
        outputs.reverse();
        Ok(ForwardOutput {
            outputs,
            stat_updates: updates,
        })
    }

    /// Sigmoid region probabilities `[b, 3, x, y, z]` for a batch of patches.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let x = tape.constant(batch.to_dtype(self.dtype));
        let out = self.forward(&mut tape, &params, x, Mode::Infer)?;
        let p = tape.sigmoid(out.outputs[0])?;
        Ok(tape.value(p).clone())
    }
}

/// Finite-difference check of a full training-mode forward pass in 64-bit.
/// The scalar is a fixed random weighting of the full-resolution logits.
/// Weights stay at their initialization; every other parameter (norm
/// affines, biases) is nudged by up to ±0.2 so it sits away from its
/// symmetric starting point. The input batch is checked as well.
pub fn network_gradcheck(
    spec: &NetworkSpec,
    batch: usize,
    seed: u64,
    per_tensor: usize,
) -> Result<crate::tensor::gradcheck::GradCheckReport> {
    use crate::tensor::gradcheck::{check_gradients, Coordinates};
    use rand::Rng;

    let net = Network::new(spec.clone(), seed, DType::F64)?;
    let names: Vec<String> = net.params.iter().map(|(k, _)| k.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut uniform = |shape: &[usize], lo: f64, hi: f64| -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect(), DType::F64)
    };
    let mut points = Vec::with_capacity(names.len() + 1);
    for (k, t) in net.params.iter() {
        if k.ends_with(".weight") || k.contains(".w") {
            points.push(t.clone());
        } else {
            let jitter = uniform(t.shape(), -0.2, 0.2)?;
            let mut t = t.clone();
            for (v, j) in t.data_mut().iter_mut().zip(jitter.data()) {
                *v += j;
            }
            points.push(t);
        }
    }
    let p = spec.patch_size;
    points.push(uniform(&[batch, spec.in_channels, p[0], p[1], p[2]], -1.0, 1.0)?);
    let weights = uniform(&[batch, spec.out_regions, p[0], p[1], p[2]], -1.0, 1.0)?;
    check_gradients(
        |tape, vars| {
            let bound = BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let out = net.forward(tape, &bound, vars[names.len()], Mode::Train)?;
            let w = tape.constant(weights.clone());
            let y = tape.mul(out.outputs[0], w)?;
            tape.sum_all(y)
        },
        &points,
        1e-5,
        Coordinates::Sample {
            per_tensor,
            seed: seed.wrapping_add(2),
        },
    )
}
