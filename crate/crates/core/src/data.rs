//! Volumes, the `.vol4` container, preprocessing, augmentation, patch
//! sampling, fold splitting and synthetic phantoms.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{put_f32s, write_atomic, Reader};
use crate::tensor::{DType, Tensor};

pub const CHANNEL_NAMES: [&str; 4] = ["T1", "T1Gd", "T2", "T2-FLAIR"];
pub const LABEL_ALPHABET: [u8; 4] = [0, 1, 2, 4];
pub const NCR: u8 = 1;
pub const ED: u8 = 2;
pub const ET: u8 = 4;

/// Row-major `[x, y, z]` grid of labels from {0, 1, 2, 4}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    extents: [usize; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(extents: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let n: usize = extents.iter().product();
        if n == 0 || data.len() != n {
            return Err(Error::InvalidShape {
                shape: extents.to_vec(),
                reason: format!("label map needs {n} > 0 voxels, got {}", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !LABEL_ALPHABET.contains(v)) {
            return Err(Error::InvalidLabel {
                value: data[index],
                index,
            });
        }
        Ok(LabelMap { extents, data })
    }

    pub fn zeros(extents: [usize; 3]) -> Result<Self> {
        Self::new(extents, vec![0; extents.iter().product()])
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.extents[1] + y) * self.extents[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.index(x, y, z)]
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    /// Replaces every occurrence of `from` with `to` (both from the alphabet).
    pub fn relabel(&mut self, from: u8, to: u8) -> Result<()> {
        if !LABEL_ALPHABET.contains(&to) {
            return Err(Error::InvalidLabel { value: to, index: 0 });
        }
        for v in &mut self.data {
            if *v == from {
                *v = to;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeCase {
    pub case_id: String,
    /// `[4, x, y, z]`, channels ordered T1, T1Gd, T2, T2-FLAIR.
    pub image: Tensor,
    pub labels: LabelMap,
    pub spacing: [f64; 3],
}

impl VolumeCase {
    pub fn new(case_id: impl Into<String>, image: Tensor, labels: LabelMap, spacing: [f64; 3]) -> Result<Self> {
        let case_id = case_id.into();
        let s = image.shape();
        if s.len() != 4 || s[0] != CHANNEL_NAMES.len() || s[1..] != labels.extents() {
            return Err(Error::ShapeMismatch {
                context: format!("case {case_id}: image vs labels"),
                expected: [&[CHANNEL_NAMES.len()][..], &labels.extents()].concat(),
                actual: s.to_vec(),
            });
        }
        check_case_id(&case_id)?;
        Ok(VolumeCase {
            case_id,
            image,
            labels,
            spacing,
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.labels.extents()
    }
}

fn check_case_id(id: &str) -> Result<()> {
    if id.is_empty() || id.chars().any(|c| c.is_control()) {
        return Err(Error::config(format!("invalid case id {id:?}")));
    }
    Ok(())
}

/// A label-only volume, as written for predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub case_id: String,
    pub labels: LabelMap,
    pub spacing: [f64; 3],
}

const VOL4_MAGIC: &str = "VOL4\n";
const VOL4_VERSION: u32 = 1;

fn vol4_bytes(case_id: &str, labels: &LabelMap, spacing: [f64; 3], image: Option<&Tensor>) -> Result<Vec<u8>> {
    check_case_id(case_id)?;
    let e = labels.extents();
    let channels = if image.is_some() { CHANNEL_NAMES.join(",") } else { String::new() };
    let header = format!(
        "{VOL4_MAGIC}version={VOL4_VERSION}\ncase_id={case_id}\nextents={},{},{}\nspacing={},{},{}\nchannels={channels}\nlabels=0,1,2,4\ndtype=f32,u8\nend\n",
        e[0], e[1], e[2], spacing[0], spacing[1], spacing[2]
    );
    let mut out = header.into_bytes();
    if let Some(img) = image {
        put_f32s(&mut out, img.data().iter().copied());
    }
    out.extend_from_slice(labels.data());
    Ok(out)
}

struct Vol4 {
    case_id: String,
    labels: LabelMap,
    spacing: [f64; 3],
    image: Option<Tensor>,
}

fn parse_triple<T: std::str::FromStr>(v: &str, key: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = v
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| Error::format(format!("vol4: bad {key} value {v:?}"))))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::format(format!("vol4: {key} needs three values, got {v:?}")))
}

fn parse_vol4(bytes: &[u8]) -> Result<Vol4> {
    if !bytes.starts_with(VOL4_MAGIC.as_bytes()) {
        return Err(Error::format("vol4: bad magic"));
    }
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| Error::format("vol4: header has no end line"))?
        + 5;
    let header = std::str::from_utf8(&bytes[VOL4_MAGIC.len()..end]).map_err(|_| Error::format("vol4: header is not utf-8"))?;
    let mut version = None;
    let mut case_id = None;
    let mut extents = None;
    let mut spacing = None;
    let mut channels = None;
    let mut labels_decl = None;
    let mut dtype = None;
    for line in header.lines() {
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("vol4: malformed header line {line:?}")))?;
        match k {
            "version" => version = Some(v.parse::<u32>().map_err(|_| Error::format("vol4: bad version"))?),
            "case_id" => case_id = Some(v.to_string()),
            "extents" => extents = Some(parse_triple::<usize>(v, "extents")?),
            "spacing" => spacing = Some(parse_triple::<f64>(v, "spacing")?),
            "channels" => channels = Some(v.to_string()),
            "labels" => labels_decl = Some(v.to_string()),
            "dtype" => dtype = Some(v.to_string()),
            other => return Err(Error::format(format!("vol4: unknown header key {other:?}"))),
        }
    }
    let missing = |k: &str| Error::format(format!("vol4: header lacks {k}"));
    if version.ok_or_else(|| missing("version"))? != VOL4_VERSION {
        return Err(Error::format("vol4: unsupported version"));
    }
    let case_id = case_id.ok_or_else(|| missing("case_id"))?;
    let extents = extents.ok_or_else(|| missing("extents"))?;
    let spacing = spacing.ok_or_else(|| missing("spacing"))?;
    let channels = channels.ok_or_else(|| missing("channels"))?;
    if labels_decl.ok_or_else(|| missing("labels"))? != "0,1,2,4" {
        return Err(Error::format("vol4: unsupported label alphabet"));
    }
    if dtype.ok_or_else(|| missing("dtype"))? != "f32,u8" {
        return Err(Error::format("vol4: unsupported payload dtype"));
    }
    let n: usize = extents.iter().product();
    let mut r = Reader::new(&bytes[end..], "vol4 payload");
    let image = match channels.as_str() {
        "" => None,
        c if c == CHANNEL_NAMES.join(",") => {
            let vals = r.f32s(4 * n)?;
            Some(Tensor::new(
                vec![4, extents[0], extents[1], extents[2]],
                vals.into_iter().map(f64::from).collect(),
                DType::F32,
            )?)
        }
        other => return Err(Error::format(format!("vol4: unexpected channels {other:?}"))),
    };
    let labels = LabelMap::new(extents, r.take(n)?.to_vec())?;
    r.finish()?;
    Ok(Vol4 {
        case_id,
        labels,
        spacing,
        image,
    })
}

pub fn save_volume(case: &VolumeCase, path: &Path) -> Result<()> {
    write_atomic(path, &vol4_bytes(&case.case_id, &case.labels, case.spacing, Some(&case.image))?)
}

pub fn load_volume(path: &Path) -> Result<VolumeCase> {
    let v = parse_vol4(&std::fs::read(path)?)?;
    let image = v
        .image
        .ok_or_else(|| Error::format(format!("{}: labels-only volume has no image", path.display())))?;
    VolumeCase::new(v.case_id, image, v.labels, v.spacing)
}

pub fn save_label_volume(vol: &LabelVolume, path: &Path) -> Result<()> {
    write_atomic(path, &vol4_bytes(&vol.case_id, &vol.labels, vol.spacing, None)?)
}

/// Reads the labels of either volume variant.
pub fn load_label_volume(path: &Path) -> Result<LabelVolume> {
    let v = parse_vol4(&std::fs::read(path)?)?;
    Ok(LabelVolume {
        case_id: v.case_id,
        labels: v.labels,
        spacing: v.spacing,
    })
}

/// Half-open box `[start, end)` inside a volume of extents `original`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub start: [usize; 3],
    pub end: [usize; 3],
    pub original: [usize; 3],
}

impl BoundingBox {
    pub fn extents(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.end[a] - self.start[a])
    }
}

fn crop_channels(t: &Tensor, b: &BoundingBox) -> Result<Tensor> {
    let s = t.shape();
    let (c, o) = (s[0], b.original);
    let e = b.extents();
    let mut out = Vec::with_capacity(c * e.iter().product::<usize>());
    for ch in 0..c {
        for x in b.start[0]..b.end[0] {
            for y in b.start[1]..b.end[1] {
                let row = ((ch * o[0] + x) * o[1] + y) * o[2];
                out.extend_from_slice(&t.data()[row + b.start[2]..row + b.end[2]]);
            }
        }
    }
    Tensor::new(vec![c, e[0], e[1], e[2]], out, t.dtype())
}

fn crop_labels(l: &LabelMap, b: &BoundingBox) -> Result<LabelMap> {
    let e = b.extents();
    let mut out = Vec::with_capacity(e.iter().product());
    for x in b.start[0]..b.end[0] {
        for y in b.start[1]..b.end[1] {
            let row = l.index(x, y, 0);
            out.extend_from_slice(&l.data()[row + b.start[2]..row + b.end[2]]);
        }
    }
    LabelMap::new(e, out)
}

/// Crops to the smallest box holding every voxel where any channel is
/// nonzero.
pub fn crop_nonzero(case: &VolumeCase) -> Result<(VolumeCase, BoundingBox)> {
    let e = case.extents();
    let n: usize = e.iter().product();
    let mut lo = e;
    let mut hi = [0usize; 3];
    let mut any = false;
    for i in 0..n {
        if (0..4).any(|c| case.image.data()[c * n + i] != 0.0) {
            let p = [i / (e[1] * e[2]), (i / e[2]) % e[1], i % e[2]];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a] + 1);
            }
            any = true;
        }
    }
    if !any {
        return Err(Error::EmptyVolume);
    }
    let bbox = BoundingBox {
        start: lo,
        end: hi,
        original: e,
    };
    let cropped = VolumeCase {
        case_id: case.case_id.clone(),
        image: crop_channels(&case.image, &bbox)?,
        labels: crop_labels(&case.labels, &bbox)?,
        spacing: case.spacing,
    };
    Ok((cropped, bbox))
}

fn check_cropped(extents: [usize; 3], bbox: &BoundingBox) -> Result<()> {
    if extents != bbox.extents() {
        return Err(Error::ExtentMismatch {
            lhs: extents,
            rhs: bbox.extents(),
        });
    }
    Ok(())
}

/// Places a cropped label map back at its box; background elsewhere.
pub fn uncrop_labels(labels: &LabelMap, bbox: &BoundingBox) -> Result<LabelMap> {
    check_cropped(labels.extents(), bbox)?;
    let mut out = LabelMap::zeros(bbox.original)?;
    let e = bbox.extents();
    for x in 0..e[0] {
        for y in 0..e[1] {
            let src = labels.index(x, y, 0);
            let dst = out.index(x + bbox.start[0], y + bbox.start[1], bbox.start[2]);
            out.data[dst..dst + e[2]].copy_from_slice(&labels.data()[src..src + e[2]]);
        }
    }
    Ok(out)
}

/// Places a cropped `[c, x, y, z]` tensor back at its box; zeros elsewhere.
pub fn uncrop_channels(t: &Tensor, bbox: &BoundingBox) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected [c, x, y, z]".into(),
        });
    }
    check_cropped([s[1], s[2], s[3]], bbox)?;
    let (c, o, e) = (s[0], bbox.original, bbox.extents());
    let mut out = Tensor::zeros(&[c, o[0], o[1], o[2]], t.dtype())?;
    for ch in 0..c {
        for x in 0..e[0] {
            for y in 0..e[1] {
                let src = ((ch * e[0] + x) * e[1] + y) * e[2];
                let dst = ((ch * o[0] + x + bbox.start[0]) * o[1] + y + bbox.start[1]) * o[2] + bbox.start[2];
                out.data_mut()[dst..dst + e[2]].copy_from_slice(&t.data()[src..src + e[2]]);
            }
        }
    }
    Ok(out)
}

/// Per-channel `(v - mean) / std` over every voxel, population std.
pub fn zscore_normalize(case: &VolumeCase) -> Result<VolumeCase> {
    let n = case.labels.len();
    let mut data = case.image.data().to_vec();
    for (c, chunk) in data.chunks_mut(n).enumerate() {
        let mean = chunk.iter().sum::<f64>() / n as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::DegenerateChannel { channel: c });
        }
        for v in chunk.iter_mut() {
            *v = (*v - mean) / std;
        }
    }
    Ok(VolumeCase {
        image: Tensor::new(case.image.shape().to_vec(), data, case.image.dtype())?,
        ..case.clone()
    })
}

/// Crop followed by normalization.
pub fn preprocess(case: &VolumeCase) -> Result<(VolumeCase, BoundingBox)> {
    let (cropped, bbox) = crop_nonzero(case)?;
    Ok((zscore_normalize(&cropped)?, bbox))
}

/// Augmentation probabilities and ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_rotation: f64,
    /// Maximum absolute rotation per axis, degrees.
    pub rotation_deg: f64,
    pub p_scale: f64,
    pub scale_range: (f64, f64),
    pub p_elastic: f64,
    /// Maximum displacement in voxels.
    pub elastic_alpha: f64,
    /// Smoothing width of the displacement field in voxels.
    pub elastic_sigma: f64,
    pub p_brightness: f64,
    /// Additive shift range as a fraction of the channel std.
    pub brightness_std_frac: f64,
    pub p_gamma: f64,
    pub gamma_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_rotation: 0.2,
            rotation_deg: 30.0,
            p_scale: 0.2,
            scale_range: (0.7, 1.4),
            p_elastic: 0.1,
            elastic_alpha: 2.0,
            elastic_sigma: 3.0,
            p_brightness: 0.15,
            brightness_std_frac: 0.1,
            p_gamma: 0.3,
            gamma_range: (0.7, 1.5),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            p_rotation: 0.0,
            p_scale: 0.0,
            p_elastic: 0.0,
            p_brightness: 0.0,
            p_gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_rotation, self.p_scale, self.p_elastic, self.p_brightness, self.p_gamma];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("augmentation probabilities must lie in [0, 1]"));
        }
        let (g0, g1) = self.gamma_range;
        if !(g0 > 0.0 && g0 <= g1) {
            return Err(Error::config(format!("gamma range must satisfy 0 < lo <= hi, got ({g0}, {g1})")));
        }
        let (s0, s1) = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::config(format!("scale range must satisfy 0 < lo <= hi, got ({s0}, {s1})")));
        }
        if !(self.rotation_deg >= 0.0 && self.elastic_alpha >= 0.0 && self.elastic_sigma > 0.0 && self.brightness_std_frac >= 0.0) {
            return Err(Error::config("rotation, elastic and brightness magnitudes must be non-negative (sigma positive)"));
        }
        Ok(())
    }
}

/// Displacement field in voxels, one `[x, y, z]` grid per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Displacement {
    pub extents: [usize; 3],
    pub field: [Vec<f64>; 3],
}

/// Geometry of one spatial augmentation. Output voxel `o` samples the input
/// at `c + R (o - c) / scale + d(o)` where `c` is the volume center and
/// `R = Rz Ry Rx`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialParams {
    /// Radians about x, y and z.
    pub angles: [f64; 3],
    pub scale: f64,
    pub elastic: Option<Displacement>,
}

impl SpatialParams {
    pub fn identity() -> Self {
        SpatialParams {
            angles: [0.0; 3],
            scale: 1.0,
            elastic: None,
        }
    }

    fn matrix(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.angles;
        let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
        let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
        let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
        matmul3(&matmul3(&rz, &ry), &rx)
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn trilinear(channel: &[f64], e: [usize; 3], p: [f64; 3]) -> f64 {
    let f = p.map(f64::floor);
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let bit = (corner >> a) & 1;
            let c = f[a] + bit as f64;
            let t = p[a] - f[a];
            w *= if bit == 1 { t } else { 1.0 - t };
            if c < 0.0 || c >= e[a] as f64 {
                inside = false;
            } else {
                idx[a] = c as usize;
            }
        }
        if inside && w != 0.0 {
            acc += w * channel[(idx[0] * e[1] + idx[1]) * e[2] + idx[2]];
        }
    }
    acc
}

/// Warps a `[c, x, y, z]` image (trilinear) and its labels (nearest).
pub fn spatial_transform(image: &Tensor, labels: &LabelMap, params: &SpatialParams) -> Result<(Tensor, LabelMap)> {
    let e = labels.extents();
    let s = image.shape();
    if s.len() != 4 || s[1..] != e {
        return Err(Error::ExtentMismatch {
            lhs: [s.get(1).copied().unwrap_or(0), s.get(2).copied().unwrap_or(0), s.get(3).copied().unwrap_or(0)],
            rhs: e,
        });
    }
    if let Some(d) = &params.elastic {
        if d.extents != e {
            return Err(Error::ExtentMismatch { lhs: d.extents, rhs: e });
        }
    }
    let n: usize = e.iter().product();
    let channels = s[0];
    let r = params.matrix();
    let center = e.map(|v| (v as f64 - 1.0) / 2.0);
    let mut out_img = vec![0.0; channels * n];
    let mut out_lab = vec![0u8; n];
    for x in 0..e[0] {
        for y in 0..e[1] {
            for z in 0..e[2] {
                let i = (x * e[1] + y) * e[2] + z;
                let u = [x as f64 - center[0], y as f64 - center[1], z as f64 - center[2]];
                let mut src = [0.0; 3];
                for a in 0..3 {
                    src[a] = center[a] + (r[a][0] * u[0] + r[a][1] * u[1] + r[a][2] * u[2]) / params.scale;
                    if let Some(d) = &params.elastic {
                        src[a] += d.field[a][i];
                    }
                }
                for c in 0..channels {
                    out_img[c * n + i] = trilinear(&image.data()[c * n..(c + 1) * n], e, src);
                }
                let near = src.map(|v| v.round());
                if (0..3).all(|a| near[a] >= 0.0 && near[a] < e[a] as f64) {
                    out_lab[i] = labels.get(near[0] as usize, near[1] as usize, near[2] as usize);
                }
            }
        }
    }
    Ok((Tensor::new(s.to_vec(), out_img, image.dtype())?, LabelMap::new(e, out_lab)?))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn smooth_axis(v: &[f64], e: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let stride = [e[1] * e[2], e[2], 1][axis];
    let len = e[axis] as isize;
    let mut out = vec![0.0; v.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = ((i / stride) % e[axis]) as isize;
        let base = i as isize - pos * stride as isize;
        *o = kernel
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let q = (pos + k as isize - r).clamp(0, len - 1);
                w * v[(base + q * stride as isize) as usize]
            })
            .sum();
    }
    out
}

/// Smoothed Gaussian noise scaled to a maximum displacement of `alpha`.
pub fn random_displacement(rng: &mut ChaCha8Rng, extents: [usize; 3], alpha: f64, sigma: f64) -> Displacement {
    let n: usize = extents.iter().product();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let kernel = gaussian_kernel(sigma);
    let field = [0, 1, 2].map(|_| {
        let mut f: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        for axis in 0..3 {
            f = smooth_axis(&f, extents, axis, &kernel);
        }
        let m = f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m > 0.0 {
            f.iter_mut().for_each(|v| *v *= alpha / m);
        }
        f
    });
    Displacement { extents, field }
}

/// Maps each channel through `v -> lo + (hi - lo) * ((v - lo) / (hi - lo))^gamma`.
pub fn gamma_transform(image: &Tensor, gamma: &[f64]) -> Result<Tensor> {
    let c = image.shape()[0];
    if gamma.len() != c || gamma.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::config("gamma needs one positive value per channel"));
    }
    let n = image.numel() / c;
    let mut data = image.data().to_vec();
    for (chunk, &g) in data.chunks_mut(n).zip(gamma) {
        let lo = chunk.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if g == 1.0 || hi <= lo {
            continue;
        }
        for v in chunk.iter_mut() {
            *v = lo + (hi - lo) * ((*v - lo) / (hi - lo)).powf(g);
        }
    }
    Tensor::new(image.shape().to_vec(), data, image.dtype())
}

/// Adds one constant per channel.
pub fn brightness_shift(image: &Tensor, shift: &[f64]) -> Result<Tensor> {
    let c = image.shape()[0];
    if shift.len() != c {
        return Err(Error::config("brightness needs one shift per channel"));
    }
    let n = image.numel() / c;
    let mut data = image.data().to_vec();
    for (chunk, &s) in data.chunks_mut(n).zip(shift) {
        if s != 0.0 {
            chunk.iter_mut().for_each(|v| *v += s);
        }
    }
    Tensor::new(image.shape().to_vec(), data, image.dtype())
}

fn channel_std(image: &Tensor) -> Vec<f64> {
    let c = image.shape()[0];
    let n = image.numel() / c;
    image
        .data()
        .chunks(n)
        .map(|ch| {
            let m = ch.iter().sum::<f64>() / n as f64;
            (ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt()
        })
        .collect()
}

/// Random spatial and intensity augmentation of one image/label pair.
pub fn augment(image: &Tensor, labels: &LabelMap, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Result<(Tensor, LabelMap)> {
    cfg.validate()?;
    let mut params = SpatialParams::identity();
    let mut spatial = false;
    if rng.random::<f64>() < cfg.p_rotation {
        let max = cfg.rotation_deg.to_radians();
        params.angles = [0, 1, 2].map(|_| rng.random_range(-max..=max));
        spatial = true;
    }
    if rng.random::<f64>() < cfg.p_scale {
        params.scale = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
        spatial = true;
    }
    if rng.random::<f64>() < cfg.p_elastic {
        params.elastic = Some(random_displacement(rng, labels.extents(), cfg.elastic_alpha, cfg.elastic_sigma));
        spatial = true;
    }
    let (mut img, lab) = if spatial {
        spatial_transform(image, labels, &params)?
    } else {
        (image.clone(), labels.clone())
    };
    let c = img.shape()[0];
    if rng.random::<f64>() < cfg.p_brightness {
        let stds = channel_std(&img);
        let f = cfg.brightness_std_frac;
        let shift: Vec<f64> = stds.iter().map(|s| rng.random_range(-f..=f) * s).collect();
        img = brightness_shift(&img, &shift)?;
    }
    if rng.random::<f64>() < cfg.p_gamma {
        let gamma: Vec<f64> = (0..c).map(|_| rng.random_range(cfg.gamma_range.0..=cfg.gamma_range.1)).collect();
        img = gamma_transform(&img, &gamma)?;
    }
    Ok((img, lab))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// `[4, px, py, pz]`
    pub image: Tensor,
    pub labels: LabelMap,
    /// Position of the patch origin in the volume; may be negative.
    pub origin: [isize; 3],
    pub forced_foreground: bool,
}

/// Copies `[origin, origin + size)` out of a `[c, x, y, z]` tensor, zero
/// outside the volume.
pub fn extract_window(t: &Tensor, origin: [isize; 3], size: [usize; 3]) -> Result<Tensor> {
    let s = t.shape();
    let (c, e) = (s[0], [s[1], s[2], s[3]]);
    let mut out = Tensor::zeros(&[c, size[0], size[1], size[2]], t.dtype())?;
    copy_window(t.data(), c, e, origin, size, out.data_mut());
    Ok(out)
}

fn copy_window<T: Copy>(src: &[T], c: usize, e: [usize; 3], origin: [isize; 3], size: [usize; 3], dst: &mut [T]) {
    let lo = [0, 1, 2].map(|a| origin[a].max(0) as usize);
    let hi = [0, 1, 2].map(|a| (origin[a] + size[a] as isize).min(e[a] as isize).max(0) as usize);
    if (0..3).any(|a| lo[a] >= hi[a]) {
        return;
    }
    let n = e[0] * e[1] * e[2];
    let pn = size[0] * size[1] * size[2];
    for ch in 0..c {
        for x in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                let s0 = ch * n + (x * e[1] + y) * e[2];
                let px = (x as isize - origin[0]) as usize;
                let py = (y as isize - origin[1]) as usize;
                let pz = (lo[2] as isize - origin[2]) as usize;
                let d0 = ch * pn + (px * size[1] + py) * size[2] + pz;
                dst[d0..d0 + hi[2] - lo[2]].copy_from_slice(&src[s0 + lo[2]..s0 + hi[2]]);
            }
        }
    }
}

/// Draws a training patch. With probability `foreground_prob`, and if the
/// case has tumor, the patch is centered on a tumor voxel of a uniformly
/// chosen present class, then shifted as little as needed to stay inside
/// the volume. Volumes smaller than the patch are zero padded.
pub fn sample_patch(case: &VolumeCase, rng: &mut ChaCha8Rng, patch: [usize; 3], foreground_prob: f64) -> Result<Patch> {
    if patch.contains(&0) {
        return Err(Error::config("patch extents must be positive"));
    }
    let e = case.extents();
    let bounds = [0, 1, 2].map(|a| {
        let d = e[a] as isize - patch[a] as isize;
        (d.min(0), d.max(0))
    });
    let want_fg = rng.random::<f64>() < foreground_prob;
    let classes: Vec<u8> = [NCR, ED, ET].into_iter().filter(|&l| case.labels.data().contains(&l)).collect();
    let forced = want_fg && !classes.is_empty();
    let origin = if forced {
        let class = classes[rng.random_range(0..classes.len())];
        let count = case.labels.count(class);
        let pick = rng.random_range(0..count);
        let i = case
            .labels
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == class)
            .nth(pick)
            .map(|(i, _)| i)
            .expect("class present");
        let p = [i / (e[1] * e[2]), (i / e[2]) % e[1], i % e[2]];
        [0, 1, 2].map(|a| (p[a] as isize - (patch[a] / 2) as isize).clamp(bounds[a].0, bounds[a].1))
    } else {
        [0, 1, 2].map(|a| rng.random_range(bounds[a].0 as i64..=bounds[a].1 as i64) as isize)
    };
    let image = extract_window(&case.image, origin, patch)?;
    let mut lab = vec![0u8; patch.iter().product()];
    copy_window(case.labels.data(), 1, e, origin, patch, &mut lab);
    Ok(Patch {
        image,
        labels: LabelMap::new(patch, lab)?,
        origin,
        forced_foreground: forced,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: Vec<Vec<String>>,
}

impl FoldSplit {
    /// Training ids (all other folds, in fold order) and validation ids.
    pub fn train_val(&self, fold: usize) -> Result<(Vec<String>, Vec<String>)> {
        let val = self
            .folds
            .get(fold)
            .ok_or_else(|| Error::config(format!("fold {fold} out of range for {} folds", self.folds.len())))?
            .clone();
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        Ok((train, val))
    }
}

/// Seeded shuffle, then round-robin assignment to `k` folds.
pub fn make_folds(case_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 || case_ids.len() < k {
        return Err(Error::TooFewCases {
            needed: k.max(1),
            got: case_ids.len(),
        });
    }
    let mut ids = case_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldSplit { folds })
}

/// Mean intensity per channel (T1, T1Gd, T2, FLAIR) for brain, ED, NCR, ET.
const INTENSITY: [[f64; 4]; 4] = [
    [1.0, 0.8, 0.5, 0.9],
    [1.0, 0.85, 0.5, 2.0],
    [1.0, 1.8, 2.0, 1.5],
    [1.0, 2.0, 1.2, 1.6],
];

/// Synthetic case: an ellipsoidal brain (zero outside) holding a tumor of
/// nested ellipsoids: edema around an enhancing shell around a necrotic
/// core.
pub fn synth_phantom(seed: u64, extents: [usize; 3]) -> Result<VolumeCase> {
    if extents.iter().any(|&e| e < 16) {
        return Err(Error::config(format!("phantom extents must be at least 16 per axis, got {extents:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ef = extents.map(|v| v as f64);
    let brain_c = ef.map(|v| (v - 1.0) / 2.0);
    let brain_r = ef.map(|v| 0.45 * v);
    let min_e = ef.iter().cloned().fold(f64::INFINITY, f64::min);
    let wt_r = [0, 1, 2].map(|_| rng.random_range(0.2..0.28) * min_e);
    let tc_r = wt_r.map(|r| 0.65 * r);
    let core_r = wt_r.map(|r| 0.3 * r);
    // keep the edema ellipsoid inside the brain ellipsoid
    let room = [0, 1, 2].map(|a| (brain_r[a] - wt_r[a] - 1.0).max(0.0) * 0.5);
    let tumor_c = [0, 1, 2].map(|a| brain_c[a] + rng.random_range(-room[a]..=room[a]));
    let noise = Normal::new(0.0, 0.08).expect("valid std");
    let phase = [0, 1, 2].map(|_| rng.random_range(0.0..std::f64::consts::TAU));

    let n: usize = extents.iter().product();
    let mut image = vec![0.0; 4 * n];
    let mut labels = vec![0u8; n];
    let inside = |p: [f64; 3], c: [f64; 3], r: [f64; 3]| -> bool {
        (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
    };
    for x in 0..extents[0] {
        for y in 0..extents[1] {
            for z in 0..extents[2] {
                let i = (x * extents[1] + y) * extents[2] + z;
                let p = [x as f64, y as f64, z as f64];
                if !inside(p, brain_c, brain_r) {
                    continue;
                }
                let class = if inside(p, tumor_c, core_r) {
                    NCR
                } else if inside(p, tumor_c, tc_r) {
                    ET
                } else if inside(p, tumor_c, wt_r) {
                    ED
                } else {
                    0
                };
                labels[i] = class;
                let col = match class {
                    ED => 1,
                    NCR => 2,
                    ET => 3,
                    _ => 0,
                };
                let texture = 0.05 * ((p[0] * 0.4 + phase[0]).sin() + (p[1] * 0.3 + phase[1]).sin() + (p[2] * 0.35 + phase[2]).sin());
                for (c, row) in INTENSITY.iter().enumerate() {
                    let v = row[col] + texture + noise.sample(&mut rng);
                    // background stays exactly zero; keep brain voxels nonzero
                    image[c * n + i] = if v.abs() < 1e-3 { 1e-3 } else { v };
                }
            }
        }
    }
    VolumeCase::new(
        format!("phantom_{seed:04}"),
        Tensor::new(vec![4, extents[0], extents[1], extents[2]], image, DType::F32)?,
        LabelMap::new(extents, labels)?,
        [1.0; 3],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_map_rejects_value_three() {
        let err = LabelMap::new([1, 1, 3], vec![0, 3, 4]).unwrap_err();
        assert!(matches!(err, Error::InvalidLabel { value: 3, index: 1 }));
    }

    #[test]
    fn gamma_one_is_identity() {
        let t = Tensor::new(vec![1, 1, 1, 3], vec![0.1, 0.5, 0.9], DType::F64).unwrap();
        assert_eq!(gamma_transform(&t, &[1.0]).unwrap(), t);
        assert_eq!(brightness_shift(&t, &[0.0]).unwrap(), t);
        assert!(gamma_transform(&t, &[0.0]).is_err());
    }

    #[test]
    fn gamma_maps_range_endpoints_to_themselves() {
        let t = Tensor::new(vec![1, 1, 1, 3], vec![-1.0, 0.0, 3.0], DType::F64).unwrap();
        let g = gamma_transform(&t, &[2.0]).unwrap();
        assert_eq!(g.data()[0], -1.0);
        assert_eq!(g.data()[2], 3.0);
        assert!((g.data()[1] - (-1.0 + 4.0 * 0.0625)).abs() < 1e-12);
    }

    #[test]
    fn folds_balance() {
        let ids: Vec<String> = (0..11).map(|i| format!("c{i}")).collect();
        let split = make_folds(&ids, 5, 3).unwrap();
        let mut sizes: Vec<usize> = split.folds.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        assert!(make_folds(&ids[..3], 5, 0).is_err());
    }

    #[test]
    fn phantom_too_small() {
        assert!(synth_phantom(1, [15, 16, 16]).is_err());
    }
}
