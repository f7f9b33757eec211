//! Region maps, sliding-window prediction, fold ensembling and label
//! post-processing.

use std::path::{Path, PathBuf};

use crate::data::{preprocess, uncrop_channels, LabelMap, VolumeCase, ED, ET, NCR};
use crate::error::{Error, Result};
use crate::io::{put_f32s, put_u32, to_u32, write_atomic, Reader};
use crate::tensor::{DType, Tensor};
use crate::unet::Network;

pub const MIN_ET_VOXELS: usize = 200;
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Et,
    Tc,
    Wt,
}

impl Region {
    /// Channel order of every region map.
    pub const ALL: [Region; 3] = [Region::Et, Region::Tc, Region::Wt];

    pub fn name(self) -> &'static str {
        match self {
            Region::Et => "ET",
            Region::Tc => "TC",
            Region::Wt => "WT",
        }
    }

    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::Et => label == ET,
            Region::Tc => label == ET || label == NCR,
            Region::Wt => label == ET || label == NCR || label == ED,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionKind {
    Probability,
    Binary,
}

/// `[3, x, y, z]` maps ordered ET, TC, WT.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMaps {
    values: Tensor,
    kind: RegionKind,
}

impl RegionMaps {
    pub fn new(values: Tensor, kind: RegionKind) -> Result<Self> {
        let s = values.shape();
        if s.len() != 4 || s[0] != 3 || s[1..].contains(&0) {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "region maps are [3, x, y, z]".into(),
            });
        }
        let ok = match kind {
            RegionKind::Probability => values.data().iter().all(|v| (0.0..=1.0).contains(v)),
            RegionKind::Binary => values.data().iter().all(|&v| v == 0.0 || v == 1.0),
        };
        if !ok {
            return Err(Error::config(format!("region values out of range for {kind:?} maps")));
        }
        Ok(RegionMaps { values, kind })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn kind(&self) -> RegionKind {
        self.kind
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[1], s[2], s[3]]
    }

    pub fn channel(&self, r: Region) -> &[f64] {
        let n = self.values.numel() / 3;
        let i = r as usize;
        &self.values.data()[i * n..(i + 1) * n]
    }

    /// Foreground mask of one channel (`value >= 0.5`).
    pub fn mask(&self, r: Region) -> Vec<bool> {
        self.channel(r).iter().map(|&v| v >= THRESHOLD).collect()
    }
}

pub fn labels_to_regions(labels: &LabelMap) -> RegionMaps {
    let e = labels.extents();
    let data: Vec<f64> = Region::ALL
        .iter()
        .flat_map(|r| labels.data().iter().map(move |&l| if r.contains(l) { 1.0 } else { 0.0 }))
        .collect();
    let values = Tensor::new(vec![3, e[0], e[1], e[2]], data, DType::F64).expect("shape matches data");
    RegionMaps {
        values,
        kind: RegionKind::Binary,
    }
}

/// Layered decode: 2 inside WT, then 1 inside TC, then 4 inside ET.
/// Channels count as set at `>= 0.5`.
pub fn regions_to_labels(maps: &RegionMaps) -> LabelMap {
    let [et, tc, wt] = Region::ALL.map(|r| maps.mask(r));
    let data = (0..et.len())
        .map(|i| {
            if et[i] {
                ET
            } else if tc[i] {
                NCR
            } else if wt[i] {
                ED
            } else {
                0
            }
        })
        .collect();
    LabelMap::new(maps.extents(), data).expect("decoded labels are valid")
}

/// Voxelwise mean of probability maps.
pub fn ensemble(maps: &[RegionMaps]) -> Result<RegionMaps> {
    let first = maps.first().ok_or_else(|| Error::Empty("ensemble input".into()))?;
    let mut acc = vec![0.0; first.values.numel()];
    for m in maps {
        if m.extents() != first.extents() {
            return Err(Error::ExtentMismatch {
                lhs: first.extents(),
                rhs: m.extents(),
            });
        }
        for ((a, v), f) in acc.iter_mut().zip(m.values.data()).zip(first.values.data()) {
            *a += v - f;
        }
    }
    let k = maps.len() as f64;
    // offsets from the first map keep the mean of identical maps exact
    let data = acc
        .into_iter()
        .zip(first.values.data())
        .map(|(d, f)| (f + d / k).clamp(0.0, 1.0))
        .collect();
    RegionMaps::new(Tensor::new(first.values.shape().to_vec(), data, DType::F64)?, RegionKind::Probability)
}

/// `value >= threshold` becomes 1, everything else 0.
pub fn binarize(maps: &RegionMaps, threshold: f64) -> RegionMaps {
    RegionMaps {
        values: maps.values.map(|v| if v >= threshold { 1.0 } else { 0.0 }),
        kind: RegionKind::Binary,
    }
}

/// Relabels every ET voxel as NCR when the volume holds fewer than
/// `min_et_voxels` of them.
pub fn postprocess_et(labels: &LabelMap, min_et_voxels: usize) -> LabelMap {
    let mut out = labels.clone();
    let n = labels.count(ET);
    if n > 0 && n < min_et_voxels {
        out.relabel(ET, NCR).expect("NCR is a valid label");
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowConfig {
    /// Stride as a fraction of the patch size.
    pub step_fraction: f64,
    /// Gaussian width as a fraction of the patch size.
    pub sigma_fraction: f64,
    /// Threads used for window forward passes.
    pub workers: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            step_fraction: 0.5,
            sigma_fraction: 0.125,
            workers: 1,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_fraction > 0.0 && self.step_fraction <= 1.0) {
            return Err(Error::config(format!("step fraction must lie in (0, 1], got {}", self.step_fraction)));
        }
        if !(self.sigma_fraction > 0.0) {
            return Err(Error::config("sigma fraction must be positive"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers must be at least 1"));
        }
        Ok(())
    }
}

/// Separable Gaussian window over a patch, peak 1 at the center.
pub fn gaussian_weights(patch: [usize; 3], sigma_fraction: f64) -> Vec<f64> {
    let axis = |n: usize| -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let s = n as f64 * sigma_fraction;
        (0..n).map(|i| (-(i as f64 - c).powi(2) / (2.0 * s * s)).exp()).collect()
    };
    let [wx, wy, wz] = patch.map(axis);
    let mut out = Vec::with_capacity(patch.iter().product());
    for a in &wx {
        for b in &wy {
            for c in &wz {
                out.push(a * b * c);
            }
        }
    }
    out
}

/// Evenly spaced window starts covering `[0, extent)` with stride at most
/// `step * patch`. `extent` must be at least `patch`.
pub fn window_starts(extent: usize, patch: usize, step_fraction: f64) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let span = extent - patch;
    let stride = (patch as f64 * step_fraction).max(1.0);
    let n = (span as f64 / stride).ceil() as usize + 1;
    (0..n).map(|i| ((i * span) as f64 / (n - 1) as f64).round() as usize).collect()
}

/// Tiles a `[c, x, y, z]` image with overlapping patches, blends the
/// per-patch outputs `[k, px, py, pz]` with a Gaussian window and returns
/// `[k, x, y, z]`. Volumes smaller than the patch are zero padded at the
/// high end of each axis.
pub fn sliding_window<F>(image: &Tensor, patch: [usize; 3], cfg: &WindowConfig, predict: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    cfg.validate()?;
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected [c, x, y, z]".into(),
        });
    }
    let extents = [s[1], s[2], s[3]];
    let padded = [0, 1, 2].map(|a| extents[a].max(patch[a]));
    let starts = [0, 1, 2].map(|a| window_starts(padded[a], patch[a], cfg.step_fraction));
    let mut origins = Vec::new();
    for &x in &starts[0] {
        for &y in &starts[1] {
            for &z in &starts[2] {
                origins.push([x, y, z]);
            }
        }
    }
    let weights = gaussian_weights(patch, cfg.sigma_fraction);
    let run = |o: &[usize; 3]| -> Result<Tensor> {
        let window = crate::data::extract_window(image, o.map(|v| v as isize), patch)?;
        predict(&window)
    };
    let outputs: Vec<Result<Tensor>> = if cfg.workers > 1 && origins.len() > 1 {
        let chunk = origins.len().div_ceil(cfg.workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = origins
                .chunks(chunk)
                .map(|part| scope.spawn(|| part.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("window worker panicked"))
                .collect()
        })
    } else {
        origins.iter().map(run).collect()
    };

    if origins.len() == 1 && padded == extents {
        return outputs.into_iter().next().expect("one window").map(|t| t.to_dtype(DType::F64));
    }
    let pn: usize = patch.iter().product();
    let n_pad: usize = padded.iter().product();
    let mut acc: Vec<f64> = Vec::new();
    let mut wsum = vec![0.0; n_pad];
    let mut k = 0;
    // accumulate in window order so results do not depend on the worker count
    for (o, out) in origins.iter().zip(outputs) {
        let out = out?;
        let os = out.shape();
        if os.len() != 4 || os[1..] != patch {
            return Err(Error::ShapeMismatch {
                context: "window prediction".into(),
                expected: vec![os.first().copied().unwrap_or(0), patch[0], patch[1], patch[2]],
                actual: os.to_vec(),
            });
        }
        if acc.is_empty() {
            k = os[0];
            acc = vec![0.0; k * n_pad];
        }
        for px in 0..patch[0] {
            for py in 0..patch[1] {
                for pz in 0..patch[2] {
                    let pi = (px * patch[1] + py) * patch[2] + pz;
                    let vi = ((o[0] + px) * padded[1] + o[1] + py) * padded[2] + o[2] + pz;
                    let w = weights[pi];
                    wsum[vi] += w;
                    for c in 0..k {
                        acc[c * n_pad + vi] += w * out.data()[c * pn + pi];
                    }
                }
            }
        }
    }
    let mut result = Vec::with_capacity(k * extents.iter().product::<usize>());
    for c in 0..k {
        for x in 0..extents[0] {
            for y in 0..extents[1] {
                for z in 0..extents[2] {
                    let vi = (x * padded[1] + y) * padded[2] + z;
                    result.push(acc[c * n_pad + vi] / wsum[vi]);
                }
            }
        }
    }
    Tensor::new(vec![k, extents[0], extents[1], extents[2]], result, DType::F64)
}

/// Region probabilities of one network over a preprocessed `[4, x, y, z]`
/// image.
pub fn predict_volume(net: &Network, image: &Tensor, cfg: &WindowConfig) -> Result<Tensor> {
    sliding_window(image, net.spec.patch_size, cfg, |w| {
        let s = w.shape();
        let batch = w.reshape(&[1, s[0], s[1], s[2], s[3]])?;
        let p = net.predict(&batch)?;
        let ps = p.shape();
        p.reshape(&[ps[1], ps[2], ps[3], ps[4]])
    })
}

/// Crops and normalizes a raw case, averages the region probabilities of
/// every network and places them back at the original extents.
pub fn predict_case(nets: &[Network], case: &VolumeCase, cfg: &WindowConfig) -> Result<RegionMaps> {
    if nets.is_empty() {
        return Err(Error::Empty("network list".into()));
    }
    let (pre, bbox) = preprocess(case)?;
    let maps = nets
        .iter()
        .map(|net| {
            let p = predict_volume(net, &pre.image, cfg)?;
            RegionMaps::new(p.map(|v| v.clamp(0.0, 1.0)), RegionKind::Probability)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = ensemble(&maps)?;
    RegionMaps::new(uncrop_channels(mean.values(), &bbox)?, RegionKind::Probability)
}

const PROB3_MAGIC: &[u8; 8] = b"TSEGPRB3";
const PROB3_VERSION: u32 = 1;

/// One case's region probabilities as dumped by a single model.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDump {
    pub case_id: String,
    pub spacing: [f64; 3],
    pub maps: RegionMaps,
}

/// Layout: magic, u32 version, u32 id length, id, 3 f32 spacing, 3 u32
/// extents, then `[3, x, y, z]` f32 values, all little-endian.
pub fn save_prob3(dump: &ProbDump, path: &Path) -> Result<()> {
    let mut out = PROB3_MAGIC.to_vec();
    put_u32(&mut out, PROB3_VERSION);
    put_u32(&mut out, to_u32(dump.case_id.len(), "case id length")?);
    out.extend_from_slice(dump.case_id.as_bytes());
    put_f32s(&mut out, dump.spacing);
    for e in dump.maps.extents() {
        put_u32(&mut out, to_u32(e, "extent")?);
    }
    put_f32s(&mut out, dump.maps.values.data().iter().copied());
    write_atomic(path, &out)
}

pub fn load_prob3(path: &Path) -> Result<ProbDump> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes, "prob3");
    if r.take(8)? != PROB3_MAGIC {
        return Err(Error::format(format!("{}: bad magic", path.display())));
    }
    if r.u32()? != PROB3_VERSION {
        return Err(Error::format(format!("{}: unsupported version", path.display())));
    }
    let len = r.u32()? as usize;
    let case_id = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::format("prob3: case id is not utf-8"))?
        .to_string();
    let sp = r.f32s(3)?;
    let spacing = [sp[0] as f64, sp[1] as f64, sp[2] as f64];
    let e = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let n = e.iter().try_fold(3usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format("prob3: too large"))?;
    let vals = r.f32s(n)?.into_iter().map(f64::from).collect();
    r.finish()?;
    let maps = RegionMaps::new(Tensor::new(vec![3, e[0], e[1], e[2]], vals, DType::F32)?, RegionKind::Probability)?;
    Ok(ProbDump { case_id, spacing, maps })
}

/// Reads a manifest: one probability dump path per line, relative to the
/// manifest's directory. Blank lines and lines starting with `#` are
/// skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entries: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect();
    if entries.is_empty() {
        return Err(Error::Empty(format!("manifest {}", path.display())));
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[PathBuf]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut text = String::from("# probability dumps, one per line\n");
    for e in entries {
        let rel = e.strip_prefix(base).unwrap_or(e);
        text.push_str(&rel.to_string_lossy());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_cover_extent() {
        assert_eq!(window_starts(16, 16, 0.5), vec![0]);
        assert_eq!(window_starts(24, 16, 0.5), vec![0, 8]);
        assert_eq!(window_starts(25, 16, 0.5), vec![0, 5, 9]);
        assert_eq!(window_starts(32, 16, 1.0), vec![0, 16]);
    }

    #[test]
    fn gaussian_peaks_at_center() {
        let w = gaussian_weights([3, 3, 3], 0.125);
        assert_eq!(w[13], 1.0);
        assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn region_shape_checked() {
        assert!(RegionMaps::new(Tensor::zeros(&[2, 1, 1, 1], DType::F64).unwrap(), RegionKind::Binary).is_err());
        assert!(RegionMaps::new(Tensor::full(&[3, 1, 1, 1], 0.5, DType::F64).unwrap(), RegionKind::Binary).is_err());
    }
}
