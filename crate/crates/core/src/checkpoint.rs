//! Versioned binary network checkpoints.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! "TSEGCKPT" | version | sha256(spec json) [32 bytes] | spec json length | spec json
//! blob count | blobs...
//! blob: name length | name (utf-8) | rank | dims... | f32 LE values
//! ```
//!
//! Blobs appear in name order. Batch-norm running statistics are stored as
//! `<norm>.running_mean`, `<norm>.running_var` and `<norm>.num_batches`.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{put_f32s, put_u32, to_u32, write_atomic, Reader};
use crate::nn::RunningStats;
use crate::tensor::{DType, Tensor};
use crate::unet::{Network, NetworkSpec};

pub const MAGIC: &[u8; 8] = b"TSEGCKPT";
pub const VERSION: u32 = 1;

const MEAN: &str = ".running_mean";
const VAR: &str = ".running_var";
const COUNT: &str = ".num_batches";

fn blobs(net: &Network) -> Result<BTreeMap<String, Tensor>> {
    let mut out: BTreeMap<String, Tensor> = net.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    for (name, s) in &net.running {
        let c = s.mean.len();
        out.insert(format!("{name}{MEAN}"), Tensor::new(vec![c], s.mean.clone(), DType::F64)?);
        out.insert(format!("{name}{VAR}"), Tensor::new(vec![c], s.var.clone(), DType::F64)?);
        out.insert(format!("{name}{COUNT}"), Tensor::scalar(s.batches as f64, DType::F64));
    }
    Ok(out)
}

pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    let json = net.spec.to_json()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&Sha256::digest(json.as_bytes()));
    put_u32(&mut out, to_u32(json.len(), "spec length")?);
    out.extend_from_slice(json.as_bytes());
    let blobs = blobs(net)?;
    put_u32(&mut out, to_u32(blobs.len(), "blob count")?);
    for (name, t) in &blobs {
        put_u32(&mut out, to_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, to_u32(t.rank(), "rank")?);
        for &d in t.shape() {
            put_u32(&mut out, to_u32(d, "extent")?);
        }
        put_f32s(&mut out, t.data().iter().copied());
    }
    Ok(out)
}

/// Rebuilds a network whose tensors carry `dtype`.
pub fn from_bytes(bytes: &[u8], dtype: DType) -> Result<Network> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(8)? != MAGIC {
        return Err(Error::format("checkpoint: bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("checkpoint: unsupported version {version}")));
    }
    let digest = r.take(32)?.to_vec();
    let len = r.u32()? as usize;
    let json = r.take(len)?;
    if Sha256::digest(json).as_slice() != digest.as_slice() {
        return Err(Error::format("checkpoint: config digest mismatch"));
    }
    let spec: NetworkSpec =
        serde_json::from_slice(json).map_err(|e| Error::format(format!("checkpoint: bad network spec: {e}")))?;
    spec.validate()?;

    let mut net = Network::new(spec, 0, dtype)?;
    let count = r.u32()? as usize;
    let mut seen = 0usize;
    let mut stats: BTreeMap<String, [Option<Vec<f64>>; 3]> = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::format("checkpoint: blob name is not utf-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format("checkpoint: blob too large"))?;
        let data: Vec<f64> = r.f32s(n)?.into_iter().map(f64::from).collect();

        let stat_slot = [MEAN, VAR, COUNT]
            .iter()
            .position(|suffix| name.ends_with(suffix))
            .map(|i| (name[..name.len() - [MEAN, VAR, COUNT][i].len()].to_string(), i));
        match stat_slot {
            Some((layer, i)) if net.running.contains_key(&layer) => {
                stats.entry(layer).or_default()[i] = Some(data);
            }
            _ => {
                let slot = net.params.get_mut(&name)?;
                if slot.shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        context: format!("checkpoint blob {name}"),
                        expected: slot.shape().to_vec(),
                        actual: shape,
                    });
                }
                *slot = Tensor::new(shape, data, dtype)?;
                seen += 1;
            }
        }
    }
    r.finish()?;
    if seen != net.params.len() {
        return Err(Error::format(format!(
            "checkpoint: {} of {} parameters present",
            seen,
            net.params.len()
        )));
    }
    for (layer, running) in net.running.iter_mut() {
        let [Some(mean), Some(var), Some(count)] = stats.remove(layer).unwrap_or_default() else {
            return Err(Error::format(format!("checkpoint: incomplete running stats for {layer}")));
        };
        if mean.len() != running.mean.len() || var.len() != running.var.len() || count.len() != 1 {
            return Err(Error::format(format!("checkpoint: running stats for {layer} have wrong length")));
        }
        *running = RunningStats {
            mean,
            var,
            batches: count[0] as u64,
            momentum: running.momentum,
        };
    }
    Ok(net)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(net)?)
}

pub fn load(path: &Path, dtype: DType) -> Result<Network> {
    from_bytes(&std::fs::read(path)?, dtype)
}
