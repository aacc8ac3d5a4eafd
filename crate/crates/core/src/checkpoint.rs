//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "TKDTCKPT"
//! version  u32
//! header   u64 length + UTF-8 TOML (configs, progress, RNG, motion statistics)
//! count    u32
//! entries  count × { u32 name length, name, u32 rank, rank × u64 extents, u64 payload offset }
//! payload  f32 values, entries back to back
//! ```
//!
//! Tensor names are `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{DiTConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::motion::NormStats;
use crate::numerics::{Params, RngSnapshot, Tensor};

pub const MAGIC: &[u8; 8] = b"TKDTCKPT";
pub const VERSION: u32 = 1;

/// Corpus statistics for turning keypoint variance into motion coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionNorm {
    pub lip: NormStats,
    pub body: NormStats,
}

/// Completed optimizer steps per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub clip_steps: usize,
    pub frame_steps: usize,
}

impl Progress {
    pub fn total(&self) -> usize {
        self.clip_steps + self.frame_steps
    }
}

/// Adam moments and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Params<f32>,
    pub v: Params<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiTCheckpoint {
    pub model: DiTConfig,
    pub train: TrainConfig,
    pub motion_norm: Option<MotionNorm>,
    pub progress: Progress,
    /// Root stream of the training run; per-step streams are derived from it.
    pub rng: RngSnapshot,
    pub params: Params<f32>,
    pub optimizer: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    progress: Progress,
    rng: RngSnapshot,
    adam_t: Option<u64>,
    motion_norm: Option<MotionNorm>,
    model: DiTConfig,
    train: TrainConfig,
}

impl DiTCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            progress: self.progress,
            rng: self.rng,
            adam_t: self.optimizer.as_ref().map(|a| a.t),
            motion_norm: self.motion_norm,
            model: self.model.clone(),
            train: self.train.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::format("checkpoint header", e.to_string()))?;

        let mut entries: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|(k, v)| (format!("param/{k}"), v)).collect();
        if let Some(a) = &self.optimizer {
            entries.extend(a.m.iter().map(|(k, v)| (format!("adam.m/{k}"), v)));
            entries.extend(a.v.iter().map(|(k, v)| (format!("adam.v/{k}"), v)));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.len() as u64;
        }
        for (_, t) in &entries {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let bad = |what: &str| Error::format("checkpoint", what.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = read_u64(&mut r)? as usize;
        if hlen > r.len() {
            return Err(bad("truncated header"));
        }
        let text = std::str::from_utf8(&r[..hlen]).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::format("checkpoint header", e.to_string()))?;
        r = &r[hlen..];

        let count = read_u32(&mut r)? as usize;
        let mut dir = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = read_u32(&mut r)? as usize;
            if n > r.len() {
                return Err(bad("truncated tensor name"));
            }
            let name = std::str::from_utf8(&r[..n]).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
            r = &r[n..];
            let rank = read_u32(&mut r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(bad("tensor rank"));
            }
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = read_u64(&mut r)? as usize;
            dir.push((name, shape, offset));
        }
        let payload = r;
        let (mut params, mut m, mut v) = (Params::new(), Params::new(), Params::new());
        for (name, shape, offset) in dir {
            let n: usize = shape.iter().product();
            let (lo, hi) = (offset * 4, (offset + n) * 4);
            if hi > payload.len() || n == 0 {
                return Err(Error::format("checkpoint", format!("payload of {name} out of range")));
            }
            let data = payload[lo..hi]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data)?;
            let (kind, key) = name.split_once('/').ok_or_else(|| bad("tensor name without kind"))?;
            match kind {
                "param" => params.insert(key, t),
                "adam.m" => m.insert(key, t),
                "adam.v" => v.insert(key, t),
                other => return Err(Error::format("checkpoint", format!("unknown tensor kind {other}"))),
            }
        }
        let optimizer = header.adam_t.map(|t| AdamState { t, m, v });
        Ok(Self {
            model: header.model,
            train: header.train,
            motion_norm: header.motion_norm,
            progress: header.progress,
            rng: header.rng,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::format("checkpoint", "truncated integer"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::format("checkpoint", "truncated integer"))?;
    Ok(u64::from_le_bytes(b))
}
