//! Dataset directory: `manifest.json` plus `data.bin`.
//!
//! Each episode occupies one contiguous byte range of `data.bin`, guarded by
//! a CRC-32 stored in the manifest. Inside a range, all integers are u64 and
//! all reals f64, little-endian:
//!
//! ```text
//! clouds:    n, then per cloud: points m, m*3 positions, m*3 colors
//! steps:     n, then per step: cloud index, gripper open (0/1),
//!            3 translation, 3 euler, step index
//! keyframes: n, then n indices
//! actions:   n, then per action: 3 translation, 3 euler,
//!            gripper open (0/1), collision allowed (0/1)
//! ```
//!
//! Steps that share a cloud in memory share it on disk.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::episode::{Episode, KeyframeAction, Step};
use crate::error::{Error, Result};
use crate::geom::{PointCloud, Vec3};

pub const DATASET_FORMAT: &str = "rvt-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "data.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub language: String,
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
    pub steps: usize,
    pub keyframes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub episode_count: usize,
    pub blob_bytes: u64,
    pub episodes: Vec<EpisodeEntry>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn v3(&mut self, v: Vec3) {
        self.f(v.x);
        self.f(v.y);
        self.f(v.z);
    }
    fn flag(&mut self, b: bool) {
        self.f(if b { 1.0 } else { 0.0 });
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                needed: (self.pos + n) as u64,
                available: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn count(&mut self) -> Result<usize> {
        let n = self.u()?;
        // every counted item takes at least 8 bytes
        if n > (self.buf.len() - self.pos) as u64 / 8 + 1 {
            return Err(Error::Format(format!("implausible element count {n}")));
        }
        Ok(n as usize)
    }
    fn f(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn v3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f()?, self.f()?, self.f()?))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.f()? {
            0.0 => Ok(false),
            1.0 => Ok(true),
            x => Err(Error::Format(format!("flag value {x}"))),
        }
    }
}

pub fn encode_episode(ep: &Episode) -> Vec<u8> {
    let mut clouds: Vec<&Arc<PointCloud>> = Vec::new();
    let mut refs = Vec::with_capacity(ep.steps.len());
    for s in &ep.steps {
        let idx = match clouds.iter().position(|c| Arc::ptr_eq(c, &s.cloud)) {
            Some(i) => i,
            None => {
                clouds.push(&s.cloud);
                clouds.len() - 1
            }
        };
        refs.push(idx);
    }
    let mut w = Writer(Vec::new());
    w.u(clouds.len() as u64);
    for c in &clouds {
        w.u(c.len() as u64);
        for p in &c.positions {
            w.v3(*p);
        }
        for rgb in &c.colors {
            for &x in rgb {
                w.f(x);
            }
        }
    }
    w.u(ep.steps.len() as u64);
    for (s, &r) in ep.steps.iter().zip(&refs) {
        w.u(r as u64);
        w.flag(s.gripper_open);
        w.v3(s.ee_translation);
        w.v3(s.ee_euler);
        w.u(s.index as u64);
    }
    w.u(ep.keyframes.len() as u64);
    for &k in &ep.keyframes {
        w.u(k as u64);
    }
    w.u(ep.actions.len() as u64);
    for a in &ep.actions {
        w.v3(a.translation);
        w.v3(a.euler);
        w.flag(a.gripper_open);
        w.flag(a.collision_allowed);
    }
    w.0
}

pub fn decode_episode(bytes: &[u8], language: String) -> Result<Episode> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let n_clouds = r.count()?;
    let mut clouds = Vec::with_capacity(n_clouds);
    for _ in 0..n_clouds {
        let m = r.count()?;
        let positions = (0..m).map(|_| r.v3()).collect::<Result<Vec<_>>>()?;
        let colors = (0..m)
            .map(|_| Ok([r.f()?, r.f()?, r.f()?]))
            .collect::<Result<Vec<_>>>()?;
        clouds.push(Arc::new(PointCloud::new(positions, colors)?));
    }
    let n_steps = r.count()?;
    let mut steps = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let c = r.u()? as usize;
        let cloud = clouds
            .get(c)
            .ok_or_else(|| Error::Format(format!("step refers to missing cloud {c}")))?
            .clone();
        steps.push(Step {
            cloud,
            gripper_open: r.flag()?,
            ee_translation: r.v3()?,
            ee_euler: r.v3()?,
            index: r.u()? as usize,
        });
    }
    let n_keys = r.count()?;
    let keyframes = (0..n_keys).map(|_| Ok(r.u()? as usize)).collect::<Result<Vec<_>>>()?;
    let n_actions = r.count()?;
    let mut actions = Vec::with_capacity(n_actions);
    for _ in 0..n_actions {
        actions.push(KeyframeAction {
            translation: r.v3()?,
            euler: r.v3()?,
            gripper_open: r.flag()?,
            collision_allowed: r.flag()?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in episode", bytes.len() - r.pos)));
    }
    Ok(Episode {
        language,
        steps,
        keyframes,
        actions,
    })
}

pub fn save_dataset(episodes: &[Episode], dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let bytes = encode_episode(ep);
        entries.push(EpisodeEntry {
            language: ep.language.clone(),
            offset: blob.len() as u64,
            length: bytes.len() as u64,
            crc32: crc32fast::hash(&bytes),
            steps: ep.steps.len(),
            keyframes: ep.keyframes.len(),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        episode_count: episodes.len(),
        blob_bytes: blob.len() as u64,
        episodes: entries,
    };
    std::fs::write(dir.join(BLOB_FILE), &blob)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format(format!("not a dataset manifest: {}", manifest.format)));
    }
    if manifest.version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.version,
            expected: DATASET_VERSION,
        });
    }
    if manifest.episode_count != manifest.episodes.len() {
        return Err(Error::Format(format!(
            "manifest lists {} episodes but counts {}",
            manifest.episodes.len(),
            manifest.episode_count
        )));
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Episode>> {
    let manifest = read_manifest(dir)?;
    let blob = std::fs::read(dir.join(BLOB_FILE))?;
    if (blob.len() as u64) < manifest.blob_bytes {
        return Err(Error::Truncated {
            needed: manifest.blob_bytes,
            available: blob.len() as u64,
        });
    }
    manifest
        .episodes
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let end = e.offset.checked_add(e.length).filter(|&end| end <= blob.len() as u64).ok_or(
                Error::Truncated {
                    needed: e.offset.saturating_add(e.length),
                    available: blob.len() as u64,
                },
            )?;
            let bytes = &blob[e.offset as usize..end as usize];
            let computed = crc32fast::hash(bytes);
            if computed != e.crc32 {
                return Err(Error::Checksum {
                    episode: i,
                    stored: e.crc32,
                    computed,
                });
            }
            decode_episode(bytes, e.language.clone())
        })
        .collect()
}
