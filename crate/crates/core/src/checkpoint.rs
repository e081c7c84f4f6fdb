//! Self-describing model checkpoint container.
//!
//! Layout: `b"LCKP"`, `u16` version, `u32` manifest length, manifest JSON,
//! little-endian f32 parameter blob, trailing `u32` CRC-32 of all preceding bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::grid::NormStats;
use crate::nn::NamedTensor;

const MAGIC: &[u8; 4] = b"LCKP";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// `"vae"` or `"unet"`.
    pub kind: String,
    pub config: Value,
    pub norm_stats: NormStats,
    pub fingerprint: String,
    pub provenance: Value,
    pub history_csv: String,
    pub tensors: Vec<NamedTensor>,
}

/// Writes to a sibling temp file and renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(self)?;
        let n_values: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(10 + manifest.len() + 4 * n_values + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 14 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Checksum("checkpoint".into()));
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mlen = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
        let manifest = body
            .get(10..10 + mlen)
            .ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let mut ck: Checkpoint = serde_json::from_slice(manifest)?;
        let mut blob = body[10 + mlen..].chunks_exact(4);
        for t in &mut ck.tensors {
            let len: usize = t.shape.iter().product();
            t.data = blob
                .by_ref()
                .take(len)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if t.data.len() != len {
                return Err(Error::Format(format!("truncated tensor {}", t.name)));
            }
        }
        if blob.next().is_some() || !blob.remainder().is_empty() {
            return Err(Error::Format("trailing bytes after parameter blob".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: "vae".into(),
            config: serde_json::json!({"latent_channels": 4}),
            norm_stats: NormStats::default(),
            fingerprint: "abc".into(),
            provenance: serde_json::json!({"phase": "init"}),
            history_csv: "phase,epoch\n".into(),
            tensors: vec![
                NamedTensor { name: "a".into(), shape: vec![2, 3], data: (0..6).map(|v| v as f32).collect() },
                NamedTensor { name: "b".into(), shape: vec![1], data: vec![-1.5] },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(), ck);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 9] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checksum(_))));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::Format(_))));
    }

    #[test]
    fn atomic_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/model.ckpt");
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), sample());
        assert!(!dir.path().join("sub/model.ckpt.tmp").exists());
    }
}
