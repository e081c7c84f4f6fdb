//! On-disk store of latent arrays and storage accounting.
//!
//! File layout (little-endian): `b"LATC"`, `u16` version, `u32` header length, header
//! JSON, payload, `u32` CRC-32 of every preceding byte. The header also carries the
//! payload's own CRC-32.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use half::f16;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::codec::LatentRepr;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LATC";
const VERSION: u16 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StoreMode {
    #[default]
    MuOnly,
    MuSigma,
}

impl StoreMode {
    fn arrays(self) -> usize {
        match self {
            StoreMode::MuOnly => 1,
            StoreMode::MuSigma => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LatentDtype {
    Float32,
    #[default]
    Float16,
}

impl LatentDtype {
    pub fn bytes(self) -> usize {
        match self {
            LatentDtype::Float32 => 4,
            LatentDtype::Float16 => 2,
        }
    }
}

/// Where a latent came from, recorded in its header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMeta {
    pub variable: String,
    pub timestamp: DateTime<Utc>,
    pub source_dims: (usize, usize),
    pub factor: usize,
    pub norm_stats_hash: String,
    pub codec_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub key: String,
    pub version: u16,
    #[serde(flatten)]
    pub meta: LatentMeta,
    pub latent_dims: (usize, usize, usize),
    pub dtype: LatentDtype,
    pub mode: StoreMode,
    pub payload_crc: u32,
    /// Size of the whole file in bytes.
    pub file_bytes: u64,
}

/// What was read back: the mean alone, or mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentPayload {
    Mu(Array3<f32>),
    Full(LatentRepr),
}

impl LatentPayload {
    pub fn mu(&self) -> &Array3<f32> {
        match self {
            LatentPayload::Mu(m) => m,
            LatentPayload::Full(l) => &l.mu,
        }
    }
}

fn encode_values(values: &Array3<f32>, dtype: LatentDtype, out: &mut Vec<u8>) {
    for &v in values.iter() {
        match dtype {
            LatentDtype::Float32 => out.extend_from_slice(&v.to_le_bytes()),
            LatentDtype::Float16 => out.extend_from_slice(&f16::from_f32(v).to_le_bytes()),
        }
    }
}

fn decode_values(bytes: &[u8], dims: (usize, usize, usize), dtype: LatentDtype) -> Array3<f32> {
    let vals: Vec<f32> = match dtype {
        LatentDtype::Float32 => bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
        LatentDtype::Float16 => bytes
            .chunks_exact(2)
            .map(|b| f16::from_le_bytes(b.try_into().unwrap()).to_f32())
            .collect(),
    };
    Array3::from_shape_vec(dims, vals).expect("payload length checked")
}

/// Directory of latent files plus a JSON manifest of their headers.
#[derive(Debug, Clone)]
pub struct LatentStore {
    root: PathBuf,
}

impl LatentStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> Result<BTreeMap<String, ArchiveHeader>> {
        let path = self.root.join(MANIFEST);
        if !path.exists() {
            return Ok(BTreeMap::new());
        }
        let list: Vec<ArchiveHeader> = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(list.into_iter().map(|h| (h.key.clone(), h)).collect())
    }

    fn write_manifest(&self, m: &BTreeMap<String, ArchiveHeader>) -> Result<()> {
        let list: Vec<&ArchiveHeader> = m.values().collect();
        write_atomic(&self.root.join(MANIFEST), serde_json::to_string_pretty(&list)?.as_bytes())
    }

    /// File name for a key; anything outside `[A-Za-z0-9._-]` becomes `_`.
    pub fn path_for(&self, key: &str) -> PathBuf {
        let safe: String = key
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
            .collect();
        self.root.join(format!("{safe}.latc"))
    }

    pub fn keys(&self) -> Result<Vec<String>> {
        Ok(self.manifest()?.into_keys().collect())
    }
}

pub fn default_key(meta: &LatentMeta) -> String {
    format!("{}_{}", meta.variable, meta.timestamp.format("%Y%m%dT%H%M%SZ"))
}

pub fn write_latent(
    store: &LatentStore,
    key: &str,
    latent: &LatentRepr,
    mode: StoreMode,
    dtype: LatentDtype,
    meta: &LatentMeta,
) -> Result<ArchiveHeader> {
    let latent = LatentRepr::new(latent.mu.clone(), latent.log_var.clone())?;
    let dims = latent.mu.dim();
    if meta.factor == 0 || (dims.1 * meta.factor, dims.2 * meta.factor) != meta.source_dims {
        return Err(Error::Shape(format!(
            "latent {:?} with factor {} does not match source {:?}",
            dims, meta.factor, meta.source_dims
        )));
    }
    let mut manifest = store.manifest()?;
    let path = store.path_for(key);
    if manifest.contains_key(key) || path.exists() {
        return Err(Error::DuplicateKey(key.to_string()));
    }

    let mut payload = Vec::with_capacity(mode.arrays() * dims.0 * dims.1 * dims.2 * dtype.bytes());
    encode_values(&latent.mu, dtype, &mut payload);
    if mode == StoreMode::MuSigma {
        encode_values(&latent.log_var, dtype, &mut payload);
    }
    let mut header = ArchiveHeader {
        key: key.to_string(),
        version: VERSION,
        meta: meta.clone(),
        latent_dims: dims,
        dtype,
        mode,
        payload_crc: crc32fast::hash(&payload),
        file_bytes: 0,
    };
    // The header records the total size, which depends on the header's own length.
    let mut json = serde_json::to_vec(&header)?;
    loop {
        let total = (4 + 2 + 4 + json.len() + payload.len() + 4) as u64;
        if header.file_bytes == total {
            break;
        }
        header.file_bytes = total;
        json = serde_json::to_vec(&header)?;
    }
    let mut bytes = Vec::with_capacity(header.file_bytes as usize);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());

    write_atomic(&path, &bytes)?;
    manifest.insert(key.to_string(), header.clone());
    store.write_manifest(&manifest)?;
    Ok(header)
}

/// Parses and verifies one archive file.
pub fn read_latent_file(path: &Path) -> Result<(ArchiveHeader, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let name = path.display().to_string();
    if bytes.len() < 14 || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{name} is not a latent archive")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Checksum(name));
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let hlen = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
    let json = body.get(10..10 + hlen).ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: ArchiveHeader = serde_json::from_slice(json)?;
    let payload = body[10 + hlen..].to_vec();
    let (c, h, w) = header.latent_dims;
    if payload.len() != header.mode.arrays() * c * h * w * header.dtype.bytes() {
        return Err(Error::Format(format!("{name}: payload length does not match header")));
    }
    if crc32fast::hash(&payload) != header.payload_crc {
        return Err(Error::Checksum(name));
    }
    Ok((header, payload))
}

pub fn read_latent(store: &LatentStore, key: &str, requested: StoreMode) -> Result<(LatentPayload, ArchiveHeader)> {
    let path = store.path_for(key);
    if !path.exists() {
        return Err(Error::MissingKey(key.to_string()));
    }
    let (header, payload) = read_latent_file(&path)?;
    if header.key != key {
        return Err(Error::Format(format!("file for `{key}` holds `{}`", header.key)));
    }
    if header.mode == StoreMode::MuOnly && requested == StoreMode::MuSigma {
        return Err(Error::ModeMismatch { stored: "mu_only".into(), requested: "mu_sigma".into() });
    }
    let dims = header.latent_dims;
    let half = payload.len() / header.mode.arrays();
    let mu = decode_values(&payload[..half], dims, header.dtype);
    let out = match requested {
        StoreMode::MuOnly => LatentPayload::Mu(mu),
        StoreMode::MuSigma => LatentPayload::Full(LatentRepr::new(mu, decode_values(&payload[half..], dims, header.dtype))?),
    };
    Ok((out, header))
}

/// Size of the uncompressed source data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub dims: (usize, usize),
    pub channels: usize,
    pub bytes_per_value: usize,
    pub samples: usize,
}

/// Size of the stored latents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub latent_dims: (usize, usize, usize),
    pub dtype: LatentDtype,
    pub mode: StoreMode,
    /// Per-file header and checksum bytes; zero for payload-only accounting.
    pub overhead_bytes: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub source_bytes: f64,
    pub archived_bytes: f64,
    pub ratio: f64,
    pub assumptions: String,
}

pub fn compression_ratio(source: &SourceMeta, archive: &ArchiveMeta) -> Result<RatioReport> {
    let src = (source.dims.0 * source.dims.1 * source.channels * source.bytes_per_value * source.samples) as f64;
    let (c, h, w) = archive.latent_dims;
    let per = archive.mode.arrays() * c * h * w * archive.dtype.bytes() + archive.overhead_bytes;
    let dst = (per * archive.samples) as f64;
    if !(src > 0.0 && dst > 0.0) {
        return Err(Error::Shape("source and archive sizes must be non-zero".into()));
    }
    let assumptions = format!(
        "source: {} sample(s) of {}x{}x{} at {} B/value; archive: {:?} {:?} latents {c}x{h}x{w}, {} B overhead per file",
        source.samples,
        source.channels,
        source.dims.0,
        source.dims.1,
        source.bytes_per_value,
        archive.mode,
        archive.dtype,
        archive.overhead_bytes
    );
    Ok(RatioReport { source_bytes: src, archived_bytes: dst, ratio: src / dst, assumptions })
}

/// The end-to-end corpus figure quoted for the full-scale system (8.61 TB to 204 GB).
pub fn reference_ratio() -> RatioReport {
    RatioReport {
        source_bytes: 8.61e12,
        archived_bytes: 204e9,
        ratio: 8.61e12 / 204e9,
        assumptions: "quoted corpus totals; source container format and overheads are not specified, so this \
                      figure cannot be rebuilt from byte arithmetic alone"
            .into(),
    }
}

/// Accounting against the actual files in a store.
pub fn store_ratio(store: &LatentStore, source: &SourceMeta) -> Result<RatioReport> {
    let manifest = store.manifest()?;
    if manifest.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dst: u64 = manifest.values().map(|h| h.file_bytes).sum();
    let src = (source.dims.0 * source.dims.1 * source.channels * source.bytes_per_value * source.samples) as f64;
    Ok(RatioReport {
        source_bytes: src,
        archived_bytes: dst as f64,
        ratio: src / dst as f64,
        assumptions: format!("{} archive file(s) measured on disk, headers included", manifest.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta() -> LatentMeta {
        LatentMeta {
            variable: "T2M".into(),
            timestamp: Utc.with_ymd_and_hms(2022, 7, 1, 6, 0, 0).unwrap(),
            source_dims: (64, 48),
            factor: 8,
            norm_stats_hash: "n".into(),
            codec_fingerprint: "f".into(),
        }
    }

    fn latent(seed: u64) -> LatentRepr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = Array3::from_shape_fn((4, 8, 6), |_| rng.gen_range(-3.0f32..3.0));
        let lv = Array3::from_shape_fn((4, 8, 6), |_| rng.gen_range(-8.0f32..0.0));
        LatentRepr::new(mu, lv).unwrap()
    }

    #[test]
    fn float32_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let store = LatentStore::open(dir.path()).unwrap();
        let l = latent(1);
        let h = write_latent(&store, "a", &l, StoreMode::MuSigma, LatentDtype::Float32, &meta()).unwrap();
        assert_eq!(h.file_bytes, fs::metadata(store.path_for("a")).unwrap().len());
        let (p, h2) = read_latent(&store, "a", StoreMode::MuSigma).unwrap();
        assert_eq!(h, h2);
        assert_eq!(p, LatentPayload::Full(l.clone()));
        let (mu, _) = read_latent(&store, "a", StoreMode::MuOnly).unwrap();
        assert_eq!(mu.mu(), &l.mu);
    }

    #[test]
    fn float16_error_bound() {
        let dir = tempfile::tempdir().unwrap();
        let store = LatentStore::open(dir.path()).unwrap();
        let l = latent(2);
        write_latent(&store, "b", &l, StoreMode::MuOnly, LatentDtype::Float16, &meta()).unwrap();
        let (p, _) = read_latent(&store, "b", StoreMode::MuOnly).unwrap();
        let max = l.mu.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let err = p.mu().iter().zip(l.mu.iter()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= max * 2f32.powi(-11), "{err} vs {max}");
        assert!(matches!(
            read_latent(&store, "b", StoreMode::MuSigma),
            Err(Error::ModeMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_and_missing_keys() {
        let dir = tempfile::tempdir().unwrap();
        let store = LatentStore::open(dir.path()).unwrap();
        write_latent(&store, "k", &latent(3), StoreMode::MuOnly, LatentDtype::Float16, &meta()).unwrap();
        let before = fs::read(store.path_for("k")).unwrap();
        let manifest = store.manifest().unwrap();
        assert!(matches!(
            write_latent(&store, "k", &latent(4), StoreMode::MuOnly, LatentDtype::Float32, &meta()),
            Err(Error::DuplicateKey(_))
        ));
        assert_eq!(fs::read(store.path_for("k")).unwrap(), before);
        assert_eq!(store.manifest().unwrap(), manifest);
        assert!(matches!(read_latent(&store, "nope", StoreMode::MuOnly), Err(Error::MissingKey(_))));
    }

    #[test]
    fn every_byte_flip_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = LatentStore::open(dir.path()).unwrap();
        write_latent(&store, "c", &latent(5), StoreMode::MuOnly, LatentDtype::Float16, &meta()).unwrap();
        let path = store.path_for("c");
        let good = fs::read(&path).unwrap();
        for i in 0..good.len() {
            let mut bad = good.clone();
            bad[i] ^= 0x01;
            fs::write(&path, &bad).unwrap();
            assert!(read_latent(&store, "c", StoreMode::MuOnly).is_err(), "byte {i}");
        }
    }

    #[test]
    fn dims_must_match_source() {
        let dir = tempfile::tempdir().unwrap();
        let store = LatentStore::open(dir.path()).unwrap();
        let m = LatentMeta { source_dims: (64, 64), ..meta() };
        assert!(matches!(
            write_latent(&store, "d", &latent(6), StoreMode::MuOnly, LatentDtype::Float16, &m),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ratio_arithmetic() {
        let src = SourceMeta { dims: (4384, 6880), channels: 1, bytes_per_value: 4, samples: 1 };
        let mut arc = ArchiveMeta {
            latent_dims: (4, 548, 860),
            dtype: LatentDtype::Float16,
            mode: StoreMode::MuOnly,
            overhead_bytes: 0,
            samples: 1,
        };
        assert_eq!(compression_ratio(&src, &arc).unwrap().ratio, 32.0);
        arc.dtype = LatentDtype::Float32;
        assert_eq!(compression_ratio(&src, &arc).unwrap().ratio, 16.0);
        arc.mode = StoreMode::MuSigma;
        assert_eq!(compression_ratio(&src, &arc).unwrap().ratio, 8.0);
        let r = reference_ratio();
        assert!((r.ratio - 42.2).abs() < 0.05);
    }
}
