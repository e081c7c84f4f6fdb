//! Operator commands behind the `latcomp` binary: dataset materialization, training,
//! archive encode/decode and evaluation reports.
//!
//! Output layout under `out_dir`:
//! `run.toml`, `codec*.ckpt`, `unet.ckpt`, `history*.csv`, `checkpoints/`, `archive/`,
//! `archive_report.json`, `predictions/<method>/`, `eval/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{
    compression_ratio, read_latent, write_latent, ArchiveMeta, LatentMeta, LatentStore, RatioReport, SourceMeta,
};
use crate::checkpoint::write_atomic;
use crate::codec::{history_to_csv, train_vae, train_vae_per_variable, Codec, CodecDataset, ModelParams};
use crate::config::{DataSource, Preset, RunConfig};
use crate::downscale::{
    bilinear_resize, canonical_input_variables, down_history_csv, interp_baseline, train_downscaler, DownscalePair,
    DownscaleSetup, Downscaler, Mode, UNetParams,
};
use crate::error::{Error, Result};
use crate::grid::{hex_digest, zscore_apply, zscore_invert, GridField};
use crate::ingest::{ingest_container, sidecar_path, write_raw};
use crate::metrics::{
    aggregate_report, density_histogram, mse, rmse, rows_to_csv, ssim, zonal_power_spectrum, zonal_spacing_km,
    MetricReport, MetricRow, SpectrumResult, SsimParams,
};
use crate::synthetic::{gen_forecast_pair, gen_grf, DEFAULT_LAT_RANGE, DEFAULT_LON_RANGE};

/// Process exit code for an error: 2 configuration, 3 training abort, 4 data.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::TrainingAborted { .. } => 3,
        _ => 4,
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub out: Option<PathBuf>,
}

pub fn load_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match (&o.config, o.preset) {
        (Some(path), preset) => RunConfig::from_toml(&fs::read_to_string(path)?, preset)?,
        (None, Some(p)) => RunConfig::preset(p, Default::default()),
        (None, None) => return Err(Error::Config("pass --config or --preset".into())),
    };
    if let Some(s) = o.seed {
        cfg.seed = Some(s);
    }
    if o.deterministic {
        cfg.deterministic = true;
    }
    // Pin a clock seed once so every later stage sees the same value.
    cfg.seed = Some(cfg.effective_seed());
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One evaluation sample: fine-grid truth plus, for downscaling, its coarse input.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub high: GridField,
    pub low: Option<GridField>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub split: String,
    pub role: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub data_hash: String,
    pub seed: u64,
    pub pairs: bool,
    pub entries: Vec<ManifestEntry>,
}

fn sample_seed(base: u64, split: usize, index: usize, variable: usize) -> u64 {
    base.wrapping_add(((split as u64) << 40) + (index as u64) * 64 + variable as u64)
}

/// Hash of everything that determines the synthetic dataset.
pub fn data_hash(cfg: &RunConfig) -> String {
    let key = serde_json::json!({
        "data": cfg.data,
        "seed": cfg.effective_seed(),
        "pairs": cfg.preset.is_downscale(),
    });
    hex_digest(&Sha256::digest(key.to_string().as_bytes()))
}

fn stack(fields: &[GridField]) -> Result<GridField> {
    let views: Vec<_> = fields.iter().map(|f| f.values.view()).collect();
    let values = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let variables = fields.iter().flat_map(|f| f.variables.iter().cloned()).collect();
    let f0 = &fields[0];
    GridField::new(values, variables, f0.lat_range, f0.lon_range, f0.timestamp)
}

fn subset(field: &GridField, variables: &[String]) -> Result<GridField> {
    let parts = variables.iter().map(|v| field.select(v)).collect::<Result<Vec<_>>>()?;
    stack(&parts)
}

fn synth_sample(cfg: &RunConfig, seed: u64, split: usize, index: usize) -> Result<Sample> {
    let name = format!("{}_{index:04}", if split == 0 { "train" } else { "test" });
    if cfg.preset.is_downscale() {
        let (low, high) = gen_forecast_pair(&cfg.data.pair_spec(sample_seed(seed, split, index, 0)))?;
        Ok(Sample { name, high, low: Some(low) })
    } else {
        let parts = (0..cfg.data.variables.len())
            .map(|v| gen_grf(&cfg.data.synthetic_spec(v, sample_seed(seed, split, index, v))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Sample { name, high: stack(&parts)?, low: None })
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex_digest(&Sha256::digest(fs::read(path)?)))
}

fn is_non_empty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Writes the synthetic dataset of `cfg` to `dir` with a checksummed manifest.
/// The directory is built next to `dir` and renamed into place.
pub fn cmd_synth(cfg: &RunConfig, dir: &Path, force: bool) -> Result<DatasetManifest> {
    if cfg.data.source != DataSource::Synthetic {
        return Err(Error::Config("synth needs data.source = \"synthetic\"".into()));
    }
    if is_non_empty(dir) && !force {
        return Err(Error::Config(format!("{} is not empty; pass --force to replace it", dir.display())));
    }
    let seed = cfg.effective_seed();
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp{}",
        dir.file_name().and_then(|s| s.to_str()).unwrap_or("data"),
        std::process::id()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    let mut entries = Vec::new();
    for (split, (label, n)) in [("train", cfg.data.n_train), ("test", cfg.data.n_test)].into_iter().enumerate() {
        fs::create_dir_all(tmp.join(label))?;
        for i in 0..n {
            let s = synth_sample(cfg, seed, split, i)?;
            let mut files = vec![("high", &s.high)];
            if let Some(low) = &s.low {
                files.push(("low", low));
            }
            for (role, field) in files {
                let file = format!("{label}/{}_{role}.raw", s.name);
                write_raw(&tmp.join(&file), field)?;
                entries.push(ManifestEntry {
                    name: s.name.clone(),
                    split: label.into(),
                    role: role.into(),
                    sha256: sha256_file(&tmp.join(&file))?,
                    file,
                });
            }
        }
    }
    let manifest = DatasetManifest { data_hash: data_hash(cfg), seed, pairs: cfg.preset.is_downscale(), entries };
    fs::write(tmp.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(manifest)
}

/// Reads a dataset directory, verifying every checksum.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut by_key: BTreeMap<(String, String), (Option<GridField>, Option<GridField>)> = BTreeMap::new();
    for e in &manifest.entries {
        let path = dir.join(&e.file);
        if sha256_file(&path)? != e.sha256 {
            return Err(Error::Checksum(path.display().to_string()));
        }
        let side: crate::ingest::RawSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(&path))?)?;
        let vars: Vec<&str> = side.variables.iter().map(String::as_str).collect();
        let field = ingest_container(&path, &vars, 0)?;
        let slot = by_key.entry((e.split.clone(), e.name.clone())).or_default();
        match e.role.as_str() {
            "high" => slot.0 = Some(field),
            "low" => slot.1 = Some(field),
            r => return Err(Error::Format(format!("unknown manifest role `{r}`"))),
        }
    }
    let mut ds = Dataset::default();
    for ((split, name), (high, low)) in by_key {
        let high = high.ok_or_else(|| Error::Pairing(format!("{name} has no fine-grid field")))?;
        if manifest.pairs && low.is_none() {
            return Err(Error::Pairing(format!("{name} has no coarse input")));
        }
        let s = Sample { name, high, low };
        if split == "train" { ds.train.push(s) } else { ds.test.push(s) }
    }
    Ok(ds)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("sample").to_string()
}

fn load_container_split(cfg: &RunConfig, highs: &[PathBuf], lows: &[PathBuf]) -> Result<Vec<Sample>> {
    let vars: Vec<&str> = cfg.data.variables.iter().map(String::as_str).collect();
    if cfg.preset.is_downscale() && lows.len() != highs.len() {
        return Err(Error::Pairing(format!("{} fine-grid files but {} coarse files", highs.len(), lows.len())));
    }
    let inputs = canonical_input_variables();
    let inputs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    highs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let low = if cfg.preset.is_downscale() { Some(ingest_container(&lows[i], &inputs, 0)?) } else { None };
            Ok(Sample { name: file_stem(p), high: ingest_container(p, &vars, 0)?, low })
        })
        .collect()
}

/// Cache directory: `LATCOMP_CACHE`, else `<out_dir>/.cache`.
pub fn cache_root(cfg: &RunConfig) -> PathBuf {
    std::env::var_os("LATCOMP_CACHE").map(PathBuf::from).unwrap_or_else(|| cfg.out_dir.join(".cache"))
}

/// Loads the configured data, materializing synthetic sets into the cache on first use.
pub fn ensure_dataset(cfg: &RunConfig, force: bool) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Container => Ok(Dataset {
            train: load_container_split(cfg, &cfg.data.train_paths, &cfg.data.train_low_paths)?,
            test: load_container_split(cfg, &cfg.data.test_paths, &cfg.data.test_low_paths)?,
        }),
        DataSource::Synthetic => {
            let dir = cache_root(cfg).join(&data_hash(cfg)[..16]);
            if force || !dir.join("manifest.json").exists() {
                cmd_synth(cfg, &dir, true)?;
            }
            load_dataset_dir(&dir)
        }
    }
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("checkpoints")
}

/// Variable groups with one codec each: every variable alone, or all of them together.
pub fn codec_groups(cfg: &RunConfig) -> Vec<Vec<String>> {
    if cfg.preset.per_variable() || cfg.preset.is_downscale() && cfg.data.variables.len() == 1 {
        cfg.data.variables.iter().map(|v| vec![v.clone()]).collect()
    } else {
        vec![cfg.data.variables.clone()]
    }
}

fn group_label(group: &[String]) -> String {
    group.join("+")
}

pub fn codec_path(cfg: &RunConfig, group: &[String]) -> PathBuf {
    cfg.out_dir.join(format!("codec_{}.ckpt", group_label(group)))
}

/// Trains the codec(s) of a codec preset; returns the final checkpoint paths.
pub fn cmd_train_vae(cfg: &RunConfig, data: &Dataset) -> Result<Vec<PathBuf>> {
    if !cfg.preset.is_codec() {
        return Err(Error::Config(match cfg.preset {
            Preset::Resize => "the resize baseline needs no training".to_string(),
            p => format!("preset {p} does not train a codec; use the downscaler trainer"),
        }));
    }
    train_codecs(cfg, data)
}

fn train_codecs(cfg: &RunConfig, data: &Dataset) -> Result<Vec<PathBuf>> {
    let mut schedule = cfg.schedule.clone();
    schedule.seed = cfg.effective_seed();
    let fields: Vec<GridField> = data.train.iter().map(|s| s.high.clone()).collect();
    let ds = CodecDataset::from_physical(&fields, cfg.data.split_id.clone())?;
    fs::create_dir_all(&cfg.out_dir)?;
    let outcomes = if cfg.preset.per_variable() || codec_groups(cfg).len() > 1 {
        train_vae_per_variable(&ds, &schedule, &cfg.codec, Some(&checkpoint_dir(cfg)))?
    } else {
        let group = cfg.data.variables.clone();
        let ds = CodecDataset {
            fields: ds.fields.iter().map(|f| subset(f, &group)).collect::<Result<_>>()?,
            ..ds
        };
        vec![(group_label(&group), train_vae(&ds, &schedule, &cfg.codec, Some(&checkpoint_dir(cfg)))?)]
    };
    let mut paths = Vec::new();
    for (label, out) in outcomes {
        let path = cfg.out_dir.join(format!("codec_{label}.ckpt"));
        out.params.save(&path, &out.history)?;
        write_atomic(&cfg.out_dir.join(format!("history_{label}.csv")), history_to_csv(&out.history).as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}

/// Loads one codec per variable group, from `codec_checkpoint` or the run directory.
pub fn load_codecs(cfg: &RunConfig) -> Result<Vec<(Vec<String>, Codec)>> {
    if let Some(path) = &cfg.codec_checkpoint {
        let params = ModelParams::load(path, None)?;
        let group = match codec_groups(cfg).as_slice() {
            [g] => g.clone(),
            _ => return Err(Error::Config("codec_checkpoint names one codec but the preset needs several".into())),
        };
        return Ok(vec![(group, Codec::new(params)?)]);
    }
    codec_groups(cfg)
        .into_iter()
        .map(|g| {
            let path = codec_path(cfg, &g);
            if !path.exists() {
                return Err(Error::Config(format!("no codec checkpoint at {}; train first", path.display())));
            }
            Ok((g, Codec::new(ModelParams::load(&path, Some(&cfg.codec))?)?))
        })
        .collect()
}

fn pairs(samples: &[Sample]) -> Result<Vec<DownscalePair>> {
    samples
        .iter()
        .map(|s| {
            let low = s.low.clone().ok_or_else(|| Error::Pairing(format!("{} has no coarse input", s.name)))?;
            Ok(DownscalePair { low, high: s.high.clone() })
        })
        .collect()
}

/// Trains the U-Net of a downscaling preset (and its codec in latent mode when none is given).
pub fn cmd_train_down(cfg: &RunConfig, data: &Dataset) -> Result<PathBuf> {
    let mode = match cfg.preset.mode() {
        Some(m) => m,
        None if cfg.preset == Preset::DownInter => {
            return Err(Error::Config("the interpolation baseline needs no training".into()))
        }
        None => return Err(Error::Config(format!("preset {} does not train a downscaler", cfg.preset))),
    };
    let codec = match mode {
        Mode::Latent => {
            if cfg.codec_checkpoint.is_none() && !codec_groups(cfg).iter().all(|g| codec_path(cfg, g).exists()) {
                train_codecs(cfg, data)?;
            }
            let mut codecs = load_codecs(cfg)?;
            if codecs.len() != 1 {
                return Err(Error::Config("latent downscaling needs exactly one codec".into()));
            }
            Some(codecs.remove(0).1)
        }
        Mode::Raw => None,
    };
    let train = pairs(&data.train)?;
    let input_variables = train.first().ok_or(Error::EmptyDataset)?.low.variables.clone();
    let setup = DownscaleSetup {
        unet: cfg.unet.clone(),
        mode,
        input_variables,
        target_variables: cfg.data.variables.clone(),
        raw_patch: cfg.raw_patch,
    };
    let mut schedule = cfg.down_schedule.clone();
    schedule.seed = cfg.effective_seed();
    let out = train_downscaler(&train, &schedule, &setup, codec.as_ref(), Some(&checkpoint_dir(cfg)))?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("unet.ckpt");
    out.params.save(&path, &out.history)?;
    write_atomic(&cfg.out_dir.join("history_unet.csv"), down_history_csv(&out.history).as_bytes())?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeReport {
    pub keys: Vec<String>,
    /// Payload byte arithmetic for the encoded samples.
    pub ratio: RatioReport,
    /// Bytes actually written, headers included.
    pub on_disk: RatioReport,
}

pub fn archive_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("archive")
}

fn archive_key(sample: &str, group: &[String]) -> String {
    format!("{sample}__{}", group_label(group))
}

/// Encodes every sample with its group's codec into the run's latent store.
pub fn cmd_encode(cfg: &RunConfig, samples: &[Sample]) -> Result<EncodeReport> {
    let codecs = load_codecs(cfg)?;
    let store = LatentStore::open(archive_dir(cfg))?;
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let mut keys = Vec::new();
    let mut latent_dims = (0, 0, 0);
    for s in samples {
        for (group, codec) in &codecs {
            let field = zscore_apply(&subset(&s.high, group)?, &codec.params.norm_stats)?;
            let latent = codec.encode(&field)?;
            latent_dims = latent.mu.dim();
            let meta = LatentMeta {
                variable: group_label(group),
                timestamp: s.high.timestamp,
                source_dims: s.high.dims(),
                factor: codec.config().factor(),
                norm_stats_hash: codec.params.norm_stats.content_hash(),
                codec_fingerprint: codec.identity(),
            };
            let key = archive_key(&s.name, group);
            write_latent(&store, &key, &latent, cfg.archive.mode, cfg.archive.dtype, &meta)?;
            keys.push(key);
        }
    }
    let source = SourceMeta {
        dims: first.high.dims(),
        channels: cfg.data.variables.len(),
        bytes_per_value: 4,
        samples: samples.len(),
    };
    let archive = ArchiveMeta {
        latent_dims: (latent_dims.0 * codecs.len(), latent_dims.1, latent_dims.2),
        dtype: cfg.archive.dtype,
        mode: cfg.archive.mode,
        overhead_bytes: 0,
        samples: samples.len(),
    };
    let report = EncodeReport {
        keys,
        ratio: compression_ratio(&source, &archive)?,
        on_disk: crate::archive::store_ratio(&store, &source)?,
    };
    write_atomic(&cfg.out_dir.join("archive_report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

/// Decodes archive entries back to physical fields, checking that each was written by the
/// codec now loaded. An empty `keys` decodes the whole store.
pub fn cmd_decode(cfg: &RunConfig, keys: &[String]) -> Result<Vec<(String, GridField)>> {
    let codecs = load_codecs(cfg)?;
    let store = LatentStore::open(archive_dir(cfg))?;
    let keys = if keys.is_empty() { store.keys()? } else { keys.to_vec() };
    keys.iter()
        .map(|key| {
            let (payload, header) = read_latent(&store, key, cfg.archive.mode)?;
            let (group, codec) = codecs
                .iter()
                .find(|(g, _)| group_label(g) == header.meta.variable)
                .ok_or_else(|| Error::Config(format!("no loaded codec for `{}`", header.meta.variable)))?;
            if header.meta.codec_fingerprint != codec.identity() {
                return Err(Error::Fingerprint {
                    expected: header.meta.codec_fingerprint.clone(),
                    found: codec.identity(),
                });
            }
            let (h, w) = header.meta.source_dims;
            let template = GridField::new(
                Array3::zeros((group.len(), h, w)),
                group.clone(),
                DEFAULT_LAT_RANGE,
                DEFAULT_LON_RANGE,
                header.meta.timestamp,
            )?;
            let field = zscore_invert(&codec.decode(payload.mu(), &template)?, &codec.params.norm_stats)?;
            Ok((key.clone(), field))
        })
        .collect()
}

/// Writes a field as raw + sidecar, each via a temporary file and rename.
pub fn write_raw_atomic(path: &Path, field: &GridField) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    write_raw(&tmp, field)?;
    fs::rename(sidecar_path(&tmp), sidecar_path(path))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes predictions as `<dir>/<sample>__<label>.raw`.
pub fn write_predictions(dir: &Path, fields: &[(String, GridField)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (key, f) in fields {
        write_raw_atomic(&dir.join(format!("{key}.raw")), f)?;
    }
    Ok(())
}

/// Reads a prediction directory, stacking the variables of files that share a sample name
/// (the part of the file stem before `__`).
pub fn read_predictions(dir: &Path) -> Result<BTreeMap<String, GridField>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "raw"));
    paths.sort();
    let mut parts: BTreeMap<String, Vec<GridField>> = BTreeMap::new();
    for p in paths {
        let side: crate::ingest::RawSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(&p))?)?;
        let vars: Vec<&str> = side.variables.iter().map(String::as_str).collect();
        let stem = file_stem(&p);
        let sample = stem.split("__").next().unwrap_or(&stem).to_string();
        parts.entry(sample).or_default().push(ingest_container(&p, &vars, 0)?);
    }
    parts.into_iter().map(|(k, v)| Ok((k, stack(&v)?))).collect()
}

/// Per-sample metrics of every method against the truth, plus mean zonal spectra and
/// density histograms per method and variable, written under `out`.
pub fn cmd_eval(
    truth: &BTreeMap<String, GridField>,
    methods: &[(String, BTreeMap<String, GridField>)],
    variables: &[String],
    lead_time: u32,
    out: &Path,
) -> Result<MetricReport> {
    if truth.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (method, preds) in methods {
        if let Some(missing) = truth.keys().find(|k| !preds.contains_key(*k)) {
            return Err(Error::Pairing(format!("method `{method}` has no prediction for sample `{missing}`")));
        }
        if let Some(extra) = preds.keys().find(|k| !truth.contains_key(*k)) {
            return Err(Error::Pairing(format!("method `{method}` has sample `{extra}` with no truth")));
        }
    }
    let params = SsimParams::default();
    let mut rows = Vec::new();
    for (name, t) in truth {
        for (method, preds) in methods {
            let p = &preds[name];
            for v in variables {
                rows.push(MetricRow {
                    sample: name.clone(),
                    variable: v.clone(),
                    lead_time,
                    method: method.clone(),
                    mse: mse(t, p, v)?,
                    rmse: rmse(t, p, v)?,
                    ssim: ssim(t, p, v, &params)?,
                });
            }
        }
    }
    let report = aggregate_report(&rows)?;
    let spectra = out.join("spectra");
    fs::create_dir_all(&spectra)?;
    write_atomic(&out.join("metrics.csv"), rows_to_csv(&rows).as_bytes())?;
    write_atomic(&out.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    let truth_fields: Vec<GridField> = truth.values().cloned().collect();
    let mut series = vec![("truth".to_string(), truth_fields)];
    for (method, preds) in methods {
        series.push((method.clone(), preds.values().cloned().collect()));
    }
    for v in variables {
        for (label, fields) in &series {
            write_atomic(&spectra.join(format!("{label}_{v}.csv")), mean_spectrum(fields, v)?.to_csv().as_bytes())?;
            let hist = density_histogram(fields, v, 64)?;
            let mut csv = String::from("lo,hi,count\n");
            for (i, c) in hist.counts.iter().enumerate() {
                csv.push_str(&format!("{},{},{c}\n", hist.edges[i], hist.edges[i + 1]));
            }
            write_atomic(&out.join(format!("hist_{label}_{v}.csv")), csv.as_bytes())?;
        }
    }
    Ok(report)
}

fn mean_spectrum(fields: &[GridField], variable: &str) -> Result<SpectrumResult> {
    let mut acc: Option<SpectrumResult> = None;
    for f in fields {
        let s = zonal_power_spectrum(f, variable, zonal_spacing_km(f))?;
        match &mut acc {
            None => acc = Some(s),
            Some(a) => {
                for (x, y) in a.power.iter_mut().zip(&s.power) {
                    *x += y;
                }
                a.rows_averaged += s.rows_averaged;
            }
        }
    }
    let mut a = acc.ok_or(Error::EmptyDataset)?;
    let n = fields.len() as f64;
    a.power.iter_mut().for_each(|p| *p /= n);
    Ok(a)
}

/// Bilinear `÷factor` then `×factor` resize of every test field.
pub fn resize_baseline(samples: &[Sample], factor: usize) -> Result<BTreeMap<String, GridField>> {
    samples
        .iter()
        .map(|s| {
            let (h, w) = s.high.dims();
            let small = bilinear_resize(&s.high, (h / factor, w / factor))?;
            Ok((s.name.clone(), bilinear_resize(&small, (h, w))?))
        })
        .collect()
}

/// Bilinear interpolation of each coarse input's target channels to the fine grid.
pub fn inter_baseline(samples: &[Sample], variables: &[String]) -> Result<BTreeMap<String, GridField>> {
    samples
        .iter()
        .map(|s| {
            let low = s.low.as_ref().ok_or_else(|| Error::Pairing(format!("{} has no coarse input", s.name)))?;
            let parts = variables
                .iter()
                .map(|v| interp_baseline(low, v, s.high.dims()))
                .collect::<Result<Vec<_>>>()?;
            Ok((s.name.clone(), stack(&parts)?))
        })
        .collect()
}

/// Runs the trained U-Net over every test sample.
pub fn downscale_samples(cfg: &RunConfig, samples: &[Sample]) -> Result<BTreeMap<String, GridField>> {
    let down = Downscaler::new(UNetParams::load(&cfg.out_dir.join("unet.ckpt"))?)?;
    let codec = match down.params.setup.mode {
        Mode::Latent => Some(load_codecs(cfg)?.remove(0).1),
        Mode::Raw => None,
    };
    samples
        .iter()
        .map(|s| {
            let low = s.low.as_ref().ok_or_else(|| Error::Pairing(format!("{} has no coarse input", s.name)))?;
            Ok((s.name.clone(), down.downscale(low, s.high.dims(), codec.as_ref(), None)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub preset: Preset,
    pub checkpoints: Vec<PathBuf>,
    pub encode: Option<EncodeReport>,
    pub report: MetricReport,
}

/// Full experiment for the configured preset: data, training, archive round trip or
/// downscaling, then evaluation against the preset's baseline.
pub fn cmd_run(cfg: &RunConfig, force: bool) -> Result<RunSummary> {
    if is_non_empty(&cfg.out_dir) && !force {
        let only_cache = fs::read_dir(&cfg.out_dir)?
            .filter_map(|e| e.ok())
            .all(|e| e.file_name() == ".cache");
        if !only_cache {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                cfg.out_dir.display()
            )));
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;
    write_atomic(&cfg.out_dir.join("run.toml"), cfg.to_toml()?.as_bytes())?;
    let data = ensure_dataset(cfg, false)?;
    let truth: BTreeMap<String, GridField> = data
        .test
        .iter()
        .map(|s| Ok((s.name.clone(), subset(&s.high, &cfg.data.variables)?)))
        .collect::<Result<_>>()?;
    let factor = if cfg.preset.is_downscale() { cfg.data.downsample_factor } else { cfg.codec.factor() };
    let mut methods = Vec::new();
    let mut checkpoints = Vec::new();
    let mut encode = None;
    match cfg.preset {
        Preset::Resize => methods.push(("resize".to_string(), resize_baseline(&data.test, factor)?)),
        p if p.is_codec() => {
            checkpoints = cmd_train_vae(cfg, &data)?;
            encode = Some(cmd_encode(cfg, &data.test)?);
            let decoded = cmd_decode(cfg, &[])?;
            let dir = cfg.out_dir.join("predictions").join(p.name());
            write_predictions(&dir, &decoded)?;
            methods.push(("resize".to_string(), resize_baseline(&data.test, factor)?));
            methods.push((p.name().to_string(), read_predictions(&dir)?));
        }
        Preset::DownInter => methods.push(("inter".to_string(), inter_baseline(&data.test, &cfg.data.variables)?)),
        p => {
            checkpoints.push(cmd_train_down(cfg, &data)?);
            let preds: Vec<(String, GridField)> = downscale_samples(cfg, &data.test)?.into_iter().collect();
            let dir = cfg.out_dir.join("predictions").join(p.name());
            write_predictions(&dir, &preds)?;
            methods.push(("inter".to_string(), inter_baseline(&data.test, &cfg.data.variables)?));
            methods.push((p.name().to_string(), read_predictions(&dir)?));
        }
    }
    let report = cmd_eval(&truth, &methods, &cfg.data.variables, cfg.data.lead_time, &cfg.out_dir.join("eval"))?;
    let summary = RunSummary { preset: cfg.preset, checkpoints, encode, report };
    write_atomic(&cfg.out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}
