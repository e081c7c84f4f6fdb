//! Run configuration: a TOML document layered over the defaults of a named preset.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archive::{LatentDtype, StoreMode};
use crate::codec::{CodecConfig, PhaseSpec, ReconLoss, TrainSchedule};
use crate::downscale::{DownscaleSchedule, Mode, UNetConfig};
use crate::error::{Error, Result};
use crate::synthetic::{PairSpec, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Resize,
    VaeL1,
    VaeCharbonnier,
    VaeSingleVar,
    VaeFinetune,
    DownInter,
    DownRaw,
    DownLatent,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::Resize,
        Preset::VaeL1,
        Preset::VaeCharbonnier,
        Preset::VaeSingleVar,
        Preset::VaeFinetune,
        Preset::DownInter,
        Preset::DownRaw,
        Preset::DownLatent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Resize => "resize",
            Preset::VaeL1 => "vae_l1",
            Preset::VaeCharbonnier => "vae_charbonnier",
            Preset::VaeSingleVar => "vae_single_var",
            Preset::VaeFinetune => "vae_finetune",
            Preset::DownInter => "down_inter",
            Preset::DownRaw => "down_raw",
            Preset::DownLatent => "down_latent",
        }
    }

    pub fn is_codec(self) -> bool {
        matches!(self, Preset::VaeL1 | Preset::VaeCharbonnier | Preset::VaeSingleVar | Preset::VaeFinetune)
    }

    pub fn is_downscale(self) -> bool {
        matches!(self, Preset::DownInter | Preset::DownRaw | Preset::DownLatent)
    }

    /// One model per variable rather than a joint model.
    pub fn per_variable(self) -> bool {
        matches!(self, Preset::VaeSingleVar | Preset::VaeFinetune)
    }

    pub fn recon_loss(self) -> Option<ReconLoss> {
        match self {
            Preset::VaeL1 => Some(ReconLoss::L1),
            p if p.is_codec() => Some(ReconLoss::Charbonnier),
            _ => None,
        }
    }

    pub fn mode(self) -> Option<Mode> {
        match self {
            Preset::DownRaw => Some(Mode::Raw),
            Preset::DownLatent => Some(Mode::Latent),
            _ => None,
        }
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
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

/// `full` keeps the full-size architecture and schedule; `desk` shrinks both for CPU runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Full,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Container,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub variables: Vec<String>,
    pub split_id: String,
    pub lead_time: u32,
    pub dims: (usize, usize),
    pub spectral_slope: f64,
    pub amplitude: f64,
    pub mean_offset: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub downsample_factor: usize,
    pub input_channels: usize,
    pub train_paths: Vec<PathBuf>,
    pub test_paths: Vec<PathBuf>,
    pub train_low_paths: Vec<PathBuf>,
    pub test_low_paths: Vec<PathBuf>,
}

impl DataConfig {
    pub fn synthetic_spec(&self, variable: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            dims: self.dims,
            spectral_slope: self.spectral_slope,
            amplitude: self.amplitude,
            mean_offset: self.mean_offset,
            seed,
            variable: self.variables[variable].clone(),
        }
    }

    pub fn pair_spec(&self, seed: u64) -> PairSpec {
        PairSpec { input_channels: self.input_channels, ..PairSpec::new(self.synthetic_spec(0, seed), self.downsample_factor) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchiveConfig {
    pub dtype: LatentDtype,
    pub mode: StoreMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub scale: Scale,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub out_dir: PathBuf,
    /// Codec used by latent-mode downscaling and by encode/decode; trained on demand when absent.
    pub codec_checkpoint: Option<PathBuf>,
    pub raw_patch: usize,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub schedule: TrainSchedule,
    pub unet: UNetConfig,
    pub down_schedule: DownscaleSchedule,
    pub archive: ArchiveConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset, scale: Scale) -> Self {
        let desk = scale == Scale::Desk;
        let variables: Vec<String> = if preset.is_downscale() {
            vec!["T2M".into()]
        } else {
            ["U10M", "V10M", "T2M"].iter().map(|s| s.to_string()).collect()
        };
        let mut codec = if desk { CodecConfig::desk() } else { CodecConfig::default() };
        codec.in_channels = if preset.per_variable() || preset.is_downscale() { 1 } else { variables.len() };
        codec.recon_loss = preset.recon_loss().unwrap_or_default();
        let mut schedule = if desk { TrainSchedule::desk() } else { TrainSchedule::default() };
        if preset != Preset::VaeFinetune && !preset.is_downscale() {
            schedule.finetune = PhaseSpec { epochs: 0, ..schedule.finetune };
        }
        let out_channels = match preset.mode() {
            Some(Mode::Raw) => variables.len(),
            _ => codec.latent_channels,
        };
        let unet = if desk { UNetConfig::desk(out_channels) } else { UNetConfig { out_channels, ..UNetConfig::default() } };
        let data = DataConfig {
            source: DataSource::Synthetic,
            variables,
            split_id: "synthetic".into(),
            lead_time: 0,
            dims: if desk { (64, 64) } else { (1024, 1024) },
            spectral_slope: 2.5,
            amplitude: 1.0,
            mean_offset: 0.0,
            n_train: if desk { 500 } else { 16 },
            n_test: if desk { 100 } else { 4 },
            downsample_factor: 8,
            input_channels: 40,
            train_paths: vec![],
            test_paths: vec![],
            train_low_paths: vec![],
            test_low_paths: vec![],
        };
        Self {
            preset,
            scale,
            seed: Some(0),
            deterministic: true,
            out_dir: PathBuf::from("runs").join(preset.name()),
            codec_checkpoint: None,
            raw_patch: if desk { 32 } else { 256 },
            data,
            codec,
            schedule,
            unet,
            down_schedule: if desk { DownscaleSchedule::desk() } else { DownscaleSchedule::default() },
            archive: ArchiveConfig { dtype: LatentDtype::Float16, mode: StoreMode::MuOnly },
        }
    }

    /// Parses a (possibly partial) document; missing keys come from the preset defaults.
    /// `preset_override` wins over the document's own `preset` key.
    pub fn from_toml(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match (preset_override, user.get("preset")) {
            (Some(p), _) => p,
            (None, Some(toml::Value::String(s))) => s.parse()?,
            (None, Some(_)) => return Err(Error::Config("`preset` must be a string".into())),
            (None, None) => return Err(Error::Config("no preset given in the config or on the command line".into())),
        };
        let scale = match user.get("scale") {
            Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?,
            None => Scale::default(),
        };
        let mut base = toml::Table::try_from(RunConfig::preset(preset, scale))
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        base.insert("preset".into(), toml::Value::String(preset.name().into()));
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.deterministic && self.seed.is_none() {
            return Err(Error::Config("deterministic runs need a seed".into()));
        }
        if self.data.variables.is_empty() {
            return Err(Error::Config("data.variables is empty".into()));
        }
        match self.data.source {
            DataSource::Synthetic => {
                self.data.synthetic_spec(0, 0).validate()?;
                if self.data.n_train == 0 {
                    return Err(Error::Config("data.n_train must be > 0".into()));
                }
                if self.preset.is_downscale() {
                    self.data.pair_spec(0).validate()?;
                }
            }
            DataSource::Container => {
                if self.data.train_paths.is_empty() && self.data.test_paths.is_empty() {
                    return Err(Error::Config("container data needs train_paths or test_paths".into()));
                }
            }
        }
        if self.preset.is_codec() {
            self.codec.validate()?;
            self.schedule.validate()?;
            if Some(self.codec.recon_loss) != self.preset.recon_loss() {
                return Err(Error::Config(format!(
                    "preset {} requires the {:?} reconstruction loss, codec section has {:?}",
                    self.preset,
                    self.preset.recon_loss().unwrap_or_default(),
                    self.codec.recon_loss
                )));
            }
            let want = if self.preset.per_variable() { 1 } else { self.data.variables.len() };
            if self.codec.in_channels != want {
                return Err(Error::Config(format!("preset {} needs codec.in_channels = {want}", self.preset)));
            }
            if self.preset == Preset::VaeFinetune && self.schedule.finetune.epochs == 0 {
                return Err(Error::Config("vae_finetune needs schedule.finetune.epochs > 0".into()));
            }
        }
        if let Some(mode) = self.preset.mode() {
            self.unet.validate()?;
            self.down_schedule.validate()?;
            let want = match mode {
                Mode::Latent => self.codec.latent_channels,
                Mode::Raw => self.data.variables.len(),
            };
            if self.unet.out_channels != want {
                return Err(Error::Config(format!("preset {} needs unet.out_channels = {want}", self.preset)));
            }
            if self.unet.in_channels != self.data.input_channels {
                return Err(Error::Config("unet.in_channels must equal data.input_channels".into()));
            }
        }
        Ok(())
    }

    /// Seed used everywhere; drawn from the clock for non-deterministic runs without one.
    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos() as u64)
                .unwrap_or(0)
        })
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for p in Preset::ALL {
            for scale in [Scale::Full, Scale::Desk] {
                let cfg = RunConfig::preset(p, scale);
                cfg.validate().unwrap();
                let text = cfg.to_toml().unwrap();
                let back = RunConfig::from_toml(&text, None).unwrap();
                assert_eq!(back, cfg, "{p}");
                assert_eq!(back.to_toml().unwrap(), text);
            }
        }
    }

    #[test]
    fn full_scale_hyperparameters() {
        let c = RunConfig::preset(Preset::VaeFinetune, Scale::Full);
        assert_eq!(c.schedule.learning_rate, 1.6e-5);
        assert_eq!((c.schedule.pretrain.patch, c.schedule.pretrain.epochs), (256, 10));
        assert_eq!((c.schedule.finetune.patch, c.schedule.finetune.epochs), (1000, 5));
        assert_eq!(c.codec.stage_channels, vec![128, 256, 512, 512]);
        let d = RunConfig::preset(Preset::DownLatent, Scale::Full);
        assert_eq!((d.down_schedule.batch_size, d.down_schedule.epochs), (16, 50));
        assert_eq!(d.down_schedule.learning_rate, 3.2e-5);
        assert_eq!(RunConfig::preset(Preset::VaeL1, Scale::Full).codec.recon_loss, ReconLoss::L1);
        assert_eq!(RunConfig::preset(Preset::VaeCharbonnier, Scale::Full).schedule.finetune.epochs, 0);
    }

    #[test]
    fn partial_documents_and_errors() {
        let c = RunConfig::from_toml("preset = \"vae_finetune\"\nscale = \"desk\"\n[data]\nn_train = 8\n", None).unwrap();
        assert_eq!(c.data.n_train, 8);
        assert_eq!(c.codec, CodecConfig { in_channels: 1, ..CodecConfig::desk() });
        let c = RunConfig::from_toml("preset = \"resize\"", Some(Preset::DownRaw)).unwrap();
        assert_eq!(c.preset, Preset::DownRaw);
        assert!(matches!(RunConfig::from_toml("scale = \"desk\"", None), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("preset = \"nope\"", None), Err(Error::Config(_))));
        let bad_beta = "preset = \"resize\"\n[data]\nspectral_slope = -1.0\n";
        assert!(matches!(RunConfig::from_toml(bad_beta, None), Err(Error::Config(_))));
        let mismatch = "preset = \"vae_l1\"\n[codec]\nrecon_loss = \"charbonnier\"\n";
        assert!(matches!(RunConfig::from_toml(mismatch, None), Err(Error::Config(_))));
        let no_seed = "preset = \"resize\"\ndeterministic = true\n";
        assert!(RunConfig::from_toml(no_seed, None).is_ok());
    }
}
