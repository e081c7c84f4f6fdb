//! Convolutional VAE codec: architecture, losses, two-phase trainer and checkpoints.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::grid::{hex_digest, zscore_apply, zscore_fit_all, zscore_invert, GridField, NormStats};
use crate::nn::{Adam, Conv2d, Module, NamedTensor, Param, Real, Stage, Tensor, Upsample2x};

pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconLoss {
    /// Mean over elements of `sqrt(d^2 + eps^2)`.
    #[default]
    Charbonnier,
    /// `sqrt(||d||^2 + eps^2)` over the whole tensor.
    CharbonnierGlobal,
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub stage_channels: Vec<usize>,
    pub res_blocks_per_stage: usize,
    pub latent_channels: usize,
    pub downsample_stages: usize,
    pub norm_groups: usize,
    pub charbonnier_eps: f64,
    pub kl_weight: f64,
    #[serde(default)]
    pub recon_loss: ReconLoss,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 128,
            stage_channels: vec![128, 256, 512, 512],
            res_blocks_per_stage: 2,
            latent_channels: 4,
            downsample_stages: 3,
            norm_groups: 32,
            charbonnier_eps: 1e-3,
            kl_weight: 1e-6,
            recon_loss: ReconLoss::Charbonnier,
        }
    }
}

impl CodecConfig {
    /// Reduced widths for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            stage_channels: vec![16, 32, 64, 64],
            norm_groups: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels < 1 || self.base_channels < 1 || self.res_blocks_per_stage < 1 {
            return bad("in_channels, base_channels and res_blocks_per_stage must be >= 1".into());
        }
        if self.latent_channels < 1 {
            return bad(format!("latent_channels must be >= 1, got {}", self.latent_channels));
        }
        if self.stage_channels.len() != self.downsample_stages + 1 {
            return bad(format!(
                "{} stage widths for {} downsampling stages",
                self.stage_channels.len(),
                self.downsample_stages
            ));
        }
        if self.norm_groups < 1 {
            return bad("norm_groups must be >= 1".into());
        }
        if let Some(c) = self.stage_channels.iter().find(|&&c| c == 0 || c % self.norm_groups != 0) {
            return bad(format!("stage width {c} not divisible by {} groups", self.norm_groups));
        }
        if !(self.charbonnier_eps > 0.0) || !(self.kl_weight >= 0.0) {
            return bad("charbonnier_eps must be > 0 and kl_weight >= 0".into());
        }
        Ok(())
    }

    pub fn factor(&self) -> usize {
        1 << self.downsample_stages
    }

    /// Architecture fingerprint: SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(&Sha256::digest(json.as_bytes()))
    }

    pub fn latent_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.factor();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("{h}x{w} is not divisible by {f}")));
        }
        Ok((h / f, w / f))
    }

    pub fn decoded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h * self.factor(), w * self.factor())
    }

    fn decoder_upsamples_after(&self, stage: usize) -> bool {
        stage + self.downsample_stages >= self.stage_channels.len()
    }

    /// `(channels, height, width)` after each encoder stage (before its downsampling).
    pub fn encoder_trace(&self, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        self.latent_dims(h, w)?;
        Ok(self
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, h >> i.min(self.downsample_stages), w >> i.min(self.downsample_stages)))
            .collect())
    }

    /// `(channels, height, width)` after each decoder stage (before its upsampling).
    pub fn decoder_trace(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let (mut hh, mut ww) = (h, w);
        for (j, &c) in self.stage_channels.iter().rev().enumerate() {
            out.push((c, hh, ww));
            if self.decoder_upsamples_after(j) {
                hh *= 2;
                ww *= 2;
            }
        }
        out
    }
}

/// Posterior parameters for one field.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRepr {
    pub mu: Array3<f32>,
    pub log_var: Array3<f32>,
}

impl LatentRepr {
    pub fn new(mu: Array3<f32>, log_var: Array3<f32>) -> Result<Self> {
        if mu.dim() != log_var.dim() {
            return Err(Error::Shape(format!("mu {:?} vs log_var {:?}", mu.dim(), log_var.dim())));
        }
        if let Some(v) = log_var.iter().find(|v| v.is_nan() || **v == f32::INFINITY) {
            return Err(Error::Shape(format!("log_var holds {v}")));
        }
        Ok(Self { mu, log_var })
    }
}

/// `z = mu + exp(log_var / 2) * eta`, with `eta ~ N(0, 1)` drawn from `seed`.
pub fn reparameterize(latent: &LatentRepr, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = latent.mu.clone();
    for (zi, &lv) in z.iter_mut().zip(latent.log_var.iter()) {
        let eta: f64 = rng.sample(StandardNormal);
        *zi = (*zi as f64 + (lv as f64 / 2.0).exp() * eta) as f32;
    }
    z
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} vs {b} elements")));
    }
    Ok(())
}

pub fn charbonnier<T: Real>(x: &[T], y: &[T], eps: f64) -> Result<f64> {
    check_same_len(x.len(), y.len())?;
    Ok(recon_loss_and_grad(ReconLoss::Charbonnier, x, y, eps, false).0)
}

/// Closed-form KL divergence to the standard normal, averaged per element.
pub fn kl_gaussian(latent: &LatentRepr) -> f64 {
    kl_and_grad(
        latent.mu.as_slice().expect("standard layout"),
        latent.log_var.as_slice().expect("standard layout"),
        false,
    )
    .0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

pub fn vae_loss(x: &[f32], x_rec: &[f32], latent: &LatentRepr, config: &CodecConfig) -> Result<LossParts> {
    check_same_len(x.len(), x_rec.len())?;
    let recon = recon_loss_and_grad(config.recon_loss, x, x_rec, config.charbonnier_eps, false).0;
    let kl = kl_gaussian(latent);
    Ok(LossParts { total: recon + config.kl_weight * kl, recon, kl })
}

/// Loss between truth `x` and prediction `y`, optionally with `dL/dy`.
fn recon_loss_and_grad<T: Real>(kind: ReconLoss, x: &[T], y: &[T], eps: f64, grad: bool) -> (f64, Vec<T>) {
    let n = x.len() as f64;
    let mut g = if grad { vec![T::zero(); x.len()] } else { Vec::new() };
    let e2 = eps * eps;
    let loss = match kind {
        ReconLoss::Charbonnier => {
            let mut s = 0.0;
            for i in 0..x.len() {
                let d = y[i].as_f64() - x[i].as_f64();
                let r = (d * d + e2).sqrt();
                s += r;
                if grad {
                    g[i] = T::of(d / r / n);
                }
            }
            s / n
        }
        ReconLoss::CharbonnierGlobal => {
            let ss: f64 = x.iter().zip(y).map(|(a, b)| (b.as_f64() - a.as_f64()).powi(2)).sum();
            let r = (ss + e2).sqrt();
            if grad {
                for i in 0..x.len() {
                    g[i] = T::of((y[i].as_f64() - x[i].as_f64()) / r);
                }
            }
            r
        }
        ReconLoss::L1 => {
            let mut s = 0.0;
            for i in 0..x.len() {
                let d = y[i].as_f64() - x[i].as_f64();
                s += d.abs();
                if grad {
                    g[i] = T::of(d.signum() * (d != 0.0) as u8 as f64 / n);
                }
            }
            s / n
        }
    };
    (loss, g)
}

/// Mean KL with gradients w.r.t. `mu` and `log_var` (unscaled by the KL weight).
fn kl_and_grad<T: Real>(mu: &[T], lv: &[T], grad: bool) -> (f64, Vec<T>, Vec<T>) {
    let m = mu.len() as f64;
    let mut s = 0.0;
    let (mut gm, mut gl) = if grad {
        (vec![T::zero(); mu.len()], vec![T::zero(); mu.len()])
    } else {
        (Vec::new(), Vec::new())
    };
    for i in 0..mu.len() {
        let (u, l) = (mu[i].as_f64(), lv[i].as_f64());
        let el = l.exp();
        s += u * u + el - 1.0 - l;
        if grad {
            gm[i] = T::of(u / m);
            gl[i] = T::of(0.5 * (el - 1.0) / m);
        }
    }
    (0.5 * s / m, gm, gl)
}

/// The VAE network. `T` is `f32` for training and inference, `f64` for gradient checks.
#[derive(Debug, Clone)]
pub struct Vae<T> {
    pub config: CodecConfig,
    stem: Conv2d<T>,
    enc_stages: Vec<Stage<T>>,
    downs: Vec<Conv2d<T>>,
    head: Conv2d<T>,
    dec_in: Conv2d<T>,
    dec_stages: Vec<Stage<T>>,
    dec_out: Conv2d<T>,
    /// Pre-clamp head output of the last training forward.
    raw_log_var: Option<Tensor<T>>,
}

impl<T: Real> Vae<T> {
    pub fn new(config: &CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let sc = &c.stage_channels;
        let stem = Conv2d::new("enc.stem", c.in_channels, c.base_channels, 1, 1, &mut rng);
        let mut enc_stages = Vec::new();
        let mut downs = Vec::new();
        let mut prev = c.base_channels;
        for (i, &ch) in sc.iter().enumerate() {
            enc_stages.push(Stage::new(&format!("enc.stage{i}"), prev, ch, c.res_blocks_per_stage, c.norm_groups, &mut rng));
            if i < c.downsample_stages {
                downs.push(Conv2d::new(&format!("enc.down{i}"), ch, ch, 3, 2, &mut rng));
            }
            prev = ch;
        }
        let head = Conv2d::new("enc.head", prev, 2 * c.latent_channels, 3, 1, &mut rng);
        let rev: Vec<usize> = sc.iter().rev().copied().collect();
        let dec_in = Conv2d::new("dec.in", c.latent_channels, rev[0], 3, 1, &mut rng);
        let mut dec_stages = Vec::new();
        let mut prev = rev[0];
        for (j, &ch) in rev.iter().enumerate() {
            dec_stages.push(Stage::new(&format!("dec.stage{j}"), prev, ch, c.res_blocks_per_stage, c.norm_groups, &mut rng));
            prev = ch;
        }
        let dec_out = Conv2d::new("dec.out", prev, c.in_channels, 3, 1, &mut rng);
        Ok(Self {
            config: config.clone(),
            stem,
            enc_stages,
            downs,
            head,
            dec_in,
            dec_stages,
            dec_out,
            raw_log_var: None,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.config.in_channels {
            return Err(Error::Shape(format!("{} input channels, model expects {}", x.c(), self.config.in_channels)));
        }
        self.config.latent_dims(x.h(), x.w()).map(|_| ())
    }

    fn check_latent(&self, z: &Tensor<T>) -> Result<()> {
        if z.c() != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "{} latent channels, model expects {}",
                z.c(),
                self.config.latent_channels
            )));
        }
        Ok(())
    }

    /// Returns `(mu, clamped log_var)`.
    pub fn encode_tensor(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x);
        for (i, stage) in self.enc_stages.iter().enumerate() {
            h = stage.forward(&h);
            if let Some(d) = self.downs.get(i) {
                h = d.forward(&h);
            }
        }
        let (mu, mut lv) = self.head.forward(&h).split_channels(self.config.latent_channels);
        clamp_log_var(&mut lv);
        Ok((mu, lv))
    }

    pub fn decode_tensor(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_latent(z)?;
        let mut h = self.dec_in.forward(z);
        for (j, stage) in self.dec_stages.iter().enumerate() {
            h = stage.forward(&h);
            if self.config.decoder_upsamples_after(j) {
                h = Upsample2x.forward(&h);
            }
        }
        Ok(self.dec_out.forward(&h))
    }

    fn encode_train(&mut self, x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let mut h = self.stem.forward_train(x);
        for i in 0..self.enc_stages.len() {
            h = self.enc_stages[i].forward_train(&h);
            if let Some(d) = self.downs.get_mut(i) {
                h = d.forward_train(&h);
            }
        }
        let (mu, raw) = self.head.forward_train(&h).split_channels(self.config.latent_channels);
        let mut lv = raw.clone();
        clamp_log_var(&mut lv);
        self.raw_log_var = Some(raw);
        (mu, lv)
    }

    fn encode_backward(&mut self, dmu: &Tensor<T>, dlv: &Tensor<T>) {
        let raw = self.raw_log_var.take().expect("encode_train before backward");
        let mut dlv = dlv.clone();
        for (g, r) in dlv.data.iter_mut().zip(&raw.data) {
            let r = r.as_f64();
            if !(LOG_VAR_MIN..=LOG_VAR_MAX).contains(&r) {
                *g = T::zero();
            }
        }
        let mut d = self.head.backward(&Tensor::concat_channels(dmu, &dlv));
        for i in (0..self.enc_stages.len()).rev() {
            if let Some(down) = self.downs.get_mut(i) {
                d = down.backward(&d);
            }
            d = self.enc_stages[i].backward(&d);
        }
        self.stem.backward(&d);
    }

    fn decode_train(&mut self, z: &Tensor<T>) -> Tensor<T> {
        let mut h = self.dec_in.forward_train(z);
        for j in 0..self.dec_stages.len() {
            h = self.dec_stages[j].forward_train(&h);
            if self.config.decoder_upsamples_after(j) {
                h = Upsample2x.forward(&h);
            }
        }
        self.dec_out.forward_train(&h)
    }

    fn decode_backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut d = self.dec_out.backward(dy);
        for j in (0..self.dec_stages.len()).rev() {
            if self.config.decoder_upsamples_after(j) {
                d = Upsample2x.backward(&d);
            }
            d = self.dec_stages[j].backward(&d);
        }
        self.dec_in.backward(&d)
    }

    /// Loss for batch `x` using the supplied standard-normal noise `eta` (latent-shaped).
    pub fn loss(&self, x: &Tensor<T>, eta: &Tensor<T>) -> Result<LossParts> {
        let (mu, lv) = self.encode_tensor(x)?;
        let z = sample_z(&mu, &lv, eta);
        let y = self.decode_tensor(&z)?;
        let recon = recon_loss_and_grad(self.config.recon_loss, &x.data, &y.data, self.config.charbonnier_eps, false).0;
        let kl = kl_and_grad(&mu.data, &lv.data, false).0;
        Ok(LossParts { total: recon + self.config.kl_weight * kl, recon, kl })
    }

    /// Same as [`Vae::loss`], accumulating parameter gradients.
    pub fn loss_backward(&mut self, x: &Tensor<T>, eta: &Tensor<T>) -> Result<LossParts> {
        self.check_input(x)?;
        let (mu, lv) = self.encode_train(x);
        if eta.shape != mu.shape {
            return Err(Error::Shape(format!("noise {:?} vs latent {:?}", eta.shape, mu.shape)));
        }
        let z = sample_z(&mu, &lv, eta);
        let y = self.decode_train(&z);
        let (recon, gy) =
            recon_loss_and_grad(self.config.recon_loss, &x.data, &y.data, self.config.charbonnier_eps, true);
        let (kl, gmu, glv) = kl_and_grad(&mu.data, &lv.data, true);
        let dz = self.decode_backward(&Tensor::from_vec(y.shape, gy));
        let beta = self.config.kl_weight;
        let mut dmu = Tensor::zeros(mu.shape);
        let mut dlv = Tensor::zeros(mu.shape);
        for i in 0..mu.data.len() {
            let s = (lv.data[i].as_f64() / 2.0).exp();
            dmu.data[i] = dz.data[i] + T::of(beta * gmu[i].as_f64());
            dlv.data[i] = T::of(dz.data[i].as_f64() * eta.data[i].as_f64() * 0.5 * s + beta * glv[i].as_f64());
        }
        self.encode_backward(&dmu, &dlv);
        Ok(LossParts { total: recon + beta * kl, recon, kl })
    }
}

fn clamp_log_var<T: Real>(lv: &mut Tensor<T>) {
    for v in &mut lv.data {
        *v = T::of(v.as_f64().clamp(LOG_VAR_MIN, LOG_VAR_MAX));
    }
}

fn sample_z<T: Real>(mu: &Tensor<T>, lv: &Tensor<T>, eta: &Tensor<T>) -> Tensor<T> {
    let mut z = mu.clone();
    for i in 0..z.data.len() {
        z.data[i] += T::of((lv.data[i].as_f64() / 2.0).exp() * eta.data[i].as_f64());
    }
    z
}

impl<T: Real> Module<T> for Vae<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem.visit(f);
        for (i, s) in self.enc_stages.iter().enumerate() {
            s.visit(f);
            if let Some(d) = self.downs.get(i) {
                d.visit(f);
            }
        }
        self.head.visit(f);
        self.dec_in.visit(f);
        self.dec_stages.iter().for_each(|s| s.visit(f));
        self.dec_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_mut(f);
        for (i, s) in self.enc_stages.iter_mut().enumerate() {
            s.visit_mut(f);
            if let Some(d) = self.downs.get_mut(i) {
                d.visit_mut(f);
            }
        }
        self.head.visit_mut(f);
        self.dec_in.visit_mut(f);
        self.dec_stages.iter_mut().for_each(|s| s.visit_mut(f));
        self.dec_out.visit_mut(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub patch: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub pretrain: PhaseSpec,
    pub finetune: PhaseSpec,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            pretrain: PhaseSpec { patch: 256, epochs: 10 },
            finetune: PhaseSpec { patch: 1000, epochs: 5 },
            batch_size: 8,
            learning_rate: 1.6e-5,
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl TrainSchedule {
    /// 32-pixel then 64-pixel patches with a step size suited to few updates.
    pub fn desk() -> Self {
        Self {
            pretrain: PhaseSpec { patch: 32, epochs: 10 },
            finetune: PhaseSpec { patch: 64, epochs: 5 },
            learning_rate: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.pretrain.patch == 0 || self.finetune.patch == 0 {
            return Err(Error::Config("patch sizes must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// 1-based within the phase.
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
    pub samples: usize,
}

pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("phase,epoch,recon,kl,total,samples\n");
    for r in history {
        s.push_str(&format!("{},{},{:e},{:e},{:e},{}\n", r.phase, r.epoch, r.recon, r.kl, r.total, r.samples));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub schedule: Option<TrainSchedule>,
    pub split_id: String,
    pub epochs_completed: usize,
    pub final_recon: Option<f64>,
    pub final_kl: Option<f64>,
    pub param_hash: String,
}

/// Trained (or initialized) codec weights with the metadata needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: CodecConfig,
    pub norm_stats: NormStats,
    pub fingerprint: String,
    pub provenance: Provenance,
    pub tensors: Vec<NamedTensor>,
}

impl ModelParams {
    fn snapshot(model: &Vae<f32>, norm_stats: &NormStats, provenance: Provenance) -> Self {
        Self {
            config: model.config.clone(),
            norm_stats: norm_stats.clone(),
            fingerprint: model.config.fingerprint(),
            provenance,
            tensors: model.export(),
        }
    }

    pub fn init(config: &CodecConfig, norm_stats: NormStats, seed: u64) -> Result<Self> {
        let model = Vae::<f32>::new(config, seed)?;
        let prov = Provenance {
            stage: "init".into(),
            schedule: None,
            split_id: String::new(),
            epochs_completed: 0,
            final_recon: None,
            final_kl: None,
            param_hash: model.param_hash(),
        };
        Ok(Self::snapshot(&model, &norm_stats, prov))
    }

    /// Rebuilds the network, checking the stored fingerprint against the config.
    pub fn instantiate<T: Real>(&self) -> Result<Vae<T>> {
        let expected = self.config.fingerprint();
        if self.fingerprint != expected {
            return Err(Error::Fingerprint { expected, found: self.fingerprint.clone() });
        }
        let mut model = Vae::new(&self.config, 0)?;
        model.import(&self.tensors)?;
        Ok(model)
    }

    pub fn to_checkpoint(&self, history: &[EpochRecord]) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: "vae".into(),
            config: serde_json::to_value(&self.config)?,
            norm_stats: self.norm_stats.clone(),
            fingerprint: self.fingerprint.clone(),
            provenance: serde_json::to_value(&self.provenance)?,
            history_csv: history_to_csv(history),
            tensors: self.tensors.clone(),
        })
    }

    pub fn save(&self, path: &Path, history: &[EpochRecord]) -> Result<()> {
        self.to_checkpoint(history)?.save(path)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind != "vae" {
            return Err(Error::Format(format!("expected a vae checkpoint, found `{}`", ck.kind)));
        }
        let config: CodecConfig = serde_json::from_value(ck.config)?;
        let expected = config.fingerprint();
        if ck.fingerprint != expected {
            return Err(Error::Fingerprint { expected, found: ck.fingerprint });
        }
        Ok(Self {
            config,
            norm_stats: ck.norm_stats,
            fingerprint: ck.fingerprint,
            provenance: serde_json::from_value(ck.provenance)?,
            tensors: ck.tensors,
        })
    }

    /// Loads a checkpoint; with `expected`, also requires that exact architecture.
    pub fn load(path: &Path, expected: Option<&CodecConfig>) -> Result<Self> {
        let p = Self::from_checkpoint(Checkpoint::load(path)?)?;
        if let Some(cfg) = expected {
            if cfg.fingerprint() != p.fingerprint {
                return Err(Error::Fingerprint { expected: cfg.fingerprint(), found: p.fingerprint });
            }
        }
        Ok(p)
    }
}

/// Ready-to-run f32 codec.
#[derive(Debug, Clone)]
pub struct Codec {
    pub params: ModelParams,
    model: Vae<f32>,
}

fn field_tensor(field: &GridField) -> Tensor<f32> {
    let (c, h, w) = field.values.dim();
    Tensor::from_vec([1, c, h, w], field.values.iter().copied().collect())
}

fn tensor_array(t: &Tensor<f32>, sample: usize) -> Array3<f32> {
    Array3::from_shape_vec((t.c(), t.h(), t.w()), t.sample(sample).to_vec()).expect("tensor shape")
}

impl Codec {
    pub fn new(params: ModelParams) -> Result<Self> {
        let model = params.instantiate()?;
        Ok(Self { params, model })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.params.config
    }

    /// Digest of architecture, weights and normalization; two codecs decode a latent
    /// identically exactly when these agree.
    pub fn identity(&self) -> String {
        let key = format!("{}:{}:{}", self.params.fingerprint, self.model.param_hash(), self.params.norm_stats.content_hash());
        hex_digest(&Sha256::digest(key.as_bytes()))
    }

    /// Encodes a z-scored field.
    pub fn encode(&self, field: &GridField) -> Result<LatentRepr> {
        let (mu, lv) = self.model.encode_tensor(&field_tensor(field))?;
        LatentRepr::new(tensor_array(&mu, 0), tensor_array(&lv, 0))
    }

    /// Encodes many z-scored fields of equal shape, `batch` at a time.
    pub fn encode_mu_batch(&self, fields: &[&GridField], batch: usize) -> Result<Vec<Array3<f32>>> {
        let mut out = Vec::with_capacity(fields.len());
        for chunk in fields.chunks(batch.max(1)) {
            let ts: Vec<Tensor<f32>> = chunk.iter().map(|f| field_tensor(f)).collect();
            let (mu, _) = self.model.encode_tensor(&Tensor::stack(&ts.iter().collect::<Vec<_>>()))?;
            out.extend((0..mu.n()).map(|i| tensor_array(&mu, i)));
        }
        Ok(out)
    }

    /// Decodes a latent to a z-scored field named after the training variables.
    pub fn decode(&self, z: &Array3<f32>, template: &GridField) -> Result<GridField> {
        let (c, h, w) = z.dim();
        let y = self
            .model
            .decode_tensor(&Tensor::from_vec([1, c, h, w], z.iter().copied().collect()))?;
        let out = tensor_array(&y, 0);
        if out.dim().1 != template.height() || out.dim().2 != template.width() {
            return Err(Error::Shape(format!(
                "decoded {:?} does not match template {:?}",
                out.dim(),
                template.dims()
            )));
        }
        Ok(template.with_values(out, template.variables.clone()))
    }

    pub fn decode_raw(&self, z: &Array3<f32>) -> Result<Array3<f32>> {
        let (c, h, w) = z.dim();
        let y = self
            .model
            .decode_tensor(&Tensor::from_vec([1, c, h, w], z.iter().copied().collect()))?;
        Ok(tensor_array(&y, 0))
    }

    /// Normalizes a physical field, encodes to `mu`, decodes and maps back to physical units.
    pub fn reconstruct(&self, field: &GridField) -> Result<GridField> {
        let norm = zscore_apply(field, &self.params.norm_stats)?;
        let latent = self.encode(&norm)?;
        let rec = self.decode(&latent.mu, &norm)?;
        zscore_invert(&rec, &self.params.norm_stats)
    }
}

/// Z-scored training fields with their statistics.
#[derive(Debug, Clone)]
pub struct CodecDataset {
    pub fields: Vec<GridField>,
    pub norm_stats: NormStats,
    pub split_id: String,
}

impl CodecDataset {
    /// Fits statistics on `fields` and normalizes them.
    pub fn from_physical(fields: &[GridField], split_id: impl Into<String>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let norm_stats = zscore_fit_all(fields)?;
        let fields = fields.iter().map(|f| zscore_apply(f, &norm_stats)).collect::<Result<_>>()?;
        Ok(Self { fields, norm_stats, split_id: split_id.into() })
    }

    /// Single-variable view, for per-variable models.
    pub fn select(&self, variable: &str) -> Result<Self> {
        let fields = self.fields.iter().map(|f| f.select(variable)).collect::<Result<_>>()?;
        let mut norm_stats = NormStats::default();
        norm_stats.insert(variable, *self.norm_stats.get(variable)?);
        Ok(Self { fields, norm_stats, split_id: format!("{}:{variable}", self.split_id) })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Snapshot at the end of the first phase, when that phase ran.
    pub pretrain: Option<ModelParams>,
    pub history: Vec<EpochRecord>,
    /// Parameter hashes at the end of phase one and before the first phase-two step.
    pub continuity: Option<(String, String)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Random `p x p` crop of every field, in shuffled order.
fn epoch_crops(fields: &[GridField], p: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f32>> {
    let mut order: Vec<usize> = (0..fields.len()).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|i| {
            let f = &fields[i];
            let r = rng.gen_range(0..=f.height() - p);
            let c = rng.gen_range(0..=f.width() - p);
            let crop = f.values.slice(ndarray::s![.., r..r + p, c..c + p]);
            Tensor::from_vec([1, f.channels(), p, p], crop.iter().copied().collect())
        })
        .collect()
}

fn noise(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_vec(
        shape,
        (0..shape.iter().product::<usize>())
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect(),
    )
}

/// Two-phase training: small patches first, then larger patches from the same weights.
pub fn train_vae(
    dataset: &CodecDataset,
    schedule: &TrainSchedule,
    config: &CodecConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    schedule.validate()?;
    if dataset.fields.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (h, w) = dataset.fields[0].dims();
    for f in &dataset.fields {
        if f.channels() != config.in_channels {
            return Err(Error::Shape(format!("field has {} channels, codec expects {}", f.channels(), config.in_channels)));
        }
        if f.dims() != (h, w) {
            return Err(Error::Shape("training fields differ in size".into()));
        }
    }
    for ph in [schedule.pretrain, schedule.finetune] {
        if ph.epochs > 0 {
            config.latent_dims(ph.patch, ph.patch)?;
            if ph.patch > h.min(w) {
                return Err(Error::Config(format!("patch {} exceeds field size {h}x{w}", ph.patch)));
            }
        }
    }

    let mut model = Vae::<f32>::new(config, schedule.seed)?;
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let mut pretrain = None;
    let mut continuity = None;
    let mut pretrain_hash = None;
    let provenance = |model: &Vae<f32>, stage: &str, epochs: usize, last: Option<&EpochRecord>| Provenance {
        stage: stage.into(),
        schedule: Some(schedule.clone()),
        split_id: dataset.split_id.clone(),
        epochs_completed: epochs,
        final_recon: last.map(|r| r.recon),
        final_kl: last.map(|r| r.kl),
        param_hash: model.param_hash(),
    };

    let mut epochs_done = 0;
    for (pi, phase) in [Phase::Pretrain, Phase::Finetune].into_iter().enumerate() {
        let spec = if pi == 0 { schedule.pretrain } else { schedule.finetune };
        if spec.epochs == 0 {
            continue;
        }
        if phase == Phase::Finetune {
            if let Some(hash) = pretrain_hash.take() {
                continuity = Some((hash, model.param_hash()));
            }
        }
        let mut opt = Adam::new(schedule.learning_rate);
        let mut data_rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ (0xD1CE_0000 + pi as u64));
        let mut noise_rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ (0x5EED_0000 + pi as u64));
        for epoch in 1..=spec.epochs {
            let crops = epoch_crops(&dataset.fields, spec.patch, &mut data_rng);
            let (mut sr, mut sk, mut n) = (0.0, 0.0, 0usize);
            for batch in crops.chunks(schedule.batch_size) {
                let x = Tensor::stack(&batch.iter().collect::<Vec<_>>());
                let (lh, lw) = config.latent_dims(spec.patch, spec.patch)?;
                let eta = noise([x.n(), config.latent_channels, lh, lw], &mut noise_rng);
                model.zero_grad();
                let loss = model.loss_backward(&x, &eta)?;
                if !loss.total.is_finite() {
                    return Err(Error::TrainingAborted {
                        phase: phase.to_string(),
                        epoch,
                        last_good: checkpoints.last().cloned(),
                    });
                }
                opt.step(&mut model);
                sr += loss.recon * x.n() as f64;
                sk += loss.kl * x.n() as f64;
                n += x.n();
            }
            let (recon, kl) = (sr / n as f64, sk / n as f64);
            let rec = EpochRecord { phase, epoch, recon, kl, total: recon + config.kl_weight * kl, samples: n };
            history.push(rec);
            epochs_done += 1;
            if let Some(dir) = checkpoint_dir {
                if schedule.checkpoint_every > 0 && epoch % schedule.checkpoint_every == 0 {
                    let path = dir.join(format!("vae_{phase}_e{epoch:03}.ckpt"));
                    let p = ModelParams::snapshot(&model, &dataset.norm_stats, provenance(&model, &phase.to_string(), epochs_done, Some(&rec)));
                    p.save(&path, &history)?;
                    checkpoints.push(path);
                }
            }
        }
        if phase == Phase::Pretrain {
            pretrain_hash = Some(model.param_hash());
            let p = ModelParams::snapshot(&model, &dataset.norm_stats, provenance(&model, "pretrain", epochs_done, history.last()));
            if let Some(dir) = checkpoint_dir {
                let path = dir.join("vae_pretrain.ckpt");
                p.save(&path, &history)?;
                checkpoints.push(path);
            }
            pretrain = Some(p);
        }
    }

    let stage = if epochs_done == 0 { "init" } else { "final" };
    let params = ModelParams::snapshot(&model, &dataset.norm_stats, provenance(&model, stage, epochs_done, history.last()));
    if let Some(dir) = checkpoint_dir {
        let path = dir.join("vae_final.ckpt");
        params.save(&path, &history)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome { params, pretrain, history, continuity, checkpoints })
}

/// One single-channel codec per variable.
pub fn train_vae_per_variable(
    dataset: &CodecDataset,
    schedule: &TrainSchedule,
    config: &CodecConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<(String, TrainOutcome)>> {
    let config = CodecConfig { in_channels: 1, ..config.clone() };
    let variables = dataset.fields.first().ok_or(Error::EmptyDataset)?.variables.clone();
    variables
        .into_iter()
        .map(|v| {
            let sub = dataset.select(&v)?;
            let dir = checkpoint_dir.map(|d| d.join(&v));
            let out = train_vae(&sub, schedule, &config, dir.as_deref())?;
            Ok((v, out))
        })
        .collect()
}

/// Per-sample latent arrays (`mu` only) for a set of z-scored fields.
pub fn encode_all(codec: &Codec, fields: &[GridField]) -> Result<Vec<Array3<f32>>> {
    let refs: Vec<&GridField> = fields.iter().collect();
    codec.encode_mu_batch(&refs, 8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{gen_grf, SyntheticSpec};

    fn tiny() -> CodecConfig {
        CodecConfig {
            base_channels: 8,
            stage_channels: vec![8, 8, 16, 16],
            norm_groups: 4,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(CodecConfig::default().validate().is_ok());
        let c = CodecConfig { latent_channels: 0, ..CodecConfig::default() };
        assert!(c.validate().is_err());
        let c = CodecConfig { stage_channels: vec![128, 256, 512], ..CodecConfig::default() };
        assert!(c.validate().is_err());
        let c = CodecConfig { norm_groups: 24, ..CodecConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_size_traces() {
        let c = CodecConfig::default();
        assert_eq!(c.latent_dims(4384, 6880).unwrap(), (548, 860));
        assert_eq!(c.decoded_dims(548, 860), (4384, 6880));
        let dec = c.decoder_trace(548, 860);
        let hs: Vec<usize> = dec.iter().map(|t| t.1).collect();
        let cs: Vec<usize> = dec.iter().map(|t| t.0).collect();
        assert_eq!(hs, vec![548, 548, 1096, 2192]);
        assert_eq!(cs, vec![512, 512, 256, 128]);
        assert_eq!(dec[3].2, 3440);
        let enc = c.encoder_trace(4384, 6880).unwrap();
        assert_eq!(enc.last().unwrap(), &(512, 548, 860));
        assert!(c.latent_dims(250, 256).is_err());
    }

    #[test]
    fn encode_decode_shapes() {
        let codec = Codec::new(ModelParams::init(&tiny(), NormStats::default(), 1).unwrap()).unwrap();
        let f = gen_grf(&SyntheticSpec::new((64, 48), 2.0, 3)).unwrap();
        let lat = codec.encode(&f).unwrap();
        assert_eq!(lat.mu.dim(), (4, 8, 6));
        assert_eq!(lat.log_var.dim(), (4, 8, 6));
        let back = codec.decode(&lat.mu, &f).unwrap();
        assert_eq!(back.values.dim(), (1, 64, 48));
        assert!(back.values.iter().all(|v| v.is_finite()));

        let bad = Array3::<f32>::zeros((3, 8, 6));
        assert!(matches!(codec.decode(&bad, &f), Err(Error::Shape(_))));
        let odd = gen_grf(&SyntheticSpec::new((60, 64), 2.0, 3)).unwrap();
        assert!(matches!(codec.encode(&odd), Err(Error::Shape(_))));
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let mut p = ModelParams::init(&tiny(), NormStats::default(), 1).unwrap();
        p.config.latent_channels = 8;
        assert!(matches!(Codec::new(p), Err(Error::Fingerprint { .. })));
    }

    #[test]
    fn loss_unit_values() {
        let x = [0.5f64, -1.0, 2.0];
        assert!((charbonnier(&x, &x, 1e-3).unwrap() - 1e-3).abs() < 1e-15);
        let v = charbonnier(&[0.0f64], &[3.0], 1e-3).unwrap();
        assert!((v - (9.0f64 + 1e-6).sqrt()).abs() < 1e-15);
        assert!((v - 3.000_000_17).abs() < 5e-9);
        assert!(charbonnier(&[0.0f64], &[1.0, 2.0], 1e-3).is_err());

        let z = Array3::<f32>::zeros((4, 2, 2));
        assert_eq!(kl_gaussian(&LatentRepr::new(z.clone(), z.clone()).unwrap()), 0.0);
        let one = LatentRepr::new(Array3::ones((1, 1, 1)), Array3::zeros((1, 1, 1))).unwrap();
        assert_eq!(kl_gaussian(&one), 0.5);

        let cfg = CodecConfig { kl_weight: 1.0, ..CodecConfig::default() };
        let x = [0.25f32];
        let l = vae_loss(&x, &x, &one, &cfg).unwrap();
        assert!((l.total - (1e-3 + 0.5)).abs() < 1e-12);
        let cfg0 = CodecConfig { kl_weight: 0.0, ..cfg };
        let l = vae_loss(&x, &[1.0], &one, &cfg0).unwrap();
        assert_eq!(l.total, l.recon);
    }

    #[test]
    fn reparameterize_limits() {
        let mu = Array3::from_elem((1, 2, 2), 0.5f32);
        let lat = LatentRepr::new(mu.clone(), Array3::from_elem((1, 2, 2), -1e30f32)).unwrap();
        assert_eq!(reparameterize(&lat, 4), mu);
        let lat = LatentRepr::new(Array3::from_elem((1, 100, 100), 0.5f32), Array3::zeros((1, 100, 100))).unwrap();
        let z = reparameterize(&lat, 9);
        assert_eq!(z, reparameterize(&lat, 9));
        let mean = z.mapv(|v| v as f64).mean().unwrap();
        assert!((mean - 0.5).abs() < 0.03);
    }

    #[test]
    fn zero_epoch_schedule_is_noop() {
        let fields: Vec<GridField> =
            (0..2).map(|s| gen_grf(&SyntheticSpec::new((16, 16), 2.0, s)).unwrap()).collect();
        let ds = CodecDataset::from_physical(&fields, "t").unwrap();
        let sched = TrainSchedule {
            pretrain: PhaseSpec { patch: 16, epochs: 0 },
            finetune: PhaseSpec { patch: 16, epochs: 0 },
            ..TrainSchedule::desk()
        };
        let out = train_vae(&ds, &sched, &tiny(), None).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.params.tensors, ModelParams::init(&tiny(), NormStats::default(), sched.seed).unwrap().tensors);
        assert!(matches!(
            train_vae(&CodecDataset { fields: vec![], ..ds }, &sched, &tiny(), None),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::init(&tiny(), NormStats::default(), 5).unwrap();
        let path = dir.path().join("m.ckpt");
        p.save(&path, &[]).unwrap();
        assert_eq!(ModelParams::load(&path, Some(&tiny())).unwrap(), p);
        let other = CodecConfig { latent_channels: 2, ..tiny() };
        assert!(matches!(ModelParams::load(&path, Some(&other)), Err(Error::Fingerprint { .. })));
    }
}
