//! U-Net downscaler working either in the codec's latent space or directly on
//! high-resolution patches, plus the bilinear interpolation baseline.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::grid::{
    hex_digest, patchify, unpatchify, zscore_apply, zscore_fit_all, zscore_invert, Blend, GridField, NormStats,
    OverlapPolicy, Patch,
};
use crate::nn::{Adam, Conv2d, Module, NamedTensor, Param, Real, Stage, Tensor, Upsample2x};

pub const PRESSURE_VARIABLES: [&str; 5] = ["U", "V", "Z", "T", "Q"];
pub const PRESSURE_LEVELS: [u32; 7] = [50, 200, 500, 700, 850, 925, 1000];
pub const SURFACE_VARIABLES: [&str; 5] = ["T2M", "TP", "U10M", "V10M", "MSL"];

/// The 40 forecast channels in model order: every pressure variable at each level
/// (`U50`, `U200`, ..., `Q1000`), then the surface variables.
pub fn canonical_input_variables() -> Vec<String> {
    let mut out = Vec::with_capacity(40);
    for v in PRESSURE_VARIABLES {
        for l in PRESSURE_LEVELS {
            out.push(format!("{v}{l}"));
        }
    }
    out.extend(SURFACE_VARIABLES.iter().map(|s| s.to_string()));
    out
}

pub fn order_hash(variables: &[String]) -> String {
    hex_digest(&Sha256::digest(variables.join(",").as_bytes()))
}

/// Gathers `order` from any set of fields sharing a grid, z-scoring each channel.
pub fn assemble_input(fields: &[GridField], order: &[String], stats: &NormStats) -> Result<GridField> {
    let first = fields.first().ok_or(Error::EmptyDataset)?;
    let (h, w) = first.dims();
    let mut values = Array3::<f32>::zeros((order.len(), h, w));
    for (k, name) in order.iter().enumerate() {
        let src = fields
            .iter()
            .find_map(|f| f.variable_index(name).ok().map(|i| (f, i)))
            .ok_or_else(|| Error::MissingVariable(name.clone()))?;
        if src.0.dims() != (h, w) {
            return Err(Error::Shape(format!("`{name}` is on a {:?} grid, expected {h}x{w}", src.0.dims())));
        }
        let st = stats.get(name)?;
        let (m, sd) = (st.mean, st.std);
        values
            .index_axis_mut(Axis(0), k)
            .assign(&src.0.values.index_axis(Axis(0), src.1).mapv(|v| ((v as f64 - m) / sd) as f32));
    }
    Ok(first.with_values(values, order.to_vec()))
}

fn corner_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let x = if n_out == 1 {
                (n_in - 1) as f64 / 2.0
            } else {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let i0 = (x.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

/// Separable bilinear resampling with corner-aligned coordinates.
pub fn resize_array(values: &Array3<f32>, target: (usize, usize)) -> Result<Array3<f32>> {
    let (c, h, w) = values.dim();
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Shape(format!("resize target {th}x{tw}")));
    }
    if (th, tw) == (h, w) {
        return Ok(values.clone());
    }
    let rows = corner_taps(h, th);
    let cols = corner_taps(w, tw);
    let mut out = Array3::<f32>::zeros((c, th, tw));
    for ch in 0..c {
        let src = values.index_axis(Axis(0), ch);
        let mut tmp = Array2::<f64>::zeros((h, tw));
        for r in 0..h {
            for (j, &(c0, c1, t)) in cols.iter().enumerate() {
                tmp[[r, j]] = (1.0 - t) * src[[r, c0]] as f64 + t * src[[r, c1]] as f64;
            }
        }
        for (i, &(r0, r1, t)) in rows.iter().enumerate() {
            for j in 0..tw {
                out[[ch, i, j]] = ((1.0 - t) * tmp[[r0, j]] + t * tmp[[r1, j]]) as f32;
            }
        }
    }
    Ok(out)
}

pub fn bilinear_resize(field: &GridField, target: (usize, usize)) -> Result<GridField> {
    let values = resize_array(&field.values, target)?;
    Ok(field.with_values(values, field.variables.clone()))
}

/// Low-resolution channel named like the target, resized to `dims`.
pub fn interp_baseline(low: &GridField, variable: &str, dims: (usize, usize)) -> Result<GridField> {
    bilinear_resize(&low.select(variable)?, dims)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Predict codec latents at the latent grid resolution, then decode.
    Latent,
    /// Predict normalized high-resolution values directly, patch by patch.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub stages: usize,
    pub res_blocks_per_stage: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub out_channels: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 40,
            stages: 4,
            res_blocks_per_stage: 2,
            base_channels: 64,
            max_channels: 512,
            out_channels: 4,
            norm_groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn desk(out_channels: usize) -> Self {
        Self { base_channels: 16, out_channels, ..Self::default() }
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        (0..self.stages)
            .map(|i| (self.base_channels << i).min(self.max_channels))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 || self.res_blocks_per_stage < 1 {
            return Err(Error::Config("stages and res_blocks_per_stage must be >= 1".into()));
        }
        if self.in_channels < 1 || self.out_channels < 1 || self.norm_groups < 1 {
            return Err(Error::Config("channel counts and norm_groups must be >= 1".into()));
        }
        if let Some(c) = self.stage_channels().into_iter().find(|c| *c == 0 || c % self.norm_groups != 0) {
            return Err(Error::Config(format!("stage width {c} not divisible by {} groups", self.norm_groups)));
        }
        Ok(())
    }

    pub fn divisor(&self) -> usize {
        1 << (self.stages - 1)
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!("{h}x{w} is not divisible by {d}")));
        }
        Ok(())
    }
}

/// Encoder-decoder with concatenation skips between matching resolutions.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    pub config: UNetConfig,
    stem: Conv2d<T>,
    enc: Vec<Stage<T>>,
    downs: Vec<Conv2d<T>>,
    dec: Vec<Stage<T>>,
    head: Conv2d<T>,
}

impl<T: Real> UNet<T> {
    pub fn new(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = config.stage_channels();
        let (nb, g) = (config.res_blocks_per_stage, config.norm_groups);
        let stem = Conv2d::new("unet.stem", config.in_channels, ch[0], 3, 1, &mut rng);
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        let mut prev = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            enc.push(Stage::new(&format!("unet.enc{i}"), prev, c, nb, g, &mut rng));
            if i + 1 < ch.len() {
                downs.push(Conv2d::new(&format!("unet.down{i}"), c, c, 3, 2, &mut rng));
            }
            prev = c;
        }
        let dec = (0..ch.len() - 1)
            .map(|i| Stage::new(&format!("unet.dec{i}"), ch[i + 1] + ch[i], ch[i], nb, g, &mut rng))
            .collect();
        let head = Conv2d::new("unet.head", ch[0], config.out_channels, 3, 1, &mut rng);
        Ok(Self { config: config.clone(), stem, enc, downs, dec, head })
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.config.in_channels {
            return Err(Error::Shape(format!("{} input channels, U-Net expects {}", x.c(), self.config.in_channels)));
        }
        self.config.check_dims(x.h(), x.w())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mut h = self.stem.forward(x);
        let mut skips = Vec::new();
        for (i, stage) in self.enc.iter().enumerate() {
            h = stage.forward(&h);
            if let Some(d) = self.downs.get(i) {
                skips.push(h.clone());
                h = d.forward(&h);
            }
        }
        for i in (0..self.dec.len()).rev() {
            let up = Upsample2x.forward(&h);
            h = self.dec[i].forward(&Tensor::concat_channels(&up, &skips[i]));
        }
        Ok(self.head.forward(&h))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = self.stem.forward_train(x);
        let mut skips = Vec::new();
        for i in 0..self.enc.len() {
            h = self.enc[i].forward_train(&h);
            if let Some(d) = self.downs.get_mut(i) {
                skips.push(h.clone());
                h = d.forward_train(&h);
            }
        }
        for i in (0..self.dec.len()).rev() {
            let up = Upsample2x.forward(&h);
            h = self.dec[i].forward_train(&Tensor::concat_channels(&up, &skips[i]));
        }
        self.head.forward_train(&h)
    }

    fn backward(&mut self, dy: &Tensor<T>) {
        let ch = self.config.stage_channels();
        let mut d = self.head.backward(dy);
        let mut dskips = vec![None; self.dec.len()];
        for i in 0..self.dec.len() {
            let (dup, dskip) = self.dec[i].backward(&d).split_channels(ch[i + 1]);
            dskips[i] = Some(dskip);
            d = Upsample2x.backward(&dup);
        }
        for i in (0..self.enc.len()).rev() {
            if let Some(down) = self.downs.get_mut(i) {
                d = down.backward(&d);
                d.add_assign(dskips[i].as_ref().expect("skip gradient"));
            }
            d = self.enc[i].backward(&d);
        }
        self.stem.backward(&d);
    }

    /// Mean squared error against `target`.
    pub fn loss(&self, x: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
        let y = self.forward(x)?;
        mse_and_grad(&y, target, false).map(|r| r.0)
    }

    pub fn loss_backward(&mut self, x: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
        self.check(x)?;
        let y = self.forward_train(x);
        let (loss, g) = mse_and_grad(&y, target, true)?;
        self.backward(&Tensor::from_vec(y.shape, g));
        Ok(loss)
    }
}

fn mse_and_grad<T: Real>(y: &Tensor<T>, t: &Tensor<T>, grad: bool) -> Result<(f64, Vec<T>)> {
    if y.shape != t.shape {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", y.shape, t.shape)));
    }
    let n = y.data.len() as f64;
    let mut s = 0.0;
    let mut g = if grad { Vec::with_capacity(y.data.len()) } else { Vec::new() };
    for (a, b) in y.data.iter().zip(&t.data) {
        let d = a.as_f64() - b.as_f64();
        s += d * d;
        if grad {
            g.push(T::of(2.0 * d / n));
        }
    }
    Ok((s / n, g))
}

impl<T: Real> Module<T> for UNet<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem.visit(f);
        for (i, s) in self.enc.iter().enumerate() {
            s.visit(f);
            if let Some(d) = self.downs.get(i) {
                d.visit(f);
            }
        }
        self.dec.iter().for_each(|s| s.visit(f));
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_mut(f);
        for (i, s) in self.enc.iter_mut().enumerate() {
            s.visit_mut(f);
            if let Some(d) = self.downs.get_mut(i) {
                d.visit_mut(f);
            }
        }
        self.dec.iter_mut().for_each(|s| s.visit_mut(f));
        self.head.visit_mut(f);
    }
}

fn to_tensor(a: &Array3<f32>) -> Tensor<f32> {
    let (c, h, w) = a.dim();
    Tensor::from_vec([1, c, h, w], a.iter().copied().collect())
}

fn from_tensor(t: &Tensor<f32>, i: usize) -> Array3<f32> {
    Array3::from_shape_vec((t.c(), t.h(), t.w()), t.sample(i).to_vec()).expect("tensor shape")
}

/// Applies a U-Net to one `[C, h, w]` array.
pub fn unet_forward(input: &Array3<f32>, unet: &UNet<f32>) -> Result<Array3<f32>> {
    Ok(from_tensor(&unet.forward(&to_tensor(input))?, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownscaleSchedule {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for DownscaleSchedule {
    fn default() -> Self {
        Self { batch_size: 16, epochs: 50, learning_rate: 3.2e-5, seed: 0, checkpoint_every: 10 }
    }
}

impl DownscaleSchedule {
    pub fn desk() -> Self {
        Self { epochs: 30, learning_rate: 1e-3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("batch_size must be >= 1 and learning_rate > 0".into()));
        }
        Ok(())
    }
}

/// Everything that defines a downscaler besides its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownscaleSetup {
    pub unet: UNetConfig,
    pub mode: Mode,
    pub input_variables: Vec<String>,
    pub target_variables: Vec<String>,
    /// Training patch size in raw mode.
    pub raw_patch: usize,
}

impl DownscaleSetup {
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("setup serializes");
        hex_digest(&Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredSetup {
    setup: DownscaleSetup,
    target_stats: NormStats,
    codec_fingerprint: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub samples: usize,
}

pub fn down_history_csv(history: &[DownEpoch]) -> String {
    let mut s = String::from("epoch,loss,samples\n");
    for r in history {
        s.push_str(&format!("{},{:e},{}\n", r.epoch, r.loss, r.samples));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams {
    pub setup: DownscaleSetup,
    pub input_stats: NormStats,
    pub target_stats: NormStats,
    pub codec_fingerprint: Option<String>,
    pub fingerprint: String,
    pub tensors: Vec<NamedTensor>,
}

impl UNetParams {
    pub fn to_checkpoint(&self, history: &[DownEpoch]) -> Result<Checkpoint> {
        let stored = StoredSetup {
            setup: self.setup.clone(),
            target_stats: self.target_stats.clone(),
            codec_fingerprint: self.codec_fingerprint.clone(),
        };
        Ok(Checkpoint {
            kind: "unet".into(),
            config: serde_json::to_value(stored)?,
            norm_stats: self.input_stats.clone(),
            fingerprint: self.fingerprint.clone(),
            provenance: serde_json::json!({ "epochs": history.len(), "final_loss": history.last().map(|r| r.loss) }),
            history_csv: down_history_csv(history),
            tensors: self.tensors.clone(),
        })
    }

    pub fn save(&self, path: &Path, history: &[DownEpoch]) -> Result<()> {
        self.to_checkpoint(history)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.kind != "unet" {
            return Err(Error::Format(format!("expected a unet checkpoint, found `{}`", ck.kind)));
        }
        let stored: StoredSetup = serde_json::from_value(ck.config)?;
        let expected = stored.setup.fingerprint();
        if expected != ck.fingerprint {
            return Err(Error::Fingerprint { expected, found: ck.fingerprint });
        }
        Ok(Self {
            setup: stored.setup,
            input_stats: ck.norm_stats,
            target_stats: stored.target_stats,
            codec_fingerprint: stored.codec_fingerprint,
            fingerprint: ck.fingerprint,
            tensors: ck.tensors,
        })
    }
}

/// Paired coarse input and fine truth, in physical units.
#[derive(Debug, Clone)]
pub struct DownscalePair {
    pub low: GridField,
    pub high: GridField,
}

#[derive(Debug, Clone)]
pub struct DownscaleOutcome {
    pub params: UNetParams,
    pub history: Vec<DownEpoch>,
    pub checkpoints: Vec<PathBuf>,
}

fn working_dims(setup: &DownscaleSetup, high: (usize, usize), codec: Option<&Codec>) -> Result<(usize, usize)> {
    match setup.mode {
        Mode::Latent => codec.ok_or_else(|| Error::Config("latent mode needs a codec".into()))?.config().latent_dims(high.0, high.1),
        Mode::Raw => Ok(high),
    }
}

fn prepare_input(low: &GridField, setup: &DownscaleSetup, stats: &NormStats, dims: (usize, usize)) -> Result<Array3<f32>> {
    let x = assemble_input(std::slice::from_ref(low), &setup.input_variables, stats)?;
    resize_array(&x.values, dims)
}

pub fn train_downscaler(
    pairs: &[DownscalePair],
    schedule: &DownscaleSchedule,
    setup: &DownscaleSetup,
    codec: Option<&Codec>,
    checkpoint_dir: Option<&Path>,
) -> Result<DownscaleOutcome> {
    schedule.validate()?;
    setup.unet.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if setup.unet.in_channels != setup.input_variables.len() {
        return Err(Error::Config("unet.in_channels must equal the number of input variables".into()));
    }
    let expected_out = match setup.mode {
        Mode::Latent => {
            let c = codec.ok_or_else(|| Error::Config("latent mode needs a trained codec".into()))?;
            if c.config().in_channels != setup.target_variables.len() {
                return Err(Error::Config("codec channels do not match the target variables".into()));
            }
            c.config().latent_channels
        }
        Mode::Raw => setup.target_variables.len(),
    };
    if setup.unet.out_channels != expected_out {
        return Err(Error::Config(format!(
            "unet.out_channels is {}, {:?} mode needs {expected_out}",
            setup.unet.out_channels, setup.mode
        )));
    }

    let lows: Vec<GridField> = pairs.iter().map(|p| p.low.clone()).collect();
    let input_stats = zscore_fit_all(&lows)?;
    let target_vars: Vec<&str> = setup.target_variables.iter().map(String::as_str).collect();
    let highs: Vec<GridField> = pairs
        .iter()
        .map(|p| select_many(&p.high, &target_vars))
        .collect::<Result<_>>()?;
    let target_stats = match (setup.mode, codec) {
        (Mode::Latent, Some(c)) => c.params.norm_stats.clone(),
        _ => zscore_fit_all(&highs)?,
    };
    let hd = highs[0].dims();
    let work = working_dims(setup, hd, codec)?;
    setup.unet.check_dims(work.0, work.1)?;

    let mut inputs = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for (p, high) in pairs.iter().zip(&highs) {
        if high.dims() != hd {
            return Err(Error::Shape("high-resolution fields differ in size".into()));
        }
        inputs.push(prepare_input(&p.low, setup, &input_stats, work)?);
        let norm = zscore_apply(high, &target_stats)?;
        targets.push(match setup.mode {
            Mode::Latent => codec.expect("checked").encode(&norm)?.mu,
            Mode::Raw => norm.values,
        });
    }
    let patch = match setup.mode {
        Mode::Latent => work,
        Mode::Raw => {
            let p = setup.raw_patch.min(work.0).min(work.1);
            setup.unet.check_dims(p, p)?;
            (p, p)
        }
    };

    let mut model = UNet::<f32>::new(&setup.unet, schedule.seed)?;
    let mut opt = Adam::new(schedule.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0xD0_5CA1E);
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let snapshot = |model: &UNet<f32>| UNetParams {
        setup: setup.clone(),
        input_stats: input_stats.clone(),
        target_stats: target_stats.clone(),
        codec_fingerprint: codec.map(|c| c.identity()),
        fingerprint: setup.fingerprint(),
        tensors: model.export(),
    };

    for epoch in 1..=schedule.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(schedule.batch_size) {
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (x, t) = crop_pair(&inputs[i], &targets[i], patch, &mut rng);
                xs.push(to_tensor(&x));
                ts.push(to_tensor(&t));
            }
            let x = Tensor::stack(&xs.iter().collect::<Vec<_>>());
            let t = Tensor::stack(&ts.iter().collect::<Vec<_>>());
            model.zero_grad();
            let loss = model.loss_backward(&x, &t)?;
            if !loss.is_finite() {
                return Err(Error::TrainingAborted {
                    phase: "downscale".into(),
                    epoch,
                    last_good: checkpoints.last().cloned(),
                });
            }
            opt.step(&mut model);
            sum += loss * chunk.len() as f64;
            n += chunk.len();
        }
        history.push(DownEpoch { epoch, loss: sum / n as f64, samples: n });
        if let Some(dir) = checkpoint_dir {
            if schedule.checkpoint_every > 0 && epoch % schedule.checkpoint_every == 0 {
                let path = dir.join(format!("unet_e{epoch:03}.ckpt"));
                snapshot(&model).save(&path, &history)?;
                checkpoints.push(path);
            }
        }
    }
    let params = snapshot(&model);
    if let Some(dir) = checkpoint_dir {
        let path = dir.join("unet_final.ckpt");
        params.save(&path, &history)?;
        checkpoints.push(path);
    }
    Ok(DownscaleOutcome { params, history, checkpoints })
}

fn select_many(field: &GridField, vars: &[&str]) -> Result<GridField> {
    let idx: Vec<usize> = vars.iter().map(|v| field.variable_index(v)).collect::<Result<_>>()?;
    let values = field.values.select(Axis(0), &idx);
    Ok(field.with_values(values, vars.iter().map(|s| s.to_string()).collect()))
}

fn crop_pair(x: &Array3<f32>, t: &Array3<f32>, p: (usize, usize), rng: &mut ChaCha8Rng) -> (Array3<f32>, Array3<f32>) {
    let (_, h, w) = x.dim();
    if (h, w) == p {
        return (x.clone(), t.clone());
    }
    let r = rng.gen_range(0..=h - p.0);
    let c = rng.gen_range(0..=w - p.1);
    (
        x.slice(s![.., r..r + p.0, c..c + p.1]).to_owned(),
        t.slice(s![.., r..r + p.0, c..c + p.1]).to_owned(),
    )
}

/// Tiling used by raw-mode inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawTiling {
    pub patch: usize,
    pub policy: OverlapPolicy,
    pub blend: Blend,
}

/// Loaded U-Net ready for inference.
#[derive(Debug, Clone)]
pub struct Downscaler {
    pub params: UNetParams,
    unet: UNet<f32>,
}

impl Downscaler {
    pub fn new(params: UNetParams) -> Result<Self> {
        let expected = params.setup.fingerprint();
        if params.fingerprint != expected {
            return Err(Error::Fingerprint { expected, found: params.fingerprint.clone() });
        }
        let mut unet = UNet::new(&params.setup.unet, 0)?;
        unet.import(&params.tensors)?;
        Ok(Self { params, unet })
    }

    pub fn unet(&self) -> &UNet<f32> {
        &self.unet
    }

    pub fn default_tiling(&self) -> RawTiling {
        RawTiling {
            patch: self.params.setup.raw_patch,
            policy: OverlapPolicy::MinOverlap(self.params.setup.raw_patch / 4),
            blend: Blend::Feather,
        }
    }

    /// Maps a physical low-resolution field to physical target variables on `high_dims`.
    pub fn downscale(
        &self,
        low: &GridField,
        high_dims: (usize, usize),
        codec: Option<&Codec>,
        tiling: Option<RawTiling>,
    ) -> Result<GridField> {
        let setup = &self.params.setup;
        let names = setup.target_variables.clone();
        match setup.mode {
            Mode::Latent => {
                let codec = codec.ok_or_else(|| Error::Config("latent mode needs a codec".into()))?;
                if let Some(fp) = &self.params.codec_fingerprint {
                    if fp != &codec.identity() {
                        return Err(Error::Fingerprint { expected: fp.clone(), found: codec.identity() });
                    }
                }
                let work = codec.config().latent_dims(high_dims.0, high_dims.1)?;
                let x = prepare_input(low, setup, &self.params.input_stats, work)?;
                let z = unet_forward(&x, &self.unet)?;
                let y = codec.decode_raw(&z)?;
                let out = low.with_values(y, names);
                zscore_invert(&out, &self.params.target_stats)
            }
            Mode::Raw => {
                let tiling = tiling.unwrap_or_else(|| self.default_tiling());
                let x = prepare_input(low, setup, &self.params.input_stats, high_dims)?;
                let xf = low.with_values(x, setup.input_variables.clone());
                let p = tiling.patch.min(high_dims.0).min(high_dims.1);
                let tiles = patchify(&xf, (p, p), tiling.policy)?;
                let pred = tiles.map_patches(|t: &Patch| unet_forward(&t.data, &self.unet), names)?;
                zscore_invert(&unpatchify(&pred, tiling.blend)?, &self.params.target_stats)
            }
        }
    }
}

/// Cross-seam jumps compared with the distribution of ordinary neighbour differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeamReport {
    /// Mean absolute difference across each seam line, `(axis, index, value)`.
    pub seams: Vec<(char, usize, f64)>,
    pub max_seam: f64,
    pub interior_p999: f64,
    pub spike: bool,
}

/// Rows `r` in `rows` mark a seam between rows `r - 1` and `r`; likewise for columns.
pub fn seam_check(values: &Array2<f32>, rows: &[usize], cols: &[usize]) -> SeamReport {
    let (h, w) = values.dim();
    let mut interior = Vec::with_capacity(2 * h * w);
    let mut seams = Vec::new();
    for &r in rows.iter().filter(|&&r| r > 0 && r < h) {
        let m = (0..w).map(|j| (values[[r, j]] - values[[r - 1, j]]).abs() as f64).sum::<f64>() / w as f64;
        seams.push(('r', r, m));
    }
    for &c in cols.iter().filter(|&&c| c > 0 && c < w) {
        let m = (0..h).map(|i| (values[[i, c]] - values[[i, c - 1]]).abs() as f64).sum::<f64>() / h as f64;
        seams.push(('c', c, m));
    }
    for i in 1..h {
        if !rows.contains(&i) {
            interior.extend((0..w).map(|j| (values[[i, j]] - values[[i - 1, j]]).abs() as f64));
        }
    }
    for j in 1..w {
        if !cols.contains(&j) {
            interior.extend((0..h).map(|i| (values[[i, j]] - values[[i, j - 1]]).abs() as f64));
        }
    }
    interior.sort_unstable_by(f64::total_cmp);
    let interior_p999 = if interior.is_empty() { 0.0 } else { crate::metrics::quantile(&interior, 0.999) };
    let max_seam = seams.iter().map(|s| s.2).fold(0.0, f64::max);
    SeamReport { seams, max_seam, interior_p999, spike: max_seam > interior_p999 }
}
