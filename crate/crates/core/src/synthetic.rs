//! Desk-scale surrogate data: power-law Gaussian random fields and paired
//! coarse/fine samples that stand in for forecast -> analysis downscaling pairs.

use chrono::{DateTime, Duration, Utc};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::downscale::canonical_input_variables;
use crate::grid::GridField;

/// Default geographic box attached to synthetic fields (degrees).
pub const DEFAULT_LAT_RANGE: (f64, f64) = (15.0, 55.0);
pub const DEFAULT_LON_RANGE: (f64, f64) = (75.0, 135.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dims: (usize, usize),
    /// Target slope of the zonal power spectrum, `S(k) ~ k^-slope`.
    pub spectral_slope: f64,
    pub amplitude: f64,
    pub mean_offset: f64,
    pub seed: u64,
    pub variable: String,
}

impl SyntheticSpec {
    pub fn new(dims: (usize, usize), spectral_slope: f64, seed: u64) -> Self {
        Self {
            dims,
            spectral_slope,
            amplitude: 1.0,
            mean_offset: 0.0,
            seed,
            variable: "T2M".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.0 < 8 || self.dims.1 < 8 {
            return Err(Error::Config(format!("synthetic dims {:?} below 8x8", self.dims)));
        }
        if !(self.spectral_slope >= 0.0) {
            return Err(Error::Config(format!(
                "spectral slope must be >= 0, got {}",
                self.spectral_slope
            )));
        }
        if !(self.amplitude > 0.0) {
            return Err(Error::Config(format!("amplitude must be > 0, got {}", self.amplitude)));
        }
        Ok(())
    }
}

/// Exponent of the 2-D isotropic power density that yields a zonal (1-D) spectrum
/// with slope `-beta`. A power law `k^-g` in 2-D marginalizes to `k^(1-g)` along a
/// row only for `g > 1`; below that the marginal flattens, so the shift ramps in.
fn density_exponent(beta: f64) -> f64 {
    beta + beta.min(1.0)
}

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let row_fft = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = data[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            data[i * w + j] = col[i];
        }
    }
}

/// Zero-mean, unit-variance spectrally shaped noise.
fn shaped_noise(h: usize, w: usize, beta: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut buf: Vec<Complex<f64>> = (0..h * w)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    fft2(&mut buf, h, w, false, &mut planner);
    let gamma = density_exponent(beta);
    let freq = |i: usize, n: usize| {
        let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
        k / n as f64
    };
    for i in 0..h {
        let fy = freq(i, h);
        for j in 0..w {
            let fx = freq(j, w);
            let k = (fx * fx + fy * fy).sqrt();
            let gain = if k == 0.0 { 0.0 } else { k.powf(-gamma / 2.0) };
            buf[i * w + j] *= gain;
        }
    }
    fft2(&mut buf, h, w, true, &mut planner);
    let mut out = Array2::from_shape_fn((h, w), |(i, j)| buf[i * w + j].re);
    let mean = out.mean().unwrap_or(0.0);
    out -= mean;
    let std = (out.mapv(|v| v * v).mean().unwrap_or(0.0)).sqrt();
    if std > 0.0 {
        out /= std;
    }
    out
}

/// Gaussian random field whose zonal spectrum decays as `k^-spectral_slope`,
/// rescaled to the requested amplitude (sample std) and mean offset.
pub fn gen_grf(spec: &SyntheticSpec) -> Result<GridField> {
    spec.validate()?;
    let (h, w) = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = shaped_noise(h, w, spec.spectral_slope, &mut rng);
    let values = noise.mapv(|v| (spec.mean_offset + spec.amplitude * v) as f32);
    GridField::new(
        values.insert_axis(Axis(0)),
        vec![spec.variable.clone()],
        DEFAULT_LAT_RANGE,
        DEFAULT_LON_RANGE,
        synthetic_time(spec.seed),
    )
}

fn synthetic_time(seed: u64) -> DateTime<Utc> {
    DateTime::<Utc>::UNIX_EPOCH + Duration::hours((seed % 1_000_000) as i64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub high_spec: SyntheticSpec,
    pub downsample_factor: usize,
    pub input_channels: usize,
    pub mixing_seed: u64,
}

impl PairSpec {
    pub fn new(high_spec: SyntheticSpec, downsample_factor: usize) -> Self {
        Self {
            mixing_seed: high_spec.seed ^ 0x9e37_79b9_7f4a_7c15,
            high_spec,
            downsample_factor,
            input_channels: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.high_spec.validate()?;
        let f = self.downsample_factor;
        if f < 2 {
            return Err(Error::Config(format!("downsample factor must be >= 2, got {f}")));
        }
        if self.input_channels < 1 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        let (h, w) = self.high_spec.dims;
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("dims {h}x{w} not divisible by factor {f}")));
        }
        Ok(())
    }
}

/// Mean over non-overlapping `f x f` blocks.
pub fn block_average(x: &Array2<f64>, f: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h / f, w / f), |(i, j)| {
        let mut s = 0.0;
        for a in 0..f {
            for b in 0..f {
                s += x[[i * f + a, j * f + b]];
            }
        }
        s / (f * f) as f64
    })
}

/// Edge-clamped centred box filter of width `width`.
fn box_smooth(x: &Array2<f64>, width: usize) -> Array2<f64> {
    if width <= 1 {
        return x.clone();
    }
    let (h, w) = x.dim();
    let lo = (width - 1) / 2;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut s = 0.0;
        for a in 0..width {
            for b in 0..width {
                let ii = (i + a).saturating_sub(lo).min(h - 1);
                let jj = (j + b).saturating_sub(lo).min(w - 1);
                s += x[[ii, jj]];
            }
        }
        s / (width * width) as f64
    })
}

/// Number of coarse channels carrying phase-shifted samples of the fine field.
fn signal_channels(total: usize) -> usize {
    (total - 1).min(24)
}

/// Coarse multi-channel input and the matching fine-grid truth.
///
/// Channel 0 is the block average of the truth and carries the truth's variable name;
/// the others take the remaining forecast channel names in model order. The next channels are box-smoothed samples of the truth taken at different
/// sub-block offsets, each blended with its own coarse distractor field; the rest are
/// independent distractors. Every channel gets its own physical offset and scale.
pub fn gen_forecast_pair(pair: &PairSpec) -> Result<(GridField, GridField)> {
    pair.validate()?;
    let high = gen_grf(&pair.high_spec)?;
    let f = pair.downsample_factor;
    let (h, w) = pair.high_spec.dims;
    let (lh, lw) = (h / f, w / f);
    let anomaly = high
        .values
        .index_axis(Axis(0), 0)
        .mapv(|v| (v as f64 - pair.high_spec.mean_offset) / pair.high_spec.amplitude);

    let mut rng = ChaCha8Rng::seed_from_u64(pair.mixing_seed);
    let n_signal = signal_channels(pair.input_channels);
    let mut low = Array3::<f32>::zeros((pair.input_channels, lh, lw));
    let mut names = Vec::with_capacity(pair.input_channels);
    let target = &pair.high_spec.variable;
    let canonical: Vec<String> = canonical_input_variables().into_iter().filter(|v| v != target).collect();

    let avg = block_average(&anomaly, f);
    low.index_axis_mut(Axis(0), 0).assign(
        &avg.mapv(|v| (pair.high_spec.mean_offset + pair.high_spec.amplitude * v) as f32),
    );
    names.push(pair.high_spec.variable.clone());

    for c in 1..pair.input_channels {
        let offset: f64 = rng.gen_range(-50.0..50.0);
        let scale: f64 = rng.gen_range(0.5..5.0);
        let distractor_slope: f64 = rng.gen_range(1.0..3.0);
        let distractor = shaped_noise(lh, lw, distractor_slope, &mut rng);
        let values = if c <= n_signal {
            let (oy, ox) = (rng.gen_range(0..f), rng.gen_range(0..f));
            let width = rng.gen_range(1..=3);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let mix: f64 = rng.gen_range(0.05..0.3);
            let smooth = box_smooth(&anomaly, width);
            Array2::from_shape_fn((lh, lw), |(i, j)| {
                sign * smooth[[i * f + oy, j * f + ox]] + mix * distractor[[i, j]]
            })
        } else {
            distractor
        };
        low.index_axis_mut(Axis(0), c)
            .assign(&values.mapv(|v| (offset + scale * v) as f32));
        names.push(canonical.get(c - 1).cloned().unwrap_or_else(|| format!("aux{c:02}")));
    }

    let low = GridField::new(low, names, high.lat_range, high.lon_range, high.timestamp)?;
    Ok((low, high))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::zonal_power_spectrum;

    fn mid_decade(l: usize) -> (f64, f64) {
        let c = (l as f64 / 2.0).sqrt();
        (c / 10f64.sqrt(), c * 10f64.sqrt())
    }

    fn slope_of(beta: f64, n: usize, seed: u64) -> f64 {
        let f = gen_grf(&SyntheticSpec::new((n, n), beta, seed)).unwrap();
        let s = zonal_power_spectrum(&f, "T2M", 1.0).unwrap();
        let (lo, hi) = mid_decade(n);
        s.loglog_slope(lo, hi)
    }

    #[test]
    fn white_noise_is_flat() {
        assert!(slope_of(0.0, 256, 1).abs() < 0.3);
    }

    #[test]
    fn red_spectrum_slope() {
        let s = slope_of(2.0, 256, 2);
        assert!((s + 2.0).abs() < 0.3, "slope {s}");
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::new((32, 48), 2.5, 7);
        assert_eq!(gen_grf(&spec).unwrap(), gen_grf(&spec).unwrap());
        let other = SyntheticSpec { seed: 8, ..spec.clone() };
        assert_ne!(gen_grf(&spec).unwrap().values, gen_grf(&other).unwrap().values);
    }

    #[test]
    fn amplitude_and_offset() {
        let spec = SyntheticSpec {
            amplitude: 3.0,
            mean_offset: 280.0,
            ..SyntheticSpec::new((128, 128), 2.0, 3)
        };
        let f = gen_grf(&spec).unwrap();
        let v = f.values.mapv(|x| x as f64);
        let mean = v.mean().unwrap();
        let std = v.mapv(|x| (x - mean).powi(2)).mean().unwrap().sqrt();
        assert!((mean - 280.0).abs() < 3.0 * 3.0 / 128.0);
        assert!((std - 3.0).abs() < 0.3);
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec::new((4, 64), 1.0, 0).validate().is_err());
        assert!(SyntheticSpec::new((64, 64), -0.5, 0).validate().is_err());
        let spec = SyntheticSpec { amplitude: 0.0, ..SyntheticSpec::new((64, 64), 1.0, 0) };
        assert!(gen_grf(&spec).is_err());
    }

    #[test]
    fn pair_shapes_and_signal_channel() {
        let pair = PairSpec::new(SyntheticSpec::new((256, 256), 2.5, 11), 8);
        let (low, high) = gen_forecast_pair(&pair).unwrap();
        assert_eq!(low.values.dim(), (40, 32, 32));
        assert_eq!(high.values.dim(), (1, 256, 256));
        assert_eq!(low.variables[0], "T2M");

        let truth = block_average(&high.values.index_axis(Axis(0), 0).mapv(|v| v as f64), 8);
        let ch0 = low.values.index_axis(Axis(0), 0).mapv(|v| v as f64);
        let (ma, mb) = (truth.mean().unwrap(), ch0.mean().unwrap());
        let cov = ((&truth - ma) * (&ch0 - mb)).sum();
        let va = (&truth - ma).mapv(|v| v * v).sum();
        let vb = (&ch0 - mb).mapv(|v| v * v).sum();
        assert!(cov / (va * vb).sqrt() > 0.9);

        let (low2, high2) = gen_forecast_pair(&pair).unwrap();
        assert_eq!((low, high), (low2, high2));
    }

    #[test]
    fn pair_requires_divisible_dims() {
        let pair = PairSpec::new(SyntheticSpec::new((60, 64), 2.0, 1), 8);
        assert!(matches!(gen_forecast_pair(&pair), Err(Error::Shape(_))));
        let pair = PairSpec::new(SyntheticSpec::new((64, 64), 2.0, 1), 1);
        assert!(gen_forecast_pair(&pair).is_err());
    }
}
