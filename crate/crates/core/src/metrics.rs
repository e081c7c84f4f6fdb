//! Verification metrics: MSE/RMSE, zonal power spectra, SSIM, value-density
//! histograms and box-whisker aggregation of per-sample scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridField;

/// Mean kilometres per degree along a meridian.
const KM_PER_DEGREE: f64 = 111.32;

fn paired<'a>(
    truth: &'a GridField,
    pred: &'a GridField,
    variable: &str,
) -> Result<(ArrayView2<'a, f32>, ArrayView2<'a, f32>)> {
    let t = truth.channel(variable)?;
    let p = pred.channel(variable)?;
    if t.dim() != p.dim() {
        return Err(Error::Shape(format!(
            "truth {:?} vs prediction {:?}",
            t.dim(),
            p.dim()
        )));
    }
    Ok((t, p))
}

pub fn mse(truth: &GridField, pred: &GridField, variable: &str) -> Result<f64> {
    let (t, p) = paired(truth, pred, variable)?;
    let n = t.len() as f64;
    Ok(t.iter()
        .zip(p.iter())
        .map(|(&a, &b)| (b as f64 - a as f64).powi(2))
        .sum::<f64>()
        / n)
}

pub fn rmse(truth: &GridField, pred: &GridField, variable: &str) -> Result<f64> {
    mse(truth, pred, variable).map(f64::sqrt)
}

/// Spectrum of a single row under the `1/L` DFT normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPower {
    /// `|F_0|^2`, the squared row mean.
    pub dc: f64,
    /// `S_k = 2 |F_k|^2` for `k = 1..=L/2`.
    pub power: Vec<f64>,
    /// `|F_{L/2}|^2` for even `L` (counted once in Parseval's sum).
    pub nyquist: Option<f64>,
}

pub fn row_power(row: &[f64], planner: &mut FftPlanner<f64>) -> RowPower {
    let l = row.len();
    let fft = planner.plan_fft_forward(l);
    let mut buf: Vec<Complex<f64>> = row.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    let inv = 1.0 / l as f64;
    let sq = |k: usize| (buf[k] * inv).norm_sqr();
    RowPower {
        dc: sq(0),
        power: (1..=l / 2).map(|k| 2.0 * sq(k)).collect(),
        nyquist: (l % 2 == 0).then(|| sq(l / 2)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    pub wavenumbers: Vec<usize>,
    pub wavelength_km: Vec<f64>,
    pub power: Vec<f64>,
    pub rows_averaged: usize,
}

impl SpectrumResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,wavelength_km,power\n");
        for i in 0..self.power.len() {
            let _ = writeln!(
                out,
                "{},{},{:e}",
                self.wavenumbers[i], self.wavelength_km[i], self.power[i]
            );
        }
        out
    }

    /// Least-squares slope of log(power) against log(k) over `k in [k_lo, k_hi]`.
    pub fn loglog_slope(&self, k_lo: f64, k_hi: f64) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .wavenumbers
            .iter()
            .zip(&self.power)
            .filter(|(&k, &p)| (k as f64) >= k_lo && (k as f64) <= k_hi && p > 0.0)
            .map(|(&k, &p)| ((k as f64).ln(), p.ln()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }
}

/// Zonal grid spacing at the domain's central latitude.
pub fn zonal_spacing_km(field: &GridField) -> f64 {
    let lat_mid = 0.5 * (field.lat_range.0 + field.lat_range.1);
    let dlon = (field.lon_range.1 - field.lon_range.0) / field.width() as f64;
    dlon * KM_PER_DEGREE * lat_mid.to_radians().cos()
}

/// Average over latitude rows of the per-row power `S_k`, `k = 1..=W/2`.
pub fn zonal_power_spectrum(
    field: &GridField,
    variable: &str,
    dx_km: f64,
) -> Result<SpectrumResult> {
    let plane = field.channel(variable)?;
    let (h, l) = plane.dim();
    if l < 4 {
        return Err(Error::Shape(format!("rows of length {l} are too short for a spectrum")));
    }
    let mut planner = FftPlanner::new();
    let mut acc = vec![0.0; l / 2];
    let mut row = vec![0.0; l];
    for r in 0..h {
        for (dst, &v) in row.iter_mut().zip(plane.row(r)) {
            *dst = v as f64;
        }
        for (a, p) in acc.iter_mut().zip(row_power(&row, &mut planner).power) {
            *a += p;
        }
    }
    let wavenumbers: Vec<usize> = (1..=l / 2).collect();
    Ok(SpectrumResult {
        wavelength_km: wavenumbers.iter().map(|&k| l as f64 * dx_km / k as f64).collect(),
        wavenumbers,
        power: acc.into_iter().map(|a| a / h as f64).collect(),
        rows_averaged: h,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Floor for the dynamic range of a constant truth field.
pub const SSIM_RANGE_FLOOR: f64 = 1e-6;

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of `x` with the 1-D kernel `g` along both axes.
fn filter_valid(x: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut tmp = Array2::<f64>::zeros((h, wo));
    for i in 0..h {
        for j in 0..wo {
            tmp[[i, j]] = (0..k).map(|t| g[t] * x[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((ho, wo));
    for i in 0..ho {
        for j in 0..wo {
            out[[i, j]] = (0..k).map(|t| g[t] * tmp[[i + t, j]]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully-contained Gaussian windows, given an explicit dynamic range.
pub fn ssim_with_range(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    range: f64,
    params: &SsimParams,
) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dim(), y.dim())));
    }
    let (h, w) = x.dim();
    if h < params.window || w < params.window {
        return Err(Error::Shape(format!(
            "{h}x{w} field is smaller than the {0}x{0} window",
            params.window
        )));
    }
    let r = range.max(SSIM_RANGE_FLOOR);
    let c1 = (params.k1 * r).powi(2);
    let c2 = (params.k2 * r).powi(2);
    let g = gaussian_window(params.window, params.sigma);
    let x = x.to_owned();
    let y = y.to_owned();
    let mx = filter_valid(&x, &g);
    let my = filter_valid(&y, &g);
    // Second moments are shift invariant; centering keeps them exact for flat inputs.
    let xc = &x - x.mean().unwrap_or(0.0);
    let yc = &y - y.mean().unwrap_or(0.0);
    let mxc = filter_valid(&xc, &g);
    let myc = filter_valid(&yc, &g);
    let mxx = filter_valid(&(&xc * &xc), &g);
    let myy = filter_valid(&(&yc * &yc), &g);
    let mxy = filter_valid(&(&xc * &yc), &g);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx.as_slice().unwrap()[i], my.as_slice().unwrap()[i]);
        let (ac, bc) = (mxc.as_slice().unwrap()[i], myc.as_slice().unwrap()[i]);
        let sxx = mxx.as_slice().unwrap()[i] - ac * ac;
        let syy = myy.as_slice().unwrap()[i] - bc * bc;
        let sxy = mxy.as_slice().unwrap()[i] - ac * bc;
        total += ((2.0 * a * b + c1) * (2.0 * sxy + c2))
            / ((a * a + b * b + c1) * (sxx + syy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// SSIM with `C1 = (K1 R)^2`, `C2 = (K2 R)^2` where `R` is the truth's value range.
pub fn ssim(
    truth: &GridField,
    pred: &GridField,
    variable: &str,
    params: &SsimParams,
) -> Result<f64> {
    let (t, p) = paired(truth, pred, variable)?;
    let t = t.mapv(|v| v as f64);
    let p = p.mapv(|v| v as f64);
    let (lo, hi) = t
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    ssim_with_range(t.view(), p.view(), hi - lo, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// `log10(count)`, `None` for empty bins.
    pub log10_counts: Vec<Option<f64>>,
}

/// Shared-edge histogram of every pixel of `variable` across `fields`.
pub fn density_histogram(fields: &[GridField], variable: &str, bins: usize) -> Result<Histogram> {
    if fields.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for f in fields {
        for &v in f.channel(variable)? {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
    }
    if hi <= lo {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for f in fields {
        for &v in f.channel(variable)? {
            let idx = (((v as f64 - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
    }
    let log10_counts = counts
        .iter()
        .map(|&c| (c > 0).then(|| (c as f64).log10()))
        .collect();
    Ok(Histogram {
        edges,
        counts,
        log10_counts,
    })
}

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sample: String,
    pub variable: String,
    pub lead_time: u32,
    pub method: String,
    pub mse: f64,
    pub rmse: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

impl BoxSummary {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(Self {
            min: v[0],
            q25: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q75: quantile(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub variable: String,
    pub lead_time: u32,
    pub method: String,
    pub count: usize,
    pub mse: BoxSummary,
    pub rmse: BoxSummary,
    pub ssim: BoxSummary,
    pub mean_mse: f64,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cells: Vec<ReportCell>,
}

impl MetricReport {
    pub fn cell(&self, variable: &str, lead_time: u32, method: &str) -> Option<&ReportCell> {
        self.cells
            .iter()
            .find(|c| c.variable == variable && c.lead_time == lead_time && c.method == method)
    }
}

/// Groups rows by (variable, lead time, method) and summarizes each metric.
pub fn aggregate_report(rows: &[MetricRow]) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut groups: BTreeMap<(String, u32, String), Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.variable.clone(), r.lead_time, r.method.clone()))
            .or_default()
            .push(r);
    }
    let cells = groups
        .into_iter()
        .map(|((variable, lead_time, method), rs)| {
            let pick = |f: fn(&MetricRow) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let mses = pick(|r| r.mse);
            let ssims = pick(|r| r.ssim);
            Ok(ReportCell {
                count: rs.len(),
                mse: BoxSummary::from_values(&mses)?,
                rmse: BoxSummary::from_values(&pick(|r| r.rmse))?,
                ssim: BoxSummary::from_values(&ssims)?,
                mean_mse: mses.iter().sum::<f64>() / mses.len() as f64,
                mean_ssim: ssims.iter().sum::<f64>() / ssims.len() as f64,
                variable,
                lead_time,
                method,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { cells })
}

/// One CSV row per sample and metric: `sample,variable,lead_time,method,metric,value`.
pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("sample,variable,lead_time,method,metric,value\n");
    for r in rows {
        for (name, v) in [("mse", r.mse), ("rmse", r.rmse), ("ssim", r.ssim)] {
            let _ = writeln!(
                out,
                "{},{},{},{},{name},{v:e}",
                r.sample, r.variable, r.lead_time, r.method
            );
        }
    }
    out
}
