//! Independent reference implementations shared by the integration tests and the
//! acceptance harness. Everything here is written as plain loops on purpose.
#![allow(dead_code)]

use latcomp::grid::GridField;
use latcomp::nn::Module;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> GridField {
    let v = Array3::from_shape_fn((1, h, w), |_| rng.gen_range(-3.0f32..3.0));
    GridField::from_values(v, vec!["x".into()]).unwrap()
}

pub fn plane(f: &GridField) -> Vec<Vec<f64>> {
    let (_, h, w) = f.values.dim();
    (0..h).map(|i| (0..w).map(|j| f.values[[0, i, j]] as f64).collect()).collect()
}

pub fn naive_mse(t: &[Vec<f64>], p: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for i in 0..t.len() {
        for j in 0..t[i].len() {
            s += (p[i][j] - t[i][j]) * (p[i][j] - t[i][j]);
            n += 1.0;
        }
    }
    s / n
}

/// SSIM from explicit 2-D Gaussian windows, moments computed directly per window.
pub fn naive_ssim(t: &[Vec<f64>], p: &[Vec<f64>], window: usize, sigma: f64, k1: f64, k2: f64) -> f64 {
    let (h, w) = (t.len(), t[0].len());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for row in t {
        for &v in row {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let r = (hi - lo).max(1e-6);
    let (c1, c2) = ((k1 * r).powi(2), (k2 * r).powi(2));
    let c = (window as f64 - 1.0) / 2.0;
    let mut g = vec![vec![0.0; window]; window];
    let mut gs = 0.0;
    for a in 0..window {
        for b in 0..window {
            g[a][b] = (-((a as f64 - c).powi(2) + (b as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp();
            gs += g[a][b];
        }
    }
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..=h - window {
        for j in 0..=w - window {
            let (mut mx, mut my) = (0.0, 0.0);
            for a in 0..window {
                for b in 0..window {
                    let wt = g[a][b] / gs;
                    mx += wt * t[i + a][j + b];
                    my += wt * p[i + a][j + b];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for a in 0..window {
                for b in 0..window {
                    let wt = g[a][b] / gs;
                    let dx = t[i + a][j + b] - mx;
                    let dy = p[i + a][j + b] - my;
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cxy += wt * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    total / count
}

/// One-sided power `2 |F_k / L|^2`, `k = 1..=L/2`, by direct DFT sums.
pub fn naive_row_power(row: &[f64]) -> Vec<f64> {
    let l = row.len();
    (1..=l / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in row.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / l as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            2.0 * (re * re + im * im) / (l * l) as f64
        })
        .collect()
}

pub fn naive_spectrum(t: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; t[0].len() / 2];
    for row in t {
        for (a, p) in acc.iter_mut().zip(naive_row_power(row)) {
            *a += p;
        }
    }
    acc.iter().map(|a| a / t.len() as f64).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs()).max(1e-300)
    }
}

/// Worst per-tensor relative error between analytic and central-difference gradients,
/// sampled at up to `per_tensor` entries of each parameter tensor. The analytic gradients
/// must already be accumulated in the model.
pub fn max_relative_error<M, F>(model: &mut M, loss: F, per_tensor: usize, seed: u64) -> (f64, String)
where
    M: Module<f64>,
    F: Fn(&M) -> f64,
{
    let mut sizes = Vec::new();
    let mut analytic = Vec::new();
    model.visit(&mut |p| {
        sizes.push((p.name.clone(), p.value.len()));
        analytic.push(p.grad.clone());
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for (t, (name, len)) in sizes.iter().enumerate() {
        let picks: Vec<usize> = if *len <= per_tensor {
            (0..*len).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..*len)).collect()
        };
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for &k in &picks {
            let set = |m: &mut M, delta: f64| {
                let mut i = 0;
                m.visit_mut(&mut |p| {
                    if i == t {
                        p.value[k] += delta;
                    }
                    i += 1;
                });
            };
            set(model, h);
            let lp = loss(model);
            set(model, -2.0 * h);
            let lm = loss(model);
            set(model, h);
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[t][k];
            num += (a - fd).powi(2);
            den += a.abs().max(fd.abs()).powi(2);
        }
        let rel = if den < 1e-24 { num.sqrt() } else { (num / den).sqrt() };
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    worst
}
