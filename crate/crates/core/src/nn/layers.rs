//! Primitive layers with explicit backward passes.
//!
//! `forward` is pure and reentrant; `forward_train` additionally caches what the
//! matching `backward` needs. Gradients accumulate into [`Param::grad`].

use rand::Rng;

use super::{gemm, Module, Param, Real, Tensor};

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        let lo = pad.saturating_sub(kx).min(wo);
                        let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if hi > lo {
                            let s0 = lo + kx - pad;
                            dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *d = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with square kernel, zero padding and optional stride.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Self {
            weight: Param::uniform(
                format!("{name}.weight"),
                vec![cout, cin, kernel, kernel],
                bound,
                rng,
            ),
            bias: Param::uniform(format!("{name}.bias"), vec![cout], bound, rng),
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            input: None,
        }
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c(), self.cin, "conv {} input channels", self.weight.name);
        let (h, w) = (x.h(), x.w());
        let (ho, wo) = self.out_hw(h, w);
        let p = ho * wo;
        let kk = self.cin * self.kernel * self.kernel;
        let mut out = Tensor::zeros([x.n(), self.cout, ho, wo]);
        let mut cols = if self.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kk * p]
        };
        for i in 0..x.n() {
            let xs = x.sample(i);
            let src: &[T] = if self.pointwise() {
                xs
            } else {
                im2col(xs, self.cin, h, w, self.kernel, self.stride, self.pad, ho, wo, &mut cols);
                &cols
            };
            let ys = out.sample_mut(i);
            for co in 0..self.cout {
                ys[co * p..(co + 1) * p].fill(self.bias.value[co]);
            }
            gemm(self.cout, kk, p, &self.weight.value, false, src, false, ys, true);
        }
        out
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("conv backward without forward_train");
        let (h, w) = (x.h(), x.w());
        let (ho, wo) = (dy.h(), dy.w());
        let p = ho * wo;
        let kk = self.cin * self.kernel * self.kernel;
        let mut dx = Tensor::zeros(x.shape);
        let mut cols = vec![T::zero(); if self.pointwise() { 0 } else { kk * p }];
        let mut dcols = cols.clone();
        for i in 0..x.n() {
            let dys = dy.sample(i);
            let src: &[T] = if self.pointwise() {
                x.sample(i)
            } else {
                im2col(x.sample(i), self.cin, h, w, self.kernel, self.stride, self.pad, ho, wo, &mut cols);
                &cols
            };
            gemm(self.cout, p, kk, dys, false, src, true, &mut self.weight.grad, true);
            for co in 0..self.cout {
                self.bias.grad[co] += dys[co * p..(co + 1) * p].iter().copied().sum::<T>();
            }
            if self.pointwise() {
                gemm(kk, self.cout, p, &self.weight.value, true, dys, false, dx.sample_mut(i), false);
            } else {
                gemm(kk, self.cout, p, &self.weight.value, true, dys, false, &mut dcols, false);
                col2im(&dcols, self.cin, h, w, self.kernel, self.stride, self.pad, ho, wo, dx.sample_mut(i));
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub groups: usize,
    pub eps: f64,
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Real> GroupNorm<T> {
    pub fn new(name: &str, channels: usize, groups: usize) -> Self {
        assert!(
            groups > 0 && channels % groups == 0,
            "{channels} channels not divisible into {groups} groups"
        );
        Self {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], 1.0),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            groups,
            eps: 1e-5,
            cache: None,
        }
    }

    fn run(&self, x: &Tensor<T>, keep: bool) -> (Tensor<T>, Option<(Tensor<T>, Vec<T>)>) {
        let (n, c, hw) = (x.n(), x.c(), x.h() * x.w());
        let cg = c / self.groups;
        let m = (cg * hw) as f64;
        let mut y = Tensor::zeros(x.shape);
        let mut xhat = if keep { Some(Tensor::zeros(x.shape)) } else { None };
        let mut inv = Vec::with_capacity(n * self.groups);
        for i in 0..n {
            for g in 0..self.groups {
                let range = i * c * hw + g * cg * hw..i * c * hw + (g + 1) * cg * hw;
                let xs = &x.data[range.clone()];
                let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / m;
                let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m;
                let istd = 1.0 / (var + self.eps).sqrt();
                let (mean_t, istd_t) = (T::of(mean), T::of(istd));
                inv.push(istd_t);
                for (j, &v) in xs.iter().enumerate() {
                    let ch = g * cg + j / hw;
                    let xh = (v - mean_t) * istd_t;
                    if let Some(xh_t) = xhat.as_mut() {
                        xh_t.data[range.start + j] = xh;
                    }
                    y.data[range.start + j] = xh * self.gamma.value[ch] + self.beta.value[ch];
                }
            }
        }
        (y, xhat.map(|t| (t, inv)))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x, false).0
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (y, cache) = self.run(x, true);
        self.cache = cache;
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (xhat, inv) = self.cache.take().expect("norm backward without forward_train");
        let (n, c, hw) = (dy.n(), dy.c(), dy.h() * dy.w());
        let cg = c / self.groups;
        let m = T::of((cg * hw) as f64);
        let mut dx = Tensor::zeros(dy.shape);
        for i in 0..n {
            for g in 0..self.groups {
                let start = i * c * hw + g * cg * hw;
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for j in 0..cg * hw {
                    let ch = g * cg + j / hw;
                    let d = dy.data[start + j];
                    let xh = xhat.data[start + j];
                    self.gamma.grad[ch] += d * xh;
                    self.beta.grad[ch] += d;
                    let dxh = d * self.gamma.value[ch];
                    sum_d += dxh;
                    sum_dx += dxh * xh;
                }
                let (mean_d, mean_dx) = (sum_d / m, sum_dx / m);
                let istd = inv[i * self.groups + g];
                for j in 0..cg * hw {
                    let ch = g * cg + j / hw;
                    let dxh = dy.data[start + j] * self.gamma.value[ch];
                    dx.data[start + j] = istd * (dxh - mean_d - xhat.data[start + j] * mean_dx);
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for GroupNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `x * sigmoid(x)`.
#[derive(Debug, Clone, Default)]
pub struct Swish<T> {
    input: Option<Tensor<T>>,
}

impl<T: Real> Swish<T> {
    pub fn new() -> Self {
        Self { input: None }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        Tensor {
            shape: x.shape,
            data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("swish backward without forward_train");
        Tensor {
            shape: x.shape,
            data: x
                .data
                .iter()
                .zip(&dy.data)
                .map(|(&v, &d)| {
                    let s = sigmoid(v);
                    d * (s + v * s * (T::one() - s))
                })
                .collect(),
        }
    }
}

/// Two-tap linear interpolation weights along one axis (half-pixel centres, edge clamped).
fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = (src - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

/// Bilinear 2x spatial upsampling.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upsample2x;

impl Upsample2x {
    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
        let (ho, wo) = (2 * h, 2 * w);
        let rt = linear_taps(h, ho);
        let ct = linear_taps(w, wo);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut tmp = vec![T::zero(); h * wo];
        for plane in 0..n * c {
            let src = &x.data[plane * h * w..(plane + 1) * h * w];
            for r in 0..h {
                for (o, &(i0, i1, w0, w1)) in ct.iter().enumerate() {
                    tmp[r * wo + o] = src[r * w + i0] * T::of(w0) + src[r * w + i1] * T::of(w1);
                }
            }
            let dst = &mut out.data[plane * ho * wo..(plane + 1) * ho * wo];
            for (o, &(i0, i1, w0, w1)) in rt.iter().enumerate() {
                let (a, b) = (T::of(w0), T::of(w1));
                for col in 0..wo {
                    dst[o * wo + col] = tmp[i0 * wo + col] * a + tmp[i1 * wo + col] * b;
                }
            }
        }
        out
    }

    pub fn backward<T: Real>(&self, dy: &Tensor<T>) -> Tensor<T> {
        let (n, c, ho, wo) = (dy.n(), dy.c(), dy.h(), dy.w());
        let (h, w) = (ho / 2, wo / 2);
        let rt = linear_taps(h, ho);
        let ct = linear_taps(w, wo);
        let mut dx = Tensor::zeros([n, c, h, w]);
        let mut tmp = vec![T::zero(); h * wo];
        for plane in 0..n * c {
            let g = &dy.data[plane * ho * wo..(plane + 1) * ho * wo];
            tmp.iter_mut().for_each(|v| *v = T::zero());
            for (o, &(i0, i1, w0, w1)) in rt.iter().enumerate() {
                let (a, b) = (T::of(w0), T::of(w1));
                for col in 0..wo {
                    let v = g[o * wo + col];
                    tmp[i0 * wo + col] += v * a;
                    tmp[i1 * wo + col] += v * b;
                }
            }
            let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
            for r in 0..h {
                for (o, &(i0, i1, w0, w1)) in ct.iter().enumerate() {
                    let v = tmp[r * wo + o];
                    dst[r * w + i0] += v * T::of(w0);
                    dst[r * w + i1] += v * T::of(w1);
                }
            }
        }
        dx
    }
}
