use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Real;

/// Dense `[N, C, H, W]` activation batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?}");
        Self { shape, data }
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    /// Channel-wise concatenation of two batches with identical N, H, W.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!((a.n(), a.h(), a.w()), (b.n(), b.h(), b.w()));
        let mut out = Tensor::zeros([a.n(), a.c() + b.c(), a.h(), a.w()]);
        for i in 0..a.n() {
            let dst = out.sample_mut(i);
            let la = a.sample_len();
            dst[..la].copy_from_slice(a.sample(i));
            dst[la..].copy_from_slice(b.sample(i));
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`]: splits after `ca` channels.
    pub fn split_channels(&self, ca: usize) -> (Tensor<T>, Tensor<T>) {
        let (n, c, h, w) = (self.n(), self.c(), self.h(), self.w());
        let mut a = Tensor::zeros([n, ca, h, w]);
        let mut b = Tensor::zeros([n, c - ca, h, w]);
        for i in 0..n {
            let src = self.sample(i);
            let la = ca * h * w;
            a.sample_mut(i).copy_from_slice(&src[..la]);
            b.sample_mut(i).copy_from_slice(&src[la..]);
        }
        (a, b)
    }

    /// Stacks single-sample tensors into one batch.
    pub fn stack(items: &[&Tensor<T>]) -> Tensor<T> {
        let first = items.first().expect("non-empty batch");
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            assert_eq!([t.c(), t.h(), t.w()], [c, h, w]);
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec([data.len() / (c * h * w), c, h, w], data)
    }
}

/// Named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            value: vec![T::zero(); len],
            grad: vec![T::zero(); len],
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: f64) -> Self {
        let mut p = Self::zeros(name, shape);
        p.value.iter_mut().for_each(|x| *x = T::of(v));
        p
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut p = Self::zeros(name, shape);
        for x in &mut p.value {
            *x = T::of(rng.gen_range(-bound..=bound));
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Serializable snapshot of one parameter tensor (always stored as f32).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

/// Anything owning [`Param`]s. Visit order is the canonical parameter order.
pub trait Module<T: Real> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }

    fn export(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        self.visit(&mut |p| {
            out.push(NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.value.iter().map(|v| v.as_f64() as f32).collect(),
            })
        });
        out
    }

    /// Loads values by name; every parameter must be present with a matching shape.
    fn import(&mut self, tensors: &[NamedTensor]) -> crate::Result<()> {
        let mut err = None;
        let mut used = 0;
        self.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match tensors.iter().find(|t| t.name == p.name) {
                Some(t) if t.shape == p.shape && t.data.len() == p.value.len() => {
                    used += 1;
                    for (dst, &src) in p.value.iter_mut().zip(&t.data) {
                        *dst = T::of(src as f64);
                    }
                }
                Some(t) => {
                    err = Some(crate::Error::Shape(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        p.name, t.shape, p.shape
                    )))
                }
                None => err = Some(crate::Error::Format(format!("missing parameter {}", p.name))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if used != tensors.len() {
            return Err(crate::Error::Format(format!(
                "{} stored tensors but the architecture has {used}",
                tensors.len()
            )));
        }
        Ok(())
    }

    /// SHA-256 over parameter names, shapes and f32 values.
    fn param_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        self.visit(&mut |p| {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.value {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        });
        crate::grid::hex_digest(&h.finalize())
    }
}
