use super::{Module, Real};

/// Adam with bias correction. Moment buffers follow the module's visit order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real, M: Module<T> + ?Sized>(&mut self, module: &mut M) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        module.visit_mut(&mut |p| {
            if ms.len() <= idx {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for j in 0..p.value.len() {
                let g = p.grad[j].as_f64();
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                p.value[j] -= T::of(update);
            }
            idx += 1;
        });
    }
}
