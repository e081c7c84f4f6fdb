use rand::Rng;

use super::{Conv2d, GroupNorm, Module, Param, Real, Swish, Tensor};

/// Residual block: `[conv3x3 -> swish -> group norm] x 2`, added to the (projected) input.
#[derive(Debug, Clone)]
pub struct ResBlock<T> {
    conv1: Conv2d<T>,
    act1: Swish<T>,
    norm1: GroupNorm<T>,
    conv2: Conv2d<T>,
    act2: Swish<T>,
    norm2: GroupNorm<T>,
    /// 1x1 projection when the channel count changes.
    skip: Option<Conv2d<T>>,
}

impl<T: Real> ResBlock<T> {
    pub fn new(name: &str, cin: usize, cout: usize, groups: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, 1, rng),
            act1: Swish::new(),
            norm1: GroupNorm::new(&format!("{name}.norm1"), cout, groups),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, rng),
            act2: Swish::new(),
            norm2: GroupNorm::new(&format!("{name}.norm2"), cout, groups),
            skip: (cin != cout).then(|| Conv2d::new(&format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.norm1.forward(&self.act1.forward(&self.conv1.forward(x)));
        let mut h = self.norm2.forward(&self.act2.forward(&self.conv2.forward(&h)));
        match &self.skip {
            Some(s) => h.add_assign(&s.forward(x)),
            None => h.add_assign(x),
        }
        h
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.conv1.forward_train(x);
        let h = self.act1.forward_train(&h);
        let h = self.norm1.forward_train(&h);
        let h = self.conv2.forward_train(&h);
        let h = self.act2.forward_train(&h);
        let mut h = self.norm2.forward_train(&h);
        match &mut self.skip {
            Some(s) => h.add_assign(&s.forward_train(x)),
            None => h.add_assign(x),
        }
        h
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.norm2.backward(dy);
        let d = self.act2.backward(&d);
        let d = self.conv2.backward(&d);
        let d = self.norm1.backward(&d);
        let d = self.act1.backward(&d);
        let mut dx = self.conv1.backward(&d);
        match &mut self.skip {
            Some(s) => dx.add_assign(&s.backward(dy)),
            None => dx.add_assign(dy),
        }
        dx
    }
}

impl<T: Real> Module<T> for ResBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv1.visit(f);
        self.norm1.visit(f);
        self.conv2.visit(f);
        self.norm2.visit(f);
        if let Some(s) = &self.skip {
            s.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_mut(f);
        self.norm1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.norm2.visit_mut(f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(f);
        }
    }
}

/// A run of residual blocks; the first one maps `cin -> cout`.
#[derive(Debug, Clone)]
pub struct Stage<T> {
    pub blocks: Vec<ResBlock<T>>,
}

impl<T: Real> Stage<T> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        depth: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| {
                let c_in = if i == 0 { cin } else { cout };
                ResBlock::new(&format!("{name}.block{i}"), c_in, cout, groups, rng)
            })
            .collect();
        Self { blocks }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h);
        }
        h
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward_train(&h);
        }
        h
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut d = dy.clone();
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
        d
    }
}

impl<T: Real> Module<T> for Stage<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.blocks.iter().for_each(|b| b.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
    }
}
