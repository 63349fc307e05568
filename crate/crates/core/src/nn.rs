//! Layers, parameter traversal, and optimizers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tensor::{Conv2dGeometry, Gradients, Tensor};

/// Anything that owns named trainable tensors.
///
/// Names are stable, dot-separated paths (`encoder.0.weight`), and the
/// traversal order is fixed, so two instances of the same architecture
/// enumerate their parameters in the same order.
pub trait Module {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Re-creates every parameter as a trainable leaf (`true`) or a constant
    /// (`false`). Values are unchanged.
    fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.named_params_mut() {
            *t = if trainable { t.to_param() } else { t.detach() };
        }
    }

    /// Order-sensitive checksum of all parameter bits.
    fn param_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.named_params() {
            for v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`Module`] by visiting the listed fields in order.
macro_rules! module_fields {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Module for $ty {
            fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a $crate::tensor::Tensor)>) {
                $( $crate::nn::Module::collect(&self.$field, &$crate::nn::join(prefix, stringify!($field)), out); )*
            }
            fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut $crate::tensor::Tensor)>) {
                $( $crate::nn::Module::collect_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), out); )*
            }
        }
    };
}
pub(crate) use module_fields;

impl<M: Module> Module for Vec<M> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, m) in self.iter().enumerate() {
            m.collect(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, m) in self.iter_mut().enumerate() {
            m.collect_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub geometry: Conv2dGeometry,
}

impl Conv2d {
    /// Kaiming-uniform weights (fan-in), zero bias.
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Conv2d {
        let fan_in = (cin * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weight: Vec<f64> = (0..cout * cin * kernel * kernel).map(|_| dist.sample(rng)).collect();
        Conv2d {
            weight: Tensor::param(weight, &[cout, cin, kernel, kernel]),
            bias: Tensor::param(vec![0.0; cout], &[cout]),
            geometry: Conv2dGeometry {
                stride,
                padding: kernel / 2,
            },
        }
    }

    /// A convolution whose weights and bias start at exactly zero.
    pub fn zeroed(cin: usize, cout: usize, kernel: usize) -> Conv2d {
        Conv2d {
            weight: Tensor::param(vec![0.0; cout * cin * kernel * kernel], &[cout, cin, kernel, kernel]),
            bias: Tensor::param(vec![0.0; cout], &[cout]),
            geometry: Conv2dGeometry {
                stride: 1,
                padding: kernel / 2,
            },
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight, Some(&self.bias), self.geometry)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

module_fields!(Conv2d { weight, bias });

impl Module for Tensor {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((prefix.to_string(), self));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((prefix.to_string(), self));
    }
}

/// Per-channel normalization over batch and spatial axes using the current
/// batch statistics, followed by a learned affine transform.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl ChannelNorm {
    pub fn new(channels: usize) -> ChannelNorm {
        ChannelNorm {
            gamma: Tensor::param(vec![1.0; channels], &[1, channels, 1, 1]),
            beta: Tensor::param(vec![0.0; channels], &[1, channels, 1, 1]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mean = x.mean_dims(&[0, 2, 3]);
        let centered = x.sub(&mean);
        let var = centered.sqr().mean_dims(&[0, 2, 3]);
        let normed = centered.div(&var.add_scalar(self.eps).sqrt());
        normed.mul(&self.gamma).add(&self.beta)
    }
}

module_fields!(ChannelNorm { gamma, beta });

/// Per-parameter optimizer buffers, keyed by parameter name.
pub type OptimizerState = BTreeMap<String, Vec<f64>>;

pub trait Optimizer {
    /// Applies one update to every parameter that has a gradient.
    fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &Gradients);

    fn state(&self) -> OptimizerState;

    fn load_state(&mut self, state: OptimizerState);

    fn set_lr(&mut self, lr: f64);
}

fn decayed_grad(g: &[f64], theta: &[f64], wd: f64) -> Vec<f64> {
    g.iter().zip(theta).map(|(&g, &t)| g + wd * t).collect()
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: OptimizerState,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Sgd {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &Gradients) {
        for (name, p) in params {
            let Some(g) = grads.get(p) else { continue };
            let g = decayed_grad(g, p.data(), self.weight_decay);
            let v = self.velocity.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            let mut next = p.to_vec();
            for i in 0..g.len() {
                v[i] = self.momentum * v[i] + g[i];
                next[i] -= self.lr * v[i];
            }
            *p = Tensor::param(next, p.shape());
        }
    }

    fn state(&self) -> OptimizerState {
        self.velocity.clone()
    }

    fn load_state(&mut self, state: OptimizerState) {
        self.velocity = state;
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    first: OptimizerState,
    second: OptimizerState,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &Gradients) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (name, p) in params {
            let Some(g) = grads.get(p) else { continue };
            let g = decayed_grad(g, p.data(), self.weight_decay);
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            let mut next = p.to_vec();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                next[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            *p = Tensor::param(next, p.shape());
        }
    }

    fn state(&self) -> OptimizerState {
        let mut s = BTreeMap::new();
        s.insert("#steps".to_string(), vec![self.steps as f64]);
        for (k, v) in &self.first {
            s.insert(format!("m:{k}"), v.clone());
        }
        for (k, v) in &self.second {
            s.insert(format!("v:{k}"), v.clone());
        }
        s
    }

    fn load_state(&mut self, state: OptimizerState) {
        self.first.clear();
        self.second.clear();
        for (k, v) in state {
            if k == "#steps" {
                self.steps = v[0] as u64;
            } else if let Some(name) = k.strip_prefix("m:") {
                self.first.insert(name.to_string(), v);
            } else if let Some(name) = k.strip_prefix("v:") {
                self.second.insert(name.to_string(), v);
            }
        }
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// RMSprop (no momentum, not centred) with L2 weight decay.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    pub weight_decay: f64,
    square_avg: OptimizerState,
}

impl RmsProp {
    pub fn new(lr: f64, weight_decay: f64) -> RmsProp {
        RmsProp {
            lr,
            alpha: 0.99,
            eps: 1e-8,
            weight_decay,
            square_avg: BTreeMap::new(),
        }
    }
}

impl Optimizer for RmsProp {
    fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &Gradients) {
        for (name, p) in params {
            let Some(g) = grads.get(p) else { continue };
            let g = decayed_grad(g, p.data(), self.weight_decay);
            let sq = self.square_avg.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            let mut next = p.to_vec();
            for i in 0..g.len() {
                sq[i] = self.alpha * sq[i] + (1.0 - self.alpha) * g[i] * g[i];
                next[i] -= self.lr * g[i] / (sq[i].sqrt() + self.eps);
            }
            *p = Tensor::param(next, p.shape());
        }
    }

    fn state(&self) -> OptimizerState {
        self.square_avg.clone()
    }

    fn load_state(&mut self, state: OptimizerState) {
        self.square_avg = state;
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[derive(Clone)]
    struct Pair {
        a: Conv2d,
        b: Conv2d,
    }
    module_fields!(Pair { a, b });

    #[test]
    fn names_are_stable_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Pair {
            a: Conv2d::new(1, 2, 3, 1, &mut rng),
            b: Conv2d::new(2, 1, 1, 1, &mut rng),
        };
        let names: Vec<String> = p.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["a.weight", "a.bias", "b.weight", "b.bias"]);
        assert_eq!(p.num_params(), 2 * 9 + 2 + 2 + 1);
    }

    #[test]
    fn channel_norm_standardizes() {
        let n = ChannelNorm::new(2);
        let x = Tensor::new((0..16).map(|i| (i * i) as f64).collect(), &[1, 2, 2, 4]);
        let y = n.forward(&x);
        for c in 0..2 {
            let s = &y.data()[c * 8..(c + 1) * 8];
            let mean: f64 = s.iter().sum::<f64>() / 8.0;
            let var: f64 = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Pair {
            a: Conv2d::new(1, 2, 3, 1, &mut rng),
            b: Conv2d::new(2, 1, 1, 1, &mut rng),
        };
        let x = Tensor::new(vec![0.3; 16], &[1, 1, 4, 4]);
        let before = m.param_checksum();
        let mut opts: Vec<Box<dyn Optimizer>> = vec![
            Box::new(Sgd::new(0.0, 0.9, 0.0)),
            Box::new(Adam::new(0.0, 0.0)),
            Box::new(RmsProp::new(0.0, 0.0)),
        ];
        for opt in opts.iter_mut() {
            let loss = m.b.forward(&m.a.forward(&x)).sqr().sum();
            let g = loss.backward();
            opt.step(m.named_params_mut(), &g);
        }
        assert_eq!(m.param_checksum(), before);
    }

    #[test]
    fn sgd_descends_quadratic() {
        let mut p = Tensor::param(vec![3.0, -2.0], &[2]);
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        for _ in 0..100 {
            let g = p.sqr().sum().backward();
            opt.step(vec![("p".into(), &mut p)], &g);
        }
        assert!(p.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn adam_state_round_trip() {
        let mut p = Tensor::param(vec![1.0, 2.0], &[2]);
        let mut opt = Adam::new(0.01, 0.0);
        let g = p.sqr().sum().backward();
        opt.step(vec![("p".into(), &mut p)], &g);
        let mut restored = Adam::new(0.01, 0.0);
        restored.load_state(opt.state());
        let (mut p1, mut p2) = (p.clone(), p.clone());
        let g1 = p1.sqr().sum().backward();
        opt.step(vec![("p".into(), &mut p1)], &g1);
        let g2 = p2.sqr().sum().backward();
        restored.step(vec![("p".into(), &mut p2)], &g2);
        assert_eq!(p1.data(), p2.data());
    }
}
