//! Layers, parameter traversal and the Adam optimizer.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::tensor::{ConvGeom, Grads, Real, Tensor};

/// Whether a visited tensor is optimized or only carried along (running
/// statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// Named traversal over every tensor a network owns.
///
/// Names are stable and dot-separated; checkpoints and optimizer state key on
/// them.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, kind, t| {
            if kind == ParamKind::Trainable {
                n += t.numel();
            }
        });
        n
    }

    /// `(name, kind, shape, values)` for every tensor, in traversal order.
    fn state(&self) -> Vec<(String, ParamKind, Vec<usize>, Vec<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, kind, t| out.push((String::from(name), kind, t.shape().to_vec(), t.to_vec())));
        out
    }

    /// Replaces every tensor with the entry of the same name. The names and
    /// shapes must match the module exactly.
    fn load_state(&mut self, entries: &[(String, Vec<usize>, Vec<T>)]) -> Result<()> {
        let index: BTreeMap<&str, usize> = entries.iter().enumerate().map(|(i, e)| (e.0.as_str(), i)).collect();
        let mut used = 0;
        let mut err = None;
        self.visit_mut("", &mut |name, kind, t| {
            if err.is_some() {
                return;
            }
            let Some(&i) = index.get(name) else {
                err = Some(invalid("state", format!("missing tensor {name}")));
                return;
            };
            let (_, shape, data) = &entries[i];
            if shape.as_slice() != t.shape() || data.len() != t.numel() {
                err = Some(invalid("state", format!("tensor {name} has shape {shape:?}, expected {:?}", t.shape())));
                return;
            }
            used += 1;
            *t = match kind {
                ParamKind::Trainable => Tensor::param(data.clone(), shape),
                ParamKind::Buffer => Tensor::from_vec(data.clone(), shape),
            };
        });
        if let Some(e) = err {
            return Err(e);
        }
        if used != entries.len() {
            return Err(invalid("state", format!("{} unexpected tensors", entries.len() - used)));
        }
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// Zero-mean Gaussian weights.
pub fn gaussian<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::param(data, shape)
}

/// Standard deviation used for every convolution weight at initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Conv2d<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geom: ConvGeom,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cin: usize, cout: usize, geom: ConvGeom, bias: bool) -> Self {
        Self {
            weight: gaussian(rng, &[cout, cin, geom.kernel, geom.kernel], INIT_STD),
            bias: bias.then(|| Tensor::param(vec![T::zero(); cout], &[1, cout, 1, 1])),
            geom,
        }
    }

    pub fn zeroed(cin: usize, cout: usize, geom: ConvGeom) -> Self {
        Self {
            weight: Tensor::param(vec![T::zero(); cout * cin * geom.kernel * geom.kernel], &[cout, cin, geom.kernel, geom.kernel]),
            bias: Some(Tensor::param(vec![T::zero(); cout], &[1, cout, 1, 1])),
            geom,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let y = x.conv2d(&self.weight, self.geom);
        match &self.bias {
            Some(b) => y.add(&b.broadcast_to(y.shape())),
            None => y,
        }
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&join(prefix, "weight"), ParamKind::Trainable, &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), ParamKind::Trainable, b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), ParamKind::Trainable, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), ParamKind::Trainable, b);
        }
    }
}

/// Transposed convolution; the weight is stored `[cin, cout, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geom: ConvGeom,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cin: usize, cout: usize, geom: ConvGeom, bias: bool) -> Self {
        Self {
            weight: gaussian(rng, &[cin, cout, geom.kernel, geom.kernel], INIT_STD),
            bias: bias.then(|| Tensor::param(vec![T::zero(); cout], &[1, cout, 1, 1])),
            geom,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let y = x.conv_transpose2d(&self.weight, self.geom);
        match &self.bias {
            Some(b) => y.add(&b.broadcast_to(y.shape())),
            None => y,
        }
    }
}

impl<T: Real> Module<T> for ConvTranspose2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&join(prefix, "weight"), ParamKind::Trainable, &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), ParamKind::Trainable, b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), ParamKind::Trainable, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), ParamKind::Trainable, b);
        }
    }
}

const NORM_EPS: f64 = 1e-5;

/// `(x - mean) / sqrt(var + eps)` with statistics over the axes where
/// `stat_shape` is 1.
pub fn normalize<T: Real>(x: &Tensor<T>, stat_shape: &[usize]) -> Tensor<T> {
    let mean = x.mean_to(stat_shape);
    let centered = x.sub(&mean.broadcast_to(x.shape()));
    let var = centered.square().mean_to(stat_shape);
    let inv = var.add_scalar(T::of(NORM_EPS)).sqrt();
    centered.div(&inv.broadcast_to(x.shape()))
}

/// Per-sample normalization over channels and space, without affine terms.
pub fn layer_norm<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, _, _, _] = x.dims4();
    normalize(x, &[n, 1, 1, 1])
}

fn affine<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    x.mul(&gamma.broadcast_to(x.shape())).add(&beta.broadcast_to(x.shape()))
}

/// Per-sample, per-channel normalization with a learned affine.
#[derive(Clone, Debug)]
pub struct InstanceNorm2d<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> InstanceNorm2d<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::param(vec![T::one(); c], &[1, c, 1, 1]),
            beta: Tensor::param(vec![T::zero(); c], &[1, c, 1, 1]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, _, _] = x.dims4();
        affine(&normalize(x, &[n, c, 1, 1]), &self.gamma, &self.beta)
    }
}

impl<T: Real> Module<T> for InstanceNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&join(prefix, "gamma"), ParamKind::Trainable, &self.gamma);
        f(&join(prefix, "beta"), ParamKind::Trainable, &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), ParamKind::Trainable, &mut self.gamma);
        f(&join(prefix, "beta"), ParamKind::Trainable, &mut self.beta);
    }
}

/// Batch statistics while training, running averages otherwise.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
}

/// Forward mode for layers whose behaviour differs between fitting and use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::param(vec![T::one(); c], &[1, c, 1, 1]),
            beta: Tensor::param(vec![T::zero(); c], &[1, c, 1, 1]),
            running_mean: Tensor::zeros(&[1, c, 1, 1]),
            running_var: Tensor::ones(&[1, c, 1, 1]),
            momentum: T::of(0.1),
        }
    }

    /// Training-mode forward; returns the batch statistics so the caller can
    /// fold them into the running averages with [`BatchNorm2d::track`].
    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, [Vec<T>; 2]) {
        let [n, c, h, w] = x.dims4();
        let stat = [1, c, 1, 1];
        let mean = x.mean_to(&stat);
        let centered = x.sub(&mean.broadcast_to(x.shape()));
        let var = centered.square().mean_to(&stat);
        let y = centered.div(&var.add_scalar(T::of(NORM_EPS)).sqrt().broadcast_to(x.shape()));
        let count = (n * h * w) as f64;
        let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let var_u = var.data().iter().map(|v| *v * T::of(unbiased)).collect();
        (affine(&y, &self.gamma, &self.beta), [mean.to_vec(), var_u])
    }

    pub fn track(&mut self, [mean, var]: &[Vec<T>; 2]) {
        let m = self.momentum;
        let upd = |run: &Tensor<T>, new: &[T]| {
            let data = run.data().iter().zip(new).map(|(r, v)| (T::one() - m) * *r + m * *v).collect();
            Tensor::from_vec(data, run.shape())
        };
        self.running_mean = upd(&self.running_mean, mean);
        self.running_var = upd(&self.running_var, var);
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let shape = x.shape();
        let mean = self.running_mean.broadcast_to(shape);
        let inv = self.running_var.add_scalar(T::of(NORM_EPS)).sqrt().broadcast_to(shape);
        affine(&x.sub(&mean).div(&inv), &self.gamma, &self.beta)
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&join(prefix, "gamma"), ParamKind::Trainable, &self.gamma);
        f(&join(prefix, "beta"), ParamKind::Trainable, &self.beta);
        f(&join(prefix, "running_mean"), ParamKind::Buffer, &self.running_mean);
        f(&join(prefix, "running_var"), ParamKind::Buffer, &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), ParamKind::Trainable, &mut self.gamma);
        f(&join(prefix, "beta"), ParamKind::Trainable, &mut self.beta);
        f(&join(prefix, "running_mean"), ParamKind::Buffer, &mut self.running_mean);
        f(&join(prefix, "running_var"), ParamKind::Buffer, &mut self.running_var);
    }
}

/// Batch statistics gathered by training-mode forwards, in layer order, for
/// folding into running averages once the pass is over.
pub type BnStats<T> = Vec<(usize, [Vec<T>; 2])>;

impl<T: Real, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &format!("{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &format!("{i}")), f);
        }
    }
}

impl<T: Real, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

/// Implements [`Module`] for a struct by visiting the listed fields in order.
macro_rules! module_fields {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Real> $crate::nn::Module<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, $crate::nn::ParamKind, &$crate::tensor::Tensor<T>)) {
                $( self.$field.visit(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, $crate::nn::ParamKind, &mut $crate::tensor::Tensor<T>)) {
                $( self.$field.visit_mut(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use module_fields;

/// Adam with decoupled per-tensor moment buffers keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self {
            lr: T::of(lr),
            beta1: T::of(betas.0),
            beta2: T::of(betas.1),
            eps: T::of(1e-8),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every trainable tensor in `module` from `grads`.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &Grads<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let moments = &mut self.moments;
        module.visit_mut("", &mut |name, kind, p| {
            if kind != ParamKind::Trainable {
                return;
            }
            let g = grads.get(p).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); p.numel()]);
            let (m, v) = moments
                .entry(String::from(name))
                .or_insert_with(|| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]));
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
            *p = Tensor::param(data, p.shape());
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Tensor<f64> = gaussian(&mut rng, &[2, 3, 4, 4], 1.0).detach();
        let y = layer_norm(&x);
        for s in 0..2 {
            let chunk = &y.data()[s * 48..(s + 1) * 48];
            let mean: f64 = chunk.iter().sum::<f64>() / 48.0;
            let var: f64 = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 48.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_train_then_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = Tensor::from_vec((0..16).map(|v| v as f64).collect(), &[2, 2, 2, 2]);
        let (_, stats) = bn.forward_train(&x);
        bn.track(&stats);
        // channel 0 holds 0..4 and 8..12, mean 5.5
        assert!((bn.running_mean.data()[0] - 0.55).abs() < 1e-12);
        let y = bn.forward_eval(&x);
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn adam_with_zero_lr_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f32>::new(&mut rng, 2, 3, ConvGeom::new(3, 1, 1), true);
        let before = conv.state();
        let x = Tensor::ones(&[1, 2, 4, 4]);
        let loss = conv.forward(&x).square().sum();
        let grads = loss.backward();
        let mut opt = Adam::new(0.0, (0.5, 0.999));
        opt.step(&mut conv, &grads);
        assert_eq!(before, conv.state());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = Conv2d::<f64>::zeroed(1, 1, ConvGeom::new(1, 1, 0));
        p.weight = Tensor::param(vec![3.0], &[1, 1, 1, 1]);
        let mut opt = Adam::new(0.1, (0.9, 0.999));
        for _ in 0..200 {
            let loss = p.weight.square().sum();
            let g = loss.backward();
            opt.step(&mut p, &g);
        }
        assert!(p.weight.item().abs() < 0.05);
    }

    #[test]
    fn load_state_restores_and_validates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = BatchNorm2d::<f64>::new(2);
        let mut conv = Conv2d::<f64>::new(&mut rng, 2, 2, ConvGeom::new(3, 1, 1), true);
        let other = Conv2d::<f64>::new(&mut rng, 2, 2, ConvGeom::new(3, 1, 1), true);
        let entries: Vec<_> = other.state().into_iter().map(|(n, _, s, v)| (n, s, v)).collect();
        conv.load_state(&entries).unwrap();
        assert_eq!(conv.state(), other.state());
        assert!(conv.weight.requires_grad());
        let mut short = entries.clone();
        short.pop();
        assert!(conv.load_state(&short).is_err());
        let mut extra = entries.clone();
        extra.push((String::from("zzz"), vec![1], vec![0.0]));
        assert!(conv.load_state(&extra).is_err());
        let mut bn = BatchNorm2d::<f64>::new(3);
        let bn_entries: Vec<_> = src.state().into_iter().map(|(n, _, s, v)| (n, s, v)).collect();
        assert!(bn.load_state(&bn_entries).is_err());
    }
}
