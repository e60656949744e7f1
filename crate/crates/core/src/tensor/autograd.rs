use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use super::{Op, Real, Tensor};

/// Gradients of a scalar with respect to every leaf that requires one.
pub struct Grads<T: Real> {
    map: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        self.map.get(&t.id())
    }

    /// Gradient for `t`, or zeros when `t` did not influence the output.
    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Tensor<T> {
        self.get(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<T: Real> Tensor<T> {
    /// Reverse pass from this tensor (seeded with ones) to all leaves.
    pub fn backward(&self) -> Grads<T> {
        let map = run(self, false);
        let map = map
            .into_iter()
            .filter(|(_, (node, _))| node.is_leaf())
            .map(|(id, (_, g))| (id, g))
            .collect();
        Grads { map }
    }
}

/// Gradients of `output` (seeded with ones) with respect to `wrt`.
///
/// With `create_graph` the returned tensors are themselves differentiable
/// functions of every leaf that requires a gradient.
pub fn grad<T: Real>(output: &Tensor<T>, wrt: &[&Tensor<T>], create_graph: bool) -> Vec<Tensor<T>> {
    let mut map = run(output, create_graph);
    wrt.iter()
        .map(|t| {
            map.remove(&t.id())
                .map(|(_, g)| g)
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect()
}

fn topo_order<T: Real>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut seen = BTreeSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !t.requires_grad() || !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in parents(t.op()) {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order.reverse();
    order
}

fn parents<T: Real>(op: &Op<T>) -> Vec<&Tensor<T>> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Conv(a, b, _)
        | Op::ConvT(a, b, _)
        | Op::ConvW(a, b, _) => vec![a, b],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Sqrt(a)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::LeakyRelu(a, _)
        | Op::Abs(a)
        | Op::Square(a)
        | Op::SumAll(a)
        | Op::SumTo(a)
        | Op::BroadcastTo(a)
        | Op::Reshape(a)
        | Op::Narrow(a, _)
        | Op::AvgPool(a, _)
        | Op::Upsample(a, _) => vec![a],
        Op::Concat(parts) => parts.iter().collect(),
    }
}

type GradMap<T> = BTreeMap<usize, (Tensor<T>, Tensor<T>)>;

fn run<T: Real>(output: &Tensor<T>, create: bool) -> GradMap<T> {
    let mut grads: GradMap<T> = BTreeMap::new();
    if !output.requires_grad() {
        return grads;
    }
    grads.insert(output.id(), (output.clone(), Tensor::ones(output.shape())));
    let mut contribs = Vec::new();
    for node in topo_order(output) {
        let Some((_, g)) = grads.get(&node.id()) else { continue };
        let g = g.clone();
        contribs.clear();
        rule(&node, &g, create, &mut contribs);
        for (parent, pg) in contribs.drain(..) {
            if !parent.requires_grad() {
                continue;
            }
            debug_assert_eq!(parent.shape(), pg.shape());
            match grads.get_mut(&parent.id()) {
                Some((_, acc)) => *acc = acc.add(&pg),
                None => {
                    grads.insert(parent.id(), (parent, pg));
                }
            }
        }
    }
    grads
}

fn rule<T: Real>(node: &Tensor<T>, g: &Tensor<T>, create: bool, out: &mut Vec<(Tensor<T>, Tensor<T>)>) {
    let c = |t: &Tensor<T>| if create { t.clone() } else { t.detach() };
    let two = T::of(2.0);
    match node.op() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            out.push((a.clone(), g.clone()));
            out.push((b.clone(), g.clone()));
        }
        Op::Sub(a, b) => {
            out.push((a.clone(), g.clone()));
            if b.requires_grad() {
                out.push((b.clone(), g.neg()));
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                out.push((a.clone(), g.mul(&c(b))));
            }
            if b.requires_grad() {
                out.push((b.clone(), g.mul(&c(a))));
            }
        }
        Op::Div(a, b) => {
            if a.requires_grad() {
                out.push((a.clone(), g.div(&c(b))));
            }
            if b.requires_grad() {
                out.push((b.clone(), g.mul(&c(node)).div(&c(b)).neg()));
            }
        }
        Op::Neg(a) => out.push((a.clone(), g.neg())),
        Op::Scale(a, k) => out.push((a.clone(), g.scale(*k))),
        Op::AddScalar(a) => out.push((a.clone(), g.clone())),
        Op::Exp(a) => out.push((a.clone(), g.mul(&c(node)))),
        Op::Ln(a) => out.push((a.clone(), g.div(&c(a)))),
        Op::Sqrt(a) => out.push((a.clone(), g.div(&c(node)).scale(T::of(0.5)))),
        Op::Tanh(a) => {
            let y = c(node);
            out.push((a.clone(), g.sub(&g.mul(&y.square()))));
        }
        Op::Sigmoid(a) => {
            let y = c(node);
            out.push((a.clone(), g.mul(&y.sub(&y.square()))));
        }
        Op::LeakyRelu(a, slope) => {
            let mask: Vec<T> = a.data().iter().map(|v| if *v > T::zero() { T::one() } else { *slope }).collect();
            out.push((a.clone(), g.mul(&Tensor::from_vec(mask, a.shape()))));
        }
        Op::Abs(a) => {
            let sign: Vec<T> = a
                .data()
                .iter()
                .map(|v| {
                    if *v > T::zero() {
                        T::one()
                    } else if *v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect();
            out.push((a.clone(), g.mul(&Tensor::from_vec(sign, a.shape()))));
        }
        Op::Square(a) => out.push((a.clone(), g.mul(&c(a)).scale(two))),
        Op::SumAll(a) | Op::SumTo(a) => out.push((a.clone(), g.broadcast_to(a.shape()))),
        Op::BroadcastTo(a) => out.push((a.clone(), g.sum_to(a.shape()))),
        Op::Reshape(a) => out.push((a.clone(), g.reshape(a.shape()))),
        Op::Concat(parts) => {
            let mut off = 0;
            for p in parts {
                let len = p.shape()[1];
                if p.requires_grad() {
                    out.push((p.clone(), g.narrow(off, len)));
                }
                off += len;
            }
        }
        Op::Narrow(a, start) => {
            let full = a.shape();
            let len = node.shape()[1];
            let mut pieces = Vec::new();
            if *start > 0 {
                let mut s = full.to_vec();
                s[1] = *start;
                pieces.push(Tensor::zeros(&s));
            }
            pieces.push(g.clone());
            let after = full[1] - start - len;
            if after > 0 {
                let mut s = full.to_vec();
                s[1] = after;
                pieces.push(Tensor::zeros(&s));
            }
            out.push((a.clone(), Tensor::cat(&pieces)));
        }
        Op::Conv(x, w, geom) => {
            if x.requires_grad() {
                let s = x.shape();
                out.push((x.clone(), g.conv_transpose2d_to(&c(w), *geom, [s[2], s[3]])));
            }
            if w.requires_grad() {
                out.push((w.clone(), c(x).conv2d_weight(g, *geom)));
            }
        }
        Op::ConvT(y, w, geom) => {
            if y.requires_grad() {
                out.push((y.clone(), g.conv2d(&c(w), *geom)));
            }
            if w.requires_grad() {
                out.push((w.clone(), g.conv2d_weight(&c(y), *geom)));
            }
        }
        Op::ConvW(x, y, geom) => {
            if x.requires_grad() {
                let s = x.shape();
                out.push((x.clone(), c(y).conv_transpose2d_to(g, *geom, [s[2], s[3]])));
            }
            if y.requires_grad() {
                out.push((y.clone(), c(x).conv2d(g, *geom)));
            }
        }
        Op::AvgPool(a, k) => {
            let inv = T::one() / T::of((k * k) as f64);
            out.push((a.clone(), g.upsample_nearest2d(*k).scale(inv)));
        }
        Op::Upsample(a, k) => {
            out.push((a.clone(), g.avg_pool2d(*k).scale(T::of((k * k) as f64))));
        }
    }
}
