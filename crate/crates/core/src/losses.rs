//! Training objectives. L1 terms are means over elements so the weights do
//! not depend on resolution.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::tensor::{grad, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossWeights {
    /// Reconstruction.
    pub lambda1: f64,
    /// Attribute classification.
    pub lambda2: f64,
    /// Mask-guided reconstruction.
    pub lambda3: f64,
    pub gp_lambda: f64,
    /// Share of plain reconstruction versus the cycle term, in `[0, 1]`.
    pub cycle_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 100.0, lambda2: 10.0, lambda3: 200.0, gp_lambda: 10.0, cycle_weight: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.gp_lambda, self.cycle_weight];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid("loss weights", "must be finite and non-negative"));
        }
        if self.cycle_weight > 1.0 {
            return Err(invalid("cycle weight", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn same<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(invalid("loss inputs", alloc::format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// Mean of `|M · (x - x_hat)|`, with `M` `[n, 1, h, w]` broadcast over channels.
pub fn loss_g_mre<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>, preserved: &Tensor<T>) -> Result<Tensor<T>> {
    same(x, x_hat)?;
    let [n, _, h, w] = x.dims4();
    if preserved.shape() != [n, 1, h, w] {
        return Err(invalid("preserved mask", alloc::format!("{:?} for images {:?}", preserved.shape(), x.shape())));
    }
    Ok(preserved.broadcast_to(x.shape()).mul(&x.sub(x_hat)).abs().mean())
}

/// Mean absolute error.
pub fn loss_g_rec<T: Real>(x: &Tensor<T>, x_rec: &Tensor<T>) -> Result<Tensor<T>> {
    same(x, x_rec)?;
    Ok(x.sub(x_rec).abs().mean())
}

/// Mean absolute error against the back-edited image.
pub fn loss_g_cycle<T: Real>(x: &Tensor<T>, x_cycle: &Tensor<T>) -> Result<Tensor<T>> {
    loss_g_rec(x, x_cycle)
}

/// Per-sample critic value: mean of a `[n, 1, s, s]` patch map, shape `[n]`.
pub fn patch_score<T: Real>(map: &Tensor<T>) -> Tensor<T> {
    let n = map.shape()[0];
    map.mean_to(&[n, 1, 1, 1]).reshape(&[n])
}

/// Critic loss parts, both scalars. `gp` already includes its weight.
#[derive(Clone, Debug)]
pub struct AdvLoss<T: Real> {
    pub wasserstein: Tensor<T>,
    pub gp: Tensor<T>,
}

impl<T: Real> AdvLoss<T> {
    pub fn total(&self) -> Tensor<T> {
        self.wasserstein.add(&self.gp)
    }
}

/// `E[D(fake)] - E[D(real)] + λ E[(‖∇D(x_t)‖ - 1)²]` with
/// `x_t = t·real + (1 - t)·fake` and one `t` per sample. `critic` maps a batch
/// to per-sample scores `[n]`. The penalty keeps its graph, so its gradient
/// with respect to the critic parameters is exact.
pub fn loss_d_adv<T: Real, F>(critic: F, x_real: &Tensor<T>, x_fake: &Tensor<T>, gp_lambda: f64, t: &[T]) -> Result<AdvLoss<T>>
where
    F: Fn(&Tensor<T>) -> Tensor<T>,
{
    same(x_real, x_fake)?;
    let n = x_real.shape()[0];
    if t.len() != n {
        return Err(Error::Dim { what: "interpolation weights", expected: n, got: t.len() });
    }
    let wasserstein = critic(x_fake).mean().sub(&critic(x_real).mean());
    let tt = Tensor::from_vec(t.to_vec(), &[n, 1, 1, 1]).broadcast_to(x_real.shape());
    let real = x_real.detach();
    let fake = x_fake.detach();
    let x_int = fake.add(&tt.mul(&real.sub(&fake))).requiring_grad();
    let g = grad(&critic(&x_int).sum(), &[&x_int], true).remove(0);
    let norm = g.square().sum_to(&[n, 1, 1, 1]).add_scalar(T::of(1e-12)).sqrt();
    let gp = norm.add_scalar(T::of(-1.0)).square().mean().scale(T::of(gp_lambda));
    Ok(AdvLoss { wasserstein, gp })
}

/// [`loss_d_adv`] with `t ~ U(0, 1)` drawn from `rng`.
pub fn loss_d_adv_rng<T: Real, F, R>(critic: F, x_real: &Tensor<T>, x_fake: &Tensor<T>, gp_lambda: f64, rng: &mut R) -> Result<AdvLoss<T>>
where
    F: Fn(&Tensor<T>) -> Tensor<T>,
    R: Rng + ?Sized,
{
    let t: Vec<T> = (0..x_real.shape()[0]).map(|_| T::of(rng.random::<f64>())).collect();
    loss_d_adv(critic, x_real, x_fake, gp_lambda, &t)
}

/// `-E[D(fake)]`: mean over each level's patch map, then over levels.
pub fn loss_g_gan<T: Real>(fake_maps: &[Tensor<T>]) -> Result<Tensor<T>> {
    if fake_maps.is_empty() {
        return Err(Error::Empty("critic levels"));
    }
    let sum = fake_maps.iter().map(|m| m.mean()).reduce(|a, b| a.add(&b)).expect("non-empty");
    Ok(sum.scale(T::of(-1.0 / fake_maps.len() as f64)))
}

/// Mean binary cross-entropy between `sigmoid(logits)` and `labels`, in the
/// overflow-free form `max(z, 0) - z·y + ln(1 + e^{-|z|})`.
pub fn bce_with_logits<T: Real>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<Tensor<T>> {
    same(logits, labels)?;
    let soft = logits.abs().neg().exp().add_scalar(T::one()).ln();
    Ok(logits.relu().sub(&logits.mul(labels)).add(&soft).mean())
}

/// Critic attribute loss against the source labels.
pub fn loss_d_att<T: Real>(logits: &Tensor<T>, att_s: &Tensor<T>) -> Result<Tensor<T>> {
    bce_with_logits(logits, att_s)
}

/// Generator attribute loss against the target labels.
pub fn loss_g_cls<T: Real>(logits: &Tensor<T>, att_t: &Tensor<T>) -> Result<Tensor<T>> {
    bce_with_logits(logits, att_t)
}

/// Generator loss components, all scalars. `cycle` may be omitted when its
/// weight is zero.
#[derive(Clone, Debug)]
pub struct GParts<T: Real> {
    pub gan: Tensor<T>,
    pub rec: Tensor<T>,
    pub cls: Tensor<T>,
    pub mre: Tensor<T>,
    pub cycle: Option<Tensor<T>>,
}

/// `cw·rec + (1 - cw)·cycle`.
pub fn mixed_reconstruction<T: Real>(rec: &Tensor<T>, cycle: Option<&Tensor<T>>, cycle_weight: f64) -> Tensor<T> {
    let r = rec.scale(T::of(cycle_weight));
    match cycle {
        Some(c) if cycle_weight < 1.0 => r.add(&c.scale(T::of(1.0 - cycle_weight))),
        _ => r,
    }
}

/// `gan + λ1·(cw·rec + (1-cw)·cycle) + λ2·cls + λ3·mre`.
pub fn total_g<T: Real>(p: &GParts<T>, w: &LossWeights) -> Tensor<T> {
    let recon = mixed_reconstruction(&p.rec, p.cycle.as_ref(), w.cycle_weight);
    p.gan
        .add(&recon.scale(T::of(w.lambda1)))
        .add(&p.cls.scale(T::of(w.lambda2)))
        .add(&p.mre.scale(T::of(w.lambda3)))
}

/// Mean of the per-level critic losses.
pub fn total_d<T: Real>(levels: &[Tensor<T>]) -> Result<Tensor<T>> {
    if levels.is_empty() {
        return Err(Error::Empty("critic levels"));
    }
    let sum = levels.iter().cloned().reduce(|a, b| a.add(&b)).expect("non-empty");
    Ok(sum.scale(T::of(1.0 / levels.len() as f64)))
}

#[cfg(test)]
mod tests;
