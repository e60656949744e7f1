use super::*;
use crate::discriminator::{DiscriminatorConfig, MultiCritic};
use crate::nn::Module;
use crate::testutil::{assert_close, numeric_grad, t};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn s(v: f64) -> Tensor<f64> {
    Tensor::scalar(v)
}

fn ln2() -> f64 {
    let sigmoid0 = 1.0 / (1.0 + libm::exp(-0.0));
    -libm::log(sigmoid0)
}

/// Gradient of `f` at `x` by autograd and by central differences.
fn fd_check(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> Tensor<f64>) {
    let xr = x.requiring_grad();
    let analytic = grad(&f(&xr), &[&xr], false).remove(0);
    let numeric = numeric_grad(x, &|v| f(v).item());
    assert_close(analytic.data(), &numeric, 1e-4);
}

#[test]
fn mre_examples() {
    let x = Tensor::<f64>::full(&[1, 3, 1, 1], 0.5);
    let y = Tensor::zeros(&[1, 3, 1, 1]);
    let m = Tensor::full(&[1, 1, 1, 1], 0.4);
    assert!((loss_g_mre(&x, &y, &m).unwrap().item() - 0.2).abs() < 1e-15);
    assert_eq!(loss_g_mre(&x, &x, &m).unwrap().item(), 0.0);
    let a = t(&[2, 3, 4, 4], 1);
    let b = t(&[2, 3, 4, 4], 2);
    assert_eq!(loss_g_mre(&a, &b, &Tensor::zeros(&[2, 1, 4, 4])).unwrap().item(), 0.0);
    assert!(loss_g_mre(&a, &b, &Tensor::zeros(&[2, 1, 2, 2])).is_err());
}

#[test]
fn rec_and_cycle_examples() {
    let x = t(&[1, 3, 4, 4], 3);
    assert_eq!(loss_g_rec(&x, &x).unwrap().item(), 0.0);
    assert!((loss_g_rec(&x, &x.add_scalar(0.1)).unwrap().item() - 0.1).abs() < 1e-12);
    let half: Vec<f64> = (0..48).map(|i| if i % 2 == 0 { 0.2 } else { 0.0 }).collect();
    let y = x.add(&Tensor::from_vec(half, &[1, 3, 4, 4]));
    assert!((loss_g_rec(&x, &y).unwrap().item() - 0.1).abs() < 1e-12);
    assert!(loss_g_rec(&x, &t(&[1, 3, 2, 2], 0)).is_err());

    let cyc = loss_g_cycle(&x, &x.add_scalar(-0.3)).unwrap();
    assert!((mixed_reconstruction(&s(0.0), Some(&cyc), 0.5).item() - 0.15).abs() < 1e-12);
    assert_eq!(mixed_reconstruction(&s(0.0), Some(&cyc), 1.0).item(), 0.0);
}

fn linear_critic(w: &Tensor<f64>) -> impl Fn(&Tensor<f64>) -> Tensor<f64> + '_ {
    move |x: &Tensor<f64>| {
        let n = x.shape()[0];
        x.mul(&w.broadcast_to(x.shape())).sum_to(&[n, 1, 1, 1]).reshape(&[n])
    }
}

#[test]
fn gradient_penalty_of_linear_critic() {
    let raw = t(&[1, 3, 4, 4], 5);
    let norm = libm::sqrt(raw.data().iter().map(|v| v * v).sum::<f64>());
    let w = raw.scale(3.0 / norm);
    let real = t(&[4, 3, 4, 4], 6);
    let fake = t(&[4, 3, 4, 4], 7);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = loss_d_adv_rng(linear_critic(&w), &real, &fake, 10.0, &mut rng).unwrap();
    let closed = 10.0 * (3.0 - 1.0) * (3.0 - 1.0);
    assert!((l.gp.item() - closed).abs() < 1e-6, "{}", l.gp.item());
    // the adversarial part is linear in the inputs
    let want = (fake.sub(&real)).mul(&w.broadcast_to(real.shape())).sum().item() / 4.0;
    assert!((l.wasserstein.item() - want).abs() < 1e-12);
}

#[test]
fn constant_critic_pays_the_full_penalty() {
    let real = t(&[2, 3, 4, 4], 6);
    let fake = t(&[2, 3, 4, 4], 7);
    let c = |x: &Tensor<f64>| {
        let n = x.shape()[0];
        x.scale(0.0).sum_to(&[n, 1, 1, 1]).reshape(&[n]).add_scalar(1.7)
    };
    let l = loss_d_adv(c, &real, &fake, 10.0, &[0.3, 0.8]).unwrap();
    assert_eq!(l.wasserstein.item(), 0.0);
    assert!((l.total().item() - 10.0).abs() < 1e-4);
}

#[test]
fn gan_and_total_examples() {
    assert_eq!(loss_g_gan(&[Tensor::<f64>::zeros(&[2, 1, 2, 2])]).unwrap().item(), 0.0);
    assert_eq!(loss_g_gan(&[Tensor::full(&[1, 1, 1, 1], 2.5)]).unwrap().item(), -2.5);
    let two = [Tensor::full(&[3, 1, 1, 1], 1.0), Tensor::full(&[3, 1, 2, 2], 3.0)];
    assert_eq!(loss_g_gan(&two).unwrap().item(), -2.0);

    assert_eq!(total_d(&[s(1.0), s(2.0)]).unwrap().item(), 1.5);
    assert_eq!(total_d(&[s(0.7)]).unwrap().item(), 0.7);
    assert_eq!(total_d(&[s(0.0), s(0.0)]).unwrap().item(), 0.0);

    let w = LossWeights::default();
    let p = GParts { gan: s(0.5), rec: s(0.01), cls: s(0.02), mre: s(0.001), cycle: None };
    assert!((total_g(&p, &w).item() - 1.9).abs() < 1e-12);
    let zero = GParts { gan: s(0.0), rec: s(0.0), cls: s(0.0), mre: s(0.0), cycle: Some(s(0.0)) };
    assert_eq!(total_g(&zero, &w).item(), 0.0);
    // affine in each weight
    let mut w2 = w.clone();
    w2.lambda3 *= 2.0;
    let mut w0 = w.clone();
    w0.lambda3 = 0.0;
    let c1 = total_g(&p, &w).item() - total_g(&p, &w0).item();
    let c2 = total_g(&p, &w2).item() - total_g(&p, &w0).item();
    assert!((c2 - 2.0 * c1).abs() < 1e-12);
}

#[test]
fn bce_examples() {
    let z = Tensor::from_vec(vec![0.0], &[1, 1]);
    let one = Tensor::from_vec(vec![1.0], &[1, 1]);
    assert!((loss_d_att(&z, &one).unwrap().item() - ln2()).abs() < 1e-12);
    let z2 = Tensor::zeros(&[1, 2]);
    let l = Tensor::from_vec(vec![1.0, 0.0], &[1, 2]);
    assert!((loss_d_att(&z2, &l).unwrap().item() - ln2()).abs() < 1e-12);
    let tgt = Tensor::from_vec(vec![0.0, 1.0], &[1, 2]);
    assert!((loss_g_cls(&z2, &tgt).unwrap().item() - ln2()).abs() < 1e-12);
    let sat = Tensor::from_vec(vec![20.0, -20.0], &[1, 2]);
    assert!(loss_d_att(&sat, &l).unwrap().item() < 1e-8);
    assert!(loss_g_cls(&sat.cast::<f32>(), &l.cast()).unwrap().item() < 1e-8);
    assert!(loss_d_att(&z2, &one).is_err());
}

#[test]
fn generator_side_gradients_match_finite_differences() {
    let x = t(&[1, 3, 4, 4], 10);
    let xh = t(&[1, 3, 4, 4], 11);
    let m = t(&[1, 1, 4, 4], 12).abs();
    fd_check(&xh, |v| loss_g_mre(&x, v, &m).unwrap());
    fd_check(&xh, |v| loss_g_rec(&x, v).unwrap());
    fd_check(&xh, |v| loss_g_cycle(&x, v).unwrap());

    let cfg = DiscriminatorConfig { num_levels: 1, base_resolution: 4, conv_layers: 2, base_channels: 1, num_attributes: 1 };
    let d = MultiCritic::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    fd_check(&xh, |v| loss_g_gan(&[d.critic_forward(v, 0).unwrap().adv_map]).unwrap());
    let target = Tensor::from_vec(vec![1.0], &[1, 1]);
    fd_check(&xh, |v| loss_g_cls(&d.critic_forward(v, 0).unwrap().attr_logits, &target).unwrap());
    let logits = t(&[2, 3], 13).scale(3.0);
    let labels = Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0], &[2, 3]);
    fd_check(&logits, |v| loss_d_att(v, &labels).unwrap());

    let parts = |v: &Tensor<f64>| GParts {
        gan: loss_g_gan(&[d.critic_forward(v, 0).unwrap().adv_map]).unwrap(),
        rec: loss_g_rec(&x, v).unwrap(),
        cls: loss_g_cls(&d.critic_forward(v, 0).unwrap().attr_logits, &target).unwrap(),
        mre: loss_g_mre(&x, v, &m).unwrap(),
        cycle: Some(loss_g_cycle(&x, &v.scale(0.5)).unwrap()),
    };
    let w = LossWeights { cycle_weight: 0.3, ..LossWeights::default() };
    fd_check(&xh, |v| total_g(&parts(v), &w));
}

#[test]
fn critic_loss_gradients_match_finite_differences() {
    let cfg = DiscriminatorConfig { num_levels: 1, base_resolution: 4, conv_layers: 2, base_channels: 1, num_attributes: 2 };
    let base = MultiCritic::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let real = t(&[2, 3, 4, 4], 20);
    let fake = t(&[2, 3, 4, 4], 21);
    let labels = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let target = "levels.0.backbone.0.conv.weight";
    let mut w0 = None;
    base.visit("", &mut |name, _, p| {
        if name == target {
            w0 = Some(p.detach());
        }
    });
    let loss = |w: &Tensor<f64>| {
        let mut d = base.clone();
        d.visit_mut("", &mut |name, _, p| {
            if name == target {
                *p = w.clone();
            }
        });
        let adv = loss_d_adv(|x| patch_score(&d.critic_forward(x, 0).unwrap().adv_map), &real, &fake, 10.0, &[0.25, 0.6]).unwrap();
        let att = loss_d_att(&d.critic_forward(&real, 0).unwrap().attr_logits, &labels).unwrap();
        total_d(&[adv.total().add(&att)]).unwrap()
    };
    fd_check(&w0.unwrap(), loss);
    // the penalty alone, to make sure the double-backward path is exercised
    let gp_only = |x: &Tensor<f64>| {
        loss_d_adv(|v| patch_score(&base.critic_forward(v, 0).unwrap().adv_map), &real, x, 10.0, &[0.25, 0.6]).unwrap().gp
    };
    let analytic_is_nonzero = {
        let f = fake.requiring_grad();
        let g = grad(&gp_only(&f), &[&f], false).remove(0);
        g.data().iter().any(|v| *v != 0.0)
    };
    assert!(!analytic_is_nonzero, "interpolates are detached from the fake batch");
}
