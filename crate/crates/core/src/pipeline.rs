//! Training configuration, state and the single optimization step.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_edit_targets, Sample, TargetMode};
use crate::discriminator::{make_pyramid, DiscriminatorConfig, MultiCritic};
use crate::error::{invalid, Error, Result};
use crate::generator::{Conditioning, Generator, GeneratorConfig};
use crate::image::{from_tensor, to_tensor, Image};
use crate::losses::{
    loss_d_adv, loss_d_att, loss_g_cls, loss_g_cycle, loss_g_gan, loss_g_mre, loss_g_rec, patch_score, total_d, total_g, GParts,
    LossWeights,
};
use crate::mask::{AttDiff, PartMaskStack, RelationMatrices};
use crate::nn::{Adam, BnStats, Mode};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    /// Side of the coarsest critic level. Images are
    /// `resolution << (num_levels - 1)` pixels wide.
    pub resolution: usize,
    pub num_levels: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub critic_steps: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub use_mask_loss: bool,
    pub use_mask_conditioning: bool,
    pub use_spade: bool,
    pub use_blend: bool,
    pub g_layers: usize,
    pub g_channels: usize,
    pub d_layers: usize,
    pub d_channels: usize,
    /// Attribute names in label order.
    pub attributes: Vec<String>,
    /// Dataset directory; `None` trains on synthetic faces.
    pub data_dir: Option<String>,
    /// Synthetic training set size; ignored for directory datasets.
    pub train_samples: usize,
    /// Held-out samples per evaluation. Directory datasets hold out their
    /// last entries.
    pub eval_samples: usize,
    /// Steps between evaluations and checkpoints; 0 disables both.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            num_levels: 1,
            batch_size: 16,
            total_steps: 20_000,
            critic_steps: 5,
            lr_g: 1e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            seed: 0,
            use_mask_loss: true,
            use_mask_conditioning: true,
            use_spade: true,
            use_blend: false,
            g_layers: 5,
            g_channels: 16,
            d_layers: 4,
            d_channels: 16,
            attributes: crate::data::SYNTH_ATTRIBUTES.iter().map(|s| String::from(*s)).collect(),
            data_dir: None,
            train_samples: 20_000,
            eval_samples: 500,
            eval_every: 1000,
        }
    }
}

/// Named ablation layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Uniform conditioning, no mask loss, plain normalization.
    Baseline,
    /// Baseline plus the mask-guided reconstruction loss.
    BaselineMaskLoss,
    /// Mask conditioning with SPADE, no mask loss.
    NoMaskLoss,
    /// Mask loss and mask conditioning concatenated without SPADE.
    NoSpade,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::BaselineMaskLoss, Variant::NoMaskLoss, Variant::NoSpade, Variant::Full];

    /// `(use_mask_loss, use_mask_conditioning, use_spade)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false),
            Variant::BaselineMaskLoss => (true, false, false),
            Variant::NoMaskLoss => (false, true, true),
            Variant::NoSpade => (true, true, false),
            Variant::Full => (true, true, true),
        }
    }

    pub fn of(cfg: &TrainConfig) -> Option<Variant> {
        let f = (cfg.use_mask_loss, cfg.use_mask_conditioning, cfg.use_spade);
        Variant::ALL.into_iter().find(|v| v.flags() == f)
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        (cfg.use_mask_loss, cfg.use_mask_conditioning, cfg.use_spade) = self.flags();
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(invalid("learning rates", "must be positive"));
        }
        if self.total_steps == 0 || self.critic_steps == 0 || self.batch_size == 0 {
            return Err(invalid("train config", "steps, critic_steps and batch_size must be at least 1"));
        }
        if self.attributes.is_empty() {
            return Err(Error::Empty("attribute set"));
        }
        self.weights.validate()?;
        self.generator().validate()?;
        self.discriminator().validate()
    }

    pub fn image_side(&self) -> usize {
        self.resolution << (self.num_levels.max(1) - 1)
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            num_layers: self.g_layers,
            base_channels: self.g_channels,
            input_resolution: self.image_side(),
            use_mask_conditioning: self.use_mask_conditioning,
            use_spade: self.use_spade,
            use_blend: self.use_blend,
            num_attributes: self.attributes.len(),
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            num_levels: self.num_levels,
            base_resolution: self.resolution,
            conv_layers: self.d_layers,
            base_channels: self.d_channels,
            num_attributes: self.attributes.len(),
        }
    }

    /// Loss weights with the mask term removed when the mask loss is off.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.clone();
        if !self.use_mask_loss {
            w.lambda3 = 0.0;
        }
        w
    }

    /// Field names whose values differ and that change parameter shapes or
    /// the meaning of the weights.
    pub fn incompatible_fields(&self, other: &TrainConfig) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut check = |name, same: bool| {
            if !same {
                out.push(name);
            }
        };
        check("resolution", self.resolution == other.resolution);
        check("num_levels", self.num_levels == other.num_levels);
        check("use_mask_conditioning", self.use_mask_conditioning == other.use_mask_conditioning);
        check("use_spade", self.use_spade == other.use_spade);
        check("g_layers", self.g_layers == other.g_layers);
        check("g_channels", self.g_channels == other.g_channels);
        check("d_layers", self.d_layers == other.d_layers);
        check("d_channels", self.d_channels == other.d_channels);
        check("attributes", self.attributes == other.attributes);
        out
    }
}

/// One training batch with per-sample labels and part masks.
#[derive(Clone, Debug)]
pub struct Batch<T: Real> {
    pub images: Tensor<T>,
    pub att_s: Vec<Vec<u8>>,
    pub parts: Vec<PartMaskStack>,
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        Ok(Self {
            images: to_tensor(&images)?,
            att_s: samples.iter().map(|s| s.att_s.clone()).collect(),
            parts: samples.iter().map(|s| s.parts.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.att_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.att_s.is_empty()
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState<T: Real> {
    pub generator: Generator<T>,
    pub critic: MultiCritic<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub step: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = Generator::new(cfg.generator(), &mut rng)?;
        let critic = MultiCritic::new(cfg.discriminator(), &mut rng)?;
        Ok(Self {
            generator,
            critic,
            opt_g: Adam::new(cfg.lr_g, (cfg.beta1, cfg.beta2)),
            opt_d: Adam::new(cfg.lr_d, (cfg.beta1, cfg.beta2)),
            step: 0,
        })
    }
}

/// Per-step scalar losses. `d_*` come from the last critic update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub d_adv: f64,
    pub d_att: f64,
    pub gp: f64,
    pub g_gan: f64,
    pub g_rec: f64,
    pub g_cls: f64,
    pub g_mre: f64,
    pub g_total: f64,
    pub d_total: f64,
}

impl LossRecord {
    pub const KEYS: [&'static str; 9] = ["d_adv", "d_att", "gp", "g_gan", "g_rec", "g_cls", "g_mre", "g_total", "d_total"];

    pub fn entries(&self) -> [(&'static str, f64); 9] {
        let v = [self.d_adv, self.d_att, self.gp, self.g_gan, self.g_rec, self.g_cls, self.g_mre, self.g_total, self.d_total];
        let mut out = [("", 0.0); 9];
        for (o, (k, v)) in out.iter_mut().zip(Self::KEYS.into_iter().zip(v)) {
            *o = (k, v);
        }
        out
    }

    fn check(&self, step: u64) -> Result<()> {
        match self.entries().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((k, _)) => Err(Error::NonFinite { name: String::from(k), step }),
            None => Ok(()),
        }
    }
}

/// Generator for the randomness of step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

fn labels<T: Real>(rows: &[Vec<u8>]) -> Tensor<T> {
    let c = rows[0].len();
    Tensor::from_vec(rows.iter().flatten().map(|v| T::of(*v as f64)).collect(), &[rows.len(), c])
}

fn scalar<T: Real>(t: &Tensor<T>) -> f64 {
    t.item().as_f64()
}

/// Critic updates followed by one generator update. Returns the losses, or
/// [`Error::NonFinite`] naming the first bad term; the state is left
/// untouched by the update that produced it.
pub fn train_step<T: Real>(cfg: &TrainConfig, state: &mut TrainState<T>, batch: &Batch<T>, rel: &RelationMatrices) -> Result<LossRecord> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let step = state.step;
    let mut rng = step_rng(cfg.seed, step);
    let targets = sample_edit_targets(&batch.att_s, TargetMode::TrainShuffle, &mut rng)?;
    let gcfg = state.generator.config().clone();
    let dcfg = state.critic.config().clone();
    let parts: Vec<&PartMaskStack> = batch.parts.iter().collect();
    let cond = Conditioning::<T>::new(&gcfg, &targets.diffs, &parts, rel)?;
    let zeros = vec![AttDiff::zeros(cfg.attributes.len()); batch.len()];
    let cond_rec = Conditioning::<T>::new(&gcfg, &zeros, &parts, rel)?;
    let x = &batch.images;
    let att_s: Tensor<T> = labels(&batch.att_s);
    let att_t: Tensor<T> = labels(&targets.att_t);
    let n = batch.len();
    let levels = dcfg.num_levels;

    // The generator is fixed during the critic updates, so one fake batch
    // serves all of them.
    let fake = state.generator.edit(x, &cond, Mode::Train, &mut BnStats::new())?.detach();
    let real_pyr = make_pyramid(x, &dcfg)?;
    let fake_pyr = make_pyramid(&fake, &dcfg)?;
    let mut rec = LossRecord::default();
    for _ in 0..cfg.critic_steps {
        let t: Vec<T> = (0..n).map(|_| T::of(rng.random::<f64>())).collect();
        let mut per_level = Vec::with_capacity(levels);
        let (mut adv, mut att, mut gp) = (0.0, 0.0, 0.0);
        for l in 0..levels {
            let critic = &state.critic;
            let score = |img: &Tensor<T>| patch_score(&critic.critic_forward(img, l).expect("pyramid level shape").adv_map);
            let a = loss_d_adv(score, &real_pyr[l], &fake_pyr[l], cfg.weights.gp_lambda, &t)?;
            let logits = critic.critic_forward(&real_pyr[l], l)?.attr_logits;
            let la = loss_d_att(&logits, &att_s)?;
            adv += scalar(&a.wasserstein);
            gp += scalar(&a.gp);
            att += scalar(&la);
            per_level.push(a.total().add(&la));
        }
        let d_total = total_d(&per_level)?;
        let k = levels as f64;
        rec.d_adv = adv / k;
        rec.d_att = att / k;
        rec.gp = gp / k;
        rec.d_total = scalar(&d_total);
        rec.check(step)?;
        let grads = d_total.backward();
        state.opt_d.step(&mut state.critic, &grads);
    }

    let mut stats = BnStats::new();
    let conds = [&cond, &cond_rec];
    let cycle_on = cfg.weights.cycle_weight < 1.0;
    let outs = state.generator.edit_many(x, &conds, Mode::Train, &mut stats)?;
    let (x_hat, x_rec) = (&outs[0], &outs[1]);
    let cycle = if cycle_on {
        let back: Vec<AttDiff> = targets.diffs.iter().map(AttDiff::negated).collect();
        let cond_back = Conditioning::<T>::new(&gcfg, &back, &parts, rel)?;
        let x_cyc = state.generator.edit(x_hat, &cond_back, Mode::Train, &mut stats)?;
        Some(loss_g_cycle(x, &x_cyc)?)
    } else {
        None
    };
    let outputs = state.critic.ensemble_forward(x_hat)?;
    let maps: Vec<Tensor<T>> = outputs.iter().map(|o| o.adv_map.clone()).collect();
    let gan = loss_g_gan(&maps)?;
    let mut cls = Tensor::scalar(T::zero());
    for o in &outputs {
        cls = cls.add(&loss_g_cls(&o.attr_logits, &att_t)?);
    }
    let cls = cls.scale(T::of(1.0 / levels as f64));
    let parts_g = GParts {
        gan,
        rec: loss_g_rec(x, x_rec)?,
        cls,
        mre: loss_g_mre(x, x_hat, &cond.preserved)?,
        cycle,
    };
    let g_total = total_g(&parts_g, &cfg.effective_weights());
    rec.g_gan = scalar(&parts_g.gan);
    rec.g_rec = scalar(&parts_g.rec);
    rec.g_cls = scalar(&parts_g.cls);
    rec.g_mre = scalar(&parts_g.mre);
    rec.g_total = scalar(&g_total);
    rec.check(step)?;
    let grads = g_total.backward();
    state.opt_g.step(&mut state.generator, &grads);
    state.generator.track(&stats);
    state.step += 1;
    Ok(rec)
}

/// Eval-mode edits of one image, one output per entry of `diffs`.
pub fn edit_image<T: Real>(generator: &Generator<T>, image: &Image, diffs: &[AttDiff], parts: &PartMaskStack, rel: &RelationMatrices) -> Result<Vec<Image>> {
    let x = to_tensor::<T>(&[image])?;
    let cfg = generator.config();
    let conds = diffs.iter().map(|d| Conditioning::new(cfg, core::slice::from_ref(d), &[parts], rel)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Conditioning<T>> = conds.iter().collect();
    let outs = generator.edit_many(&x, &refs, Mode::Eval, &mut BnStats::new())?;
    Ok(outs.iter().flat_map(|t| from_tensor(&t.detach())).collect())
}
