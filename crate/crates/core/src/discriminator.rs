//! Multi-level patch critics with adversarial and attribute heads.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_dim, invalid, Result};
use crate::nn::{module_fields, Conv2d, InstanceNorm2d};
use crate::tensor::{ConvGeom, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiscriminatorConfig {
    pub num_levels: usize,
    /// Input side of level 0; level `i` sees `base_resolution * 2^i`.
    pub base_resolution: usize,
    pub conv_layers: usize,
    pub base_channels: usize,
    pub num_attributes: usize,
}

const WIDTH_MULT: [usize; 6] = [1, 2, 4, 16, 16, 16];

impl DiscriminatorConfig {
    pub fn paper(num_levels: usize, num_attributes: usize) -> Self {
        Self { num_levels, base_resolution: 256, conv_layers: 6, base_channels: 64, num_attributes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 || self.conv_layers == 0 || self.base_channels == 0 || self.num_attributes == 0 {
            return Err(invalid("critic config", "levels, layers, channels and attributes must be positive"));
        }
        if !self.base_resolution.is_power_of_two() || self.base_resolution < 1 << self.conv_layers {
            return Err(invalid("critic base resolution", alloc::format!("{} with {} layers", self.base_resolution, self.conv_layers)));
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.conv_layers).map(|l| WIDTH_MULT[l.min(5)] * self.base_channels).collect()
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        self.base_resolution << level
    }

    /// Side of the finest level, i.e. the full image.
    pub fn input_resolution(&self) -> usize {
        self.level_resolution(self.num_levels - 1)
    }
}

/// Scores for one level: `adv_map` is `[n, 1, 2^i, 2^i]`, `attr_logits`
/// is `[n, C]`.
#[derive(Clone, Debug)]
pub struct CriticOutput<T: Real> {
    pub adv_map: Tensor<T>,
    pub attr_logits: Tensor<T>,
}

#[derive(Clone, Debug)]
struct Block<T: Real> {
    conv: Conv2d<T>,
    norm: InstanceNorm2d<T>,
}
module_fields!(Block { conv, norm });

#[derive(Clone, Debug)]
pub struct Critic<T: Real> {
    backbone: Vec<Block<T>>,
    adv_hidden: Conv2d<T>,
    adv_out: Conv2d<T>,
    att_hidden: Conv2d<T>,
    att_out: Conv2d<T>,
}
module_fields!(Critic { backbone, adv_hidden, adv_out, att_hidden, att_out });

impl<T: Real> Critic<T> {
    fn new<R: Rng + ?Sized>(cfg: &DiscriminatorConfig, rng: &mut R) -> Self {
        let w = cfg.widths();
        let backbone = w
            .iter()
            .enumerate()
            .map(|(i, &wi)| Block {
                conv: Conv2d::new(rng, if i == 0 { 3 } else { w[i - 1] }, wi, ConvGeom::new(4, 2, 1), true),
                norm: InstanceNorm2d::new(wi),
            })
            .collect();
        let last = *w.last().expect("at least one layer");
        let hidden = 16 * cfg.base_channels;
        let one = ConvGeom::new(1, 1, 0);
        Self {
            backbone,
            adv_hidden: Conv2d::new(rng, last, hidden, one, true),
            adv_out: Conv2d::new(rng, hidden, 1, one, true),
            att_hidden: Conv2d::new(rng, last, hidden, one, true),
            att_out: Conv2d::new(rng, hidden, cfg.num_attributes, one, true),
        }
    }

    /// Backbone features before pooling.
    pub fn features(&self, x: &Tensor<T>) -> Tensor<T> {
        let slope = T::of(0.2);
        self.backbone.iter().fold(x.clone(), |h, b| b.norm.forward(&b.conv.forward(&h)).leaky_relu(slope))
    }

    fn heads(&self, f: &Tensor<T>, side: usize) -> CriticOutput<T> {
        let slope = T::of(0.2);
        let pooled = f.adaptive_avg_pool2d(side);
        let adv_map = self.adv_out.forward(&self.adv_hidden.forward(&pooled).leaky_relu(slope));
        let global = if side == 1 { pooled } else { pooled.adaptive_avg_pool2d(1) };
        let logits = self.att_out.forward(&self.att_hidden.forward(&global).leaky_relu(slope));
        let [n, c, _, _] = logits.dims4();
        CriticOutput { adv_map, attr_logits: logits.reshape(&[n, c]) }
    }
}

/// One critic per pyramid level, no weights shared.
#[derive(Clone, Debug)]
pub struct MultiCritic<T: Real> {
    cfg: DiscriminatorConfig,
    levels: Vec<Critic<T>>,
}
module_fields!(MultiCritic { levels });

impl<T: Real> MultiCritic<T> {
    pub fn new<R: Rng + ?Sized>(cfg: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let levels = (0..cfg.num_levels).map(|_| Critic::new(&cfg, rng)).collect();
        Ok(Self { cfg, levels })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn level(&self, i: usize) -> &Critic<T> {
        &self.levels[i]
    }

    pub fn level_mut(&mut self, i: usize) -> &mut Critic<T> {
        &mut self.levels[i]
    }

    /// Scores an image already at level `level`'s resolution.
    pub fn critic_forward(&self, x: &Tensor<T>, level: usize) -> Result<CriticOutput<T>> {
        let crit = self.levels.get(level).ok_or(crate::Error::Index { what: "critic level", index: level, len: self.levels.len() })?;
        let [_, c, h, w] = x.dims4();
        let r = self.cfg.level_resolution(level);
        check_dim("critic input channels", 3, c)?;
        check_dim("critic input height", r, h)?;
        check_dim("critic input width", r, w)?;
        Ok(crit.heads(&crit.features(x), 1 << level))
    }

    /// Pyramid, then each level through its own critic; coarsest first.
    pub fn ensemble_forward(&self, x: &Tensor<T>) -> Result<Vec<CriticOutput<T>>> {
        make_pyramid(x, &self.cfg)?.iter().enumerate().map(|(i, xi)| self.critic_forward(xi, i)).collect()
    }
}

/// `P` images, coarsest first; the last is `image` itself and each coarser
/// one is a 2x2 area average of the next.
pub fn make_pyramid<T: Real>(image: &Tensor<T>, cfg: &DiscriminatorConfig) -> Result<Vec<Tensor<T>>> {
    let [_, _, h, w] = image.dims4();
    check_dim("pyramid input height", cfg.input_resolution(), h)?;
    check_dim("pyramid input width", cfg.input_resolution(), w)?;
    let mut out = Vec::with_capacity(cfg.num_levels);
    out.push(image.clone());
    for _ in 1..cfg.num_levels {
        let next = out.last().expect("non-empty").avg_pool2d(2);
        out.push(next);
    }
    out.reverse();
    Ok(out)
}
