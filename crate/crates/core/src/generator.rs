//! Encoder / selective-transfer / SPADE-decoder editing network.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_dim, invalid, Error, Result};
use crate::image::Image;
use crate::mask::{influence_region, preserved_mask, resize_map, AttDiff, Direction, Filter, PartMaskStack, PreservedMask, RelationMatrices};
use crate::nn::{layer_norm, module_fields, BatchNorm2d, BnStats, Conv2d, ConvTranspose2d, Mode};
use crate::tensor::{ConvGeom, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeneratorConfig {
    pub num_layers: usize,
    pub base_channels: usize,
    pub input_resolution: usize,
    pub use_mask_conditioning: bool,
    pub use_spade: bool,
    pub use_blend: bool,
    pub num_attributes: usize,
}

impl GeneratorConfig {
    /// Full-size layout: six layers, 64 base channels, 256 input.
    pub fn paper(num_attributes: usize) -> Self {
        Self {
            num_layers: 6,
            base_channels: 64,
            input_resolution: 256,
            use_mask_conditioning: true,
            use_spade: true,
            use_blend: false,
            num_attributes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(invalid("generator layers", "need at least 2"));
        }
        if self.base_channels == 0 || self.num_attributes == 0 {
            return Err(invalid("generator config", "base_channels and num_attributes must be positive"));
        }
        if !self.input_resolution.is_power_of_two() || self.input_resolution < 1 << self.num_layers {
            return Err(invalid("input resolution", alloc::format!("{} with {} layers", self.input_resolution, self.num_layers)));
        }
        Ok(())
    }

    /// Encoder widths, doubling from `base_channels` and capped at 16x.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.num_layers).map(|l| (self.base_channels << l).min(16 * self.base_channels)).collect()
    }

    /// Side of the condition tensor consumed by decoder layer `l` (1-based,
    /// `l >= 2`).
    pub fn condition_side(&self, l: usize) -> usize {
        if self.use_spade {
            self.input_resolution >> (l - 1)
        } else {
            self.input_resolution >> l
        }
    }
}

/// Encoder outputs, shallowest first; block `l` has side `input / 2^(l+1)`.
pub type FeaturePyramid<T> = Vec<Tensor<T>>;

/// How skip features cross to the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StuMode {
    #[default]
    Gated,
    /// Skip features pass through unchanged.
    Identity,
}

#[derive(Clone, Debug)]
struct EncLayer<T: Real> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}
module_fields!(EncLayer { conv, bn });

#[derive(Clone, Debug)]
struct Stu<T: Real> {
    up: ConvTranspose2d<T>,
    reset: Conv2d<T>,
    update: Conv2d<T>,
    info: Conv2d<T>,
}
module_fields!(Stu { up, reset, update, info });

#[derive(Clone, Debug)]
struct Spade<T: Real> {
    gamma1: Conv2d<T>,
    gamma2: Conv2d<T>,
    beta1: Conv2d<T>,
    beta2: Conv2d<T>,
    feat: Conv2d<T>,
}
module_fields!(Spade { gamma1, gamma2, beta1, beta2, feat });

impl<T: Real> Spade<T> {
    fn new<R: Rng + ?Sized>(rng: &mut R, d: usize, c: usize) -> Self {
        let g = ConvGeom::new(3, 1, 1);
        Self {
            gamma1: Conv2d::new(rng, d + c, d, g, true),
            gamma2: Conv2d::zeroed(d, d, g),
            beta1: Conv2d::new(rng, d + c, d, g, true),
            beta2: Conv2d::new(rng, d, d, g, true),
            feat: Conv2d::new(rng, d, d, g, true),
        }
    }

    /// `conv(LN(f)) * (1 + γ) + β`, with γ and β predicted from `[f, cond]`.
    fn forward(&self, f: &Tensor<T>, cond: &Tensor<T>) -> Tensor<T> {
        let h = Tensor::cat(&[f.clone(), cond.clone()]);
        let gamma = self.gamma2.forward(&self.gamma1.forward(&h));
        let beta = self.beta2.forward(&self.beta1.forward(&h));
        let x = self.feat.forward(&layer_norm(f));
        x.add(&x.mul(&gamma)).add(&beta)
    }
}

#[derive(Clone, Debug)]
struct DecLayer<T: Real> {
    deconv: ConvTranspose2d<T>,
    spade: Option<Spade<T>>,
    bn: Option<BatchNorm2d<T>>,
}
module_fields!(DecLayer { deconv, spade, bn });

#[derive(Clone, Debug)]
pub struct Generator<T: Real> {
    cfg: GeneratorConfig,
    enc: Vec<EncLayer<T>>,
    stu: Vec<Stu<T>>,
    dec: Vec<DecLayer<T>>,
    pub stu_mode: StuMode,
}
module_fields!(Generator { enc, stu, dec });

const STRIDE2: ConvGeom = ConvGeom { kernel: 4, stride: 2, pad: 1 };

impl<T: Real> Generator<T> {
    pub fn new<R: Rng + ?Sized>(cfg: GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths();
        let l = cfg.num_layers;
        let c = cfg.num_attributes;
        let enc = (0..l)
            .map(|i| {
                let cin = if i == 0 { 3 } else { w[i - 1] };
                EncLayer { conv: Conv2d::new(rng, cin, w[i], STRIDE2, false), bn: BatchNorm2d::new(w[i]) }
            })
            .collect();
        let k3 = ConvGeom::new(3, 1, 1);
        let stu = (0..l - 1)
            .map(|i| Stu {
                up: ConvTranspose2d::new(rng, w[i + 1] + c, w[i], STRIDE2, true),
                reset: Conv2d::new(rng, 2 * w[i], w[i], k3, true),
                update: Conv2d::new(rng, 2 * w[i], w[i], k3, true),
                info: Conv2d::new(rng, 2 * w[i], w[i], k3, true),
            })
            .collect();
        let extra = if cfg.use_spade { 0 } else { c };
        let dec = (0..l)
            .map(|i| {
                let from_below = if i + 1 == l { w[i] } else { w[i + 1] + w[i] };
                let cin = from_below + if i == 0 { 0 } else { extra };
                if i == 0 {
                    return DecLayer { deconv: ConvTranspose2d::new(rng, cin, 3, STRIDE2, true), spade: None, bn: None };
                }
                let (spade, bn) = if cfg.use_spade { (Some(Spade::new(rng, w[i], c)), None) } else { (None, Some(BatchNorm2d::new(w[i]))) };
                DecLayer { deconv: ConvTranspose2d::new(rng, cin, w[i], STRIDE2, false), spade, bn }
            })
            .collect();
        Ok(Self { cfg, enc, stu, dec, stu_mode: StuMode::Gated })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn encode(&self, x: &Tensor<T>, mode: Mode, stats: &mut BnStats<T>) -> Result<FeaturePyramid<T>> {
        let [_, c, h, w] = x.dims4();
        check_dim("image channels", 3, c)?;
        check_dim("image height", self.cfg.input_resolution, h)?;
        check_dim("image width", self.cfg.input_resolution, w)?;
        let mut out = Vec::with_capacity(self.enc.len());
        let mut cur = x.clone();
        for (i, layer) in self.enc.iter().enumerate() {
            let y = layer.conv.forward(&cur);
            let y = match mode {
                Mode::Train => {
                    let (y, s) = layer.bn.forward_train(&y);
                    stats.push((i, s));
                    y
                }
                Mode::Eval => layer.bn.forward_eval(&y),
            };
            cur = y.leaky_relu(T::of(0.2));
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Gated skip features for layers `1..L-1`, shallowest first. The hidden
    /// state starts at the deepest encoder block and moves toward the input,
    /// with `att` tiled onto it at every step.
    pub fn stu_transfer(&self, enc: &[Tensor<T>], att: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let l = self.cfg.num_layers;
        check_dim("pyramid depth", l, enc.len())?;
        let [n, c] = [att.shape()[0], att.shape()[1]];
        check_dim("attribute count", self.cfg.num_attributes, c)?;
        if self.stu_mode == StuMode::Identity {
            return Ok(enc[..l - 1].to_vec());
        }
        let mut out = vec![enc[0].clone(); l - 1];
        let mut state = enc[l - 1].clone();
        for i in (0..l - 1).rev() {
            let [_, _, sh, sw] = state.dims4();
            let tiled = att.reshape(&[n, c, 1, 1]).broadcast_to(&[n, c, sh, sw]);
            let unit = &self.stu[i];
            let s = unit.up.forward(&Tensor::cat(&[state, tiled]));
            let both = Tensor::cat(&[enc[i].clone(), s.clone()]);
            let r = unit.reset.forward(&both).sigmoid();
            let u = unit.update.forward(&both).sigmoid();
            let info = unit.info.forward(&Tensor::cat(&[enc[i].clone(), r.mul(&s)])).tanh();
            let o = s.add(&u.mul(&info.sub(&s)));
            out[i] = o.clone();
            state = o;
        }
        Ok(out)
    }

    /// Runs the decoder from the deepest encoder block. `cond[j]` feeds
    /// decoder layer `j + 2`.
    pub fn decode(&self, deep: &Tensor<T>, transferred: &[Tensor<T>], cond: &[Tensor<T>], mode: Mode, stats: &mut BnStats<T>) -> Result<Tensor<T>> {
        let l = self.cfg.num_layers;
        check_dim("transferred layers", l - 1, transferred.len())?;
        check_dim("condition tensors", l - 1, cond.len())?;
        let mut d = deep.clone();
        for i in (0..l).rev() {
            let mut input = if i + 1 == l { d } else { Tensor::cat(&[d, transferred[i].clone()]) };
            let layer = &self.dec[i];
            if i > 0 && !self.cfg.use_spade {
                input = Tensor::cat(&[input, check_side(&cond[i - 1], self.cfg.condition_side(i + 1))?.clone()]);
            }
            let y = layer.deconv.forward(&input);
            d = if i == 0 {
                y.tanh()
            } else if let Some(sp) = &layer.spade {
                sp.forward(&y, check_side(&cond[i - 1], self.cfg.condition_side(i + 1))?).relu()
            } else {
                let bn = layer.bn.as_ref().expect("non-SPADE layers carry batch norm");
                match mode {
                    Mode::Train => {
                        let (y, s) = bn.forward_train(&y);
                        stats.push((self.enc.len() + i, s));
                        y.relu()
                    }
                    Mode::Eval => bn.forward_eval(&y).relu(),
                }
            };
        }
        Ok(d)
    }

    /// Encodes once and decodes once per conditioning. Each output is blended
    /// with the input when the config asks for it.
    pub fn edit_many(&self, x: &Tensor<T>, conds: &[&Conditioning<T>], mode: Mode, stats: &mut BnStats<T>) -> Result<Vec<Tensor<T>>> {
        let enc = self.encode(x, mode, stats)?;
        let deep = enc.last().expect("at least two layers").clone();
        conds
            .iter()
            .map(|cd| {
                check_dim("batch", x.shape()[0], cd.att.shape()[0])?;
                let trans = self.stu_transfer(&enc, &cd.att)?;
                let maps = cd.condition_tensors();
                let raw = self.decode(&deep, &trans, &maps, mode, stats)?;
                Ok(if self.cfg.use_blend { blend(&raw, x, &cd.preserved)? } else { raw })
            })
            .collect()
    }

    pub fn edit(&self, x: &Tensor<T>, cond: &Conditioning<T>, mode: Mode, stats: &mut BnStats<T>) -> Result<Tensor<T>> {
        Ok(self.edit_many(x, &[cond], mode, stats)?.remove(0))
    }

    /// Folds statistics from a training-mode forward into the running averages.
    pub fn track(&mut self, stats: &BnStats<T>) {
        let ne = self.enc.len();
        for (slot, s) in stats {
            if *slot < ne {
                self.enc[*slot].bn.track(s);
            } else if let Some(bn) = self.dec[*slot - ne].bn.as_mut() {
                bn.track(s);
            }
        }
    }

    /// Parameter names grouped by checkpoint section.
    pub fn section_of(name: &str) -> &'static str {
        match name.split('.').next() {
            Some("enc") => "encoder",
            Some("stu") => "stu",
            _ => "decoder",
        }
    }
}

fn check_side<T: Real>(t: &Tensor<T>, side: usize) -> Result<&Tensor<T>> {
    let [_, _, h, w] = t.dims4();
    check_dim("condition height", side, h)?;
    check_dim("condition width", side, w)?;
    Ok(t)
}

/// `M·input + (1-M)·raw`, with `M` of shape `[n, 1, h, w]`.
pub fn blend<T: Real>(raw: &Tensor<T>, input: &Tensor<T>, preserved: &Tensor<T>) -> Result<Tensor<T>> {
    if raw.shape() != input.shape() {
        return Err(invalid("blend", "raw and input shapes differ"));
    }
    let [n, _, h, w] = raw.dims4();
    if preserved.shape() != [n, 1, h, w] {
        return Err(invalid("blend", "mask shape does not match images"));
    }
    let m = preserved.broadcast_to(raw.shape());
    Ok(m.mul(input).add(&m.scale(T::of(-1.0)).add_scalar(T::one()).mul(raw)))
}

/// [`blend`] on a single image.
pub fn blend_images(raw: &Image, input: &Image, preserved: &PreservedMask) -> Result<Image> {
    raw.same_shape(input)?;
    check_dim("mask height", raw.height, preserved.height)?;
    check_dim("mask width", raw.width, preserved.width)?;
    let n = raw.pixels();
    let data = (0..raw.data.len())
        .map(|k| {
            let m = preserved.map[k % n];
            m * input.data[k] + (1.0 - m) * raw.data[k]
        })
        .collect();
    Image::new(raw.channels, raw.height, raw.width, data)
}

/// Per-attribute spatial condition, `C × h × w`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTensor {
    pub values: Vec<f64>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Maps that multiply each `att_diff` entry: the influence region for the
/// entry's sign when mask-guided, ones otherwise, zero where the entry is 0.
pub fn condition_regions(att_diff: &AttDiff, parts: &PartMaskStack, rel: &RelationMatrices, (h, w): (usize, usize), mask_guided: bool) -> Result<Vec<f64>> {
    check_dim("attribute difference length", rel.attributes(), att_diff.len())?;
    check_dim("relation part count", parts.parts(), rel.parts())?;
    if h == 0 || w == 0 {
        return Err(invalid("condition size", alloc::format!("{h}x{w}")));
    }
    let mut out = vec![0.0; att_diff.len() * h * w];
    for (i, d) in att_diff.values().iter().enumerate() {
        let Some(dir) = Direction::of(*d) else { continue };
        let chunk = &mut out[i * h * w..(i + 1) * h * w];
        if mask_guided {
            let region = influence_region(i, dir, parts, rel)?;
            chunk.copy_from_slice(&resize_map(&region.map, (parts.height(), parts.width()), (h, w), Filter::Bilinear)?);
        } else {
            chunk.fill(1.0);
        }
    }
    Ok(out)
}

/// Channel `i` is `att_diff[i]` times its region map.
pub fn build_condition_tensor(att_diff: &AttDiff, parts: &PartMaskStack, rel: &RelationMatrices, target: (usize, usize), mask_guided: bool) -> Result<ConditionTensor> {
    let mut values = condition_regions(att_diff, parts, rel, target, mask_guided)?;
    let n = target.0 * target.1;
    for (k, v) in values.iter_mut().enumerate() {
        *v *= att_diff.values()[k / n];
    }
    Ok(ConditionTensor { values, channels: att_diff.len(), height: target.0, width: target.1 })
}

/// Everything the generator needs for one batch of edits.
#[derive(Clone, Debug)]
pub struct Conditioning<T: Real> {
    /// `[n, C]` attribute changes; may require grad.
    pub att: Tensor<T>,
    /// Constant region maps per decoder layer `2..=L`, `[n, C, h, w]`.
    pub regions: Vec<Tensor<T>>,
    /// `[n, 1, H, W]` preserved mask at image resolution.
    pub preserved: Tensor<T>,
}

impl<T: Real> Conditioning<T> {
    pub fn new(cfg: &GeneratorConfig, diffs: &[AttDiff], parts: &[&PartMaskStack], rel: &RelationMatrices) -> Result<Self> {
        check_dim("mask stacks", diffs.len(), parts.len())?;
        if diffs.is_empty() {
            return Err(Error::Empty("edit batch"));
        }
        check_dim("attribute count", cfg.num_attributes, rel.attributes())?;
        let n = diffs.len();
        let c = cfg.num_attributes;
        let att = Tensor::from_vec(diffs.iter().flat_map(|d| d.values().iter().map(|v| T::of(*v))).collect(), &[n, c]);
        let mut regions = Vec::with_capacity(cfg.num_layers - 1);
        for l in 2..=cfg.num_layers {
            let s = cfg.condition_side(l);
            let mut data = Vec::with_capacity(n * c * s * s);
            for (d, p) in diffs.iter().zip(parts) {
                data.extend(condition_regions(d, p, rel, (s, s), cfg.use_mask_conditioning)?.into_iter().map(T::of));
            }
            regions.push(Tensor::from_vec(data, &[n, c, s, s]));
        }
        let r = cfg.input_resolution;
        let mut keep = Vec::with_capacity(n * r * r);
        for (d, p) in diffs.iter().zip(parts) {
            let m = preserved_mask(d, p, rel)?;
            let m = if (m.height, m.width) == (r, r) { m } else { m.resized(r, r)? };
            keep.extend(m.map.into_iter().map(T::of));
        }
        Ok(Self { att, regions, preserved: Tensor::from_vec(keep, &[n, 1, r, r]) })
    }

    /// Same maps, different (possibly differentiable) attribute tensor.
    pub fn with_att(&self, att: Tensor<T>) -> Self {
        Self { att, ..self.clone() }
    }

    pub fn condition_tensors(&self) -> Vec<Tensor<T>> {
        let [n, c] = [self.att.shape()[0], self.att.shape()[1]];
        self.regions.iter().map(|r| self.att.reshape(&[n, c, 1, 1]).broadcast_to(r.shape()).mul(r)).collect()
    }
}
