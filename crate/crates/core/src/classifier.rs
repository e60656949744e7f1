//! Independent attribute classifier used to judge edits. Its pooled
//! penultimate activations double as the embedding for FID.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_dim, invalid, Result};
use crate::image::{to_tensor, Image};
use crate::losses::bce_with_logits;
use crate::nn::{module_fields, Adam, BatchNorm2d, BnStats, Conv2d, Mode};
use crate::tensor::{ConvGeom, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassifierConfig {
    pub resolution: usize,
    pub num_layers: usize,
    pub base_channels: usize,
    pub num_attributes: usize,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.base_channels == 0 || self.num_attributes == 0 {
            return Err(invalid("classifier config", "layers, channels and attributes must be positive"));
        }
        if self.resolution >> self.num_layers == 0 {
            return Err(invalid("classifier config", "too many layers for the resolution"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.base_channels << (self.num_layers - 1)
    }
}

#[derive(Clone, Debug)]
struct Block<T: Real> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}
module_fields!(Block { conv, bn });

#[derive(Clone, Debug)]
pub struct AttributeClassifier<T: Real> {
    cfg: ClassifierConfig,
    blocks: Vec<Block<T>>,
    head: Conv2d<T>,
}
module_fields!(AttributeClassifier { blocks, head });

impl<T: Real> AttributeClassifier<T> {
    pub fn new<R: Rng + ?Sized>(cfg: ClassifierConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut cin = 3;
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let cout = cfg.base_channels << l;
            blocks.push(Block { conv: Conv2d::new(rng, cin, cout, ConvGeom::new(4, 2, 1), false), bn: BatchNorm2d::new(cout) });
            cin = cout;
        }
        let head = Conv2d::new(rng, cin, cfg.num_attributes, ConvGeom::new(1, 1, 0), true);
        Ok(Self { cfg, blocks, head })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    /// `(features [n, F], logits [n, C])`.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, stats: &mut BnStats<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let [n, c, h, w] = x.dims4();
        check_dim("classifier channels", 3, c)?;
        check_dim("classifier height", self.cfg.resolution, h)?;
        check_dim("classifier width", self.cfg.resolution, w)?;
        let mut f = x.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            let y = b.conv.forward(&f);
            let y = match mode {
                Mode::Train => {
                    let (y, s) = b.bn.forward_train(&y);
                    stats.push((i, s));
                    y
                }
                Mode::Eval => b.bn.forward_eval(&y),
            };
            f = y.leaky_relu(T::of(0.2));
        }
        let pooled = f.adaptive_avg_pool2d(1);
        let logits = self.head.forward(&pooled).reshape(&[n, self.cfg.num_attributes]);
        Ok((pooled.reshape(&[n, self.cfg.feature_dim()]), logits))
    }

    /// One optimizer step on binary cross-entropy; returns the loss.
    pub fn train_step(&mut self, x: &Tensor<T>, labels: &[Vec<u8>], opt: &mut Adam<T>) -> Result<f64> {
        let mut stats = BnStats::new();
        let (_, logits) = self.forward(x, Mode::Train, &mut stats)?;
        let y = Tensor::from_vec(labels.iter().flatten().map(|v| T::of(*v as f64)).collect(), logits.shape());
        check_dim("label count", logits.numel(), y.numel())?;
        let loss = bce_with_logits(&logits, &y)?;
        let grads = loss.backward();
        opt.step(self, &grads);
        for (i, s) in &stats {
            self.blocks[*i].bn.track(s);
        }
        Ok(loss.item().as_f64())
    }

    /// Thresholded predictions at logit 0.
    pub fn predict(&self, images: &[Image]) -> Result<Vec<Vec<u8>>> {
        let (_, logits) = self.eval(images)?;
        let c = self.cfg.num_attributes;
        Ok(logits.data().chunks(c).map(|row| row.iter().map(|v| u8::from(*v > T::zero())).collect()).collect())
    }

    /// Pooled penultimate features per image.
    pub fn embed(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let (f, _) = self.eval(images)?;
        Ok(f.data().chunks(self.cfg.feature_dim()).map(|row| row.iter().map(|v| v.as_f64()).collect()).collect())
    }

    fn eval(&self, images: &[Image]) -> Result<(Tensor<T>, Tensor<T>)> {
        let refs: Vec<&Image> = images.iter().collect();
        let x = to_tensor::<T>(&refs)?.detach();
        self.forward(&x, Mode::Eval, &mut BnStats::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::nn::Module;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ClassifierConfig {
        ClassifierConfig { resolution: 16, num_layers: 2, base_channels: 4, num_attributes: 6 }
    }

    #[test]
    fn shapes_and_parameter_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clf = AttributeClassifier::<f64>::new(cfg(), &mut rng).unwrap();
        let imgs: Vec<Image> = synth_generate(&SynthSpec::new(16, 0), 3).unwrap().into_iter().map(|s| s.image).collect();
        assert_eq!(clf.embed(&imgs).unwrap()[0].len(), 8);
        assert_eq!(clf.predict(&imgs).unwrap()[2].len(), 6);
        let names: Vec<_> = clf.state().into_iter().map(|(n, ..)| n).collect();
        assert!(names.contains(&alloc::string::String::from("blocks.1.conv.weight")));
        assert!(names.contains(&alloc::string::String::from("head.bias")));
    }

    #[test]
    fn training_lowers_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut clf = AttributeClassifier::<f64>::new(cfg(), &mut rng).unwrap();
        let samples = synth_generate(&SynthSpec::new(16, 2), 16).unwrap();
        let refs: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let x = to_tensor::<f64>(&refs).unwrap();
        let labels: Vec<Vec<u8>> = samples.iter().map(|s| s.att_s.clone()).collect();
        let mut opt = Adam::new(1e-2, (0.9, 0.999));
        let first = clf.train_step(&x, &labels, &mut opt).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = clf.train_step(&x, &labels, &mut opt).unwrap();
        }
        assert!(last < 0.7 * first, "{first} -> {last}");
    }

    #[test]
    fn rejects_wrong_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clf = AttributeClassifier::<f64>::new(cfg(), &mut rng).unwrap();
        assert!(clf.predict(&[Image::filled(3, 8, 8, 0.0)]).is_err());
    }
}
