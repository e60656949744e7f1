//! Image-quality and editing metrics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, invalid, Error, Result};
use crate::image::Image;
use crate::mask::{masked_l1, influence_region, AttDiff, Direction, PartMaskStack, RelationMatrices};

/// Reported PSNR when the two images are identical.
pub const PSNR_SATURATION: f64 = 99.0;

/// Value range of images in `[-1, 1]`.
pub const SIGNED_RANGE: f64 = 2.0;

/// Neumaier-compensated sum; keeps aggregates independent of chunking.
pub fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if libm::fabs(sum) >= libm::fabs(v) {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn stable_mean(values: &[f64]) -> f64 {
    stable_sum(values.iter().copied()) / values.len() as f64
}

/// `10 log10(max² / MSE)`, or [`PSNR_SATURATION`] when the MSE is zero.
pub fn psnr(a: &Image, b: &Image, max_value: f64) -> Result<f64> {
    a.same_shape(b)?;
    if !(max_value > 0.0) {
        return Err(invalid("psnr peak", "must be positive"));
    }
    let mse = stable_sum(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y))) / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_SATURATION);
    }
    Ok(10.0 * libm::log10(max_value * max_value / mse))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl SsimConstants {
    /// `c1 = (0.01 L)²`, `c2 = (0.03 L)²` for value range `L`.
    pub fn for_range(l: f64) -> Self {
        Self { c1: (0.01 * l) * (0.01 * l), c2: (0.03 * l) * (0.03 * l) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SsimMode {
    /// Statistics over the whole channel.
    #[default]
    Global,
    /// 11x11 Gaussian windows with sigma 1.5, valid positions only.
    Windowed,
}

fn ssim_term(ma: f64, mb: f64, va: f64, vb: f64, cov: f64, k: SsimConstants) -> f64 {
    ((2.0 * ma * mb + k.c1) * (2.0 * cov + k.c2)) / ((ma * ma + mb * mb + k.c1) * (va + vb + k.c2))
}

/// Mean over channels of the structural similarity index.
pub fn ssim(a: &Image, b: &Image, k: SsimConstants, mode: SsimMode) -> Result<f64> {
    a.same_shape(b)?;
    let per_channel: Vec<f64> = (0..a.channels)
        .map(|c| match mode {
            SsimMode::Global => global_ssim(a.channel(c), b.channel(c), k),
            SsimMode::Windowed => windowed_ssim(a.channel(c), b.channel(c), a.height, a.width, k),
        })
        .collect();
    Ok(stable_mean(&per_channel))
}

fn global_ssim(x: &[f64], y: &[f64], k: SsimConstants) -> f64 {
    let n = x.len() as f64;
    let mx = stable_sum(x.iter().copied()) / n;
    let my = stable_sum(y.iter().copied()) / n;
    let vx = stable_sum(x.iter().map(|v| (v - mx) * (v - mx))) / n;
    let vy = stable_sum(y.iter().map(|v| (v - my) * (v - my))) / n;
    let cov = stable_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my))) / n;
    ssim_term(mx, my, vx, vy, cov, k)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| libm::exp(-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma))).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn windowed_ssim(x: &[f64], y: &[f64], h: usize, w: usize, k: SsimConstants) -> f64 {
    let size = 11.min(h).min(w);
    let g = gaussian_window(size, 1.5);
    let mut vals = Vec::with_capacity((h - size + 1) * (w - size + 1));
    for oy in 0..=h - size {
        for ox in 0..=w - size {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let wt = g[i] * g[j];
                    let a = x[(oy + i) * w + ox + j];
                    let b = y[(oy + i) * w + ox + j];
                    mx += wt * a;
                    my += wt * b;
                    xx += wt * a * a;
                    yy += wt * b * b;
                    xy += wt * a * b;
                }
            }
            vals.push(ssim_term(mx, my, xx - mx * mx, yy - my * my, xy - mx * my, k));
        }
    }
    stable_mean(&vals)
}

/// Diagonal loading applied to both covariances.
pub const FID_EPS: f64 = 1e-6;

/// Sample mean and unbiased covariance of row vectors.
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if features.len() < 2 {
        return Err(invalid("feature set", "need at least 2 samples"));
    }
    let d = features[0].len();
    for f in features {
        check_dim("feature dimension", d, f.len())?;
    }
    let n = features.len() as f64;
    let mu = DVector::from_fn(d, |i, _| stable_sum(features.iter().map(|f| f[i])) / n);
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v = stable_sum(features.iter().map(|f| (f[i] - mu[i]) * (f[j] - mu[j]))) / (n - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mu, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let vals = e.eigenvalues.map(|v| libm::sqrt(v.max(0.0)));
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// `‖μ1 - μ2‖² + Tr(Σ1 + Σ2 - 2 (Σ1 Σ2)^{1/2})`. The trace of the root is
/// taken as the sum of root eigenvalues of `S Σ2 S` with `S = Σ1^{1/2}`,
/// clipping negative eigenvalues to zero.
pub fn fid_from_stats(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    check_dim("mean dimension", mu1.len(), mu2.len())?;
    let d = mu1.len();
    let eye = DMatrix::<f64>::identity(d, d) * FID_EPS;
    let s1 = s1 + &eye;
    let s2 = s2 + &eye;
    let root = sqrt_psd(&s1);
    let mut inner = &root * &s2 * &root;
    inner = (&inner + inner.transpose()) * 0.5;
    let tr_root = stable_sum(SymmetricEigen::new(inner).eigenvalues.iter().map(|v| libm::sqrt(v.max(0.0))));
    let diff = mu1 - mu2;
    let value = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_root;
    Ok(value.max(0.0))
}

/// Frechet distance between Gaussian fits of two feature sets.
pub fn fid(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = gaussian_fit(real)?;
    let (m2, s2) = gaussian_fit(fake)?;
    fid_from_stats(&m1, &s1, &m2, &s2)
}

/// One labelled test image.
#[derive(Clone, Copy, Debug)]
pub struct EvalItem<'a> {
    pub image: &'a Image,
    pub attributes: &'a [u8],
    pub parts: &'a PartMaskStack,
}

/// Splits items by whether part `part` covers more than `threshold` of the
/// image.
pub fn split_by_area<'a>(items: &[EvalItem<'a>], part: usize, threshold: f64) -> (Vec<EvalItem<'a>>, Vec<EvalItem<'a>>) {
    items.iter().partition(|it| it.parts.area_ratio(part) > threshold)
}

/// Per-attribute success of single-attribute flips as judged by `classify`.
pub fn editing_accuracy<E, C>(mut edit: E, mut classify: C, items: &[EvalItem<'_>]) -> Result<Vec<f64>>
where
    E: FnMut(&Image, &[AttDiff], &PartMaskStack) -> Result<Vec<Image>>,
    C: FnMut(&[Image]) -> Result<Vec<Vec<u8>>>,
{
    let first = items.first().ok_or(Error::Empty("dataset"))?;
    let c = first.attributes.len();
    let mut hits = vec![0usize; c];
    for it in items {
        check_dim("attribute vector", c, it.attributes.len())?;
        let diffs = (0..c).map(|i| AttDiff::flip(it.attributes, i)).collect::<Result<Vec<_>>>()?;
        let outs = edit(it.image, &diffs, it.parts)?;
        let preds = classify(&outs)?;
        check_dim("predictions", c, preds.len())?;
        for i in 0..c {
            if preds[i][i] == 1 - it.attributes[i].min(1) {
                hits[i] += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / items.len() as f64).collect())
}

/// Aggregate numbers for one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub subgroup: String,
    pub samples: usize,
    pub mre: f64,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub attribute_names: Vec<String>,
    pub per_attribute_accuracy: Vec<f64>,
    pub avg_accuracy: f64,
    pub fid: Option<f64>,
    pub fid_embedder: Option<String>,
}

impl EvalReport {
    /// Flat `(key, value)` pairs in a fixed order.
    pub fn key_values(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            (String::from("subgroup"), self.subgroup.clone()),
            (String::from("samples"), alloc::format!("{}", self.samples)),
            (String::from("MRE"), alloc::format!("{:.6}", self.mre)),
            (String::from("FID"), self.fid.map_or_else(|| String::from("NA"), |v| alloc::format!("{v:.6}"))),
            (String::from("FID_embedder"), self.fid_embedder.clone().unwrap_or_else(|| String::from("none"))),
            (String::from("Avg_Acc"), alloc::format!("{:.6}", self.avg_accuracy)),
            (String::from("PSNR"), alloc::format!("{:.6}", self.psnr_mean)),
            (String::from("SSIM"), alloc::format!("{:.6}", self.ssim_mean)),
        ];
        for (n, a) in self.attribute_names.iter().zip(&self.per_attribute_accuracy) {
            kv.push((alloc::format!("acc_{n}"), alloc::format!("{a:.6}")));
        }
        kv
    }
}

/// Evaluation callbacks. `edit` returns one output per requested change;
/// `classify` returns binary predictions per image; `embed`, when present,
/// maps images to feature vectors for FID.
pub struct Evaluator<'r, E, C> {
    pub edit: E,
    pub classify: C,
    pub embed: Option<(String, &'r mut dyn FnMut(&[Image]) -> Result<Vec<Vec<f64>>>)>,
    pub rel: &'r RelationMatrices,
    pub ssim_mode: SsimMode,
}

impl<E, C> Evaluator<'_, E, C>
where
    E: FnMut(&Image, &[AttDiff], &PartMaskStack) -> Result<Vec<Image>>,
    C: FnMut(&[Image]) -> Result<Vec<Vec<u8>>>,
{
    /// Runs every single-attribute flip plus the zero edit for each item, and
    /// reports MRE, accuracy and FID over the flips and PSNR/SSIM over the
    /// reconstructions.
    pub fn run(&mut self, subgroup: &str, items: &[EvalItem<'_>]) -> Result<EvalReport> {
        if items.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let c = self.rel.attributes();
        let k = SsimConstants::for_range(SIGNED_RANGE);
        let mut hits = vec![0usize; c];
        let (mut mres, mut psnrs, mut ssims) = (Vec::new(), Vec::new(), Vec::new());
        let (mut real_feats, mut fake_feats) = (Vec::new(), Vec::new());
        for it in items {
            check_dim("attribute vector", c, it.attributes.len())?;
            let mut diffs = (0..c).map(|i| AttDiff::flip(it.attributes, i)).collect::<Result<Vec<_>>>()?;
            diffs.push(AttDiff::zeros(c));
            let mut outs = (self.edit)(it.image, &diffs, it.parts)?;
            check_dim("edited images", c + 1, outs.len())?;
            let rec = outs.pop().expect("reconstruction requested");
            psnrs.push(psnr(it.image, &rec, SIGNED_RANGE)?);
            ssims.push(ssim(it.image, &rec, k, self.ssim_mode)?);
            let mut err = 0.0;
            for (i, out) in outs.iter().enumerate() {
                let dir = Direction::of(diffs[i].values()[i]).expect("flip is never zero");
                err += masked_l1(it.image, out, &influence_region(i, dir, it.parts, self.rel)?.map)?;
            }
            mres.push(err / (it.image.pixels() * c) as f64);
            let preds = (self.classify)(&outs)?;
            for i in 0..c {
                if preds[i][i] == 1 - it.attributes[i].min(1) {
                    hits[i] += 1;
                }
            }
            if let Some((_, embed)) = self.embed.as_mut() {
                real_feats.extend(embed(core::slice::from_ref(it.image))?);
                fake_feats.extend(embed(&outs)?);
            }
        }
        let acc: Vec<f64> = hits.into_iter().map(|h| h as f64 / items.len() as f64).collect();
        let fid_value = match &self.embed {
            Some(_) if real_feats.len() >= 2 => Some(fid(&real_feats, &fake_feats)?),
            _ => None,
        };
        Ok(EvalReport {
            subgroup: String::from(subgroup),
            samples: items.len(),
            mre: stable_mean(&mres),
            psnr_mean: stable_mean(&psnrs),
            ssim_mean: stable_mean(&ssims),
            attribute_names: self.rel.attribute_names().to_vec(),
            avg_accuracy: stable_mean(&acc),
            per_attribute_accuracy: acc,
            fid: fid_value,
            fid_embedder: self.embed.as_ref().map(|(n, _)| n.clone()),
        })
    }
}

#[cfg(test)]
mod tests;
