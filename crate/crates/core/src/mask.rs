//! Relation aggregation, preserved masks, influence regions and the
//! mask-aware reconstruction error.
//!
//! All maps are row-major `f64` buffers. Part stacks are channel-major.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_dim, invalid, Error, Result};
use crate::image::Image;

/// Tolerance on the per-pixel sum of a part stack.
pub const PART_SUM_TOL: f64 = 1e-4;

/// Per-pixel part probabilities, `parts × height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartMaskStack {
    probs: Vec<f64>,
    height: usize,
    width: usize,
    part_names: Arc<[String]>,
}

impl PartMaskStack {
    pub fn new(probs: Vec<f64>, part_names: Arc<[String]>, height: usize, width: usize) -> Result<Self> {
        check_dim("part stack buffer", part_names.len() * height * width, probs.len())?;
        if part_names.is_empty() {
            return Err(Error::Empty("part list"));
        }
        let n = height * width;
        for (i, v) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(invalid("part probability", alloc::format!("{v} at flat index {i}")));
            }
        }
        for px in 0..n {
            let s: f64 = (0..part_names.len()).map(|p| probs[p * n + px]).sum();
            if (s - 1.0).abs() > PART_SUM_TOL {
                return Err(invalid("part stack", alloc::format!("pixel {px} sums to {s}")));
            }
        }
        Ok(Self { probs, height, width, part_names })
    }

    /// Clamps to `[0, 1]` and divides each pixel by its channel sum. Pixels
    /// with zero total mass become uniform.
    pub fn normalized(mut probs: Vec<f64>, part_names: Arc<[String]>, height: usize, width: usize) -> Result<Self> {
        check_dim("part stack buffer", part_names.len() * height * width, probs.len())?;
        if part_names.is_empty() {
            return Err(Error::Empty("part list"));
        }
        renormalize(&mut probs, part_names.len(), height * width);
        Ok(Self { probs, height, width, part_names })
    }

    pub fn parts(&self) -> usize {
        self.part_names.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn part_names(&self) -> &Arc<[String]> {
        &self.part_names
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn channel(&self, p: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.probs[p * n..(p + 1) * n]
    }

    pub fn part_index(&self, name: &str) -> Option<usize> {
        self.part_names.iter().position(|n| n == name)
    }

    /// Mean probability of one part over the image.
    pub fn area_ratio(&self, p: usize) -> f64 {
        let ch = self.channel(p);
        ch.iter().sum::<f64>() / ch.len() as f64
    }

    /// Resizes every channel, then renormalizes per pixel.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let mut out = Vec::with_capacity(self.parts() * height * width);
        for p in 0..self.parts() {
            out.extend(resize_map(self.channel(p), (self.height, self.width), (height, width), Filter::Bilinear)?);
        }
        renormalize(&mut out, self.parts(), height * width);
        Ok(Self { probs: out, height, width, part_names: self.part_names.clone() })
    }
}

fn renormalize(probs: &mut [f64], parts: usize, n: usize) {
    for v in probs.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    for px in 0..n {
        let s: f64 = (0..parts).map(|p| probs[p * n + px]).sum();
        for p in 0..parts {
            let v = &mut probs[p * n + px];
            *v = if s > 0.0 { *v / s } else { 1.0 / parts as f64 };
        }
    }
}

/// Binary attribute-to-part tables for strengthening (`plus`) and weakening
/// (`minus`) edits, each `attributes × parts`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationMatrices {
    ar_plus: Vec<u8>,
    ar_minus: Vec<u8>,
    attribute_names: Vec<String>,
    part_names: Vec<String>,
}

impl RelationMatrices {
    pub fn new(attribute_names: Vec<String>, part_names: Vec<String>, ar_plus: Vec<u8>, ar_minus: Vec<u8>) -> Result<Self> {
        let cells = attribute_names.len() * part_names.len();
        check_dim("AR+ cells", cells, ar_plus.len())?;
        check_dim("AR- cells", cells, ar_minus.len())?;
        if let Some(v) = ar_plus.iter().chain(&ar_minus).find(|v| **v > 1) {
            return Err(invalid("relation entry", alloc::format!("{v} is not 0 or 1")));
        }
        Ok(Self { ar_plus, ar_minus, attribute_names, part_names })
    }

    /// Builds tables from `(attribute, strengthen parts, weaken parts)` rows.
    pub fn from_lists(parts: &[&str], rows: &[(&str, &[&str], &[&str])]) -> Result<Self> {
        let p = parts.len();
        let mut plus = vec![0u8; rows.len() * p];
        let mut minus = vec![0u8; rows.len() * p];
        for (i, (_, sp, wk)) in rows.iter().enumerate() {
            for (list, grid) in [(sp, &mut plus), (wk, &mut minus)] {
                for name in list.iter() {
                    let j = parts.iter().position(|q| q == name).ok_or_else(|| invalid("part name", *name))?;
                    grid[i * p + j] = 1;
                }
            }
        }
        Self::new(
            rows.iter().map(|r| String::from(r.0)).collect(),
            parts.iter().map(|s| String::from(*s)).collect(),
            plus,
            minus,
        )
    }

    /// Tables for the synthetic part set
    /// `background, skin, hair, hat, glasses`.
    pub fn synthetic_default() -> Self {
        const PARTS: [&str; 5] = ["background", "skin", "hair", "hat", "glasses"];
        Self::from_lists(
            &PARTS,
            &[
                ("Bald", &["hair"], &["background", "skin"]),
                ("Blond_Hair", &["hair"], &["hair"]),
                ("Black_Hair", &["hair"], &["hair"]),
                ("Brown_Hair", &["hair"], &["hair"]),
                ("Eyeglasses", &["skin"], &["glasses"]),
                ("Wearing_Hat", &["background", "skin", "hair"], &["hat"]),
            ],
        )
        .expect("static tables are well formed")
    }

    pub fn attributes(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn parts(&self) -> usize {
        self.part_names.len()
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn part_names(&self) -> &[String] {
        &self.part_names
    }

    pub fn plus(&self, attr: usize, part: usize) -> u8 {
        self.ar_plus[attr * self.parts() + part]
    }

    pub fn minus(&self, attr: usize, part: usize) -> u8 {
        self.ar_minus[attr * self.parts() + part]
    }

    /// Restricts to the named attributes, in the given order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let p = self.parts();
        let mut plus = Vec::with_capacity(names.len() * p);
        let mut minus = Vec::with_capacity(names.len() * p);
        for n in names {
            let i = self.attribute_names.iter().position(|a| a == n).ok_or_else(|| invalid("attribute name", n.clone()))?;
            plus.extend_from_slice(&self.ar_plus[i * p..(i + 1) * p]);
            minus.extend_from_slice(&self.ar_minus[i * p..(i + 1) * p]);
        }
        Self::new(names.to_vec(), self.part_names.clone(), plus, minus)
    }
}

/// Requested attribute change, entries in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttDiff(Vec<f64>);

impl AttDiff {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.abs() <= 1.0)) {
            return Err(invalid("attribute difference", alloc::format!("{v} outside [-1, 1]")));
        }
        Ok(Self(values))
    }

    pub fn zeros(c: usize) -> Self {
        Self(vec![0.0; c])
    }

    /// `value` at position `i`, zeros elsewhere.
    pub fn one_hot(c: usize, i: usize, value: f64) -> Result<Self> {
        if i >= c {
            return Err(Error::Index { what: "attribute", index: i, len: c });
        }
        let mut v = vec![0.0; c];
        v[i] = value;
        Self::new(v)
    }

    /// `target - source` for binary vectors.
    pub fn between(source: &[u8], target: &[u8]) -> Result<Self> {
        check_dim("attribute vector", source.len(), target.len())?;
        Self::new(source.iter().zip(target).map(|(s, t)| f64::from(*t) - f64::from(*s)).collect())
    }

    /// Flip of attribute `i` for a binary source vector: `1 - 2 * att_s[i]`.
    pub fn flip(source: &[u8], i: usize) -> Result<Self> {
        let s = *source.get(i).ok_or(Error::Index { what: "attribute", index: i, len: source.len() })?;
        Self::one_hot(source.len(), i, 1.0 - 2.0 * f64::from(s.min(1)))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|v| -v).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Strengthen,
    Weaken,
}

impl Direction {
    /// Direction of a signed change; `None` for zero.
    pub fn of(v: f64) -> Option<Self> {
        if v > 0.0 {
            Some(Self::Strengthen)
        } else if v < 0.0 {
            Some(Self::Weaken)
        } else {
            None
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Self::Strengthen => 1.0,
            Self::Weaken => -1.0,
        }
    }
}

/// Probability that each pixel must stay unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct PreservedMask {
    pub map: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

/// Pixels an attribute change is allowed to touch.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceRegion {
    pub map: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub attribute_index: usize,
    pub direction: Direction,
}

/// Parts possibly affected by `att_diff`:
/// `min(1, [d > 0]ᵀ AR⁺ + [d < 0]ᵀ AR⁻)`.
pub fn compute_ar_star(att_diff: &AttDiff, rel: &RelationMatrices) -> Result<Vec<f64>> {
    check_dim("attribute difference length", rel.attributes(), att_diff.len())?;
    let mut out = vec![0.0; rel.parts()];
    for (i, d) in att_diff.values().iter().enumerate() {
        let row = match Direction::of(*d) {
            Some(Direction::Strengthen) => &rel.ar_plus,
            Some(Direction::Weaken) => &rel.ar_minus,
            None => continue,
        };
        for (p, o) in out.iter_mut().enumerate() {
            *o += f64::from(row[i * rel.parts() + p]);
        }
    }
    for o in &mut out {
        *o = o.min(1.0);
    }
    Ok(out)
}

/// `1 - Σ_p parts[p] · AR*[p]` per pixel, clamped to `[0, 1]`.
pub fn preserved_mask(att_diff: &AttDiff, parts: &PartMaskStack, rel: &RelationMatrices) -> Result<PreservedMask> {
    check_dim("relation part count", parts.parts(), rel.parts())?;
    let ar = compute_ar_star(att_diff, rel)?;
    Ok(PreservedMask { map: preserved_from_ar(&ar, parts), height: parts.height, width: parts.width })
}

fn preserved_from_ar(ar: &[f64], parts: &PartMaskStack) -> Vec<f64> {
    let n = parts.height * parts.width;
    let mut edit = vec![0.0; n];
    for (p, a) in ar.iter().enumerate() {
        if *a == 0.0 {
            continue;
        }
        for (e, m) in edit.iter_mut().zip(parts.channel(p)) {
            *e += m * a;
        }
    }
    edit.into_iter().map(|e| (1.0 - e).clamp(0.0, 1.0)).collect()
}

/// Complement of the preserved mask for a one-hot change of attribute `attr`.
pub fn influence_region(attr: usize, direction: Direction, parts: &PartMaskStack, rel: &RelationMatrices) -> Result<InfluenceRegion> {
    let d = AttDiff::one_hot(rel.attributes(), attr, direction.sign())?;
    let keep = preserved_mask(&d, parts, rel)?;
    Ok(InfluenceRegion {
        map: keep.map.into_iter().map(|m| 1.0 - m).collect(),
        height: parts.height,
        width: parts.width,
        attribute_index: attr,
        direction,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Filter {
    #[default]
    Bilinear,
    Nearest,
}

/// Resamples a single `h × w` map with pixel-centre alignment.
pub fn resize_map(map: &[f64], (h, w): (usize, usize), (th, tw): (usize, usize), filter: Filter) -> Result<Vec<f64>> {
    check_dim("map buffer", h * w, map.len())?;
    if th == 0 || tw == 0 {
        return Err(invalid("resize target", alloc::format!("{th}x{tw}")));
    }
    if (h, w) == (th, tw) {
        return Ok(map.to_vec());
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut out = Vec::with_capacity(th * tw);
    match filter {
        Filter::Nearest => {
            for y in 0..th {
                let iy = (((y as f64 + 0.5) * sy) as usize).min(h - 1);
                for x in 0..tw {
                    let ix = (((x as f64 + 0.5) * sx) as usize).min(w - 1);
                    out.push(map[iy * w + ix]);
                }
            }
        }
        Filter::Bilinear => {
            let taps = |o: usize, scale: f64, len: usize| {
                let c = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (libm::floor(c) as usize).min(len - 1);
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, c - i0 as f64)
            };
            for y in 0..th {
                let (y0, y1, fy) = taps(y, sy, h);
                for x in 0..tw {
                    let (x0, x1, fx) = taps(x, sx, w);
                    let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
                    let bot = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Ok(out)
}

impl PreservedMask {
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        let map = resize_map(&self.map, (self.height, self.width), (height, width), Filter::Bilinear)?;
        Ok(Self { map: map.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(), height, width })
    }
}

/// `Σ_{c,h,w} (1 - influence[h,w]) · |output - input|`, the per-attribute
/// term of the mask-aware reconstruction error before normalization.
pub fn masked_l1(input: &Image, output: &Image, influence: &[f64]) -> Result<f64> {
    input.same_shape(output)?;
    check_dim("influence map", input.pixels(), influence.len())?;
    let mut acc = 0.0;
    for c in 0..input.channels {
        for ((a, b), m) in input.channel(c).iter().zip(output.channel(c)).zip(influence) {
            acc += (1.0 - m) * (b - a).abs();
        }
    }
    Ok(acc)
}

/// One evaluation item for [`mre_metric`].
#[derive(Clone, Copy, Debug)]
pub struct MreItem<'a> {
    pub image: &'a Image,
    pub attributes: &'a [u8],
    pub parts: &'a PartMaskStack,
}

/// Mean over images of `1/(H·W·C) Σ_i ‖(1 - M_i)·(G(x, ±e_i) - x)‖₁`, flipping
/// each attribute in turn. `edit` receives the image, the `C` one-hot changes
/// and the part masks, and returns one output per change.
pub fn mre_metric<F>(mut edit: F, items: &[MreItem<'_>], rel: &RelationMatrices) -> Result<f64>
where
    F: FnMut(&Image, &[AttDiff], &PartMaskStack) -> Result<Vec<Image>>,
{
    if items.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let c = rel.attributes();
    let mut total = 0.0;
    for item in items {
        check_dim("attribute vector", c, item.attributes.len())?;
        let diffs = (0..c).map(|i| AttDiff::flip(item.attributes, i)).collect::<Result<Vec<_>>>()?;
        let outs = edit(item.image, &diffs, item.parts)?;
        check_dim("edited images", c, outs.len())?;
        let mut sum = 0.0;
        for (i, (d, out)) in diffs.iter().zip(&outs).enumerate() {
            let dir = Direction::of(d.values()[i]).expect("flip is never zero");
            let region = influence_region(i, dir, item.parts, rel)?;
            sum += masked_l1(item.image, out, &region.map)?;
        }
        total += sum / (item.image.pixels() * c) as f64;
    }
    Ok(total / items.len() as f64)
}

#[cfg(test)]
mod tests;
