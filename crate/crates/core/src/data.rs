//! Synthetic faces with exact part masks, and edit-target sampling.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, invalid, Error, Result};
use crate::image::Image;
use crate::mask::{AttDiff, PartMaskStack};

pub const SYNTH_ATTRIBUTES: [&str; 6] = ["Bald", "Blond_Hair", "Black_Hair", "Brown_Hair", "Eyeglasses", "Wearing_Hat"];
pub const SYNTH_PARTS: [&str; 5] = ["background", "skin", "hair", "hat", "glasses"];

/// Part name used for the hat subgroup split.
pub const HAT_PART: &str = "hat";
/// A sample wears a hat when the hat covers more than this share of pixels.
pub const HAT_AREA_THRESHOLD: f64 = 0.1;

/// One labelled image with its part masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub att_s: Vec<u8>,
    pub parts: PartMaskStack,
    pub has_hat: bool,
}

/// Subgroup tag from the hat part's area, if the part set has a hat.
pub fn has_hat(parts: &PartMaskStack) -> bool {
    parts.part_index(HAT_PART).is_some_and(|p| parts.area_ratio(p) > HAT_AREA_THRESHOLD)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub resolution: usize,
    /// Subset of [`SYNTH_ATTRIBUTES`], in label order.
    pub attributes: Vec<String>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(resolution: usize, seed: u64) -> Self {
        Self { resolution, attributes: SYNTH_ATTRIBUTES.iter().map(|s| String::from(*s)).collect(), seed }
    }

    fn columns(&self) -> Result<Vec<usize>> {
        if self.attributes.is_empty() {
            return Err(Error::Empty("attribute subset"));
        }
        if self.resolution == 0 {
            return Err(invalid("resolution", "must be positive"));
        }
        self.attributes
            .iter()
            .map(|a| SYNTH_ATTRIBUTES.iter().position(|s| s == a).ok_or_else(|| invalid("synthetic attribute", a.clone())))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum HairColor {
    Blond,
    Black,
    Brown,
}

/// Everything random about one face.
#[derive(Clone, Copy, Debug)]
struct Face {
    cx: f64,
    cy: f64,
    ra: f64,
    rb: f64,
    bald: bool,
    hair: HairColor,
    glasses: bool,
    hat: bool,
    background: [f64; 3],
    skin: [f64; 3],
    hair_rgb: [f64; 3],
    hat_rgb: [f64; 3],
    frame_rgb: [f64; 3],
}

const BACKGROUNDS: [[f64; 3]; 4] = [[0.70, 0.80, 0.90], [0.80, 0.80, 0.80], [0.70, 0.85, 0.70], [0.85, 0.80, 0.90]];
const SKINS: [[f64; 3]; 3] = [[0.96, 0.80, 0.68], [0.85, 0.65, 0.50], [0.62, 0.44, 0.32]];
const HATS: [[f64; 3]; 4] = [[0.75, 0.15, 0.15], [0.15, 0.25, 0.70], [0.15, 0.55, 0.20], [0.50, 0.20, 0.60]];
const FRAMES: [[f64; 3]; 3] = [[0.10, 0.10, 0.12], [0.35, 0.20, 0.10], [0.55, 0.55, 0.60]];

fn pick<R: Rng>(rng: &mut R, palette: &[[f64; 3]], amount: f64) -> [f64; 3] {
    let base = palette[rng.random_range(0..palette.len())];
    jitter(rng, base, amount)
}

fn jitter<R: Rng>(rng: &mut R, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

impl Face {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        let hair = match rng.random_range(0..3) {
            0 => HairColor::Blond,
            1 => HairColor::Black,
            _ => HairColor::Brown,
        };
        let hair_base = match hair {
            HairColor::Blond => [0.92, 0.80, 0.42],
            HairColor::Black => [0.08, 0.07, 0.07],
            HairColor::Brown => [0.45, 0.27, 0.12],
        };
        Self {
            cx: 0.5 + rng.random_range(-0.03..=0.03),
            cy: 0.56 + rng.random_range(-0.02..=0.02),
            ra: 0.25 + rng.random_range(-0.015..=0.015),
            rb: 0.32 + rng.random_range(-0.015..=0.015),
            bald: rng.random_bool(0.5),
            hair,
            glasses: rng.random_bool(0.5),
            hat: rng.random_bool(0.5),
            background: pick(rng, &BACKGROUNDS, 0.05),
            skin: pick(rng, &SKINS, 0.03),
            hair_rgb: jitter(rng, hair_base, 0.04),
            hat_rgb: pick(rng, &HATS, 0.05),
            frame_rgb: pick(rng, &FRAMES, 0.03),
        }
    }

    fn labels(&self) -> [u8; 6] {
        let h = |c: HairColor| matches!((self.hair, c), (HairColor::Blond, HairColor::Blond) | (HairColor::Black, HairColor::Black) | (HairColor::Brown, HairColor::Brown));
        [
            self.bald as u8,
            h(HairColor::Blond) as u8,
            h(HairColor::Black) as u8,
            h(HairColor::Brown) as u8,
            self.glasses as u8,
            self.hat as u8,
        ]
    }

    /// Topmost part and colour at normalized point `(u, v)`, `v` downward.
    fn shade(&self, u: f64, v: f64) -> (usize, [f64; 3]) {
        let dx = u - self.cx;
        let dy = v - self.cy;
        let head = (dx / self.ra) * (dx / self.ra) + (dy / self.rb) * (dy / self.rb);
        let (ha, hb) = (self.ra + 0.07, self.rb + 0.07);
        let outer = (dx / ha) * (dx / ha) + (dy / hb) * (dy / hb);

        let brim_bottom = self.cy - self.rb + 0.015;
        let brim_top = brim_bottom - 0.06;
        let crown_top = brim_top - 0.16;
        if self.hat && ((v >= brim_top && v <= brim_bottom && dx.abs() <= 0.35) || (v >= crown_top && v < brim_top && dx.abs() <= 0.24)) {
            return (3, self.hat_rgb);
        }

        let ey = self.cy + 0.02;
        if self.glasses {
            for ex in [self.cx - 0.1, self.cx + 0.1] {
                let r = libm::sqrt((u - ex) * (u - ex) + (v - ey) * (v - ey));
                if (r - 0.065).abs() <= 0.009 {
                    return (4, self.frame_rgb);
                }
            }
            if (v - ey).abs() <= 0.008 && dx.abs() <= 0.036 {
                return (4, self.frame_rgb);
            }
        }

        let side = dx.abs() > 0.62 * self.ra;
        if head <= 1.0 {
            if !self.bald && dy < -0.6 * self.rb {
                return (2, self.hair_rgb);
            }
            for ex in [self.cx - 0.1, self.cx + 0.1] {
                if (u - ex) * (u - ex) + (v - ey) * (v - ey) <= 0.025 * 0.025 {
                    return (1, [0.12, 0.10, 0.10]);
                }
            }
            let my = self.cy + 0.18;
            if (dx / 0.07) * (dx / 0.07) + ((v - my) / 0.02) * ((v - my) / 0.02) <= 1.0 {
                return (1, [0.70, 0.25, 0.25]);
            }
            return (1, self.skin);
        }
        if outer <= 1.0 && dy < 0.08 && (!self.bald || side) {
            return (2, self.hair_rgb);
        }
        (0, self.background)
    }
}

const SUPERSAMPLE: usize = 4;

/// Draws sample `index` of the stream defined by `spec.seed`. Any index can
/// be produced independently of the others.
pub fn synth_sample(spec: &SynthSpec, index: u64) -> Result<Sample> {
    let cols = spec.columns()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let face = Face::draw(&mut rng);
    let r = spec.resolution;
    let n = r * r;
    let mut rgb = vec![0.0; 3 * n];
    let mut probs = vec![0.0; SYNTH_PARTS.len() * n];
    let w = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..r {
        for x in 0..r {
            let px = y * r + x;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = (x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / r as f64;
                    let v = (y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / r as f64;
                    let (part, col) = face.shade(u, v);
                    probs[part * n + px] += w;
                    for c in 0..3 {
                        rgb[c * n + px] += w * col[c];
                    }
                }
            }
        }
    }
    let names: Arc<[String]> = SYNTH_PARTS.iter().map(|s| String::from(*s)).collect::<Vec<_>>().into();
    let parts = PartMaskStack::normalized(probs, names, r, r)?;
    let image = Image::new(3, r, r, rgb.into_iter().map(|v| 2.0 * v - 1.0).collect())?;
    let all = face.labels();
    let hat = has_hat(&parts);
    Ok(Sample { image, att_s: cols.iter().map(|c| all[*c]).collect(), parts, has_hat: hat })
}

/// Samples `0..n` of the stream.
pub fn synth_generate(spec: &SynthSpec, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Empty("sample count"));
    }
    (0..n as u64).map(|i| synth_sample(spec, i)).collect()
}

/// How to pick target attributes for a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    /// Targets are the source labels of a random permutation of the batch.
    TrainShuffle,
    /// Flip only attribute `i`.
    EvalFlip(usize),
}

/// Targets and the corresponding attribute changes.
#[derive(Clone, Debug, PartialEq)]
pub struct EditTargets {
    pub att_t: Vec<Vec<u8>>,
    pub diffs: Vec<AttDiff>,
}

pub fn sample_edit_targets<R: Rng + ?Sized>(att_s: &[Vec<u8>], mode: TargetMode, rng: &mut R) -> Result<EditTargets> {
    let first = att_s.first().ok_or(Error::Empty("batch"))?;
    let c = first.len();
    for a in att_s {
        check_dim("attribute vector", c, a.len())?;
    }
    let att_t: Vec<Vec<u8>> = match mode {
        TargetMode::TrainShuffle => {
            let mut order: Vec<usize> = (0..att_s.len()).collect();
            order.shuffle(rng);
            order.into_iter().map(|j| att_s[j].clone()).collect()
        }
        TargetMode::EvalFlip(i) => {
            if i >= c {
                return Err(Error::Index { what: "attribute", index: i, len: c });
            }
            att_s
                .iter()
                .map(|a| {
                    let mut t = a.clone();
                    t[i] = 1 - t[i].min(1);
                    t
                })
                .collect()
        }
    };
    let diffs = att_s.iter().zip(&att_t).map(|(s, t)| AttDiff::between(s, t)).collect::<Result<Vec<_>>>()?;
    Ok(EditTargets { att_t, diffs })
}

#[cfg(test)]
mod tests;
