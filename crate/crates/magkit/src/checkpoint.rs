//! Checkpoint files.
//!
//! Layout: `b"MAGKITCK"`, a little-endian `u64` header length, a JSON header,
//! then every tensor's values as little-endian `f32` in header order. The
//! header holds the training config, the step, the tensor index grouped into
//! `encoder`, `stu`, `decoder`, `discriminator` and the two optimizers'
//! moment buffers. Writing is deterministic, so save, load and save again
//! produce identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use magkit_core::classifier::{AttributeClassifier, ClassifierConfig};
use magkit_core::generator::Generator;
use magkit_core::nn::{Adam, Module};
use magkit_core::pipeline::{TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

use crate::error::{io, parse, Error, Result};

const MAGIC: &[u8; 8] = b"MAGKITCK";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerInfo {
    step: u64,
    /// Parameter names; each owns a first- and second-moment buffer.
    moments: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: u32,
    config: TrainConfig,
    step: u64,
    encoder: Vec<TensorInfo>,
    stu: Vec<TensorInfo>,
    decoder: Vec<TensorInfo>,
    discriminator: Vec<TensorInfo>,
    optimizer_g: OptimizerInfo,
    optimizer_d: OptimizerInfo,
}

type Entries = Vec<(String, Vec<usize>, Vec<f32>)>;

fn entries<M: Module<f32>>(m: &M) -> Entries {
    m.state().into_iter().map(|(n, _, s, v)| (n, s, v)).collect()
}

fn infos(e: &[(String, Vec<usize>, Vec<f32>)]) -> Vec<TensorInfo> {
    e.iter().map(|(n, s, _)| TensorInfo { name: n.clone(), shape: s.clone() }).collect()
}

fn opt_info(opt: &Adam<f32>, shapes: &BTreeMap<String, Vec<usize>>) -> OptimizerInfo {
    OptimizerInfo {
        step: opt.step,
        moments: opt.moments.keys().map(|n| TensorInfo { name: n.clone(), shape: shapes.get(n).cloned().unwrap_or_else(|| vec![opt.moments[n].0.len()]) }).collect(),
    }
}

fn push(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(cfg: &TrainConfig, state: &TrainState<f32>) -> Vec<u8> {
    let gen = entries(&state.generator);
    let disc = entries(&state.critic);
    let section = |s: &str| -> Entries { gen.iter().filter(|(n, ..)| Generator::<f32>::section_of(n) == s).cloned().collect() };
    let (enc, stu, dec) = (section("encoder"), section("stu"), section("decoder"));
    let g_shapes: BTreeMap<String, Vec<usize>> = gen.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect();
    let d_shapes: BTreeMap<String, Vec<usize>> = disc.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect();
    let header = Header {
        format: FORMAT,
        config: cfg.clone(),
        step: state.step,
        encoder: infos(&enc),
        stu: infos(&stu),
        decoder: infos(&dec),
        discriminator: infos(&disc),
        optimizer_g: opt_info(&state.opt_g, &g_shapes),
        optimizer_d: opt_info(&state.opt_d, &d_shapes),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, v) in enc.iter().chain(&stu).chain(&dec).chain(&disc) {
        push(&mut out, v);
    }
    for opt in [&state.opt_g, &state.opt_d] {
        for (m, v) in opt.moments.values() {
            push(&mut out, m);
            push(&mut out, v);
        }
    }
    out
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn floats(&mut self, n: usize) -> Option<Vec<f32>> {
        let bytes = self.data.get(self.pos..self.pos + 4 * n)?;
        self.pos += 4 * n;
        Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

/// The stored config and state.
pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<(TrainConfig, TrainState<f32>)> {
    let bad = |d: String| parse(origin, None, d);
    if bytes.get(..8) != Some(MAGIC.as_slice()) {
        return Err(bad("not a checkpoint".into()));
    }
    let len = bytes.get(8..16).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize).ok_or_else(|| bad("truncated".into()))?;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(format!("format {} is not supported", header.format)));
    }
    let mut cur = Cursor { data: bytes, pos: 16 + len };
    let mut read = |infos: &[TensorInfo]| -> Result<Entries> {
        infos
            .iter()
            .map(|t| {
                let n = t.shape.iter().product();
                let v = cur.floats(n).ok_or_else(|| bad(format!("truncated at tensor {}", t.name)))?;
                Ok((t.name.clone(), t.shape.clone(), v))
            })
            .collect()
    };
    let mut gen = read(&header.encoder)?;
    gen.extend(read(&header.stu)?);
    gen.extend(read(&header.decoder)?);
    let disc = read(&header.discriminator)?;
    let mut moments = |info: &OptimizerInfo| -> Result<BTreeMap<String, (Vec<f32>, Vec<f32>)>> {
        info.moments
            .iter()
            .map(|t| {
                let n = t.shape.iter().product();
                let m = cur.floats(n).ok_or_else(|| bad(format!("truncated at moments of {}", t.name)))?;
                let v = cur.floats(n).ok_or_else(|| bad(format!("truncated at moments of {}", t.name)))?;
                Ok((t.name.clone(), (m, v)))
            })
            .collect()
    };
    let mg = moments(&header.optimizer_g)?;
    let md = moments(&header.optimizer_d)?;
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes".into()));
    }
    let cfg = header.config;
    let mut state = TrainState::<f32>::new(&cfg)?;
    state.generator.load_state(&gen)?;
    state.critic.load_state(&disc)?;
    state.opt_g.moments = mg;
    state.opt_g.step = header.optimizer_g.step;
    state.opt_d.moments = md;
    state.opt_d.step = header.optimizer_d.step;
    state.step = header.step;
    Ok((cfg, state))
}

pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, state: &TrainState<f32>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(cfg, state)).map_err(io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState<f32>)> {
    let bytes = std::fs::read(path).map_err(io(path))?;
    decode_checkpoint(&bytes, path)
}

/// Loads a checkpoint to continue training under `cfg`; fails listing every
/// field that would change the network layout.
pub fn resume(path: &Path, cfg: &TrainConfig) -> Result<TrainState<f32>> {
    let (stored, state) = load_checkpoint(path)?;
    let bad = stored.incompatible_fields(cfg);
    if !bad.is_empty() {
        return Err(Error::Incompatible(bad.into_iter().map(String::from).collect()));
    }
    Ok(state)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierHeader {
    config: ClassifierConfig,
    tensors: Vec<TensorInfo>,
}

const CLASSIFIER_MAGIC: &[u8; 8] = b"MAGKITCL";

/// Classifier weights in the same container style as checkpoints.
pub fn save_classifier(path: &Path, clf: &AttributeClassifier<f32>) -> Result<()> {
    let e = entries(clf);
    let json = serde_json::to_vec(&ClassifierHeader { config: clf.config().clone(), tensors: infos(&e) }).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CLASSIFIER_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, v) in &e {
        push(&mut out, v);
    }
    std::fs::write(path, out).map_err(io(path))
}

pub fn load_classifier(path: &Path) -> Result<AttributeClassifier<f32>> {
    let bytes = std::fs::read(path).map_err(io(path))?;
    let bad = |d: &str| parse(path, None, d.to_string());
    if bytes.get(..8) != Some(CLASSIFIER_MAGIC.as_slice()) {
        return Err(bad("not a classifier file"));
    }
    let len = bytes.get(8..16).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize).ok_or_else(|| bad("truncated"))?;
    let header: ClassifierHeader =
        serde_json::from_slice(bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?).map_err(|e| parse(path, None, e.to_string()))?;
    let mut cur = Cursor { data: &bytes, pos: 16 + len };
    let e = header
        .tensors
        .iter()
        .map(|t| Ok((t.name.clone(), t.shape.clone(), cur.floats(t.shape.iter().product()).ok_or_else(|| bad("truncated tensor data"))?)))
        .collect::<Result<Entries>>()?;
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut clf = AttributeClassifier::new(header.config, &mut rng)?;
    clf.load_state(&e)?;
    Ok(clf)
}
