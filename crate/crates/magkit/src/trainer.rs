//! The training loop with periodic evaluation and checkpoints, and the
//! evaluation pass shared with the `eval` command.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use magkit_core::classifier::{AttributeClassifier, ClassifierConfig};
use magkit_core::data::{Sample, SynthSpec};
use magkit_core::generator::Generator;
use magkit_core::image::to_tensor;
use magkit_core::mask::{AttDiff, PartMaskStack, RelationMatrices};
use magkit_core::metrics::{EvalItem, EvalReport, Evaluator, SsimMode};
use magkit_core::nn::Adam;
use magkit_core::pipeline::{edit_image, step_rng, train_step, Batch, LossRecord, TrainConfig, TrainState};
use magkit_core::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_classifier, resume, save_checkpoint, save_classifier};
use crate::dataset::{DirDataset, SampleSource, SynthSource, RELATIONS_FILE, SYNTH_CLASSIFIER_SEED, SYNTH_EVAL_SEED, SYNTH_TRAIN_SEED};
use crate::error::{io, Error, Result};
use crate::imageio::{grid, write_png};
use crate::relations::read_relations;

pub const LOSS_FILE: &str = "losses.tsv";
pub const CURVE_FILE: &str = "metrics.tsv";
pub const CLASSIFIER_FILE: &str = "classifier.bin";
pub const LATEST: &str = "latest.ckpt";
/// Name recorded for FID computed on classifier features.
pub const EMBEDDER: &str = "attribute-classifier-pooled";

/// Stream salt separating batch sampling from the step's training randomness.
const DATA_SALT: u64 = 0x6461_7461;

pub type Source = Box<dyn SampleSource>;

/// Training split, evaluation split and relation table for a config.
pub fn sources(cfg: &TrainConfig) -> Result<(Source, Source, RelationMatrices)> {
    let side = cfg.image_side();
    match &cfg.data_dir {
        Some(dir) => {
            let root = Path::new(dir);
            let all = DirDataset::open_root(root, &cfg.attributes, side)?;
            let hold = cfg.eval_samples.min(all.len() / 2);
            let train = all.slice(0, all.len() - hold);
            let eval = all.slice(all.len() - hold, hold);
            let rel = read_relations(&root.join(RELATIONS_FILE))?.select(&cfg.attributes)?;
            Ok((Box::new(train), Box::new(eval), rel))
        }
        None => {
            let spec = |seed| SynthSpec { resolution: side, attributes: cfg.attributes.clone(), seed };
            let rel = RelationMatrices::synthetic_default().select(&cfg.attributes)?;
            Ok((
                Box::new(SynthSource { spec: spec(SYNTH_TRAIN_SEED), count: cfg.train_samples }),
                Box::new(SynthSource { spec: spec(SYNTH_EVAL_SEED), count: cfg.eval_samples }),
                rel,
            ))
        }
    }
}

/// Samples for step `step`, drawn uniformly with replacement.
pub fn batch_for_step(cfg: &TrainConfig, source: &dyn SampleSource, step: u64) -> Result<Vec<Sample>> {
    if source.is_empty() {
        return Err(magkit_core::Error::Empty("training set").into());
    }
    let mut rng = step_rng(cfg.seed ^ DATA_SALT, step);
    (0..cfg.batch_size).map(|_| source.get(rng.random_range(0..source.len()))).collect()
}

#[derive(Clone, Debug)]
pub struct ClassifierFit {
    pub classifier: AttributeClassifier<f32>,
    /// Per-label accuracy on the held-out samples.
    pub heldout_accuracy: f64,
}

/// Classifier sized for `side` pixel inputs: stride-2 blocks down to 4x4.
pub fn classifier_config(side: usize, attributes: usize) -> ClassifierConfig {
    let layers = (side.trailing_zeros() as usize).saturating_sub(2).max(1);
    ClassifierConfig { resolution: side, num_layers: layers, base_channels: 8, num_attributes: attributes }
}

/// Fits the evaluation classifier on `train` and scores it on `heldout`.
pub fn fit_classifier(cfg: ClassifierConfig, train: &dyn SampleSource, heldout: &dyn SampleSource, steps: usize, seed: u64) -> Result<ClassifierFit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clf = AttributeClassifier::new(cfg, &mut rng)?;
    let mut opt = Adam::new(2e-3, (0.9, 0.999));
    for step in 0..steps {
        let samples = (0..32).map(|_| train.get(rng.random_range(0..train.len()))).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let labels: Vec<Vec<u8>> = samples.iter().map(|s| s.att_s.clone()).collect();
        let loss = clf.train_step(&to_tensor(&refs)?, &labels, &mut opt)?;
        if step % 100 == 0 {
            log::debug!("classifier step {step} loss {loss:.4}");
        }
    }
    let heldout_accuracy = classifier_accuracy(&clf, heldout)?;
    Ok(ClassifierFit { classifier: clf, heldout_accuracy })
}

pub fn classifier_accuracy(clf: &AttributeClassifier<f32>, data: &dyn SampleSource) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for start in (0..data.len()).step_by(64) {
        let samples = (start..(start + 64).min(data.len())).map(|i| data.get(i)).collect::<Result<Vec<_>>>()?;
        let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
        for (p, s) in clf.predict(&images)?.iter().zip(&samples) {
            right += p.iter().zip(&s.att_s).filter(|(a, b)| a == b).count();
            total += p.len();
        }
    }
    Ok(right as f64 / total.max(1) as f64)
}

/// The classifier for `cfg`'s data: loaded from `path` when it exists,
/// otherwise fitted and saved there.
pub fn obtain_classifier(cfg: &TrainConfig, path: &Path) -> Result<AttributeClassifier<f32>> {
    if path.is_file() {
        return load_classifier(path);
    }
    let ccfg = classifier_config(cfg.image_side(), cfg.attributes.len());
    let (train, eval, _) = sources(cfg)?;
    let fit = if cfg.data_dir.is_none() {
        let spec = SynthSpec { resolution: cfg.image_side(), attributes: cfg.attributes.clone(), seed: SYNTH_CLASSIFIER_SEED };
        fit_classifier(ccfg, &SynthSource { spec, count: 20_000 }, eval.as_ref(), 600, cfg.seed)?
    } else {
        fit_classifier(ccfg, train.as_ref(), eval.as_ref(), 600, cfg.seed)?
    };
    log::info!("evaluation classifier held-out accuracy {:.4}", fit.heldout_accuracy);
    save_classifier(path, &fit.classifier)?;
    Ok(fit.classifier)
}

/// Evaluation rows: `all`, then `hat` and `no_hat` when `split` is set and
/// both groups are non-empty.
pub fn evaluate(generator: &Generator<f32>, data: &dyn SampleSource, rel: &RelationMatrices, clf: &AttributeClassifier<f32>, split: bool) -> Result<Vec<EvalReport>> {
    let samples = (0..data.len()).map(|i| data.get(i)).collect::<Result<Vec<_>>>()?;
    let run = |name: &str, group: Vec<&Sample>| -> Result<EvalReport> {
        let items: Vec<EvalItem> = group.iter().map(|s| EvalItem { image: &s.image, attributes: &s.att_s, parts: &s.parts }).collect();
        let mut embed = |imgs: &[Image]| clf.embed(imgs);
        let mut ev = Evaluator {
            edit: |img: &Image, d: &[AttDiff], p: &PartMaskStack| edit_image(generator, img, d, p, rel),
            classify: |imgs: &[Image]| clf.predict(imgs),
            embed: Some((String::from(EMBEDDER), &mut embed)),
            rel,
            ssim_mode: SsimMode::Windowed,
        };
        Ok(ev.run(name, &items)?)
    };
    let mut out = vec![run("all", samples.iter().collect())?];
    if split {
        let (hat, bare): (Vec<&Sample>, Vec<&Sample>) = samples.iter().partition(|s| s.has_hat);
        for (name, g) in [("hat", hat), ("no_hat", bare)] {
            if !g.is_empty() {
                out.push(run(name, g)?);
            }
        }
    }
    Ok(out)
}

/// Tab-separated `key\tvalue` lines.
pub fn report_text(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    for r in reports {
        for (k, v) in r.key_values() {
            s.push_str(&format!("{k}\t{v}\n"));
        }
        s.push('\n');
    }
    s
}

fn append(path: &Path, header: &str, row: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = File::options().create(true).append(true).open(path).map_err(io(path))?;
    if fresh {
        writeln!(f, "{header}").map_err(io(path))?;
    }
    writeln!(f, "{row}").map_err(io(path))
}

fn curve_row(path: &Path, step: u64, r: &EvalReport) -> Result<()> {
    let kv = r.key_values();
    let header = std::iter::once("step".to_string()).chain(kv.iter().map(|(k, _)| k.clone())).collect::<Vec<_>>().join("\t");
    let row = std::iter::once(step.to_string()).chain(kv.into_iter().map(|(_, v)| v)).collect::<Vec<_>>().join("\t");
    append(path, &header, &row)
}

fn loss_row(path: &Path, step: u64, r: &LossRecord) -> Result<()> {
    let e = r.entries();
    let header = std::iter::once("step").chain(e.iter().map(|(k, _)| *k)).collect::<Vec<_>>().join("\t");
    let row = std::iter::once(step.to_string()).chain(e.iter().map(|(_, v)| format!("{v:.6e}"))).collect::<Vec<_>>().join("\t");
    append(path, &header, &row)
}

/// Writes the batch that produced a non-finite loss next to the run.
fn dump_batch(out: &Path, step: u64, samples: &[Sample]) -> Result<PathBuf> {
    let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
    let png = out.join(format!("nonfinite_step{step}.png"));
    write_png(&png, &grid(&images, images.len()))?;
    let labels: Vec<&Vec<u8>> = samples.iter().map(|s| &s.att_s).collect();
    let txt = out.join(format!("nonfinite_step{step}.json"));
    fs::write(&txt, serde_json::to_string(&labels).expect("labels serialize")).map_err(io(&txt))?;
    Ok(png)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Evaluation classifier; fitted and written to the run directory when
    /// absent.
    pub classifier: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState<f32>,
    pub first_record: Option<LossRecord>,
    pub reports: Vec<(u64, EvalReport)>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step{step:08}.ckpt")
}

/// Runs training from scratch or from `opts.resume` up to `total_steps`,
/// evaluating and checkpointing every `eval_every` steps and at the end.
pub fn train(cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(io(out))?;
    fs::write(out.join("config.toml"), crate::config::config_to_toml(cfg)).map_err(io(out.join("config.toml")))?;
    let (train_src, eval_src, rel) = sources(cfg)?;
    let mut state = match &opts.resume {
        Some(p) => resume(p, cfg)?,
        None => TrainState::new(cfg)?,
    };
    let clf_path = opts.classifier.clone().unwrap_or_else(|| out.join(CLASSIFIER_FILE));
    let clf = if cfg.eval_every > 0 { Some(obtain_classifier(cfg, &clf_path)?) } else { None };
    let mut reports = Vec::new();
    let mut first_record = None;
    let eval_now = |state: &TrainState<f32>, reports: &mut Vec<(u64, EvalReport)>| -> Result<()> {
        if let Some(clf) = &clf {
            let r = evaluate(&state.generator, eval_src.as_ref(), &rel, clf, false)?.remove(0);
            log::info!("step {} MRE {:.4} Avg_Acc {:.3} PSNR {:.2}", state.step, r.mre, r.avg_accuracy, r.psnr_mean);
            curve_row(&out.join(CURVE_FILE), state.step, &r)?;
            reports.push((state.step, r));
        }
        save_checkpoint(&out.join(checkpoint_name(state.step)), cfg, state)?;
        save_checkpoint(&out.join(LATEST), cfg, state)
    };
    while state.step < cfg.total_steps {
        let step = state.step;
        let samples = batch_for_step(cfg, train_src.as_ref(), step)?;
        let batch = Batch::from_samples(&samples)?;
        let rec = match train_step(cfg, &mut state, &batch, &rel) {
            Ok(r) => r,
            Err(e @ magkit_core::Error::NonFinite { .. }) => {
                let dump = dump_batch(out, step, &samples)?;
                log::error!("{e}; batch written to {}", dump.display());
                return Err(Error::Core(e));
            }
            Err(e) => return Err(e.into()),
        };
        first_record.get_or_insert(rec);
        loss_row(&out.join(LOSS_FILE), step, &rec)?;
        if step % 50 == 0 {
            log::info!("step {step} d_total {:.4} g_total {:.4}", rec.d_total, rec.g_total);
        }
        if cfg.eval_every > 0 && state.step % cfg.eval_every == 0 && state.step < cfg.total_steps {
            eval_now(&state, &mut reports)?;
        }
    }
    eval_now(&state, &mut reports)?;
    Ok(TrainOutcome { state, first_record, reports })
}
