use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{CommandFactory, Parser, Subcommand};
use magkit::checkpoint::{load_checkpoint, save_classifier};
use magkit::config::load_config;
use magkit::core::data::SynthSpec;
use magkit::core::mask::AttDiff;
use magkit::core::pipeline::edit_image;
use magkit::core::Image;
use magkit::dataset::{emit_synthetic, DirDataset, SampleSource, SynthSource, RELATIONS_FILE, SYNTH_CLASSIFIER_SEED};
use magkit::imageio::{grid, read_png, write_png};
use magkit::masks::read_masks;
use magkit::relations::read_relations;
use magkit::trainer::{classifier_config, evaluate, fit_classifier, obtain_classifier, report_text, sources, train, TrainOptions, CLASSIFIER_FILE};

#[derive(Parser)]
#[command(name = "magkit", version, about = "Mask-guided facial attribute editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train from a config file; trailing `--key=value` pairs override it.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Fit the evaluation classifier for a config.
    TrainClassifier {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        steps: usize,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Edit images: one output column per listed attribute reversal.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input PNGs, one row each.
        #[arg(long, required = true, num_args = 1..)]
        image: Vec<PathBuf>,
        /// Part mask file per input image.
        #[arg(long, required = true, num_args = 1..)]
        mask: Vec<PathBuf>,
        /// Source labels per input image as a 0/1 string, e.g. `010011`.
        #[arg(long, required = true, num_args = 1..)]
        labels: Vec<String>,
        /// Attribute names to reverse; empty gives the reconstruction.
        #[arg(long, value_delimiter = ',')]
        flip: Vec<String>,
        /// Relation table; the built-in synthetic one when absent.
        #[arg(long)]
        relations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint, with hat / no-hat subgroup rows.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; the config's held-out split when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_labels(s: &str, n: usize) -> anyhow::Result<Vec<u8>> {
    let v: Vec<u8> = s
        .chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            _ => bail!("labels must be 0/1 digits, got {s:?}"),
        })
        .collect::<anyhow::Result<_>>()?;
    if v.len() != n {
        bail!("labels {s:?} have {} entries, expected {n}", v.len());
    }
    Ok(v)
}

/// A bad override flag; reported with the usage text.
#[derive(Debug)]
struct Usage(&'static str, magkit::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.1.fmt(f)
    }
}

impl std::error::Error for Usage {}

fn train_config(cmd: &'static str, path: Option<&Path>, overrides: &[String]) -> anyhow::Result<magkit::core::pipeline::TrainConfig> {
    Ok(load_config(path, overrides).map_err(|e| Usage(cmd, e))?)
}

fn require(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("{what} {} not found", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { out, count, resolution, seed } => {
            emit_synthetic(&out, &SynthSpec::new(resolution, seed), count)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train { config, out, resume, classifier, overrides } => {
            let cfg = train_config("train", config.as_deref(), &overrides)?;
            if let Some(r) = &resume {
                require(r, "checkpoint")?;
            }
            let outcome = train(&cfg, &TrainOptions { out_dir: out.clone(), resume, classifier })?;
            if let Some((step, r)) = outcome.reports.last() {
                println!("step {step}: MRE {:.5} Avg_Acc {:.4} PSNR {:.2}", r.mre, r.avg_accuracy, r.psnr_mean);
            }
            println!("checkpoints in {}", out.display());
        }
        Command::TrainClassifier { config, out, steps, overrides } => {
            let cfg = train_config("train-classifier", config.as_deref(), &overrides)?;
            let (train_src, eval_src, _) = sources(&cfg)?;
            let ccfg = classifier_config(cfg.image_side(), cfg.attributes.len());
            let fit = if cfg.data_dir.is_none() {
                let spec = SynthSpec { resolution: cfg.image_side(), attributes: cfg.attributes.clone(), seed: SYNTH_CLASSIFIER_SEED };
                fit_classifier(ccfg, &SynthSource { spec, count: 20_000 }, eval_src.as_ref(), steps, cfg.seed)?
            } else {
                fit_classifier(ccfg, train_src.as_ref(), eval_src.as_ref(), steps, cfg.seed)?
            };
            let path = if out.is_dir() { out.join(CLASSIFIER_FILE) } else { out };
            save_classifier(&path, &fit.classifier)?;
            println!("held-out accuracy {:.4}; saved {}", fit.heldout_accuracy, path.display());
        }
        Command::Edit { checkpoint, image, mask, labels, flip, relations, out } => {
            require(&checkpoint, "checkpoint")?;
            let (cfg, state) = load_checkpoint(&checkpoint)?;
            if image.len() != mask.len() || image.len() != labels.len() {
                bail!("need one --mask and one --labels per --image");
            }
            let rel = match relations {
                Some(p) => read_relations(&p)?,
                None => magkit::core::mask::RelationMatrices::synthetic_default(),
            }
            .select(&cfg.attributes)?;
            let flips = flip
                .iter()
                .map(|name| cfg.attributes.iter().position(|a| a == name).with_context(|| format!("unknown attribute {name:?}; known: {}", cfg.attributes.join(", "))))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let side = cfg.image_side();
            let mut cells: Vec<Image> = Vec::new();
            for ((img, m), l) in image.iter().zip(&mask).zip(&labels) {
                let x = read_png(img, side)?;
                let parts = read_masks(m)?;
                if parts.height() != side || parts.width() != side {
                    bail!("mask {} is {}x{}, expected {side}x{side}", m.display(), parts.height(), parts.width());
                }
                let att = parse_labels(l, cfg.attributes.len())?;
                let diffs = if flips.is_empty() {
                    vec![AttDiff::zeros(att.len())]
                } else {
                    flips.iter().map(|&i| AttDiff::flip(&att, i)).collect::<Result<Vec<_>, _>>()?
                };
                let edited = edit_image(&state.generator, &x, &diffs, &parts, &rel)?;
                cells.push(x);
                cells.extend(edited);
            }
            let cols = flips.len().max(1) + 1;
            write_png(&out, &grid(&cells, cols))?;
            println!("wrote {}", out.display());
        }
        Command::Eval { checkpoint, data, classifier, out } => {
            require(&checkpoint, "checkpoint")?;
            require(&classifier, "classifier")?;
            let (cfg, state) = load_checkpoint(&checkpoint)?;
            let clf = obtain_classifier(&cfg, &classifier)?;
            let (source, rel): (Box<dyn SampleSource>, _) = match data {
                Some(dir) => {
                    let d = DirDataset::open_root(&dir, &cfg.attributes, cfg.image_side())?;
                    let rel = read_relations(&dir.join(RELATIONS_FILE))?.select(&cfg.attributes)?;
                    (Box::new(d), rel)
                }
                None => {
                    let (_, eval, rel) = sources(&cfg)?;
                    (eval, rel)
                }
            };
            let reports = evaluate(&state.generator, source.as_ref(), &rel, &clf, true)?;
            let text = report_text(&reports);
            match out {
                Some(p) => std::fs::write(&p, &text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            let name = e.downcast_ref::<Usage>().map_or("", |u| u.0);
            let mut cmd = Cli::command();
            let usage = cmd.find_subcommand_mut(name).map(|c| c.render_usage().to_string()).unwrap_or_default();
            eprintln!("error: {e:#}\n\n{usage}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
