//! Command-line surface. Every subcommand maps onto one library operation.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pyragen_core::apps::{self, Generated, Model};
use pyragen_core::backbone::{ClassifierSpec, ClassifierTrainConfig};
use pyragen_core::data::ClassLabel;
use pyragen_core::eval::{self, ReportConfig};
use pyragen_core::image::Rect;
use pyragen_core::toy;

use crate::checkpoint;
use crate::config::GanRunConfig;
use crate::dataset;
use crate::error::{io_err, Error, Result};
use crate::imageio;
use crate::report;
use crate::service;
use crate::training;
use crate::wire::{ProvenanceJson, DEFAULT_SAMPLES};

#[derive(Debug, Parser)]
#[command(
    name = "pyragen",
    version,
    about = "Image generation from a classifier's semantic feature pyramid"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// GAN checkpoint to load.
    #[arg(long, env = "PYRAGEN_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Classifier checkpoint replacing the one embedded in the GAN checkpoint.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `sample_{i}.png` and `provenance.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic ten-class shape corpus as PNGs plus a manifest.
    MakeToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the backbone classifier on a manifest dataset.
    TrainClassifier {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
        /// Stop after the first epoch reaching this held-out accuracy.
        #[arg(long, default_value_t = 0.97)]
        target: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Adversarial training from a `key = value` config file.
    TrainGan {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample from the features of one level of an image.
    Invert {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        level: String,
        #[arg(long)]
        label: Option<usize>,
        #[command(flatten)]
        sample: SampleArgs,
    },
    /// Regenerate a masked region from a level upwards.
    Repaint {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        /// Mask PNG; values above 127 mark pixels to regenerate.
        #[arg(long)]
        region: PathBuf,
        #[arg(long)]
        level: String,
        #[arg(long)]
        label: Option<usize>,
        #[command(flatten)]
        sample: SampleArgs,
    },
    /// Paste a patch into a base image and regenerate coherently.
    Composite {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        patch: PathBuf,
        /// `x,y,width,height` in base-image pixels.
        #[arg(long, value_parser = parse_rect)]
        placement: Rect,
        #[arg(long)]
        level: String,
        #[arg(long)]
        label: Option<usize>,
        #[command(flatten)]
        sample: SampleArgs,
    },
    /// Regenerate an image under a different class label.
    Relabel {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        label: usize,
        #[command(flatten)]
        sample: SampleArgs,
    },
    /// Per-level FID and diversity table.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        /// Held-out images to evaluate against.
        #[arg(long)]
        dataset: PathBuf,
        /// `all` or a comma-separated list of level names.
        #[arg(long, default_value = "all")]
        levels: String,
        #[arg(long)]
        out: PathBuf,
        /// Optional PNG trend plot.
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        fid_samples: usize,
        #[arg(long, default_value_t = 32)]
        diversity_images: usize,
        #[arg(long, default_value_t = 8)]
        k_per_image: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// HTTP inference service.
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, env = "PYRAGEN_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
}

fn parse_rect(s: &str) -> std::result::Result<Rect, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [x, y, w, h] => Ok(Rect::new(x, y, w, h)),
        _ => Err(format!("expected x,y,width,height, got `{s}`")),
    }
}

fn load_model(m: &ModelArgs) -> Result<Model> {
    checkpoint::load_model(&m.checkpoint, m.classifier.as_deref())
}

/// Write `sample_{i}.png` and `provenance.json` into `dir`.
pub fn write_generated(dir: &Path, g: &Generated) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, im) in g.samples.iter().enumerate() {
        imageio::write_image(&dir.join(format!("sample_{i}.png")), im)?;
    }
    let path = dir.join("provenance.json");
    let mut json =
        serde_json::to_string_pretty(&ProvenanceJson::from(&g.provenance)).expect("plain struct");
    json.push('\n');
    std::fs::write(&path, json).map_err(io_err(&path))
}

fn resolve_levels(spec: &ClassifierSpec, levels: &str) -> Result<Vec<String>> {
    if levels.trim() == "all" {
        return Ok(spec.tap_names.clone());
    }
    let list: Vec<String> = levels.split(',').map(|l| l.trim().to_string()).collect();
    for l in &list {
        spec.level_index(l)?;
    }
    Ok(list)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeToyCorpus {
            out,
            per_class,
            size,
            seed,
        } => {
            let data = toy::corpus(per_class, size, seed);
            let manifest = dataset::save(&data, &out)?;
            tracing::info!(
                "wrote {} images, manifest {}",
                data.len(),
                manifest.display()
            );
        }
        Command::TrainClassifier {
            dataset: manifest,
            out,
            classes,
            size,
            epochs,
            batch_size,
            lr,
            holdout,
            target,
            seed,
        } => {
            let mut spec = ClassifierSpec::desk(classes);
            spec.input_size = size;
            spec.validate()?;
            let data = dataset::load(&manifest, size, classes)?;
            let cfg = ClassifierTrainConfig {
                max_epochs: epochs,
                batch_size,
                learning_rate: lr,
                holdout_fraction: holdout,
                target_accuracy: target,
            };
            let (_, rep) = training::train_classifier(&data, &spec, &cfg, seed, &out, &mut |p| {
                tracing::info!(
                    "epoch {} loss {:.4} held-out accuracy {:.3}",
                    p.epoch,
                    p.mean_loss,
                    p.holdout_accuracy
                )
            })?;
            println!(
                "held-out accuracy {:.4} on {} images after {} epochs",
                rep.holdout_accuracy, rep.holdout_size, rep.epochs
            );
        }
        Command::TrainGan { config, seed } => {
            let mut run = GanRunConfig::load(&config)?;
            if let Some(s) = seed {
                run.train.seed = s;
            }
            let outcome = training::train_gan(&run, &mut |m| {
                if m.step % 50 == 0 {
                    tracing::info!(
                        "step {} rec {:.4} div {:.4} total {:.4}",
                        m.step,
                        m.rec,
                        m.div,
                        m.total
                    );
                }
            })?;
            println!("{}", outcome.final_checkpoint.display());
        }
        Command::Invert {
            model,
            image,
            level,
            label,
            sample,
        } => {
            let model = load_model(&model)?;
            let image = imageio::read_image(&image)?;
            let g = apps::invert_at_level(
                &model,
                &image,
                &level,
                sample.samples,
                sample.seed,
                label.map(ClassLabel),
            )?;
            write_generated(&sample.out, &g)?;
        }
        Command::Repaint {
            model,
            image,
            region,
            level,
            label,
            sample,
        } => {
            let model = load_model(&model)?;
            let image = imageio::read_image(&image)?;
            let region = imageio::read_region(&region)?;
            apps::check_region(&region)?;
            let g = apps::repaint(
                &model,
                &image,
                &region,
                &level,
                sample.samples,
                sample.seed,
                label.map(ClassLabel),
            )?;
            write_generated(&sample.out, &g)?;
        }
        Command::Composite {
            model,
            base,
            patch,
            placement,
            level,
            label,
            sample,
        } => {
            let model = load_model(&model)?;
            let base = imageio::read_image(&base)?;
            let patch = imageio::read_image(&patch)?;
            let g = apps::composite(
                &model,
                &base,
                &patch,
                placement,
                &level,
                sample.samples,
                sample.seed,
                label.map(ClassLabel),
            )?;
            write_generated(&sample.out, &g)?;
        }
        Command::Relabel {
            model,
            image,
            label,
            sample,
        } => {
            let model = load_model(&model)?;
            let image = imageio::read_image(&image)?;
            let g = apps::relabel(
                &model,
                &image,
                ClassLabel(label),
                sample.samples,
                sample.seed,
            )?;
            write_generated(&sample.out, &g)?;
        }
        Command::Eval {
            model,
            dataset: manifest,
            levels,
            out,
            plot,
            fid_samples,
            diversity_images,
            k_per_image,
            seed,
        } => {
            let model = load_model(&model)?;
            let spec = model.spec().clone();
            let levels = resolve_levels(&spec, &levels)?;
            let data = dataset::load(&manifest, spec.input_size, spec.num_classes)?;
            let images: Vec<_> = data.images().cloned().collect();
            let cfg = ReportConfig {
                fid_samples,
                diversity_images,
                k_per_image,
                seed,
            };
            let rep = eval::per_level_report(&model, &images, &levels, &cfg)?;
            report::write_tsv(&out, &rep)?;
            if let Some(p) = plot {
                report::write_plot(&p, &rep)?;
            }
        }
        Command::Serve { model, port, host } => {
            let model = load_model(&model)?;
            let rt = tokio::runtime::Runtime::new()
                .map_err(|e| Error::Config(format!("runtime: {e}")))?;
            let addr = SocketAddr::new(host, port);
            rt.block_on(service::serve(model, addr))
                .map_err(io_err(format!("{addr}")))?;
        }
    }
    Ok(())
}
