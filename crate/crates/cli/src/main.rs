use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use deepclust::ablation::{emit_report, run_grid, Grid, ReportFormat};
use deepclust::augment::{augment_manifest, parse_kinds, TransformKind, TransformSpec};
use deepclust::cae::{pretrain, write_loss_csv, CaeModel, LossMode, PretrainConfig, VggConfig};
use deepclust::cluster::{argmax_rows, assign_all, finetune, kmeans, write_assignment_csv, FinetuneConfig, FinetuneMethod};
use deepclust::corpus::{ingest, subsample, training_view, DatasetManifest, SampleRecord, TrainingImage};
use deepclust::metrics::{evaluate, parse_labels};
use deepclust::rng::{stream_seed, Stream};

#[derive(Parser)]
#[command(name = "deepclust", version, about = "Deep embedded clustering with affine augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a class-per-directory image tree into a manifest.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        /// Square side length images are resized to.
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep only this many randomly chosen images per class.
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add one transformed copy of every original per transform family.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "rot,sher,scal")]
        transforms: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the convolutional autoencoder.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        /// `mse` or `mse+ccl`.
        #[arg(long, default_value = "mse")]
        loss: LossMode,
        /// Augmented samples to train on: `none` or a subset of `rot,sher,scal`.
        #[arg(long, default_value = "none")]
        aug: String,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the number of classes in the manifest.
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        warmup: f64,
        #[arg(long, default_value = "32,64,128,256")]
        widths: String,
        #[arg(long, default_value_t = 10)]
        embedding_dim: usize,
        /// Loss history; defaults to `<out>.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune pretrained weights with DEC or IDEC.
    Finetune {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "dec")]
        method: FinetuneMethod,
        #[arg(long, default_value = "none")]
        aug: String,
        #[arg(long, default_value_t = 2000)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        /// Epochs between target refreshes; 0 keeps the first target.
        #[arg(long, default_value_t = 5)]
        refresh: usize,
        #[arg(long, default_value_t = 0.001)]
        tolerance: f64,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add the consistency term for these transforms during fine-tuning.
        #[arg(long, default_value = "none")]
        consistency: String,
        /// Assignment history; defaults to `<out>.assignments.csv`.
        #[arg(long)]
        history_csv: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write cluster labels for the original images of a manifest.
    Predict {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Used for K-means when the weights carry no centers.
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the ground-truth labels of the original images of a manifest.
    Labels {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted labels against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Run an experiment grid and write report.csv, report.json and report.txt.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the long training schedules for cells that do not set epochs.
        #[arg(long)]
        paper_scale: bool,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest { root, res, seed, per_class, out } => {
            let (mut manifest, _) = ingest(&root, [res, res], seed)?;
            if let Some(n) = per_class {
                manifest = subsample(&manifest, n, seed)?;
            }
            manifest.save(&out)?;
            eprintln!("{} images in {} classes -> {}", manifest.originals(), manifest.class_count(), out.display());
        }
        Command::Augment { manifest, transforms, seed, out } => {
            let kinds = parse_kinds(&transforms)?;
            if kinds.is_empty() {
                bail!("--transforms needs at least one of rot, sher, scal");
            }
            let (m, samples) = load(&manifest)?;
            let (augmented, _) = augment_manifest(&m, &samples, &TransformSpec::standard_set(&kinds), seed)?;
            augmented.save(&out)?;
            eprintln!("{} originals + {} augmented -> {}", augmented.originals(), augmented.augmented(), out.display());
        }
        Command::Pretrain {
            manifest,
            loss,
            aug,
            epochs,
            batch,
            lr,
            seed,
            clusters,
            warmup,
            widths,
            embedding_dim,
            loss_csv,
            out,
        } => {
            let (m, samples) = load(&manifest)?;
            let kinds = parse_kinds(&aug)?;
            let data = select(&m, &samples, &kinds)?;
            let widths = parse_widths(&widths)?;
            let arch = VggConfig { channels: m.channels, height: m.resolution[0], width: m.resolution[1], widths, embedding_dim };
            let mut model = CaeModel::vgg(&arch, stream_seed(seed, Stream::Init, 0, 0))?;
            let cfg = PretrainConfig {
                loss,
                epochs,
                batch_size: batch,
                lr,
                seed,
                warmup_fraction: warmup,
                clusters: clusters.unwrap_or(m.class_count()),
                alpha: 1.0,
                pair_specs: TransformSpec::standard_set(if kinds.is_empty() { &TransformKind::ALL } else { &kinds }),
            };
            let report = pretrain(&mut model, &data, &cfg)?;
            model.save(&out, report.centers.as_ref())?;
            let csv = loss_csv.unwrap_or_else(|| sibling(&out, "loss.csv"));
            write_loss_csv(&report.history, BufWriter::new(create(&csv)?))?;
            if let Some(last) = report.history.last() {
                eprintln!("epoch {}: mse {:.6} ccl {:.6}", last.epoch, last.mse, last.ccl);
            }
        }
        Command::Finetune {
            weights,
            manifest,
            method,
            aug,
            epochs,
            batch,
            lr,
            gamma,
            refresh,
            tolerance,
            clusters,
            seed,
            consistency,
            history_csv,
            out,
        } => {
            let (m, samples) = load(&manifest)?;
            let data = select(&m, &samples, &parse_kinds(&aug)?)?;
            let (mut model, _) = CaeModel::load(&weights)?;
            let cfg = FinetuneConfig {
                method,
                epochs,
                batch_size: batch,
                lr,
                refresh_interval: (refresh > 0).then_some(refresh),
                gamma,
                tolerance,
                seed,
                clusters: clusters.unwrap_or(m.class_count()),
                alpha: 1.0,
                consistency: TransformSpec::standard_set(&parse_kinds(&consistency)?),
            };
            let report = finetune(&mut model, None, &data, &cfg)?;
            model.save(&out, Some(&report.centers))?;
            let csv = history_csv.unwrap_or_else(|| sibling(&out, "assignments.csv"));
            write_assignment_csv(&report.history, BufWriter::new(create(&csv)?))?;
            let last = report.history.last().map_or(0, |r| r.epoch);
            eprintln!("{} refreshes, last at epoch {last}{}", report.history.len(), if report.stopped_early { " (converged)" } else { "" });
        }
        Command::Predict { weights, manifest, clusters, seed, batch, out } => {
            let (m, samples) = load(&manifest)?;
            let originals = training_view(samples.iter().filter(|s| s.is_original()));
            let (model, centers) = CaeModel::load(&weights)?;
            let predicted = match centers {
                Some(c) => argmax_rows(&assign_all(&model, &c, &originals, batch)?),
                None => {
                    let z = model.embed_all(&originals, batch)?;
                    kmeans(&z, clusters.unwrap_or(m.class_count()), stream_seed(seed, Stream::KMeans, 2, 0), 300)?.assignments
                }
            };
            write_labels(&out, &predicted)?;
        }
        Command::Labels { manifest, out } => {
            let m = DatasetManifest::load(&manifest)?;
            let truth: Vec<usize> = m.samples.iter().filter(|s| s.transform.is_none()).map(|s| s.class_label).collect();
            write_labels(&out, &truth)?;
        }
        Command::Evaluate { pred, truth } => {
            let c = read_labels(&pred)?;
            let y = read_labels(&truth)?;
            println!("{}", serde_json::to_string(&evaluate(&y, &c)?)?);
        }
        Command::Ablate { grid, out, paper_scale } => {
            let g = Grid::load(&grid)?;
            let total = g.cells.len();
            let mut done = 0;
            let report = run_grid(&g, &out, paper_scale, |row, reused| {
                done += 1;
                let acc = row.mean.map_or("-".to_string(), |s| format!("{:.4}", s.acc));
                eprintln!("[{done}/{total}] {} {} acc {acc}{}", row.name, row.status.as_str(), if reused { " (cached)" } else { "" });
                for s in &row.per_seed {
                    if let Some(e) = &s.error {
                        eprintln!("    seed {}: {e}", s.seed);
                    }
                }
            })?;
            for format in ReportFormat::ALL {
                let path = emit_report(&report, format, &out)?;
                eprintln!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn load(path: &Path) -> Result<(DatasetManifest, Vec<SampleRecord>)> {
    let m = DatasetManifest::load(path)?;
    let samples = m.load_samples().with_context(|| format!("loading images of {}", path.display()))?;
    Ok((m, samples))
}

/// Originals plus the augmented samples of the requested kinds.
fn select(m: &DatasetManifest, samples: &[SampleRecord], kinds: &[TransformKind]) -> Result<Vec<TrainingImage>> {
    let present = m.kinds_present();
    if let Some(k) = kinds.iter().find(|k| !present.contains(k)) {
        bail!("manifest has no `{k}` samples; run `deepclust augment --transforms {k}` first");
    }
    Ok(training_view(samples.iter().filter(|s| s.transform.is_none_or(|t| kinds.contains(&t.kind)))))
}

fn parse_widths(s: &str) -> Result<[usize; 4]> {
    let v = s.split(',').map(|w| w.trim().parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| anyhow::anyhow!("--widths needs four channel counts, got {}", v.len()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_labels(&text).with_context(|| path.display().to_string())
}
