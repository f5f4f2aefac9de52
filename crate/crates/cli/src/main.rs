mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sparseseg::annotations::{rasterize, AnnotationKind};
use sparseseg::checkpoint::{read_checkpoint, write_checkpoint};
use sparseseg::crf::{mean_field_fast, ProbMap};
use sparseseg::experiment::{predict_probs, run_experiment};
use sparseseg::io::{read_label_png, read_rgb_png, write_annotations, write_label_png, write_rgb_png};
use sparseseg::metrics::confusion;
use sparseseg::model::{image_to_tensor, Weights};
use sparseseg::synth::{generate_scene, simulate_scribbles};
use sparseseg::trainer::{train, write_history, Sample};
use sparseseg::{Error, Result};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "sparseseg", version, about = "Segmentation from sparse annotations")]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for scene generation, scribble simulation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override such as `train.lr=0.001`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Also write the effective config to this file.
    #[arg(long, global = true)]
    save_config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene and its dense labels.
    Synth {
        #[arg(long)]
        out_image: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
    },
    /// Simulate sparse annotations from dense labels.
    Scribble {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out_annotations: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
    },
    /// Train a model on images with sparse label maps.
    Train(TrainArgs),
    /// Predict class probabilities and argmax labels.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_probs: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
    },
    /// Refine probabilities with the dense CRF.
    Refine {
        #[arg(long)]
        probs: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
        #[arg(long)]
        out_probs: Option<PathBuf>,
    },
    /// Score a prediction against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out_metrics: Option<PathBuf>,
    },
    /// Compare the baseline, the relational loss and CRF refinement over seeds.
    Experiment {
        #[arg(long, value_enum, default_value = "line")]
        preset: Level,
        /// Comma-separated run seeds; overrides `experiment.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Directory for report.md and report.json.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Training image; repeat together with --labels.
    #[arg(long = "image", required = true)]
    images: Vec<PathBuf>,
    #[arg(long = "labels", required = true)]
    labels: Vec<PathBuf>,
    #[arg(long = "val-image")]
    val_images: Vec<PathBuf>,
    #[arg(long = "val-labels")]
    val_labels: Vec<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    out_history: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Point,
    Line,
    Polygon,
}

impl From<Level> for AnnotationKind {
    fn from(l: Level) -> Self {
        match l {
            Level::Point => AnnotationKind::Point,
            Level::Line => AnnotationKind::Line,
            Level::Polygon => AnnotationKind::Polygon,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn samples(images: &[PathBuf], labels: &[PathBuf]) -> Result<Vec<Sample>> {
    if images.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} images but {} label maps",
            images.len(),
            labels.len()
        )));
    }
    images
        .iter()
        .zip(labels)
        .map(|(i, l)| Sample::new(image_to_tensor(&read_rgb_png(i)?), read_label_png(l)?))
        .collect()
}

fn load_weights(path: &Path) -> Result<Weights<f32>> {
    Weights::from_checkpoint(read_checkpoint(BufReader::new(File::open(path)?))?)
}

fn read_probs(path: &Path) -> Result<ProbMap> {
    ProbMap::read(BufReader::new(File::open(path)?))
}

fn write_probs(path: &Path, probs: &ProbMap) -> Result<()> {
    let mut out = create(path)?;
    probs.write(&mut out)?;
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?
        .apply_overrides(&cli.sets)?
        .with_seed(cli.seed)
        .materialize();
    cfg.validate()?;
    let echoed = serde_json::to_string(&cfg)?;
    eprintln!("effective config: {echoed}");
    if let Some(p) = &cli.save_config {
        fs::write(p, serde_json::to_string_pretty(&cfg)? + "\n")?;
    }
    let k = cfg.scene.num_classes;

    match cli.command {
        Command::Synth { out_image, out_labels } => {
            let scene = generate_scene(&cfg.scene)?;
            write_rgb_png(&out_image, &scene.image)?;
            write_label_png(&out_labels, &scene.labels)?;
        }
        Command::Scribble {
            labels,
            out_annotations,
            out_labels,
        } => {
            let dense = read_label_png(&labels)?;
            let policy = cfg.policy();
            let out = simulate_scribbles(&dense, k, &policy)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            let sparse = rasterize(&out.annotations, dense.height(), dense.width(), k, policy.dilation_radius)?;
            write_annotations(&out_annotations, &out.annotations)?;
            write_label_png(&out_labels, &sparse.labels)?;
        }
        Command::Train(args) => {
            let train_set = samples(&args.images, &args.labels)?;
            let val_set = samples(&args.val_images, &args.val_labels)?;
            let out = train(&train_set, &val_set, &cfg.model_config(), &cfg.festa, &cfg.train)?;
            let mut ckpt = create(&args.out_checkpoint)?;
            write_checkpoint(&mut ckpt, &out.weights.to_checkpoint())?;
            ckpt.flush()?;
            let mut hist = create(&args.out_history)?;
            write_history(&mut hist, &out.history)?;
            hist.flush()?;
        }
        Command::Predict {
            checkpoint,
            image,
            out_probs,
            out_labels,
        } => {
            let weights = load_weights(&checkpoint)?;
            let probs = predict_probs(&weights, &read_rgb_png(&image)?)?;
            write_probs(&out_probs, &probs)?;
            write_label_png(&out_labels, &probs.argmax())?;
        }
        Command::Refine {
            probs,
            image,
            out_labels,
            out_probs,
        } => {
            let q = mean_field_fast(&read_probs(&probs)?, &read_rgb_png(&image)?, &cfg.crf)?;
            write_label_png(&out_labels, &q.argmax())?;
            if let Some(p) = out_probs {
                write_probs(&p, &q)?;
            }
        }
        Command::Eval { gt, pred, out_metrics } => {
            let scores = confusion(&read_label_png(&gt)?, &read_label_png(&pred)?, k, &cfg.exclude)?.scores()?;
            print!("{}", scores.table());
            if let Some(p) = out_metrics {
                fs::write(p, scores.to_json()? + "\n")?;
            }
        }
        Command::Experiment { preset, seeds, out_dir } => {
            let mut exp = cfg.experiment_config(preset.into());
            if let Some(s) = seeds {
                exp.seeds = s;
            }
            let report = run_experiment(&exp)?;
            fs::create_dir_all(&out_dir)?;
            let md = report.to_markdown();
            fs::write(out_dir.join("report.md"), &md)?;
            fs::write(out_dir.join("report.json"), report.to_json()? + "\n")?;
            print!("{md}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e);
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
