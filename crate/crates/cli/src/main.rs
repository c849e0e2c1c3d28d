//! `aqnet`: dataset generation, training, evaluation and inference.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime
//! failure, 4 I/O failure.

mod config;
mod presets;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use aqnet::datagen::{generate_dataset, DatasetManifest, Split};
use aqnet::eval::{
    calibrate_threshold, confusion_matrix, summary_text, sweep_from_embeddings, write_embeddings_csv,
    DEFAULT_KEEP_QUANTILE,
};
use aqnet::inference::{build_gallery, classify_image, embed_all, knn_classify, Gallery};
use aqnet::sampler::{full_combination_count, TupleMode};
use aqnet::trainer::{load_checkpoint, train_with, TrainOptions, TrainingData};
use aqnet::{Label, LabeledImage};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_IO: u8 = 4;

pub const GALLERY_FILE: &str = "gallery.bin";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Parser)]
#[command(name = "aqnet", version, about = "Anomaly-aware quadruplet metric learning for assembly progress estimation")]
struct Cli {
    /// Overrides the seed of the dataset or training config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded math and timing-free metrics for byte-identical reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the `[dataset]` table.
    GenData {
        config: PathBuf,
        /// Output directory; defaults to `dataset.root` from the config.
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Train a network; writes config, metrics, checkpoints, gallery and summary to `--out`.
    Train(TrainArgs),
    /// Classify a dataset split against a gallery of the training split.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Mean kNN distance above which a prediction becomes `error`.
        #[arg(long, conflicts_with = "sweep")]
        threshold: Option<f64>,
        /// Comma-separated increasing thresholds; writes `sweep.csv`.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<f64>>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write `embeddings.csv` for the evaluated split.
        #[arg(long)]
        export_embeddings: bool,
    },
    /// Classify image files; prints `id,predicted,mean_knn_distance,threshold_applied`.
    Infer {
        checkpoint: PathBuf,
        gallery: PathBuf,
        images: Vec<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Size of the exhaustive tuple space for n steps and m images per step.
    CountCombinations {
        n: usize,
        m: usize,
        #[arg(long, default_value = "quadruplet")]
        mode: TupleMode,
    },
    /// List the shipped training presets.
    Presets,
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Dataset root; defaults to `dataset.root` from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    mode: Option<TupleMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    anomaly_start: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
    /// Print the subcommand's usage line after the message.
    usage: bool,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_CONFIG,
            error: error.into(),
            usage: false,
        }
    }
}

fn code_of(e: &aqnet::Error) -> u8 {
    use aqnet::Error::*;
    match e {
        Config(_) => EXIT_CONFIG,
        Io { .. } | Image { .. } | Csv { .. } | Format { .. } | Version { .. } => EXIT_IO,
        Domain(_) | NonFinite(_) => EXIT_RUNTIME,
    }
}

impl From<aqnet::Error> for Failure {
    fn from(e: aqnet::Error) -> Self {
        Self {
            code: code_of(&e),
            error: e.into(),
            usage: false,
        }
    }
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        let (code, usage) = match e {
            config::ConfigError::Io(..) => (EXIT_IO, true),
            config::ConfigError::Parse(..) => (EXIT_CONFIG, false),
        };
        Self {
            code,
            error: e.into(),
            usage,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_IO,
        error: anyhow::Error::new(e).context(format!("writing {}", path.display())),
        usage: false,
    }
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| io_fail(path, e))
}

fn create_dir(path: &Path) -> CmdResult {
    std::fs::create_dir_all(path).map_err(|e| io_fail(path, e))
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let sub = matches.subcommand_name().unwrap_or_default().to_string();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    if cli.deterministic {
        // The global pool may only be built once; failure means it already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            if f.usage {
                let mut cmd = Cli::command();
                if let Some(c) = cmd.find_subcommand_mut(&sub) {
                    eprintln!("\n{}", c.render_usage());
                }
            }
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenData { config, root } => cmd_gen_data(&config, root, cli.seed),
        Command::Train(args) => cmd_train(args, cli.seed, cli.deterministic),
        Command::Eval {
            checkpoint,
            dataset,
            k,
            threshold,
            sweep,
            split,
            out,
            export_embeddings,
        } => cmd_eval(&checkpoint, &dataset, k, threshold, sweep, &split, out, export_embeddings),
        Command::Infer {
            checkpoint,
            gallery,
            images,
            k,
            threshold,
        } => cmd_infer(&checkpoint, &gallery, &images, k, threshold),
        Command::CountCombinations { n, m, mode } => {
            println!("{}", full_combination_count(n, m, mode).map_err(Failure::config)?);
            Ok(())
        }
        Command::Presets => {
            for p in presets::PRESETS {
                println!("{:<18} {}", p.name, p.description);
            }
            Ok(())
        }
    }
}

fn cmd_gen_data(config: &Path, root: Option<PathBuf>, seed: Option<u64>) -> CmdResult {
    let cfg = config::load(config)?;
    let mut section = cfg
        .dataset
        .ok_or_else(|| Failure::config(anyhow!("{} has no [dataset] table", config.display())))?;
    if let Some(s) = seed {
        section.spec.seed = s;
    }
    let root = root.unwrap_or(section.root);
    let manifest = generate_dataset(&section.spec, &root)?;
    println!("dataset written to {}", root.display());
    for split in Split::ALL {
        println!("  {}: {} images", split.as_str(), manifest.count(split));
    }
    println!("manifest: {}", root.join(aqnet::datagen::MANIFEST_FILE).display());
    Ok(())
}

fn cmd_train(args: TrainArgs, seed: Option<u64>, deterministic: bool) -> CmdResult {
    let cfg = config::load(&args.config)?;
    let mut train = cfg.train.unwrap_or_default();
    let mut echo = String::new();
    if let Some(name) = &args.preset {
        let p = presets::find(name).ok_or_else(|| {
            let names: Vec<_> = presets::PRESETS.iter().map(|p| p.name).collect();
            Failure::config(anyhow!("unknown preset {name:?}; available: {}", names.join(", ")))
        })?;
        p.apply(&mut train);
        writeln!(echo, "preset: {} ({})", p.name, p.description).unwrap();
    }
    let mut overrides = Vec::new();
    macro_rules! apply {
        ($opt:expr, $field:expr, $name:literal) => {
            if let Some(v) = $opt {
                $field = v;
                overrides.push(format!("{}={}", $name, v));
            }
        };
    }
    apply!(args.mode, train.mode, "mode");
    apply!(args.epochs, train.total_epochs, "total_epochs");
    apply!(args.anomaly_start, train.anomaly_start_epoch, "anomaly_start_epoch");
    apply!(args.embed_dim, train.arch.embed_dim, "embed_dim");
    apply!(args.k, train.k, "k");
    apply!(args.lr, train.learning_rate, "learning_rate");
    apply!(args.batch_size, train.batch_size, "batch_size");
    apply!(args.checkpoint_every, train.checkpoint_every, "checkpoint_every");
    apply!(seed, train.seed, "seed");
    if !overrides.is_empty() {
        writeln!(echo, "overrides (take precedence over the preset): {}", overrides.join(", ")).unwrap();
    }
    train.validate()?;

    let root = args
        .data
        .or_else(|| cfg.dataset.map(|d| d.root))
        .ok_or_else(|| Failure::config(anyhow!("no dataset: pass --data or set dataset.root")))?;
    let manifest = DatasetManifest::load(&root)?;
    let data = TrainingData::from_manifest(&manifest)?;
    print!("{echo}");
    println!("training {} for {} epochs into {}", train.mode, train.total_epochs, args.out.display());
    let options = TrainOptions {
        out_dir: Some(args.out.clone()),
        deterministic,
    };
    let (params, history) = train_with(&train, &data, &options, |r| {
        println!(
            "epoch {:>4}  loss {:.5}  val_acc {:.4}  lambda {:.3}  {:.1}s",
            r.epoch, r.loss, r.val_acc, r.lambda, r.seconds
        );
    })?;
    let gallery = build_gallery(&params, &data.gallery_images(), train.loss.metric)?;
    gallery.save(&args.out.join(GALLERY_FILE))?;

    let last = history.last().expect("at least one epoch");
    let mut summary = echo;
    writeln!(summary, "mode: {}", train.mode).unwrap();
    writeln!(summary, "epochs: {}", train.total_epochs).unwrap();
    writeln!(summary, "final_lambda: {}", last.lambda).unwrap();
    writeln!(summary, "final_loss: {}", last.loss).unwrap();
    writeln!(summary, "final_val_acc: {}", last.val_acc).unwrap();
    writeln!(
        summary,
        "final_distances: intra {} adjacent {} anomaly {}",
        last.d_intra, last.d_adjacent, last.d_anomaly
    )
    .unwrap();
    if !data.val.is_empty() {
        let k = train.k.min(gallery.len());
        let t = calibrate_threshold(&gallery, &embed_all(&params, &data.val)?, k, DEFAULT_KEEP_QUANTILE)?;
        writeln!(
            summary,
            "suggested_threshold: {t} (keeps {DEFAULT_KEEP_QUANTILE} of clean validation images)"
        )
        .unwrap();
    }
    write_file(&args.out.join(SUMMARY_FILE), &summary)?;
    print!("{summary}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    k: Option<usize>,
    threshold: Option<f64>,
    sweep: Option<Vec<f64>>,
    split: &str,
    out: Option<PathBuf>,
    export: bool,
) -> CmdResult {
    let split: Split = split.parse().map_err(Failure::config)?;
    let (params, cfg) = load_checkpoint(checkpoint)?;
    let k = k.unwrap_or(cfg.k);
    let manifest = DatasetManifest::load(dataset)?;
    for s in [Split::Train, split] {
        if manifest.count(s) == 0 {
            return Err(Failure::config(anyhow!("dataset has no {} split", s.as_str())));
        }
    }
    let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    create_dir(&out)?;
    let gallery = build_gallery(&params, &manifest.load_split(Split::Train)?, cfg.loss.metric)?;
    let images = manifest.load_split(split)?;
    let embs = embed_all(&params, &images)?;
    let n_steps = manifest.spec.n_steps;

    let mut preds = Vec::with_capacity(images.len());
    for (img, e) in images.iter().zip(&embs) {
        preds.push((img.label, knn_classify(&gallery, e, k, threshold)?.predicted));
    }
    let cm = confusion_matrix(n_steps, &preds)?;
    write_file(&out.join("confusion.csv"), &cm.to_csv())?;
    let mut summary = format!("split: {}\nk: {k}\n", split.as_str());
    summary.push_str(&summary_text(&cm, threshold)?);

    if let Some(thresholds) = sweep {
        let queries: Vec<_> = images.iter().map(|i| i.label).zip(embs.iter().cloned()).collect();
        let report = sweep_from_embeddings(&gallery, &queries, k, &thresholds, n_steps).map_err(Failure::config)?;
        write_file(&out.join("sweep.csv"), &report.to_csv())?;
        match report.operating_point(0.8, 0.1) {
            Some(r) => writeln!(summary, "chosen_threshold: {} (accuracy {:.4})", r.threshold, r.accuracy).unwrap(),
            None => writeln!(summary, "chosen_threshold: none meets recall >= 0.8, false-error <= 0.1").unwrap(),
        }
        print!("{}", report.to_csv());
    }
    if export {
        let rows: Vec<_> = images.iter().zip(&embs).map(|(i, e)| (i.id.as_str(), i.label, e.0.as_slice())).collect();
        write_embeddings_csv(&rows, params.arch.embed_dim, &out.join("embeddings.csv"))?;
    }
    write_file(&out.join("eval_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_infer(
    checkpoint: &Path,
    gallery_path: &Path,
    images: &[PathBuf],
    k: Option<usize>,
    threshold: Option<f64>,
) -> CmdResult {
    let (params, cfg) = load_checkpoint(checkpoint)?;
    let gallery = Gallery::load(gallery_path)?;
    let k = k.unwrap_or(cfg.k).min(gallery.len());
    println!("id,predicted,mean_knn_distance,threshold_applied");
    let mut failed = None;
    for path in images {
        let id = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        let result = LabeledImage::load_png(path, id.clone(), Label::Error)
            .and_then(|img| classify_image(&params, &gallery, &img, k, threshold));
        match result {
            Ok(r) => println!("{id},{},{},{}", r.predicted, r.mean_knn_distance, r.threshold_applied),
            Err(e) => {
                println!("{id},unreadable,,");
                eprintln!("{}: {e}", path.display());
                failed.get_or_insert(code_of(&e));
            }
        }
    }
    match failed {
        None => Ok(()),
        Some(code) => Err(Failure {
            code,
            error: anyhow!("some images could not be classified"),
            usage: false,
        }),
    }
}
