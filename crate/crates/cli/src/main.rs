//! `decipher`: cluster, build codebooks, train, sample, reconstruct, evaluate.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use decipher::clustering::{histogram, kmeans_fit, ClusterFile, DEFAULT_K, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use decipher::codebook::{assign_patterns, capacity, load_codebook, save_codebook, scientific, CodebookSpec};
use decipher::config::{parse_layers, RunConfig, RunManifest, MANIFEST_FILE};
use decipher::data::{load_celeba_packed, load_cifar10, write_grid_png, Dataset};
use decipher::sampling::{diversity_report, export_for_fid, generate, psnr, reconstruct, SampleRequest};
use decipher::training::{check_compatible, load_checkpoint, train};
use decipher::{Error, Result};

#[derive(Parser)]
#[command(name = "decipher", version, about = "Pattern-keyed autoencoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// k-means over raw pixels; writes a DACL cluster file.
    Cluster(ClusterArgs),
    /// Assign a unique dropout pattern to every training item; writes a DACB file.
    Codebook(CodebookArgs),
    /// Train from a run config, optionally resuming from a checkpoint.
    Train(TrainArgs),
    /// Decode fresh random patterns into new images.
    Sample(SampleArgs),
    /// Decode the stored patterns of training items.
    Reconstruct(ReconstructArgs),
    /// Reconstruction PSNR table over an evenly spaced sample of training items.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Cifar10,
    Celeba,
    Synthetic,
}

#[derive(Args)]
struct DataArgs {
    /// CIFAR-10 batch directory or packed CelebA file.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cifar10")]
    dataset: DatasetArg,
    /// Keep only the first N items (required for synthetic data).
    #[arg(long)]
    n_items: Option<usize>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let need_path = || {
            self.data
                .as_deref()
                .ok_or_else(|| Error::Config("--data is required for this dataset".into()))
        };
        let ds = match self.dataset {
            DatasetArg::Cifar10 => load_cifar10(need_path()?)?,
            DatasetArg::Celeba => load_celeba_packed(need_path()?)?,
            DatasetArg::Synthetic => {
                let n = self
                    .n_items
                    .ok_or_else(|| Error::Config("--n-items is required for synthetic data".into()))?;
                Dataset::synthetic(n, 32, 0)?
            }
        };
        match self.n_items {
            Some(n) => ds.truncate(n),
            None => Ok(ds),
        }
    }
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CodebookArgs {
    /// Number of training items.
    #[arg(long)]
    n: usize,
    /// Dropout layers as channels:active pairs.
    #[arg(long, default_value = "128:1,256:4,512:16")]
    spec: String,
    /// DACL file whose assignments pick each item's first-layer channel.
    #[arg(long)]
    clusters: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Pick clusters uniformly instead of by training occupancy.
    #[arg(long)]
    uniform_clusters: bool,
    /// Use the live weights instead of the EMA weights.
    #[arg(long)]
    no_ema: bool,
    /// Run config for nearest-neighbour search against the training set
    /// (default: the manifest next to the checkpoint, if any).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated indices and ranges, e.g. `0..8,12`.
    #[arg(long)]
    indices: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_ema: bool,
    /// Run config for PSNR against the originals (default: the manifest
    /// next to the checkpoint, if any).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of training items to evaluate.
    #[arg(long, default_value_t = 256)]
    count: usize,
    #[arg(long)]
    no_ema: bool,
    /// Run config locating the training data (default: the manifest next
    /// to the checkpoint).
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_indices(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("cannot parse indices {text:?}"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                out.extend(a..b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// Training data for a checkpoint: from `--config`, else from the manifest
/// written next to it.
fn training_data(checkpoint: &Path, config: Option<&Path>) -> Result<Option<Dataset>> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let manifest = checkpoint.parent().unwrap_or(Path::new(".")).join(MANIFEST_FILE);
            if !manifest.exists() {
                return Ok(None);
            }
            RunConfig::parse(&RunManifest::load(&manifest)?.config_text)?
        }
    };
    cfg.load_dataset().map(Some)
}

fn cmd_cluster(a: ClusterArgs) -> Result<()> {
    let ds = a.data.load()?;
    let (model, labels) = kmeans_fit(&ds, a.k, a.seed, a.max_iters, a.tol)?;
    ClusterFile::new(&model, labels.clone()).save(&a.out)?;
    println!("items\t{}", ds.len());
    println!("iterations\t{}", model.history.len());
    println!("inertia\t{:.6}", model.inertia);
    for (j, count) in histogram(&labels, a.k).iter().enumerate() {
        println!("cluster\t{j}\t{count}");
    }
    Ok(())
}

fn cmd_codebook(a: CodebookArgs) -> Result<()> {
    let layers = parse_layers(&a.spec).map_err(|e| Error::Config(e.to_string()))?;
    let clusters = a.clusters.as_deref().map(ClusterFile::load).transpose()?;
    let n_clusters = clusters.as_ref().map_or(1, |c| c.k);
    let spec = CodebookSpec {
        layers,
        n_clusters,
        seed: a.seed,
    };
    spec.validate()?;
    if let Some(c) = &clusters {
        if c.assignments.len() != a.n {
            return Err(Error::ClusterConfig(format!(
                "cluster file assigns {} items, --n is {}",
                c.assignments.len(),
                a.n
            )));
        }
    }
    println!("capacity\t{}", scientific(&capacity(&spec)));
    let cb = assign_patterns(a.n, &spec, clusters.as_ref().map(|c| c.assignments.as_slice()))?;
    save_codebook(&cb, &a.out)?;
    println!("patterns\t{}", cb.len());
    println!("retries\t{}", cb.retries);
    println!("hash\t{}", cb.hash());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let data = cfg.load_dataset()?;
    if !cfg.codebook.exists() {
        return Err(Error::RunConfig(format!("codebook {} not found", cfg.codebook.display())));
    }
    let codebook = load_codebook(&cfg.codebook)?;
    check_compatible(&cfg.model, &codebook, data.len())?;
    if let Some(path) = &cfg.clusters {
        let clusters = ClusterFile::load(path)?;
        if codebook.cluster_of.as_deref() != Some(clusters.assignments.as_slice()) {
            return Err(Error::RunConfig(format!(
                "codebook cluster ids disagree with {}",
                path.display()
            )));
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;
    RunManifest::new(&cfg, Some(codebook.spec.seed)).save(&cfg.out_dir.join(MANIFEST_FILE))?;
    let outcome = train(&cfg.train_run(), &data, &codebook, a.resume.as_deref())?;
    let first = outcome.epoch_losses.first().copied().unwrap_or(f64::NAN);
    let last = outcome.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!("epochs\t{}", outcome.epochs_done);
    println!("first_loss\t{first:.6e}");
    println!("last_loss\t{last:.6e}");
    println!("completed\t{}", outcome.completed);
    println!("checkpoint\t{}", outcome.checkpoint.display());
    Ok(())
}

fn write_outputs(images: &decipher::data::ImageBatch<f32>, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    export_for_fid(images, &out.join("images"))?;
    if images.b > 0 {
        write_grid_png(&out.join("grid.png"), images)?;
    }
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut req = SampleRequest::new(a.count, a.seed);
    req.use_ema = !a.no_ema;
    if a.uniform_clusters {
        req.cluster_weights = Some(vec![1.0; ck.codebook.spec.n_clusters]);
    }
    let (images, patterns) = generate(&ck, &req)?;
    write_outputs(&images, &a.out)?;
    let patterns_text: String = patterns
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{i}\t{}\n", p.fingerprint()))
        .collect();
    fs::write(a.out.join("patterns.tsv"), patterns_text)?;
    if images.b >= 2 {
        let train = training_data(&a.checkpoint, a.config.as_deref())?;
        let report = diversity_report(&images, train.as_ref())?;
        fs::write(a.out.join("diversity.tsv"), report.to_text())?;
        println!("min_pairwise_l2\t{:.6}", report.min_pairwise);
        println!("mean_pairwise_l2\t{:.6}", report.mean_pairwise);
    }
    println!("samples\t{}", images.b);
    Ok(())
}

fn psnr_table(indices: &[usize], fingerprints: &[String], values: &[f64]) -> String {
    let mut s = String::from("index\tpattern\tpsnr_db\n");
    for ((i, f), v) in indices.iter().zip(fingerprints).zip(values) {
        s.push_str(&format!("{i}\t{f}\t{v:.3}\n"));
    }
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    s.push_str(&format!("mean\t-\t{mean:.3}\n"));
    s
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let indices = parse_indices(&a.indices)?;
    let (images, fingerprints) = reconstruct(&ck, &indices, !a.no_ema)?;
    write_outputs(&images, &a.out)?;
    match training_data(&a.checkpoint, a.config.as_deref())? {
        Some(ds) => {
            let values = psnr(&images, &ds.gather(&indices))?;
            let table = psnr_table(&indices, &fingerprints, &values);
            fs::write(a.out.join("psnr.tsv"), &table)?;
            print!("{table}");
        }
        None => {
            for (i, f) in indices.iter().zip(&fingerprints) {
                println!("{i}\t{f}");
            }
        }
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = training_data(&a.checkpoint, a.config.as_deref())?.ok_or_else(|| {
        Error::RunConfig("no training data: pass --config or keep manifest.txt next to the checkpoint".into())
    })?;
    if ds.len() != ck.n_items {
        return Err(Error::RunConfig(format!(
            "checkpoint was trained on {} items, dataset has {}",
            ck.n_items,
            ds.len()
        )));
    }
    let count = a.count.clamp(1, ds.len());
    let indices: Vec<usize> = (0..count).map(|j| j * ds.len() / count).collect();
    let (images, fingerprints) = reconstruct(&ck, &indices, !a.no_ema)?;
    let values = psnr(&images, &ds.gather(&indices))?;
    let table = psnr_table(&indices, &fingerprints, &values);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("psnr.tsv"), &table)?;
    println!("evaluated\t{count}");
    println!("mean_psnr_db\t{:.3}", values.iter().sum::<f64>() / values.len() as f64);
    Ok(())
}

/// DA_THREADS caps both the rayon pool and the GEMM kernel threads.
fn configure_threads() {
    let threads = std::env::var("DA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if std::env::var_os("MATMUL_NUM_THREADS").is_none() {
        std::env::set_var("MATMUL_NUM_THREADS", threads.to_string());
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match cli.command {
        Command::Cluster(a) => cmd_cluster(a),
        Command::Codebook(a) => cmd_codebook(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
