use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latmap::data::{load_array_file, save_array_file, synthesize_dataset, DType, ImageDataset, Provenance, SynthSpec};
use latmap::pipeline::{self, PipelineConfig, Stage};
use latmap::tsne::run_tsne;
use latmap::vae::{write_trace, Checkpoint, LatentBatch, TrainOptions, Trainer, VaeModel};
use latmap::viz::{emit_embedding_csv, emit_kl_trace_csv, emit_scatter_svg, read_embedding_csv};
use latmap::{pca, Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "latmap", version, about = "VAE latent maps with uncertainty-weighted tSNE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic image corpus.
    Synth(SynthArgs),
    /// Min-max normalize (and optionally blur) an image stack.
    Preprocess(PreprocessArgs),
    /// Train a VAE on an image stack.
    Train(TrainArgs),
    /// Encode images to latent means and standard deviations.
    Encode(EncodeArgs),
    /// Project flattened images onto their principal components.
    Pca(PcaArgs),
    /// Embed latents or features with tSNE.
    Tsne(TsneArgs),
    /// Draw an embedding CSV as an SVG map.
    Render(RenderArgs),
    /// Run the staged pipeline into one output directory.
    Pipeline(PipelineArgs),
}

/// Overrides applied on top of the preset or config file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration: full, no-sobel, traditional, pca50.
    #[arg(long)]
    preset: Option<String>,
    /// VAE objective: normalized+sobel, normalized or traditional.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eta_start: Option<f64>,
    #[arg(long)]
    latent: Option<usize>,
    /// Encoder channel widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    blur: bool,
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    perplexity: Option<f64>,
    #[arg(long)]
    tsne_iterations: Option<u64>,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    thumbnails: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match (&self.config, &self.preset) {
            (Some(_), Some(_)) => return Err(Error::Config("--config and --preset are exclusive".into())),
            (Some(path), None) => PipelineConfig::read(path)?,
            (None, Some(name)) => pipeline::preset(name).map_err(|e| Error::Config(e.to_string()))?,
            (None, None) => PipelineConfig::default(),
        };
        if let Some(m) = &self.mode {
            c.vae.loss.mode = m.clone();
        }
        if let Some(v) = self.iterations {
            c.vae.schedule.iterations = v;
        }
        if let Some(v) = self.batch_size {
            c.vae.schedule.batch_size = v;
        }
        if let Some(v) = self.eta_start {
            c.vae.schedule.eta_start = v;
        }
        if let Some(v) = self.latent {
            c.vae.architecture.latent = v;
        }
        if let Some(v) = &self.channels {
            c.vae.architecture.channels = v.clone();
        }
        if let Some(v) = self.side {
            c.vae.architecture.side = v;
        }
        if self.blur {
            c.preprocess.blur = true;
        }
        if let Some(v) = &self.kernel {
            c.tsne.kernel = v.clone();
        }
        if let Some(v) = self.perplexity {
            c.tsne.perplexity = Some(v);
        }
        if let Some(v) = self.tsne_iterations {
            c.tsne.iterations = v;
        }
        if let Some(v) = self.components {
            c.pca.components = v;
        }
        if let Some(v) = self.thumbnails {
            c.scatter.thumbnails = v;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    clusters: usize,
    #[arg(long, default_value_t = 100)]
    per_cluster: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long)]
    no_jitter: bool,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    blur: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    images: PathBuf,
    /// Directory for checkpoint.bin and loss_trace.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PcaArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = pca::DEFAULT_COMPONENTS)]
    components: usize,
}

#[derive(Args)]
struct TsneArgs {
    /// `[2, N, u]` latents from `encode`.
    #[arg(long, conflicts_with = "features", required_unless_present = "features")]
    latents: Option<PathBuf>,
    /// `[N, u]` feature matrix.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    kl_trace: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    embedding: PathBuf,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stages to run, comma separated (data, train, encode, embed, render).
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
    /// Feature extractor: vae or pca.
    #[arg(long)]
    features: Option<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

fn load_labels(path: &Path) -> Result<Vec<usize>> {
    Ok(load_array_file(path)?.data().iter().map(|&v| v as usize).collect())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        clusters: a.clusters,
        per_cluster: a.per_cluster,
        size: a.size,
        noise: a.noise,
        jitter: !a.no_jitter,
    };
    let ds = synthesize_dataset(&spec, a.seed)?;
    save_array_file(&a.out, ds.images(), DType::F64)?;
    if let (Some(p), Some(l)) = (&a.labels, ds.labels()) {
        let t = Tensor::new(vec![l.len()], l.iter().map(|&v| v as f64).collect())?;
        save_array_file(p, &t, DType::F64)?;
    }
    Ok(())
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let mut ds = ImageDataset::new(load_array_file(&a.input)?, None, Provenance::External)?.normalized()?;
    if a.blur {
        ds = ds.blurred()?;
    }
    save_array_file(&a.out, ds.images(), DType::F64)
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    cfg.seed = a.seed;
    cfg.vae.loss.validate()?;
    let ds = ImageDataset::new(load_array_file(&a.images)?, None, Provenance::External)?;
    fs::create_dir_all(&a.out)?;
    let model = VaeModel::new(cfg.vae.architecture.clone(), cfg.vae.loss.clone(), cfg.seed)?;
    let options = TrainOptions {
        seed: cfg.seed,
        checkpoint_interval: cfg.vae.checkpoint_interval,
        checkpoint_path: Some(a.out.join(pipeline::CHECKPOINT)),
        blur: cfg.preprocess.blur,
        config: cfg.training_identity()?,
    };
    let mut trainer = Trainer::new(model, &ds.as_batch(), cfg.vae.schedule.clone(), options)?;
    let trace = trainer.run()?;
    trainer.checkpoint().write(a.out.join(pipeline::CHECKPOINT))?;
    write_trace(a.out.join(pipeline::LOSS_TRACE), &trace)
}

fn encode(a: &EncodeArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let ds = ImageDataset::new(load_array_file(&a.images)?, None, Provenance::External)?;
    let mut model = VaeModel::new(cfg.vae.architecture.clone(), cfg.vae.loss.clone(), a.seed)?;
    Checkpoint::read(&a.checkpoint)?.restore(&mut model)?;
    let latents = model.encode_dataset(&ds.as_batch())?;
    save_array_file(&a.out, &latents.to_tensor(), DType::F64)
}

fn run_pca(a: &PcaArgs) -> Result<()> {
    let flat = pca::flatten_rows(&load_array_file(&a.input)?)?;
    let model = pca::fit(&flat, a.components)?;
    let ratio: f64 = model.explained_variance_ratio().iter().sum();
    log::info!("{} components explain {:.4} of the variance", a.components, ratio);
    save_array_file(&a.out, &model.transform(&flat)?, DType::F64)
}

fn tsne(a: &TsneArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?.tsne;
    cfg.seed = a.seed;
    let (mu, sigma) = match (&a.latents, &a.features) {
        (Some(p), _) => {
            let b = LatentBatch::from_tensor(&load_array_file(p)?)?;
            (b.mu, Some(b.sigma))
        }
        (None, Some(p)) => (load_array_file(p)?, None),
        (None, None) => return Err(Error::Config("need --latents or --features".into())),
    };
    let labels = a.labels.as_deref().map(load_labels).transpose()?;
    let e = run_tsne(&mu, sigma.as_ref(), &cfg)?;
    fs::write(&a.out, emit_embedding_csv(&e, labels.as_deref())?)?;
    if let Some(p) = &a.kl_trace {
        fs::write(p, emit_kl_trace_csv(&e.kl_trace))?;
    }
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    let mut spec = a.config.resolve()?.scatter;
    spec.seed = a.seed;
    let table = read_embedding_csv(&a.embedding)?;
    let images = a.images.as_deref().map(load_array_file).transpose()?;
    let svg = emit_scatter_svg(&table.y, images.as_ref(), table.labels.as_deref(), &spec)?;
    fs::write(&a.out, svg)?;
    Ok(())
}

fn run_pipeline(a: &PipelineArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    cfg.seed = a.seed;
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    if let Some(stages) = &a.stages {
        cfg.stages = stages.iter().map(|s| Stage::parse(s)).collect::<Result<_>>()?;
    }
    if let Some(f) = &a.features {
        cfg.features = f.clone();
    }
    if a.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let summary = pipeline::run_pipeline(&cfg)?;
    println!("wrote {} artifacts to {}", summary.artifacts.len(), summary.dir.display());
    if let Some(kl) = summary.final_kl {
        println!("final KL {kl:.6}");
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownStrategy { .. } => 2,
        Error::StageDependency { .. } => 3,
        e if e.is_numeric() => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Pca(a) => run_pca(a),
        Command::Tsne(a) => tsne(a),
        Command::Render(a) => render(a),
        Command::Pipeline(a) => run_pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
