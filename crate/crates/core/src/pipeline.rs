//! End-to-end runs: dataset → features → embedding → map, with every
//! artifact written to one directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_array_file, save_array_file, synthesize_dataset, DType, ImageDataset, Manifest, Provenance, SynthSpec};
use crate::error::{Error, Result};
use crate::pca;
use crate::registry::Registry;
use crate::tensor::Tensor;
use crate::tsne::{kernel, run_tsne, TsneConfig};
use crate::vae::{read_trace, write_trace, Checkpoint, LatentBatch, TrainOptions, TrainSchedule, Trainer, VaeArchitecture, VaeLossConfig, VaeModel};
use crate::viz::{emit_embedding_csv, emit_kl_trace_csv, emit_scatter_svg, read_embedding_csv, ScatterSpec};

pub const IMAGES: &str = "images.npy";
pub const LABELS: &str = "labels.npy";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LOSS_TRACE: &str = "loss_trace.csv";
pub const LATENTS: &str = "latents.npy";
pub const FEATURES: &str = "features.npy";
pub const EMBEDDING: &str = "embedding.csv";
pub const KL_TRACE: &str = "kl_trace.csv";
pub const MAP: &str = "map.svg";
pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Data,
    Train,
    Encode,
    Embed,
    Render,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Data, Stage::Train, Stage::Encode, Stage::Embed, Stage::Render];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Train => "train",
            Stage::Encode => "encode",
            Stage::Embed => "embed",
            Stage::Render => "render",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage '{s}' (data, train, encode, embed, render)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic(SynthSpec),
    /// `[N, H, W]` or `[N, H, W, 1]` array file with optional labels.
    File { images: PathBuf, labels: Option<PathBuf> },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SynthSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub normalize: bool,
    /// Blur training inputs with the 5x5 Gaussian.
    pub blur: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            normalize: true,
            blur: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeSection {
    pub architecture: VaeArchitecture,
    pub loss: VaeLossConfig,
    pub schedule: TrainSchedule,
    pub checkpoint_interval: u64,
}

impl Default for VaeSection {
    fn default() -> Self {
        Self {
            architecture: VaeArchitecture::default(),
            loss: VaeLossConfig::default(),
            schedule: TrainSchedule::default(),
            checkpoint_interval: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcaSection {
    pub components: usize,
}

impl Default for PcaSection {
    fn default() -> Self {
        Self {
            components: pca::DEFAULT_COMPONENTS,
        }
    }
}

/// Every hyperparameter of a run. Sub-stage seeds are taken from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub stages: Vec<Stage>,
    /// Feature extractor name: `vae` or `pca`.
    pub features: String,
    pub dataset: DatasetSource,
    pub preprocess: PreprocessConfig,
    pub vae: VaeSection,
    pub pca: PcaSection,
    pub tsne: TsneConfig,
    pub scatter: ScatterSpec,
    /// Where each default comes from: `published` (method default) or `chosen` (set here).
    pub provenance: BTreeMap<String, String>,
}

const PROVENANCE: &[(&str, &str)] = &[
    ("vae.architecture", "chosen"),
    ("vae.checkpoint_interval", "chosen"),
    ("vae.loss.epsilon_bn", "chosen"),
    ("vae.loss.lambda_mse", "published"),
    ("vae.loss.lambda_mu", "published"),
    ("vae.loss.lambda_sobel", "published"),
    ("vae.schedule.adam_beta2", "chosen"),
    ("vae.schedule.adam_epsilon", "chosen"),
    ("vae.schedule.batch_size", "chosen"),
    ("vae.schedule.beta_start", "published"),
    ("vae.schedule.decay_base", "published"),
    ("vae.schedule.decay_steps", "published"),
    ("vae.schedule.eta_start", "published"),
    ("vae.schedule.iterations", "published"),
    ("pca.components", "published"),
    ("preprocess.blur", "chosen"),
    ("preprocess.normalize", "published"),
    ("scatter.thumbnails", "published"),
    ("tsne.epsilon_w", "published"),
    ("tsne.exaggeration", "chosen"),
    ("tsne.iterations", "published"),
    ("tsne.kernel", "published"),
    ("tsne.learning_rate", "chosen"),
    ("tsne.momentum_initial", "chosen"),
    ("tsne.momentum_final", "chosen"),
    ("tsne.perplexity", "published"),
    ("tsne.q_normalization", "chosen"),
];

pub fn default_provenance() -> BTreeMap<String, String> {
    PROVENANCE.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            stages: Stage::ALL.to_vec(),
            features: "vae".into(),
            dataset: DatasetSource::default(),
            preprocess: PreprocessConfig::default(),
            vae: VaeSection::default(),
            pca: PcaSection::default(),
            tsne: TsneConfig::default(),
            scatter: ScatterSpec::default(),
            provenance: default_provenance(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let ext = extractor(&self.features).map_err(|e| Error::Config(e.to_string()))?;
        if self.stages.is_empty() {
            return Err(Error::Config("no stages selected".into()));
        }
        let k = kernel(&self.tsne.kernel).map_err(|e| Error::Config(e.to_string()))?;
        if k.needs_sigma() && !ext.has_sigma() {
            return Err(Error::Config(format!(
                "kernel '{}' needs sigma values, which '{}' features do not provide",
                self.tsne.kernel, self.features
            )));
        }
        if self.features == "vae" {
            self.vae.architecture.validate()?;
            self.vae.loss.validate()?;
            self.vae.schedule.validate()?;
        }
        if self.pca.components == 0 {
            return Err(Error::Config("pca.components must be >= 1".into()));
        }
        Ok(())
    }

    /// Text identifying everything that determines the trained model.
    pub fn training_identity(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Identity<'a> {
            seed: u64,
            dataset: &'a DatasetSource,
            preprocess: &'a PreprocessConfig,
            vae: &'a VaeSection,
        }
        toml::to_string(&Identity {
            seed: self.seed,
            dataset: &self.dataset,
            preprocess: &self.preprocess,
            vae: &self.vae,
        })
        .map_err(|e| Error::Config(e.to_string()))
    }

    fn runs(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }
}

pub fn preset(name: &str) -> Result<PipelineConfig> {
    let mut c = PipelineConfig::default();
    match name {
        "full" => {}
        "no-sobel" => c.vae.loss = VaeLossConfig::with_mode("normalized"),
        "traditional" => c.vae.loss = VaeLossConfig::with_mode("traditional"),
        "pca50" => {
            c.features = "pca".into();
            c.pca.components = 50;
            c.tsne.kernel = "euclidean".into();
        }
        other => {
            return Err(Error::UnknownStrategy {
                kind: "preset",
                name: other.into(),
                available: preset_names().join(", "),
            })
        }
    }
    Ok(c)
}

pub fn preset_names() -> Vec<&'static str> {
    vec!["full", "no-sobel", "traditional", "pca50"]
}

/// Latent means and optional standard deviations, `[N, u]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub mu: Tensor,
    pub sigma: Option<Tensor>,
}

/// Paths and loaded data shared by the stages of one run.
pub struct RunContext<'a> {
    pub config: &'a PipelineConfig,
    pub dir: PathBuf,
}

impl RunContext<'_> {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Fails with a stage-dependency error when `name` is missing.
    pub fn require(&self, stage: Stage, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::StageDependency {
                stage: stage.name(),
                path: p,
            })
        }
    }

    pub fn images(&self, stage: Stage) -> Result<ImageDataset> {
        let images = load_array_file(self.require(stage, IMAGES)?)?;
        let labels = self.labels()?;
        ImageDataset::new(images, labels, Provenance::External)
    }

    pub fn labels(&self) -> Result<Option<Vec<usize>>> {
        let p = self.path(LABELS);
        if !p.is_file() {
            return Ok(None);
        }
        Ok(Some(load_array_file(p)?.data().iter().map(|&v| v as usize).collect()))
    }
}

/// A source of per-example feature vectors for the embedding stage.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether extracted features carry standard deviations.
    fn has_sigma(&self) -> bool;

    /// File the encode stage writes.
    fn artifact(&self) -> &'static str;

    fn train(&self, ctx: &RunContext) -> Result<()>;

    fn extract(&self, ctx: &RunContext) -> Result<Features>;
}

pub struct VaeFeatures;

impl FeatureExtractor for VaeFeatures {
    fn name(&self) -> &'static str {
        "vae"
    }

    fn has_sigma(&self) -> bool {
        true
    }

    fn artifact(&self) -> &'static str {
        LATENTS
    }

    fn train(&self, ctx: &RunContext) -> Result<()> {
        let cfg = ctx.config;
        let data = ctx.images(Stage::Train)?;
        let identity = cfg.training_identity()?;
        let model = VaeModel::new(cfg.vae.architecture.clone(), cfg.vae.loss.clone(), cfg.seed)?;
        let options = TrainOptions {
            seed: cfg.seed,
            checkpoint_interval: cfg.vae.checkpoint_interval,
            checkpoint_path: Some(ctx.path(CHECKPOINT)),
            blur: cfg.preprocess.blur,
            config: identity.clone(),
        };
        let mut trainer = Trainer::new(model, &data.as_batch(), cfg.vae.schedule.clone(), options)?;
        let mut trace = Vec::new();
        let ckpt_path = ctx.path(CHECKPOINT);
        if ckpt_path.is_file() {
            let ckpt = Checkpoint::read(&ckpt_path)?;
            if ckpt.config == identity {
                log::info!("resuming training from iteration {}", ckpt.iteration);
                trainer.resume(&ckpt)?;
                if ctx.path(LOSS_TRACE).is_file() {
                    trace = read_trace(ctx.path(LOSS_TRACE))?;
                    trace.retain(|r| r.iteration <= ckpt.iteration);
                }
            } else {
                log::info!("existing checkpoint belongs to a different configuration; retraining");
            }
        }
        while !trainer.is_finished() {
            trace.push(trainer.step()?);
        }
        trainer.checkpoint().write(&ckpt_path)?;
        write_trace(ctx.path(LOSS_TRACE), &trace)
    }

    fn extract(&self, ctx: &RunContext) -> Result<Features> {
        let cfg = ctx.config;
        let data = ctx.images(Stage::Encode)?;
        let ckpt = Checkpoint::read(ctx.require(Stage::Encode, CHECKPOINT)?)?;
        let mut model = VaeModel::new(cfg.vae.architecture.clone(), cfg.vae.loss.clone(), cfg.seed)?;
        ckpt.restore(&mut model)?;
        let latents = model.encode_dataset(&data.as_batch())?;
        save_array_file(ctx.path(LATENTS), &latents.to_tensor(), DType::F64)?;
        Ok(Features {
            mu: latents.mu,
            sigma: Some(latents.sigma),
        })
    }
}

pub struct PcaFeatures;

impl FeatureExtractor for PcaFeatures {
    fn name(&self) -> &'static str {
        "pca"
    }

    fn has_sigma(&self) -> bool {
        false
    }

    fn artifact(&self) -> &'static str {
        FEATURES
    }

    fn train(&self, _: &RunContext) -> Result<()> {
        Ok(())
    }

    fn extract(&self, ctx: &RunContext) -> Result<Features> {
        let data = ctx.images(Stage::Encode)?;
        let flat = pca::flatten_rows(data.images())?;
        let model = pca::fit(&flat, ctx.config.pca.components)?;
        let scores = model.transform(&flat)?;
        save_array_file(ctx.path(FEATURES), &scores, DType::F64)?;
        Ok(Features { mu: scores, sigma: None })
    }
}

static VAE: VaeFeatures = VaeFeatures;
static PCA: PcaFeatures = PcaFeatures;

static EXTRACTORS: LazyLock<Registry<&'static dyn FeatureExtractor>> = LazyLock::new(|| {
    let mut r: Registry<&'static dyn FeatureExtractor> = Registry::new("feature extractor");
    r.register("vae", &VAE).register("pca", &PCA);
    r
});

pub fn extractor(name: &str) -> Result<&'static dyn FeatureExtractor> {
    EXTRACTORS.get(name)
}

pub fn extractor_names() -> Vec<&'static str> {
    EXTRACTORS.names()
}

/// Reads the encode-stage artifact of `extractor`.
pub fn load_features(ctx: &RunContext, extractor: &dyn FeatureExtractor) -> Result<Features> {
    let t = load_array_file(ctx.require(Stage::Embed, extractor.artifact())?)?;
    if extractor.has_sigma() {
        let b = LatentBatch::from_tensor(&t)?;
        Ok(Features {
            mu: b.mu,
            sigma: Some(b.sigma),
        })
    } else {
        Ok(Features { mu: t, sigma: None })
    }
}

pub fn load_dataset(source: &DatasetSource, seed: u64) -> Result<ImageDataset> {
    match source {
        DatasetSource::Synthetic(spec) => synthesize_dataset(spec, seed),
        DatasetSource::File { images, labels } => {
            let labels = match labels {
                Some(p) => Some(load_array_file(p)?.data().iter().map(|&v| v as usize).collect()),
                None => None,
            };
            ImageDataset::new(load_array_file(images)?, labels, Provenance::External)
        }
    }
}

/// Summary of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub artifacts: Vec<String>,
    pub final_kl: Option<f64>,
}

/// Runs the selected stages in order; each reads its inputs from the
/// output directory, so later stages can run alone against earlier output.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunSummary> {
    config.validate()?;
    let mut cfg = config.clone();
    cfg.tsne.seed = cfg.seed;
    cfg.scatter.seed = cfg.seed;
    fs::create_dir_all(&cfg.output_dir)?;
    let ctx = RunContext {
        config: &cfg,
        dir: cfg.output_dir.clone(),
    };
    let ext = extractor(&cfg.features)?;
    let stored = PipelineConfig {
        stages: Stage::ALL.to_vec(),
        ..cfg.clone()
    };
    fs::write(ctx.path(CONFIG), stored.to_toml()?)?;
    let mut final_kl = None;

    if cfg.runs(Stage::Data) {
        log::info!("stage data");
        let mut ds = load_dataset(&cfg.dataset, cfg.seed)?;
        if cfg.preprocess.normalize {
            ds = ds.normalized()?;
        }
        save_array_file(ctx.path(IMAGES), ds.images(), DType::F64)?;
        match ds.labels() {
            Some(l) => {
                let t = Tensor::new(vec![l.len()], l.iter().map(|&v| v as f64).collect())?;
                save_array_file(ctx.path(LABELS), &t, DType::F64)?;
            }
            None => {
                let _ = fs::remove_file(ctx.path(LABELS));
            }
        }
    }
    if cfg.runs(Stage::Train) {
        log::info!("stage train ({})", ext.name());
        ext.train(&ctx)?;
    }
    if cfg.runs(Stage::Encode) {
        log::info!("stage encode ({})", ext.name());
        ext.extract(&ctx)?;
    }
    if cfg.runs(Stage::Embed) {
        log::info!("stage embed");
        let f = load_features(&ctx, ext)?;
        let e = run_tsne(&f.mu, f.sigma.as_ref(), &cfg.tsne)?;
        final_kl = e.kl_trace.last().map(|t| t.1);
        let labels = ctx.labels()?;
        fs::write(ctx.path(EMBEDDING), emit_embedding_csv(&e, labels.as_deref())?)?;
        fs::write(ctx.path(KL_TRACE), emit_kl_trace_csv(&e.kl_trace))?;
    }
    if cfg.runs(Stage::Render) {
        log::info!("stage render");
        let table = read_embedding_csv(ctx.require(Stage::Render, EMBEDDING)?)?;
        let images = if ctx.path(IMAGES).is_file() {
            Some(load_array_file(ctx.path(IMAGES))?)
        } else {
            None
        };
        let images = images.filter(|t| t.shape().first() == Some(&table.y.rows()));
        let svg = emit_scatter_svg(&table.y, images.as_ref(), table.labels.as_deref(), &cfg.scatter)?;
        fs::write(ctx.path(MAP), svg)?;
    }

    let manifest = write_manifest(&ctx)?;
    Ok(RunSummary {
        dir: ctx.dir.clone(),
        artifacts: manifest.entries().map(|(k, _)| k.to_string()).collect(),
        final_kl,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hashes the config and every artifact present in the run directory.
pub fn write_manifest(ctx: &RunContext) -> Result<Manifest> {
    let mut m = Manifest::default();
    for name in [CONFIG, IMAGES, LABELS, CHECKPOINT, LOSS_TRACE, LATENTS, FEATURES, EMBEDDING, KL_TRACE, MAP] {
        let p = ctx.path(name);
        if p.is_file() {
            m.set(name, sha256_hex(&fs::read(p)?));
        }
    }
    m.write(ctx.path(MANIFEST))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        for name in preset_names() {
            let c = preset(name).unwrap();
            let text = c.to_toml().unwrap();
            assert_eq!(PipelineConfig::from_toml(&text).unwrap(), c, "{name}");
        }
        let mut c = PipelineConfig::default();
        c.dataset = DatasetSource::File {
            images: "a.npy".into(),
            labels: None,
        };
        c.tsne.perplexity = Some(12.5);
        assert_eq!(PipelineConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn provenance_covers_known_fields() {
        let p = PipelineConfig::default().provenance;
        assert_eq!(p["vae.loss.lambda_mse"], "published");
        assert_eq!(p["tsne.exaggeration"], "chosen");
        assert!(p.values().all(|v| v == "published" || v == "chosen"));
    }

    #[test]
    fn pca_with_sigma_kernel_rejected() {
        let mut c = preset("pca50").unwrap();
        c.tsne.kernel = "with-sigma".into();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_preset_and_stage() {
        assert!(matches!(preset("fancy"), Err(Error::UnknownStrategy { .. })));
        assert!(Stage::parse("emit").is_err());
        assert_eq!(Stage::parse("embed").unwrap(), Stage::Embed);
    }

    #[test]
    fn embed_without_features_is_a_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = preset("pca50").unwrap();
        c.output_dir = dir.path().to_path_buf();
        c.stages = vec![Stage::Embed];
        let err = run_pipeline(&c).unwrap_err();
        assert!(matches!(err, Error::StageDependency { stage: "embed", .. }), "{err}");
    }
}
