//! The pipeline steps behind the `awmfuse` command-line tool.
//!
//! Each command returns a [`Result`]; [`exit_code`] maps errors to process
//! exit codes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{load_image, save_rgb, ImagePair};
use crate::metrics::{batch_evaluate, MetricTable};
use crate::model::{DetailSource, ModelConfig};
use crate::textcond::{
    embedding_cache, load_text_bundle, stub_provider, AnchoredProvider, BundleRules, EmbeddingProvider,
};
use crate::trainer::{fuse, history_csv, train, Checkpoint, TextQuality, TokenStats, TrainConfig};
use crate::weathersim::{build_dataset_with, write_synthetic_clean, DatasetOptions, Manifest};

/// Environment variable naming the embedding cache root.
pub const CACHE_ENV: &str = "AWMFUSE_CACHE_DIR";

/// Exit status for a failed command: 2 for shape problems, 3 for missing
/// text, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ShapeMismatch(_) | Error::IndivisibleSpatialSize { .. } | Error::CropTooLarge { .. } => 2,
        Error::MissingText(_) => 3,
        _ => 1,
    }
}

/// Deterministic stub embeddings, cached on disk when `cache_dir` is set.
pub fn default_provider(cache_dir: Option<&Path>) -> Result<Box<dyn EmbeddingProvider>> {
    wrap_cache(stub_provider(512, 256, 0)?, cache_dir)
}

fn wrap_cache<P: EmbeddingProvider + 'static>(p: P, cache_dir: Option<&Path>) -> Result<Box<dyn EmbeddingProvider>> {
    Ok(match cache_dir {
        Some(dir) => Box::new(embedding_cache(p, dir)?),
        None => Box::new(p),
    })
}

/// Cache directory from an explicit flag or [`CACHE_ENV`].
pub fn cache_dir_from_env(explicit: Option<PathBuf>) -> Option<PathBuf> {
    explicit.or_else(|| std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradeArgs {
    pub clean_dir: PathBuf,
    pub out_dir: PathBuf,
    pub per_type: usize,
    pub seed: u64,
    pub ir_contrast: Option<f64>,
}

pub fn cmd_degrade(a: &DegradeArgs) -> Result<Manifest> {
    let mut opts = DatasetOptions::new(a.per_type, a.seed);
    opts.ir_contrast = a.ir_contrast;
    build_dataset_with(&a.clean_dir, &a.out_dir, &opts)
}

/// Write synthetic clean pairs usable as `--clean-dir`.
pub fn cmd_scenes(out_dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<String>> {
    if count == 0 || size == 0 {
        return Err(Error::Config("scene count and size must be positive".into()));
    }
    write_synthetic_clean(out_dir, count, size, seed)
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOverrides {
    pub no_gtpm: bool,
    pub no_ltpm: bool,
    pub no_vlm_loss: bool,
    pub detail_text: Option<DetailSource>,
    pub text_mode: Option<TextQuality>,
    pub epochs: Option<usize>,
    pub max_steps: Option<u64>,
    pub seed: Option<u64>,
    pub crop: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if self.no_gtpm {
            cfg.gtpm_on = false;
        }
        if self.no_ltpm {
            cfg.ltpm_on = false;
        }
        if self.no_vlm_loss {
            cfg.vlm_loss_on = false;
        }
        if let Some(d) = self.detail_text {
            cfg.detail_text_mode = d;
        }
        if let Some(t) = self.text_mode {
            cfg.text_mode = t;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.max_steps {
            cfg.max_steps = Some(v);
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.crop {
            cfg.crop = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
    }
}

/// Model presets selectable with `preset = "..."` in a config file.
pub fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "toy" => Ok(ModelConfig::toy()),
        "desk" => Ok(ModelConfig::desk()),
        "full" => Ok(ModelConfig::full()),
        other => Err(Error::Config(format!("unknown model preset `{other}`"))),
    }
}

/// Parse a TOML training config. Keys mirror [`TrainConfig`]; an extra
/// top-level `preset` picks the architecture unless a `[model]` table is
/// given.
pub fn parse_train_config(text: &str, origin: &Path) -> Result<TrainConfig> {
    let schema = |reason: String| Error::Schema { path: origin.to_path_buf(), reason };
    let mut table: toml::Table = toml::from_str(text).map_err(|e| schema(e.to_string()))?;
    let preset_name = match table.remove("preset") {
        Some(toml::Value::String(s)) => Some(s),
        Some(other) => return Err(schema(format!("preset must be a string, got {other}"))),
        None => None,
    };
    let has_model = table.contains_key("model");
    let mut cfg: TrainConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| schema(e.to_string()))?;
    if let Some(p) = preset_name {
        if has_model {
            return Err(schema("give either `preset` or a [model] table, not both".into()));
        }
        cfg.model = preset(&p)?;
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArgs {
    pub manifest: PathBuf,
    pub config: Option<PathBuf>,
    pub out_checkpoint: PathBuf,
    /// Defaults to the checkpoint path with extension `loss.csv`.
    pub loss_csv: Option<PathBuf>,
    pub overrides: TrainOverrides,
    pub cache_dir: Option<PathBuf>,
}

impl TrainArgs {
    pub fn loss_csv_path(&self) -> PathBuf {
        self.loss_csv.clone().unwrap_or_else(|| self.out_checkpoint.with_extension("loss.csv"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub crop: usize,
    pub tokens: TokenStats,
    pub first_total: Option<f64>,
    pub last_total: Option<f64>,
}

/// Train on a manifest. The alignment term uses stub embeddings in which
/// each clean description is tied to the embedding of its clean image.
pub fn cmd_train(a: &TrainArgs) -> Result<TrainSummary> {
    let mut cfg = match &a.config {
        Some(p) => parse_train_config(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?, p)?,
        None => TrainConfig::default(),
    };
    a.overrides.apply(&mut cfg);
    cfg.validate()?;
    let data = Manifest::load(&a.manifest)?;
    let mut anchored = AnchoredProvider::new(stub_provider(512, 256, 0)?);
    let rules = BundleRules::all(None);
    for e in &data.manifest.entries {
        let bundle = load_text_bundle(data.resolve(&e.paths.text), &rules)?;
        let clean = load_image(data.resolve(&e.paths.clean_vi))?.into_rgb();
        anchored.anchor(&bundle.clean_description, &clean)?;
    }
    let provider = wrap_cache(anchored, a.cache_dir.as_deref())?;
    let out = train(&cfg, &data, provider.as_ref())?;
    out.checkpoint.save(&a.out_checkpoint)?;
    let csv = a.loss_csv_path();
    std::fs::write(&csv, history_csv(&out.history)).map_err(|e| Error::io(&csv, e))?;
    Ok(TrainSummary {
        steps: out.checkpoint.header.step,
        epochs: out.checkpoint.header.epoch,
        crop: out.crop,
        tokens: out.tokens,
        first_total: out.steps.first().map(|s| s.total),
        last_total: out.steps.last().map(|s| s.total),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseArgs {
    pub checkpoint: PathBuf,
    pub vi: PathBuf,
    pub ir: PathBuf,
    pub sidecar: Option<PathBuf>,
    pub out: PathBuf,
    pub cache_dir: Option<PathBuf>,
}

pub fn cmd_fuse(a: &FuseArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let vi = load_image(&a.vi)?.into_rgb();
    let ir = load_image(&a.ir)?.into_gray();
    let pair = ImagePair::new(
        a.vi.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        vi,
        ir,
        None,
        None,
    )?;
    let needs_text = ckpt.header.model.gtpm_text || ckpt.header.model.ltpm;
    let bundle = match (&a.sidecar, needs_text) {
        (_, false) => None,
        (None, true) => return Err(Error::MissingText("the checkpoint uses text; pass --sidecar".into())),
        (Some(p), true) if !p.is_file() => return Err(Error::MissingText(format!("{} does not exist", p.display()))),
        (Some(p), true) => {
            let rules = BundleRules { require_caption: true, require_detail: true, require_clean_description: false, max_tokens: None };
            Some(load_text_bundle(p, &rules)?)
        }
    };
    let provider = default_provider(a.cache_dir.as_deref())?;
    let fused = fuse(&ckpt, &pair, bundle.as_ref(), provider.as_ref())?;
    save_rgb(&fused, &a.out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateArgs {
    pub fused_dir: PathBuf,
    pub vi_dir: PathBuf,
    pub ir_dir: PathBuf,
    pub out_csv: PathBuf,
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<MetricTable> {
    let table = batch_evaluate(&a.fused_dir, &a.vi_dir, &a.ir_dir)?;
    table.write_csv(&a.out_csv)?;
    Ok(table)
}
