//! The assembled fusion network and its size accounting.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Var;
use crate::backbone::{Backbone, BackboneConfig};
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::gtpm::Gtpm;
use crate::imagecore::{ImageGray, ImageRgb};
use crate::ltpm::{Ltpm, LtpmConfig};
use crate::nn::{Ctx, Init, ParamStore};
use crate::textcond::{EmbeddingProvider, GlobalTextEmbedding, ImageEmbedding, LocalTextEmbedding, TextBundle};

/// Where LTPM instances are inserted in the U-Net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LtpmPlacement {
    /// After the bottleneck stage and after the last stage.
    BottleneckAndFinal,
    /// Only after the last stage.
    Final,
    /// After every stage.
    EveryStage,
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub se_reduction: usize,
    pub dilation_rates: [usize; 3],
    /// Key/query width of every cross-attention.
    pub attn_dim: usize,
    pub wavelet_levels: usize,
    /// `D_g`, width of sentence and image embeddings.
    pub global_dim: usize,
    /// `D_l`, width of detail tokens.
    pub local_dim: usize,
    /// Global text path (image embedding injection and caption attention).
    pub gtpm_text: bool,
    pub ltpm: bool,
    pub ltpm_placement: LtpmPlacement,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Full-size configuration.
    pub fn full() -> Self {
        Self {
            backbone: BackboneConfig {
                blocks_per_stage: vec![8, 10, 10, 12, 10, 10, 8],
                channel_schedule: vec![48, 96, 192, 384, 192, 96, 48],
                state_dim: 16,
            },
            se_reduction: 16,
            dilation_rates: [1, 2, 3],
            attn_dim: 64,
            wavelet_levels: 2,
            global_dim: 512,
            local_dim: 256,
            gtpm_text: true,
            ltpm: true,
            ltpm_placement: LtpmPlacement::BottleneckAndFinal,
            init_seed: 0,
        }
    }

    /// Laptop-scale default.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig {
                blocks_per_stage: vec![1, 1, 2, 1, 1],
                channel_schedule: vec![8, 16, 32, 16, 8],
                state_dim: 8,
            },
            se_reduction: 4,
            attn_dim: 8,
            ..Self::full()
        }
    }

    /// Smallest configuration, used by tests.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig { blocks_per_stage: vec![1, 1, 1], channel_schedule: vec![4, 8, 4], state_dim: 8 },
            se_reduction: 4,
            attn_dim: 4,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.attn_dim == 0 || self.global_dim == 0 || self.local_dim == 0 {
            return Err(Error::Config("attention and embedding widths must be positive".into()));
        }
        Ok(())
    }

    /// Stage indices that receive an LTPM.
    pub fn ltpm_stages(&self) -> Vec<usize> {
        if !self.ltpm {
            return Vec::new();
        }
        let n = self.backbone.channel_schedule.len();
        match self.ltpm_placement {
            LtpmPlacement::BottleneckAndFinal => {
                let m = self.backbone.downsamples();
                if m == n - 1 {
                    vec![m]
                } else {
                    vec![m, n - 1]
                }
            }
            LtpmPlacement::Final => vec![n - 1],
            LtpmPlacement::EveryStage => (0..n).collect(),
        }
    }

    /// Spatial multiple every input side must have.
    pub fn size_multiple(&self) -> usize {
        (1usize << self.backbone.downsamples()).max(1usize << self.wavelet_levels)
    }

    /// Stable hash of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..16])
    }

    fn ltpm_config(&self) -> LtpmConfig {
        LtpmConfig {
            se_reduction: self.se_reduction,
            dilation_rates: self.dilation_rates,
            d_k: self.attn_dim,
            image_dim: self.global_dim,
            token_dim: self.local_dim,
        }
    }
}

/// Embeddings the network consumes for one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    pub caption: GlobalTextEmbedding,
    pub image: ImageEmbedding,
    pub detail: LocalTextEmbedding,
}

/// Which text feeds the local branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetailSource {
    /// The long generated description.
    #[default]
    #[serde(rename = "chatgpt", alias = "detail")]
    Detail,
    /// The caption, standing in for missing long descriptions.
    Caption,
}

impl std::str::FromStr for DetailSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chatgpt" | "detail" => Ok(Self::Detail),
            "caption" => Ok(Self::Caption),
            other => Err(Error::Config(format!("unknown detail text source `{other}`"))),
        }
    }
}

/// Encode the text and the visible input for one pair.
pub fn text_features(
    provider: &dyn EmbeddingProvider,
    bundle: &TextBundle,
    visible: &ImageRgb,
    detail: DetailSource,
) -> Result<TextFeatures> {
    let local_text = match detail {
        DetailSource::Detail => &bundle.detail,
        DetailSource::Caption => &bundle.caption,
    };
    Ok(TextFeatures {
        caption: provider.encode_text_global(&bundle.caption)?,
        image: provider.encode_image(visible)?,
        detail: provider.encode_text_local(local_text)?,
    })
}

/// Parameter count and compute estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub param_count: usize,
    /// Multiply-accumulates for one forward pass at the given size.
    pub macs: u64,
    /// `2 × macs`.
    pub flops_estimate: f64,
}

/// The fusion network. Parameters live in [`AwmFuse::params`]; the layer
/// structs only hold indices into it.
#[derive(Debug, Clone)]
pub struct AwmFuse {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub gtpm: Gtpm,
    pub backbone: Backbone,
    pub ltpms: Vec<(usize, Ltpm)>,
    pub decoder: Decoder,
}

impl AwmFuse {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(cfg.init_seed);
        let ch = &cfg.backbone.channel_schedule;
        let gtpm = Gtpm::new(&mut params, &mut init, ch[0], cfg.gtpm_text.then_some((cfg.global_dim, cfg.attn_dim)))?;
        let backbone = Backbone::new(&mut params, &mut init, &cfg.backbone)?;
        let lc = cfg.ltpm_config();
        let ltpms = cfg
            .ltpm_stages()
            .into_iter()
            .map(|s| Ltpm::new(&mut params, &mut init, &format!("ltpm{s}"), ch[s], &lc).map(|l| (s, l)))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::new(&mut params, &mut init, *ch.last().expect("non-empty schedule"), cfg.wavelet_levels);
        Ok(Self { cfg: cfg.clone(), params, gtpm, backbone, ltpms, decoder })
    }

    /// Whether any module consumes text.
    pub fn uses_text(&self) -> bool {
        self.cfg.gtpm_text || !self.ltpms.is_empty()
    }

    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let f = self.cfg.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::IndivisibleSpatialSize { height: h, width: w, factor: f });
        }
        Ok(())
    }

    /// Build the forward pass on `cx`; `vi: [3, H, W]` and `ir: [1, H, W]`
    /// must already be on the tape. Returns the fused `[3, H, W]` node.
    pub fn forward_graph(&self, cx: &mut Ctx, vi: Var, ir: Var, text: Option<&TextFeatures>) -> Result<Var> {
        let (_, h, w) = cx.g.value(vi).chw();
        let (_, hi, wi) = cx.g.value(ir).chw();
        if (h, w) != (hi, wi) {
            return Err(Error::ShapeMismatch(format!("visible is {h}x{w}, infrared is {hi}x{wi}")));
        }
        self.check_size(h, w)?;
        if self.uses_text() && text.is_none() {
            return Err(Error::Config("text modules enabled but no text features given".into()));
        }
        let f = self.gtpm.forward(cx, vi, ir, text.map(|t| &t.caption), text.map(|t| &t.image))?;
        let mut hook = |cx: &mut Ctx, stage: usize, x: Var| -> Result<Var> {
            match (self.ltpms.iter().find(|(s, _)| *s == stage), text) {
                (Some((_, l)), Some(t)) => l.forward(cx, x, &t.image, &t.detail),
                _ => Ok(x),
            }
        };
        let f = self.backbone.forward(cx, f, &mut hook)?;
        self.decoder.forward(cx, f, vi)
    }

    /// Fuse one pair outside of training.
    pub fn fuse(&self, vi: &ImageRgb, ir: &ImageGray, text: Option<&TextFeatures>) -> Result<ImageRgb> {
        let mut cx = Ctx::new(&self.params);
        let v = cx.g.constant(vi.tensor().clone());
        let i = cx.g.constant(ir.tensor().clone());
        let out = self.forward_graph(&mut cx, v, i, text)?;
        ImageRgb::from_clamped(cx.g.value(out).clone())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Parameter count and multiply-accumulate estimate for `h × w` inputs.
    pub fn summary(&self, h: usize, w: usize, detail_tokens: usize) -> ModelSummary {
        let m = self.cfg.backbone.downsamples();
        let mut macs = self.gtpm.macs(h, w) + self.backbone.macs(h, w) + self.decoder.macs(h, w);
        for (s, l) in &self.ltpms {
            let level = if *s <= m { *s } else { 2 * m - s };
            macs += l.macs(h >> level, w >> level, detail_tokens);
        }
        ModelSummary { param_count: self.num_params(), macs, flops_estimate: 2.0 * macs as f64 }
    }
}

/// Build the model for `cfg` and report its size at `h × w`.
pub fn model_summary(cfg: &ModelConfig, h: usize, w: usize) -> Result<ModelSummary> {
    let m = AwmFuse::new(cfg)?;
    Ok(m.summary(h, w, 77))
}
