//! Training loop, checkpoints and inference.

use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imagecore::{crop_tensor, ImageGray, ImagePair, ImageRgb};
use crate::losses::{loss_terms_g, LossReport};
use crate::model::{text_features, AwmFuse, DetailSource, ModelConfig, TextFeatures};
use crate::nn::{Adam, Ctx, ParamStore};
use crate::tensor::Tensor;
use crate::textcond::{corrupt_text, tokenize, BundleRules, EmbeddingProvider, TextBundle, TextMode};
use crate::weathersim::LoadedManifest;

/// Text given to the network, mirroring the robustness study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextQuality {
    #[default]
    Clean,
    Noisy,
    Reduced,
    Augmented,
}

impl TextQuality {
    fn mode(self) -> Option<TextMode> {
        match self {
            TextQuality::Clean => None,
            TextQuality::Noisy => Some(TextMode::Noisy),
            TextQuality::Reduced => Some(TextMode::Reduced),
            TextQuality::Augmented => Some(TextMode::Augmented),
        }
    }
}

impl FromStr for TextQuality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Self::Clean),
            other => TextMode::from_str(other).map(|m| match m {
                TextMode::Noisy => Self::Noisy,
                TextMode::Reduced => Self::Reduced,
                TextMode::Augmented => Self::Augmented,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Square crop side; clamped to the image and rounded down to the
    /// network's size multiple.
    pub crop: usize,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<u64>,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub gtpm_on: bool,
    pub ltpm_on: bool,
    pub vlm_loss_on: bool,
    pub detail_text_mode: DetailSource,
    pub text_mode: TextQuality,
    /// Architecture; the text toggles above override its module switches
    /// and the provider fixes its embedding widths.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crop: 160,
            batch: 2,
            lr: 1e-3,
            epochs: 300,
            max_steps: None,
            optimizer: Optimizer::Adam,
            seed: 0,
            gtpm_on: true,
            ltpm_on: true,
            vlm_loss_on: true,
            detail_text_mode: DetailSource::Detail,
            text_mode: TextQuality::Clean,
            model: ModelConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.batch == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "need crop > 0, batch >= 1, lr > 0 (got crop {}, batch {}, lr {})",
                self.crop, self.batch, self.lr
            )));
        }
        self.model.validate()
    }

    /// The network configuration after toggles and provider widths.
    pub fn resolved_model(&self, provider: &dyn EmbeddingProvider) -> ModelConfig {
        let (dg, dl) = provider.dims();
        ModelConfig { gtpm_text: self.gtpm_on, ltpm: self.ltpm_on, global_dim: dg, local_dim: dl, ..self.model.clone() }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..16])
    }
}

/// Text the network sees for `bundle` under `cfg`. Corruption is seeded by
/// the run seed and the image id, so training and inference agree.
pub fn prepared_text(cfg: &TrainConfig, bundle: &TextBundle, max_tokens: usize) -> TextBundle {
    match cfg.text_mode.mode() {
        None => bundle.clone(),
        Some(mode) => {
            let d = Sha256::digest(format!("{}:{}", cfg.seed, bundle.image_id).as_bytes());
            let seed = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
            corrupt_text(bundle, mode, seed, max_tokens)
        }
    }
}

/// One training sample held in memory.
#[derive(Debug, Clone)]
struct Sample {
    pair: ImagePair,
    text: Option<TextFeatures>,
    clean_text: Vec<f64>,
}

/// Mean token counts of the text the network consumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub caption: f64,
    pub detail: f64,
}

/// Per-epoch means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossReport,
}

/// CSV with header `epoch,vlm,color,l1,ssim,total`.
pub fn history_csv(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch,vlm,color,l1,ssim,total\n");
    for e in history {
        let l = &e.losses;
        writeln!(s, "{},{:.6},{:.6},{:.6},{:.6},{:.6}", e.epoch, l.vlm, l.color, l.l1, l.ssim, l.total).expect("string write");
    }
    s
}

/// `(sample index, crop y, crop x)`.
type Job = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

/// Everything needed to resume or run a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub provider_id: String,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Remaining batches of the epoch in progress.
    pub pending: Vec<Vec<(usize, usize, usize)>>,
    /// Running sums for the epoch in progress.
    pub partial: Vec<LossReport>,
    pub history: Vec<EpochLog>,
    params: Vec<ParamMeta>,
    adam: AdamMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
    pub adam: Adam,
}

const MAGIC: &[u8; 8] = b"AWMFCKPT";
const VERSION: u32 = 1;

fn header_hash(train: &TrainConfig, model: &ModelConfig) -> String {
    let json = serde_json::to_string(&(train, model)).expect("config serializes");
    hex::encode(&Sha256::digest(json.as_bytes())[..16])
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        header_hash(&self.header.train, &self.header.model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let hash = self.config_hash();
        out.extend_from_slice(&(hash.len() as u32).to_le_bytes());
        out.extend_from_slice(hash.as_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for group in [self.params.values(), &self.adam.m, &self.adam.v] {
            for t in group {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = &body[8..];
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(bad("truncated"));
            }
            let (a, b) = r.split_at(n);
            r = b;
            Ok(a)
        };
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let hash = String::from_utf8(take(hlen)?.to_vec()).map_err(|_| bad("config hash is not text"))?;
        let jlen = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(take(jlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header_hash(&header.train, &header.model) != hash {
            return Err(bad("config hash does not match header"));
        }
        let mut read_group = |metas: &[ParamMeta]| -> Result<Vec<Tensor>> {
            metas
                .iter()
                .map(|m| {
                    let n: usize = m.shape.iter().product();
                    let raw = take(n * 8)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    Ok(Tensor::new(m.shape.clone(), data))
                })
                .collect()
        };
        let values = read_group(&header.params)?;
        let m = read_group(&header.params)?;
        let v = read_group(&header.params)?;
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let mut params = ParamStore::new();
        for (meta, t) in header.params.iter().zip(values) {
            params.add(meta.name.clone(), t);
        }
        let a = &header.adam;
        let adam = Adam { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step, m, v };
        Ok(Self { header, params, adam })
    }

    /// Written to a temporary sibling first, then renamed.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuild the network with these weights.
    pub fn model(&self) -> Result<AwmFuse> {
        let mut m = AwmFuse::new(&self.header.model)?;
        let same = m.params.len() == self.params.len()
            && m.params.iter().zip(self.params.iter()).all(|((_, n1, t1), (_, n2, t2))| n1 == n2 && t1.shape() == t2.shape());
        if !same {
            return Err(Error::Checkpoint("stored parameters do not fit the stored model config".into()));
        }
        m.params = self.params.clone();
        Ok(m)
    }
}

/// Stateful trainer; one call to [`Trainer::step`] is one optimizer update.
pub struct Trainer<'p> {
    pub cfg: TrainConfig,
    pub model: AwmFuse,
    pub adam: Adam,
    provider: &'p dyn EmbeddingProvider,
    samples: Vec<Sample>,
    crop: usize,
    rng: ChaCha8Rng,
    epoch: usize,
    step: u64,
    pending: Vec<Vec<Job>>,
    partial: Vec<LossReport>,
    history: Vec<EpochLog>,
    tokens: TokenStats,
}

impl<'p> Trainer<'p> {
    pub fn new(cfg: &TrainConfig, data: &LoadedManifest, provider: &'p dyn EmbeddingProvider) -> Result<Self> {
        cfg.validate()?;
        let model = AwmFuse::new(&cfg.resolved_model(provider))?;
        let adam = Adam::new(&model.params, cfg.lr);
        Self::assemble(cfg.clone(), model, adam, data, provider, ChaCha8Rng::seed_from_u64(cfg.seed))
    }

    /// Continue from a checkpoint with the same data and provider.
    pub fn resume(ckpt: &Checkpoint, data: &LoadedManifest, provider: &'p dyn EmbeddingProvider) -> Result<Self> {
        let h = &ckpt.header;
        if h.model != h.train.resolved_model(provider) {
            return Err(Error::Checkpoint("provider embedding widths differ from the checkpoint".into()));
        }
        let model = ckpt.model()?;
        let mut t = Self::assemble(h.train.clone(), model, ckpt.adam.clone(), data, provider, h.rng.clone())?;
        t.epoch = h.epoch;
        t.step = h.step;
        t.pending = h.pending.clone();
        t.partial = h.partial.clone();
        t.history = h.history.clone();
        Ok(t)
    }

    fn assemble(
        cfg: TrainConfig,
        model: AwmFuse,
        adam: Adam,
        data: &LoadedManifest,
        provider: &'p dyn EmbeddingProvider,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let entries = &data.manifest.entries;
        if entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let rules = BundleRules { require_caption: true, require_detail: true, require_clean_description: true, max_tokens: None };
        let loaded = entries
            .par_iter()
            .map(|e| -> Result<(Sample, usize, usize)> {
                let pair = data.load_pair(e)?;
                let bundle = crate::textcond::load_text_bundle(data.resolve(&e.paths.text), &rules)?;
                let seen = prepared_text(&cfg, &bundle, provider.max_tokens());
                let text = if model.uses_text() {
                    Some(text_features(provider, &seen, &pair.visible, cfg.detail_text_mode)?)
                } else {
                    None
                };
                let clean_text = provider.encode_text_global(&bundle.clean_description)?.vector;
                let detail_src = match cfg.detail_text_mode {
                    DetailSource::Detail => &seen.detail,
                    DetailSource::Caption => &seen.caption,
                };
                let counts = (tokenize(&seen.caption).len(), tokenize(detail_src).len());
                Ok((Sample { pair, text, clean_text }, counts.0, counts.1))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = loaded.len() as f64;
        let tokens = TokenStats {
            caption: loaded.iter().map(|l| l.1 as f64).sum::<f64>() / n,
            detail: loaded.iter().map(|l| l.2 as f64).sum::<f64>() / n,
        };
        let samples: Vec<Sample> = loaded.into_iter().map(|l| l.0).collect();
        let (h, w) = samples.iter().map(|s| s.pair.dims()).fold((usize::MAX, usize::MAX), |a, d| (a.0.min(d.0), a.1.min(d.1)));
        let f = model.cfg.size_multiple();
        let crop = cfg.crop.min(h).min(w) / f * f;
        if crop == 0 {
            return Err(Error::IndivisibleSpatialSize { height: h, width: w, factor: f });
        }
        if cfg.vlm_loss_on && provider.image_encoder().is_none() {
            return Err(Error::Provider(format!("provider {} cannot back-propagate through images", provider.id())));
        }
        Ok(Self {
            cfg,
            model,
            adam,
            provider,
            samples,
            crop,
            rng,
            epoch: 0,
            step: 0,
            pending: Vec::new(),
            partial: Vec::new(),
            history: Vec::new(),
            tokens,
        })
    }

    pub fn crop(&self) -> usize {
        self.crop
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    pub fn token_stats(&self) -> TokenStats {
        self.tokens
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs || self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }

    fn plan_epoch(&mut self) {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut jobs = Vec::with_capacity(order.len());
        for i in order {
            let (h, w) = self.samples[i].pair.dims();
            let y = self.rng.random_range(0..=h - self.crop);
            let x = self.rng.random_range(0..=w - self.crop);
            jobs.push((i, y, x));
        }
        self.pending = jobs.chunks(self.cfg.batch).map(<[Job]>::to_vec).collect();
        self.pending.reverse();
    }

    fn sample_grads(&self, (i, y, x): Job) -> Result<(LossReport, Vec<Tensor>)> {
        let s = &self.samples[i];
        let c = self.crop;
        let p = &s.pair;
        let clean_vi = p.clean_visible.as_ref().unwrap_or(&p.visible);
        let clean_ir = p.clean_infrared.as_ref().unwrap_or(&p.infrared);
        let mut cx = Ctx::new(&self.model.params);
        let vi = cx.g.constant(crop_tensor(p.visible.tensor(), y, x, c, c));
        let ir = cx.g.constant(crop_tensor(p.infrared.tensor(), y, x, c, c));
        let cvi = cx.g.constant(crop_tensor(clean_vi.tensor(), y, x, c, c));
        let cir = cx.g.constant(crop_tensor(clean_ir.tensor(), y, x, c, c));
        let fused = self.model.forward_graph(&mut cx, vi, ir, s.text.as_ref())?;
        let vlm = match (self.cfg.vlm_loss_on, self.provider.image_encoder()) {
            (true, Some(enc)) => Some((enc, s.clean_text.as_slice())),
            _ => None,
        };
        let terms = loss_terms_g(&mut cx.g, fused, cvi, cir, vlm);
        let report = terms.report(&cx.g);
        let grads = cx.g.backward(terms.total);
        Ok((report, self.model.params.collect_grads(&cx.g, &grads)))
    }

    /// One optimizer update. Returns the batch-mean losses before the update,
    /// or `None` once training is done.
    pub fn step(&mut self) -> Result<Option<LossReport>> {
        if self.is_done() {
            return Ok(None);
        }
        if self.pending.is_empty() {
            self.plan_epoch();
        }
        let batch = self.pending.pop().expect("planned epoch has batches");
        let results = batch.par_iter().map(|&j| self.sample_grads(j)).collect::<Result<Vec<_>>>()?;
        let reports: Vec<LossReport> = results.iter().map(|r| r.0).collect();
        let mean = LossReport::mean(&reports);
        if !mean.total.is_finite() {
            return Err(Error::DivergedLoss { epoch: self.epoch, step: self.step, value: mean.total });
        }
        let mut grads = results[0].1.clone();
        for (_, g) in &results[1..] {
            for (a, b) in grads.iter_mut().zip(g) {
                a.add_assign(b);
            }
        }
        let k = 1.0 / results.len() as f64;
        for g in &mut grads {
            g.scale_assign(k);
        }
        self.adam.update(&mut self.model.params, &grads);
        self.step += 1;
        self.partial.extend(reports);
        if self.pending.is_empty() {
            self.history.push(EpochLog { epoch: self.epoch + 1, losses: LossReport::mean(&self.partial) });
            self.partial.clear();
            self.epoch += 1;
        }
        Ok(Some(mean))
    }

    /// Run until done; returns per-step batch losses.
    pub fn run(&mut self) -> Result<Vec<LossReport>> {
        let mut out = Vec::new();
        while let Some(r) = self.step()? {
            out.push(r);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let a = &self.adam;
        Checkpoint {
            header: CheckpointHeader {
                train: self.cfg.clone(),
                model: self.model.cfg.clone(),
                provider_id: self.provider.id(),
                epoch: self.epoch,
                step: self.step,
                rng: self.rng.clone(),
                pending: self.pending.clone(),
                partial: self.partial.clone(),
                history: self.history.clone(),
                params: self.model.params.iter().map(|(_, n, t)| ParamMeta { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
                adam: AdamMeta { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step },
            },
            params: self.model.params.clone(),
            adam: self.adam.clone(),
        }
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    /// Batch-mean losses of every step.
    pub steps: Vec<LossReport>,
    pub tokens: TokenStats,
    pub crop: usize,
}

pub fn train(cfg: &TrainConfig, data: &LoadedManifest, provider: &dyn EmbeddingProvider) -> Result<TrainOutcome> {
    let mut t = Trainer::new(cfg, data, provider)?;
    let steps = t.run()?;
    Ok(TrainOutcome { checkpoint: t.checkpoint(), history: t.history.clone(), steps, tokens: t.tokens, crop: t.crop })
}

fn pad_edge(t: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, h0, w0) = t.chw();
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let src = t.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[y.min(h0 - 1) * w0 + x.min(w0 - 1)];
            }
        }
    }
    out
}

/// Fuse with an already built model. Inputs of any size are edge-padded to
/// the network's size multiple and cropped back.
pub fn fuse_with(
    model: &AwmFuse,
    cfg: &TrainConfig,
    pair: &ImagePair,
    bundle: Option<&TextBundle>,
    provider: &dyn EmbeddingProvider,
) -> Result<ImageRgb> {
    let (h, w) = pair.dims();
    if pair.infrared.dims() != (h, w) {
        return Err(Error::ShapeMismatch(format!("infrared is {:?}, visible is {:?}", pair.infrared.dims(), (h, w))));
    }
    let text = if model.uses_text() {
        let b = bundle.ok_or_else(|| Error::Config("text modules are enabled but no text bundle was given".into()))?;
        let seen = prepared_text(cfg, b, provider.max_tokens());
        Some(text_features(provider, &seen, &pair.visible, cfg.detail_text_mode)?)
    } else {
        None
    };
    let f = model.cfg.size_multiple();
    let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
    let vi = ImageRgb::new(pad_edge(pair.visible.tensor(), ph, pw))?;
    let ir = ImageGray::new(pad_edge(pair.infrared.tensor(), ph, pw))?;
    let out = model.fuse(&vi, &ir, text.as_ref())?;
    ImageRgb::new(crop_tensor(out.tensor(), 0, 0, h, w))
}

/// Fuse one pair with a trained checkpoint.
pub fn fuse(ckpt: &Checkpoint, pair: &ImagePair, bundle: Option<&TextBundle>, provider: &dyn EmbeddingProvider) -> Result<ImageRgb> {
    let model = ckpt.model()?;
    if model.uses_text() && (provider.dims().0, provider.dims().1) != (model.cfg.global_dim, model.cfg.local_dim) {
        return Err(Error::Checkpoint("provider embedding widths differ from the checkpoint".into()));
    }
    fuse_with(&model, &ckpt.header.train, pair, bundle, provider)
}
