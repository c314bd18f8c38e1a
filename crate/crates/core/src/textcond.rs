//! Text descriptions, embedding providers and text corruption for ablations.
//!
//! Real vision-language encoders sit behind [`EmbeddingProvider`]. The
//! bundled [`StubProvider`] is deterministic and offline: words hash to
//! seeded Gaussian vectors and images are pooled, projected and normalized.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::imagecore::ImageRgb;
use crate::tensor::Tensor;

const UNRELATED: &str = include_str!("../data/unrelated_descriptions.txt");

const FILLERS: &[&str] = &[
    "the picture was taken outdoors",
    "several regions of the frame look similar",
    "the view contains many ordinary details",
    "nothing unusual stands out in this part",
    "the composition is wide and fairly balanced",
];

/// Per-image text sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBundle {
    pub image_id: String,
    /// Short scene summary, consumed by the global branch.
    pub caption: String,
    /// Longer description, consumed by the local branch.
    pub detail: String,
    /// Description of the scene without weather, target of the alignment loss.
    pub clean_description: String,
}

/// Which sidecar fields must be present and how long they may be.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BundleRules {
    pub require_caption: bool,
    pub require_detail: bool,
    pub require_clean_description: bool,
    pub max_tokens: Option<usize>,
}

impl BundleRules {
    pub fn all(max_tokens: Option<usize>) -> Self {
        Self { require_caption: true, require_detail: true, require_clean_description: true, max_tokens }
    }
}

/// Split text into lowercase word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Deserialize)]
struct RawBundle {
    image_id: Option<String>,
    caption: Option<String>,
    detail: Option<String>,
    clean_description: Option<String>,
}

impl TextBundle {
    /// Check required fields and token budgets.
    pub fn validate(&self, rules: &BundleRules, path: &Path) -> Result<()> {
        let fields = [
            ("caption", &self.caption, rules.require_caption),
            ("detail", &self.detail, rules.require_detail),
            ("clean_description", &self.clean_description, rules.require_clean_description),
        ];
        for (name, value, required) in fields {
            if required && value.trim().is_empty() {
                return Err(Error::Schema { path: path.to_path_buf(), reason: format!("field `{name}` is empty") });
            }
            if let Some(max) = rules.max_tokens {
                let tokens = tokenize(value).len();
                if tokens > max {
                    return Err(Error::TokenBudgetExceeded { field: name.to_string(), tokens, max });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }
}

/// Read and validate a JSON sidecar.
pub fn load_text_bundle(path: impl AsRef<Path>, rules: &BundleRules) -> Result<TextBundle> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawBundle = serde_json::from_str(&text)
        .map_err(|e| Error::Schema { path: path.to_path_buf(), reason: e.to_string() })?;
    let missing = |name: &str| Error::Schema { path: path.to_path_buf(), reason: format!("missing field `{name}`") };
    let image_id = raw.image_id.ok_or_else(|| missing("image_id"))?;
    let take = |v: Option<String>, name: &str, required: bool| match v {
        Some(s) => Ok(s),
        None if required => Err(missing(name)),
        None => Ok(String::new()),
    };
    let bundle = TextBundle {
        image_id,
        caption: take(raw.caption, "caption", rules.require_caption)?,
        detail: take(raw.detail, "detail", rules.require_detail)?,
        clean_description: take(raw.clean_description, "clean_description", rules.require_clean_description)?,
    };
    bundle.validate(rules, path)?;
    Ok(bundle)
}

/// Write a sidecar as pretty JSON.
pub fn save_text_bundle(bundle: &TextBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bundle.to_json()).map_err(|e| Error::io(path, e))
}

/// Sentence-level text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTextEmbedding {
    pub vector: Vec<f64>,
    pub provenance: String,
}

/// Token-level text embedding, `tokens: [T, D_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTextEmbedding {
    pub tokens: Tensor,
    pub provenance: String,
}

impl LocalTextEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Image embedding in the same space as [`GlobalTextEmbedding`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub vector: Vec<f64>,
}

/// Differentiable image encoder used by the alignment loss.
pub trait DiffImageEncoder: Send + Sync {
    /// Embed a `[3, H, W]` node into a `[D_g]` node.
    fn encode(&self, g: &mut Graph, rgb: Var) -> Var;
}

/// Source of text and image embeddings.
///
/// Implementations must be deterministic and safe for concurrent reads.
pub trait EmbeddingProvider: Send + Sync {
    /// Identifier that changes whenever outputs could change.
    fn id(&self) -> String;
    /// `(D_g, D_l)`.
    fn dims(&self) -> (usize, usize);
    fn max_tokens(&self) -> usize;
    fn encode_text_global(&self, text: &str) -> Result<GlobalTextEmbedding>;
    fn encode_text_local(&self, text: &str) -> Result<LocalTextEmbedding>;
    fn encode_image(&self, img: &ImageRgb) -> Result<ImageEmbedding>;
    /// Graph version of [`EmbeddingProvider::encode_image`], if available.
    fn image_encoder(&self) -> Option<&dyn DiffImageEncoder> {
        None
    }
}

fn hash_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn gaussian_vec(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Side length of the pooled grid fed to the stub image projection.
const STUB_GRID: usize = 8;

/// Offline deterministic provider.
#[derive(Debug, Clone)]
pub struct StubProvider {
    dim_g: usize,
    dim_l: usize,
    seed: u64,
    max_tokens: usize,
    projection: Tensor,
}

/// Build a [`StubProvider`]; both dimensions must be at least 8.
pub fn stub_provider(dim_g: usize, dim_l: usize, seed: u64) -> Result<StubProvider> {
    if dim_g < 8 || dim_l < 8 {
        return Err(Error::Config(format!("embedding dims must be >= 8, got ({dim_g}, {dim_l})")));
    }
    let feat = 3 * STUB_GRID * STUB_GRID;
    let raw = gaussian_vec(hash_seed(&[b"image-projection", &seed.to_le_bytes()]), dim_g * feat);
    Ok(StubProvider { dim_g, dim_l, seed, max_tokens: 77, projection: Tensor::new(vec![dim_g, feat], raw) })
}

impl StubProvider {
    pub fn with_max_tokens(mut self, max_tokens: usize) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    fn word_vec(&self, tag: &[u8], word: &str, dim: usize) -> Vec<f64> {
        gaussian_vec(hash_seed(&[tag, &self.seed.to_le_bytes(), word.as_bytes()]), dim)
    }

    fn tokens_or_empty(text: &str) -> Vec<String> {
        let t = tokenize(text);
        if t.is_empty() {
            vec!["<empty>".to_string()]
        } else {
            t
        }
    }
}

impl EmbeddingProvider for StubProvider {
    fn id(&self) -> String {
        format!("stub-{}x{}-s{}-t{}", self.dim_g, self.dim_l, self.seed, self.max_tokens)
    }

    fn dims(&self) -> (usize, usize) {
        (self.dim_g, self.dim_l)
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn encode_text_global(&self, text: &str) -> Result<GlobalTextEmbedding> {
        let mut acc = vec![0.0; self.dim_g];
        for w in Self::tokens_or_empty(text) {
            acc.iter_mut().zip(self.word_vec(b"global", &w, self.dim_g)).for_each(|(a, b)| *a += b);
        }
        Ok(GlobalTextEmbedding { vector: normalized(acc), provenance: self.id() })
    }

    fn encode_text_local(&self, text: &str) -> Result<LocalTextEmbedding> {
        let toks = Self::tokens_or_empty(text);
        let mut data = Vec::with_capacity(toks.len() * self.dim_l);
        for w in &toks {
            data.extend(normalized(self.word_vec(b"local", w, self.dim_l)));
        }
        Ok(LocalTextEmbedding { tokens: Tensor::new(vec![toks.len(), self.dim_l], data), provenance: self.id() })
    }

    fn encode_image(&self, img: &ImageRgb) -> Result<ImageEmbedding> {
        let mut g = Graph::new();
        let x = g.constant(img.tensor().clone());
        let e = self.encode(&mut g, x);
        Ok(ImageEmbedding { vector: g.value(e).data().to_vec() })
    }

    fn image_encoder(&self) -> Option<&dyn DiffImageEncoder> {
        Some(self)
    }
}

/// `v / ‖v‖` on the tape, with a tiny floor on the norm.
pub fn graph_normalize(g: &mut Graph, v: Var) -> Var {
    let d = g.value(v).len();
    let sq = g.mul(v, v);
    let s = g.sum(sq);
    let s = g.offset(s, 1e-12);
    let n = g.sqrt(s);
    let one = g.constant(Tensor::scalar(1.0));
    let inv = g.div(one, n);
    let row = g.reshape(v, &[1, 1, d]);
    let out = g.mul_channel(row, inv);
    g.reshape(out, &[d])
}

impl DiffImageEncoder for StubProvider {
    fn encode(&self, g: &mut Graph, rgb: Var) -> Var {
        let pooled = g.adaptive_avg_pool(rgb, STUB_GRID);
        let centred = g.offset(pooled, -0.5);
        let feat = 3 * STUB_GRID * STUB_GRID;
        let col = g.reshape(centred, &[feat, 1]);
        let p = g.constant(self.projection.clone());
        let proj = g.matmul(p, col, false, false);
        let flat = g.reshape(proj, &[self.dim_g]);
        graph_normalize(g, flat)
    }
}

/// Wraps a provider so that chosen texts embed to the embedding of a
/// chosen image, emulating an aligned vision-language space.
pub struct AnchoredProvider<P> {
    inner: P,
    anchors: HashMap<String, Vec<f64>>,
    tag: String,
}

impl<P: EmbeddingProvider> AnchoredProvider<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, anchors: HashMap::new(), tag: String::new() }
    }

    /// Make `text` embed to `encode_image(img)`.
    pub fn anchor(&mut self, text: &str, img: &ImageRgb) -> Result<()> {
        let v = self.inner.encode_image(img)?.vector;
        self.anchors.insert(text.to_string(), v);
        let mut h = Sha256::new();
        let mut all: Vec<(&String, &Vec<f64>)> = self.anchors.iter().collect();
        all.sort_by(|a, b| a.0.cmp(b.0));
        for (k, v) in all {
            h.update(k.as_bytes());
            v.iter().for_each(|x| h.update(x.to_le_bytes()));
        }
        self.tag = hex::encode(&h.finalize()[..8]);
        Ok(())
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for AnchoredProvider<P> {
    fn id(&self) -> String {
        format!("{}+anchored-{}", self.inner.id(), self.tag)
    }

    fn dims(&self) -> (usize, usize) {
        self.inner.dims()
    }

    fn max_tokens(&self) -> usize {
        self.inner.max_tokens()
    }

    fn encode_text_global(&self, text: &str) -> Result<GlobalTextEmbedding> {
        match self.anchors.get(text) {
            Some(v) => Ok(GlobalTextEmbedding { vector: v.clone(), provenance: self.id() }),
            None => self.inner.encode_text_global(text),
        }
    }

    fn encode_text_local(&self, text: &str) -> Result<LocalTextEmbedding> {
        self.inner.encode_text_local(text)
    }

    fn encode_image(&self, img: &ImageRgb) -> Result<ImageEmbedding> {
        self.inner.encode_image(img)
    }

    fn image_encoder(&self) -> Option<&dyn DiffImageEncoder> {
        self.inner.image_encoder()
    }
}

impl EmbeddingProvider for Box<dyn EmbeddingProvider> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn dims(&self) -> (usize, usize) {
        (**self).dims()
    }
    fn max_tokens(&self) -> usize {
        (**self).max_tokens()
    }
    fn encode_text_global(&self, text: &str) -> Result<GlobalTextEmbedding> {
        (**self).encode_text_global(text)
    }
    fn encode_text_local(&self, text: &str) -> Result<LocalTextEmbedding> {
        (**self).encode_text_local(text)
    }
    fn encode_image(&self, img: &ImageRgb) -> Result<ImageEmbedding> {
        (**self).encode_image(img)
    }
    fn image_encoder(&self) -> Option<&dyn DiffImageEncoder> {
        (**self).image_encoder()
    }
}

/// Content-addressed on-disk cache in front of another provider.
pub struct CachedProvider<P> {
    inner: P,
    dir: PathBuf,
    misses: AtomicUsize,
}

const CACHE_MAGIC: &[u8; 4] = b"AWEC";

/// Wrap `provider` with a cache stored under `store_path`.
pub fn embedding_cache<P: EmbeddingProvider>(provider: P, store_path: impl AsRef<Path>) -> Result<CachedProvider<P>> {
    let dir = store_path.as_ref().to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&dir, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&dir, e))?;
    Ok(CachedProvider { inner: provider, dir, misses: AtomicUsize::new(0) })
}

impl<P: EmbeddingProvider> CachedProvider<P> {
    /// Number of lookups that had to call the wrapped provider.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    fn key(&self, kind: &str, payload: &[u8]) -> PathBuf {
        let mut h = Sha256::new();
        for part in [self.inner.id().as_bytes(), kind.as_bytes(), payload] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        self.dir.join(format!("{}.bin", hex::encode(h.finalize())))
    }

    fn read(path: &Path) -> Option<(Vec<usize>, Vec<f64>)> {
        let bytes = fs::read(path).ok()?;
        if bytes.len() < 4 + 8 + 32 || &bytes[..4] != CACHE_MAGIC {
            return None;
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return None;
        }
        let rank = u64::from_le_bytes(body[4..12].try_into().ok()?) as usize;
        let mut off = 12;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(body.get(off..off + 8)?.try_into().ok()?) as usize);
            off += 8;
        }
        let n: usize = shape.iter().product();
        if body.len() != off + 8 * n {
            return None;
        }
        let data = body[off..].chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Some((shape, data))
    }

    fn write(&self, path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
        let mut body = CACHE_MAGIC.to_vec();
        body.extend((shape.len() as u64).to_le_bytes());
        shape.iter().for_each(|s| body.extend((*s as u64).to_le_bytes()));
        data.iter().for_each(|v| body.extend(v.to_le_bytes()));
        let sum = Sha256::digest(&body);
        body.extend_from_slice(&sum);
        // write-then-rename keeps concurrent readers from seeing partial files
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, &body).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn cached(
        &self,
        kind: &str,
        payload: &[u8],
        compute: impl FnOnce() -> Result<(Vec<usize>, Vec<f64>)>,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let path = self.key(kind, payload);
        if let Some(hit) = Self::read(&path) {
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let (shape, data) = compute()?;
        self.write(&path, &shape, &data)?;
        Ok((shape, data))
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedProvider<P> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn dims(&self) -> (usize, usize) {
        self.inner.dims()
    }

    fn max_tokens(&self) -> usize {
        self.inner.max_tokens()
    }

    fn encode_text_global(&self, text: &str) -> Result<GlobalTextEmbedding> {
        let (_, v) = self.cached("global", text.as_bytes(), || {
            let e = self.inner.encode_text_global(text)?;
            Ok((vec![e.vector.len()], e.vector))
        })?;
        Ok(GlobalTextEmbedding { vector: v, provenance: self.id() })
    }

    fn encode_text_local(&self, text: &str) -> Result<LocalTextEmbedding> {
        let (shape, v) = self.cached("local", text.as_bytes(), || {
            let e = self.inner.encode_text_local(text)?;
            Ok((e.tokens.shape().to_vec(), e.tokens.into_data()))
        })?;
        Ok(LocalTextEmbedding { tokens: Tensor::new(shape, v), provenance: self.id() })
    }

    fn encode_image(&self, img: &ImageRgb) -> Result<ImageEmbedding> {
        let mut payload = Vec::with_capacity(8 * (img.tensor().len() + 2));
        payload.extend((img.height() as u64).to_le_bytes());
        payload.extend((img.width() as u64).to_le_bytes());
        img.tensor().data().iter().for_each(|v| payload.extend(v.to_le_bytes()));
        let (_, v) = self.cached("image", &payload, || {
            let e = self.inner.encode_image(img)?;
            Ok((vec![e.vector.len()], e.vector))
        })?;
        Ok(ImageEmbedding { vector: v })
    }

    fn image_encoder(&self) -> Option<&dyn DiffImageEncoder> {
        self.inner.image_encoder()
    }
}

/// Ways of degrading the text input for robustness studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    /// Caption and detail replaced by unrelated text.
    Noisy,
    /// Detail cut to the first half of its words.
    Reduced,
    /// Detail padded with repetition and filler up to the token budget.
    Augmented,
}

impl std::str::FromStr for TextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noisy" => Ok(Self::Noisy),
            "reduced" => Ok(Self::Reduced),
            "augmented" => Ok(Self::Augmented),
            other => Err(Error::Config(format!("unknown text mode `{other}`"))),
        }
    }
}

fn unrelated_words(rng: &mut ChaCha8Rng, count: usize) -> String {
    let mut lines: Vec<&str> = UNRELATED.lines().filter(|l| !l.trim().is_empty()).collect();
    lines.shuffle(rng);
    let mut words: Vec<&str> = Vec::new();
    for line in lines.iter().cycle() {
        if words.len() >= count.max(1) {
            break;
        }
        words.extend(line.split_whitespace());
    }
    words.shuffle(rng);
    words.truncate(count.max(1));
    words.join(" ")
}

/// Degrade the text of a bundle. `max_tokens` bounds augmented and noisy
/// outputs.
pub fn corrupt_text(bundle: &TextBundle, mode: TextMode, seed: u64, max_tokens: usize) -> TextBundle {
    let mut out = bundle.clone();
    match mode {
        TextMode::Noisy => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_cap = bundle.caption.split_whitespace().count().min(max_tokens);
            let n_det = bundle.detail.split_whitespace().count().min(max_tokens);
            out.caption = unrelated_words(&mut rng, n_cap);
            out.detail = unrelated_words(&mut rng, n_det);
        }
        TextMode::Reduced => {
            let words: Vec<&str> = bundle.detail.split_whitespace().collect();
            out.detail = words[..words.len() / 2].join(" ");
        }
        TextMode::Augmented => {
            let mut text = bundle.detail.trim().to_string();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut fillers: Vec<&str> = FILLERS.to_vec();
            fillers.shuffle(&mut rng);
            let mut i = 0;
            loop {
                let clause = if i % 2 == 0 { fillers[(i / 2) % fillers.len()] } else { bundle.detail.trim() };
                let candidate = format!("{text}, {clause}");
                if clause.is_empty() || tokenize(&candidate).len() > max_tokens {
                    break;
                }
                text = candidate;
                i += 1;
            }
            if tokenize(&text).len() <= max_tokens {
                out.detail = text;
            }
        }
    }
    out
}
