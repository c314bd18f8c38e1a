//! Synthetic rain, haze and snow on clean visible frames, plus a toy scene
//! generator and a dataset builder that writes paired data and text sidecars.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{load_image, save_gray, save_rgb, ImageGray, ImagePair, ImageRgb};
use crate::tensor::Tensor;
use crate::textcond::{save_text_bundle, TextBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherKind {
    Rain,
    Haze,
    Snow,
}

impl WeatherKind {
    pub const ALL: [WeatherKind; 3] = [WeatherKind::Rain, WeatherKind::Haze, WeatherKind::Snow];

    pub fn name(self) -> &'static str {
        match self {
            WeatherKind::Rain => "rain",
            WeatherKind::Haze => "haze",
            WeatherKind::Snow => "snow",
        }
    }
}

impl fmt::Display for WeatherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeatherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rain" => Ok(WeatherKind::Rain),
            "haze" => Ok(WeatherKind::Haze),
            "snow" => Ok(WeatherKind::Snow),
            other => Err(Error::Config(format!("unknown weather kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: WeatherKind,
    pub severity: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: WeatherKind, severity: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&severity) {
            return Err(Error::Config(format!("severity {severity} outside [0, 1]")));
        }
        Ok(Self { kind, severity, seed })
    }
}

/// Apply the weather in `spec`. Severity 0 returns the input unchanged.
pub fn degrade(clean: &ImageRgb, spec: &DegradationSpec) -> ImageRgb {
    if spec.severity <= 0.0 {
        return clean.clone();
    }
    let (h, w) = clean.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let src = clean.tensor();
    let mut out = src.clone();
    match spec.kind {
        WeatherKind::Rain => {
            let streaks = rain_mask(h, w, spec.severity, &mut rng);
            for c in 0..3 {
                for (o, s) in out.channel_mut(c).iter_mut().zip(&streaks) {
                    *o += s;
                }
            }
        }
        WeatherKind::Haze => {
            let t = haze_transmission(h, w, spec);
            let a = haze_airlight(spec);
            for c in 0..3 {
                for (o, t) in out.channel_mut(c).iter_mut().zip(&t) {
                    *o = *o * t + a * (1.0 - t);
                }
            }
        }
        WeatherKind::Snow => {
            let alpha = snow_alpha(h, w, spec.severity, &mut rng);
            for c in 0..3 {
                for (o, a) in out.channel_mut(c).iter_mut().zip(&alpha) {
                    *o = *o * (1.0 - a) + 0.95 * a;
                }
            }
        }
    }
    ImageRgb::from_clamped(out).expect("shape preserved")
}

fn rain_mask(h: usize, w: usize, severity: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut mask = vec![0.0f64; h * w];
    let count = ((h * w) as f64 * severity / 40.0).ceil() as usize;
    let theta = rng.random_range(70.0f64..110.0).to_radians();
    for _ in 0..count {
        let jitter = rng.random_range(-3.0f64..3.0).to_radians();
        let (dx, dy) = ((theta + jitter).cos(), (theta + jitter).sin());
        let len = rng.random_range(h as f64 / 8.0..h as f64 / 3.0 + 1.0);
        let (x0, y0) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let intensity = severity * rng.random_range(0.25..0.6);
        let steps = (len * 2.0).ceil() as usize;
        for s in 0..=steps {
            let t = s as f64 / 2.0;
            let (x, y) = (x0 + dx * t, y0 + dy * t);
            if x < 0.0 || y < 0.0 {
                continue;
            }
            let (xi, yi) = (x as usize, y as usize);
            if xi < w && yi < h {
                let m = &mut mask[yi * w + xi];
                *m = m.max(intensity);
            }
        }
    }
    mask
}

/// Smooth depth proxy in `[0.25, 1]`, larger toward the top of the frame.
fn depth_proxy(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6861_7a65);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h.max(1) as f64, (i % w) as f64 / w.max(1) as f64);
            let wobble: f64 =
                waves.iter().map(|(fy, fx, p)| (std::f64::consts::TAU * (fy * y + fx * x) + p).sin()).sum::<f64>() / 3.0;
            let d = 0.75 * (1.0 - y) + 0.25 * (0.5 + 0.5 * wobble);
            0.25 + 0.75 * d.clamp(0.0, 1.0)
        })
        .collect()
}

/// Per-pixel transmission `t = (1 - severity)^(2 d)`.
pub fn haze_transmission(h: usize, w: usize, spec: &DegradationSpec) -> Vec<f64> {
    let base = 1.0 - spec.severity;
    depth_proxy(h, w, spec.seed).into_iter().map(|d| base.powf(2.0 * d)).collect()
}

/// Atmospheric light, within 0.03 of 0.9.
pub fn haze_airlight(spec: &DegradationSpec) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x4149_5231);
    0.9 + rng.random_range(-0.03..0.03)
}

fn snow_alpha(h: usize, w: usize, severity: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut alpha = vec![0.0f64; h * w];
    let count = ((h * w) as f64 * severity / 60.0).ceil() as usize;
    for _ in 0..count {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let scale = 1.0 + severity;
        let (rx, ry) = (rng.random_range(0.6..2.2) * scale, rng.random_range(0.6..2.2) * scale);
        let opacity = rng.random_range(0.6..1.0);
        let (y0, y1) = ((cy - ry).floor().max(0.0) as usize, ((cy + ry).ceil() as usize).min(h));
        let (x0, x1) = ((cx - rx).floor().max(0.0) as usize, ((cx + rx).ceil() as usize).min(w));
        for y in y0..y1 {
            for x in x0..x1 {
                let q = ((x as f64 + 0.5 - cx) / rx).powi(2) + ((y as f64 + 0.5 - cy) / ry).powi(2);
                if q < 1.0 {
                    let a = &mut alpha[y * w + x];
                    *a = a.max(opacity * (1.0 - q).powi(2));
                }
            }
        }
    }
    alpha
}

/// Lower infrared contrast around the mean by `amount ∈ [0, 1]` (up to half).
pub fn reduce_ir_contrast(ir: &ImageGray, amount: f64) -> ImageGray {
    let m = ir.tensor().mean();
    let k = 1.0 - 0.5 * amount.clamp(0.0, 1.0);
    ImageGray::from_clamped(ir.tensor().map(|v| m + (v - m) * k)).expect("shape preserved")
}

/// A generated clean scene and its short description.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub visible: ImageRgb,
    pub infrared: ImageGray,
    pub description: String,
}

const SCENES: [&str; 4] = ["street", "road", "parking lot", "field"];
const OBJECTS: [(&str, [f64; 3]); 4] = [
    ("a pedestrian", [0.55, 0.35, 0.3]),
    ("a car", [0.7, 0.1, 0.1]),
    ("a cyclist", [0.2, 0.3, 0.6]),
    ("a dog", [0.5, 0.4, 0.2]),
];

/// Sky, ground, a few buildings and one to three warm objects. Infrared
/// follows scene luminance with warm objects near white.
pub fn synthetic_scene(h: usize, w: usize, seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = SCENES[rng.random_range(0..SCENES.len())];
    let horizon = rng.random_range(0.3..0.5) * h as f64;
    let sky = [rng.random_range(0.45..0.65), rng.random_range(0.6..0.75), rng.random_range(0.8..0.95)];
    let ground = [rng.random_range(0.25..0.45), rng.random_range(0.3..0.45), rng.random_range(0.2..0.35)];
    let mut vi = Tensor::zeros(&[3, h, w]);
    let mut ir = Tensor::zeros(&[1, h, w]);
    let put = |t: &mut Tensor, c: usize, y: usize, x: usize, v: f64| t.channel_mut(c)[y * w + x] = v;
    for y in 0..h {
        for x in 0..w {
            let below = y as f64 >= horizon;
            let base = if below { ground } else { sky };
            let shade = if below { 0.9 + 0.1 * (y as f64 - horizon) / h as f64 } else { 1.0 - 0.2 * y as f64 / h as f64 };
            for c in 0..3 {
                put(&mut vi, c, y, x, base[c] * shade);
            }
            put(&mut ir, 0, y, x, if below { 0.35 } else { 0.15 });
        }
    }
    let n_build = rng.random_range(1..4);
    for _ in 0..n_build {
        let bw = rng.random_range(w / 8 + 1..w / 3 + 2);
        let bh = rng.random_range(h / 6 + 1..h / 2 + 2);
        let x0 = rng.random_range(0..w);
        let y1 = horizon.ceil() as usize;
        let col = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.6), rng.random_range(0.3..0.6)];
        for y in y1.saturating_sub(bh)..y1.min(h) {
            for x in x0..(x0 + bw).min(w) {
                let stripe = if (x - x0) % 4 == 1 && (y % 4) == 1 { 0.8 } else { 1.0 };
                for c in 0..3 {
                    put(&mut vi, c, y, x, col[c] * stripe);
                }
                put(&mut ir, 0, y, x, 0.4);
            }
        }
    }
    let n_obj = rng.random_range(1..4);
    let mut names = Vec::new();
    for _ in 0..n_obj {
        let (name, col) = OBJECTS[rng.random_range(0..OBJECTS.len())];
        names.push(name);
        let cy = rng.random_range(horizon..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let (ry, rx) = (rng.random_range(0.06..0.14) * h as f64 + 1.0, rng.random_range(0.04..0.1) * w as f64 + 1.0);
        for y in 0..h {
            for x in 0..w {
                let q = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                if q < 1.0 {
                    for c in 0..3 {
                        put(&mut vi, c, y, x, col[c]);
                    }
                    put(&mut ir, 0, y, x, 0.85 + 0.1 * (1.0 - q));
                }
            }
        }
    }
    names.sort_unstable();
    names.dedup();
    let description = format!("a {scene} with {}", join_words(&names));
    SyntheticScene {
        visible: ImageRgb::from_clamped(vi).expect("valid shape"),
        infrared: ImageGray::from_clamped(ir).expect("valid shape"),
        description,
    }
}

fn join_words(items: &[&str]) -> String {
    match items {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Write `count` synthetic clean pairs as `dir/{vi,ir}/scene_NNNN.png` with
/// `dir/text/scene_NNNN.txt` descriptions.
pub fn write_synthetic_clean(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    for sub in ["vi", "ir", "text"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let id = format!("scene_{i:04}");
            let s = synthetic_scene(size, size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            save_rgb(&s.visible, dir.join("vi").join(format!("{id}.png")))?;
            save_gray(&s.infrared, dir.join("ir").join(format!("{id}.png")))?;
            let p = dir.join("text").join(format!("{id}.txt"));
            std::fs::write(&p, &s.description).map_err(|e| Error::io(&p, e))?;
            Ok(id)
        })
        .collect()
}

/// Paths of one dataset entry, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryPaths {
    pub vi: PathBuf,
    pub ir: PathBuf,
    pub clean_vi: PathBuf,
    pub clean_ir: PathBuf,
    pub text: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: WeatherKind,
    pub severity: f64,
    pub seed: u64,
    pub paths: EntryPaths,
}

/// The dataset index, stored as a JSON list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Load a manifest; relative entry paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<LoadedManifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Schema { path: path.to_path_buf(), reason: e.to_string() })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedManifest { manifest, root })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub root: PathBuf,
}

impl LoadedManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Degraded inputs with their clean counterparts.
    pub fn load_pair(&self, e: &ManifestEntry) -> Result<ImagePair> {
        let r = |p: &Path| load_image(self.resolve(p));
        ImagePair::new(
            e.id.clone(),
            r(&e.paths.vi)?.into_rgb(),
            r(&e.paths.ir)?.into_gray(),
            Some(r(&e.paths.clean_vi)?.into_rgb()),
            Some(r(&e.paths.clean_ir)?.into_gray()),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetOptions {
    pub per_type: usize,
    pub seed: u64,
    /// Inclusive severity range sampled per entry.
    pub severity: (f64, f64),
    /// Also lower infrared contrast by this amount.
    pub ir_contrast: Option<f64>,
}

impl DatasetOptions {
    pub fn new(per_type: usize, seed: u64) -> Self {
        Self { per_type, seed, severity: (0.35, 0.85), ir_contrast: None }
    }
}

fn severity_word(s: f64) -> &'static str {
    if s < 0.45 {
        "light"
    } else if s < 0.7 {
        "moderate"
    } else {
        "heavy"
    }
}

/// Template caption, detail and clean description for one entry.
pub fn template_bundle(id: &str, scene: &str, kind: WeatherKind, severity: f64) -> TextBundle {
    let word = severity_word(severity);
    let (caption, effect) = match kind {
        WeatherKind::Rain => (
            format!("{scene} in {word} rain"),
            "bright rain streaks cross the frame and hide fine edges",
        ),
        WeatherKind::Haze => (
            format!("{scene} in {word} haze"),
            "a gray veil lowers contrast and washes out distant colors",
        ),
        WeatherKind::Snow => (
            format!("{scene} in {word} snow"),
            "white snowflakes cover parts of the objects and the ground",
        ),
    };
    TextBundle {
        image_id: id.to_string(),
        caption,
        detail: format!(
            "{scene} degraded by {word} {kind}; {effect}. warm objects remain visible in the thermal view."
        ),
        clean_description: format!("{scene} on a clear day"),
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Degrade clean pairs from `clean_dir/{vi,ir}` into `out_dir` and write
/// `out_dir/manifest.json`.
pub fn build_dataset(clean_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>, per_type: usize, seed: u64) -> Result<Manifest> {
    build_dataset_with(clean_dir, out_dir, &DatasetOptions::new(per_type, seed))
}

pub fn build_dataset_with(clean_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>, opts: &DatasetOptions) -> Result<Manifest> {
    let (clean_dir, out_dir) = (clean_dir.as_ref(), out_dir.as_ref());
    let (lo, hi) = opts.severity;
    if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
        return Err(Error::Config(format!("severity range {lo}..{hi} outside [0, 1]")));
    }
    let sources = list_pngs(&clean_dir.join("vi"))?;
    if sources.is_empty() || opts.per_type == 0 {
        return Err(Error::EmptyDataset);
    }
    for s in &sources {
        let ir = clean_dir.join("ir").join(s.file_name().expect("file name"));
        if !ir.is_file() {
            let id = s.file_stem().expect("stem").to_string_lossy().into_owned();
            return Err(Error::MissingCounterpart { id, dir: clean_dir.join("ir") });
        }
    }
    for sub in ["vi", "ir", "clean_vi", "clean_ir", "text"] {
        std::fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir.join(sub), e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut jobs = Vec::new();
    for (k, kind) in WeatherKind::ALL.into_iter().enumerate() {
        for i in 0..opts.per_type {
            let src = sources[(k * opts.per_type + i) % sources.len()].clone();
            let severity = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let seed: u64 = rng.random();
            jobs.push((format!("{kind}_{i:04}"), kind, severity, seed, src));
        }
    }
    let entries = jobs
        .into_par_iter()
        .map(|(id, kind, severity, seed, src)| {
            let name = src.file_name().expect("file name");
            let clean_vi = load_image(&src)?.into_rgb();
            let clean_ir = load_image(clean_dir.join("ir").join(name))?.into_gray();
            if clean_vi.dims() != clean_ir.dims() {
                return Err(Error::ShapeMismatch(format!("{} has mismatched visible and infrared sizes", src.display())));
            }
            let spec = DegradationSpec::new(kind, severity, seed)?;
            let vi = degrade(&clean_vi, &spec);
            let ir = match opts.ir_contrast {
                Some(a) => reduce_ir_contrast(&clean_ir, a),
                None => clean_ir.clone(),
            };
            let stem = src.file_stem().expect("stem").to_string_lossy().into_owned();
            let label = clean_dir.join("text").join(format!("{stem}.txt"));
            let scene = match std::fs::read_to_string(&label) {
                Ok(s) if !s.trim().is_empty() => s.trim().to_string(),
                _ => "a scene".to_string(),
            };
            let paths = EntryPaths {
                vi: PathBuf::from("vi").join(format!("{id}.png")),
                ir: PathBuf::from("ir").join(format!("{id}.png")),
                clean_vi: PathBuf::from("clean_vi").join(format!("{id}.png")),
                clean_ir: PathBuf::from("clean_ir").join(format!("{id}.png")),
                text: PathBuf::from("text").join(format!("{id}.json")),
            };
            save_rgb(&vi, out_dir.join(&paths.vi))?;
            save_gray(&ir, out_dir.join(&paths.ir))?;
            save_rgb(&clean_vi, out_dir.join(&paths.clean_vi))?;
            save_gray(&clean_ir, out_dir.join(&paths.clean_ir))?;
            save_text_bundle(&template_bundle(&id, &scene, kind, severity), out_dir.join(&paths.text))?;
            Ok(ManifestEntry { id, kind, severity, seed, paths })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { entries };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
