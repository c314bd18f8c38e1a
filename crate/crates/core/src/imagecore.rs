//! Images, color transforms, cropping and PNG I/O.
//!
//! Pixels are stored channel-major as `f64` in `[0, 1]`; quantization to
//! 8 bits happens only when reading or writing files.

use std::path::Path;

use image::{DynamicImage, ImageFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// BT.601 luma weights.
const KR: f64 = 0.299;
const KB: f64 = 0.114;
const KG: f64 = 1.0 - KR - KB;

fn check_unit_range(t: &Tensor) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::DimMismatch(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

/// An RGB image, `[3, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb(Tensor);

/// A single-channel image, `[1, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGray(Tensor);

impl ImageRgb {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 || t.shape()[0] != 3 || t.shape()[1] == 0 || t.shape()[2] == 0 {
            return Err(Error::ShapeMismatch(format!("RGB image must be [3, H, W], got {:?}", t.shape())));
        }
        check_unit_range(&t)?;
        Ok(Self(t))
    }

    /// Clamp every value into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(t: Tensor) -> Result<Self> {
        Self::new(t.map(clamp_unit))
    }

    pub fn filled(h: usize, w: usize, rgb: [f64; 3]) -> Self {
        let mut t = Tensor::zeros(&[3, h, w]);
        for (c, v) in rgb.iter().enumerate() {
            t.channel_mut(c).fill(*v);
        }
        Self::new(t).expect("fill values must be in [0, 1]")
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// BT.601 luma plane as `[1, H, W]`.
    pub fn luminance(&self) -> ImageGray {
        let (h, w) = self.dims();
        let (r, g, b) = (self.0.channel(0), self.0.channel(1), self.0.channel(2));
        let data = (0..h * w).map(|i| clamp_unit(KR * r[i] + KG * g[i] + KB * b[i])).collect();
        ImageGray(Tensor::new(vec![1, h, w], data))
    }
}

impl ImageGray {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 || t.shape()[0] != 1 || t.shape()[1] == 0 || t.shape()[2] == 0 {
            return Err(Error::ShapeMismatch(format!("gray image must be [1, H, W], got {:?}", t.shape())));
        }
        check_unit_range(&t)?;
        Ok(Self(t))
    }

    pub fn from_clamped(t: Tensor) -> Result<Self> {
        Self::new(t.map(clamp_unit))
    }

    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Self::new(Tensor::full(&[1, h, w], v)).expect("fill value must be in [0, 1]")
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Replicate to three channels.
    pub fn to_rgb(&self) -> ImageRgb {
        let p = self.0.data();
        let mut data = Vec::with_capacity(3 * p.len());
        for _ in 0..3 {
            data.extend_from_slice(p);
        }
        ImageRgb(Tensor::new(vec![3, self.height(), self.width()], data))
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Registered visible/infrared frames with optional clean counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub visible: ImageRgb,
    pub infrared: ImageGray,
    pub clean_visible: Option<ImageRgb>,
    pub clean_infrared: Option<ImageGray>,
}

impl ImagePair {
    pub fn new(
        id: impl Into<String>,
        visible: ImageRgb,
        infrared: ImageGray,
        clean_visible: Option<ImageRgb>,
        clean_infrared: Option<ImageGray>,
    ) -> Result<Self> {
        let dims = visible.dims();
        let mut all = vec![("infrared", infrared.dims())];
        if let Some(c) = &clean_visible {
            all.push(("clean visible", c.dims()));
        }
        if let Some(c) = &clean_infrared {
            all.push(("clean infrared", c.dims()));
        }
        for (what, d) in all {
            if d != dims {
                return Err(Error::ShapeMismatch(format!(
                    "{what} is {}x{}, visible is {}x{}",
                    d.0, d.1, dims.0, dims.1
                )));
            }
        }
        Ok(Self { id: id.into(), visible, infrared, clean_visible, clean_infrared })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.visible.dims()
    }
}

/// Full-range BT.601 RGB → YCbCr. Chroma is centred on 0.5.
pub fn rgb_to_ycbcr(img: &ImageRgb) -> Tensor {
    let (h, w) = img.dims();
    let t = img.tensor();
    let (r, g, b) = (t.channel(0), t.channel(1), t.channel(2));
    let mut out = Tensor::zeros(&[3, h, w]);
    for i in 0..h * w {
        let (y, cb, cr) = ycbcr_px(r[i], g[i], b[i]);
        out.data_mut()[i] = y;
        out.data_mut()[h * w + i] = cb;
        out.data_mut()[2 * h * w + i] = cr;
    }
    out
}

fn ycbcr_px(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let y = KR * r + KG * g + KB * b;
    let cb = 0.5 + (b - y) / (2.0 * (1.0 - KB));
    let cr = 0.5 + (r - y) / (2.0 * (1.0 - KR));
    (y, cb, cr)
}

fn rgb_px(y: f64, cb: f64, cr: f64) -> (f64, f64, f64) {
    let r = y + 2.0 * (1.0 - KR) * (cr - 0.5);
    let b = y + 2.0 * (1.0 - KB) * (cb - 0.5);
    let g = (y - KR * r - KB * b) / KG;
    (r, g, b)
}

/// Inverse of [`rgb_to_ycbcr`] without clamping.
pub fn ycbcr_to_rgb_unclamped(ycc: &Tensor) -> Result<Tensor> {
    if ycc.shape().len() != 3 || ycc.shape()[0] != 3 {
        return Err(Error::ShapeMismatch(format!("YCbCr must be [3, H, W], got {:?}", ycc.shape())));
    }
    let (_, h, w) = ycc.chw();
    let mut out = Tensor::zeros(&[3, h, w]);
    for i in 0..h * w {
        let (r, g, b) = rgb_px(ycc.data()[i], ycc.data()[h * w + i], ycc.data()[2 * h * w + i]);
        out.data_mut()[i] = r;
        out.data_mut()[h * w + i] = g;
        out.data_mut()[2 * h * w + i] = b;
    }
    Ok(out)
}

/// Inverse of [`rgb_to_ycbcr`], clamped to `[0, 1]`.
pub fn ycbcr_to_rgb(ycc: &Tensor) -> Result<ImageRgb> {
    ImageRgb::from_clamped(ycbcr_to_rgb_unclamped(ycc)?)
}

/// `(3x3 matrix as a [3, 3, 1, 1] conv weight, bias)` for RGB → YCbCr.
fn ycbcr_affine() -> (Tensor, Tensor) {
    let sb = 1.0 / (2.0 * (1.0 - KB));
    let sr = 1.0 / (2.0 * (1.0 - KR));
    let m = [
        KR,
        KG,
        KB,
        -KR * sb,
        -KG * sb,
        (1.0 - KB) * sb,
        (1.0 - KR) * sr,
        -KG * sr,
        -KB * sr,
    ];
    (Tensor::new(vec![3, 3, 1, 1], m.to_vec()), Tensor::new(vec![3], vec![0.0, 0.5, 0.5]))
}

/// `(matrix, bias)` for YCbCr → RGB, derived from the same luma weights.
fn rgb_affine() -> (Tensor, Tensor) {
    let ar = 2.0 * (1.0 - KR);
    let ab = 2.0 * (1.0 - KB);
    // rows: R, G, B; columns: Y, Cb, Cr (centred)
    let m = [
        1.0,
        0.0,
        ar,
        1.0,
        -KB * ab / KG,
        -KR * ar / KG,
        1.0,
        ab,
        0.0,
    ];
    let w = Tensor::new(vec![3, 3, 1, 1], m.to_vec());
    let bias: Vec<f64> = (0..3).map(|r| -0.5 * (m[r * 3 + 1] + m[r * 3 + 2])).collect();
    (w, Tensor::new(vec![3], bias))
}

/// Differentiable RGB → YCbCr on a `[3, H, W]` node.
pub fn graph_rgb_to_ycbcr(g: &mut Graph, rgb: Var) -> Var {
    let (w, b) = ycbcr_affine();
    let w = g.constant(w);
    let b = g.constant(b);
    g.conv2d(rgb, w, Some(b), ConvSpec::same(1))
}

/// Differentiable YCbCr → RGB, clamped to `[0, 1]`.
pub fn graph_ycbcr_to_rgb(g: &mut Graph, ycc: Var) -> Var {
    let (w, b) = rgb_affine();
    let w = g.constant(w);
    let b = g.constant(b);
    let rgb = g.conv2d(ycc, w, Some(b), ConvSpec::same(1));
    g.clamp(rgb, 0.0, 1.0)
}

/// Differentiable BT.601 luma of a `[3, H, W]` node, `[1, H, W]`.
pub fn graph_luminance(g: &mut Graph, rgb: Var) -> Var {
    let w = g.constant(Tensor::new(vec![1, 3, 1, 1], vec![KR, KG, KB]));
    g.conv2d(rgb, w, None, ConvSpec::same(1))
}

/// Window `size × size` at `(y, x)` of a `[C, H, W]` tensor.
pub fn crop_tensor(t: &Tensor, y: usize, x: usize, size_h: usize, size_w: usize) -> Tensor {
    let (c, h, w) = t.chw();
    assert!(y + size_h <= h && x + size_w <= w, "crop window out of bounds");
    let mut data = Vec::with_capacity(c * size_h * size_w);
    for ch in 0..c {
        let plane = t.channel(ch);
        for row in y..y + size_h {
            data.extend_from_slice(&plane[row * w + x..row * w + x + size_w]);
        }
    }
    Tensor::new(vec![c, size_h, size_w], data)
}

/// Crop offsets drawn from `rng` for a `size × size` window.
pub fn crop_offsets(rng: &mut impl Rng, (h, w): (usize, usize), size: usize) -> Result<(usize, usize)> {
    if size == 0 || size > h || size > w {
        return Err(Error::CropTooLarge { size, height: h, width: w });
    }
    Ok((rng.random_range(0..=h - size), rng.random_range(0..=w - size)))
}

/// Crop every image of the pair at one shared offset.
pub fn crop_pair_at(pair: &ImagePair, y: usize, x: usize, size: usize) -> ImagePair {
    let rgb = |i: &ImageRgb| ImageRgb(crop_tensor(i.tensor(), y, x, size, size));
    let gray = |i: &ImageGray| ImageGray(crop_tensor(i.tensor(), y, x, size, size));
    ImagePair {
        id: pair.id.clone(),
        visible: rgb(&pair.visible),
        infrared: gray(&pair.infrared),
        clean_visible: pair.clean_visible.as_ref().map(rgb),
        clean_infrared: pair.clean_infrared.as_ref().map(gray),
    }
}

/// Seeded random `size × size` crop shared by all images of the pair.
pub fn random_crop_pair(pair: &ImagePair, size: usize, seed: u64) -> Result<ImagePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (y, x) = crop_offsets(&mut rng, pair.dims(), size)?;
    Ok(crop_pair_at(pair, y, x, size))
}

/// An image read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedImage {
    Rgb(ImageRgb),
    Gray(ImageGray),
}

impl LoadedImage {
    pub fn into_rgb(self) -> ImageRgb {
        match self {
            Self::Rgb(i) => i,
            Self::Gray(g) => g.to_rgb(),
        }
    }

    pub fn into_gray(self) -> ImageGray {
        match self {
            Self::Rgb(i) => i.luminance(),
            Self::Gray(g) => g,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Self::Rgb(i) => i.dims(),
            Self::Gray(g) => g.dims(),
        }
    }
}

/// Read an 8-bit grayscale or RGB(A) PNG. Alpha is discarded.
pub fn load_image(path: impl AsRef<Path>) -> Result<LoadedImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| {
        Error::UnsupportedFormat { path: path.to_path_buf(), reason: e.to_string() }
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let data = buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            Ok(LoadedImage::Gray(ImageGray(Tensor::new(vec![1, h, w], data))))
        }
        DynamicImage::ImageLumaA8(_) => {
            let buf = img.to_luma8();
            let data = buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            Ok(LoadedImage::Gray(ImageGray(Tensor::new(vec![1, h, w], data))))
        }
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            let raw = img.to_rgb8().into_raw();
            let mut t = Tensor::zeros(&[3, h, w]);
            for (i, px) in raw.chunks(3).enumerate() {
                for c in 0..3 {
                    t.data_mut()[c * h * w + i] = px[c] as f64 / 255.0;
                }
            }
            Ok(LoadedImage::Rgb(ImageRgb(t)))
        }
        other => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("only 8-bit gray/RGB PNG is supported, got {:?}", other.color()),
        }),
    }
}

fn quantize(v: f64) -> u8 {
    (clamp_unit(v) * 255.0).round() as u8
}

fn write_png(path: &Path, raw: &[u8], w: usize, h: usize, color: image::ExtendedColorType) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer_with_format(path, raw, w as u32, h as u32, color, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedFormat { path: path.to_path_buf(), reason: other.to_string() },
    })
}

/// Write an RGB image as an 8-bit PNG.
pub fn save_rgb(img: &ImageRgb, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = img.dims();
    let t = img.tensor();
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            raw.push(quantize(t.data()[c * h * w + i]));
        }
    }
    write_png(path.as_ref(), &raw, w, h, image::ExtendedColorType::Rgb8)
}

/// Write a single-channel image as an 8-bit grayscale PNG.
pub fn save_gray(img: &ImageGray, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = img.dims();
    let raw: Vec<u8> = img.tensor().data().iter().map(|&v| quantize(v)).collect();
    write_png(path.as_ref(), &raw, w, h, image::ExtendedColorType::L8)
}

/// Write either kind of image.
pub fn save_image(img: &LoadedImage, path: impl AsRef<Path>) -> Result<()> {
    match img {
        LoadedImage::Rgb(i) => save_rgb(i, path),
        LoadedImage::Gray(g) => save_gray(g, path),
    }
}
