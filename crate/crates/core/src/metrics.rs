//! Fusion-quality scores for `(fused, visible, infrared)` triples.
//!
//! All scores run on 8-bit quantized luminance (`round(255·Y)`, BT.601).
//! Parameter choices:
//!
//! * `qg`: Xydeas–Petrović edge preservation, 3×3 Sobel with replicated
//!   borders, `Γg=0.9994, κg=-15, σg=0.5`, `Γα=0.9879, κα=-22, σα=0.8`,
//!   weights `g^1`.
//! * `qm`: Wang–Liu multiscale metric on an orthonormal Haar pyramid of the
//!   `[0,1]`-scaled images, two levels, all level exponents 1.
//! * `qs`: Piella–Heijmans structural metric, 7×7 box windows, variance
//!   saliency.
//! * `qcv`: Chen–Varshney, Sobel saliency, 16×16 regions, Mannos–Sakrison
//!   contrast sensitivity `2.6(0.0192+0.114r)exp(-(0.114r)^1.1)` with
//!   `r = |k|/4` for FFT bin offset `k`. Lower is better.
//! * `vif`: pixel-domain multiscale VIF (4 scales, `σ_n²=2`), summed over
//!   the two sources.
//! * `ssim`: Gaussian 11×11, `σ=1.5`, `K=(0.01, 0.03)`, `L=255`, valid
//!   windows, averaged over the two sources. Images narrower than 11 px use
//!   a window as wide as the image.
//! * `scd`: `corr(F−B, A) + corr(F−A, B)`.
//!
//! A correlation or normalisation whose denominator is zero counts as 0.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{load_image, ImageGray, ImageRgb};

/// One scalar image plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w, "plane data length");
        Self { h, w, data }
    }

    /// 8-bit quantized gray levels in `0..=255`.
    pub fn from_gray(img: &ImageGray) -> Self {
        let (h, w) = img.dims();
        Self::new(h, w, img.tensor().data().iter().map(|v| (v * 255.0).round()).collect())
    }

    /// 8-bit quantized luminance.
    pub fn from_rgb(img: &ImageRgb) -> Self {
        Self::from_gray(&img.luminance())
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    fn clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.at(y, x)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.h, self.w, self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Self {
        Self::new(self.h, self.w, self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect())
    }

    fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    fn every_other(&self) -> Self {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(self.at(2 * y, 2 * x));
            }
        }
        Self::new(h, w, data)
    }
}

/// Normalized 1-D Gaussian taps of length `n`.
fn gauss_taps(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let t: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Separable correlation keeping only fully covered positions.
fn filter_valid(p: &Plane, taps: &[f64]) -> Plane {
    let n = taps.len();
    let (oh, ow) = (p.h + 1 - n, p.w + 1 - n);
    let mut rows = vec![0.0; p.h * ow];
    for y in 0..p.h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * p.at(y, x + k)).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    Plane::new(oh, ow, out)
}

/// Local means, variances and covariance under `taps`.
struct LocalStats {
    mu1: Plane,
    mu2: Plane,
    s11: Plane,
    s22: Plane,
    s12: Plane,
}

fn local_stats(a: &Plane, b: &Plane, taps: &[f64]) -> LocalStats {
    let mu1 = filter_valid(a, taps);
    let mu2 = filter_valid(b, taps);
    let s11 = filter_valid(&a.map(|v| v * v), taps).zip(&mu1, |e, m| e - m * m);
    let s22 = filter_valid(&b.map(|v| v * v), taps).zip(&mu2, |e, m| e - m * m);
    let s12 = filter_valid(&a.zip(b, |x, y| x * y), taps).zip(&mu1.zip(&mu2, |x, y| x * y), |e, m| e - m);
    LocalStats { mu1, mu2, s11, s22, s12 }
}

/// Mean SSIM between two 8-bit planes.
pub fn ssim(a: &Plane, b: &Plane) -> f64 {
    let n = 11.min(a.h).min(a.w);
    let st = local_stats(a, b, &gauss_taps(n, 1.5));
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let map: Vec<f64> = (0..st.mu1.data.len())
        .map(|i| {
            let (m1, m2) = (st.mu1.data[i], st.mu2.data[i]);
            ((2.0 * m1 * m2 + c1) * (2.0 * st.s12.data[i] + c2))
                / ((m1 * m1 + m2 * m2 + c1) * (st.s11.data[i] + st.s22.data[i] + c2))
        })
        .collect();
    map.iter().sum::<f64>() / map.len() as f64
}

fn sobel(p: &Plane) -> (Plane, Plane) {
    let mut gx = vec![0.0; p.h * p.w];
    let mut gy = vec![0.0; p.h * p.w];
    for y in 0..p.h as isize {
        for x in 0..p.w as isize {
            let v = |dy: isize, dx: isize| p.clamped(y + dy, x + dx);
            let i = y as usize * p.w + x as usize;
            gx[i] = (v(-1, 1) + 2.0 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1));
            gy[i] = (v(1, -1) + 2.0 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1));
        }
    }
    (Plane::new(p.h, p.w, gx), Plane::new(p.h, p.w, gy))
}

fn magnitude_orientation(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let (gx, gy) = sobel(p);
    gx.data
        .iter()
        .zip(&gy.data)
        .map(|(&sx, &sy)| {
            let alpha = if sx == 0.0 {
                if sy == 0.0 {
                    0.0
                } else {
                    std::f64::consts::FRAC_PI_2.copysign(sy)
                }
            } else {
                (sy / sx).atan()
            };
            ((sx * sx + sy * sy).sqrt(), alpha)
        })
        .unzip()
}

fn edge_preservation(src: &(Vec<f64>, Vec<f64>), fused: &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    let (gs, as_) = src;
    let (gf, af) = fused;
    (0..gs.len())
        .map(|i| {
            let g = if gs[i] > gf[i] {
                gf[i] / gs[i]
            } else if gf[i] > 0.0 {
                gs[i] / gf[i]
            } else {
                0.0
            };
            let a = 1.0 - (as_[i] - af[i]).abs() / std::f64::consts::FRAC_PI_2;
            let qg = 0.9994 / (1.0 + (-15.0 * (g - 0.5)).exp());
            let qa = 0.9879 / (1.0 + (-22.0 * (a - 0.8)).exp());
            qg * qa
        })
        .collect()
}

/// Edge-information preservation score.
pub fn qg(f: &Plane, a: &Plane, b: &Plane) -> f64 {
    let (mf, ma, mb) = (magnitude_orientation(f), magnitude_orientation(a), magnitude_orientation(b));
    let qa = edge_preservation(&ma, &mf);
    let qb = edge_preservation(&mb, &mf);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..qa.len() {
        num += qa[i] * ma.0[i] + qb[i] * mb.0[i];
        den += ma.0[i] + mb.0[i];
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Orthonormal Haar split, trimming odd edges. Returns `(ll, [lh, hl, hh])`.
fn haar_level(p: &Plane) -> (Plane, [Plane; 3]) {
    let (h, w) = (p.h / 2, p.w / 2);
    let mut bands = [vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]];
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (p.at(2 * y, 2 * x), p.at(2 * y, 2 * x + 1));
            let (c, d) = (p.at(2 * y + 1, 2 * x), p.at(2 * y + 1, 2 * x + 1));
            let i = y * w + x;
            bands[0][i] = (a + b + c + d) / 2.0;
            bands[1][i] = (a + b - c - d) / 2.0;
            bands[2][i] = (a - b + c - d) / 2.0;
            bands[3][i] = (a - b - c + d) / 2.0;
        }
    }
    let [ll, lh, hl, hh] = bands.map(|d| Plane::new(h, w, d));
    (ll, [lh, hl, hh])
}

/// Multiscale edge-preservation score.
pub fn qm(f: &Plane, a: &Plane, b: &Plane) -> f64 {
    let scale = |p: &Plane| p.map(|v| v / 255.0);
    let (mut f, mut a, mut b) = (scale(f), scale(a), scale(b));
    let mut q = 1.0;
    let mut levels = 0;
    while levels < 2 && f.h >= 2 && f.w >= 2 {
        let (fl, fd) = haar_level(&f);
        let (al, ad) = haar_level(&a);
        let (bl, bd) = haar_level(&b);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..fl.data.len() {
            let ep = |s: &[Plane; 3]| (0..3).map(|k| (-(s[k].data[i] - fd[k].data[i]).abs()).exp()).product::<f64>();
            let wt = |s: &[Plane; 3]| (0..3).map(|k| s[k].data[i].powi(2)).sum::<f64>();
            let (wa, wb) = (wt(&ad), wt(&bd));
            num += ep(&ad) * wa + ep(&bd) * wb;
            den += wa + wb;
        }
        q *= if den == 0.0 { 0.0 } else { num / den };
        (f, a, b) = (fl, al, bl);
        levels += 1;
    }
    if levels == 0 {
        0.0
    } else {
        q
    }
}

/// Universal quality index from window statistics.
fn uqi(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    let den = (vx + vy) * (mx * mx + my * my);
    if den == 0.0 {
        0.0
    } else {
        4.0 * cxy * mx * my / den
    }
}

/// Structural-similarity fusion score with variance saliency.
pub fn qs(f: &Plane, a: &Plane, b: &Plane) -> f64 {
    let n = 7.min(f.h).min(f.w);
    let taps = vec![1.0 / n as f64; n];
    let sa = local_stats(a, f, &taps);
    let sb = local_stats(b, f, &taps);
    let m = sa.mu1.data.len();
    let total: f64 = (0..m)
        .map(|i| {
            let (va, vb) = (sa.s11.data[i].max(0.0), sb.s11.data[i].max(0.0));
            let lambda = if va + vb == 0.0 { 0.5 } else { va / (va + vb) };
            let qa = uqi(sa.mu1.data[i], sa.mu2.data[i], va, sa.s22.data[i].max(0.0), sa.s12.data[i]);
            let qb = uqi(sb.mu1.data[i], sb.mu2.data[i], vb, sb.s22.data[i].max(0.0), sb.s12.data[i]);
            lambda * qa + (1.0 - lambda) * qb
        })
        .sum();
    total / m as f64
}

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
}

/// Contrast-sensitivity filtering of `p`.
fn csf_filter(p: &Plane) -> Plane {
    let (h, w) = (p.h, p.w);
    let mut buf: Vec<Complex<f64>> = p.data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut buf, h, w, false);
    for ky in 0..h {
        let fy = ky.min(h - ky) as f64;
        for kx in 0..w {
            let fx = kx.min(w - kx) as f64;
            let r = (fx * fx + fy * fy).sqrt() / 4.0;
            let s = 2.6 * (0.0192 + 0.114 * r) * (-(0.114 * r).powf(1.1)).exp();
            buf[ky * w + kx] *= s;
        }
    }
    fft2(&mut buf, h, w, true);
    let norm = (h * w) as f64;
    Plane::new(h, w, buf.iter().map(|c| c.re / norm).collect())
}

/// Perceptual distortion score; lower is better.
pub fn qcv(f: &Plane, a: &Plane, b: &Plane) -> f64 {
    const REGION: usize = 16;
    let sal = |p: &Plane| magnitude_orientation(p).0;
    let (ga, gb) = (sal(a), sal(b));
    let da = csf_filter(&a.zip(f, |x, y| x - y)).map(|v| v * v);
    let db = csf_filter(&b.zip(f, |x, y| x - y)).map(|v| v * v);
    let mut num = 0.0;
    let mut den = 0.0;
    for y0 in (0..f.h).step_by(REGION) {
        for x0 in (0..f.w).step_by(REGION) {
            let (mut la, mut lb, mut sa, mut sb, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..(y0 + REGION).min(f.h) {
                for x in x0..(x0 + REGION).min(f.w) {
                    let i = y * f.w + x;
                    la += ga[i];
                    lb += gb[i];
                    sa += da.data[i];
                    sb += db.data[i];
                    n += 1.0;
                }
            }
            num += la * sa / n + lb * sb / n;
            den += la + lb;
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Pixel-domain multiscale visual information fidelity of `dist` against `reference`.
pub fn vifp(reference: &Plane, dist: &Plane) -> f64 {
    const SIGMA_NSQ: f64 = 2.0;
    const EPS: f64 = 1e-10;
    let (mut r, mut d) = (reference.clone(), dist.clone());
    let mut num = 0.0;
    let mut den = 0.0;
    for scale in 1..=4u32 {
        let n = (1usize << (5 - scale)) + 1;
        let taps = gauss_taps(n, n as f64 / 5.0);
        if scale > 1 {
            if r.h < n || r.w < n {
                break;
            }
            r = filter_valid(&r, &taps).every_other();
            d = filter_valid(&d, &taps).every_other();
        }
        if r.h < n || r.w < n {
            continue;
        }
        let st = local_stats(&r, &d, &taps);
        for i in 0..st.mu1.data.len() {
            let mut s1 = st.s11.data[i].max(0.0);
            let s2 = st.s22.data[i].max(0.0);
            let s12 = st.s12.data[i];
            let mut g = s12 / (s1 + EPS);
            let mut sv = s2 - g * s12;
            if s1 < EPS {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            sv = sv.max(EPS);
            num += (1.0 + g * g * s1 / (sv + SIGMA_NSQ)).log10();
            den += (1.0 + s1 / SIGMA_NSQ).log10();
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Pearson correlation; zero variance gives 0.
pub fn correlation(x: &Plane, y: &Plane) -> f64 {
    let (mx, my) = (x.mean(), y.mean());
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.data.iter().zip(&y.data) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Sum of the correlations of differences.
pub fn scd(f: &Plane, a: &Plane, b: &Plane) -> f64 {
    correlation(&f.zip(b, |x, y| x - y), a) + correlation(&f.zip(a, |x, y| x - y), b)
}

/// The seven scores for one triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub qg: f64,
    pub qm: f64,
    pub qs: f64,
    pub qcv: f64,
    pub vif: f64,
    pub ssim: f64,
    pub scd: f64,
}

impl MetricReport {
    fn fields(&self) -> [f64; 7] {
        [self.qg, self.qm, self.qs, self.qcv, self.vif, self.ssim, self.scd]
    }

    /// Column means. Empty input is an error.
    pub fn mean(rows: &[MetricReport]) -> Result<MetricReport> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut acc = [0.0; 7];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.fields()) {
                *a += v;
            }
        }
        let n = rows.len() as f64;
        let [qg, qm, qs, qcv, vif, ssim, scd] = acc.map(|v| v / n);
        Ok(MetricReport { qg, qm, qs, qcv, vif, ssim, scd })
    }

    fn csv_row(&self, id: &str) -> String {
        let cols: Vec<String> = self.fields().iter().map(|v| format!("{v:.6}")).collect();
        format!("{id},{}", cols.join(","))
    }
}

/// Scores on pre-quantized planes.
pub fn evaluate_planes(f: &Plane, a: &Plane, b: &Plane) -> Result<MetricReport> {
    if (f.h, f.w) != (a.h, a.w) || (f.h, f.w) != (b.h, b.w) {
        return Err(Error::ShapeMismatch(format!(
            "fused {}x{}, visible {}x{}, infrared {}x{}",
            f.h, f.w, a.h, a.w, b.h, b.w
        )));
    }
    Ok(MetricReport {
        qg: qg(f, a, b),
        qm: qm(f, a, b),
        qs: qs(f, a, b),
        qcv: qcv(f, a, b),
        vif: vifp(a, f) + vifp(b, f),
        ssim: (ssim(f, a) + ssim(f, b)) / 2.0,
        scd: scd(f, a, b),
    })
}

pub fn evaluate(fused: &ImageRgb, vi: &ImageRgb, ir: &ImageGray) -> Result<MetricReport> {
    evaluate_planes(&Plane::from_rgb(fused), &Plane::from_rgb(vi), &Plane::from_gray(ir))
}

/// Per-image scores plus their means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<(String, MetricReport)>,
    pub mean: MetricReport,
}

impl MetricTable {
    pub fn from_rows(rows: Vec<(String, MetricReport)>) -> Result<Self> {
        let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
        let mean = MetricReport::mean(&reports)?;
        Ok(Self { rows, mean })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,qg,qm,qs,qcv,vif,ssim,scd\n");
        for (id, r) in &self.rows {
            s.push_str(&r.csv_row(id));
            s.push('\n');
        }
        s.push_str(&self.mean.csv_row("mean"));
        s.push('\n');
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
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

/// Score every PNG in `fused_dir` against same-named files in the source
/// directories. Rows are ordered by file name.
pub fn batch_evaluate(fused_dir: impl AsRef<Path>, vi_dir: impl AsRef<Path>, ir_dir: impl AsRef<Path>) -> Result<MetricTable> {
    let (vi_dir, ir_dir) = (vi_dir.as_ref(), ir_dir.as_ref());
    let files = png_files(fused_dir.as_ref())?;
    if files.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let counterpart = |dir: &Path, name: &std::ffi::OsStr, id: &str| {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingCounterpart { id: id.to_string(), dir: dir.to_path_buf() })
        }
    };
    let jobs = files
        .iter()
        .map(|f| {
            let name = f.file_name().expect("listed file has a name");
            let id = f.file_stem().expect("listed file has a stem").to_string_lossy().into_owned();
            let vi = counterpart(vi_dir, name, &id)?;
            let ir = counterpart(ir_dir, name, &id)?;
            Ok((id, f.clone(), vi, ir))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = jobs
        .par_iter()
        .map(|(id, f, vi, ir)| {
            let report = evaluate(&load_image(f)?.into_rgb(), &load_image(vi)?.into_rgb(), &load_image(ir)?.into_gray())?;
            Ok((id.clone(), report))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricTable::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{save_gray, save_rgb};
    use crate::tensor::Tensor;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn smooth_plane(h: usize, w: usize, seed: u64) -> Plane {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (fa, fb, ph): (f64, f64, f64) = (r.random_range(0.05..0.3), r.random_range(0.05..0.3), r.random_range(0.0..6.0));
        let (cy, cx) = (r.random_range(0.0..h as f64), r.random_range(0.0..w as f64));
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                let blob = if (y - cy).powi(2) + (x - cx).powi(2) < 40.0 { 80.0 } else { 0.0 };
                (120.0 + 50.0 * (fa * x + ph).sin() * (fb * y).cos() + blob).round().clamp(0.0, 255.0)
            })
            .collect();
        Plane::new(h, w, data)
    }

    fn noisy(p: &Plane, sigma: f64, seed: u64) -> Plane {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sigma * 255.0).unwrap();
        let data = p.data.iter().map(|v| (v + n.sample(&mut r)).round().clamp(0.0, 255.0)).collect();
        Plane::new(p.h, p.w, data)
    }

    /// Direct per-window SSIM with independently built weights.
    fn ssim_oracle(a: &Plane, b: &Plane) -> f64 {
        let n = 11.min(a.h).min(a.w);
        let c = (n - 1) as f64 / 2.0;
        let mut wts = vec![vec![0.0; n]; n];
        let mut tot = 0.0;
        for (i, row) in wts.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / 4.5).exp();
                tot += *v;
            }
        }
        let (c1, c2) = (6.5025, 58.5225);
        let mut acc = 0.0;
        let mut count = 0.0;
        for y in 0..=a.h - n {
            for x in 0..=a.w - n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let wv = wts[i][j] / tot;
                        ma += wv * a.at(y + i, x + j);
                        mb += wv * b.at(y + i, x + j);
                    }
                }
                let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let wv = wts[i][j] / tot;
                        let (da, db) = (a.at(y + i, x + j) - ma, b.at(y + i, x + j) - mb);
                        va += wv * da * da;
                        vb += wv * db * db;
                        cab += wv * da * db;
                    }
                }
                acc += ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        acc / count
    }

    #[test]
    fn ssim_matches_direct_oracle() {
        for s in 0..4 {
            let a = noisy(&smooth_plane(24, 30, s), 0.05, s + 10);
            let b = noisy(&smooth_plane(24, 30, s + 100), 0.05, s + 20);
            assert!((ssim(&a, &b) - ssim_oracle(&a, &b)).abs() < 1e-6);
        }
        let a = smooth_plane(8, 8, 3);
        let b = noisy(&a, 0.1, 4);
        assert!((ssim(&a, &b) - ssim_oracle(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn identical_triple() {
        let p = smooth_plane(32, 32, 1);
        let r = evaluate_planes(&p, &p, &p).unwrap();
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.scd, 0.0);
        assert!(r.qcv.abs() < 1e-9);
        assert!((r.qm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_worsens_scores() {
        for s in 0..3 {
            let a = smooth_plane(64, 64, s);
            let b = smooth_plane(64, 64, s + 50);
            let f = a.zip(&b, |x, y| ((x + y) / 2.0).round());
            let fnz = noisy(&f, 0.1, s + 7);
            let (c, n) = (evaluate_planes(&f, &a, &b).unwrap(), evaluate_planes(&fnz, &a, &b).unwrap());
            assert!(n.qg < c.qg && n.qs < c.qs && n.ssim < c.ssim && n.vif < c.vif && n.qcv > c.qcv, "{c:?} {n:?}");
        }
    }

    #[test]
    fn csf_passes_dc_scaled() {
        let p = Plane::new(4, 4, vec![3.0; 16]);
        let q = csf_filter(&p);
        for v in q.data {
            assert!((v - 3.0 * 2.6 * 0.0192).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = smooth_plane(16, 16, 0);
        let b = smooth_plane(16, 12, 0);
        assert!(matches!(evaluate_planes(&a, &a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn mean_of_rows() {
        let base = MetricReport { qg: 0.4, qm: 0.0, qs: 0.0, qcv: 0.0, vif: 0.0, ssim: 0.0, scd: 0.0 };
        let m = MetricReport::mean(&[base, MetricReport { qg: 0.6, ..base }]).unwrap();
        assert!((m.qg - 0.5).abs() < 1e-15);
        assert!(matches!(MetricReport::mean(&[]), Err(Error::EmptyDataset)));
    }

    fn write_triple(dir: &Path, name: &str, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(&[3, 16, 16], |_| r.random::<f64>());
        let vi = ImageRgb::new(t).unwrap();
        save_rgb(&vi, dir.join("vi").join(name)).unwrap();
        save_gray(&vi.luminance(), dir.join("ir").join(name)).unwrap();
        save_rgb(&vi, dir.join("fused").join(name)).unwrap();
    }

    #[test]
    fn batch_one_triple_and_errors() {
        let d = tempfile::tempdir().unwrap();
        let root = d.path();
        for sub in ["fused", "vi", "ir"] {
            std::fs::create_dir_all(root.join(sub)).unwrap();
        }
        assert!(matches!(batch_evaluate(root.join("fused"), root.join("vi"), root.join("ir")), Err(Error::EmptyDataset)));
        write_triple(root, "a.png", 1);
        let t = batch_evaluate(root.join("fused"), root.join("vi"), root.join("ir")).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].1, t.mean);
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("id,qg,qm,qs,qcv,vif,ssim,scd\na,"));
        assert!(csv.lines().nth(2).unwrap().starts_with("mean,"));
        std::fs::remove_file(root.join("ir").join("a.png")).unwrap();
        let e = batch_evaluate(root.join("fused"), root.join("vi"), root.join("ir")).unwrap_err();
        assert!(matches!(e, Error::MissingCounterpart { ref id, .. } if id == "a"));
    }

    proptest! {
        #[test]
        fn scd_ignores_constant_shift(seed in 0u64..500, shift in -50.0f64..50.0) {
            let a = smooth_plane(12, 12, seed);
            let b = smooth_plane(12, 12, seed + 1);
            let f = noisy(&a.zip(&b, |x, y| (x + y) / 2.0), 0.05, seed);
            let g = f.map(|v| v + shift);
            prop_assert!((scd(&f, &a, &b) - scd(&g, &a, &b)).abs() < 1e-9);
        }

        #[test]
        fn bounded_scores(seed in 0u64..500) {
            let a = smooth_plane(20, 20, seed);
            let b = smooth_plane(20, 20, seed + 3);
            let f = noisy(&a, 0.2, seed);
            let r = evaluate_planes(&f, &a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.qg));
            prop_assert!((0.0..=1.0).contains(&r.qm));
            prop_assert!((-1.0..=1.0).contains(&r.qs));
            prop_assert!((-1.0..=1.0).contains(&r.ssim));
            prop_assert!(r.qcv >= 0.0);
            prop_assert!(r.vif >= 0.0 && r.scd.is_finite());
        }
    }
}
