//! Training objectives: embedding alignment, chroma, L1 and SSIM terms.
//!
//! Every term exists twice: as a graph builder used during training and as
//! a plain function on images that runs the same graph once.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::imagecore::{graph_luminance, graph_rgb_to_ycbcr, ImageGray, ImageRgb};
use crate::tensor::Tensor;
use crate::textcond::{DiffImageEncoder, EmbeddingProvider};

/// Half-width of the 11×11 SSIM window.
pub const SSIM_RADIUS: usize = 5;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Values of the four terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub vlm: f64,
    pub color: f64,
    pub l1: f64,
    pub ssim: f64,
    pub total: f64,
}

impl LossReport {
    /// Unweighted sum of the given components.
    pub fn from_components(vlm: f64, color: f64, l1: f64, ssim: f64) -> Self {
        Self { vlm, color, l1, ssim, total: vlm + color + l1 + ssim }
    }

    /// Component-wise mean.
    pub fn mean(reports: &[LossReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let s = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self { vlm: s(|r| r.vlm), color: s(|r| r.color), l1: s(|r| r.l1), ssim: s(|r| r.ssim), total: s(|r| r.total) }
    }
}

/// Graph nodes of the loss terms; `vlm` is absent when the term is disabled.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub vlm: Option<Var>,
    pub color: Var,
    pub l1: Var,
    pub ssim: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn report(&self, g: &Graph) -> LossReport {
        let v = |x: Var| g.value(x).data()[0];
        LossReport { vlm: self.vlm.map_or(0.0, v), color: v(self.color), l1: v(self.l1), ssim: v(self.ssim), total: v(self.total) }
    }
}

fn check_dims(fused: (usize, usize), other: (usize, usize), what: &str) -> Result<()> {
    if fused != other {
        return Err(Error::ShapeMismatch(format!(
            "fused image is {}x{}, {what} is {}x{}",
            fused.0, fused.1, other.0, other.1
        )));
    }
    Ok(())
}

/// `1 − cos(a, b)` on the tape for `[D]` nodes.
pub fn cosine_distance_g(g: &mut Graph, a: Var, b: Var) -> Var {
    let ab = g.mul(a, b);
    let dot = g.sum(ab);
    let aa = g.mul(a, a);
    let na = g.sum(aa);
    let bb = g.mul(b, b);
    let nb = g.sum(bb);
    let nn = g.mul(na, nb);
    let nn = g.offset(nn, 1e-24);
    let nn = g.sqrt(nn);
    let cos = g.div(dot, nn);
    let neg = g.scale(cos, -1.0);
    g.offset(neg, 1.0)
}

/// Alignment between the fused image embedding and a text embedding.
pub fn vlm_loss_g(g: &mut Graph, fused: Var, encoder: &dyn DiffImageEncoder, text_emb: &[f64]) -> Var {
    let e = encoder.encode(g, fused);
    let t = g.constant(Tensor::new(vec![text_emb.len()], text_emb.to_vec()));
    cosine_distance_g(g, e, t)
}

/// Mean over pixels of `|ΔCb| + |ΔCr|`.
pub fn color_loss_g(g: &mut Graph, fused: Var, clean_vi: Var) -> Var {
    let (_, h, w) = g.value(fused).chw();
    let a = graph_rgb_to_ycbcr(g, fused);
    let b = graph_rgb_to_ycbcr(g, clean_vi);
    let ca = g.slice(a, 1, 2);
    let cb = g.slice(b, 1, 2);
    let d = g.sub(ca, cb);
    let d = g.abs(d);
    let s = g.sum(d);
    g.scale(s, 1.0 / (h * w) as f64)
}

/// `(‖F − VI‖₁ + ‖F − IR‖₁) / (H·W)`, infrared replicated over channels.
pub fn l1_loss_g(g: &mut Graph, fused: Var, clean_vi: Var, clean_ir: Var) -> Var {
    let (_, h, w) = g.value(fused).chw();
    let ir3 = g.concat(&[clean_ir, clean_ir, clean_ir]);
    let dv = g.sub(fused, clean_vi);
    let dv = g.abs(dv);
    let di = g.sub(fused, ir3);
    let di = g.abs(di);
    let sv = g.sum(dv);
    let si = g.sum(di);
    let s = g.add(sv, si);
    g.scale(s, 1.0 / (h * w) as f64)
}

/// Mean SSIM of two `[1, H, W]` nodes with a same-size Gaussian window
/// (boundary-renormalized) and dynamic range 1.
pub fn ssim_g(g: &mut Graph, x: Var, y: Var) -> Var {
    let blur = |g: &mut Graph, v: Var| g.gaussian(v, SSIM_RADIUS, SSIM_SIGMA);
    let mx = blur(g, x);
    let my = blur(g, y);
    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let xy = g.mul(x, y);
    let exx = blur(g, xx);
    let eyy = blur(g, yy);
    let exy = blur(g, xy);
    let mx2 = g.mul(mx, mx);
    let my2 = g.mul(my, my);
    let mxy = g.mul(mx, my);
    let vx = g.sub(exx, mx2);
    let vy = g.sub(eyy, my2);
    let cxy = g.sub(exy, mxy);

    let n1 = g.scale(mxy, 2.0);
    let n1 = g.offset(n1, SSIM_C1);
    let n2 = g.scale(cxy, 2.0);
    let n2 = g.offset(n2, SSIM_C2);
    let d1 = g.add(mx2, my2);
    let d1 = g.offset(d1, SSIM_C1);
    let d2 = g.add(vx, vy);
    let d2 = g.offset(d2, SSIM_C2);
    let num = g.mul(n1, n2);
    let den = g.mul(d1, d2);
    let map = g.div(num, den);
    g.mean(map)
}

/// `2 − SSIM(F, VI) − SSIM(F, IR)` on luminance.
pub fn ssim_loss_g(g: &mut Graph, fused: Var, clean_vi: Var, clean_ir: Var) -> Var {
    let fl = graph_luminance(g, fused);
    let vl = graph_luminance(g, clean_vi);
    let s1 = ssim_g(g, fl, vl);
    let s2 = ssim_g(g, fl, clean_ir);
    let s = g.add(s1, s2);
    let neg = g.scale(s, -1.0);
    g.offset(neg, 2.0)
}

/// All terms for one sample. `vlm` carries the differentiable encoder and
/// the clean-description embedding; `None` drops the term.
pub fn loss_terms_g(
    g: &mut Graph,
    fused: Var,
    clean_vi: Var,
    clean_ir: Var,
    vlm: Option<(&dyn DiffImageEncoder, &[f64])>,
) -> LossTerms {
    let vlm = vlm.map(|(enc, t)| vlm_loss_g(g, fused, enc, t));
    let color = color_loss_g(g, fused, clean_vi);
    let l1 = l1_loss_g(g, fused, clean_vi, clean_ir);
    let ssim = ssim_loss_g(g, fused, clean_vi, clean_ir);
    let mut total = g.add(color, l1);
    total = g.add(total, ssim);
    if let Some(v) = vlm {
        total = g.add(total, v);
    }
    LossTerms { vlm, color, l1, ssim, total }
}

fn encoder_of(provider: &dyn EmbeddingProvider) -> Result<&dyn DiffImageEncoder> {
    provider
        .image_encoder()
        .ok_or_else(|| Error::Provider(format!("provider {} has no differentiable image encoder", provider.id())))
}

/// `1 − cos(encode_image(fused), encode_text_global(clean_desc))`.
pub fn vlm_loss(fused: &ImageRgb, clean_desc: &str, provider: &dyn EmbeddingProvider) -> Result<f64> {
    let img = provider.encode_image(fused)?.vector;
    let txt = provider.encode_text_global(clean_desc)?.vector;
    if img.len() != txt.len() {
        return Err(Error::Provider(format!("image ({}) and text ({}) embeddings differ in size", img.len(), txt.len())));
    }
    Ok(cosine_distance(&img, &txt))
}

/// `1 − cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut g = Graph::new();
    let av = g.constant(Tensor::new(vec![a.len()], a.to_vec()));
    let bv = g.constant(Tensor::new(vec![b.len()], b.to_vec()));
    let d = cosine_distance_g(&mut g, av, bv);
    g.value(d).data()[0]
}

pub fn color_loss(fused: &ImageRgb, clean_vi: &ImageRgb) -> Result<f64> {
    check_dims(fused.dims(), clean_vi.dims(), "clean visible")?;
    let mut g = Graph::new();
    let f = g.constant(fused.tensor().clone());
    let v = g.constant(clean_vi.tensor().clone());
    let l = color_loss_g(&mut g, f, v);
    Ok(g.value(l).data()[0])
}

pub fn l1_loss(fused: &ImageRgb, clean_vi: &ImageRgb, clean_ir: &ImageGray) -> Result<f64> {
    check_dims(fused.dims(), clean_vi.dims(), "clean visible")?;
    check_dims(fused.dims(), clean_ir.dims(), "clean infrared")?;
    let mut g = Graph::new();
    let f = g.constant(fused.tensor().clone());
    let v = g.constant(clean_vi.tensor().clone());
    let i = g.constant(clean_ir.tensor().clone());
    let l = l1_loss_g(&mut g, f, v, i);
    Ok(g.value(l).data()[0])
}

pub fn ssim_loss(fused: &ImageRgb, clean_vi: &ImageRgb, clean_ir: &ImageGray) -> Result<f64> {
    check_dims(fused.dims(), clean_vi.dims(), "clean visible")?;
    check_dims(fused.dims(), clean_ir.dims(), "clean infrared")?;
    let mut g = Graph::new();
    let f = g.constant(fused.tensor().clone());
    let v = g.constant(clean_vi.tensor().clone());
    let i = g.constant(clean_ir.tensor().clone());
    let l = ssim_loss_g(&mut g, f, v, i);
    Ok(g.value(l).data()[0])
}

/// SSIM between two single-channel images as used by the loss.
pub fn ssim_index(a: &ImageGray, b: &ImageGray) -> Result<f64> {
    check_dims(a.dims(), b.dims(), "second image")?;
    let mut g = Graph::new();
    let x = g.constant(a.tensor().clone());
    let y = g.constant(b.tensor().clone());
    let s = ssim_g(&mut g, x, y);
    Ok(g.value(s).data()[0])
}

/// Every term plus the total. `provider = None` disables the alignment term.
pub fn total_loss(
    fused: &ImageRgb,
    clean_vi: &ImageRgb,
    clean_ir: &ImageGray,
    clean_desc: &str,
    provider: Option<&dyn EmbeddingProvider>,
) -> Result<LossReport> {
    check_dims(fused.dims(), clean_vi.dims(), "clean visible")?;
    check_dims(fused.dims(), clean_ir.dims(), "clean infrared")?;
    let text = match provider {
        Some(p) => Some((encoder_of(p)?, p.encode_text_global(clean_desc)?.vector)),
        None => None,
    };
    let mut g = Graph::new();
    let f = g.constant(fused.tensor().clone());
    let v = g.constant(clean_vi.tensor().clone());
    let i = g.constant(clean_ir.tensor().clone());
    let terms = loss_terms_g(&mut g, f, v, i, text.as_ref().map(|(e, t)| (*e, t.as_slice())));
    Ok(terms.report(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::rgb_to_ycbcr;
    use crate::textcond::{stub_provider, AnchoredProvider};
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rgb(h: usize, w: usize, seed: u64) -> ImageRgb {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ImageRgb::new(Tensor::from_fn(&[3, h, w], |_| r.random::<f64>())).unwrap()
    }

    fn gray(h: usize, w: usize, seed: u64) -> ImageGray {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ImageGray::new(Tensor::from_fn(&[1, h, w], |_| r.random::<f64>())).unwrap()
    }

    /// Smooth structured test image.
    fn pattern(h: usize, w: usize, phase: f64) -> ImageGray {
        ImageGray::new(Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            0.5 + 0.4 * ((x * 0.5 + phase).sin() * (y * 0.3).cos())
        }))
        .unwrap()
    }

    #[test]
    fn cosine_distance_cases() {
        assert!(cosine_distance(&[1.0, 2.0], &[2.0, 4.0]).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[-3.0, 0.0]) - 2.0).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 5.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vlm_zero_when_anchored() {
        let img = rgb(8, 8, 1);
        let mut p = AnchoredProvider::new(stub_provider(16, 8, 0).unwrap());
        p.anchor("clean", &img).unwrap();
        assert!(vlm_loss(&img, "clean", &p).unwrap().abs() < 1e-12);
        let v = vlm_loss(&img, "something else", &p).unwrap();
        assert!((0.0..=2.0).contains(&v));
    }

    #[test]
    fn color_loss_cases() {
        let a = rgb(4, 4, 1);
        assert_eq!(color_loss(&a, &a).unwrap(), 0.0);
        let g1 = ImageRgb::filled(4, 4, [0.2; 3]);
        let g2 = ImageRgb::filled(4, 4, [0.9; 3]);
        assert!(color_loss(&g1, &g2).unwrap().abs() < 1e-12);
        let (f, c) = (rgb(2, 2, 5), rgb(2, 2, 6));
        // scalar oracle with the textbook BT.601 coefficients
        let chroma = |r: f64, g: f64, b: f64| {
            (0.5 - 0.168736 * r - 0.331264 * g + 0.5 * b, 0.5 + 0.5 * r - 0.418688 * g - 0.081312 * b)
        };
        let mut want = 0.0;
        for i in 0..4 {
            let px = |t: &Tensor| (t.data()[i], t.data()[4 + i], t.data()[8 + i]);
            let (r1, g1, b1) = px(f.tensor());
            let (r2, g2, b2) = px(c.tensor());
            let (cb1, cr1) = chroma(r1, g1, b1);
            let (cb2, cr2) = chroma(r2, g2, b2);
            want += (cb1 - cb2).abs() + (cr1 - cr2).abs();
        }
        want /= 4.0;
        assert!((color_loss(&f, &c).unwrap() - want).abs() < 1e-5);
        assert!(matches!(color_loss(&f, &rgb(2, 3, 0)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn l1_cases() {
        let c = ImageRgb::filled(3, 3, [0.3; 3]);
        let ir = ImageGray::filled(3, 3, 0.3);
        assert_eq!(l1_loss(&c, &c, &ir).unwrap(), 0.0);
        let delta = 0.25;
        let ir2 = ImageGray::filled(3, 3, 0.3 + delta);
        assert!((l1_loss(&c, &c, &ir2).unwrap() - 3.0 * delta).abs() < 1e-12);
        let (f, v, i) = (rgb(3, 4, 1), rgb(3, 4, 2), gray(3, 4, 3));
        let base = l1_loss(&f, &v, &i).unwrap();
        let sc = |t: &Tensor| t.map(|x| 0.5 * x);
        let scaled = l1_loss(
            &ImageRgb::new(sc(f.tensor())).unwrap(),
            &ImageRgb::new(sc(v.tensor())).unwrap(),
            &ImageGray::new(sc(i.tensor())).unwrap(),
        )
        .unwrap();
        assert!((scaled - 0.5 * base).abs() < 1e-12);
    }

    #[test]
    fn ssim_cases() {
        let a = pattern(16, 16, 0.0).to_rgb();
        let ir = pattern(16, 16, 0.0);
        assert!(ssim_loss(&a, &a, &ir).unwrap().abs() < 1e-12);
        let noise = rgb(16, 16, 4);
        let l = ssim_loss(&noise, &pattern(16, 16, 0.3).to_rgb(), &pattern(16, 16, 1.1)).unwrap();
        assert!(l > 1.0, "{l}");
        let (x, y) = (gray(12, 12, 1), gray(12, 12, 2));
        assert!((ssim_index(&x, &y).unwrap() - ssim_index(&y, &x).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn total_is_sum_and_fixed_point() {
        assert_eq!(LossReport::from_components(0.0, 0.0, 0.0, 0.0).total, 0.0);
        assert!((LossReport::from_components(0.5, 0.1, 0.2, 0.3).total - 1.1).abs() < 1e-12);
        let ir = pattern(8, 8, 0.2);
        let vi = ir.to_rgb();
        let mut p = AnchoredProvider::new(stub_provider(16, 8, 1).unwrap());
        p.anchor("clear street", &vi).unwrap();
        let r = total_loss(&vi, &vi, &ir, "clear street", Some(&p)).unwrap();
        assert!(r.total.abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn graph_terms_match_plain() {
        let (f, v, i) = (rgb(8, 8, 1), rgb(8, 8, 2), gray(8, 8, 3));
        let p = stub_provider(16, 8, 0).unwrap();
        let r = total_loss(&f, &v, &i, "a road", Some(&p)).unwrap();
        assert!((r.vlm - vlm_loss(&f, "a road", &p).unwrap()).abs() < 1e-12);
        assert!((r.color - color_loss(&f, &v).unwrap()).abs() < 1e-15);
        assert!((r.l1 - l1_loss(&f, &v, &i).unwrap()).abs() < 1e-15);
        assert!((r.ssim - ssim_loss(&f, &v, &i).unwrap()).abs() < 1e-15);
        assert!((r.total - (r.vlm + r.color + r.l1 + r.ssim)).abs() < 1e-9);
        let r0 = total_loss(&f, &v, &i, "a road", None).unwrap();
        assert_eq!(r0.vlm, 0.0);
    }

    proptest! {
        #[test]
        fn losses_bounded_and_nonnegative(seed in 0u64..300) {
            let (f, v, i) = (rgb(6, 6, seed), rgb(6, 6, seed + 1), gray(6, 6, seed + 2));
            let p = stub_provider(16, 8, seed).unwrap();
            let r = total_loss(&f, &v, &i, "scene", Some(&p)).unwrap();
            prop_assert!(r.vlm >= -1e-12 && r.vlm <= 2.0 + 1e-12);
            prop_assert!(r.color >= 0.0 && r.l1 >= 0.0);
            prop_assert!(r.ssim >= -1e-12 && r.ssim <= 4.0 + 1e-12);
            prop_assert!((r.total - (r.vlm + r.color + r.l1 + r.ssim)).abs() < 1e-9);
        }

        #[test]
        fn color_ignores_luma_only_changes(seed in 0u64..300, dy in -0.2f64..0.2) {
            let f = rgb(4, 4, seed);
            let c = rgb(4, 4, seed + 9);
            // shift luma, keep chroma: convert, edit Y, convert back
            let mut ycc = rgb_to_ycbcr(&f);
            ycc.channel_mut(0).iter_mut().for_each(|y| *y += dy);
            let shifted = crate::imagecore::ycbcr_to_rgb_unclamped(&ycc).unwrap();
            if shifted.data().iter().all(|v| (0.0..=1.0).contains(v)) {
                let f2 = ImageRgb::new(shifted).unwrap();
                prop_assert!((color_loss(&f2, &c).unwrap() - color_loss(&f, &c).unwrap()).abs() < 1e-9);
            }
        }
    }
}
