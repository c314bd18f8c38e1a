//! Wavelet-convolution decoder producing the fused RGB image.

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::imagecore::{graph_rgb_to_ycbcr, graph_ycbcr_to_rgb};
use crate::nn::{Conv2d, Ctx, Init, ParamStore};
use crate::tensor::Tensor;

/// Subbands of one Haar level, each `[C, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subbands {
    pub ll: Tensor,
    /// Horizontal detail.
    pub lh: Tensor,
    /// Vertical detail.
    pub hl: Tensor,
    pub hh: Tensor,
}

/// Multi-level Haar decomposition; `levels[0]` is the finest level.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletStack {
    pub levels: Vec<Subbands>,
}

impl WaveletStack {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Sum of squared coefficients (coarsest LL plus every detail band).
    pub fn energy(&self) -> f64 {
        let sq = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        let details: f64 = self.levels.iter().map(|s| sq(&s.lh) + sq(&s.hl) + sq(&s.hh)).sum();
        details + self.levels.last().map_or(0.0, |s| sq(&s.ll))
    }
}

fn check_divisible(h: usize, w: usize, levels: usize) -> Result<()> {
    let factor = 1usize << levels;
    if !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
        return Err(Error::IndivisibleSpatialSize { height: h, width: w, factor });
    }
    Ok(())
}

/// Orthonormal 2-D Haar decomposition of every channel of `f: [C, H, W]`.
pub fn haar_dwt2(f: &Tensor, levels: usize) -> Result<WaveletStack> {
    let (c, h, w) = f.chw();
    check_divisible(h, w, levels)?;
    let mut g = Graph::new();
    let mut x = g.constant(f.clone());
    let mut out = Vec::with_capacity(levels);
    for _ in 0..levels {
        let y = g.haar_dwt(x);
        let band = |g: &mut Graph, i: usize| {
            let v = g.slice(y, i * c, c);
            g.value(v).clone()
        };
        out.push(Subbands { ll: band(&mut g, 0), lh: band(&mut g, 1), hl: band(&mut g, 2), hh: band(&mut g, 3) });
        x = g.slice(y, 0, c);
    }
    Ok(WaveletStack { levels: out })
}

/// Inverse of [`haar_dwt2`]; uses the coarsest LL and every detail band.
pub fn haar_idwt2(stack: &WaveletStack) -> Tensor {
    let mut g = Graph::new();
    let mut ll = match stack.levels.last() {
        Some(s) => g.constant(s.ll.clone()),
        None => panic!("empty wavelet stack"),
    };
    for s in stack.levels.iter().rev() {
        let lh = g.constant(s.lh.clone());
        let hl = g.constant(s.hl.clone());
        let hh = g.constant(s.hh.clone());
        let cat = g.concat(&[ll, lh, hl, hh]);
        ll = g.haar_idwt(cat);
    }
    g.value(ll).clone()
}

/// Depthwise convolutions on Haar subbands at several levels plus a direct
/// depthwise 3×3 path. The LL output of each level feeds the next level.
#[derive(Debug, Clone)]
pub struct WtConv {
    /// One depthwise 3×3 conv over the `4C` subbands of each level.
    pub band_convs: Vec<Conv2d>,
    pub direct: Conv2d,
    pub channels: usize,
}

impl WtConv {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, levels: usize) -> Self {
        let band_convs = (0..levels)
            .map(|l| {
                let spec = ConvSpec { groups: 4 * channels, ..ConvSpec::same(3) };
                Conv2d::new(store, init, &format!("{name}.wt{l}"), 4 * channels, 4 * channels, spec, false)
            })
            .collect();
        let spec = ConvSpec { groups: channels, ..ConvSpec::same(3) };
        let direct = Conv2d::new(store, init, &format!("{name}.direct"), channels, channels, spec, true);
        Self { band_convs, direct, channels }
    }

    pub fn levels(&self) -> usize {
        self.band_convs.len()
    }

    fn cascade(&self, cx: &mut Ctx, x: Var, level: usize) -> Var {
        let c = self.channels;
        let y = cx.g.haar_dwt(x);
        let y = self.band_convs[level].forward(cx, y);
        let mut ll = cx.g.slice(y, 0, c);
        let details = cx.g.slice(y, c, 3 * c);
        if level + 1 < self.levels() {
            ll = self.cascade(cx, ll, level + 1);
        }
        let cat = cx.g.concat(&[ll, details]);
        cx.g.haar_idwt(cat)
    }

    pub fn forward(&self, cx: &mut Ctx, f: Var) -> Result<Var> {
        let (_, h, w) = cx.g.value(f).chw();
        check_divisible(h, w, self.levels())?;
        let d = self.direct.forward(cx, f);
        if self.levels() == 0 {
            return Ok(d);
        }
        let wt = self.cascade(cx, f, 0);
        Ok(cx.g.add(wt, d))
    }

    pub fn num_params(&self) -> usize {
        self.band_convs.iter().map(Conv2d::num_params).sum::<usize>() + self.direct.num_params()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mut total = self.direct.macs(h, w);
        for (l, conv) in self.band_convs.iter().enumerate() {
            total += conv.macs(h >> (l + 1), w >> (l + 1));
        }
        total
    }
}

/// Two WTConv branches: one predicting luma, one predicting chroma.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub luma_wt: WtConv,
    pub luma_head: Conv2d,
    pub chroma_wt: WtConv,
    /// Sees the branch features plus the chroma of the visible input.
    pub chroma_head: Conv2d,
    pub channels: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, channels: usize, levels: usize) -> Self {
        let spec = ConvSpec::same(3);
        Self {
            luma_wt: WtConv::new(store, init, "decoder.luma_wt", channels, levels),
            luma_head: Conv2d::new(store, init, "decoder.luma_head", channels, 1, spec, true),
            chroma_wt: WtConv::new(store, init, "decoder.chroma_wt", channels, levels),
            chroma_head: Conv2d::new(store, init, "decoder.chroma_head", channels + 2, 2, spec, true),
            channels,
        }
    }

    /// `f: [C, H, W]`, `chroma_source: [3, H, W]` RGB → fused RGB `[3, H, W]`
    /// in `[0, 1]`.
    pub fn forward(&self, cx: &mut Ctx, f: Var, chroma_source: Var) -> Result<Var> {
        let (c, h, w) = cx.g.value(f).chw();
        if c != self.channels {
            return Err(Error::DimMismatch(format!("decoder expects {} channels, got {c}", self.channels)));
        }
        let src = cx.g.shape(chroma_source).to_vec();
        if src != [3, h, w] {
            return Err(Error::ShapeMismatch(format!("chroma source {src:?} does not match features {h}x{w}")));
        }
        let y = self.luma_wt.forward(cx, f)?;
        let y = cx.g.silu(y);
        let y = self.luma_head.forward(cx, y);
        let y = cx.g.sigmoid(y);

        let src_ycc = graph_rgb_to_ycbcr(&mut cx.g, chroma_source);
        let src_cbcr = cx.g.slice(src_ycc, 1, 2);
        let ch = self.chroma_wt.forward(cx, f)?;
        let ch = cx.g.silu(ch);
        let ch = cx.g.concat(&[ch, src_cbcr]);
        let ch = self.chroma_head.forward(cx, ch);
        let ch = cx.g.sigmoid(ch);

        let ycc = cx.g.concat(&[y, ch]);
        Ok(graph_ycbcr_to_rgb(&mut cx.g, ycc))
    }

    pub fn num_params(&self) -> usize {
        self.luma_wt.num_params() + self.luma_head.num_params() + self.chroma_wt.num_params() + self.chroma_head.num_params()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.luma_wt.macs(h, w) + self.luma_head.macs(h, w) + self.chroma_wt.macs(h, w) + self.chroma_head.macs(h, w)
    }
}
