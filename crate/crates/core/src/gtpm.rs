//! Global text perception: channel expansion, two-scale fusion of the
//! modalities, and caption-driven cross-attention.

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, Linear, ParamStore};
use crate::tensor::Tensor;
use crate::textcond::{GlobalTextEmbedding, ImageEmbedding};

fn check_even(c: usize) -> Result<()> {
    if !c.is_multiple_of(2) {
        return Err(Error::OddChannelCount(c));
    }
    Ok(())
}

fn check_same_hw(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
        return Err(Error::ShapeMismatch(format!("feature maps {a:?} and {b:?} differ spatially")));
    }
    Ok(())
}

/// Split channels into the first and second halves.
pub fn split_halves_g(g: &mut Graph, f: Var) -> Result<(Var, Var)> {
    let c = g.shape(f)[0];
    check_even(c)?;
    Ok((g.slice(f, 0, c / 2), g.slice(f, c / 2, c / 2)))
}

/// Channel concatenation of the two left halves.
pub fn fuse_left_g(g: &mut Graph, vi: Var, ir: Var) -> Result<Var> {
    check_same_hw(g.shape(vi), g.shape(ir))?;
    Ok(g.concat(&[vi, ir]))
}

/// Channel concatenation followed by 3×3, stride-1, zero-padded max pooling.
pub fn fuse_right_g(g: &mut Graph, vi: Var, ir: Var) -> Result<Var> {
    let cat = fuse_left_g(g, vi, ir)?;
    Ok(g.max_pool3(cat))
}

fn eval1(t: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let y = f(&mut g, x)?;
    Ok(g.value(y).clone())
}

fn eval2(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(a.clone());
    let y = g.constant(b.clone());
    let z = f(&mut g, x, y)?;
    Ok(g.value(z).clone())
}

/// `[C, H, W]` → two `[C/2, H, W]` maps.
pub fn split_halves(f: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = f.shape()[0];
    check_even(c)?;
    let l = eval1(f, |g, x| Ok(g.slice(x, 0, c / 2)))?;
    let r = eval1(f, |g, x| Ok(g.slice(x, c / 2, c / 2)))?;
    Ok((l, r))
}

pub fn fuse_left(vi: &Tensor, ir: &Tensor) -> Result<Tensor> {
    eval2(vi, ir, fuse_left_g)
}

pub fn fuse_right(vi: &Tensor, ir: &Tensor) -> Result<Tensor> {
    eval2(vi, ir, fuse_right_g)
}

/// Learned 1×1 channel expansion.
#[derive(Debug, Clone)]
pub struct Expand(pub Conv2d);

impl Expand {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        check_even(out_ch)?;
        Ok(Self(Conv2d::new(store, init, name, in_ch, out_ch, ConvSpec::same(1), true)))
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        self.0.forward(cx, x)
    }
}

/// `f + conv3(silu(conv3(f)))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub c1: Conv2d,
    pub c2: Conv2d,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, ch: usize) -> Self {
        Self {
            c1: Conv2d::new(store, init, &format!("{name}.c1"), ch, ch, ConvSpec::same(3), true),
            c2: Conv2d::new(store, init, &format!("{name}.c2"), ch, ch, ConvSpec::same(3), true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, f: Var) -> Var {
        let h = self.c1.forward(cx, f);
        let h = cx.g.silu(h);
        let h = self.c2.forward(cx, h);
        cx.g.add(f, h)
    }

    pub fn num_params(&self) -> usize {
        self.c1.num_params() + self.c2.num_params()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.c1.macs(h, w) + self.c2.macs(h, w)
    }
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` for `q: [T, d_k]`, `k: [N, d_k]`, `v: [N, d_v]`.
/// Returns `(output [T, d_v], weights [T, N])`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> (Var, Var) {
    let dk = g.shape(q)[1];
    let logits = g.matmul(q, k, false, true);
    let logits = g.scale(logits, 1.0 / (dk as f64).sqrt());
    let w = g.softmax_rows(logits);
    (g.matmul(w, v, false, false), w)
}

/// Text-as-query cross-attention whose pooled result is added per channel
/// to the image features.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub text_dim: usize,
    pub channels: usize,
    pub d_k: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, text_dim: usize, channels: usize, d_k: usize) -> Self {
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), text_dim, d_k),
            k: Linear::new(store, init, &format!("{name}.k"), channels, d_k),
            v: Linear::new(store, init, &format!("{name}.v"), channels, channels),
            out: Linear::new(store, init, &format!("{name}.out"), channels, channels),
            text_dim,
            channels,
            d_k,
        }
    }

    /// `text: [T, text_dim]`, `feat: [C, H, W]`. Returns the updated map and
    /// the `[T, H·W]` attention weights.
    pub fn forward_with_weights(&self, cx: &mut Ctx, text: Var, feat: Var) -> Result<(Var, Var)> {
        let ts = cx.g.shape(text).to_vec();
        if ts.len() != 2 || ts[0] == 0 || ts[1] != self.text_dim {
            return Err(Error::DimMismatch(format!("text features {ts:?}, expected [T, {}]", self.text_dim)));
        }
        let (c, h, w) = cx.g.value(feat).chw();
        if c != self.channels {
            return Err(Error::DimMismatch(format!("feature map has {c} channels, expected {}", self.channels)));
        }
        let flat = cx.g.reshape(feat, &[c, h * w]);
        let tokens = cx.g.transpose(flat);
        let q = self.q.forward(cx, text);
        let k = self.k.forward(cx, tokens);
        let v = self.v.forward(cx, tokens);
        let (att, weights) = scaled_dot_attention(&mut cx.g, q, k, v);
        let pooled = cx.g.mean_rows(att);
        let delta = self.out.forward_vec(cx, pooled);
        Ok((cx.g.add_channel(feat, delta), weights))
    }

    pub fn forward(&self, cx: &mut Ctx, text: Var, feat: Var) -> Result<Var> {
        Ok(self.forward_with_weights(cx, text, feat)?.0)
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params() + self.k.num_params() + self.v.num_params() + self.out.num_params()
    }

    pub fn macs(&self, tokens: usize, hw: usize) -> u64 {
        self.q.macs(tokens)
            + self.k.macs(hw)
            + self.v.macs(hw)
            + (tokens * hw * self.d_k) as u64
            + (tokens * hw * self.channels) as u64
            + self.out.macs(1)
    }
}

/// Global text perception module.
#[derive(Debug, Clone)]
pub struct Gtpm {
    pub vi_expand: Expand,
    pub ir_expand: Expand,
    pub res_left: ResidualBlock,
    pub res_right: ResidualBlock,
    pub merge: Conv2d,
    /// Projection of the image embedding, absent when the text path is off.
    pub clip_proj: Option<Linear>,
    pub attn: Option<CrossAttention>,
    pub channels: usize,
}

impl Gtpm {
    /// `channels` is the base width `C0`; `text_dims = Some((D_g, d_k))`
    /// enables the embedding and caption path.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        channels: usize,
        text_dims: Option<(usize, usize)>,
    ) -> Result<Self> {
        let vi_expand = Expand::new(store, init, "gtpm.vi_expand", 3, channels)?;
        let ir_expand = Expand::new(store, init, "gtpm.ir_expand", 1, channels)?;
        let res_left = ResidualBlock::new(store, init, "gtpm.res_left", channels);
        let res_right = ResidualBlock::new(store, init, "gtpm.res_right", channels);
        let merge = Conv2d::new(store, init, "gtpm.merge", 2 * channels, channels, ConvSpec::same(1), true);
        let (clip_proj, attn) = match text_dims {
            Some((dg, dk)) => (
                Some(Linear::new(store, init, "gtpm.clip_proj", dg, channels)),
                Some(CrossAttention::new(store, init, "gtpm.attn", dg, channels, dk)),
            ),
            None => (None, None),
        };
        Ok(Self { vi_expand, ir_expand, res_left, res_right, merge, clip_proj, attn, channels })
    }

    /// `vi: [3, H, W]`, `ir: [1, H, W]` → `[C0, H, W]`.
    pub fn forward(
        &self,
        cx: &mut Ctx,
        vi: Var,
        ir: Var,
        caption: Option<&GlobalTextEmbedding>,
        clip: Option<&ImageEmbedding>,
    ) -> Result<Var> {
        check_same_hw(cx.g.shape(vi), cx.g.shape(ir))?;
        let fv = self.vi_expand.forward(cx, vi);
        let fi = self.ir_expand.forward(cx, ir);
        let (vl, vr) = split_halves_g(&mut cx.g, fv)?;
        let (il, ir_) = split_halves_g(&mut cx.g, fi)?;
        let left = fuse_left_g(&mut cx.g, vl, il)?;
        let right = fuse_right_g(&mut cx.g, vr, ir_)?;
        let left = self.res_left.forward(cx, left);
        let right = self.res_right.forward(cx, right);
        let both = cx.g.concat(&[left, right]);
        let mut f = self.merge.forward(cx, both);
        if let (Some(proj), Some(attn)) = (&self.clip_proj, &self.attn) {
            let (caption, clip) = match (caption, clip) {
                (Some(c), Some(i)) => (c, i),
                _ => return Err(Error::Config("global text path enabled but embeddings missing".into())),
            };
            if clip.vector.len() != proj.in_dim {
                return Err(Error::DimMismatch(format!(
                    "image embedding has {} dims, expected {}",
                    clip.vector.len(),
                    proj.in_dim
                )));
            }
            let e = cx.g.constant(Tensor::new(vec![clip.vector.len()], clip.vector.clone()));
            let bias = proj.forward_vec(cx, e);
            f = cx.g.add_channel(f, bias);
            let text = cx.g.constant(Tensor::new(vec![1, caption.vector.len()], caption.vector.clone()));
            f = attn.forward(cx, text, f)?;
        }
        Ok(f)
    }

    pub fn num_params(&self) -> usize {
        self.vi_expand.0.num_params()
            + self.ir_expand.0.num_params()
            + self.res_left.num_params()
            + self.res_right.num_params()
            + self.merge.num_params()
            + self.clip_proj.as_ref().map_or(0, Linear::num_params)
            + self.attn.as_ref().map_or(0, CrossAttention::num_params)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.vi_expand.0.macs(h, w)
            + self.ir_expand.0.macs(h, w)
            + self.res_left.macs(h, w)
            + self.res_right.macs(h, w)
            + self.merge.macs(h, w)
            + self.clip_proj.as_ref().map_or(0, |p| p.macs(1))
            + self.attn.as_ref().map_or(0, |a| a.macs(1, h * w))
    }
}
