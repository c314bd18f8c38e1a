//! Local text perception: squeeze-and-excitation, image-conditioned affine
//! modulation, detail-token cross-attention and a dilated pyramid.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::gtpm::CrossAttention;
use crate::nn::{Conv2d, Ctx, Init, Linear, ParamStore};
use crate::tensor::Tensor;
use crate::textcond::{ImageEmbedding, LocalTextEmbedding};

/// Sizes of one LTPM instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LtpmConfig {
    pub se_reduction: usize,
    pub dilation_rates: [usize; 3],
    pub d_k: usize,
    /// Image embedding width `D_g`.
    pub image_dim: usize,
    /// Detail token width `D_l`.
    pub token_dim: usize,
}

/// Channel gate from pooled statistics: `f ⊙ σ(W₂ relu(W₁ gap(f)))`.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub down: Linear,
    pub up: Linear,
}

impl SeBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::BadReduction { ratio: reduction, channels });
        }
        let hidden = channels / reduction;
        Ok(Self {
            down: Linear::new(store, init, &format!("{name}.down"), channels, hidden),
            up: Linear::new(store, init, &format!("{name}.up"), hidden, channels),
        })
    }

    /// The `[C]` gate for `f`.
    pub fn gate(&self, cx: &mut Ctx, f: Var) -> Var {
        let s = cx.g.global_avg_pool(f);
        let h = self.down.forward_vec(cx, s);
        let h = cx.g.relu(h);
        let e = self.up.forward_vec(cx, h);
        cx.g.sigmoid(e)
    }

    pub fn forward(&self, cx: &mut Ctx, f: Var) -> Var {
        let g = self.gate(cx, f);
        cx.g.mul_channel(f, g)
    }

    pub fn num_params(&self) -> usize {
        self.down.num_params() + self.up.num_params()
    }
}

/// `(1 + γ) ⊙ x + β` per channel, on the tape.
pub fn affine_modulate_g(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let c = g.shape(x)[0];
    if g.value(gamma).len() != c || g.value(beta).len() != c {
        return Err(Error::DimMismatch(format!(
            "modulation vectors of length {} and {} for {c} channels",
            g.value(gamma).len(),
            g.value(beta).len()
        )));
    }
    let scale = g.offset(gamma, 1.0);
    let y = g.mul_channel(x, scale);
    Ok(g.add_channel(y, beta))
}

/// `(1 + γ) ⊙ x + β` with per-channel broadcast over space.
pub fn affine_modulate(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(Tensor::new(vec![gamma.len()], gamma.to_vec()));
    let bv = g.constant(Tensor::new(vec![beta.len()], beta.to_vec()));
    let y = affine_modulate_g(&mut g, xv, gv, bv)?;
    Ok(g.value(y).clone())
}

/// Inverse of [`affine_modulate`], valid when every `γ > −1`.
pub fn affine_demodulate(y: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    let (c, h, w) = y.chw();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::DimMismatch(format!("modulation vectors for {c} channels")));
    }
    let mut out = y.clone();
    for ch in 0..c {
        out.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().for_each(|v| *v = (*v - beta[ch]) / (1.0 + gamma[ch]));
    }
    Ok(out)
}

/// Three same-size dilated 3×3 convolutions, concatenated and fused by 1×1.
#[derive(Debug, Clone)]
pub struct DilatedPyramid {
    pub branches: Vec<Conv2d>,
    pub fuse: Conv2d,
}

impl DilatedPyramid {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, rates: [usize; 3]) -> Result<Self> {
        if !(rates[0] >= 1 && rates[0] < rates[1] && rates[1] < rates[2]) {
            return Err(Error::Config(format!("dilation rates {rates:?} must be positive and strictly increasing")));
        }
        let branches = rates
            .iter()
            .map(|&r| {
                let spec = ConvSpec { dilation: r, padding: r, ..ConvSpec::same(3) };
                Conv2d::new(store, init, &format!("{name}.d{r}"), channels, channels, spec, true)
            })
            .collect();
        let fuse = Conv2d::new(store, init, &format!("{name}.fuse"), 3 * channels, channels, ConvSpec::same(1), true);
        Ok(Self { branches, fuse })
    }

    /// The `[3C, H, W]` concatenation before the 1×1 fusion.
    pub fn branch_outputs(&self, cx: &mut Ctx, f: Var) -> Var {
        let outs: Vec<Var> = self.branches.iter().map(|b| b.forward(cx, f)).collect();
        cx.g.concat(&outs)
    }

    pub fn forward(&self, cx: &mut Ctx, f: Var) -> Var {
        let cat = self.branch_outputs(cx, f);
        self.fuse.forward(cx, cat)
    }

    pub fn num_params(&self) -> usize {
        self.branches.iter().map(Conv2d::num_params).sum::<usize>() + self.fuse.num_params()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.branches.iter().map(|b| b.macs(h, w)).sum::<u64>() + self.fuse.macs(h, w)
    }
}

/// Local text perception module.
#[derive(Debug, Clone)]
pub struct Ltpm {
    pub se1: SeBlock,
    pub se2: SeBlock,
    pub mod_hidden: Linear,
    /// Outputs `[γ; β]`; starts at zero so modulation starts as identity.
    pub mod_out: Linear,
    pub attn: CrossAttention,
    pub pyramid: DilatedPyramid,
    pub channels: usize,
}

impl Ltpm {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, cfg: &LtpmConfig) -> Result<Self> {
        let se1 = SeBlock::new(store, init, &format!("{name}.se1"), channels, cfg.se_reduction)?;
        let se2 = SeBlock::new(store, init, &format!("{name}.se2"), channels, cfg.se_reduction)?;
        let mod_hidden = Linear::new(store, init, &format!("{name}.mod_hidden"), cfg.image_dim, channels);
        let mod_out = Linear::zeros(store, &format!("{name}.mod_out"), channels, 2 * channels);
        let attn = CrossAttention::new(store, init, &format!("{name}.attn"), cfg.token_dim, channels, cfg.d_k);
        let pyramid = DilatedPyramid::new(store, init, &format!("{name}.pyramid"), channels, cfg.dilation_rates)?;
        Ok(Self { se1, se2, mod_hidden, mod_out, attn, pyramid, channels })
    }

    /// `(γ, β)` predicted from the image embedding.
    pub fn modulation(&self, cx: &mut Ctx, clip: &ImageEmbedding) -> Result<(Var, Var)> {
        if clip.vector.len() != self.mod_hidden.in_dim {
            return Err(Error::DimMismatch(format!(
                "image embedding has {} dims, expected {}",
                clip.vector.len(),
                self.mod_hidden.in_dim
            )));
        }
        let e = cx.g.constant(Tensor::new(vec![clip.vector.len()], clip.vector.clone()));
        let h = self.mod_hidden.forward_vec(cx, e);
        let h = cx.g.silu(h);
        let gb = self.mod_out.forward_vec(cx, h);
        let c = self.channels;
        Ok((cx.g.slice(gb, 0, c), cx.g.slice(gb, c, c)))
    }

    pub fn forward(&self, cx: &mut Ctx, f: Var, clip: &ImageEmbedding, detail: &LocalTextEmbedding) -> Result<Var> {
        let x = self.se1.forward(cx, f);
        let x = self.se2.forward(cx, x);
        let (gamma, beta) = self.modulation(cx, clip)?;
        let x = affine_modulate_g(&mut cx.g, x, gamma, beta)?;
        let tokens = cx.g.constant(detail.tokens.clone());
        let x = self.attn.forward(cx, tokens, x)?;
        Ok(self.pyramid.forward(cx, x))
    }

    pub fn num_params(&self) -> usize {
        self.se1.num_params()
            + self.se2.num_params()
            + self.mod_hidden.num_params()
            + self.mod_out.num_params()
            + self.attn.num_params()
            + self.pyramid.num_params()
    }

    pub fn macs(&self, h: usize, w: usize, tokens: usize) -> u64 {
        let c = self.channels as u64;
        let se = self.se1.down.macs(1) + self.se1.up.macs(1) + c * (h * w) as u64;
        2 * se
            + self.mod_hidden.macs(1)
            + self.mod_out.macs(1)
            + c * (h * w) as u64
            + self.attn.macs(tokens, h * w)
            + self.pyramid.macs(h, w)
    }
}
