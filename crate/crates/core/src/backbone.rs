//! Residual state-space blocks arranged as a U-Net.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Discretized diagonal state-space parameters for one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// Transition coefficients `[C, N]`.
    pub a: Tensor,
    /// Input maps `[C, N]`.
    pub b: Tensor,
    /// Output maps `[C, N]`.
    pub c: Tensor,
    /// Skip coefficients `[C]`.
    pub d: Tensor,
}

/// Causal per-channel recurrence over `x: [L, C]`:
/// `h_t = A ⊙ h_{t-1} + B x_t`, `y_t = C · h_t + D x_t`.
pub fn selective_scan(x: &Tensor, p: &SsmParams) -> Tensor {
    let mut g = Graph::new();
    let xs = g.constant(x.clone());
    let a = g.constant(p.a.clone());
    let b = g.constant(p.b.clone());
    let c = g.constant(p.c.clone());
    let d = g.constant(p.d.clone());
    let y = g.scan(xs, a, b, c, d);
    g.value(y).clone()
}

/// Layer sizes of the U-Net.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub blocks_per_stage: Vec<usize>,
    pub channel_schedule: Vec<usize>,
    pub state_dim: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let (b, c) = (&self.blocks_per_stage, &self.channel_schedule);
        if b.len() != c.len() || c.len() % 2 == 0 {
            return Err(Error::Config(format!(
                "blocks ({}) and channels ({}) must have equal odd length",
                b.len(),
                c.len()
            )));
        }
        if c.iter().ne(c.iter().rev()) {
            return Err(Error::Config(format!("channel schedule {c:?} is not palindromic")));
        }
        if c.contains(&0) || self.state_dim == 0 {
            return Err(Error::Config("channels and state_dim must be positive".into()));
        }
        Ok(())
    }

    /// Number of ×2 downsampling steps.
    pub fn downsamples(&self) -> usize {
        (self.channel_schedule.len() - 1) / 2
    }
}

/// One residual state-space block.
#[derive(Debug, Clone)]
pub struct Rssb {
    pub a_raw: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub d: ParamId,
    pub conv: Conv2d,
    pub ca_down: Linear,
    pub ca_up: Linear,
    pub skip_scale: ParamId,
    pub channels: usize,
    pub state_dim: usize,
}

/// `softplus⁻¹(−ln a)`, so that `exp(−softplus(raw)) = a`.
fn raw_for_decay(a: f64) -> f64 {
    (-a.ln()).exp_m1().ln()
}

impl Rssb {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, state_dim: usize) -> Self {
        let n = state_dim;
        // decays spread over [0.5, 0.95] so states cover short and long ranges
        let a = Tensor::from_fn(&[channels, n], |i| {
            let s = i % n;
            let frac = if n > 1 { s as f64 / (n - 1) as f64 } else { 0.5 };
            raw_for_decay(0.5 + 0.45 * frac)
        });
        let a_raw = store.add(format!("{name}.a_raw"), a);
        let b = store.add(format!("{name}.b"), init.fan_in(&[channels, n], n));
        let c = store.add(format!("{name}.c"), init.fan_in(&[channels, n], n));
        let d = store.add(format!("{name}.d"), init.uniform(&[channels], 1.0));
        let conv = Conv2d::new(store, init, &format!("{name}.conv"), channels, channels, ConvSpec::same(3), true);
        let hidden = (channels / 4).max(1);
        let ca_down = Linear::new(store, init, &format!("{name}.ca_down"), channels, hidden);
        let ca_up = Linear::new(store, init, &format!("{name}.ca_up"), hidden, channels);
        let skip_scale = store.add(format!("{name}.skip_scale"), Tensor::full(&[channels], 1.0));
        Self { a_raw, b, c, d, conv, ca_down, ca_up, skip_scale, channels, state_dim }
    }

    /// Transition coefficients `exp(−softplus(a_raw))` in `(0, 1)`.
    pub fn decay(&self, store: &ParamStore) -> Tensor {
        store.get(self.a_raw).map(|r| (-crate::autodiff::softplus(r)).exp())
    }

    pub fn forward(&self, cx: &mut Ctx, f: Var) -> Var {
        let (ch, h, w) = cx.g.value(f).chw();
        let norm = cx.g.layer_norm_channels(f, 1e-5);
        let flat = cx.g.reshape(norm, &[ch, h * w]);
        let seq = cx.g.transpose(flat);
        let a_raw = cx.p(self.a_raw);
        let sp = cx.g.softplus(a_raw);
        let neg = cx.g.scale(sp, -1.0);
        let a = cx.g.exp(neg);
        let b = cx.p(self.b);
        let c = cx.p(self.c);
        let d = cx.p(self.d);
        let y = cx.g.scan(seq, a, b, c, d);
        let yt = cx.g.transpose(y);
        let s = cx.g.reshape(yt, &[ch, h, w]);
        let s = cx.g.silu(s);
        let z = self.conv.forward(cx, s);
        // channel attention
        let pooled = cx.g.global_avg_pool(z);
        let hdn = self.ca_down.forward_vec(cx, pooled);
        let hdn = cx.g.silu(hdn);
        let gate = self.ca_up.forward_vec(cx, hdn);
        let gate = cx.g.sigmoid(gate);
        let z = cx.g.mul_channel(z, gate);
        let scale = cx.p(self.skip_scale);
        let skip = cx.g.mul_channel(f, scale);
        cx.g.add(skip, z)
    }

    pub fn num_params(&self) -> usize {
        3 * self.channels * self.state_dim
            + self.channels
            + self.conv.num_params()
            + self.ca_down.num_params()
            + self.ca_up.num_params()
            + self.channels
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        // state update and readout: 3 multiply-adds per state element per position
        let scan = (3 * self.channels * self.state_dim * h * w) as u64;
        scan + self.conv.macs(h, w) + self.ca_down.macs(1) + self.ca_up.macs(1)
    }
}

fn hook_error(stage: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Config(m) => Error::Config(format!("stage {stage}: {m}")),
        other => other,
    }
}

/// The U-Net of residual state-space blocks.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    /// RSSB stacks per stage.
    pub stages: Vec<Vec<Rssb>>,
    /// Strided 3×3 convolutions, one per encoder stage.
    pub down: Vec<Conv2d>,
    /// 3×3 convolutions after nearest-neighbour upsampling, one per decoder stage.
    pub up: Vec<Conv2d>,
    /// 1×1 convolutions merging skip connections, one per decoder stage.
    pub merge: Vec<Conv2d>,
}

/// Called after every stage with `(ctx, stage index, features)`.
pub type StageHook<'h> = dyn FnMut(&mut Ctx, usize, Var) -> Result<Var> + 'h;

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.channel_schedule;
        let m = cfg.downsamples();
        let mut stages = Vec::new();
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut merge = Vec::new();
        for (i, &nb) in cfg.blocks_per_stage.iter().enumerate() {
            if i > m {
                let spec = ConvSpec::same(3);
                up.push(Conv2d::new(store, init, &format!("backbone.up{i}"), ch[i - 1], ch[i], spec, true));
                merge.push(Conv2d::new(
                    store,
                    init,
                    &format!("backbone.merge{i}"),
                    2 * ch[i],
                    ch[i],
                    ConvSpec::same(1),
                    true,
                ));
            }
            let blocks =
                (0..nb).map(|b| Rssb::new(store, init, &format!("backbone.s{i}.b{b}"), ch[i], cfg.state_dim)).collect();
            stages.push(blocks);
            if i < m {
                let spec = ConvSpec { stride: 2, ..ConvSpec::same(3) };
                down.push(Conv2d::new(store, init, &format!("backbone.down{i}"), ch[i], ch[i + 1], spec, true));
            }
        }
        Ok(Self { cfg: cfg.clone(), stages, down, up, merge })
    }

    /// Check that `h × w` survives the downsampling steps.
    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let factor = 1usize << self.cfg.downsamples();
        if !h.is_multiple_of(factor) || !w.is_multiple_of(factor) || h == 0 || w == 0 {
            return Err(Error::IndivisibleSpatialSize { height: h, width: w, factor });
        }
        Ok(())
    }

    pub fn forward(&self, cx: &mut Ctx, f: Var, hook: &mut StageHook<'_>) -> Result<Var> {
        let (c, h, w) = cx.g.value(f).chw();
        if c != self.cfg.channel_schedule[0] {
            return Err(Error::DimMismatch(format!(
                "backbone expects {} channels, got {c}",
                self.cfg.channel_schedule[0]
            )));
        }
        self.check_size(h, w)?;
        let m = self.cfg.downsamples();
        let mut skips = Vec::with_capacity(m);
        let mut x = f;
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > m {
                let j = i - m - 1;
                let upx = cx.g.upsample2(x);
                let upx = self.up[j].forward(cx, upx);
                let skip = skips.pop().expect("one skip per encoder stage");
                let cat = cx.g.concat(&[upx, skip]);
                x = self.merge[j].forward(cx, cat);
            }
            for b in blocks {
                x = b.forward(cx, x);
            }
            x = hook(cx, i, x).map_err(hook_error(i))?;
            if i < m {
                skips.push(x);
                x = self.down[i].forward(cx, x);
            }
        }
        Ok(x)
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().flatten().map(Rssb::num_params).sum::<usize>()
            + self.down.iter().chain(&self.up).chain(&self.merge).map(Conv2d::num_params).sum::<usize>()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let m = self.cfg.downsamples();
        let mut total = 0;
        for (i, blocks) in self.stages.iter().enumerate() {
            let level = if i <= m { i } else { 2 * m - i };
            let (hh, ww) = (h >> level, w >> level);
            total += blocks.iter().map(|b| b.macs(hh, ww)).sum::<u64>();
            if i < m {
                total += self.down[i].macs(hh, ww);
            }
            if i > m {
                let j = i - m - 1;
                total += self.up[j].macs(hh, ww) + self.merge[j].macs(hh, ww);
            }
        }
        total
    }
}

/// Hook that leaves every stage unchanged.
pub fn no_hook(_: &mut Ctx, _: usize, x: Var) -> Result<Var> {
    Ok(x)
}
