//! Parameters, initialization, basic layers and the Adam optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Sum gradients per parameter; parameters absent from the graph get zeros.
    pub fn collect_grads(&self, graph: &Graph, grads: &Gradients) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
        for (key, g) in grads.param_grads(graph) {
            out[key].add_assign(&g);
        }
        out
    }
}

/// Forward-pass context: a fresh tape plus read access to the parameters.
pub struct Ctx<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { g: Graph::new(), store }
    }

    /// Bind a parameter into the tape.
    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(id.0, self.store.get(id))
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform(shape, bound)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
    }
}

/// 2-D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        assert_eq!(in_ch % spec.groups, 0);
        assert_eq!(out_ch % spec.groups, 0);
        let cg = in_ch / spec.groups;
        let fan_in = cg * spec.kernel * spec.kernel;
        let weight =
            store.add(format!("{name}.weight"), init.fan_in(&[out_ch, cg, spec.kernel, spec.kernel], fan_in));
        let bias = bias.then(|| store.add(format!("{name}.bias"), init.fan_in(&[out_ch], fan_in)));
        Self { weight, bias, spec, in_ch, out_ch }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.p(self.weight);
        let b = self.bias.map(|b| cx.p(b));
        cx.g.conv2d(x, w, b, self.spec)
    }

    pub fn num_params(&self) -> usize {
        let cg = self.in_ch / self.spec.groups;
        self.out_ch * cg * self.spec.kernel * self.spec.kernel + if self.bias.is_some() { self.out_ch } else { 0 }
    }

    /// Multiply-accumulates for an `h × w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.spec.out_size(h, w);
        let cg = self.in_ch / self.spec.groups;
        (self.out_ch * cg * self.spec.kernel * self.spec.kernel * ho * wo) as u64
    }
}

/// Fully connected layer on `[N, in]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.fan_in(&[out_dim, in_dim], in_dim));
        let bias = store.add(format!("{name}.bias"), init.fan_in(&[out_dim], in_dim));
        Self { weight, bias, in_dim, out_dim }
    }

    /// A layer whose weight and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[out_dim, in_dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.p(self.weight);
        let b = cx.p(self.bias);
        cx.g.linear(x, w, Some(b))
    }

    /// Apply to a `[D]` vector, returning `[out]`.
    pub fn forward_vec(&self, cx: &mut Ctx, x: Var) -> Var {
        let d = cx.g.value(x).len();
        let row = cx.g.reshape(x, &[1, d]);
        let y = self.forward(cx, row);
        cx.g.reshape(y, &[self.out_dim])
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.in_dim * self.out_dim) as u64
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]));
        let mut opt = Adam::new(&store, 0.1);
        opt.update(&mut store, &[Tensor::new(vec![2], vec![2.0, -3.0])]);
        // first bias-corrected step is lr * sign(g)
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn init_is_seeded() {
        let a = Init::new(7).fan_in(&[4, 4], 4);
        let b = Init::new(7).fan_in(&[4, 4], 4);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn conv_param_count() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let c = Conv2d::new(&mut store, &mut init, "c", 6, 4, ConvSpec::same(3), true);
        assert_eq!(c.num_params(), 4 * 6 * 9 + 4);
        assert_eq!(store.num_scalars(), c.num_params());
        let dw = Conv2d::new(&mut store, &mut init, "d", 6, 6, ConvSpec { groups: 6, ..ConvSpec::same(3) }, false);
        assert_eq!(dw.num_params(), 6 * 9);
    }
}
