use super::kernels::{self, ConvSpec};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    Silu,
    Sigmoid,
    Softplus,
    Exp,
    Abs,
    Sqrt,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    AddRow(Var, Var),
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    MaxPool3 { x: Var, arg: Vec<usize> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Unary(Var, Unary),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    GlobalAvgPool(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    SoftmaxRows(Var),
    MeanRows(Var),
    Reshape(Var),
    Transpose(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Scan { x: Var, a: Var, b: Var, c: Var, d: Var, states: Vec<f64> },
    HaarDwt(Var),
    HaarIdwt(Var),
    Upsample2(Var),
    Gaussian { x: Var, taps: Vec<f64> },
    AdaptiveAvgPool { x: Var, out: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A reverse-mode autodiff tape over [`Tensor`] values.
///
/// Every op evaluates eagerly and records how to propagate gradients.
/// Parameters enter through [`Graph::param`] and their gradients are read
/// back with [`Gradients::param_grads`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(usize, Var)>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// `(parameter key, gradient)` for every parameter bound to the graph.
    /// Parameters that did not influence the loss get zeros.
    pub fn param_grads<'a>(&'a self, g: &'a Graph) -> impl Iterator<Item = (usize, Tensor)> + 'a {
        self.params.iter().map(move |&(key, v)| {
            let t = self.grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
            (key, t)
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a parameter (e.g. an input whose
    /// gradient the caller wants).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A trainable parameter identified by `key`.
    pub fn param(&mut self, key: usize, t: &Tensor) -> Var {
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.push((key, v));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::Offset(a), rg)
    }

    /// `x[c, ..] + v[c]` for `x: [C, H, W]`, `v: [C]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.value(v).len(), c, "channel vector length");
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for ch in 0..c {
            out.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().for_each(|e| *e += vv[ch]);
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(out, Op::AddChannel(x, v), rg)
    }

    /// `x[c, ..] * v[c]` for `x: [C, H, W]`, `v: [C]`.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.value(v).len(), c, "channel vector length");
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for ch in 0..c {
            out.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().for_each(|e| *e *= vv[ch]);
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(out, Op::MulChannel(x, v), rg)
    }

    /// `x[n, d] + v[d]` for `x: [N, D]`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Var {
        let (_, d) = self.value(x).rc();
        assert_eq!(self.value(v).len(), d, "row vector length");
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(&vv).for_each(|(e, b)| *e += b);
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(out, Op::AddRow(x, v), rg)
    }

    /// 2-D convolution of `x: [C, H, W]` with `w: [O, C / groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let (c, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [O, C/g, k, k]");
        assert_eq!(ws[1] * spec.groups, c, "conv input channels");
        assert_eq!(ws[2], spec.kernel, "conv kernel size");
        let o = ws[0];
        let (ho, wo) = spec.out_size(h, wd);
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = kernels::conv2d(
            self.value(x).data(),
            (c, h, wd),
            self.value(w).data(),
            bias.as_deref(),
            o,
            &spec,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(vec![o, ho, wo], out), Op::Conv { x, w, b, spec }, rg)
    }

    /// 3x3 max pooling, stride 1, zero padding 1.
    pub fn max_pool3(&mut self, x: Var) -> Var {
        let dims = self.value(x).chw();
        let (out, arg) = kernels::max_pool3(self.value(x).data(), dims);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![dims.0, dims.1, dims.2], out), Op::MaxPool3 { x, arg }, rg)
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let tail = self.shape(xs[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            assert_eq!(&self.shape(x)[1..], &tail[..], "concat trailing dims");
            lead += self.shape(x)[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Tensor::new(shape, data), Op::Concat(xs.to_vec()), rg)
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[0], "slice out of range");
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut s = shape;
        s[0] = len;
        let rg = self.rg(x);
        self.push(Tensor::new(s, data), Op::Slice { x, start }, rg)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Silu => |v| v / (1.0 + (-v).exp()),
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::Exp => f64::exp,
            Unary::Abs => f64::abs,
            Unary::Sqrt => f64::sqrt,
            Unary::Relu => |v| v.max(0.0),
        };
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(v, Op::Unary(x, kind), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|e| e.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(v, Op::Clamp { x, lo, hi }, rg)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `[C, H, W]` to `[C]` spatial means.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = (h * w) as f64;
        let data = (0..c).map(|ch| self.value(x).channel(ch).iter().sum::<f64>() / n).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![c], data), Op::GlobalAvgPool(x), rg)
    }

    /// Matrix product of rank-2 tensors with optional logical transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = self.value(a).rc();
        let (br, bc) = self.value(b).rc();
        let (n, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, m) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![0.0; n * m];
        kernels::gemm(n, k, m, self.value(a).data(), ta, self.value(b).data(), tb, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![n, m], out), Op::MatMul { a, b, ta, tb }, rg)
    }

    /// `x · wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w, false, true);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, m) = self.value(x).rc();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                z += *e;
            }
            row.iter_mut().for_each(|e| *e /= z);
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// `[N, D]` to `[D]` column means.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.value(x).rc();
        let mut data = vec![0.0; d];
        for row in self.value(x).data().chunks(d) {
            data.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        data.iter_mut().for_each(|a| *a /= n as f64);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![d], data), Op::MeanRows(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).rc();
        let v = transpose2(self.value(x).data(), r, c);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![c, r], v), Op::Transpose(x), rg)
    }

    /// Normalize each pixel of `[C, H, W]` across channels (zero mean,
    /// unit variance), without affine terms.
    pub fn layer_norm_channels(&mut self, x: Var, eps: f64) -> Var {
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; c * hw];
        let mut inv_std = vec![0.0; hw];
        for p in 0..hw {
            let mean = (0..c).map(|ch| src[ch * hw + p]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (src[ch * hw + p] - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[p] = is;
            for ch in 0..c {
                out[ch * hw + p] = (src[ch * hw + p] - mean) * is;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![c, h, w], out), Op::LayerNorm { x, inv_std }, rg)
    }

    /// Linear state-space scan; see [`kernels::scan_forward`].
    /// `x: [L, C]`, `a, b, c: [C, N]`, `d: [C]`.
    pub fn scan(&mut self, x: Var, a: Var, b: Var, c: Var, d: Var) -> Var {
        let (len, ch) = self.value(x).rc();
        let (ch2, n) = self.value(a).rc();
        assert_eq!(ch, ch2, "scan channel count");
        assert_eq!(self.value(b).shape(), &[ch, n]);
        assert_eq!(self.value(c).shape(), &[ch, n]);
        assert_eq!(self.value(d).len(), ch);
        let (y, states) = kernels::scan_forward(
            self.value(x).data(),
            len,
            ch,
            n,
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
        );
        let rg = [x, a, b, c, d].iter().any(|&v| self.rg(v));
        self.push(Tensor::new(vec![len, ch], y), Op::Scan { x, a, b, c, d, states }, rg)
    }

    /// One level of orthonormal Haar analysis, `[C, H, W] -> [4C, H/2, W/2]`.
    pub fn haar_dwt(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(h % 2 == 0 && w % 2 == 0, "haar_dwt needs even dimensions");
        let out = kernels::haar_forward(self.value(x).data(), (c, h, w));
        let rg = self.rg(x);
        self.push(Tensor::new(vec![4 * c, h / 2, w / 2], out), Op::HaarDwt(x), rg)
    }

    /// Haar synthesis, `[4C, H, W] -> [C, 2H, 2W]`.
    pub fn haar_idwt(&mut self, x: Var) -> Var {
        let (c4, h, w) = self.value(x).chw();
        assert_eq!(c4 % 4, 0, "haar_idwt needs 4C channels");
        let out = kernels::haar_inverse(self.value(x).data(), (c4, h, w));
        let rg = self.rg(x);
        self.push(Tensor::new(vec![c4 / 4, 2 * h, 2 * w], out), Op::HaarIdwt(x), rg)
    }

    /// Nearest-neighbour upsampling by 2.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let src = self.value(x).data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![c, 2 * h, 2 * w], out), Op::Upsample2(x), rg)
    }

    /// Same-size Gaussian smoothing per channel with renormalized borders.
    pub fn gaussian(&mut self, x: Var, radius: usize, sigma: f64) -> Var {
        let dims = self.value(x).chw();
        let taps = kernels::gaussian_taps(radius, sigma);
        let out = kernels::gaussian_filter(self.value(x).data(), dims, &taps, false);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![dims.0, dims.1, dims.2], out), Op::Gaussian { x, taps }, rg)
    }

    /// Adaptive average pooling of `[C, H, W]` to `[C, out, out]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, out: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let rows = kernels::adaptive_bins(h, out);
        let cols = kernels::adaptive_bins(w, out);
        let src = self.value(x).data();
        let mut data = vec![0.0; c * out * out];
        for ch in 0..c {
            for (i, &(y0, y1)) in rows.iter().enumerate() {
                for (j, &(x0, x1)) in cols.iter().enumerate() {
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += src[(ch * h + y) * w + xx];
                        }
                    }
                    data[(ch * out + i) * out + j] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![c, out, out], data), Op::AdaptiveAvgPool { x, out }, rg)
    }

    /// Reverse pass from a scalar (`[1]`) node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.acc(grads, *a, g.zip_map(vb, |x, y| x * y));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.zip_map(va, |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if self.rg(*a) {
                    self.acc(grads, *a, g.zip_map(vb, |x, y| x / y));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = out.zip_map(vb, |q, y| -q / y);
                    self.acc(grads, *b, t.zip_map(g, |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|v| v * s)),
            Op::Offset(a) => self.acc(grads, *a, g.clone()),
            Op::AddChannel(x, v) => {
                self.acc(grads, *x, g.clone());
                if self.rg(*v) {
                    let (c, _, _) = g.chw();
                    let gv = (0..c).map(|ch| g.channel(ch).iter().sum()).collect();
                    self.acc(grads, *v, Tensor::new(vec![c], gv));
                }
            }
            Op::MulChannel(x, v) => {
                let (c, h, w) = g.chw();
                let vv = self.value(*v).data();
                if self.rg(*x) {
                    let mut gx = g.clone();
                    for ch in 0..c {
                        gx.channel_mut(ch).iter_mut().for_each(|e| *e *= vv[ch]);
                    }
                    self.acc(grads, *x, gx);
                }
                if self.rg(*v) {
                    let xv = self.value(*x);
                    let gv = (0..c)
                        .map(|ch| g.channel(ch).iter().zip(xv.channel(ch)).map(|(a, b)| a * b).sum())
                        .collect();
                    let _ = (h, w);
                    self.acc(grads, *v, Tensor::new(vec![c], gv));
                }
            }
            Op::AddRow(x, v) => {
                self.acc(grads, *x, g.clone());
                if self.rg(*v) {
                    let (_, d) = g.rc();
                    let mut gv = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        gv.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    self.acc(grads, *v, Tensor::new(vec![d], gv));
                }
            }
            Op::Conv { x, w, b, spec } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let o = wv.shape()[0];
                let (gx, gw, gb) = kernels::conv2d_backward(
                    xv.data(),
                    xv.chw(),
                    wv.data(),
                    o,
                    spec,
                    g.data(),
                    self.rg(*x),
                );
                if let Some(gx) = gx {
                    self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                }
                self.acc(grads, *w, Tensor::new(wv.shape().to_vec(), gw));
                if let Some(b) = b {
                    self.acc(grads, *b, Tensor::new(vec![o], gb));
                }
            }
            Op::MaxPool3 { x, arg } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                for (k, &src) in arg.iter().enumerate() {
                    if src != usize::MAX {
                        gx.data_mut()[src] += g.data()[k];
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if self.rg(x) {
                        let part = g.data()[off..off + n].to_vec();
                        self.acc(grads, x, Tensor::new(self.shape(x).to_vec(), part));
                    }
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let shape = self.shape(*x).to_vec();
                let inner: usize = shape[1..].iter().product();
                let mut gx = Tensor::zeros(&shape);
                gx.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                self.acc(grads, *x, gx);
            }
            Op::Unary(x, kind) => {
                let xv = self.value(*x);
                let d = match kind {
                    Unary::Silu => xv.zip_map(g, |v, gg| {
                        let s = sigmoid(v);
                        gg * s * (1.0 + v * (1.0 - s))
                    }),
                    Unary::Sigmoid => out.zip_map(g, |y, gg| gg * y * (1.0 - y)),
                    Unary::Softplus => xv.zip_map(g, |v, gg| gg * sigmoid(v)),
                    Unary::Exp => out.zip_map(g, |y, gg| gg * y),
                    Unary::Abs => xv.zip_map(g, |v, gg| {
                        if v > 0.0 {
                            gg
                        } else if v < 0.0 {
                            -gg
                        } else {
                            0.0
                        }
                    }),
                    Unary::Sqrt => out.zip_map(g, |y, gg| if y > 0.0 { gg * 0.5 / y } else { 0.0 }),
                    Unary::Relu => xv.zip_map(g, |v, gg| if v > 0.0 { gg } else { 0.0 }),
                };
                self.acc(grads, *x, d);
            }
            Op::Clamp { x, lo, hi } => {
                let d = self
                    .value(*x)
                    .zip_map(g, |v, gg| if v >= *lo && v <= *hi { gg } else { 0.0 });
                self.acc(grads, *x, d);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.acc(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.value(*x).chw();
                let n = (h * w) as f64;
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    let v = g.data()[ch] / n;
                    gx.channel_mut(ch).fill(v);
                }
                self.acc(grads, *x, gx);
            }
            Op::MatMul { a, b, ta, tb } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (n, m) = g.rc();
                let (ar, ac) = va.rc();
                let k = if *ta { ar } else { ac };
                if self.rg(*a) {
                    // logical dA = G Bᵀ  ([n, k]); stored transposed when `ta`.
                    let mut ga = vec![0.0; n * k];
                    kernels::gemm(n, m, k, g.data(), false, vb.data(), !*tb, 0.0, &mut ga);
                    let ga = if *ta { transpose2(&ga, n, k) } else { ga };
                    self.acc(grads, *a, Tensor::new(va.shape().to_vec(), ga));
                }
                if self.rg(*b) {
                    // logical dB = Aᵀ G ([k, m]); stored transposed when `tb`.
                    let mut gb = vec![0.0; k * m];
                    kernels::gemm(k, n, m, va.data(), !*ta, g.data(), false, 0.0, &mut gb);
                    let gb = if *tb { transpose2(&gb, k, m) } else { gb };
                    self.acc(grads, *b, Tensor::new(vb.shape().to_vec(), gb));
                }
            }
            Op::SoftmaxRows(x) => {
                let (_, m) = out.rc();
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(m).zip(out.data().chunks(m)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gr.iter_mut().zip(yr).for_each(|(e, y)| *e = y * (*e - dot));
                }
                self.acc(grads, *x, gx);
            }
            Op::MeanRows(x) => {
                let (n, d) = self.value(*x).rc();
                let mut gx = Vec::with_capacity(n * d);
                for _ in 0..n {
                    gx.extend(g.data().iter().map(|v| v / n as f64));
                }
                self.acc(grads, *x, Tensor::new(vec![n, d], gx));
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, g.clone().reshape(self.shape(*x)));
            }
            Op::Transpose(x) => {
                let (r, c) = g.rc();
                self.acc(grads, *x, Tensor::new(vec![c, r], transpose2(g.data(), r, c)));
            }
            Op::LayerNorm { x, inv_std } => {
                let (c, h, w) = out.chw();
                let hw = h * w;
                let xhat = out.data();
                let gd = g.data();
                let mut gx = vec![0.0; c * hw];
                for p in 0..hw {
                    let mg = (0..c).map(|ch| gd[ch * hw + p]).sum::<f64>() / c as f64;
                    let mgx =
                        (0..c).map(|ch| gd[ch * hw + p] * xhat[ch * hw + p]).sum::<f64>() / c as f64;
                    for ch in 0..c {
                        let k = ch * hw + p;
                        gx[k] = inv_std[p] * (gd[k] - mg - xhat[k] * mgx);
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![c, h, w], gx));
            }
            Op::Scan { x, a, b, c, d, states } => {
                let (len, ch) = self.value(*x).rc();
                let (_, n) = self.value(*a).rc();
                let (gx, ga, gb, gc, gd) = kernels::scan_backward(
                    self.value(*x).data(),
                    len,
                    ch,
                    n,
                    self.value(*a).data(),
                    self.value(*b).data(),
                    self.value(*c).data(),
                    self.value(*d).data(),
                    states,
                    g.data(),
                );
                self.acc(grads, *x, Tensor::new(vec![len, ch], gx));
                self.acc(grads, *a, Tensor::new(vec![ch, n], ga));
                self.acc(grads, *b, Tensor::new(vec![ch, n], gb));
                self.acc(grads, *c, Tensor::new(vec![ch, n], gc));
                self.acc(grads, *d, Tensor::new(vec![ch], gd));
            }
            Op::HaarDwt(x) => {
                // orthonormal: adjoint == inverse
                let gx = kernels::haar_inverse(g.data(), g.chw());
                self.acc(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx));
            }
            Op::HaarIdwt(x) => {
                let gx = kernels::haar_forward(g.data(), g.chw());
                self.acc(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx));
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.value(*x).chw();
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            gx[(ch * h + y / 2) * w + xx / 2] += g.data()[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![c, h, w], gx));
            }
            Op::Gaussian { x, taps } => {
                let gx = kernels::gaussian_filter(g.data(), g.chw(), taps, true);
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), gx));
            }
            Op::AdaptiveAvgPool { x, out: o } => {
                let (c, h, w) = self.value(*x).chw();
                let rows = kernels::adaptive_bins(h, *o);
                let cols = kernels::adaptive_bins(w, *o);
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for (i, &(y0, y1)) in rows.iter().enumerate() {
                        for (j, &(x0, x1)) in cols.iter().enumerate() {
                            let v = g.data()[(ch * o + i) * o + j] / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    gx[(ch * h + y) * w + xx] += v;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![c, h, w], gx));
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn transpose2(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
