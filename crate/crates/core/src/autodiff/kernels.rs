//! Raw array kernels shared by the differentiable ops and the plain
//! (non-graph) APIs.

use rayon::prelude::*;

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        Self { kernel, stride: 1, padding: kernel / 2, dilation: 1, groups: 1 }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let ho = (h + 2 * self.padding - span) / self.stride + 1;
        let wo = (w + 2 * self.padding - span) / self.stride + 1;
        (ho, wo)
    }
}

/// `out[n, m] = sum_p a[n, p] * b[p, m]` with optional logical transposes.
///
/// `a` is stored `[n, k]` (or `[k, n]` if `ta`), `b` is stored `[k, m]`
/// (or `[m, k]` if `tb`). The result is accumulated into `out` scaled by
/// `beta` first.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    if n == 0 || m == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, n as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (m as isize, 1) };
    // SAFETY: strides describe exactly the buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// Unfold one group of input channels into a `[cg * k * k, ho * wo]` matrix.
fn im2col(
    x: &[f64],
    (h, w): (usize, usize),
    c0: usize,
    cg: usize,
    spec: &ConvSpec,
    (ho, wo): (usize, usize),
    col: &mut [f64],
) {
    let k = spec.kernel;
    let p = spec.padding as isize;
    for ci in 0..cg {
        let plane = &x[(c0 + ci) * h * w..(c0 + ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                let dy = (ky * spec.dilation) as isize - p;
                let dx = (kx * spec.dilation) as isize - p;
                for oy in 0..ho {
                    let iy = (oy * spec.stride) as isize + dy;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * spec.stride) as isize + dx;
                        *v = if ix >= 0 && ix < w as isize { src[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Fold a column matrix back onto the input gradient (adjoint of `im2col`).
fn col2im(
    col: &[f64],
    (h, w): (usize, usize),
    c0: usize,
    cg: usize,
    spec: &ConvSpec,
    (ho, wo): (usize, usize),
    gx: &mut [f64],
) {
    let k = spec.kernel;
    let p = spec.padding as isize;
    for ci in 0..cg {
        let plane = &mut gx[(c0 + ci) * h * w..(c0 + ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                let dy = (ky * spec.dilation) as isize - p;
                let dx = (kx * spec.dilation) as isize - p;
                for oy in 0..ho {
                    let iy = (oy * spec.stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride) as isize + dx;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `x` is `[c, h, w]`, `weight` is `[o, c / groups, k, k]`.
pub fn conv2d(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: Option<&[f64]>,
    o: usize,
    spec: &ConvSpec,
) -> Vec<f64> {
    let (ho, wo) = spec.out_size(h, w);
    let g = spec.groups;
    let cg = c / g;
    let og = o / g;
    let kk = spec.kernel * spec.kernel;
    let mut out = vec![0.0; o * ho * wo];
    let mut col = vec![0.0; cg * kk * ho * wo];
    for gi in 0..g {
        im2col(x, (h, w), gi * cg, cg, spec, (ho, wo), &mut col);
        let wg = &weight[gi * og * cg * kk..(gi + 1) * og * cg * kk];
        let dst = &mut out[gi * og * ho * wo..(gi + 1) * og * ho * wo];
        gemm(og, cg * kk, ho * wo, wg, false, &col, false, 0.0, dst);
    }
    if let Some(b) = bias {
        for (oc, plane) in out.chunks_mut(ho * wo).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[oc]);
        }
    }
    out
}

/// Gradients of a convolution: `(d input, d weight, d bias)`.
pub fn conv2d_backward(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    weight: &[f64],
    o: usize,
    spec: &ConvSpec,
    gout: &[f64],
    need_x: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = spec.out_size(h, w);
    let g = spec.groups;
    let cg = c / g;
    let og = o / g;
    let kk = spec.kernel * spec.kernel;
    let mut gx = if need_x { Some(vec![0.0; c * h * w]) } else { None };
    let mut gw = vec![0.0; weight.len()];
    let mut col = vec![0.0; cg * kk * ho * wo];
    let mut gcol = vec![0.0; cg * kk * ho * wo];
    for gi in 0..g {
        im2col(x, (h, w), gi * cg, cg, spec, (ho, wo), &mut col);
        let go = &gout[gi * og * ho * wo..(gi + 1) * og * ho * wo];
        let gwg = &mut gw[gi * og * cg * kk..(gi + 1) * og * cg * kk];
        gemm(og, ho * wo, cg * kk, go, false, &col, true, 0.0, gwg);
        if let Some(gx) = gx.as_mut() {
            let wg = &weight[gi * og * cg * kk..(gi + 1) * og * cg * kk];
            gemm(cg * kk, og, ho * wo, wg, true, go, false, 0.0, &mut gcol);
            col2im(&gcol, (h, w), gi * cg, cg, spec, (ho, wo), gx);
        }
    }
    let gb = gout.chunks(ho * wo).map(|p| p.iter().sum()).collect();
    (gx, gw, gb)
}

/// 3x3 max pooling, stride 1, zero padding 1. Returns the pooled values and,
/// for each output, the flat input index of the winning element
/// (`usize::MAX` when a padding zero wins).
pub fn max_pool3(x: &[f64], (c, h, w): (usize, usize, usize)) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; c * h * w];
    let mut arg = vec![usize::MAX; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let iy = y as isize + dy;
                        let ix = xx as isize + dx;
                        let (v, i) = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            (0.0, usize::MAX)
                        } else {
                            let i = base + iy as usize * w + ix as usize;
                            (x[i], i)
                        };
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                out[base + y * w + xx] = best;
                arg[base + y * w + xx] = best_i;
            }
        }
    }
    (out, arg)
}

/// One level of the orthonormal 2-D Haar transform.
///
/// `[c, h, w]` maps to `[4c, h/2, w/2]` laid out band-major: channels
/// `0..c` hold LL, then LH (horizontal detail), HL (vertical detail), HH.
pub fn haar_forward(x: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let band = c * h2 * w2;
    let mut out = vec![0.0; 4 * band];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                let a = plane[2 * i * w + 2 * j];
                let b = plane[2 * i * w + 2 * j + 1];
                let cc = plane[(2 * i + 1) * w + 2 * j];
                let d = plane[(2 * i + 1) * w + 2 * j + 1];
                let o = ch * h2 * w2 + i * w2 + j;
                out[o] = 0.5 * (a + b + cc + d);
                out[band + o] = 0.5 * (a - b + cc - d);
                out[2 * band + o] = 0.5 * (a + b - cc - d);
                out[3 * band + o] = 0.5 * (a - b - cc + d);
            }
        }
    }
    out
}

/// Inverse of [`haar_forward`]: `[4c, h, w]` back to `[c, 2h, 2w]`.
pub fn haar_inverse(y: &[f64], (c4, h2, w2): (usize, usize, usize)) -> Vec<f64> {
    let c = c4 / 4;
    let (h, w) = (2 * h2, 2 * w2);
    let band = c * h2 * w2;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let o = ch * h2 * w2 + i * w2 + j;
                let ll = y[o];
                let lh = y[band + o];
                let hl = y[2 * band + o];
                let hh = y[3 * band + o];
                let plane = &mut out[ch * h * w..(ch + 1) * h * w];
                plane[2 * i * w + 2 * j] = 0.5 * (ll + lh + hl + hh);
                plane[2 * i * w + 2 * j + 1] = 0.5 * (ll - lh + hl - hh);
                plane[(2 * i + 1) * w + 2 * j] = 0.5 * (ll + lh - hl - hh);
                plane[(2 * i + 1) * w + 2 * j + 1] = 0.5 * (ll - lh - hl + hh);
            }
        }
    }
    out
}

/// Discrete Gaussian taps of radius `r` (unnormalized sum, peak 1).
pub fn gaussian_taps(radius: usize, sigma: f64) -> Vec<f64> {
    (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Renormalizing 1-D filter along the last axis of `[rows, n]`:
/// `out[i] = sum_j k[j - i + r] x[j] / sum_{valid j} k[j - i + r]`.
fn filter_rows(x: &[f64], rows: usize, n: usize, taps: &[f64], adjoint: bool) -> Vec<f64> {
    let r = taps.len() / 2;
    let norm: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(n - 1);
            (lo..=hi).map(|j| taps[j + r - i]).sum()
        })
        .collect();
    let mut out = vec![0.0; rows * n];
    out.par_chunks_mut(n).zip(x.par_chunks(n)).for_each(|(o, src)| {
        for i in 0..n {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(n - 1);
            if adjoint {
                let gi = src[i] / norm[i];
                for j in lo..=hi {
                    o[j] += taps[j + r - i] * gi;
                }
            } else {
                let mut acc = 0.0;
                for j in lo..=hi {
                    acc += taps[j + r - i] * src[j];
                }
                o[i] = acc / norm[i];
            }
        }
    });
    out
}

fn transpose_planes(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[xx * h + y] = src[y * w + xx];
            }
        }
    }
    out
}

/// Separable Gaussian smoothing of every channel with boundary
/// renormalization, so the output keeps the input size. With
/// `adjoint = true` this applies the transposed operator.
pub fn gaussian_filter(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    taps: &[f64],
    adjoint: bool,
) -> Vec<f64> {
    if adjoint {
        // (Fy Fx)^T = Fx^T Fy^T
        let t = transpose_planes(x, c, h, w);
        let t = filter_rows(&t, c * w, h, taps, true);
        let t = transpose_planes(&t, c, w, h);
        filter_rows(&t, c * h, w, taps, true)
    } else {
        let t = filter_rows(x, c * h, w, taps, false);
        let t = transpose_planes(&t, c, h, w);
        let t = filter_rows(&t, c * w, h, taps, false);
        transpose_planes(&t, c, w, h)
    }
}

/// Bin bounds of adaptive average pooling (`floor` start, `ceil` end).
pub fn adaptive_bins(n: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out).map(|i| ((i * n) / out, ((i + 1) * n).div_ceil(out))).collect()
}

/// Diagonal linear state-space recurrence over `x: [len, ch]` with per-channel
/// state of size `n`:
///
/// `h_t = a ⊙ h_{t-1} + b x_t`, `y_t = <c, h_t> + d x_t`.
///
/// `a`, `b`, `c` are `[ch, n]`, `d` is `[ch]`. Returns `(y, states)` where
/// `states` is `[len, ch, n]`.
pub fn scan_forward(
    x: &[f64],
    len: usize,
    ch: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; len * ch];
    let mut states = vec![0.0; len * ch * n];
    for t in 0..len {
        for k in 0..ch {
            let xt = x[t * ch + k];
            let mut acc = d[k] * xt;
            for s in 0..n {
                let prev = if t > 0 { states[((t - 1) * ch + k) * n + s] } else { 0.0 };
                let h = a[k * n + s] * prev + b[k * n + s] * xt;
                states[(t * ch + k) * n + s] = h;
                acc += c[k * n + s] * h;
            }
            y[t * ch + k] = acc;
        }
    }
    (y, states)
}

/// Gradients of [`scan_forward`]: `(dx, da, db, dc, dd)`.
#[allow(clippy::too_many_arguments)]
pub fn scan_backward(
    x: &[f64],
    len: usize,
    ch: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    states: &[f64],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; len * ch];
    let mut ga = vec![0.0; ch * n];
    let mut gb = vec![0.0; ch * n];
    let mut gc = vec![0.0; ch * n];
    let mut gd = vec![0.0; ch];
    // running dL/dh_{t}
    let mut gh = vec![0.0; ch * n];
    for t in (0..len).rev() {
        for k in 0..ch {
            let g = gy[t * ch + k];
            let xt = x[t * ch + k];
            gd[k] += g * xt;
            let mut gxt = d[k] * g;
            for s in 0..n {
                let i = k * n + s;
                let h = states[(t * ch + k) * n + s];
                gc[i] += g * h;
                let ght = gh[i] + c[i] * g;
                gxt += b[i] * ght;
                gb[i] += ght * xt;
                if t > 0 {
                    ga[i] += ght * states[((t - 1) * ch + k) * n + s];
                }
                gh[i] = a[i] * ght;
            }
            gx[t * ch + k] = gxt;
        }
    }
    (gx, ga, gb, gc, gd)
}
