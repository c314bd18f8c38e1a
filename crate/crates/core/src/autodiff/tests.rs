use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{numerical_grad, relative_error};
use super::{kernels, ConvSpec, Graph, Var};
use crate::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Compare the tape's input gradients of `sum(f(x) * r)` with central
/// differences for every input.
fn grad_check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vs);
        g.value(y).shape().to_vec()
    };
    let r = rand_tensor(&mut rng, &probe, -1.0, 1.0);
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vs);
        g.value(y).dot(&r)
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, &vs);
    let rv = g.constant(r.clone());
    let prod = g.mul(y, rv);
    let loss = g.sum(prod);
    let grads = g.backward(loss);
    for (i, v) in vs.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = numerical_grad(
            &inputs[i],
            |t| {
                let mut xs = inputs.clone();
                xs[i] = t.clone();
                eval(&xs)
            },
            1e-6,
        );
        let err = relative_error(analytic.data(), numeric.data());
        assert!(err < tol, "input {i}: relative error {err}");
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(5)
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[2, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 3, 3], 0.5, 1.5);
    grad_check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]), 1e-6);
    grad_check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]), 1e-6);
    grad_check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]), 1e-6);
    grad_check(vec![a.clone(), b.clone()], |g, v| g.div(v[0], v[1]), 1e-6);
    grad_check(vec![a.clone()], |g, v| g.scale(v[0], -2.5), 1e-6);
    grad_check(vec![a.clone()], |g, v| g.offset(v[0], 0.3), 1e-6);
    grad_check(vec![a.clone()], |g, v| g.silu(v[0]), 1e-6);
    grad_check(vec![a.clone()], |g, v| g.sigmoid(v[0]), 1e-6);
    grad_check(vec![a.clone()], |g, v| g.softplus(v[0]), 1e-6);
    grad_check(vec![a.clone()], |g, v| g.exp(v[0]), 1e-6);
    grad_check(vec![a.clone()], |g, v| g.abs(v[0]), 1e-6);
    grad_check(vec![a.clone()], |g, v| g.relu(v[0]), 1e-6);
    grad_check(vec![b.clone()], |g, v| g.sqrt(v[0]), 1e-6);
    grad_check(vec![a.clone()], |g, v| g.clamp(v[0], -0.5, 0.5), 1e-6);
    grad_check(vec![a.clone()], |g, v| g.sum(v[0]), 1e-6);
    grad_check(vec![a], |g, v| g.mean(v[0]), 1e-6);
}

#[test]
fn broadcast_ops() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[3, 2, 4], -1.0, 1.0);
    let v = rand_tensor(&mut r, &[3], -1.0, 1.0);
    grad_check(vec![x.clone(), v.clone()], |g, a| g.add_channel(a[0], a[1]), 1e-6);
    grad_check(vec![x.clone(), v], |g, a| g.mul_channel(a[0], a[1]), 1e-6);
    let m = rand_tensor(&mut r, &[5, 3], -1.0, 1.0);
    let row = rand_tensor(&mut r, &[3], -1.0, 1.0);
    grad_check(vec![m.clone(), row], |g, a| g.add_row(a[0], a[1]), 1e-6);
    grad_check(vec![x.clone()], |g, a| g.global_avg_pool(a[0]), 1e-6);
    grad_check(vec![m.clone()], |g, a| g.mean_rows(a[0]), 1e-6);
    grad_check(vec![m.clone()], |g, a| g.transpose(a[0]), 1e-6);
    grad_check(vec![m], |g, a| g.reshape(a[0], &[3, 5]), 1e-6);
}

#[test]
fn matmul_all_transposes() {
    let mut r = rng();
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = rand_tensor(&mut r, if ta { &[4, 3] } else { &[3, 4] }, -1.0, 1.0);
        let b = rand_tensor(&mut r, if tb { &[5, 4] } else { &[4, 5] }, -1.0, 1.0);
        grad_check(vec![a, b], move |g, v| g.matmul(v[0], v[1], ta, tb), 1e-6);
    }
    let x = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[2, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2], -1.0, 1.0);
    grad_check(vec![x, w, b], |g, v| g.linear(v[0], v[1], Some(v[2])), 1e-6);
}

#[test]
fn softmax_and_layer_norm() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[3, 6], -2.0, 2.0);
    grad_check(vec![x], |g, v| g.softmax_rows(v[0]), 1e-6);
    let f = rand_tensor(&mut r, &[4, 3, 3], -1.0, 1.0);
    grad_check(vec![f], |g, v| g.layer_norm_channels(v[0], 1e-5), 1e-5);
}

#[test]
fn convolutions() {
    let mut r = rng();
    let specs = [
        (ConvSpec::same(3), 4, 6),
        (ConvSpec { stride: 2, ..ConvSpec::same(3) }, 4, 6),
        (ConvSpec { dilation: 2, padding: 2, ..ConvSpec::same(3) }, 4, 6),
        (ConvSpec { groups: 4, ..ConvSpec::same(3) }, 4, 4),
        (ConvSpec::same(1), 3, 5),
    ];
    for (spec, cin, cout) in specs {
        let x = rand_tensor(&mut r, &[cin, 6, 6], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[cout, cin / spec.groups, spec.kernel, spec.kernel], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[cout], -1.0, 1.0);
        grad_check(vec![x, w, b], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec), 1e-6);
    }
}

#[test]
fn conv_matches_direct_loop() {
    let mut r = rng();
    let spec = ConvSpec { stride: 2, dilation: 2, padding: 2, ..ConvSpec::same(3) };
    let (c, h, w, o) = (2, 7, 5, 3);
    let x = rand_tensor(&mut r, &[c, h, w], -1.0, 1.0);
    let k = rand_tensor(&mut r, &[o, c, 3, 3], -1.0, 1.0);
    let out = kernels::conv2d(x.data(), (c, h, w), k.data(), None, o, &spec);
    let (ho, wo) = spec.out_size(h, w);
    for oc in 0..o {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for ic in 0..c {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let y = (i * 2 + ki * 2) as isize - 2;
                            let xx = (j * 2 + kj * 2) as isize - 2;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                acc += k.data()[((oc * c + ic) * 3 + ki) * 3 + kj]
                                    * x.data()[(ic * h + y as usize) * w + xx as usize];
                            }
                        }
                    }
                }
                assert!((acc - out[(oc * ho + i) * wo + j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn pooling_concat_slice_upsample() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 4, 4], -1.0, 1.0);
    let y = rand_tensor(&mut r, &[3, 4, 4], -1.0, 1.0);
    grad_check(vec![x.clone()], |g, v| g.max_pool3(v[0]), 1e-6);
    grad_check(vec![x.clone(), y.clone()], |g, v| g.concat(&[v[0], v[1], v[0]]), 1e-6);
    grad_check(vec![y], |g, v| g.slice(v[0], 1, 2), 1e-6);
    grad_check(vec![x.clone()], |g, v| g.upsample2(v[0]), 1e-6);
    grad_check(vec![x.clone()], |g, v| g.adaptive_avg_pool(v[0], 3), 1e-6);
    grad_check(vec![x], |g, v| g.gaussian(v[0], 2, 1.5), 1e-6);
}

#[test]
fn haar_and_scan() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 4, 6], -1.0, 1.0);
    grad_check(vec![x.clone()], |g, v| g.haar_dwt(v[0]), 1e-6);
    let y = rand_tensor(&mut r, &[8, 2, 3], -1.0, 1.0);
    grad_check(vec![y], |g, v| g.haar_idwt(v[0]), 1e-6);

    let xs = rand_tensor(&mut r, &[7, 3], -1.0, 1.0);
    let a = rand_tensor(&mut r, &[3, 2], 0.1, 0.9);
    let b = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
    let c = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
    let d = rand_tensor(&mut r, &[3], -1.0, 1.0);
    grad_check(vec![xs, a, b, c, d], |g, v| g.scan(v[0], v[1], v[2], v[3], v[4]), 1e-6);
}

#[test]
fn max_pool_zero_padding() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 2, 2], -1.0));
    let y = g.max_pool3(x);
    // every window touches the zero border
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn param_grads_reported_per_key() {
    let mut g = Graph::new();
    let w = Tensor::new(vec![2], vec![1.0, 2.0]);
    let p = g.param(7, &w);
    let q = g.param(7, &w);
    let unused = g.param(3, &w);
    let s = g.mul(p, q);
    let l = g.sum(s);
    let grads = g.backward(l);
    let got: Vec<(usize, Tensor)> = grads.param_grads(&g).collect();
    assert_eq!(got.len(), 3);
    assert_eq!(got[0].1.data(), &[1.0, 2.0]);
    assert_eq!(got[1].1.data(), &[1.0, 2.0]);
    assert_eq!(got[2].0, 3);
    assert_eq!(got[2].1.data(), &[0.0, 0.0]);
    let _ = unused;
}
