//! Finite-difference gradient checking.
//!
//! Only forward evaluations are used here, so the numerical gradient is
//! independent of every adjoint implemented in the graph.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Result of comparing one parameter group.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    /// Number of coordinates probed.
    pub probed: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over the probed
    /// coordinates; `0` when both are below what the stencil can resolve.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    relative_error_above(analytic, numeric, 1e-10)
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, or `0` when both norms are below `floor`.
pub fn relative_error_above(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < floor {
        0.0
    } else {
        diff / scale
    }
}

/// Central difference of `f` at `x` along every coordinate.
pub fn numerical_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// How the numerical derivative along one coordinate is estimated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stencil {
    /// Five-point central difference with a fixed step, accurate to `O(h⁴)`.
    FivePoint(f64),
    /// Ridders' extrapolation of central differences: starts at step `h`,
    /// shrinks it geometrically and keeps the estimate with the smallest
    /// error bound. Robust when gradient magnitudes span many decades.
    Ridders(f64),
}

impl Stencil {
    /// Derivative of `f` at offset 0.
    pub fn derivative(self, mut f: impl FnMut(f64) -> f64) -> f64 {
        match self {
            Stencil::FivePoint(h) => (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h),
            Stencil::Ridders(h0) => ridders(f, h0),
        }
    }

    /// Smallest slope distinguishable from rounding noise in a loss of
    /// magnitude `f0`.
    pub fn resolution(self, f0: f64) -> f64 {
        let h = match self {
            Stencil::FivePoint(h) => h,
            Stencil::Ridders(h0) => h0 / 1.4f64.powi(9),
        };
        8.0 * f64::EPSILON * f0.abs().max(1.0) / h
    }
}

fn ridders(mut f: impl FnMut(f64) -> f64, h0: f64) -> f64 {
    const SHRINK: f64 = 1.4;
    const TABLE: usize = 10;
    let mut central = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let mut h = h0;
    let mut a = [[0.0f64; TABLE]; TABLE];
    a[0][0] = central(h);
    let mut best = a[0][0];
    let mut err = f64::INFINITY;
    for i in 1..TABLE {
        h /= SHRINK;
        a[0][i] = central(h);
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    best
}

/// Compare analytic gradients of a set of named parameter groups with
/// five-point central differences of step `eps`.
///
/// `params` is mutated in place while probing and restored afterwards.
/// `loss` evaluates the scalar objective for the current parameters.
/// At most `max_probes` coordinates per group are probed, chosen with a
/// seeded RNG.
pub fn check_groups(
    params: &mut [(String, Tensor)],
    analytic: &[Tensor],
    loss: impl FnMut(&[(String, Tensor)]) -> f64,
    eps: f64,
    max_probes: usize,
    seed: u64,
) -> Vec<GroupCheck> {
    check_groups_with(params, analytic, loss, Stencil::FivePoint(eps), max_probes, seed)
}

/// [`check_groups`] with an explicit [`Stencil`].
pub fn check_groups_with(
    params: &mut [(String, Tensor)],
    analytic: &[Tensor],
    mut loss: impl FnMut(&[(String, Tensor)]) -> f64,
    stencil: Stencil,
    max_probes: usize,
    seed: u64,
) -> Vec<GroupCheck> {
    assert_eq!(params.len(), analytic.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resolution = stencil.resolution(loss(params));
    let mut out = Vec::with_capacity(params.len());
    for gi in 0..params.len() {
        let n = params[gi].1.len();
        let idx: Vec<usize> = if n <= max_probes {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, max_probes).into_vec();
            v.sort_unstable();
            v
        };
        let mut a = Vec::with_capacity(idx.len());
        let mut num = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = params[gi].1.data()[i];
            let d = stencil.derivative(|dx| {
                params[gi].1.data_mut()[i] = orig + dx;
                loss(params)
            });
            params[gi].1.data_mut()[i] = orig;
            num.push(d);
            a.push(analytic[gi].data()[i]);
        }
        out.push(GroupCheck {
            name: params[gi].0.clone(),
            probed: idx.len(),
            rel_error: relative_error_above(&a, &num, (resolution * (idx.len() as f64).sqrt()).max(1e-10)),
            analytic_norm: a.iter().map(|v| v * v).sum::<f64>().sqrt(),
            numeric_norm: num.iter().map(|v| v * v).sum::<f64>().sqrt(),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencils_on_smooth_functions() {
        let f = |x: f64| (0.3 + x).sin() * (2.0 * x).exp();
        let exact = 0.3f64.cos() + 2.0 * 0.3f64.sin();
        assert!((Stencil::FivePoint(1e-3).derivative(f) - exact).abs() < 1e-10);
        assert!((Stencil::Ridders(0.1).derivative(f) - exact).abs() < 1e-12);
    }

    #[test]
    fn ridders_resolves_tiny_slopes_on_a_large_offset() {
        let slope = 3e-11;
        let f = |x: f64| 3.7 + slope * x + 0.01 * x * x;
        let d = Stencil::Ridders(0.1).derivative(f);
        assert!((d - slope).abs() / slope < 1e-4, "{d}");
    }
}
