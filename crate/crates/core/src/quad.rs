//! Small wrappers around the Gauss rules and the adaptive double-exponential
//! integrator. Everything downstream asks for plain `(node, weight)` lists.

use std::num::NonZeroUsize;

use gauss_quad::{GaussHermite, GaussLegendre};

/// Gauss–Legendre nodes and weights mapped to `[a, b]`.
pub fn legendre(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let n = NonZeroUsize::new(n.max(1)).unwrap();
    let rule = GaussLegendre::new(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    rule.as_node_weight_pairs()
        .iter()
        .map(|&(x, w)| (mid + half * x, half * w))
        .collect()
}

/// Composite Gauss–Legendre rule over `panels` equal panels of `[a, b]`.
pub fn composite_legendre(order: usize, panels: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let panels = panels.max(1);
    let h = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(order * panels);
    for p in 0..panels {
        let lo = a + p as f64 * h;
        out.extend(legendre(order, lo, lo + h));
    }
    out
}

/// Composite rule over explicit breakpoints.
pub fn piecewise_legendre(order: usize, breaks: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            out.extend(legendre(order, w[0], w[1]));
        }
    }
    out
}

/// Gauss–Hermite rule for the standard normal density: nodes `x` and
/// weights summing to one, so `sum w f(x) ~ E[f(Z)]` with `Z ~ N(0, 1)`.
pub fn normal_hermite(n: usize) -> Vec<(f64, f64)> {
    let n = NonZeroUsize::new(n.max(1)).unwrap();
    let rule = GaussHermite::new(n);
    let s = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> = rule
        .as_node_weight_pairs()
        .iter()
        .map(|&(x, w)| (std::f64::consts::SQRT_2 * x, w / s))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs
}

/// Gauss rule for the Rayleigh density `r e^{-r^2/2}` on `[0, inf)`, built
/// by the discretized Stieltjes procedure. Weights sum to one.
pub fn rayleigh(n: usize) -> Vec<(f64, f64)> {
    let n = n.max(1);
    let base: Vec<(f64, f64)> = composite_legendre(24, 12, 0.0, 12.0)
        .into_iter()
        .map(|(r, w)| (r, w * r * (-0.5 * r * r).exp()))
        .collect();
    let mass: f64 = base.iter().map(|p| p.1).sum();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut prev = vec![0.0; base.len()];
    let mut cur = vec![1.0; base.len()];
    let mut norm_prev = 1.0;
    for k in 0..n {
        let norm: f64 = base.iter().zip(&cur).map(|(p, c)| p.1 * c * c).sum();
        a[k] = base.iter().zip(&cur).map(|(p, c)| p.1 * p.0 * c * c).sum::<f64>() / norm;
        if k > 0 {
            b[k] = norm / norm_prev;
        }
        let next: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(i, p)| (p.0 - a[k]) * cur[i] - b[k] * prev[i])
            .collect();
        prev = std::mem::replace(&mut cur, next);
        norm_prev = norm;
    }
    let jac = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            a[i]
        } else if i + 1 == j {
            b[j].sqrt()
        } else if j + 1 == i {
            b[i].sqrt()
        } else {
            0.0
        }
    });
    let eig = jac.symmetric_eigen();
    let mut out: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mass * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    out.sort_by(|x, y| x.0.total_cmp(&y.0));
    out
}

/// Uniform periodic trapezoid rule on `[0, 2 pi)`.
pub fn periodic(n: usize) -> Vec<(f64, f64)> {
    let n = n.max(1);
    let h = std::f64::consts::TAU / n as f64;
    (0..n).map(|k| ((k as f64 + 0.5) * h, h)).collect()
}

/// Adaptive tanh-sinh integral of `f` over `[a, b]`.
pub fn adaptive<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Integral {
    if b <= a {
        return Integral::default();
    }
    let out = quadrature::double_exponential::integrate(f, a, b, tol);
    Integral {
        value: out.integral,
        error: out.error_estimate,
        evaluations: out.num_function_evaluations as usize,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

/// Pairwise summation, so reductions do not depend on accumulation order
/// beyond the fixed tree shape.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n if n <= 16 => xs.iter().sum(),
        n => {
            let (l, r) = xs.split_at(n / 2);
            pairwise_sum(l) + pairwise_sum(r)
        }
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn rayleigh_moments() {
        let r = super::rayleigh(12);
        let m0: f64 = r.iter().map(|p| p.1).sum();
        let m2: f64 = r.iter().map(|p| p.1 * p.0 * p.0).sum();
        let m1: f64 = r.iter().map(|p| p.1 * p.0).sum();
        assert!((m0 - 1.0).abs() < 1e-13 && (m2 - 2.0).abs() < 1e-12);
        assert!((m1 - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-13);
        let m3: f64 = r.iter().map(|p| p.1 * p.0.powi(3)).sum();
        assert!((m3 - 3.0 * (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-12);
    }

    use super::*;

    #[test]
    fn legendre_integrates_polynomials() {
        let q = legendre(5, -1.0, 2.0);
        let s: f64 = q.iter().map(|&(x, w)| w * x.powi(9)).sum();
        assert!((s - (2f64.powi(10) - 1.0) / 10.0).abs() < 1e-10);
    }

    #[test]
    fn hermite_matches_normal_moments() {
        let q = normal_hermite(6);
        let m0: f64 = q.iter().map(|p| p.1).sum();
        let m2: f64 = q.iter().map(|&(x, w)| w * x * x).sum();
        let m4: f64 = q.iter().map(|&(x, w)| w * x.powi(4)).sum();
        assert!((m0 - 1.0).abs() < 1e-14);
        assert!((m2 - 1.0).abs() < 1e-13);
        assert!((m4 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn adaptive_handles_endpoint_singularity() {
        let r = adaptive(|x: f64| 1.0 / x.sqrt(), 0.0, 1.0, 1e-10);
        assert!((r.value - 2.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn pairwise_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-11);
    }
}
