//! The kinetic weight `alpha = chi(beta)` near the wall and its
//! velocity-lemma diagnostics.

use serde::Serialize;

use crate::characteristics::{NoAux, PhaseState, Stop, Tracer};
use crate::error::{Error, Result};
use crate::field::ForceField;
use crate::geometry::{LevelSetDomain, BOUNDARY_TOL};
use crate::{Mat3, Vec3};

/// Round-off allowance for `beta^2`, per unit of `1 + |v|^2`.
const RADICAND_CLAMP: f64 = 1e-14;

/// Smooth monotone cutoff: identity below `l/4`, constant `3l/8` above `l/2`.
///
/// The blend is the antiderivative of `1 - smoothstep`, so `0 <= chi' <= 1`
/// and `chi` is twice continuously differentiable.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Cutoff {
    pub lower: f64,
    pub upper: f64,
    pub plateau: f64,
}

impl Cutoff {
    pub fn new(level: f64) -> Self {
        let lower = 0.25 * level;
        let upper = 0.5 * level;
        Cutoff {
            lower,
            upper,
            plateau: lower + 0.5 * (upper - lower),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x <= self.lower {
            x
        } else if x >= self.upper {
            self.plateau
        } else {
            let w = self.upper - self.lower;
            let u = (x - self.lower) / w;
            self.lower + w * (u - u.powi(6) + 3.0 * u.powi(5) - 2.5 * u.powi(4))
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        if x <= self.lower {
            1.0
        } else if x >= self.upper {
            0.0
        } else {
            let u = (x - self.lower) / (self.upper - self.lower);
            1.0 - u * u * u * (10.0 + u * (6.0 * u - 15.0))
        }
    }
}

#[derive(Clone, Copy)]
pub struct KineticWeight<'a> {
    pub domain: &'a LevelSetDomain,
    pub field: &'a dyn ForceField,
    pub delta: f64,
    pub delta_prime: f64,
    pub cutoff: Cutoff,
}

/// The weight frozen at one `(t, y)`, cheap to evaluate for many velocities.
#[derive(Clone, Copy, Debug)]
pub struct LocalWeight {
    pub xi: f64,
    pub gradient: Vec3,
    pub hessian: Mat3,
    /// `E(t, ybar) . grad xi(ybar)`.
    pub wall_push: f64,
    pub in_collar: bool,
    pub cutoff: Cutoff,
}

impl LocalWeight {
    /// `beta^2` without the clamp.
    pub fn radicand(&self, v: &Vec3) -> f64 {
        self.radicand_from(v.dot(&self.gradient), v)
    }

    fn radicand_from(&self, vg: f64, v: &Vec3) -> f64 {
        vg * vg + self.xi * self.xi - 2.0 * self.xi * v.dot(&(self.hessian * v)) - 2.0 * self.wall_push * self.xi
    }

    pub fn beta(&self, v: &Vec3) -> Result<f64> {
        self.beta_from(v.dot(&self.gradient), v)
    }

    /// `alpha(v)` with `v . grad xi` supplied by the caller, for quadratures
    /// that place nodes at a known distance from the grazing plane.
    pub fn alpha_with_normal(&self, vg: f64, v: &Vec3) -> Result<f64> {
        if !self.in_collar {
            return Ok(self.cutoff.plateau);
        }
        Ok(self.cutoff.eval(self.beta_from(vg, v)?))
    }

    fn beta_from(&self, vg: f64, v: &Vec3) -> Result<f64> {
        let r = self.radicand_from(vg, v);
        if r < -RADICAND_CLAMP * (1.0 + v.norm_squared()) {
            return Err(Error::NegativeRadicand { value: r });
        }
        Ok(r.max(0.0).sqrt())
    }

    pub fn alpha(&self, v: &Vec3) -> Result<f64> {
        if !self.in_collar {
            return Ok(self.cutoff.plateau);
        }
        Ok(self.cutoff.eval(self.beta(v)?))
    }

    /// `xi^2 - 2 xi E.grad xi(ybar)`: the velocity-independent part of `beta^2`.
    pub fn floor(&self) -> f64 {
        self.xi * self.xi - 2.0 * self.wall_push * self.xi
    }
}

impl<'a> KineticWeight<'a> {
    /// Collar width from the domain, `delta'` from the sampled inner shell.
    pub fn new(domain: &'a LevelSetDomain, field: &'a dyn ForceField) -> Self {
        Self::with_collar(domain, field, domain.collar_width())
    }

    pub fn with_collar(domain: &'a LevelSetDomain, field: &'a dyn ForceField, delta: f64) -> Self {
        let delta_prime = domain.shell_level(delta);
        KineticWeight {
            domain,
            field,
            delta,
            delta_prime,
            cutoff: Cutoff::new(delta_prime),
        }
    }

    pub fn plateau(&self) -> f64 {
        self.cutoff.plateau
    }

    pub fn local(&self, t: f64, x: &Vec3) -> Result<LocalWeight> {
        let mut xi = self.domain.value(x);
        // Wall points a round-off outside would give a negative floor.
        if xi > 0.0 && xi <= BOUNDARY_TOL {
            xi = 0.0;
        }
        let mut lw = LocalWeight {
            xi,
            gradient: Vec3::zeros(),
            hessian: Mat3::zeros(),
            wall_push: 0.0,
            in_collar: false,
            cutoff: self.cutoff,
        };
        // beta >= |xi|, so the plateau is reached regardless of the collar.
        if xi.abs() >= self.cutoff.upper {
            return Ok(lw);
        }
        let proj = self.domain.project(x)?;
        if proj.distance >= self.delta && xi < 0.0 {
            return Ok(lw);
        }
        lw.in_collar = true;
        lw.gradient = self.domain.gradient(x);
        lw.hessian = self.domain.hessian(x);
        lw.wall_push = self.field.field(t, &proj.point).dot(&self.domain.gradient(&proj.point));
        Ok(lw)
    }

    /// `beta`; requires `x` in the collar.
    pub fn beta(&self, t: f64, x: &Vec3, v: &Vec3) -> Result<f64> {
        let proj = self.domain.nearest_boundary_point(x)?;
        let lw = LocalWeight {
            xi: self.domain.value(x),
            gradient: self.domain.gradient(x),
            hessian: self.domain.hessian(x),
            wall_push: self.field.field(t, &proj.point).dot(&self.domain.gradient(&proj.point)),
            in_collar: true,
            cutoff: self.cutoff,
        };
        lw.beta(v)
    }

    pub fn alpha(&self, t: f64, x: &Vec3, v: &Vec3) -> Result<f64> {
        self.local(t, x)?.alpha(v)
    }

    /// `(d_t + v . grad_x + E . grad_v) beta^2` in closed form.
    pub fn transport_derivative_beta2(&self, t: f64, x: &Vec3, v: &Vec3) -> Result<f64> {
        let proj = self.domain.nearest_boundary_point(x)?;
        let xb = proj.point;
        let xi = self.domain.value(x);
        let g = self.domain.gradient(x);
        let h = self.domain.hessian(x);
        let third = self.domain.third(x);
        let e = self.field.field(t, x);
        let fb = self.field.eval(t, &xb);
        let gb = self.domain.gradient(&xb);
        let hb = self.domain.hessian(&xb);
        let push = fb.e.dot(&gb);
        let vg = v.dot(&g);
        let t3: f64 = (0..3).map(|k| v[k] * v.dot(&(third[k] * v))).sum();
        // Derivative of the wall term along the flow, through the projection.
        let grad_push = fb.grad.transpose() * gb + hb * fb.e;
        let d_push = fb.dt.dot(&gb) + grad_push.dot(&(proj.jacobian * v));
        Ok(2.0 * vg * (e.dot(&g) - push) + 2.0 * xi * vg
            - 4.0 * xi * e.dot(&(h * v))
            - 2.0 * xi * t3
            - 2.0 * xi * d_push)
    }
}

/// One stored point of a trajectory for the velocity lemma.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct WeightSample {
    pub tau: f64,
    pub alpha: f64,
    pub speed: f64,
}

/// Samples `alpha` at every accepted step of the path from `state` over
/// `duration` in direction `dir`, stopping at the wall.
pub fn sample_weight_path(
    weight: &KineticWeight<'_>,
    tracer: &Tracer<'_>,
    state: &PhaseState,
    duration: f64,
    dir: f64,
) -> Result<Vec<WeightSample>> {
    let mut out = Vec::new();
    let mut err = None;
    let stop = tracer.integrate(state, [], dir, duration, &NoAux, &mut |s, y, _| {
        if err.is_some() {
            return;
        }
        match weight.alpha(s, &y.x, &y.v) {
            Ok(a) => out.push(WeightSample {
                tau: s,
                alpha: a,
                speed: y.v.norm(),
            }),
            Err(e) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    // Drop the wall point itself: alpha may vanish there.
    if let Stop::Exited { .. } = stop {
        out.pop();
    }
    Ok(out)
}

fn cumulative_rate(samples: &[WeightSample]) -> Vec<f64> {
    let mut acc = vec![0.0; samples.len()];
    for i in 1..samples.len() {
        let dt = (samples[i].tau - samples[i - 1].tau).abs();
        acc[i] = acc[i - 1] + dt * (0.5 * (samples[i].speed + samples[i - 1].speed) + 1.0);
    }
    acc
}

/// Smallest rate `C` with `|d log alpha| <= C (|V| + 1) d tau` between
/// consecutive samples.
pub fn fit_velocity_rate(samples: &[WeightSample]) -> f64 {
    let acc = cumulative_rate(samples);
    let mut c: f64 = 0.0;
    for i in 1..samples.len() {
        let di = acc[i] - acc[i - 1];
        if di > 0.0 {
            c = c.max((samples[i].alpha.ln() - samples[i - 1].alpha.ln()).abs() / di);
        }
    }
    c
}

#[derive(Clone, Debug, Serialize)]
pub struct VelocityLemmaRow {
    pub tau: f64,
    pub alpha: f64,
    pub bound_low: f64,
    pub bound_high: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VelocityLemmaResult {
    /// Largest excess of `|log alpha(tau) - log alpha(s)|` over `C * integral`.
    pub max_violation: f64,
    pub pass: bool,
    pub rows: Vec<VelocityLemmaRow>,
}

/// Checks `alpha(s) e^{-C I} <= alpha(tau) <= alpha(s) e^{C I}` with
/// `I = int (|V| + 1)` against the first sample.
pub fn velocity_lemma_check(samples: &[WeightSample], c: f64) -> VelocityLemmaResult {
    let acc = cumulative_rate(samples);
    let mut rows = Vec::with_capacity(samples.len());
    let mut worst = f64::NEG_INFINITY;
    let mut pass = true;
    if let Some(first) = samples.first() {
        let a0 = first.alpha;
        for (s, &i) in samples.iter().zip(acc.iter()) {
            let excess = (s.alpha.ln() - a0.ln()).abs() - c * i;
            worst = worst.max(excess);
            if excess > 1e-12 * (1.0 + a0.ln().abs()) {
                pass = false;
            }
            rows.push(VelocityLemmaRow {
                tau: s.tau,
                alpha: s.alpha,
                bound_low: a0 * (-c * i).exp(),
                bound_high: a0 * (c * i).exp(),
            });
        }
    }
    VelocityLemmaResult {
        max_violation: worst.max(0.0),
        pass,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, ModulatedRadialField, RadialField};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn cutoff_shape() {
        let c = Cutoff::new(0.36);
        assert_eq!(c.eval(0.05), 0.05);
        assert_relative_eq!(c.eval(0.5), 0.135, epsilon = 1e-15);
        assert_relative_eq!(c.eval(0.18), 0.135, epsilon = 1e-15);
        let mut prev = 0.0;
        for i in 0..=4000 {
            let x = 0.25 * i as f64 / 1000.0;
            let d = c.derivative(x);
            assert!((-1e-15..=1.0 + 1e-15).contains(&d));
            assert!(c.eval(x) >= prev - 1e-15);
            prev = c.eval(x);
            // derivative matches differences
            if x > 1e-3 {
                let h = 1e-7;
                assert!(((c.eval(x + h) - c.eval(x - h)) / (2.0 * h) - d).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn beta_examples() {
        let d = LevelSetDomain::unit_ball();
        let f = RadialField { strength: 1.0 };
        let w = KineticWeight::new(&d, &f);
        assert_relative_eq!(w.delta_prime, 0.36, epsilon = 1e-10);
        assert_relative_eq!(w.beta(0.0, &Vec3::x(), &-Vec3::x()).unwrap(), 2.0, epsilon = 1e-14);
        let b = w.beta(0.0, &Vec3::new(0.9, 0.0, 0.0), &Vec3::zeros()).unwrap();
        assert_relative_eq!(b, 0.7961f64.sqrt(), epsilon = 1e-13);
    }

    #[test]
    fn alpha_branches() {
        let d = LevelSetDomain::unit_ball();
        let f = RadialField { strength: 1.0 };
        let w = KineticWeight::new(&d, &f);
        assert_eq!(w.alpha(0.0, &Vec3::new(0.1, 0.2, 0.0), &Vec3::x()).unwrap(), w.plateau());
        let v = Vec3::new(0.02, 0.7, 0.0);
        assert_relative_eq!(w.alpha(0.0, &Vec3::x(), &v).unwrap(), 0.04, epsilon = 1e-14);
    }

    #[test]
    fn alpha_is_lipschitz_across_collar_seam() {
        let d = LevelSetDomain::unit_ball();
        let f = RadialField { strength: 1.0 };
        let w = KineticWeight::new(&d, &f);
        let v = Vec3::new(0.1, 0.05, 0.0);
        let h = 1e-6;
        for k in 0..200 {
            let r = 0.75 + 0.1 * k as f64 / 200.0;
            let a = w.alpha(0.0, &Vec3::new(r, 0.0, 0.0), &v).unwrap();
            let b = w.alpha(0.0, &Vec3::new(r + h, 0.0, 0.0), &v).unwrap();
            assert!((a - b).abs() <= 10.0 * h);
        }
    }

    #[test]
    fn negative_radicand_under_inward_field() {
        let d = LevelSetDomain::unit_ball();
        let f = RadialField { strength: -1.0 };
        let w = KineticWeight::new(&d, &f);
        assert!(matches!(
            w.beta(0.0, &Vec3::new(0.95, 0.0, 0.0), &Vec3::zeros()),
            Err(Error::NegativeRadicand { .. })
        ));
    }

    #[test]
    fn transport_derivative_reduces_on_ball() {
        let d = LevelSetDomain::unit_ball();
        let f = RadialField { strength: 1.0 };
        let w = KineticWeight::new(&d, &f);
        let x = Vec3::new(0.5, 0.4, -0.5);
        let v = Vec3::new(0.3, -1.0, 0.7);
        let xi = d.value(&x);
        let got = w.transport_derivative_beta2(0.0, &x, &v).unwrap();
        assert_relative_eq!(got, 4.0 * xi * x.dot(&v), epsilon = 1e-12);
        let z = ConstantField(Vec3::zeros());
        let w0 = KineticWeight::new(&d, &z);
        assert_eq!(w0.transport_derivative_beta2(0.0, &x, &Vec3::zeros()).unwrap(), 0.0);
        let got = w.transport_derivative_beta2(0.0, &Vec3::new(0.0, 0.6, 0.8), &v).unwrap();
        assert!(got.abs() <= 1e-8 * (1.0 + v.norm().powi(3)));
    }

    fn fd_along_flow(w: &KineticWeight<'_>, st: &PhaseState) -> f64 {
        let tr = Tracer::new(w.domain, w.field);
        let h = 1e-4;
        let beta2 = |s: f64| {
            let p = tr.flow(st, s).unwrap();
            w.beta(s, &p.x, &p.v).unwrap().powi(2)
        };
        (8.0 * (beta2(st.t + h) - beta2(st.t - h)) - (beta2(st.t + 2.0 * h) - beta2(st.t - 2.0 * h))) / (12.0 * h)
    }

    #[test]
    fn transport_derivative_matches_flow_differences() {
        let e = LevelSetDomain::ellipsoid(Vec3::zeros(), Vec3::new(1.0, 0.8, 0.7));
        let f = ModulatedRadialField { strength: 1.0 };
        let w = KineticWeight::new(&e, &f);
        let st = PhaseState::new(0.3, Vec3::new(0.85, 0.1, 0.05), Vec3::new(0.4, -0.3, 0.2));
        let exact = w.transport_derivative_beta2(st.t, &st.x, &st.v).unwrap();
        assert!((fd_along_flow(&w, &st) - exact).abs() < 1e-5, "{exact}");
    }

    #[test]
    fn velocity_lemma_fitted_rate_and_control() {
        let d = LevelSetDomain::unit_ball();
        let f = RadialField { strength: 1.0 };
        let w = KineticWeight::new(&d, &f);
        let tr = Tracer::new(&d, &f);
        let st = PhaseState::new(1.0, Vec3::new(0.999, 0.0, 0.0), Vec3::new(0.01, 0.2, 0.0));
        let samples = sample_weight_path(&w, &tr, &st, 1.0, -1.0).unwrap();
        let c = fit_velocity_rate(&samples);
        assert!(c > 0.0);
        assert!(velocity_lemma_check(&samples, c).pass);
        assert!(!velocity_lemma_check(&samples, 0.1 * c).pass);
    }

    proptest! {
        #[test]
        fn alpha_bounded_by_normal_speed_on_wall(theta in 0.0f64..3.14, phi in 0.0f64..6.28, v in prop::array::uniform3(-3.0f64..3.0)) {
            let d = LevelSetDomain::unit_ball();
            let f = RadialField { strength: 1.0 };
            let w = KineticWeight::new(&d, &f);
            let x = Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let v = Vec3::from(v);
            let a = w.alpha(0.0, &x, &v).unwrap();
            prop_assert!(a <= d.gradient(&x).dot(&v).abs() + 1e-10 * (1.0 + v.norm_squared()));
        }

        #[test]
        fn alpha_positive_inside(x in prop::array::uniform3(-0.57f64..0.57), v in prop::array::uniform3(-3.0f64..3.0)) {
            let d = LevelSetDomain::unit_ball();
            let f = RadialField { strength: 1.0 };
            let w = KineticWeight::new(&d, &f);
            prop_assert!(w.alpha(0.0, &Vec3::from(x), &Vec3::from(v)).unwrap() > 0.0);
        }
    }
}
