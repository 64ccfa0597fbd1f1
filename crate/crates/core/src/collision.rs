//! Hard-potential collision operator with angular cutoff,
//! `B(v - u, w) = |v - u|^kappa q0(cos)`, evaluated by tensor quadrature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Frame;
use crate::quad::{composite_legendre, legendre, normal_hermite, periodic};
use crate::Vec3;

/// A velocity profile `v -> F(v)`.
pub trait VelocityFunction: Sync {
    fn eval(&self, v: &Vec3) -> f64;
    /// Where the mass sits; used to center Gauss–Hermite rules.
    fn center(&self) -> Vec3 {
        Vec3::zeros()
    }
}

impl<F: Fn(&Vec3) -> f64 + Sync> VelocityFunction for F {
    fn eval(&self, v: &Vec3) -> f64 {
        self(v)
    }
}

/// Global Maxwellian `(2 pi)^{-3/2} exp(-|v|^2 / 2)`.
pub fn maxwellian(v: &Vec3) -> f64 {
    MAXWELLIAN_NORM * (-0.5 * v.norm_squared()).exp()
}

/// `sqrt(mu(v))`.
pub fn sqrt_maxwellian(v: &Vec3) -> f64 {
    SQRT_MAXWELLIAN_NORM * (-0.25 * v.norm_squared()).exp()
}

/// `(2 pi)^{-3/2}`.
pub const MAXWELLIAN_NORM: f64 = 0.063_493_635_934_240_97;
/// `(2 pi)^{-3/4}`.
pub const SQRT_MAXWELLIAN_NORM: f64 = 0.251_979_435_538_380_76;

/// Axis-aligned Gaussian `mass * N(mean, diag(variances))`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GaussianProfile {
    pub mass: f64,
    pub mean: Vec3,
    pub variances: Vec3,
}

impl GaussianProfile {
    pub fn maxwellian() -> Self {
        Self::shifted(Vec3::zeros())
    }

    pub fn shifted(mean: Vec3) -> Self {
        GaussianProfile {
            mass: 1.0,
            mean,
            variances: Vec3::repeat(1.0),
        }
    }

    pub fn anisotropic(variances: Vec3) -> Self {
        GaussianProfile {
            mass: 1.0,
            mean: Vec3::zeros(),
            variances,
        }
    }
}

impl VelocityFunction for GaussianProfile {
    fn eval(&self, v: &Vec3) -> f64 {
        let d = v - self.mean;
        let q: f64 = (0..3).map(|i| d[i] * d[i] / self.variances[i]).sum();
        let norm = MAXWELLIAN_NORM / self.variances.product().sqrt();
        self.mass * norm * (-0.5 * q).exp()
    }
    fn center(&self) -> Vec3 {
        self.mean
    }
}

/// `(u', v')` for the pair `(u, v)` and direction `w`.
pub fn post_collision(u: &Vec3, v: &Vec3, omega: &Vec3) -> (Vec3, Vec3) {
    let s = (u - v).dot(omega);
    (u - s * omega, v + s * omega)
}

/// Quadrature orders; `refined` raises each by about half.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadOrder {
    /// Gauss–Legendre points per unit radial panel.
    pub radial: usize,
    pub polar: usize,
    pub azimuth: usize,
    /// Points in `|cos|` for the scattering direction (half range).
    pub scatter: usize,
    pub scatter_azimuth: usize,
    /// Gauss–Hermite points per axis for center-of-mass integrals.
    pub hermite: usize,
}

impl Default for QuadOrder {
    fn default() -> Self {
        QuadOrder {
            radial: 6,
            polar: 16,
            azimuth: 32,
            scatter: 6,
            scatter_azimuth: 32,
            hermite: 3,
        }
    }
}

impl QuadOrder {
    pub fn coarse() -> Self {
        QuadOrder {
            radial: 3,
            polar: 8,
            azimuth: 16,
            scatter: 4,
            scatter_azimuth: 16,
            hermite: 3,
        }
    }

    /// Angular orders up by half, radial and Hermite orders up by one.
    pub fn refined(&self) -> Self {
        let up = |n: usize| n + n.div_ceil(2);
        QuadOrder {
            radial: self.radial + 1,
            polar: up(self.polar),
            azimuth: up(self.azimuth),
            scatter: up(self.scatter),
            scatter_azimuth: up(self.scatter_azimuth),
            hermite: self.hermite + 1,
        }
    }

    /// Inverse of [`QuadOrder::refined`], used as the comparison level in
    /// the resolution checks.
    pub fn coarsened(&self) -> Self {
        let down = |n: usize| (2 * n).div_ceil(3).max(2);
        QuadOrder {
            radial: self.radial.saturating_sub(1).max(2),
            polar: down(self.polar),
            azimuth: down(self.azimuth),
            scatter: down(self.scatter),
            scatter_azimuth: down(self.scatter_azimuth),
            hermite: self.hermite.saturating_sub(1).max(2),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CollisionKernel {
    pub kappa: f64,
    /// `q0(c) = scale |c|^power` with `power >= 1`, so `q0 <= scale |c|`.
    pub q0_scale: f64,
    pub q0_power: f64,
    pub v_max: f64,
    pub order: QuadOrder,
    /// Tolerance for the resolution check (relative for pointwise values,
    /// absolute for moments).
    pub tolerance: f64,
}

impl Default for CollisionKernel {
    fn default() -> Self {
        CollisionKernel {
            kappa: 1.0,
            q0_scale: 1.0,
            q0_power: 1.0,
            v_max: 8.0,
            order: QuadOrder::default(),
            tolerance: 1e-6,
        }
    }
}

/// Gain and loss parts of `Q`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CollisionValue {
    pub gain: f64,
    pub loss: f64,
}

impl CollisionValue {
    pub fn value(&self) -> f64 {
        self.gain - self.loss
    }
}

/// Mass, momentum and energy moments `int [1, v, (|v|^2 - 3)/2] Q dv`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Moments {
    pub mass: f64,
    pub momentum: Vec3,
    pub energy: f64,
}

impl Moments {
    pub fn max_abs(&self) -> f64 {
        self.mass.abs().max(self.momentum.amax()).max(self.energy.abs())
    }
}

/// Product rule on the unit sphere: Gauss in `cos(theta)`, uniform azimuth.
pub fn sphere_rule(polar: usize, azimuth: usize) -> Vec<(Vec3, f64)> {
    let mut out = Vec::with_capacity(polar * azimuth);
    for (c, wc) in legendre(polar, -1.0, 1.0) {
        let s = (1.0 - c * c).max(0.0).sqrt();
        for (p, wp) in periodic(azimuth) {
            out.push((Vec3::new(s * p.cos(), s * p.sin(), c), wc * wp));
        }
    }
    out
}

/// Upper half of [`sphere_rule`]; for even integrands it reproduces the
/// full rule at half the cost (an equatorial node keeps half its weight).
fn hemisphere_rule(polar: usize, azimuth: usize) -> Vec<(Vec3, f64)> {
    let mut out = Vec::with_capacity(polar * azimuth);
    for (c, wc) in legendre(polar, -1.0, 1.0) {
        if c < -1e-15 {
            continue;
        }
        let wc = if c.abs() <= 1e-15 { 0.5 * wc } else { wc };
        let s = (1.0 - c * c).max(0.0).sqrt();
        for (p, wp) in periodic(azimuth) {
            out.push((Vec3::new(s * p.cos(), s * p.sin(), c), wc * wp));
        }
    }
    out
}

/// Scattering directions relative to a fixed axis: `(cos, sin cos phi, sin sin phi)`
/// over the half range `cos > 0`, with weights doubled for the mirrored half.
pub(crate) fn scatter_rule(n: usize, m: usize) -> Vec<(f64, f64, f64, f64)> {
    let mut out = Vec::with_capacity(n * m);
    for (c, wc) in legendre(n, 0.0, 1.0) {
        let s = (1.0 - c * c).sqrt();
        for (p, wp) in periodic(m) {
            out.push((c, s * p.cos(), s * p.sin(), 2.0 * wc * wp));
        }
    }
    out
}

impl CollisionKernel {
    pub fn q0(&self, c: f64) -> f64 {
        self.q0_scale * c.abs().powf(self.q0_power)
    }

    /// `int_{S^2} q0(w_hat . omega) d omega`.
    pub fn q0_integral(&self) -> f64 {
        4.0 * std::f64::consts::PI * self.q0_scale / (self.q0_power + 1.0)
    }

    fn radial_rule(&self, order: &QuadOrder, reach: f64) -> Vec<(f64, f64)> {
        let panels = reach.ceil().max(1.0) as usize;
        composite_legendre(order.radial, panels, 0.0, reach)
    }

    /// Loss part `F2(v) int |w|^kappa F1(v - w) dw * int q0`.
    pub fn loss_at(&self, order: &QuadOrder, f1: &dyn VelocityFunction, f2v: f64, v: &Vec3) -> f64 {
        if f2v == 0.0 {
            return 0.0;
        }
        let reach = self.v_max + (v - f1.center()).norm();
        let sph = sphere_rule(order.polar, order.azimuth);
        let mut acc = 0.0;
        for (r, wr) in self.radial_rule(order, reach) {
            let rk = r.powf(self.kappa) * r * r * wr;
            let mut inner = 0.0;
            for (d, wd) in &sph {
                inner += wd * f1.eval(&(v - r * d));
            }
            acc += rk * inner;
        }
        f2v * acc * self.q0_integral()
    }

    /// Gain part `int int B F1(u') F2(v')` with `u = v - w`.
    fn gain_at<G: Fn(&Vec3, &Vec3, &Vec3) -> f64>(&self, order: &QuadOrder, v: &Vec3, reach: f64, integrand: G) -> f64 {
        let sph = sphere_rule(order.polar, order.azimuth);
        let sc = scatter_rule(order.scatter, order.scatter_azimuth);
        let mut acc = 0.0;
        for (r, wr) in self.radial_rule(order, reach) {
            let rk = r.powf(self.kappa) * r * r * wr;
            let mut inner = 0.0;
            for (d, wd) in &sph {
                let f = Frame::from_normal(d);
                let w = r * d;
                let u = v - w;
                let mut ang = 0.0;
                for &(c, a, b, wo) in &sc {
                    let om = c * d + a * f.tau1 + b * f.tau2;
                    let (up, vp) = post_collision(&u, v, &om);
                    ang += wo * self.q0(c) * integrand(&u, &up, &vp);
                }
                inner += wd * ang;
            }
            acc += rk * inner;
        }
        acc
    }

    /// `Q(F1, F2)(v)` at the given orders, without refinement checks.
    pub fn q_operator_at(
        &self,
        order: &QuadOrder,
        f1: &dyn VelocityFunction,
        f2: &dyn VelocityFunction,
        v: &Vec3,
    ) -> CollisionValue {
        let reach = self.v_max + (v - f1.center()).norm().max((v - f2.center()).norm());
        let gain = self.gain_at(order, v, reach, |_, up, vp| f1.eval(up) * f2.eval(vp));
        let loss = self.loss_at(order, f1, f2.eval(v), v);
        CollisionValue { gain, loss }
    }

    fn check(&self, coarse: f64, fine: f64, scale: f64) -> Result<()> {
        let tol = self.tolerance * scale.max(1e-300);
        if (coarse - fine).abs() > tol {
            return Err(Error::QuadratureUnderresolved {
                coarse,
                fine,
                tolerance: tol,
            });
        }
        Ok(())
    }

    /// `Q(F1, F2)(v)` with a refinement check on the gain and loss parts.
    pub fn q_operator(&self, f1: &dyn VelocityFunction, f2: &dyn VelocityFunction, v: &Vec3) -> Result<CollisionValue> {
        let a = self.q_operator_at(&self.order.coarsened(), f1, f2, v);
        let b = self.q_operator_at(&self.order, f1, f2, v);
        let scale = b.gain.abs().max(b.loss.abs());
        self.check(a.gain, b.gain, scale)?;
        self.check(a.loss, b.loss, scale)?;
        Ok(b)
    }

    /// `mu^{-1/2} Q_gain(sqrt(mu) f1, sqrt(mu) f2)`, evaluated through
    /// `sqrt(mu(u')) sqrt(mu(v')) = sqrt(mu(u)) sqrt(mu(v))`.
    pub fn gamma_gain_at(&self, order: &QuadOrder, f1: &dyn VelocityFunction, f2: &dyn VelocityFunction, v: &Vec3) -> f64 {
        let reach = self.v_max + v.norm();
        self.gain_at(order, v, reach, |u, up, vp| sqrt_maxwellian(u) * f1.eval(up) * f2.eval(vp))
    }

    /// `nu(sqrt(mu) f)(v) = int int B(v - u, w) sqrt(mu(u)) f(u)`.
    pub fn nu_loss_at(&self, order: &QuadOrder, f: &dyn VelocityFunction, v: &Vec3) -> f64 {
        let g = |u: &Vec3| sqrt_maxwellian(u) * f.eval(u);
        self.loss_at(order, &g, 1.0, v)
    }

    pub fn gamma_gain(&self, f1: &dyn VelocityFunction, f2: &dyn VelocityFunction, v: &Vec3) -> Result<f64> {
        let a = self.gamma_gain_at(&self.order.coarsened(), f1, f2, v);
        let b = self.gamma_gain_at(&self.order, f1, f2, v);
        self.check(a, b, b.abs())?;
        Ok(b)
    }

    pub fn nu_loss(&self, f: &dyn VelocityFunction, v: &Vec3) -> Result<f64> {
        let a = self.nu_loss_at(&self.order.coarsened(), f, v);
        let b = self.nu_loss_at(&self.order, f, v);
        self.check(a, b, b.abs())?;
        Ok(b)
    }

    /// Strong-form moments of `Q(G, G)` in center-of-mass coordinates
    /// `c = (u + v)/2`, relative velocity `w = v - u`.
    ///
    /// The pair products are even in `w`, so only the hemisphere
    /// `w_z > 0` is visited with the test function symmetrized.
    pub fn collision_moments_at(&self, order: &QuadOrder, g: &dyn VelocityFunction) -> Moments {
        let m = g.center();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let herm = normal_hermite(order.hermite);
        let mut cnodes = Vec::with_capacity(herm.len().pow(3));
        let norm = (2.0 * std::f64::consts::PI).powf(-0.5);
        for &(z1, w1) in &herm {
            for &(z2, w2) in &herm {
                for &(z3, w3) in &herm {
                    let z = Vec3::new(z1, z2, z3);
                    let dens = norm.powi(3) * (-0.5 * z.norm_squared()).exp();
                    cnodes.push((m + s * z, s.powi(3) * w1 * w2 * w3 / dens));
                }
            }
        }
        let reach = 1.5 * self.v_max + g.center().norm();
        let sph = hemisphere_rule(order.polar, order.azimuth);
        let sc = scatter_rule(order.scatter, order.scatter_azimuth);
        let q0i = self.q0_integral();
        let mut out = [0.0f64; 5];
        let weights = |c: &Vec3, w: &Vec3| {
            let e = c.norm_squared() + 0.25 * w.norm_squared() - 3.0;
            [2.0, 2.0 * c[0], 2.0 * c[1], 2.0 * c[2], e]
        };
        for (r, wr) in self.radial_rule(order, reach) {
            let rk = r.powf(self.kappa) * r * r * wr;
            for (d, wd) in &sph {
                let f = Frame::from_normal(d);
                let w = r * d;
                let primes: Vec<(Vec3, f64)> = sc
                    .iter()
                    .map(|&(cs, a, b, wo)| {
                        let om = cs * d + a * f.tau1 + b * f.tau2;
                        (w - 2.0 * w.dot(&om) * om, wo * self.q0(cs))
                    })
                    .collect();
                for (c, wc) in &cnodes {
                    let phi = weights(c, &w);
                    let loss = q0i * g.eval(&(c - 0.5 * w)) * g.eval(&(c + 0.5 * w));
                    let mut gain = 0.0;
                    for (wp, wo) in &primes {
                        gain += wo * g.eval(&(c - 0.5 * wp)) * g.eval(&(c + 0.5 * wp));
                    }
                    let k = rk * wd * wc * (gain - loss);
                    for i in 0..5 {
                        out[i] += k * phi[i];
                    }
                }
            }
        }
        Moments {
            mass: out[0],
            momentum: Vec3::new(out[1], out[2], out[3]),
            energy: out[4],
        }
    }

    pub fn collision_moments(&self, g: &dyn VelocityFunction) -> Result<Moments> {
        let a = self.collision_moments_at(&self.order.coarsened(), g);
        let b = self.collision_moments_at(&self.order, g);
        let diff = Moments {
            mass: a.mass - b.mass,
            momentum: a.momentum - b.momentum,
            energy: a.energy - b.energy,
        };
        if diff.max_abs() > self.tolerance {
            return Err(Error::QuadratureUnderresolved {
                coarse: a.max_abs(),
                fine: b.max_abs(),
                tolerance: self.tolerance,
            });
        }
        Ok(b)
    }
}
