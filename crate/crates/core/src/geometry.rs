//! Convex domains given by a level set `xi`, with `xi < 0` inside.
//!
//! Provides normals, tangent frames, local boundary charts and the
//! nearest-point projection used inside the boundary collar.

use std::fmt;
use std::sync::{Arc, OnceLock};

use nalgebra::{Matrix4, Vector4};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::{Mat3, Vec3};

/// A twice (preferably thrice) differentiable level-set function.
///
/// Only `value` is required; derivatives default to central differences.
pub trait LevelSet: Send + Sync + fmt::Debug {
    fn value(&self, x: &Vec3) -> f64;

    fn gradient(&self, x: &Vec3) -> Vec3 {
        let h = 1e-5 * (1.0 + x.norm());
        Vec3::from_fn(|i, _| {
            let mut p = *x;
            let mut m = *x;
            p[i] += h;
            m[i] -= h;
            (self.value(&p) - self.value(&m)) / (2.0 * h)
        })
    }

    fn hessian(&self, x: &Vec3) -> Mat3 {
        let h = 1e-4 * (1.0 + x.norm());
        let mut out = Mat3::zeros();
        for j in 0..3 {
            let mut p = *x;
            let mut m = *x;
            p[j] += h;
            m[j] -= h;
            let col = (self.gradient(&p) - self.gradient(&m)) / (2.0 * h);
            out.set_column(j, &col);
        }
        0.5 * (out + out.transpose())
    }

    /// `third[k] = d/dx_k` of the Hessian.
    fn third(&self, x: &Vec3) -> [Mat3; 3] {
        let h = 1e-3 * (1.0 + x.norm());
        std::array::from_fn(|k| {
            let mut p = *x;
            let mut m = *x;
            p[k] += h;
            m[k] -= h;
            (self.hessian(&p) - self.hessian(&m)) / (2.0 * h)
        })
    }

    /// Closed-form nearest boundary point and its Jacobian, if known.
    fn closed_form_projection(&self, _x: &Vec3) -> Option<(Vec3, Mat3)> {
        None
    }
}

/// `xi(x) = |x - c|^2 - R^2`.
#[derive(Clone, Debug)]
pub struct Ball {
    pub center: Vec3,
    pub radius: f64,
}

impl LevelSet for Ball {
    fn value(&self, x: &Vec3) -> f64 {
        (x - self.center).norm_squared() - self.radius * self.radius
    }
    fn gradient(&self, x: &Vec3) -> Vec3 {
        2.0 * (x - self.center)
    }
    fn hessian(&self, _x: &Vec3) -> Mat3 {
        2.0 * Mat3::identity()
    }
    fn third(&self, _x: &Vec3) -> [Mat3; 3] {
        [Mat3::zeros(); 3]
    }
    fn closed_form_projection(&self, x: &Vec3) -> Option<(Vec3, Mat3)> {
        let d = x - self.center;
        let rho = d.norm();
        if rho < 1e-14 {
            return None;
        }
        let u = d / rho;
        let jac = (self.radius / rho) * (Mat3::identity() - u * u.transpose());
        Some((self.center + self.radius * u, jac))
    }
}

/// `xi(x) = sum ((x_i - c_i) / a_i)^2 - 1`.
#[derive(Clone, Debug)]
pub struct Ellipsoid {
    pub center: Vec3,
    pub semi_axes: Vec3,
}

impl LevelSet for Ellipsoid {
    fn value(&self, x: &Vec3) -> f64 {
        (x - self.center).component_div(&self.semi_axes).norm_squared() - 1.0
    }
    fn gradient(&self, x: &Vec3) -> Vec3 {
        let a2 = self.semi_axes.component_mul(&self.semi_axes);
        2.0 * (x - self.center).component_div(&a2)
    }
    fn hessian(&self, _x: &Vec3) -> Mat3 {
        let a2 = self.semi_axes.component_mul(&self.semi_axes);
        Mat3::from_diagonal(&Vec3::from_fn(|i, _| 2.0 / a2[i]))
    }
    fn third(&self, _x: &Vec3) -> [Mat3; 3] {
        [Mat3::zeros(); 3]
    }
}

type ScalarFn = Arc<dyn Fn(&Vec3) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&Vec3) -> Vec3 + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&Vec3) -> Mat3 + Send + Sync>;

/// User-supplied level set; missing derivatives fall back to differences.
#[derive(Clone)]
pub struct CallbackLevelSet {
    pub name: String,
    value: ScalarFn,
    gradient: Option<VectorFn>,
    hessian: Option<MatrixFn>,
}

impl CallbackLevelSet {
    pub fn new(name: impl Into<String>, value: impl Fn(&Vec3) -> f64 + Send + Sync + 'static) -> Self {
        CallbackLevelSet {
            name: name.into(),
            value: Arc::new(value),
            gradient: None,
            hessian: None,
        }
    }

    pub fn with_gradient(mut self, g: impl Fn(&Vec3) -> Vec3 + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(g));
        self
    }

    pub fn with_hessian(mut self, h: impl Fn(&Vec3) -> Mat3 + Send + Sync + 'static) -> Self {
        self.hessian = Some(Arc::new(h));
        self
    }
}

impl fmt::Debug for CallbackLevelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CallbackLevelSet").field("name", &self.name).finish()
    }
}

impl LevelSet for CallbackLevelSet {
    fn value(&self, x: &Vec3) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: &Vec3) -> Vec3 {
        match &self.gradient {
            Some(g) => g(x),
            None => {
                let h = 1e-5 * (1.0 + x.norm());
                Vec3::from_fn(|i, _| {
                    let mut p = *x;
                    let mut m = *x;
                    p[i] += h;
                    m[i] -= h;
                    ((self.value)(&p) - (self.value)(&m)) / (2.0 * h)
                })
            }
        }
    }
    fn hessian(&self, x: &Vec3) -> Mat3 {
        match &self.hessian {
            Some(h) => h(x),
            None => {
                let h = 1e-4 * (1.0 + x.norm());
                let mut out = Mat3::zeros();
                for j in 0..3 {
                    let mut p = *x;
                    let mut m = *x;
                    p[j] += h;
                    m[j] -= h;
                    out.set_column(j, &((self.gradient(&p) - self.gradient(&m)) / (2.0 * h)));
                }
                0.5 * (out + out.transpose())
            }
        }
    }
}

/// Level-set value with first and second derivatives at one point.
#[derive(Clone, Copy, Debug)]
pub struct XiEval {
    pub value: f64,
    pub gradient: Vec3,
    pub hessian: Mat3,
}

/// Orthonormal frame `(n, tau1, tau2)` with `tau2 = n x tau1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Frame {
    pub normal: Vec3,
    pub tau1: Vec3,
    pub tau2: Vec3,
}

impl Frame {
    /// Deterministic frame: `tau1` projects the coordinate axis least aligned
    /// with `n` (lowest index on ties).
    pub fn from_normal(n: &Vec3) -> Frame {
        let n = n.normalize();
        let mut k = 0;
        for i in 1..3 {
            if n[i].abs() < n[k].abs() {
                k = i;
            }
        }
        let mut e = Vec3::zeros();
        e[k] = 1.0;
        let tau1 = (e - n.dot(&e) * n).normalize();
        let tau2 = n.cross(&tau1);
        Frame { normal: n, tau1, tau2 }
    }

    /// Components of `v` as `(v . n, v . tau1, v . tau2)`.
    pub fn components(&self, v: &Vec3) -> Vec3 {
        Vec3::new(v.dot(&self.normal), v.dot(&self.tau1), v.dot(&self.tau2))
    }

    /// Inverse of [`Frame::components`].
    pub fn compose(&self, c: &Vec3) -> Vec3 {
        c[0] * self.normal + c[1] * self.tau1 + c[2] * self.tau2
    }
}

/// Result of projecting a point onto the boundary.
#[derive(Clone, Debug, Serialize)]
pub struct Projection {
    pub point: Vec3,
    pub distance: f64,
    pub normal: Vec3,
    /// `d(point)/dx`.
    pub jacobian: Mat3,
}

/// A bounded, uniformly convex domain `{xi < 0}` with cached constants.
#[derive(Clone, Debug)]
pub struct LevelSetDomain {
    shape: Arc<dyn LevelSet>,
    center: Vec3,
    diameter: f64,
    inradius: f64,
    convexity: f64,
    collar: f64,
    label: String,
    seeds: Arc<OnceLock<Vec<Vec3>>>,
    ball_radius: Option<f64>,
}

pub const BOUNDARY_TOL: f64 = 1e-10;
const COLLAR_FRACTION: f64 = 0.2;
const CHART_FLOOR: f64 = 1e-6;

impl LevelSetDomain {
    pub fn unit_ball() -> Self {
        Self::ball(Vec3::zeros(), 1.0)
    }

    pub fn ball(center: Vec3, radius: f64) -> Self {
        LevelSetDomain {
            shape: Arc::new(Ball { center, radius }),
            center,
            diameter: 2.0 * radius,
            inradius: radius,
            convexity: 2.0,
            collar: COLLAR_FRACTION * radius,
            label: format!("ball(r={radius})"),
            seeds: Arc::default(),
            ball_radius: Some(radius),
        }
    }

    pub fn ellipsoid(center: Vec3, semi_axes: Vec3) -> Self {
        let amax = semi_axes.max();
        let amin = semi_axes.min();
        LevelSetDomain {
            shape: Arc::new(Ellipsoid { center, semi_axes }),
            center,
            diameter: 2.0 * amax,
            inradius: amin,
            convexity: 2.0 / (amax * amax),
            collar: COLLAR_FRACTION * amin,
            label: format!("ellipsoid({}, {}, {})", semi_axes[0], semi_axes[1], semi_axes[2]),
            seeds: Arc::default(),
            ball_radius: None,
        }
    }

    /// Wraps an arbitrary level set. `center` must be interior; the geometric
    /// constants are estimated from boundary and interior samples.
    pub fn from_level_set(shape: Arc<dyn LevelSet>, center: Vec3, label: impl Into<String>) -> Result<Self> {
        if shape.value(&center) >= 0.0 {
            return Err(Error::invalid("reference point is not inside the domain"));
        }
        let mut dom = LevelSetDomain {
            shape,
            center,
            diameter: 0.0,
            inradius: 0.0,
            convexity: 0.0,
            collar: 0.0,
            label: label.into(),
            seeds: Arc::default(),
            ball_radius: None,
        };
        // Grow a bounding radius until a ray leaves the domain.
        let mut reach = 1.0;
        while dom.shape.value(&(center + reach * Vec3::x())) < 0.0 && reach < 1e6 {
            reach *= 2.0;
        }
        dom.diameter = 4.0 * reach;
        let pts = dom.boundary_samples(400);
        let mut inr = f64::INFINITY;
        let mut diam: f64 = 0.0;
        for (i, p) in pts.iter().enumerate() {
            inr = inr.min((p - center).norm());
            for q in &pts[i + 1..] {
                diam = diam.max((p - q).norm());
            }
        }
        dom.diameter = diam;
        dom.inradius = inr;
        let mut conv = f64::INFINITY;
        for p in pts.iter().chain(dom.interior_samples(200).iter()) {
            let ev = dom.shape.hessian(p).symmetric_eigenvalues();
            conv = conv.min(ev.min());
        }
        if !(conv > 0.0) {
            return Err(Error::invalid(format!(
                "level set is not uniformly convex (min Hessian eigenvalue {conv:.3e})"
            )));
        }
        dom.convexity = conv;
        dom.collar = COLLAR_FRACTION * inr;
        Ok(dom)
    }

    pub fn shape(&self) -> &Arc<dyn LevelSet> {
        &self.shape
    }
    pub fn center(&self) -> Vec3 {
        self.center
    }
    pub fn diameter(&self) -> f64 {
        self.diameter
    }
    pub fn inradius(&self) -> f64 {
        self.inradius
    }
    /// Lower bound on the Hessian of `xi`.
    pub fn convexity(&self) -> f64 {
        self.convexity
    }
    /// Collar width `delta` within which projection is well defined.
    pub fn collar_width(&self) -> f64 {
        self.collar
    }
    /// Radius when the domain was built as a ball.
    pub fn ball_radius(&self) -> Option<f64> {
        self.ball_radius
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn value(&self, x: &Vec3) -> f64 {
        self.shape.value(x)
    }
    pub fn gradient(&self, x: &Vec3) -> Vec3 {
        self.shape.gradient(x)
    }
    pub fn hessian(&self, x: &Vec3) -> Mat3 {
        self.shape.hessian(x)
    }
    pub fn third(&self, x: &Vec3) -> [Mat3; 3] {
        self.shape.third(x)
    }

    pub fn eval(&self, x: &Vec3) -> XiEval {
        XiEval {
            value: self.shape.value(x),
            gradient: self.shape.gradient(x),
            hessian: self.shape.hessian(x),
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        self.value(x) < 0.0
    }

    pub fn on_boundary(&self, x: &Vec3) -> bool {
        self.value(x).abs() <= BOUNDARY_TOL
    }

    pub fn outward_normal(&self, x: &Vec3) -> Result<Vec3> {
        let g = self.gradient(x);
        let norm = g.norm();
        if norm < 1e-12 {
            return Err(Error::DegenerateGradient { norm });
        }
        Ok(g / norm)
    }

    pub fn tangent_frame(&self, x: &Vec3) -> Result<Frame> {
        Ok(Frame::from_normal(&self.outward_normal(x)?))
    }

    /// Point where the ray from the reference center along `dir` meets the boundary.
    pub fn ray_boundary(&self, dir: &Vec3) -> Vec3 {
        let d = dir.normalize();
        let mut lo = 0.0;
        let mut hi = self.diameter.max(1e-3);
        while self.value(&(self.center + hi * d)) < 0.0 {
            hi *= 2.0;
        }
        // Bisection to bracket, then Newton along the ray.
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.value(&(self.center + mid * d)) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut s = 0.5 * (lo + hi);
        for _ in 0..4 {
            let p = self.center + s * d;
            let f = self.value(&p);
            let df = self.gradient(&p).dot(&d);
            if df.abs() < 1e-300 || f.abs() < 1e-15 {
                break;
            }
            s -= f / df;
        }
        self.center + s * d
    }

    /// Fibonacci-sphere rays mapped to the boundary.
    pub fn boundary_samples(&self, n: usize) -> Vec<Vec3> {
        fibonacci_sphere(n).iter().map(|d| self.ray_boundary(d)).collect()
    }

    /// Deterministic Halton points inside the domain.
    pub fn interior_samples(&self, n: usize) -> Vec<Vec3> {
        let half = 0.5 * self.diameter.max(1e-3) * 1.01;
        let mut out = Vec::with_capacity(n);
        let mut k = 1usize;
        while out.len() < n && k < 100 * n + 100 {
            let p = self.center
                + Vec3::new(
                    half * (2.0 * halton(k, 2) - 1.0),
                    half * (2.0 * halton(k, 3) - 1.0),
                    half * (2.0 * halton(k, 5) - 1.0),
                );
            if self.contains(&p) {
                out.push(p);
            }
            k += 1;
        }
        out
    }

    /// Smallest |xi| on the inner shell at distance `delta` from the boundary.
    pub fn shell_level(&self, delta: f64) -> f64 {
        let mut best = f64::INFINITY;
        for p in self.boundary_samples(500) {
            if let Ok(n) = self.outward_normal(&p) {
                best = best.min(self.value(&(p - delta * n)).abs());
            }
        }
        best
    }

    /// Nearest boundary point for `x` inside the collar.
    pub fn nearest_boundary_point(&self, x: &Vec3) -> Result<Projection> {
        let proj = self.project(x)?;
        if proj.distance > self.collar * (1.0 + 1e-12) {
            return Err(Error::OutsideCollar {
                distance: proj.distance,
                candidate: Box::new(proj),
            });
        }
        Ok(proj)
    }

    /// Nearest boundary point without the collar restriction.
    pub fn project(&self, x: &Vec3) -> Result<Projection> {
        if let Some((p, jac)) = self.shape.closed_form_projection(x) {
            let normal = self.outward_normal(&p)?;
            return Ok(Projection {
                point: p,
                distance: (x - p).norm(),
                normal,
                jacobian: jac,
            });
        }
        self.newton_projection(x)
    }

    fn newton_projection(&self, x: &Vec3) -> Result<Projection> {
        let seeds = self.seeds.get_or_init(|| self.boundary_samples(2000));
        let mut y = *seeds
            .iter()
            .min_by(|a, b| (*a - x).norm_squared().total_cmp(&(*b - x).norm_squared()))
            .expect("boundary seeds");
        let g0 = self.gradient(&y);
        let mut lam = (y - x).dot(&g0) / g0.norm_squared().max(1e-300);
        let residual = |y: &Vec3, lam: f64| -> Vector4<f64> {
            let r = y - x - lam * self.gradient(y);
            Vector4::new(r[0], r[1], r[2], self.value(y))
        };
        let mut res = residual(&y, lam);
        for _ in 0..80 {
            if res.norm() < 1e-14 * (1.0 + x.norm()) {
                break;
            }
            let jac = self.projection_system(&y, lam);
            let step = jac
                .lu()
                .solve(&(-res))
                .ok_or(Error::DegenerateGradient { norm: 0.0 })?;
            let mut t = 1.0;
            loop {
                let yn = y + t * Vec3::new(step[0], step[1], step[2]);
                let ln = lam + t * step[3];
                let rn = residual(&yn, ln);
                if rn.norm() < res.norm() || t < 1e-6 {
                    y = yn;
                    lam = ln;
                    res = rn;
                    break;
                }
                t *= 0.5;
            }
        }
        if res.norm() > 1e-9 * (1.0 + x.norm()) {
            return Err(Error::invalid(format!(
                "boundary projection did not converge (residual {:.3e})",
                res.norm()
            )));
        }
        let jac = self.projection_system(&y, lam);
        let inv = jac.try_inverse().ok_or(Error::DegenerateGradient { norm: 0.0 })?;
        let dydx = inv.fixed_view::<3, 3>(0, 0).into_owned();
        let normal = self.outward_normal(&y)?;
        Ok(Projection {
            point: y,
            distance: (x - y).norm(),
            normal,
            jacobian: dydx,
        })
    }

    fn projection_system(&self, y: &Vec3, lam: f64) -> Matrix4<f64> {
        let g = self.gradient(y);
        let a = Mat3::identity() - lam * self.hessian(y);
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&a);
        for i in 0..3 {
            m[(i, 3)] = -g[i];
            m[(3, i)] = g[i];
        }
        m
    }

    /// Graph chart of the boundary over the tangent plane at `p`.
    pub fn boundary_chart(&self, p: &Vec3) -> Result<BoundaryChart> {
        let grad = self.gradient(p);
        let gnorm = grad.norm();
        if gnorm < 1e-12 {
            return Err(Error::DegenerateGradient { norm: gnorm });
        }
        let frame = Frame::from_normal(&grad);
        let kmax = self.hessian(p).symmetric_eigenvalues().max() / gnorm;
        let radius = if kmax > 0.0 { 0.5 / kmax } else { self.diameter };
        if radius < CHART_FLOOR {
            return Err(Error::ChartRadiusTooSmall {
                radius,
                floor: CHART_FLOOR,
            });
        }
        Ok(BoundaryChart {
            shape: self.shape.clone(),
            base: *p,
            frame,
            radius,
        })
    }
}

/// `eta(a, b) = p + a tau1 + b tau2 + h(a, b) n` with `xi(eta) = 0`.
#[derive(Clone, Debug)]
pub struct BoundaryChart {
    shape: Arc<dyn LevelSet>,
    pub base: Vec3,
    pub frame: Frame,
    pub radius: f64,
}

/// Chart point with its coordinate tangent vectors.
#[derive(Clone, Copy, Debug)]
pub struct ChartPoint {
    pub point: Vec3,
    pub d_a: Vec3,
    pub d_b: Vec3,
}

impl BoundaryChart {
    pub fn point(&self, a: f64, b: f64) -> Result<Vec3> {
        if a.hypot(b) > self.radius {
            return Err(Error::invalid(format!(
                "chart parameter ({a:.3e}, {b:.3e}) outside radius {:.3e}",
                self.radius
            )));
        }
        let n = self.frame.normal;
        let flat = self.base + a * self.frame.tau1 + b * self.frame.tau2;
        let mut h = 0.0;
        for _ in 0..60 {
            let q = flat + h * n;
            let f = self.shape.value(&q);
            let df = self.shape.gradient(&q).dot(&n);
            if df <= 0.0 {
                return Err(Error::invalid("boundary is not a graph over the tangent plane here"));
            }
            let dh = f / df;
            h -= dh;
            if dh.abs() < 1e-16 * (1.0 + h.abs()) {
                break;
            }
        }
        Ok(flat + h * n)
    }

    pub fn eval(&self, a: f64, b: f64) -> Result<ChartPoint> {
        let point = self.point(a, b)?;
        let g = self.shape.gradient(&point);
        let gn = g.dot(&self.frame.normal);
        let ha = -g.dot(&self.frame.tau1) / gn;
        let hb = -g.dot(&self.frame.tau2) / gn;
        Ok(ChartPoint {
            point,
            d_a: self.frame.tau1 + ha * self.frame.normal,
            d_b: self.frame.tau2 + hb * self.frame.normal,
        })
    }

    /// Surface-area density `|d_a eta x d_b eta|`.
    pub fn density(&self, a: f64, b: f64) -> Result<f64> {
        let c = self.eval(a, b)?;
        Ok(c.d_a.cross(&c.d_b).norm())
    }

    /// Chart coordinates of a boundary point (orthogonal projection onto the tangent plane).
    pub fn coordinates(&self, y: &Vec3) -> [f64; 2] {
        let d = y - self.base;
        [d.dot(&self.frame.tau1), d.dot(&self.frame.tau2)]
    }
}

pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

pub fn halton(mut index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}
