//! External force fields `E(t, x)` with derivatives, sampled norm bounds and
//! the boundary sign check `E . n > 0`.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::geometry::LevelSetDomain;
use crate::{Mat3, Vec3};

/// `E`, its spatial Jacobian (`grad[(i, j)] = dE_i/dx_j`) and `dE/dt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldValue {
    pub e: Vec3,
    pub grad: Mat3,
    pub dt: Vec3,
}

pub trait ForceField: Send + Sync + fmt::Debug {
    fn field(&self, t: f64, x: &Vec3) -> Vec3;

    /// Field with derivatives; the default uses central differences.
    fn eval(&self, t: f64, x: &Vec3) -> FieldValue {
        let e = self.field(t, x);
        let h = 1e-5 * (1.0 + x.norm());
        let mut grad = Mat3::zeros();
        for j in 0..3 {
            let mut p = *x;
            let mut m = *x;
            p[j] += h;
            m[j] -= h;
            grad.set_column(j, &((self.field(t, &p) - self.field(t, &m)) / (2.0 * h)));
        }
        let ht = 1e-5 * (1.0 + t.abs());
        let dt = (self.field(t + ht, x) - self.field(t - ht, x)) / (2.0 * ht);
        FieldValue { e, grad, dt }
    }

    fn label(&self) -> String;
}

/// Spatially and temporally constant field.
#[derive(Clone, Debug)]
pub struct ConstantField(pub Vec3);

impl ForceField for ConstantField {
    fn field(&self, _t: f64, _x: &Vec3) -> Vec3 {
        self.0
    }
    fn eval(&self, _t: f64, _x: &Vec3) -> FieldValue {
        FieldValue {
            e: self.0,
            grad: Mat3::zeros(),
            dt: Vec3::zeros(),
        }
    }
    fn label(&self) -> String {
        format!("constant({}, {}, {})", self.0[0], self.0[1], self.0[2])
    }
}

/// `E(t, x) = c x`.
#[derive(Clone, Debug)]
pub struct RadialField {
    pub strength: f64,
}

impl ForceField for RadialField {
    fn field(&self, _t: f64, x: &Vec3) -> Vec3 {
        self.strength * x
    }
    fn eval(&self, _t: f64, x: &Vec3) -> FieldValue {
        FieldValue {
            e: self.strength * x,
            grad: self.strength * Mat3::identity(),
            dt: Vec3::zeros(),
        }
    }
    fn label(&self) -> String {
        format!("radial({})", self.strength)
    }
}

/// `E(t, x) = c (1 + t) x`.
#[derive(Clone, Debug)]
pub struct ModulatedRadialField {
    pub strength: f64,
}

impl ForceField for ModulatedRadialField {
    fn field(&self, t: f64, x: &Vec3) -> Vec3 {
        self.strength * (1.0 + t) * x
    }
    fn eval(&self, t: f64, x: &Vec3) -> FieldValue {
        FieldValue {
            e: self.strength * (1.0 + t) * x,
            grad: self.strength * (1.0 + t) * Mat3::identity(),
            dt: self.strength * x,
        }
    }
    fn label(&self) -> String {
        format!("modulated-radial({})", self.strength)
    }
}

type FieldFn = Arc<dyn Fn(f64, &Vec3) -> Vec3 + Send + Sync>;

/// Closure-backed field; derivatives come from finite differences.
#[derive(Clone)]
pub struct FnField {
    name: String,
    f: FieldFn,
}

impl FnField {
    pub fn new(name: impl Into<String>, f: impl Fn(f64, &Vec3) -> Vec3 + Send + Sync + 'static) -> Self {
        FnField {
            name: name.into(),
            f: Arc::new(f),
        }
    }
}

impl fmt::Debug for FnField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnField").field("name", &self.name).finish()
    }
}

impl ForceField for FnField {
    fn field(&self, t: f64, x: &Vec3) -> Vec3 {
        (self.f)(t, x)
    }
    fn label(&self) -> String {
        self.name.clone()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SignConditionReport {
    pub c_e_lower: f64,
    pub passed: bool,
    pub worst_point: Vec3,
    pub worst_time: f64,
    pub samples: usize,
}

/// Minimum of `E(t, x) . n(x)` over boundary samples and the time grid.
pub fn check_sign_condition(
    domain: &LevelSetDomain,
    field: &dyn ForceField,
    n_samples: usize,
    t_grid: &[f64],
) -> SignConditionReport {
    let pts = domain.boundary_samples(n_samples.max(1));
    let times: &[f64] = if t_grid.is_empty() { &[0.0] } else { t_grid };
    let mut best = f64::INFINITY;
    let mut worst_point = pts[0];
    let mut worst_time = times[0];
    for &t in times {
        for p in &pts {
            let Ok(n) = domain.outward_normal(p) else { continue };
            let val = field.field(t, p).dot(&n);
            if val < best {
                best = val;
                worst_point = *p;
                worst_time = t;
            }
        }
    }
    SignConditionReport {
        c_e_lower: best,
        passed: best > 0.0,
        worst_point,
        worst_time,
        samples: pts.len() * times.len(),
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FieldNorms {
    pub e_sup: f64,
    pub grad_sup: f64,
    pub dt_sup: f64,
    pub samples: usize,
}

/// Sampled sup norms over interior and boundary points (operator 2-norm for the Jacobian).
pub fn field_norms(domain: &LevelSetDomain, field: &dyn ForceField, n_samples: usize, t_grid: &[f64]) -> FieldNorms {
    let mut pts = domain.interior_samples(n_samples.max(1));
    pts.extend(domain.boundary_samples(n_samples.max(1)));
    let times: &[f64] = if t_grid.is_empty() { &[0.0] } else { t_grid };
    let mut out = FieldNorms {
        e_sup: 0.0,
        grad_sup: 0.0,
        dt_sup: 0.0,
        samples: pts.len() * times.len(),
    };
    for &t in times {
        for p in &pts {
            let fv = field.eval(t, p);
            out.e_sup = out.e_sup.max(fv.e.norm());
            out.grad_sup = out.grad_sup.max(fv.grad.norm());
            out.dt_sup = out.dt_sup.max(fv.dt.norm());
        }
    }
    out
}

/// Largest deviation between the reported Jacobian and central differences
/// of `E`, scaled by `1 + |grad E|`.
pub fn gradient_consistency(field: &dyn ForceField, t: f64, x: &Vec3) -> f64 {
    let fv = field.eval(t, x);
    let h = 1e-5 * (1.0 + x.norm());
    let mut dev: f64 = 0.0;
    for j in 0..3 {
        let mut p = *x;
        let mut m = *x;
        p[j] += h;
        m[j] -= h;
        let col = (field.field(t, &p) - field.field(t, &m)) / (2.0 * h);
        dev = dev.max((col - fv.grad.column(j)).amax());
    }
    dev / (1.0 + fv.grad.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn radial_values() {
        let f = RadialField { strength: 1.0 };
        let v = f.eval(0.0, &Vec3::new(0.3, 0.0, 0.0));
        assert_eq!(v.e, Vec3::new(0.3, 0.0, 0.0));
        assert_eq!(v.grad, Mat3::identity());
        assert_eq!(v.dt, Vec3::zeros());
    }

    #[test]
    fn modulated_values() {
        let f = ModulatedRadialField { strength: 1.0 };
        let v = f.eval(1.0, &Vec3::x());
        assert_eq!(v.e, Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(v.dt, Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn sign_condition_cases() {
        let d = LevelSetDomain::unit_ball();
        let r = check_sign_condition(&d, &RadialField { strength: 1.0 }, 200, &[0.0]);
        assert!(r.passed);
        assert_relative_eq!(r.c_e_lower, 1.0, epsilon = 1e-9);

        let r = check_sign_condition(&d, &ConstantField(Vec3::z()), 400, &[0.0]);
        assert!(!r.passed);
        assert!(r.c_e_lower < -0.99);
        assert!(r.worst_point[2] < -0.99);

        let r = check_sign_condition(&d, &ConstantField(Vec3::zeros()), 50, &[0.0]);
        assert!(!r.passed);
        assert_eq!(r.c_e_lower, 0.0);
    }

    #[test]
    fn sign_condition_stable_under_doubling() {
        let d = LevelSetDomain::ellipsoid(Vec3::zeros(), Vec3::new(1.0, 0.8, 0.6));
        let f = RadialField { strength: 1.0 };
        let a = check_sign_condition(&d, &f, 500, &[0.0]).c_e_lower;
        let b = check_sign_condition(&d, &f, 1000, &[0.0]).c_e_lower;
        assert!(a > 0.0 && ((a - b) / b).abs() < 0.01);
    }

    #[test]
    fn norms_of_builtins() {
        let d = LevelSetDomain::unit_ball();
        let n = field_norms(&d, &RadialField { strength: 1.0 }, 200, &[0.0]);
        assert!(n.e_sup <= 1.0 + 1e-6 && n.e_sup > 0.99);
        let n = field_norms(&d, &ConstantField(Vec3::new(0.0, 0.0, -1.0)), 50, &[0.0]);
        assert_eq!((n.e_sup, n.grad_sup, n.dt_sup), (1.0, 0.0, 0.0));
        let ts: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let n = field_norms(&d, &ModulatedRadialField { strength: 1.0 }, 200, &ts);
        assert!((n.e_sup - 2.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn builtin_jacobians_match_differences(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, t in 0.0f64..2.0) {
            let p = Vec3::new(x, y, z);
            let radial = RadialField { strength: 1.5 };
            let modulated = ModulatedRadialField { strength: 0.7 };
            prop_assert!(gradient_consistency(&radial, t, &p) < 1e-5);
            prop_assert!(gradient_consistency(&modulated, t, &p) < 1e-5);
            let fd = FnField::new("swirl", |t, x: &Vec3| Vec3::new(x[1] * x[2], (t * x[0]).sin(), x[0] * x[0]));
            prop_assert!(gradient_consistency(&fd, t, &p) < 1e-5);
        }
    }
}
