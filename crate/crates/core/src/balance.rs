//! `L^p` energy balance (Green's identity) and the outgoing trace bound,
//! evaluated by phase-space quadrature for prescribed functions `f(t, x, v)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::{maxwellian, sphere_rule};
use crate::error::{Error, Result};
use crate::field::ForceField;
use crate::geometry::{Frame, LevelSetDomain};
use crate::quad::{composite_legendre, legendre, normal_hermite, pairwise_sum};
use crate::Vec3;

/// A phase-space function with its transport derivative.
pub trait PhaseFunction: Sync {
    fn value(&self, t: f64, x: &Vec3, v: &Vec3) -> f64;

    /// `(d_t + v . grad_x + E . grad_v) f`, by a central difference along
    /// the direction `(1, v, E)` unless overridden.
    fn transport(&self, field: &dyn ForceField, t: f64, x: &Vec3, v: &Vec3) -> f64 {
        let h = 1e-5;
        let e = field.field(t, x);
        (self.value(t + h, &(x + h * v), &(v + h * e)) - self.value(t - h, &(x - h * v), &(v - h * e))) / (2.0 * h)
    }

    /// Center and width `sigma` of a Gaussian-like velocity profile; the
    /// velocity rules then use scaled Gauss–Hermite nodes.
    fn velocity_scale(&self) -> Option<(Vec3, f64)> {
        None
    }
}

pub struct ZeroFunction;

impl PhaseFunction for ZeroFunction {
    fn value(&self, _t: f64, _x: &Vec3, _v: &Vec3) -> f64 {
        0.0
    }
    fn transport(&self, _: &dyn ForceField, _: f64, _: &Vec3, _: &Vec3) -> f64 {
        0.0
    }
    fn velocity_scale(&self) -> Option<(Vec3, f64)> {
        Some((Vec3::zeros(), 1.0))
    }
}

/// `mu(v)`, constant in `t` and `x`.
pub struct MaxwellianState;

impl PhaseFunction for MaxwellianState {
    fn value(&self, _t: f64, _x: &Vec3, v: &Vec3) -> f64 {
        maxwellian(v)
    }
    fn transport(&self, field: &dyn ForceField, t: f64, x: &Vec3, v: &Vec3) -> f64 {
        -field.field(t, x).dot(v) * maxwellian(v)
    }
    fn velocity_scale(&self) -> Option<(Vec3, f64)> {
        Some((Vec3::zeros(), 1.0))
    }
}

/// Gaussian pulse transported freely:
/// `exp(-|x - x0 - t v|^2 / (2 sx^2) - |v - v0|^2 / (2 sv^2))`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GaussianPulse {
    pub x0: Vec3,
    pub v0: Vec3,
    pub sx: f64,
    pub sv: f64,
}

impl PhaseFunction for GaussianPulse {
    fn value(&self, t: f64, x: &Vec3, v: &Vec3) -> f64 {
        let dx = x - self.x0 - t * v;
        let dv = v - self.v0;
        (-dx.norm_squared() / (2.0 * self.sx * self.sx) - dv.norm_squared() / (2.0 * self.sv * self.sv)).exp()
    }
    /// Free streaming annihilates the pulse; only `E . grad_v f` remains.
    fn transport(&self, field: &dyn ForceField, t: f64, x: &Vec3, v: &Vec3) -> f64 {
        let e = field.field(t, x);
        if e == Vec3::zeros() {
            return 0.0;
        }
        let dx = x - self.x0 - t * v;
        let grad_v = t * dx / (self.sx * self.sx) - (v - self.v0) / (self.sv * self.sv);
        e.dot(&grad_v) * self.value(t, x, v)
    }
    fn velocity_scale(&self) -> Option<(Vec3, f64)> {
        Some((self.v0, self.sv))
    }
}

/// Quadrature resolution for the phase-space balances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseGrid {
    /// Box cells per axis; cells whose center lies inside the domain count.
    pub cells: usize,
    /// Gauss points per velocity panel.
    pub velocity: usize,
    pub velocity_panels: usize,
    /// Velocity box half width when the function gives no support.
    pub v_max: f64,
    pub time: usize,
    pub surface_polar: usize,
    pub surface_azimuth: usize,
}

impl Default for PhaseGrid {
    fn default() -> Self {
        PhaseGrid {
            cells: 16,
            velocity: 8,
            velocity_panels: 2,
            v_max: 6.0,
            time: 6,
            surface_polar: 24,
            surface_azimuth: 48,
        }
    }
}

struct Cells {
    centers: Vec<Vec3>,
    /// Cell volume times the indicator weight.
    weights: Vec<f64>,
}

/// Cell-centered box grid. The domain indicator is smeared over an inner
/// layer of one cell width, `clamp(-xi / (|grad xi| h), 0, 1)`, so the
/// domain error is first order in `h` and varies smoothly with it.
fn cell_grid(domain: &LevelSetDomain, n: usize) -> Cells {
    let half = 0.5 * domain.diameter() * 1.001;
    let c = domain.center();
    let h = 2.0 * half / n as f64;
    let mut centers = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let p = c + Vec3::new(
                    -half + (i as f64 + 0.5) * h,
                    -half + (j as f64 + 0.5) * h,
                    -half + (k as f64 + 0.5) * h,
                );
                let xi = domain.value(&p);
                if xi < 0.0 {
                    let depth = -xi / (domain.gradient(&p).norm() * h);
                    centers.push(p);
                    weights.push(h * h * h * depth.min(1.0));
                }
            }
        }
    }
    Cells { centers, weights }
}

/// Surface nodes `(point, frame, dS)` from rays through the center.
fn surface_rule(domain: &LevelSetDomain, polar: usize, azimuth: usize) -> Result<Vec<(Vec3, Frame, f64)>> {
    let c = domain.center();
    sphere_rule(polar, azimuth)
        .into_iter()
        .map(|(d, w)| {
            let p = domain.ray_boundary(&d);
            let frame = domain.tangent_frame(&p)?;
            let r = (p - c).norm();
            let cos = frame.normal.dot(&d);
            if cos <= 0.0 {
                return Err(Error::invalid("domain is not star-shaped about its center"));
            }
            Ok((p, frame, w * r * r / cos))
        })
        .collect()
}

/// Per-axis rules `(center-relative node, Lebesgue weight)`: scaled
/// Gauss–Hermite when the function has a velocity scale, otherwise
/// composite Gauss–Legendre on `[-v_max, v_max]`.
fn axis_rule(f: &dyn PhaseFunction, grid: &PhaseGrid) -> (Vec3, Vec<(f64, f64)>) {
    match f.velocity_scale() {
        Some((c, s)) => {
            let norm = (2.0 * std::f64::consts::PI).sqrt() * s;
            let rule = normal_hermite(grid.velocity)
                .into_iter()
                .map(|(z, w)| (s * z, w * norm * (0.5 * z * z).exp()))
                .collect();
            (c, rule)
        }
        None => (
            Vec3::zeros(),
            composite_legendre(grid.velocity, grid.velocity_panels, -grid.v_max, grid.v_max),
        ),
    }
}

fn velocity_rule(f: &dyn PhaseFunction, grid: &PhaseGrid) -> Vec<(Vec3, f64)> {
    let (c, axis) = axis_rule(f, grid);
    let mut out = Vec::with_capacity(axis.len().pow(3));
    for &(a, wa) in &axis {
        for &(b, wb) in &axis {
            for &(d, wd) in &axis {
                out.push((c + Vec3::new(a, b, d), wa * wb * wd));
            }
        }
    }
    out
}

/// Half-space velocity rule in the frame, `sign * u_n >= cut`, weighted by
/// `|n . u|`. The normal component uses Gauss–Legendre panels no wider
/// than the velocity scale; nodes with `|u| > speed_cap` drop out.
fn flux_rule(
    f: &dyn PhaseFunction,
    grid: &PhaseGrid,
    frame: &Frame,
    sign: f64,
    cut: f64,
    speed_cap: f64,
) -> Vec<(Vec3, f64)> {
    let (c, axis) = axis_rule(f, grid);
    let cc = frame.components(&c);
    let (m, reach, width) = match f.velocity_scale() {
        Some((_, s)) => (sign * cc[0], 6.5 * s, s),
        None => (0.0, grid.v_max, 2.0 * grid.v_max / grid.velocity_panels.max(1) as f64),
    };
    let (lo, hi) = ((m - reach).max(cut), m + reach);
    if hi <= lo {
        return Vec::new();
    }
    let panels = ((hi - lo) / width).ceil().max(1.0) as usize;
    let normal = composite_legendre(grid.velocity.min(6), panels, lo, hi);
    let mut out = Vec::with_capacity(normal.len() * axis.len() * axis.len());
    for &(a, wa) in &normal {
        for &(b, wb) in &axis {
            for &(d, wd) in &axis {
                let u = frame.compose(&Vec3::new(sign * a, cc[1] + b, cc[2] + d));
                if u.norm() <= speed_cap {
                    out.push((u, wa * wb * wd * a));
                }
            }
        }
    }
    out
}

fn lp(value: f64, p: f64) -> f64 {
    let a = value.abs();
    if p == 2.0 {
        a * a
    } else {
        a.powf(p)
    }
}

/// `|f|^{p-2} f` with the value 0 at `f = 0`.
fn lp_dual(value: f64, p: f64) -> f64 {
    if value == 0.0 {
        0.0
    } else if p == 2.0 {
        value
    } else {
        value.abs().powf(p - 2.0) * value
    }
}

fn volume_integral(cells: &Cells, vrule: &[(Vec3, f64)], g: impl Fn(&Vec3, &Vec3) -> f64 + Sync) -> f64 {
    let per: Vec<f64> = cells
        .centers
        .par_iter()
        .zip(&cells.weights)
        .map(|(x, wx)| {
            let terms: Vec<f64> = vrule.iter().map(|(v, w)| w * g(x, v)).collect();
            wx * pairwise_sum(&terms)
        })
        .collect();
    pairwise_sum(&per)
}

/// Terms of the `L^p` balance on `[0, t_end]`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GreensTerms {
    pub volume_end: f64,
    pub volume_start: f64,
    pub outflow: f64,
    pub inflow: f64,
    pub source: f64,
    pub residual: f64,
    pub cells: usize,
}

/// `||f(T')||_p^p + int |f|^p_{gamma+} - ||f(0)||_p^p - int |f|^p_{gamma-}
/// - int int p (D f) |f|^{p-2} f`.
pub fn greens_identity_residual(
    domain: &LevelSetDomain,
    field: &dyn ForceField,
    f: &dyn PhaseFunction,
    p: f64,
    t_end: f64,
    grid: &PhaseGrid,
) -> Result<GreensTerms> {
    if p < 1.0 {
        return Err(Error::invalid(format!("p = {p} is below 1")));
    }
    let cells = cell_grid(domain, grid.cells);
    let vrule = velocity_rule(f, grid);
    let trule = legendre(grid.time, 0.0, t_end);
    let volume_end = volume_integral(&cells, &vrule, |x, v| lp(f.value(t_end, x, v), p));
    let volume_start = volume_integral(&cells, &vrule, |x, v| lp(f.value(0.0, x, v), p));
    let mut source = 0.0;
    for &(t, wt) in &trule {
        source += wt
            * volume_integral(&cells, &vrule, |x, v| {
                let fv = f.value(t, x, v);
                if fv == 0.0 {
                    0.0
                } else {
                    p * f.transport(field, t, x, v) * lp_dual(fv, p)
                }
            });
    }
    let surf = surface_rule(domain, grid.surface_polar, grid.surface_azimuth)?;
    let flux = |sign: f64| -> f64 {
        let per: Vec<f64> = surf
            .par_iter()
            .map(|(x, frame, ds)| {
                let rule = flux_rule(f, grid, frame, sign, 0.0, f64::INFINITY);
                let mut acc = 0.0;
                for &(t, wt) in &trule {
                    let terms: Vec<f64> = rule.iter().map(|(v, w)| w * lp(f.value(t, x, v), p)).collect();
                    acc += wt * pairwise_sum(&terms);
                }
                acc * ds
            })
            .collect();
        pairwise_sum(&per)
    };
    let outflow = flux(1.0);
    let inflow = flux(-1.0);
    Ok(GreensTerms {
        volume_end,
        volume_start,
        outflow,
        inflow,
        source,
        residual: volume_end + outflow - volume_start - inflow - source,
        cells: cells.centers.len(),
    })
}

/// Residual at each grid refinement with the fitted log-log slope against
/// the cell size.
#[derive(Clone, Debug, Serialize)]
pub struct RefinementStudy {
    pub cells: Vec<usize>,
    pub spacing: Vec<f64>,
    pub residuals: Vec<f64>,
    pub order: f64,
}

pub fn greens_refinement_study(
    domain: &LevelSetDomain,
    field: &dyn ForceField,
    f: &dyn PhaseFunction,
    p: f64,
    t_end: f64,
    grid: &PhaseGrid,
    levels: &[usize],
) -> Result<RefinementStudy> {
    let mut residuals = Vec::new();
    let mut spacing = Vec::new();
    for &n in levels {
        let g = PhaseGrid { cells: n, ..*grid };
        residuals.push(greens_identity_residual(domain, field, f, p, t_end, &g)?.residual);
        spacing.push(domain.diameter() * 1.001 / n as f64);
    }
    let order = loglog_slope(&spacing, &residuals);
    Ok(RefinementStudy {
        cells: levels.to_vec(),
        spacing,
        residuals,
        order,
    })
}

/// Least-squares slope of `log |y|` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(_, y)| y.abs() > 0.0)
        .map(|(x, y)| (x.ln(), y.abs().ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Both sides of the trace bound before the constant is fitted.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TraceSides {
    pub epsilon: f64,
    /// `int_0^t int_{gamma+ \ gamma+^eps} |f|`.
    pub lhs: f64,
    /// Right side without the constant.
    pub rhs_factor: f64,
}

/// `e^{T |E|} (1 + eps^2 |E|^2) / eps^3 * [||f0||_1 + int (||f||_1 + ||D f||_1)]`
/// against the outgoing flux away from grazing (`n . v >= eps`) and
/// large speeds (`|v| <= 1/eps`).
pub fn trace_sides(
    domain: &LevelSetDomain,
    field: &dyn ForceField,
    f: &dyn PhaseFunction,
    e_sup: f64,
    t_end: f64,
    epsilon: f64,
    grid: &PhaseGrid,
) -> Result<TraceSides> {
    let cells = cell_grid(domain, grid.cells);
    let vrule = velocity_rule(f, grid);
    let trule = legendre(grid.time, 0.0, t_end);
    let mut bulk = volume_integral(&cells, &vrule, |x, v| f.value(0.0, x, v).abs());
    for &(t, wt) in &trule {
        bulk += wt
            * volume_integral(&cells, &vrule, |x, v| {
                f.value(t, x, v).abs() + f.transport(field, t, x, v).abs()
            });
    }
    let surf = surface_rule(domain, grid.surface_polar, grid.surface_azimuth)?;
    let per: Vec<f64> = surf
        .par_iter()
        .map(|(x, frame, ds)| {
            let rule = flux_rule(f, grid, frame, 1.0, epsilon, 1.0 / epsilon);
            let mut acc = 0.0;
            for &(t, wt) in &trule {
                let terms: Vec<f64> = rule.iter().map(|(v, w)| w * f.value(t, x, v).abs()).collect();
                acc += wt * pairwise_sum(&terms);
            }
            acc * ds
        })
        .collect();
    let factor = (t_end * e_sup).exp() * (1.0 + epsilon * epsilon * e_sup * e_sup) / epsilon.powi(3);
    Ok(TraceSides {
        epsilon,
        lhs: pairwise_sum(&per),
        rhs_factor: factor * bulk,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceBalance {
    pub fitted_c: f64,
    pub coarse: Vec<TraceSides>,
    pub fine: Vec<TraceSides>,
    /// `rhs(eps / 2) / rhs(eps)` per test function.
    pub rhs_ratios: Vec<f64>,
    pub holds: bool,
    pub scaling_ok: bool,
}

/// Fits `C` at `eps` over the family, then checks the bound at `eps / 2`
/// and the growth of the right side (`8` up to the `|E|` factor, within 25%).
pub fn trace_balance_check(
    domain: &LevelSetDomain,
    field: &dyn ForceField,
    family: &[&dyn PhaseFunction],
    e_sup: f64,
    t_end: f64,
    epsilon: f64,
    grid: &PhaseGrid,
) -> Result<TraceBalance> {
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    for f in family {
        coarse.push(trace_sides(domain, field, *f, e_sup, t_end, epsilon, grid)?);
        fine.push(trace_sides(domain, field, *f, e_sup, t_end, 0.5 * epsilon, grid)?);
    }
    let fitted_c = coarse
        .iter()
        .filter(|s| s.rhs_factor > 0.0)
        .map(|s| s.lhs / s.rhs_factor)
        .fold(0.0, f64::max);
    let holds = coarse
        .iter()
        .chain(&fine)
        .all(|s| s.lhs <= fitted_c * s.rhs_factor * (1.0 + 1e-12));
    let rhs_ratios: Vec<f64> = coarse
        .iter()
        .zip(&fine)
        .filter(|(c, _)| c.rhs_factor > 0.0)
        .map(|(c, f)| f.rhs_factor / c.rhs_factor)
        .collect();
    let scaling_ok = rhs_ratios.iter().all(|r| (r / 8.0 - 1.0).abs() <= 0.25);
    Ok(TraceBalance {
        fitted_c,
        coarse,
        fine,
        rhs_ratios,
        holds,
        scaling_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, RadialField};

    fn coarse() -> PhaseGrid {
        PhaseGrid {
            cells: 10,
            velocity: 6,
            velocity_panels: 2,
            surface_polar: 12,
            surface_azimuth: 24,
            time: 4,
            ..PhaseGrid::default()
        }
    }

    #[test]
    fn zero_function_balances() {
        let dom = LevelSetDomain::unit_ball();
        let g = greens_identity_residual(&dom, &ConstantField(Vec3::zeros()), &ZeroFunction, 2.0, 0.5, &coarse()).unwrap();
        assert_eq!(g.residual, 0.0);
    }

    #[test]
    fn maxwellian_fluxes_cancel() {
        let dom = LevelSetDomain::unit_ball();
        let g = greens_identity_residual(&dom, &ConstantField(Vec3::zeros()), &MaxwellianState, 2.0, 0.5, &coarse()).unwrap();
        assert!(g.outflow > 0.0);
        assert!((g.outflow - g.inflow).abs() < 1e-10 * g.outflow);
        assert!((g.volume_end - g.volume_start).abs() < 1e-12);
        assert!(g.residual.abs() < 1e-10);
    }

    #[test]
    fn pulse_residual_decays() {
        let dom = LevelSetDomain::unit_ball();
        let pulse = GaussianPulse {
            x0: Vec3::new(0.1, 0.0, 0.0),
            v0: Vec3::new(1.2, 0.3, 0.0),
            sx: 0.3,
            sv: 0.5,
        };
        let study = greens_refinement_study(
            &dom,
            &ConstantField(Vec3::zeros()),
            &pulse,
            2.0,
            0.5,
            &PhaseGrid { velocity: 8, surface_polar: 16, surface_azimuth: 32, ..PhaseGrid::default() },
            &[8, 12, 16, 24],
        )
        .unwrap();
        assert!((study.order - 1.0).abs() < 0.25, "{study:?}");
        assert!(study.residuals.windows(2).all(|w| w[1].abs() < w[0].abs()));
    }

    #[test]
    fn trace_bound_with_one_constant() {
        let dom = LevelSetDomain::unit_ball();
        let field = RadialField { strength: 1.0 };
        let pulses = [
            GaussianPulse { x0: Vec3::zeros(), v0: Vec3::new(1.0, 0.0, 0.0), sx: 0.3, sv: 0.5 },
            GaussianPulse { x0: Vec3::new(0.0, 0.4, 0.0), v0: Vec3::new(0.0, 0.5, 0.5), sx: 0.2, sv: 0.7 },
            GaussianPulse { x0: Vec3::new(-0.3, 0.0, 0.2), v0: Vec3::new(0.0, 0.0, -1.5), sx: 0.25, sv: 0.4 },
        ];
        let mut family: Vec<&dyn PhaseFunction> = pulses.iter().map(|p| p as &dyn PhaseFunction).collect();
        family.push(&MaxwellianState);
        let grid = PhaseGrid { cells: 10, velocity: 8, time: 4, surface_polar: 12, surface_azimuth: 24, ..PhaseGrid::default() };
        let tb = trace_balance_check(&dom, &field, &family, 1.0, 0.5, 0.2, &grid).unwrap();
        assert!(tb.fitted_c > 0.0 && tb.fitted_c.is_finite());
        assert!(tb.holds, "{tb:?}");
        assert!(tb.scaling_ok, "{:?}", tb.rhs_ratios);
        for (c, f) in tb.coarse.iter().zip(&tb.fine) {
            assert!(f.lhs >= c.lhs);
        }
        let zero = trace_sides(&dom, &field, &ZeroFunction, 1.0, 0.5, 0.2, &grid).unwrap();
        assert_eq!(zero.lhs, 0.0);
    }
}
