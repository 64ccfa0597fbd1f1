//! Self-consistent field: Neumann Poisson potential from the density of the
//! current iterate plus an external potential, then one Picard level.
//!
//! The force is `E = grad(phi_F + phi_E)`. With `d phi_F/dn = 0` the wall
//! trace `E . n = d phi_E/dn` is set by the external part alone, so the sign
//! condition and the kinetic weight do not change from one level to the next.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::Tracer;
use crate::collision::{sqrt_maxwellian, CollisionKernel};
use crate::error::{Error, Result};
use crate::field::{check_sign_condition, ForceField};
use crate::geometry::LevelSetDomain;
use crate::picard::{GridField, PicardGrid, PicardMonitor, PicardRun, PicardSolver};
use crate::poisson::{sample_cells, solve_neumann_poisson, PoissonConfig, PoissonMesh, Potential};
use crate::singular::{inv_alpha_lp_norm, SingularOrder};
use crate::transport::SolverConfig;
use crate::weight::KineticWeight;
use crate::Vec3;

pub trait ExternalPotential: Send + Sync + fmt::Debug {
    fn value(&self, x: &Vec3) -> f64;
    fn gradient(&self, x: &Vec3) -> Vec3;
}

/// `phi_E = k |x - c|^2 / 2`; on a ball centred at `c` the wall derivative is `k R`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticPotential {
    pub center: Vec3,
    pub strength: f64,
}

impl ExternalPotential for QuadraticPotential {
    fn value(&self, x: &Vec3) -> f64 {
        0.5 * self.strength * (x - self.center).norm_squared()
    }
    fn gradient(&self, x: &Vec3) -> Vec3 {
        self.strength * (x - self.center)
    }
}

/// `grad phi_E + grad phi_F(t)`, linear in `t` between stored levels.
#[derive(Clone, Debug)]
pub struct VpbField {
    external: Arc<dyn ExternalPotential>,
    times: Vec<f64>,
    levels: Vec<Arc<Potential>>,
}

impl VpbField {
    pub fn external_only(external: Arc<dyn ExternalPotential>) -> Self {
        VpbField {
            external,
            times: Vec::new(),
            levels: Vec::new(),
        }
    }

    pub fn new(external: Arc<dyn ExternalPotential>, times: Vec<f64>, levels: Vec<Arc<Potential>>) -> Result<Self> {
        if times.len() != levels.len() || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("need one potential per increasing time level"));
        }
        Ok(VpbField { external, times, levels })
    }

    /// `grad phi_F` at `(t, x)`.
    pub fn self_consistent(&self, t: f64, x: &Vec3) -> Vec3 {
        let ts = &self.times;
        match ts.len() {
            0 => Vec3::zeros(),
            1 => self.levels[0].gradient(x),
            n => {
                if t <= ts[0] {
                    return self.levels[0].gradient(x);
                }
                if t >= ts[n - 1] {
                    return self.levels[n - 1].gradient(x);
                }
                let k = ts.partition_point(|&s| s <= t) - 1;
                let w = (t - ts[k]) / (ts[k + 1] - ts[k]);
                (1.0 - w) * self.levels[k].gradient(x) + w * self.levels[k + 1].gradient(x)
            }
        }
    }

    pub fn levels(&self) -> &[Arc<Potential>] {
        &self.levels
    }
}

impl ForceField for VpbField {
    fn field(&self, t: f64, x: &Vec3) -> Vec3 {
        self.external.gradient(x) + self.self_consistent(t, x)
    }
    fn label(&self) -> String {
        format!("vpb({:?})", self.external)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VpbConfig {
    pub steps: usize,
    /// Size of the initial perturbation of `sqrt(mu)`.
    pub epsilon: f64,
    /// `k` in `phi_E = k |x - c|^2 / 2`.
    pub external_strength: f64,
    /// Hölder exponent `1 - delta` of the gradient seminorm.
    pub delta: f64,
    /// Phase grid of the coupled iteration.
    pub grid: PicardGrid,
    pub poisson: PoissonConfig,
}

impl Default for VpbConfig {
    fn default() -> Self {
        VpbConfig {
            steps: 3,
            epsilon: 0.05,
            external_strength: 1.0,
            delta: 0.5,
            grid: PicardGrid {
                space: 3,
                velocity: 3,
                time_levels: 2,
                ..PicardGrid::default()
            },
            poisson: PoissonConfig {
                radial: 8,
                polar: 8,
                azimuth: 16,
                ..PoissonConfig::default()
            },
        }
    }
}

impl VpbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Schema {
                key: "vpb.delta".into(),
                message: format!("must lie in (0, 1), got {}", self.delta),
            });
        }
        if !(self.external_strength > 0.0) {
            return Err(Error::Schema {
                key: "vpb.external_strength".into(),
                message: "must be positive so that the wall sign condition holds".into(),
            });
        }
        self.grid.validate()?;
        self.poisson.validate()
    }
}

/// `rho = int mu h dv` on the Poisson cells at time level `k`.
pub fn density_on_mesh(h: &GridField, k: usize, mesh: &PoissonMesh) -> Vec<f64> {
    let nodal = h.density_nodes(k);
    let g = &h.geometry;
    sample_cells(mesh, |x| g.space_stencil(x).iter().map(|&(i, w)| w * nodal[i]).sum())
}

/// Potentials of `rho - rho0` at every time level of `h`. The mean of
/// `rho - rho0` (mass drift of the discrete iteration) is removed first and
/// returned as the largest absolute shift.
pub fn self_consistent_potentials(
    h: &GridField,
    mesh: &Arc<PoissonMesh>,
    config: &PoissonConfig,
    rho0: f64,
) -> Result<(Vec<Arc<Potential>>, f64)> {
    let mut drift: f64 = 0.0;
    let mut out = Vec::new();
    for k in 0..h.geometry.times.len() {
        let mut s: Vec<f64> = density_on_mesh(h, k, mesh).iter().map(|r| r - rho0).collect();
        let mean = mesh.system.mean(&s);
        drift = drift.max(mean.abs());
        s.iter_mut().for_each(|a| *a -= mean);
        out.push(Arc::new(solve_neumann_poisson(mesh, &s, config)?));
    }
    Ok((out, drift))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct VpbStepReport {
    pub step: usize,
    pub picard: PicardMonitor,
    /// `max |grad phi_F^m|` over cells and time levels.
    pub grad_phi_sup: f64,
    /// Largest `|mean(rho - rho0)|` removed before the solves.
    pub mass_drift: f64,
    pub poisson_iterations: usize,
    pub poisson_residual: f64,
}

pub struct VpbStep {
    pub field: VpbField,
    pub next: GridField,
    pub report: VpbStepReport,
}

/// Poisson from `h^m`, then one Picard level along `E = grad(phi_F^m + phi_E)`.
#[allow(clippy::too_many_arguments)]
pub fn vpb_picard_step(
    solver: &PicardSolver<'_>,
    domain: &LevelSetDomain,
    mesh: &Arc<PoissonMesh>,
    poisson: &PoissonConfig,
    external: &Arc<dyn ExternalPotential>,
    rho0: f64,
    hm: &GridField,
    m: usize,
) -> Result<VpbStep> {
    let (levels, mass_drift) = self_consistent_potentials(hm, mesh, poisson, rho0)?;
    let grad_phi_sup = levels
        .iter()
        .flat_map(|p| p.gradients.iter().map(|g| g.norm()))
        .fold(0.0, f64::max);
    let poisson_iterations = levels.iter().map(|p| p.stats.iterations).max().unwrap_or(0);
    let poisson_residual = levels.iter().map(|p| p.stats.relative_residual).fold(0.0, f64::max);
    let field = VpbField::new(external.clone(), hm.geometry.times.clone(), levels)?;
    let tracer = Tracer::new(domain, &field).with_options(solver.config.trace_options());
    let (next, picard) = solver.step(&tracer, hm, m)?;
    Ok(VpbStep {
        next,
        report: VpbStepReport {
            step: m,
            picard,
            grad_phi_sup,
            mass_drift,
            poisson_iterations,
            poisson_residual,
        },
        field,
    })
}

pub struct VpbRun {
    pub rho0: f64,
    pub reports: Vec<VpbStepReport>,
    /// `VpbField` used for each step.
    pub fields: Vec<VpbField>,
    pub picard: PicardRun,
    pub mesh: Arc<PoissonMesh>,
}

/// `vpb.steps` coupled levels from `f^0 = sqrt(mu)` with datum `sqrt(mu) h0`.
#[allow(clippy::too_many_arguments)]
pub fn vpb_iterate(
    config: &SolverConfig,
    vpb: &VpbConfig,
    domain: &LevelSetDomain,
    kernel: &CollisionKernel,
    external: Arc<dyn ExternalPotential>,
    h0: &(dyn Fn(&Vec3, &Vec3) -> f64 + Sync),
) -> Result<VpbRun> {
    vpb.validate()?;
    let external_field = VpbField::external_only(external.clone());
    let sign = check_sign_condition(domain, &external_field, 200, &[0.0]);
    if !sign.passed {
        return Err(Error::invalid(format!(
            "external potential violates the wall sign condition (min {:.3e})",
            sign.c_e_lower
        )));
    }
    let tracer = Tracer::new(domain, &external_field).with_options(config.trace_options());
    let solver = PicardSolver::new(config, &vpb.grid, &tracer, kernel, h0)?;
    let mesh = Arc::new(PoissonMesh::new(domain, &vpb.poisson)?);
    // rho0 neutralises the initial datum.
    let rho0 = mesh.system.mean(&density_on_mesh(solver.initial(), 0, &mesh));
    let mut fields = vec![solver.equilibrium()];
    let mut reports = Vec::new();
    let mut vpb_fields = Vec::new();
    for m in 0..vpb.steps {
        let step = vpb_picard_step(
            &solver,
            domain,
            &mesh,
            &vpb.poisson,
            &external,
            rho0,
            fields.last().expect("iterate"),
            m,
        )?;
        reports.push(step.report);
        vpb_fields.push(step.field);
        fields.push(step.next);
    }
    let monitors = reports.iter().map(|r| r.picard).collect();
    Ok(VpbRun {
        rho0,
        reports,
        fields: vpb_fields,
        picard: PicardRun::assemble(solver.initial_norm, monitors, fields),
        mesh,
    })
}

/// Largest relative spread of `alpha(t, x, v)` across the given fields at
/// collar states.
pub fn alpha_spread(domain: &LevelSetDomain, fields: &[&dyn ForceField], states: &[(f64, Vec3, Vec3)]) -> Result<f64> {
    let weights: Vec<KineticWeight<'_>> = fields.iter().map(|f| KineticWeight::new(domain, *f)).collect();
    let mut worst: f64 = 0.0;
    for (t, x, v) in states {
        let vals = weights.iter().map(|w| w.alpha(*t, x, v)).collect::<Result<Vec<_>>>()?;
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max((hi - lo) / hi.abs().max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

/// Collar states `(0, x, v)` with `x` at depth `frac * collar` under
/// boundary samples and a mix of tangential and normal velocities.
pub fn collar_states(domain: &LevelSetDomain, n: usize, frac: f64) -> Result<Vec<(f64, Vec3, Vec3)>> {
    let mut out = Vec::new();
    for (i, p) in domain.boundary_samples(n).iter().enumerate() {
        let frame = domain.tangent_frame(p)?;
        let x = p - frac * domain.collar_width() * frame.normal;
        let s = (i % 5) as f64 / 4.0;
        let v = (1.0 - s) * frame.tau1 + s * frame.normal + 0.3 * frame.tau2;
        out.push((0.0, x, v));
    }
    Ok(out)
}

/// Optional right-hand-side drivers of the potential bounds.
pub struct Drivers<'a> {
    pub h: &'a GridField,
    pub config: &'a SolverConfig,
    pub weight: &'a KineticWeight<'a>,
    /// Time for the weight and `(p, extent, order)` for the `L^p` factor.
    pub lp: Option<(f64, f64, SingularOrder)>,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct PotentialReport {
    pub phi_sup: f64,
    pub grad_sup: f64,
    /// `sup |grad phi(x) - grad phi(y)| / |x - y|^{1 - delta}` over sampled pairs.
    pub holder_seminorm: f64,
    /// `phi_sup + grad_sup + holder_seminorm`.
    pub c1_holder_norm: f64,
    /// Largest spectral norm of the reconstructed Hessian at cell centres.
    pub hessian_sup: f64,
    /// `sup e^{theta |v|^2} |f|`.
    pub weighted_f_sup: Option<f64>,
    /// `sup e^{-varpi <v> t} alpha |grad_x f|` at interior nodes.
    pub weighted_alpha_grad_sup: Option<f64>,
    /// `|| int e^{-|v|^2/8} / alpha dv ||_{L^p}`.
    pub inv_alpha_lp: Option<f64>,
}

const MAX_PAIR_POINTS: usize = 4000;

pub fn potential_diagnostics(potential: &Potential, delta: f64, drivers: Option<&Drivers<'_>>) -> Result<PotentialReport> {
    let mesh = &potential.mesh;
    let gamma = 1.0 - delta;
    let stride = mesh.len().div_ceil(MAX_PAIR_POINTS).max(1);
    let pts: Vec<(Vec3, Vec3)> = (0..mesh.len())
        .step_by(stride)
        .map(|c| (mesh.centers[c], potential.gradients[c]))
        .collect();
    let holder = pts
        .par_iter()
        .enumerate()
        .map(|(a, (xa, ga))| {
            pts[a + 1..]
                .iter()
                .map(|(xb, gb)| (ga - gb).norm() / (xa - xb).norm().powf(gamma))
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    let phi_sup = potential.values.iter().map(|u| u.abs()).fold(0.0, f64::max);
    let grad_sup = potential.gradients.iter().map(|g| g.norm()).fold(0.0, f64::max);
    let hessian_sup = mesh
        .centers
        .par_iter()
        .map(|x| {
            let eig = potential.hessian(x).symmetric_eigenvalues();
            eig.iter().map(|e| e.abs()).fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    let mut report = PotentialReport {
        phi_sup,
        grad_sup,
        holder_seminorm: holder,
        c1_holder_norm: phi_sup + grad_sup + holder,
        hessian_sup,
        ..Default::default()
    };
    if let Some(d) = drivers {
        let g = &d.h.geometry;
        report.weighted_f_sup = Some(d.h.weighted_sup(d.config.theta, 0..g.times.len()));
        let step = 0.5 * g.spacing().min();
        let nv3 = g.nodes.len().pow(3);
        let mut best: f64 = 0.0;
        for &t in &g.times {
            for x in &g.positions {
                if d.weight.domain.value(x) > -2.0 * step * d.weight.domain.gradient(x).norm() {
                    continue;
                }
                let lw = d.weight.local(t, x)?;
                for j in 0..nv3 {
                    let v = g.velocity(j);
                    let mut grad = Vec3::zeros();
                    for a in 0..3 {
                        let mut p = *x;
                        let mut q = *x;
                        p[a] += step;
                        q[a] -= step;
                        grad[a] = (d.h.eval(t, &p, &v) - d.h.eval(t, &q, &v)) / (2.0 * step);
                    }
                    let bracket = (1.0 + v.norm_squared()).sqrt();
                    let w = (-d.config.varpi * bracket * t).exp() * lw.alpha(&v)?;
                    best = best.max(w * sqrt_maxwellian(&v) * grad.norm());
                }
            }
        }
        report.weighted_alpha_grad_sup = Some(best);
        if let Some((t, extent, order)) = d.lp {
            report.inv_alpha_lp = Some(inv_alpha_lp_norm(d.weight, t, d.config.p, extent, &order)?.value);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::picard::perturbed_initial;

    fn ball() -> LevelSetDomain {
        LevelSetDomain::unit_ball()
    }

    fn quadratic() -> Arc<dyn ExternalPotential> {
        Arc::new(QuadraticPotential {
            center: Vec3::zeros(),
            strength: 1.0,
        })
    }

    fn small_vpb(eps: f64, steps: usize) -> VpbConfig {
        VpbConfig {
            steps,
            epsilon: eps,
            poisson: PoissonConfig {
                radial: 6,
                polar: 6,
                azimuth: 12,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_potential_has_zero_diagnostics() {
        let mesh = Arc::new(PoissonMesh::spherical(Vec3::zeros(), 1.0, 4, 4, 8));
        let r = potential_diagnostics(&Potential::zero(mesh), 0.5, None).unwrap();
        assert_eq!(r.phi_sup + r.grad_sup + r.holder_seminorm + r.hessian_sup, 0.0);
    }

    #[test]
    fn neutral_equilibrium_has_no_self_field() {
        let dom = ball();
        let cfg = SolverConfig::default();
        let one = |_: &Vec3, _: &Vec3| 1.0;
        let run = vpb_iterate(&cfg, &small_vpb(0.0, 1), &dom, &CollisionKernel::default(), quadratic(), &one)
            .unwrap();
        assert!((run.rho0 - 1.0).abs() < 1e-12);
        assert!(run.reports[0].grad_phi_sup < 1e-14);
    }

    #[test]
    fn wall_trace_comes_from_external_part() {
        let dom = ball();
        let mesh = Arc::new(PoissonMesh::spherical(Vec3::zeros(), 1.0, 6, 6, 12));
        let src = sample_cells(&mesh, |x| x[0] + x[1] * x[2]);
        let mean = mesh.system.mean(&src);
        let src: Vec<f64> = src.iter().map(|s| s - mean).collect();
        let pot = Arc::new(solve_neumann_poisson(&mesh, &src, &PoissonConfig::default()).unwrap());
        let full = VpbField::new(quadratic(), vec![0.0], vec![pot]).unwrap();
        let ext = VpbField::external_only(quadratic());
        let a = check_sign_condition(&dom, &full, 300, &[0.0]);
        let b = check_sign_condition(&dom, &ext, 300, &[0.0]);
        assert!((a.c_e_lower - b.c_e_lower).abs() < 1e-10);
        let states = collar_states(&dom, 40, 0.5).unwrap();
        let spread = alpha_spread(&dom, &[&full, &ext], &states).unwrap();
        assert!(spread < 1e-10, "{spread}");
    }

    #[test]
    fn self_field_stays_order_epsilon() {
        let dom = ball();
        let cfg = SolverConfig::default();
        let h0 = perturbed_initial(0.1, Vec3::zeros(), 0.6);
        let run = vpb_iterate(&cfg, &small_vpb(0.1, 3), &dom, &CollisionKernel::default(), quadratic(), &h0)
            .unwrap();
        for r in &run.reports {
            assert!(r.grad_phi_sup < 0.1, "{r:?}");
            assert!(r.poisson_residual <= 1e-10);
        }
        assert!(run.reports[1].grad_phi_sup > 0.0);
    }
}
