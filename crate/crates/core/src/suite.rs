//! The check suite: one function per check, run independently and
//! assembled in a fixed order so reports are reproducible.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::balance::{greens_refinement_study, trace_balance_check, GaussianPulse, MaxwellianState, PhaseFunction, PhaseGrid};
use crate::characteristics::{PhaseState, Tracer};
use crate::collision::{maxwellian, post_collision, CollisionKernel, GaussianProfile, QuadOrder};
use crate::config::{RunConfig, CHECK_NAMES};
use crate::error::{Error, Result};
use crate::field::{check_sign_condition, field_norms, ConstantField, ForceField, RadialField};
use crate::geometry::{fibonacci_sphere, Frame, LevelSetDomain};
use crate::picard::{perturbed_initial, picard_iterate};
use crate::poisson::{sample_cells, solve_neumann_poisson, PoissonMesh};
use crate::report::{CheckReport, Status, SuiteReport, Table, Timings};
use crate::singular::{
    inv_alpha_bound_sweep, key_lemma_sweep, uv_kernel_ratio_integral, varpi_scaling, KeyLemmaParams, SingularKernelSpec,
};
use crate::transport::{duhamel_evaluate, FnInflow};
use crate::vpb::{alpha_spread, collar_states, potential_diagnostics, vpb_iterate, ExternalPotential, QuadraticPotential, VpbField};
use crate::wall::{
    cmu_constant, cycle_gap_bound_check, fit_chord_constant, ks_critical_1pct, ks_statistic, rayleigh_cdf,
    run_diffuse_cycles, tail_probability_estimate, trial_rng, HalfSpaceRule, WallSampler,
};
use crate::weight::{fit_velocity_rate, sample_weight_path, velocity_lemma_check, KineticWeight};
use crate::Vec3;

struct Ctx<'a> {
    cfg: &'a RunConfig,
    domain: LevelSetDomain,
    field: Box<dyn ForceField>,
    scale: f64,
}

impl Ctx<'_> {
    fn rng(&self, check: usize) -> ChaCha8Rng {
        trial_rng(self.cfg.seed, 1_000_000 + check as u64)
    }

    fn tol(&self, t: f64) -> f64 {
        t * self.scale
    }

    fn e_sup(&self) -> f64 {
        field_norms(&self.domain, self.field.as_ref(), 200, &[0.0, self.cfg.solver.horizon]).e_sup
    }

    /// Uniform point of the domain shrunk by `frac` towards its centre.
    fn interior_point(&self, rng: &mut ChaCha8Rng, frac: f64) -> Vec3 {
        let r = frac * self.domain.inradius();
        loop {
            let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if p.norm() <= 1.0 {
                return self.domain.center() + r * p;
            }
        }
    }

    fn boundary_point(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        let d = normal3(rng);
        self.domain.ray_boundary(&d)
    }
}

fn normal3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

fn field_family() -> Vec<(&'static str, Box<dyn ForceField>)> {
    vec![
        ("zero", Box::new(ConstantField(Vec3::zeros()))),
        ("radial", Box::new(RadialField { strength: 1.0 })),
        ("gravity", Box::new(ConstantField(Vec3::new(0.0, 0.0, -1.0)))),
    ]
}

/// Outgoing non-grazing wall state `(x, v)` with `n . v >= 0.3`.
fn outgoing_state(ctx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Result<(Vec3, Vec3)> {
    let x = ctx.boundary_point(rng);
    let frame = ctx.domain.tangent_frame(&x)?;
    let c = Vec3::new(rng.random_range(0.3..1.5), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    Ok((x, frame.compose(&c)))
}

/// Flow there and back, and the Jacobian determinant, on sampled
/// trajectories that stay inside.
fn liouville(ctx: &Ctx<'_>, r: &mut CheckReport) -> Result<()> {
    let n = ctx.cfg.sizes.trajectories;
    r.config("trajectories_per_field", n as f64);
    let mut table = Table::new("errors", &["field", "det_error", "round_trip_error"]);
    for (fi, (name, field)) in field_family().iter().enumerate() {
        let tracer = Tracer::new(&ctx.domain, field.as_ref());
        let mut rng = ctx.rng(100 + fi);
        let (mut det_err, mut trip_err, mut accepted, mut tries) = (0.0f64, 0.0f64, 0, 0);
        while accepted < n && tries < 50 * n {
            tries += 1;
            let x = ctx.interior_point(&mut rng, 0.8);
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let s = rng.random_range(0.1..0.6);
            let st = PhaseState::new(1.0, x, v);
            let Ok(fwd) = tracer.flow(&st, 1.0 + s) else { continue };
            let back = tracer.flow(&fwd, 1.0)?;
            let det = tracer.flow_jacobian(&st, 1.0 + s)?.determinant();
            det_err = det_err.max((det - 1.0).abs());
            trip_err = trip_err.max((back.x - st.x).norm().max((back.v - st.v).norm()));
            accepted += 1;
        }
        r.require(accepted == n, format!("only {accepted} non-exiting trajectories for {name}"));
        r.at_most(&format!("{name}.det_error"), det_err, ctx.tol(1e-8));
        r.at_most(&format!("{name}.round_trip_error"), trip_err, ctx.tol(1e-8));
        table.push(vec![fi as f64, det_err, trip_err]);
    }
    r.tables.push(table);
    Ok(())
}

fn boundary_jacobian(ctx: &Ctx<'_>, r: &mut CheckReport) -> Result<()> {
    let n = ctx.cfg.sizes.det_samples;
    r.config("samples_per_field", n as f64);
    for (fi, (name, field)) in field_family().iter().enumerate() {
        let tracer = Tracer::new(&ctx.domain, field.as_ref());
        let mut rng = ctx.rng(200 + fi);
        let (mut worst, mut done, mut tries) = (0.0f64, 0, 0);
        while done < n && tries < 20 * n {
            tries += 1;
            let (x, v) = outgoing_state(ctx, &mut rng)?;
            let t = 1.0;
            let Ok(exit) = tracer.backward_exit(&PhaseState::new(t, x, v)) else { continue };
            if exit.grazing {
                continue;
            }
            let s = t - 0.5 * exit.exit_time.min(1.0);
            let Ok(check) = tracer.verify_boundary_map_det(t, &x, &v, s) else { continue };
            worst = worst.max(check.relative_error());
            done += 1;
        }
        r.require(done == n, format!("only {done} usable samples for {name}"));
        r.at_most(&format!("{name}.relative_error"), worst, ctx.tol(1e-3));
    }
    Ok(())
}

fn wall_jacobians(ctx: &Ctx<'_>, r: &mut CheckReport) -> Result<()> {
    let n = ctx.cfg.sizes.det_samples;
    r.config("samples_per_field", n as f64);
    for (fi, (name, field)) in field_family().iter().enumerate() {
        let tracer = Tracer::new(&ctx.domain, field.as_ref());
        let mut rng = ctx.rng(300 + fi);
        let (mut wall, mut interior, mut done, mut tries) = (0.0f64, 0.0f64, 0, 0);
        while done < n && tries < 20 * n {
            tries += 1;
            let (x, v) = outgoing_state(ctx, &mut rng)?;
            let Ok(exit) = tracer.backward_exit(&PhaseState::new(10.0, x, v)) else { continue };
            if exit.grazing || exit.exit_time > 5.0 {
                continue;
            }
            let Ok(g) = tracer.verify_gamma_to_gamma_det(exit.exit_time + 0.5, &x, &v) else { continue };
            wall = wall.max(g.boundary.relative_error());
            interior = interior.max(g.interior.relative_error());
            done += 1;
        }
        r.require(done == n, format!("only {done} usable samples for {name}"));
        r.at_most(&format!("{name}.wall_to_wall_error"), wall, ctx.tol(1e-3));
        r.at_most(&format!("{name}.interior_to_wall_error"), interior, ctx.tol(1e-3));
    }
    Ok(())
}

fn collision(ctx: &Ctx<'_>, r: &mut CheckReport) -> Result<()> {
    let kernel = CollisionKernel::default();
    let mut rng = ctx.rng(400);
    let (mut mom, mut en) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let u = 2.0 * normal3(&mut rng);
        let v = 2.0 * normal3(&mut rng);
        let om = normal3(&mut rng).normalize();
        let (up, vp) = post_collision(&u, &v, &om);
        let scale = 1.0 + u.amax() + v.amax();
        mom = mom.max((up + vp - u - v).amax() / scale);
        let e0 = u.norm_squared() + v.norm_squared();
        en = en.max((up.norm_squared() + vp.norm_squared() - e0).abs() / (1.0 + e0));
    }
    r.at_most("momentum_defect", mom, ctx.tol(1e-14));
    r.at_most("energy_defect", en, ctx.tol(1e-14));
    let profiles = [
        ("equilibrium", GaussianProfile::maxwellian()),
        ("shifted", GaussianProfile::shifted(Vec3::new(0.3, -0.2, 0.1))),
        ("anisotropic", GaussianProfile::anisotropic(Vec3::new(1.0, 0.7, 1.3))),
    ];
    for (name, g) in &profiles {
        let m = kernel.collision_moments(g)?;
        r.at_most(&format!("{name}.moments"), m.max_abs(), ctx.tol(1e-6));
    }
    let mu = GaussianProfile::maxwellian();
    let mut q_max: f64 = 0.0;
    for _ in 0..ctx.cfg.sizes.collision_samples {
        let v = normal3(&mut rng);
        q_max = q_max.max(kernel.q_operator(&mu, &mu, &v)?.value().abs());
    }
    r.at_most("q_mu_mu", q_max, ctx.tol(1e-6));
    let aniso = &profiles[2].1;
    let coarse = kernel.collision_moments_at(&QuadOrder::coarse(), aniso).max_abs();
    let fine = kernel.collision_moments_at(&QuadOrder::coarse().refined(), aniso).max_abs();
    r.measured("anisotropic.coarse_moments", coarse);
    r.measured("anisotropic.refined_moments", fine);
    r.require(fine < coarse, "moment residual did not shrink under refinement");
    Ok(())
}

fn wall_law(ctx: &Ctx<'_>, r: &mut CheckReport) -> Result<()> {
    let rule = HalfSpaceRule::default();
    r.at_most("c_mu_vs_sqrt_2pi", (cmu_constant() - (2.0 * PI).sqrt()).abs(), ctx.tol(1e-8));
    let mut norm_err: f64 = 0.0;
    let mut trace_err: f64 = 0.0;
    let mut balance: f64 = 0.0;
    let shifted = |v: &Vec3| (1.0 + v[0]) * maxwellian(&(v - Vec3::new(0.2, 0.0, 0.1)));
    let mu = |v: &Vec3| maxwellian(v);
    for p in ctx.domain.boundary_samples(10) {
        let s = WallSampler::new(&ctx.domain, &p)?;
        norm_err = norm_err.max((rule.flux(&s.frame, 1.0, maxwellian) * cmu_constant() - 1.0).abs());
        let tr = s.diffuse_trace(&rule, &mu);
        for c in [Vec3::new(-1.0, 0.1, -0.5), Vec3::new(-0.3, 2.0, 0.0), Vec3::new(-0.05, -0.4, 0.7)] {
            let v = s.frame.compose(&c);
            trace_err = trace_err.max((tr.eval(&v) - maxwellian(&v)).abs() / maxwellian(&v));
        }
        let tr = s.diffuse_trace(&rule, &shifted);
        balance = balance.max((rule.flux(&s.frame, -1.0, |v| tr.eval(v)) - tr.outgoing_flux).abs());
    }
    r.at_most("normalisation_error", norm_err, ctx.tol(1e-8));
    r.at_most("diffuse_trace_of_mu", trace_err, ctx.tol(1e-10));
    r.at_most("flux_balance", balance, ctx.tol(1e-8));
    let p = ctx.domain.boundary_samples(1)[0];
    let s = WallSampler::new(&ctx.domain, &p)?;
    let mut rng = ctx.rng(500);
    let n = ctx.cfg.sizes.ks_samples;
    let vn: Vec<f64> = (0..n).map(|_| s.sample_outgoing(&mut rng).dot(&s.normal())).collect();
    r.require(vn.iter().all(|&x| x > 0.0), "sampled velocity not outgoing");
    r.at_most("ks_statistic", ks_statistic(&vn, rayleigh_cdf), ks_critical_1pct(n));
    Ok(())
}

fn velocity_lemma(ctx: &Ctx<'_>, r: &mut CheckReport) -> Result<()> {
    let weight = KineticWeight::new(&ctx.domain, ctx.field.as_ref());
    let tracer = Tracer::new(&ctx.domain, ctx.field.as_ref());
    let n = ctx.cfg.sizes.lemma_trajectories;
    let mut rng = ctx.rng(600);
    let mut paths = Vec::with_capacity(n);
    let mut drawn = 0;
    // Paths that hit the wall within a step carry no information; redraw.
    while paths.len() < n && drawn < 20 * n {
        let mut states = Vec::with_capacity(n);
        for _ in 0..n {
            let p = ctx.boundary_point(&mut rng);
            let frame = ctx.domain.tangent_frame(&p)?;
            let depth = 10f64.powf(rng.random_range(-4.0..-1.5)) * ctx.domain.collar_width();
            let c = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            states.push(PhaseState::new(1.0, p - depth * frame.normal, frame.compose(&c)));
        }
        drawn += n;
        let batch: Vec<_> = states
            .par_iter()
            .map(|st| sample_weight_path(&weight, &tracer, st, 1.0, -1.0))
            .collect::<Result<_>>()?;
        paths.extend(batch.into_iter().filter(|p| p.len() >= 3));
    }
    paths.truncate(n);
    let c = paths.iter().map(|p| fit_velocity_rate(p)).fold(0.0, f64::max);
    r.config("trajectories", n as f64);
    r.measured("usable_trajectories", paths.len() as f64);
    r.fitted("rate_c", c);
    let passing = paths.iter().filter(|p| velocity_lemma_check(p, c).pass).count();
    let control = paths.iter().filter(|p| velocity_lemma_check(p, 0.1 * c).pass).count();
    r.measured("fraction_within_sandwich", passing as f64 / paths.len().max(1) as f64);
    r.measured("control_fraction_at_c_over_10", control as f64 / paths.len().max(1) as f64);
    r.measured("drawn_states", drawn as f64);
    r.require(paths.len() == n, "too few trajectories stayed inside for three samples");
    r.require(passing == paths.len(), "a trajectory left the sandwich at the fitted rate");
    r.require(control < paths.len(), "the C/10 control did not fail");
    Ok(())
}

fn cycles(ctx: &Ctx<'_>, r: &mut CheckReport) -> Result<()> {
    let tracer = Tracer::new(&ctx.domain, ctx.field.as_ref()).with_options(ctx.cfg.solver.trace_options());
    let sizes = &ctx.cfg.sizes;
    let mut rng = ctx.rng(700);
    let starts: Vec<PhaseState> = (0..sizes.cycles)
        .map(|_| PhaseState::new(1.0, ctx.interior_point(&mut rng, 0.9), normal3(&mut rng)))
        .collect();
    let seed = ctx.cfg.seed;
    let runs: Vec<_> = starts
        .par_iter()
        .enumerate()
        .map(|(i, st)| run_diffuse_cycles(&tracer, st, sizes.cycle_depth, &mut trial_rng(seed, i as u64)))
        .collect::<Result<_>>()?;
    let c_omega = fit_chord_constant(&ctx.domain, 300);
    let e_sup = ctx.e_sup();
    let delta = 0.1;
    let gap = cycle_gap_bound_check(&ctx.domain, &runs, delta, c_omega, e_sup);
    r.config("cycles", sizes.cycles as f64);
    r.config("delta", delta);
    r.fitted("c_omega", c_omega);
    r.measured("e_sup", e_sup);
    r.measured("gaps_checked", gap.checked as f64);
    r.measured("gaps_exempt", gap.exempt as f64);
    r.measured("min_gap_over_bound", gap.min_ratio);
    r.require(gap.checked > 0, "no non-grazing gaps were sampled");
    r.at_most("gap_violations", gap.violations as f64, 0.0);
    // Fast enough that the first wall hit happens before t = 0.
    let start = PhaseState::new(0.5, ctx.domain.center(), Vec3::new(3.0, 0.5, 0.0));
    let tail = tail_probability_estimate(&tracer, &start, sizes.tail_depth, sizes.tail_trials, seed, ctx.cfg.solver.varpi)?;
    let mut table = Table::new("tail", &["l", "mean", "std_error"]);
    for lv in &tail.levels {
        table.push(vec![lv.l as f64, lv.mean, lv.std_error]);
    }
    r.tables.push(table);
    r.fitted("tail_peak_level", tail.peak as f64);
    let resolved = tail.levels.iter().filter(|lv| lv.l >= tail.peak && lv.mean > 0.0).count();
    r.measured("levels_resolved_past_peak", resolved as f64);
    r.require(resolved >= 3, "fewer than three resolved levels beyond the peak");
    r.at_most("tail_ratio", tail.ratio, 1.0 - 1e-12);
    Ok(())
}

fn singular_integrals(ctx: &Ctx<'_>, r: &mut CheckReport) -> Result<()> {
    let weight = KineticWeight::new(&ctx.domain, ctx.field.as_ref());
    let tracer = Tracer::new(&ctx.domain, ctx.field.as_ref());
    let spec = SingularKernelSpec::default();
    let walls = ctx.domain.boundary_samples(200);
    let c_e = walls
        .iter()
        .map(|p| ctx.field.field(0.0, p).dot(&ctx.domain.gradient(p)))
        .fold(f64::INFINITY, f64::min);
    r.measured("wall_push_lower", c_e);
    let n = ctx.cfg.sizes.sweep_points;
    let dirs = fibonacci_sphere(n);
    let pts: Vec<(Vec3, Vec3)> = (0..n)
        .map(|i| {
            let p = ctx.domain.ray_boundary(&dirs[i]);
            let depth = 1e-3 * 3f64.powi(i as i32 % 5) * ctx.domain.collar_width() / 0.2;
            let y = p - depth * ctx.domain.outward_normal(&p).unwrap_or(dirs[i]);
            (y, Vec3::new(0.1 * (i as f64 - 0.5 * n as f64), 1.0, -0.7))
        })
        .collect();
    let fit = inv_alpha_bound_sweep(&spec, &weight, 0.0, &pts, c_e)?;
    r.fitted("inv_alpha.fitted_c", fit.fitted_c);
    r.fitted("inv_alpha.c_even", fit.c_even);
    r.fitted("inv_alpha.c_odd", fit.c_odd);
    r.require(fit.stable, "inverse-alpha constant varies by more than a factor 2");
    r.require(fit.rows.iter().all(|row| row.lhs.is_finite()), "non-finite inverse-alpha integral");
    let x = walls[0];
    let frame = ctx.domain.tangent_frame(&x)?;
    let uv = uv_kernel_ratio_integral(&spec, &weight, 0.3, &x, &frame.compose(&Vec3::new(0.2, 1.0, 0.0)))?;
    r.measured("uv.value", uv.value);
    r.measured("uv.bound", uv.bound);
    r.require(uv.value.is_finite() && uv.value <= uv.bound, "kernel-ratio integral not below its bound");
    let edge = SingularKernelSpec {
        weight_exponent: (spec.p - 1.0) / spec.p,
        ..spec
    };
    r.require(
        matches!(uv_kernel_ratio_integral(&edge, &weight, 0.0, &x, &frame.tau1), Err(Error::AdmissibilityViolation(_))),
        "edge exponent was not rejected",
    );
    let key = SingularKernelSpec { varpi: 50.0, ..spec };
    let norms = field_norms(&ctx.domain, ctx.field.as_ref(), 200, &[0.0]);
    let params = KeyLemmaParams {
        delta: 0.1,
        c_e: c_e.max(1e-3),
        e_sup: norms.e_sup,
        grad_e_sup: norms.grad_sup,
        c_xi: 1.0,
    };
    let m = ctx.cfg.sizes.key_states;
    let states: Vec<PhaseState> = fibonacci_sphere(m)
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let x = ctx.domain.ray_boundary(&d);
            let fr = Frame::from_normal(&ctx.domain.outward_normal(&x).unwrap_or(d));
            let v = fr.compose(&Vec3::new(0.005 + 0.007 * (i % 6) as f64, 1.0 + 0.2 * (i % 6) as f64, 0.3));
            PhaseState::new(0.9, x, v)
        })
        .collect();
    let (vals, kfit) = key_lemma_sweep(&key, &weight, &tracer, &states, &params)?;
    r.fitted("key_lemma.fitted_c", kfit.fitted_c);
    r.require(kfit.stable, "key-lemma constant varies by more than a factor 2");
    r.require(vals.iter().all(|k| k.lhs.is_finite()), "non-finite key-lemma integral");
    let sc = varpi_scaling(&key, &weight, &tracer, &states, &params)?;
    r.measured("varpi.contribution_ratio", sc.contribution_ratio);
    r.at_most("varpi.ratio_minus_half", (sc.contribution_ratio - 0.5).abs(), 0.1 * ctx.scale);
    Ok(())
}

fn transport(ctx: &Ctx<'_>, r: &mut CheckReport) -> Result<()> {
    let dom = &ctx.domain;
    let bump = |x: &Vec3, v: &Vec3| {
        (-(x - Vec3::new(0.1, -0.2, 0.05)).norm_squared() - 0.5 * (v - Vec3::new(0.3, 0.0, -0.2)).norm_squared()).exp()
    };
    let zero = ConstantField(Vec3::zeros());
    let free = Tracer::new(dom, &zero);
    let (x, v, t) = (Vec3::new(0.2, 0.1, 0.0), Vec3::new(0.5, -0.3, 0.2), 0.6);
    let got = duhamel_evaluate(&free, &FnInflow::new(bump), &PhaseState::new(t, x, v))?;
    r.at_most("duhamel.free_shift", (got.value - bump(&(x - t * v), &v)).abs(), ctx.tol(1e-8));
    let damped = FnInflow::new(bump).with_nu(|_, _, _| 1.7);
    let got = duhamel_evaluate(&free, &damped, &PhaseState::new(t, x, v))?;
    let exact = (-1.7 * t).exp() * bump(&(x - t * v), &v);
    r.at_most("duhamel.constant_damping", (got.value - exact).abs(), ctx.tol(1e-8));
    let g = Vec3::new(0.0, 0.0, -1.0);
    let gravity = ConstantField(g);
    let fall = Tracer::new(dom, &gravity);
    let (x, v, t) = (Vec3::new(0.1, 0.0, 0.2), Vec3::new(0.1, 0.3, 0.0), 0.5);
    let src = FnInflow::new(bump).with_source(|_, _, _| 1.0);
    let got = duhamel_evaluate(&fall, &src, &PhaseState::new(t, x, v))?;
    let exact = bump(&(x - t * v + 0.5 * t * t * g), &(v - t * g)) + t;
    r.at_most("duhamel.unit_source", (got.value - exact).abs(), ctx.tol(1e-8));

    let pulse = GaussianPulse {
        x0: Vec3::new(0.1, 0.0, 0.0),
        v0: Vec3::new(1.2, 0.3, 0.0),
        sx: 0.3,
        sv: 0.5,
    };
    let grid = PhaseGrid {
        velocity: 8,
        surface_polar: 16,
        surface_azimuth: 32,
        ..PhaseGrid::default()
    };
    let study = greens_refinement_study(dom, &zero, &pulse, 2.0, 0.5, &grid, &ctx.cfg.sizes.green_levels)?;
    let mut table = Table::new("greens", &["cells", "spacing", "residual"]);
    for i in 0..study.cells.len() {
        table.push(vec![study.cells[i] as f64, study.spacing[i], study.residuals[i]]);
    }
    r.tables.push(table);
    r.fitted("greens.order", study.order);
    r.at_most("greens.order_minus_one", (study.order - 1.0).abs(), 0.25 * ctx.scale);
    r.require(
        study.residuals.windows(2).all(|w| w[1].abs() < w[0].abs()),
        "Green residual did not decrease monotonically",
    );

    let pulses = [
        GaussianPulse { x0: Vec3::zeros(), v0: Vec3::new(1.0, 0.0, 0.0), sx: 0.3, sv: 0.5 },
        GaussianPulse { x0: Vec3::new(0.0, 0.4, 0.0), v0: Vec3::new(0.0, 0.5, 0.5), sx: 0.2, sv: 0.7 },
        GaussianPulse { x0: Vec3::new(-0.3, 0.0, 0.2), v0: Vec3::new(0.0, 0.0, -1.5), sx: 0.25, sv: 0.4 },
    ];
    let mut family: Vec<&dyn PhaseFunction> = pulses.iter().map(|p| p as &dyn PhaseFunction).collect();
    family.push(&MaxwellianState);
    let tgrid = PhaseGrid {
        cells: 10,
        velocity: 8,
        time: 4,
        surface_polar: 12,
        surface_azimuth: 24,
        ..PhaseGrid::default()
    };
    let tb = trace_balance_check(dom, ctx.field.as_ref(), &family, ctx.e_sup(), 0.5, 0.2, &tgrid)?;
    r.fitted("trace.fitted_c", tb.fitted_c);
    for (i, q) in tb.rhs_ratios.iter().enumerate() {
        r.measured(&format!("trace.rhs_ratio_{i}"), *q);
    }
    r.require(tb.holds, "trace inequality failed at half epsilon");
    r.require(tb.scaling_ok, "right-hand side does not scale like epsilon^-3");
    Ok(())
}

fn picard(ctx: &Ctx<'_>, r: &mut CheckReport) -> Result<()> {
    let kernel = CollisionKernel::default();
    let cfg = &ctx.cfg.solver;
    let grid = &ctx.cfg.picard;
    let zero = ConstantField(Vec3::zeros());
    let free = Tracer::new(&ctx.domain, &zero).with_options(cfg.trace_options());
    let one = |_: &Vec3, _: &Vec3| 1.0;
    let eq = picard_iterate(cfg, grid, &free, &kernel, &one, 1)?;
    r.at_most("equilibrium_difference", eq.monitors[0].difference, ctx.tol(1e-6));
    let tracer = Tracer::new(&ctx.domain, ctx.field.as_ref()).with_options(cfg.trace_options());
    let eps = 0.1;
    let h0 = perturbed_initial(eps, ctx.domain.center(), 0.6 * ctx.domain.inradius());
    let run = picard_iterate(cfg, grid, &tracer, &kernel, &h0, ctx.cfg.sizes.picard_iterations)?;
    let mut table = Table::new("monitors", &["iteration", "weighted_sup", "ratio_to_initial", "difference", "grazing_fallbacks"]);
    for m in &run.monitors {
        table.push(vec![
            m.iteration as f64,
            m.weighted_sup,
            m.ratio_to_initial,
            m.difference,
            m.grazing_fallbacks as f64,
        ]);
    }
    r.tables.push(table);
    r.config("epsilon", eps);
    r.fitted("c1", run.fitted_c1);
    r.fitted("contraction", run.contraction);
    r.require(run.fitted_c1.is_finite(), "weighted sup is not finite");
    r.at_most("c1", run.fitted_c1, 2.0 * ctx.scale);
    r.at_most("contraction", run.contraction, 1.0 - 1e-12);
    Ok(())
}

fn vpb(ctx: &Ctx<'_>, r: &mut CheckReport) -> Result<()> {
    let vcfg = &ctx.cfg.vpb;
    // Manufactured radial solution on the unit ball.
    let manufactured = |n: usize| -> Result<f64> {
        let mesh = Arc::new(PoissonMesh::spherical(Vec3::zeros(), 1.0, n, n, 2 * n));
        let dr = 1.0 / n as f64;
        let src = sample_cells(&mesh, |x| {
            let r0 = x.norm() - 0.5 * dr;
            let r1 = r0 + dr;
            6.0 * (r1.powi(5) - r0.powi(5)) / (r1.powi(3) - r0.powi(3)) - 6.0
        });
        let pot = solve_neumann_poisson(&mesh, &src, &vcfg.poisson)?;
        let exact = sample_cells(&mesh, |x| {
            let r2 = x.norm_squared();
            r2 - 0.5 * r2 * r2
        });
        let shift = mesh.system.mean(&exact);
        Ok(exact.iter().zip(&pot.values).map(|(e, u)| (e - shift - u).abs()).fold(0.0, f64::max))
    };
    let [a, b] = ctx.cfg.sizes.poisson_levels;
    let (ea, eb) = (manufactured(a)?, manufactured(b)?);
    let order = (ea / eb).ln() / (b as f64 / a as f64).ln();
    r.measured("poisson.coarse_error", ea);
    r.measured("poisson.fine_error", eb);
    r.fitted("poisson.order", order);
    r.require(order >= 1.5 / ctx.scale, format!("manufactured order {order:.2} below 1.5"));

    let mesh = Arc::new(PoissonMesh::new(&ctx.domain, &vcfg.poisson)?);
    let bad = vec![0.1; mesh.len()];
    r.require(
        matches!(solve_neumann_poisson(&mesh, &bad, &vcfg.poisson), Err(Error::CompatibilityViolation { .. })),
        "solvability violation not detected",
    );

    let external: Arc<dyn ExternalPotential> = Arc::new(QuadraticPotential {
        center: ctx.domain.center(),
        strength: vcfg.external_strength,
    });
    let kernel = CollisionKernel::default();
    let solver = &ctx.cfg.solver;
    let run_eps = |eps: f64, steps: usize| {
        let cfg = crate::vpb::VpbConfig { steps, epsilon: eps, ..*vcfg };
        let h0 = perturbed_initial(eps, ctx.domain.center(), 0.6 * ctx.domain.inradius());
        vpb_iterate(solver, &cfg, &ctx.domain, &kernel, external.clone(), &h0)
    };
    let run = run_eps(vcfg.epsilon, vcfg.steps.max(2))?;
    let mut table = Table::new("steps", &["step", "grad_phi_sup", "mass_drift", "weighted_sup", "difference"]);
    for s in &run.reports {
        table.push(vec![s.step as f64, s.grad_phi_sup, s.mass_drift, s.picard.weighted_sup, s.picard.difference]);
    }
    r.tables.push(table);
    let ext = VpbField::external_only(external.clone());
    let mut fields: Vec<&dyn ForceField> = vec![&ext];
    fields.extend(run.fields.iter().map(|f| f as &dyn ForceField));
    let states = collar_states(&ctx.domain, 60, 0.5)?;
    let spread = alpha_spread(&ctx.domain, &fields, &states)?;
    let alpha_tol = if mesh.conforming() { 1e-8 } else { mesh.spacing() };
    r.at_most("alpha_spread_over_levels", spread, ctx.tol(alpha_tol));
    let sign_ext = check_sign_condition(&ctx.domain, &ext, 300, &[0.0]);
    let mut sign_gap: f64 = 0.0;
    for f in &run.fields {
        sign_gap = sign_gap.max((check_sign_condition(&ctx.domain, f, 300, &[0.0]).c_e_lower - sign_ext.c_e_lower).abs());
    }
    r.at_most("wall_sign_difference", sign_gap, ctx.tol(alpha_tol));

    let hessian = |eps: f64| -> Result<f64> {
        let run = run_eps(eps, 2)?;
        let pot = &run.fields.last().expect("two steps").levels()[0];
        Ok(potential_diagnostics(pot, vcfg.delta, None)?.hessian_sup)
    };
    let (h1, h2) = (hessian(vcfg.epsilon)?, hessian(2.0 * vcfg.epsilon)?);
    r.measured("hessian_proxy", h1);
    r.measured("hessian_proxy_doubled", h2);
    r.at_most("doubling_ratio_error", (h2 / h1 / 2.0 - 1.0).abs(), 0.2 * ctx.scale);
    let last = run.fields.last().expect("steps");
    let diag = potential_diagnostics(&last.levels()[last.levels().len() - 1], vcfg.delta, None)?;
    r.measured("holder_seminorm", diag.holder_seminorm);
    r.measured("grad_sup", diag.grad_sup);
    Ok(())
}

fn sign_condition(ctx: &Ctx<'_>, r: &mut CheckReport) -> Result<()> {
    let rep = check_sign_condition(&ctx.domain, ctx.field.as_ref(), 500, &[0.0, ctx.cfg.solver.horizon]);
    r.measured("c_e_lower", rep.c_e_lower);
    r.require(rep.passed, format!("E . n reaches {:.3e} at {:?}", rep.c_e_lower, rep.worst_point));
    Ok(())
}

type CheckFn = fn(&Ctx<'_>, &mut CheckReport) -> Result<()>;

const CHECKS: [(CheckFn, Option<u8>); 12] = [
    (liouville, Some(1)),
    (boundary_jacobian, Some(2)),
    (wall_jacobians, Some(3)),
    (collision, Some(4)),
    (wall_law, Some(5)),
    (velocity_lemma, Some(6)),
    (cycles, Some(7)),
    (singular_integrals, Some(8)),
    (transport, Some(9)),
    (picard, Some(10)),
    (vpb, Some(11)),
    (sign_condition, None),
];

/// Criterion number of a check name.
pub fn criterion_of(name: &str) -> Option<u8> {
    CHECK_NAMES.iter().position(|n| *n == name).and_then(|i| CHECKS[i].1)
}

/// Runs one named check.
pub fn run_check(cfg: &RunConfig, name: &str) -> Result<(CheckReport, f64)> {
    let idx = CHECK_NAMES
        .iter()
        .position(|n| *n == name)
        .ok_or_else(|| Error::invalid(format!("unknown check {name}")))?;
    let ctx = Ctx {
        cfg,
        domain: cfg.domain.build()?,
        field: cfg.field.build(),
        scale: cfg.tolerance_scale,
    };
    let (f, criterion) = CHECKS[idx];
    let mut report = CheckReport::new(name, criterion, cfg.seed);
    let start = Instant::now();
    if let Err(e) = f(&ctx, &mut report) {
        report.status = Status::Error;
        report.error = Some(e.to_string());
    }
    Ok((report, start.elapsed().as_secs_f64()))
}

/// Runs the selected checks (concurrently), in the fixed order of
/// `CHECK_NAMES`. A failing or erroring check never stops the others.
pub fn run_suite(cfg: &RunConfig) -> Result<(SuiteReport, Timings)> {
    cfg.validate()?;
    let start = Instant::now();
    let selected: Vec<&str> = CHECK_NAMES
        .iter()
        .copied()
        .filter(|n| cfg.checks.iter().any(|c| c == n))
        .collect();
    let results: Vec<(CheckReport, f64)> = selected
        .par_iter()
        .map(|name| run_check(cfg, name))
        .collect::<Result<_>>()?;
    let mut timings = Timings::default();
    let mut checks = Vec::new();
    for (rep, secs) in results {
        timings.checks.insert(rep.name.clone(), secs);
        checks.push(rep);
    }
    timings.total = start.elapsed().as_secs_f64();
    let passed = checks.iter().all(CheckReport::passed);
    Ok((
        SuiteReport {
            config: cfg.clone(),
            checks,
            passed,
        },
        timings,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FieldKind;

    #[test]
    fn empty_selection_passes() {
        let cfg = RunConfig {
            checks: Vec::new(),
            ..RunConfig::default()
        };
        let (rep, _) = run_suite(&cfg).unwrap();
        assert!(rep.checks.is_empty());
        assert_eq!(rep.exit_code(), 0);
    }

    #[test]
    fn zero_field_fails_sign_condition() {
        let mut cfg = RunConfig {
            checks: vec!["sign-condition".into()],
            ..RunConfig::default()
        };
        cfg.field.kind = FieldKind::Zero;
        let (rep, _) = run_suite(&cfg).unwrap();
        assert_eq!(rep.exit_code(), 1);
        assert_eq!(rep.checks[0].status, Status::Fail);
        assert_eq!(rep.checks[0].name, "sign-condition");
    }

    #[test]
    fn reports_are_reproducible() {
        let cfg = RunConfig {
            checks: vec!["wall-law".into(), "sign-condition".into()],
            sizes: crate::config::SuiteSizes {
                ks_samples: 2000,
                ..Default::default()
            },
            ..RunConfig::default()
        };
        let a = serde_json::to_string(&run_suite(&cfg).unwrap().0).unwrap();
        let b = serde_json::to_string(&run_suite(&cfg).unwrap().0).unwrap();
        assert_eq!(a, b);
    }
}
