//! Diffuse reflection: the wall law, its sampler, stochastic diffuse cycles
//! and the cycle-gap and tail diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::characteristics::{ExitRecord, PhaseState, Tracer};
use crate::collision::{maxwellian, VelocityFunction};
use crate::error::{Error, Result};
use crate::geometry::{Frame, LevelSetDomain};
use crate::quad::{composite_legendre, normal_hermite, pairwise_sum, rayleigh};
use crate::Vec3;

/// `c_mu` with `c_mu int_{n.u>0} mu(u) (n.u) du = 1`.
pub fn cmu_constant() -> f64 {
    (2.0 * std::f64::consts::PI).sqrt()
}

/// Product Gauss–Legendre rule on the half space `{n . u > 0}`, truncated at `v_max`.
#[derive(Clone, Debug)]
pub struct HalfSpaceRule {
    /// `(u_n, u_1, u_2, weight)` in frame coordinates.
    nodes: Vec<(f64, f64, f64, f64)>,
}

impl HalfSpaceRule {
    pub fn new(order: usize, v_max: f64) -> Self {
        let panels = v_max.ceil() as usize;
        let normal = composite_legendre(order, panels, 0.0, v_max);
        let tang = composite_legendre(order, 2 * panels, -v_max, v_max);
        let mut nodes = Vec::with_capacity(normal.len() * tang.len() * tang.len());
        for &(a, wa) in &normal {
            for &(b, wb) in &tang {
                for &(c, wc) in &tang {
                    nodes.push((a, b, c, wa * wb * wc));
                }
            }
        }
        HalfSpaceRule { nodes }
    }

    /// `int_{n.u>0} f(u) (n.u) du`; `sign = -1` integrates over the incoming
    /// half `{n.u<0}` against `|n.u|` instead.
    pub fn flux(&self, frame: &Frame, sign: f64, f: impl Fn(&Vec3) -> f64) -> f64 {
        let terms: Vec<f64> = self
            .nodes
            .iter()
            .map(|&(a, b, c, w)| {
                let u = frame.compose(&Vec3::new(sign * a, b, c));
                w * a * f(&u)
            })
            .collect();
        pairwise_sum(&terms)
    }
}

impl Default for HalfSpaceRule {
    fn default() -> Self {
        HalfSpaceRule::new(8, 8.0)
    }
}

/// The wall law at one boundary point.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct WallSampler {
    pub point: Vec3,
    pub frame: Frame,
    pub c_mu: f64,
}

/// Incoming trace `c_mu mu(v) * flux` produced by the wall.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DiffuseTrace {
    pub c_mu: f64,
    pub outgoing_flux: f64,
}

impl DiffuseTrace {
    pub fn eval(&self, v: &Vec3) -> f64 {
        self.c_mu * maxwellian(v) * self.outgoing_flux
    }
}

impl WallSampler {
    pub fn new(domain: &LevelSetDomain, point: &Vec3) -> Result<Self> {
        Ok(WallSampler {
            point: *point,
            frame: domain.tangent_frame(point)?,
            c_mu: cmu_constant(),
        })
    }

    pub fn normal(&self) -> Vec3 {
        self.frame.normal
    }

    /// Density `c_mu mu(v) (n . v)` of the outgoing law.
    pub fn density(&self, v: &Vec3) -> f64 {
        let vn = self.frame.normal.dot(v);
        if vn <= 0.0 {
            0.0
        } else {
            self.c_mu * maxwellian(v) * vn
        }
    }

    /// Exact draw: Rayleigh normal speed by inversion, Gaussian tangential part.
    pub fn sample_outgoing<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let u: f64 = rng.random();
        let vn = (-2.0 * (1.0 - u).ln()).sqrt();
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        self.frame.compose(&Vec3::new(vn, a, b))
    }

    pub fn diffuse_trace(&self, rule: &HalfSpaceRule, f_out: &dyn VelocityFunction) -> DiffuseTrace {
        DiffuseTrace {
            c_mu: self.c_mu,
            outgoing_flux: rule.flux(&self.frame, 1.0, |u| f_out.eval(u)),
        }
    }
}

/// Product rule for the wall law `c_mu mu(u) (n . u)` in frame coordinates
/// `(u_n, u_1, u_2)`; weights sum to one.
pub fn wall_law_rule(normal: usize, tangential: usize) -> Vec<(Vec3, f64)> {
    let rn = rayleigh(normal);
    let gt = normal_hermite(tangential);
    let mut out = Vec::with_capacity(rn.len() * gt.len() * gt.len());
    for &(a, wa) in &rn {
        for &(b, wb) in &gt {
            for &(c, wc) in &gt {
                out.push((Vec3::new(a, b, c), wa * wb * wc));
            }
        }
    }
    out
}

/// Rayleigh CDF `1 - exp(-x^2 / 2)`.
pub fn rayleigh_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        -(-0.5 * x * x).exp_m1()
    }
}

/// Kolmogorov–Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// One wall event of a diffuse cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DiffuseCycleNode {
    pub index: usize,
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
    /// Velocity with which the previous flight reached `x`.
    pub v_b_prev: Vec3,
    /// `t^{l-1} - t^l`.
    pub gap: f64,
    /// Duration of the backward flight leaving this node, if computed.
    pub next_gap: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiffuseCycle {
    pub start: PhaseState,
    pub nodes: Vec<DiffuseCycleNode>,
    /// Time of the first wall event that fell below zero, if reached.
    pub final_time: Option<f64>,
    pub truncated: bool,
    pub grazing: bool,
}

impl DiffuseCycle {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

enum Flight {
    Exit(ExitRecord),
    Grazing,
}

fn backward_flight(tracer: &Tracer<'_>, st: &PhaseState) -> Result<Flight> {
    match tracer.backward_exit(st) {
        Ok(r) if r.grazing => Ok(Flight::Grazing),
        Ok(r) => Ok(Flight::Exit(r)),
        Err(Error::GrazingAmbiguous { .. }) => Ok(Flight::Grazing),
        Err(e) => Err(e),
    }
}

/// Generates the cycle backward from `start`, drawing each wall velocity
/// with `draw(sampler, rng)`; stops once a wall time is negative or after
/// `l_max` wall events.
pub fn run_cycles_with<R, D>(
    tracer: &Tracer<'_>,
    start: &PhaseState,
    l_max: usize,
    rng: &mut R,
    mut draw: D,
) -> Result<DiffuseCycle>
where
    R: Rng + ?Sized,
    D: FnMut(&WallSampler, &mut R) -> Vec3,
{
    let mut cycle = DiffuseCycle {
        start: *start,
        nodes: Vec::new(),
        final_time: None,
        truncated: false,
        grazing: false,
    };
    let mut cur = *start;
    for l in 1..=l_max {
        let rec = match backward_flight(tracer, &cur)? {
            Flight::Exit(r) => r,
            Flight::Grazing => {
                cycle.grazing = true;
                return Ok(cycle);
            }
        };
        if let Some(prev) = cycle.nodes.last_mut() {
            prev.next_gap = Some(rec.exit_time);
        }
        let t_next = cur.t - rec.exit_time;
        if t_next < 0.0 {
            cycle.final_time = Some(t_next);
            return Ok(cycle);
        }
        let sampler = WallSampler::new(tracer.domain, &rec.exit_point)?;
        let v = draw(&sampler, rng);
        cycle.nodes.push(DiffuseCycleNode {
            index: l,
            t: t_next,
            x: rec.exit_point,
            v,
            v_b_prev: rec.exit_velocity,
            gap: rec.exit_time,
            next_gap: None,
        });
        cur = PhaseState::new(t_next, rec.exit_point, v);
    }
    cycle.truncated = true;
    Ok(cycle)
}

/// Diffuse cycle with wall velocities drawn from the wall law.
pub fn run_diffuse_cycles<R: Rng + ?Sized>(
    tracer: &Tracer<'_>,
    start: &PhaseState,
    l_max: usize,
    rng: &mut R,
) -> Result<DiffuseCycle> {
    run_cycles_with(tracer, start, l_max, rng, |s, r| s.sample_outgoing(r))
}

/// Per-trial RNG: the master seed with the trial index as stream.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Largest `|x - y|^2 / |(x - y) . n(x)|` over boundary pairs.
pub fn fit_chord_constant(domain: &LevelSetDomain, n_points: usize) -> f64 {
    let pts = domain.boundary_samples(n_points);
    let normals: Vec<Vec3> = pts.iter().map(|p| domain.outward_normal(p).unwrap_or_default()).collect();
    let mut c: f64 = 0.0;
    for (i, x) in pts.iter().enumerate() {
        for y in &pts {
            let d = x - y;
            let dn = d.dot(&normals[i]).abs();
            if d.norm() > 1e-6 && dn > 1e-12 {
                c = c.max(d.norm_squared() / dn);
            }
        }
    }
    c
}

#[derive(Clone, Debug, Serialize)]
pub struct GapCheck {
    pub bound: f64,
    pub checked: usize,
    pub exempt: usize,
    pub violations: usize,
    pub min_ratio: f64,
    pub pass: bool,
}

/// Flights leaving wall events with `n . v >= delta`, `|v| <= 1/delta` must
/// last at least `delta^3 / (C_omega (1 + delta^2 |E|^2))`.
pub fn cycle_gap_bound_check(
    domain: &LevelSetDomain,
    cycles: &[DiffuseCycle],
    delta: f64,
    c_omega: f64,
    e_sup: f64,
) -> GapCheck {
    let bound = delta.powi(3) / (c_omega * (1.0 + delta * delta * e_sup * e_sup));
    let mut out = GapCheck {
        bound,
        checked: 0,
        exempt: 0,
        violations: 0,
        min_ratio: f64::INFINITY,
        pass: true,
    };
    for cyc in cycles {
        for node in &cyc.nodes {
            let Some(gap) = node.next_gap else { continue };
            let n = domain.outward_normal(&node.x).unwrap_or_default();
            if n.dot(&node.v) < delta || node.v.norm() > 1.0 / delta {
                out.exempt += 1;
                continue;
            }
            out.checked += 1;
            out.min_ratio = out.min_ratio.min(gap / bound);
            if gap < bound {
                out.violations += 1;
            }
        }
    }
    out.pass = out.violations == 0;
    out
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TailLevel {
    pub l: usize,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TailEstimate {
    pub levels: Vec<TailLevel>,
    pub trials: usize,
    /// Level with the largest estimate.
    pub peak: usize,
    /// Geometric ratio fitted to `log(mean)` beyond the peak.
    pub ratio: f64,
}

fn bracket(v: &Vec3) -> f64 {
    (1.0 + v.norm_squared()).sqrt()
}

/// Proposal: `|N(0, 4 I)|` folded onto `{n . v > 0}`, matching the
/// `mu^{1/4}` tails of the weights.
fn draw_tempered<R: Rng + ?Sized>(s: &WallSampler, rng: &mut R) -> Vec3 {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    let c: f64 = rng.sample(StandardNormal);
    s.frame.compose(&Vec3::new(2.0 * a.abs(), 2.0 * b, 2.0 * c))
}

fn tempered_density(v: &Vec3) -> f64 {
    2.0 * (8.0 * std::f64::consts::PI).powf(-1.5) * (-v.norm_squared() / 8.0).exp()
}

/// Weighted measure of `{t^l > 0}` under the trajectory-expansion weights,
/// for `l = 1..=l_max`, by importance sampling.
pub fn tail_probability_estimate(
    tracer: &Tracer<'_>,
    start: &PhaseState,
    l_max: usize,
    n_trials: usize,
    seed: u64,
    varpi: f64,
) -> Result<TailEstimate> {
    let quarter = |v: &Vec3| maxwellian(v).powf(0.25);
    let per_trial: Vec<Result<Vec<f64>>> = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, trial as u64);
            let cyc = run_cycles_with(tracer, start, l_max, &mut rng, draw_tempered)?;
            let mut vals = vec![0.0; l_max];
            // l = 1: indicator of t^1 > 0.
            let mut w = 1.0;
            for (k, node) in cyc.nodes.iter().enumerate() {
                let l = k + 1;
                vals[l - 1] = w;
                // Extend to level l + 1: factor for v^l, and the incoming
                // factor for v_b^{l-1} when l >= 2.
                let v = node.v;
                w *= quarter(&v) * bracket(&v) * (varpi * bracket(&v) * node.t).exp() / tempered_density(&v);
                if l >= 2 {
                    let vb = node.v_b_prev;
                    w *= maxwellian(&vb).sqrt() * bracket(&vb);
                }
            }
            Ok(vals)
        })
        .collect();
    let mut rows = Vec::with_capacity(n_trials);
    for r in per_trial {
        rows.push(r?);
    }
    let mut levels = Vec::with_capacity(l_max);
    for l in 1..=l_max {
        let xs: Vec<f64> = rows.iter().map(|r| r[l - 1]).collect();
        let n = xs.len() as f64;
        let mean = pairwise_sum(&xs) / n;
        let sq: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
        let var = pairwise_sum(&sq) / (n - 1.0).max(1.0);
        levels.push(TailLevel {
            l,
            mean,
            std_error: (var / n).sqrt(),
        });
    }
    let peak = levels
        .iter()
        .max_by(|a, b| a.mean.total_cmp(&b.mean))
        .map(|t| t.l)
        .unwrap_or(1);
    let ratio = fit_geometric_ratio(&levels, peak);
    Ok(TailEstimate {
        levels,
        trials: n_trials,
        peak,
        ratio,
    })
}

/// Least-squares slope of `log(mean)` over levels `>= from` with positive
/// estimates, returned as a ratio.
pub fn fit_geometric_ratio(levels: &[TailLevel], from: usize) -> f64 {
    let pts: Vec<(f64, f64)> = levels
        .iter()
        .filter(|t| t.l >= from && t.mean > 0.0)
        .map(|t| (t.l as f64, t.mean.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxy / sxx).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::RadialField;
    use approx::assert_relative_eq;

    #[test]
    fn cmu_matches_quadrature() {
        let d = LevelSetDomain::unit_ball();
        let rule = HalfSpaceRule::default();
        for p in d.boundary_samples(10) {
            let s = WallSampler::new(&d, &p).unwrap();
            let flux = rule.flux(&s.frame, 1.0, maxwellian);
            assert!((flux * cmu_constant() - 1.0).abs() < 1e-8);
        }
        assert_relative_eq!(cmu_constant(), 2.5066282746310002, epsilon = 1e-15);
    }

    #[test]
    fn wall_law_fixed_point_and_balance() {
        let d = LevelSetDomain::unit_ball();
        let s = WallSampler::new(&d, &Vec3::new(0.0, 0.6, 0.8)).unwrap();
        let rule = HalfSpaceRule::default();
        let mu = |v: &Vec3| maxwellian(v);
        let tr = s.diffuse_trace(&rule, &mu);
        for v in [Vec3::new(0.1, -0.5, -1.0), Vec3::new(2.0, 0.0, -0.3)] {
            assert!((tr.eval(&v) - maxwellian(&v)).abs() < 1e-10 * maxwellian(&v));
        }
        let f = |v: &Vec3| (1.0 + v[0]) * maxwellian(&(v - Vec3::new(0.2, 0.0, 0.1)));
        let tr = s.diffuse_trace(&rule, &f);
        let incoming = rule.flux(&s.frame, -1.0, |v| tr.eval(v));
        assert!((incoming - tr.outgoing_flux).abs() < 1e-8);
        let zero = |_: &Vec3| 0.0;
        assert_eq!(s.diffuse_trace(&rule, &zero).outgoing_flux, 0.0);
    }

    #[test]
    fn sampler_moments_and_ks() {
        let d = LevelSetDomain::unit_ball();
        let s = WallSampler::new(&d, &Vec3::x()).unwrap();
        let mut rng = trial_rng(7, 0);
        let n = 200_000;
        let draws: Vec<Vec3> = (0..n).map(|_| s.sample_outgoing(&mut rng)).collect();
        let vn: Vec<f64> = draws.iter().map(|v| v.dot(&s.normal())).collect();
        assert!(vn.iter().all(|&x| x > 0.0));
        let mean = vn.iter().sum::<f64>() / n as f64;
        let sd = (2.0 - std::f64::consts::PI / 2.0).sqrt() / (n as f64).sqrt();
        assert!((mean - (std::f64::consts::PI / 2.0).sqrt()).abs() < 3.0 * sd);
        let tm = draws.iter().map(|v| v.dot(&s.frame.tau1)).sum::<f64>() / n as f64;
        assert!(tm.abs() < 3.0 / (n as f64).sqrt());
        assert!(ks_statistic(&vn, rayleigh_cdf) < ks_critical_1pct(n));
    }

    #[test]
    fn wall_law_rule_matches_flux_rule() {
        let d = LevelSetDomain::unit_ball();
        let s = WallSampler::new(&d, &Vec3::new(0.6, 0.0, 0.8)).unwrap();
        let f = |v: &Vec3| (1.0 + 0.3 * v[0] - 0.1 * v[2] * v[2]) * (-0.2 * v.norm_squared()).exp();
        let exact = cmu_constant() * HalfSpaceRule::default().flux(&s.frame, 1.0, |u| maxwellian(u) * f(u));
        let ours: f64 = wall_law_rule(16, 12).iter().map(|(c, w)| w * f(&s.frame.compose(c))).sum();
        assert!((ours - exact).abs() < 1e-6, "{ours} {exact}");
    }

    #[test]
    fn chord_constant_of_sphere() {
        let d = LevelSetDomain::unit_ball();
        assert_relative_eq!(fit_chord_constant(&d, 300), 2.0, max_relative = 1e-9);
    }

    #[test]
    fn cycles_are_seeded_and_decreasing() {
        let d = LevelSetDomain::unit_ball();
        let f = RadialField { strength: 1.0 };
        let tr = Tracer::new(&d, &f);
        let st = PhaseState::new(1.0, Vec3::new(0.2, 0.0, 0.1), Vec3::new(0.5, 0.2, -0.1));
        let a = run_diffuse_cycles(&tr, &st, 50, &mut trial_rng(3, 11)).unwrap();
        let b = run_diffuse_cycles(&tr, &st, 50, &mut trial_rng(3, 11)).unwrap();
        assert_eq!(a.nodes, b.nodes);
        let mut prev = st.t;
        for n in &a.nodes {
            assert!(n.t < prev && n.gap > 0.0);
            assert!(d.value(&n.x).abs() < 1e-10);
            assert!(d.outward_normal(&n.x).unwrap().dot(&n.v) > 0.0);
            prev = n.t;
        }
        let short = PhaseState::new(0.1, Vec3::zeros(), Vec3::x());
        let c = run_diffuse_cycles(&tr, &short, 50, &mut trial_rng(3, 0)).unwrap();
        assert!(c.is_empty() && c.final_time.unwrap() < 0.0);
    }

    #[test]
    fn gap_bound_on_sampled_cycles() {
        let d = LevelSetDomain::unit_ball();
        let f = RadialField { strength: 1.0 };
        let tr = Tracer::new(&d, &f);
        let st = PhaseState::new(1.0, Vec3::zeros(), Vec3::new(2.0, 0.5, 0.0));
        let cycles: Vec<DiffuseCycle> = (0..100)
            .map(|i| run_diffuse_cycles(&tr, &st, 100, &mut trial_rng(5, i)).unwrap())
            .collect();
        let g = cycle_gap_bound_check(&d, &cycles, 0.1, 2.0, 1.0);
        assert!(g.pass && g.checked > 0 && g.exempt > 0, "{g:?}");
    }
}
