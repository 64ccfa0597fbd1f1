//! Linear in-flow problem `{d_t + v . grad_x + E . grad_v + nu} f = H`:
//! Duhamel evaluation along characteristics, the stochastic diffuse-cycle
//! evaluator and the normal derivative on the incoming boundary.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{PhaseState, Stop, TraceOptions, Tracer};
use crate::collision::sqrt_maxwellian;
use crate::error::{Error, Result};
use crate::geometry::BOUNDARY_TOL;
use crate::quad::pairwise_sum;
use crate::wall::{trial_rng, WallSampler};
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Time horizon `T`.
    pub horizon: f64,
    /// Largest characteristic time step.
    pub time_step: f64,
    pub v_max: f64,
    pub theta: f64,
    pub varpi: f64,
    /// Exponent for the `L^p` balances.
    pub p: f64,
    /// Wall events per diffuse cycle before truncation.
    pub l_max: usize,
    /// Monte Carlo samples per pointwise evaluation.
    pub samples: usize,
    /// Admissible truncation error of a stochastic evaluation.
    pub cycle_tolerance: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            horizon: 0.1,
            time_step: 0.005,
            v_max: 8.0,
            theta: 0.2,
            varpi: 1.0,
            p: 2.0,
            l_max: 8,
            samples: 4000,
            cycle_tolerance: 1e-3,
            seed: 0,
        }
    }
}

fn schema(key: &str, message: String) -> Error {
    Error::Schema {
        key: key.to_string(),
        message,
    }
}

impl SolverConfig {
    /// `theta' = theta - T`.
    pub fn theta_prime(&self) -> f64 {
        self.theta - self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 0.25) {
            return Err(schema("theta", format!("{} is outside the window 0 < theta < 1/4", self.theta)));
        }
        if !(self.horizon > 0.0 && self.horizon < 1.0) {
            return Err(schema("horizon", format!("{} is outside 0 < T < 1", self.horizon)));
        }
        if self.theta_prime() <= 0.0 {
            return Err(schema(
                "horizon",
                format!("theta - T = {:.3} must be positive", self.theta_prime()),
            ));
        }
        if !(self.time_step > 0.0) {
            return Err(schema("time_step", "must be positive".into()));
        }
        if !(self.p >= 1.0) {
            return Err(schema("p", format!("{} is below 1", self.p)));
        }
        if !(self.v_max > 0.0) {
            return Err(schema("v_max", "must be positive".into()));
        }
        if self.l_max == 0 || self.samples == 0 {
            return Err(schema("l_max", "cycle depth and sample count must be positive".into()));
        }
        Ok(())
    }

    /// Tail mass dropped by the velocity cutoff, `e^{-theta' v_max^2}`.
    pub fn cutoff_bound(&self) -> f64 {
        (-self.theta_prime() * self.v_max * self.v_max).exp()
    }

    pub fn trace_options(&self) -> TraceOptions {
        TraceOptions {
            max_dt: self.time_step,
            ..TraceOptions::default()
        }
    }
}

/// Coefficients and data of an in-flow problem.
pub trait InflowData: Sync {
    fn nu(&self, _t: f64, _x: &Vec3, _v: &Vec3) -> f64 {
        0.0
    }
    fn source(&self, _t: f64, _x: &Vec3, _v: &Vec3) -> f64 {
        0.0
    }
    fn initial(&self, x: &Vec3, v: &Vec3) -> f64;
    /// Incoming boundary datum `g` on `gamma_-`.
    fn boundary(&self, t: f64, x: &Vec3, v: &Vec3) -> f64;
}

type Coef = Box<dyn Fn(f64, &Vec3, &Vec3) -> f64 + Send + Sync>;
type Datum = Box<dyn Fn(&Vec3, &Vec3) -> f64 + Send + Sync>;

/// [`InflowData`] assembled from closures; unset coefficients are zero.
pub struct FnInflow {
    nu: Option<Coef>,
    source: Option<Coef>,
    initial: Datum,
    boundary: Option<Coef>,
}

impl FnInflow {
    pub fn new(initial: impl Fn(&Vec3, &Vec3) -> f64 + Send + Sync + 'static) -> Self {
        FnInflow {
            nu: None,
            source: None,
            initial: Box::new(initial),
            boundary: None,
        }
    }

    pub fn with_nu(mut self, f: impl Fn(f64, &Vec3, &Vec3) -> f64 + Send + Sync + 'static) -> Self {
        self.nu = Some(Box::new(f));
        self
    }

    pub fn with_source(mut self, f: impl Fn(f64, &Vec3, &Vec3) -> f64 + Send + Sync + 'static) -> Self {
        self.source = Some(Box::new(f));
        self
    }

    pub fn with_boundary(mut self, f: impl Fn(f64, &Vec3, &Vec3) -> f64 + Send + Sync + 'static) -> Self {
        self.boundary = Some(Box::new(f));
        self
    }
}

impl InflowData for FnInflow {
    fn nu(&self, t: f64, x: &Vec3, v: &Vec3) -> f64 {
        self.nu.as_ref().map_or(0.0, |f| f(t, x, v))
    }
    fn source(&self, t: f64, x: &Vec3, v: &Vec3) -> f64 {
        self.source.as_ref().map_or(0.0, |f| f(t, x, v))
    }
    fn initial(&self, x: &Vec3, v: &Vec3) -> f64 {
        (self.initial)(x, v)
    }
    fn boundary(&self, t: f64, x: &Vec3, v: &Vec3) -> f64 {
        self.boundary.as_ref().map_or(0.0, |f| f(t, x, v))
    }
}

/// Where the backward characteristic ends.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Foot {
    Initial { x: Vec3, v: Vec3 },
    Wall { t: f64, x: Vec3, v: Vec3 },
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DuhamelValue {
    pub value: f64,
    /// `int nu` along the path.
    pub damping: f64,
    /// Damped source contribution.
    pub source: f64,
    pub foot: Foot,
}

/// Backward characteristic from `state` with `int nu` and the damped
/// source accumulated; the datum at the foot is left to the caller.
pub fn backward_path<N, H>(tracer: &Tracer<'_>, state: &PhaseState, nu: N, source: H) -> Result<(f64, f64, Foot)>
where
    N: Fn(f64, &Vec3, &Vec3, &Vec3) -> f64,
    H: Fn(f64, &Vec3, &Vec3) -> f64,
{
    // Backward integration uses a negative step, so both accumulators
    // collect minus the integrals.
    let aux = |s: f64, x: &Vec3, v: &Vec3, e: &Vec3, a: &[f64; 2]| [nu(s, x, v, e), a[0].exp() * source(s, x, v)];
    let stop = tracer.integrate(state, [0.0, 0.0], -1.0, state.t.max(0.0), &aux, &mut |_, _, _| {})?;
    match stop {
        Stop::Reached { y, .. } => Ok((-y.a[0], -y.a[1], Foot::Initial { x: y.x, v: y.v })),
        Stop::Exited { t, y, record } => {
            if record.grazing {
                return Err(Error::GrazingAmbiguous { xi: 0.0 });
            }
            Ok((
                -y.a[0],
                -y.a[1],
                Foot::Wall {
                    t,
                    x: record.exit_point,
                    v: record.exit_velocity,
                },
            ))
        }
    }
}

/// `f(t, x, v)` from the initial datum, the incoming boundary datum and the
/// damped source, all integrated along the computed characteristic.
pub fn duhamel_evaluate(tracer: &Tracer<'_>, data: &dyn InflowData, state: &PhaseState) -> Result<DuhamelValue> {
    let (damping, source, foot) = backward_path(
        tracer,
        state,
        |s, x, v, _| data.nu(s, x, v),
        |s, x, v| data.source(s, x, v),
    )?;
    let datum = match foot {
        Foot::Initial { x, v } => data.initial(&x, &v),
        Foot::Wall { t, x, v } => data.boundary(t, &x, &v),
    };
    Ok(DuhamelValue {
        value: (-damping).exp() * datum + source,
        damping,
        source,
        foot,
    })
}

/// Monte Carlo value with its standard error and truncation accounting.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
    /// Samples whose cycle reached `l_max` wall events.
    pub truncated: usize,
    /// Bound on the bias from the truncated samples.
    pub truncation_error: f64,
}

/// Pointwise solution with diffuse reflection: each wall event draws the
/// reflected velocity from the wall law and carries the importance ratio
/// `sqrt(mu)(v_b) / sqrt(mu)(u)`. `data.boundary` is not used.
pub fn diffuse_evaluate(
    tracer: &Tracer<'_>,
    data: &dyn InflowData,
    state: &PhaseState,
    config: &SolverConfig,
) -> Result<McEstimate> {
    struct Draw {
        value: f64,
        open_weight: f64,
    }
    let draws: Vec<Draw> = (0..config.samples)
        .into_par_iter()
        .map(|k| -> Result<Draw> {
            let mut rng = trial_rng(config.seed, k as u64);
            let mut cur = *state;
            let mut acc = 1.0;
            let mut value = 0.0;
            for _ in 0..config.l_max {
                let (damping, source, foot) = backward_path(
                    tracer,
                    &cur,
                    |s, x, v, _| data.nu(s, x, v),
                    |s, x, v| data.source(s, x, v),
                )?;
                value += acc * source;
                acc *= (-damping).exp();
                match foot {
                    Foot::Initial { x, v } => {
                        return Ok(Draw {
                            value: value + acc * data.initial(&x, &v),
                            open_weight: 0.0,
                        })
                    }
                    Foot::Wall { t, x, v } => {
                        let sampler = WallSampler::new(tracer.domain, &x)?;
                        let u = sampler.sample_outgoing(&mut rng);
                        acc *= sqrt_maxwellian(&v) / sqrt_maxwellian(&u);
                        cur = PhaseState::new(t, x, u);
                    }
                }
            }
            Ok(Draw {
                value,
                open_weight: acc.abs(),
            })
        })
        .collect::<Result<_>>()?;
    let n = draws.len() as f64;
    let values: Vec<f64> = draws.iter().map(|d| d.value).collect();
    let mean = pairwise_sum(&values) / n;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    let var = if draws.len() > 1 { pairwise_sum(&sq) / (n - 1.0) } else { 0.0 };
    let truncated = draws.iter().filter(|d| d.open_weight > 0.0).count();
    // An open cycle still owes `weight * f(foot)`; bound `|f|` by the
    // largest completed value, or unbounded when nothing completed.
    let scale = if truncated == draws.len() {
        f64::INFINITY
    } else {
        draws
            .iter()
            .filter(|d| d.open_weight == 0.0)
            .map(|d| d.value.abs())
            .fold(0.0, f64::max)
    };
    let open: Vec<f64> = draws.iter().map(|d| d.open_weight).collect();
    let truncation_error = pairwise_sum(&open) / n * scale;
    if truncation_error > config.cycle_tolerance {
        return Err(Error::CycleBudgetExceeded {
            estimate: truncation_error,
            tolerance: config.cycle_tolerance,
        });
    }
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
        samples: draws.len(),
        truncated,
        truncation_error,
    })
}

/// `grad_x f` on `gamma_-` from the equation and the boundary datum.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BoundaryDerivative {
    pub gradient: Vec3,
    pub normal_derivative: f64,
    pub normal_velocity: f64,
    /// One-sided difference of the solved `f` along `-n`, when requested.
    pub finite_difference: Option<f64>,
}

/// Normal derivative of the solution on the incoming boundary. Tangential,
/// time and velocity derivatives of `g` use central differences with step
/// `h`; `fd_step` enables the one-sided check along `-n`.
pub fn boundary_normal_derivative(
    tracer: &Tracer<'_>,
    data: &dyn InflowData,
    state: &PhaseState,
    h: f64,
    fd_step: Option<f64>,
) -> Result<BoundaryDerivative> {
    let (t, x, v) = (state.t, state.x, state.v);
    if tracer.domain.value(&x).abs() > BOUNDARY_TOL {
        return Err(Error::invalid("state is not on the boundary"));
    }
    let chart = tracer.domain.boundary_chart(&x)?;
    let frame = chart.frame;
    let n = frame.normal;
    let vn = n.dot(&v);
    if vn.abs() <= tracer.grazing_tol(&v) {
        return Err(Error::GrazingSingularity { normal_velocity: vn });
    }
    if vn > 0.0 {
        return Err(Error::invalid("velocity is outgoing; the formula holds on gamma_-"));
    }
    let g = |t: f64, x: &Vec3, v: &Vec3| data.boundary(t, x, v);
    let g0 = g(t, &x, &v);
    let d_tau = |a: f64, b: f64| -> Result<f64> {
        let p = chart.point(a * h, b * h)?;
        let m = chart.point(-a * h, -b * h)?;
        Ok((g(t, &p, &v) - g(t, &m, &v)) / (2.0 * h))
    };
    let d1 = d_tau(1.0, 0.0)?;
    let d2 = d_tau(0.0, 1.0)?;
    let d_t = (g(t + h, &x, &v) - g(t - h, &x, &v)) / (2.0 * h);
    let e = tracer.field.field(t, &x);
    let e_grad_v = (g(t, &x, &(v + h * e)) - g(t, &x, &(v - h * e))) / (2.0 * h);
    let bracket = d_t + v.dot(&frame.tau1) * d1 + v.dot(&frame.tau2) * d2 + e_grad_v + data.nu(t, &x, &v) * g0
        - data.source(t, &x, &v);
    let normal_derivative = -bracket / vn;
    let gradient = d1 * frame.tau1 + d2 * frame.tau2 + normal_derivative * n;
    let finite_difference = match fd_step {
        Some(s) => {
            let f1 = duhamel_evaluate(tracer, data, &PhaseState::new(t, x - s * n, v))?.value;
            let f2 = duhamel_evaluate(tracer, data, &PhaseState::new(t, x - 2.0 * s * n, v))?.value;
            Some((3.0 * g0 - 4.0 * f1 + f2) / (2.0 * s))
        }
        None => None,
    };
    Ok(BoundaryDerivative {
        gradient,
        normal_derivative,
        normal_velocity: vn,
        finite_difference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, RadialField};
    use crate::geometry::LevelSetDomain;

    fn bump(x: &Vec3, v: &Vec3) -> f64 {
        (-(x - Vec3::new(0.1, -0.2, 0.05)).norm_squared() - 0.5 * (v - Vec3::new(0.3, 0.0, -0.2)).norm_squared()).exp()
    }

    #[test]
    fn config_window() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            theta: 0.3,
            ..SolverConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Schema { ref key, .. }) if key == "theta"));
        let late = SolverConfig {
            horizon: 0.25,
            ..SolverConfig::default()
        };
        assert!(late.validate().is_err());
    }

    #[test]
    fn free_transport_is_a_shift() {
        let dom = LevelSetDomain::unit_ball();
        let field = ConstantField(Vec3::zeros());
        let tracer = Tracer::new(&dom, &field);
        let data = FnInflow::new(bump);
        let (x, v) = (Vec3::new(0.2, 0.1, 0.0), Vec3::new(0.5, -0.3, 0.2));
        let t = 0.6;
        let got = duhamel_evaluate(&tracer, &data, &PhaseState::new(t, x, v)).unwrap();
        assert!(matches!(got.foot, Foot::Initial { .. }));
        assert!((got.value - bump(&(x - t * v), &v)).abs() < 1e-8);
    }

    #[test]
    fn constant_damping() {
        let dom = LevelSetDomain::unit_ball();
        let field = RadialField { strength: 1.0 };
        let tracer = Tracer::new(&dom, &field);
        let data = FnInflow::new(bump).with_nu(|_, _, _| 1.7);
        let st = PhaseState::new(0.4, Vec3::new(0.0, 0.1, 0.0), Vec3::new(0.3, 0.2, -0.1));
        let got = duhamel_evaluate(&tracer, &data, &st).unwrap();
        let Foot::Initial { x, v } = got.foot else { panic!("hit the wall") };
        assert!((got.value - (-1.7f64 * 0.4).exp() * bump(&x, &v)).abs() < 1e-8);
    }

    #[test]
    fn unit_source() {
        let dom = LevelSetDomain::unit_ball();
        let field = ConstantField(Vec3::new(0.0, 0.0, -1.0));
        let tracer = Tracer::new(&dom, &field);
        let data = FnInflow::new(bump).with_source(|_, _, _| 1.0);
        let st = PhaseState::new(0.5, Vec3::new(0.1, 0.0, 0.2), Vec3::new(0.1, 0.3, 0.0));
        let got = duhamel_evaluate(&tracer, &data, &st).unwrap();
        let Foot::Initial { x, v } = got.foot else { panic!("hit the wall") };
        assert!((got.value - bump(&x, &v) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn wall_datum_is_used_after_exit() {
        let dom = LevelSetDomain::unit_ball();
        let field = ConstantField(Vec3::zeros());
        let tracer = Tracer::new(&dom, &field);
        let data = FnInflow::new(|_, _| 0.0).with_boundary(|t, _, _| 1.0 + t).with_nu(|_, _, _| 0.5);
        let st = PhaseState::new(2.0, Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0));
        let got = duhamel_evaluate(&tracer, &data, &st).unwrap();
        // Exit after one time unit at x = (-1, 0, 0).
        assert!((got.value - (-0.5f64).exp() * 2.0).abs() < 1e-8);
    }

    #[test]
    fn equilibrium_survives_diffuse_cycles() {
        let dom = LevelSetDomain::unit_ball();
        let field = ConstantField(Vec3::zeros());
        let tracer = Tracer::new(&dom, &field);
        let data = FnInflow::new(|_, v| sqrt_maxwellian(v));
        let cfg = SolverConfig {
            samples: 400,
            l_max: 40,
            ..SolverConfig::default()
        };
        let v = Vec3::new(0.4, -0.2, 0.9);
        let est = diffuse_evaluate(&tracer, &data, &PhaseState::new(0.7, Vec3::new(0.3, 0.0, 0.0), v), &cfg).unwrap();
        // Every draw is exactly sqrt(mu)(v): the importance ratios telescope.
        assert!((est.mean - sqrt_maxwellian(&v)).abs() < 1e-10);
        assert!(est.std_error < 1e-10);
    }

    #[test]
    fn shallow_cycles_exceed_budget() {
        let dom = LevelSetDomain::unit_ball();
        let field = ConstantField(Vec3::zeros());
        let tracer = Tracer::new(&dom, &field);
        let data = FnInflow::new(|_, v| sqrt_maxwellian(v));
        let cfg = SolverConfig {
            samples: 200,
            l_max: 1,
            ..SolverConfig::default()
        };
        let st = PhaseState::new(3.0, Vec3::zeros(), Vec3::new(0.5, 0.0, 0.0));
        assert!(matches!(
            diffuse_evaluate(&tracer, &data, &st, &cfg),
            Err(Error::CycleBudgetExceeded { .. })
        ));
    }

    #[test]
    fn equilibrium_has_no_normal_derivative() {
        let dom = LevelSetDomain::unit_ball();
        let field = ConstantField(Vec3::zeros());
        let tracer = Tracer::new(&dom, &field);
        let data = FnInflow::new(|_, v| sqrt_maxwellian(v)).with_boundary(|_, _, v| sqrt_maxwellian(v));
        let x = Vec3::new(0.0, 0.6, 0.8);
        let v = Vec3::new(0.2, -0.9, -0.3);
        let d = boundary_normal_derivative(&tracer, &data, &PhaseState::new(0.3, x, v), 1e-5, None).unwrap();
        assert!(d.gradient.norm() < 1e-8);
    }

    #[test]
    fn normal_derivative_matches_difference() {
        let dom = LevelSetDomain::unit_ball();
        let field = RadialField { strength: 1.0 };
        let tracer = Tracer::new(&dom, &field);
        let g = |t: f64, x: &Vec3, v: &Vec3| sqrt_maxwellian(v) * (1.0 + 0.3 * x[0] - 0.2 * x[1] * x[2] + 0.2 * t);
        let data = FnInflow::new(|_, v| sqrt_maxwellian(v))
            .with_boundary(g)
            .with_nu(|_, _, v| 1.0 + 0.1 * v.norm());
        let x = Vec3::new(0.6, 0.0, 0.8);
        for v in [Vec3::new(-0.6, 0.3, -0.5), Vec3::new(-1.0, -0.4, -0.9), Vec3::new(0.2, 0.5, -1.2)] {
            let st = PhaseState::new(0.5, x, v);
            let d = boundary_normal_derivative(&tracer, &data, &st, 1e-5, Some(1e-4)).unwrap();
            assert!(d.normal_velocity <= -0.5);
            let fd = d.finite_difference.unwrap();
            assert!(
                (d.normal_derivative - fd).abs() <= 0.05 * fd.abs().max(1e-3),
                "{} vs {fd}",
                d.normal_derivative
            );
        }
    }

    #[test]
    fn grazing_boundary_derivative_is_guarded() {
        let dom = LevelSetDomain::unit_ball();
        let field = ConstantField(Vec3::zeros());
        let tracer = Tracer::new(&dom, &field);
        let data = FnInflow::new(|_, _| 0.0).with_boundary(|_, x, v| sqrt_maxwellian(v) * (1.0 + x[0]));
        let x = Vec3::new(0.0, 0.0, 1.0);
        let st = PhaseState::new(0.2, x, Vec3::new(1.0, 0.0, 0.0));
        assert!(matches!(
            boundary_normal_derivative(&tracer, &data, &st, 1e-5, None),
            Err(Error::GrazingSingularity { .. })
        ));
        let mags: Vec<f64> = [0.1, 0.01]
            .iter()
            .map(|&s| {
                let st = PhaseState::new(0.2, x, Vec3::new(1.0, 0.0, -s));
                boundary_normal_derivative(&tracer, &data, &st, 1e-5, None)
                    .unwrap()
                    .normal_derivative
                    .abs()
            })
            .collect();
        assert!(mags[1] / mags[0] > 5.0);
    }
}
