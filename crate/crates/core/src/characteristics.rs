//! Characteristics `dX/ds = V`, `dV/ds = E(s, X)` inside the domain:
//! integration, exit detection, variational equations and the
//! change-of-variables determinants along boundary maps.

use nalgebra::{Matrix6, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ForceField;
use crate::geometry::{LevelSetDomain, BOUNDARY_TOL};
use crate::{Mat3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
}

impl PhaseState {
    pub fn new(t: f64, x: Vec3, v: Vec3) -> Self {
        PhaseState { t, x, v }
    }
}

/// Where and how a trajectory meets the wall.
///
/// `exit_time` is the (nonnegative) duration from the starting state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExitRecord {
    pub exit_time: f64,
    pub exit_point: Vec3,
    pub exit_velocity: Vec3,
    pub normal_component: f64,
    pub grazing: bool,
}

pub type FlowJacobian = Matrix6<f64>;

/// Blocks of a flow Jacobian `d(X, V)/d(x, v)`.
pub fn jacobian_blocks(j: &FlowJacobian) -> [Mat3; 4] {
    [
        j.fixed_view::<3, 3>(0, 0).into_owned(),
        j.fixed_view::<3, 3>(0, 3).into_owned(),
        j.fixed_view::<3, 3>(3, 0).into_owned(),
        j.fixed_view::<3, 3>(3, 3).into_owned(),
    ]
}

#[derive(Clone, Copy, Debug)]
pub struct TraceOptions {
    /// Nominal arc length per step; the time step is `step / (1 + |V|)`.
    pub step: f64,
    pub max_dt: f64,
    pub root_tol: f64,
    /// Relative grazing threshold: `|n . v| < grazing * (1 + |v|)`.
    pub grazing: f64,
    /// Exit-search horizon; `None` means `10 / (1 + |v|)`.
    pub horizon: Option<f64>,
    /// A local maximum of `xi` above `-touch` without crossing is flagged.
    pub touch: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            step: 0.01,
            max_dt: 0.005,
            root_tol: 1e-12,
            grazing: 1e-6,
            horizon: None,
            touch: 1e-9,
        }
    }
}

/// Phase state extended by `K` auxiliary scalars integrated alongside.
#[derive(Clone, Copy, Debug)]
pub struct Aug<const K: usize> {
    pub x: Vec3,
    pub v: Vec3,
    pub a: [f64; K],
}

impl<const K: usize> Aug<K> {
    fn axpy(&self, h: f64, d: &Aug<K>) -> Aug<K> {
        let mut a = self.a;
        for (ai, di) in a.iter_mut().zip(d.a.iter()) {
            *ai += h * di;
        }
        Aug {
            x: self.x + h * d.x,
            v: self.v + h * d.v,
            a,
        }
    }
}

/// Right-hand side for the auxiliary variables: `(s, X, V, E, aux) -> d aux/ds`.
pub trait AuxRhs<const K: usize> {
    fn rhs(&self, s: f64, x: &Vec3, v: &Vec3, e: &Vec3, a: &[f64; K]) -> [f64; K];
}

impl<const K: usize, F> AuxRhs<K> for F
where
    F: Fn(f64, &Vec3, &Vec3, &Vec3, &[f64; K]) -> [f64; K],
{
    fn rhs(&self, s: f64, x: &Vec3, v: &Vec3, e: &Vec3, a: &[f64; K]) -> [f64; K] {
        self(s, x, v, e, a)
    }
}

pub struct NoAux;

impl AuxRhs<0> for NoAux {
    fn rhs(&self, _: f64, _: &Vec3, _: &Vec3, _: &Vec3, _: &[f64; 0]) -> [f64; 0] {
        []
    }
}

/// Outcome of an integration run.
#[derive(Clone, Copy, Debug)]
pub enum Stop<const K: usize> {
    Reached { t: f64, y: Aug<K> },
    Exited { t: f64, y: Aug<K>, record: ExitRecord },
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TracePoint {
    pub s: f64,
    pub x: Vec3,
    pub v: Vec3,
    pub xi: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Trace {
    pub points: Vec<TracePoint>,
    pub exit: Option<ExitRecord>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DetCheck {
    pub determinant: f64,
    pub ratio: f64,
    pub expected: f64,
}

impl DetCheck {
    pub fn relative_error(&self) -> f64 {
        (self.ratio - self.expected).abs() / self.expected.abs().max(1e-300)
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GammaDetCheck {
    pub exit: ExitRecord,
    pub boundary: DetCheck,
    pub interior: DetCheck,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExitDerivatives {
    pub exit: ExitRecord,
    pub dtb_dx: Vec3,
    pub dtb_dv: Vec3,
    pub dxb_dx: Mat3,
    pub dxb_dv: Mat3,
    pub dvb_dx: Mat3,
    pub dvb_dv: Mat3,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ArcLengthCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Characteristic integrator bound to a domain and field.
#[derive(Clone, Copy)]
pub struct Tracer<'a> {
    pub domain: &'a LevelSetDomain,
    pub field: &'a dyn ForceField,
    pub opts: TraceOptions,
}

impl<'a> Tracer<'a> {
    pub fn new(domain: &'a LevelSetDomain, field: &'a dyn ForceField) -> Self {
        Tracer {
            domain,
            field,
            opts: TraceOptions::default(),
        }
    }

    pub fn with_options(mut self, opts: TraceOptions) -> Self {
        self.opts = opts;
        self
    }

    pub fn grazing_tol(&self, v: &Vec3) -> f64 {
        self.opts.grazing * (1.0 + v.norm())
    }

    pub fn horizon(&self, v: &Vec3) -> f64 {
        self.opts.horizon.unwrap_or(10.0 / (1.0 + v.norm()))
    }

    fn deriv<const K: usize, A: AuxRhs<K>>(&self, s: f64, y: &Aug<K>, aux: &A) -> Aug<K> {
        let e = self.field.field(s, &y.x);
        Aug {
            x: y.v,
            v: e,
            a: aux.rhs(s, &y.x, &y.v, &e, &y.a),
        }
    }

    /// One classical RK4 step of signed size `h`.
    pub fn rk4<const K: usize, A: AuxRhs<K>>(&self, s: f64, y: &Aug<K>, h: f64, aux: &A) -> Aug<K> {
        let k1 = self.deriv(s, y, aux);
        let k2 = self.deriv(s + 0.5 * h, &y.axpy(0.5 * h, &k1), aux);
        let k3 = self.deriv(s + 0.5 * h, &y.axpy(0.5 * h, &k2), aux);
        let k4 = self.deriv(s + h, &y.axpy(h, &k3), aux);
        let mut out = y.axpy(h / 6.0, &k1);
        out = out.axpy(h / 3.0, &k2);
        out = out.axpy(h / 3.0, &k3);
        out.axpy(h / 6.0, &k4)
    }

    fn exit_record(&self, elapsed: f64, y_x: &Vec3, y_v: &Vec3) -> ExitRecord {
        let n = self.domain.outward_normal(y_x).unwrap_or_else(|_| Vec3::zeros());
        let nc = n.dot(y_v);
        ExitRecord {
            exit_time: elapsed,
            exit_point: *y_x,
            exit_velocity: *y_v,
            normal_component: nc,
            grazing: nc.abs() < self.grazing_tol(y_v),
        }
    }

    /// Integrates for `duration >= 0` in direction `dir = +1` (forward) or
    /// `-1` (backward), stopping early at the wall. `obs` sees every accepted
    /// state as `(s, y, xi)`.
    pub fn integrate<const K: usize, A, O>(
        &self,
        start: &PhaseState,
        a0: [f64; K],
        dir: f64,
        duration: f64,
        aux: &A,
        obs: &mut O,
    ) -> Result<Stop<K>>
    where
        A: AuxRhs<K>,
        O: FnMut(f64, &Aug<K>, f64),
    {
        let mut t = start.t;
        let mut y = Aug {
            x: start.x,
            v: start.v,
            a: a0,
        };
        let mut xi = self.domain.value(&y.x);
        if xi > BOUNDARY_TOL {
            return Err(Error::invalid(format!("state lies outside the domain (xi = {xi:.3e})")));
        }
        if xi >= -BOUNDARY_TOL {
            let n = self.domain.outward_normal(&y.x)?;
            let vn = dir * n.dot(&y.v);
            let gt = self.grazing_tol(&y.v);
            if vn.abs() <= gt {
                return Err(Error::GrazingAmbiguous { xi });
            }
            if vn > 0.0 {
                obs(t, &y, xi);
                return Ok(Stop::Exited {
                    t,
                    y,
                    record: self.exit_record(0.0, &y.x, &y.v),
                });
            }
        }
        obs(t, &y, xi);
        let collar = self.domain.collar_width();
        let mut elapsed = 0.0;
        let mut xi_prev = f64::NEG_INFINITY;
        while elapsed < duration {
            let mut h = self.opts.max_dt.min(self.opts.step / (1.0 + y.v.norm()));
            if xi.abs() < collar {
                h *= 0.5;
            }
            let last = duration - elapsed <= h * (1.0 + 1e-12);
            if last {
                h = duration - elapsed;
            }
            let y1 = self.rk4(t, &y, dir * h, aux);
            let xi1 = self.domain.value(&y1.x);
            if xi1 > BOUNDARY_TOL {
                let (tau, yr) = self.locate_root(t, &y, xi, dir, h, xi1, aux);
                let record = self.exit_record(elapsed + tau, &yr.x, &yr.v);
                obs(t + dir * tau, &yr, self.domain.value(&yr.x));
                return Ok(Stop::Exited {
                    t: t + dir * tau,
                    y: yr,
                    record,
                });
            }
            if xi > xi_prev && xi >= xi1 && xi > -self.opts.touch && elapsed > 0.0 {
                return Err(Error::GrazingAmbiguous { xi });
            }
            xi_prev = xi;
            t = if last { start.t + dir * duration } else { t + dir * h };
            elapsed = if last { duration } else { elapsed + h };
            y = y1;
            xi = xi1;
            obs(t, &y, xi);
            if !last && xi >= -BOUNDARY_TOL {
                let n = self.domain.outward_normal(&y.x)?;
                if dir * n.dot(&y.v) > self.grazing_tol(&y.v) {
                    return Ok(Stop::Exited {
                        t,
                        y,
                        record: self.exit_record(elapsed, &y.x, &y.v),
                    });
                }
            }
        }
        Ok(Stop::Reached { t, y })
    }

    /// Illinois false position on the step length, re-integrating one RK4
    /// step from the last accepted state for every trial.
    #[allow(clippy::too_many_arguments)]
    fn locate_root<const K: usize, A: AuxRhs<K>>(
        &self,
        t: f64,
        y: &Aug<K>,
        xi0: f64,
        dir: f64,
        h: f64,
        xi1: f64,
        aux: &A,
    ) -> (f64, Aug<K>) {
        let (mut a, mut fa) = (0.0, xi0.min(0.0));
        let (mut b, mut fb) = (h, xi1);
        let mut best = (h, self.rk4(t, y, dir * h, aux), xi1);
        let mut side = 0i32;
        for _ in 0..200 {
            let mut c = (a * fb - b * fa) / (fb - fa);
            if !(c > a && c < b) {
                c = 0.5 * (a + b);
            }
            let yc = self.rk4(t, y, dir * c, aux);
            let fc = self.domain.value(&yc.x);
            if fc.abs() < best.2.abs() {
                best = (c, yc, fc);
            }
            if fc.abs() < self.opts.root_tol || (b - a) < 1e-15 * (1.0 + h) {
                break;
            }
            if fc > 0.0 {
                b = c;
                fb = fc;
                if side == 1 {
                    fa *= 0.5;
                }
                side = 1;
            } else {
                a = c;
                fa = fc;
                if side == -1 {
                    fb *= 0.5;
                }
                side = -1;
            }
        }
        (best.0, best.1)
    }

    /// Solution at time `s`, or `ExitedDomain` if the path meets the wall first.
    pub fn flow(&self, state: &PhaseState, s: f64) -> Result<PhaseState> {
        let dir = if s >= state.t { 1.0 } else { -1.0 };
        match self.integrate(state, [], dir, (s - state.t).abs(), &NoAux, &mut |_, _, _| {})? {
            Stop::Reached { y, .. } => Ok(PhaseState { t: s, x: y.x, v: y.v }),
            Stop::Exited { record, .. } => Err(Error::ExitedDomain(Box::new(record))),
        }
    }

    /// Samples the path towards `s` (stopping at the wall) for reporting.
    pub fn trace(&self, state: &PhaseState, s: f64) -> Result<Trace> {
        let dir = if s >= state.t { 1.0 } else { -1.0 };
        let mut points = Vec::new();
        let stop = self.integrate(state, [], dir, (s - state.t).abs(), &NoAux, &mut |t, y, xi| {
            points.push(TracePoint { s: t, x: y.x, v: y.v, xi })
        })?;
        let exit = match stop {
            Stop::Exited { record, .. } => Some(record),
            Stop::Reached { .. } => None,
        };
        Ok(Trace { points, exit })
    }

    fn exit_search(&self, state: &PhaseState, dir: f64) -> Result<ExitRecord> {
        let horizon = self.horizon(&state.v);
        match self.integrate(state, [], dir, horizon, &NoAux, &mut |_, _, _| {})? {
            Stop::Exited { record, .. } => Ok(record),
            Stop::Reached { .. } => Err(Error::NoExitWithinHorizon { horizon }),
        }
    }

    /// Backward exit: duration `t_b`, wall point `x_b` and velocity `v_b`.
    pub fn backward_exit(&self, state: &PhaseState) -> Result<ExitRecord> {
        self.exit_search(state, -1.0)
    }

    pub fn forward_exit(&self, state: &PhaseState) -> Result<ExitRecord> {
        self.exit_search(state, 1.0)
    }

    fn jacobian_rhs(&self) -> impl Fn(f64, &Vec3, &Vec3, &Vec3, &[f64; 36]) -> [f64; 36] + '_ {
        move |s, x, _v, _e, a| {
            let j = Matrix6::from_column_slice(a);
            let g = self.field.eval(s, x).grad;
            let mut d = Matrix6::zeros();
            d.fixed_view_mut::<3, 6>(0, 0).copy_from(&j.fixed_view::<3, 6>(3, 0));
            d.fixed_view_mut::<3, 6>(3, 0).copy_from(&(g * j.fixed_view::<3, 6>(0, 0)));
            let mut out = [0.0; 36];
            out.copy_from_slice(d.as_slice());
            out
        }
    }

    /// Variational solution `d(X(s), V(s))/d(x, v)`.
    pub fn flow_jacobian(&self, state: &PhaseState, s: f64) -> Result<FlowJacobian> {
        let dir = if s >= state.t { 1.0 } else { -1.0 };
        let mut a0 = [0.0; 36];
        a0.copy_from_slice(Matrix6::<f64>::identity().as_slice());
        let rhs = self.jacobian_rhs();
        match self.integrate(state, a0, dir, (s - state.t).abs(), &rhs, &mut |_, _, _| {})? {
            Stop::Reached { y, .. } => Ok(Matrix6::from_column_slice(&y.a)),
            Stop::Exited { record, .. } => Err(Error::ExitedDomain(Box::new(record))),
        }
    }

    /// Derivatives of `(t_b, x_b, v_b)` with respect to `(x, v)`, from the
    /// variational solution at the exit.
    pub fn exit_derivatives(&self, state: &PhaseState) -> Result<ExitDerivatives> {
        let mut a0 = [0.0; 36];
        a0.copy_from_slice(Matrix6::<f64>::identity().as_slice());
        let rhs = self.jacobian_rhs();
        let horizon = self.horizon(&state.v);
        let (t_exit, y, record) = match self.integrate(state, a0, -1.0, horizon, &rhs, &mut |_, _, _| {})? {
            Stop::Exited { t, y, record } => (t, y, record),
            Stop::Reached { .. } => return Err(Error::NoExitWithinHorizon { horizon }),
        };
        if record.normal_component.abs() < self.grazing_tol(&record.exit_velocity) {
            return Err(Error::GrazingSingularity {
                normal_velocity: record.normal_component,
            });
        }
        let j = Matrix6::from_column_slice(&y.a);
        let n = self.domain.outward_normal(&record.exit_point)?;
        let vb = record.exit_velocity;
        let eb = self.field.field(t_exit, &record.exit_point);
        let nv = n.dot(&vb);
        let dx = j.fixed_view::<3, 6>(0, 0).into_owned();
        let dv = j.fixed_view::<3, 6>(3, 0).into_owned();
        // d t_b / d(x, v) as a row.
        let dtb: SMatrix<f64, 1, 6> = (n.transpose() * dx) / nv;
        let dxb = dx - vb * dtb;
        let dvb = dv - eb * dtb;
        Ok(ExitDerivatives {
            exit: record,
            dtb_dx: Vec3::new(dtb[0], dtb[1], dtb[2]),
            dtb_dv: Vec3::new(dtb[3], dtb[4], dtb[5]),
            dxb_dx: dxb.fixed_view::<3, 3>(0, 0).into_owned(),
            dxb_dv: dxb.fixed_view::<3, 3>(0, 3).into_owned(),
            dvb_dx: dvb.fixed_view::<3, 3>(0, 0).into_owned(),
            dvb_dv: dvb.fixed_view::<3, 3>(0, 3).into_owned(),
        })
    }

    fn fd_step(scale: f64) -> f64 {
        1e-5 * (1.0 + scale)
    }

    /// Central-difference Jacobian of a map `R^6 -> R^6`.
    fn fd_jacobian<F>(z0: &[f64; 6], scales: &[f64; 6], map: F) -> Result<Matrix6<f64>>
    where
        F: Fn(&[f64; 6]) -> Result<[f64; 6]>,
    {
        Self::fd_jacobian_shrunk(z0, scales, 1.0, map)
    }

    /// As `fd_jacobian` with every step multiplied by `shrink`.
    fn fd_jacobian_shrunk<F>(z0: &[f64; 6], scales: &[f64; 6], shrink: f64, map: F) -> Result<Matrix6<f64>>
    where
        F: Fn(&[f64; 6]) -> Result<[f64; 6]>,
    {
        let mut jac = Matrix6::zeros();
        for k in 0..6 {
            let h = shrink * Self::fd_step(scales[k]);
            let mut zp = *z0;
            let mut zm = *z0;
            zp[k] += h;
            zm[k] -= h;
            let fp = map(&zp)?;
            let fm = map(&zm)?;
            for i in 0..6 {
                jac[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        Ok(jac)
    }

    fn check_outgoing(&self, x: &Vec3, v: &Vec3) -> Result<Vec3> {
        if !self.domain.on_boundary(x) {
            return Err(Error::invalid("point is not on the boundary"));
        }
        let n = self.domain.outward_normal(x)?;
        if n.dot(v) <= 0.0 {
            return Err(Error::invalid("velocity must satisfy n . v > 0"));
        }
        Ok(n)
    }

    /// Determinant of `(t, x_par, v) -> (X(s), V(s))` per unit surface
    /// measure, compared with `|n(x) . v|`.
    pub fn verify_boundary_map_det(&self, t: f64, x: &Vec3, v: &Vec3, s: f64) -> Result<DetCheck> {
        let n = self.check_outgoing(x, v)?;
        if s >= t {
            return Err(Error::invalid("target time must precede the boundary time"));
        }
        let chart = self.domain.boundary_chart(x)?;
        let z0 = [t, 0.0, 0.0, v[0], v[1], v[2]];
        let vs = v.norm();
        let scales = [t.abs(), 1.0, 1.0, vs, vs, vs];
        let jac = Self::fd_jacobian(&z0, &scales, |z| {
            let p = chart.point(z[1], z[2])?;
            let st = PhaseState::new(z[0], p, Vec3::new(z[3], z[4], z[5]));
            let out = self.flow(&st, s)?;
            Ok([out.x[0], out.x[1], out.x[2], out.v[0], out.v[1], out.v[2]])
        })?;
        let det = jac.determinant();
        let density = chart.density(0.0, 0.0)?;
        Ok(DetCheck {
            determinant: det,
            ratio: det.abs() / density,
            expected: n.dot(v).abs(),
        })
    }

    /// Determinants of the wall-to-wall map `(t, x, v) -> (t - t_b, x_b, v_b)`
    /// and the interior-to-wall map `(x, v) -> (T - t_b, x_b, v_b)`.
    pub fn verify_gamma_to_gamma_det(&self, t: f64, x: &Vec3, v: &Vec3) -> Result<GammaDetCheck> {
        let n = self.check_outgoing(x, v)?;
        let start = PhaseState::new(t, *x, *v);
        let exit = self.backward_exit(&start)?;
        if exit.exit_time > t {
            return Err(Error::invalid("requires t >= t_b"));
        }
        if exit.grazing {
            return Err(Error::GrazingAmbiguous { xi: 0.0 });
        }
        let chart_x = self.domain.boundary_chart(x)?;
        let chart_b = self.domain.boundary_chart(&exit.exit_point)?;
        let vs = v.norm();
        let exit_map = |st: &PhaseState| -> Result<[f64; 6]> {
            let e = self.backward_exit(st)?;
            let c = chart_b.coordinates(&e.exit_point);
            let w = e.exit_velocity;
            Ok([st.t - e.exit_time, c[0], c[1], w[0], w[1], w[2]])
        };

        let z0 = [t, 0.0, 0.0, v[0], v[1], v[2]];
        let jac = Self::fd_jacobian(&z0, &[t.abs(), 1.0, 1.0, vs, vs, vs], |z| {
            let p = chart_x.point(z[1], z[2])?;
            exit_map(&PhaseState::new(z[0], p, Vec3::new(z[3], z[4], z[5])))
        })?;
        let dens_b = chart_b.density(0.0, 0.0)?;
        let dens_x = chart_x.density(0.0, 0.0)?;
        let det1 = jac.determinant();
        let nb = exit.normal_component.abs();
        let boundary = DetCheck {
            determinant: det1,
            ratio: det1.abs() * dens_b / dens_x,
            expected: n.dot(v).abs() / nb,
        };

        let mid = self.flow(&start, t - 0.5 * exit.exit_time)?;
        let z0 = [mid.x[0], mid.x[1], mid.x[2], mid.v[0], mid.v[1], mid.v[2]];
        let ms = mid.v.norm();
        // Near-grazing exits curve the map on the scale of |n . v_b|.
        let shrink = nb.clamp(1e-3, 1.0);
        let jac = Self::fd_jacobian_shrunk(&z0, &[1.0, 1.0, 1.0, ms, ms, ms], shrink, |z| {
            exit_map(&PhaseState::new(mid.t, Vec3::new(z[0], z[1], z[2]), Vec3::new(z[3], z[4], z[5])))
        })?;
        let det2 = jac.determinant();
        let interior = DetCheck {
            determinant: det2,
            ratio: det2.abs() * dens_b,
            expected: 1.0 / nb,
        };
        Ok(GammaDetCheck {
            exit,
            boundary,
            interior,
        })
    }

    /// Arc length of the backward path over `[max(0, t - t_b), t]` against
    /// `5 t (|E|_inf + D) + 4 D`.
    pub fn arc_length_bound_check(&self, state: &PhaseState, e_sup: f64) -> Result<ArcLengthCheck> {
        let rhs_len = |_: f64, _: &Vec3, v: &Vec3, _: &Vec3, _: &[f64; 1]| [-v.norm()];
        let stop = self.integrate(state, [0.0], -1.0, state.t.max(0.0), &rhs_len, &mut |_, _, _| {})?;
        let lhs = match stop {
            Stop::Reached { y, .. } | Stop::Exited { y, .. } => y.a[0],
        };
        let d = self.domain.diameter();
        let rhs = 5.0 * state.t * (e_sup + d) + 4.0 * d;
        Ok(ArcLengthCheck {
            lhs,
            rhs,
            pass: lhs < rhs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, RadialField};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ball() -> LevelSetDomain {
        LevelSetDomain::unit_ball()
    }

    #[test]
    fn straight_line_flow() {
        let d = ball();
        let f = ConstantField(Vec3::zeros());
        let tr = Tracer::new(&d, &f);
        let out = tr.flow(&PhaseState::new(0.0, Vec3::zeros(), Vec3::x()), 0.5).unwrap();
        assert_relative_eq!(out.x, Vec3::new(0.5, 0.0, 0.0), epsilon = 1e-14);
        assert_relative_eq!(out.v, Vec3::x(), epsilon = 1e-14);
    }

    #[test]
    fn parabolic_fall() {
        let d = ball();
        let f = ConstantField(Vec3::new(0.0, 0.0, -1.0));
        let out = Tracer::new(&d, &f)
            .flow(&PhaseState::new(0.0, Vec3::zeros(), Vec3::zeros()), 0.5)
            .unwrap();
        assert_relative_eq!(out.x, Vec3::new(0.0, 0.0, -0.125), epsilon = 1e-13);
        assert_relative_eq!(out.v, Vec3::new(0.0, 0.0, -0.5), epsilon = 1e-13);
    }

    #[test]
    fn linear_field_matches_cosh() {
        let d = ball();
        let f = RadialField { strength: 1.0 };
        let out = Tracer::new(&d, &f)
            .flow(&PhaseState::new(0.0, Vec3::new(0.1, 0.0, 0.0), Vec3::zeros()), 1.0)
            .unwrap();
        assert!((out.x[0] - 0.1 * 1f64.cosh()).abs() < 1e-8);
        assert!((out.v[0] - 0.1 * 1f64.sinh()).abs() < 1e-8);
    }

    #[test]
    fn exit_cases_without_field() {
        let d = ball();
        let f = ConstantField(Vec3::zeros());
        let tr = Tracer::new(&d, &f);
        let r = tr.backward_exit(&PhaseState::new(2.0, Vec3::zeros(), Vec3::x())).unwrap();
        assert!((r.exit_time - 1.0).abs() < 1e-11);
        assert_relative_eq!(r.exit_point, -Vec3::x(), epsilon = 1e-11);
        assert!(r.normal_component < 0.0 && !r.grazing);
        let r = tr
            .backward_exit(&PhaseState::new(2.0, Vec3::new(0.5, 0.0, 0.0), Vec3::x()))
            .unwrap();
        assert!((r.exit_time - 1.5).abs() < 1e-11);
        let r = tr.forward_exit(&PhaseState::new(0.0, Vec3::zeros(), Vec3::y())).unwrap();
        assert_relative_eq!(r.exit_point, Vec3::y(), epsilon = 1e-11);
    }

    #[test]
    fn exit_under_gravity_matches_bisection_oracle() {
        let d = ball();
        let f = ConstantField(Vec3::new(0.0, 0.0, -1.0));
        let r = Tracer::new(&d, &f)
            .backward_exit(&PhaseState::new(0.0, Vec3::zeros(), Vec3::x()))
            .unwrap();
        // Backward path: X(-s) = (-s, 0, -s^2/2); solve |X|^2 = 1 by bisection.
        let g = |s: f64| s * s + 0.25 * s.powi(4) - 1.0;
        let (mut lo, mut hi) = (0.0, 2.0);
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if g(m) < 0.0 {
                lo = m
            } else {
                hi = m
            }
        }
        assert!((r.exit_time - lo).abs() < 1e-10);
    }

    #[test]
    fn flow_reports_exit() {
        let d = ball();
        let f = ConstantField(Vec3::zeros());
        let err = Tracer::new(&d, &f)
            .flow(&PhaseState::new(0.0, Vec3::zeros(), Vec3::x()), 3.0)
            .unwrap_err();
        match err {
            Error::ExitedDomain(r) => assert!((r.exit_time - 1.0).abs() < 1e-11),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn tangent_boundary_start_is_flagged() {
        let d = ball();
        let f = ConstantField(Vec3::zeros());
        let r = Tracer::new(&d, &f).backward_exit(&PhaseState::new(0.0, Vec3::x(), Vec3::y()));
        assert!(matches!(r, Err(Error::GrazingAmbiguous { .. })));
    }

    #[test]
    fn confined_orbit_hits_horizon() {
        let d = ball();
        let f = RadialField { strength: -4.0 };
        let r = Tracer::new(&d, &f).backward_exit(&PhaseState::new(0.0, Vec3::new(0.1, 0.0, 0.0), Vec3::zeros()));
        assert!(matches!(r, Err(Error::NoExitWithinHorizon { .. })));
    }

    #[test]
    fn jacobian_closed_forms() {
        let d = ball();
        let st = PhaseState::new(1.0, Vec3::new(0.1, 0.2, 0.0), Vec3::new(0.1, 0.0, 0.2));
        let f0 = ConstantField(Vec3::zeros());
        let j = Tracer::new(&d, &f0).flow_jacobian(&st, 0.4).unwrap();
        let [xx, xv, vx, vv] = jacobian_blocks(&j);
        assert_relative_eq!(xx, Mat3::identity(), epsilon = 1e-13);
        assert_relative_eq!(xv, -0.6 * Mat3::identity(), epsilon = 1e-13);
        assert_relative_eq!(vx, Mat3::zeros(), epsilon = 1e-13);
        assert_relative_eq!(vv, Mat3::identity(), epsilon = 1e-13);

        let f1 = RadialField { strength: 1.0 };
        let j = Tracer::new(&d, &f1).flow_jacobian(&st, 0.4).unwrap();
        let [xx, xv, vx, vv] = jacobian_blocks(&j);
        let s = -0.6f64;
        assert_relative_eq!(xx, s.cosh() * Mat3::identity(), epsilon = 1e-9);
        assert_relative_eq!(xv, s.sinh() * Mat3::identity(), epsilon = 1e-9);
        assert_relative_eq!(vx, s.sinh() * Mat3::identity(), epsilon = 1e-9);
        assert_relative_eq!(vv, s.cosh() * Mat3::identity(), epsilon = 1e-9);
        assert!((j.determinant() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn jacobian_matches_differences() {
        let d = ball();
        let f = crate::field::FnField::new("curl", |_, x: &Vec3| Vec3::new(x[1], -x[0] + 0.3 * x[2], x[0] * x[1]));
        let tr = Tracer::new(&d, &f);
        let st = PhaseState::new(0.0, Vec3::new(0.2, -0.1, 0.3), Vec3::new(0.3, 0.2, -0.1));
        let j = tr.flow_jacobian(&st, 0.7).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut p = st;
            let mut m = st;
            if k < 3 {
                p.x[k] += h;
                m.x[k] -= h;
            } else {
                p.v[k - 3] += h;
                m.v[k - 3] -= h;
            }
            let a = tr.flow(&p, 0.7).unwrap();
            let b = tr.flow(&m, 0.7).unwrap();
            for i in 0..3 {
                assert!(((a.x[i] - b.x[i]) / (2.0 * h) - j[(i, k)]).abs() < 1e-5);
                assert!(((a.v[i] - b.v[i]) / (2.0 * h) - j[(i + 3, k)]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn boundary_determinant_examples() {
        let d = ball();
        let f = ConstantField(Vec3::zeros());
        let tr = Tracer::new(&d, &f);
        let c = tr.verify_boundary_map_det(1.0, &Vec3::x(), &Vec3::x(), 0.5).unwrap();
        assert!((c.ratio - 1.0).abs() < 1e-4, "{c:?}");
        let c = tr
            .verify_boundary_map_det(1.0, &Vec3::x(), &Vec3::new(0.5, 0.5, 0.0), 0.5)
            .unwrap();
        assert!((c.ratio - 0.5).abs() < 1e-4, "{c:?}");
        let c = tr
            .verify_boundary_map_det(1.0, &Vec3::x(), &Vec3::new(1e-3, 1.0, 0.0), 0.999)
            .unwrap();
        assert!(c.ratio <= 1e-3 * 1.01, "{c:?}");
    }

    #[test]
    fn gamma_determinants_on_chords() {
        let d = ball();
        let f = ConstantField(Vec3::zeros());
        let tr = Tracer::new(&d, &f);
        let g = tr.verify_gamma_to_gamma_det(3.0, &Vec3::x(), &Vec3::x()).unwrap();
        assert!((g.boundary.ratio - 1.0).abs() < 1e-4, "{g:?}");
        assert!((g.interior.ratio - 1.0).abs() < 1e-4, "{g:?}");
        let v = Vec3::new(0.6, 0.8, 0.0);
        let g = tr.verify_gamma_to_gamma_det(3.0, &Vec3::x(), &v).unwrap();
        assert!((g.exit.normal_component.abs() - 0.6).abs() < 1e-9);
        assert!((g.boundary.ratio - 1.0).abs() < 1e-4, "{g:?}");
        assert!(g.interior.relative_error() < 1e-4, "{g:?}");
    }

    #[test]
    fn exit_derivative_examples() {
        let d = ball();
        let f = ConstantField(Vec3::zeros());
        let tr = Tracer::new(&d, &f);
        let st = PhaseState::new(2.0, Vec3::zeros(), Vec3::x());
        let ed = tr.exit_derivatives(&st).unwrap();
        assert_relative_eq!(ed.dtb_dx, Vec3::x(), epsilon = 1e-9);
        let expect = -ed.exit.exit_time * Mat3::identity() - ed.exit.exit_velocity * ed.dtb_dv.transpose();
        assert_relative_eq!(ed.dxb_dv, expect, epsilon = 1e-9);
        let grazing = PhaseState::new(2.0, Vec3::new(0.0, 1.0 - 1e-14, 0.0), Vec3::x());
        assert!(matches!(
            tr.exit_derivatives(&grazing),
            Err(Error::GrazingSingularity { .. }) | Err(Error::GrazingAmbiguous { .. })
        ));
    }

    #[test]
    fn exit_derivatives_match_differences_with_field() {
        let d = ball();
        let f = RadialField { strength: 1.0 };
        let tr = Tracer::new(&d, &f);
        let st = PhaseState::new(1.0, Vec3::new(0.2, 0.1, -0.3), Vec3::new(0.5, -0.4, 0.3));
        let ed = tr.exit_derivatives(&st).unwrap();
        let h = 1e-5;
        for k in 0..6 {
            let mut p = st;
            let mut m = st;
            if k < 3 {
                p.x[k] += h;
                m.x[k] -= h;
            } else {
                p.v[k - 3] += h;
                m.v[k - 3] -= h;
            }
            let a = tr.backward_exit(&p).unwrap();
            let b = tr.backward_exit(&m).unwrap();
            let dt = (a.exit_time - b.exit_time) / (2.0 * h);
            let dx = (a.exit_point - b.exit_point) / (2.0 * h);
            let dv = (a.exit_velocity - b.exit_velocity) / (2.0 * h);
            let (et, ex, ev) = if k < 3 {
                (ed.dtb_dx[k], ed.dxb_dx.column(k).into_owned(), ed.dvb_dx.column(k).into_owned())
            } else {
                (
                    ed.dtb_dv[k - 3],
                    ed.dxb_dv.column(k - 3).into_owned(),
                    ed.dvb_dv.column(k - 3).into_owned(),
                )
            };
            assert!((dt - et).abs() < 1e-5, "k={k} {dt} {et}");
            assert!((dx - ex).amax() < 1e-5);
            assert!((dv - ev).amax() < 1e-5);
        }
    }

    #[test]
    fn arc_length_examples() {
        let d = ball();
        let f = ConstantField(Vec3::zeros());
        let tr = Tracer::new(&d, &f);
        let c = tr
            .arc_length_bound_check(&PhaseState::new(1.0, Vec3::x(), Vec3::x()), 0.0)
            .unwrap();
        assert!((c.lhs - 1.0).abs() < 1e-9 && c.rhs == 18.0 && c.pass);
        let c = tr
            .arc_length_bound_check(&PhaseState::new(1.0, Vec3::x(), 100.0 * Vec3::x()), 0.0)
            .unwrap();
        assert!((c.lhs - 2.0).abs() < 1e-6 && c.pass);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn reversible_and_volume_preserving(
            x in prop::array::uniform3(-0.5f64..0.5),
            v in prop::array::uniform3(-0.5f64..0.5),
            s in 0.05f64..0.4,
        ) {
            let d = ball();
            let f = RadialField { strength: 1.0 };
            let tr = Tracer::new(&d, &f);
            let st = PhaseState::new(1.0, Vec3::from(x), Vec3::from(v));
            let fwd = tr.flow(&st, 1.0 - s);
            prop_assume!(fwd.is_ok());
            let back = tr.flow(&fwd.unwrap(), 1.0).unwrap();
            prop_assert!((back.x - st.x).norm() < 1e-8 && (back.v - st.v).norm() < 1e-8);
            let j = tr.flow_jacobian(&st, 1.0 - s).unwrap();
            prop_assert!((j.determinant() - 1.0).abs() < 1e-8);
        }

        #[test]
        fn exit_is_consistent(
            x in prop::array::uniform3(-0.5f64..0.5),
            v in prop::array::uniform3(-2.0f64..2.0),
        ) {
            let d = ball();
            let f = ConstantField(Vec3::new(0.0, 0.0, -1.0));
            let tr = Tracer::new(&d, &f);
            let st = PhaseState::new(5.0, Vec3::from(x), Vec3::from(v));
            let r = tr.backward_exit(&st);
            prop_assume!(r.is_ok());
            let r = r.unwrap();
            prop_assert!(d.value(&r.exit_point).abs() < 1e-11);
            prop_assert!(r.normal_component <= 0.0);
            let foot = PhaseState::new(5.0 - r.exit_time, r.exit_point, r.exit_velocity);
            prop_assume!(!r.grazing);
            let back = tr.flow(&foot, 5.0).unwrap();
            prop_assert!((back.x - st.x).norm() < 1e-8 && (back.v - st.v).norm() < 1e-8);
        }
    }
}
