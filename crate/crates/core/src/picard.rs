//! Deterministic Picard iteration for the nonlinear problem with diffuse
//! reflection on a coarse product grid.
//!
//! The unknown is stored as `h = f / sqrt(mu)`, in which the iteration reads
//! `{D - v . E + nu(mu h^m)} h^{m+1} = G(h^m)` with
//! `nu(mu h)(v) = int int B mu(u) h(u)` and `G(h)(v) = int int B mu(u) h(u') h(v')`.
//! Both use the same discrete rule, so `h = 1` is reproduced exactly when `E = 0`,
//! and the diffuse wall returns the wall-law average of `h`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{PhaseState, Tracer};
use crate::collision::{post_collision, scatter_rule, sqrt_maxwellian, CollisionKernel};
use crate::error::{Error, Result};
use crate::geometry::Frame;
use crate::quad::normal_hermite;
use crate::transport::{backward_path, Foot, SolverConfig};
use crate::wall::wall_law_rule;
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PicardGrid {
    /// Box nodes per axis; nodes outside the domain sit at their projection.
    pub space: usize,
    /// Gauss–Hermite nodes per velocity axis.
    pub velocity: usize,
    /// Stored time levels on `[0, T]`.
    pub time_levels: usize,
    pub scatter: usize,
    pub scatter_azimuth: usize,
    pub wall_normal: usize,
    pub wall_tangential: usize,
}

impl Default for PicardGrid {
    fn default() -> Self {
        PicardGrid {
            space: 5,
            velocity: 4,
            time_levels: 3,
            scatter: 2,
            scatter_azimuth: 4,
            wall_normal: 4,
            wall_tangential: 3,
        }
    }
}

impl PicardGrid {
    pub fn validate(&self) -> Result<()> {
        if self.space < 2 || self.velocity < 2 || self.time_levels < 2 {
            return Err(Error::Schema {
                key: "picard".into(),
                message: "space, velocity and time_levels must be at least 2".into(),
            });
        }
        if self.space > 12 || self.velocity > 12 {
            return Err(Error::Schema {
                key: "picard".into(),
                message: "grid mode is limited to 12 nodes per axis".into(),
            });
        }
        Ok(())
    }
}

/// Node layout shared by every field on the grid.
#[derive(Debug)]
pub struct GridGeometry {
    lo: Vec3,
    step: Vec3,
    n_x: usize,
    /// Node positions, projected onto the wall for box nodes outside.
    pub positions: Vec<Vec3>,
    pub times: Vec<f64>,
    /// Gauss–Hermite nodes and normal-density weights per velocity axis.
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GridGeometry {
    pub fn new(tracer: &Tracer<'_>, grid: &PicardGrid, horizon: f64) -> Result<Self> {
        let domain = tracer.domain;
        let samples = domain.boundary_samples(2000);
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &samples {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let pad = 0.01 * (hi - lo);
        lo -= pad;
        hi += pad;
        let n_x = grid.space;
        let step = (hi - lo) / (n_x - 1) as f64;
        let mut positions = Vec::with_capacity(n_x.pow(3));
        for i in 0..n_x {
            for j in 0..n_x {
                for k in 0..n_x {
                    let p = lo + Vec3::new(i as f64 * step[0], j as f64 * step[1], k as f64 * step[2]);
                    positions.push(if domain.value(&p) <= 0.0 { p } else { domain.project(&p)?.point });
                }
            }
        }
        let times = (0..grid.time_levels)
            .map(|k| horizon * k as f64 / (grid.time_levels - 1) as f64)
            .collect();
        let (nodes, weights) = normal_hermite(grid.velocity).into_iter().unzip();
        Ok(GridGeometry {
            lo,
            step,
            n_x,
            positions,
            times,
            nodes,
            weights,
        })
    }

    /// Box spacing per axis.
    pub fn spacing(&self) -> Vec3 {
        self.step
    }

    fn n_v(&self) -> usize {
        self.nodes.len()
    }

    fn per_level(&self) -> usize {
        self.positions.len() * self.n_v().pow(3)
    }

    pub fn len(&self) -> usize {
        self.times.len() * self.per_level()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn index(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.positions.len() + i) * self.n_v().pow(3) + j
    }

    /// Velocity at flat index `j`.
    pub fn velocity(&self, j: usize) -> Vec3 {
        let n = self.n_v();
        Vec3::new(self.nodes[j / (n * n)], self.nodes[(j / n) % n], self.nodes[j % n])
    }

    fn velocity_weight(&self, j: usize) -> f64 {
        let n = self.n_v();
        self.weights[j / (n * n)] * self.weights[(j / n) % n] * self.weights[j % n]
    }

    /// Lagrange basis on the velocity nodes at `c`, clamped to the node range.
    fn lagrange(&self, c: f64) -> Vec<f64> {
        let xs = &self.nodes;
        let c = c.clamp(xs[0], xs[xs.len() - 1]);
        (0..xs.len())
            .map(|a| {
                let mut l = 1.0;
                for b in 0..xs.len() {
                    if b != a {
                        l *= (c - xs[b]) / (xs[a] - xs[b]);
                    }
                }
                l
            })
            .collect()
    }

    /// Trilinear stencil `(node, weight)` for `x`, clamped into the box.
    pub(crate) fn space_stencil(&self, x: &Vec3) -> [(usize, f64); 8] {
        let mut idx = [0usize; 3];
        let mut frac = [0.0; 3];
        for d in 0..3 {
            let s = ((x[d] - self.lo[d]) / self.step[d]).clamp(0.0, (self.n_x - 1) as f64);
            let i = (s.floor() as usize).min(self.n_x - 2);
            idx[d] = i;
            frac[d] = s - i as f64;
        }
        let mut out = [(0usize, 0.0); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let (a, b, e) = (c >> 2 & 1, c >> 1 & 1, c & 1);
            let w = (if a == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if b == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if e == 1 { frac[2] } else { 1.0 - frac[2] });
            let node = ((idx[0] + a) * self.n_x + idx[1] + b) * self.n_x + idx[2] + e;
            *slot = (node, w);
        }
        out
    }

    pub(crate) fn time_stencil(&self, t: f64) -> [(usize, f64); 2] {
        let ts = &self.times;
        let last = ts.len() - 1;
        if t <= ts[0] {
            return [(0, 1.0), (0, 0.0)];
        }
        if t >= ts[last] {
            return [(last, 1.0), (last, 0.0)];
        }
        let k = ts.partition_point(|&s| s <= t).min(last) - 1;
        let w = (t - ts[k]) / (ts[k + 1] - ts[k]);
        [(k, 1.0 - w), (k + 1, w)]
    }
}

/// Values of `h` (or a coefficient) at every grid node.
#[derive(Clone, Debug)]
pub struct GridField {
    pub geometry: Arc<GridGeometry>,
    pub values: Vec<f64>,
}

impl GridField {
    fn filled(geometry: Arc<GridGeometry>, value: f64) -> Self {
        let n = geometry.len();
        GridField {
            geometry,
            values: vec![value; n],
        }
    }

    pub fn at(&self, k: usize, i: usize, j: usize) -> f64 {
        self.values[self.geometry.index(k, i, j)]
    }

    fn velocity_interp(&self, base: usize, v: &Vec3) -> f64 {
        let g = &self.geometry;
        let n = g.n_v();
        let (la, lb, lc) = (g.lagrange(v[0]), g.lagrange(v[1]), g.lagrange(v[2]));
        let mut acc = 0.0;
        for a in 0..n {
            let mut s1 = 0.0;
            for b in 0..n {
                let row = base + (a * n + b) * n;
                let mut s2 = 0.0;
                for c in 0..n {
                    s2 += lc[c] * self.values[row + c];
                }
                s1 += lb[b] * s2;
            }
            acc += la[a] * s1;
        }
        acc
    }

    /// Linear in `t`, trilinear in `x`, tensor Lagrange in `v`.
    pub fn eval(&self, t: f64, x: &Vec3, v: &Vec3) -> f64 {
        let g = &self.geometry;
        let mut acc = 0.0;
        for (k, wt) in g.time_stencil(t) {
            if wt == 0.0 {
                continue;
            }
            for (i, wx) in g.space_stencil(x) {
                if wx == 0.0 {
                    continue;
                }
                acc += wt * wx * self.velocity_interp(g.index(k, i, 0), v);
            }
        }
        acc
    }

    /// `max e^{theta |v|^2} sqrt(mu)(v) |h|` over the nodes of the given levels.
    pub fn weighted_sup(&self, theta: f64, levels: std::ops::Range<usize>) -> f64 {
        let g = &self.geometry;
        let nv3 = g.n_v().pow(3);
        let mut best: f64 = 0.0;
        for k in levels {
            for i in 0..g.positions.len() {
                for j in 0..nv3 {
                    let v = g.velocity(j);
                    let w = (theta * v.norm_squared()).exp() * sqrt_maxwellian(&v);
                    best = best.max(w * self.at(k, i, j).abs());
                }
            }
        }
        best
    }

    /// `rho = int mu h dv` at every space node of level `k`.
    pub fn density_nodes(&self, k: usize) -> Vec<f64> {
        let g = &self.geometry;
        let nv3 = g.n_v().pow(3);
        (0..g.positions.len())
            .map(|i| (0..nv3).map(|j| g.velocity_weight(j) * self.at(k, i, j)).sum())
            .collect()
    }

    /// Weighted sup of `f - other` over all levels.
    pub fn weighted_distance(&self, other: &GridField, theta: f64) -> f64 {
        let diff = GridField {
            geometry: self.geometry.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        };
        diff.weighted_sup(theta, 0..self.geometry.times.len())
    }
}

/// Discrete `nu(mu h)` and `G(h)` at every node.
fn collision_fields(h: &GridField, kernel: &CollisionKernel, grid: &PicardGrid) -> (GridField, GridField) {
    let g = h.geometry.clone();
    let nv3 = g.n_v().pow(3);
    let sc = scatter_rule(grid.scatter, grid.scatter_azimuth);
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..g.times.len() * g.positions.len())
        .into_par_iter()
        .map(|block| {
            let base = block * nv3;
            let mut nu = vec![0.0; nv3];
            let mut gain = vec![0.0; nv3];
            for j in 0..nv3 {
                let v = g.velocity(j);
                for l in 0..nv3 {
                    let u = g.velocity(l);
                    let w = v - u;
                    let r = w.norm();
                    if r == 0.0 {
                        continue;
                    }
                    let frame = Frame::from_normal(&w);
                    let scale = g.velocity_weight(l) * r.powf(kernel.kappa);
                    let hu = h.values[base + l];
                    for &(c, a, b, wo) in &sc {
                        let om = c * frame.normal + a * frame.tau1 + b * frame.tau2;
                        let bw = scale * wo * kernel.q0(c);
                        let (up, vp) = post_collision(&u, &v, &om);
                        nu[j] += bw * hu;
                        gain[j] += bw * h.velocity_interp(base, &up) * h.velocity_interp(base, &vp);
                    }
                }
            }
            (nu, gain)
        })
        .collect();
    let mut nu = GridField::filled(g.clone(), 0.0);
    let mut gain = GridField::filled(g, 0.0);
    for (b, (n, q)) in blocks.into_iter().enumerate() {
        nu.values[b * nv3..(b + 1) * nv3].copy_from_slice(&n);
        gain.values[b * nv3..(b + 1) * nv3].copy_from_slice(&q);
    }
    (nu, gain)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PicardMonitor {
    pub iteration: usize,
    /// `sup e^{theta' |v|^2} |f^m|` over the grid.
    pub weighted_sup: f64,
    /// `weighted_sup / sup e^{theta |v|^2} |f_0|`.
    pub ratio_to_initial: f64,
    /// `sup e^{theta' |v|^2} |f^m - f^{m-1}|`.
    pub difference: f64,
    /// Interior nodes whose characteristic touched the wall tangentially;
    /// they keep the previous value.
    pub grazing_fallbacks: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct PicardRun {
    pub initial_norm: f64,
    pub monitors: Vec<PicardMonitor>,
    /// Largest observed ratio to the initial norm.
    pub fitted_c1: f64,
    /// Geometric-mean ratio of successive differences.
    pub contraction: f64,
    #[serde(skip)]
    pub fields: Vec<GridField>,
}

impl PicardRun {
    pub fn assemble(initial_norm: f64, monitors: Vec<PicardMonitor>, fields: Vec<GridField>) -> Self {
        PicardRun {
            initial_norm,
            fitted_c1: monitors.iter().map(|m| m.ratio_to_initial).fold(0.0, f64::max),
            contraction: contraction_ratio(&monitors),
            monitors,
            fields,
        }
    }

    pub fn last(&self) -> &GridField {
        self.fields.last().expect("at least the initial iterate")
    }
}

fn initial_field(geometry: &Arc<GridGeometry>, h0: &(dyn Fn(&Vec3, &Vec3) -> f64 + Sync), level0_only: bool) -> GridField {
    let mut out = GridField::filled(geometry.clone(), 1.0);
    let nv3 = geometry.n_v().pow(3);
    let levels = if level0_only { 1 } else { geometry.times.len() };
    for k in 0..levels {
        for (i, x) in geometry.positions.iter().enumerate() {
            for j in 0..nv3 {
                let idx = geometry.index(k, i, j);
                out.values[idx] = h0(x, &geometry.velocity(j));
            }
        }
    }
    out
}

/// Grid, wall rule and initial datum shared by every Picard step.
pub struct PicardSolver<'a> {
    pub config: SolverConfig,
    pub grid: PicardGrid,
    kernel: &'a CollisionKernel,
    h0: &'a (dyn Fn(&Vec3, &Vec3) -> f64 + Sync),
    pub geometry: Arc<GridGeometry>,
    wall: Vec<(Vec3, f64)>,
    /// `h0` copied to every time level; the wall datum of the first step.
    f0: GridField,
    /// `sup e^{theta |v|^2} |f_0|` at `t = 0`.
    pub initial_norm: f64,
}

impl<'a> PicardSolver<'a> {
    pub fn new(
        config: &SolverConfig,
        grid: &PicardGrid,
        tracer: &Tracer<'_>,
        kernel: &'a CollisionKernel,
        h0: &'a (dyn Fn(&Vec3, &Vec3) -> f64 + Sync),
    ) -> Result<Self> {
        config.validate()?;
        grid.validate()?;
        let geometry = Arc::new(GridGeometry::new(tracer, grid, config.horizon)?);
        let f0 = initial_field(&geometry, h0, false);
        let initial_norm = f0.weighted_sup(config.theta, 0..1);
        Ok(PicardSolver {
            config: *config,
            grid: *grid,
            kernel,
            h0,
            wall: wall_law_rule(grid.wall_normal, grid.wall_tangential),
            geometry,
            f0,
            initial_norm,
        })
    }

    /// `h0` on every time level.
    pub fn initial(&self) -> &GridField {
        &self.f0
    }

    /// `h^0 = 1`, i.e. `f^0 = sqrt(mu)`.
    pub fn equilibrium(&self) -> GridField {
        GridField::filled(self.geometry.clone(), 1.0)
    }

    /// One step `h^m -> h^{m+1}` along the characteristics of `tracer`.
    /// `m` selects the wall datum: `h0` for the first step, `h^m` after.
    pub fn step(&self, tracer: &Tracer<'_>, hm: &GridField, m: usize) -> Result<(GridField, PicardMonitor)> {
        let geometry = &self.geometry;
        let h0 = self.h0;
        let nv3 = geometry.n_v().pow(3);
        let per_level = geometry.per_level();
        let (nu, gain) = collision_fields(hm, self.kernel, &self.grid);
        let previous = if m == 0 { &self.f0 } else { hm };
        let wall_average = |t: f64, x: &Vec3| -> Result<f64> {
            let frame = tracer.domain.tangent_frame(x)?;
            Ok(self.wall.iter().map(|(c, w)| w * previous.eval(t, x, &frame.compose(c))).sum())
        };
        let aux_nu = |s: f64, x: &Vec3, v: &Vec3, e: &Vec3| nu.eval(s, x, v) - v.dot(e);
        let aux_gain = |s: f64, x: &Vec3, v: &Vec3| gain.eval(s, x, v);
        let solved: Vec<(f64, bool)> = (per_level..geometry.len())
            .into_par_iter()
            .map(|idx| -> Result<(f64, bool)> {
                let k = idx / per_level;
                let i = (idx % per_level) / nv3;
                let j = idx % nv3;
                let st = PhaseState::new(geometry.times[k], geometry.positions[i], geometry.velocity(j));
                match backward_path(tracer, &st, aux_nu, aux_gain) {
                    Ok((damping, source, foot)) => {
                        let datum = match foot {
                            Foot::Initial { x, v } => h0(&x, &v),
                            Foot::Wall { t, x, .. } => wall_average(t, &x)?,
                        };
                        Ok(((-damping).exp() * datum + source, false))
                    }
                    // A grazing wall node takes the diffuse datum, its limit
                    // from the incoming side.
                    Err(Error::GrazingAmbiguous { .. }) if tracer.domain.on_boundary(&st.x) => {
                        Ok((wall_average(st.t, &st.x)?, false))
                    }
                    Err(Error::GrazingAmbiguous { .. }) => Ok((hm.values[idx], true)),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        let mut next = GridField {
            geometry: geometry.clone(),
            values: self.f0.values.clone(),
        };
        let mut fallbacks = 0;
        for (off, (val, fell_back)) in solved.into_iter().enumerate() {
            next.values[per_level + off] = val;
            fallbacks += fell_back as usize;
        }
        let theta_p = self.config.theta_prime();
        let weighted_sup = next.weighted_sup(theta_p, 0..geometry.times.len());
        let monitor = PicardMonitor {
            iteration: m + 1,
            weighted_sup,
            ratio_to_initial: weighted_sup / self.initial_norm,
            difference: next.weighted_distance(hm, theta_p),
            grazing_fallbacks: fallbacks,
        };
        Ok((next, monitor))
    }
}

/// Runs `m_max` Picard steps from `f^0 = sqrt(mu)` with initial datum
/// `f_0 = sqrt(mu) h0`. Index 0 of `fields` is `h^0 = 1`.
pub fn picard_iterate(
    config: &SolverConfig,
    grid: &PicardGrid,
    tracer: &Tracer<'_>,
    kernel: &CollisionKernel,
    h0: &(dyn Fn(&Vec3, &Vec3) -> f64 + Sync),
    m_max: usize,
) -> Result<PicardRun> {
    let solver = PicardSolver::new(config, grid, tracer, kernel, h0)?;
    let mut fields = vec![solver.equilibrium()];
    let mut monitors = Vec::new();
    for m in 0..m_max {
        let (next, monitor) = solver.step(tracer, fields.last().expect("iterate"), m)?;
        monitors.push(monitor);
        fields.push(next);
    }
    Ok(PicardRun::assemble(solver.initial_norm, monitors, fields))
}

/// Geometric mean of `d_{m+1} / d_m` from the second difference on (the
/// first one compares against `sqrt(mu)` rather than an iterate).
pub fn contraction_ratio(monitors: &[PicardMonitor]) -> f64 {
    let d: Vec<f64> = monitors.iter().skip(1).map(|m| m.difference).collect();
    if d.len() < 2 {
        return f64::NAN;
    }
    if d.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let logs: Vec<f64> = d
        .windows(2)
        .map(|w| (w[1].max(1e-300) / w[0].max(1e-300)).ln())
        .collect();
    (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

/// `h0 = 1 + eps * b(x, v)` with `b = exp(-4|x - c|^2) (1 + v_1 s(x))`, where
/// `s` vanishes near the wall, so the datum is compatible with diffuse
/// reflection (its wall trace is independent of `v`).
pub fn perturbed_initial(eps: f64, center: Vec3, inner_radius: f64) -> impl Fn(&Vec3, &Vec3) -> f64 + Sync {
    move |x: &Vec3, v: &Vec3| {
        let d2 = (x - center).norm_squared();
        let shell = (1.0 - d2 / (inner_radius * inner_radius)).max(0.0).powi(3);
        1.0 + eps * (-4.0 * d2).exp() * (1.0 + 0.5 * v[0] * shell)
    }
}

/// Largest `|f_0 - g(f_0)|` over sampled incoming wall states, in units of
/// `sqrt(mu)(v)`: the compatibility of `f_0 = sqrt(mu) h0` with the wall law.
pub fn compatibility_defect(
    tracer: &Tracer<'_>,
    h0: &(dyn Fn(&Vec3, &Vec3) -> f64 + Sync),
    n_points: usize,
    wall_order: (usize, usize),
) -> Result<f64> {
    let wall = wall_law_rule(wall_order.0, wall_order.1);
    let mut worst: f64 = 0.0;
    for x in tracer.domain.boundary_samples(n_points) {
        let frame = tracer.domain.tangent_frame(&x)?;
        let avg: f64 = wall.iter().map(|(c, w)| w * h0(&x, &frame.compose(c))).sum();
        for c in [Vec3::new(-0.5, 0.3, 0.0), Vec3::new(-1.5, -0.7, 1.1), Vec3::new(-0.1, 2.0, -0.4)] {
            worst = worst.max((h0(&x, &frame.compose(&c)) - avg).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ConstantField;
    use crate::geometry::LevelSetDomain;

    fn small() -> PicardGrid {
        PicardGrid {
            space: 3,
            velocity: 3,
            time_levels: 2,
            ..PicardGrid::default()
        }
    }

    #[test]
    fn interpolation_reproduces_nodes_and_linears() {
        let dom = LevelSetDomain::unit_ball();
        let field = ConstantField(Vec3::zeros());
        let tracer = Tracer::new(&dom, &field);
        let g = Arc::new(GridGeometry::new(&tracer, &PicardGrid::default(), 0.1).unwrap());
        let h = initial_field(&g, &|x: &Vec3, v: &Vec3| 1.0 + 0.5 * x[0] - x[2] + v[1] * v[2], false);
        let x = Vec3::new(0.1, -0.2, 0.3);
        let v = Vec3::new(0.4, -0.5, 0.6);
        // Box nodes inside the ball keep their positions; this x lies in an
        // interior cell, so a linear function is reproduced.
        let got = h.eval(0.05, &x, &v);
        assert!((got - (1.0 + 0.05 - 0.3 - 0.3)).abs() < 1e-12, "{got}");
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let dom = LevelSetDomain::unit_ball();
        let field = ConstantField(Vec3::zeros());
        let tracer = Tracer::new(&dom, &field);
        let cfg = SolverConfig::default();
        let run = picard_iterate(&cfg, &small(), &tracer, &CollisionKernel::default(), &|_, _| 1.0, 2).unwrap();
        for m in &run.monitors {
            assert!(m.difference < 1e-6, "{m:?}");
        }
        assert!(run.last().values.iter().all(|h| (h - 1.0).abs() < 1e-6));
    }

    #[test]
    fn perturbed_datum_is_compatible() {
        let dom = LevelSetDomain::unit_ball();
        let field = ConstantField(Vec3::zeros());
        let tracer = Tracer::new(&dom, &field);
        let h0 = perturbed_initial(0.1, Vec3::zeros(), 0.6);
        assert!(compatibility_defect(&tracer, &h0, 50, (4, 3)).unwrap() < 1e-12);
        let bad = |x: &Vec3, v: &Vec3| 1.0 + 0.1 * v[0] * x[0];
        assert!(compatibility_defect(&tracer, &bad, 50, (4, 3)).unwrap() > 1e-3);
    }

    #[test]
    fn perturbation_stays_bounded_and_contracts() {
        let dom = LevelSetDomain::unit_ball();
        let field = ConstantField(Vec3::zeros());
        let tracer = Tracer::new(&dom, &field);
        let cfg = SolverConfig::default();
        let h0 = perturbed_initial(0.1, Vec3::zeros(), 0.6);
        let run = picard_iterate(&cfg, &small(), &tracer, &CollisionKernel::default(), &h0, 4).unwrap();
        eprintln!("{:#?}", run.monitors);
        assert!(run.fitted_c1 < 2.0);
        assert!(run.contraction < 0.5, "{}", run.contraction);
    }
}
