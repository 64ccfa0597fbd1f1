use std::sync::Arc;

use kinetic_core::collision::CollisionKernel;
use kinetic_core::picard::perturbed_initial;
use kinetic_core::poisson::{sample_cells, solve_neumann_poisson, PoissonConfig, PoissonMesh};
use kinetic_core::transport::SolverConfig;
use kinetic_core::vpb::{potential_diagnostics, vpb_iterate, ExternalPotential, QuadraticPotential, VpbConfig};
use kinetic_core::{LevelSetDomain, Vec3};

/// Dense search of `|g(x) - g(y)| / |x - y|^gamma` for `g = (2 - 2|x|^2) x` on
/// the unit ball; by symmetry `x = (a, 0, 0)` and `y` in the `x1 x2` plane.
fn analytic_seminorm(gamma: f64) -> f64 {
    let g = |p: Vec3| (2.0 - 2.0 * p.norm_squared()) * p;
    let mut best: f64 = 0.0;
    for ia in 0..=200 {
        let a = ia as f64 / 200.0;
        for ib in 0..=200 {
            let b = ib as f64 / 200.0;
            for ip in 0..=120 {
                let psi = std::f64::consts::PI * ip as f64 / 120.0;
                let x = Vec3::new(a, 0.0, 0.0);
                let y = Vec3::new(b * psi.cos(), b * psi.sin(), 0.0);
                let d = (x - y).norm();
                if d > 0.0 {
                    best = best.max((g(x) - g(y)).norm() / d.powf(gamma));
                }
            }
        }
    }
    best
}

#[test]
fn holder_proxy_matches_radial_profile() {
    let mesh = Arc::new(PoissonMesh::spherical(Vec3::zeros(), 1.0, 12, 12, 24));
    let dr = 1.0 / 12.0;
    let src = sample_cells(&mesh, |x| {
        let r0 = x.norm() - 0.5 * dr;
        let r1 = r0 + dr;
        6.0 * (r1.powi(5) - r0.powi(5)) / (r1.powi(3) - r0.powi(3)) - 6.0
    });
    let pot = solve_neumann_poisson(&mesh, &src, &PoissonConfig::default()).unwrap();
    let report = potential_diagnostics(&pot, 0.5, None).unwrap();
    let exact = analytic_seminorm(0.5);
    let rel = (report.holder_seminorm - exact).abs() / exact;
    assert!(rel < 0.1, "proxy {} analytic {exact}", report.holder_seminorm);
}

#[test]
fn potential_scales_with_perturbation() {
    let dom = LevelSetDomain::unit_ball();
    let cfg = SolverConfig::default();
    let external: Arc<dyn ExternalPotential> = Arc::new(QuadraticPotential {
        center: Vec3::zeros(),
        strength: 1.0,
    });
    let hessian = |eps: f64| {
        let vpb = VpbConfig {
            steps: 2,
            epsilon: eps,
            poisson: PoissonConfig {
                radial: 6,
                polar: 6,
                azimuth: 12,
                ..Default::default()
            },
            ..Default::default()
        };
        let h0 = perturbed_initial(eps, Vec3::zeros(), 0.6);
        let run = vpb_iterate(&cfg, &vpb, &dom, &CollisionKernel::default(), external.clone(), &h0).unwrap();
        let last = run.fields.last().unwrap();
        // The t = 0 level of every iterate is the datum itself, so its
        // potential isolates the response to the perturbation.
        let pot = &last.levels()[0];
        potential_diagnostics(pot, vpb.delta, None).unwrap().hessian_sup
    };
    let (a, b) = (hessian(0.05), hessian(0.1));
    eprintln!("hessian proxies {a} {b}");
    assert!(a > 0.0);
    assert!((b / a - 2.0).abs() < 0.4, "ratio {}", b / a);
}
