//! Run configuration read from a TOML file. Unknown keys are rejected and
//! every omitted key takes its default, which is written back into reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ConstantField, ForceField, ModulatedRadialField, RadialField};
use crate::geometry::LevelSetDomain;
use crate::picard::PicardGrid;
use crate::transport::SolverConfig;
use crate::vpb::VpbConfig;
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Ball,
    Ellipsoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub center: [f64; 3],
    /// Ball radius.
    pub radius: f64,
    /// Ellipsoid semi-axes.
    pub semi_axes: [f64; 3],
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            kind: DomainKind::Ball,
            center: [0.0; 3],
            radius: 1.0,
            semi_axes: [1.0, 1.0, 1.0],
        }
    }
}

impl DomainSpec {
    pub fn build(&self) -> Result<LevelSetDomain> {
        let c = Vec3::from(self.center);
        match self.kind {
            DomainKind::Ball if self.radius > 0.0 => Ok(LevelSetDomain::ball(c, self.radius)),
            DomainKind::Ellipsoid if self.semi_axes.iter().all(|&a| a > 0.0) => {
                Ok(LevelSetDomain::ellipsoid(c, Vec3::from(self.semi_axes)))
            }
            _ => Err(Error::Schema {
                key: "domain".into(),
                message: "radius and semi-axes must be positive".into(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    /// `E = k x`.
    Radial,
    /// `E = k (1 + t) x`.
    Modulated,
    /// `E = vector`.
    Constant,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSpec {
    pub kind: FieldKind,
    pub strength: f64,
    pub vector: [f64; 3],
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec {
            kind: FieldKind::Radial,
            strength: 1.0,
            vector: [0.0, 0.0, -1.0],
        }
    }
}

impl FieldSpec {
    pub fn build(&self) -> Box<dyn ForceField> {
        match self.kind {
            FieldKind::Radial => Box::new(RadialField { strength: self.strength }),
            FieldKind::Modulated => Box::new(ModulatedRadialField { strength: self.strength }),
            FieldKind::Constant => Box::new(ConstantField(Vec3::from(self.vector))),
            FieldKind::Zero => Box::new(ConstantField(Vec3::zeros())),
        }
    }
}

/// Sample counts and refinement levels of the suite checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSizes {
    /// Non-exiting trajectories per field for the Liouville check.
    pub trajectories: usize,
    /// Wall samples per field for the determinant checks.
    pub det_samples: usize,
    /// Velocities at which `Q(mu, mu)` is evaluated.
    pub collision_samples: usize,
    pub ks_samples: usize,
    pub lemma_trajectories: usize,
    pub cycles: usize,
    pub cycle_depth: usize,
    pub tail_trials: usize,
    pub tail_depth: usize,
    pub sweep_points: usize,
    pub key_states: usize,
    /// Cells per axis of the Green's-identity refinement study.
    pub green_levels: Vec<usize>,
    pub picard_iterations: usize,
    /// Radial shells of the two manufactured Poisson solves.
    pub poisson_levels: [usize; 2],
}

impl Default for SuiteSizes {
    fn default() -> Self {
        SuiteSizes {
            trajectories: 1000,
            det_samples: 100,
            collision_samples: 20,
            ks_samples: 20_000,
            lemma_trajectories: 1000,
            cycles: 10_000,
            cycle_depth: 60,
            tail_trials: 20_000,
            tail_depth: 20,
            sweep_points: 50,
            key_states: 20,
            green_levels: vec![8, 12, 16, 24, 32],
            picard_iterations: 6,
            poisson_levels: [6, 12],
        }
    }
}

/// Names accepted in `checks`, in execution order.
pub const CHECK_NAMES: [&str; 12] = [
    "liouville",
    "boundary-jacobian",
    "wall-jacobians",
    "collision",
    "wall-law",
    "velocity-lemma",
    "cycles",
    "singular-integrals",
    "transport",
    "picard",
    "vpb",
    "sign-condition",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,
    /// Multiplies every pass/fail tolerance.
    pub tolerance_scale: f64,
    pub checks: Vec<String>,
    pub domain: DomainSpec,
    pub field: FieldSpec,
    pub solver: SolverConfig,
    pub picard: PicardGrid,
    pub vpb: VpbConfig,
    pub sizes: SuiteSizes,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: "out".into(),
            tolerance_scale: 1.0,
            checks: CHECK_NAMES.iter().map(|s| s.to_string()).collect(),
            domain: DomainSpec::default(),
            field: FieldSpec::default(),
            solver: SolverConfig::default(),
            picard: PicardGrid::default(),
            vpb: VpbConfig::default(),
            sizes: SuiteSizes::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance_scale > 0.0) {
            return Err(Error::Schema {
                key: "tolerance_scale".into(),
                message: "must be positive".into(),
            });
        }
        for c in &self.checks {
            if !CHECK_NAMES.contains(&c.as_str()) {
                return Err(Error::Schema {
                    key: "checks".into(),
                    message: format!("unknown check `{c}`; expected one of {}", CHECK_NAMES.join(", ")),
                });
            }
        }
        self.domain.build()?;
        self.solver.validate()?;
        self.picard.validate()?;
        self.vpb.validate()
    }
}

/// Parses and validates TOML text.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1));
        let msg = e.message().to_string();
        let key = msg
            .strip_prefix("unknown field `")
            .and_then(|rest| rest.split('`').next())
            .map(str::to_string)
            .or_else(|| line.map(|l| format!("line {l}")))
            .unwrap_or_else(|| "<root>".into());
        let message = match line {
            Some(l) => format!("line {l}: {msg}"),
            None => msg,
        };
        Error::Schema { key, message }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_defaults() {
        let cfg = parse_config_str("[domain]\nkind = \"ball\"\n[field]\nkind = \"radial\"\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config_str("fild = 1\n").unwrap_err();
        match err {
            Error::Schema { key, message } => {
                assert_eq!(key, "fild");
                assert!(message.contains("line 1"), "{message}");
            }
            e => panic!("{e}"),
        }
        let nested = parse_config_str("[field]\nstrenght = 2.0\n").unwrap_err();
        assert!(matches!(nested, Error::Schema { ref key, .. } if key == "strenght"));
    }

    #[test]
    fn theta_outside_window() {
        let err = parse_config_str("[solver]\ntheta = 0.3\n").unwrap_err();
        match err {
            Error::Schema { key, message } => {
                assert_eq!(key, "theta");
                assert!(message.contains("1/4"), "{message}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn defaults_round_trip() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), RunConfig::default());
    }
}
