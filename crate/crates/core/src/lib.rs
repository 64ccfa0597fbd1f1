//! Numerical toolkit for the Boltzmann equation with an external field in a
//! smooth convex domain with diffuse reflection.

pub mod balance;
pub mod characteristics;
pub mod collision;
pub mod config;
pub mod error;
pub mod field;
pub mod geometry;
pub mod picard;
pub mod poisson;
pub mod quad;
pub mod report;
pub mod singular;
pub mod suite;
pub mod transport;
pub mod vpb;
pub mod wall;
pub mod weight;

pub use characteristics::{ExitRecord, FlowJacobian, PhaseState, Tracer};
pub use error::{Error, Result};
pub use field::{ConstantField, FieldValue, ForceField, ModulatedRadialField, RadialField};
pub use geometry::{Frame, LevelSetDomain};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
