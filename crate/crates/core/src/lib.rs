//! Numerical persistence of stratifications of normally expanded laminations.
//!
//! The crate evaluates concrete endomorphisms of flat ambient spaces, builds
//! discrete stratifications (Cantor sets of real quadratic maps, products,
//! the Viana cylinder, the square), certifies normal expansion (direct orbit
//! inequalities, adapted metrics, cone fields, jet transfer), and runs the
//! graph-transform engine that continues every stratum under a perturbation
//! of the dynamics.
//!
//! All numerics are generic over the scalar type via [`num::Real`]
//! (`f32`/`f64`); the aliases below fix `f64`, which is what the CLI and the
//! acceptance suites use.

pub mod dynamics;
pub mod engine;
pub mod expansion;
pub mod num;
pub mod presets;
pub mod shadowing;
pub mod strata;

pub use num::Real;

/// Working point of the ambient space.
pub type Point<T> = nalgebra::DVector<T>;
/// Dense matrix of the working scalar.
pub type Matrix<T> = nalgebra::DMatrix<T>;

pub type Endomorphism64 = dynamics::EndomorphismSpec<f64>;
pub type Ambient64 = dynamics::AmbientSpace<f64>;
pub type Perturbation64 = dynamics::PerturbationSpec<f64>;
pub type Jet64 = dynamics::Jet<f64>;
pub type CantorSet64 = strata::CantorSet<f64>;
pub type Stratification64 = strata::SampledStratification<f64>;
pub type ExpansionReport64 = expansion::ExpansionReport;
pub type AdaptedMetric64 = expansion::AdaptedMetric<f64>;
pub type ConeField64 = expansion::ConeField<f64>;
pub type EmbeddingField64 = engine::EmbeddingField<f64>;
pub type Filtration64 = engine::Filtration;
pub type Point64 = Point<f64>;
