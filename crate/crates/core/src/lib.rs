//! Semantic Gaussian maps from RGB-D observations, with per-primitive
//! geometric, semantic, and appearance uncertainty estimates.
//!
//! The pipeline: back-project RGB-D frames into point clouds
//! ([`geometry`]), initialize and optimize a map of 3D Gaussian
//! primitives against the observations ([`gaussians`], [`renderer`],
//! [`sgm`]), estimate per-primitive uncertainties by variational
//! perturbation inference and Fisher information ([`uncertainty`]),
//! and expose the resulting value map through spatial aggregation
//! queries ([`value_map`]).

pub mod check;
pub mod error;
pub mod geometry;
pub mod gaussians;
pub mod renderer;
pub mod rng;
pub mod sgm;
pub mod uncertainty;
pub mod value_map;

pub use error::CoreError;
