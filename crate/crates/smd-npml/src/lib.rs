//! Density estimation over smoothness-constrained cosine-series classes on a
//! bounded interval, plus simulation-based minimum-distance parameter
//! estimation built on top of it, and a Monte Carlo harness exercising both.

pub mod auxmodel;
pub mod families;
pub mod harness;
pub mod interval;
pub mod neldermead;
pub mod npml;
pub mod quadrature;
pub mod simulate;
pub mod smd;
pub mod spectral;

pub use auxmodel::AuxiliaryModel;
pub use interval::Interval;
pub use npml::{fit_npml, FitOptions, NpmlFit, Sample};
pub use quadrature::QuadratureRule;
pub use spectral::{embedding_constant, SpectralFunction};
