//! Monte Carlo estimation of determinant ratios of connection Laplacians on
//! flat tori, written as expectations of holonomy products over Brownian loop
//! soups, together with an exact Fourier-mode oracle for constant connections.
//!
//! Module map:
//!
//! * [`geometry`]: flat tori, heat kernel, bridge and winding samplers, mass
//!   functionals, conformal re-clocking of loops.
//! * [`connection`]: metric connections on trivial bundles and the midpoint
//!   exponential holonomy integrator.
//! * [`loopsoup`]: Poisson sampling of the massive loop soup with duration
//!   cutoffs, Campbell checks, and soup snapshots.
//! * [`estimator`]: product-over-soup and integral-form estimators, bias
//!   certificates, moment and cutoff-ladder diagnostics.
//! * [`spectral`]: mode-matrix spectra, heat traces, ζ'(0) differences,
//!   twisted heat and Green kernels.
//! * [`gff`]: twisted Gaussian free fields, annealed ensembles and Symanzik
//!   moment identities.
//!
//! Conventions used throughout: the operator is `L = ½∇*∇ + m`; a flat
//! abelian connection with parameter θ is `A = 2πi Σ_j θ_j dx_j / L_j`, so the
//! holonomy of a loop with winding `w` is `exp(−2πi θ·w)`; parallel transport
//! along a path solves `dU = −A(∘dW) U`.

pub mod connection;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod gff;
pub mod linalg;
pub mod loopsoup;
pub mod quadrature;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod validation;

pub use connection::{ConnectionForm, ConnectionSpec, FieldType, GroupElement};
pub use error::{Error, Result};
pub use estimator::{MomentReport, ProductEstimate};
pub use geometry::{LoopPath, MassField, StepsPolicy, TorusSpec};
pub use gff::{ConnectionEnsemble, Section, TwistedGFFSample};
pub use linalg::{CMat, C64};
pub use loopsoup::{LoopSoup, SoupConfig};
pub use spectral::SpectralModel;
