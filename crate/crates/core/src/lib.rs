//! Spatio-temporal latent Gaussian modelling of monthly precipitation summaries.
//!
//! The pipeline fits a generalised additive model whose predictor combines an
//! intercept, centred-coordinate and elevation effects, and a latent
//! spatio-temporal Gaussian field: a non-stationary Matern field (SPDE/GMRF
//! finite-element discretisation, elevation-driven log-linear range and
//! variance) evolving over the twelve months through AR(1) dynamics.
//! Observation models cover monthly mean precipitation (gamma), monthly
//! maxima (blended GEV), dry-spell lengths (negative binomial) and dry-day
//! counts (binomial). Inference is an INLA-style nested Laplace
//! approximation; outputs are gridded posterior summaries, T-year return
//! levels and period-difference maps.
//!
//! Module map:
//! - [`geodata`]: daily-record aggregation, coordinate centring, elevation rasters
//! - [`mesh`]: Delaunay-refined triangulation and barycentric projectors
//! - [`sparse`]: symmetric sparse matrices, Cholesky, partial inversion
//! - [`gmrf`]: FEM matrices, spatial/temporal precisions, Kronecker assembly
//! - [`likelihoods`]: observation models, links, derivatives, the blended GEV
//! - [`inference`]: Gaussian approximation, hyperparameter posterior, marginals
//! - [`predict`]: prediction grids, return-level grids, difference maps
//! - [`render`]: heatmap rendering (PPM always, PNG behind the `png` feature)
//! - [`simulate`]: synthetic-dataset generation with recorded truth

pub mod error;
pub mod geodata;
pub mod gmrf;
pub mod inference;
pub mod likelihoods;
pub mod mesh;
pub mod predict;
pub mod render;
pub mod simulate;
pub mod sparse;

pub use error::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Number of time points in the latent field (calendar months).
pub const N_MONTHS: usize = 12;
