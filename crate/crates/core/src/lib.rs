//! Bayesian inversion for electrical impedance tomography under the
//! complete electrode model.
//!
//! The crate is organised bottom-up:
//!
//! * [`mesh`]: structured triangulations of the unit disk with boundary electrodes.
//! * [`sparse`]: ordering and sparse Cholesky factorization used by the forward solver.
//! * [`forward`]: P1 finite element assembly and solution of the electrode model.
//! * [`fields`]: spectral sampling of Whittle-Matérn type Gaussian fields.
//! * [`priors`]: log-Gaussian, star-shaped and level-set maps to conductivities.
//! * [`inference`]: misfit potential, pCN / random-walk moves and chain execution.
//! * [`diagnostics`]: effective sample size, kernel density estimates, misfit tables.
//! * [`truth`]: the two reference conductivities used to synthesise data.
//! * [`config`]: JSON run configuration with strict key checking.
//! * [`raster`]: PPM heatmaps of per-triangle values.
//! * [`pipeline`]: staged experiment orchestration used by the `eit` binary.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod fields;
pub mod forward;
pub mod inference;
pub mod mesh;
pub mod pipeline;
pub mod priors;
pub mod raster;
pub mod sparse;
pub mod truth;

pub use error::{Error, Result};
