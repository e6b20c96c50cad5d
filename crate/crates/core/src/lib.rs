//! Estimation of participation factors for oscillatory modes of linear
//! systems directly from measured response trajectories.
//!
//! The crate has two sides. The model-based side ([`linmodel`]) computes
//! participation factors from the state matrix via eigenanalysis and serves
//! as the validation oracle. The measurement-based side runs a four-step
//! pipeline on trajectory data alone:
//!
//! 1. [`symmetry`] — select the most symmetric set of initial states from
//!    measured samples (KD-tree nearest-neighbor search around mirrored
//!    points),
//! 2. [`transform`] — build the linear map `H` sending the selected
//!    parallelotope to a hyperrectangle, where the symmetric condition
//!    holds,
//! 3. [`estimator`] — fit modal amplitudes per response segment
//!    ([`prony`]) and average them into extended participation factors,
//! 4. back-transformation of the factors to the original coordinates.
//!
//! [`simgen`] produces synthetic datasets for validation and
//! [`diagnostics`] provides the error indices and sampling-matrix
//! conditioning analysis that qualify an estimate.

pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod linmodel;
pub mod prony;
pub mod simgen;
pub mod symmetry;
pub mod transform;

mod linalg;

pub use error::{Error, Result};
