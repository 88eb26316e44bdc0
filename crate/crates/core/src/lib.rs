//! Trans-Gaussian distributional adjustment of gridded daily wind fields.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command line
//! and thread-level parallelism live in the `windadj` companion crate.
//!
//! Pipeline overview:
//!
//! 1. [`climatology`] removes a per-site trend + harmonic mean and fits an
//!    autoregressive model to the remainder.
//! 2. [`covariance`] fits a spatial model (Matérn or kernel-convolution
//!    nonstationary) to the temporally independent innovations.
//! 3. [`transform`] provides the Yeo-Johnson marginal transformation and
//!    its maximum-likelihood parameter.
//! 4. [`adjustment`] maps future simulations onto the observational
//!    distribution with one of the six operators M, MV, MC, MN, T1, TC, the
//!    last two choosing transformation parameters by minimizing the k-NN
//!    Kullback-Leibler divergence from [`divergence`] over clusters built by
//!    [`clustering`].
//! 5. [`simgen`] generates the skew-t / Gaussian-log-Gaussian validation
//!    fields and [`energy`] turns adjusted winds into hub-height power and
//!    revenue.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adjustment;
pub mod climatology;
pub mod clustering;
pub mod covariance;
pub mod divergence;
pub mod energy;
mod error;
pub mod field;
pub mod linalg;
pub mod math;
pub mod optim;
pub mod rng;
pub mod simgen;
pub mod stats;
pub mod transform;

pub use error::{Error, ErrorKind, Result};
pub use field::{Calendar, Site, SpatioTemporalField};
