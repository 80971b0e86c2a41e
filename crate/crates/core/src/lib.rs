//! Segmented nonlinear mixed-effects change-point estimation from
//! left-censored longitudinal data.
//!
//! The crate fits a random change-point model in which each subject's
//! trajectory follows one mean function before an individual change point
//! and another after it, with Gaussian-latent random effects and
//! left-censored measurements. Estimation runs a stochastic EM loop: a
//! Gibbs sweep imputes the latent blocks and censored values per subject
//! (rejection sampling from each full conditional with the prior as
//! proposal), a closed-form M-step updates the parameters, and a
//! Geweke-statistic batch procedure decides stationarity. The tail of the
//! parameter chain is pooled into point estimates and standard errors.
//!
//! Also included: an empirical change-point baseline built from consecutive
//! viral-load pairs (used both as comparator and as the canonical
//! initializer), a synthetic-data generator, and a benchmark harness that
//! scores both methods against the generating truth.

pub mod baseline;
pub mod benchmark;
pub mod convergence;
pub mod error;
pub mod fisher;
mod gauss;
pub mod io;
pub mod model;
pub mod params;
pub mod samplers;
pub mod simgen;
pub mod stem;

pub use error::{Error, Result};
pub use model::{
    complete_data_loglik, eval_mean, latent_to_natural, log_censored_contribution,
    log_obs_density, LatentState, LoglikParts, ModelSpec, NaturalLatents, ObservationRecord,
    SubjectData, Theta,
};
pub use params::ParamIndex;
pub use samplers::GibbsConfig;
pub use stem::{ChainHistory, StemConfig};

/// Derives an independent 64-bit seed from a master seed and an index
/// (splitmix64 of their combination); used to hand parallel workers and
/// replicates their own streams.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
