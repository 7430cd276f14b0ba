//! Reference forward models: the analytic Gaussian hierarchy (oracle),
//! the finite-difference Poisson inverse problem, and the synthetic
//! heterogeneous-runtime model used to stress the scheduler.

pub mod delay;
pub mod gaussian;
pub mod kl;
pub mod poisson;

pub use delay::{DelayHierarchy, DelaySpec};
pub use gaussian::{GaussianHierarchy, GaussianSpec};
pub use kl::KlField;
pub use poisson::{
    default_observation_points, generate_synthetic_data, PoissonHierarchy, PoissonSpec,
    SyntheticData,
};

/// Proposal configuration shared by the model factories.
#[derive(Debug, Clone)]
pub struct ProposalSettings {
    /// Variance of the isotropic initial proposal covariance.
    pub initial_variance: f64,
    /// Switch to the adaptive covariance after sampling begins.
    pub adaptive: bool,
    pub adapt_interval: usize,
    pub adapt_epsilon: f64,
}

impl Default for ProposalSettings {
    fn default() -> Self {
        Self { initial_variance: 1.0, adaptive: false, adapt_interval: 100, adapt_epsilon: 1e-6 }
    }
}
