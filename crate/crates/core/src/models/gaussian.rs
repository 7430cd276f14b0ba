//! Analytic Gaussian hierarchy: per-level Gaussian posteriors with the
//! parameter itself as the quantity of interest. Posterior means and
//! covariances are known in closed form, which makes this the oracle
//! model for end-to-end statistical checks.

use nalgebra::{DMatrix, DVector};

use crate::chain::{AdaptiveMetropolis, BoxedProposal, GaussianRandomWalk};
use crate::hierarchy::{
    GroupComm, HierarchyError, HierarchyFactory, Interpolation, LevelIndex, SamplingProblem,
};
use crate::probability::GaussianDensity;

use super::ProposalSettings;

/// Per-level Gaussian targets; a scalar mean and standard deviation per
/// level, replicated across `dim` coordinates.
#[derive(Debug, Clone)]
pub struct GaussianSpec {
    pub dim: usize,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl GaussianSpec {
    /// Identical standard normals on every level.
    pub fn identical(dim: usize, levels: usize) -> Self {
        Self { dim, means: vec![0.0; levels], stds: vec![1.0; levels] }
    }

    /// Level-dependent means 1 - 2^{-l} with unit variance, a hierarchy
    /// that converges geometrically towards mean 1.
    pub fn shifted(dim: usize, levels: usize) -> Self {
        Self {
            dim,
            means: (0..levels).map(|l| 1.0 - 0.5f64.powi(l as i32)).collect(),
            stds: vec![1.0; levels],
        }
    }

    pub fn levels(&self) -> usize {
        self.means.len()
    }

    /// Closed-form posterior mean of the qoi on one level.
    pub fn exact_mean(&self, level: usize) -> DVector<f64> {
        DVector::from_element(self.dim, self.means[level])
    }

    pub fn density(&self, level: usize) -> GaussianDensity {
        GaussianDensity::isotropic(
            DVector::from_element(self.dim, self.means[level]),
            self.stds[level] * self.stds[level],
        )
        .expect("positive std")
    }
}

pub struct GaussianProblem {
    density: GaussianDensity,
}

impl GaussianProblem {
    pub fn new(density: GaussianDensity) -> Self {
        Self { density }
    }
}

impl SamplingProblem for GaussianProblem {
    fn parameter_dim(&self) -> usize {
        self.density.dim()
    }

    fn qoi_dim(&self) -> usize {
        self.density.dim()
    }

    fn log_density(&mut self, theta: &DVector<f64>) -> f64 {
        self.density.log_density(theta)
    }

    fn qoi(&mut self, theta: &DVector<f64>) -> DVector<f64> {
        theta.clone()
    }
}

pub struct GaussianHierarchy {
    spec: GaussianSpec,
    subsampling: Vec<usize>,
    proposal: ProposalSettings,
}

impl GaussianHierarchy {
    pub fn new(spec: GaussianSpec, subsampling: Vec<usize>, proposal: ProposalSettings) -> Self {
        assert_eq!(spec.means.len(), spec.stds.len());
        Self { spec, subsampling, proposal }
    }

    pub fn spec(&self) -> &GaussianSpec {
        &self.spec
    }
}

impl HierarchyFactory for GaussianHierarchy {
    fn finest_index(&self) -> LevelIndex {
        LevelIndex(self.spec.levels() - 1)
    }

    fn sampling_problem(
        &self,
        level: LevelIndex,
        _comm: &GroupComm,
    ) -> Result<Box<dyn SamplingProblem>, HierarchyError> {
        Ok(Box::new(GaussianProblem::new(self.spec.density(level.0))))
    }

    fn proposal(&self, _level: LevelIndex) -> BoxedProposal {
        build_proposal(self.spec.dim, &self.proposal)
    }

    fn subsampling_rate(&self, level: LevelIndex) -> usize {
        self.subsampling.get(level.0).copied().unwrap_or(0)
    }

    fn interpolation(&self, _level: LevelIndex) -> Interpolation {
        Interpolation::new(self.spec.dim, self.spec.dim).expect("equal dims")
    }

    fn starting_point(&self, level: LevelIndex) -> DVector<f64> {
        self.spec.exact_mean(level.0)
    }
}

pub(super) fn build_proposal(dim: usize, settings: &ProposalSettings) -> BoxedProposal {
    if settings.adaptive {
        Box::new(AdaptiveMetropolis::new(
            DMatrix::identity(dim, dim) * settings.initial_variance,
            settings.adapt_interval,
            settings.adapt_epsilon,
        ))
    } else {
        Box::new(GaussianRandomWalk::isotropic(dim, settings.initial_variance))
    }
}
