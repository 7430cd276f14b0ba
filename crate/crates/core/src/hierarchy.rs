//! The model-facing contracts: a per-level sampling problem (unnormalized
//! log-posterior plus quantity of interest) and the factory that assembles
//! the level hierarchy.
//!
//! # Plugging in a forward model
//!
//! A forward model joins the engine by implementing [`SamplingProblem`]
//! for a single level and [`HierarchyFactory`] for the whole hierarchy.
//! Problems are constructed per worker group from the group's
//! communicator handle ([`GroupComm`]), mirroring how a distributed solver
//! would receive its subcommunicator. The runtime guarantees that one
//! problem instance is never evaluated concurrently from two chains.
//!
//! Quantities of interest are a separate, skippable call: rejected
//! proposals and burn-in states never pay for it.

use nalgebra::DVector;
use thiserror::Error;

use crate::probability::GaussianDensity;

/// Position of a model in the (linear) level hierarchy; 0 is coarsest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LevelIndex(pub usize);

impl LevelIndex {
    pub fn coarser(self) -> Option<LevelIndex> {
        self.0.checked_sub(1).map(LevelIndex)
    }
}

impl std::fmt::Display for LevelIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("starting point for level {level} has non-finite log-density")]
    InvalidStartingPoint { level: usize },
    #[error("parameter dimension decreases from level {coarse} ({coarse_dim}) to level {fine} ({fine_dim})")]
    ShrinkingDimension {
        coarse: usize,
        coarse_dim: usize,
        fine: usize,
        fine_dim: usize,
    },
    #[error("qoi dimension differs across levels: level 0 has {base}, level {level} has {got}")]
    InconsistentQoiDimension { base: usize, level: usize, got: usize },
    #[error("interpolation dimension mismatch: coarse {coarse} + extra {extra} != fine {fine}")]
    InterpolationMismatch { coarse: usize, extra: usize, fine: usize },
    #[error("model construction failed at level {level}: {reason}")]
    ModelConstruction { level: usize, reason: String },
}

/// Communicator handle handed to model constructors.
///
/// `rank`/`size` describe the evaluator's place in its worker group so
/// that internally parallel models can split work; `instance_seed` is a
/// stable per-assignment tag for model-internal randomness.
#[derive(Debug, Clone, Copy)]
pub struct GroupComm {
    pub rank: usize,
    pub size: usize,
    pub instance_seed: u64,
}

impl GroupComm {
    /// Single-evaluator communicator, used by in-line evaluation and tests.
    pub fn solo() -> Self {
        GroupComm { rank: 0, size: 1, instance_seed: 0 }
    }
}

/// One level of the hierarchy as seen by a chain: an unnormalized
/// log-posterior and a quantity of interest evaluated on demand.
pub trait SamplingProblem: Send {
    fn parameter_dim(&self) -> usize;

    /// Dimension of the quantity of interest; identical across all levels
    /// of one hierarchy.
    fn qoi_dim(&self) -> usize;

    /// Unnormalized log-posterior. Unphysical parameters yield negative
    /// infinity rather than an error.
    fn log_density(&mut self, theta: &DVector<f64>) -> f64;

    /// Quantity of interest at `theta`. Only called for states that
    /// actually enter the estimator.
    fn qoi(&mut self, theta: &DVector<f64>) -> DVector<f64>;
}

/// Likelihood-plus-prior posterior kept as separate factors and summed at
/// evaluation, so kernels can also reach the individual parts.
pub struct BayesianPosterior<L> {
    likelihood: L,
    prior: GaussianDensity,
    /// Optional support box; parameters outside get log-density -inf.
    support: Option<(DVector<f64>, DVector<f64>)>,
}

impl<L> BayesianPosterior<L>
where
    L: FnMut(&DVector<f64>) -> f64,
{
    pub fn new(likelihood: L, prior: GaussianDensity) -> Self {
        Self { likelihood, prior, support: None }
    }

    /// Restrict the prior support to the box `[lo, hi]` componentwise.
    pub fn with_support_box(mut self, lo: DVector<f64>, hi: DVector<f64>) -> Self {
        self.support = Some((lo, hi));
        self
    }

    pub fn log_prior(&self, theta: &DVector<f64>) -> f64 {
        if let Some((lo, hi)) = &self.support {
            let outside = theta
                .iter()
                .zip(lo.iter().zip(hi.iter()))
                .any(|(t, (l, h))| t < l || t > h);
            if outside {
                return f64::NEG_INFINITY;
            }
        }
        self.prior.log_density(theta)
    }

    pub fn log_likelihood(&mut self, theta: &DVector<f64>) -> f64 {
        (self.likelihood)(theta)
    }

    /// log L(y|theta) + log pi(theta), the unnormalized log-posterior.
    /// The likelihood is skipped entirely outside the prior support.
    pub fn log_posterior(&mut self, theta: &DVector<f64>) -> f64 {
        let lp = self.log_prior(theta);
        if lp == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let ll = self.log_likelihood(theta);
        if ll.is_nan() {
            return f64::NEG_INFINITY;
        }
        lp + ll
    }
}

/// Combines a coarse parameter with the extra fine components into a
/// level-l parameter, coarse components first. When dimensions agree
/// across levels the extra part is empty and the mapping is the identity.
#[derive(Debug, Clone, Copy)]
pub struct Interpolation {
    coarse_dim: usize,
    fine_dim: usize,
}

impl Interpolation {
    pub fn new(coarse_dim: usize, fine_dim: usize) -> Result<Self, HierarchyError> {
        if fine_dim < coarse_dim {
            return Err(HierarchyError::InterpolationMismatch {
                coarse: coarse_dim,
                extra: 0,
                fine: fine_dim,
            });
        }
        Ok(Self { coarse_dim, fine_dim })
    }

    pub fn extra_dim(&self) -> usize {
        self.fine_dim - self.coarse_dim
    }

    pub fn combine(
        &self,
        coarse: &DVector<f64>,
        fine_extra: &DVector<f64>,
    ) -> Result<DVector<f64>, HierarchyError> {
        if coarse.len() != self.coarse_dim || coarse.len() + fine_extra.len() != self.fine_dim {
            return Err(HierarchyError::InterpolationMismatch {
                coarse: coarse.len(),
                extra: fine_extra.len(),
                fine: self.fine_dim,
            });
        }
        if fine_extra.is_empty() {
            return Ok(coarse.clone());
        }
        let mut out = DVector::zeros(self.fine_dim);
        out.rows_mut(0, self.coarse_dim).copy_from(coarse);
        out.rows_mut(self.coarse_dim, fine_extra.len()).copy_from(fine_extra);
        Ok(out)
    }

    /// Inverse of [`combine`](Self::combine): splits a fine parameter into
    /// its coarse components and the fine remainder.
    pub fn split(&self, fine: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), HierarchyError> {
        if fine.len() != self.fine_dim {
            return Err(HierarchyError::InterpolationMismatch {
                coarse: self.coarse_dim,
                extra: self.extra_dim(),
                fine: fine.len(),
            });
        }
        let coarse = fine.rows(0, self.coarse_dim).into_owned();
        let extra = fine.rows(self.coarse_dim, self.extra_dim()).into_owned();
        Ok((coarse, extra))
    }
}

/// Everything the runtime needs to assemble chains on every level.
pub trait HierarchyFactory: Send + Sync {
    /// Index of the finest model the hierarchy provides.
    fn finest_index(&self) -> LevelIndex;

    /// Construct the sampling problem for one level. Called once per
    /// evaluator in a worker group, with that evaluator's communicator.
    fn sampling_problem(
        &self,
        level: LevelIndex,
        comm: &GroupComm,
    ) -> Result<Box<dyn SamplingProblem>, HierarchyError>;

    /// Proposal density for the fine components at `level`. For level 0
    /// this is the full random-walk proposal of the single-level chain;
    /// for equal-dimension hierarchies finer levels never use it.
    fn proposal(&self, level: LevelIndex) -> crate::chain::BoxedProposal;

    /// Number of coarse-chain steps discarded between successive proposals
    /// delivered from `level` to the next finer chain.
    fn subsampling_rate(&self, level: LevelIndex) -> usize;

    /// Component combiner mapping (coarse, fine extra) pairs to `level`
    /// parameters.
    fn interpolation(&self, level: LevelIndex) -> Interpolation;

    fn starting_point(&self, level: LevelIndex) -> DVector<f64>;
}

/// Construction-time checks: starting points must have finite log-density,
/// parameter dimensions must be non-decreasing, and the qoi dimension must
/// agree across levels.
pub fn validate_factory(factory: &dyn HierarchyFactory) -> Result<(), HierarchyError> {
    let finest = factory.finest_index().0;
    let comm = GroupComm::solo();
    let mut prev_dim = 0usize;
    let mut qoi_dim = None;
    for level in 0..=finest {
        let mut problem = factory.sampling_problem(LevelIndex(level), &comm)?;
        let dim = problem.parameter_dim();
        if level > 0 && dim < prev_dim {
            return Err(HierarchyError::ShrinkingDimension {
                coarse: level - 1,
                coarse_dim: prev_dim,
                fine: level,
                fine_dim: dim,
            });
        }
        prev_dim = dim;
        match qoi_dim {
            None => qoi_dim = Some(problem.qoi_dim()),
            Some(base) => {
                if problem.qoi_dim() != base {
                    return Err(HierarchyError::InconsistentQoiDimension {
                        base,
                        level,
                        got: problem.qoi_dim(),
                    });
                }
            }
        }
        let start = factory.starting_point(LevelIndex(level));
        if !problem.log_density(&start).is_finite() {
            return Err(HierarchyError::InvalidStartingPoint { level });
        }
    }
    Ok(())
}
