//! Synthetic heterogeneous-runtime model: the analytic Gaussian target
//! with a configurable sleep per density evaluation. Statistics stay
//! oracle-checkable while per-level runtimes differ by orders of
//! magnitude, which is exactly what the scheduler needs to be stressed.

use std::time::Duration;

use nalgebra::DVector;

use crate::chain::BoxedProposal;
use crate::hierarchy::{
    GroupComm, HierarchyError, HierarchyFactory, Interpolation, LevelIndex, SamplingProblem,
};
use crate::probability::{RngStream, StreamPurpose};

use super::gaussian::{build_proposal, GaussianProblem, GaussianSpec};
use super::ProposalSettings;

/// Per-level mean runtimes plus jitter around them.
#[derive(Debug, Clone)]
pub struct DelaySpec {
    pub gaussian: GaussianSpec,
    /// Mean wall time of one density evaluation per level, milliseconds.
    pub mean_runtime_ms: Vec<f64>,
    /// Relative jitter: each evaluation sleeps mean * U(1 - j, 1 + j).
    pub jitter: f64,
}

impl DelaySpec {
    pub fn uniform_target(levels: usize, mean_runtime_ms: Vec<f64>, jitter: f64) -> Self {
        assert_eq!(mean_runtime_ms.len(), levels);
        Self { gaussian: GaussianSpec::identical(1, levels), mean_runtime_ms, jitter }
    }
}

pub struct DelayProblem {
    inner: GaussianProblem,
    mean_runtime: Duration,
    jitter: f64,
    /// Evaluation work is shared across the group, so each evaluator
    /// sleeps its 1/size share.
    share: f64,
    rng: RngStream,
}

impl SamplingProblem for DelayProblem {
    fn parameter_dim(&self) -> usize {
        self.inner.parameter_dim()
    }

    fn qoi_dim(&self) -> usize {
        self.inner.qoi_dim()
    }

    fn log_density(&mut self, theta: &DVector<f64>) -> f64 {
        if !self.mean_runtime.is_zero() {
            let factor = 1.0 + self.jitter * (2.0 * self.rng.uniform() - 1.0);
            let sleep = self.mean_runtime.mul_f64((factor * self.share).max(0.0));
            std::thread::sleep(sleep);
        }
        self.inner.log_density(theta)
    }

    fn qoi(&mut self, theta: &DVector<f64>) -> DVector<f64> {
        self.inner.qoi(theta)
    }
}

pub struct DelayHierarchy {
    spec: DelaySpec,
    subsampling: Vec<usize>,
    proposal: ProposalSettings,
    seed: u64,
}

impl DelayHierarchy {
    pub fn new(
        spec: DelaySpec,
        subsampling: Vec<usize>,
        proposal: ProposalSettings,
        seed: u64,
    ) -> Self {
        assert_eq!(spec.gaussian.levels(), spec.mean_runtime_ms.len());
        Self { spec, subsampling, proposal, seed }
    }

    pub fn spec(&self) -> &DelaySpec {
        &self.spec
    }
}

impl HierarchyFactory for DelayHierarchy {
    fn finest_index(&self) -> LevelIndex {
        LevelIndex(self.spec.gaussian.levels() - 1)
    }

    fn sampling_problem(
        &self,
        level: LevelIndex,
        comm: &GroupComm,
    ) -> Result<Box<dyn SamplingProblem>, HierarchyError> {
        let ms = self.spec.mean_runtime_ms[level.0];
        Ok(Box::new(DelayProblem {
            inner: GaussianProblem::new(self.spec.gaussian.density(level.0)),
            mean_runtime: Duration::from_secs_f64(ms / 1000.0),
            jitter: self.spec.jitter,
            share: 1.0 / comm.size.max(1) as f64,
            rng: RngStream::for_chain(
                self.seed ^ comm.instance_seed,
                level.0,
                comm.rank as u64,
                StreamPurpose::Model,
            ),
        }))
    }

    fn proposal(&self, _level: LevelIndex) -> BoxedProposal {
        build_proposal(self.spec.gaussian.dim, &self.proposal)
    }

    fn subsampling_rate(&self, level: LevelIndex) -> usize {
        self.subsampling.get(level.0).copied().unwrap_or(0)
    }

    fn interpolation(&self, _level: LevelIndex) -> Interpolation {
        Interpolation::new(self.spec.gaussian.dim, self.spec.gaussian.dim).expect("equal dims")
    }

    fn starting_point(&self, level: LevelIndex) -> DVector<f64> {
        self.spec.gaussian.exact_mean(level.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn zero_runtime_matches_the_plain_gaussian() {
        let spec = DelaySpec::uniform_target(1, vec![0.0], 0.0);
        let hierarchy =
            DelayHierarchy::new(spec.clone(), vec![0], ProposalSettings::default(), 1);
        let mut delay =
            hierarchy.sampling_problem(LevelIndex(0), &GroupComm::solo()).unwrap();
        let mut plain = GaussianProblem::new(spec.gaussian.density(0));
        let theta = DVector::from_column_slice(&[0.37]);
        assert_eq!(delay.log_density(&theta), plain.log_density(&theta));
        assert_eq!(delay.qoi(&theta), plain.qoi(&theta));
    }

    #[test]
    fn twenty_evaluations_at_fifty_ms_take_a_second() {
        let spec = DelaySpec::uniform_target(1, vec![50.0], 0.0);
        let hierarchy = DelayHierarchy::new(spec, vec![0], ProposalSettings::default(), 1);
        let mut problem =
            hierarchy.sampling_problem(LevelIndex(0), &GroupComm::solo()).unwrap();
        let theta = DVector::from_column_slice(&[0.0]);
        let start = Instant::now();
        for _ in 0..20 {
            problem.log_density(&theta);
        }
        assert!(start.elapsed() >= Duration::from_secs(1));
    }

    #[test]
    fn group_size_splits_the_sleep() {
        let spec = DelaySpec::uniform_target(1, vec![40.0], 0.0);
        let hierarchy = DelayHierarchy::new(spec, vec![0], ProposalSettings::default(), 1);
        let comm = GroupComm { rank: 0, size: 4, instance_seed: 0 };
        let mut problem = hierarchy.sampling_problem(LevelIndex(0), &comm).unwrap();
        let theta = DVector::from_column_slice(&[0.0]);
        let start = Instant::now();
        for _ in 0..10 {
            problem.log_density(&theta);
        }
        let elapsed = start.elapsed();
        assert!(elapsed >= Duration::from_millis(100));
        assert!(elapsed < Duration::from_millis(300), "{elapsed:?}");
    }
}
