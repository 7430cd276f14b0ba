//! The multilevel kernel, subsampled coarse proposal sources, the
//! telescoping estimator, and mergeable per-level sample statistics.
//!
//! A chain on level `l` draws its proposals from a level `l-1` chain
//! (locally embedded or served remotely through the runtime) and corrects
//! the acceptance probability for the coarse proposal distribution. Each
//! step contributes one coupled pair (fine quantity of interest, offered
//! coarse quantity of interest) to the level-`l` correction term; on
//! rejection the retained fine value is re-counted against the rejected
//! offer. Accepted offers produce coinciding pairs, which is what drives
//! the correction variance to zero as levels converge.

use nalgebra::DVector;
use thiserror::Error;

use crate::chain::{accept_with, mh_step, BoxedProposal, ChainError, ChainState, MetropolisHastings};
use crate::hierarchy::{HierarchyError, Interpolation, LevelIndex, SamplingProblem};
use crate::probability::RngStream;

#[derive(Debug, Error)]
pub enum MultilevelError {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error("coarse proposal source failed: {0}")]
    CoarseSource(String),
}

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("incomplete telescoping sum: no estimate for level {0}")]
    IncompleteTelescopingSum(usize),
    #[error("duplicate estimate for level {0}")]
    DuplicateLevel(usize),
    #[error("level 0 estimate must be a base estimate, levels above corrections")]
    KindMismatch,
    #[error("estimate for level {level} has only {count} samples, need at least 2")]
    CountTooSmall { level: usize, count: u64 },
    #[error("cannot merge estimates for level {a} and level {b}")]
    MergeLevelMismatch { a: usize, b: usize },
    #[error("cannot merge a base estimate with a correction estimate")]
    MergeKindMismatch,
    #[error("qoi dimension mismatch: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
}

/// A coarse-chain sample delivered as proposal material: the parameter,
/// its coarse log-posterior, and its coarse quantity of interest.
#[derive(Debug, Clone)]
pub struct CoarseSample {
    pub theta: DVector<f64>,
    pub log_density: f64,
    pub qoi: DVector<f64>,
}

/// Where a fine chain gets its coarse proposals from. The embedded local
/// chain and the runtime's remote fetch both sit behind this interface;
/// subsampling is the source's business.
pub trait CoarseProposalSource: Send {
    fn next_proposal(&mut self) -> Result<CoarseSample, MultilevelError>;

    /// Coarse steps taken so far, for diagnostics.
    fn steps_taken(&self) -> u64 {
        0
    }
}

/// Coarse chain embedded in a controller: a single-level chain on the
/// next-coarser posterior, advanced `rate + 1` steps per delivered
/// proposal (the `rate` intermediate states are discarded).
pub struct LocalCoarseChain {
    problem: Box<dyn SamplingProblem>,
    kernel: MetropolisHastings,
    state: ChainState,
    rate: usize,
    rng: RngStream,
    steps: u64,
}

impl LocalCoarseChain {
    /// Builds the embedded chain and completes its burn-in before the
    /// first proposal can be delivered.
    pub fn new(
        mut problem: Box<dyn SamplingProblem>,
        proposal: BoxedProposal,
        start: DVector<f64>,
        burn_in: usize,
        rate: usize,
        mut rng: RngStream,
    ) -> Result<Self, MultilevelError> {
        let mut state = ChainState::at_start(start, problem.as_mut())?;
        let mut kernel = MetropolisHastings::new(proposal);
        for _ in 0..burn_in {
            mh_step(&mut state, problem.as_mut(), kernel.proposal.as_mut(), &mut rng);
        }
        Ok(Self { problem, kernel, state, rate, rng, steps: 0 })
    }

    pub fn subsampling_rate(&self) -> usize {
        self.rate
    }
}

impl CoarseProposalSource for LocalCoarseChain {
    fn next_proposal(&mut self) -> Result<CoarseSample, MultilevelError> {
        for _ in 0..=self.rate {
            mh_step(
                &mut self.state,
                self.problem.as_mut(),
                self.kernel.proposal.as_mut(),
                &mut self.rng,
            );
            self.steps += 1;
        }
        let qoi = self.state.qoi(self.problem.as_mut()).clone();
        Ok(CoarseSample {
            theta: self.state.position.clone(),
            log_density: self.state.log_density,
            qoi,
        })
    }

    fn steps_taken(&self) -> u64 {
        self.steps
    }
}

/// Two-level acceptance probability.
///
/// The first factor is the usual Metropolis-Hastings ratio on the fine
/// level (`log_q_ratio` carries `log q(cur|cand) - log q(cand|cur)` of the
/// fine-component proposal, zero for symmetric or absent proposals); the
/// second factor divides out the coarse posterior at the coarse components
/// so that proposals drawn from the coarse chain introduce no bias.
pub fn ml_acceptance(
    log_fine_proposed: f64,
    log_fine_current: f64,
    log_coarse_current: f64,
    log_coarse_proposed: f64,
    log_q_ratio: f64,
) -> f64 {
    let la = ml_log_acceptance(
        log_fine_proposed,
        log_fine_current,
        log_coarse_current,
        log_coarse_proposed,
        log_q_ratio,
    );
    la.min(0.0).exp()
}

fn ml_log_acceptance(
    log_fine_proposed: f64,
    log_fine_current: f64,
    log_coarse_current: f64,
    log_coarse_proposed: f64,
    log_q_ratio: f64,
) -> f64 {
    if log_fine_proposed == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    (log_fine_proposed - log_fine_current)
        + log_q_ratio
        + (log_coarse_current - log_coarse_proposed)
}

/// Outcome of one two-level step.
#[derive(Debug, Clone)]
pub struct TwoLevelOutcome {
    /// Whether the coarse proposal (with its fine extension) was accepted.
    pub accepted: bool,
    /// Coupled (fine qoi, offered coarse qoi) pair; present only when the
    /// step was asked to produce estimator material.
    pub correction: Option<CorrectionPair>,
}

#[derive(Debug, Clone)]
pub struct CorrectionPair {
    pub fine: DVector<f64>,
    pub coarse: DVector<f64>,
}

impl CorrectionPair {
    pub fn difference(&self) -> DVector<f64> {
        &self.fine - &self.coarse
    }
}

/// Markov kernel for one level of the multilevel construction; owns the
/// coarse proposal source and the coarse sample backing the current state.
pub struct TwoLevelKernel {
    source: Box<dyn CoarseProposalSource>,
    fine_proposal: Option<BoxedProposal>,
    interpolation: Interpolation,
    coarse_current: CoarseSample,
}

impl TwoLevelKernel {
    /// Draws the first coarse proposal to form the starting state: its
    /// coarse components come from the (burned-in) coarse source, the
    /// remaining components from `extra_start`.
    pub fn initialize(
        mut source: Box<dyn CoarseProposalSource>,
        fine_proposal: Option<BoxedProposal>,
        interpolation: Interpolation,
        extra_start: DVector<f64>,
        problem: &mut dyn SamplingProblem,
    ) -> Result<(Self, ChainState), MultilevelError> {
        let first = source.next_proposal()?;
        let theta0 = interpolation.combine(&first.theta, &extra_start)?;
        let state = ChainState::at_start(theta0, problem)?;
        Ok((
            Self { source, fine_proposal, interpolation, coarse_current: first },
            state,
        ))
    }

    /// Coarse sample backing the current fine state.
    pub fn coarse_current(&self) -> &CoarseSample {
        &self.coarse_current
    }

    pub fn coarse_steps_taken(&self) -> u64 {
        self.source.steps_taken()
    }

    /// One step: fetch a coarse proposal, extend it with a fine-component
    /// draw where dimensions grow, accept or reject with the two-level
    /// ratio, and emit the coupled correction pair when requested.
    pub fn step(
        &mut self,
        state: &mut ChainState,
        problem: &mut dyn SamplingProblem,
        rng: &mut RngStream,
        want_correction: bool,
    ) -> Result<TwoLevelOutcome, MultilevelError> {
        let offered = self.source.next_proposal()?;
        let (extra, log_q_ratio) = match self.fine_proposal.as_mut() {
            Some(proposal) => {
                let (_, current_extra) = self.interpolation.split(&state.position)?;
                let candidate_extra = proposal.draw(&current_extra, rng);
                let ratio = if proposal.is_symmetric() {
                    0.0
                } else {
                    proposal.log_density(&candidate_extra, &current_extra)
                        - proposal.log_density(&current_extra, &candidate_extra)
                };
                (candidate_extra, ratio)
            }
            None => (DVector::zeros(0), 0.0),
        };
        let candidate = self.interpolation.combine(&offered.theta, &extra)?;
        let candidate_log_density = problem.log_density(&candidate);
        let log_alpha = ml_log_acceptance(
            candidate_log_density,
            state.log_density,
            self.coarse_current.log_density,
            offered.log_density,
            log_q_ratio,
        );
        let accepted = accept_with(log_alpha, rng);
        if accepted {
            state.accept(candidate, candidate_log_density);
            self.coarse_current = offered.clone();
        }
        state.step += 1;
        if let Some(proposal) = self.fine_proposal.as_mut() {
            let (_, extra_now) = self.interpolation.split(&state.position)?;
            proposal.adapt(&extra_now);
        }
        let correction = if want_correction {
            let fine = state.qoi(problem).clone();
            Some(CorrectionPair { fine, coarse: offered.qoi })
        } else {
            None
        };
        Ok(TwoLevelOutcome { accepted, correction })
    }
}

/// Which term of the telescoping sum an estimate contributes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateKind {
    /// E[Q_0] on the coarsest level.
    Base,
    /// E[Q_l - Q_{l-1}] on a finer level.
    Correction,
}

/// Streaming per-level mean and scatter of the level's estimator samples,
/// mergeable across collector shards.
#[derive(Debug, Clone)]
pub struct LevelEstimate {
    pub level: LevelIndex,
    pub kind: EstimateKind,
    count: u64,
    mean: DVector<f64>,
    m2: DVector<f64>,
}

impl LevelEstimate {
    pub fn new(level: LevelIndex, kind: EstimateKind, qoi_dim: usize) -> Self {
        Self { level, kind, count: 0, mean: DVector::zeros(qoi_dim), m2: DVector::zeros(qoi_dim) }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Unbiased componentwise sample variance.
    pub fn variance(&self) -> Option<DVector<f64>> {
        if self.count < 2 {
            return None;
        }
        Some(&self.m2 / (self.count - 1) as f64)
    }

    /// Fold in one estimator sample (a qoi for base levels, a coupled
    /// difference for corrections).
    pub fn observe(&mut self, value: &DVector<f64>) {
        debug_assert_eq!(value.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for i in 0..self.mean.len() {
            // Welford's method per component.
            let delta = value[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (value[i] - self.mean[i]);
        }
    }

    pub fn observe_pair(&mut self, pair: &CorrectionPair) {
        self.observe(&pair.difference());
    }

    /// Raw scatter accumulator, for wire transfer between collectors.
    pub fn raw_m2(&self) -> &DVector<f64> {
        &self.m2
    }

    /// Rebuild an estimate from transferred raw parts.
    pub fn from_raw_parts(
        level: LevelIndex,
        kind: EstimateKind,
        count: u64,
        mean: DVector<f64>,
        m2: DVector<f64>,
    ) -> Self {
        Self { level, kind, count, mean, m2 }
    }

    /// Pairwise parallel merge; the result equals the estimate computed
    /// from the concatenated sample streams up to float reassociation.
    pub fn merge(&self, other: &LevelEstimate) -> Result<LevelEstimate, EstimateError> {
        merge_statistics(self, other)
    }
}

pub fn merge_statistics(
    a: &LevelEstimate,
    b: &LevelEstimate,
) -> Result<LevelEstimate, EstimateError> {
    if a.level != b.level {
        return Err(EstimateError::MergeLevelMismatch { a: a.level.0, b: b.level.0 });
    }
    if a.kind != b.kind {
        return Err(EstimateError::MergeKindMismatch);
    }
    if a.dim() != b.dim() {
        return Err(EstimateError::DimensionMismatch { a: a.dim(), b: b.dim() });
    }
    if a.count == 0 {
        return Ok(b.clone());
    }
    if b.count == 0 {
        return Ok(a.clone());
    }
    let n_a = a.count as f64;
    let n_b = b.count as f64;
    let n = n_a + n_b;
    let mut mean = DVector::zeros(a.dim());
    let mut m2 = DVector::zeros(a.dim());
    for i in 0..a.dim() {
        let delta = b.mean[i] - a.mean[i];
        mean[i] = a.mean[i] + delta * n_b / n;
        m2[i] = a.m2[i] + b.m2[i] + delta * delta * n_a * n_b / n;
    }
    Ok(LevelEstimate { level: a.level, kind: a.kind, count: a.count + b.count, mean, m2 })
}

/// One resolved term of the telescoping sum.
#[derive(Debug, Clone)]
pub struct LevelTerm {
    pub level: LevelIndex,
    pub kind: EstimateKind,
    pub count: u64,
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

/// Telescoped expectation with its standard error.
#[derive(Debug, Clone)]
pub struct Telescoping {
    /// E[Q_L] estimate: base mean plus all correction means.
    pub estimate: DVector<f64>,
    /// sqrt(sum_l var_l / n_l) per component, treating levels as
    /// independent.
    pub standard_error: DVector<f64>,
    /// Running partial sums after each level, coarsest first.
    pub cumulative: Vec<DVector<f64>>,
    pub terms: Vec<LevelTerm>,
}

/// Assemble E[Q_L] from one base estimate (level 0) and one correction
/// estimate per finer level.
pub fn telescoping_estimate(estimates: &[LevelEstimate]) -> Result<Telescoping, EstimateError> {
    if estimates.is_empty() {
        return Err(EstimateError::IncompleteTelescopingSum(0));
    }
    let finest = estimates.iter().map(|e| e.level.0).max().unwrap();
    let mut slots: Vec<Option<&LevelEstimate>> = vec![None; finest + 1];
    for est in estimates {
        let slot = &mut slots[est.level.0];
        if slot.is_some() {
            return Err(EstimateError::DuplicateLevel(est.level.0));
        }
        let expected = if est.level.0 == 0 { EstimateKind::Base } else { EstimateKind::Correction };
        if est.kind != expected {
            return Err(EstimateError::KindMismatch);
        }
        *slot = Some(est);
    }
    let dim = estimates[0].dim();
    let mut estimate = DVector::zeros(dim);
    let mut var_sum = DVector::zeros(dim);
    let mut cumulative = Vec::with_capacity(finest + 1);
    let mut terms = Vec::with_capacity(finest + 1);
    for (level, slot) in slots.iter().enumerate() {
        let est = slot.ok_or(EstimateError::IncompleteTelescopingSum(level))?;
        if est.dim() != dim {
            return Err(EstimateError::DimensionMismatch { a: dim, b: est.dim() });
        }
        let variance = est
            .variance()
            .ok_or(EstimateError::CountTooSmall { level, count: est.count })?;
        estimate += est.mean();
        var_sum += &variance / est.count as f64;
        cumulative.push(estimate.clone());
        terms.push(LevelTerm {
            level: est.level,
            kind: est.kind,
            count: est.count,
            mean: est.mean().clone(),
            variance,
        });
    }
    let standard_error = var_sum.map(f64::sqrt);
    Ok(Telescoping { estimate, standard_error, cumulative, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::GaussianRandomWalk;
    use crate::hierarchy::SamplingProblem;
    use crate::probability::GaussianDensity;
    use proptest::prelude::*;

    struct GaussianProblem {
        density: GaussianDensity,
    }

    impl GaussianProblem {
        fn standard(dim: usize) -> Self {
            Self { density: GaussianDensity::standard(dim) }
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

    fn vec1(x: f64) -> DVector<f64> {
        DVector::from_column_slice(&[x])
    }

    #[test]
    fn identical_posteriors_cancel_exactly() {
        let lp = -1.7;
        let lc = -0.4;
        // Proposed fine and coarse densities agree, as do the current ones.
        assert_eq!(ml_acceptance(lp, lc, lc, lp, 0.0), 1.0);
    }

    #[test]
    fn acceptance_follows_fine_ratio_when_coarse_cancels() {
        let alpha = ml_acceptance(0.3f64.ln(), 0.0, -2.0, -2.0, 0.0);
        assert!((alpha - 0.3).abs() < 1e-15);
    }

    #[test]
    fn invalid_fine_proposal_is_never_accepted() {
        assert_eq!(ml_acceptance(f64::NEG_INFINITY, -1.0, -2.0, -3.0, 0.0), 0.0);
    }

    /// Source delivering i.i.d. draws from a two-state coarse target.
    struct DiscreteIidSource {
        pi0: [f64; 2],
        rng: RngStream,
    }

    impl CoarseProposalSource for DiscreteIidSource {
        fn next_proposal(&mut self) -> Result<CoarseSample, MultilevelError> {
            let s = if self.rng.uniform() < self.pi0[0] { 0usize } else { 1 };
            Ok(CoarseSample {
                theta: vec1(s as f64),
                log_density: self.pi0[s].ln(),
                qoi: vec1(s as f64),
            })
        }
    }

    #[test]
    fn two_state_kernel_reaches_fine_stationarity() {
        // Brute-force oracle: the 2x2 transition matrix of the kernel with
        // i.i.d. coarse proposals, iterated to stationarity.
        let pi0 = [0.6f64, 0.4];
        let pi1 = [0.3f64, 0.7];
        let alpha = |i: usize, j: usize| -> f64 {
            ml_acceptance(pi1[j].ln(), pi1[i].ln(), pi0[i].ln(), pi0[j].ln(), 0.0)
        };
        let mut p = [[0.0f64; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                if i != j {
                    p[i][j] = pi0[j] * alpha(i, j);
                }
            }
            p[i][i] = 1.0 - p[i][1 - i];
        }
        let mut dist = [1.0, 0.0];
        for _ in 0..10_000 {
            dist = [
                dist[0] * p[0][0] + dist[1] * p[1][0],
                dist[0] * p[0][1] + dist[1] * p[1][1],
            ];
        }

        struct Discrete {
            pi1: [f64; 2],
        }
        impl SamplingProblem for Discrete {
            fn parameter_dim(&self) -> usize {
                1
            }
            fn qoi_dim(&self) -> usize {
                1
            }
            fn log_density(&mut self, theta: &DVector<f64>) -> f64 {
                f64::ln(self.pi1[theta[0] as usize])
            }
            fn qoi(&mut self, theta: &DVector<f64>) -> DVector<f64> {
                theta.clone()
            }
        }
        let mut problem = Discrete { pi1 };
        let source = Box::new(DiscreteIidSource { pi0, rng: RngStream::new(17, 0) });
        let interp = Interpolation::new(1, 1).unwrap();
        let (mut kernel, mut state) = TwoLevelKernel::initialize(
            source,
            None,
            interp,
            DVector::zeros(0),
            &mut problem,
        )
        .unwrap();
        let mut rng = RngStream::new(17, 1);
        let n = 1_000_000;
        let mut counts = [0u64; 2];
        for _ in 0..n {
            kernel.step(&mut state, &mut problem, &mut rng, false).unwrap();
            counts[state.position[0] as usize] += 1;
        }
        for i in 0..2 {
            let freq = counts[i] as f64 / n as f64;
            assert!((freq - dist[i]).abs() < 0.01, "state {i}: {freq} vs oracle {}", dist[i]);
            // The oracle itself must agree with the fine target.
            assert!((dist[i] - pi1[i]).abs() < 1e-9);
        }
    }

    fn local_standard_source(rate: usize, seed: u64) -> Box<LocalCoarseChain> {
        Box::new(
            LocalCoarseChain::new(
                Box::new(GaussianProblem::standard(1)),
                Box::new(GaussianRandomWalk::isotropic(1, 2.4 * 2.4)),
                vec1(0.0),
                200,
                rate,
                RngStream::new(seed, 100),
            )
            .unwrap(),
        )
    }

    #[test]
    fn subsampling_advances_rate_plus_one_steps() {
        for rate in [0usize, 5] {
            let mut source = local_standard_source(rate, 3);
            let before = source.steps_taken();
            source.next_proposal().unwrap();
            assert_eq!(source.steps_taken() - before, rate as u64 + 1);
        }
    }

    #[test]
    fn heavy_subsampling_decorrelates_deliveries() {
        // Random-walk tau on a unit Gaussian is well below 8, so a rate of
        // 40 exceeds five autocorrelation times.
        let mut source = local_standard_source(40, 9);
        let xs: Vec<f64> =
            (0..3000).map(|_| source.next_proposal().unwrap().theta[0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        let lag1 = xs
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>()
            / ((xs.len() - 1) as f64 * var);
        assert!(lag1.abs() < 0.1, "lag-1 autocorrelation {lag1}");
    }

    #[test]
    fn identical_levels_always_accept_and_corrections_vanish() {
        let mut fine = GaussianProblem::standard(1);
        let source = local_standard_source(2, 21);
        let interp = Interpolation::new(1, 1).unwrap();
        let (mut kernel, mut state) =
            TwoLevelKernel::initialize(source, None, interp, DVector::zeros(0), &mut fine)
                .unwrap();
        let mut rng = RngStream::new(21, 1);
        for _ in 0..2000 {
            let out = kernel.step(&mut state, &mut fine, &mut rng, true).unwrap();
            assert!(out.accepted);
            let pair = out.correction.unwrap();
            assert_eq!(pair.difference(), DVector::zeros(1));
        }
    }

    #[test]
    fn frozen_coarse_source_freezes_the_chain() {
        struct Frozen;
        impl CoarseProposalSource for Frozen {
            fn next_proposal(&mut self) -> Result<CoarseSample, MultilevelError> {
                Ok(CoarseSample { theta: vec1(1.5), log_density: -0.5, qoi: vec1(1.5) })
            }
        }
        let mut fine = GaussianProblem::standard(1);
        let interp = Interpolation::new(1, 1).unwrap();
        let (mut kernel, mut state) = TwoLevelKernel::initialize(
            Box::new(Frozen),
            None,
            interp,
            DVector::zeros(0),
            &mut fine,
        )
        .unwrap();
        let mut rng = RngStream::new(5, 5);
        for _ in 0..100 {
            kernel.step(&mut state, &mut fine, &mut rng, false).unwrap();
            assert_eq!(state.position, vec1(1.5));
        }
    }

    #[test]
    fn gaussian_two_level_marginal_matches_target() {
        let mut fine = GaussianProblem::standard(1);
        let source = local_standard_source(4, 33);
        let interp = Interpolation::new(1, 1).unwrap();
        let (mut kernel, mut state) =
            TwoLevelKernel::initialize(source, None, interp, DVector::zeros(0), &mut fine)
                .unwrap();
        let mut rng = RngStream::new(33, 1);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            kernel.step(&mut state, &mut fine, &mut rng, false).unwrap();
            sum += state.position[0];
            sumsq += state.position[0] * state.position[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        // Deliveries are subsampled, so treat the fine chain as roughly
        // independent for the error bound.
        let se = (var / n as f64).sqrt() * 3.0;
        assert!(mean.abs() < 3.0 * se.max(0.01), "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    fn estimate_from(level: usize, kind: EstimateKind, samples: &[f64]) -> LevelEstimate {
        let mut est = LevelEstimate::new(LevelIndex(level), kind, 1);
        for &s in samples {
            est.observe(&vec1(s));
        }
        est
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let a = estimate_from(0, EstimateKind::Base, &[1.0, 2.0, 3.0]);
        let empty = LevelEstimate::new(LevelIndex(0), EstimateKind::Base, 1);
        let merged = merge_statistics(&a, &empty).unwrap();
        assert_eq!(merged.count(), 3);
        assert_eq!(merged.mean(), a.mean());
        assert_eq!(merged.variance().unwrap(), a.variance().unwrap());
    }

    #[test]
    fn merged_halves_match_whole_stream() {
        let mut rng = RngStream::new(2, 2);
        let xs: Vec<f64> = (0..1000).map(|_| rng.standard_normal() * 3.0 + 1.0).collect();
        let whole = estimate_from(1, EstimateKind::Correction, &xs);
        let a = estimate_from(1, EstimateKind::Correction, &xs[..500]);
        let b = estimate_from(1, EstimateKind::Correction, &xs[500..]);
        let merged = merge_statistics(&a, &b).unwrap();
        // Direct whole-set computation as the oracle.
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((merged.mean()[0] - mean).abs() / mean.abs() < 1e-10);
        assert!((merged.variance().unwrap()[0] - var).abs() / var < 1e-10);
        assert!((merged.mean()[0] - whole.mean()[0]).abs() / mean.abs() < 1e-10);
        assert_eq!(merged.count(), 1000);
    }

    #[test]
    fn merge_is_commutative() {
        let a = estimate_from(2, EstimateKind::Correction, &[0.5, -0.25, 4.0]);
        let b = estimate_from(2, EstimateKind::Correction, &[10.0, 11.0]);
        let ab = merge_statistics(&a, &b).unwrap();
        let ba = merge_statistics(&b, &a).unwrap();
        assert!((ab.mean()[0] - ba.mean()[0]).abs() < 1e-12);
        assert!(
            (ab.variance().unwrap()[0] - ba.variance().unwrap()[0]).abs() < 1e-12
        );
    }

    #[test]
    fn merge_rejects_mismatches() {
        let a = estimate_from(1, EstimateKind::Correction, &[1.0]);
        let b = estimate_from(2, EstimateKind::Correction, &[1.0]);
        assert!(matches!(
            merge_statistics(&a, &b),
            Err(EstimateError::MergeLevelMismatch { a: 1, b: 2 })
        ));
        let c = estimate_from(1, EstimateKind::Base, &[1.0]);
        assert!(matches!(merge_statistics(&a, &c), Err(EstimateError::MergeKindMismatch)));
    }

    #[test]
    fn single_level_telescoping_is_the_base_mean() {
        let base = estimate_from(0, EstimateKind::Base, &[1.0, 2.0, 3.0, 4.0]);
        let out = telescoping_estimate(&[base]).unwrap();
        assert!((out.estimate[0] - 2.5).abs() < 1e-14);
    }

    #[test]
    fn identical_samples_telescope_to_the_base() {
        let xs = [0.7, 1.3, -0.2, 0.9];
        let base = estimate_from(0, EstimateKind::Base, &xs);
        // Coupled identical streams: every correction sample is zero.
        let zero = [0.0; 4];
        let c1 = estimate_from(1, EstimateKind::Correction, &zero);
        let c2 = estimate_from(2, EstimateKind::Correction, &zero);
        let out = telescoping_estimate(&[base.clone(), c1, c2]).unwrap();
        assert_eq!(out.estimate[0], base.mean()[0]);
    }

    #[test]
    fn cumulative_sums_reproduce_reported_levels() {
        // Base mean 3.61 with corrections -15.90 and +6.83 gives running
        // sums 3.61, -12.29, -5.46.
        let mk = |level: usize, kind, mean: f64| {
            estimate_from(level, kind, &[mean - 0.01, mean + 0.01])
        };
        let out = telescoping_estimate(&[
            mk(0, EstimateKind::Base, 3.61),
            mk(1, EstimateKind::Correction, -15.90),
            mk(2, EstimateKind::Correction, 6.83),
        ])
        .unwrap();
        let cum: Vec<f64> = out.cumulative.iter().map(|v| v[0]).collect();
        assert!((cum[0] - 3.61).abs() < 1e-12);
        assert!((cum[1] - -12.29).abs() < 1e-12);
        assert!((cum[2] - -5.46).abs() < 1e-12);
        assert!((out.estimate[0] - -5.46).abs() < 1e-12);
    }

    #[test]
    fn missing_level_is_an_error() {
        let base = estimate_from(0, EstimateKind::Base, &[1.0, 2.0]);
        let c2 = estimate_from(2, EstimateKind::Correction, &[0.0, 0.1]);
        assert!(matches!(
            telescoping_estimate(&[base, c2]),
            Err(EstimateError::IncompleteTelescopingSum(1))
        ));
    }

    #[test]
    fn telescoping_equals_direct_fine_mean_for_coupled_tables() {
        // Fixed sample table: per-level qoi values for the same underlying
        // draws; corrections formed from coupled pairs telescope exactly.
        let draws = [0.1, -0.4, 2.2, 1.1, 0.6];
        let q = |level: usize, x: f64| x + 1.0 / (level + 1) as f64;
        let mut base = LevelEstimate::new(LevelIndex(0), EstimateKind::Base, 1);
        for &x in &draws {
            base.observe(&vec1(q(0, x)));
        }
        let mut ests = vec![base];
        for level in 1..=2usize {
            let mut est = LevelEstimate::new(LevelIndex(level), EstimateKind::Correction, 1);
            for &x in &draws {
                est.observe(&vec1(q(level, x) - q(level - 1, x)));
            }
            ests.push(est);
        }
        let out = telescoping_estimate(&ests).unwrap();
        let direct: f64 = draws.iter().map(|&x| q(2, x)).sum::<f64>() / draws.len() as f64;
        assert!((out.estimate[0] - direct).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn random_partitions_merge_exactly(
            xs in proptest::collection::vec(-100.0f64..100.0, 10..200),
            cut in 0usize..200,
        ) {
            let cut = cut % xs.len();
            let whole = estimate_from(0, EstimateKind::Base, &xs);
            let a = estimate_from(0, EstimateKind::Base, &xs[..cut]);
            let b = estimate_from(0, EstimateKind::Base, &xs[cut..]);
            let merged = merge_statistics(&a, &b).unwrap();
            prop_assert!((merged.mean()[0] - whole.mean()[0]).abs() <= 1e-10 * whole.mean()[0].abs().max(1.0));
            if xs.len() >= 2 {
                let vw = whole.variance().unwrap()[0];
                let vm = merged.variance().unwrap()[0];
                prop_assert!((vm - vw).abs() <= 1e-10 * vw.abs().max(1.0));
            }
        }
    }
}
