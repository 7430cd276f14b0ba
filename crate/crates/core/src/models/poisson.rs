//! Finite-difference Poisson inverse problem on the unit square.
//!
//! The forward model solves div(kappa grad u) = 0 with u = 0 on the left
//! edge, u = 1 on the right edge, and no-flux conditions on top and
//! bottom. The log-diffusivity is a truncated KL expansion in the
//! parameter vector; observations are bilinear interpolations of the
//! solution at a fixed point grid. Face diffusivities use the harmonic
//! mean, the standard choice for flow through discontinuous coefficients.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::kl::KlField;
use crate::chain::{AdaptiveMetropolis, BoxedProposal, GaussianRandomWalk};
use crate::hierarchy::{
    GroupComm, HierarchyError, HierarchyFactory, Interpolation, LevelIndex, SamplingProblem,
};
use crate::probability::{GaussianDensity, RngStream, StreamPurpose};

#[derive(Debug, Error)]
pub enum PoissonError {
    #[error("mesh size must be a power of two >= 4, got {0}")]
    BadMeshSize(usize),
    #[error("solver did not reach tolerance {tol:e} in {iterations} iterations")]
    SolverDiverged { tol: f64, iterations: usize },
    #[error("observation point ({x}, {y}) lies outside the unit square")]
    PointOutsideDomain { x: f64, y: f64 },
}

/// Uniform node grid over the unit square with spacing `1/n`.
#[derive(Debug, Clone, Copy)]
pub struct PoissonMesh {
    n: usize,
}

impl PoissonMesh {
    pub fn new(n: usize) -> Result<Self, PoissonError> {
        if n < 4 || !n.is_power_of_two() {
            return Err(PoissonError::BadMeshSize(n));
        }
        Ok(Self { n })
    }

    pub fn intervals(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn nodes_per_side(&self) -> usize {
        self.n + 1
    }

    fn node(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }
}

/// Nodal solution field, including the Dirichlet columns.
#[derive(Debug, Clone)]
pub struct PoissonSolution {
    mesh: PoissonMesh,
    u: Vec<f64>,
    pub iterations: usize,
}

impl PoissonSolution {
    pub fn value_at_node(&self, i: usize, j: usize) -> f64 {
        self.u[self.mesh.node(i, j)]
    }

    /// Bilinear interpolation at an interior point.
    pub fn interpolate(&self, x: f64, y: f64) -> Result<f64, PoissonError> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(PoissonError::PointOutsideDomain { x, y });
        }
        let n = self.mesh.n;
        let gx = (x * n as f64).min(n as f64 - 1e-12);
        let gy = (y * n as f64).min(n as f64 - 1e-12);
        let i = gx.floor() as usize;
        let j = gy.floor() as usize;
        let fx = gx - i as f64;
        let fy = gy - j as f64;
        let v00 = self.value_at_node(i, j);
        let v10 = self.value_at_node(i + 1, j);
        let v01 = self.value_at_node(i, j + 1);
        let v11 = self.value_at_node(i + 1, j + 1);
        Ok(v00 * (1.0 - fx) * (1.0 - fy)
            + v10 * fx * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v11 * fx * fy)
    }
}

/// Solve the discrete problem for a nodal diffusivity sampled by `kappa`.
///
/// Conjugate gradients with a Jacobi preconditioner on the five-point
/// finite-volume system; the tolerance is relative to the right-hand side.
pub fn solve_poisson(
    mesh: PoissonMesh,
    kappa: impl Fn(f64, f64) -> f64,
    tol: f64,
    max_iterations: usize,
) -> Result<PoissonSolution, PoissonError> {
    let n = mesh.intervals();
    let side = mesh.nodes_per_side();
    let h = mesh.spacing();

    let kappa_at = |i: usize, j: usize| kappa(i as f64 * h, j as f64 * h);
    let mut node_kappa = vec![0.0f64; side * side];
    for j in 0..side {
        for i in 0..side {
            node_kappa[mesh.node(i, j)] = kappa_at(i, j);
        }
    }
    let harmonic = |a: f64, b: f64| 2.0 * a * b / (a + b);
    // Face diffusivities between horizontally and vertically adjacent nodes.
    let face_x = |i: usize, j: usize| {
        harmonic(node_kappa[mesh.node(i, j)], node_kappa[mesh.node(i + 1, j)])
    };
    let face_y = |i: usize, j: usize| {
        harmonic(node_kappa[mesh.node(i, j)], node_kappa[mesh.node(i, j + 1)])
    };

    // Unknowns: all nodes except the Dirichlet columns i = 0 and i = n.
    let unknowns = (n - 1) * side;
    let idx = |i: usize, j: usize| j * (n - 1) + (i - 1);
    let dirichlet = |i: usize| if i == 0 { Some(0.0) } else if i == n { Some(1.0) } else { None };

    // Top and bottom rows own half-height control volumes, so their
    // x-direction faces have half length.
    let weight_x = |j: usize| if j == 0 || j == n { 0.5 } else { 1.0 };

    let mut diag = vec![0.0f64; unknowns];
    let mut rhs = vec![0.0f64; unknowns];
    for j in 0..side {
        for i in 1..n {
            let row = idx(i, j);
            let mut d = 0.0;
            let mut b = 0.0;
            let mut couple = |k: f64, neighbor: Option<f64>| {
                d += k;
                if let Some(value) = neighbor {
                    b += k * value;
                }
            };
            couple(weight_x(j) * face_x(i - 1, j), dirichlet(i - 1));
            couple(weight_x(j) * face_x(i, j), dirichlet(i + 1));
            if j > 0 {
                couple(face_y(i, j - 1), None);
            }
            if j < n {
                couple(face_y(i, j), None);
            }
            diag[row] = d;
            rhs[row] = b;
        }
    }

    let apply = |x: &[f64], out: &mut [f64]| {
        for j in 0..side {
            for i in 1..n {
                let row = idx(i, j);
                let mut acc = diag[row] * x[row];
                if i > 1 {
                    acc -= weight_x(j) * face_x(i - 1, j) * x[idx(i - 1, j)];
                }
                if i < n - 1 {
                    acc -= weight_x(j) * face_x(i, j) * x[idx(i + 1, j)];
                }
                if j > 0 {
                    acc -= face_y(i, j - 1) * x[idx(i, j - 1)];
                }
                if j < n {
                    acc -= face_y(i, j) * x[idx(i, j + 1)];
                }
                out[row] = acc;
            }
        }
    };

    // Warm start from the linear profile u = x.
    let mut x = vec![0.0f64; unknowns];
    for j in 0..side {
        for i in 1..n {
            x[idx(i, j)] = i as f64 * h;
        }
    }

    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let rhs_norm = norm(&rhs).max(f64::MIN_POSITIVE);
    let mut r = vec![0.0f64; unknowns];
    apply(&x, &mut r);
    for k in 0..unknowns {
        r[k] = rhs[k] - r[k];
    }
    let mut z: Vec<f64> = r.iter().zip(diag.iter()).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0f64; unknowns];
    let mut iterations = 0;
    while norm(&r) > tol * rhs_norm {
        if iterations >= max_iterations {
            return Err(PoissonError::SolverDiverged { tol, iterations });
        }
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(ap.iter()).map(|(a, b)| a * b).sum();
        let alpha = rz / pap;
        for k in 0..unknowns {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        for k in 0..unknowns {
            z[k] = r[k] / diag[k];
        }
        let rz_next: f64 = r.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
        let beta = rz_next / rz;
        rz = rz_next;
        for k in 0..unknowns {
            p[k] = z[k] + beta * p[k];
        }
        iterations += 1;
    }

    let mut u = vec![0.0f64; side * side];
    for j in 0..side {
        for i in 0..side {
            u[mesh.node(i, j)] = match dirichlet(i) {
                Some(value) => value,
                None => x[idx(i, j)],
            };
        }
    }
    Ok(PoissonSolution { mesh, u, iterations })
}

/// Observe a solution at a list of points, row-major over the point list.
pub fn forward_observe(
    solution: &PoissonSolution,
    points: &[(f64, f64)],
) -> Result<DVector<f64>, PoissonError> {
    let mut out = DVector::zeros(points.len());
    for (k, &(x, y)) in points.iter().enumerate() {
        out[k] = solution.interpolate(x, y)?;
    }
    Ok(out)
}

/// Default observation grid: the six per-axis stations over a 1/32 grid,
/// tensorized. The sixth station is 30/32; an asymmetric variant with
/// 3/32 can be configured instead.
pub fn default_observation_points() -> Vec<(f64, f64)> {
    let stations = [2.0, 7.0, 13.0, 19.0, 25.0, 30.0].map(|s| s / 32.0);
    let mut points = Vec::with_capacity(36);
    for &y in &stations {
        for &x in &stations {
            points.push((x, y));
        }
    }
    points
}

/// Square qoi grid of width `1/q` including the boundary, row-major.
pub fn qoi_grid(q: usize) -> Vec<(f64, f64)> {
    let mut points = Vec::with_capacity((q + 1) * (q + 1));
    for j in 0..=q {
        for i in 0..=q {
            points.push((i as f64 / q as f64, j as f64 / q as f64));
        }
    }
    points
}

/// The persisted inverse problem: one draw of the true coefficients and
/// the observations generated from it, shared by repeated runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticData {
    pub schema: String,
    pub seed: u64,
    pub sigma_f: f64,
    pub noisy: bool,
    pub theta_hat: Vec<f64>,
    pub observation_points: Vec<(f64, f64)>,
    pub values: Vec<f64>,
}

pub const SYNTHETIC_DATA_SCHEMA: &str = "mlmcmc-synthetic-data/1";

/// Tunables of the Poisson hierarchy.
#[derive(Debug, Clone)]
pub struct PoissonSpec {
    /// Mesh intervals per level, coarsest first (spacing 1/n).
    pub mesh_sizes: Vec<usize>,
    pub modes: usize,
    pub correlation_length: f64,
    pub field_variance: f64,
    pub sigma_f: f64,
    pub prior_variance: f64,
    /// Width of the qoi grid (kappa evaluated on a (q+1)^2 point grid).
    pub qoi_width: usize,
    pub solver_tol: f64,
    pub solver_max_iterations: usize,
}

impl Default for PoissonSpec {
    fn default() -> Self {
        Self {
            mesh_sizes: vec![8, 16, 32],
            modes: 8,
            correlation_length: 0.15,
            field_variance: 1.0,
            sigma_f: 0.01,
            prior_variance: 4.0,
            qoi_width: 8,
            solver_tol: 1e-10,
            solver_max_iterations: 20_000,
        }
    }
}

impl PoissonSpec {
    pub fn field(&self) -> KlField {
        KlField::new(self.modes, self.correlation_length, self.field_variance)
    }

    pub fn finest_mesh(&self) -> usize {
        *self.mesh_sizes.last().expect("at least one level")
    }
}

/// Draw the true coefficients from N(0, I), solve on the finest mesh and
/// record the (optionally noise-perturbed) observations.
pub fn generate_synthetic_data(
    spec: &PoissonSpec,
    seed: u64,
    observation_points: Vec<(f64, f64)>,
    noisy: bool,
) -> Result<SyntheticData, PoissonError> {
    let field = spec.field();
    let mut rng = RngStream::for_chain(seed, 0, 0, StreamPurpose::Synthetic);
    let theta_hat = rng.standard_normal_vector(spec.modes);
    let mesh = PoissonMesh::new(spec.finest_mesh())?;
    let solution = solve_poisson(
        mesh,
        |x, y| field.field(&theta_hat, x, y),
        spec.solver_tol,
        spec.solver_max_iterations,
    )?;
    let mut values = forward_observe(&solution, &observation_points)?;
    if noisy {
        for v in values.iter_mut() {
            *v += spec.sigma_f * rng.standard_normal();
        }
    }
    Ok(SyntheticData {
        schema: SYNTHETIC_DATA_SCHEMA.to_string(),
        seed,
        sigma_f: spec.sigma_f,
        noisy,
        theta_hat: theta_hat.iter().copied().collect(),
        observation_points,
        values: values.iter().copied().collect(),
    })
}

/// One level of the Poisson hierarchy.
pub struct PoissonProblem {
    field: KlField,
    mesh: PoissonMesh,
    observation_points: Vec<(f64, f64)>,
    observations: DVector<f64>,
    sigma_f: f64,
    prior: GaussianDensity,
    qoi_points: Vec<(f64, f64)>,
    solver_tol: f64,
    solver_max_iterations: usize,
}

impl PoissonProblem {
    pub fn new(spec: &PoissonSpec, data: &SyntheticData, mesh_n: usize) -> Result<Self, PoissonError> {
        Ok(Self {
            field: spec.field(),
            mesh: PoissonMesh::new(mesh_n)?,
            observation_points: data.observation_points.clone(),
            observations: DVector::from_vec(data.values.clone()),
            sigma_f: data.sigma_f,
            prior: GaussianDensity::isotropic(
                DVector::zeros(spec.modes),
                spec.prior_variance,
            )
            .expect("positive prior variance"),
            qoi_points: qoi_grid(spec.qoi_width),
            solver_tol: spec.solver_tol,
            solver_max_iterations: spec.solver_max_iterations,
        })
    }

    /// Forward map: solve at `theta` and observe.
    pub fn forward(&self, theta: &DVector<f64>) -> Result<DVector<f64>, PoissonError> {
        let solution = solve_poisson(
            self.mesh,
            |x, y| self.field.field(theta, x, y),
            self.solver_tol,
            self.solver_max_iterations,
        )?;
        forward_observe(&solution, &self.observation_points)
    }
}

impl SamplingProblem for PoissonProblem {
    fn parameter_dim(&self) -> usize {
        self.field.mode_count()
    }

    fn qoi_dim(&self) -> usize {
        self.qoi_points.len()
    }

    fn log_density(&mut self, theta: &DVector<f64>) -> f64 {
        let log_prior = self.prior.log_density(theta);
        match self.forward(theta) {
            Ok(predicted) => {
                let misfit = (&predicted - &self.observations).norm_squared();
                let d = self.observations.len() as f64;
                let log_lik = -0.5 * misfit / (self.sigma_f * self.sigma_f)
                    - d * (self.sigma_f * (2.0 * std::f64::consts::PI).sqrt()).ln();
                log_prior + log_lik
            }
            // Solver failure is a model error, signalled as NaN so the
            // evaluation layer can mark it and reject the proposal.
            Err(_) => f64::NAN,
        }
    }

    fn qoi(&mut self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.qoi_points.len(),
            self.qoi_points.iter().map(|&(x, y)| self.field.field(theta, x, y)),
        )
    }
}

/// Hierarchy over the configured mesh widths; the qoi grid is mesh
/// independent, so its dimension is identical across levels.
pub struct PoissonHierarchy {
    spec: PoissonSpec,
    data: SyntheticData,
    subsampling: Vec<usize>,
    proposal: super::ProposalSettings,
}

impl PoissonHierarchy {
    pub fn new(
        spec: PoissonSpec,
        data: SyntheticData,
        subsampling: Vec<usize>,
        proposal: super::ProposalSettings,
    ) -> Self {
        Self { spec, data, subsampling, proposal }
    }

    pub fn spec(&self) -> &PoissonSpec {
        &self.spec
    }

    pub fn data(&self) -> &SyntheticData {
        &self.data
    }
}

impl HierarchyFactory for PoissonHierarchy {
    fn finest_index(&self) -> LevelIndex {
        LevelIndex(self.spec.mesh_sizes.len() - 1)
    }

    fn sampling_problem(
        &self,
        level: LevelIndex,
        _comm: &GroupComm,
    ) -> Result<Box<dyn SamplingProblem>, HierarchyError> {
        let mesh_n = self.spec.mesh_sizes[level.0];
        let problem = PoissonProblem::new(&self.spec, &self.data, mesh_n).map_err(|e| {
            HierarchyError::ModelConstruction { level: level.0, reason: e.to_string() }
        })?;
        Ok(Box::new(problem))
    }

    fn proposal(&self, _level: LevelIndex) -> BoxedProposal {
        if self.proposal.adaptive {
            Box::new(AdaptiveMetropolis::new(
                nalgebra::DMatrix::identity(self.spec.modes, self.spec.modes)
                    * self.proposal.initial_variance,
                self.proposal.adapt_interval,
                self.proposal.adapt_epsilon,
            ))
        } else {
            Box::new(GaussianRandomWalk::isotropic(
                self.spec.modes,
                self.proposal.initial_variance,
            ))
        }
    }

    fn subsampling_rate(&self, level: LevelIndex) -> usize {
        self.subsampling.get(level.0).copied().unwrap_or(0)
    }

    fn interpolation(&self, _level: LevelIndex) -> Interpolation {
        Interpolation::new(self.spec.modes, self.spec.modes).expect("equal dims")
    }

    fn starting_point(&self, _level: LevelIndex) -> DVector<f64> {
        DVector::zeros(self.spec.modes)
    }
}
