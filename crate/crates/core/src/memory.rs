//! Shared lifelong memory: a basis `L` over core policy parameters and a
//! sparse code per task, fitted to per-task `(θ_t, Z_t)` statistics.
//!
//! With diagonal curvature weights the objective
//!
//! ```text
//! (1/T) Σ_t [ ‖θ_t − L s_t‖²_{Z_t} + μ‖s_t‖₁ ] + λ‖L‖²_F
//! ```
//!
//! is biconvex: codes are solved by cyclic coordinate descent with
//! soft-thresholding, and the basis row by row from `k × k` ridge systems.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::discriminator::{self, DiscriminatorParams};
use crate::error::{input_err, Error, Result};
use crate::generator::{self, GeneratorParams};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifelongConfig {
    /// L1 weight on task codes.
    pub mu_sparse: f64,
    /// Frobenius weight on the basis.
    pub lambda_ridge: f64,
    pub k_latent: usize,
    /// Coordinate-descent stopping threshold on the largest per-coordinate change.
    pub code_tol: f64,
    pub max_sweeps: usize,
    /// Alternating code/basis passes after each new task.
    pub refit_passes: usize,
}

impl Default for LifelongConfig {
    fn default() -> Self {
        Self {
            mu_sparse: 0.1,
            lambda_ridge: 0.01,
            k_latent: 4,
            code_tol: 1e-8,
            max_sweeps: 10_000,
            refit_passes: 3,
        }
    }
}

impl LifelongConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_sparse >= 0.0) {
            return Err(Error::Config("mu_sparse must be >= 0".into()));
        }
        if !(self.lambda_ridge >= 0.0) {
            return Err(Error::Config("lambda_ridge must be >= 0".into()));
        }
        if self.k_latent == 0 {
            return Err(Error::Config("k_latent must be >= 1".into()));
        }
        if !(self.code_tol > 0.0) || self.max_sweeps == 0 {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedBasis {
    pub l: Matrix,
    /// Number of tasks absorbed so far; zero means the basis is empty.
    pub tasks_seen: usize,
}

impl SharedBasis {
    pub fn empty(d_core: usize, k_latent: usize) -> Self {
        Self {
            l: Matrix::zeros(d_core, k_latent),
            tasks_seen: 0,
        }
    }

    pub fn from_matrix(l: Matrix) -> Self {
        Self { l, tasks_seen: 1 }
    }

    pub fn d_core(&self) -> usize {
        self.l.rows()
    }

    pub fn k_latent(&self) -> usize {
        self.l.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks_seen == 0
    }

    pub fn max_column_norm(&self) -> f64 {
        (0..self.k_latent())
            .map(|j| {
                (0..self.d_core())
                    .map(|i| self.l.get(i, j).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskCode {
    pub task_id: usize,
    pub s: Vec<f64>,
    /// Set when every curvature weight was zero and the code was forced to 0.
    pub degenerate: bool,
}

impl TaskCode {
    /// Fraction of exactly-zero coefficients.
    pub fn sparsity(&self) -> f64 {
        if self.s.is_empty() {
            return 1.0;
        }
        self.s.iter().filter(|&&v| v == 0.0).count() as f64 / self.s.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub task_id: usize,
    pub theta: Vec<f64>,
    /// Diagonal curvature weights, all `>= 0`.
    pub z: Vec<f64>,
    pub samples: usize,
}

impl TaskStats {
    pub fn new(task_id: usize, theta: Vec<f64>, z: Vec<f64>, samples: usize) -> Result<Self> {
        if theta.len() != z.len() {
            return input_err("theta and Z must have equal length");
        }
        if theta.iter().chain(&z).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("task statistics are not finite".into()));
        }
        if z.iter().any(|&v| v < 0.0) {
            return input_err("curvature weights must be nonnegative");
        }
        Ok(Self {
            task_id,
            theta,
            z,
            samples,
        })
    }
}

impl TaskStats {
    /// Rescale `Z` to unit mean. The sparsity weight is then relative to an
    /// average coordinate's curvature instead of the raw Fisher scale.
    pub fn normalized(&self) -> Self {
        let mean = self.z.iter().sum::<f64>() / self.z.len().max(1) as f64;
        let mut out = self.clone();
        if mean > 0.0 {
            out.z.iter_mut().for_each(|v| *v /= mean);
        }
        out
    }
}

/// Streaming mean and standard error of weighted squared score vectors.
#[derive(Clone, Debug)]
pub struct FisherAccumulator {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl FisherAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
        }
    }

    /// Add one sample `weight · score²` (weight clamped at 0 from below).
    pub fn push(&mut self, score: &[f64], weight: f64) {
        let w = weight.max(0.0);
        for ((s, q), g) in self.sum.iter_mut().zip(&mut self.sum_sq).zip(score) {
            let v = w * g * g;
            *s += v;
            *q += v * v;
        }
        self.n += 1;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.sum.iter().map(|s| s / n).collect()
    }

    /// Standard error of each mean entry.
    pub fn std_error(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![f64::INFINITY; self.sum.len()];
        }
        let n = self.n as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| {
                let m = s / n;
                let var = ((q / n) - m * m).max(0.0) * n / (n - 1.0);
                (var / n).sqrt()
            })
            .collect()
    }
}

/// `θ_t` is the generator's core; `Z_t` is the diagonal empirical Fisher of the
/// core, `mean_i D(Y_i) · (∇ log G(Y_i))²` over `n_samples` sampled sequences.
pub fn estimate_task_stats<R: RngCore + ?Sized>(
    task_id: usize,
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    seq_len: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<TaskStats> {
    if n_samples == 0 {
        return input_err("n_samples must be at least 1");
    }
    let offset = gen.core_offset();
    let mut acc = FisherAccumulator::new(gen.core_len());
    for _ in 0..n_samples {
        let seq = generator::sample_sequence(gen, seq_len, rng)?;
        let q = discriminator::forward(disc, seq.tokens())?;
        let (_, g) = generator::weighted_log_likelihood(gen, seq.tokens(), &vec![1.0; seq.len()])?;
        let flat = crate::params::ParamSet::flatten(&g);
        acc.push(&flat[offset..], q);
    }
    TaskStats::new(task_id, gen.core(), acc.mean(), n_samples)
}

fn check_dims(l: &SharedBasis, stats: &TaskStats) -> Result<()> {
    if l.d_core() != stats.theta.len() {
        return input_err(format!(
            "basis has {} rows, task statistics have {} entries",
            l.d_core(),
            stats.theta.len()
        ));
    }
    Ok(())
}

/// `(LᵀZL, LᵀZθ, θᵀZθ)` for one task.
fn normal_terms(l: &Matrix, stats: &TaskStats) -> (DMatrix<f64>, DVector<f64>, f64) {
    let k = l.cols();
    let mut gram = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    let mut tzt = 0.0;
    for i in 0..l.rows() {
        let z = stats.z[i];
        if z == 0.0 {
            continue;
        }
        let row = l.row(i);
        let th = stats.theta[i];
        tzt += z * th * th;
        for a in 0..k {
            rhs[a] += z * row[a] * th;
            for b in a..k {
                gram[(a, b)] += z * row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    (gram, rhs, tzt)
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Sparse code minimizing `‖θ − L s‖²_Z + μ‖s‖₁` by cyclic coordinate descent.
pub fn solve_task_code(
    l: &SharedBasis,
    stats: &TaskStats,
    mu_sparse: f64,
    cfg: &LifelongConfig,
) -> Result<TaskCode> {
    check_dims(l, stats)?;
    if !(mu_sparse >= 0.0) {
        return input_err("mu_sparse must be >= 0");
    }
    let k = l.k_latent();
    if stats.z.iter().all(|&v| v == 0.0) {
        log::warn!("task {}: all curvature weights are zero, code set to 0", stats.task_id);
        return Ok(TaskCode {
            task_id: stats.task_id,
            s: vec![0.0; k],
            degenerate: true,
        });
    }
    let (gram, rhs, _) = normal_terms(&l.l, stats);
    let mut s = vec![0.0; k];
    for _ in 0..cfg.max_sweeps {
        let mut max_change = 0.0_f64;
        for j in 0..k {
            let a = gram[(j, j)];
            if a <= 0.0 {
                s[j] = 0.0;
                continue;
            }
            // ρ = [LᵀZ(θ − Σ_{m≠j} L_m s_m)]_j
            let mut rho = rhs[j];
            for m in 0..k {
                if m != j {
                    rho -= gram[(j, m)] * s[m];
                }
            }
            let next = soft_threshold(rho, mu_sparse / 2.0) / a;
            max_change = max_change.max((next - s[j]).abs());
            s[j] = next;
        }
        if max_change < cfg.code_tol {
            break;
        }
    }
    Ok(TaskCode {
        task_id: stats.task_id,
        s,
        degenerate: false,
    })
}

/// Gradient of `‖θ − L s‖²_Z` with respect to `s`.
pub fn code_residual_gradient(l: &SharedBasis, stats: &TaskStats, s: &[f64]) -> Vec<f64> {
    let (gram, rhs, _) = normal_terms(&l.l, stats);
    let sv = DVector::from_column_slice(s);
    let g = (&gram * &sv - &rhs) * 2.0;
    g.iter().copied().collect()
}

/// Exact minimizer over `L` of `(1/T) Σ_t ‖θ_t − L s_t‖²_{Z_t} + λ‖L‖²_F`.
///
/// Rows decouple because every `Z_t` is diagonal: row `i` solves
/// `((1/T) Σ_t Z_ti s_t s_tᵀ + λI) L_i = (1/T) Σ_t Z_ti θ_ti s_t`.
pub fn update_basis(tasks: &[(TaskStats, TaskCode)], lambda_ridge: f64) -> Result<SharedBasis> {
    if tasks.is_empty() {
        return input_err("basis update needs at least one task");
    }
    let d = tasks[0].0.theta.len();
    let k = tasks[0].1.s.len();
    if tasks
        .iter()
        .any(|(st, c)| st.theta.len() != d || c.s.len() != k)
    {
        return input_err("inconsistent task dimensions");
    }
    let inv_t = 1.0 / tasks.len() as f64;
    let mut l = Matrix::zeros(d, k);
    for i in 0..d {
        let mut a = DMatrix::<f64>::identity(k, k) * lambda_ridge;
        let mut b = DVector::<f64>::zeros(k);
        for (st, code) in tasks {
            let z = st.z[i] * inv_t;
            if z == 0.0 {
                continue;
            }
            for p in 0..k {
                b[p] += z * st.theta[i] * code.s[p];
                for q in 0..k {
                    a[(p, q)] += z * code.s[p] * code.s[q];
                }
            }
        }
        let row = match a.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => {
                if b.iter().all(|&v| v == 0.0) {
                    DVector::zeros(k)
                } else {
                    return Err(Error::Solver(format!(
                        "basis row {i} has a singular system; use lambda_ridge > 0"
                    )));
                }
            }
        };
        l.row_mut(i).copy_from_slice(row.as_slice());
    }
    let tasks_seen = tasks.len();
    Ok(SharedBasis { l, tasks_seen })
}

/// Residual of row `i`'s normal equations for a candidate basis.
pub fn basis_normal_residual(
    basis: &SharedBasis,
    tasks: &[(TaskStats, TaskCode)],
    lambda_ridge: f64,
) -> f64 {
    let k = basis.k_latent();
    let inv_t = 1.0 / tasks.len() as f64;
    let mut worst = 0.0_f64;
    for i in 0..basis.d_core() {
        let li = basis.l.row(i);
        for p in 0..k {
            let mut r = lambda_ridge * li[p];
            for (st, code) in tasks {
                let z = st.z[i] * inv_t;
                let fit: f64 = (0..k).map(|q| li[q] * code.s[q]).sum();
                r += z * (fit - st.theta[i]) * code.s[p];
            }
            worst = worst.max(r.abs());
        }
    }
    worst
}

pub fn reconstruct_policy(l: &SharedBasis, code: &TaskCode) -> Result<Vec<f64>> {
    if code.s.len() != l.k_latent() {
        return input_err(format!(
            "code has {} entries, basis has {} columns",
            code.s.len(),
            l.k_latent()
        ));
    }
    l.l.matvec(&code.s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferInit {
    pub core: Vec<f64>,
    pub code: Option<TaskCode>,
    /// True when the basis was empty and the probe parameters were passed through.
    pub cold_start: bool,
}

/// Core initialization for a new task from a short probe run's statistics.
pub fn transfer_init(
    l: &SharedBasis,
    probe: &TaskStats,
    mu_sparse: f64,
    cfg: &LifelongConfig,
) -> Result<TransferInit> {
    check_dims(l, probe)?;
    if l.is_empty() {
        return Ok(TransferInit {
            core: probe.theta.clone(),
            code: None,
            cold_start: true,
        });
    }
    let code = solve_task_code(l, probe, mu_sparse, cfg)?;
    Ok(TransferInit {
        core: reconstruct_policy(l, &code)?,
        code: Some(code),
        cold_start: false,
    })
}

pub fn lifelong_objective(
    tasks: &[(TaskStats, TaskCode)],
    l: &SharedBasis,
    mu_sparse: f64,
    lambda_ridge: f64,
) -> Result<f64> {
    if tasks.is_empty() {
        return input_err("objective needs at least one task");
    }
    let mut total = 0.0;
    for (st, code) in tasks {
        check_dims(l, st)?;
        let recon = reconstruct_policy(l, code)?;
        let fit: f64 = st
            .theta
            .iter()
            .zip(&recon)
            .zip(&st.z)
            .map(|((t, r), z)| z * (t - r).powi(2))
            .sum();
        total += fit + mu_sparse * code.s.iter().map(|v| v.abs()).sum::<f64>();
    }
    let frob: f64 = l.l.data().iter().map(|v| v * v).sum();
    Ok(total / tasks.len() as f64 + lambda_ridge * frob)
}

/// Store of every absorbed task together with the current basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedMemory {
    pub config: LifelongConfig,
    pub basis: SharedBasis,
    pub tasks: Vec<(TaskStats, TaskCode)>,
}

impl SharedMemory {
    pub fn new(d_core: usize, config: LifelongConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            basis: SharedBasis::empty(d_core, config.k_latent),
            config,
            tasks: Vec::new(),
        })
    }

    /// Add a task and refit by alternating exact code and basis solves.
    /// Returns the objective after each half-step (code, basis, code, ...).
    pub fn absorb(&mut self, stats: TaskStats) -> Result<Vec<f64>> {
        check_dims(&self.basis, &stats)?;
        let k = self.basis.k_latent();
        // seed an unused column with the new task's parameters
        if self.tasks.len() < k {
            let col = self.tasks.len();
            for (i, &v) in stats.theta.iter().enumerate() {
                self.basis.l.set(i, col, v);
            }
        }
        let placeholder = TaskCode {
            task_id: stats.task_id,
            s: vec![0.0; k],
            degenerate: false,
        };
        self.tasks.push((stats, placeholder));
        self.basis.tasks_seen = self.tasks.len();
        let (mu, lambda) = (self.config.mu_sparse, self.config.lambda_ridge);
        let mut trace = Vec::new();
        for _ in 0..self.config.refit_passes {
            for idx in 0..self.tasks.len() {
                let code = solve_task_code(&self.basis, &self.tasks[idx].0, mu, &self.config)?;
                self.tasks[idx].1 = code;
            }
            trace.push(lifelong_objective(&self.tasks, &self.basis, mu, lambda)?);
            self.basis = update_basis(&self.tasks, lambda)?;
            trace.push(lifelong_objective(&self.tasks, &self.basis, mu, lambda)?);
        }
        Ok(trace)
    }

    pub fn codes(&self) -> Vec<TaskCode> {
        self.tasks.iter().map(|(_, c)| c.clone()).collect()
    }
}
