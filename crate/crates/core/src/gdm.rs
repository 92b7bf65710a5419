//! Generalized discrepancy minimization on sampled surrogate sets.
//!
//! For a finite sample h_1..h_k of H″ with convex hull C, the fitted
//! hypothesis minimizes
//!
//!   λ‖h‖² + ½ (max_i L_P̂(h, h_i) + min_{h′∈C} L_P̂(h, h′))
//!
//! with L_P̂ the squared loss on the target sample. Its solution lies in the
//! span of the target points, h = n^-½ Σ_i a_i K(x′_i, ·), and is recovered
//! from a concave QP dual in (α ∈ ℝ^k, γ ∈ ℝ^n, β):
//!
//!   max −(Yα + γ/2)ᵀ A (Yα + γ/2) − ½γᵀΠγ + αᵀy′ − β
//!   s.t. 1ᵀα = ½, β ≥ −Yᵀγ (entrywise), α ≥ 0,
//!
//! where Y_ij = n^-½ h_j(x′_i), y′_j = ‖Y e_j‖², A = Kt(λI + ½Kt)⁻¹ and Π is
//! the projector onto range(Kt). Then a = (λI + ½Kt)⁻¹(Yα + ½γ).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{Dataset, WeightVector};
use crate::discrepancy::expected_loss;
use crate::error::{Error, Result};
use crate::kernel::{gram_sym, KernelSpec};
use crate::learner::{mse, Hypothesis};
use crate::optim::{solve_qp, sym_eig_sorted, QpProblem, SolveReport, DEFAULT_MAX_ITER, PINV_CUTOFF};
use crate::par::{map_indexed, Execution};
use crate::surrogate::{sample_family, SurrogateSpec, DEFAULT_CENTER_RIDGE, DEFAULT_SAMPLES_PER_BALL};

pub const DUAL_TOL: f64 = 1e-9;

/// Predictions of each sample on the target points, one column per sample.
fn target_predictions(samples: &[Hypothesis], target_x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cols: Vec<DVector<f64>> = samples.iter().map(|h| h.predict(target_x)).collect::<Result<_>>()?;
    Ok(DMatrix::from_columns(&cols))
}

/// min over the simplex of n⁻¹‖v − Y_raw μ‖².
fn hull_min(v: &DVector<f64>, y_raw: &DMatrix<f64>) -> Result<f64> {
    let n = v.len() as f64;
    let k = y_raw.ncols();
    if k == 1 {
        return Ok((v - y_raw.column(0)).norm_squared() / n);
    }
    let p = y_raw.transpose() * y_raw * (2.0 / n);
    let c = -(y_raw.transpose() * v) * (2.0 / n);
    let prob = QpProblem::new(p, c)
        .with_eq(DMatrix::from_element(1, k, 1.0), DVector::from_element(1, 1.0))
        .with_bounds(Some(DVector::zeros(k)), None);
    let rep = solve_qp(&prob, 1e-10, DEFAULT_MAX_ITER)?;
    if !rep.is_optimal() {
        return Err(Error::NotOptimal(format!("hull projection ended with {:?}", rep.status)));
    }
    let mu = rep.x.map(|x| x.max(0.0));
    let mu = &mu / mu.sum();
    Ok((v - y_raw * mu).norm_squared() / n)
}

/// ½(max_i L_P̂(h, h_i) + min over conv{h_i} of L_P̂(h, h′)).
pub fn surrogate_loss(h: &Hypothesis, samples: &[Hypothesis], ds: &Dataset) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("surrogate loss needs at least one sample".into()));
    }
    let v = h.predict(ds.target_x())?;
    let y_raw = target_predictions(samples, ds.target_x())?;
    let max = (0..y_raw.ncols())
        .map(|j| expected_loss(&v, &y_raw.column(j).into_owned(), None, 2.0))
        .fold(0.0, f64::max);
    let min = hull_min(&v, &y_raw)?.min(max);
    Ok(0.5 * (max + min))
}

/// ½(max + min) of L_P̂(h, h_i) over the finite sample itself; this is the
/// minimizer over l of max_i |l − L_P̂(h, h_i)|.
pub fn surrogate_loss_finite(h: &Hypothesis, samples: &[Hypothesis], ds: &Dataset) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("surrogate loss needs at least one sample".into()));
    }
    let v = h.predict(ds.target_x())?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in samples {
        let l = expected_loss(&v, &s.predict(ds.target_x())?, None, 2.0);
        lo = lo.min(l);
        hi = hi.max(l);
    }
    Ok(0.5 * (lo + hi))
}

/// λ‖h‖² + surrogate_loss(h).
pub fn gdm_objective(h: &Hypothesis, samples: &[Hypothesis], ds: &Dataset, lambda: f64) -> Result<f64> {
    Ok(lambda * h.rkhs_norm().powi(2) + surrogate_loss(h, samples, ds)?)
}

#[derive(Clone, Debug)]
pub struct GdmDual {
    pub y: DMatrix<f64>,
    pub y_prime: DVector<f64>,
    pub lambda: f64,
    pub kt: DMatrix<f64>,
    /// (λI + ½Kt)⁻¹
    pub shifted_inv: DMatrix<f64>,
    /// orthogonal projector onto range(Kt)
    pub range_proj: DMatrix<f64>,
}

impl GdmDual {
    pub fn k(&self) -> usize {
        self.y.ncols()
    }
    pub fn n(&self) -> usize {
        self.y.nrows()
    }
    /// a = (λI + ½Kt)⁻¹(Yα + ½γ) from x = (α, γ, β).
    pub fn coefficients(&self, x: &DVector<f64>) -> DVector<f64> {
        let (k, n) = (self.k(), self.n());
        let alpha = x.rows(0, k);
        let gamma = x.rows(k, n);
        &self.shifted_inv * (&self.y * alpha + gamma * 0.5)
    }
}

/// The dual QP as a minimization over x = (α, γ, β) of
/// ½xᵀPx + cᵀx with P = 2BᵀAB + diag(0, Π, 0), B = [Y, ½I, 0],
/// c = (−y′, 0, 1); its optimal value is minus the primal optimum.
pub fn assemble_dual(kt: &DMatrix<f64>, samples: &[Hypothesis], target_x: &DMatrix<f64>, lambda: f64) -> Result<(GdmDual, QpProblem)> {
    let n = kt.nrows();
    if kt.ncols() != n || target_x.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "Kt is {}x{} for {} target points",
            kt.nrows(),
            kt.ncols(),
            target_x.nrows()
        )));
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("dual needs at least one surrogate sample".into()));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("ridge parameter must be positive, got {lambda}")));
    }
    let k = samples.len();
    let sn = (n as f64).sqrt();
    let y = target_predictions(samples, target_x)? / sn;
    let y_prime = DVector::from_fn(k, |j, _| y.column(j).norm_squared());

    let (vals, vecs) = sym_eig_sorted(kt);
    let top = vals.iter().fold(0.0f64, |a, v| a.max(*v));
    let cut = PINV_CUTOFF * top;
    let kappa = vals.map(|v| v.max(0.0));
    let diag = |f: &dyn Fn(f64) -> f64| &vecs * DMatrix::from_diagonal(&kappa.map(f)) * vecs.transpose();
    let shifted_inv = diag(&|v| 1.0 / (lambda + 0.5 * v));
    let a_mat = diag(&|v| v / (lambda + 0.5 * v));
    let range_proj = diag(&|v| if v > cut && v > 0.0 { 1.0 } else { 0.0 });

    let nv = k + n + 1;
    let mut b = DMatrix::zeros(n, nv);
    b.view_mut((0, 0), (n, k)).copy_from(&y);
    for i in 0..n {
        b[(i, k + i)] = 0.5;
    }
    let mut p = b.transpose() * &a_mat * &b * 2.0;
    for i in 0..n {
        for j in 0..n {
            p[(k + i, k + j)] += range_proj[(i, j)];
        }
    }
    let p = (&p + p.transpose()) * 0.5;
    let mut c = DVector::zeros(nv);
    for j in 0..k {
        c[j] = -y_prime[j];
    }
    c[nv - 1] = 1.0;

    let mut a_eq = DMatrix::zeros(1, nv);
    for j in 0..k {
        a_eq[(0, j)] = 1.0;
    }
    let mut a_in = DMatrix::zeros(2 * k, nv);
    for j in 0..k {
        for i in 0..n {
            a_in[(j, k + i)] = -y[(i, j)];
        }
        a_in[(j, nv - 1)] = -1.0;
        a_in[(k + j, j)] = -1.0;
    }
    let prob = QpProblem::new(p, c)
        .with_eq(a_eq, DVector::from_element(1, 0.5))
        .with_ineq(a_in, DVector::zeros(2 * k));
    let dual = GdmDual { y, y_prime, lambda, kt: kt.clone(), shifted_inv, range_proj };
    Ok((dual, prob))
}

/// h = n^-½ Σ a_i K(x′_i, ·) from an optimal dual solution.
pub fn recover_hypothesis(dual: &GdmDual, solution: &SolveReport, target_x: &DMatrix<f64>, kernel: KernelSpec) -> Result<Hypothesis> {
    if !solution.is_optimal() {
        return Err(Error::NotOptimal(format!("dual QP ended with {:?}", solution.status)));
    }
    let n = dual.n();
    let a = dual.coefficients(&solution.x);
    Hypothesis::new(kernel, target_x.clone(), a, Some(DVector::from_element(n, 1.0 / (n as f64).sqrt())))
}

/// Coefficients b of h = n^-½ Σ b_i K(x′_i, ·) for a hypothesis anchored on
/// the target sample.
pub fn b_coefficients(h: &Hypothesis) -> DVector<f64> {
    h.effective_coeffs() * (h.anchors.nrows() as f64).sqrt()
}

/// The inverse of [`b_coefficients`].
pub fn hypothesis_from_b(kernel: KernelSpec, target_x: &DMatrix<f64>, b: &DVector<f64>) -> Result<Hypothesis> {
    let n = target_x.nrows();
    Hypothesis::new(kernel, target_x.clone(), b.clone(), Some(DVector::from_element(n, 1.0 / (n as f64).sqrt())))
}

#[derive(Clone, Debug)]
pub struct SampledSolution {
    pub h: Hypothesis,
    /// primal objective at h, using the hull QP
    pub objective: f64,
    /// optimal value of the dual
    pub dual_objective: f64,
    pub report: SolveReport,
}

/// Solve the sampled problem through its dual for the given samples.
pub fn solve_sampled(ds: &Dataset, kernel: KernelSpec, lambda: f64, samples: &[Hypothesis]) -> Result<SampledSolution> {
    let kt = gram_sym(&kernel, ds.target_x()) / ds.n() as f64;
    let (dual, prob) = assemble_dual(&kt, samples, ds.target_x(), lambda)?;
    let report = solve_qp(&prob, DUAL_TOL, DEFAULT_MAX_ITER)?;
    let h = recover_hypothesis(&dual, &report, ds.target_x(), kernel)?;
    let objective = gdm_objective(&h, samples, ds, lambda)?;
    Ok(SampledSolution { h, objective, dual_objective: -report.objective, report })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GdmConfig {
    pub lambda: f64,
    /// loss level ρ of the surrogate balls: Σ w|h − y|^p ≤ ρ
    pub level: f64,
    pub p: f64,
    pub k: usize,
    pub seed: u64,
    pub lambda_center: f64,
}

impl GdmConfig {
    pub fn new(lambda: f64, level: f64) -> Self {
        Self { lambda, level, p: 2.0, k: DEFAULT_SAMPLES_PER_BALL, seed: 0, lambda_center: DEFAULT_CENTER_RIDGE }
    }
}

#[derive(Clone, Debug)]
pub struct GdmFit {
    pub h: Hypothesis,
    pub objective: f64,
    pub dual_objective: f64,
    pub samples: Vec<Hypothesis>,
    pub groups_used: Vec<usize>,
}

/// GDM with an explicit surrogate family: sample k boundary points per
/// usable group, pool them and solve the dual QP.
pub fn gdm_fit_spec(ds: &Dataset, kernel: KernelSpec, lambda: f64, spec: &SurrogateSpec, k: usize, seed: u64, lambda_center: f64) -> Result<GdmFit> {
    if spec.kernel != kernel {
        return Err(Error::InvalidInput("surrogate kernel differs from the fit kernel".into()));
    }
    let (samples, groups_used) = sample_family(spec, lambda_center, k, seed, Execution::Sequential)?;
    let sol = solve_sampled(ds, kernel, lambda, &samples)?;
    Ok(GdmFit { h: sol.h, objective: sol.objective, dual_objective: sol.dual_objective, samples, groups_used })
}

/// GDM on the union family {L_q_min ≤ ρ} ∪ {L_uniform ≤ ρ} at ρ = cfg.level.
pub fn gdm_fit(ds: &Dataset, kernel: KernelSpec, q_min: &WeightVector, cfg: &GdmConfig) -> Result<GdmFit> {
    let spec = SurrogateSpec::union_family(ds, q_min, cfg.level, cfg.p, kernel)?;
    gdm_fit_spec(ds, kernel, cfg.lambda, &spec, cfg.k, cfg.seed, cfg.lambda_center)
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationRow {
    pub level: f64,
    /// MSE on the labeled target points; None when no fit exists at this level
    pub mse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Validation {
    pub best_level: f64,
    pub best: GdmFit,
    pub table: Vec<ValidationRow>,
}

/// Fit GDM at each level of `grid` (seed + grid index) and keep the one with
/// the smallest MSE on T′; ties go to the smaller level.
pub fn validate_r(ds: &Dataset, kernel: KernelSpec, q_min: &WeightVector, grid: &[f64], cfg: &GdmConfig, exec: Execution) -> Result<Validation> {
    if ds.s() == 0 {
        return Err(Error::EmptyValidation);
    }
    if grid.is_empty() {
        return Err(Error::InvalidInput("r grid is empty".into()));
    }
    let fits = map_indexed(exec, grid.len(), |i| {
        let c = GdmConfig { level: grid[i], seed: cfg.seed.wrapping_add(i as u64), ..*cfg };
        match gdm_fit(ds, kernel, q_min, &c) {
            Ok(f) => {
                let pred = f.h.predict(ds.labeled_x())?;
                Ok(Some((mse(&pred, ds.labeled_y()), f)))
            }
            Err(Error::InfeasibleCenter(msg)) => {
                log::debug!("level {:e}: {msg}", grid[i]);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    });
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64, GdmFit)> = None;
    for (i, r) in fits.into_iter().enumerate() {
        match r? {
            Some((err, fit)) => {
                table.push(ValidationRow { level: grid[i], mse: Some(err) });
                let better = match &best {
                    None => true,
                    Some((j, e, _)) => err < *e || (err == *e && grid[i] < grid[*j]),
                };
                if better {
                    best = Some((i, err, fit));
                }
            }
            None => table.push(ValidationRow { level: grid[i], mse: None }),
        }
    }
    let (i, _, fit) = best.ok_or_else(|| Error::InfeasibleCenter("no level of the grid admits an interior center".into()))?;
    Ok(Validation { best_level: grid[i], best: fit, table })
}
