//! Discrepancy under the squared loss, DM reweighting, and the finite-sample
//! diagnostics built around it (generalized discrepancy, η_H, d∞ and the
//! μ-admissibility checks).
//!
//! For L2 and h(x) = wᵀφ(x), the loss gap between a weighting q of the
//! source and the uniform target is (w − w′)ᵀ M(q) (w − w′) with
//! M(q) = Σ_i q_i φ(x_i)φ(x_i)ᵀ − n⁻¹ Σ_j φ(x′_j)φ(x′_j)ᵀ.
//! Over ‖w‖, ‖w′‖ ≤ Λ the difference w − w′ ranges over the 2Λ-ball, so
//! disc(q) = 4Λ² ‖M(q)‖₂.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, WeightVector};
use crate::error::{Error, Result};
use crate::kernel::{gram_sym, KernelSpec};
use crate::learner::Hypothesis;
use crate::optim::{project_simplex, solve_qp, spectral_norm, spectral_norm_from, sym_eig_sorted, QpProblem, PINV_CUTOFF};
use crate::par::{map_indexed, Execution};
use crate::rng::Rng64;

/// H = {h : ‖h‖_K ≤ Λ}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisClassSpec {
    pub kernel: KernelSpec,
    pub radius: f64,
}

impl HypothesisClassSpec {
    pub fn new(kernel: KernelSpec, radius: f64) -> Result<Self> {
        kernel.validate()?;
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidInput(format!("class radius must be positive, got {radius}")));
        }
        Ok(Self { kernel, radius })
    }
}

/// L_p loss bounded by M, with admissibility constant μ = p·M^(p−1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub p: f64,
    pub m_bound: f64,
    pub mu: f64,
}

impl LossSpec {
    pub fn new(p: f64, m_bound: f64) -> Result<Self> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(Error::InvalidInput(format!("loss exponent must be ≥ 1, got {p}")));
        }
        if !(m_bound > 0.0) || !m_bound.is_finite() {
            return Err(Error::InvalidInput(format!("loss bound must be positive, got {m_bound}")));
        }
        Ok(Self { p, m_bound, mu: p * m_bound.powf(p - 1.0) })
    }

    pub fn l2(m_bound: f64) -> Result<Self> {
        Self::new(2.0, m_bound)
    }
}

/// Σ_i w_i |a_i − b_i|^p, or the plain mean when `weights` is `None`.
pub fn expected_loss(a: &DVector<f64>, b: &DVector<f64>, weights: Option<&DVector<f64>>, p: f64) -> f64 {
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let term = |i: usize| {
        let e = (a[i] - b[i]).abs();
        if p == 2.0 {
            e * e
        } else {
            e.powf(p)
        }
    };
    match weights {
        Some(w) => (0..n).map(|i| w[i] * term(i)).sum(),
        None => (0..n).map(term).sum::<f64>() / n as f64,
    }
}

// ---------------------------------------------------------------------------
// feature space

/// Explicit features for the source and target points.
#[derive(Clone, Debug)]
pub struct FeatureSpace {
    pub source: DMatrix<f64>,
    pub target: DMatrix<f64>,
}

/// Raw coordinates for the linear kernel. For other kernels, kernel-PCA
/// features U_r Λ_r^½ of the combined sample S ∪ T, which reproduce the Gram
/// matrix on that sample; eigenvalues below 1e-10·λ_max are dropped.
pub fn feature_space(kernel: &KernelSpec, source: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<FeatureSpace> {
    kernel.validate()?;
    if source.ncols() != target.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "source has {} columns, target has {}",
            source.ncols(),
            target.ncols()
        )));
    }
    match kernel {
        KernelSpec::Linear => Ok(FeatureSpace { source: source.clone(), target: target.clone() }),
        _ => {
            let (m, n) = (source.nrows(), target.nrows());
            let all = DMatrix::from_fn(m + n, source.ncols(), |i, j| if i < m { source[(i, j)] } else { target[(i - m, j)] });
            let k = gram_sym(kernel, &all);
            let (vals, vecs) = sym_eig_sorted(&k);
            let top = vals.iter().fold(0.0f64, |a, v| a.max(*v));
            let keep: Vec<usize> = (0..vals.len()).rev().filter(|&i| vals[i] > PINV_CUTOFF * top).collect();
            let phi = DMatrix::from_fn(m + n, keep.len(), |r, c| vecs[(r, keep[c])] * vals[keep[c]].sqrt());
            Ok(FeatureSpace { source: phi.rows(0, m).into_owned(), target: phi.rows(m, n).into_owned() })
        }
    }
}

fn second_moment(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let b = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * w[i].max(0.0).sqrt());
    b.transpose() * b
}

fn target_moment(fs: &FeatureSpace) -> DMatrix<f64> {
    let n = fs.target.nrows() as f64;
    fs.target.transpose() * &fs.target / n
}

fn check_simplex(q: &WeightVector, m: usize) -> Result<()> {
    if q.len() != m {
        return Err(Error::DimensionMismatch(format!("q has {} entries for {m} source points", q.len())));
    }
    if !q.is_simplex() {
        return Err(Error::InvalidInput("discrepancy needs simplex weights".into()));
    }
    Ok(())
}

/// 4Λ²‖M(q)‖₂ on explicit features.
pub fn disc_from_features(q: &DVector<f64>, fs: &FeatureSpace, radius: f64) -> f64 {
    let mq = second_moment(&fs.source, q) - target_moment(fs);
    4.0 * radius * radius * spectral_norm(&mq, 1e-12).value
}

/// Squared-loss discrepancy between q over S and the uniform target T.
pub fn disc_l2(q: &WeightVector, ds: &Dataset, hclass: &HypothesisClassSpec) -> Result<f64> {
    check_simplex(q, ds.m())?;
    let fs = feature_space(&hclass.kernel, ds.source_x(), ds.target_x())?;
    Ok(disc_from_features(q.values(), &fs, hclass.radius))
}

/// Same measure for a general loss exponent: disc requires L2, so any other
/// p is rejected.
pub fn disc_for_loss(q: &WeightVector, ds: &Dataset, hclass: &HypothesisClassSpec, loss: &LossSpec) -> Result<f64> {
    if loss.p != 2.0 {
        return Err(Error::InvalidInput(format!("closed-form discrepancy needs the squared loss, got p = {}", loss.p)));
    }
    disc_l2(q, ds, hclass)
}

// ---------------------------------------------------------------------------
// DM

pub const DM_DEFAULT_ITERS: usize = 2000;

#[derive(Clone, Debug)]
pub struct DmResult {
    pub q: WeightVector,
    pub disc: f64,
    pub iterations: usize,
    /// false when the last epoch still improved by more than the tolerance
    pub converged: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct DmOptions {
    pub iters: usize,
    pub seed: u64,
    /// relative improvement per epoch below which the run counts as converged
    pub tol: f64,
    pub epoch: usize,
    /// follow the subgradient phase with the smoothed refinement
    pub refine: bool,
}

impl Default for DmOptions {
    fn default() -> Self {
        Self { iters: DM_DEFAULT_ITERS, seed: 0, tol: 1e-6, epoch: 200, refine: true }
    }
}

/// q_min = argmin over the simplex of disc_l2(q).
pub fn dm_minimize(ds: &Dataset, hclass: &HypothesisClassSpec, iters: usize, seed: u64) -> Result<DmResult> {
    let fs = feature_space(&hclass.kernel, ds.source_x(), ds.target_x())?;
    let opts = DmOptions { iters, seed, ..DmOptions::default() };
    dm_minimize_features(&fs, hclass.radius, &WeightVector::uniform(ds.m()), &opts)
}

/// DM on S ∪ T′ (the labeled target points join the source sample), started
/// from `q_min` padded with zeros over T′. The start is a feasible point with
/// the same moment matrix, so the result never exceeds disc(q_min).
pub fn dm_minimize_augmented(ds: &Dataset, hclass: &HypothesisClassSpec, q_min: &WeightVector, iters: usize, seed: u64) -> Result<DmResult> {
    check_simplex(q_min, ds.m())?;
    let aug = ds.augmented();
    let fs = feature_space(&hclass.kernel, aug.source_x(), aug.target_x())?;
    let opts = DmOptions { iters, seed, ..DmOptions::default() };
    dm_minimize_features(&fs, hclass.radius, &q_min.padded(ds.s()), &opts)
}

/// Projected subgradient on q ↦ 4Λ²‖M(q)‖₂ with steps c/√t,
/// c = 1/(4Λ² max‖x_i‖²). The subgradient at q is 4Λ²·sign(λ)(uᵀx_i)²
/// for the dominant eigenpair (λ, u). Iterations run in epochs; each epoch
/// restarts from the best point so far with half the step constant. The
/// subgradient phase alone stalls around kinks of the spectral norm, so it
/// is followed by an accelerated gradient pass on a smoothed objective; the
/// best exact value over both phases is returned.
pub fn dm_minimize_features(fs: &FeatureSpace, radius: f64, start: &WeightVector, opts: &DmOptions) -> Result<DmResult> {
    let m = fs.source.nrows();
    check_simplex(start, m)?;
    if !(radius > 0.0) {
        return Err(Error::InvalidInput("class radius must be positive".into()));
    }
    let r = fs.source.ncols();
    let scale = 4.0 * radius * radius;
    let ct = target_moment(fs);
    let max_sq = (0..m).map(|i| fs.source.row(i).norm_squared()).fold(0.0f64, f64::max);
    let mut rng = Rng64::new(opts.seed);
    let mut v = DVector::from_fn(r, |_, _| rng.gaussian());

    let eval = |q: &DVector<f64>, v: &mut DVector<f64>| {
        let mq = second_moment(&fs.source, q) - &ct;
        let s = spectral_norm_from(&mq, 1e-12, v);
        if s.vector.len() == v.len() && s.vector.norm() > 0.0 {
            *v = s.vector.clone();
        }
        (scale * s.value, s)
    };

    let mut best_q = start.values().clone();
    let (mut best, _) = eval(&best_q, &mut v);
    if max_sq == 0.0 || r == 0 || best == 0.0 {
        return Ok(DmResult { q: start.clone(), disc: best, iterations: 0, converged: true });
    }
    let mut c = 1.0 / (scale * max_sq);
    let epoch = opts.epoch.max(1);
    let mut done = 0;
    let mut converged = false;
    while done < opts.iters {
        let len = epoch.min(opts.iters - done);
        let epoch_start = best;
        let mut q = best_q.clone();
        for t in 1..=len {
            let (val, s) = eval(&q, &mut v);
            if val < best {
                best = val;
                best_q = q.clone();
            }
            let sign = if s.eigenvalue >= 0.0 { 1.0 } else { -1.0 };
            let proj = &fs.source * &s.vector;
            let g = DVector::from_fn(m, |i, _| scale * sign * proj[i] * proj[i]);
            q = project_simplex(&(q - g * (c / (t as f64).sqrt())));
        }
        let (val, _) = eval(&q, &mut v);
        if val < best {
            best = val;
            best_q = q;
        }
        done += len;
        if epoch_start - best <= opts.tol * epoch_start.max(1e-300) || best == 0.0 {
            converged = true;
            break;
        }
        c *= 0.5;
    }
    if opts.refine && best > 0.0 {
        let (q, val, it) = smooth_refine(fs, scale, &ct, &best_q, best);
        done += it;
        if val < best {
            best = val;
            best_q = q;
            converged = true;
        }
    }
    if !converged {
        log::debug!("dm_minimize stopped at the iteration cap with disc {best:e}");
    }
    let q = WeightVector::simplex(best_q.clone()).or_else(|_| WeightVector::normalized(best_q))?;
    let disc = disc_from_features(q.values(), fs, radius);
    Ok(DmResult { q, disc, iterations: done, converged })
}

/// Smoothed objective μ·log Σ_k (e^{λ_k/μ} + e^{−λ_k/μ}) over the
/// eigenvalues of M(q), which lies within μ·log(2r) above ‖M(q)‖₂, and its
/// gradient Σ_k π_k (u_kᵀx_i)².
fn smoothed(fs: &FeatureSpace, ct: &DMatrix<f64>, q: &DVector<f64>, mu: f64) -> (f64, DVector<f64>, f64) {
    let mq = second_moment(&fs.source, q) - ct;
    let (vals, vecs) = sym_eig_sorted(&mq);
    let top = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut z = 0.0;
    let mut pi = DVector::zeros(vals.len());
    for k in 0..vals.len() {
        let a = ((vals[k] - top) / mu).exp();
        let b = ((-vals[k] - top) / mu).exp();
        z += a + b;
        pi[k] = a - b;
    }
    let f = top + mu * z.ln();
    let proj = &fs.source * &vecs;
    let g = DVector::from_fn(fs.source.nrows(), |i, _| (0..vals.len()).map(|k| pi[k] * proj[(i, k)].powi(2)).sum::<f64>() / z);
    (f, g, top)
}

/// Accelerated projected gradient on the smoothed objective with the
/// smoothing level cut by 10 per stage. Returns the best exact value seen.
fn smooth_refine(fs: &FeatureSpace, scale: f64, ct: &DMatrix<f64>, start: &DVector<f64>, start_val: f64) -> (DVector<f64>, f64, usize) {
    const STAGE_ITERS: usize = 300;
    let r = fs.source.ncols().max(1) as f64;
    let floor = 1e-13 * (start_val / scale).max(1e-300);
    let mut mu = (start_val / scale) / (2.0 * r).ln().max(1.0);
    let mut best_q = start.clone();
    let mut best = start_val / scale;
    let mut x = start.clone();
    let mut step: f64 = 1.0;
    let mut iters = 0;
    while mu > floor {
        let mut y = x.clone();
        let mut t = 1.0f64;
        for _ in 0..STAGE_ITERS {
            iters += 1;
            let (fy, gy, _) = smoothed(fs, ct, &y, mu);
            let mut accepted = None;
            for _ in 0..60 {
                let z = project_simplex(&(&y - &gy * step));
                let (fz, _, exact) = smoothed(fs, ct, &z, mu);
                let dz = &z - &y;
                if fz <= fy + gy.dot(&dz) + dz.norm_squared() / (2.0 * step) + 1e-15 * fy.abs() {
                    accepted = Some((z, exact));
                    break;
                }
                step *= 0.5;
            }
            let Some((z, exact)) = accepted else { break };
            if exact < best {
                best = exact;
                best_q = z.clone();
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &z + (&z - &x) * ((t - 1.0) / t_next);
            y = project_simplex(&y);
            let moved = (&z - &x).norm();
            x = z;
            if moved <= 1e-15 {
                break;
            }
            t = t_next;
            step *= 1.5;
        }
        x = best_q.clone();
        mu *= 0.1;
    }
    (best_q, best * scale, iters)
}

// ---------------------------------------------------------------------------
// finite-sample diagnostics

/// L_P̂(a, b) under squared loss on the target sample.
pub fn target_loss(a: &Hypothesis, b: &Hypothesis, ds: &Dataset) -> Result<f64> {
    Ok(expected_loss(&a.predict(ds.target_x())?, &b.predict(ds.target_x())?, None, 2.0))
}

/// max over the grids of |L_P̂(h, h″) − reweight_loss(h)|. The maximum is over
/// finite subsets of H × H″, so this is a lower bound on the generalized
/// discrepancy.
pub fn generalized_disc_lower_bound(
    h_grid: &[Hypothesis],
    surrogate_samples: &[Hypothesis],
    reweight_loss: &dyn Fn(&Hypothesis) -> f64,
    ds: &Dataset,
) -> Result<f64> {
    if h_grid.is_empty() || surrogate_samples.is_empty() {
        return Err(Error::InvalidInput("generalized discrepancy needs nonempty grids".into()));
    }
    let sur: Vec<DVector<f64>> = surrogate_samples.iter().map(|h| h.predict(ds.target_x())).collect::<Result<_>>()?;
    let mut best = 0.0f64;
    for h in h_grid {
        let ph = h.predict(ds.target_x())?;
        let rw = reweight_loss(h);
        for ps in &sur {
            best = best.max((expected_loss(&ph, ps, None, 2.0) - rw).abs());
        }
    }
    Ok(best)
}

/// Bracket for η_H and the linear hypothesis realizing the upper end.
#[derive(Clone, Debug)]
pub struct EtaEstimate {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub w: DVector<f64>,
    /// true when the norm constraint is inactive and the LP value is exact
    pub exact: bool,
}

fn max_dev(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let pred = x * w;
    (0..y.len()).map(|i| (pred[i] - y[i]).abs()).fold(0.0, f64::max)
}

fn chebyshev_qp(ds: &Dataset, fp: &DVector<f64>, kappa: f64) -> Result<(DVector<f64>, f64)> {
    let d = ds.dim();
    let xs = ds.source_x();
    let xt = ds.target_x();
    let (m, n) = (xs.nrows(), xt.nrows());
    let nv = d + 2;
    let mut p = DMatrix::zeros(nv, nv);
    for i in 0..d {
        p[(i, i)] = 2.0 * kappa;
    }
    let mut c = DVector::zeros(nv);
    c[d] = 1.0;
    c[d + 1] = 1.0;
    let rows = 2 * (m + n);
    let mut a = DMatrix::zeros(rows, nv);
    let mut b = DVector::zeros(rows);
    let mut put = |r0: usize, x: &DMatrix<f64>, y: &DVector<f64>, t: usize| {
        for i in 0..x.nrows() {
            for j in 0..d {
                a[(r0 + 2 * i, j)] = x[(i, j)];
                a[(r0 + 2 * i + 1, j)] = -x[(i, j)];
            }
            a[(r0 + 2 * i, t)] = -1.0;
            a[(r0 + 2 * i + 1, t)] = -1.0;
            b[r0 + 2 * i] = y[i];
            b[r0 + 2 * i + 1] = -y[i];
        }
    };
    put(0, xs, ds.source_y(), d);
    put(2 * m, xt, fp, d + 1);
    let lower = DVector::from_fn(nv, |i, _| if i < d { f64::NEG_INFINITY } else { 0.0 });
    let prob = QpProblem::new(p, c).with_ineq(a, b).with_bounds(Some(lower), None);
    let rep = solve_qp(&prob, 1e-10, 50_000)?;
    if !rep.is_optimal() {
        return Err(Error::NotOptimal(format!("Chebyshev fit ended with {:?}", rep.status)));
    }
    Ok((rep.x.rows(0, d).into_owned(), rep.objective))
}

/// η_H = min over ‖w‖ ≤ Λ of max_S |y − wᵀx| + max_T |f_P − wᵀx′| for the
/// linear class, with f_P the target oracle labels.
///
/// The unconstrained problem is an LP. When its solution violates the norm
/// bound, the penalized problems min t₁ + t₂ + κ‖w‖² are solved on a
/// bisection over κ: the first κ with ‖w(κ)‖ ≤ Λ gives a feasible (upper)
/// value and each penalized optimum minus κΛ² is a Lagrangian lower bound.
pub fn eta_h(ds: &Dataset, hclass: &HypothesisClassSpec) -> Result<EtaEstimate> {
    if hclass.kernel != KernelSpec::Linear {
        return Err(Error::InvalidInput("eta_H is computed for the linear class only".into()));
    }
    let fp = ds.require_target_oracle()?.clone();
    let lam = hclass.radius;
    let value_at = |w: &DVector<f64>| max_dev(ds.source_x(), ds.source_y(), w) + max_dev(ds.target_x(), &fp, w);

    let (w0, v0) = chebyshev_qp(ds, &fp, 0.0)?;
    if w0.norm() <= lam {
        let v = value_at(&w0);
        return Ok(EtaEstimate { value: v, lower: v0.min(v), upper: v, w: w0, exact: true });
    }
    let mut lower = v0;
    let mut lo = 0.0;
    let mut hi = 1e-6;
    let mut w_hi;
    loop {
        let (w, val) = chebyshev_qp(ds, &fp, hi)?;
        lower = lower.max(val - hi * lam * lam);
        if w.norm() <= lam {
            w_hi = w;
            break;
        }
        lo = hi;
        hi *= 4.0;
        if hi > 1e12 {
            return Err(Error::MaxIter("penalty sweep did not reach the norm bound".into()));
        }
    }
    for _ in 0..40 {
        let mid = if lo == 0.0 { hi * 0.5 } else { (lo * hi).sqrt() };
        let (w, val) = chebyshev_qp(ds, &fp, mid)?;
        lower = lower.max(val - mid * lam * lam);
        if w.norm() <= lam {
            hi = mid;
            w_hi = w;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-10 * hi {
            break;
        }
    }
    let upper = value_at(&w_hi);
    Ok(EtaEstimate { value: upper, lower: lower.min(upper), upper, w: w_hi, exact: false })
}

/// min over the samples of max_T |h₀(x′) − f_P(x′)|. The minimum is over a
/// finite subset of H″, so this is an upper bound on d∞.
pub fn d_inf(ds: &Dataset, surrogate_samples: &[Hypothesis]) -> Result<f64> {
    if surrogate_samples.is_empty() {
        return Err(Error::InvalidInput("d_inf needs at least one sample".into()));
    }
    let fp = ds.require_target_oracle()?;
    let mut best = f64::INFINITY;
    for h in surrogate_samples {
        let pred = h.predict(ds.target_x())?;
        let dev = (0..fp.len()).map(|i| (pred[i] - fp[i]).abs()).fold(0.0, f64::max);
        best = best.min(dev);
    }
    Ok(best)
}

/// Estimated sides of the local-discrepancy bound comparison:
/// μ d∞(f_P, H″) + max |L_P̂(h, h″) − L_q(h, f_Q)| against
/// μ η_H + disc_H″(P̂, q). Both sides use finite grids, so the check is
/// advisory only.
#[derive(Clone, Debug, Serialize)]
pub struct LocalBoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn local_bound_diagnostic(
    ds: &Dataset,
    q: &WeightVector,
    mu: f64,
    eta: f64,
    h_grid: &[Hypothesis],
    surrogate_samples: &[Hypothesis],
) -> Result<LocalBoundReport> {
    check_simplex(q, ds.m())?;
    let di = d_inf(ds, surrogate_samples)?;
    let qv = q.values();
    let sur_t: Vec<DVector<f64>> = surrogate_samples.iter().map(|h| h.predict(ds.target_x())).collect::<Result<_>>()?;
    let sur_s: Vec<DVector<f64>> = surrogate_samples.iter().map(|h| h.predict(ds.source_x())).collect::<Result<_>>()?;
    let mut gap_label = 0.0f64;
    let mut gap_local = 0.0f64;
    for h in h_grid {
        let ht = h.predict(ds.target_x())?;
        let hs = h.predict(ds.source_x())?;
        let lq_label = expected_loss(&hs, ds.source_y(), Some(qv), 2.0);
        for (st, ss) in sur_t.iter().zip(&sur_s) {
            let lp = expected_loss(&ht, st, None, 2.0);
            gap_label = gap_label.max((lp - lq_label).abs());
            gap_local = gap_local.max((lp - expected_loss(&hs, ss, Some(qv), 2.0)).abs());
        }
    }
    let lhs = mu * di + gap_label;
    let rhs = mu * eta + gap_local;
    Ok(LocalBoundReport { lhs, rhs, holds: lhs <= rhs + 1e-9 })
}

// ---------------------------------------------------------------------------
// μ-admissibility

fn lp(a: f64, b: f64, p: f64) -> f64 {
    (a - b).abs().powf(p)
}

/// (|x − z|^p, 2^(p−1)(|x − y|^p + |y − z|^p)).
pub fn relaxed_triangle(p: f64, x: f64, y: f64, z: f64) -> (f64, f64) {
    (lp(x, z, p), 2f64.powf(p - 1.0) * (lp(x, y, p) + lp(y, z, p)))
}

/// (|L(h, y) − L(h′, y)|, pM^(p−1)|h − h′|).
pub fn lipschitz_gap(p: f64, m: f64, h: f64, h2: f64, y: f64) -> (f64, f64) {
    ((lp(h, y, p) - lp(h2, y, p)).abs(), p * m.powf(p - 1.0) * (h - h2).abs())
}

/// (|L_D(h, h′) − L_D(h″, h′)|, pM^(p−1) L_D(h, h″)^(1/p)) for a finite D.
pub fn holder_gap(p: f64, m: f64, d: &[f64], h: &[f64], h1: &[f64], h2: &[f64]) -> (f64, f64) {
    let ld = |a: &[f64], b: &[f64]| d.iter().enumerate().map(|(i, w)| w * lp(a[i], b[i], p)).sum::<f64>();
    ((ld(h, h1) - ld(h2, h1)).abs(), p * m.powf(p - 1.0) * ld(h, h2).powf(1.0 / p))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub p: f64,
    pub m_bound: f64,
    pub trials: usize,
    pub triangle_violations: usize,
    pub lipschitz_violations: usize,
    pub holder_violations: usize,
}

impl AdmissibilityReport {
    pub fn total_violations(&self) -> usize {
        self.triangle_violations + self.lipschitz_violations + self.holder_violations
    }
}

const SUITE_BLOCK: usize = 4096;

fn violated(lhs: f64, rhs: f64) -> bool {
    lhs > rhs + 1e-12 * (1.0 + rhs.abs())
}

/// Randomized check of the relaxed triangle inequality, the Lipschitz bound
/// of L_p and its distributional form. Values are drawn so every deviation
/// |h − y|, |h − h′| entering the loss is at most M. Trials are split into
/// blocks with independent RNG streams, so counts do not depend on `exec`.
pub fn mu_admissibility_suite(p: f64, m: f64, trials: usize, seed: u64, exec: Execution) -> Result<AdmissibilityReport> {
    LossSpec::new(p, m)?;
    let blocks = trials.div_ceil(SUITE_BLOCK);
    let counts = map_indexed(exec, blocks, |b| {
        let mut rng = Rng64::stream(seed, b as u64);
        let len = SUITE_BLOCK.min(trials - b * SUITE_BLOCK);
        let mut c = [0usize; 3];
        let mut d = [0.0; 5];
        let (mut h, mut h1, mut h2) = ([0.0; 5], [0.0; 5], [0.0; 5]);
        for _ in 0..len {
            let x = rng.uniform_range(-m, m);
            let y = rng.uniform_range(-m, m);
            let z = rng.uniform_range(-m, m);
            let (l, r) = relaxed_triangle(p, x, y, z);
            c[0] += violated(l, r) as usize;

            let y = rng.uniform_range(-m, m);
            let ha = y + m * rng.uniform_range(-1.0, 1.0);
            let hb = y + m * rng.uniform_range(-1.0, 1.0);
            let (l, r) = lipschitz_gap(p, m, ha, hb, y);
            c[1] += violated(l, r) as usize;

            let k = 1 + rng.below(5);
            let mut total = 0.0;
            for i in 0..k {
                d[i] = rng.uniform() + 1e-3;
                total += d[i];
                h1[i] = rng.uniform_range(-m, m);
                h[i] = h1[i] + m * rng.uniform_range(-1.0, 1.0);
                h2[i] = h1[i] + m * rng.uniform_range(-1.0, 1.0);
            }
            for di in d.iter_mut().take(k) {
                *di /= total;
            }
            let (l, r) = holder_gap(p, m, &d[..k], &h[..k], &h1[..k], &h2[..k]);
            c[2] += violated(l, r) as usize;
        }
        c
    });
    let sum = counts.iter().fold([0usize; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]);
    Ok(AdmissibilityReport {
        p,
        m_bound: m,
        trials,
        triangle_violations: sum[0],
        lipschitz_violations: sum[1],
        holder_violations: sum[2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;

    fn col(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(xs.len(), 1, xs)
    }

    fn lin(radius: f64) -> HypothesisClassSpec {
        HypothesisClassSpec::new(KernelSpec::Linear, radius).unwrap()
    }

    fn ds_from(sx: DMatrix<f64>, sy: DVector<f64>, tx: DMatrix<f64>) -> Dataset {
        let d = sx.ncols();
        Dataset::new(sx, sy, tx, DMatrix::zeros(0, d), DVector::zeros(0)).unwrap()
    }

    fn random_ds(rng: &mut Rng64, m: usize, n: usize, d: usize) -> Dataset {
        let sx = DMatrix::from_fn(m, d, |_, _| rng.gaussian());
        let tx = DMatrix::from_fn(n, d, |_, _| rng.gaussian() + 0.5);
        ds_from(sx, DVector::from_fn(m, |_, _| rng.gaussian()), tx)
    }

    #[test]
    fn disc_zero_for_identical_samples() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, -1.0, 2.0, 1.0]);
        let ds = ds_from(x.clone(), DVector::zeros(3), x);
        let v = disc_l2(&WeightVector::uniform(3), &ds, &lin(1.0)).unwrap();
        assert!(v.abs() < 1e-14);
    }

    #[test]
    fn disc_scalar_case() {
        let ds = ds_from(col(&[1.0]), DVector::zeros(1), col(&[0.0]));
        let v = disc_l2(&WeightVector::uniform(1), &ds, &lin(1.5)).unwrap();
        assert!((v - 4.0 * 1.5 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn disc_rejects_non_simplex_and_non_l2() {
        let ds = ds_from(col(&[1.0, 2.0]), DVector::zeros(2), col(&[0.0]));
        let q = WeightVector::unconstrained(DVector::from_vec(vec![0.5, 0.5]));
        assert!(disc_l2(&q, &ds, &lin(1.0)).is_err());
        let loss = LossSpec::new(1.0, 1.0).unwrap();
        assert!(disc_for_loss(&WeightVector::uniform(2), &ds, &lin(1.0), &loss).is_err());
    }

    #[test]
    fn disc_matches_pair_grid_in_2d() {
        let mut rng = Rng64::new(11);
        for _ in 0..3 {
            let ds = random_ds(&mut rng, 4, 4, 2);
            let q = WeightVector::normalized(DVector::from_fn(4, |_, _| rng.uniform() + 0.1)).unwrap();
            let lam = 1.0;
            let v = disc_l2(&q, &ds, &lin(lam)).unwrap();
            // brute force over pairs (w, w') on the Λ-ball: 100 radii x 100 angles
            let qv = q.values();
            let loss = |x: &DMatrix<f64>, wt: Option<&DVector<f64>>, a: [f64; 2], b: [f64; 2]| {
                let e: Vec<f64> = (0..x.nrows()).map(|i| (a[0] - b[0]) * x[(i, 0)] + (a[1] - b[1]) * x[(i, 1)]).collect();
                match wt {
                    Some(w) => e.iter().enumerate().map(|(i, e)| w[i] * e * e).sum::<f64>(),
                    None => e.iter().map(|e| e * e).sum::<f64>() / e.len() as f64,
                }
            };
            let pts: Vec<[f64; 2]> = (0..100)
                .flat_map(|ri| {
                    (0..100).map(move |ai| {
                        let r = lam * (ri + 1) as f64 / 100.0;
                        let t = std::f64::consts::TAU * ai as f64 / 100.0;
                        [r * t.cos(), r * t.sin()]
                    })
                })
                .collect();
            let mut best = 0.0f64;
            // w' = -w covers the extremes of w - w'; a coarser full pair scan adds the rest
            for w in &pts {
                let neg = [-w[0], -w[1]];
                best = best.max((loss(ds.source_x(), Some(qv), *w, neg) - loss(ds.target_x(), None, *w, neg)).abs());
            }
            for w in pts.iter().step_by(97) {
                for w2 in pts.iter().step_by(89) {
                    best = best.max((loss(ds.source_x(), Some(qv), *w, *w2) - loss(ds.target_x(), None, *w, *w2)).abs());
                }
            }
            assert!(best <= v * (1.0 + 1e-9));
            assert!((v - best).abs() <= 0.02 * v, "closed form {v}, grid {best}");
        }
    }

    #[test]
    fn disc_scales_with_radius_squared_and_is_symmetric() {
        let mut rng = Rng64::new(5);
        let ds = random_ds(&mut rng, 5, 5, 3);
        let u = WeightVector::uniform(5);
        let a = disc_l2(&u, &ds, &lin(1.0)).unwrap();
        let b = disc_l2(&u, &ds, &lin(2.0)).unwrap();
        assert!((b - 4.0 * a).abs() <= 1e-12 * b);
        let swapped = ds_from(ds.target_x().clone(), DVector::zeros(5), ds.source_x().clone());
        let c = disc_l2(&u, &swapped, &lin(1.0)).unwrap();
        assert!((a - c).abs() <= 1e-12 * a);
    }

    #[test]
    fn gaussian_features_reproduce_gram() {
        let mut rng = Rng64::new(2);
        let sx = DMatrix::from_fn(6, 2, |_, _| rng.gaussian());
        let tx = DMatrix::from_fn(5, 2, |_, _| rng.gaussian());
        let k = KernelSpec::gaussian(1.3).unwrap();
        let fs = feature_space(&k, &sx, &tx).unwrap();
        let g = crate::kernel::gram(&k, &sx, &tx).unwrap();
        let approx = &fs.source * fs.target.transpose();
        assert!((g - approx).abs().max() < 1e-8);
    }

    #[test]
    fn dm_attains_zero_for_matching_samples() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 2.0]);
        let tx = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let ds = ds_from(x, DVector::zeros(4), tx);
        let r = dm_minimize(&ds, &lin(1.0), 2000, 0).unwrap();
        assert!(r.disc <= 1e-8, "disc {}", r.disc);
    }

    fn grid_min(ds: &Dataset, hclass: &HypothesisClassSpec, steps: usize) -> f64 {
        let m = ds.m();
        let fs = feature_space(&hclass.kernel, ds.source_x(), ds.target_x()).unwrap();
        let mut best = f64::INFINITY;
        let h = 1.0 / steps as f64;
        match m {
            2 => {
                for i in 0..=steps {
                    let a = i as f64 * h;
                    best = best.min(disc_from_features(&DVector::from_vec(vec![a, 1.0 - a]), &fs, hclass.radius));
                }
            }
            3 => {
                for i in 0..=steps {
                    for j in 0..=steps - i {
                        let (a, b) = (i as f64 * h, j as f64 * h);
                        let q = DVector::from_vec(vec![a, b, (1.0 - a - b).max(0.0)]);
                        best = best.min(disc_from_features(&q, &fs, hclass.radius));
                    }
                }
            }
            _ => unreachable!(),
        }
        best
    }

    #[test]
    fn dm_matches_simplex_grid() {
        let mut rng = Rng64::new(21);
        for &(m, d) in &[(2usize, 1usize), (2, 2), (3, 2), (3, 1)] {
            let ds = random_ds(&mut rng, m, 5, d);
            let hc = lin(1.0);
            let steps = if m == 2 { 10_000 } else { 140 };
            let oracle = grid_min(&ds, &hc, steps);
            let r = dm_minimize(&ds, &hc, 2000, 1).unwrap();
            let uni = disc_l2(&WeightVector::uniform(m), &ds, &hc).unwrap();
            assert!(r.disc <= uni + 1e-10);
            assert!(r.disc <= oracle + 1e-3, "m={m} d={d}: dm {} grid {}", r.disc, oracle);
        }
    }

    #[test]
    fn dm_is_deterministic() {
        let mut rng = Rng64::new(3);
        let ds = random_ds(&mut rng, 12, 8, 3);
        let a = dm_minimize(&ds, &lin(1.0), 500, 9).unwrap();
        let b = dm_minimize(&ds, &lin(1.0), 500, 9).unwrap();
        assert_eq!(a.q, b.q);
        assert_eq!(a.disc.to_bits(), b.disc.to_bits());
    }

    #[test]
    fn augmented_dm_never_worse() {
        let (ds, _) = gen_synthetic(4, 30, 30, 5).unwrap();
        let hc = lin(1.0);
        let base = dm_minimize(&ds, &hc, 400, 0).unwrap();
        let aug = dm_minimize_augmented(&ds, &hc, &base.q, 400, 0).unwrap();
        assert_eq!(aug.q.len(), 35);
        assert!(aug.disc <= base.disc + 1e-10);
    }

    #[test]
    fn generalized_disc_examples() {
        let ds = ds_from(col(&[1.0]), DVector::zeros(1), col(&[1.0]));
        let mk = |w: f64| Hypothesis::new(KernelSpec::Linear, col(&[1.0]), DVector::from_vec(vec![w]), None).unwrap();
        let h0 = mk(0.0);
        let v = generalized_disc_lower_bound(&[h0.clone()], &[h0.clone()], &|_| 0.0, &ds).unwrap();
        assert_eq!(v, 0.0);
        let v = generalized_disc_lower_bound(&[h0.clone()], &[mk(1.0), mk(3f64.sqrt())], &|_| 2.0, &ds).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let coarse: Vec<Hypothesis> = (0..3).map(|i| mk(i as f64)).collect();
        let fine: Vec<Hypothesis> = (0..9).map(|i| mk(i as f64 / 4.0)).collect();
        let sur = [mk(0.3), mk(-0.7)];
        let rw = |h: &Hypothesis| h.coeffs[0].abs();
        let a = generalized_disc_lower_bound(&coarse, &sur, &rw, &ds).unwrap();
        let b = generalized_disc_lower_bound(&fine, &sur, &rw, &ds).unwrap();
        assert!(b >= a);
    }

    #[test]
    fn eta_examples() {
        // f_P = f_Q = 2x is inside H
        let sx = col(&[0.5, 1.0, -1.0]);
        let tx = col(&[0.1, 0.3]);
        let ds = ds_from(sx.clone(), &sx.column(0) * 2.0, tx.clone())
            .with_target_oracle(&tx.column(0) * 2.0)
            .unwrap();
        let e = eta_h(&ds, &lin(10.0)).unwrap();
        assert!(e.value < 1e-7 && e.exact);

        let ds = ds_from(col(&[1.0]), DVector::from_vec(vec![1.0]), col(&[1.0]))
            .with_target_oracle(DVector::from_vec(vec![-1.0]))
            .unwrap();
        let e = eta_h(&ds, &lin(100.0)).unwrap();
        assert!((e.value - 2.0).abs() < 1e-7);
    }

    #[test]
    fn eta_is_below_random_candidates_and_brackets_with_norm_bound() {
        let mut rng = Rng64::new(8);
        let sx = DMatrix::from_fn(8, 2, |_, _| rng.gaussian());
        let tx = DMatrix::from_fn(6, 2, |_, _| rng.gaussian());
        let w = DVector::from_vec(vec![3.0, -2.0]);
        let sy = &sx * &w + DVector::from_fn(8, |_, _| 0.1 * rng.gaussian());
        let fp = &tx * DVector::from_vec(vec![2.5, -1.0]);
        let ds = ds_from(sx, sy, tx).with_target_oracle(fp.clone()).unwrap();
        for &lam in &[10.0, 1.0] {
            let e = eta_h(&ds, &lin(lam)).unwrap();
            assert!(e.lower <= e.upper + 1e-9);
            assert!(e.w.norm() <= lam + 1e-7);
            for _ in 0..10 {
                let mut c = DVector::from_fn(2, |_, _| rng.gaussian());
                if c.norm() > lam {
                    c *= lam / c.norm();
                }
                let v = max_dev(ds.source_x(), ds.source_y(), &c) + max_dev(ds.target_x(), &fp, &c);
                assert!(e.lower <= v + 1e-9);
                if e.exact {
                    assert!(e.value <= v + 1e-9);
                }
            }
        }
    }

    #[test]
    fn d_inf_examples() {
        let ds = ds_from(col(&[1.0]), DVector::zeros(1), col(&[1.0, -1.0]))
            .with_target_oracle(DVector::from_vec(vec![1.0, -1.0]))
            .unwrap();
        let mk = |w: f64| Hypothesis::new(KernelSpec::Linear, col(&[1.0]), DVector::from_vec(vec![w]), None).unwrap();
        assert!(d_inf(&ds, &[mk(0.2), mk(1.0)]).unwrap() < 1e-15);
        let v = d_inf(&ds, &[mk(0.3), mk(0.7)]).unwrap();
        assert!((v - 0.3).abs() < 1e-12);
        let a = d_inf(&ds, &[mk(0.3)]).unwrap();
        let b = d_inf(&ds, &[mk(0.3), mk(0.9)]).unwrap();
        assert!(b <= a);
        assert!(d_inf(&ds.clone(), &[]).is_err());
    }

    #[test]
    fn lemma_examples() {
        let (l, r) = relaxed_triangle(2.0, 0.0, 0.5, 1.0);
        assert_eq!(l, 1.0);
        assert_eq!(r, 1.0);
        let (l, r) = relaxed_triangle(1.0, 0.0, 3.0, 1.0);
        assert!(l <= r);
        let rep = mu_admissibility_suite(1.0, 1.0, 5000, 1, Execution::Sequential).unwrap();
        assert_eq!(rep.total_violations(), 0);
    }

    #[test]
    fn suite_is_execution_independent() {
        let a = mu_admissibility_suite(1.5, 0.7, 9000, 4, Execution::Sequential).unwrap();
        let b = mu_admissibility_suite(1.5, 0.7, 9000, 4, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total_violations(), 0);
    }

    #[test]
    fn loss_spec_mu() {
        let l = LossSpec::new(3.0, 2.0).unwrap();
        assert_eq!(l.mu, 12.0);
        assert!(LossSpec::new(0.5, 1.0).is_err());
        assert!(HypothesisClassSpec::new(KernelSpec::Linear, 0.0).is_err());
    }
}
