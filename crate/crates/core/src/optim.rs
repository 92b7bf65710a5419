//! Dense convex solvers: quadratic programs, simplex projection, spectral
//! norms, PSD tests and symmetric pseudo-inverses.
//!
//! `solve_qp` minimizes ½xᵀPx + cᵀx subject to `Aeq x = beq`,
//! `Aineq x ≤ bineq` and optional box bounds. Small problems go to a
//! Goldfarb-Idnani dual active-set method. Since P is only required to be
//! PSD, that method is run on proximal subproblems P + ρI (exact on each
//! subproblem) until the KKT residual of the original problem is below
//! tolerance, then the final active set is polished on the unregularized
//! KKT system. Larger problems use an ADMM splitting with the same polish.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng::Rng64;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 10_000;
/// Relative eigenvalue cutoff for pseudo-inverses and projectors.
pub const PINV_CUTOFF: f64 = 1e-10;

// ---------------------------------------------------------------------------
// symmetric linear algebra

/// Eigendecomposition with eigenvalues sorted ascending.
pub fn sym_eig_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let k = m.nrows();
    if k == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrized(m));
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_fn(k, |i, _| eig.eigenvalues[idx[i]]);
    let vecs = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, idx[c])]);
    (vals, vecs)
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Apply `f` to the eigenvalues of a symmetric matrix: V f(Λ) Vᵀ.
pub fn sym_fn(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eig_sorted(m);
    let fv = DVector::from_fn(vals.len(), |i, _| f(vals[i]));
    &vecs * DMatrix::from_diagonal(&fv) * vecs.transpose()
}

fn cutoff_for(vals: &DVector<f64>, rel: f64) -> f64 {
    let top = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    rel * top
}

/// Pseudo-inverse of a symmetric PSD matrix, discarding eigenvalues below
/// `rel_cutoff` times the largest one.
pub fn pinv_sym(m: &DMatrix<f64>, rel_cutoff: f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eig_sorted(m);
    let cut = cutoff_for(&vals, rel_cutoff);
    let inv = DVector::from_fn(vals.len(), |i, _| if vals[i] > cut && vals[i] > 0.0 { 1.0 / vals[i] } else { 0.0 });
    &vecs * DMatrix::from_diagonal(&inv) * vecs.transpose()
}

/// Orthogonal projector onto the range of a symmetric PSD matrix.
pub fn range_projector(m: &DMatrix<f64>, rel_cutoff: f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eig_sorted(m);
    let cut = cutoff_for(&vals, rel_cutoff);
    let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > cut && vals[i] > 0.0).collect();
    let u = DMatrix::from_fn(m.nrows(), keep.len(), |r, c| vecs[(r, keep[c])]);
    &u * u.transpose()
}

/// Add 1e-10·trace/n to the diagonal before factorizing a Gram matrix.
pub fn jittered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return m.clone();
    }
    let eps = 1e-10 * (m.trace().abs() / n as f64);
    let mut out = m.clone();
    for i in 0..n {
        out[(i, i)] += eps;
    }
    out
}

/// Minimum eigenvalue (dense).
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eig_sorted(m).0[0]
}

/// True iff the minimum eigenvalue is ≥ −tol·max(1, trace/k).
pub fn psd_check(m: &DMatrix<f64>, tol: f64) -> bool {
    psd_margin(m, tol) >= 0.0
}

/// λ_min + tol·max(1, trace/k); nonnegative iff `psd_check` passes.
pub fn psd_margin(m: &DMatrix<f64>, tol: f64) -> f64 {
    let k = m.nrows();
    if k == 0 {
        return 0.0;
    }
    let scale = (m.trace() / k as f64).max(1.0);
    min_eigenvalue(m) + tol * scale
}

// ---------------------------------------------------------------------------
// simplex projection

/// Euclidean projection onto {q ≥ 0, Σq = 1} by the sort-and-threshold rule.
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let k = v.len();
    assert!(k >= 1, "project_simplex needs k ≥ 1");
    let mut u: Vec<f64> = v.iter().copied().collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (j, uj) in u.iter().enumerate() {
        css += uj;
        let t = (css - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    let mut q = v.map(|x| (x - theta).max(0.0));
    let s: f64 = q.iter().sum();
    if s > 0.0 {
        q /= s;
    }
    q
}

// ---------------------------------------------------------------------------
// spectral norm

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectralMethod {
    Power,
    Dense,
}

#[derive(Clone, Debug)]
pub struct SpectralNorm {
    /// max |eigenvalue|
    pub value: f64,
    /// the eigenvalue attaining it (carries the sign)
    pub eigenvalue: f64,
    pub vector: DVector<f64>,
    pub method: SpectralMethod,
}

const POWER_ITERS: usize = 300;

/// Spectral norm of a symmetric matrix. Power iteration first; when it
/// stalls (e.g. ±λ both dominant) fall back to a dense eigensolve.
pub fn spectral_norm(m: &DMatrix<f64>, tol: f64) -> SpectralNorm {
    let k = m.nrows();
    let mut rng = Rng64::new(0x5eed ^ k as u64);
    let v0 = DVector::from_fn(k, |_, _| rng.gaussian());
    spectral_norm_from(m, tol, &v0)
}

/// As [`spectral_norm`] with a caller-supplied start vector (warm start).
pub fn spectral_norm_from(m: &DMatrix<f64>, tol: f64, start: &DVector<f64>) -> SpectralNorm {
    let k = m.nrows();
    if k == 0 {
        return SpectralNorm { value: 0.0, eigenvalue: 0.0, vector: DVector::zeros(0), method: SpectralMethod::Dense };
    }
    if k <= 2 {
        return dense_spectral(m);
    }
    let mut v = start.clone();
    let nv = v.norm();
    if nv > 0.0 {
        v /= nv;
        for _ in 0..POWER_ITERS {
            let w = m * &v;
            let theta = v.dot(&w);
            let resid = (&w - &v * theta).norm();
            if resid <= tol * theta.abs().max(1e-300) || (w.norm() == 0.0) {
                if w.norm() == 0.0 {
                    break;
                }
                let mv = m * &v;
                let theta = v.dot(&mv);
                // power iteration converges to the dominant-magnitude pair
                return SpectralNorm { value: theta.abs(), eigenvalue: theta, vector: v, method: SpectralMethod::Power };
            }
            let nw = w.norm();
            v = w / nw;
        }
    }
    dense_spectral(m)
}

fn dense_spectral(m: &DMatrix<f64>) -> SpectralNorm {
    let (vals, vecs) = sym_eig_sorted(m);
    let k = vals.len();
    let (lo, hi) = (vals[0], vals[k - 1]);
    // ties broken towards the positive end
    let idx = if hi.abs() >= lo.abs() { k - 1 } else { 0 };
    SpectralNorm {
        value: vals[idx].abs(),
        eigenvalue: vals[idx],
        vector: vecs.column(idx).into_owned(),
        method: SpectralMethod::Dense,
    }
}

// ---------------------------------------------------------------------------
// quadratic programming

/// minimize ½xᵀPx + cᵀx s.t. a_eq x = b_eq, a_ineq x ≤ b_ineq, lower ≤ x ≤ upper.
#[derive(Clone, Debug)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
}

impl QpProblem {
    pub fn new(p: DMatrix<f64>, c: DVector<f64>) -> Self {
        let v = c.len();
        Self {
            p,
            c,
            a_eq: DMatrix::zeros(0, v),
            b_eq: DVector::zeros(0),
            a_ineq: DMatrix::zeros(0, v),
            b_ineq: DVector::zeros(0),
            lower: None,
            upper: None,
        }
    }

    pub fn with_eq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_ineq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_ineq = a;
        self.b_ineq = b;
        self
    }

    pub fn with_bounds(mut self, lower: Option<DVector<f64>>, upper: Option<DVector<f64>>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn nvars(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.c.dot(x)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.nvars();
        let dims_ok = self.p.nrows() == v
            && self.p.ncols() == v
            && self.a_eq.ncols() == v
            && self.a_eq.nrows() == self.b_eq.len()
            && self.a_ineq.ncols() == v
            && self.a_ineq.nrows() == self.b_ineq.len()
            && self.lower.as_ref().is_none_or(|l| l.len() == v)
            && self.upper.as_ref().is_none_or(|u| u.len() == v);
        if !dims_ok {
            return Err(Error::DimensionMismatch("inconsistent QP dimensions".into()));
        }
        let scale = self.p.amax().max(1.0);
        if (&self.p - self.p.transpose()).amax() > 1e-10 * scale {
            return Err(Error::InvalidInput("QP matrix P is not symmetric".into()));
        }
        let finite = self.p.iter().chain(self.c.iter()).chain(self.a_eq.iter()).chain(self.b_eq.iter())
            .chain(self.a_ineq.iter())
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite QP data".into()));
        }
        Ok(())
    }

    /// All inequalities, bounds included, as rows of G x ≤ h.
    fn stacked_ineq(&self) -> (DMatrix<f64>, DVector<f64>) {
        let v = self.nvars();
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        for i in 0..self.a_ineq.nrows() {
            rows.push((self.a_ineq.row(i).transpose(), self.b_ineq[i]));
        }
        if let Some(l) = &self.lower {
            for j in 0..v {
                if l[j].is_finite() {
                    let mut e = DVector::zeros(v);
                    e[j] = -1.0;
                    rows.push((e, -l[j]));
                }
            }
        }
        if let Some(u) = &self.upper {
            for j in 0..v {
                if u[j].is_finite() {
                    let mut e = DVector::zeros(v);
                    e[j] = 1.0;
                    rows.push((e, u[j]));
                }
            }
        }
        let g = DMatrix::from_fn(rows.len(), v, |i, j| rows[i].0[j]);
        let h = DVector::from_fn(rows.len(), |i, _| rows[i].1);
        (g, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpMethod {
    /// Active set up to `ACTIVE_SET_MAX_VARS` variables, ADMM beyond.
    Auto,
    ActiveSet,
    Admm,
}

pub const ACTIVE_SET_MAX_VARS: usize = 400;
/// Iteration budget multiplier when ADMM is retried after the active set.
const ADMM_FALLBACK_FACTOR: usize = 10;

#[derive(Clone, Copy, Debug)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub method: QpMethod,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER, method: QpMethod::Auto }
    }
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// multipliers of the equality rows
    pub eq_multipliers: DVector<f64>,
    /// multipliers (≥ 0) of `a_ineq` rows
    pub ineq_multipliers: DVector<f64>,
}

impl SolveReport {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

pub fn solve_qp(p: &QpProblem, tol: f64, max_iter: usize) -> Result<SolveReport> {
    solve_qp_with(p, &QpOptions { tol, max_iter, method: QpMethod::Auto })
}

pub fn solve_qp_with(p: &QpProblem, opts: &QpOptions) -> Result<SolveReport> {
    p.validate()?;
    let std = StdForm::from_problem(p);
    let method = match opts.method {
        QpMethod::Auto if p.nvars() <= ACTIVE_SET_MAX_VARS => QpMethod::ActiveSet,
        QpMethod::Auto => QpMethod::Admm,
        m => m,
    };
    let raw = match method {
        QpMethod::ActiveSet => proximal_active_set(&std, opts),
        _ => admm(&std, opts),
    };
    let rep = std.report(p, raw, opts.tol);
    if opts.method == QpMethod::Auto && method == QpMethod::ActiveSet && !rep.is_optimal() {
        // singular P can stall the active set; operator splitting still converges
        log::debug!("active set ended with {:?} (kkt {:e}); retrying with ADMM", rep.status, rep.kkt_residual);
        let long = QpOptions { max_iter: opts.max_iter.saturating_mul(ADMM_FALLBACK_FACTOR), ..*opts };
        let fallback = std.report(p, admm(&std, &long), opts.tol);
        if fallback.is_optimal() || fallback.kkt_residual < rep.kkt_residual {
            return Ok(fallback);
        }
    }
    Ok(rep)
}

/// Equalities E x = f and inequalities G x ≤ h (bounds folded in).
struct StdForm {
    p: DMatrix<f64>,
    c: DVector<f64>,
    e: DMatrix<f64>,
    f: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    n_user_ineq: usize,
}

struct RawSolution {
    x: DVector<f64>,
    y: DVector<f64>,
    mu: DVector<f64>,
    status: QpStatus,
    iterations: usize,
}

#[derive(Clone, Copy, Debug)]
struct Residuals {
    primal: f64,
    dual: f64,
    compl: f64,
}

impl Residuals {
    fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.compl)
    }
}

impl StdForm {
    fn from_problem(p: &QpProblem) -> Self {
        let (g, h) = p.stacked_ineq();
        Self {
            p: symmetrized(&p.p),
            c: p.c.clone(),
            e: p.a_eq.clone(),
            f: p.b_eq.clone(),
            g,
            h,
            n_user_ineq: p.a_ineq.nrows(),
        }
    }

    fn v(&self) -> usize {
        self.c.len()
    }

    /// Scaled KKT residuals: primal feasibility relative to 1 + max|rhs|,
    /// stationarity relative to 1 + max|c|, complementarity relative to
    /// 1 + max|rhs|.
    fn residuals(&self, x: &DVector<f64>, y: &DVector<f64>, mu: &DVector<f64>) -> Residuals {
        let rhs_scale = 1.0 + self.f.amax().max(self.h.amax());
        let c_scale = 1.0 + self.c.amax();
        let mut primal = 0.0f64;
        if self.e.nrows() > 0 {
            primal = (&self.e * x - &self.f).amax();
        }
        let slack = if self.g.nrows() > 0 { &self.h - &self.g * x } else { DVector::zeros(0) };
        for s in slack.iter() {
            primal = primal.max(-s);
        }
        let mut grad = &self.p * x + &self.c;
        if self.e.nrows() > 0 {
            grad += self.e.transpose() * y;
        }
        if self.g.nrows() > 0 {
            grad += self.g.transpose() * mu;
        }
        let mut dual = grad.amax();
        let mut compl = 0.0f64;
        for i in 0..mu.len() {
            dual = dual.max(-mu[i] * c_scale);
            compl = compl.max((mu[i] * slack[i]).abs());
        }
        Residuals { primal: primal / rhs_scale, dual: dual / c_scale, compl: compl / rhs_scale }
    }

    fn report(&self, orig: &QpProblem, raw: RawSolution, tol: f64) -> SolveReport {
        let res = self.residuals(&raw.x, &raw.y, &raw.mu);
        let kkt = res.max();
        let status = match raw.status {
            QpStatus::Optimal if kkt <= tol => QpStatus::Optimal,
            QpStatus::Optimal => QpStatus::MaxIter,
            s => s,
        };
        SolveReport {
            objective: orig.objective(&raw.x),
            x: raw.x,
            status,
            kkt_residual: kkt,
            iterations: raw.iterations,
            eq_multipliers: raw.y,
            ineq_multipliers: raw.mu.rows(0, self.n_user_ineq).into_owned(),
        }
    }

    /// Solve the equality-constrained KKT system on a guessed active set with
    /// a lightly regularized factorization plus iterative refinement, so that
    /// singular P is handled. Returns `None` if the guess is not optimal.
    fn polish(&self, active: &[usize], tol: f64) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let v = self.v();
        let ne = self.e.nrows();
        let na = active.len();
        let dim = v + ne + na;
        let mut c_rows = DMatrix::zeros(ne + na, v);
        let mut rhs_c = DVector::zeros(ne + na);
        for i in 0..ne {
            c_rows.row_mut(i).copy_from(&self.e.row(i));
            rhs_c[i] = self.f[i];
        }
        for (k, &j) in active.iter().enumerate() {
            c_rows.row_mut(ne + k).copy_from(&self.g.row(j));
            rhs_c[ne + k] = self.h[j];
        }
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (v, v)).copy_from(&self.p);
        kkt.view_mut((0, v), (v, ne + na)).copy_from(&c_rows.transpose());
        kkt.view_mut((v, 0), (ne + na, v)).copy_from(&c_rows);
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, v).copy_from(&(-&self.c));
        rhs.rows_mut(v, ne + na).copy_from(&rhs_c);
        let delta = 1e-10 * (1.0 + self.p.amax());
        let mut reg = kkt.clone();
        for i in 0..v {
            reg[(i, i)] += delta;
        }
        for i in v..dim {
            reg[(i, i)] -= delta;
        }
        let lu = reg.lu();
        let mut sol = DVector::zeros(dim);
        for _ in 0..30 {
            let r = &rhs - &kkt * &sol;
            if r.amax() <= 1e-15 * (1.0 + rhs.amax()) {
                break;
            }
            let step = lu.solve(&r)?;
            sol += step;
        }
        if sol.iter().any(|s| !s.is_finite()) {
            return None;
        }
        let x = sol.rows(0, v).into_owned();
        let y = sol.rows(v, ne).into_owned();
        let mut mu = DVector::zeros(self.g.nrows());
        for (k, &j) in active.iter().enumerate() {
            mu[j] = sol[v + ne + k];
        }
        let res = self.residuals(&x, &y, &mu);
        (res.max() <= tol).then_some((x, y, mu))
    }
}

/// One Goldfarb-Idnani solve of min ½xᵀHx + gᵀx (H positive definite).
/// Constraints are used in the form n·x ≥ b: equalities first, then
/// the inequality rows of G x ≤ h as (−G)x ≥ −h.
struct GiOutcome {
    x: DVector<f64>,
    y: DVector<f64>,
    mu: DVector<f64>,
    active: Vec<usize>,
    iterations: usize,
    status: QpStatus,
}

fn goldfarb_idnani(sf: &StdForm, hinv: &DMatrix<f64>, g: &DVector<f64>, max_iter: usize, feas_tol: f64) -> GiOutcome {
    let ne = sf.e.nrows();
    let ni = sf.g.nrows();
    // constraint j < ne: equality row j; j ≥ ne: inequality row j − ne
    let normal = |j: usize| -> DVector<f64> {
        if j < ne {
            sf.e.row(j).transpose()
        } else {
            -sf.g.row(j - ne).transpose()
        }
    };
    let rhs = |j: usize| -> f64 { if j < ne { sf.f[j] } else { -sf.h[j - ne] } };

    let mut x = -(hinv * g);
    let mut active: Vec<usize> = Vec::new();
    // signs applied to equality normals (an equality may be entered from either side)
    let mut sign: Vec<f64> = vec![1.0; ne];
    let mut u: Vec<f64> = Vec::new();
    let mut hinv_n: Vec<DVector<f64>> = Vec::new();
    let mut normals: Vec<DVector<f64>> = Vec::new();
    let mut iterations = 0usize;
    let mut eq_next = 0usize;
    let mut in_active = vec![false; ne + ni];

    let fail = |x: DVector<f64>, status: QpStatus, iterations: usize| GiOutcome {
        x,
        y: DVector::zeros(ne),
        mu: DVector::zeros(ni),
        active: Vec::new(),
        iterations,
        status,
    };

    loop {
        // choose the constraint to add
        let p = if eq_next < ne {
            let j = eq_next;
            eq_next += 1;
            let s = normal(j).dot(&x) - rhs(j);
            sign[j] = if s > 0.0 { -1.0 } else { 1.0 };
            j
        } else {
            let mut best: Option<(usize, f64)> = None;
            for j in ne..ne + ni {
                if in_active[j] {
                    continue;
                }
                let b = rhs(j);
                let s = normal(j).dot(&x) - b;
                let thr = feas_tol * (1.0 + b.abs());
                if s < -thr && best.is_none_or(|(_, bs)| s < bs) {
                    best = Some((j, s));
                }
            }
            match best {
                None => break,
                Some((j, _)) => j,
            }
        };
        let sgn = if p < ne { sign[p] } else { 1.0 };
        let np = normal(p) * sgn;
        let bp = rhs(p) * sgn;
        let d = hinv * &np;
        let dnorm = np.dot(&d).max(1e-300);
        let mut u_p = 0.0f64;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return fail(x, QpStatus::MaxIter, iterations);
            }
            let q = active.len();
            // r = (Nᵀ H⁻¹ N)⁻¹ Nᵀ H⁻¹ n_p, z = H⁻¹ n_p − H⁻¹ N r
            let (r, z) = if q == 0 {
                (DVector::zeros(0), d.clone())
            } else {
                let mut mm = DMatrix::zeros(q, q);
                for a in 0..q {
                    for b in 0..q {
                        mm[(a, b)] = normals[a].dot(&hinv_n[b]);
                    }
                }
                let rhs_r = DVector::from_fn(q, |a, _| hinv_n[a].dot(&np));
                let r = match mm.clone().cholesky() {
                    Some(ch) => ch.solve(&rhs_r),
                    None => match mm.lu().solve(&rhs_r) {
                        Some(r) => r,
                        None => return fail(x, QpStatus::MaxIter, iterations),
                    },
                };
                let mut z = d.clone();
                for a in 0..q {
                    z.axpy(-r[a], &hinv_n[a], 1.0);
                }
                (r, z)
            };
            // partial (dual) step length
            let mut t1 = f64::INFINITY;
            let mut drop_k: Option<usize> = None;
            for a in 0..q {
                if active[a] >= ne && r[a] > 1e-12 {
                    let t = u[a] / r[a];
                    if t < t1 {
                        t1 = t;
                        drop_k = Some(a);
                    }
                }
            }
            let zn = z.dot(&np);
            let s_p = np.dot(&x) - bp;
            let dependent = zn <= 1e-12 * dnorm;
            if dependent && p < ne && s_p.abs() <= feas_tol * (1.0 + bp.abs()) {
                // redundant, consistent equality
                break;
            }
            let t2 = if dependent { f64::INFINITY } else { -s_p / zn };
            if t1.is_infinite() && t2.is_infinite() {
                return fail(x, QpStatus::Infeasible, iterations);
            }
            let t = t1.min(t2);
            if t2.is_finite() {
                x.axpy(t, &z, 1.0);
            }
            for a in 0..q {
                u[a] -= t * r[a];
            }
            u_p += t;
            if t2 <= t1 {
                active.push(p);
                in_active[p] = true;
                u.push(u_p);
                hinv_n.push(d.clone());
                normals.push(np.clone());
                break;
            }
            let k = drop_k.expect("partial step without a blocking constraint");
            in_active[active[k]] = false;
            active.remove(k);
            u.remove(k);
            hinv_n.remove(k);
            normals.remove(k);
        }
    }
    let mut y = DVector::zeros(ne);
    let mut mu = DVector::zeros(ni);
    let mut act_ineq = Vec::new();
    for (a, &j) in active.iter().enumerate() {
        if j < ne {
            // n·x ≥ b with multiplier u ≥ 0 ⇒ E-row multiplier −sign·u
            y[j] = -sign[j] * u[a];
        } else {
            mu[j - ne] = u[a].max(0.0);
            act_ineq.push(j - ne);
        }
    }
    act_ineq.sort_unstable();
    GiOutcome { x, y, mu, active: act_ineq, iterations, status: QpStatus::Optimal }
}

fn proximal_active_set(sf: &StdForm, opts: &QpOptions) -> RawSolution {
    let v = sf.v();
    let tol = opts.tol;
    let feas_tol = 0.01 * tol;
    let pscale = sf.p.amax().max(1.0);
    let direct = sf.p.clone().cholesky().filter(|_| min_eigenvalue(&sf.p) > 1e-8 * pscale);
    if let Some(ch) = direct {
        let hinv = ch.inverse();
        let out = goldfarb_idnani(sf, &hinv, &sf.c, opts.max_iter, feas_tol);
        if out.status != QpStatus::Optimal {
            return RawSolution { x: out.x, y: out.y, mu: out.mu, status: out.status, iterations: out.iterations };
        }
        let res = sf.residuals(&out.x, &out.y, &out.mu);
        if res.max() > tol {
            if let Some((x, y, mu)) = sf.polish(&out.active, tol) {
                return RawSolution { x, y, mu, status: QpStatus::Optimal, iterations: out.iterations };
            }
        }
        return RawSolution { x: out.x, y: out.y, mu: out.mu, status: QpStatus::Optimal, iterations: out.iterations };
    }
    // proximal point iterations on P + ρI
    let rho = 1e-5 * pscale;
    let mut h = sf.p.clone();
    for i in 0..v {
        h[(i, i)] += rho;
    }
    let hinv = match h.cholesky() {
        Some(ch) => ch.inverse(),
        None => {
            return RawSolution {
                x: DVector::zeros(v),
                y: DVector::zeros(sf.e.nrows()),
                mu: DVector::zeros(sf.g.nrows()),
                status: QpStatus::MaxIter,
                iterations: 0,
            }
        }
    };
    let mut xk = DVector::zeros(v);
    let mut total = 0usize;
    let mut last_polished: Option<Vec<usize>> = None;
    let mut best: Option<(f64, RawSolution)> = None;
    for _outer in 0..opts.max_iter {
        let g = &sf.c - &xk * rho;
        let out = goldfarb_idnani(sf, &hinv, &g, opts.max_iter.saturating_sub(total).max(1), feas_tol);
        total += out.iterations;
        if out.status == QpStatus::Infeasible {
            return RawSolution { x: out.x, y: out.y, mu: out.mu, status: QpStatus::Infeasible, iterations: total };
        }
        if out.status == QpStatus::MaxIter {
            break;
        }
        let res = sf.residuals(&out.x, &out.y, &out.mu);
        let step = (&out.x - &xk).amax();
        if last_polished.as_ref() != Some(&out.active) {
            if let Some((x, y, mu)) = sf.polish(&out.active, tol) {
                return RawSolution { x, y, mu, status: QpStatus::Optimal, iterations: total };
            }
            last_polished = Some(out.active.clone());
        }
        let score = res.max();
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((
                score,
                RawSolution {
                    x: out.x.clone(),
                    y: out.y.clone(),
                    mu: out.mu.clone(),
                    status: QpStatus::Optimal,
                    iterations: total,
                },
            ));
        }
        if score <= 1e-3 * tol || step <= 1e-15 * (1.0 + xk.amax()) {
            break;
        }
        xk = out.x;
        if total >= opts.max_iter {
            break;
        }
    }
    match best {
        Some((_, mut sol)) => {
            sol.iterations = total;
            sol
        }
        None => RawSolution {
            x: xk,
            y: DVector::zeros(sf.e.nrows()),
            mu: DVector::zeros(sf.g.nrows()),
            status: QpStatus::MaxIter,
            iterations: total,
        },
    }
}

/// ADMM splitting for l ≤ A x ≤ u with A = [E; G].
fn admm(sf: &StdForm, opts: &QpOptions) -> RawSolution {
    let v = sf.v();
    let ne = sf.e.nrows();
    let ni = sf.g.nrows();
    let mrows = ne + ni;
    let mut a = DMatrix::zeros(mrows, v);
    if ne > 0 {
        a.rows_mut(0, ne).copy_from(&sf.e);
    }
    if ni > 0 {
        a.rows_mut(ne, ni).copy_from(&sf.g);
    }
    let lo = DVector::from_fn(mrows, |i, _| if i < ne { sf.f[i] } else { f64::NEG_INFINITY });
    let hi = DVector::from_fn(mrows, |i, _| if i < ne { sf.f[i] } else { sf.h[i - ne] });
    let sigma = 1e-6;
    let alpha = 1.6;
    let mut rho = 0.1;
    let rho_vec = |rho: f64| DVector::from_fn(mrows, |i, _| if i < ne { 1e3 * rho } else { rho });
    let factor = |rv: &DVector<f64>| {
        let mut k = sf.p.clone() + a.transpose() * DMatrix::from_diagonal(rv) * &a;
        for i in 0..v {
            k[(i, i)] += sigma;
        }
        k.cholesky()
    };
    let mut rv = rho_vec(rho);
    let mut chol = match factor(&rv) {
        Some(c) => c,
        None => {
            return RawSolution {
                x: DVector::zeros(v),
                y: DVector::zeros(ne),
                mu: DVector::zeros(ni),
                status: QpStatus::MaxIter,
                iterations: 0,
            }
        }
    };
    let mut x = DVector::zeros(v);
    let mut z = DVector::zeros(mrows);
    let mut y = DVector::zeros(mrows);
    let split = |y: &DVector<f64>| (y.rows(0, ne).into_owned(), y.rows(ne, ni).map(|m| m.max(0.0)));
    let mut iterations = 0;
    let mut status = QpStatus::MaxIter;
    for it in 1..=opts.max_iter {
        iterations = it;
        let rhs = &x * sigma - &sf.c + a.transpose() * (rv.component_mul(&z) - &y);
        let xt = chol.solve(&rhs);
        let zt = &a * &xt;
        let x_new = &xt * alpha + &x * (1.0 - alpha);
        let zr = &zt * alpha + &z * (1.0 - alpha);
        let mut z_new = &zr + y.component_div(&rv);
        for i in 0..mrows {
            z_new[i] = z_new[i].clamp(lo[i], hi[i]);
        }
        let y_prev = y.clone();
        y += rv.component_mul(&(&zr - &z_new));
        x = x_new;
        z = z_new;
        if it % 10 == 0 {
            let (ye, mu) = split(&y);
            let res = sf.residuals(&x, &ye, &mu);
            if res.primal <= opts.tol && res.dual <= opts.tol {
                status = QpStatus::Optimal;
                break;
            }
            // primal infeasibility certificate
            let dy = &y - &y_prev;
            let dn = dy.amax();
            if dn > 1e-12 {
                let aty = (a.transpose() * &dy).amax();
                let mut supp = 0.0;
                for i in 0..mrows {
                    if dy[i] > 0.0 {
                        supp += hi[i] * dy[i];
                    } else if dy[i] < 0.0 && lo[i].is_finite() {
                        supp += lo[i] * dy[i];
                    } else if dy[i] < 0.0 {
                        supp = f64::INFINITY;
                    }
                }
                if aty <= 1e-9 * dn && supp < -1e-9 * dn {
                    status = QpStatus::Infeasible;
                    break;
                }
            }
            if it % 50 == 0 {
                let ax = (&a * &x).amax().max(z.amax()).max(1e-12);
                let dual_scale = (&sf.p * &x).amax().max((a.transpose() * &y).amax()).max(sf.c.amax()).max(1e-12);
                let ratio = ((res.primal / ax) / (res.dual / dual_scale).max(1e-300)).sqrt();
                let new_rho = (rho * ratio).clamp(1e-6, 1e6);
                if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                    rho = new_rho;
                    rv = rho_vec(rho);
                    if let Some(c) = factor(&rv) {
                        chol = c;
                    }
                }
            }
        }
    }
    let (ye, mu) = split(&y);
    if status != QpStatus::Infeasible {
        // polish on the active set implied by the multipliers
        let active: Vec<usize> = (0..ni).filter(|&j| mu[j] > 1e-7).collect();
        if let Some((xp, yp, mp)) = sf.polish(&active, opts.tol) {
            return RawSolution { x: xp, y: yp, mu: mp, status: QpStatus::Optimal, iterations };
        }
    }
    RawSolution { x, y: ye, mu, status, iterations }
}
