//! Exact treatment of the q-ball surrogate set H″ = {a : ‖Ks a − y‖² ≤ r²}:
//! the trust-region inner maximization through its one-dimensional dual,
//! the convex inner minimization, a descent solver for the full max-min
//! objective in b, and the equivalent SDP (construction, candidate checks
//! and SDPA export; no SDP solver is included).
//!
//! Both inner problems are solved in the coordinates c = diag(s)U_rᵀa where
//! Ks = U diag(s) Uᵀ restricted to its range. There the constraint is a
//! Euclidean ball ‖c − ỹ‖² ≤ ρ² with ỹ = U_rᵀy and ρ² = r² − ‖y_⊥‖².

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::GramBundle;
use crate::optim::{pinv_sym, psd_margin, sym_eig_sorted, PINV_CUTOFF};

/// max over ‖Ks a − y‖² ≤ r² of ½‖Kst a‖² − bᵀKt Kst a.
#[derive(Clone, Debug)]
pub struct TrustRegionProblem {
    pub ks: DMatrix<f64>,
    pub kst: DMatrix<f64>,
    pub kt: DMatrix<f64>,
    pub b: DVector<f64>,
    pub y_norm: DVector<f64>,
    pub r: f64,
}

impl TrustRegionProblem {
    pub fn from_bundle(bundle: &GramBundle, b: DVector<f64>, r: f64) -> Self {
        Self { ks: bundle.ks.clone(), kst: bundle.kst.clone(), kt: bundle.kt.clone(), b, y_norm: bundle.y_norm.clone(), r }
    }

    pub fn primal(&self, a: &DVector<f64>) -> f64 {
        let ka = &self.kst * a;
        0.5 * ka.norm_squared() - (&self.kt * &self.b).dot(&ka)
    }

    pub fn constraint(&self, a: &DVector<f64>) -> f64 {
        (&self.ks * a - &self.y_norm).norm_squared() - self.r * self.r
    }

    /// The matrix of the dual constraint at (η, γ):
    /// [[ηKs² − ½KstᵀKst, ½KstᵀKt b − ηKs y], [·, η(‖y‖² − r²) + γ]].
    pub fn dual_block(&self, eta: f64, gamma: f64) -> DMatrix<f64> {
        let m = self.ks.nrows();
        let ks2 = &self.ks * &self.ks;
        let ctc = self.kst.transpose() * &self.kst;
        let off = self.kst.transpose() * (&self.kt * &self.b) * 0.5 - &self.ks * &self.y_norm * eta;
        let mut out = DMatrix::zeros(m + 1, m + 1);
        out.view_mut((0, 0), (m, m)).copy_from(&(ks2 * eta - ctc * 0.5));
        for i in 0..m {
            out[(i, m)] = off[i];
            out[(m, i)] = off[i];
        }
        out[(m, m)] = eta * (self.y_norm.norm_squared() - self.r * self.r) + gamma;
        out
    }
}

/// The q-ball in reduced coordinates, shared by the inner max and min.
#[derive(Clone, Debug)]
pub struct BallGeometry {
    u: DMatrix<f64>,
    s: DVector<f64>,
    yt: DVector<f64>,
    rho2: f64,
    /// Kst U_r diag(1/s)
    f: DMatrix<f64>,
    kappa: DVector<f64>,
    v: DMatrix<f64>,
}

impl BallGeometry {
    pub fn new(ks: &DMatrix<f64>, kst: &DMatrix<f64>, y: &DVector<f64>, r: f64) -> Result<Self> {
        let m = ks.nrows();
        if ks.ncols() != m || kst.ncols() != m || y.len() != m {
            return Err(Error::DimensionMismatch(format!("Ks {}x{}, Kst {}x{}, y {}", m, ks.ncols(), kst.nrows(), kst.ncols(), y.len())));
        }
        if !(r >= 0.0) || !r.is_finite() {
            return Err(Error::InvalidInput(format!("ball radius must be ≥ 0, got {r}")));
        }
        let (vals, vecs) = sym_eig_sorted(ks);
        let top = vals.iter().fold(0.0f64, |a, v| a.max(*v));
        let keep: Vec<usize> = (0..m).filter(|&i| vals[i] > PINV_CUTOFF * top && vals[i] > 0.0).collect();
        let drop: Vec<usize> = (0..m).filter(|i| !keep.contains(i)).collect();
        let u = DMatrix::from_fn(m, keep.len(), |i, j| vecs[(i, keep[j])]);
        let s = DVector::from_fn(keep.len(), |i, _| vals[keep[i]]);
        let kst_norm = kst.norm();
        for &j in &drop {
            let leak = (kst * vecs.column(j)).norm();
            if leak > 1e-4 * kst_norm.max(1e-300) {
                return Err(Error::DegenerateDirection(format!("Kst is not zero on the null space of Ks (leak {leak:e})")));
            }
        }
        let yt = u.transpose() * y;
        let y_perp2 = (y.norm_squared() - yt.norm_squared()).max(0.0);
        let rho2 = r * r - y_perp2;
        if rho2 < -1e-12 * (1.0 + r * r) {
            return Err(Error::Infeasible(format!("ball is empty: r² = {:e} < ‖y_⊥‖² = {y_perp2:e}", r * r)));
        }
        let rho2 = rho2.max(0.0);
        let f = DMatrix::from_fn(kst.nrows(), keep.len(), |i, j| (kst * u.column(j))[i] / s[j]);
        let cp = f.transpose() * &f;
        let (kappa, v) = sym_eig_sorted(&cp);
        Ok(Self { u, s, yt, rho2, f, kappa, v })
    }

    pub fn from_problem(tr: &TrustRegionProblem) -> Result<Self> {
        Self::new(&tr.ks, &tr.kst, &tr.y_norm, tr.r)
    }

    fn to_a(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.u * c.component_div(&self.s)
    }

    fn dim(&self) -> usize {
        self.s.len()
    }

    /// φ(η) = ¼ vᵀ(ηI − ½C′)⁻¹v − η(‖ỹ‖² − ρ²), v = 2ηỹ − g.
    fn phi(&self, g: &DVector<f64>, eta: f64) -> f64 {
        let w = self.v.transpose() * (&self.yt * (2.0 * eta) - g);
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let den = eta - 0.5 * self.kappa[i];
            if w[i] != 0.0 {
                acc += w[i] * w[i] / den;
            }
        }
        0.25 * acc - eta * (self.yt.norm_squared() - self.rho2)
    }

    fn c_of(&self, g: &DVector<f64>, eta: f64) -> DVector<f64> {
        let w = self.v.transpose() * (&self.yt * (2.0 * eta) - g);
        let z = DVector::from_fn(self.dim(), |i, _| {
            let den = eta - 0.5 * self.kappa[i];
            if den > 0.0 {
                0.5 * w[i] / den
            } else {
                0.0
            }
        });
        &self.v * z
    }

    /// φ′(η) = ρ² − ‖c(η) − ỹ‖².
    fn dphi(&self, g: &DVector<f64>, eta: f64) -> f64 {
        self.rho2 - (self.c_of(g, eta) - &self.yt).norm_squared()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InnerMax {
    /// optimal value of the one-dimensional dual
    pub value: f64,
    /// objective at the reconstructed maximizer
    pub primal: f64,
    pub eta: f64,
    pub a: Vec<f64>,
    /// maximizer obtained with the boundary-eigenvector correction
    pub hard_case: bool,
    /// golden-section result was replaced after a dense scan
    pub scan_fallback: bool,
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

fn golden_section(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64, rel: f64) -> (f64, f64, f64) {
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut x2 = lo + GOLDEN * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..400 {
        if hi - lo <= rel * hi.abs().max(1e-300) {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN * (hi - lo);
            f2 = f(x2);
        }
    }
    (lo, hi, if f1 <= f2 { x1 } else { x2 })
}

/// Solve the inner maximization through its dual in η ≥ η_min = κ_max/2:
/// golden-section search on [η_min + 1e-12, 10⁶η_min + 1] (extended until
/// φ′ > 0 at the right end), checked against a dense scan, then polished by
/// bisection on φ′. The maximizer is c = ½(ηI − ½C′)⁻¹(2ηỹ − g); when φ′ > 0
/// already at η_min the top eigenvector is added to reach the boundary.
pub fn inner_max_exact(tr: &TrustRegionProblem, tol: f64) -> Result<InnerMax> {
    let geo = BallGeometry::from_problem(tr)?;
    inner_max_geometry(&geo, tr, &(&tr.kt * &tr.b), tol)
}

fn inner_max_geometry(geo: &BallGeometry, tr: &TrustRegionProblem, t: &DVector<f64>, tol: f64) -> Result<InnerMax> {
    let g = geo.f.transpose() * t;
    let dim = geo.dim();
    if dim == 0 || geo.rho2 == 0.0 {
        let c = geo.yt.clone();
        let a = geo.to_a(&c);
        let p = tr.primal(&a);
        return Ok(InnerMax { value: p, primal: p, eta: 0.0, a: a.iter().copied().collect(), hard_case: false, scan_fallback: false });
    }
    let kmax = geo.kappa[dim - 1].max(0.0);
    let eta_min = 0.5 * kmax;
    let lo = eta_min + 1e-12 * (1.0 + eta_min);
    let mut hi = 1e6 * eta_min + 1.0;
    while geo.dphi(&g, hi) < 0.0 {
        hi *= 10.0;
        if hi > 1e300 {
            return Err(Error::MaxIter("trust-region dual bracket did not close".into()));
        }
    }
    let phi = |e: f64| geo.phi(&g, e);
    let (mut blo, mut bhi, eta_g) = golden_section(&phi, lo, hi, 1e-10);

    // dense log-spaced scan as a unimodality check
    let mut scan_fallback = false;
    let span = (hi - eta_min).max(1e-300);
    let mut best = (eta_g, phi(eta_g));
    for i in 0..=400 {
        let e = eta_min + span * 10f64.powf(-12.0 + 12.0 * i as f64 / 400.0);
        let v = phi(e);
        if v < best.1 - 1e-9 * (1.0 + best.1.abs()) {
            best = (e, v);
        }
    }
    if best.0 != eta_g {
        scan_fallback = true;
        let w = (best.0 - eta_min) * 0.5;
        let r = golden_section(&phi, (best.0 - w).max(lo), best.0 + 2.0 * w, 1e-10);
        blo = r.0;
        bhi = r.1;
    }

    // polish on the secular equation φ′(η) = 0
    let hard_case = geo.dphi(&g, lo) >= 0.0;
    let eta = if hard_case {
        eta_min
    } else {
        let (mut a, mut b) = (blo.max(lo), bhi);
        if geo.dphi(&g, a) > 0.0 {
            a = lo;
        }
        if geo.dphi(&g, b) < 0.0 {
            b = hi;
        }
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            if geo.dphi(&g, mid) < 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    };

    let c = if hard_case {
        // components off the top eigenspace from the pseudo-inverse, then the
        // top eigenvector to reach the boundary
        let w = geo.v.transpose() * (&geo.yt * (2.0 * eta) - &g);
        let gap = 1e-9 * (1.0 + kmax);
        let z = DVector::from_fn(dim, |i, _| {
            let den = eta - 0.5 * geo.kappa[i];
            if den > gap {
                0.5 * w[i] / den
            } else {
                0.0
            }
        });
        let c0 = &geo.v * z;
        let e = geo.v.column(dim - 1).into_owned();
        let d = &c0 - &geo.yt;
        let de = d.dot(&e);
        let tau = -de + (de * de - (d.norm_squared() - geo.rho2)).max(0.0).sqrt();
        c0 + e * tau
    } else {
        geo.c_of(&g, eta)
    };
    // keep the point feasible despite rounding
    let mut u = &c - &geo.yt;
    let un = u.norm();
    let rho = geo.rho2.sqrt();
    if un > rho && un > 0.0 {
        u *= rho / un;
    }
    let c = &geo.yt + u;
    let a = geo.to_a(&c);
    let primal = tr.primal(&a);
    let value = if hard_case { geo.phi(&g, lo) } else { geo.phi(&g, eta) };
    if (primal - value).abs() > tol * (1.0 + value.abs()) {
        log::debug!("trust-region gap {:e} above tolerance", primal - value);
    }
    Ok(InnerMax { value, primal, eta, a: a.iter().copied().collect(), hard_case, scan_fallback })
}

/// min over the ball of ‖Kst a − t‖², by bisection on the multiplier μ of
/// (FᵀF + μI)c = Fᵀt + μỹ.
pub fn ball_min(geo: &BallGeometry, t: &DVector<f64>) -> (DVector<f64>, f64) {
    let dim = geo.dim();
    let eval = |c: &DVector<f64>| (&geo.f * c - t).norm_squared();
    if dim == 0 || geo.rho2 == 0.0 {
        let a = geo.to_a(&geo.yt);
        return (a, eval(&geo.yt));
    }
    let ft = geo.f.transpose() * t;
    let vt_ft = geo.v.transpose() * &ft;
    let vt_y = geo.v.transpose() * &geo.yt;
    let top = geo.kappa[dim - 1].max(0.0);
    let cut = PINV_CUTOFF * top.max(1e-300);
    let solve = |mu: f64| {
        let z = DVector::from_fn(dim, |i, _| {
            let k = geo.kappa[i].max(0.0);
            if mu == 0.0 {
                // closest least-squares solution to ỹ
                if k > cut {
                    vt_ft[i] / k
                } else {
                    vt_y[i]
                }
            } else {
                (vt_ft[i] + mu * vt_y[i]) / (k + mu)
            }
        });
        &geo.v * z
    };
    let c0 = solve(0.0);
    let c = if (&c0 - &geo.yt).norm_squared() <= geo.rho2 {
        c0
    } else {
        let dist = |mu: f64| (solve(mu) - &geo.yt).norm_squared() - geo.rho2;
        let mut hi = 1.0f64.max(top);
        while dist(hi) > 0.0 && hi < 1e300 {
            hi *= 4.0;
        }
        let mut lo = 0.0;
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if dist(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        solve(hi)
    };
    let a = geo.to_a(&c);
    let v = eval(&c);
    (a, v)
}

/// Terms of λbᵀKt b + ½(max_a ‖Kst a − Kt b‖² + min_a ‖Kst a − Kt b‖²).
#[derive(Clone, Debug)]
pub struct MaxMinEval {
    pub objective: f64,
    pub gradient: DVector<f64>,
    pub a_max: DVector<f64>,
    pub a_min: DVector<f64>,
}

pub fn maxmin_objective(bundle: &GramBundle, geo: &BallGeometry, lambda: f64, r: f64, b: &DVector<f64>) -> Result<MaxMinEval> {
    let tr = TrustRegionProblem { ks: bundle.ks.clone(), kst: bundle.kst.clone(), kt: bundle.kt.clone(), b: b.clone(), y_norm: bundle.y_norm.clone(), r };
    let t = &bundle.kt * b;
    let inner = inner_max_geometry(geo, &tr, &t, 1e-9)?;
    let a_max = DVector::from_vec(inner.a.clone());
    let max_term = (&bundle.kst * &a_max - &t).norm_squared();
    let (a_min, min_term) = ball_min(geo, &t);
    let objective = lambda * b.dot(&t) + 0.5 * (max_term + min_term);
    let gradient = &t * (2.0 * lambda) - &bundle.kt * (&bundle.kst * &a_max - &t) - &bundle.kt * (&bundle.kst * &a_min - &t);
    Ok(MaxMinEval { objective, gradient, a_max, a_min })
}

#[derive(Clone, Debug)]
pub struct OuterSolution {
    pub b: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// objective after each accepted step
    pub history: Vec<f64>,
}

/// Minimize the max-min objective over b by gradient descent with
/// backtracking, using the exact inner maximizer and minimizer for the
/// gradient. The objective is convex in b. Returns the best iterate.
pub fn outer_solve_alternating(bundle: &GramBundle, lambda: f64, r: f64, iters: usize) -> Result<OuterSolution> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("ridge parameter must be positive, got {lambda}")));
    }
    if !(r > 0.0) {
        return Err(Error::InvalidInput(format!("ball radius must be positive, got {r}")));
    }
    let geo = BallGeometry::new(&bundle.ks, &bundle.kst, &bundle.y_norm, r)?;
    let n = bundle.n();
    let mut b = DVector::zeros(n);
    let mut cur = maxmin_objective(bundle, &geo, lambda, r, &b)?;
    let mut history = vec![cur.objective];
    let kt_norm = bundle.kt.norm().max(1e-300);
    let mut step = 1.0 / (2.0 * (lambda * kt_norm + kt_norm * kt_norm));
    let mut converged = false;
    let mut it = 0;
    while it < iters {
        it += 1;
        let g2 = cur.gradient.norm_squared();
        if g2.sqrt() <= 1e-13 * (1.0 + cur.objective.abs()) {
            converged = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..80 {
            let cand = &b - &cur.gradient * step;
            let e = maxmin_objective(bundle, &geo, lambda, r, &cand)?;
            if e.objective <= cur.objective - 1e-4 * step * g2 {
                accepted = Some((cand, e));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((nb, e)) => {
                let drop = cur.objective - e.objective;
                b = nb;
                cur = e;
                history.push(cur.objective);
                step *= 2.0;
                if drop <= 1e-15 * (1.0 + cur.objective.abs()) {
                    converged = true;
                    break;
                }
            }
            None => {
                converged = true;
                break;
            }
        }
    }
    Ok(OuterSolution { b, objective: cur.objective, iterations: it, converged, history })
}

/// Exact objective at a given b (for comparing sampled solutions).
pub fn exact_objective(bundle: &GramBundle, lambda: f64, r: f64, b: &DVector<f64>) -> Result<f64> {
    let geo = BallGeometry::new(&bundle.ks, &bundle.kst, &bundle.y_norm, r)?;
    Ok(maxmin_objective(bundle, &geo, lambda, r, b)?.objective)
}

// ---------------------------------------------------------------------------
// SDP

/// Sparse SDPA data: minimize cᵀx s.t. Σ_i x_i F_i − F_0 ⪰ 0, with one
/// entry (matrix, block, i, j, value) per nonzero upper-triangular element,
/// 1-indexed. Negative block sizes denote diagonal (LP) blocks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SdpaData {
    pub m_dim: usize,
    pub block_struct: Vec<i64>,
    pub c: Vec<f64>,
    pub entries: Vec<(usize, usize, usize, usize, f64)>,
}

impl SdpaData {
    pub fn nonzeros(&self) -> usize {
        self.entries.len()
    }

    /// Dense block `blk` (1-indexed) of Σ x_i F_i − F_0.
    pub fn block_value(&self, blk: usize, x: &[f64]) -> DMatrix<f64> {
        let size = self.block_struct[blk - 1].unsigned_abs() as usize;
        let mut out = DMatrix::zeros(size, size);
        for &(mat, b, i, j, v) in &self.entries {
            if b != blk {
                continue;
            }
            let coef = if mat == 0 { -1.0 } else { x[mat - 1] };
            out[(i - 1, j - 1)] += coef * v;
            if i != j {
                out[(j - 1, i - 1)] += coef * v;
            }
        }
        out
    }
}

/// The SDP for the q-ball max-min problem in variables
/// x = (α, β, ν, z_1..z_m, Z_ij for i ≤ j), with blocks
///   1: [[νKs² + ½KstᵀKst − ¼K̃, νKs y + ¼K̃z], [·, α + ν(‖y‖² − r²)]]
///   2: [[Z, z], [zᵀ, 1]]
///   3: [[λKt + Kt², ½Kt Kst z], [·, β]]
///   4: diag(r² − Tr(Ks²Z) + 2yᵀKs z − ‖y‖², ν)
/// and objective max ½Tr(KstᵀKst Z) − β − α (stored as a minimization of
/// the negation), where K̃ = KstᵀKt(λKt + Kt²)^†Kt Kst.
#[derive(Clone, Debug)]
pub struct SdpProblem {
    pub m: usize,
    pub n: usize,
    pub lambda: f64,
    pub r: f64,
    pub k_tilde: DMatrix<f64>,
    pub ks: DMatrix<f64>,
    pub kst: DMatrix<f64>,
    pub kt: DMatrix<f64>,
    pub y_norm: DVector<f64>,
    pub sdpa: SdpaData,
}

fn upper_pairs(m: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(m * (m + 1) / 2);
    for i in 0..m {
        for j in i..m {
            v.push((i, j));
        }
    }
    v
}

pub fn build_sdp(bundle: &GramBundle, lambda: f64, r: f64) -> Result<SdpProblem> {
    if !(lambda > 0.0) || !(r > 0.0) {
        return Err(Error::InvalidInput("build_sdp needs λ > 0 and r > 0".into()));
    }
    let (m, n) = (bundle.m(), bundle.n());
    let ks = &bundle.ks;
    let kst = &bundle.kst;
    let kt = &bundle.kt;
    let y = &bundle.y_norm;
    let kt2 = kt * kt;
    let reg = kt * lambda + &kt2;
    let k_tilde = {
        let inner = kst.transpose() * kt * pinv_sym(&reg, PINV_CUTOFF) * kt * kst;
        (&inner + inner.transpose()) * 0.5
    };
    let ks2 = ks * ks;
    let ctc = kst.transpose() * kst;
    let ksy = ks * y;
    let ktkst = kt * kst;
    let yy = y.norm_squared();
    let pairs = upper_pairs(m);
    let (ia, ib, inu, iz0, izz0) = (1usize, 2usize, 3usize, 4usize, 4 + m);
    let m_dim = 3 + m + pairs.len();

    let mut e: Vec<(usize, usize, usize, usize, f64)> = Vec::new();
    let mut push = |mat: usize, blk: usize, i: usize, j: usize, v: f64| {
        if v != 0.0 {
            let (i, j) = if i <= j { (i, j) } else { (j, i) };
            e.push((mat, blk, i + 1, j + 1, v));
        }
    };
    // block 1
    let c1 = &ctc * 0.5 - &k_tilde * 0.25;
    for i in 0..m {
        for j in i..m {
            push(0, 1, i, j, -c1[(i, j)]);
            push(inu, 1, i, j, ks2[(i, j)]);
        }
        push(inu, 1, i, m, ksy[i]);
    }
    push(inu, 1, m, m, yy - r * r);
    push(ia, 1, m, m, 1.0);
    for jz in 0..m {
        for i in 0..m {
            push(iz0 + jz, 1, i, m, 0.25 * k_tilde[(i, jz)]);
        }
    }
    // block 2
    push(0, 2, m, m, -1.0);
    for jz in 0..m {
        push(iz0 + jz, 2, jz, m, 1.0);
    }
    for (p, &(i, j)) in pairs.iter().enumerate() {
        push(izz0 + p, 2, i, j, 1.0);
    }
    // block 3
    for i in 0..n {
        for j in i..n {
            push(0, 3, i, j, -reg[(i, j)]);
        }
    }
    for jz in 0..m {
        for i in 0..n {
            push(iz0 + jz, 3, i, n, 0.5 * ktkst[(i, jz)]);
        }
    }
    push(ib, 3, n, n, 1.0);
    // block 4 (diagonal)
    push(0, 4, 0, 0, yy - r * r);
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let v = if i == j { -ks2[(i, i)] } else { -2.0 * ks2[(i, j)] };
        push(izz0 + p, 4, 0, 0, v);
    }
    for jz in 0..m {
        push(iz0 + jz, 4, 0, 0, 2.0 * ksy[jz]);
    }
    push(inu, 4, 1, 1, 1.0);
    e.sort_by(|a, b| (a.0, a.1, a.2, a.3).cmp(&(b.0, b.1, b.2, b.3)));

    let mut c = vec![0.0; m_dim];
    c[ia - 1] = 1.0;
    c[ib - 1] = 1.0;
    for (p, &(i, j)) in pairs.iter().enumerate() {
        c[izz0 + p - 1] = -0.5 * ctc[(i, j)] * if i == j { 1.0 } else { 2.0 };
    }
    let sdpa = SdpaData { m_dim, block_struct: vec![(m + 1) as i64, (m + 1) as i64, (n + 1) as i64, -2], c, entries: e };
    Ok(SdpProblem {
        m,
        n,
        lambda,
        r,
        k_tilde,
        ks: ks.clone(),
        kst: kst.clone(),
        kt: kt.clone(),
        y_norm: y.clone(),
        sdpa,
    })
}

#[derive(Clone, Debug)]
pub struct SdpCandidate {
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
    pub z_mat: DMatrix<f64>,
    pub z: DVector<f64>,
}

impl SdpCandidate {
    /// SDPA variable vector.
    pub fn to_x(&self) -> Vec<f64> {
        let m = self.z.len();
        let mut x = vec![self.alpha, self.beta, self.nu];
        x.extend(self.z.iter());
        for (i, j) in upper_pairs(m) {
            x.push(self.z_mat[(i, j)]);
        }
        x
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Margin {
    pub name: &'static str,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CandidateReport {
    pub feasible: bool,
    pub objective: f64,
    pub margins: Vec<Margin>,
}

/// Evaluate each constraint of the SDP at a candidate; PSD margins are
/// λ_min + 1e-9·max(1, trace/k).
pub fn check_sdp_candidate(p: &SdpProblem, cand: &SdpCandidate) -> Result<CandidateReport> {
    if cand.z.len() != p.m || cand.z_mat.nrows() != p.m || cand.z_mat.ncols() != p.m {
        return Err(Error::DimensionMismatch(format!("candidate for m = {}", p.m)));
    }
    let x = cand.to_x();
    let tol = 1e-9;
    let b1 = psd_margin(&p.sdpa.block_value(1, &x), tol);
    let b2 = psd_margin(&p.sdpa.block_value(2, &x), tol);
    let b3 = psd_margin(&p.sdpa.block_value(3, &x), tol);
    let ks2 = &p.ks * &p.ks;
    let trace = (&ks2 * &cand.z_mat).trace() - 2.0 * (&p.ks * &p.y_norm).dot(&cand.z) + p.y_norm.norm_squared();
    let tr_margin = p.r * p.r - trace + tol * (1.0 + p.r * p.r);
    let margins = vec![
        Margin { name: "block1", value: b1 },
        Margin { name: "block2", value: b2 },
        Margin { name: "block3", value: b3 },
        Margin { name: "trace", value: tr_margin },
        Margin { name: "nu", value: cand.nu },
    ];
    let ctc = p.kst.transpose() * &p.kst;
    let objective = 0.5 * (&ctc * &cand.z_mat).trace() - cand.beta - cand.alpha;
    Ok(CandidateReport { feasible: margins.iter().all(|m| m.value >= 0.0), objective, margins })
}

/// Complete z (with Z = zzᵀ) to a feasible candidate: β = ¼zᵀK̃z and, for
/// ν scanned over {0} ∪ 10^[-8, 8], the smallest α allowed by the Schur
/// complement of block 1. Returns None when no scanned ν works.
pub fn complete_candidate(p: &SdpProblem, z: &DVector<f64>) -> Option<SdpCandidate> {
    let ks2 = &p.ks * &p.ks;
    let ctc = p.kst.transpose() * &p.kst;
    let ksy = &p.ks * &p.y_norm;
    let yy = p.y_norm.norm_squared();
    let beta = 0.25 * z.dot(&(&p.k_tilde * z));
    let mut best: Option<(f64, f64)> = None;
    let nus = std::iter::once(0.0).chain((0..=160).map(|i| 10f64.powf(-8.0 + 0.1 * i as f64)));
    for nu in nus {
        let mmat = &ks2 * nu + &ctc * 0.5 - &p.k_tilde * 0.25;
        let w = &ksy * nu + &p.k_tilde * z * 0.25;
        let pinv = pinv_sym(&mmat, 1e-12);
        let sol = &pinv * &w;
        if (&mmat * &sol - &w).norm() > 1e-9 * (1.0 + w.norm()) {
            continue;
        }
        let alpha = w.dot(&sol) - nu * (yy - p.r * p.r);
        if best.is_none_or(|(a, _)| alpha < a) {
            best = Some((alpha, nu));
        }
    }
    let (alpha, nu) = best?;
    // slack against rounding in the PSD tests
    let pad = 1e-10 * (1.0 + alpha.abs());
    Some(SdpCandidate { alpha: alpha + pad, beta: beta + 1e-10 * (1.0 + beta.abs()), nu, z_mat: z * z.transpose(), z: z.clone() })
}

/// SDPA sparse text. Floats use the shortest round-trip representation.
pub fn sdpa_to_string(d: &SdpaData) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "\"max-min surrogate SDP\"");
    let _ = writeln!(s, "{}", d.m_dim);
    let _ = writeln!(s, "{}", d.block_struct.len());
    let _ = writeln!(s, "{}", d.block_struct.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(" "));
    let _ = writeln!(s, "{}", d.c.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" "));
    for &(mat, blk, i, j, v) in &d.entries {
        let _ = writeln!(s, "{mat} {blk} {i} {j} {v:e}");
    }
    s
}

pub fn sdpa_from_str(text: &str) -> Result<SdpaData> {
    let bad = |row: usize, msg: &str| Error::Parse { file: "sdpa".into(), row, msg: msg.into() };
    let mut lines = text.lines().enumerate().filter(|(_, l)| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with('"') && !t.starts_with('*')
    });
    let mut next = |what: &str| lines.next().ok_or_else(|| bad(0, &format!("missing {what}")));
    let (r, l) = next("mDim")?;
    let m_dim: usize = l.trim().parse().map_err(|_| bad(r + 1, "bad mDim"))?;
    let (r, l) = next("nBlock")?;
    let nblock: usize = l.trim().parse().map_err(|_| bad(r + 1, "bad nBlock"))?;
    let mut block_struct: Vec<i64> = Vec::new();
    if nblock > 0 {
        let (r, l) = next("blockStruct")?;
        block_struct = l
            .split(|c: char| c.is_whitespace() || c == ',' || c == '{' || c == '}' || c == '(' || c == ')')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse().map_err(|_| bad(r + 1, "bad block size")))
            .collect::<Result<_>>()?;
        if block_struct.len() != nblock {
            return Err(bad(r + 1, "blockStruct length differs from nBlock"));
        }
    }
    let mut c = Vec::new();
    if m_dim > 0 {
        let (r, l) = next("c")?;
        c = l
            .split(|ch: char| ch.is_whitespace() || ch == ',' || ch == '{' || ch == '}')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse().map_err(|_| bad(r + 1, "bad objective entry")))
            .collect::<Result<_>>()?;
        if c.len() != m_dim {
            return Err(bad(r + 1, "objective length differs from mDim"));
        }
    }
    let mut entries = Vec::new();
    for (r, l) in lines {
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() != 5 {
            return Err(bad(r + 1, "entry needs 5 fields"));
        }
        let ints: Vec<usize> = t[..4].iter().map(|v| v.parse().map_err(|_| bad(r + 1, "bad index"))).collect::<Result<_>>()?;
        let v: f64 = t[4].parse().map_err(|_| bad(r + 1, "bad value"))?;
        entries.push((ints[0], ints[1], ints[2], ints[3], v));
    }
    Ok(SdpaData { m_dim, block_struct, c, entries })
}

pub fn export_sdpa(d: &SdpaData, path: &Path) -> Result<()> {
    std::fs::write(path, sdpa_to_string(d))?;
    Ok(())
}

pub fn import_sdpa(path: &Path) -> Result<SdpaData> {
    let text = std::fs::read_to_string(path)?;
    sdpa_from_str(&text).map_err(|e| match e {
        Error::Parse { row, msg, .. } => Error::Parse { file: path.display().to_string(), row, msg },
        e => e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, WeightVector};
    use crate::kernel::{normalized_bundle, KernelSpec};
    use crate::optim::psd_check;
    use crate::rng::Rng64;

    fn random_psd(rng: &mut Rng64, k: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(k, k, |_, _| rng.gaussian());
        &a * a.transpose() + DMatrix::identity(k, k) * 0.05
    }

    fn random_tr(rng: &mut Rng64, m: usize, n: usize) -> TrustRegionProblem {
        let ks = random_psd(rng, m);
        let kst = DMatrix::from_fn(n, m, |_, _| rng.gaussian());
        let kt = random_psd(rng, n);
        let y = DVector::from_fn(m, |_, _| rng.gaussian());
        let b = DVector::from_fn(n, |_, _| 0.5 * rng.gaussian());
        TrustRegionProblem { ks, kst, kt, b, y_norm: y, r: 0.3 + rng.uniform() }
    }

    /// Independent oracle: maximize over u = c − ỹ with ‖u‖ ≤ ρ through the
    /// secular equation ‖(ζI − C′)⁻¹f‖ = ρ in ζ > κ_max.
    fn kkt_oracle(tr: &TrustRegionProblem) -> f64 {
        let ks_inv = pinv_sym(&tr.ks, 1e-14);
        let f = &tr.kst * &ks_inv; // a = Ks⁻¹ c
        let cp = f.transpose() * &f;
        let g = f.transpose() * (&tr.kt * &tr.b);
        let lin = &cp * &tr.y_norm - &g;
        let (vals, vecs) = sym_eig_sorted(&cp);
        let w = vecs.transpose() * &lin;
        let m = vals.len();
        let norm_at = |zeta: f64| (0..m).map(|i| (w[i] / (zeta - vals[i])).powi(2)).sum::<f64>().sqrt();
        let mut lo = vals[m - 1] + 1e-14;
        let mut hi = vals[m - 1] + 1.0;
        while norm_at(hi) > tr.r {
            hi = vals[m - 1] + 2.0 * (hi - vals[m - 1]);
        }
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if norm_at(mid) > tr.r {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let zeta = 0.5 * (lo + hi);
        let z = DVector::from_fn(m, |i, _| w[i] / (zeta - vals[i]));
        let u = &vecs * z;
        let c = &tr.y_norm + u;
        tr.primal(&(&ks_inv * c))
    }

    #[test]
    fn trust_region_matches_kkt_oracle() {
        let mut rng = Rng64::new(1);
        for _ in 0..30 {
            let m = 1 + rng.below(4);
            let n = 1 + rng.below(4);
            let tr = random_tr(&mut rng, m, n);
            let res = inner_max_exact(&tr, 1e-8).unwrap();
            let oracle = kkt_oracle(&tr);
            assert!((res.value - oracle).abs() < 1e-6 * (1.0 + oracle.abs()), "dual {} oracle {}", res.value, oracle);
            assert!((res.primal - res.value).abs() < 1e-6 * (1.0 + oracle.abs()));
            assert!(tr.constraint(&DVector::from_vec(res.a.clone())) <= 1e-9);
        }
    }

    #[test]
    fn trust_region_matches_grid_2x2() {
        let mut rng = Rng64::new(2);
        for _ in 0..5 {
            let mut tr = random_tr(&mut rng, 2, 2);
            tr.b = DVector::zeros(2);
            let res = inner_max_exact(&tr, 1e-8).unwrap();
            let ks_inv = tr.ks.clone().try_inverse().unwrap();
            let mut best = f64::NEG_INFINITY;
            for i in 0..400 {
                for j in 0..400 {
                    let rad = tr.r * (i + 1) as f64 / 400.0;
                    let th = std::f64::consts::TAU * j as f64 / 400.0;
                    let c = &tr.y_norm + DVector::from_vec(vec![rad * th.cos(), rad * th.sin()]);
                    best = best.max(tr.primal(&(&ks_inv * c)));
                }
            }
            assert!((res.value - best).abs() < 1e-3 * (1.0 + best.abs()), "dual {} grid {}", res.value, best);
            assert!(res.value >= best - 1e-9);
        }
    }

    #[test]
    fn zero_radius_pins_a() {
        let mut rng = Rng64::new(3);
        let mut tr = random_tr(&mut rng, 3, 2);
        tr.r = 0.0;
        let res = inner_max_exact(&tr, 1e-8).unwrap();
        let a = pinv_sym(&tr.ks, 1e-12) * &tr.y_norm;
        assert!((res.value - tr.primal(&a)).abs() < 1e-9);
    }

    #[test]
    fn golden_agrees_with_dense_scan() {
        let mut rng = Rng64::new(4);
        for _ in 0..10 {
            let tr = random_tr(&mut rng, 3, 3);
            let geo = BallGeometry::from_problem(&tr).unwrap();
            let g = geo.f.transpose() * (&tr.kt * &tr.b);
            let res = inner_max_exact(&tr, 1e-8).unwrap();
            let eta_min = 0.5 * geo.kappa[geo.dim() - 1];
            let mut best = (0.0, f64::INFINITY);
            let mut e = eta_min + 1e-9;
            while e < 1e4 * (1.0 + eta_min) {
                let v = geo.phi(&g, e);
                if v < best.1 {
                    best = (e, v);
                }
                e *= 1.0 + 1e-4;
                e += 1e-12;
            }
            assert!((best.0 - res.eta).abs() <= 1e-6 * (1.0 + res.eta) + 2e-4 * res.eta, "{} vs {}", best.0, res.eta);
        }
    }

    #[test]
    fn hard_case_is_flagged_and_exact() {
        // Ks = I, y = 0, C′ = diag(2, 1), g has no component on the top eigenvector
        let ks = DMatrix::identity(2, 2);
        let kst = DMatrix::from_row_slice(2, 2, &[2f64.sqrt(), 0.0, 0.0, 1.0]);
        let kt = DMatrix::identity(2, 2);
        let b = DVector::from_vec(vec![0.0, 0.1]);
        let tr = TrustRegionProblem { ks, kst, kt, b, y_norm: DVector::zeros(2), r: 1.0 };
        let res = inner_max_exact(&tr, 1e-8).unwrap();
        assert!(res.hard_case);
        assert!((res.primal - res.value).abs() < 1e-8);
        assert!(tr.constraint(&DVector::from_vec(res.a.clone())).abs() < 1e-9);
        // angle scan on the unit circle
        let best = (0..100_000)
            .map(|j| {
                let t = std::f64::consts::TAU * j as f64 / 100_000.0;
                tr.primal(&DVector::from_vec(vec![t.cos(), t.sin()]))
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((res.value - best).abs() < 1e-8);
    }

    #[test]
    fn schur_block_matches_quadratic_test() {
        let mut rng = Rng64::new(5);
        let tr = random_tr(&mut rng, 3, 2);
        let geo = BallGeometry::from_problem(&tr).unwrap();
        let g = geo.f.transpose() * (&tr.kt * &tr.b);
        let eta_min = 0.5 * geo.kappa[2];
        let mut agree = 0;
        for _ in 0..100 {
            let eta = eta_min + 0.01 + 5.0 * rng.uniform();
            let phi = geo.phi(&g, eta);
            let gamma = phi + rng.uniform_range(-1.0, 1.0) * (0.2 + phi.abs());
            if (gamma - phi).abs() < 1e-6 * (1.0 + phi.abs()) {
                continue;
            }
            let blk = tr.dual_block(eta, gamma);
            assert_eq!(psd_check(&blk, 1e-12), gamma >= phi, "eta {eta} gamma {gamma} phi {phi}");
            agree += 1;
        }
        assert!(agree > 90);
    }

    fn small_bundle(rng: &mut Rng64, m: usize, n: usize) -> GramBundle {
        let sx = DMatrix::from_fn(m, 1, |_, _| rng.uniform());
        let sy = DVector::from_fn(m, |_, _| rng.gaussian());
        let tx = DMatrix::from_fn(n, 1, |_, _| rng.uniform() - 0.3);
        let ds = Dataset::new(sx, sy, tx, DMatrix::zeros(0, 1), DVector::zeros(0)).unwrap();
        let q = WeightVector::normalized(DVector::from_fn(m, |_, _| rng.uniform() + 0.2)).unwrap();
        normalized_bundle(&KernelSpec::gaussian(0.5).unwrap(), &ds, &q).unwrap()
    }

    #[test]
    fn ball_min_matches_angle_scan() {
        let mut rng = Rng64::new(6);
        for _ in 0..10 {
            let bundle = small_bundle(&mut rng, 2, 2);
            let r = 0.2 + rng.uniform();
            let geo = BallGeometry::new(&bundle.ks, &bundle.kst, &bundle.y_norm, r).unwrap();
            let t = DVector::from_fn(2, |_, _| 2.0 * rng.gaussian());
            let (a, v) = ball_min(&geo, &t);
            assert!((&bundle.ks * &a - &bundle.y_norm).norm() <= r + 1e-9);
            let ks_inv = bundle.ks.clone().try_inverse().unwrap();
            let mut best = f64::INFINITY;
            for i in 0..=300 {
                for j in 0..300 {
                    let rad = r * i as f64 / 300.0;
                    let th = std::f64::consts::TAU * j as f64 / 300.0;
                    let c = &bundle.y_norm + DVector::from_vec(vec![rad * th.cos(), rad * th.sin()]);
                    best = best.min((&bundle.kst * (&ks_inv * c) - &t).norm_squared());
                }
            }
            assert!(v <= best + 1e-9);
            assert!(best - v < 1e-3 * (1.0 + best));
        }
    }

    #[test]
    fn outer_descends_from_zero() {
        let mut rng = Rng64::new(7);
        let bundle = small_bundle(&mut rng, 3, 3);
        let sol = outer_solve_alternating(&bundle, 0.1, 0.5, 200).unwrap();
        assert!(sol.history.len() >= 2);
        assert!(sol.history[1] < sol.history[0]);
        for w in sol.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(sol.objective <= sol.history[0]);
    }

    #[test]
    fn sdp_structure() {
        let mut rng = Rng64::new(8);
        let bundle = small_bundle(&mut rng, 3, 2);
        let p = build_sdp(&bundle, 0.1, 0.5).unwrap();
        assert_eq!(p.sdpa.block_struct, vec![4, 4, 3, -2]);
        assert_eq!(p.sdpa.m_dim, 3 + 3 + 6);
        assert!((&p.k_tilde - p.k_tilde.transpose()).amax() < 1e-14);
        assert!(psd_check(&p.k_tilde, 1e-10));
        for &(_, _, i, j, v) in &p.sdpa.entries {
            assert!(i <= j && v != 0.0);
        }
    }

    #[test]
    fn sdp_zero_kt_collapses() {
        let mut rng = Rng64::new(9);
        let mut bundle = small_bundle(&mut rng, 2, 2);
        bundle.kt = DMatrix::zeros(2, 2);
        let p = build_sdp(&bundle, 0.1, 0.5).unwrap();
        assert!(p.k_tilde.amax() == 0.0);
        let mut cand = SdpCandidate { alpha: 0.0, beta: 0.3, nu: 0.0, z_mat: DMatrix::zeros(2, 2), z: DVector::zeros(2) };
        let blk = p.sdpa.block_value(3, &cand.to_x());
        assert_eq!(blk[(2, 2)], 0.3);
        assert!(blk.view((0, 0), (2, 2)).amax() == 0.0);
        cand.beta = -0.1;
        assert!(psd_margin(&p.sdpa.block_value(3, &cand.to_x()), 0.0) < 0.0);
    }

    #[test]
    fn zero_candidate_feasible_iff_trace_holds() {
        let mut rng = Rng64::new(10);
        let bundle = small_bundle(&mut rng, 2, 2);
        let yy = bundle.y_norm.norm();
        for &(r, expect) in &[(yy * 1.1, true), (yy * 0.9, false)] {
            let p = build_sdp(&bundle, 0.1, r).unwrap();
            let cand = SdpCandidate { alpha: 0.0, beta: 0.0, nu: 0.0, z_mat: DMatrix::zeros(2, 2), z: DVector::zeros(2) };
            let rep = check_sdp_candidate(&p, &cand).unwrap();
            assert_eq!(rep.feasible, expect);
        }
        let p = build_sdp(&bundle, 0.1, yy * 2.0).unwrap();
        let cand = SdpCandidate { alpha: 0.0, beta: 0.0, nu: -1.0, z_mat: DMatrix::zeros(2, 2), z: DVector::zeros(2) };
        let rep = check_sdp_candidate(&p, &cand).unwrap();
        assert!(!rep.feasible);
        assert!(rep.margins.iter().any(|m| m.name == "nu" && m.value < 0.0));
    }

    #[test]
    fn completed_candidate_is_weakly_dual() {
        let mut rng = Rng64::new(11);
        for _ in 0..5 {
            let bundle = small_bundle(&mut rng, 2, 2);
            let (lambda, r) = (0.1, 0.6);
            let sol = outer_solve_alternating(&bundle, lambda, r, 300).unwrap();
            let geo = BallGeometry::new(&bundle.ks, &bundle.kst, &bundle.y_norm, r).unwrap();
            let e = maxmin_objective(&bundle, &geo, lambda, r, &sol.b).unwrap();
            let p = build_sdp(&bundle, lambda, r).unwrap();
            for z in [&e.a_max, &e.a_min] {
                let cand = complete_candidate(&p, z).expect("completion");
                let rep = check_sdp_candidate(&p, &cand).unwrap();
                assert!(rep.feasible, "{:?}", rep.margins);
                assert!(rep.objective <= sol.objective + 1e-5, "sdp {} primal {}", rep.objective, sol.objective);
            }
        }
    }

    #[test]
    fn sdpa_round_trip_and_counts() {
        let mut rng = Rng64::new(12);
        let bundle = small_bundle(&mut rng, 3, 2);
        let p = build_sdp(&bundle, 0.1, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.dat-s");
        export_sdpa(&p.sdpa, &path).unwrap();
        let back = import_sdpa(&path).unwrap();
        assert_eq!(back, p.sdpa);
        for (a, b) in back.entries.iter().zip(&p.sdpa.entries) {
            assert_eq!(a.4.to_bits(), b.4.to_bits());
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines = text.lines().count();
        assert_eq!(lines, 5 + p.sdpa.nonzeros());

        let empty = SdpaData { m_dim: 0, block_struct: vec![], c: vec![], entries: vec![] };
        let s = sdpa_to_string(&empty);
        assert_eq!(sdpa_from_str(&s).unwrap(), empty);
        assert!(!s.lines().any(|l| l.split_whitespace().count() == 5));
    }
}
