//! Comparison methods: ridge regression on the uniform source distribution,
//! FE feature augmentation, KMM reweighting and DM reweighting, plus
//! training on the (oracle-labeled) target sample as a reference.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{merge_augmented, Dataset, WeightVector};
use crate::discrepancy::{dm_minimize, dm_minimize_augmented, HypothesisClassSpec, DM_DEFAULT_ITERS};
use crate::error::{Error, Result};
use crate::kernel::{gram, gram_sym, KernelSpec};
use crate::learner::{krr_fit, Hypothesis};
use crate::optim::{solve_qp, QpProblem, DEFAULT_MAX_ITER, DEFAULT_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Uniform,
    Fe,
    Kmm,
    Dm,
    Gdm,
    /// ridge regression on T with its true labels (needs the target oracle)
    Target,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Uniform => "uniform",
            Method::Fe => "fe",
            Method::Kmm => "kmm",
            Method::Dm => "dm",
            Method::Gdm => "gdm",
            Method::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

/// Source → (x, x, 0), Target → (x, 0, x).
pub fn fe_map(x: &[f64], domain: Domain) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; 3 * d];
    out[..d].copy_from_slice(x);
    let off = match domain {
        Domain::Source => d,
        Domain::Target => 2 * d,
    };
    out[off..off + d].copy_from_slice(x);
    out
}

pub fn fe_map_rows(x: &DMatrix<f64>, domain: Domain) -> DMatrix<f64> {
    let d = x.ncols();
    let mut out = DMatrix::zeros(x.nrows(), 3 * d);
    for (i, row) in x.row_iter().enumerate() {
        let v: Vec<f64> = row.iter().copied().collect();
        for (j, val) in fe_map(&v, domain).into_iter().enumerate() {
            out[(i, j)] = val;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmmConfig {
    /// weight cap B
    pub cap: f64,
    /// mean-matching slack ε
    pub epsilon: f64,
    pub kernel: KernelSpec,
}

impl KmmConfig {
    pub fn new(cap: f64, epsilon: f64, kernel: KernelSpec) -> Result<Self> {
        if !(cap > 0.0) || !(epsilon >= 0.0) {
            return Err(Error::InvalidInput(format!("KMM needs B > 0 and ε ≥ 0, got B = {cap}, ε = {epsilon}")));
        }
        Ok(Self { cap, epsilon, kernel })
    }

    /// B = 1000 and ε = √m/(√m − 1).
    pub fn recommended(m: usize, kernel: KernelSpec) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidInput("the recommended KMM slack needs m ≥ 2".into()));
        }
        let s = (m as f64).sqrt();
        Self::new(1000.0, s / (s - 1.0), kernel)
    }
}

/// KMM weights for source points `source` against `target`: minimize
/// ½βᵀKβ − κᵀβ with κ_i = (m/n)Σ_j K(x_i, x′_j), 0 ≤ β ≤ B and
/// |Σβ_i − m| ≤ mε.
pub fn kmm_weights_points(source: &DMatrix<f64>, target: &DMatrix<f64>, cfg: &KmmConfig) -> Result<DVector<f64>> {
    let (m, n) = (source.nrows(), target.nrows());
    if m == 0 || n == 0 {
        return Err(Error::InvalidInput("KMM needs nonempty source and target samples".into()));
    }
    if !(cfg.epsilon >= 0.0) {
        return Err(Error::Infeasible(format!("negative KMM slack {}", cfg.epsilon)));
    }
    let k = gram_sym(&cfg.kernel, source);
    let kappa = gram(&cfg.kernel, source, target)? * DVector::from_element(n, 1.0) * (m as f64 / n as f64);
    let mf = m as f64;
    let mut a = DMatrix::zeros(2, m);
    a.row_mut(0).fill(1.0);
    a.row_mut(1).fill(-1.0);
    let b = DVector::from_vec(vec![mf * (1.0 + cfg.epsilon), -mf * (1.0 - cfg.epsilon)]);
    let prob = QpProblem::new(k, -kappa)
        .with_ineq(a, b)
        .with_bounds(Some(DVector::zeros(m)), Some(DVector::from_element(m, cfg.cap)));
    let rep = solve_qp(&prob, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    if !rep.is_optimal() {
        log::warn!("KMM QP stopped with status {:?}", rep.status);
    }
    Ok(rep.x.map(|v| v.clamp(0.0, cfg.cap)))
}

pub fn kmm_weights(ds: &Dataset, cfg: &KmmConfig) -> Result<DVector<f64>> {
    kmm_weights_points(ds.source_x(), ds.target_x(), cfg)
}

/// ‖(1/m)Σβ_iφ(x_i) − (1/n)Σφ(x′_j)‖² through the kernel expansion.
pub fn mean_embedding_residual(source: &DMatrix<f64>, target: &DMatrix<f64>, beta: &DVector<f64>, kernel: &KernelSpec) -> Result<f64> {
    let (m, n) = (source.nrows() as f64, target.nrows() as f64);
    let kss = gram_sym(kernel, source);
    let ktt = gram_sym(kernel, target);
    let kst = gram(kernel, source, target)?;
    let ones = DVector::from_element(target.nrows(), 1.0);
    Ok(beta.dot(&(kss * beta)) / (m * m) - 2.0 * beta.dot(&(kst * &ones)) / (m * n) + ones.dot(&(ktt * &ones)) / (n * n))
}

#[derive(Clone, Debug)]
pub struct BaselineFit {
    pub method: Method,
    /// hypothesis as seen by target points
    pub h: Hypothesis,
    /// training rows used by the fit
    pub rows: usize,
}

impl BaselineFit {
    pub fn predict_target(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.h.predict(x)
    }

    pub fn linear_weights(&self) -> Option<DVector<f64>> {
        self.h.linear_weights()
    }
}

/// FE through its kernel form K_FE(u, v) = (1 + [same domain])·K(u, v),
/// which equals the kernel of the augmented features (exactly so for the
/// linear kernel). The ridge solution on S ∪ T′ is returned as an expansion
/// in K over the original points, with target-domain anchors doubled, so it
/// is evaluated on target points directly.
fn fe_fit(kernel: &KernelSpec, ds: &Dataset, lambda: f64) -> Result<Hypothesis> {
    let (x, y, w) = merge_augmented(ds);
    let rows = x.nrows();
    let target_row = |i: usize| i >= ds.m();
    let k = gram_sym(kernel, &x);
    let sw = w.values().map(f64::sqrt);
    let mut sys = DMatrix::from_fn(rows, rows, |i, j| {
        let same = target_row(i) == target_row(j);
        sw[i] * sw[j] * k[(i, j)] * if same { 2.0 } else { 1.0 }
    });
    for i in 0..rows {
        sys[(i, i)] += lambda;
    }
    let chol = sys.cholesky().ok_or_else(|| Error::Singular("FE ridge system is not positive definite".into()))?;
    let at = chol.solve(&sw.component_mul(&y));
    let c = DVector::from_fn(rows, |i, _| sw[i] * at[i] * if target_row(i) { 2.0 } else { 1.0 });
    Hypothesis::new(*kernel, x, c, None)
}

fn simplex_of(w: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(WeightVector::normalized(w.clone())?.values().clone())
}

/// Fit one comparison method. With s > 0 the labeled target points join the
/// training set of every method; for FE they form the target domain.
pub fn fit_baseline(method: Method, ds: &Dataset, kernel: &KernelSpec, lambda: f64) -> Result<BaselineFit> {
    let (x, y, uniform) = merge_augmented(ds);
    let rows = x.nrows();
    let hclass = HypothesisClassSpec::new(*kernel, 1.0)?;
    let fit = match method {
        Method::Uniform => BaselineFit { method, h: krr_fit(kernel, &x, &y, uniform.values(), lambda)?, rows },
        Method::Kmm => {
            let cfg = KmmConfig::recommended(rows.max(2), *kernel)?;
            let beta = kmm_weights_points(&x, ds.target_x(), &cfg)?;
            BaselineFit { method, h: krr_fit(kernel, &x, &y, &simplex_of(&beta)?, lambda)?, rows }
        }
        Method::Dm => {
            let q = dm_minimize(ds, &hclass, DM_DEFAULT_ITERS, 0)?.q;
            let q = if ds.s() > 0 { dm_minimize_augmented(ds, &hclass, &q, DM_DEFAULT_ITERS, 0)?.q } else { q };
            BaselineFit { method, h: krr_fit(kernel, &x, &y, q.values(), lambda)?, rows }
        }
        Method::Fe => {
            if !(lambda > 0.0) {
                return Err(Error::InvalidInput(format!("ridge parameter must be positive, got {lambda}")));
            }
            BaselineFit { method, h: fe_fit(kernel, ds, lambda)?, rows }
        }
        Method::Target => {
            let ty = ds.require_target_oracle()?;
            let n = ds.n();
            BaselineFit { method, h: krr_fit(kernel, ds.target_x(), ty, &DVector::from_element(n, 1.0 / n as f64), lambda)?, rows: n }
        }
        Method::Gdm => return Err(Error::InvalidInput("GDM is not a baseline; use gdm::gdm_fit".into())),
    };
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::learner::mse;
    use crate::rng::Rng64;

    #[test]
    fn fe_examples() {
        assert_eq!(fe_map(&[1.0, 2.0], Domain::Source), vec![1.0, 2.0, 1.0, 2.0, 0.0, 0.0]);
        assert_eq!(fe_map(&[1.0, 2.0], Domain::Target), vec![1.0, 2.0, 0.0, 0.0, 1.0, 2.0]);
        let mut rng = Rng64::new(1);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gaussian()).collect();
            let z: Vec<f64> = (0..3).map(|_| rng.gaussian()).collect();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
            let (fs, ft) = (fe_map(&x, Domain::Source), fe_map(&z, Domain::Target));
            assert!((dot(&fs, &ft) - dot(&x, &z)).abs() < 1e-12);
            let fz = fe_map(&z, Domain::Source);
            assert!((dot(&fs, &fz) - 2.0 * dot(&x, &z)).abs() < 1e-12);
        }
    }

    #[test]
    fn kmm_recommended_slack() {
        let cfg = KmmConfig::recommended(4, KernelSpec::Linear).unwrap();
        assert_eq!(cfg.epsilon, 2.0);
        assert_eq!(cfg.cap, 1000.0);
        assert!(KmmConfig::new(1.0, -0.1, KernelSpec::Linear).is_err());
    }

    #[test]
    fn kmm_exact_match_gives_ones() {
        let x = DMatrix::from_row_slice(4, 1, &[0.1, 0.5, 0.9, 1.3]);
        let cfg = KmmConfig::new(1000.0, 0.0, KernelSpec::gaussian(0.4).unwrap()).unwrap();
        let beta = kmm_weights_points(&x, &x, &cfg).unwrap();
        for b in beta.iter() {
            assert!((b - 1.0).abs() < 1e-6, "{beta}");
        }
        let res = mean_embedding_residual(&x, &x, &beta, &cfg.kernel).unwrap();
        assert!(res.abs() < 1e-10);
    }

    #[test]
    fn kmm_improves_residual_and_respects_box() {
        let mut rng = Rng64::new(2);
        for _ in 0..10 {
            let s = DMatrix::from_fn(3, 1, |_, _| rng.uniform());
            let t = DMatrix::from_fn(3, 1, |_, _| rng.uniform() - 0.4);
            let kernel = KernelSpec::gaussian(0.5).unwrap();
            let cfg = KmmConfig::new(5.0, 0.3, kernel).unwrap();
            let beta = kmm_weights_points(&s, &t, &cfg).unwrap();
            let r = mean_embedding_residual(&s, &t, &beta, &kernel).unwrap();
            let r1 = mean_embedding_residual(&s, &t, &DVector::from_element(3, 1.0), &kernel).unwrap();
            assert!(r <= r1 + 1e-9);
            assert!(beta.iter().all(|b| (0.0..=5.0).contains(b)));
            assert!((beta.sum() - 3.0).abs() <= 0.3 * 3.0 + 1e-7);
        }
    }

    #[test]
    fn fe_kernel_is_per_domain_kernel() {
        let mut rng = Rng64::new(3);
        let s = DMatrix::from_fn(4, 2, |_, _| rng.gaussian());
        let t = DMatrix::from_fn(3, 2, |_, _| rng.gaussian());
        let k = KernelSpec::Linear;
        let fs = fe_map_rows(&s, Domain::Source);
        let ft = fe_map_rows(&t, Domain::Target);
        let ss = gram(&k, &fs, &fs).unwrap() - gram(&k, &s, &s).unwrap() * 2.0;
        let st = gram(&k, &fs, &ft).unwrap() - gram(&k, &s, &t).unwrap();
        assert!(ss.amax() < 1e-12 && st.amax() < 1e-12);
    }

    #[test]
    fn augmentation_adds_labeled_rows() {
        let (ds, _) = gen_synthetic(4, 30, 20, 5).unwrap();
        for m in [Method::Uniform, Method::Kmm, Method::Fe, Method::Dm] {
            let f = fit_baseline(m, &ds, &KernelSpec::Linear, 1e-3).unwrap();
            assert_eq!(f.rows, 35);
            assert_eq!(f.h.anchors.nrows(), 35);
        }
        let (ds0, _) = gen_synthetic(4, 30, 20, 0).unwrap();
        assert_eq!(fit_baseline(Method::Uniform, &ds0, &KernelSpec::Linear, 1e-3).unwrap().rows, 30);
        assert!(fit_baseline(Method::Gdm, &ds0, &KernelSpec::Linear, 1e-3).is_err());
    }

    #[test]
    fn fe_matches_explicit_augmentation_for_linear() {
        let (ds, _) = gen_synthetic(5, 40, 20, 5).unwrap();
        let lambda = 1e-4;
        let f = fit_baseline(Method::Fe, &ds, &KernelSpec::Linear, lambda).unwrap();
        let mut xa = DMatrix::zeros(45, 3);
        xa.rows_mut(0, 40).copy_from(&fe_map_rows(ds.source_x(), Domain::Source));
        xa.rows_mut(40, 5).copy_from(&fe_map_rows(ds.labeled_x(), Domain::Target));
        let (_, y, w) = merge_augmented(&ds);
        let h = krr_fit(&KernelSpec::Linear, &xa, &y, w.values(), lambda).unwrap();
        let probe = DMatrix::from_row_slice(3, 1, &[0.05, 0.3, 0.7]);
        let direct = h.predict(&fe_map_rows(&probe, Domain::Target)).unwrap();
        let got = f.predict_target(&probe).unwrap();
        assert!((direct - got).amax() < 1e-9);
    }

    #[test]
    fn no_shift_baselines_agree() {
        // source and target from the same distribution
        let mut rng = Rng64::new(6);
        let m = 60;
        let sx = DMatrix::from_fn(m, 1, |_, _| rng.uniform());
        let sy = sx.column(0).map(|x| 2.0 * x + 0.1 * rng.gaussian());
        let tx = DMatrix::from_fn(40, 1, |_, _| rng.uniform());
        let ty = tx.column(0).map(|x| 2.0 * x + 0.1 * rng.gaussian());
        // FE only sees the target domain through T′, so the protocol's s > 0 is kept
        let lx = DMatrix::from_fn(10, 1, |_, _| rng.uniform());
        let ly = lx.column(0).map(|x| 2.0 * x + 0.1 * rng.gaussian());
        let ds = Dataset::new(sx, sy, tx.clone(), lx, ly).unwrap();
        let kernel = KernelSpec::gaussian(0.5).unwrap();
        let errs: Vec<f64> = [Method::Uniform, Method::Fe, Method::Kmm, Method::Dm]
            .iter()
            .map(|&meth| {
                let f = fit_baseline(meth, &ds, &kernel, 1e-5).unwrap();
                mse(&f.predict_target(&tx).unwrap(), &ty)
            })
            .collect();
        let lo = errs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = errs.iter().cloned().fold(0.0, f64::max);
        assert!(hi <= 2.0 * lo, "{errs:?}");
    }
}
