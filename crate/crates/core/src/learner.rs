//! Weighted kernel ridge regression and kernel-expansion hypotheses.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{gram, gram_sym, gram_unchecked, KernelSpec};

/// h(x) = Σ_i coeffs_i · scale_i · K(anchor_i, x).
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub kernel: KernelSpec,
    pub anchors: DMatrix<f64>,
    pub coeffs: DVector<f64>,
    pub anchor_scale: Option<DVector<f64>>,
}

impl Hypothesis {
    pub fn new(kernel: KernelSpec, anchors: DMatrix<f64>, coeffs: DVector<f64>, anchor_scale: Option<DVector<f64>>) -> Result<Self> {
        if anchors.nrows() != coeffs.len() || anchor_scale.as_ref().is_some_and(|s| s.len() != coeffs.len()) {
            return Err(Error::DimensionMismatch(format!(
                "{} anchors, {} coefficients",
                anchors.nrows(),
                coeffs.len()
            )));
        }
        Ok(Self { kernel, anchors, coeffs, anchor_scale })
    }

    pub fn zero(kernel: KernelSpec, anchors: DMatrix<f64>) -> Self {
        let a = anchors.nrows();
        Self { kernel, anchors, coeffs: DVector::zeros(a), anchor_scale: None }
    }

    pub fn dim(&self) -> usize {
        self.anchors.ncols()
    }

    /// Coefficients with the anchor scale folded in.
    pub fn effective_coeffs(&self) -> DVector<f64> {
        match &self.anchor_scale {
            Some(s) => self.coeffs.component_mul(s),
            None => self.coeffs.clone(),
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.dim() && x.nrows() > 0 {
            return Err(Error::DimensionMismatch(format!(
                "hypothesis has d={}, inputs have {} columns",
                self.dim(),
                x.ncols()
            )));
        }
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let k = gram_unchecked(&self.kernel, x, &self.anchors);
        k * self.effective_coeffs()
    }

    /// ‖h‖_K = √(cᵀ G c) with G the anchor Gram matrix.
    pub fn rkhs_norm(&self) -> f64 {
        let c = self.effective_coeffs();
        let g = gram_sym(&self.kernel, &self.anchors);
        c.dot(&(g * &c)).max(0.0).sqrt()
    }

    /// For a linear kernel, the weight vector w with h(x) = wᵀx.
    pub fn linear_weights(&self) -> Option<DVector<f64>> {
        match self.kernel {
            KernelSpec::Linear => Some(self.anchors.transpose() * self.effective_coeffs()),
            _ => None,
        }
    }
}

/// Exact minimizer of λ‖h‖²_K + Σ_i w_i (h(x_i) − y_i)² over expansions on
/// the training points: c = W^½ (λI + W^½ K W^½)⁻¹ W^½ y.
pub fn krr_fit(kernel: &KernelSpec, points: &DMatrix<f64>, labels: &DVector<f64>, weights: &DVector<f64>, lambda: f64) -> Result<Hypothesis> {
    let h = krr_fit_normalized(kernel, points, labels, weights, lambda)?;
    let c = h.effective_coeffs();
    Ok(Hypothesis { coeffs: c, anchor_scale: None, ..h })
}

/// Same fit, returned in the W^½-normalized parameterization
/// (coefficients ã with anchor scale √w, so that c = √w ⊙ ã).
pub fn krr_fit_normalized(
    kernel: &KernelSpec,
    points: &DMatrix<f64>,
    labels: &DVector<f64>,
    weights: &DVector<f64>,
    lambda: f64,
) -> Result<Hypothesis> {
    let a = points.nrows();
    if labels.len() != a || weights.len() != a {
        return Err(Error::DimensionMismatch(format!("{a} points, {} labels, {} weights", labels.len(), weights.len())));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("ridge parameter must be positive, got {lambda}")));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || !weights.iter().any(|w| *w > 0.0) {
        return Err(Error::InvalidInput("weights must be nonnegative with positive mass".into()));
    }
    let sw = weights.map(f64::sqrt);
    let k = gram(kernel, points, points)?;
    let mut sys = DMatrix::from_fn(a, a, |i, j| sw[i] * sw[j] * k[(i, j)]);
    sys = (&sys + sys.transpose()) * 0.5;
    for i in 0..a {
        sys[(i, i)] += lambda;
    }
    let rhs = sw.component_mul(labels);
    let chol = sys.cholesky().ok_or_else(|| Error::Singular("ridge system is not positive definite".into()))?;
    let at = chol.solve(&rhs);
    Hypothesis::new(*kernel, points.clone(), at, Some(sw))
}

/// λ‖h‖² + Σ_i w_i (h(x_i) − y_i)².
pub fn krr_objective(h: &Hypothesis, points: &DMatrix<f64>, labels: &DVector<f64>, weights: &DVector<f64>, lambda: f64) -> f64 {
    let r = h.predict_unchecked(points) - labels;
    lambda * h.rkhs_norm().powi(2) + weights.iter().zip(r.iter()).map(|(w, e)| w * e * e).sum::<f64>()
}

pub fn mse(pred: &DVector<f64>, y: &DVector<f64>) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    (pred - y).norm_squared() / y.len() as f64
}

/// Ridge grid λ ∈ {2^-25, …, 2^-5}.
pub fn lambda_grid() -> Vec<f64> {
    (-25..=-5).map(|e| 2f64.powi(e)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormBound {
    pub norm: f64,
    pub bound: f64,
    pub ok: bool,
}

/// RKHS norm bound for a ridge solution fitted on simplex weights with a
/// μ-admissible loss: comparing the objective at h and at 0 gives
/// λ‖h‖² ≤ μ Σ w_i |h(x_i)| ≤ μ √R ‖h‖, i.e. ‖h‖_K ≤ μ√R/λ, where
/// R = sup K(x, x).
pub fn norm_bound_check(h: &Hypothesis, mu: f64, r: f64, lambda: f64) -> NormBound {
    let norm = h.rkhs_norm();
    let bound = mu * r.sqrt() / lambda;
    NormBound { norm, bound, ok: norm <= bound + 1e-8 }
}

/// μ = p·M^(p−1) for L_p with M ≥ max(|y_i|, |h(x_i) − y_i|) on the sample.
pub fn admissibility_for_fit(h: &Hypothesis, points: &DMatrix<f64>, labels: &DVector<f64>, p: f64) -> f64 {
    let pred = h.predict_unchecked(points);
    let m = labels
        .iter()
        .zip(pred.iter())
        .fold(0.0f64, |acc, (y, f)| acc.max(y.abs()).max((f - y).abs()));
    p * m.powf(p - 1.0)
}
