//! Kernels, Gram matrices and the normalized matrices used by the exact
//! (trust-region) formulation of the GDM problem.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, WeightVector};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Linear,
    /// K(x, z) = exp(−‖x − z‖² / (2σ²))
    Gaussian { sigma: f64 },
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidInput(format!("Gaussian bandwidth must be positive, got {sigma}")));
        }
        Ok(KernelSpec::Gaussian { sigma })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::Gaussian { sigma } => Self::gaussian(sigma).map(|_| ()),
        }
    }

    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => x.iter().zip(z).map(|(a, b)| a * b).sum(),
            KernelSpec::Gaussian { sigma } => {
                let d2: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * sigma * sigma)).exp()
            }
        }
    }

    /// sup K(x, x) over the given points (R² in the generalization bounds).
    pub fn r_squared(&self, points: &[&DMatrix<f64>]) -> f64 {
        match self {
            KernelSpec::Gaussian { .. } => 1.0,
            KernelSpec::Linear => points
                .iter()
                .flat_map(|x| x.row_iter().map(|r| r.norm_squared()).collect::<Vec<_>>())
                .fold(0.0, f64::max),
        }
    }
}

/// Entry (i, j) = K(X_i, Z_j) for row-point matrices.
pub fn gram(kernel: &KernelSpec, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != z.ncols() && x.nrows() > 0 && z.nrows() > 0 {
        return Err(Error::DimensionMismatch(format!("gram: {} vs {} feature columns", x.ncols(), z.ncols())));
    }
    Ok(gram_unchecked(kernel, x, z))
}

pub(crate) fn gram_unchecked(kernel: &KernelSpec, x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    match *kernel {
        KernelSpec::Linear => x * z.transpose(),
        KernelSpec::Gaussian { sigma } => {
            let xn: Vec<f64> = x.row_iter().map(|r| r.norm_squared()).collect();
            let zn: Vec<f64> = z.row_iter().map(|r| r.norm_squared()).collect();
            let cross = x * z.transpose();
            let s2 = 2.0 * sigma * sigma;
            DMatrix::from_fn(x.nrows(), z.nrows(), |i, j| {
                let d2 = (xn[i] + zn[j] - 2.0 * cross[(i, j)]).max(0.0);
                if d2 == 0.0 {
                    1.0
                } else {
                    (-d2 / s2).exp()
                }
            })
        }
    }
}

/// Symmetric Gram matrix of one point set (exactly symmetric).
pub fn gram_sym(kernel: &KernelSpec, x: &DMatrix<f64>) -> DMatrix<f64> {
    let g = gram_unchecked(kernel, x, x);
    (&g + g.transpose()) * 0.5
}

/// Bandwidth grid σ ∈ {k·d : k = 2^-10, …, 2^0}.
pub fn bandwidth_grid(d: usize) -> Vec<f64> {
    (-10..=0).map(|e| 2f64.powi(e) * d as f64).collect()
}

/// Normalized kernel matrices for weights q over the source sample:
/// Kt = K(T,T)/n, Ks = Q^½ K(S,S) Q^½, Kst = n^-½ K(T,S) Q^½, y = Q^½ y_S.
#[derive(Clone, Debug)]
pub struct GramBundle {
    pub kt: DMatrix<f64>,
    pub ks: DMatrix<f64>,
    pub kst: DMatrix<f64>,
    pub y_norm: DVector<f64>,
    pub q: WeightVector,
    pub kernel: KernelSpec,
}

impl GramBundle {
    pub fn m(&self) -> usize {
        self.ks.nrows()
    }
    pub fn n(&self) -> usize {
        self.kt.nrows()
    }
}

pub fn normalized_bundle(kernel: &KernelSpec, ds: &Dataset, q: &WeightVector) -> Result<GramBundle> {
    if q.len() != ds.m() {
        return Err(Error::DimensionMismatch(format!("q has {} entries for {} source points", q.len(), ds.m())));
    }
    if !q.is_simplex() {
        return Err(Error::InvalidInput("normalized_bundle needs simplex weights".into()));
    }
    let n = ds.n() as f64;
    let sq = q.values().map(f64::sqrt);
    let kt = gram_sym(kernel, ds.target_x()) / n;
    let kss = gram_sym(kernel, ds.source_x());
    let ks = DMatrix::from_fn(ds.m(), ds.m(), |i, j| sq[i] * sq[j] * kss[(i, j)]);
    let kts = gram_unchecked(kernel, ds.target_x(), ds.source_x());
    let kst = DMatrix::from_fn(ds.n(), ds.m(), |i, j| kts[(i, j)] * sq[j] / n.sqrt());
    let y_norm = sq.component_mul(ds.source_y());
    Ok(GramBundle { kt, ks, kst, y_norm, q: q.clone(), kernel: *kernel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{min_eigenvalue, sym_eig_sorted};
    use crate::rng::Rng64;

    fn col(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(xs.len(), 1, xs)
    }

    #[test]
    fn linear_gram_scalar() {
        let x = col(&[2.0]);
        assert_eq!(gram(&KernelSpec::Linear, &x, &x).unwrap()[(0, 0)], 4.0);
    }

    #[test]
    fn gaussian_diagonal_is_one() {
        let mut rng = Rng64::new(1);
        let x = DMatrix::from_fn(6, 3, |_, _| rng.gaussian());
        let g = gram(&KernelSpec::Gaussian { sigma: 0.7 }, &x, &x).unwrap();
        for i in 0..6 {
            assert_eq!(g[(i, i)], 1.0);
        }
        assert!((&g - g.transpose()).amax() < 1e-12);
    }

    #[test]
    fn gram_is_psd() {
        let mut rng = Rng64::new(2);
        let x = DMatrix::from_fn(5, 3, |_, _| rng.gaussian());
        for k in [KernelSpec::Linear, KernelSpec::Gaussian { sigma: 1.3 }] {
            assert!(min_eigenvalue(&gram(&k, &x, &x).unwrap()) >= -1e-10);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let x = DMatrix::zeros(2, 2);
        let z = DMatrix::zeros(2, 3);
        assert!(gram(&KernelSpec::Linear, &x, &z).is_err());
    }

    fn tiny(source: &[f64], labels: &[f64], target: &[f64]) -> Dataset {
        Dataset::new(
            col(source),
            DVector::from_column_slice(labels),
            col(target),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        )
        .unwrap()
    }

    #[test]
    fn bundle_shapes() {
        let ds = tiny(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0], &[0.5, 0.1]);
        let b = normalized_bundle(&KernelSpec::Linear, &ds, &WeightVector::uniform(3)).unwrap();
        assert_eq!(b.kt.shape(), (2, 2));
        assert_eq!(b.ks.shape(), (3, 3));
        assert_eq!(b.kst.shape(), (2, 3));
    }

    #[test]
    fn bundle_hand_computation() {
        let ds = tiny(&[1.0, 2.0], &[1.0, 2.0], &[0.3]);
        let b = normalized_bundle(&KernelSpec::Linear, &ds, &WeightVector::uniform(2)).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 1.0, 2.0]);
        assert!((&b.ks - expect).amax() < 1e-15);
        let r = 2f64.sqrt();
        assert!((b.y_norm[0] - 1.0 / r).abs() < 1e-15 && (b.y_norm[1] - 2.0 / r).abs() < 1e-15);
    }

    #[test]
    fn identical_points_rank_one() {
        let ds = tiny(&[0.7, 0.7, 0.7], &[1.0, 2.0, 3.0], &[0.3]);
        let b = normalized_bundle(&KernelSpec::Gaussian { sigma: 1.0 }, &ds, &WeightVector::uniform(3)).unwrap();
        let sv = b.ks.clone().svd(false, false).singular_values;
        let rank = sv.iter().filter(|s| **s > 1e-10 * sv.max()).count();
        assert_eq!(rank, 1);
    }

    #[test]
    fn bundle_is_linear_in_kernel() {
        let ds = tiny(&[1.0, 2.0, -1.0], &[1.0, 0.0, 2.0], &[0.5, 0.2]);
        let r = 2f64.sqrt();
        let scaled = Dataset::new(
            ds.source_x() * r,
            ds.source_y().clone(),
            ds.target_x() * r,
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        )
        .unwrap();
        let q = WeightVector::normalized(DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let a = normalized_bundle(&KernelSpec::Linear, &ds, &q).unwrap();
        let b = normalized_bundle(&KernelSpec::Linear, &scaled, &q).unwrap();
        assert!((&b.kt - &a.kt * 2.0).amax() < 1e-14);
        assert!((&b.ks - &a.ks * 2.0).amax() < 1e-14);
        assert!((&b.kst - &a.kst * 2.0).amax() < 1e-14);
    }

    #[test]
    fn bundle_matrices_are_psd() {
        let mut rng = Rng64::new(3);
        let xs: Vec<f64> = (0..6).map(|_| rng.gaussian()).collect();
        let ds = tiny(&xs[..4], &[1.0, 2.0, 3.0, 4.0], &xs[4..]);
        let b = normalized_bundle(&KernelSpec::Gaussian { sigma: 0.5 }, &ds, &WeightVector::uniform(4)).unwrap();
        assert!(sym_eig_sorted(&b.kt).0[0] >= -1e-8);
        assert!(sym_eig_sorted(&b.ks).0[0] >= -1e-8);
    }

    #[test]
    fn r_squared_bounds() {
        let x = col(&[0.5, -2.0]);
        assert_eq!(KernelSpec::Linear.r_squared(&[&x]), 4.0);
        assert_eq!(KernelSpec::Gaussian { sigma: 1.0 }.r_squared(&[&x]), 1.0);
    }

    #[test]
    fn bandwidth_grid_endpoints() {
        let g = bandwidth_grid(3);
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 3.0 / 1024.0);
        assert_eq!(g[10], 3.0);
    }
}
