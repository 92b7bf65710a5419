//! Surrogate hypothesis sets H″ given as weighted loss balls around the
//! source labels, and random sampling of their boundaries.
//!
//! A ball is {h : g(h) ≤ 0} with g(h) = Σ_i w_i |h(x_i) − y_i|^p − r^p.
//! Balls are collected in groups; a group is the intersection of its balls
//! and a family is the union of its groups. Boundary points of a group are
//! found by walking from an interior center h₀ along a random direction ĥ
//! to the first constraint that becomes active.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, WeightVector};
use crate::error::{Error, Result};
use crate::kernel::{gram, KernelSpec};
use crate::learner::{krr_fit_normalized, Hypothesis};
use crate::par::{map_indexed, Execution};
use crate::rng::Rng64;

pub const DEFAULT_SAMPLES_PER_BALL: usize = 20;
pub const DEFAULT_CENTER_RIDGE: f64 = 1e-6;
const DIRECTION_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateBall {
    pub weights: WeightVector,
    pub radius: f64,
    pub p: f64,
    pub kernel: KernelSpec,
}

impl SurrogateBall {
    pub fn new(weights: WeightVector, radius: f64, p: f64, kernel: KernelSpec) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::InvalidInput(format!("ball radius must be ≥ 0, got {radius}")));
        }
        if !(p >= 1.0) || !p.is_finite() {
            return Err(Error::InvalidInput(format!("ball exponent must be ≥ 1, got {p}")));
        }
        if weights.values().iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidInput("ball weights must be nonnegative".into()));
        }
        kernel.validate()?;
        Ok(Self { weights, radius, p, kernel })
    }

    /// Ball whose loss level Σ w|h − y|^p is at most `level`, i.e. r = level^(1/p).
    pub fn from_level(weights: WeightVector, level: f64, p: f64, kernel: KernelSpec) -> Result<Self> {
        if !(level >= 0.0) {
            return Err(Error::InvalidInput(format!("loss level must be ≥ 0, got {level}")));
        }
        Self::new(weights, level.powf(1.0 / p), p, kernel)
    }

    /// g at source predictions `pred`.
    pub fn constraint_at(&self, pred: &DVector<f64>, labels: &DVector<f64>) -> f64 {
        let w = self.weights.values();
        let loss: f64 = (0..pred.len()).map(|i| w[i] * (pred[i] - labels[i]).abs().powf(self.p)).sum();
        loss - self.radius.powf(self.p)
    }
}

/// Intersection of balls.
#[derive(Clone, Debug, PartialEq)]
pub struct BallGroup {
    pub balls: Vec<SurrogateBall>,
}

/// A union of ball groups over one source sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateSpec {
    pub points: DMatrix<f64>,
    pub labels: DVector<f64>,
    pub kernel: KernelSpec,
    pub groups: Vec<BallGroup>,
}

impl SurrogateSpec {
    pub fn new(points: DMatrix<f64>, labels: DVector<f64>, groups: Vec<BallGroup>) -> Result<Self> {
        let first = groups
            .iter()
            .flat_map(|g| g.balls.first())
            .next()
            .ok_or_else(|| Error::InvalidInput("surrogate spec needs at least one ball".into()))?;
        let kernel = first.kernel;
        if points.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!("{} points, {} labels", points.nrows(), labels.len())));
        }
        for g in &groups {
            if g.balls.is_empty() {
                return Err(Error::InvalidInput("empty ball group".into()));
            }
            for b in &g.balls {
                if b.kernel != kernel {
                    return Err(Error::InvalidInput("all balls must share one kernel".into()));
                }
                if b.weights.len() != points.nrows() {
                    return Err(Error::DimensionMismatch(format!(
                        "ball has {} weights for {} source points",
                        b.weights.len(),
                        points.nrows()
                    )));
                }
            }
        }
        Ok(Self { points, labels, kernel, groups })
    }

    /// One group holding a single ball.
    pub fn single(points: DMatrix<f64>, labels: DVector<f64>, ball: SurrogateBall) -> Result<Self> {
        Self::new(points, labels, vec![BallGroup { balls: vec![ball] }])
    }

    /// The family {L_q ≤ ρ} ∪ {L_uniform ≤ ρ} at loss level ρ, each disjunct
    /// its own group.
    pub fn union_family(ds: &Dataset, q_min: &WeightVector, level: f64, p: f64, kernel: KernelSpec) -> Result<Self> {
        let a = SurrogateBall::from_level(q_min.clone(), level, p, kernel)?;
        let b = SurrogateBall::from_level(WeightVector::uniform(ds.m()), level, p, kernel)?;
        Self::new(
            ds.source_x().clone(),
            ds.source_y().clone(),
            vec![BallGroup { balls: vec![a] }, BallGroup { balls: vec![b] }],
        )
    }

    pub fn constraint(&self, ball: &SurrogateBall, h: &Hypothesis) -> Result<f64> {
        Ok(ball.constraint_at(&h.predict(&self.points)?, &self.labels))
    }

    /// Largest constraint value over a group (≤ 0 means membership).
    pub fn group_violation(&self, group: usize, h: &Hypothesis) -> Result<f64> {
        let pred = h.predict(&self.points)?;
        Ok(self.groups[group]
            .balls
            .iter()
            .map(|b| b.constraint_at(&pred, &self.labels))
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Weighted ridge fit on the ball's weights, returned in the √w-scaled
/// parameterization; an error unless it lies strictly inside the ball.
pub fn center_hypothesis(points: &DMatrix<f64>, labels: &DVector<f64>, ball: &SurrogateBall, lambda_center: f64) -> Result<Hypothesis> {
    if ball.radius <= 0.0 {
        return Err(Error::InfeasibleCenter("radius 0 has no interior".into()));
    }
    let h = krr_fit_normalized(&ball.kernel, points, labels, ball.weights.values(), lambda_center)?;
    let g = ball.constraint_at(&h.predict(points)?, labels);
    if g >= 0.0 {
        return Err(Error::InfeasibleCenter(format!("ridge center has g = {g:e} ≥ 0")));
    }
    Ok(h)
}

/// Center for a group: the fit on the first ball, checked against all balls.
pub fn group_center(spec: &SurrogateSpec, group: usize, lambda_center: f64) -> Result<Hypothesis> {
    let g = &spec.groups[group];
    let h = center_hypothesis(&spec.points, &spec.labels, &g.balls[0], lambda_center)?;
    let v = spec.group_violation(group, &h)?;
    if v >= 0.0 {
        return Err(Error::InfeasibleCenter(format!("ridge center violates its group by {v:e}")));
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    /// negate every drawn direction (antithetic sampling)
    pub negate: bool,
    pub exec: Execution,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { negate: false, exec: Execution::default() }
    }
}

/// Smallest λ > 0 with Σ w|e + λd|^p = r^p given Σ w|e|^p < r^p, or ∞.
fn first_root(ball: &SurrogateBall, e: &DVector<f64>, d: &DVector<f64>) -> f64 {
    let w = ball.weights.values();
    let rp = ball.radius.powf(ball.p);
    let a: f64 = (0..e.len()).map(|i| w[i] * d[i] * d[i]).sum();
    let scale: f64 = (0..e.len()).map(|i| w[i] * (e[i] * e[i] + d[i] * d[i])).sum::<f64>().max(rp);
    if !(a > 1e-14 * scale) {
        return f64::INFINITY;
    }
    if ball.p == 2.0 {
        let b: f64 = 2.0 * (0..e.len()).map(|i| w[i] * e[i] * d[i]).sum::<f64>();
        let c: f64 = (0..e.len()).map(|i| w[i] * e[i] * e[i]).sum::<f64>() - rp;
        let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
        // positive root of aλ² + bλ + c with c < 0, in the cancellation-free form
        return if b >= 0.0 { -2.0 * c / (b + disc) } else { (-b + disc) / (2.0 * a) };
    }
    let g = |lam: f64| (0..e.len()).map(|i| w[i] * (e[i] + lam * d[i]).abs().powf(ball.p)).sum::<f64>() - rp;
    let mut hi = 1.0;
    let mut n = 0;
    while g(hi) <= 0.0 {
        hi *= 2.0;
        n += 1;
        if n > 200 {
            return f64::INFINITY;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn sample_group(spec: &SurrogateSpec, group: usize, center: &Hypothesis, k: usize, seed: u64, negate: bool, gram_ss: &DMatrix<f64>) -> Result<Vec<Hypothesis>> {
    let m = spec.points.nrows();
    if center.anchors.nrows() != m || center.anchors != spec.points {
        return Err(Error::InvalidInput("centers must be anchored on the source points".into()));
    }
    let scale = center.anchor_scale.clone().unwrap_or_else(|| DVector::from_element(m, 1.0));
    let pred0 = center.predict(&spec.points)?;
    let e = &pred0 - &spec.labels;
    let balls = &spec.groups[group].balls;
    for b in balls {
        let g0 = b.constraint_at(&pred0, &spec.labels);
        if !(g0 < 0.0) {
            return Err(Error::InfeasibleCenter(format!("center of group {group} has g = {g0:e}")));
        }
    }
    let mut rng = Rng64::stream(seed, group as u64);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut found = None;
        for _ in 0..DIRECTION_RETRIES {
            let mut dir = DVector::from_fn(m, |_, _| rng.gaussian());
            let nd = dir.norm();
            if nd == 0.0 {
                continue;
            }
            dir /= nd;
            if negate {
                dir = -dir;
            }
            let d = gram_ss * dir.component_mul(&scale);
            let lam = balls.iter().map(|b| first_root(b, &e, &d)).fold(f64::INFINITY, f64::min);
            if lam.is_finite() {
                found = Some(&center.coeffs + dir * lam);
                break;
            }
        }
        let coeffs = found.ok_or_else(|| {
            Error::UnboundedDirection(format!("group {group}: {DIRECTION_RETRIES} directions without a finite boundary point"))
        })?;
        out.push(Hypothesis::new(spec.kernel, spec.points.clone(), coeffs, Some(scale.clone()))?);
    }
    Ok(out)
}

/// k boundary points per group, h = h₀ + λ*ĥ with ĥ a unit standard-normal
/// coefficient vector over the source anchors (carrying the center's anchor
/// scale) and λ* the smallest positive root over the group's balls. Group j
/// draws from its own stream of `seed`, so the first k′ < k samples are the
/// samples obtained with k′.
pub fn sample_boundary(spec: &SurrogateSpec, centers: &[Hypothesis], k: usize, seed: u64) -> Result<Vec<Vec<Hypothesis>>> {
    sample_boundary_with(spec, centers, k, seed, &SampleOptions::default())
}

pub fn sample_boundary_with(spec: &SurrogateSpec, centers: &[Hypothesis], k: usize, seed: u64, opts: &SampleOptions) -> Result<Vec<Vec<Hypothesis>>> {
    if centers.len() != spec.groups.len() {
        return Err(Error::DimensionMismatch(format!("{} centers for {} groups", centers.len(), spec.groups.len())));
    }
    let gram_ss = gram(&spec.kernel, &spec.points, &spec.points)?;
    map_indexed(opts.exec, spec.groups.len(), |g| sample_group(spec, g, &centers[g], k, seed, opts.negate, &gram_ss))
        .into_iter()
        .collect()
}

/// Sample a family, skipping groups whose ridge center is not interior.
/// Returns the pooled samples and the indices of the groups used.
pub fn sample_family(spec: &SurrogateSpec, lambda_center: f64, k: usize, seed: u64, exec: Execution) -> Result<(Vec<Hypothesis>, Vec<usize>)> {
    let gram_ss = gram(&spec.kernel, &spec.points, &spec.points)?;
    let per_group = map_indexed(exec, spec.groups.len(), |g| match group_center(spec, g, lambda_center) {
        Ok(c) => sample_group(spec, g, &c, k, seed, false, &gram_ss).map(Some),
        Err(Error::InfeasibleCenter(msg)) => {
            log::debug!("skipping surrogate group {g}: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    });
    let mut pooled = Vec::new();
    let mut used = Vec::new();
    for (g, r) in per_group.into_iter().enumerate() {
        if let Some(s) = r? {
            pooled.extend(s);
            used.push(g);
        }
    }
    if used.is_empty() {
        return Err(Error::InfeasibleCenter("no group of the surrogate family has an interior center".into()));
    }
    Ok((pooled, used))
}

/// `count` evenly spaced loss levels on (0, m⁻¹Σ y_i²]. Empty (with a
/// warning) when all labels are zero.
pub fn r_grid(ds: &Dataset, count: usize) -> Result<Vec<f64>> {
    if count < 2 {
        return Err(Error::InvalidInput(format!("r grid needs at least 2 values, got {count}")));
    }
    let y = ds.source_y();
    let top = y.norm_squared() / y.len() as f64;
    if top == 0.0 {
        log::warn!("all source labels are zero; the r grid is empty");
        return Ok(Vec::new());
    }
    Ok((1..=count).map(|i| top * i as f64 / count as f64).collect())
}
