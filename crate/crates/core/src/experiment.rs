//! Experiment protocol: data generation or loading, 10-fold cross-validation
//! of (λ, kernel) for ridge regression on the training sample, fitting of
//! every method, target MSE on held-out target data and summary statistics;
//! objective profiles for 1-D linear tasks; SDP export for small instances.
//!
//! Every random choice is drawn from a stream derived from the config seed
//! and the trial index, and reports contain no timing information, so the
//! same config always produces the same JSON.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_baseline, Method};
use crate::data::{gen_synthetic, merge_augmented, read_dataset_dir, Dataset, WeightVector};
use crate::discrepancy::{dm_minimize, HypothesisClassSpec, DM_DEFAULT_ITERS};
use crate::error::{Error, Result};
use crate::gdm::{surrogate_loss, validate_r, GdmConfig, Validation, ValidationRow};
use crate::kernel::{normalized_bundle, KernelSpec};
use crate::learner::{krr_fit, lambda_grid, mse, Hypothesis};
use crate::par::{map_indexed, Execution};
use crate::rng::{derive_seed, Rng64};
use crate::sdp::{build_sdp, export_sdpa, SdpProblem};
use crate::surrogate::{r_grid, DEFAULT_CENTER_RIDGE, DEFAULT_SAMPLES_PER_BALL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// the 1-D shift task with a fresh held-out target sample of `test_n` points
    Synthetic { m: usize, n: usize, s: usize, test_n: usize },
    /// a directory written by `write_dataset`; evaluation uses the target oracle labels
    Dir { path: PathBuf },
}

fn default_kernels() -> Vec<KernelSpec> {
    vec![KernelSpec::Linear]
}
fn default_methods() -> Vec<Method> {
    vec![Method::Uniform, Method::Dm, Method::Gdm, Method::Target]
}
fn default_r_grid() -> usize {
    10
}
fn default_k() -> usize {
    DEFAULT_SAMPLES_PER_BALL
}
fn default_trials() -> usize {
    10
}
fn default_folds() -> usize {
    10
}
fn default_dm_iters() -> usize {
    DM_DEFAULT_ITERS
}
fn default_p() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataSource,
    #[serde(default = "default_kernels")]
    pub kernels: Vec<KernelSpec>,
    #[serde(default = "lambda_grid")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_r_grid")]
    pub r_grid_size: usize,
    /// boundary samples per surrogate ball
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_dm_iters")]
    pub dm_iters: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    /// divide summary statistics by the median of the target-trained model
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// m = n = 200, s = 10 labeled target points, linear hypotheses, 10 trials.
    pub fn synthetic_default() -> Self {
        Self {
            seed: 0,
            data: DataSource::Synthetic { m: 200, n: 200, s: 10, test_n: 1000 },
            kernels: default_kernels(),
            lambdas: lambda_grid(),
            r_grid_size: default_r_grid(),
            k: default_k(),
            methods: default_methods(),
            trials: default_trials(),
            folds: default_folds(),
            dm_iters: default_dm_iters(),
            p: default_p(),
            normalize: false,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.kernels.is_empty() {
            return bad("kernel grid is empty");
        }
        for k in &self.kernels {
            k.validate()?;
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return bad("λ grid must be nonempty with positive entries");
        }
        if self.methods.is_empty() {
            return bad("methods list is empty");
        }
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.folds < 2 {
            return bad("cross-validation needs at least 2 folds");
        }
        if self.k == 0 {
            return bad("boundary samples k must be at least 1");
        }
        if self.methods.contains(&Method::Gdm) && self.r_grid_size < 2 {
            return bad("r grid needs at least 2 levels");
        }
        if let DataSource::Synthetic { m, n, test_n, .. } = self.data {
            if m < self.folds || n == 0 || test_n == 0 {
                return bad("synthetic data needs m ≥ folds, n ≥ 1 and test_n ≥ 1");
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Training data and held-out evaluation data of one trial.
#[derive(Clone, Debug)]
pub struct TrialData {
    pub ds: Dataset,
    pub test_x: DMatrix<f64>,
    pub test_y: DVector<f64>,
}

pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    derive_seed(seed, trial as u64)
}

pub fn trial_data(cfg: &ExperimentConfig, trial: usize) -> Result<TrialData> {
    let seed = trial_seed(cfg.seed, trial);
    match &cfg.data {
        DataSource::Synthetic { m, n, s, test_n } => {
            let (ds, oracle) = gen_synthetic(seed, *m, *n, *s)?;
            let mut rng = Rng64::stream(seed, 1);
            let (test_x, test_y) = oracle.sample_target(&mut rng, *test_n);
            Ok(TrialData { ds, test_x, test_y })
        }
        DataSource::Dir { path } => {
            let ds = read_dataset_dir(path)?;
            let test_y = ds.require_target_oracle()?.clone();
            let test_x = ds.target_x().clone();
            Ok(TrialData { ds, test_x, test_y })
        }
    }
}

/// Fold index of each of `m` rows: a seeded permutation dealt round-robin.
pub fn cv_folds(seed: u64, m: usize, folds: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..m).collect();
    Rng64::stream(seed, 2).shuffle(&mut perm);
    let mut out = vec![0; m];
    for (pos, &i) in perm.iter().enumerate() {
        out[i] = pos % folds;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CvChoice {
    pub kernel: KernelSpec,
    pub lambda: f64,
    pub cv_mse: f64,
}

/// Grid search of uniform ridge regression over kernels × λ by k-fold
/// validation MSE; ties go to the earlier grid entry.
pub fn cross_validate(x: &DMatrix<f64>, y: &DVector<f64>, kernels: &[KernelSpec], lambdas: &[f64], folds: &[usize], nfolds: usize) -> Result<CvChoice> {
    let mut best: Option<CvChoice> = None;
    for kernel in kernels {
        for &lambda in lambdas {
            let mut se = 0.0;
            let mut count = 0usize;
            for f in 0..nfolds {
                let train: Vec<usize> = (0..x.nrows()).filter(|&i| folds[i] != f).collect();
                let val: Vec<usize> = (0..x.nrows()).filter(|&i| folds[i] == f).collect();
                if train.is_empty() || val.is_empty() {
                    continue;
                }
                let tx = x.select_rows(&train);
                let ty = DVector::from_fn(train.len(), |i, _| y[train[i]]);
                let w = DVector::from_element(train.len(), 1.0 / train.len() as f64);
                let h = krr_fit(kernel, &tx, &ty, &w, lambda)?;
                let pred = h.predict(&x.select_rows(&val))?;
                for (j, &i) in val.iter().enumerate() {
                    se += (pred[j] - y[i]).powi(2);
                }
                count += val.len();
            }
            let cv = se / count.max(1) as f64;
            if best.as_ref().is_none_or(|b| cv < b.cv_mse) {
                best = Some(CvChoice { kernel: *kernel, lambda, cv_mse: cv });
            }
        }
    }
    best.ok_or_else(|| Error::Config("empty hyperparameter grid".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodResult {
    pub method: Method,
    pub mse: Option<f64>,
    /// slope of a 1-D linear hypothesis
    pub slope: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub cv: CvChoice,
    /// loss level chosen for GDM on T′
    pub gdm_level: Option<f64>,
    pub results: Vec<MethodResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub count: usize,
    pub failures: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultsReport {
    pub config: ExperimentConfig,
    pub trials: Vec<TrialRecord>,
    pub summary: Vec<MethodSummary>,
    /// the summary was divided by this median of the target-trained model
    pub normalized_by: Option<f64>,
    pub failed_trials: Vec<(usize, String)>,
}

impl ResultsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn result(&self, trial: usize, method: Method) -> Option<&MethodResult> {
        self.trials.iter().find(|t| t.trial == trial)?.results.iter().find(|r| r.method == method)
    }
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarize(method: Method, values: &[f64], failures: usize, scale: f64) -> MethodSummary {
    let mut v: Vec<f64> = values.iter().map(|x| x / scale).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    // no values: every statistic is NaN (null in JSON)
    let var = match v.len() {
        0 => f64::NAN,
        1 => 0.0,
        _ => v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0),
    };
    MethodSummary { method, count: v.len(), failures, median: quantile(&v, 0.5), q1: quantile(&v, 0.25), q3: quantile(&v, 0.75), mean, std: var.sqrt() }
}

fn slope_of(h: &Hypothesis) -> Option<f64> {
    h.linear_weights().filter(|w| w.len() == 1).map(|w| w[0])
}

/// GDM for one trial: q_min from DM on S, level chosen on T′.
pub fn gdm_for_trial(ds: &Dataset, kernel: KernelSpec, lambda: f64, cfg: &ExperimentConfig, seed: u64, q_min: &WeightVector) -> Result<Validation> {
    let grid = r_grid(ds, cfg.r_grid_size)?;
    if grid.is_empty() {
        return Err(Error::InvalidInput("r grid is empty".into()));
    }
    let gcfg = GdmConfig { lambda, level: grid[0], p: cfg.p, k: cfg.k, seed, lambda_center: DEFAULT_CENTER_RIDGE };
    validate_r(ds, kernel, q_min, &grid, &gcfg, Execution::Sequential)
}

fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialRecord> {
    let seed = trial_seed(cfg.seed, trial);
    let data = trial_data(cfg, trial)?;
    let ds = &data.ds;
    let (x, y, _) = merge_augmented(ds);
    let folds = cv_folds(seed, x.nrows(), cfg.folds);
    let cv = cross_validate(&x, &y, &cfg.kernels, &cfg.lambdas, &folds, cfg.folds)?;
    let kernel = cv.kernel;
    let mut gdm_level = None;
    let mut q_min: Option<WeightVector> = None;
    let mut results = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let fitted: Result<Hypothesis> = match method {
            Method::Gdm => (|| {
                if q_min.is_none() {
                    let hclass = HypothesisClassSpec::new(kernel, 1.0)?;
                    q_min = Some(dm_minimize(ds, &hclass, cfg.dm_iters, seed)?.q);
                }
                let v = gdm_for_trial(ds, kernel, cv.lambda, cfg, seed, q_min.as_ref().unwrap())?;
                gdm_level = Some(v.best_level);
                Ok(v.best.h)
            })(),
            m => fit_baseline(m, ds, &kernel, cv.lambda).map(|f| f.h),
        };
        let r = match fitted.and_then(|h| Ok((h.predict(&data.test_x)?, h))) {
            Ok((pred, h)) => MethodResult { method, mse: Some(mse(&pred, &data.test_y)), slope: slope_of(&h), error: None },
            Err(e) => MethodResult { method, mse: None, slope: None, error: Some(format!("{}: {e}", e.kind())) },
        };
        results.push(r);
    }
    Ok(TrialRecord { trial, seed, cv, gdm_level, results })
}

/// Run all trials (in parallel under `exec`) and assemble the report in
/// trial order. Failed trials and failed fits are recorded, not fatal.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Execution) -> Result<ResultsReport> {
    cfg.validate()?;
    let outcomes = map_indexed(exec, cfg.trials, |t| run_trial(cfg, t));
    let mut trials = Vec::new();
    let mut failed_trials = Vec::new();
    for (t, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => trials.push(r),
            Err(e) => failed_trials.push((t, format!("{}: {e}", e.kind()))),
        }
    }
    let collect = |m: Method| -> (Vec<f64>, usize) {
        let mut vals = Vec::new();
        let mut fails = 0;
        for t in &trials {
            match t.results.iter().find(|r| r.method == m).and_then(|r| r.mse) {
                Some(v) => vals.push(v),
                None => fails += 1,
            }
        }
        (vals, fails)
    };
    let normalized_by = if cfg.normalize {
        let (mut v, _) = collect(Method::Target);
        v.sort_by(f64::total_cmp);
        let med = quantile(&v, 0.5);
        if !(med > 0.0) {
            return Err(Error::Config("normalization needs the target method with a positive median".into()));
        }
        Some(med)
    } else {
        None
    };
    let summary = cfg
        .methods
        .iter()
        .map(|&m| {
            let (v, f) = collect(m);
            summarize(m, &v, f, normalized_by.unwrap_or(1.0))
        })
        .collect();
    Ok(ResultsReport { config: cfg.clone(), trials, summary, normalized_by, failed_trials })
}

pub fn write_report(report: &ResultsReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, report.to_json()? + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// objective profile

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileRow {
    pub w: f64,
    pub source_objective: f64,
    pub target_objective: f64,
    pub dm_objective: f64,
    pub gdm_objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileTable {
    pub lambda: f64,
    pub rows: Vec<ProfileRow>,
}

pub const PROFILE_HEADER: &str = "w,source_objective,target_objective,dm_objective,gdm_objective";

impl ProfileTable {
    /// CSV with a comment line documenting the columns, then the header.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# objectives of h(x) = w·x with lambda = {:e}: lambda·w² plus the mean squared loss on S (source), \
             on T with true labels (target), on S weighted by q_min (dm), and the max/min surrogate loss (gdm)\n{PROFILE_HEADER}\n",
            self.lambda
        );
        for r in &self.rows {
            s.push_str(&format!("{:e},{:e},{:e},{:e},{:e}\n", r.w, r.source_objective, r.target_objective, r.dm_objective, r.gdm_objective));
        }
        s
    }

    /// w at the minimum of a column (0 source, 1 target, 2 dm, 3 gdm).
    pub fn argmin(&self, column: usize) -> f64 {
        let val = |r: &ProfileRow| [r.source_objective, r.target_objective, r.dm_objective, r.gdm_objective][column];
        self.rows.iter().min_by(|a, b| val(a).total_cmp(&val(b))).map(|r| r.w).unwrap_or(f64::NAN)
    }
}

/// Objectives of the linear hypotheses h(x) = w·x over a grid of slopes.
pub fn emit_objective_profile(ds: &Dataset, q_min: &WeightVector, lambda: f64, w_range: (f64, f64, usize), samples: &[Hypothesis]) -> Result<ProfileTable> {
    if ds.dim() != 1 {
        return Err(Error::InvalidInput(format!("objective profile needs d = 1, got d = {}", ds.dim())));
    }
    let (lo, hi, steps) = w_range;
    if steps < 2 || !(hi > lo) {
        return Err(Error::InvalidInput("profile range needs lo < hi and at least 2 steps".into()));
    }
    if q_min.len() != ds.m() {
        return Err(Error::DimensionMismatch(format!("q_min has {} entries for {} source points", q_min.len(), ds.m())));
    }
    let ty = ds.require_target_oracle()?;
    let sx = ds.source_x().column(0);
    let sy = ds.source_y();
    let tx = ds.target_x().column(0);
    let anchor = DMatrix::from_element(1, 1, 1.0);
    let mut rows = Vec::with_capacity(steps);
    for i in 0..steps {
        let w = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
        let reg = lambda * w * w;
        let src = sx.iter().zip(sy.iter()).map(|(x, y)| (w * x - y).powi(2)).sum::<f64>() / ds.m() as f64;
        let tgt = tx.iter().zip(ty.iter()).map(|(x, y)| (w * x - y).powi(2)).sum::<f64>() / ds.n() as f64;
        let dm = sx.iter().zip(sy.iter()).zip(q_min.values().iter()).map(|((x, y), q)| q * (w * x - y).powi(2)).sum::<f64>();
        let h = Hypothesis::new(KernelSpec::Linear, anchor.clone(), DVector::from_element(1, w), None)?;
        let gdm = surrogate_loss(&h, samples, ds)?;
        rows.push(ProfileRow { w, source_objective: reg + src, target_objective: reg + tgt, dm_objective: reg + dm, gdm_objective: reg + gdm });
    }
    Ok(ProfileTable { lambda, rows })
}

/// Level selection of one trial, as run inside `run_experiment`.
#[derive(Clone, Debug, Serialize)]
pub struct TrialValidation {
    pub trial: usize,
    pub seed: u64,
    pub cv: CvChoice,
    pub best_level: f64,
    pub table: Vec<ValidationRow>,
}

fn trial_validation(cfg: &ExperimentConfig, trial: usize, kernels: &[KernelSpec]) -> Result<(TrialData, CvChoice, WeightVector, Validation)> {
    let seed = trial_seed(cfg.seed, trial);
    let data = trial_data(cfg, trial)?;
    let ds = &data.ds;
    let (x, y, _) = merge_augmented(ds);
    let folds = cv_folds(seed, x.nrows(), cfg.folds);
    let cv = cross_validate(&x, &y, kernels, &cfg.lambdas, &folds, cfg.folds)?;
    let hclass = HypothesisClassSpec::new(cv.kernel, 1.0)?;
    let q_min = dm_minimize(ds, &hclass, cfg.dm_iters, seed)?.q;
    let v = gdm_for_trial(ds, cv.kernel, cv.lambda, cfg, seed, &q_min)?;
    Ok((data, cv, q_min, v))
}

/// CV, q_min and the r-grid validation table for one trial.
pub fn validate_r_for_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialValidation> {
    cfg.validate()?;
    let (_, cv, _, v) = trial_validation(cfg, trial, &cfg.kernels)?;
    Ok(TrialValidation { trial, seed: trial_seed(cfg.seed, trial), cv, best_level: v.best_level, table: v.table })
}

/// Profile for one synthetic trial of a config: λ from cross-validation,
/// q_min from DM and the GDM surrogate samples of the validated level.
pub fn profile_for_trial(cfg: &ExperimentConfig, trial: usize, w_range: (f64, f64, usize)) -> Result<ProfileTable> {
    if trial_data(cfg, trial)?.ds.dim() != 1 {
        return Err(Error::InvalidInput("objective profile needs d = 1".into()));
    }
    let (data, cv, q_min, v) = trial_validation(cfg, trial, &[KernelSpec::Linear])?;
    emit_objective_profile(&data.ds, &q_min, cv.lambda, w_range, &v.best.samples)
}

// ---------------------------------------------------------------------------
// SDP export

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdpExportConfig {
    pub seed: u64,
    pub m: usize,
    pub n: usize,
    pub kernel: KernelSpec,
    pub lambda: f64,
    /// loss level ρ of the q_min-ball; the ball radius is √ρ
    pub level: Option<f64>,
}

/// Build the SDP for a small synthetic instance (q_min from DM) and write it
/// in SDPA format.
pub fn export_sdp_instance(cfg: &SdpExportConfig, path: &Path) -> Result<SdpProblem> {
    let (ds, _) = gen_synthetic(cfg.seed, cfg.m, cfg.n, 0)?;
    let hclass = HypothesisClassSpec::new(cfg.kernel, 1.0)?;
    let q = dm_minimize(&ds, &hclass, DM_DEFAULT_ITERS, cfg.seed)?.q;
    let bundle = normalized_bundle(&cfg.kernel, &ds, &q)?;
    let level = match cfg.level {
        Some(l) => l,
        None => 0.5 * ds.source_y().norm_squared() / ds.m() as f64,
    };
    let p = build_sdp(&bundle, cfg.lambda, level.sqrt())?;
    export_sdpa(&p.sdpa, path)?;
    Ok(p)
}
