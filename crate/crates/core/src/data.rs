//! Samples for the adaptation problem: a labeled source sample S, an
//! unlabeled target sample T and an optional small labeled target sample T'.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::Rng64;

/// Immutable container for S, T and T'. Feature matrices store one point
/// per row. `target_oracle` optionally holds the true labels of T; it is
/// only available for generated data and only used by diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    source_x: DMatrix<f64>,
    source_y: DVector<f64>,
    target_x: DMatrix<f64>,
    labeled_x: DMatrix<f64>,
    labeled_y: DVector<f64>,
    target_oracle: Option<DVector<f64>>,
}

impl Dataset {
    pub fn new(
        source_x: DMatrix<f64>,
        source_y: DVector<f64>,
        target_x: DMatrix<f64>,
        labeled_x: DMatrix<f64>,
        labeled_y: DVector<f64>,
    ) -> Result<Self> {
        let d = source_x.ncols();
        if source_x.nrows() == 0 {
            return Err(Error::InvalidInput("source sample is empty".into()));
        }
        if target_x.nrows() == 0 {
            return Err(Error::InvalidInput("target sample is empty".into()));
        }
        if source_y.len() != source_x.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} source points but {} labels",
                source_x.nrows(),
                source_y.len()
            )));
        }
        if target_x.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "target must have d={} columns, found {}",
                d,
                target_x.ncols()
            )));
        }
        if labeled_x.nrows() > 0 && labeled_x.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "labeled target must have d={} feature columns, found {}",
                d,
                labeled_x.ncols()
            )));
        }
        if labeled_y.len() != labeled_x.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} labeled target points but {} labels",
                labeled_x.nrows(),
                labeled_y.len()
            )));
        }
        let all_finite = source_x
            .iter()
            .chain(source_y.iter())
            .chain(target_x.iter())
            .chain(labeled_x.iter())
            .chain(labeled_y.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidInput("non-finite value in dataset".into()));
        }
        let labeled_x = if labeled_x.nrows() == 0 { DMatrix::zeros(0, d) } else { labeled_x };
        Ok(Self { source_x, source_y, target_x, labeled_x, labeled_y, target_oracle: None })
    }

    /// Attach true labels for the unlabeled target sample.
    pub fn with_target_oracle(mut self, labels: DVector<f64>) -> Result<Self> {
        if labels.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "{} target points but {} oracle labels",
                self.n(),
                labels.len()
            )));
        }
        self.target_oracle = Some(labels);
        Ok(self)
    }

    pub fn m(&self) -> usize {
        self.source_x.nrows()
    }
    pub fn n(&self) -> usize {
        self.target_x.nrows()
    }
    pub fn s(&self) -> usize {
        self.labeled_x.nrows()
    }
    pub fn dim(&self) -> usize {
        self.source_x.ncols()
    }
    pub fn source_x(&self) -> &DMatrix<f64> {
        &self.source_x
    }
    pub fn source_y(&self) -> &DVector<f64> {
        &self.source_y
    }
    pub fn target_x(&self) -> &DMatrix<f64> {
        &self.target_x
    }
    pub fn labeled_x(&self) -> &DMatrix<f64> {
        &self.labeled_x
    }
    pub fn labeled_y(&self) -> &DVector<f64> {
        &self.labeled_y
    }
    pub fn target_oracle(&self) -> Option<&DVector<f64>> {
        self.target_oracle.as_ref()
    }

    pub fn require_target_oracle(&self) -> Result<&DVector<f64>> {
        self.target_oracle
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("target labels are required (oracle mode)".into()))
    }

    /// Same samples with S replaced by (S ∪ T'); T' is kept for validation.
    pub fn augmented(&self) -> Dataset {
        let (x, y, _) = merge_augmented(self);
        Dataset { source_x: x, source_y: y, ..self.clone() }
    }

    /// Same samples with a different source sample (T, T', oracle kept).
    pub fn with_source(&self, x: DMatrix<f64>, y: DVector<f64>) -> Result<Dataset> {
        let mut ds = Dataset::new(x, y, self.target_x.clone(), self.labeled_x.clone(), self.labeled_y.clone())?;
        ds.target_oracle = self.target_oracle.clone();
        Ok(ds)
    }
}

/// Nonnegative weights over sample indices. Simplex vectors sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    weights: DVector<f64>,
    simplex: bool,
}

pub const SIMPLEX_TOL: f64 = 1e-12;

impl WeightVector {
    pub fn simplex(weights: DVector<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("empty weight vector".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput("simplex weights must be finite and nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!("simplex weights sum to {sum}")));
        }
        Ok(Self { weights, simplex: true })
    }

    /// Rescale nonnegative weights so they sum to one.
    pub fn normalized(weights: DVector<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidInput("weights must have positive mass".into()));
        }
        let mut w = weights / sum;
        // absorb rounding so the sum is within SIMPLEX_TOL
        let drift: f64 = w.iter().sum::<f64>() - 1.0;
        let imax = w.imax();
        w[imax] -= drift;
        Self::simplex(w)
    }

    pub fn uniform(m: usize) -> Self {
        Self { weights: DVector::from_element(m, 1.0 / m as f64), simplex: true }
    }

    pub fn unconstrained(weights: DVector<f64>) -> Self {
        Self { weights, simplex: false }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.weights
    }
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    pub fn is_simplex(&self) -> bool {
        self.simplex
    }
    /// Extend with zero weights on `extra` trailing indices.
    pub fn padded(&self, extra: usize) -> Self {
        let mut w = DVector::zeros(self.len() + extra);
        w.rows_mut(0, self.len()).copy_from(&self.weights);
        Self { weights: w, simplex: self.simplex }
    }
}

/// Labeling function of the synthetic task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticOracle {
    pub noise_std: f64,
}

impl SyntheticOracle {
    pub fn label_fn(&self, x: f64) -> f64 {
        -x + x * x * x
    }

    pub fn noisy_label(&self, x: f64, rng: &mut Rng64) -> f64 {
        self.label_fn(x) + rng.normal(0.0, self.noise_std)
    }

    /// Fresh labeled target points, e.g. a held-out test sample.
    pub fn sample_target(&self, rng: &mut Rng64, count: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut x = DMatrix::zeros(count, 1);
        let mut y = DVector::zeros(count);
        for i in 0..count {
            x[(i, 0)] = rng.uniform_range(TARGET_RANGE.0, TARGET_RANGE.1);
            y[i] = self.noisy_label(x[(i, 0)], rng);
        }
        (x, y)
    }
}

pub const SOURCE_RANGE: (f64, f64) = (0.2, 1.0);
pub const TARGET_RANGE: (f64, f64) = (0.0, 0.25);
pub const SYNTHETIC_NOISE_STD: f64 = 0.1;

/// Synthetic 1-D shift task: source x ~ U[0.2, 1], target x ~ U[0, 0.25],
/// y = -x + x^3 + N(0, 0.1^2) with independent noise per point. The target
/// oracle labels are attached to the returned dataset.
pub fn gen_synthetic(seed: u64, m: usize, n: usize, s: usize) -> Result<(Dataset, SyntheticOracle)> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidInput("m and n must be at least 1".into()));
    }
    let oracle = SyntheticOracle { noise_std: SYNTHETIC_NOISE_STD };
    let mut rng = Rng64::new(seed);
    let mut sx = DMatrix::zeros(m, 1);
    let mut sy = DVector::zeros(m);
    for i in 0..m {
        sx[(i, 0)] = rng.uniform_range(SOURCE_RANGE.0, SOURCE_RANGE.1);
        sy[i] = oracle.noisy_label(sx[(i, 0)], &mut rng);
    }
    let (tx, ty) = oracle.sample_target(&mut rng, n);
    let (lx, ly) = oracle.sample_target(&mut rng, s);
    let ds = Dataset::new(sx, sy, tx, lx, ly)?.with_target_oracle(ty)?;
    Ok((ds, oracle))
}

/// S ∪ T' with the uniform empirical distribution over the m+s points, i.e.
/// (m/(m+s))·Q̂ + (s/(m+s))·P̂'.
pub fn merge_augmented(ds: &Dataset) -> (DMatrix<f64>, DVector<f64>, WeightVector) {
    let (m, s, d) = (ds.m(), ds.s(), ds.dim());
    let mut x = DMatrix::zeros(m + s, d);
    x.rows_mut(0, m).copy_from(&ds.source_x);
    if s > 0 {
        x.rows_mut(m, s).copy_from(&ds.labeled_x);
    }
    let mut y = DVector::zeros(m + s);
    y.rows_mut(0, m).copy_from(&ds.source_y);
    if s > 0 {
        y.rows_mut(m, s).copy_from(&ds.labeled_y);
    }
    (x, y, WeightVector::uniform(m + s))
}

fn read_rows(path: &Path, has_header: bool) -> Result<Vec<Vec<f64>>> {
    let file = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse { file: file.clone(), row: 0, msg: e.to_string() })?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1 + usize::from(has_header);
        let rec = rec.map_err(|e| Error::Parse { file: file.clone(), row, msg: e.to_string() })?;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        let vals = rec
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse { file: file.clone(), row, msg: format!("non-numeric cell {c:?}") })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(Error::Parse { file, row: 0, msg: "empty file".into() });
    }
    Ok(rows)
}

fn to_matrix(rows: &[Vec<f64>], cols: usize, path: &Path, what: &str) -> Result<DMatrix<f64>> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(Error::Parse {
                file: path.display().to_string(),
                row: i + 1,
                msg: format!("{what}, found {} columns", r.len()),
            });
        }
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn split_labeled(rows: &[Vec<f64>], d: usize, path: &Path) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let full = to_matrix(rows, d + 1, path, &format!("labeled rows must have {} columns", d + 1))?;
    Ok((full.columns(0, d).into_owned(), full.column(d).into_owned()))
}

/// Load S (d+1 columns, label last), T (d columns) and optionally T'
/// (d+1 columns). `d` is taken from the source file.
pub fn load_dataset(
    source_path: &Path,
    target_path: &Path,
    target_labeled_path: Option<&Path>,
    has_header: bool,
) -> Result<Dataset> {
    let src = read_rows(source_path, has_header)?;
    let cols = src[0].len();
    if cols < 2 {
        return Err(Error::Parse {
            file: source_path.display().to_string(),
            row: 1,
            msg: "source rows need at least one feature and a label".into(),
        });
    }
    let d = cols - 1;
    let (sx, sy) = split_labeled(&src, d, source_path)?;
    let tgt = read_rows(target_path, has_header)?;
    let tx = to_matrix(&tgt, d, target_path, &format!("target must have d={d} columns"))?;
    let (lx, ly) = match target_labeled_path {
        Some(p) => split_labeled(&read_rows(p, has_header)?, d, p)?,
        None => (DMatrix::zeros(0, d), DVector::zeros(0)),
    };
    Dataset::new(sx, sy, tx, lx, ly)
}

/// Read true labels for T from a one-column file.
pub fn load_target_oracle(ds: Dataset, path: &Path, has_header: bool) -> Result<Dataset> {
    let rows = read_rows(path, has_header)?;
    let m = to_matrix(&rows, 1, path, "oracle rows must have 1 column")?;
    ds.with_target_oracle(m.column(0).into_owned())
}

fn write_rows(path: &Path, x: &DMatrix<f64>, y: Option<&DVector<f64>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_io)?;
    for i in 0..x.nrows() {
        let mut rec: Vec<String> = (0..x.ncols()).map(|j| format!("{:e}", x[(i, j)])).collect();
        if let Some(y) = y {
            rec.push(format!("{:e}", y[i]));
        }
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn write_labels(path: &Path, y: &DVector<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_io)?;
    for v in y.iter() {
        w.write_record([format!("{v:e}")]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// File names used by [`write_dataset`].
pub const SOURCE_FILE: &str = "source.csv";
pub const TARGET_FILE: &str = "target.csv";
pub const LABELED_FILE: &str = "target_labeled.csv";
pub const ORACLE_FILE: &str = "target_oracle.csv";

/// Write the dataset as headerless CSV files in `dir`. Values use the
/// shortest round-trip float representation, so reloading is bit-exact.
/// T' and the oracle labels are written only when present.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rows(&dir.join(SOURCE_FILE), &ds.source_x, Some(&ds.source_y))?;
    write_rows(&dir.join(TARGET_FILE), &ds.target_x, None)?;
    if ds.s() > 0 {
        write_rows(&dir.join(LABELED_FILE), &ds.labeled_x, Some(&ds.labeled_y))?;
    }
    if let Some(o) = &ds.target_oracle {
        write_labels(&dir.join(ORACLE_FILE), o)?;
    }
    Ok(())
}

/// Inverse of [`write_dataset`].
pub fn read_dataset_dir(dir: &Path) -> Result<Dataset> {
    let lab = dir.join(LABELED_FILE);
    let ds = load_dataset(
        &dir.join(SOURCE_FILE),
        &dir.join(TARGET_FILE),
        lab.exists().then_some(lab.as_path()),
        false,
    )?;
    let oracle = dir.join(ORACLE_FILE);
    if oracle.exists() {
        load_target_oracle(ds, &oracle, false)
    } else {
        Ok(ds)
    }
}
