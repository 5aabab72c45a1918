//! Discrete measures, datasets, standardization, and cost tensors.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1};

/// Default cap on dense cost-tensor entries (see [`build_cost`]).
pub const DEFAULT_COST_CAP: u128 = 100_000_000;

/// A weighted point cloud: one treatment arm's empirical covariate
/// distribution.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    points: Array2<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// A measure with explicit nonnegative weights (not necessarily
    /// normalized; unbalanced solves are mass-aware).
    pub fn new(points: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "measure needs at least one point and one coordinate".into(),
            ));
        }
        if weights.len() != points.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} points but {} weights",
                points.nrows(),
                weights.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coordinate".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "weights must be finite and nonnegative".into(),
            ));
        }
        Ok(DiscreteMeasure { points, weights })
    }

    /// Empirical measure: uniform weight 1/n on each row.
    pub fn empirical(points: Array2<f64>) -> Result<Self> {
        let n = points.nrows();
        DiscreteMeasure::new(points, vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor rejects empty point sets
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Measure on the rows `idx` (with repetition allowed), uniform weights.
    /// Used by resampling.
    pub fn subsample(&self, idx: &[usize]) -> Result<Self> {
        let pts = Array2::from_shape_fn((idx.len(), self.dim()), |(r, c)| {
            self.points[(idx[r], c)]
        });
        DiscreteMeasure::empirical(pts)
    }
}

/// Ground cost on covariate tuples.
pub enum CostSpec {
    /// `|x - y|^2` for two arms; for J >= 3 the sum of pairwise squared
    /// Euclidean distances over all arm pairs.
    SquaredEuclidean,
    /// As above but with a per-coordinate diagonal weight vector.
    WeightedSquaredEuclidean(Vec<f64>),
    /// `sum_j lambda_j |x_j - xbar|^2` with `xbar = sum_j lambda_j x_j /
    /// sum_j lambda_j`: the dispersion of the tuple around its weighted
    /// barycenter.
    Barycentric(Vec<f64>),
    /// Arbitrary user cost over one point per arm.
    Custom(Box<dyn Fn(&[ArrayView1<'_, f64>]) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CostSpec::SquaredEuclidean => write!(f, "SquaredEuclidean"),
            CostSpec::WeightedSquaredEuclidean(w) => {
                write!(f, "WeightedSquaredEuclidean({w:?})")
            }
            CostSpec::Barycentric(l) => write!(f, "Barycentric({l:?})"),
            CostSpec::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Dense cost tensor over sample indices, row-major (last axis fastest).
/// For J=2 this is an `n0 x n1` matrix.
#[derive(Debug, Clone)]
pub struct CostTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl CostTensor {
    pub fn from_values(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.is_empty() || expect != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite cost".into()));
        }
        Ok(CostTensor { shape, values })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn arms(&self) -> usize {
        self.shape.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Entry at a full multi-index.
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.values[self.flat_index(idx)]
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, &d) in idx.iter().zip(&self.shape) {
            debug_assert!(*i < d);
            flat = flat * d + i;
        }
        flat
    }

    /// A copy with every entry multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> CostTensor {
        CostTensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Restrict a J=2 cost matrix to given row/column index lists (with
    /// repetition); used by bootstrap resampling to avoid recomputing
    /// distances.
    pub fn gather_pair(&self, rows: &[usize], cols: &[usize]) -> Result<CostTensor> {
        if self.arms() != 2 {
            return Err(Error::InvalidArgument(
                "gather_pair applies to two-arm cost matrices".into(),
            ));
        }
        let n1 = self.shape[1];
        let mut values = Vec::with_capacity(rows.len() * cols.len());
        for &i in rows {
            let base = i * n1;
            for &k in cols {
                values.push(self.values[base + k]);
            }
        }
        CostTensor::from_values(vec![rows.len(), cols.len()], values)
    }
}

fn pairwise_sq_euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, w: Option<&[f64]>) -> f64 {
    let mut acc = 0.0;
    match w {
        None => {
            for (x, y) in a.iter().zip(b.iter()) {
                let d = x - y;
                acc += d * d;
            }
        }
        Some(w) => {
            for ((x, y), wi) in a.iter().zip(b.iter()).zip(w.iter()) {
                let d = x - y;
                acc += wi * d * d;
            }
        }
    }
    acc
}

fn tuple_cost(points: &[ArrayView1<'_, f64>], spec: &CostSpec) -> f64 {
    match spec {
        CostSpec::SquaredEuclidean => {
            let mut acc = 0.0;
            for i in 0..points.len() {
                for j in (i + 1)..points.len() {
                    acc += pairwise_sq_euclidean(points[i], points[j], None);
                }
            }
            acc
        }
        CostSpec::WeightedSquaredEuclidean(w) => {
            let mut acc = 0.0;
            for i in 0..points.len() {
                for j in (i + 1)..points.len() {
                    acc += pairwise_sq_euclidean(points[i], points[j], Some(w));
                }
            }
            acc
        }
        CostSpec::Barycentric(lambda) => {
            let d = points[0].len();
            let total: f64 = lambda.iter().sum();
            let mut bary = vec![0.0; d];
            for (p, l) in points.iter().zip(lambda.iter()) {
                for (b, x) in bary.iter_mut().zip(p.iter()) {
                    *b += l * x / total;
                }
            }
            let mut acc = 0.0;
            for (p, l) in points.iter().zip(lambda.iter()) {
                let mut dist = 0.0;
                for (x, b) in p.iter().zip(bary.iter()) {
                    let dd = x - b;
                    dist += dd * dd;
                }
                acc += l * dist;
            }
            acc
        }
        CostSpec::Custom(f) => f(points),
    }
}

/// Dense cost tensor over all index tuples of the given measures.
///
/// Fails when the entry count would exceed `cap` (the caller should switch
/// to pairwise arm-by-arm solves) or when dimensions disagree.
pub fn build_cost_with_cap(
    measures: &[DiscreteMeasure],
    spec: &CostSpec,
    cap: u128,
) -> Result<CostTensor> {
    if measures.len() < 2 {
        return Err(Error::InvalidArgument("need at least two measures".into()));
    }
    let d = measures[0].dim();
    if measures.iter().any(|m| m.dim() != d) {
        return Err(Error::DimensionMismatch(
            "measures have different covariate dimensions".into(),
        ));
    }
    if let CostSpec::WeightedSquaredEuclidean(w) = spec {
        if w.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "{} metric weights for dimension {d}",
                w.len()
            )));
        }
    }
    if let CostSpec::Barycentric(l) = spec {
        if l.len() != measures.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} barycentric weights for {} arms",
                l.len(),
                measures.len()
            )));
        }
    }
    let entries: u128 = measures.iter().map(|m| m.len() as u128).product();
    if entries > cap {
        return Err(Error::MemoryCap { entries, cap });
    }

    let shape: Vec<usize> = measures.iter().map(|m| m.len()).collect();
    let total = entries as usize;
    let mut values = Vec::with_capacity(total);
    if measures.len() == 2 {
        // Hot path: plain double loop.
        for i in 0..shape[0] {
            let a = measures[0].point(i);
            for k in 0..shape[1] {
                values.push(tuple_cost(&[a, measures[1].point(k)], spec));
            }
        }
    } else {
        let mut idx = vec![0usize; shape.len()];
        let mut views: Vec<ArrayView1<'_, f64>> =
            measures.iter().map(|m| m.point(0)).collect();
        for _ in 0..total {
            for (j, v) in views.iter_mut().enumerate() {
                *v = measures[j].point(idx[j]);
            }
            values.push(tuple_cost(&views, spec));
            // odometer increment, last axis fastest
            for j in (0..idx.len()).rev() {
                idx[j] += 1;
                if idx[j] < shape[j] {
                    break;
                }
                idx[j] = 0;
            }
        }
    }
    let tensor = CostTensor::from_values(shape, values)?;
    Ok(tensor)
}

/// [`build_cost_with_cap`] with the default entry cap.
pub fn build_cost(measures: &[DiscreteMeasure], spec: &CostSpec) -> Result<CostTensor> {
    build_cost_with_cap(measures, spec, DEFAULT_COST_CAP)
}

/// One observational study: covariates, integer treatment labels, outcome.
#[derive(Debug, Clone)]
pub struct Dataset {
    covariates: Array2<f64>,
    treatment: Vec<usize>,
    outcomes: Array1<f64>,
    names: Vec<String>,
    arms: usize,
}

impl Dataset {
    pub fn new(
        covariates: Array2<f64>,
        treatment: Vec<usize>,
        outcomes: Array1<f64>,
        names: Vec<String>,
    ) -> Result<Self> {
        let n = covariates.nrows();
        if treatment.len() != n || outcomes.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} rows of covariates, {} treatments, {} outcomes",
                treatment.len(),
                outcomes.len()
            )));
        }
        if names.len() != covariates.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} column names for {} columns",
                names.len(),
                covariates.ncols()
            )));
        }
        if covariates.iter().any(|v| !v.is_finite())
            || outcomes.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument(
                "non-finite covariate or outcome".into(),
            ));
        }
        let arms = treatment.iter().max().map_or(0, |m| m + 1);
        if arms < 2 {
            return Err(Error::InvalidArgument(
                "need at least two treatment arms".into(),
            ));
        }
        for j in 0..arms {
            if !treatment.contains(&j) {
                return Err(Error::EmptyArm(j));
            }
        }
        Ok(Dataset {
            covariates,
            treatment,
            outcomes,
            names,
            arms,
        })
    }

    pub fn len(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor requires two non-empty arms
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn covariates(&self) -> &Array2<f64> {
        &self.covariates
    }

    pub fn treatment(&self) -> &[usize] {
        &self.treatment
    }

    pub fn outcomes(&self) -> &Array1<f64> {
        &self.outcomes
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn arm_indices(&self, arm: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.treatment[i] == arm).collect()
    }

    /// Restrict covariates to the named columns (order preserved as given).
    pub fn select_columns(&self, columns: &[&str]) -> Result<Dataset> {
        let mut keep = Vec::with_capacity(columns.len());
        for &c in columns {
            keep.push(self.column_index(c).ok_or_else(|| {
                Error::InvalidArgument(format!("unknown column `{c}`"))
            })?);
        }
        let cov = Array2::from_shape_fn((self.len(), keep.len()), |(r, c)| {
            self.covariates[(r, keep[c])]
        });
        Dataset::new(
            cov,
            self.treatment.clone(),
            self.outcomes.clone(),
            columns.iter().map(|s| s.to_string()).collect(),
        )
    }
}

/// Mean and sample standard deviation (divisor n-1) used to transform one
/// column; returned so callers can invert the transform.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnTransform {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

/// Replace each named column by its z-score over the full sample.
pub fn standardize(dataset: &Dataset, columns: &[&str]) -> Result<(Dataset, Vec<ColumnTransform>)> {
    let n = dataset.len();
    let mut covariates = dataset.covariates.clone();
    let mut transforms = Vec::with_capacity(columns.len());
    for &name in columns {
        let c = dataset
            .column_index(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown column `{name}`")))?;
        let col = covariates.column(c);
        let mean = col.sum() / n as f64;
        let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
        let sd = (ss / (n as f64 - 1.0)).sqrt();
        if sd == 0.0 || !sd.is_finite() {
            return Err(Error::ZeroVariance(name.to_string()));
        }
        for v in covariates.column_mut(c) {
            *v = (*v - mean) / sd;
        }
        transforms.push(ColumnTransform {
            name: name.to_string(),
            mean,
            sd,
        });
    }
    let out = Dataset::new(
        covariates,
        dataset.treatment.clone(),
        dataset.outcomes.clone(),
        dataset.names.clone(),
    )?;
    Ok((out, transforms))
}

/// One empirical measure (uniform weights) and outcome vector per arm,
/// ordered by treatment label.
pub fn split_by_treatment(dataset: &Dataset) -> Result<Vec<(DiscreteMeasure, Vec<f64>)>> {
    let mut out = Vec::with_capacity(dataset.arms());
    for j in 0..dataset.arms() {
        let idx = dataset.arm_indices(j);
        if idx.is_empty() {
            return Err(Error::EmptyArm(j));
        }
        let pts = Array2::from_shape_fn((idx.len(), dataset.covariates.ncols()), |(r, c)| {
            dataset.covariates[(idx[r], c)]
        });
        let ys = idx.iter().map(|&i| dataset.outcomes[i]).collect();
        out.push((DiscreteMeasure::empirical(pts)?, ys));
    }
    Ok(out)
}

fn io_err(path: &std::path::Path, message: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

/// Load a dataset from a CSV file with a header row.
///
/// `treatment_col` must hold small nonnegative integers; `outcome_col` is
/// the response; `covariate_cols` (in order) become the covariate matrix.
pub fn load_csv(
    path: &std::path::Path,
    treatment_col: &str,
    outcome_col: &str,
    covariate_cols: &[&str],
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let headers = reader.headers().map_err(|e| io_err(path, e))?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| io_err(path, format!("missing column `{name}` in header")))
    };
    let t_idx = find(treatment_col)?;
    let y_idx = find(outcome_col)?;
    let x_idx: Vec<usize> = covariate_cols
        .iter()
        .map(|c| find(c))
        .collect::<Result<_>>()?;

    let mut treatment = Vec::new();
    let mut outcomes = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io_err(path, e))?;
        let field = |i: usize| -> Result<f64> {
            record
                .get(i)
                .ok_or_else(|| io_err(path, format!("row {}: missing field", line + 2)))?
                .parse::<f64>()
                .map_err(|e| io_err(path, format!("row {}: {e}", line + 2)))
        };
        let t = field(t_idx)?;
        if t < 0.0 || t.fract() != 0.0 {
            return Err(io_err(
                path,
                format!("row {}: treatment label {t} is not a nonnegative integer", line + 2),
            ));
        }
        treatment.push(t as usize);
        outcomes.push(field(y_idx)?);
        for &i in &x_idx {
            rows.push(field(i)?);
        }
    }
    let n = treatment.len();
    let covariates = Array2::from_shape_vec((n, x_idx.len()), rows)
        .map_err(|e| io_err(path, e))?;
    Dataset::new(
        covariates,
        treatment,
        Array1::from_vec(outcomes),
        covariate_cols.iter().map(|s| s.to_string()).collect(),
    )
}

/// Column names of the NSW text layout, in file order.
pub const NSW_COLUMNS: [&str; 9] = [
    "treat",
    "age",
    "education",
    "black",
    "hispanic",
    "married",
    "nodegree",
    "re75",
    "re78",
];

/// Load the whitespace-separated NSW layout: `treat age education black
/// hispanic married nodegree re75 re78`, no header. Treatment is `treat`,
/// outcome is `re78`, the remaining seven columns are covariates.
pub fn load_nsw(path: &std::path::Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut treatment = Vec::new();
    let mut outcomes = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| io_err(path, format!("line {}: {e}", line_no + 1)))
            })
            .collect::<Result<_>>()?;
        if fields.len() != NSW_COLUMNS.len() {
            return Err(io_err(
                path,
                format!("line {}: expected 9 fields, got {}", line_no + 1, fields.len()),
            ));
        }
        let t = fields[0];
        if t != 0.0 && t != 1.0 {
            return Err(io_err(
                path,
                format!("line {}: treatment flag must be 0 or 1", line_no + 1),
            ));
        }
        treatment.push(t as usize);
        rows.extend_from_slice(&fields[1..8]);
        outcomes.push(fields[8]);
    }
    if treatment.is_empty() {
        return Err(io_err(path, "empty file"));
    }
    let n = treatment.len();
    let covariates =
        Array2::from_shape_vec((n, 7), rows).map_err(|e| io_err(path, e))?;
    Dataset::new(
        covariates,
        treatment,
        Array1::from_vec(outcomes),
        NSW_COLUMNS[1..8].iter().map(|s| s.to_string()).collect(),
    )
}
