//! Nadaraya-Watson smoothing with Gaussian product kernels.

use ndarray::Array2;

use crate::error::{Error, Result};

const UNDERFLOW: f64 = 1e-300;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Unnormalised Gaussian kernel `exp(-u^2 / 2)`.
pub fn gaussian(u: f64) -> f64 {
    (-0.5 * u * u).exp()
}

fn column_sd(x: &[f64], n: usize, d: usize, j: usize) -> f64 {
    let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
    let ss: f64 = (0..n).map(|i| (x[i * d + j] - mean).powi(2)).sum();
    let sd = (ss / (n as f64 - 1.0)).sqrt();
    // Rounding leaves a tiny positive spread on constant columns.
    if sd <= 1e-12 * mean.abs().max(1.0) {
        0.0
    } else {
        sd
    }
}

/// Rule-of-thumb bandwidth `1.06 * sd * n^(-1/(4+d))`, where `sd` averages the
/// per-coordinate standard deviations.
pub fn silverman_bandwidth(x: &[f64], n: usize, d: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Bandwidth(format!("need at least two points, got {n}")));
    }
    if d == 0 {
        return Err(Error::Bandwidth("no covariates to smooth over".into()));
    }
    let mut total = 0.0;
    for j in 0..d {
        let sd = column_sd(x, n, d, j);
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::Bandwidth(format!("covariate column {} has zero variance", j + 1)));
        }
        total += sd;
    }
    let sd = total / d as f64;
    Ok(1.06 * sd * (n as f64).powf(-1.0 / (4.0 + d as f64)))
}

/// Column centring and scaling fitted on a training set.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[f64], n: usize, d: usize) -> Result<Self> {
        let mut mean = vec![0.0; d];
        let mut sd = vec![0.0; d];
        for j in 0..d {
            mean[j] = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
            sd[j] = column_sd(x, n, d, j);
            if !(sd[j] > 0.0) {
                return Err(Error::Bandwidth(format!("column {} has zero variance", j + 1)));
            }
        }
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        x.chunks(d.max(1))
            .flat_map(|row| row.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.sd[j]))
            .collect()
    }
}

/// Dense kernel weights between query rows and training rows.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    pub rows: usize,
    pub cols: usize,
    w: Vec<f64>,
    nearest: Vec<usize>,
}

impl WeightMatrix {
    /// Weights `K(||q_i - t_m|| / h)`; inputs are row-major with `d` columns.
    pub fn build(queries: &[f64], train: &[f64], d: usize, h: f64) -> Self {
        let rows = if d == 0 { queries.len() } else { queries.len() / d };
        let cols = if d == 0 { train.len() } else { train.len() / d };
        Self::build_sized(queries, rows, train, cols, d, h)
    }

    pub fn build_sized(queries: &[f64], rows: usize, train: &[f64], cols: usize, d: usize, h: f64) -> Self {
        let mut w = vec![0.0; rows * cols];
        let mut nearest = vec![0; rows];
        let inv = 1.0 / (h * h);
        for i in 0..rows {
            let q = &queries[i * d..(i + 1) * d];
            let mut best = f64::INFINITY;
            for m in 0..cols {
                let t = &train[m * d..(m + 1) * d];
                let dist2: f64 = q.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist2 < best {
                    best = dist2;
                    nearest[i] = m;
                }
                w[i * cols + m] = (-0.5 * dist2 * inv).exp();
            }
        }
        Self { rows, cols, w, nearest }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.cols..(i + 1) * self.cols]
    }

    pub fn nearest(&self, i: usize) -> usize {
        self.nearest[i]
    }

    /// Nadaraya-Watson fit of `targets` (one per training row); rows whose weights all
    /// underflow fall back to the nearest training target. Returns the fits and the
    /// number of fallbacks.
    pub fn regress(&self, targets: &[f64]) -> (Vec<f64>, usize) {
        let mut fallbacks = 0;
        let out = (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let den: f64 = row.iter().sum();
                if den < UNDERFLOW {
                    fallbacks += 1;
                    return targets[self.nearest[i]];
                }
                row.iter().zip(targets).map(|(w, t)| w * t).sum::<f64>() / den
            })
            .collect();
        (out, fallbacks)
    }

    pub fn as_array(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.rows, self.cols), self.w.clone()).expect("shape")
    }
}

/// Fitted Nadaraya-Watson model.
#[derive(Debug, Clone)]
pub struct KernelModel {
    train: Vec<f64>,
    targets: Vec<f64>,
    d: usize,
    bandwidth: f64,
}

impl KernelModel {
    pub fn new(train: Vec<f64>, d: usize, targets: Vec<f64>, bandwidth: f64) -> Result<Self> {
        let n = targets.len();
        if n == 0 || train.len() != n * d {
            return Err(Error::Validation("kernel training set is empty or ragged".into()));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::Bandwidth(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self { train, targets, d, bandwidth })
    }

    /// Separate fit within the subsample `group == value`.
    pub fn t_learner(x: &[f64], d: usize, group: &[u8], value: u8, targets: &[f64], bandwidth: f64) -> Result<Self> {
        let idx: Vec<usize> = (0..targets.len()).filter(|&i| group[i] == value).collect();
        let train = idx.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect();
        let t = idx.iter().map(|&i| targets[i]).collect();
        Self::new(train, d, t, bandwidth)
    }

    /// Single fit on inputs augmented with an extra leading column.
    pub fn s_learner(x: &[f64], d: usize, extra: &[f64], targets: &[f64], bandwidth: f64) -> Result<Self> {
        let n = targets.len();
        let mut train = Vec::with_capacity(n * (d + 1));
        for i in 0..n {
            train.push(extra[i]);
            train.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        Self::new(train, d + 1, targets.to_vec(), bandwidth)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }
}

/// Fitted values of a kernel model at row-major `queries`.
#[derive(Debug, Clone)]
pub struct NwFit {
    pub values: Vec<f64>,
    /// Queries whose kernel mass underflowed and used the nearest neighbour.
    pub fallbacks: usize,
}

pub fn nw_regress(model: &KernelModel, queries: &[f64], n_queries: usize) -> NwFit {
    let wm = WeightMatrix::build_sized(
        queries,
        n_queries,
        &model.train,
        model.targets.len(),
        model.d,
        model.bandwidth,
    );
    let (values, fallbacks) = wm.regress(&model.targets);
    NwFit { values, fallbacks }
}

/// Kernel conditional density `f(y | x) = sum K_hx K_hy / (h_y sum K_hx)` with
/// normalised Gaussian kernels.
#[derive(Debug, Clone)]
pub struct ConditionalDensity {
    x: Vec<f64>,
    y: Vec<f64>,
    d: usize,
    pub hx: f64,
    pub hy: f64,
}

impl ConditionalDensity {
    pub fn new(x: Vec<f64>, y: Vec<f64>, d: usize, hx: f64, hy: f64) -> Result<Self> {
        if y.is_empty() || x.len() != y.len() * d {
            return Err(Error::Validation("density training set is empty or ragged".into()));
        }
        if !(hx > 0.0 && hy > 0.0) {
            return Err(Error::Bandwidth("density bandwidths must be positive".into()));
        }
        Ok(Self { x, y, d, hx, hy })
    }

    /// Rule-of-thumb bandwidths on `x` (pooled) and `y`.
    pub fn fit(x: Vec<f64>, y: Vec<f64>, d: usize, scale: f64) -> Result<Self> {
        let n = y.len();
        let hx = if d == 0 { 1.0 } else { scale * silverman_bandwidth(&x, n, d)? };
        let hy = scale * silverman_bandwidth(&y, n, 1)?;
        Self::new(x, y, d, hx, hy)
    }

    pub fn density(&self, y0: f64, x0: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for m in 0..self.y.len() {
            let t = &self.x[m * self.d..(m + 1) * self.d];
            let dist2: f64 = x0.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            let kx = (-0.5 * dist2 / (self.hx * self.hx)).exp();
            num += kx * INV_SQRT_2PI * gaussian((y0 - self.y[m]) / self.hy);
            den += kx;
        }
        if den < UNDERFLOW {
            return 0.0;
        }
        num / (self.hy * den)
    }

    /// `out[i][l] = f(y_points[l] | queries row i)`, computed as one matrix product.
    pub fn density_matrix(&self, kx: &WeightMatrix, y_points: &[f64]) -> Array2<f64> {
        let m = self.y.len();
        let ky = Array2::from_shape_fn((m, y_points.len()), |(t, l)| {
            INV_SQRT_2PI * gaussian((y_points[l] - self.y[t]) / self.hy) / self.hy
        });
        let kxa = kx.as_array();
        let mut out = kxa.dot(&ky);
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let den: f64 = kx.row(i).iter().sum();
            if den < UNDERFLOW {
                row.fill(0.0);
            } else {
                row /= den;
            }
        }
        out
    }
}
