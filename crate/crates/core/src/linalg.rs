//! Least squares via Householder QR with column-norm pivoting.

use crate::error::{Error, Result};

/// Relative threshold on |R_kk| / |R_00| below which a column is treated as
/// linearly dependent on the ones before it.
pub const SINGULARITY_TOL: f64 = 1e-10;

/// Condition estimate above which a fit is reported as near-collinear.
pub const NEAR_COLLINEAR_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct LstsqFit {
    /// One coefficient per design column, in the caller's column order.
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
    /// |R_00| / |R_pp| of the equilibrated design.
    pub condition: f64,
}

/// Solve `min ||X b - y||` where `columns[j]` is the j-th column of `X`.
pub fn lstsq(columns: &[Vec<f64>], y: &[f64]) -> Result<LstsqFit> {
    let p = columns.len();
    let n = y.len();
    if p == 0 {
        return Err(Error::InvalidParameter("design matrix has no columns".into()));
    }
    if let Some(c) = columns.iter().find(|c| c.len() != n) {
        return Err(Error::ShapeMismatch(format!("design column of length {} vs {n} targets", c.len())));
    }
    if n < p {
        return Err(Error::DegenerateFit(format!("{n} samples for {p} coefficients")));
    }

    // equilibrate so the rank test is scale-free
    let scales: Vec<f64> = columns
        .iter()
        .map(|c| {
            let s = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if s > 0.0 { s } else { 1.0 }
        })
        .collect();
    let mut a: Vec<Vec<f64>> = columns.iter().zip(&scales).map(|(c, s)| c.iter().map(|v| v / s).collect()).collect();
    let mut b = y.to_vec();
    let mut perm: Vec<usize> = (0..p).collect();
    let mut diag = vec![0.0; p];

    for k in 0..p {
        let (jmax, _) = (k..p)
            .map(|j| (j, a[j][k..].iter().map(|v| v * v).sum::<f64>()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        a.swap(k, jmax);
        perm.swap(k, jmax);

        let norm = a[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            diag[k] = 0.0;
            continue;
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv > 0.0 {
            for col in a.iter_mut().skip(k + 1) {
                let w: f64 = v.iter().zip(&col[k..]).map(|(vi, ci)| vi * ci).sum::<f64>() * 2.0 / vtv;
                col[k..].iter_mut().zip(&v).for_each(|(ci, vi)| *ci -= w * vi);
            }
            let w: f64 = v.iter().zip(&b[k..]).map(|(vi, bi)| vi * bi).sum::<f64>() * 2.0 / vtv;
            b[k..].iter_mut().zip(&v).for_each(|(bi, vi)| *bi -= w * vi);
        }
        a[k][k] = alpha;
        diag[k] = alpha;
    }

    let r00 = diag[0].abs();
    let rmin = diag.iter().map(|d| d.abs()).fold(f64::INFINITY, f64::min);
    let condition = if rmin > 0.0 { r00 / rmin } else { f64::INFINITY };
    if r00 == 0.0 || diag.iter().any(|d| d.abs() <= SINGULARITY_TOL * r00) {
        return Err(Error::CollinearPredictors { condition });
    }

    let mut z = vec![0.0; p];
    for k in (0..p).rev() {
        let s: f64 = (k + 1..p).map(|j| a[j][k] * z[j]).sum();
        z[k] = (b[k] - s) / diag[k];
    }
    let mut coefficients = vec![0.0; p];
    for k in 0..p {
        coefficients[perm[k]] = z[k] / scales[perm[k]];
    }
    let fitted = (0..n)
        .map(|i| columns.iter().zip(&coefficients).map(|(c, w)| c[i] * w).sum())
        .collect();
    Ok(LstsqFit { coefficients, fitted, condition })
}

/// Ordinary least squares with an intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub fitted: Vec<f64>,
    pub condition: f64,
}

impl OlsFit {
    /// A stored model with no training diagnostics.
    pub fn with(weights: Vec<f64>, intercept: f64) -> Self {
        Self { weights, intercept, fitted: Vec::new(), condition: 1.0 }
    }

    pub fn line(slope: f64, intercept: f64) -> Self {
        Self::with(vec![slope], intercept)
    }

    /// Summed in design-column order, so in-sample predictions equal `fitted` bit for bit.
    pub fn predict(&self, x: &[f64]) -> f64 {
        std::iter::once(self.intercept).chain(self.weights.iter().zip(x).map(|(w, v)| v * w)).sum()
    }

    pub fn near_collinear(&self) -> bool {
        self.condition > NEAR_COLLINEAR_CONDITION
    }
}

/// `y ~ intercept + sum_j w_j * predictors[j]`.
pub fn ols(predictors: &[Vec<f64>], y: &[f64]) -> Result<OlsFit> {
    let mut columns = Vec::with_capacity(predictors.len() + 1);
    columns.push(vec![1.0; y.len()]);
    columns.extend(predictors.iter().cloned());
    let fit = lstsq(&columns, y)?;
    Ok(OlsFit {
        intercept: fit.coefficients[0],
        weights: fit.coefficients[1..].to_vec(),
        fitted: fit.fitted,
        condition: fit.condition,
    })
}

/// Straight line `y = slope * x + intercept`; fails when all `x` are equal.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch("x and y lengths differ".into()));
    }
    if x.len() < 2 {
        return Err(Error::DegenerateFit(format!("{} points for a line", x.len())));
    }
    let first = x[0];
    if x.iter().all(|v| *v == first) {
        return Err(Error::DegenerateFit("all predictor values are equal".into()));
    }
    match ols(&[x.to_vec()], y) {
        Ok(f) => Ok((f.weights[0], f.intercept)),
        Err(Error::CollinearPredictors { .. }) => Err(Error::DegenerateFit("predictor is (numerically) constant".into())),
        Err(e) => Err(e),
    }
}
