//! Balanced soft assignment of features to prototypes by entropic
//! optimal transport (Sinkhorn-Knopp scaling).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer size");
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (acc, v) in s.iter_mut().zip(self.row(i)) {
                *acc += v;
            }
        }
        s
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Matrix {
        Matrix::new(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Maximum number of column/row scaling rounds.
    pub iterations: usize,
    /// Entropy regularizer; scores are divided by it before exponentiation.
    pub epsilon: f64,
    /// Stop early once the column-marginal residual falls below this.
    pub tolerance: Option<f64>,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            epsilon: 0.05,
            tolerance: None,
        }
    }
}

/// Row-stochastic `N × K` assignment with (approximately) equal column mass.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub q: Matrix,
    /// `max_k |Σ_i q[i,k] − N/K|` of the returned iterate.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn column_residual(q: &Matrix) -> f64 {
    let target = q.rows as f64 / q.cols as f64;
    q.col_sums()
        .into_iter()
        .map(|c| (c - target).abs())
        .fold(0.0, f64::max)
}

/// Scales `exp(scores / ε)` towards uniform marginals: every row `1/N`,
/// every column `1/K`, then rescales rows to sum to one. Each round ends
/// with the row step, so rows are exactly stochastic and the column residual
/// measures convergence.
pub fn sinkhorn(scores: &Matrix, cfg: &SinkhornConfig) -> Result<ClusterAssignment> {
    let (n, k) = (scores.rows, scores.cols);
    if n == 0 || k == 0 {
        return Err(Error::config("sinkhorn needs at least one row and one column"));
    }
    if cfg.iterations == 0 {
        return Err(Error::config("sinkhorn needs at least one iteration"));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::config("sinkhorn regularizer must be positive"));
    }
    let max = scores.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NumericalFailure {
            layer: "sinkhorn scores".into(),
        });
    }
    let mut q: Vec<f64> = scores
        .data
        .iter()
        .map(|s| ((s - max) / cfg.epsilon).exp())
        .collect();
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= total);

    let mut q = Matrix::new(n, k, q);
    let mut done = 0;
    for it in 0..cfg.iterations {
        let cols = q.col_sums();
        for i in 0..n {
            for j in 0..k {
                q.data[i * k + j] /= cols[j].max(f64::MIN_POSITIVE) * k as f64;
            }
        }
        let rows = q.row_sums();
        for (i, r) in rows.iter().enumerate() {
            let scale = r.max(f64::MIN_POSITIVE) * n as f64;
            for v in &mut q.data[i * k..(i + 1) * k] {
                *v /= scale;
            }
        }
        done = it + 1;
        if let Some(tol) = cfg.tolerance {
            // Rows sum to 1/N here; compare columns on the N/K scale of the
            // rescaled output.
            let target = n as f64 / k as f64;
            let worst = q
                .col_sums()
                .into_iter()
                .map(|c| (c * n as f64 - target).abs())
                .fold(0.0, f64::max);
            if worst <= tol {
                break;
            }
        }
    }
    q.data.iter_mut().for_each(|v| *v *= n as f64);
    let residual = column_residual(&q);
    let converged = cfg.tolerance.is_some_and(|tol| residual <= tol);
    if let Some(tol) = cfg.tolerance {
        if !converged {
            log::warn!(
                "sinkhorn stopped after {done} iterations with column residual {residual:.3e} (tolerance {tol:.1e})"
            );
        }
    }
    Ok(ClusterAssignment {
        q,
        residual,
        iterations: done,
        converged,
    })
}
