//! Dense symmetric-positive-definite linear algebra and Kronecker assembly.
//!
//! Every covariance in the model is factored through [`chol_spd`], which walks a
//! [`JitterSchedule`] before giving up. The factor remembers the jitter it needed so
//! callers can apply the same nugget when they extend the matrix later.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative diagonal jitters tried in order, scaled by the mean of the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterSchedule {
    pub relative: Vec<f64>,
}

impl Default for JitterSchedule {
    fn default() -> Self {
        Self {
            relative: vec![0.0, 1e-10, 1e-8, 1e-6],
        }
    }
}

impl JitterSchedule {
    /// A schedule that never adds jitter.
    pub fn exact() -> Self {
        Self { relative: vec![0.0] }
    }
}

/// Lower Cholesky factor of `A + jitter * I`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Absolute jitter that was added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub(crate) fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub(crate) fn from_parts(chol: Cholesky<f64, Dyn>, jitter: f64) -> Self {
        Self { chol, jitter }
    }

    /// `L^{-1} b` for a single vector.
    pub fn forward(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: b.len(),
            });
        }
        Ok(self.chol.solve(b))
    }

    /// `bᵀ A^{-1} b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        self.forward(b).norm_squared()
    }

    /// Diagonal entry `p` of the inverse, `‖L^{-1} e_p‖²`.
    pub fn inverse_diag_entry(&self, p: usize) -> f64 {
        let n = self.dim();
        let l = self.chol.l_dirty();
        // Forward substitution on e_p only touches rows p.. .
        let mut v = vec![0.0; n];
        v[p] = 1.0 / l[(p, p)];
        let mut acc = v[p] * v[p];
        for i in (p + 1)..n {
            let mut s = 0.0;
            for j in p..i {
                s += l[(i, j)] * v[j];
            }
            v[i] = -s / l[(i, i)];
            acc += v[i] * v[i];
        }
        acc
    }
}

fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    let scale = a.amax().max(1.0);
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// Cholesky factorization with a jitter fallback.
///
/// Tries `A + ε·mean(diag(A))·I` for each ε in the schedule and returns the first
/// success. Fails with [`Error::NotPositiveDefinite`] once the schedule is exhausted.
pub fn chol_spd(a: &DMatrix<f64>, schedule: &JitterSchedule) -> Result<SpdFactor> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    if !is_symmetric(a, 1e-9) {
        return Err(Error::NotSymmetric);
    }
    let n = a.nrows();
    if n == 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: 0,
        });
    }
    let mean_diag = a.diagonal().mean();
    let scale = if mean_diag.is_finite() && mean_diag > 0.0 {
        mean_diag
    } else {
        1.0
    };
    for &eps in &schedule.relative {
        let jitter = eps * scale;
        let mut m = a.clone();
        if jitter > 0.0 {
            for i in 0..n {
                m[(i, i)] += jitter;
            }
        }
        if let Some(chol) = m.cholesky() {
            if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(SpdFactor { chol, jitter });
            }
        }
    }
    Err(Error::NotPositiveDefinite { dim: n })
}

/// `ln |A|` from its factor.
pub fn logdet(f: &SpdFactor) -> f64 {
    2.0 * f.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Solves `A X = B`.
pub fn solve(f: &SpdFactor, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != f.dim() {
        return Err(Error::DimensionMismatch {
            expected: f.dim(),
            found: b.nrows(),
        });
    }
    Ok(f.chol.solve(b))
}

/// Kronecker product `A ⊗ B`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// `Tr[(A^{-1} - A^{-1} y yᵀ A^{-1}) G]` using solves against the columns of `G`.
pub fn trace_prod(f: &SpdFactor, y: &DVector<f64>, g: &DMatrix<f64>) -> Result<f64> {
    let n = f.dim();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: y.len(),
        });
    }
    if g.nrows() != n || g.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: g.nrows().max(g.ncols()),
        });
    }
    let ainv_g = f.chol.solve(g);
    let tr = ainv_g.trace();
    let a = f.chol.solve(y);
    let correction = a.dot(&(g * &a));
    Ok(tr - correction)
}
