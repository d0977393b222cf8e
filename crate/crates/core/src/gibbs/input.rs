//! Conjugate updates for a component's input mean and precision.

use nalgebra::{DMatrix, DVector};

use crate::distributions::{mvn_sample, symmetrize, wishart_sample, SeededRng};
use crate::error::{Error, Result};
use crate::linalg::{chol_spd, JitterSchedule};
use crate::model::Hyperparams;

/// Mean and precision of `μ_r | x's, R_r`.
pub fn mu_posterior(
    xs: &[DVector<f64>],
    r: &DMatrix<f64>,
    hp: &Hyperparams,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = hp.input_dim();
    let mut sum = DVector::zeros(d);
    for x in xs {
        sum += x;
    }
    let mut precision = &hp.r0 + r * xs.len() as f64;
    symmetrize(&mut precision);
    let rhs = &hp.r0 * &hp.mu0 + r * sum;
    let f = chol_spd(&precision, &JitterSchedule::default())?;
    let mean = f.solve_vec(&rhs)?;
    Ok((mean, precision))
}

/// Scale matrix and degrees of freedom of `R_r | x's, μ_r`.
pub fn r_posterior(
    xs: &[DVector<f64>],
    mu: &DVector<f64>,
    hp: &Hyperparams,
) -> Result<(DMatrix<f64>, f64)> {
    let d = hp.input_dim();
    let w0_inv = hp
        .w0
        .clone()
        .try_inverse()
        .ok_or(Error::NotPositiveDefinite { dim: d })?;
    let mut scatter = DMatrix::zeros(d, d);
    for x in xs {
        let e = x - mu;
        scatter += &e * e.transpose();
    }
    let mut inner = w0_inv + scatter;
    symmetrize(&mut inner);
    let mut scale = inner
        .try_inverse()
        .ok_or(Error::NotPositiveDefinite { dim: d })?;
    symmetrize(&mut scale);
    Ok((scale, hp.nu0 + xs.len() as f64))
}

pub fn posterior_mu(
    xs: &[DVector<f64>],
    r: &DMatrix<f64>,
    hp: &Hyperparams,
    rng: &mut SeededRng,
) -> Result<DVector<f64>> {
    let (mean, precision) = mu_posterior(xs, r, hp)?;
    mvn_sample(&mean, &precision, rng)
}

pub fn posterior_r(
    xs: &[DVector<f64>],
    mu: &DVector<f64>,
    hp: &Hyperparams,
    rng: &mut SeededRng,
) -> Result<DMatrix<f64>> {
    let (scale, dof) = r_posterior(xs, mu, hp)?;
    wishart_sample(&scale, dof, rng)
}
