//! Prediction error metrics and reference predictors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;

/// Root mean squared error over every entry of every row.
pub fn rmse(pred: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        sum += (p - t).norm_squared();
        count += t.len();
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok((sum / count as f64).sqrt())
}

/// RMSE of each output separately.
pub fn rmse_per_output(pred: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<Vec<f64>> {
    check_lengths(pred, truth)?;
    let m = truth.first().map_or(0, |t| t.len());
    let n = truth.len().max(1) as f64;
    Ok((0..m)
        .map(|l| {
            let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p[l] - t[l]).powi(2)).sum();
            (s / n).sqrt()
        })
        .collect())
}

fn check_lengths(pred: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::DimensionMismatch {
                expected: t.len(),
                found: p.len(),
            });
        }
    }
    Ok(())
}

/// Predicts the training mean of each output everywhere.
pub fn mean_baseline(train: &Dataset, test_xs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut mean = DVector::zeros(train.output_dim());
    for y in &train.ys {
        mean += y;
    }
    mean /= train.len().max(1) as f64;
    vec![mean; test_xs.len()]
}

/// Ordinary least squares with intercept, fitted separately for each output.
pub fn linear_baseline(train: &Dataset, test_xs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let d = train.input_dim();
    let design = |xs: &[DVector<f64>]| {
        DMatrix::from_fn(xs.len(), d + 1, |i, j| if j == 0 { 1.0 } else { xs[i][j - 1] })
    };
    let a = design(&train.xs);
    let y = train.y_matrix();
    let coef = a
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::InvalidConfig(format!("least squares failed: {e}")))?;
    let pred = design(test_xs) * coef;
    Ok((0..test_xs.len())
        .map(|i| pred.row(i).transpose())
        .collect())
}

/// Errors of the model and both baselines on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub rmse_per_output: Vec<f64>,
    pub n_test: usize,
    pub baseline_mean_rmse: f64,
    pub baseline_linear_rmse: f64,
}

pub fn evaluate(pred: &[DVector<f64>], train: &Dataset, test: &Dataset) -> Result<Metrics> {
    let mean = mean_baseline(train, &test.xs);
    let linear = linear_baseline(train, &test.xs)?;
    Ok(Metrics {
        rmse: rmse(pred, &test.ys)?,
        rmse_per_output: rmse_per_output(pred, &test.ys)?,
        n_test: test.len(),
        baseline_mean_rmse: rmse(&mean, &test.ys)?,
        baseline_linear_rmse: rmse(&linear, &test.ys)?,
    })
}
