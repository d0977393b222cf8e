//! Seeded samplers and log-densities for the priors of the model.
//!
//! Parameterizations: `Gamma(a, b)` has mean `a / b` (shape/rate), `Wishart(W, ν)` has
//! mean `ν W`, the log-normal is specified by the mean and variance of `ln w`, and the
//! multivariate normal takes a precision matrix.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{chol_spd, logdet, JitterSchedule, SpdFactor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// The crate's random stream: ChaCha8 seeded from a `u64`.
///
/// `SeededRng::new(seed)` uses ChaCha stream 0. [`SeededRng::stream`] selects one of the
/// 2⁶⁴ independent ChaCha streams for the same seed, and [`SeededRng::fork`] seeds a
/// child generator from the next `u64` of the parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn fork(&mut self) -> Self {
        Self::new(self.inner.next_u64())
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Precision-parameterized Gaussian with its normalizer cached.
#[derive(Debug, Clone)]
pub struct GaussianPrecision {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianPrecision {
    pub fn new(mean: &DVector<f64>, precision: &DMatrix<f64>) -> Result<Self> {
        if precision.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: precision.nrows(),
            });
        }
        let f = chol_spd(precision, &JitterSchedule::exact())?;
        let d = mean.len() as f64;
        Ok(Self {
            mean: mean.clone(),
            precision: precision.clone(),
            log_norm: 0.5 * logdet(&f) - 0.5 * d * LN_2PI,
        })
    }

    pub fn logpdf(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        self.log_norm - 0.5 * diff.dot(&(&self.precision * &diff))
    }
}

/// Draws from `N(mean, precision^{-1})`.
pub fn mvn_sample<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    precision: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if precision.nrows() != mean.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            found: precision.nrows(),
        });
    }
    let f = chol_spd(precision, &JitterSchedule::default())?;
    let z = DVector::from_fn(mean.len(), |_, _| standard_normal(rng));
    // P = L Lᵀ, so L^{-T} z has covariance P^{-1}.
    let mut v = z;
    f.cholesky().l_dirty().tr_solve_lower_triangular_mut(&mut v);
    Ok(mean + v)
}

/// Draws from `N(mean, Σ)` given a factor of `Σ`.
pub fn mvn_sample_cov<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &SpdFactor,
    rng: &mut R,
) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| standard_normal(rng));
    mean + cov.cholesky().l_dirty().lower_triangle() * z
}

pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, precision: &DMatrix<f64>) -> Result<f64> {
    if x.len() != mean.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            found: x.len(),
        });
    }
    Ok(GaussianPrecision::new(mean, precision)?.logpdf(x))
}

/// Log density of `N(mean, Σ)` given a factor of `Σ`.
pub fn mvn_logpdf_cov(x: &DVector<f64>, mean: &DVector<f64>, cov: &SpdFactor) -> f64 {
    let diff = x - mean;
    -0.5 * (x.len() as f64 * LN_2PI + logdet(cov) + cov.quad_form(&diff))
}

/// Bartlett-construction draw from `Wishart(scale, dof)` with mean `dof * scale`.
pub fn wishart_sample<R: Rng + ?Sized>(
    scale: &DMatrix<f64>,
    dof: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let dim = scale.nrows();
    if dof < dim as f64 || !dof.is_finite() {
        return Err(Error::DofTooSmall { dof, dim });
    }
    let f = chol_spd(scale, &JitterSchedule::exact())?;
    let mut a = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let chi = ChiSquared::new(dof - i as f64).expect("positive degrees of freedom");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = standard_normal(rng);
        }
    }
    let la = f.cholesky().l_dirty().lower_triangle() * a;
    let mut x = &la * la.transpose();
    symmetrize(&mut x);
    Ok(x)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `ln Γ_D(a)`.
pub fn ln_multigamma(dim: usize, a: f64) -> f64 {
    let d = dim as f64;
    d * (d - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (1..=dim).map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0)).sum::<f64>()
}

pub fn wishart_logpdf(x: &DMatrix<f64>, scale: &DMatrix<f64>, dof: f64) -> Result<f64> {
    let dim = scale.nrows();
    if x.nrows() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: x.nrows(),
        });
    }
    let d = dim as f64;
    let fs = chol_spd(scale, &JitterSchedule::exact())?;
    let fx = chol_spd(x, &JitterSchedule::exact())?;
    let tr = fs.cholesky().solve(x).trace();
    Ok(0.5 * (dof - d - 1.0) * logdet(&fx) - 0.5 * tr
        - 0.5 * dof * d * std::f64::consts::LN_2
        - 0.5 * dof * logdet(&fs)
        - ln_multigamma(dim, 0.5 * dof))
}

fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveParameter { name, value })
    }
}

/// Gamma draw with shape `a` and rate `b`. Underflow is clamped to the smallest
/// positive normal so the result stays in the support.
pub fn gamma_sample<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    check_positive("shape", a)?;
    check_positive("rate", b)?;
    let g = Gamma::new(a, 1.0 / b).expect("validated parameters");
    Ok(g.sample(rng).max(f64::MIN_POSITIVE))
}

pub fn gamma_logpdf(x: f64, a: f64, b: f64) -> Result<f64> {
    check_positive("shape", a)?;
    check_positive("rate", b)?;
    check_positive("x", x)?;
    Ok(a * b.ln() - ln_gamma(a) + (a - 1.0) * x.ln() - b * x)
}

/// Log-normal draw: `ln w ~ N(mu, var)`.
pub fn lognormal_sample<R: Rng + ?Sized>(mu: f64, var: f64, rng: &mut R) -> Result<f64> {
    if !(var > 0.0) {
        return Err(Error::NonPositiveVariance(var));
    }
    Ok((mu + var.sqrt() * standard_normal(rng)).exp())
}

pub fn lognormal_logpdf(w: f64, mu: f64, var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(Error::NonPositiveVariance(var));
    }
    check_positive("w", w)?;
    let lw = w.ln();
    Ok(-lw - 0.5 * (LN_2PI + var.ln()) - (lw - mu).powi(2) / (2.0 * var))
}

pub const STIRLING_EXACT_MAX: usize = 30;

/// Unsigned Stirling numbers of the first kind `[β^N_1, …, β^N_N]`, exact for
/// `1 ≤ N ≤ 30`.
pub fn stirling_unsigned(n: usize) -> Result<Vec<u128>> {
    if n == 0 || n > STIRLING_EXACT_MAX {
        return Err(Error::OutOfRange {
            what: "N",
            value: n,
        });
    }
    // row[c] holds β^k_c for c = 0..=k
    let mut row = vec![1u128];
    for k in 1..=n {
        let mut next = vec![0u128; k + 1];
        for c in 1..=k {
            let carry = if c - 1 < row.len() { row[c - 1] } else { 0 };
            let stay = if c < row.len() { row[c] } else { 0 };
            next[c] = carry + (k as u128 - 1) * stay;
        }
        row = next;
    }
    Ok(row[1..].to_vec())
}

/// `ln β^N_c` for `c = 1..=N`, computed in log space for any `N ≥ 1`.
pub fn ln_stirling_unsigned(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::OutOfRange {
            what: "N",
            value: n,
        });
    }
    let mut row = vec![0.0f64];
    for k in 1..=n {
        let mut next = vec![f64::NEG_INFINITY; k + 1];
        for c in 1..=k {
            let carry = row.get(c - 1).copied().unwrap_or(f64::NEG_INFINITY);
            let stay = row.get(c).copied().unwrap_or(f64::NEG_INFINITY) + ((k - 1) as f64).ln();
            next[c] = log_add_exp(carry, stay);
        }
        row = next;
    }
    Ok(row[1..].to_vec())
}

/// `ln p(c | α, N)` for the number of occupied clusters of a CRP.
pub fn ln_cluster_count_pmf(c: usize, alpha: f64, n: usize) -> Result<f64> {
    if c == 0 || c > n {
        return Err(Error::OutOfRange {
            what: "c",
            value: c,
        });
    }
    let ln_beta = ln_stirling_unsigned(n)?[c - 1];
    Ok(ln_beta + c as f64 * alpha.ln() + ln_gamma(alpha) - ln_gamma(n as f64 + alpha))
}

pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalizes log weights into probabilities.
pub fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_w);
    log_w.iter().map(|w| (w - lse).exp()).collect()
}

/// Draws an index with probability proportional to `exp(log_w)`.
pub fn sample_log_categorical<R: Rng + ?Sized>(log_w: &[f64], rng: &mut R) -> usize {
    let probs = normalize_log_weights(log_w);
    let total: f64 = probs.iter().sum();
    assert!(total > 0.0 && total.is_finite(), "categorical weights vanish");
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}
