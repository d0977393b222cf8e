//! Generative model types and covariance constructions.
//!
//! Outputs of a component are stacked output-major everywhere: for `N_r` points and `M`
//! outputs the stacked vector is `(y_1^1, …, y_1^{N_r}, y_2^1, …, y_M^{N_r})`, so entry
//! `(ℓ, i)` lives at index `ℓ·N_r + i`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    gamma_logpdf, gamma_sample, lognormal_logpdf, lognormal_sample, mvn_logpdf, mvn_sample,
    wishart_logpdf, wishart_sample,
};
use crate::error::{Error, Result};
use crate::linalg::{chol_spd, kron, logdet, JitterSchedule};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Fixed top-level prior parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Gamma prior on the concentration α.
    pub a0: f64,
    pub b0: f64,
    /// Gaussian prior on component input means.
    pub mu0: DVector<f64>,
    pub r0: DMatrix<f64>,
    /// Wishart prior on component input precisions.
    pub w0: DMatrix<f64>,
    pub nu0: f64,
    /// Gamma prior on the GP scale σ_r0.
    pub a1: f64,
    pub b1: f64,
    /// Wishart prior on the inter-task matrix.
    pub w1: DMatrix<f64>,
    pub nu1: f64,
    /// Log-normal prior on ARD weights (mean and variance of `ln w`).
    pub mu1: f64,
    pub r1: f64,
    /// Gamma prior on per-output noise variances.
    pub a2: f64,
    pub b2: f64,
}

impl Hyperparams {
    pub fn input_dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn output_dim(&self) -> usize {
        self.w1.nrows()
    }

    /// Settings used to generate the synthetic benchmark.
    pub fn generation_preset(d: usize, m: usize) -> Self {
        Self {
            a0: 1.0,
            b0: 1.0,
            mu0: DVector::zeros(d),
            r0: DMatrix::identity(d, d) / 10.0,
            w0: DMatrix::identity(d, d) / (10.0 * d as f64),
            nu0: d as f64,
            a1: 1.0,
            b1: 1.0,
            w1: DMatrix::identity(m, m) / m as f64,
            nu1: m as f64,
            mu1: 0.0,
            r1: 0.01,
            a2: 0.1,
            b2: 1.0,
        }
    }

    /// Generation settings with the input priors centered on the training inputs:
    /// `μ0` is their mean, `R0` their inverse covariance and `W0 = R0 / D`.
    ///
    /// Falls back to the identity covariance when the sample covariance is singular
    /// (fewer rows than input dimensions, or duplicated inputs).
    pub fn inference_preset(data: &Dataset) -> Result<Self> {
        let (d, m) = (data.input_dim(), data.output_dim());
        let mut hp = Self::generation_preset(d, m);
        let n = data.len() as f64;
        let mut mean = DVector::zeros(d);
        for x in &data.xs {
            mean += x;
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for x in &data.xs {
            let c = x - &mean;
            cov += &c * c.transpose();
        }
        cov /= n;
        let precision = match chol_spd(&cov, &JitterSchedule::exact()) {
            Ok(f) if data.len() > d => f.cholesky().inverse(),
            _ => DMatrix::identity(d, d),
        };
        let mut precision = precision;
        crate::distributions::symmetrize(&mut precision);
        hp.mu0 = mean;
        hp.w0 = &precision / d as f64;
        hp.r0 = precision;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.input_dim();
        let m = self.output_dim();
        let positive = [
            ("a0", self.a0),
            ("b0", self.b0),
            ("a1", self.a1),
            ("b1", self.b1),
            ("r1", self.r1),
            ("a2", self.a2),
            ("b2", self.b2),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.mu1.is_finite() || self.mu0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite prior mean".into()));
        }
        for (name, mat, dim) in [("R0", &self.r0, d), ("W0", &self.w0, d), ("W1", &self.w1, m)] {
            if mat.nrows() != dim || mat.ncols() != dim {
                return Err(Error::InvalidConfig(format!("{name} must be {dim}x{dim}")));
            }
            chol_spd(mat, &JitterSchedule::exact())
                .map_err(|_| Error::InvalidConfig(format!("{name} is not positive definite")))?;
        }
        if self.nu0 < d as f64 {
            return Err(Error::InvalidConfig(format!("nu0 must be >= {d}")));
        }
        if self.nu1 < m as f64 {
            return Err(Error::InvalidConfig(format!("nu1 must be >= {m}")));
        }
        Ok(())
    }
}

/// Per-component parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// Input mean.
    pub mu: DVector<f64>,
    /// Input precision.
    pub r: DMatrix<f64>,
    /// GP scale.
    pub sigma0: f64,
    /// Inter-task matrix (M×M).
    pub k: DMatrix<f64>,
    /// ARD weights, one per input dimension.
    pub w: DVector<f64>,
    /// Noise variance per output.
    pub noise: DVector<f64>,
}

impl Component {
    pub fn input_dim(&self) -> usize {
        self.mu.len()
    }

    pub fn output_dim(&self) -> usize {
        self.noise.len()
    }

    /// Draws every parameter from its prior.
    pub fn sample_prior<R: Rng + ?Sized>(hp: &Hyperparams, rng: &mut R) -> Result<Self> {
        let mu = mvn_sample(&hp.mu0, &hp.r0, rng)?;
        let r = wishart_sample(&hp.w0, hp.nu0, rng)?;
        let sigma0 = gamma_sample(hp.a1, hp.b1, rng)?;
        let k = wishart_sample(&hp.w1, hp.nu1, rng)?;
        let w = (0..hp.input_dim())
            .map(|_| lognormal_sample(hp.mu1, hp.r1, rng))
            .collect::<Result<Vec<_>>>()?;
        let noise = (0..hp.output_dim())
            .map(|_| gamma_sample(hp.a2, hp.b2, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mu,
            r,
            sigma0,
            k,
            w: DVector::from_vec(w),
            noise: DVector::from_vec(noise),
        })
    }

    /// Log prior density of all parameters.
    pub fn log_prior(&self, hp: &Hyperparams) -> Result<f64> {
        let mut lp = mvn_logpdf(&self.mu, &hp.mu0, &hp.r0)?;
        lp += wishart_logpdf(&self.r, &hp.w0, hp.nu0)?;
        lp += gamma_logpdf(self.sigma0, hp.a1, hp.b1)?;
        lp += wishart_logpdf(&self.k, &hp.w1, hp.nu1)?;
        for w in self.w.iter() {
            lp += lognormal_logpdf(*w, hp.mu1, hp.r1)?;
        }
        for s in self.noise.iter() {
            lp += gamma_logpdf(*s, hp.a2, hp.b2)?;
        }
        Ok(lp)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.output_dim();
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("component: {msg}")));
        if !(self.sigma0 > 0.0) {
            return bad("sigma0 must be positive");
        }
        if self.w.iter().any(|v| !(*v > 0.0)) || self.noise.iter().any(|v| !(*v > 0.0)) {
            return bad("weights and noise must be positive");
        }
        if self.k.nrows() != m || self.k.ncols() != m {
            return bad("K has the wrong shape");
        }
        if (&self.k - self.k.transpose()).amax() > 1e-9 * self.k.amax().max(1.0) {
            return bad("K is not symmetric");
        }
        let min_eig = self.k.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-8 * self.k.trace() / m as f64 {
            return bad("K is not positive semi-definite");
        }
        Ok(())
    }
}

/// Identifier of a live mixture component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentId(pub u32);

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Assignments, live components and the concentration parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    pub alpha: f64,
    pub assignments: Vec<ComponentId>,
    pub components: BTreeMap<ComponentId, Component>,
    next_id: u32,
}

impl MixtureState {
    pub fn new(
        alpha: f64,
        assignments: Vec<ComponentId>,
        components: BTreeMap<ComponentId, Component>,
    ) -> Self {
        let next_id = components.keys().next_back().map_or(0, |id| id.0 + 1);
        Self {
            alpha,
            assignments,
            components,
            next_id,
        }
    }

    /// Draws α, a CRP partition of `n` points and component parameters from the priors.
    pub fn sample_prior<R: Rng + ?Sized>(n: usize, hp: &Hyperparams, rng: &mut R) -> Result<Self> {
        let alpha = gamma_sample(hp.a0, hp.b0, rng)?;
        let mut state = Self::new(alpha, Vec::with_capacity(n), BTreeMap::new());
        let mut counts: Vec<(ComponentId, usize)> = Vec::new();
        for i in 0..n {
            let u = rng.random::<f64>() * (i as f64 + alpha);
            let mut acc = 0.0;
            let mut chosen = None;
            for (id, c) in counts.iter_mut() {
                acc += *c as f64;
                if u < acc {
                    *c += 1;
                    chosen = Some(*id);
                    break;
                }
            }
            let id = match chosen {
                Some(id) => id,
                None => {
                    let id = state.insert(Component::sample_prior(hp, rng)?);
                    counts.push((id, 1));
                    id
                }
            };
            state.assignments.push(id);
        }
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// Adds a component under a fresh id.
    pub fn insert(&mut self, c: Component) -> ComponentId {
        let id = ComponentId(self.next_id);
        self.next_id += 1;
        self.components.insert(id, c);
        id
    }

    /// Data indices assigned to `id`, in increasing order.
    pub fn members(&self, id: ComponentId) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, z)| **z == id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn counts(&self) -> BTreeMap<ComponentId, usize> {
        let mut out: BTreeMap<ComponentId, usize> = self.components.keys().map(|k| (*k, 0)).collect();
        for z in &self.assignments {
            *out.entry(*z).or_insert(0) += 1;
        }
        out
    }

    /// Removes components that no data point references.
    pub fn prune_empty(&mut self) {
        let counts = self.counts();
        self.components.retain(|id, _| counts.get(id).copied().unwrap_or(0) > 0);
    }

    pub fn check_invariants(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha = {}", self.alpha)));
        }
        for z in &self.assignments {
            if !self.components.contains_key(z) {
                return Err(Error::InvalidConfig(format!("assignment to missing component {z}")));
            }
        }
        for (id, n) in self.counts() {
            if n == 0 {
                return Err(Error::InvalidConfig(format!("component {id} is empty")));
            }
        }
        Ok(())
    }
}

/// `N` paired rows `(x ∈ ℝ^D, y ∈ ℝ^M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub xs: Vec<DVector<f64>>,
    pub ys: Vec<DVector<f64>>,
    d: usize,
    m: usize,
}

impl Dataset {
    pub fn new(xs: Vec<DVector<f64>>, ys: Vec<DVector<f64>>, d: usize, m: usize) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::LengthMismatch {
                left: xs.len(),
                right: ys.len(),
            });
        }
        for (x, y) in xs.iter().zip(&ys) {
            if x.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: x.len(),
                });
            }
            if y.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    found: y.len(),
                });
            }
            if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("dataset contains non-finite values".into()));
            }
        }
        Ok(Self { xs, ys, d, m })
    }

    /// Builds a dataset from `N×D` and `N×M` matrices.
    pub fn from_matrices(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        let xs = x.row_iter().map(|r| r.transpose()).collect();
        let ys = y.row_iter().map(|r| r.transpose()).collect();
        Self::new(xs, ys, x.ncols(), y.ncols())
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn output_dim(&self) -> usize {
        self.m
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            xs: rows.iter().map(|i| self.xs[*i].clone()).collect(),
            ys: rows.iter().map(|i| self.ys[*i].clone()).collect(),
            d: self.d,
            m: self.m,
        }
    }

    pub fn y_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.m, |i, j| self.ys[i][j])
    }

    pub fn x_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.d, |i, j| self.xs[i][j])
    }
}

#[inline]
pub(crate) fn kernel_unchecked(x: &[f64], x2: &[f64], w: &[f64]) -> f64 {
    let mut s = 0.0;
    for d in 0..w.len() {
        let t = w[d] * (x[d] - x2[d]);
        s += t * t;
    }
    (-0.5 * s).exp()
}

/// ARD squared-exponential kernel `exp(-½ Σ_d w_d² (x_d - x'_d)²)`.
pub fn kernel(x: &DVector<f64>, x2: &DVector<f64>, w: &DVector<f64>) -> Result<f64> {
    if x.len() != w.len() || x2.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            found: if x.len() != w.len() { x.len() } else { x2.len() },
        });
    }
    Ok(kernel_unchecked(x.as_slice(), x2.as_slice(), w.as_slice()))
}

pub fn kernel_matrix(xr: &[DVector<f64>], w: &DVector<f64>) -> DMatrix<f64> {
    let n = xr.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let v = kernel_unchecked(xr[i].as_slice(), xr[j].as_slice(), w.as_slice());
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

pub fn cross_kernel(xstar: &DVector<f64>, xr: &[DVector<f64>], w: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        xr.len(),
        xr.iter()
            .map(|x| kernel_unchecked(xstar.as_slice(), x.as_slice(), w.as_slice())),
    )
}

/// `σ0·(K ⊗ K^x) + diag(noise) ⊗ I`, in output-major order.
pub fn assemble_sigma(c: &Component, xr: &[DVector<f64>]) -> DMatrix<f64> {
    let n = xr.len();
    let kx = kernel_matrix(xr, &c.w);
    let mut sigma = kron(&c.k, &kx) * c.sigma0;
    for l in 0..c.output_dim() {
        for i in 0..n {
            sigma[(l * n + i, l * n + i)] += c.noise[l];
        }
    }
    crate::distributions::symmetrize(&mut sigma);
    sigma
}

/// Output-major stacking of per-point output vectors.
pub fn stack_outputs(ys: &[DVector<f64>]) -> DVector<f64> {
    let n = ys.len();
    let m = ys.first().map_or(0, |y| y.len());
    DVector::from_fn(n * m, |idx, _| ys[idx % n][idx / n])
}

/// Inverse of [`stack_outputs`].
pub fn unstack_outputs(stacked: &DVector<f64>, m: usize) -> Vec<DVector<f64>> {
    let n = if m == 0 { 0 } else { stacked.len() / m };
    (0..n)
        .map(|i| DVector::from_fn(m, |l, _| stacked[l * n + i]))
        .collect()
}

/// `ln N(y_r | 0, Σ)` with Σ from [`assemble_sigma`]; zero for an empty component.
pub fn log_marginal_y(c: &Component, xr: &[DVector<f64>], yr: &DVector<f64>) -> Result<f64> {
    if xr.is_empty() {
        return Ok(0.0);
    }
    let dim = xr.len() * c.output_dim();
    if yr.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: yr.len(),
        });
    }
    let sigma = assemble_sigma(c, xr);
    let f = chol_spd(&sigma, &JitterSchedule::default())?;
    Ok(-0.5 * (dim as f64 * LN_2PI + logdet(&f) + f.quad_form(yr)))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::Rng;
    use crate::distributions::SeededRng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    pub(crate) fn random_component(d: usize, m: usize, rng: &mut SeededRng) -> Component {
        let mut hp = Hyperparams::generation_preset(d, m);
        hp.a2 = 2.0;
        hp.b2 = 4.0;
        hp.r1 = 0.2;
        Component::sample_prior(&hp, rng).unwrap()
    }

    pub(crate) fn random_points(n: usize, d: usize, rng: &mut SeededRng) -> Vec<DVector<f64>> {
        (0..n)
            .map(|_| DVector::from_fn(d, |_, _| rng.random::<f64>() * 4.0 - 2.0))
            .collect()
    }

    #[test]
    fn kernel_values() {
        let x = DVector::from_vec(vec![0.3, -1.0]);
        let w = DVector::from_vec(vec![2.0, 0.5]);
        assert_eq!(kernel(&x, &x, &w).unwrap(), 1.0);
        let x2 = DVector::from_vec(vec![5.0, 7.0]);
        assert_eq!(kernel(&x, &x2, &DVector::zeros(2)).unwrap(), 1.0);
        let k = kernel(
            &DVector::from_vec(vec![0.0]),
            &DVector::from_vec(vec![1.0]),
            &DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        assert_relative_eq!(k, (-0.5f64).exp(), epsilon = 1e-15);
        assert!(kernel(&x, &DVector::zeros(3), &w).is_err());
    }

    #[test]
    fn kernel_matrix_cases() {
        let w = DVector::from_vec(vec![1.0, 1.0]);
        let one = vec![DVector::from_vec(vec![0.2, 0.1])];
        assert_eq!(kernel_matrix(&one, &w), DMatrix::from_element(1, 1, 1.0));
        let two = vec![one[0].clone(), one[0].clone()];
        assert_eq!(kernel_matrix(&two, &w), DMatrix::from_element(2, 2, 1.0));

        let mut rng = SeededRng::new(1);
        let pts = random_points(5, 2, &mut rng);
        let kx = kernel_matrix(&pts, &w);
        assert!(kx.clone().symmetric_eigen().eigenvalues.min() >= -1e-10);
        let cross = cross_kernel(&pts[0], &pts, &w);
        assert!(cross.iter().all(|v| *v > 0.0 && *v <= 1.0));
        assert_eq!(cross[0], 1.0);
    }

    #[test]
    fn distinct_inputs_give_positive_definite_kernel() {
        for seed in 0..20 {
            let mut rng = SeededRng::new(seed);
            let n = 1 + (seed as usize * 7) % 50;
            let pts = random_points(n, 3, &mut rng);
            let w = DVector::from_vec(vec![1.5, 2.0, 1.0]);
            let kx = kernel_matrix(&pts, &w);
            assert!(chol_spd(&kx, &JitterSchedule::exact()).is_ok(), "seed {seed}");
        }
    }

    #[test]
    fn sigma_single_output_reduction() {
        let mut rng = SeededRng::new(2);
        let pts = random_points(4, 2, &mut rng);
        let c = Component {
            mu: DVector::zeros(2),
            r: DMatrix::identity(2, 2),
            sigma0: 1.0,
            k: DMatrix::from_element(1, 1, 1.0),
            w: DVector::from_vec(vec![0.8, 1.3]),
            noise: DVector::from_vec(vec![0.3]),
        };
        let expected = kernel_matrix(&pts, &c.w) + DMatrix::identity(4, 4) * 0.3;
        assert_relative_eq!(assemble_sigma(&c, &pts), expected, epsilon = 1e-15);
    }

    #[test]
    fn sigma_single_point() {
        let mut rng = SeededRng::new(3);
        let c = random_component(2, 3, &mut rng);
        let pts = random_points(1, 2, &mut rng);
        let expected = &c.k * c.sigma0 + DMatrix::from_diagonal(&c.noise);
        assert_relative_eq!(assemble_sigma(&c, &pts), expected, epsilon = 1e-14);
    }

    #[test]
    fn sigma_entrywise_definition() {
        let mut rng = SeededRng::new(4);
        let c = random_component(2, 2, &mut rng);
        let pts = random_points(2, 2, &mut rng);
        let s = assemble_sigma(&c, &pts);
        let n = 2;
        for l in 0..2 {
            for i in 0..n {
                for k in 0..2 {
                    for j in 0..n {
                        let mut v = c.sigma0
                            * c.k[(l, k)]
                            * kernel(&pts[i], &pts[j], &c.w).unwrap();
                        if l == k && i == j {
                            v += c.noise[l];
                        }
                        assert_relative_eq!(s[(l * n + i, k * n + j)], v, epsilon = 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn sigma_factors_for_random_components() {
        for seed in 0..500 {
            let mut rng = SeededRng::new(seed);
            let d = 1 + seed as usize % 3;
            let m = 1 + (seed as usize / 3) % 3;
            let mut hp = Hyperparams::generation_preset(d, m);
            hp.r1 = 0.5;
            let c = Component::sample_prior(&hp, &mut rng).unwrap();
            let pts = random_points(1 + seed as usize % 6, d, &mut rng);
            let s = assemble_sigma(&c, &pts);
            assert!((&s - s.transpose()).amax() <= 1e-12 * s.amax().max(1.0));
            chol_spd(&s, &JitterSchedule::default()).unwrap();
        }
    }

    #[test]
    fn log_marginal_zero_data() {
        let mut rng = SeededRng::new(5);
        let c = random_component(2, 2, &mut rng);
        let pts = random_points(3, 2, &mut rng);
        let f = chol_spd(&assemble_sigma(&c, &pts), &JitterSchedule::default()).unwrap();
        let lm = log_marginal_y(&c, &pts, &DVector::zeros(6)).unwrap();
        assert_relative_eq!(lm, -0.5 * (6.0 * LN_2PI + logdet(&f)), epsilon = 1e-12);
        assert_eq!(log_marginal_y(&c, &[], &DVector::zeros(0)).unwrap(), 0.0);
    }

    #[test]
    fn log_marginal_single_output_oracle() {
        let mut rng = SeededRng::new(6);
        for _ in 0..20 {
            let c = random_component(2, 1, &mut rng);
            let pts = random_points(5, 2, &mut rng);
            let y = DVector::from_fn(5, |_, _| rng.random::<f64>() - 0.5);
            // textbook GP: K = s0·k11·Kx + σ²I, −½ yᵀK⁻¹y − ½ ln|K| − n/2 ln 2π
            let kmat = kernel_matrix(&pts, &c.w) * (c.sigma0 * c.k[(0, 0)])
                + DMatrix::identity(5, 5) * c.noise[0];
            let inv = kmat.clone().try_inverse().unwrap();
            let oracle = -0.5 * y.dot(&(&inv * &y))
                - 0.5 * kmat.determinant().ln()
                - 2.5 * (2.0 * std::f64::consts::PI).ln();
            assert_relative_eq!(log_marginal_y(&c, &pts, &y).unwrap(), oracle, epsilon = 1e-9);
        }
    }

    #[test]
    fn log_marginal_falls_as_noise_vanishes_on_mismatched_data() {
        let c0 = Component {
            mu: DVector::zeros(1),
            r: DMatrix::identity(1, 1),
            sigma0: 1.0,
            k: DMatrix::identity(2, 2),
            w: DVector::from_vec(vec![1.0]),
            noise: DVector::from_vec(vec![1.0, 0.5]),
        };
        // duplicated input with different outputs cannot be explained without noise
        let pts = vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![0.0])];
        let y = stack_outputs(&[
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![-1.0, 0.0]),
        ]);
        let mut last = f64::INFINITY;
        for s in [1e-1, 1e-2, 1e-3, 1e-4, 1e-5] {
            let mut c = c0.clone();
            c.noise[0] = s;
            let v = log_marginal_y(&c, &pts, &y).unwrap();
            assert!(v < last, "noise {s}: {v} !< {last}");
            last = v;
        }
    }

    #[test]
    fn prior_state_is_valid() {
        let hp = Hyperparams::generation_preset(2, 2);
        let mut rng = SeededRng::new(7);
        let s = MixtureState::sample_prior(50, &hp, &mut rng).unwrap();
        s.check_invariants().unwrap();
        assert_eq!(s.len(), 50);
        for c in s.components.values() {
            c.validate().unwrap();
        }
    }

    #[test]
    fn presets_validate() {
        Hyperparams::generation_preset(2, 2).validate().unwrap();
        let mut rng = SeededRng::new(8);
        let xs = random_points(30, 2, &mut rng);
        let ys = random_points(30, 2, &mut rng);
        let data = Dataset::new(xs, ys, 2, 2).unwrap();
        let hp = Hyperparams::inference_preset(&data).unwrap();
        hp.validate().unwrap();
        assert_relative_eq!(hp.w0, &hp.r0 / 2.0);
        // one row: covariance is singular, falls back to the identity
        let tiny = data.subset(&[0]);
        Hyperparams::inference_preset(&tiny).unwrap().validate().unwrap();
    }

    proptest! {
        #[test]
        fn stacking_round_trip(n in 1usize..6, m in 1usize..4, seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let ys: Vec<DVector<f64>> = (0..n)
                .map(|_| DVector::from_fn(m, |_, _| rng.random::<f64>()))
                .collect();
            let back = unstack_outputs(&stack_outputs(&ys), m);
            prop_assert_eq!(back, ys);
        }
    }
}
