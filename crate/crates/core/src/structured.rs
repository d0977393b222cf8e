//! Structured evaluation of a component's output likelihood.
//!
//! With `T = D^{-1/2} U`, where `U S Uᵀ` is the eigendecomposition of the whitened
//! inter-task matrix `D^{-1/2} K D^{-1/2}`, the covariance factors as
//!
//! ```text
//! Σ = (T^{-ᵀ} ⊗ I) · blockdiag_a(σ0 s_a K^x + I) · (T^{-1} ⊗ I)
//! ```
//!
//! so every density over a component splits into `M` independent `N_r × N_r`
//! problems on the rotated outputs `Ŷ = Y T`. [`ComponentCache`] keeps one Cholesky
//! factor per block and supports adding and removing points. [`Spectrum`] keeps the
//! eigendecomposition of `K^x` instead, which makes changes to `σ0`, `K` and the noise
//! variances cost `O(N_r M)` per evaluation.

use nalgebra::{DMatrix, DVector};

use crate::distributions::symmetrize;
use crate::error::Result;
use crate::linalg::{chol_spd, logdet, JitterSchedule, SpdFactor};
use crate::model::{cross_kernel, kernel_matrix, Component, Dataset, LN_2PI};

/// Whitened eigenbasis of the inter-task matrix.
#[derive(Debug, Clone)]
pub struct OutputBasis {
    /// `D^{-1/2} U`, M×M.
    pub t: DMatrix<f64>,
    /// Eigenvalues of `D^{-1/2} K D^{-1/2}`, clamped at zero.
    pub s: DVector<f64>,
    /// `Σ_ℓ ln D_ℓ`.
    pub sum_ln_noise: f64,
}

impl OutputBasis {
    pub fn new(k: &DMatrix<f64>, noise: &DVector<f64>) -> Self {
        let m = noise.len();
        let inv_sqrt: Vec<f64> = noise.iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut kt = DMatrix::from_fn(m, m, |i, j| inv_sqrt[i] * k[(i, j)] * inv_sqrt[j]);
        symmetrize(&mut kt);
        let eig = kt.symmetric_eigen();
        let t = DMatrix::from_fn(m, m, |i, a| inv_sqrt[i] * eig.eigenvectors[(i, a)]);
        Self {
            t,
            s: eig.eigenvalues.map(|v| v.max(0.0)),
            sum_ln_noise: noise.iter().map(|d| d.ln()).sum(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.s.len()
    }

    /// `Tᵀ y` for a single output vector.
    pub fn rotate(&self, y: &DVector<f64>) -> DVector<f64> {
        self.t.tr_mul(y)
    }
}

#[derive(Debug, Clone)]
struct Block {
    /// `σ0 s_a`.
    scale: f64,
    factor: Option<SpdFactor>,
    /// `(B_a + εI)^{-1} ŷ_a`.
    alpha: DVector<f64>,
}

impl Block {
    fn jitter(&self) -> f64 {
        self.factor.as_ref().map_or(0.0, |f| f.jitter())
    }

    fn build(scale: f64, kx: &DMatrix<f64>, yhat: &DVector<f64>) -> Result<Self> {
        let n = kx.nrows();
        if n == 0 {
            return Ok(Self {
                scale,
                factor: None,
                alpha: DVector::zeros(0),
            });
        }
        let mut b = kx * scale;
        for i in 0..n {
            b[(i, i)] += 1.0;
        }
        let f = chol_spd(&b, &JitterSchedule::default())?;
        let alpha = f.cholesky().solve(yhat);
        Ok(Self {
            scale,
            factor: Some(f),
            alpha,
        })
    }
}

/// Per-component block-Cholesky cache over a set of member points.
#[derive(Debug, Clone)]
pub struct ComponentCache {
    members: Vec<usize>,
    xs: Vec<DVector<f64>>,
    w: DVector<f64>,
    basis: OutputBasis,
    /// Rotated outputs, one row per member.
    yhat: DMatrix<f64>,
    blocks: Vec<Block>,
}

impl ComponentCache {
    pub fn build(c: &Component, data: &Dataset, members: &[usize]) -> Result<Self> {
        let xs: Vec<DVector<f64>> = members.iter().map(|i| data.xs[*i].clone()).collect();
        let ys: Vec<DVector<f64>> = members.iter().map(|i| data.ys[*i].clone()).collect();
        Self::from_points(c, members.to_vec(), xs, &ys)
    }

    pub fn from_points(
        c: &Component,
        members: Vec<usize>,
        xs: Vec<DVector<f64>>,
        ys: &[DVector<f64>],
    ) -> Result<Self> {
        let basis = OutputBasis::new(&c.k, &c.noise);
        let m = basis.output_dim();
        let n = xs.len();
        let yhat = DMatrix::from_fn(n, m, |i, a| ys[i].dot(&basis.t.column(a)));
        let kx = kernel_matrix(&xs, &c.w);
        let blocks = (0..m)
            .map(|a| Block::build(c.sigma0 * basis.s[a], &kx, &yhat.column(a).into_owned()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            members,
            xs,
            w: c.w.clone(),
            basis,
            yhat,
            blocks,
        })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn position(&self, idx: usize) -> Option<usize> {
        self.members.iter().position(|m| *m == idx)
    }

    /// `ln N(y_r | 0, Σ)` over the members.
    pub fn log_marginal(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        let m = self.basis.output_dim();
        let mut acc = n as f64 * (m as f64 * LN_2PI + self.basis.sum_ln_noise);
        for (a, b) in self.blocks.iter().enumerate() {
            let f = b.factor.as_ref().expect("non-empty block");
            acc += logdet(f) + self.yhat.column(a).dot(&b.alpha);
        }
        -0.5 * acc
    }

    /// `ln p(y | members)` for a point that is not a member.
    pub fn conditional_new(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let yh = self.basis.rotate(y);
        let kvec = if self.is_empty() {
            None
        } else {
            Some(cross_kernel(x, &self.xs, &self.w))
        };
        let mut lp = -0.5 * self.basis.sum_ln_noise;
        for (a, b) in self.blocks.iter().enumerate() {
            let eps = b.jitter();
            let (mean, var) = match (&b.factor, &kvec) {
                (Some(f), Some(k)) => {
                    let u = f.forward(k);
                    let mean = b.scale * k.dot(&b.alpha);
                    let var = b.scale + 1.0 + eps - b.scale * b.scale * u.norm_squared();
                    (mean, var)
                }
                _ => (0.0, b.scale + 1.0 + eps),
            };
            // The Schur complement of cK + (1+ε)I is at least 1+ε.
            let var = var.max(1.0 + eps);
            lp += -0.5 * (LN_2PI + var.ln() + (yh[a] - mean).powi(2) / var);
        }
        lp
    }

    /// `ln p(y_p | other members)` for the member at position `p`.
    pub fn conditional_loo(&self, p: usize) -> f64 {
        let mut lp = -0.5 * self.basis.sum_ln_noise;
        for b in &self.blocks {
            let f = b.factor.as_ref().expect("non-empty block");
            let prec = f.inverse_diag_entry(p);
            let r = b.alpha[p];
            lp += -0.5 * (LN_2PI - prec.ln() + r * r / prec);
        }
        lp
    }

    /// Appends a point.
    pub fn insert(&mut self, idx: usize, x: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        let yh = self.basis.rotate(y);
        let k = if self.is_empty() {
            DVector::zeros(0)
        } else {
            cross_kernel(x, &self.xs, &self.w)
        };
        let n = self.len();
        self.members.push(idx);
        self.xs.push(x.clone());
        self.yhat = self.yhat.clone().insert_row(n, 0.0);
        for a in 0..yh.len() {
            self.yhat[(n, a)] = yh[a];
        }
        let m = self.basis.output_dim();
        let mut kx_cache: Option<DMatrix<f64>> = None;
        for a in 0..m {
            let scale = self.blocks[a].scale;
            let eps = self.blocks[a].jitter();
            let appended = self.blocks[a].factor.as_ref().and_then(|f| {
                let mut col = DVector::zeros(n + 1);
                for j in 0..n {
                    col[j] = scale * k[j];
                }
                col[n] = scale + 1.0 + eps;
                let chol = f.cholesky().insert_column(n, col);
                let d = chol.l_dirty()[(n, n)];
                (d.is_finite() && d > 0.0).then(|| SpdFactor::from_parts(chol, eps))
            });
            let yhat_a = self.yhat.column(a).into_owned();
            match appended {
                Some(f) => {
                    self.blocks[a].alpha = f.cholesky().solve(&yhat_a);
                    self.blocks[a].factor = Some(f);
                }
                None => {
                    let kx = kx_cache.get_or_insert_with(|| kernel_matrix(&self.xs, &self.w));
                    self.blocks[a] = Block::build(scale, kx, &yhat_a)?;
                }
            }
        }
        Ok(())
    }

    /// Removes the member at position `p`.
    pub fn remove(&mut self, p: usize) -> Result<()> {
        self.members.remove(p);
        self.xs.remove(p);
        self.yhat = self.yhat.clone().remove_row(p);
        let m = self.basis.output_dim();
        let mut kx_cache: Option<DMatrix<f64>> = None;
        for a in 0..m {
            let scale = self.blocks[a].scale;
            let yhat_a = self.yhat.column(a).into_owned();
            if self.members.is_empty() {
                self.blocks[a] = Block::build(scale, &DMatrix::zeros(0, 0), &yhat_a)?;
                continue;
            }
            let eps = self.blocks[a].jitter();
            let f = self.blocks[a].factor.as_ref().expect("non-empty block");
            let chol = f.cholesky().remove_column(p);
            if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                let f = SpdFactor::from_parts(chol, eps);
                self.blocks[a].alpha = f.cholesky().solve(&yhat_a);
                self.blocks[a].factor = Some(f);
            } else {
                let kx = kx_cache.get_or_insert_with(|| kernel_matrix(&self.xs, &self.w));
                self.blocks[a] = Block::build(scale, kx, &yhat_a)?;
            }
        }
        Ok(())
    }

    /// Predictive mean of the latent outputs at `xstar`.
    pub fn predict_mean(&self, c: &Component, xstar: &DVector<f64>) -> DVector<f64> {
        let m = self.basis.output_dim();
        if self.is_empty() {
            return DVector::zeros(m);
        }
        let k = cross_kernel(xstar, &self.xs, &self.w);
        // mean = σ0 K T (Aᵀ k), A = [α_1 … α_M]
        let ak = DVector::from_fn(m, |a, _| self.blocks[a].alpha.dot(&k));
        (&c.k * &self.basis.t * ak) * c.sigma0
    }

    /// Predictive mean and covariance of the latent outputs at `xstar`.
    pub fn predict(&self, c: &Component, xstar: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.basis.output_dim();
        let prior = &c.k * c.sigma0;
        if self.is_empty() {
            return (DVector::zeros(m), prior);
        }
        let k = cross_kernel(xstar, &self.xs, &self.w);
        let ak = DVector::from_fn(m, |a, _| self.blocks[a].alpha.dot(&k));
        let kt = &c.k * &self.basis.t;
        let mean = (&kt * ak) * c.sigma0;
        let q = DVector::from_fn(m, |a, _| {
            self.blocks[a]
                .factor
                .as_ref()
                .map_or(0.0, |f| f.quad_form(&k))
        });
        let mut cov = prior - &kt * DMatrix::from_diagonal(&q) * kt.transpose() * (c.sigma0 * c.sigma0);
        symmetrize(&mut cov);
        (mean, cov)
    }
}

/// Eigendecomposition of `K^x` together with the member outputs projected on it.
#[derive(Debug, Clone)]
pub struct Spectrum {
    /// Eigenvalues of `K^x`, clamped at zero.
    lambda: DVector<f64>,
    /// `Vᵀ Y`, N_r×M.
    yv: DMatrix<f64>,
}

impl Spectrum {
    pub fn new(xs: &[DVector<f64>], ys: &[DVector<f64>], w: &DVector<f64>) -> Self {
        let n = xs.len();
        let m = ys.first().map_or(0, |y| y.len());
        if n == 0 {
            return Self {
                lambda: DVector::zeros(0),
                yv: DMatrix::zeros(0, m),
            };
        }
        let eig = kernel_matrix(xs, w).symmetric_eigen();
        let y = DMatrix::from_fn(n, m, |i, l| ys[i][l]);
        Self {
            lambda: eig.eigenvalues.map(|v| v.max(0.0)),
            yv: eig.eigenvectors.tr_mul(&y),
        }
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    /// Products `s_a λ_j` and squared rotated outputs, flattened in the same order.
    pub fn terms(&self, basis: &OutputBasis) -> (Vec<f64>, Vec<f64>) {
        let rotated = &self.yv * &basis.t;
        let n = self.len();
        let m = basis.output_dim();
        let mut prods = Vec::with_capacity(n * m);
        let mut sq = Vec::with_capacity(n * m);
        for a in 0..m {
            for j in 0..n {
                prods.push(basis.s[a] * self.lambda[j]);
                sq.push(rotated[(j, a)] * rotated[(j, a)]);
            }
        }
        (prods, sq)
    }

    /// `ln N(y_r | 0, Σ)` for the given scale and output basis.
    pub fn log_marginal(&self, sigma0: f64, basis: &OutputBasis) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        let (prods, sq) = self.terms(basis);
        let m = basis.output_dim();
        let mut acc = n as f64 * (m as f64 * LN_2PI + basis.sum_ln_noise);
        for (p, q) in prods.iter().zip(&sq) {
            let e = sigma0 * p + 1.0;
            acc += e.ln() + q / e;
        }
        -0.5 * acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{mvn_logpdf_cov, SeededRng};
    use crate::model::tests::{random_component, random_points};
    use crate::model::{assemble_sigma, log_marginal_y, stack_outputs};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_outputs(n: usize, m: usize, rng: &mut SeededRng) -> Vec<DVector<f64>> {
        (0..n)
            .map(|_| DVector::from_fn(m, |_, _| rng.random::<f64>() * 2.0 - 1.0))
            .collect()
    }

    /// Dense conditional of the last point given the others.
    fn dense_conditional(
        c: &Component,
        xs: &[DVector<f64>],
        ys: &[DVector<f64>],
        x: &DVector<f64>,
        y: &DVector<f64>,
    ) -> f64 {
        let mut all_x = xs.to_vec();
        all_x.push(x.clone());
        let mut all_y = ys.to_vec();
        all_y.push(y.clone());
        log_marginal_y(c, &all_x, &stack_outputs(&all_y)).unwrap()
            - log_marginal_y(c, xs, &stack_outputs(ys)).unwrap()
    }

    #[test]
    fn log_marginal_matches_dense() {
        for seed in 0..40 {
            let mut rng = SeededRng::new(seed);
            let (d, m) = (1 + seed as usize % 3, 1 + seed as usize % 3);
            let n = 1 + seed as usize % 7;
            let c = random_component(d, m, &mut rng);
            let xs = random_points(n, d, &mut rng);
            let ys = random_outputs(n, m, &mut rng);
            let dense = log_marginal_y(&c, &xs, &stack_outputs(&ys)).unwrap();
            let cache = ComponentCache::from_points(&c, (0..n).collect(), xs.clone(), &ys).unwrap();
            assert_relative_eq!(cache.log_marginal(), dense, epsilon = 1e-8, max_relative = 1e-9);
            let spec = Spectrum::new(&xs, &ys, &c.w);
            let basis = OutputBasis::new(&c.k, &c.noise);
            assert_relative_eq!(
                spec.log_marginal(c.sigma0, &basis),
                dense,
                epsilon = 1e-8,
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn conditionals_match_dense_chain_rule() {
        for seed in 0..40 {
            let mut rng = SeededRng::new(100 + seed);
            let (d, m) = (2, 1 + seed as usize % 3);
            let n = seed as usize % 5;
            let c = random_component(d, m, &mut rng);
            let xs = random_points(n, d, &mut rng);
            let ys = random_outputs(n, m, &mut rng);
            let x = random_points(1, d, &mut rng).remove(0);
            let y = random_outputs(1, m, &mut rng).remove(0);
            let cache = ComponentCache::from_points(&c, (0..n).collect(), xs.clone(), &ys).unwrap();
            let dense = dense_conditional(&c, &xs, &ys, &x, &y);
            assert_relative_eq!(cache.conditional_new(&x, &y), dense, epsilon = 1e-8);

            let mut all_x = xs.clone();
            all_x.push(x.clone());
            let mut all_y = ys.clone();
            all_y.push(y.clone());
            let full = ComponentCache::from_points(&c, (0..=n).collect(), all_x, &all_y).unwrap();
            assert_relative_eq!(full.conditional_loo(n), dense, epsilon = 1e-8);
        }
    }

    #[test]
    fn empty_conditional_is_marginal() {
        let mut rng = SeededRng::new(7);
        let c = random_component(2, 3, &mut rng);
        let cache = ComponentCache::from_points(&c, vec![], vec![], &[]).unwrap();
        let x = random_points(1, 2, &mut rng).remove(0);
        let y = random_outputs(1, 3, &mut rng).remove(0);
        let cov = &c.k * c.sigma0 + DMatrix::from_diagonal(&c.noise);
        let f = chol_spd(&cov, &JitterSchedule::exact()).unwrap();
        assert_relative_eq!(
            cache.conditional_new(&x, &y),
            mvn_logpdf_cov(&y, &DVector::zeros(3), &f),
            epsilon = 1e-10
        );
        assert_eq!(cache.log_marginal(), 0.0);
    }

    #[test]
    fn insert_and_remove_track_rebuilds() {
        let mut rng = SeededRng::new(8);
        let c = random_component(2, 2, &mut rng);
        let xs = random_points(6, 2, &mut rng);
        let ys = random_outputs(6, 2, &mut rng);
        let data = Dataset::new(xs.clone(), ys.clone(), 2, 2).unwrap();
        let mut cache = ComponentCache::build(&c, &data, &[0, 2, 4]).unwrap();
        cache.insert(5, &xs[5], &ys[5]).unwrap();
        cache.remove(1).unwrap();
        cache.insert(1, &xs[1], &ys[1]).unwrap();
        assert_eq!(cache.members(), &[0, 4, 5, 1]);
        let fresh = ComponentCache::build(&c, &data, &[0, 4, 5, 1]).unwrap();
        assert_relative_eq!(cache.log_marginal(), fresh.log_marginal(), epsilon = 1e-10);
        let q = DVector::from_vec(vec![0.1, -0.3]);
        let (m1, c1) = cache.predict(&c, &q);
        let (m2, c2) = fresh.predict(&c, &q);
        assert_relative_eq!(m1, m2, epsilon = 1e-10);
        assert_relative_eq!(c1, c2, epsilon = 1e-10);
        for p in 0..4 {
            assert_relative_eq!(
                cache.conditional_loo(p),
                fresh.conditional_loo(p),
                epsilon = 1e-10
            );
        }
        for p in (0..4).rev() {
            cache.remove(p).unwrap();
        }
        assert!(cache.is_empty());
        assert_eq!(cache.log_marginal(), 0.0);
    }

    #[test]
    fn predictive_matches_dense_joint_conditioning() {
        let mut rng = SeededRng::new(9);
        for _ in 0..20 {
            let c = random_component(2, 2, &mut rng);
            let xs = random_points(3, 2, &mut rng);
            let ys = random_outputs(3, 2, &mut rng);
            let xstar = random_points(1, 2, &mut rng).remove(0);
            let cache = ComponentCache::from_points(&c, vec![0, 1, 2], xs.clone(), &ys).unwrap();
            let (mean, cov) = cache.predict(&c, &xstar);
            let sigma = assemble_sigma(&c, &xs);
            let kstar = c.k.kronecker(&crate::model::cross_kernel(&xstar, &xs, &c.w).transpose())
                * c.sigma0;
            let inv = sigma.try_inverse().unwrap();
            let y = stack_outputs(&ys);
            let m_dense = &kstar * &inv * y;
            let c_dense = &c.k * c.sigma0 - &kstar * &inv * kstar.transpose();
            assert_relative_eq!(mean, m_dense, epsilon = 1e-8);
            assert_relative_eq!(cov, c_dense, epsilon = 1e-8);
            assert_relative_eq!(cache.predict_mean(&c, &xstar), mean, epsilon = 1e-12);
        }
    }
}
