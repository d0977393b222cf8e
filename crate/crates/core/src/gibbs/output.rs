//! Updates for the GP parameters of one component: HMC on `ln σ0` and independence
//! Metropolis-Hastings for `K`, each ARD weight and each noise variance, with
//! proposals drawn from the priors.

use nalgebra::DVector;
use rand::Rng;

use super::{SamplerConfig, Tally};
use crate::distributions::{
    gamma_sample, lognormal_sample, standard_normal, wishart_sample, SeededRng,
};
use crate::error::Result;
use crate::linalg::{chol_spd, kron, trace_prod, JitterSchedule};
use crate::model::{
    assemble_sigma, kernel_matrix, log_marginal_y, Component, Hyperparams, LN_2PI,
};
use crate::structured::{ComponentCache, OutputBasis, Spectrum};

use statrs::function::gamma::ln_gamma;

/// Energy changes beyond this are treated as a divergent trajectory.
const DIVERGENCE: f64 = 1000.0;

/// Acceptance counts for one component's GP parameter moves.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MoveStats {
    pub sigma0: Tally,
    pub k: Tally,
    pub w: Tally,
    pub noise: Tally,
    pub divergences: u32,
}

/// `-ln p(σ0 | y_r, rest)` up to a constant that does not depend on `σ0`, evaluated
/// through the spectrum of `K^x`.
#[derive(Debug, Clone)]
pub struct SigmaTarget {
    prods: Vec<f64>,
    sq: Vec<f64>,
    base: f64,
    a1: f64,
    b1: f64,
}

impl SigmaTarget {
    pub fn new(spectrum: &Spectrum, basis: &OutputBasis, hp: &Hyperparams) -> Self {
        let (prods, sq) = if spectrum.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            spectrum.terms(basis)
        };
        let n = spectrum.len() as f64;
        let m = basis.output_dim() as f64;
        Self {
            prods,
            sq,
            base: n * (m * LN_2PI + basis.sum_ln_noise),
            a1: hp.a1,
            b1: hp.b1,
        }
    }

    /// Negative log prior plus negative log marginal likelihood.
    pub fn energy(&self, sigma0: f64) -> f64 {
        let mut acc = self.base;
        for (p, q) in self.prods.iter().zip(&self.sq) {
            let e = sigma0 * p + 1.0;
            acc += e.ln() + q / e;
        }
        let log_prior =
            self.a1 * self.b1.ln() - ln_gamma(self.a1) + (self.a1 - 1.0) * sigma0.ln() - self.b1 * sigma0;
        0.5 * acc - log_prior
    }

    /// `dE/dσ0`.
    pub fn grad(&self, sigma0: f64) -> f64 {
        let mut acc = 0.0;
        for (p, q) in self.prods.iter().zip(&self.sq) {
            let e = sigma0 * p + 1.0;
            acc += p / e - q * p / (e * e);
        }
        (1.0 - self.a1) / sigma0 + self.b1 + 0.5 * acc
    }

    fn potential(&self, theta: f64) -> f64 {
        self.energy(theta.exp()) - theta
    }

    fn potential_grad(&self, theta: f64) -> f64 {
        let s = theta.exp();
        s * self.grad(s) - 1.0
    }
}

/// Energy of `σ0` from the dense covariance; reference for [`SigmaTarget::energy`].
pub fn sigma0_energy_dense(
    c: &Component,
    xs: &[DVector<f64>],
    y: &DVector<f64>,
    hp: &Hyperparams,
) -> Result<f64> {
    let log_prior = crate::distributions::gamma_logpdf(c.sigma0, hp.a1, hp.b1)?;
    Ok(-log_prior - log_marginal_y(c, xs, y)?)
}

/// `dE/dσ0` from the dense covariance via `½ Tr[(Σ^{-1} - a aᵀ)(K ⊗ K^x)]`.
pub fn sigma0_grad_dense(
    c: &Component,
    xs: &[DVector<f64>],
    y: &DVector<f64>,
    hp: &Hyperparams,
) -> Result<f64> {
    let prior = (1.0 - hp.a1) / c.sigma0 + hp.b1;
    if xs.is_empty() {
        return Ok(prior);
    }
    let f = chol_spd(&assemble_sigma(c, xs), &JitterSchedule::exact())?;
    let g = kron(&c.k, &kernel_matrix(xs, &c.w));
    Ok(prior + 0.5 * trace_prod(&f, y, &g)?)
}

/// One HMC transition on `θ = ln σ0` with unit mass.
pub fn hmc_step(
    target: &SigmaTarget,
    sigma0: f64,
    step: f64,
    leapfrog: usize,
    rng: &mut SeededRng,
) -> (f64, bool, bool) {
    let theta0 = sigma0.ln();
    let p0 = standard_normal(rng);
    let h0 = target.potential(theta0) + 0.5 * p0 * p0;

    let mut theta = theta0;
    let mut p = p0 - 0.5 * step * target.potential_grad(theta);
    for l in 0..leapfrog {
        theta += step * p;
        if l + 1 < leapfrog {
            p -= step * target.potential_grad(theta);
        }
    }
    p -= 0.5 * step * target.potential_grad(theta);

    let h1 = target.potential(theta) + 0.5 * p * p;
    let delta = h1 - h0;
    let u: f64 = rng.random();
    if !delta.is_finite() || delta.abs() > DIVERGENCE {
        return (sigma0, false, true);
    }
    if u.ln() < -delta {
        (theta.exp(), true, false)
    } else {
        (sigma0, false, false)
    }
}

fn accept(log_ratio: f64, rng: &mut SeededRng) -> bool {
    let u: f64 = rng.random();
    u.ln() < log_ratio
}

/// Independence MH for the inter-task matrix.
pub fn mh_update_k(
    c: &mut Component,
    spectrum: &Spectrum,
    hp: &Hyperparams,
    tries: usize,
    rng: &mut SeededRng,
) -> Result<Tally> {
    let mut tally = Tally::default();
    let mut ll = spectrum.log_marginal(c.sigma0, &OutputBasis::new(&c.k, &c.noise));
    for _ in 0..tries {
        let k = wishart_sample(&hp.w1, hp.nu1, rng)?;
        let proposed = spectrum.log_marginal(c.sigma0, &OutputBasis::new(&k, &c.noise));
        let ok = accept(proposed - ll, rng);
        tally.record(ok);
        if ok {
            c.k = k;
            ll = proposed;
        }
    }
    Ok(tally)
}

/// Independence MH for the noise variance of output `l`.
pub fn mh_update_noise(
    c: &mut Component,
    l: usize,
    spectrum: &Spectrum,
    hp: &Hyperparams,
    tries: usize,
    rng: &mut SeededRng,
) -> Result<Tally> {
    let mut tally = Tally::default();
    let mut ll = spectrum.log_marginal(c.sigma0, &OutputBasis::new(&c.k, &c.noise));
    for _ in 0..tries {
        let mut noise = c.noise.clone();
        noise[l] = gamma_sample(hp.a2, hp.b2, rng)?;
        let proposed = spectrum.log_marginal(c.sigma0, &OutputBasis::new(&c.k, &noise));
        let ok = accept(proposed - ll, rng);
        tally.record(ok);
        if ok {
            c.noise = noise;
            ll = proposed;
        }
    }
    Ok(tally)
}

/// Independence MH for the ARD weight of input dimension `d`.
pub fn mh_update_w(
    c: &mut Component,
    d: usize,
    xs: &[DVector<f64>],
    ys: &[DVector<f64>],
    hp: &Hyperparams,
    tries: usize,
    rng: &mut SeededRng,
) -> Result<Tally> {
    let mut tally = Tally::default();
    if xs.is_empty() {
        // the likelihood is flat: every proposal is accepted
        for _ in 0..tries {
            c.w[d] = lognormal_sample(hp.mu1, hp.r1, rng)?;
            let _: f64 = rng.random();
            tally.record(true);
        }
        return Ok(tally);
    }
    let members: Vec<usize> = (0..xs.len()).collect();
    let mut ll = ComponentCache::from_points(c, members.clone(), xs.to_vec(), ys)?.log_marginal();
    for _ in 0..tries {
        let mut proposal = c.clone();
        proposal.w[d] = lognormal_sample(hp.mu1, hp.r1, rng)?;
        let proposed =
            ComponentCache::from_points(&proposal, members.clone(), xs.to_vec(), ys)?.log_marginal();
        let ok = accept(proposed - ll, rng);
        tally.record(ok);
        if ok {
            *c = proposal;
            ll = proposed;
        }
    }
    Ok(tally)
}

/// Updates every parameter of one component given its member points.
pub fn update_component(
    c: &mut Component,
    xs: &[DVector<f64>],
    ys: &[DVector<f64>],
    hp: &Hyperparams,
    cfg: &SamplerConfig,
    rng: &mut SeededRng,
) -> Result<MoveStats> {
    let mut stats = MoveStats::default();
    c.mu = super::input::posterior_mu(xs, &c.r, hp, rng)?;
    c.r = super::input::posterior_r(xs, &c.mu, hp, rng)?;

    for d in 0..c.input_dim() {
        stats.w += mh_update_w(c, d, xs, ys, hp, cfg.mh_tries_per_param, rng)?;
    }

    let spectrum = Spectrum::new(xs, ys, &c.w);
    let target = SigmaTarget::new(&spectrum, &OutputBasis::new(&c.k, &c.noise), hp);
    let (sigma0, ok, divergent) = hmc_step(&target, c.sigma0, cfg.hmc_step, cfg.hmc_leapfrog, rng);
    c.sigma0 = sigma0;
    stats.sigma0.record(ok);
    stats.divergences += divergent as u32;

    stats.k += mh_update_k(c, &spectrum, hp, cfg.mh_tries_per_param, rng)?;
    for l in 0..c.output_dim() {
        stats.noise += mh_update_noise(c, l, &spectrum, hp, cfg.mh_tries_per_param, rng)?;
    }
    Ok(stats)
}
