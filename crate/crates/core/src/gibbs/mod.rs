//! Posterior sampling for the mixture.
//!
//! One sweep resamples every indicator, then the parameters of every live component,
//! then the concentration parameter. Component updates run under the configured
//! [`Exec`] policy; each component gets its own generator seeded from the chain
//! generator in id order, so the result does not depend on the policy.

mod alpha;
mod indicators;
mod input;
mod output;

use std::ops::AddAssign;

use nalgebra::DVector;
use rand::RngCore;
use statrs::function::gamma::ln_gamma;

pub use alpha::{alpha_log_ratio, log_alpha_target, mh_update_alpha};
pub use indicators::{
    gp_conditional_logpdf, indicator_log_weights, update_indicator, Choice, ComponentSource,
    IndicatorSampler,
};
pub use input::{mu_posterior, posterior_mu, posterior_r, r_posterior};
pub use output::{
    hmc_step, mh_update_k, mh_update_noise, mh_update_w, sigma0_energy_dense, sigma0_grad_dense,
    update_component, MoveStats, SigmaTarget,
};

use crate::distributions::{gamma_logpdf, SeededRng};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{Component, ComponentId, Dataset, Hyperparams, MixtureState};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_sweeps: usize,
    pub burn_in: usize,
    pub hmc_step: f64,
    pub hmc_leapfrog: usize,
    /// Proposals per independence MH update.
    pub mh_tries_per_param: usize,
    /// Standard deviation of the `ln α` random walk.
    pub alpha_proposal_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_sweeps: 4000,
            burn_in: 2000,
            hmc_step: 0.05,
            hmc_leapfrog: 20,
            mh_tries_per_param: 5,
            alpha_proposal_scale: 0.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_sweeps == 0 {
            return bad("n_sweeps must be positive");
        }
        if self.burn_in >= self.n_sweeps {
            return bad("burn_in must be below n_sweeps");
        }
        if !(self.hmc_step > 0.0 && self.hmc_step.is_finite()) {
            return bad("hmc_step must be positive");
        }
        if self.hmc_leapfrog == 0 {
            return bad("hmc_leapfrog must be positive");
        }
        if !(self.alpha_proposal_scale > 0.0 && self.alpha_proposal_scale.is_finite()) {
            return bad("alpha_proposal_scale must be positive");
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        self.n_sweeps - self.burn_in
    }
}

/// Accepted and proposed counts for one kind of move.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub accepted: u32,
    pub proposed: u32,
}

impl Tally {
    pub fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += accepted as u32;
    }

    /// Acceptance rate, NaN when nothing was proposed.
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

impl AddAssign for Tally {
    fn add_assign(&mut self, o: Self) {
        self.accepted += o.accepted;
        self.proposed += o.proposed;
    }
}

impl AddAssign for MoveStats {
    fn add_assign(&mut self, o: Self) {
        self.sigma0 += o.sigma0;
        self.k += o.k;
        self.w += o.w;
        self.noise += o.noise;
        self.divergences += o.divergences;
    }
}

/// Per-sweep diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepStats {
    pub sweep: usize,
    pub log_joint: f64,
    pub components: usize,
    pub alpha: f64,
    pub moves: MoveStats,
    pub alpha_move: Tally,
}

/// Retained states of one chain and the diagnostics of every sweep.
#[derive(Debug, Clone)]
pub struct Chain {
    pub samples: Vec<MixtureState>,
    pub diagnostics: Vec<SweepStats>,
}

/// Chain state plus the likelihood caches that belong to it.
pub struct Sampler<'a> {
    data: &'a Dataset,
    hp: &'a Hyperparams,
    cfg: SamplerConfig,
    exec: Exec,
    state: MixtureState,
    rng: SeededRng,
    cache: IndicatorSampler,
    sweeps: usize,
}

impl<'a> Sampler<'a> {
    /// Starts from a draw of the prior using the seed in `cfg`.
    pub fn new(data: &'a Dataset, hp: &'a Hyperparams, cfg: SamplerConfig, exec: Exec) -> Result<Self> {
        let rng = SeededRng::new(cfg.seed);
        Self::with_rng(data, hp, cfg, exec, rng)
    }

    fn with_rng(
        data: &'a Dataset,
        hp: &'a Hyperparams,
        cfg: SamplerConfig,
        exec: Exec,
        mut rng: SeededRng,
    ) -> Result<Self> {
        cfg.validate()?;
        hp.validate()?;
        check_dims(data, hp)?;
        let state = MixtureState::sample_prior(data.len(), hp, &mut rng)?;
        Self::from_state(data, hp, cfg, exec, state, rng)
    }

    pub fn from_state(
        data: &'a Dataset,
        hp: &'a Hyperparams,
        cfg: SamplerConfig,
        exec: Exec,
        state: MixtureState,
        rng: SeededRng,
    ) -> Result<Self> {
        state.check_invariants()?;
        if state.len() != data.len() {
            return Err(Error::LengthMismatch {
                left: state.len(),
                right: data.len(),
            });
        }
        let cache = IndicatorSampler::new(&state, data, exec)?;
        Ok(Self {
            data,
            hp,
            cfg,
            exec,
            state,
            rng,
            cache,
            sweeps: 0,
        })
    }

    pub fn state(&self) -> &MixtureState {
        &self.state
    }

    pub fn into_state(self) -> MixtureState {
        self.state
    }

    /// `ln p(Z, α, θ, X, Y)` of the current state.
    pub fn log_joint(&self) -> Result<f64> {
        joint_from_cache(&self.state, self.data, self.hp, &self.cache)
    }

    pub fn sweep(&mut self) -> Result<SweepStats> {
        let index = self.sweeps;
        self.sweep_inner().map_err(|e| e.at_sweep(index))
    }

    fn sweep_inner(&mut self) -> Result<SweepStats> {
        for i in 0..self.data.len() {
            self.cache
                .update(i, &mut self.state, self.data, self.hp, &mut self.rng, self.exec)?;
        }

        let mut jobs: Vec<(ComponentId, Component, u64)> = self
            .state
            .components
            .iter()
            .map(|(id, c)| (*id, c.clone(), 0))
            .collect();
        for job in jobs.iter_mut() {
            job.2 = self.rng.next_u64();
        }
        let (data, hp, cfg, cache) = (self.data, self.hp, &self.cfg, &self.cache);
        let results = self.exec.map_mut(&mut jobs, |(id, c, seed)| {
            let members = cache.caches()[id].members();
            let xs: Vec<DVector<f64>> = members.iter().map(|i| data.xs[*i].clone()).collect();
            let ys: Vec<DVector<f64>> = members.iter().map(|i| data.ys[*i].clone()).collect();
            let mut rng = SeededRng::new(*seed);
            update_component(c, &xs, &ys, hp, cfg, &mut rng)
        });
        let mut moves = MoveStats::default();
        for ((id, c, _), r) in jobs.into_iter().zip(results) {
            moves += r?;
            self.state.components.insert(id, c);
        }

        let (alpha, ok) = mh_update_alpha(
            self.state.alpha,
            self.state.num_components(),
            self.state.len(),
            self.hp,
            self.cfg.alpha_proposal_scale,
            &mut self.rng,
        );
        self.state.alpha = alpha;
        let mut alpha_move = Tally::default();
        alpha_move.record(ok);

        self.cache = IndicatorSampler::new(&self.state, self.data, self.exec)?;
        let log_joint = self.log_joint()?;
        if !log_joint.is_finite() {
            return Err(Error::NonFinite("log joint"));
        }
        let stats = SweepStats {
            sweep: self.sweeps,
            log_joint,
            components: self.state.num_components(),
            alpha,
            moves,
            alpha_move,
        };
        self.sweeps += 1;
        Ok(stats)
    }
}

fn check_dims(data: &Dataset, hp: &Hyperparams) -> Result<()> {
    if data.input_dim() != hp.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: hp.input_dim(),
            found: data.input_dim(),
        });
    }
    if data.output_dim() != hp.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: hp.output_dim(),
            found: data.output_dim(),
        });
    }
    Ok(())
}

fn joint_from_cache(
    state: &MixtureState,
    data: &Dataset,
    hp: &Hyperparams,
    cache: &IndicatorSampler,
) -> Result<f64> {
    let n = state.len() as f64;
    let alpha = state.alpha;
    let mut lp = gamma_logpdf(alpha, hp.a0, hp.b0)?;
    lp += state.num_components() as f64 * alpha.ln() + ln_gamma(alpha) - ln_gamma(alpha + n);
    for (id, c) in &state.components {
        let members = cache.caches()[id].members();
        lp += ln_gamma(members.len() as f64);
        lp += c.log_prior(hp)?;
        let input = crate::distributions::GaussianPrecision::new(&c.mu, &c.r)?;
        for i in members {
            lp += input.logpdf(&data.xs[*i]);
        }
        lp += cache.log_marginal(*id);
    }
    Ok(lp)
}

/// `ln p(Z, α, θ, X, Y)`.
pub fn log_joint(state: &MixtureState, data: &Dataset, hp: &Hyperparams) -> Result<f64> {
    let cache = IndicatorSampler::new(state, data, Exec::Sequential)?;
    joint_from_cache(state, data, hp, &cache)
}

/// One full sweep from `state`.
pub fn sweep(
    state: &MixtureState,
    data: &Dataset,
    hp: &Hyperparams,
    cfg: &SamplerConfig,
    rng: &mut SeededRng,
) -> Result<MixtureState> {
    let mut s = Sampler::from_state(
        data,
        hp,
        cfg.clone(),
        Exec::Sequential,
        state.clone(),
        rng.fork(),
    )?;
    s.sweep()?;
    Ok(s.into_state())
}

/// Runs one chain from a prior draw, keeping every state after burn-in.
pub fn run(data: &Dataset, hp: &Hyperparams, cfg: &SamplerConfig, exec: Exec) -> Result<Chain> {
    run_chain(data, hp, cfg, exec, SeededRng::new(cfg.seed))
}

fn run_chain(
    data: &Dataset,
    hp: &Hyperparams,
    cfg: &SamplerConfig,
    exec: Exec,
    rng: SeededRng,
) -> Result<Chain> {
    let mut sampler = Sampler::with_rng(data, hp, cfg.clone(), exec, rng)?;
    let mut samples = Vec::with_capacity(cfg.retained());
    let mut diagnostics = Vec::with_capacity(cfg.n_sweeps);
    for s in 0..cfg.n_sweeps {
        diagnostics.push(sampler.sweep()?);
        if s >= cfg.burn_in {
            samples.push(sampler.state().clone());
        }
    }
    Ok(Chain {
        samples,
        diagnostics,
    })
}

/// Runs `k` independent chains; chain `j` uses stream `j` of the configured seed,
/// so chain 0 reproduces [`run`].
pub fn run_chains(
    data: &Dataset,
    hp: &Hyperparams,
    cfg: &SamplerConfig,
    k: usize,
    exec: Exec,
) -> Result<Vec<Chain>> {
    exec.map_range(k, |j| {
        run_chain(data, hp, cfg, exec, SeededRng::stream(cfg.seed, j as u64))
    })
    .into_iter()
    .collect()
}
