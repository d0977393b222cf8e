//! Random-walk Metropolis-Hastings on `ln α`.

use rand::Rng;
use statrs::function::gamma::ln_gamma;

use crate::distributions::{standard_normal, SeededRng};
use crate::model::Hyperparams;

/// `ln p(α | c, N)` up to a constant, with a `Gamma(a0, b0)` prior.
pub fn log_alpha_target(alpha: f64, c: usize, n: usize, a0: f64, b0: f64) -> f64 {
    if !(alpha > 0.0) {
        return f64::NEG_INFINITY;
    }
    (c as f64 + a0 - 1.0) * alpha.ln() - b0 * alpha + ln_gamma(alpha) - ln_gamma(n as f64 + alpha)
}

/// Log acceptance ratio for moving from `alpha` to `proposal` under a log-scale walk.
pub fn alpha_log_ratio(alpha: f64, proposal: f64, c: usize, n: usize, hp: &Hyperparams) -> f64 {
    log_alpha_target(proposal, c, n, hp.a0, hp.b0) - log_alpha_target(alpha, c, n, hp.a0, hp.b0)
        + proposal.ln()
        - alpha.ln()
}

/// One MH step with proposal `ln α' = ln α + scale · ε`.
pub fn mh_update_alpha(
    alpha: f64,
    c: usize,
    n: usize,
    hp: &Hyperparams,
    scale: f64,
    rng: &mut SeededRng,
) -> (f64, bool) {
    let proposal = (alpha.ln() + scale * standard_normal(rng)).exp();
    let u: f64 = rng.random();
    if proposal > 0.0 && proposal.is_finite() && u.ln() < alpha_log_ratio(alpha, proposal, c, n, hp) {
        (proposal, true)
    } else {
        (alpha, false)
    }
}
