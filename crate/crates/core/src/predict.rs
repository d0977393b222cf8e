//! Predictive means averaged over posterior samples.
//!
//! Within one sample the prediction at `x*` mixes the component GP posterior means,
//! weighted by `N_r / (α + N) · N(x* | μ_r, R_r^{-1})`. [`Mode::Immgp2`] also lets
//! `x*` open a new component, weighted by `α / (α + N)` times the prior predictive
//! density of `x*`, which is estimated by Monte Carlo over prior draws of `(μ, R)`.
//! A new component contributes a zero mean.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distributions::{mvn_sample, wishart_sample, GaussianPrecision, SeededRng};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{ComponentId, Dataset, Hyperparams, MixtureState};
use crate::structured::ComponentCache;

pub const DEFAULT_MC_DRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Existing components only.
    #[default]
    Immgp1,
    /// Existing components plus one new component.
    Immgp2,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Immgp1 => "immgp1",
            Mode::Immgp2 => "immgp2",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "immgp1" => Ok(Mode::Immgp1),
            "immgp2" => Ok(Mode::Immgp2),
            _ => Err(Error::InvalidConfig(format!("unknown mode `{s}`"))),
        }
    }
}

/// Monte Carlo estimate of a density, on the log scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub log_mean: f64,
    /// Standard error of the estimate relative to its value.
    pub rel_std_error: f64,
}

/// Prior draws of the input Gaussian shared by every sample of one prediction.
#[derive(Debug, Clone)]
pub struct PriorDraws(Vec<GaussianPrecision>);

impl PriorDraws {
    pub fn sample(hp: &Hyperparams, n: usize, rng: &mut SeededRng) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("mc_draws must be at least 1".into()));
        }
        let draws = (0..n)
            .map(|_| {
                let mu = mvn_sample(&hp.mu0, &hp.r0, rng)?;
                let r = wishart_sample(&hp.w0, hp.nu0, rng)?;
                GaussianPrecision::new(&mu, &r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self(draws))
    }

    /// Estimate of `∫ N(x | μ, R^{-1}) p(μ) p(R) dμ dR`.
    pub fn estimate(&self, x: &DVector<f64>) -> McEstimate {
        let logs: Vec<f64> = self.0.iter().map(|g| g.logpdf(x)).collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let n = logs.len() as f64;
        let scaled: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let mean = scaled.iter().sum::<f64>() / n;
        let var = if logs.len() > 1 {
            scaled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        McEstimate {
            log_mean: top + mean.ln(),
            rel_std_error: (var / n).sqrt() / mean,
        }
    }
}

fn log_weights(
    sample: &MixtureState,
    inputs: &[(f64, GaussianPrecision)],
    x: &DVector<f64>,
    mode: Mode,
    log_new_density: Option<f64>,
) -> Vec<f64> {
    let norm = (sample.alpha + sample.len() as f64).ln();
    let mut lw: Vec<f64> = inputs
        .iter()
        .map(|(log_count, g)| log_count - norm + g.logpdf(x))
        .collect();
    if mode == Mode::Immgp2 {
        let new = log_new_density.expect("new-component density is required in this mode");
        lw.push(sample.alpha.ln() - norm + new);
    }
    lw
}

/// Log sizes and input densities of the live components, in id order.
fn input_densities(sample: &MixtureState) -> Result<Vec<(f64, GaussianPrecision)>> {
    let counts = sample.counts();
    sample
        .components
        .iter()
        .map(|(id, c)| {
            let n = counts.get(id).copied().unwrap_or(0) as f64;
            Ok((n.ln(), GaussianPrecision::new(&c.mu, &c.r)?))
        })
        .collect()
}

/// Posterior probabilities of `z*` over live components in id order, followed by the
/// new component in [`Mode::Immgp2`].
pub fn responsibilities(
    xstar: &DVector<f64>,
    sample: &MixtureState,
    hp: &Hyperparams,
    mode: Mode,
    mc_draws: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let new = match mode {
        Mode::Immgp1 => None,
        Mode::Immgp2 => Some(PriorDraws::sample(hp, mc_draws, rng)?.estimate(xstar).log_mean),
    };
    let lw = log_weights(sample, &input_densities(sample)?, xstar, mode, new);
    Ok(crate::distributions::normalize_log_weights(&lw))
}

/// GP posterior mean and covariance of `f*` under component `id`.
pub fn component_predict(
    xstar: &DVector<f64>,
    id: ComponentId,
    sample: &MixtureState,
    data: &Dataset,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let c = sample
        .components
        .get(&id)
        .ok_or(Error::OutOfRange {
            what: "component id",
            value: id.0 as usize,
        })?;
    let cache = ComponentCache::build(c, data, &sample.members(id))?;
    Ok(cache.predict(c, xstar))
}

/// Everything needed to predict from one sample.
struct SampleModel<'a> {
    sample: &'a MixtureState,
    inputs: Vec<(f64, GaussianPrecision)>,
    caches: Vec<ComponentCache>,
}

impl<'a> SampleModel<'a> {
    fn build(sample: &'a MixtureState, data: &Dataset) -> Result<Self> {
        let inputs = input_densities(sample)?;
        let caches = sample
            .components
            .iter()
            .map(|(id, c)| ComponentCache::build(c, data, &sample.members(*id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sample,
            inputs,
            caches,
        })
    }

    fn mean(&self, x: &DVector<f64>, mode: Mode, log_new: Option<f64>) -> DVector<f64> {
        let lw = log_weights(self.sample, &self.inputs, x, mode, log_new);
        let p = crate::distributions::normalize_log_weights(&lw);
        let mut out = DVector::zeros(self.sample_output_dim());
        for ((cache, c), pr) in self.caches.iter().zip(self.sample.components.values()).zip(&p) {
            out += cache.predict_mean(c, x) * *pr;
        }
        out
    }

    fn sample_output_dim(&self) -> usize {
        self.sample
            .components
            .values()
            .next()
            .map_or(0, |c| c.output_dim())
    }
}

/// Averaged prediction at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub per_sample_means: Vec<DVector<f64>>,
    pub mode: Mode,
    /// New-component density estimate, present in [`Mode::Immgp2`].
    pub new_density: Option<McEstimate>,
}

fn new_density(
    x: &DVector<f64>,
    hp: &Hyperparams,
    mode: Mode,
    mc_draws: usize,
    rng: &mut SeededRng,
) -> Result<Option<McEstimate>> {
    match mode {
        Mode::Immgp1 => Ok(None),
        Mode::Immgp2 => Ok(Some(PriorDraws::sample(hp, mc_draws, rng)?.estimate(x))),
    }
}

fn check_chain(chain: &[MixtureState], data: &Dataset) -> Result<()> {
    if chain.is_empty() {
        return Err(Error::InvalidConfig("chain has no samples".into()));
    }
    for s in chain {
        if s.len() != data.len() {
            return Err(Error::LengthMismatch {
                left: s.len(),
                right: data.len(),
            });
        }
    }
    Ok(())
}

/// Prediction at `xstar` averaged over every sample in `chain`.
pub fn predict(
    xstar: &DVector<f64>,
    chain: &[MixtureState],
    data: &Dataset,
    hp: &Hyperparams,
    mode: Mode,
    mc_draws: usize,
    rng: &mut SeededRng,
) -> Result<Prediction> {
    check_chain(chain, data)?;
    let nd = new_density(xstar, hp, mode, mc_draws, rng)?;
    let log_new = nd.map(|e| e.log_mean);
    let per_sample_means = chain
        .iter()
        .map(|s| Ok(SampleModel::build(s, data)?.mean(xstar, mode, log_new)))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = DVector::zeros(data.output_dim());
    for m in &per_sample_means {
        mean += m;
    }
    mean /= chain.len() as f64;
    Ok(Prediction {
        mean,
        per_sample_means,
        mode,
        new_density: nd,
    })
}

/// Predictions for many points. Point `j` draws its Monte Carlo estimate from stream
/// `j` of `seed`, so it equals [`predict`] with `SeededRng::stream(seed, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPrediction {
    pub means: Vec<DVector<f64>>,
    pub new_density: Vec<Option<McEstimate>>,
}

pub fn predict_batch(
    xs: &[DVector<f64>],
    chain: &[MixtureState],
    data: &Dataset,
    hp: &Hyperparams,
    mode: Mode,
    mc_draws: usize,
    seed: u64,
    exec: Exec,
) -> Result<BatchPrediction> {
    check_chain(chain, data)?;
    let new_density = exec
        .map_range(xs.len(), |j| {
            let mut rng = SeededRng::stream(seed, j as u64);
            new_density(&xs[j], hp, mode, mc_draws, &mut rng)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let per_sample = exec.map(chain, |s| -> Result<Vec<DVector<f64>>> {
        let model = SampleModel::build(s, data)?;
        Ok(xs
            .iter()
            .zip(&new_density)
            .map(|(x, nd)| model.mean(x, mode, nd.map(|e| e.log_mean)))
            .collect())
    });
    let mut means = vec![DVector::zeros(data.output_dim()); xs.len()];
    for contrib in per_sample {
        for (acc, m) in means.iter_mut().zip(contrib?) {
            *acc += m;
        }
    }
    for m in means.iter_mut() {
        *m /= chain.len() as f64;
    }
    Ok(BatchPrediction { means, new_density })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::random_component;
    use crate::model::Component;
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    fn one_component(seed: u64, n: usize) -> (MixtureState, Dataset, Component) {
        let mut rng = SeededRng::new(seed);
        let c = random_component(2, 2, &mut rng);
        let xs: Vec<_> = crate::model::tests::random_points(n, 2, &mut rng);
        let ys: Vec<_> = (0..n)
            .map(|_| DVector::from_fn(2, |_, _| crate::distributions::standard_normal(&mut rng)))
            .collect();
        let data = Dataset::new(xs, ys, 2, 2).unwrap();
        let mut comps = BTreeMap::new();
        comps.insert(ComponentId(0), c.clone());
        (MixtureState::new(0.8, vec![ComponentId(0); n], comps), data, c)
    }

    #[test]
    fn single_component_immgp1_weight_is_one() {
        let (s, _, _) = one_component(1, 3);
        let hp = Hyperparams::generation_preset(2, 2);
        let mut rng = SeededRng::new(0);
        let r = responsibilities(&DVector::from_vec(vec![0.1, 0.2]), &s, &hp, Mode::Immgp1, 1, &mut rng)
            .unwrap();
        assert_eq!(r, vec![1.0]);
    }

    #[test]
    fn symmetric_components_split_evenly() {
        let (mut s, _, c) = one_component(2, 4);
        s.components.insert(ComponentId(1), c);
        s.assignments = vec![ComponentId(0), ComponentId(0), ComponentId(1), ComponentId(1)];
        let hp = Hyperparams::generation_preset(2, 2);
        let mut rng = SeededRng::new(0);
        let r = responsibilities(&DVector::from_vec(vec![0.3, -0.4]), &s, &hp, Mode::Immgp1, 1, &mut rng)
            .unwrap();
        assert_relative_eq!(r[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(r[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn responsibilities_sum_to_one() {
        let (s, _, _) = one_component(3, 3);
        let hp = Hyperparams::generation_preset(2, 2);
        let mut rng = SeededRng::new(0);
        for mode in [Mode::Immgp1, Mode::Immgp2] {
            let r = responsibilities(&DVector::from_vec(vec![5.0, -3.0]), &s, &hp, mode, 50, &mut rng)
                .unwrap();
            assert_relative_eq!(r.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(r.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn single_sample_matches_component_predict() {
        let (s, data, _) = one_component(4, 5);
        let hp = Hyperparams::generation_preset(2, 2);
        let x = DVector::from_vec(vec![0.2, 0.1]);
        let mut rng = SeededRng::new(0);
        let p = predict(&x, &[s.clone()], &data, &hp, Mode::Immgp1, 1, &mut rng).unwrap();
        let (m, _) = component_predict(&x, ComponentId(0), &s, &data).unwrap();
        assert_relative_eq!(p.mean, m, epsilon = 1e-12);
    }

    #[test]
    fn immgp2_shrinks_by_new_responsibility() {
        let (s, data, _) = one_component(5, 5);
        let hp = Hyperparams::generation_preset(2, 2);
        let x = DVector::from_vec(vec![0.2, 0.1]);
        let p = predict(&x, &[s.clone()], &data, &hp, Mode::Immgp2, 30, &mut SeededRng::new(7)).unwrap();
        let r = responsibilities(&x, &s, &hp, Mode::Immgp2, 30, &mut SeededRng::new(7)).unwrap();
        let (m, _) = component_predict(&x, ComponentId(0), &s, &data).unwrap();
        assert_relative_eq!(p.mean, m * (1.0 - r[1]), epsilon = 1e-12);
    }

    #[test]
    fn tiny_alpha_makes_modes_agree() {
        let (mut s, data, _) = one_component(6, 5);
        s.alpha = 1e-300;
        let hp = Hyperparams::generation_preset(2, 2);
        let x = DVector::from_vec(vec![0.0, 0.5]);
        let a = predict(&x, &[s.clone()], &data, &hp, Mode::Immgp1, 10, &mut SeededRng::new(1)).unwrap();
        let b = predict(&x, &[s], &data, &hp, Mode::Immgp2, 10, &mut SeededRng::new(1)).unwrap();
        assert_relative_eq!(a.mean, b.mean, epsilon = 1e-12);
    }

    #[test]
    fn batch_matches_single_point_calls() {
        let (s, data, _) = one_component(8, 6);
        let mut s2 = s.clone();
        s2.alpha = 2.0;
        let chain = vec![s, s2];
        let hp = Hyperparams::generation_preset(2, 2);
        let xs = vec![DVector::from_vec(vec![0.1, 0.1]), DVector::from_vec(vec![-1.0, 2.0])];
        let batch = predict_batch(&xs, &chain, &data, &hp, Mode::Immgp2, 20, 42, Exec::default()).unwrap();
        for (j, x) in xs.iter().enumerate() {
            let mut rng = SeededRng::stream(42, j as u64);
            let p = predict(x, &chain, &data, &hp, Mode::Immgp2, 20, &mut rng).unwrap();
            assert_relative_eq!(batch.means[j], p.mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn sample_order_does_not_matter() {
        let (s, data, _) = one_component(9, 4);
        let mut s2 = s.clone();
        s2.components.get_mut(&ComponentId(0)).unwrap().sigma0 *= 3.0;
        let hp = Hyperparams::generation_preset(2, 2);
        let x = DVector::from_vec(vec![0.4, 0.4]);
        let a = predict(&x, &[s.clone(), s2.clone()], &data, &hp, Mode::Immgp1, 1, &mut SeededRng::new(0)).unwrap();
        let b = predict(&x, &[s2, s], &data, &hp, Mode::Immgp1, 1, &mut SeededRng::new(0)).unwrap();
        assert_relative_eq!(a.mean, b.mean, epsilon = 1e-14);
    }

    #[test]
    fn mc_estimate_of_point_mass_prior_is_exact() {
        // With ν0 large the Wishart draws concentrate, so the estimate approaches the
        // density at the prior mean with tiny relative error.
        let mut hp = Hyperparams::generation_preset(1, 1);
        hp.r0 = DMatrix::from_element(1, 1, 1e12);
        hp.nu0 = 1e8;
        hp.w0 = DMatrix::from_element(1, 1, 1e-8);
        let draws = PriorDraws::sample(&hp, 200, &mut SeededRng::new(3)).unwrap();
        let x = DVector::from_vec(vec![0.5]);
        let est = draws.estimate(&x);
        let exact = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.125;
        assert_relative_eq!(est.log_mean, exact, epsilon = 1e-3);
        assert!(est.rel_std_error < 1e-3);
    }

    #[test]
    fn mode_parses() {
        assert_eq!("IMMGP2".parse::<Mode>().unwrap(), Mode::Immgp2);
        assert!("other".parse::<Mode>().is_err());
    }
}
