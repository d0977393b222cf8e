//! Indicator updates with one auxiliary component.
//!
//! For point `i` currently in component `r`, the candidates are every other live
//! component (weight `n_{-i}`), `r` itself when `i` is not alone there (weight
//! `n_r - 1`), and one auxiliary component with weight `α`. The auxiliary takes fresh
//! prior parameters unless `i` is a singleton, in which case it carries `r`'s own
//! parameters and choosing it leaves `i` where it is.
//!
//! Each weight is multiplied by the GP conditional of `y_i` given the candidate's
//! other members and by the Gaussian input density of `x_i`.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::distributions::{sample_log_categorical, GaussianPrecision, SeededRng};
use crate::error::Result;
use crate::exec::Exec;
use crate::model::{log_marginal_y, stack_outputs, Component, ComponentId, Dataset, Hyperparams, MixtureState};
use crate::structured::ComponentCache;

/// Source of parameters for a freshly opened component.
pub trait ComponentSource: Sync {
    fn draw(&self, rng: &mut SeededRng) -> Result<Component>;
}

impl ComponentSource for Hyperparams {
    fn draw(&self, rng: &mut SeededRng) -> Result<Component> {
        Component::sample_prior(self, rng)
    }
}

/// Outcome of one indicator draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    Existing(ComponentId),
    New,
}

/// Likelihood caches for every live component, kept in step with the assignments.
#[derive(Debug, Clone)]
pub struct IndicatorSampler {
    caches: BTreeMap<ComponentId, ComponentCache>,
    inputs: BTreeMap<ComponentId, GaussianPrecision>,
}

impl IndicatorSampler {
    pub fn new(state: &MixtureState, data: &Dataset, exec: Exec) -> Result<Self> {
        let mut members: BTreeMap<ComponentId, Vec<usize>> =
            state.components.keys().map(|id| (*id, Vec::new())).collect();
        for (i, z) in state.assignments.iter().enumerate() {
            members.entry(*z).or_default().push(i);
        }
        let jobs: Vec<(ComponentId, &Component, Vec<usize>)> = state
            .components
            .iter()
            .map(|(id, c)| (*id, c, members.remove(id).unwrap_or_default()))
            .collect();
        let built = exec.map(&jobs, |(id, c, m)| -> Result<_> {
            Ok((
                *id,
                ComponentCache::build(c, data, m)?,
                GaussianPrecision::new(&c.mu, &c.r)?,
            ))
        });
        let mut caches = BTreeMap::new();
        let mut inputs = BTreeMap::new();
        for b in built {
            let (id, cache, input) = b?;
            caches.insert(id, cache);
            inputs.insert(id, input);
        }
        Ok(Self { caches, inputs })
    }

    pub fn caches(&self) -> &BTreeMap<ComponentId, ComponentCache> {
        &self.caches
    }

    pub fn log_marginal(&self, id: ComponentId) -> f64 {
        self.caches.get(&id).map_or(0.0, |c| c.log_marginal())
    }

    /// Unnormalized log weights for every candidate of point `i`. `aux` is the
    /// auxiliary component's parameters.
    pub fn log_weights(
        &self,
        i: usize,
        state: &MixtureState,
        data: &Dataset,
        aux: &Component,
        exec: Exec,
    ) -> Result<Vec<(Choice, f64)>> {
        let (x, y) = (&data.xs[i], &data.ys[i]);
        let current = state.assignments[i];
        let own = &self.caches[&current];
        let p = own.position(i).expect("point is cached in its component");
        let singleton = own.len() == 1;

        let candidates: Vec<(ComponentId, &ComponentCache)> = self
            .caches
            .iter()
            .filter(|(id, _)| !(singleton && **id == current))
            .map(|(id, c)| (*id, c))
            .collect();
        let mut out: Vec<(Choice, f64)> = exec.map(&candidates, |(id, cache)| {
            let (count, cond) = if *id == current {
                (cache.len() - 1, cache.conditional_loo(p))
            } else {
                (cache.len(), cache.conditional_new(x, y))
            };
            let lw = (count as f64).ln() + cond + self.inputs[id].logpdf(x);
            (Choice::Existing(*id), lw)
        });

        let aux_cache = ComponentCache::from_points(aux, Vec::new(), Vec::new(), &[])?;
        let aux_input = GaussianPrecision::new(&aux.mu, &aux.r)?;
        let lw = state.alpha.ln() + aux_cache.conditional_new(x, y) + aux_input.logpdf(x);
        out.push((Choice::New, lw));
        Ok(out)
    }

    /// Resamples the indicator of point `i` and updates `state` and the caches.
    pub fn update<S: ComponentSource + ?Sized>(
        &mut self,
        i: usize,
        state: &mut MixtureState,
        data: &Dataset,
        source: &S,
        rng: &mut SeededRng,
        exec: Exec,
    ) -> Result<Choice> {
        let current = state.assignments[i];
        let singleton = self.caches[&current].len() == 1;
        let aux = if singleton {
            state.components[&current].clone()
        } else {
            source.draw(rng)?
        };
        let weights = self.log_weights(i, state, data, &aux, exec)?;
        let lw: Vec<f64> = weights.iter().map(|(_, w)| *w).collect();
        let choice = weights[sample_log_categorical(&lw, rng)].0;

        match choice {
            Choice::Existing(id) if id == current => {}
            Choice::New if singleton => {}
            Choice::Existing(id) => {
                self.detach(i, current, state)?;
                self.caches
                    .get_mut(&id)
                    .expect("live component")
                    .insert(i, &data.xs[i], &data.ys[i])?;
                state.assignments[i] = id;
            }
            Choice::New => {
                self.detach(i, current, state)?;
                let input = GaussianPrecision::new(&aux.mu, &aux.r)?;
                let cache = ComponentCache::from_points(
                    &aux,
                    vec![i],
                    vec![data.xs[i].clone()],
                    &[data.ys[i].clone()],
                )?;
                let id = state.insert(aux);
                self.caches.insert(id, cache);
                self.inputs.insert(id, input);
                state.assignments[i] = id;
            }
        }
        Ok(choice)
    }

    fn detach(&mut self, i: usize, from: ComponentId, state: &mut MixtureState) -> Result<()> {
        let cache = self.caches.get_mut(&from).expect("live component");
        if cache.len() == 1 {
            self.caches.remove(&from);
            self.inputs.remove(&from);
            state.components.remove(&from);
        } else {
            let p = cache.position(i).expect("point is cached in its component");
            cache.remove(p)?;
        }
        Ok(())
    }
}

/// Resamples `z_i` once, drawing auxiliary parameters from the priors.
pub fn update_indicator(
    i: usize,
    state: &MixtureState,
    data: &Dataset,
    hp: &Hyperparams,
    rng: &mut SeededRng,
) -> Result<MixtureState> {
    let mut next = state.clone();
    let mut sampler = IndicatorSampler::new(&next, data, Exec::Sequential)?;
    sampler.update(i, &mut next, data, hp, rng, Exec::Sequential)?;
    Ok(next)
}

/// Log weights of the indicator conditional for point `i`. `fresh` stands in for the
/// auxiliary component unless `i` is alone in its component.
pub fn indicator_log_weights(
    i: usize,
    state: &MixtureState,
    data: &Dataset,
    fresh: &Component,
) -> Result<Vec<(Choice, f64)>> {
    let sampler = IndicatorSampler::new(state, data, Exec::Sequential)?;
    let current = state.assignments[i];
    let aux = if sampler.caches[&current].len() == 1 {
        &state.components[&current]
    } else {
        fresh
    };
    sampler.log_weights(i, state, data, aux, Exec::Sequential)
}

/// `ln p(y_i | {y_j : j ∈ others}, x's, params)` from the dense joint covariance.
///
/// `others` must not contain `i`. With no other points this is the marginal
/// `N(0, σ0 K + diag(noise))`.
pub fn gp_conditional_logpdf(
    i: usize,
    params: &Component,
    others: &[usize],
    data: &Dataset,
) -> Result<f64> {
    let xs: Vec<DVector<f64>> = others.iter().map(|j| data.xs[*j].clone()).collect();
    let ys: Vec<DVector<f64>> = others.iter().map(|j| data.ys[*j].clone()).collect();
    let base = log_marginal_y(params, &xs, &stack_outputs(&ys))?;
    let mut xs_all = xs;
    xs_all.push(data.xs[i].clone());
    let mut ys_all = ys;
    ys_all.push(data.ys[i].clone());
    Ok(log_marginal_y(params, &xs_all, &stack_outputs(&ys_all))? - base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{mvn_logpdf, mvn_logpdf_cov};
    use crate::linalg::{chol_spd, JitterSchedule};
    use crate::model::tests::random_component;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn dataset(n: usize, d: usize, m: usize, rng: &mut SeededRng) -> Dataset {
        let xs = (0..n)
            .map(|_| DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        let ys = (0..n)
            .map(|_| DVector::from_fn(m, |_, _| rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        Dataset::new(xs, ys, d, m).unwrap()
    }

    struct Fixed(Component);
    impl ComponentSource for Fixed {
        fn draw(&self, _: &mut SeededRng) -> Result<Component> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn empty_conditional_is_prior_marginal() {
        let mut rng = SeededRng::new(1);
        let data = dataset(3, 2, 2, &mut rng);
        let c = random_component(2, 2, &mut rng);
        let cov = &c.k * c.sigma0 + DMatrix::from_diagonal(&c.noise);
        let f = chol_spd(&cov, &JitterSchedule::exact()).unwrap();
        assert_relative_eq!(
            gp_conditional_logpdf(0, &c, &[], &data).unwrap(),
            mvn_logpdf_cov(&data.ys[0], &DVector::zeros(2), &f),
            epsilon = 1e-10
        );
    }

    #[test]
    fn single_output_conditional_is_textbook_predictive() {
        let mut rng = SeededRng::new(2);
        let data = dataset(4, 2, 1, &mut rng);
        let c = random_component(2, 1, &mut rng);
        let s = c.sigma0 * c.k[(0, 0)];
        let others = [1, 2, 3];
        let kmat = DMatrix::from_fn(3, 3, |a, b| {
            s * crate::model::kernel(&data.xs[others[a]], &data.xs[others[b]], &c.w).unwrap()
                + if a == b { c.noise[0] } else { 0.0 }
        });
        let kvec = DVector::from_fn(3, |a, _| {
            s * crate::model::kernel(&data.xs[0], &data.xs[others[a]], &c.w).unwrap()
        });
        let y = DVector::from_fn(3, |a, _| data.ys[others[a]][0]);
        let inv = kmat.try_inverse().unwrap();
        let mean = kvec.dot(&(&inv * &y));
        let var = s + c.noise[0] - kvec.dot(&(&inv * &kvec));
        let oracle = -0.5 * ((2.0 * std::f64::consts::PI * var).ln()
            + (data.ys[0][0] - mean).powi(2) / var);
        assert_relative_eq!(
            gp_conditional_logpdf(0, &c, &others, &data).unwrap(),
            oracle,
            epsilon = 1e-9
        );
    }

    #[test]
    fn weights_match_direct_three_factor_evaluation() {
        let mut rng = SeededRng::new(3);
        for _ in 0..20 {
            let data = dataset(4, 2, 2, &mut rng);
            let a = random_component(2, 2, &mut rng);
            let b = random_component(2, 2, &mut rng);
            let fresh = random_component(2, 2, &mut rng);
            let mut comps = BTreeMap::new();
            comps.insert(ComponentId(0), a.clone());
            comps.insert(ComponentId(1), b.clone());
            let z = vec![ComponentId(0), ComponentId(0), ComponentId(1), ComponentId(1)];
            let state = MixtureState::new(0.7, z, comps);
            let w = indicator_log_weights(0, &state, &data, &fresh).unwrap();
            let x = &data.xs[0];
            let direct = [
                1f64.ln() + gp_conditional_logpdf(0, &a, &[1], &data).unwrap()
                    + mvn_logpdf(x, &a.mu, &a.r).unwrap(),
                2f64.ln() + gp_conditional_logpdf(0, &b, &[2, 3], &data).unwrap()
                    + mvn_logpdf(x, &b.mu, &b.r).unwrap(),
                0.7f64.ln() + gp_conditional_logpdf(0, &fresh, &[], &data).unwrap()
                    + mvn_logpdf(x, &fresh.mu, &fresh.r).unwrap(),
            ];
            assert_eq!(w.len(), 3);
            assert_eq!(w[2].0, Choice::New);
            for (got, want) in w.iter().zip(direct) {
                assert_relative_eq!(got.1, want, epsilon = 1e-10, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn singleton_auxiliary_reuses_own_parameters() {
        let mut rng = SeededRng::new(4);
        let data = dataset(2, 1, 1, &mut rng);
        let a = random_component(1, 1, &mut rng);
        let b = random_component(1, 1, &mut rng);
        let fresh = random_component(1, 1, &mut rng);
        let mut comps = BTreeMap::new();
        comps.insert(ComponentId(0), a.clone());
        comps.insert(ComponentId(1), b);
        let state = MixtureState::new(1.3, vec![ComponentId(0), ComponentId(1)], comps);
        let w = indicator_log_weights(0, &state, &data, &fresh).unwrap();
        assert_eq!(w.len(), 2);
        let own = 1.3f64.ln()
            + gp_conditional_logpdf(0, &a, &[], &data).unwrap()
            + mvn_logpdf(&data.xs[0], &a.mu, &a.r).unwrap();
        assert_relative_eq!(w[1].1, own, epsilon = 1e-10);
    }

    #[test]
    fn single_point_keeps_one_component() {
        let mut rng = SeededRng::new(5);
        let data = dataset(1, 2, 2, &mut rng);
        let hp = Hyperparams::generation_preset(2, 2);
        let mut state = MixtureState::sample_prior(1, &hp, &mut rng).unwrap();
        for _ in 0..50 {
            state = update_indicator(0, &state, &data, &hp, &mut rng).unwrap();
            assert_eq!(state.num_components(), 1);
            state.check_invariants().unwrap();
        }
    }

    #[test]
    fn two_identical_points_follow_crp() {
        // Identical inputs and outputs with one fixed parameter set make every
        // likelihood factor equal, leaving the CRP term: P(join) = 1 / (1 + α).
        let mut rng = SeededRng::new(6);
        let c = random_component(1, 1, &mut rng);
        let x = DVector::from_vec(vec![0.2]);
        let y = DVector::from_vec(vec![0.1]);
        let data = Dataset::new(vec![x.clone(), x], vec![y.clone(), y], 1, 1).unwrap();
        let alpha = 0.6;
        let mut comps = BTreeMap::new();
        comps.insert(ComponentId(0), c.clone());
        comps.insert(ComponentId(1), c.clone());
        let state = MixtureState::new(alpha, vec![ComponentId(0), ComponentId(1)], comps);
        let w = indicator_log_weights(1, &state, &data, &c).unwrap();
        let probs = crate::distributions::normalize_log_weights(
            &w.iter().map(|(_, v)| *v).collect::<Vec<_>>(),
        );
        // candidates: join component 0, or stay alone (auxiliary)
        let cond_alone = gp_conditional_logpdf(1, &c, &[], &data).unwrap();
        let cond_join = gp_conditional_logpdf(1, &c, &[0], &data).unwrap();
        let ratio = (cond_join - cond_alone).exp();
        let expected = ratio / (ratio + alpha);
        assert_relative_eq!(probs[0], expected, epsilon = 1e-10);

        // with the likelihood ratio neutralized the CRP value remains
        let crp = 1.0 / (1.0 + alpha);
        let neutral = (probs[0] / ratio) / (probs[0] / ratio + probs[1]);
        assert_relative_eq!(neutral, crp, epsilon = 1e-10);
    }

    #[test]
    fn far_point_opens_new_component() {
        let mut rng = SeededRng::new(7);
        let data = {
            let mut d = dataset(3, 2, 1, &mut rng);
            d.xs[0] = DVector::from_vec(vec![500.0, 500.0]);
            d
        };
        let mut a = random_component(2, 1, &mut rng);
        a.mu = DVector::zeros(2);
        a.r = DMatrix::identity(2, 2);
        let mut fresh = a.clone();
        fresh.mu = DVector::from_vec(vec![500.0, 500.0]);
        let mut comps = BTreeMap::new();
        comps.insert(ComponentId(0), a);
        let state = MixtureState::new(10.0, vec![ComponentId(0); 3], comps);
        let w = indicator_log_weights(0, &state, &data, &fresh).unwrap();
        let probs = crate::distributions::normalize_log_weights(
            &w.iter().map(|(_, v)| *v).collect::<Vec<_>>(),
        );
        assert!(probs[1] > 0.99);
    }

    #[test]
    fn frozen_source_moves_are_consistent() {
        let mut rng = SeededRng::new(8);
        let data = dataset(6, 2, 2, &mut rng);
        let hp = Hyperparams::generation_preset(2, 2);
        let mut state = MixtureState::sample_prior(6, &hp, &mut rng).unwrap();
        let src = Fixed(random_component(2, 2, &mut rng));
        let mut sampler = IndicatorSampler::new(&state, &data, Exec::Sequential).unwrap();
        for sweep in 0..30 {
            for i in 0..6 {
                sampler
                    .update(i, &mut state, &data, &src, &mut rng, Exec::Sequential)
                    .unwrap();
            }
            state.check_invariants().unwrap();
            let fresh = IndicatorSampler::new(&state, &data, Exec::Sequential).unwrap();
            for id in state.components.keys() {
                assert_relative_eq!(
                    sampler.log_marginal(*id),
                    fresh.log_marginal(*id),
                    epsilon = 1e-8,
                    max_relative = 1e-8
                );
                let mut a = sampler.caches()[id].members().to_vec();
                a.sort();
                assert_eq!(a, state.members(*id), "sweep {sweep}");
            }
        }
    }
}
