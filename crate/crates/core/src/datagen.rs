//! Ancestral sampling of datasets from the full model.

use nalgebra::DVector;
use rand::seq::SliceRandom;

use crate::distributions::{mvn_sample, mvn_sample_cov, SeededRng};
use crate::error::{Error, Result};
use crate::linalg::{chol_spd, JitterSchedule};
use crate::model::{assemble_sigma, unstack_outputs, ComponentId, Dataset, Hyperparams, MixtureState};

/// A generated dataset and the state that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSet {
    pub dataset: Dataset,
    pub true_assignments: Vec<ComponentId>,
    pub true_state: MixtureState,
    pub seed: u64,
}

/// Draws α, a CRP partition and component parameters from the priors, then inputs
/// from each component's Gaussian and outputs jointly per component.
pub fn generate(n: usize, d: usize, m: usize, hp: &Hyperparams, seed: u64) -> Result<GeneratedSet> {
    if n == 0 {
        return Err(Error::OutOfRange { what: "n", value: 0 });
    }
    if hp.input_dim() != d || hp.output_dim() != m {
        return Err(Error::DimensionMismatch {
            expected: d * m,
            found: hp.input_dim() * hp.output_dim(),
        });
    }
    hp.validate()?;
    let mut rng = SeededRng::new(seed);
    let state = MixtureState::sample_prior(n, hp, &mut rng)?;
    let mut xs = vec![DVector::zeros(d); n];
    for (i, z) in state.assignments.iter().enumerate() {
        let c = &state.components[z];
        xs[i] = mvn_sample(&c.mu, &c.r, &mut rng)?;
    }
    let mut ys = vec![DVector::zeros(m); n];
    for (id, c) in &state.components {
        let members = state.members(*id);
        let mx: Vec<DVector<f64>> = members.iter().map(|i| xs[*i].clone()).collect();
        let sigma = assemble_sigma(c, &mx);
        let f = chol_spd(&sigma, &JitterSchedule::default())?;
        let stacked = mvn_sample_cov(&DVector::zeros(sigma.nrows()), &f, &mut rng);
        for (i, y) in members.iter().zip(unstack_outputs(&stacked, m)) {
            ys[*i] = y;
        }
    }
    Ok(GeneratedSet {
        dataset: Dataset::new(xs, ys, d, m)?,
        true_assignments: state.assignments.clone(),
        true_state: state,
        seed,
    })
}

/// A train/test partition with the original row indices of each side.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

/// Uniform random split without replacement; rows keep their original order.
pub fn split(data: &Dataset, n_train: usize, seed: u64) -> Result<Split> {
    let n = data.len();
    if n_train >= n {
        return Err(Error::BadSplit { n, n_train });
    }
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut SeededRng::new(seed));
    let mut train_rows = rows[..n_train].to_vec();
    let mut test_rows = rows[n_train..].to_vec();
    train_rows.sort_unstable();
    test_rows.sort_unstable();
    Ok(Split {
        train: data.subset(&train_rows),
        test: data.subset(&test_rows),
        train_rows,
        test_rows,
    })
}
