//! Perturbation operators acting on a process state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A perturbation and its parameters, e.g.
/// `{"kind":"shrink_perturb","lambda":0.4,"gamma":0.1}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationSpec {
    /// Stochastic resetting: resample the initial condition.
    FullSr,
    /// `theta <- lambda * theta + gamma * theta0'` with a fresh initial draw.
    ShrinkPerturb { lambda: f64, gamma: f64 },
    /// Re-initialize the `fraction` of parameters with the smallest magnitude.
    PartialSr { fraction: f64 },
}

impl PerturbationSpec {
    pub const SHRINK_PERTURB_DEFAULT: Self = Self::ShrinkPerturb { lambda: 0.4, gamma: 0.1 };
    pub const PARTIAL_SR_DEFAULT: Self = Self::PartialSr { fraction: 0.3 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::FullSr => Ok(()),
            Self::ShrinkPerturb { lambda, gamma } => {
                if !(lambda.is_finite() && gamma.is_finite() && lambda >= 0.0 && gamma >= 0.0) {
                    return Err(Error::invalid(format!(
                        "shrink-perturb needs finite lambda, gamma >= 0 (got {lambda}, {gamma})"
                    )));
                }
                Ok(())
            }
            Self::PartialSr { fraction } => {
                if !(fraction > 0.0 && fraction < 1.0) {
                    return Err(Error::invalid(format!("partial SR fraction {fraction} outside (0, 1)")));
                }
                Ok(())
            }
        }
    }

    /// Short stable name, used in output tables.
    pub fn label(&self) -> String {
        match *self {
            Self::FullSr => "full_sr".to_string(),
            Self::ShrinkPerturb { lambda, gamma } => format!("shrink_perturb({lambda},{gamma})"),
            Self::PartialSr { fraction } => format!("partial_sr({fraction})"),
        }
    }

    pub fn needs_parameters(&self) -> bool {
        !matches!(self, Self::FullSr)
    }
}

/// Full state of a process. Markov chains carry their state index in `aux`
/// and have no real parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub params: Vec<f64>,
    pub aux: Option<usize>,
}

impl StateVector {
    pub fn from_params(params: Vec<f64>) -> Self {
        Self { params, aux: None }
    }

    pub fn discrete(index: usize) -> Self {
        Self { params: Vec::new(), aux: Some(index) }
    }
}

/// Draws from the distribution trajectories are initialized with.
pub trait InitSampler {
    fn sample_init<R: Rng + ?Sized>(&self, rng: &mut R) -> StateVector;
}

impl<F> InitSampler for F
where
    F: Fn(&mut dyn rand::RngCore) -> StateVector,
{
    fn sample_init<R: Rng + ?Sized>(&self, mut rng: &mut R) -> StateVector {
        self(&mut rng)
    }
}

/// Number of coordinates partial SR resets on a `d`-dimensional state.
pub fn partial_count(fraction: f64, d: usize) -> usize {
    ((fraction * d as f64) + 1e-9).floor() as usize
}

/// Indices of the `k` smallest `|theta_i|`, ties broken by lower index.
pub fn smallest_magnitude_indices(params: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..params.len()).collect();
    idx.sort_by(|&a, &b| params[a].abs().total_cmp(&params[b].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn apply<S, R>(
    spec: &PerturbationSpec,
    state: &StateVector,
    init_sampler: &S,
    rng: &mut R,
) -> Result<StateVector>
where
    S: InitSampler + ?Sized,
    R: Rng + ?Sized,
{
    if spec.needs_parameters() && state.params.is_empty() {
        return Err(Error::IncompatiblePerturbation {
            perturbation: spec.label(),
            process: "state without a parameter vector".into(),
        });
    }
    match *spec {
        PerturbationSpec::FullSr => Ok(init_sampler.sample_init(rng)),
        PerturbationSpec::ShrinkPerturb { lambda, gamma } => {
            let fresh = init_sampler.sample_init(rng);
            check_dims(state, &fresh)?;
            let params = state
                .params
                .iter()
                .zip(&fresh.params)
                .map(|(&t, &t0)| lambda * t + gamma * t0)
                .collect();
            Ok(StateVector { params, aux: state.aux })
        }
        PerturbationSpec::PartialSr { fraction } => {
            let fresh = init_sampler.sample_init(rng);
            check_dims(state, &fresh)?;
            let k = partial_count(fraction, state.params.len());
            let mut params = state.params.clone();
            for i in smallest_magnitude_indices(&state.params, k) {
                params[i] = fresh.params[i];
            }
            Ok(StateVector { params, aux: state.aux })
        }
    }
}

fn check_dims(state: &StateVector, fresh: &StateVector) -> Result<()> {
    if state.params.len() != fresh.params.len() {
        return Err(Error::invalid(format!(
            "initial draw has {} parameters, state has {}",
            fresh.params.len(),
            state.params.len()
        )));
    }
    Ok(())
}
