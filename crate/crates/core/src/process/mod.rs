//! Trajectory ensembles under the unperturbed, every-`P` and once-at-`P*`
//! protocols.
//!
//! Each epoch advances the dynamics, records the collective variable and checks
//! the target. A perturbation scheduled for epoch `t` is applied after that
//! check, so a trajectory absorbed exactly at `t` is never perturbed. Trajectory
//! `i` always uses the substreams of `trajectory_seed(master_seed, i)`, which
//! makes protocols comparable seed by seed: up to its first perturbation a
//! perturbed trajectory is identical to its unperturbed twin.

mod models;

pub use models::{
    DoubleWellParams, DriftWalkerParams, MarkovChainParams, Model, ProcessKind, ToySgd, ToySgdParams,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpt::{stderr_of, Ensemble, Target, Trajectory};
use crate::perturb::{apply, InitSampler, PerturbationSpec};
use crate::rng::{trajectory_seed, Streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpec {
    #[serde(flatten)]
    pub kind: ProcessKind,
    pub horizon: usize,
    pub target: Target,
}

impl ProcessSpec {
    pub fn double_well() -> Self {
        Self {
            kind: ProcessKind::DoubleWell(DoubleWellParams::default()),
            horizon: 300,
            target: Target::at_least(0.8),
        }
    }

    pub fn toy_sgd() -> Self {
        Self {
            kind: ProcessKind::ToySgd(ToySgdParams::default()),
            horizon: 300,
            target: Target::at_most(0.0328),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be positive"));
        }
        self.target.validate()?;
        self.kind.validate()
    }

    /// Stable identifier of the process definition.
    pub fn fingerprint(&self) -> String {
        format!("{:016x}", fnv1a(format!("{:?}|{}|{:?}", self.kind, self.horizon, self.target).as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    Unperturbed,
    /// Perturb at every positive multiple of `p` until absorption.
    EveryP { p: usize, perturbation: PerturbationSpec },
    /// Perturb once, after epoch `p_star`.
    OnceAtPStar { p_star: usize, perturbation: PerturbationSpec },
}

impl Protocol {
    pub fn perturbation(&self) -> Option<&PerturbationSpec> {
        match self {
            Protocol::Unperturbed => None,
            Protocol::EveryP { perturbation, .. } | Protocol::OnceAtPStar { perturbation, .. } => {
                Some(perturbation)
            }
        }
    }

    fn perturbs_after(&self, t: usize) -> bool {
        match *self {
            Protocol::Unperturbed => false,
            Protocol::EveryP { p, .. } => t.is_multiple_of(p),
            Protocol::OnceAtPStar { p_star, .. } => t == p_star,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Protocol::Unperturbed => Ok(()),
            Protocol::EveryP { p: 0, .. } => Err(Error::invalid("P must be positive")),
            Protocol::OnceAtPStar { p_star: 0, .. } => Err(Error::invalid("p_star must be positive")),
            Protocol::EveryP { perturbation, .. } | Protocol::OnceAtPStar { perturbation, .. } => {
                perturbation.validate()
            }
        }
    }
}

fn check_compatible(model: &Model, perturbation: Option<&PerturbationSpec>) -> Result<()> {
    match perturbation {
        Some(spec) if spec.needs_parameters() && !model.has_parameters() => {
            Err(Error::IncompatiblePerturbation {
                perturbation: spec.label(),
                process: model.name().into(),
            })
        }
        _ => Ok(()),
    }
}

/// Simulates one trajectory for at most `horizon` epochs.
fn run_trajectory(
    model: &Model,
    target: &Target,
    horizon: usize,
    protocol: &Protocol,
    id: u64,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = Streams::new(seed);
    let mut state = model.sample_init(&mut rng.init);
    let mut values = Vec::with_capacity(horizon.min(4096) + 1);
    values.push(model.observe(&state));
    for t in 1..=horizon {
        model.epoch(&mut state, &mut rng.dynamics);
        let a = model.observe(&state);
        if !a.is_finite() {
            return Err(Error::invalid(format!("trajectory {id} diverged at epoch {t}")));
        }
        values.push(a);
        if target.is_reached(a) {
            break;
        }
        if protocol.perturbs_after(t) {
            if let Some(spec) = protocol.perturbation() {
                state = apply(spec, &state, model, &mut rng.perturbation)?;
            }
        }
    }
    Trajectory::from_values(id, seed, values, target, horizon)
}

pub fn simulate_ensemble(
    process: &ProcessSpec,
    protocol: &Protocol,
    n: usize,
    master_seed: u64,
) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::invalid("ensemble size must be positive"));
    }
    process.validate()?;
    protocol.validate()?;
    let model = process.kind.build()?;
    check_compatible(&model, protocol.perturbation())?;
    let trajectories = (0..n as u64)
        .into_par_iter()
        .map(|id| {
            run_trajectory(
                &model,
                &process.target,
                process.horizon,
                protocol,
                id,
                trajectory_seed(master_seed, id),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(
        trajectories,
        process.target,
        process.horizon,
        process.fingerprint(),
        master_seed,
    )
}

/// Residual times after a single perturbation applied to the survivors of `p_star`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSample {
    pub p_star: usize,
    /// Epochs from the perturbation to absorption, in survivor-id order.
    pub residuals: Vec<usize>,
    pub n_censored: usize,
    pub n_survivors_at_pstar: usize,
    pub residual_horizon: usize,
    /// Ids of the trajectories alive at `p_star`, shared across perturbations
    /// measured with the same process and seed.
    pub survivor_ids: Vec<u64>,
    /// Size of the unperturbed ensemble the survivors were drawn from.
    pub n_total: usize,
}

pub fn measure_residuals(
    process: &ProcessSpec,
    perturbation: &PerturbationSpec,
    p_star: usize,
    n: usize,
    master_seed: u64,
    residual_horizon: usize,
) -> Result<ResidualSample> {
    if p_star == 0 || p_star > process.horizon {
        return Err(Error::OutOfHorizon { p: p_star, horizon: process.horizon });
    }
    if n == 0 || residual_horizon == 0 {
        return Err(Error::invalid("n and residual_horizon must be positive"));
    }
    process.validate()?;
    let protocol = Protocol::OnceAtPStar { p_star, perturbation: *perturbation };
    protocol.validate()?;
    let model = process.kind.build()?;
    check_compatible(&model, Some(perturbation))?;
    let horizon = p_star + residual_horizon;
    let trajs = (0..n as u64)
        .into_par_iter()
        .map(|id| {
            run_trajectory(&model, &process.target, horizon, &protocol, id, trajectory_seed(master_seed, id))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sample = ResidualSample {
        p_star,
        residuals: Vec::new(),
        n_censored: 0,
        n_survivors_at_pstar: 0,
        residual_horizon,
        survivor_ids: Vec::new(),
        n_total: n,
    };
    for tr in trajs.iter().filter(|tr| tr.survives(p_star)) {
        sample.n_survivors_at_pstar += 1;
        sample.survivor_ids.push(tr.id);
        match tr.fpt {
            Some(t) => sample.residuals.push(t - p_star),
            None => sample.n_censored += 1,
        }
    }
    if sample.n_survivors_at_pstar == 0 {
        return Err(Error::EmptyConditional { epoch: p_star });
    }
    Ok(sample)
}

/// Estimate of the mean residual time.
pub fn mean_residual(sample: &ResidualSample) -> Result<f64> {
    if sample.n_censored > 0 {
        return Err(Error::CensoredBaseline { n_censored: sample.n_censored });
    }
    if sample.residuals.is_empty() {
        return Err(Error::invalid("no residual times"));
    }
    Ok(sample.residuals.iter().sum::<usize>() as f64 / sample.residuals.len() as f64)
}

/// Lower bound on the mean residual counting censored entries as
/// `residual_horizon`.
pub fn mean_residual_lower_bound(sample: &ResidualSample) -> Result<f64> {
    let n = sample.residuals.len() + sample.n_censored;
    if n == 0 {
        return Err(Error::invalid("no residual times"));
    }
    let total = sample.residuals.iter().sum::<usize>() + sample.n_censored * sample.residual_horizon;
    Ok(total as f64 / n as f64)
}

pub fn residual_stderr(sample: &ResidualSample) -> Result<f64> {
    let mean = mean_residual(sample)?;
    Ok(stderr_of(sample.residuals.iter().map(|&r| r as f64), mean))
}
