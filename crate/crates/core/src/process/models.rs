//! Concrete stochastic processes standing in for training runs.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::{InitSampler, StateVector};
use crate::rng::{stream, Phase};

fn positive(name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive and finite, got {x}")))
    }
}

fn finite(name: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite, got {x}")))
    }
}

#[inline]
fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Finite Markov chain on transient states `0..d`; the row deficit of `q` is
/// the per-epoch absorption probability. State `d` is the absorbed state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovChainParams {
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub p0: Vec<f64>,
    /// Collective variable of each transient state; zeros when omitted.
    #[serde(default)]
    pub values: Vec<f64>,
    #[serde(default = "one")]
    pub absorbed_value: f64,
}

fn one() -> f64 {
    1.0
}

impl MarkovChainParams {
    fn validate(&self) -> Result<()> {
        let model = crate::oracle::ChainModel::new(self.q.clone(), self.p0.clone(), None)?;
        if !self.values.is_empty() && self.values.len() != model.dim() {
            return Err(Error::invalid("values must have one entry per transient state"));
        }
        if self.values.iter().any(|v| !v.is_finite()) || !self.absorbed_value.is_finite() {
            return Err(Error::invalid("collective-variable values must be finite"));
        }
        Ok(())
    }

    fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return Some(i);
            }
        }
        None
    }
}

/// Overdamped Langevin dynamics in `U(x) = a (x^2 - 1)^2`, Euler–Maruyama with
/// step `eta` at inverse temperature `beta`, `inner_steps` updates per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoubleWellParams {
    pub barrier: f64,
    pub eta: f64,
    pub beta: f64,
    pub inner_steps: usize,
    pub start_mean: f64,
    pub start_sd: f64,
}

impl Default for DoubleWellParams {
    fn default() -> Self {
        Self {
            barrier: 1.0,
            eta: 0.01,
            beta: 1.5,
            inner_steps: 10,
            start_mean: -1.0,
            start_sd: 0.05,
        }
    }
}

impl DoubleWellParams {
    fn validate(&self) -> Result<()> {
        positive("barrier", self.barrier)?;
        positive("eta", self.eta)?;
        positive("beta", self.beta)?;
        positive("start_sd", self.start_sd)?;
        finite("start_mean", self.start_mean)?;
        if self.start_mean >= 0.0 {
            return Err(Error::invalid("start_mean must lie in the left well (< 0)"));
        }
        if self.inner_steps == 0 {
            return Err(Error::invalid("inner_steps must be positive"));
        }
        Ok(())
    }

    #[inline]
    pub fn force(&self, x: f64) -> f64 {
        -4.0 * self.barrier * x * (x * x - 1.0)
    }
}

/// Random walk with constant drift: no metastable state, so the conditional
/// distribution keeps moving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftWalkerParams {
    pub drift: f64,
    pub sigma: f64,
    pub start_sd: f64,
}

impl Default for DriftWalkerParams {
    fn default() -> Self {
        Self { drift: 0.1, sigma: 0.3, start_sd: 0.05 }
    }
}

impl DriftWalkerParams {
    fn validate(&self) -> Result<()> {
        finite("drift", self.drift)?;
        positive("sigma", self.sigma)?;
        positive("start_sd", self.start_sd)
    }
}

/// Minibatch SGD on a one-hidden-layer network fitting a fixed teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySgdParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub teacher_hidden: usize,
    pub n_samples: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub init_scale: f64,
    pub teacher_scale: f64,
    /// Standard deviation of Gaussian noise added to the teacher's labels.
    pub label_noise: f64,
    /// Seed of the teacher network and the inputs; fixed across trajectories.
    pub data_seed: u64,
}

impl Default for ToySgdParams {
    fn default() -> Self {
        Self {
            input_dim: 1,
            hidden: 8,
            teacher_hidden: 4,
            n_samples: 64,
            learning_rate: 0.2,
            batch_size: 4,
            init_scale: 0.5,
            teacher_scale: 4.0,
            label_noise: 0.2,
            data_seed: 7,
        }
    }
}

impl ToySgdParams {
    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.teacher_hidden == 0 {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        if self.n_samples == 0 || self.batch_size == 0 || self.batch_size > self.n_samples {
            return Err(Error::invalid("need 0 < batch_size <= n_samples"));
        }
        positive("learning_rate", self.learning_rate)?;
        positive("init_scale", self.init_scale)?;
        positive("teacher_scale", self.teacher_scale)?;
        finite("label_noise", self.label_noise)?;
        if self.label_noise < 0.0 {
            return Err(Error::invalid("label_noise must be >= 0"));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.hidden * (self.input_dim + 2) + 1
    }
}

/// Smooth saturating activation `x / (1 + |x|)`.
#[inline]
fn softsign(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

#[inline]
fn softsign_grad(x: f64) -> f64 {
    let d = 1.0 + x.abs();
    1.0 / (d * d)
}

/// Network `f(x) = sum_j v_j s(W_j . x + b_j) + c` with flattened parameters
/// `[W (hidden x input), b (hidden), v (hidden), c]`.
struct Mlp {
    input_dim: usize,
    hidden: usize,
}

impl Mlp {
    fn forward(&self, p: &[f64], x: &[f64], pre: &mut [f64]) -> f64 {
        let (w, rest) = p.split_at(self.hidden * self.input_dim);
        let (b, rest) = rest.split_at(self.hidden);
        let (v, c) = rest.split_at(self.hidden);
        let mut out = c[0];
        for j in 0..self.hidden {
            let row = &w[j * self.input_dim..(j + 1) * self.input_dim];
            let z = b[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            pre[j] = z;
            out += v[j] * softsign(z);
        }
        out
    }

    /// Accumulates `scale * d(out)/d(p)` into `grad`.
    fn backward(&self, p: &[f64], x: &[f64], pre: &[f64], scale: f64, grad: &mut [f64]) {
        let nw = self.hidden * self.input_dim;
        let h = self.hidden;
        let v = &p[nw + h..nw + 2 * h];
        for j in 0..h {
            let g = scale * v[j] * softsign_grad(pre[j]);
            for k in 0..self.input_dim {
                grad[j * self.input_dim + k] += g * x[k];
            }
            grad[nw + j] += g;
            grad[nw + h + j] += scale * softsign(pre[j]);
        }
        grad[nw + 2 * h] += scale;
    }
}

pub struct ToySgd {
    params: ToySgdParams,
    net: Mlp,
    inputs: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

impl ToySgd {
    pub fn new(params: ToySgdParams) -> Result<Self> {
        params.validate()?;
        let mut rng = stream(params.data_seed, Phase::Init);
        let teacher_net = Mlp { input_dim: params.input_dim, hidden: params.teacher_hidden };
        let n_teacher = params.teacher_hidden * (params.input_dim + 2) + 1;
        let teacher: Vec<f64> = (0..n_teacher).map(|_| params.teacher_scale * normal(&mut rng)).collect();
        let inputs: Vec<Vec<f64>> = (0..params.n_samples)
            .map(|_| (0..params.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let mut pre = vec![0.0; params.teacher_hidden];
        let labels = inputs
            .iter()
            .map(|x| teacher_net.forward(&teacher, x, &mut pre) + params.label_noise * normal(&mut rng))
            .collect();
        let net = Mlp { input_dim: params.input_dim, hidden: params.hidden };
        Ok(Self { params, net, inputs, labels })
    }

    /// Full-batch mean squared error.
    pub fn loss(&self, p: &[f64]) -> f64 {
        let mut pre = vec![0.0; self.params.hidden];
        let sse: f64 = self
            .inputs
            .iter()
            .zip(&self.labels)
            .map(|(x, &y)| {
                let e = self.net.forward(p, x, &mut pre) - y;
                e * e
            })
            .sum();
        sse / self.inputs.len() as f64
    }

    fn epoch<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R) {
        let mut order: Vec<usize> = (0..self.inputs.len()).collect();
        order.shuffle(rng);
        let mut pre = vec![0.0; self.params.hidden];
        let mut grad = vec![0.0; p.len()];
        for batch in order.chunks(self.params.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 2.0 / batch.len() as f64;
            for &i in batch {
                let x = &self.inputs[i];
                let e = self.net.forward(p, x, &mut pre) - self.labels[i];
                self.net.backward(p, x, &pre, scale * e, &mut grad);
            }
            for (w, g) in p.iter_mut().zip(&grad) {
                *w -= self.params.learning_rate * g;
            }
        }
    }
}

/// A process ready to simulate: validated parameters plus any precomputed data.
pub enum Model {
    MarkovChain(MarkovChainParams),
    DoubleWell(DoubleWellParams),
    DriftWalker(DriftWalkerParams),
    ToySgd(ToySgd),
}

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::MarkovChain(_) => "markov_chain",
            Model::DoubleWell(_) => "double_well",
            Model::DriftWalker(_) => "drift_walker",
            Model::ToySgd(_) => "toy_sgd",
        }
    }

    pub fn has_parameters(&self) -> bool {
        !matches!(self, Model::MarkovChain(_))
    }

    pub fn epoch<R: Rng + ?Sized>(&self, state: &mut StateVector, rng: &mut R) {
        match self {
            Model::MarkovChain(m) => {
                let d = m.p0.len();
                let i = state.aux.unwrap_or(d);
                if i < d {
                    state.aux = Some(MarkovChainParams::sample_index(&m.q[i], rng).unwrap_or(d));
                }
            }
            Model::DoubleWell(m) => {
                let noise = (2.0 * m.eta / m.beta).sqrt();
                let x = &mut state.params[0];
                for _ in 0..m.inner_steps {
                    *x += m.eta * m.force(*x) + noise * normal(rng);
                }
            }
            Model::DriftWalker(m) => {
                state.params[0] += m.drift + m.sigma * normal(rng);
            }
            Model::ToySgd(m) => m.epoch(&mut state.params, rng),
        }
    }

    pub fn observe(&self, state: &StateVector) -> f64 {
        match self {
            Model::MarkovChain(m) => match state.aux {
                Some(i) if i < m.p0.len() => m.values.get(i).copied().unwrap_or(0.0),
                _ => m.absorbed_value,
            },
            Model::DoubleWell(_) | Model::DriftWalker(_) => state.params[0],
            Model::ToySgd(m) => m.loss(&state.params),
        }
    }
}

impl InitSampler for Model {
    fn sample_init<R: Rng + ?Sized>(&self, rng: &mut R) -> StateVector {
        match self {
            Model::MarkovChain(m) => StateVector::discrete(
                MarkovChainParams::sample_index(&m.p0, rng).unwrap_or(m.p0.len() - 1),
            ),
            Model::DoubleWell(m) => loop {
                // normal truncated to the left well
                let x = m.start_mean + m.start_sd * normal(rng);
                if x < 0.0 {
                    break StateVector::from_params(vec![x]);
                }
            },
            Model::DriftWalker(m) => StateVector::from_params(vec![m.start_sd * normal(rng)]),
            Model::ToySgd(m) => {
                let s = m.params.init_scale;
                StateVector::from_params((0..m.params.n_params()).map(|_| rng.random_range(-s..s)).collect())
            }
        }
    }
}

/// Which process to simulate, with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcessKind {
    MarkovChain(MarkovChainParams),
    DoubleWell(DoubleWellParams),
    DriftWalker(DriftWalkerParams),
    ToySgd(ToySgdParams),
}

impl ProcessKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            ProcessKind::MarkovChain(p) => p.validate(),
            ProcessKind::DoubleWell(p) => p.validate(),
            ProcessKind::DriftWalker(p) => p.validate(),
            ProcessKind::ToySgd(p) => p.validate(),
        }
    }

    pub fn build(&self) -> Result<Model> {
        self.validate()?;
        Ok(match self {
            ProcessKind::MarkovChain(p) => Model::MarkovChain(p.clone()),
            ProcessKind::DoubleWell(p) => Model::DoubleWell(p.clone()),
            ProcessKind::DriftWalker(p) => Model::DriftWalker(p.clone()),
            ProcessKind::ToySgd(p) => Model::ToySgd(ToySgd::new(p.clone())?),
        })
    }
}
