//! Exact first-passage quantities for finite absorbing Markov chains.
//!
//! The chain moves once per epoch with the substochastic matrix `Q` between
//! transient states; the row deficit `1 - sum_j Q[i][j]` is the probability of
//! absorption from state `i`. Distributions are row vectors propagated as
//! `v <- v Q`. A reset kernel acts on the surviving mass after the absorption
//! check of a perturbation epoch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpt::SurvivalCurve;

const MAX_STATES: usize = 2048;
const SUM_TOL: f64 = 1e-9;

/// What one application of the perturbation does to the surviving mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResetKernel {
    /// Row-stochastic `d x d` matrix: mass in state `i` moves to `j` w.p. `K[i][j]`.
    Matrix(Vec<Vec<f64>>),
    /// Every surviving unit of mass is redistributed with this law.
    Distribution(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainModel {
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub p0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reset_kernel: Option<ResetKernel>,
}

fn check_distribution(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
        return Err(Error::invalid(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::invalid(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

impl ChainModel {
    pub fn new(q: Vec<Vec<f64>>, p0: Vec<f64>, reset_kernel: Option<ResetKernel>) -> Result<Self> {
        let m = Self { q, p0, reset_kernel };
        m.validate()?;
        Ok(m)
    }

    /// Model whose perturbation is stochastic resetting to `p0`.
    pub fn with_full_sr(q: Vec<Vec<f64>>, p0: Vec<f64>) -> Result<Self> {
        let k = ResetKernel::Distribution(p0.clone());
        Self::new(q, p0, Some(k))
    }

    pub fn dim(&self) -> usize {
        self.p0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.p0.len();
        if d == 0 || d > MAX_STATES {
            return Err(Error::invalid(format!("chain must have 1..={MAX_STATES} states, got {d}")));
        }
        if self.q.len() != d || self.q.iter().any(|r| r.len() != d) {
            return Err(Error::invalid(format!("Q must be {d} x {d}")));
        }
        for (i, row) in self.q.iter().enumerate() {
            if row.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
                return Err(Error::invalid(format!("Q row {i} has negative or non-finite entries")));
            }
            let s: f64 = row.iter().sum();
            if s > 1.0 + SUM_TOL {
                return Err(Error::invalid(format!("Q row {i} sums to {s} > 1")));
            }
        }
        check_distribution(&self.p0, "p0")?;
        match &self.reset_kernel {
            None => {}
            Some(ResetKernel::Distribution(r)) => {
                if r.len() != d {
                    return Err(Error::invalid("reset distribution has the wrong length"));
                }
                check_distribution(r, "reset distribution")?;
            }
            Some(ResetKernel::Matrix(k)) => {
                if k.len() != d {
                    return Err(Error::invalid(format!("reset kernel must be {d} x {d}")));
                }
                for (i, row) in k.iter().enumerate() {
                    if row.len() != d {
                        return Err(Error::invalid(format!("reset kernel must be {d} x {d}")));
                    }
                    check_distribution(row, &format!("reset kernel row {i}"))?;
                }
            }
        }
        Ok(())
    }

    /// True when every transient state can reach absorption, i.e. the spectral
    /// radius of `Q` is below one.
    pub fn is_absorbing(&self) -> bool {
        let d = self.dim();
        let leaks: Vec<bool> = self.q.iter().map(|r| r.iter().sum::<f64>() < 1.0 - 1e-15).collect();
        // backward reachability from leaking states
        let mut reach = leaks.clone();
        let mut stack: Vec<usize> = (0..d).filter(|&i| leaks[i]).collect();
        while let Some(j) = stack.pop() {
            for (i, r) in reach.iter_mut().enumerate() {
                if !*r && self.q[i][j] > 0.0 {
                    *r = true;
                    stack.push(i);
                }
            }
        }
        reach.into_iter().all(|r| r)
    }

    fn step(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &qij) in out.iter_mut().zip(&self.q[i]) {
                *o += vi * qij;
            }
        }
        out
    }

    /// Column action `Q w`: `(Q w)_i = sum_j Q[i][j] w_j`.
    fn step_col(&self, w: &[f64]) -> Vec<f64> {
        self.q.iter().map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum()).collect()
    }

    fn kernel(&self) -> Result<&ResetKernel> {
        self.reset_kernel
            .as_ref()
            .ok_or_else(|| Error::invalid("chain model has no reset kernel"))
    }

    fn reset(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(match self.kernel()? {
            ResetKernel::Distribution(r) => {
                let mass: f64 = v.iter().sum();
                r.iter().map(|x| x * mass).collect()
            }
            ResetKernel::Matrix(k) => {
                let mut out = vec![0.0; v.len()];
                for (i, &vi) in v.iter().enumerate() {
                    for (o, &kij) in out.iter_mut().zip(&k[i]) {
                        *o += vi * kij;
                    }
                }
                out
            }
        })
    }

    /// Column action of the reset kernel.
    fn reset_col(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(match self.kernel()? {
            ResetKernel::Distribution(r) => {
                let s: f64 = r.iter().zip(w).map(|(a, b)| a * b).sum();
                vec![s; w.len()]
            }
            ResetKernel::Matrix(k) => k.iter().map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum()).collect(),
        })
    }
}

/// `psi[t] = 1^T (Q^T)^t p0` for `t = 0..=t_max`.
pub fn exact_survival(model: &ChainModel, t_max: usize) -> Result<SurvivalCurve> {
    model.validate()?;
    if !model.is_absorbing() {
        return Err(Error::NonAbsorbing("some transient states never reach absorption".into()));
    }
    let mut psi = Vec::with_capacity(t_max + 1);
    let mut v = model.p0.clone();
    psi.push(1.0);
    for _ in 0..t_max {
        v = model.step(&v);
        let s: f64 = v.iter().sum();
        // rounding can push a sum marginally above its predecessor
        psi.push(s.min(*psi.last().unwrap()).clamp(0.0, 1.0));
    }
    SurvivalCurve::from_psi(psi, SurvivalCurve::EXACT_N)
}

/// Solves `A x = b` in place by Gaussian elimination with partial pivoting.
fn lu_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            let (top, bottom) = a.split_at_mut(r);
            for (x, &y) in bottom[0][col..].iter_mut().zip(&top[col][col..]) {
                *x -= f * y;
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Mean absorption time from every transient state: `(I - Q) m = 1`.
pub fn mean_absorption_times(model: &ChainModel) -> Result<Vec<f64>> {
    model.validate()?;
    if !model.is_absorbing() {
        return Err(Error::NonAbsorbing("I - Q is singular".into()));
    }
    let d = model.dim();
    let a: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| f64::from(u8::from(i == j)) - model.q[i][j]).collect())
        .collect();
    lu_solve(a, vec![1.0; d]).ok_or_else(|| Error::NonAbsorbing("I - Q is singular".into()))
}

pub fn exact_mean_fpt(model: &ChainModel) -> Result<f64> {
    let m = mean_absorption_times(model)?;
    Ok(model.p0.iter().zip(&m).map(|(p, t)| p * t).sum())
}

/// Mean residual time after a single perturbation at epoch `p`, with
/// unperturbed evolution afterwards.
pub fn exact_residual(model: &ChainModel, p: usize) -> Result<f64> {
    model.kernel()?;
    let m = mean_absorption_times(model)?;
    let mut v = model.p0.clone();
    for _ in 0..p {
        v = model.step(&v);
    }
    let mass: f64 = v.iter().sum();
    if mass <= 0.0 {
        return Err(Error::EmptyConditional { epoch: p });
    }
    let c: Vec<f64> = v.iter().map(|x| x / mass).collect();
    let c_post = model.reset(&c)?;
    Ok(c_post.iter().zip(&m).map(|(a, b)| a * b).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbedMfpt {
    pub value: f64,
    /// Certified upper bound on the truncated tail `sum_{t > t_end} psi_P(t)`.
    pub tail_bound: f64,
    pub epochs: usize,
}

/// Contraction certificate for one perturbation cycle: the smallest `j` and
/// `r_j = max_i ((Q^P K)^j 1)_i < 1` found, bounding the mass that can
/// survive `j` consecutive cycles from any state.
fn cycle_contraction(model: &ChainModel, p: usize) -> Result<Option<(usize, f64)>> {
    let d = model.dim();
    let max_cycles = (d + 2).min(256);
    let mut w = vec![1.0; d];
    for j in 1..=max_cycles {
        w = model.reset_col(&w)?;
        for _ in 0..p {
            w = model.step_col(&w);
        }
        let r = w.iter().copied().fold(0.0, f64::max);
        if r < 1.0 - 1e-12 {
            return Ok(Some((j, r)));
        }
    }
    Ok(None)
}

/// `E[T_P]` under the perturbation applied at every positive multiple of `p`,
/// by propagating the full distribution. Absorption at a multiple of `p` is
/// counted before the kernel acts.
pub fn exact_perturbed_mfpt(model: &ChainModel, p: usize, t_max: usize) -> Result<PerturbedMfpt> {
    const TAIL_TOL: f64 = 1e-13;
    model.validate()?;
    if p == 0 {
        return Err(Error::invalid("P must be positive"));
    }
    let (cycles, r) = cycle_contraction(model, p)?.ok_or_else(|| {
        Error::NonAbsorbing(format!("mass is never absorbed when perturbed every {p} epochs"))
    })?;
    // after a reset, mass m is followed by at most cycles * p * m / (1 - r) mass-epochs
    let tail = |mass: f64| cycles as f64 * p as f64 * mass / (1.0 - r);

    let mut v = model.p0.clone();
    // E[T_P] = sum_{t >= 0} psi_P(t), psi_P(0) = 1
    let mut total = 1.0;
    let mut t = 0;
    loop {
        if t >= t_max {
            let mass: f64 = v.iter().sum();
            return Err(Error::Truncation { t_max, residual_mass: mass, tail_bound: tail(mass) });
        }
        t += 1;
        v = model.step(&v);
        let mass: f64 = v.iter().sum();
        total += mass;
        if t % p == 0 {
            v = model.reset(&v)?;
            if tail(mass) < TAIL_TOL * total {
                return Ok(PerturbedMfpt { value: total, tail_bound: tail(mass), epochs: t });
            }
        }
    }
}
