//! Perturbed mean first-passage times predicted from the unperturbed survival
//! curve.
//!
//! With survival `psi` and mean residual `tau` after a perturbation at `P`,
//! `E[T_P] = sum_{t<P} psi(t) + psi(P) * tau`. Resetting from the
//! initialization (`tau = E[T_P]`) solves to
//! `sum_{t<P} psi(t) / (1 - psi(P))`. When `tau` is roughly independent of
//! `P`, a single measurement at `P*` predicts the whole curve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpt::{partial_sum, stderr_of, SurvivalCurve};
use crate::process::{mean_residual, ResidualSample};

/// A predicted mean; resetting before any absorption can happen never finishes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Etp {
    Finite(f64),
    Divergent,
}

impl Etp {
    pub fn finite(self) -> Option<f64> {
        match self {
            Etp::Finite(x) => Some(x),
            Etp::Divergent => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Ok,
    Extrapolated,
    Divergent,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::Ok => "ok",
            Flag::Extrapolated => "extrapolated",
            Flag::Divergent => "divergent",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Per-`P` residual means.
    General,
    /// Stochastic resetting, from the survival curve alone.
    Sr,
    /// One residual mean measured at `P*`, reused for every `P`.
    Rare,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauSource {
    pub p_star: usize,
    pub tau_bar: f64,
    pub stderr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Baseline {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionCurve {
    pub p_values: Vec<usize>,
    pub e_tp: Vec<Etp>,
    pub e_tp_stderr: Vec<Option<f64>>,
    pub speedup: Vec<Option<f64>>,
    pub flags: Vec<Flag>,
    pub method: Method,
    pub tau_source: Option<TauSource>,
    pub baseline: Option<Baseline>,
    pub valid_range: (usize, usize),
}

fn check_p(curve: &SurvivalCurve, p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::invalid("P must be positive"));
    }
    if p > curve.horizon() {
        return Err(Error::OutOfHorizon { p, horizon: curve.horizon() });
    }
    Ok(())
}

fn check_grid(grid: &[usize]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("empty P grid"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("P grid must be strictly increasing"));
    }
    Ok(())
}

pub fn predict_sr(curve: &SurvivalCurve, p: usize) -> Result<Etp> {
    check_p(curve, p)?;
    let psi_p = curve.psi[p];
    if psi_p >= 1.0 {
        return Ok(Etp::Divergent);
    }
    Ok(Etp::Finite(partial_sum(curve, p)? / (1.0 - psi_p)))
}

pub fn predict_general(curve: &SurvivalCurve, p: usize, tau_bar: f64) -> Result<f64> {
    check_p(curve, p)?;
    if !(tau_bar >= 0.0 && tau_bar.is_finite()) {
        return Err(Error::invalid(format!("tau_bar must be finite and >= 0, got {tau_bar}")));
    }
    Ok(partial_sum(curve, p)? + curve.psi[p] * tau_bar)
}

/// Probability of absorption at each epoch `1..=p`, followed by the mass
/// surviving past `p`.
fn absorption_pmf(curve: &SurvivalCurve, p: usize) -> (Vec<f64>, f64) {
    let pmf = (1..=p).map(|t| (curve.psi[t - 1] - curve.psi[t]).max(0.0)).collect();
    (pmf, curve.psi[p])
}

/// Standard error of `sum_{t<P} psi + psi(P) * tau` for fixed `tau`: the
/// estimate is the sample mean of `min(T, P) + tau * 1{T > P}`.
fn general_stderr(curve: &SurvivalCurve, p: usize, tau: TauSource) -> f64 {
    let (pmf, tail) = absorption_pmf(curve, p);
    let x_tail = p as f64 + tau.tau_bar;
    let mean: f64 = pmf.iter().enumerate().map(|(i, w)| (i + 1) as f64 * w).sum::<f64>() + tail * x_tail;
    let second: f64 =
        pmf.iter().enumerate().map(|(i, w)| ((i + 1) as f64).powi(2) * w).sum::<f64>() + tail * x_tail * x_tail;
    let var = (second - mean * mean).max(0.0);
    (var / curve.n_total as f64 + (tail * tau.stderr).powi(2)).sqrt()
}

/// Delta-method standard error of the ratio `E[min(T,P)] / P(T <= P)`.
fn sr_stderr(curve: &SurvivalCurve, p: usize, ratio: f64) -> f64 {
    let (pmf, tail) = absorption_pmf(curve, p);
    let absorbed = 1.0 - tail;
    // linearized per-trajectory contribution: min(T,P) - ratio * 1{T<=P}
    let mut m1 = tail * p as f64;
    let mut m2 = tail * (p as f64).powi(2);
    for (i, w) in pmf.iter().enumerate() {
        let z = (i + 1) as f64 - ratio;
        m1 += w * z;
        m2 += w * z * z;
    }
    let var = (m2 - m1 * m1).max(0.0);
    (var / curve.n_total as f64).sqrt() / absorbed
}

pub fn predict_sr_curve(curve: &SurvivalCurve, grid: &[usize]) -> Result<PredictionCurve> {
    check_grid(grid)?;
    let mut out = PredictionCurve {
        p_values: grid.to_vec(),
        e_tp: Vec::with_capacity(grid.len()),
        e_tp_stderr: Vec::with_capacity(grid.len()),
        speedup: vec![None; grid.len()],
        flags: Vec::with_capacity(grid.len()),
        method: Method::Sr,
        tau_source: None,
        baseline: None,
        valid_range: (1, curve.horizon()),
    };
    for &p in grid {
        let e = predict_sr(curve, p)?;
        out.e_tp.push(e);
        match e {
            Etp::Finite(x) => {
                out.e_tp_stderr.push(Some(sr_stderr(curve, p, x)));
                out.flags.push(Flag::Ok);
            }
            Etp::Divergent => {
                out.e_tp_stderr.push(None);
                out.flags.push(Flag::Divergent);
            }
        }
    }
    Ok(out)
}

/// Predicts `E[T_P]` over `grid` from one residual mean measured at
/// `tau.p_star`. Points below `max(t_r, ceil(tau_bar))` are flagged
/// extrapolated.
pub fn predict_rare_from(
    curve: &SurvivalCurve,
    tau: TauSource,
    t_r: Option<usize>,
    grid: &[usize],
) -> Result<PredictionCurve> {
    check_grid(grid)?;
    if tau.p_star == 0 {
        return Err(Error::invalid("p_star must be positive"));
    }
    if !(tau.stderr >= 0.0 && tau.stderr.is_finite()) {
        return Err(Error::invalid("tau standard error must be finite and >= 0"));
    }
    if let Some(&p) = grid.iter().find(|&&p| p > tau.p_star) {
        return Err(Error::invalid(format!("P = {p} lies beyond p_star = {}", tau.p_star)));
    }
    let p_min = t_r.unwrap_or(1).max(tau.tau_bar.ceil() as usize).max(1);
    let mut out = PredictionCurve {
        p_values: grid.to_vec(),
        e_tp: Vec::with_capacity(grid.len()),
        e_tp_stderr: Vec::with_capacity(grid.len()),
        speedup: vec![None; grid.len()],
        flags: Vec::with_capacity(grid.len()),
        method: Method::Rare,
        tau_source: Some(tau),
        baseline: None,
        valid_range: (p_min, tau.p_star),
    };
    for &p in grid {
        out.e_tp.push(Etp::Finite(predict_general(curve, p, tau.tau_bar)?));
        out.e_tp_stderr.push(Some(general_stderr(curve, p, tau)));
        out.flags.push(if p < p_min { Flag::Extrapolated } else { Flag::Ok });
    }
    Ok(out)
}

pub fn tau_source(sample: &ResidualSample) -> Result<TauSource> {
    let tau_bar = mean_residual(sample)?;
    Ok(TauSource {
        p_star: sample.p_star,
        tau_bar,
        stderr: stderr_of(sample.residuals.iter().map(|&r| r as f64), tau_bar),
    })
}

pub fn predict_rare(
    curve: &SurvivalCurve,
    sample: &ResidualSample,
    t_r: Option<usize>,
    grid: &[usize],
) -> Result<PredictionCurve> {
    predict_rare_from(curve, tau_source(sample)?, t_r, grid)
}

/// Fills `speedup = baseline / e_tp`; divergent predictions get speedup 0.
pub fn speedup(baseline: Baseline, mut curve: PredictionCurve) -> Result<PredictionCurve> {
    if !(baseline.mean > 0.0 && baseline.mean.is_finite()) {
        return Err(Error::invalid("baseline mean must be positive and finite"));
    }
    curve.speedup = curve
        .e_tp
        .iter()
        .map(|e| match e {
            Etp::Finite(x) if *x > 0.0 => Some(baseline.mean / x),
            Etp::Finite(_) => None,
            Etp::Divergent => Some(0.0),
        })
        .collect();
    curve.baseline = Some(baseline);
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    pub name: String,
    pub tau_bar: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Orders candidates by ascending mean residual, ties by name.
pub fn rank_perturbations(candidates: &[(String, ResidualSample)]) -> Result<Vec<Ranked>> {
    let Some((_, first)) = candidates.first() else {
        return Err(Error::InvalidComparison("no candidates".into()));
    };
    if let Some((name, s)) = candidates.iter().find(|(_, s)| s.p_star != first.p_star) {
        return Err(Error::InvalidComparison(format!(
            "{name} measured at p_star = {}, expected {}",
            s.p_star, first.p_star
        )));
    }
    let mut ranked = candidates
        .iter()
        .map(|(name, s)| {
            let t = tau_source(s)?;
            Ok(Ranked { name: name.clone(), tau_bar: t.tau_bar, stderr: t.stderr, n: s.residuals.len() })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| a.tau_bar.total_cmp(&b.tau_bar).then_with(|| a.name.cmp(&b.name)));
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geometric(q: f64, h: usize) -> SurvivalCurve {
        SurvivalCurve::from_psi((0..=h).map(|t| q.powi(t as i32)).collect(), SurvivalCurve::EXACT_N).unwrap()
    }

    fn deterministic4() -> SurvivalCurve {
        SurvivalCurve::from_psi(vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0], SurvivalCurve::EXACT_N).unwrap()
    }

    fn sample(p_star: usize, residuals: Vec<usize>) -> ResidualSample {
        ResidualSample {
            p_star,
            n_survivors_at_pstar: residuals.len(),
            survivor_ids: (0..residuals.len() as u64).collect(),
            residuals,
            n_censored: 0,
            residual_horizon: 1000,
            n_total: 1000,
        }
    }

    #[test]
    fn sr_examples() {
        assert_eq!(predict_sr(&geometric(0.5, 10), 3).unwrap(), Etp::Finite(2.0));
        assert_eq!(predict_sr(&deterministic4(), 2).unwrap(), Etp::Divergent);
        assert_eq!(predict_sr(&deterministic4(), 6).unwrap(), Etp::Finite(4.0));
        assert!(matches!(predict_sr(&deterministic4(), 7), Err(Error::OutOfHorizon { .. })));
    }

    #[test]
    fn general_examples() {
        let c = geometric(0.5, 10);
        assert_eq!(predict_general(&c, 2, 3.0).unwrap(), 2.25);
        let c = SurvivalCurve::from_psi(vec![1.0, 0.6, 0.0, 0.0], 10).unwrap();
        assert_eq!(predict_general(&c, 2, 123.0).unwrap(), partial_sum(&c, 2).unwrap());

        // closed form of the geometric partial sum
        let q: f64 = 0.9;
        let expected = (1.0 - q.powi(10)) / (1.0 - q) + q.powi(10) * 4.0;
        let got = predict_general(&geometric(q, 20), 10, 4.0).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 7.9079).abs() < 5e-5);
    }

    #[test]
    fn rare_examples() {
        let c = geometric(0.5, 20);
        let pred = predict_rare(&c, &sample(10, vec![1, 2, 3, 2]), None, &[1, 2, 5, 10]).unwrap();
        for e in &pred.e_tp {
            assert!((e.finite().unwrap() - 2.0).abs() < 1e-12);
        }
        assert_eq!(pred.valid_range, (2, 10));
        assert_eq!(pred.flags, vec![Flag::Extrapolated, Flag::Ok, Flag::Ok, Flag::Ok]);

        let zero = predict_rare(&c, &sample(10, vec![0, 0]), Some(3), &[2, 4]).unwrap();
        assert_eq!(zero.e_tp[1], Etp::Finite(partial_sum(&c, 4).unwrap()));
        assert_eq!(zero.valid_range, (3, 10));

        let mut censored = sample(10, vec![1]);
        censored.n_censored = 1;
        assert_eq!(
            predict_rare(&c, &censored, None, &[5]).unwrap_err(),
            Error::CensoredBaseline { n_censored: 1 }
        );
        assert!(predict_rare(&c, &sample(10, vec![1]), None, &[11]).is_err());
    }

    #[test]
    fn speedup_examples() {
        let curve = PredictionCurve {
            p_values: vec![1, 2, 3],
            e_tp: vec![Etp::Finite(5.0), Etp::Finite(100.0), Etp::Divergent],
            e_tp_stderr: vec![None; 3],
            speedup: vec![None; 3],
            flags: vec![Flag::Ok, Flag::Ok, Flag::Divergent],
            method: Method::Sr,
            tau_source: None,
            baseline: None,
            valid_range: (1, 3),
        };
        let b = Baseline { mean: 100.0, stderr: 1.0 };
        let s = speedup(b, curve).unwrap();
        assert_eq!(s.speedup, vec![Some(20.0), Some(1.0), Some(0.0)]);
        assert_eq!(s.baseline, Some(b));
    }

    #[test]
    fn ranking() {
        let c = vec![("A".to_string(), sample(5, vec![5, 5])), ("B".to_string(), sample(5, vec![3, 3]))];
        let r = rank_perturbations(&c).unwrap();
        assert_eq!(r.iter().map(|x| x.name.as_str()).collect::<Vec<_>>(), ["B", "A"]);

        let c = vec![("b".to_string(), sample(5, vec![4])), ("a".to_string(), sample(5, vec![4]))];
        assert_eq!(rank_perturbations(&c).unwrap()[0].name, "a");

        let c = vec![("a".to_string(), sample(5, vec![4])), ("b".to_string(), sample(6, vec![4]))];
        assert!(matches!(rank_perturbations(&c), Err(Error::InvalidComparison(_))));
    }

    #[test]
    fn stderr_vanishes_for_exact_curves_and_matches_binomial_for_p1() {
        let c = geometric(0.7, 30);
        let pred = predict_sr_curve(&c, &[1, 5, 10]).unwrap();
        assert!(pred.e_tp_stderr.iter().all(|s| s.unwrap() < 1e-6));

        // at P = 1 the SR estimate is 1 / (1 - psi(1)), a function of one binomial proportion
        let n = 400;
        let c = SurvivalCurve::from_at_risk(vec![n, 100, 20], n).unwrap();
        let pred = predict_sr_curve(&c, &[1]).unwrap();
        let a: f64 = 0.25;
        let delta = (a * (1.0 - a) / n as f64).sqrt() / (1.0 - a).powi(2);
        assert!((pred.e_tp_stderr[0].unwrap() - delta).abs() < 1e-12);
    }

    fn arb_curve() -> impl Strategy<Value = SurvivalCurve> {
        prop::collection::vec(0.0f64..1.0, 1..30).prop_map(|factors| {
            let mut psi = vec![1.0];
            for f in factors {
                psi.push(psi.last().unwrap() * f);
            }
            SurvivalCurve::from_psi(psi, 1000).unwrap()
        })
    }

    proptest! {
        #[test]
        fn lower_bound(c in arb_curve(), tau in 0.0f64..50.0, p_frac in 0.0f64..1.0) {
            let p = 1 + ((c.horizon() - 1) as f64 * p_frac) as usize;
            let lb = partial_sum(&c, p).unwrap();
            let g = predict_general(&c, p, tau).unwrap();
            prop_assert!(g >= lb);
            // equality is reached only when the residual term vanishes below one ulp of lb
            prop_assert_eq!(g == lb, lb + c.psi[p] * tau == lb);
            if c.psi[p] * tau == 0.0 {
                prop_assert_eq!(g, lb);
            }
        }

        #[test]
        fn sr_is_a_fixed_point(c in arb_curve(), p_frac in 0.0f64..1.0) {
            let p = 1 + ((c.horizon() - 1) as f64 * p_frac) as usize;
            if let Etp::Finite(e) = predict_sr(&c, p).unwrap() {
                let g = predict_general(&c, p, e).unwrap();
                prop_assert!((g - e).abs() <= 1e-9 * e.max(1.0));
            }
        }

        #[test]
        fn monotone_in_tau(c in arb_curve(), a in 0.0f64..50.0, b in 0.0f64..50.0) {
            let p = 1;
            prop_assume!(c.psi[p] > 0.0 && a < b);
            prop_assert!(predict_general(&c, p, a).unwrap() < predict_general(&c, p, b).unwrap());
        }

        #[test]
        fn argmax_speedup_is_argmin_etp(c in arb_curve(), tau in 0.0f64..20.0) {
            let h = c.horizon();
            let grid: Vec<usize> = (1..=h).collect();
            let pred = predict_rare_from(&c, TauSource { p_star: h, tau_bar: tau, stderr: 0.0 }, None, &grid).unwrap();
            let s = speedup(Baseline { mean: 10.0, stderr: 0.0 }, pred.clone()).unwrap();
            let argmin = (0..h).min_by(|&i, &j| pred.e_tp[i].finite().unwrap().total_cmp(&pred.e_tp[j].finite().unwrap())).unwrap();
            let best = s.speedup.iter().map(|x| x.unwrap()).fold(f64::MIN, f64::max);
            prop_assert_eq!(s.speedup[argmin].unwrap(), best);
        }
    }
}
