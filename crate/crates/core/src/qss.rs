//! Quasi-steady-state detection on the collective variable.
//!
//! The conditional CDF of the collective variable over surviving trajectories
//! is compared, epoch by epoch, with its arithmetic average over a reference
//! window. The relaxation time is the first epoch from which the KS p-value
//! stays above `alpha` through the end of the window.

use crate::error::{Error, Result};
use crate::fpt::Ensemble;

/// Right-continuous empirical CDF stored as its jump points.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalCdf {
    /// Strictly increasing jump locations.
    pub support: Vec<f64>,
    /// CDF value at (and right of) each support point; the last one is 1.
    pub cdf_values: Vec<f64>,
    pub n: usize,
}

impl EmpiricalCdf {
    pub fn from_sample(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("empirical CDF of an empty sample"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite value in sample"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut support = Vec::with_capacity(n);
        let mut cdf_values = Vec::with_capacity(n);
        for (i, &x) in sorted.iter().enumerate() {
            if i + 1 < n && sorted[i + 1] == x {
                continue;
            }
            support.push(x);
            cdf_values.push((i + 1) as f64 / n as f64);
        }
        Ok(Self { support, cdf_values, n })
    }

    pub fn eval(&self, a: f64) -> f64 {
        // index of the first support point > a
        let k = self.support.partition_point(|&x| x <= a);
        if k == 0 {
            0.0
        } else {
            self.cdf_values[k - 1]
        }
    }

    fn validate(&self) -> Result<()> {
        if self.support.is_empty() || self.support.len() != self.cdf_values.len() {
            return Err(Error::invalid("malformed empirical CDF"));
        }
        if self.support.windows(2).any(|w| w[1] <= w[0])
            || self.cdf_values.windows(2).any(|w| w[1] < w[0])
        {
            return Err(Error::invalid("empirical CDF must be increasing"));
        }
        Ok(())
    }
}

/// Walks a sorted grid and reports `cdf(x)` for each grid point in order.
struct StepCursor<'a> {
    cdf: &'a EmpiricalCdf,
    next: usize,
    value: f64,
}

impl<'a> StepCursor<'a> {
    fn new(cdf: &'a EmpiricalCdf) -> Self {
        Self { cdf, next: 0, value: 0.0 }
    }

    /// `x` must be non-decreasing across calls.
    fn advance_to(&mut self, x: f64) -> f64 {
        while self.next < self.cdf.support.len() && self.cdf.support[self.next] <= x {
            self.value = self.cdf.cdf_values[self.next];
            self.next += 1;
        }
        self.value
    }
}

fn union_support<'a>(cdfs: impl IntoIterator<Item = &'a EmpiricalCdf>) -> Vec<f64> {
    let mut all: Vec<f64> = cdfs.into_iter().flat_map(|c| c.support.iter().copied()).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

/// Empirical CDF of the collective variable over trajectories surviving epoch `t`.
pub fn conditional_cdf(ensemble: &Ensemble, t: usize) -> Result<EmpiricalCdf> {
    let vals = ensemble.survivors_at(t);
    if vals.is_empty() {
        return Err(Error::EmptyConditional { epoch: t });
    }
    EmpiricalCdf::from_sample(&vals)
}

/// Pointwise arithmetic mean of the CDFs on the union of their supports.
pub fn average_cdf(cdfs: &[EmpiricalCdf]) -> Result<EmpiricalCdf> {
    if cdfs.is_empty() {
        return Err(Error::invalid("average of an empty list of CDFs"));
    }
    let support = union_support(cdfs);
    let m = cdfs.len() as f64;
    let mut cdf_values = vec![0.0; support.len()];
    for c in cdfs {
        let mut cur = StepCursor::new(c);
        for (acc, &x) in cdf_values.iter_mut().zip(&support) {
            *acc += cur.advance_to(x);
        }
    }
    for v in &mut cdf_values {
        *v = (*v / m).min(1.0);
    }
    Ok(EmpiricalCdf {
        support,
        cdf_values,
        n: cdfs.iter().map(|c| c.n).sum(),
    })
}

/// `sup_a |F(a) - G(a)|`. Both are step functions with jumps on the union of
/// supports, so the supremum is attained at a breakpoint; left limits are the
/// values at the preceding breakpoint and are therefore covered as well.
pub fn ks_statistic(f: &EmpiricalCdf, g: &EmpiricalCdf) -> f64 {
    let support = union_support([f, g]);
    let mut cf = StepCursor::new(f);
    let mut cg = StepCursor::new(g);
    support
        .iter()
        .map(|&x| (cf.advance_to(x) - cg.advance_to(x)).abs())
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov survival function `Q_K(lambda)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    const EPS: f64 = 1e-12;
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 0.5 {
        // Jacobi dual form of the same theta function: the alternating series
        // needs O(1/lambda) terms here.
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let mut s = 0.0;
        for k in 1.. {
            let j = (2 * k - 1) as f64;
            let term = (-j * j * c).exp();
            s += term;
            if term < EPS {
                break;
            }
        }
        let q = 1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s;
        return q.clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1u32.. {
        let kf = f64::from(k);
        let term = 2.0 * (-2.0 * kf * kf * lambda * lambda).exp();
        if term < EPS {
            break;
        }
        if k % 2 == 1 {
            sum += term;
        } else {
            sum -= term;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// One-sample asymptotic KS p-value `Q_K(sqrt(n) D)`.
pub fn ks_pvalue(d: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("KS p-value needs n >= 1"));
    }
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::invalid(format!("KS statistic {d} outside [0, 1]")));
    }
    Ok(kolmogorov_q((n as f64).sqrt() * d))
}

/// Cramér–von Mises criterion `∫ (F - G)^2 dG` against the reference `g`.
pub fn cvm_criterion(f: &EmpiricalCdf, g: &EmpiricalCdf) -> f64 {
    let mut cf = StepCursor::new(f);
    let mut prev = 0.0;
    let mut acc = 0.0;
    for (&a, &ga) in g.support.iter().zip(&g.cdf_values) {
        let diff = cf.advance_to(a) - ga;
        acc += diff * diff * (ga - prev);
        prev = ga;
    }
    acc
}

#[derive(Clone, Debug, PartialEq)]
pub struct QssReport {
    pub epochs: Vec<usize>,
    pub at_risk: Vec<usize>,
    pub ks_stat: Vec<f64>,
    pub ks_pvalue: Vec<f64>,
    pub cvm: Vec<f64>,
    pub t_r: Option<usize>,
    pub window: (usize, usize),
    pub alpha: f64,
}

/// Start of the trailing run of epochs whose p-value exceeds `alpha`.
pub fn sustained_run_start(epochs: &[usize], pvalues: &[f64], alpha: f64) -> Option<usize> {
    let mut start = None;
    for (&t, &p) in epochs.iter().zip(pvalues).rev() {
        if p > alpha {
            start = Some(t);
        } else {
            break;
        }
    }
    start
}

/// Default reference window: 20% to 100% of the horizon.
pub fn default_window(horizon: usize) -> (usize, usize) {
    (((horizon as f64) * 0.2).ceil().max(1.0) as usize, horizon)
}

pub fn detect_relaxation(ensemble: &Ensemble, window: (usize, usize), alpha: f64) -> Result<QssReport> {
    let (t1, t2) = window;
    if t1 >= t2 || t2 > ensemble.horizon {
        return Err(Error::invalid(format!(
            "window ({t1}, {t2}) must satisfy t1 < t2 <= horizon {}",
            ensemble.horizon
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1)")));
    }
    let mut cdfs = Vec::with_capacity(t2 + 1);
    for t in 0..=t2 {
        cdfs.push(conditional_cdf(ensemble, t)?);
    }
    let reference = average_cdf(&cdfs[t1..=t2])?;
    reference.validate()?;

    let epochs: Vec<usize> = (1..=t2).collect();
    let mut report = QssReport {
        at_risk: epochs.iter().map(|&t| cdfs[t].n).collect(),
        ks_stat: Vec::with_capacity(t2),
        ks_pvalue: Vec::with_capacity(t2),
        cvm: Vec::with_capacity(t2),
        epochs,
        t_r: None,
        window,
        alpha,
    };
    for cdf in &cdfs[1..] {
        let d = ks_statistic(cdf, &reference);
        report.ks_stat.push(d);
        report.ks_pvalue.push(ks_pvalue(d, cdf.n)?);
        report.cvm.push(cvm_criterion(cdf, &reference));
    }
    report.t_r = sustained_run_start(&report.epochs, &report.ks_pvalue, alpha);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpt::{Target, Trajectory};
    use proptest::prelude::*;

    fn cdf(xs: &[f64]) -> EmpiricalCdf {
        EmpiricalCdf::from_sample(xs).unwrap()
    }

    /// Brute-force sup over a fine grid plus every breakpoint and its left
    /// neighbourhood, independent of the merge walk.
    fn ks_brute(f: &EmpiricalCdf, g: &EmpiricalCdf) -> f64 {
        let mut pts: Vec<f64> = f.support.iter().chain(&g.support).copied().collect();
        let extra: Vec<f64> = pts.iter().flat_map(|&x| [x - 1e-9, x + 1e-9]).collect();
        pts.extend(extra);
        pts.iter()
            .map(|&x| (f.eval(x) - g.eval(x)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn conditional_cdf_examples() {
        let c = cdf(&[0.7, 0.3]);
        assert_eq!(c.support, vec![0.3, 0.7]);
        assert_eq!(c.cdf_values, vec![0.5, 1.0]);
        let c = cdf(&[0.5]);
        assert_eq!((c.support.clone(), c.cdf_values.clone()), (vec![0.5], vec![1.0]));
        let c = cdf(&[0.1, 0.2, 0.1]);
        assert_eq!(c.eval(0.1), 2.0 / 3.0);
        assert_eq!(c.eval(0.2), 1.0);
        assert_eq!(c.eval(0.05), 0.0);
    }

    #[test]
    fn conditional_cdf_over_survivors() {
        let target = Target::at_least(1.0);
        let a = Trajectory::from_values(0, 0, vec![0.0, 0.3, 0.3], &target, 2).unwrap();
        let b = Trajectory::from_values(1, 0, vec![0.0, 0.7, 1.0], &target, 2).unwrap();
        let ens = Ensemble::new(vec![a, b], target, 2, "", 0).unwrap();
        assert_eq!(conditional_cdf(&ens, 1).unwrap().cdf_values, vec![0.5, 1.0]);
        assert_eq!(conditional_cdf(&ens, 2).unwrap().support, vec![0.3]);
        let c = Trajectory::from_values(2, 0, vec![0.0, 1.0], &target, 2).unwrap();
        let ens = Ensemble::new(vec![c], target, 2, "", 0).unwrap();
        assert_eq!(conditional_cdf(&ens, 1).unwrap_err(), Error::EmptyConditional { epoch: 1 });
    }

    #[test]
    fn average_cdf_examples() {
        let f = cdf(&[0.3, 0.7, 0.7, 1.1]);
        assert_eq!(average_cdf(&[f.clone(), f.clone()]).unwrap().cdf_values, f.cdf_values);
        let avg3 = average_cdf(&[f.clone(), f.clone(), f.clone()]).unwrap();
        assert_eq!(avg3.support, f.support);
        for (a, b) in avg3.cdf_values.iter().zip(&f.cdf_values) {
            assert!((a - b).abs() < 1e-15);
        }
        let avg = average_cdf(&[cdf(&[0.0]), cdf(&[1.0])]).unwrap();
        assert_eq!(avg.support, vec![0.0, 1.0]);
        assert_eq!(avg.cdf_values, vec![0.5, 1.0]);
        assert_eq!(avg.eval(0.5), 0.5);
        assert_eq!(avg.n, 2);
        assert!(average_cdf(&[]).is_err());
    }

    #[test]
    fn ks_statistic_examples() {
        let f = cdf(&[0.3, 0.7]);
        assert_eq!(ks_statistic(&f, &f), 0.0);
        assert_eq!(ks_statistic(&cdf(&[0.0]), &cdf(&[1.0])), 1.0);
        let g = cdf(&[0.3]);
        assert_eq!(ks_statistic(&f, &g), 0.5);
        assert_eq!(ks_brute(&f, &g), 0.5);
    }

    #[test]
    fn ks_pvalue_examples() {
        assert_eq!(ks_pvalue(0.0, 17).unwrap(), 1.0);
        // lambda = 2: 2 (e^-8 - e^-32 + ...); the series is truncated at 1e-12
        let expected = 2.0 * ((-8.0f64).exp() - (-32.0f64).exp());
        let p = ks_pvalue(0.2, 100).unwrap();
        assert!((p - expected).abs() < 1e-12, "{p}");
        assert!((p - 6.709e-4).abs() < 1e-7);
        assert_eq!(ks_pvalue(1.0, 10_000).unwrap(), 0.0);
        assert!(ks_pvalue(0.5, 0).is_err());
        assert!(ks_pvalue(1.5, 3).is_err());
    }

    #[test]
    fn kolmogorov_forms_agree_at_switch() {
        // both representations evaluated directly around lambda = 0.5
        for &lam in &[0.45, 0.5, 0.55, 0.8] {
            let alt: f64 = (1..200)
                .map(|k| {
                    let k = k as f64;
                    2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lam * lam).exp()
                })
                .sum();
            assert!((kolmogorov_q(lam) - alt).abs() < 1e-11, "lambda {lam}");
        }
        // well-known critical value: Q_K(1.3581) ~ 0.05
        assert!((kolmogorov_q(1.3581) - 0.05).abs() < 1e-4);
    }

    #[test]
    fn cvm_examples() {
        let f = cdf(&[0.3, 0.7]);
        assert_eq!(cvm_criterion(&f, &f), 0.0);
        assert_eq!(cvm_criterion(&cdf(&[1.0]), &cdf(&[0.0])), 1.0);
        assert_eq!(cvm_criterion(&f, &cdf(&[0.5])), 0.25);
    }

    #[test]
    fn relaxation_from_pvalue_runs() {
        let epochs = [1, 2, 3, 4, 5];
        assert_eq!(sustained_run_start(&epochs, &[0.001, 0.01, 0.2, 0.3, 0.4], 0.05), Some(3));
        assert_eq!(sustained_run_start(&epochs, &[0.01; 5], 0.05), None);
        // an early isolated exceedance does not count
        assert_eq!(sustained_run_start(&epochs, &[0.9, 0.01, 0.2, 0.3, 0.4], 0.05), Some(3));
        assert_eq!(sustained_run_start(&epochs, &[0.9, 0.9, 0.9, 0.9, 0.01], 0.05), None);
    }

    #[test]
    fn detect_relaxation_on_stationary_ensemble() {
        // every survivor cycles through the same values: F_t identical for t >= 1
        let target = Target::at_least(10.0);
        let trajs = (0..20)
            .map(|i| {
                let mut v = vec![0.0];
                v.extend((1..=6).map(|_| (i % 5) as f64));
                Trajectory::from_values(i, i, v, &target, 6).unwrap()
            })
            .collect();
        let ens = Ensemble::new(trajs, target, 6, "", 0).unwrap();
        let rep = detect_relaxation(&ens, (2, 6), 0.05).unwrap();
        assert_eq!(rep.epochs, vec![1, 2, 3, 4, 5, 6]);
        assert!(rep.ks_stat.iter().all(|&d| d == 0.0));
        assert_eq!(rep.t_r, Some(1));
        assert!(detect_relaxation(&ens, (4, 4), 0.05).is_err());
        assert!(detect_relaxation(&ens, (2, 7), 0.05).is_err());
    }

    proptest! {
        #[test]
        fn self_distances_vanish(xs in prop::collection::vec(-10.0f64..10.0, 1..50)) {
            let f = cdf(&xs);
            prop_assert_eq!(ks_statistic(&f, &f), 0.0);
            prop_assert_eq!(cvm_criterion(&f, &f), 0.0);
        }

        #[test]
        fn ks_symmetric_and_matches_brute_force(
            xs in prop::collection::vec(-3.0f64..3.0, 1..40),
            ys in prop::collection::vec(-3.0f64..3.0, 1..40),
        ) {
            let (f, g) = (cdf(&xs), cdf(&ys));
            let d = ks_statistic(&f, &g);
            prop_assert_eq!(d, ks_statistic(&g, &f));
            prop_assert!((d - ks_brute(&f, &g)).abs() < 1e-12);
        }

        #[test]
        fn ks_pvalue_decreasing(n in 1usize..5000, d1 in 0.001f64..1.0, d2 in 0.001f64..1.0) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            prop_assume!(hi - lo > 1e-6);
            let (p_lo, p_hi) = (ks_pvalue(lo, n).unwrap(), ks_pvalue(hi, n).unwrap());
            prop_assert!((0.0..=1.0).contains(&p_lo));
            // strict away from the floating-point plateaus at 1 and at the
            // truncation floor
            if p_hi > 1e-10 && p_lo < 1.0 - 1e-12 {
                prop_assert!(p_hi < p_lo, "p({hi}) = {p_hi} !< p({lo}) = {p_lo}");
            } else {
                prop_assert!(p_hi <= p_lo);
            }
        }
    }
}
