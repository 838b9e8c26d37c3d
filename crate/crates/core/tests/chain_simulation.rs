//! Monte Carlo estimates on a small absorbing chain against the exact results.

use fpt_perturb::fpt::{estimate_survival, mean_fpt, mean_fpt_stderr, Direction, Target};
use fpt_perturb::oracle::{exact_perturbed_mfpt, exact_residual, exact_survival, ChainModel};
use fpt_perturb::perturb::PerturbationSpec;
use fpt_perturb::process::{
    mean_residual, measure_residuals, residual_stderr, simulate_ensemble, MarkovChainParams, ProcessKind, ProcessSpec,
    Protocol,
};
use fpt_perturb::qss::detect_relaxation;

fn q() -> Vec<Vec<f64>> {
    vec![vec![0.6, 0.3, 0.05], vec![0.3, 0.5, 0.15], vec![0.1, 0.3, 0.5]]
}

fn p0() -> Vec<f64> {
    vec![1.0, 0.0, 0.0]
}

fn process(horizon: usize) -> ProcessSpec {
    ProcessSpec {
        kind: ProcessKind::MarkovChain(MarkovChainParams {
            q: q(),
            p0: p0(),
            values: vec![0.0, 0.2, 0.4],
            absorbed_value: 1.0,
        }),
        horizon,
        target: Target::new(1.0, Direction::AtLeast).unwrap(),
    }
}

fn oracle() -> ChainModel {
    ChainModel::with_full_sr(q(), p0()).unwrap()
}

#[test]
fn survival_matches_the_exact_curve() {
    let n = 50_000;
    let ens = simulate_ensemble(&process(40), &Protocol::Unperturbed, n, 5).unwrap();
    let sim = estimate_survival(&ens).unwrap();
    let exact = exact_survival(&oracle(), 40).unwrap();
    for t in 0..=40 {
        let p = exact.psi[t];
        let tol = 4.0 * (p * (1.0 - p) / n as f64).sqrt();
        assert!((sim.psi[t] - p).abs() <= tol + 1e-15, "t = {t}: {} vs {p}", sim.psi[t]);
    }
}

#[test]
fn resetting_every_p_matches_the_exact_mean() {
    let n = 20_000;
    for p in [2, 5, 10] {
        let protocol = Protocol::EveryP { p, perturbation: PerturbationSpec::FullSr };
        let ens = simulate_ensemble(&process(5000), &protocol, n, 17).unwrap();
        let s = ens.fpt_sample();
        let (m, se) = (mean_fpt(&s).unwrap(), mean_fpt_stderr(&s).unwrap());
        let exact = exact_perturbed_mfpt(&oracle(), p, 1_000_000).unwrap().value;
        assert!((m - exact).abs() <= 4.0 * se, "P = {p}: {m} +- {se} vs {exact}");
    }
}

#[test]
fn measured_residuals_match_the_exact_residual() {
    let n = 20_000;
    for p_star in [3, 10] {
        let s = measure_residuals(&process(50), &PerturbationSpec::FullSr, p_star, n, 23, 5000).unwrap();
        let (m, se) = (mean_residual(&s).unwrap(), residual_stderr(&s).unwrap());
        let exact = exact_residual(&oracle(), p_star).unwrap();
        assert!((m - exact).abs() <= 4.0 * se, "P* = {p_star}: {m} +- {se} vs {exact}");
    }
}

#[test]
fn chain_with_a_quasi_stationary_law_relaxes() {
    let finite = (0..20u64)
        .filter(|&seed| {
            let ens = simulate_ensemble(&process(60), &Protocol::Unperturbed, 2000, seed).unwrap();
            detect_relaxation(&ens, (10, 40), 0.05).unwrap().t_r.is_some()
        })
        .count();
    assert!(finite >= 19, "finite t_r in {finite} of 20 seeds");
}

#[test]
fn double_well_relaxes_within_half_the_horizon() {
    let spec = ProcessSpec::double_well();
    let ens = simulate_ensemble(&spec, &Protocol::Unperturbed, 2000, 1).unwrap();
    let r = detect_relaxation(&ens, (20, 100), 0.05).unwrap();
    let t_r = r.t_r.expect("relaxation detected");
    assert!(t_r <= spec.horizon / 2, "t_r = {t_r}");
}
