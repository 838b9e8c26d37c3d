use std::collections::{BTreeSet, HashMap};
use std::hash::{BuildHasher, RandomState};
use std::path::{Path, PathBuf};

use fpt_perturb::fpt::{
    conditional_metric_stats, estimate_survival, mean_fpt, mean_fpt_stderr, SurvivalCurve,
};
use fpt_perturb::oracle::{exact_perturbed_mfpt, exact_residual, exact_survival, ChainModel, ResetKernel};
use fpt_perturb::perturb::PerturbationSpec;
use fpt_perturb::predict::{
    predict_rare_from, predict_sr_curve, rank_perturbations, speedup, Baseline, Etp, Flag, PredictionCurve, TauSource,
};
use fpt_perturb::process::{measure_residuals, simulate_ensemble, ProcessSpec, Protocol};
use fpt_perturb::qss::{default_window, detect_relaxation, sustained_run_start};
use fpt_perturb::Error;

use crate::config::{check_alpha, check_quantiles, RunConfig, Window};
use crate::failure::{Failure, Outcome};
use crate::rundir::{self, encode_manifest, encode_trajectories, manifest_for, read_ensemble, Manifest, Outputs};
use crate::table::{fmt_f64, fmt_opt, Records, Table};
use crate::Cli;

const DEFAULT_ALPHA: f64 = 0.05;
const DEFAULT_QUANTILES: [f64; 2] = [0.1, 0.9];
const ORACLE_MAX_EPOCHS: usize = 10_000_000;

pub const SURVIVAL: &str = "survival.csv";
pub const QSS: &str = "qss.csv";
pub const TAU: &str = "tau.csv";
pub const PREDICTION: &str = "prediction.csv";
pub const VALIDATE: &str = "validate.csv";
pub const TRAJSTATS: &str = "trajstats.csv";
pub const ORACLE: &str = "oracle.csv";

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// The run configuration with command-line overrides applied.
fn load_config(cli: &Cli) -> Outcome<RunConfig> {
    let path = cli.config.as_deref().ok_or_else(|| usage("--config is required"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.master_seed = Some(s);
    }
    if cfg.master_seed.is_none() {
        if !cli.seed_from_entropy {
            return Err(usage("no master seed: set master_seed in the config, pass --seed, or --seed-from-entropy"));
        }
        let seed = RandomState::new().hash_one(std::time::SystemTime::now());
        eprintln!("fpt-perturb: master seed {seed} drawn from entropy");
        cfg.master_seed = Some(seed);
    }
    if cli.p_star.is_some() {
        cfg.p_star = cli.p_star;
    }
    if cli.window.is_some() {
        cfg.analysis.window = cli.window;
    }
    if cli.alpha.is_some() {
        cfg.analysis.alpha = cli.alpha;
    }
    if cli.quantiles.is_some() {
        cfg.analysis.quantiles = cli.quantiles.clone();
    }
    if cli.p_grid.is_some() {
        cfg.analysis.p_grid = cli.p_grid;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seed_of(cfg: &RunConfig) -> u64 {
    cfg.master_seed.expect("seed resolved by load_config")
}

fn out_dir(cli: &Cli, cfg: Option<&RunConfig>) -> Outcome<PathBuf> {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .ok_or_else(|| usage("--out is required"))
}

fn input_dir(cli: &Cli) -> Outcome<PathBuf> {
    cli.input.clone().or_else(|| cli.out.clone()).ok_or_else(|| usage("--input or --out is required"))
}

fn alpha(cli: &Cli, manifest: Option<&Manifest>) -> Outcome<f64> {
    let a = cli
        .alpha
        .or_else(|| manifest.and_then(|m| m.config.analysis.alpha))
        .unwrap_or(DEFAULT_ALPHA);
    check_alpha(a)?;
    Ok(a)
}

pub fn simulate(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    let out = out_dir(cli, Some(&cfg))?;
    let ensemble = simulate_ensemble(&cfg.process, &cfg.protocol, cfg.n_trajectories, seed_of(&cfg))?;
    let manifest = manifest_for(&cfg, &ensemble)?;
    let mut files = Outputs::default();
    files.add(out.join(rundir::TRAJECTORIES), encode_trajectories(&ensemble));
    files.add(out.join(rundir::MANIFEST), encode_manifest(&manifest));
    files.commit(&out)?;
    println!(
        "{} trajectories: {} absorbed, {} censored at horizon {}",
        manifest.n_trajectories, manifest.n_absorbed, manifest.n_censored, manifest.horizon
    );
    Ok(())
}

pub fn survival(cli: &Cli) -> Outcome {
    let (input, out) = (input_dir(cli)?, out_dir(cli, None)?);
    let (_, ensemble) = read_ensemble(&input)?;
    let curve = estimate_survival(&ensemble)?;
    let mut t = Table::new(["t", "psi", "at_risk"]);
    for (i, (&psi, &k)) in curve.psi.iter().zip(&curve.at_risk).enumerate() {
        t.push(vec![i.to_string(), fmt_f64(psi), k.to_string()]);
    }
    let mut files = Outputs::default();
    files.add(out.join(SURVIVAL), t.to_bytes()?);
    files.commit(&out)
}

/// Reads `survival.csv`; `psi` must equal `at_risk / at_risk[0]` exactly.
pub fn read_survival(path: &Path) -> Outcome<SurvivalCurve> {
    let r = Records::read(path)?;
    let (ct, cp, ca) = (r.column("t")?, r.column("psi")?, r.column("at_risk")?);
    let mut at_risk = Vec::with_capacity(r.rows.len());
    let mut psi = Vec::with_capacity(r.rows.len());
    for i in 0..r.rows.len() {
        if r.parse::<usize>(i, ct)? != i {
            return Err(Failure::Validation(format!("{}: epochs must run 0, 1, 2, ...", path.display())));
        }
        psi.push(r.parse::<f64>(i, cp)?);
        at_risk.push(r.parse::<usize>(i, ca)?);
    }
    let n = *at_risk.first().ok_or_else(|| Failure::Validation(format!("{}: no rows", path.display())))?;
    let curve = SurvivalCurve::from_at_risk(at_risk, n)?;
    if curve.psi != psi {
        return Err(Failure::Validation(format!("{}: psi disagrees with at_risk", path.display())));
    }
    Ok(curve)
}

pub fn qss(cli: &Cli) -> Outcome {
    let (input, out) = (input_dir(cli)?, out_dir(cli, None)?);
    let (manifest, ensemble) = read_ensemble(&input)?;
    let window = cli
        .window
        .or(manifest.config.analysis.window)
        .unwrap_or_else(|| {
            let (a, b) = default_window(ensemble.horizon);
            Window(a, b)
        });
    let alpha = alpha(cli, Some(&manifest))?;
    let report = detect_relaxation(&ensemble, (window.0, window.1), alpha)?;
    let mut t = Table::new(["t", "ks_stat", "p_value", "cvm"]);
    for i in 0..report.epochs.len() {
        t.push(vec![
            report.epochs[i].to_string(),
            fmt_f64(report.ks_stat[i]),
            fmt_f64(report.ks_pvalue[i]),
            fmt_f64(report.cvm[i]),
        ]);
    }
    let mut files = Outputs::default();
    files.add(out.join(QSS), t.to_bytes()?);
    files.commit(&out)?;
    match report.t_r {
        Some(t_r) => println!("t_r = {t_r}"),
        None => println!("t_r = none"),
    }
    Ok(())
}

/// Relaxation time recomputed from a `qss.csv` with the sustained-run rule.
fn read_t_r(path: &Path, alpha: f64) -> Outcome<Option<usize>> {
    let r = Records::read(path)?;
    let (ct, cp) = (r.column("t")?, r.column("p_value")?);
    let mut epochs = Vec::with_capacity(r.rows.len());
    let mut pvalues = Vec::with_capacity(r.rows.len());
    for i in 0..r.rows.len() {
        epochs.push(r.parse::<usize>(i, ct)?);
        pvalues.push(r.parse::<f64>(i, cp)?);
    }
    Ok(sustained_run_start(&epochs, &pvalues, alpha))
}

pub fn measure_tau(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    let out = out_dir(cli, Some(&cfg))?;
    if cfg.perturbations.is_empty() {
        return Err(usage("the config lists no perturbations to measure"));
    }
    let p_star = cfg.p_star.ok_or_else(|| usage("--p-star (or p_star in the config) is required"))?;
    let labels: BTreeSet<String> = cfg.perturbations.iter().map(PerturbationSpec::label).collect();
    if labels.len() != cfg.perturbations.len() {
        return Err(Failure::Validation("duplicate perturbations in the config".into()));
    }

    let mut candidates = Vec::with_capacity(cfg.perturbations.len());
    for p in &cfg.perturbations {
        let s = measure_residuals(
            &cfg.process,
            p,
            p_star,
            cfg.n_trajectories,
            seed_of(&cfg),
            cfg.residual_horizon(),
        )?;
        candidates.push((p.label(), s));
    }
    // same seeds, so every candidate perturbs the same survivors
    let ids = &candidates[0].1.survivor_ids;
    if candidates.iter().any(|(_, s)| &s.survivor_ids != ids) {
        return Err(Failure::Runtime("candidates were not measured on the same survivors".into()));
    }
    let censored: Vec<String> = candidates
        .iter()
        .filter(|(_, s)| s.n_censored > 0)
        .map(|(name, s)| format!("{name}: {} of {}", s.n_censored, s.n_survivors_at_pstar))
        .collect();
    if !censored.is_empty() {
        return Err(Failure::Statistical(format!(
            "residual times censored after {} epochs ({}); raise residual_horizon",
            cfg.residual_horizon(),
            censored.join(", ")
        )));
    }

    let ranked = rank_perturbations(&candidates)?;
    let mut t = Table::new(["name", "p_star", "tau_bar", "stderr", "n"]);
    for r in &ranked {
        t.push(vec![r.name.clone(), p_star.to_string(), fmt_f64(r.tau_bar), fmt_f64(r.stderr), r.n.to_string()]);
    }
    let mut files = Outputs::default();
    files.add(out.join(TAU), t.to_bytes()?);
    files.commit(&out)?;
    println!("{} survivors of {} at P* = {p_star}", ids.len(), cfg.n_trajectories);
    for (i, r) in ranked.iter().enumerate() {
        println!("{}. {} tau_bar = {:.3} +- {:.3}", i + 1, r.name, r.tau_bar, r.stderr);
    }
    Ok(())
}

struct TauRow {
    name: String,
    source: TauSource,
}

fn read_tau(path: &Path) -> Outcome<Vec<TauRow>> {
    let r = Records::read(path)?;
    let (cn, cp, ct, cs) = (r.column("name")?, r.column("p_star")?, r.column("tau_bar")?, r.column("stderr")?);
    (0..r.rows.len())
        .map(|i| {
            Ok(TauRow {
                name: r.rows[i][cn].clone(),
                source: TauSource { p_star: r.parse(i, cp)?, tau_bar: r.parse(i, ct)?, stderr: r.parse(i, cs)? },
            })
        })
        .collect()
}

/// Mean and standard error of `T` from a fully absorbed survival curve.
fn baseline(curve: &SurvivalCurve) -> Option<Baseline> {
    if !curve.fully_absorbed {
        return None;
    }
    let (mut m1, mut m2) = (0.0, 0.0);
    for t in 1..=curve.horizon() {
        let w = curve.psi[t - 1] - curve.psi[t];
        m1 += t as f64 * w;
        m2 += (t * t) as f64 * w;
    }
    let mean: f64 = curve.psi.iter().sum();
    let var = (m2 - m1 * m1).max(0.0);
    Some(Baseline { mean, stderr: (var / curve.n_total as f64).sqrt() })
}

pub fn predict(cli: &Cli) -> Outcome {
    if cli.sr && cli.tau.is_some() {
        return Err(usage("--sr and --tau are mutually exclusive"));
    }
    let (input, out) = (input_dir(cli)?, out_dir(cli, None)?);
    let manifest = rundir::read_manifest(&input).ok();
    let curve = read_survival(&input.join(SURVIVAL))?;
    let grid_override = cli.p_grid.or_else(|| manifest.as_ref().and_then(|m| m.config.analysis.p_grid));

    let pred: PredictionCurve = if cli.sr {
        let grid = grid_override.map(|g| g.values()).unwrap_or_else(|| (1..=curve.horizon()).collect());
        predict_sr_curve(&curve, &grid)?
    } else {
        let tau_path = cli.tau.clone().unwrap_or_else(|| input.join(TAU));
        if !tau_path.exists() {
            return Err(usage(format!(
                "{} not found: run measure-tau, pass --tau, or use --sr",
                tau_path.display()
            )));
        }
        let rows = read_tau(&tau_path)?;
        let row = match &cli.perturbation {
            Some(name) => rows
                .iter()
                .find(|r| &r.name == name)
                .ok_or_else(|| Failure::Validation(format!("{name:?} not in {}", tau_path.display())))?,
            None => rows
                .iter()
                .min_by(|a, b| a.source.tau_bar.total_cmp(&b.source.tau_bar).then_with(|| a.name.cmp(&b.name)))
                .ok_or_else(|| Failure::Validation(format!("{}: no rows", tau_path.display())))?,
        };
        let alpha = alpha(cli, manifest.as_ref())?;
        let qss_path = input.join(QSS);
        let t_r = if qss_path.exists() { read_t_r(&qss_path, alpha)? } else { None };
        let grid =
            grid_override.map(|g| g.values()).unwrap_or_else(|| (1..=row.source.p_star).collect());
        println!("perturbation {} (tau_bar = {:.3} at P* = {})", row.name, row.source.tau_bar, row.source.p_star);
        predict_rare_from(&curve, row.source, t_r, &grid)?
    };
    let pred = match baseline(&curve) {
        Some(b) => speedup(b, pred)?,
        None => pred,
    };

    let mut t = Table::new(["P", "e_tp", "e_tp_stderr", "speedup", "flag"]);
    for i in 0..pred.p_values.len() {
        t.push(vec![
            pred.p_values[i].to_string(),
            fmt_opt(pred.e_tp[i].finite()),
            fmt_opt(pred.e_tp_stderr[i]),
            fmt_opt(pred.speedup[i]),
            pred.flags[i].as_str().to_string(),
        ]);
    }
    let mut files = Outputs::default();
    files.add(out.join(PREDICTION), t.to_bytes()?);
    files.commit(&out)?;

    let (lo, hi) = pred.valid_range;
    if lo <= hi {
        println!("valid range P in [{lo}, {hi}]");
    } else {
        println!("valid range empty: max(t_r, tau_bar) = {lo} exceeds {hi}");
    }
    let best = (0..pred.p_values.len())
        .filter(|&i| pred.flags[i] == Flag::Ok)
        .filter_map(|i| pred.e_tp[i].finite().map(|e| (e, pred.p_values[i])))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    if let Some((e, p)) = best {
        println!("minimal E[T_P] within the valid range = {e:.3} at P = {p}");
    }
    Ok(())
}

fn choose_perturbation(cli: &Cli, cfg: &RunConfig) -> Outcome<PerturbationSpec> {
    let mut known: Vec<PerturbationSpec> = cfg.perturbations.clone();
    if let Some(p) = cfg.protocol.perturbation() {
        if !known.contains(p) {
            known.push(*p);
        }
    }
    match &cli.perturbation {
        Some(name) => known
            .into_iter()
            .find(|p| &p.label() == name)
            .ok_or_else(|| Failure::Validation(format!("perturbation {name:?} is not in the config"))),
        None if known.len() == 1 => Ok(known[0]),
        None => Err(usage("choose one of the configured perturbations with --perturbation")),
    }
}

pub fn validate(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    let out = out_dir(cli, Some(&cfg))?;
    let perturbation = choose_perturbation(cli, &cfg)?;
    let grid = cfg.analysis.p_grid.ok_or_else(|| usage("--p-grid (or analysis.p_grid) is required"))?;
    let process = ProcessSpec { horizon: cfg.validate_horizon.unwrap_or(cfg.process.horizon), ..cfg.process.clone() };

    let mut t = Table::new(["P", "empirical_mean", "stderr", "n", "n_absorbed"]);
    let mut n_censored_rows = 0;
    for p in grid.values() {
        let protocol = Protocol::EveryP { p, perturbation };
        let ens = simulate_ensemble(&process, &protocol, cfg.n_trajectories, seed_of(&cfg))?;
        let sample = ens.fpt_sample();
        let (mean, se) = match (mean_fpt(&sample), mean_fpt_stderr(&sample)) {
            (Ok(m), Ok(s)) => (Some(m), Some(s)),
            (Err(Error::CensoredBaseline { .. }), _) | (_, Err(Error::CensoredBaseline { .. })) => {
                n_censored_rows += 1;
                (None, None)
            }
            (Err(e), _) | (_, Err(e)) => return Err(e.into()),
        };
        t.push(vec![
            p.to_string(),
            fmt_opt(mean),
            fmt_opt(se),
            sample.n().to_string(),
            sample.times.len().to_string(),
        ]);
    }
    let mut files = Outputs::default();
    files.add(out.join(VALIDATE), t.to_bytes()?);
    files.commit(&out)?;
    if n_censored_rows > 0 {
        eprintln!(
            "fpt-perturb: {n_censored_rows} grid points censored at horizon {}; their means are left empty",
            process.horizon
        );
    }
    Ok(())
}

fn quantile_column(q: f64) -> String {
    let pct = fmt_f64(q * 100.0);
    // 0.1 * 100 is 10.000000000000002
    let rounded = format!("{:.6}", q * 100.0);
    let rounded = rounded.trim_end_matches('0').trim_end_matches('.');
    if rounded.len() < pct.len() {
        format!("q{rounded}")
    } else {
        format!("q{pct}")
    }
}

pub fn stats(cli: &Cli) -> Outcome {
    let (input, out) = (input_dir(cli)?, out_dir(cli, None)?);
    let (manifest, ensemble) = read_ensemble(&input)?;
    let quantiles = cli
        .quantiles
        .clone()
        .or_else(|| manifest.config.analysis.quantiles.clone())
        .unwrap_or_else(|| DEFAULT_QUANTILES.to_vec());
    check_quantiles(&quantiles)?;
    let mut header = vec!["t".to_string(), "mean".to_string()];
    header.extend(quantiles.iter().map(|&q| quantile_column(q)));
    header.push("at_risk".into());
    let mut seen = HashMap::new();
    if header.iter().any(|h| seen.insert(h.clone(), ()).is_some()) {
        return Err(Failure::Validation("duplicate quantiles".into()));
    }

    let rows = conditional_metric_stats(&ensemble, &quantiles)?;
    let mut t = Table::new(header);
    for r in rows {
        let mut row = vec![r.t.to_string(), fmt_f64(r.mean)];
        row.extend(r.quantiles.iter().map(|&q| fmt_f64(q)));
        row.push(r.at_risk.to_string());
        t.push(row);
    }
    let mut files = Outputs::default();
    files.add(out.join(TRAJSTATS), t.to_bytes()?);
    files.commit(&out)
}

pub fn oracle(cli: &Cli) -> Outcome {
    let path = cli.config.as_deref().ok_or_else(|| usage("--config (the chain JSON) is required"))?;
    let out = out_dir(cli, None)?;
    let grid = cli.p_grid.ok_or_else(|| usage("--p-grid is required"))?.values();
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let mut model: ChainModel =
        serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    // without a kernel the perturbation is a full reset to the initial law
    if model.reset_kernel.is_none() {
        model.reset_kernel = Some(ResetKernel::Distribution(model.p0.clone()));
    }
    model.validate()?;

    let p_max = *grid.last().expect("grid is non-empty");
    let curve = exact_survival(&model, p_max)?;
    let mut t = Table::new(["P", "exact_e_tp", "exact_tau", "psi_P"]);
    for p in grid {
        let e_tp = match exact_perturbed_mfpt(&model, p, ORACLE_MAX_EPOCHS) {
            Ok(r) => Etp::Finite(r.value),
            Err(Error::NonAbsorbing(_)) => Etp::Divergent,
            Err(e) => return Err(e.into()),
        };
        let tau = match exact_residual(&model, p) {
            Ok(x) => Some(x),
            Err(Error::EmptyConditional { .. } | Error::NonAbsorbing(_)) => None,
            Err(e) => return Err(e.into()),
        };
        t.push(vec![p.to_string(), fmt_opt(e_tp.finite()), fmt_opt(tau), fmt_f64(curve.psi[p])]);
    }
    let mut files = Outputs::default();
    files.add(out.join(ORACLE), t.to_bytes()?);
    files.commit(&out)
}
