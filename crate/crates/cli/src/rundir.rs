//! Ensemble artifacts: `manifest.json` and `trajectories.jsonl`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use fpt_perturb::fpt::{Ensemble, Trajectory};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::failure::{io_at, Failure, Outcome};

pub const FORMAT_VERSION: &str = "1";
pub const MANIFEST: &str = "manifest.json";
pub const TRAJECTORIES: &str = "trajectories.jsonl";

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub config_digest: String,
    pub created: String,
    pub n_trajectories: usize,
    pub n_absorbed: usize,
    pub n_censored: usize,
    pub horizon: usize,
    pub master_seed: u64,
    pub process_fingerprint: String,
    pub config: RunConfig,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    seed: u64,
    values: Vec<f64>,
    fpt: Option<usize>,
}

/// Creation time; `SOURCE_DATE_EPOCH` pins it for reproducible artifacts.
pub fn timestamp() -> Outcome<String> {
    let t = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(s) => {
            let secs: i64 = s
                .trim()
                .parse()
                .map_err(|_| Failure::Usage(format!("SOURCE_DATE_EPOCH {s:?} is not an integer")))?;
            DateTime::<Utc>::from_timestamp(secs, 0)
                .ok_or_else(|| Failure::Usage(format!("SOURCE_DATE_EPOCH {s} out of range")))?
        }
        Err(_) => Utc::now(),
    };
    Ok(t.to_rfc3339_opts(SecondsFormat::Secs, true))
}

pub fn manifest_for(config: &RunConfig, ensemble: &Ensemble) -> Outcome<Manifest> {
    let n_absorbed = ensemble.trajectories.iter().filter(|t| t.fpt.is_some()).count();
    Ok(Manifest {
        format_version: FORMAT_VERSION.into(),
        config_digest: config.digest(),
        created: timestamp()?,
        n_trajectories: ensemble.len(),
        n_absorbed,
        n_censored: ensemble.len() - n_absorbed,
        horizon: ensemble.horizon,
        master_seed: ensemble.master_seed,
        process_fingerprint: ensemble.process_fingerprint.clone(),
        config: config.clone(),
    })
}

pub fn encode_manifest(m: &Manifest) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(m).expect("manifest serializes");
    bytes.push(b'\n');
    bytes
}

pub fn encode_trajectories(ensemble: &Ensemble) -> Vec<u8> {
    let mut out = Vec::new();
    for t in &ensemble.trajectories {
        let rec = Record { id: t.id, seed: t.seed, values: t.values.clone(), fpt: t.fpt };
        serde_json::to_writer(&mut out, &rec).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn read_manifest(dir: &Path) -> Outcome<Manifest> {
    let path = dir.join(MANIFEST);
    let text = io_at(&path, fs::read_to_string(&path))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Failure::Validation(format!(
            "{}: unsupported format_version {:?}",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

/// Reads and cross-checks a simulated ensemble.
pub fn read_ensemble(dir: &Path) -> Outcome<(Manifest, Ensemble)> {
    let manifest = read_manifest(dir)?;
    let process = &manifest.config.process;
    let path = dir.join(TRAJECTORIES);
    let file = io_at(&path, fs::File::open(&path))?;
    let mut trajectories = Vec::with_capacity(manifest.n_trajectories);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = io_at(&path, line)?;
        let bad = |msg: String| Failure::Validation(format!("{}:{}: {msg}", path.display(), i + 1));
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let t = Trajectory::from_values(rec.id, rec.seed, rec.values, &process.target, manifest.horizon)
            .map_err(|e| bad(e.to_string()))?;
        if t.fpt != rec.fpt {
            return Err(bad(format!("recorded fpt {:?} disagrees with the values", rec.fpt)));
        }
        trajectories.push(t);
    }
    if trajectories.len() != manifest.n_trajectories {
        return Err(Failure::Validation(format!(
            "{}: {} trajectories, manifest says {}",
            path.display(),
            trajectories.len(),
            manifest.n_trajectories
        )));
    }
    let ensemble = Ensemble::new(
        trajectories,
        process.target,
        manifest.horizon,
        manifest.process_fingerprint.clone(),
        manifest.master_seed,
    )?;
    Ok((manifest, ensemble))
}

/// Output files of one command, written together once everything is computed.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    /// Each file goes to a temporary sibling first and is renamed into place.
    pub fn commit(self, dir: &Path) -> Outcome {
        io_at(dir, fs::create_dir_all(dir))?;
        for (path, bytes) in self.files {
            let tmp = path.with_extension("partial");
            let mut f = io_at(&tmp, fs::File::create(&tmp))?;
            io_at(&tmp, f.write_all(&bytes))?;
            io_at(&tmp, f.sync_all())?;
            io_at(&path, fs::rename(&tmp, &path))?;
        }
        Ok(())
    }
}
