use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fpt_perturb::perturb::PerturbationSpec;
use fpt_perturb::process::{ProcessSpec, Protocol};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::{io_at, Failure, Outcome};

/// Inclusive range `a:b:step` of perturbation intervals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Grid {
    pub start: usize,
    pub end: usize,
    pub step: usize,
}

impl Grid {
    pub fn values(&self) -> Vec<usize> {
        (self.start..=self.end).step_by(self.step).collect()
    }
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let nums = parts
            .iter()
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| format!("grid {s:?}: expected a:b or a:b:step with non-negative integers"))?;
        let (start, end, step) = match nums[..] {
            [a, b] => (a, b, 1),
            [a, b, c] => (a, b, c),
            _ => return Err(format!("grid {s:?}: expected a:b or a:b:step")),
        };
        if start == 0 || step == 0 || end < start {
            return Err(format!("grid {s:?}: need 1 <= a <= b and step >= 1"));
        }
        Ok(Self { start, end, step })
    }
}

impl TryFrom<String> for Grid {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Grid> for String {
    fn from(g: Grid) -> String {
        g.to_string()
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.start, self.end, self.step)
    }
}

/// Reference window `t1:t2` for relaxation detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Window(pub usize, pub usize);

impl FromStr for Window {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once(':').ok_or_else(|| format!("window {s:?}: expected t1:t2"))?;
        let parse = |x: &str| x.trim().parse::<usize>().map_err(|_| format!("window {s:?}: bad epoch {x:?}"));
        let (t1, t2) = (parse(a)?, parse(b)?);
        if t1 >= t2 {
            return Err(format!("window {s:?}: need t1 < t2"));
        }
        Ok(Self(t1, t2))
    }
}

impl TryFrom<String> for Window {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Window> for String {
    fn from(w: Window) -> String {
        format!("{}:{}", w.0, w.1)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Analysis {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<Window>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantiles: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_grid: Option<Grid>,
}

fn unperturbed() -> Protocol {
    Protocol::Unperturbed
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub process: ProcessSpec,
    #[serde(default = "unperturbed")]
    pub protocol: Protocol,
    pub n_trajectories: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_seed: Option<u64>,
    /// Not part of the digest: relocating a run does not change it.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub analysis: Analysis,
    /// Candidates for `measure-tau`; `validate` uses one of them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub perturbations: Vec<PerturbationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_star: Option<usize>,
    /// Epochs simulated after the single perturbation; defaults to ten horizons.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_horizon: Option<usize>,
    /// Horizon of the brute-force runs of `validate`; defaults to the process horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validate_horizon: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Outcome<Self> {
        let text = io_at(path, std::fs::read_to_string(path))?;
        serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Outcome {
        self.process.validate()?;
        self.protocol.validate()?;
        if self.n_trajectories == 0 {
            return Err(Failure::Validation("n_trajectories must be positive".into()));
        }
        for p in &self.perturbations {
            p.validate()?;
        }
        if let Some(a) = self.analysis.alpha {
            check_alpha(a)?;
        }
        if let Some(q) = &self.analysis.quantiles {
            check_quantiles(q)?;
        }
        if self.p_star == Some(0) || self.residual_horizon == Some(0) || self.validate_horizon == Some(0) {
            return Err(Failure::Validation("p_star and horizons must be positive".into()));
        }
        Ok(())
    }

    /// Canonical JSON: object keys sorted, no whitespace.
    pub fn canonical_json(&self) -> serde_json::Value {
        // serde_json's default map is ordered by key
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.canonical_json()).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn residual_horizon(&self) -> usize {
        self.residual_horizon.unwrap_or(10 * self.process.horizon)
    }
}

pub fn check_alpha(a: f64) -> Outcome {
    if !(a > 0.0 && a < 1.0) {
        return Err(Failure::Validation(format!("alpha {a} outside (0, 1)")));
    }
    Ok(())
}

pub fn check_quantiles(q: &[f64]) -> Outcome {
    if q.is_empty() || q.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Failure::Validation("quantiles must be a non-empty list in [0, 1]".into()));
    }
    Ok(())
}
