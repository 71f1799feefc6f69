//! Recomputation policies: the learned logistic policy and fixed schedules.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_SCHEMA_VERSION: u32 = 1;

/// Bias that makes the initial policy recompute with probability ~0.982.
pub const INITIAL_BIAS: f64 = -4.0;

/// Frozen per-component statistics of the expanded (raw and squared) features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(len: usize) -> Self {
        Self {
            mean: vec![0.0; len],
            std: vec![1.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub schema_version: u32,
    /// Weights over the normalized features; the last entry multiplies the bias.
    pub theta: Vec<f64>,
    pub stats: FeatureStats,
    #[serde(default)]
    pub feature_names: Vec<String>,
}

impl PolicyParams {
    /// Zero weights except the bias.
    pub fn initial(stats: FeatureStats, feature_names: Vec<String>) -> Self {
        let mut theta = vec![0.0; stats.len() + 1];
        *theta.last_mut().expect("bias entry") = INITIAL_BIAS;
        Self {
            schema_version: FEATURE_SCHEMA_VERSION,
            theta,
            stats,
            feature_names,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != FEATURE_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "policy feature schema {} is not the supported {FEATURE_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.stats.mean.len() != self.stats.std.len() || self.theta.len() != self.stats.len() + 1
        {
            return Err(Error::Dimension {
                context: "policy weights",
                expected: self.stats.len() + 1,
                got: self.theta.len(),
            });
        }
        if self
            .theta
            .iter()
            .chain(&self.stats.mean)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("policy parameters are not finite".into()));
        }
        if self.stats.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let params: Self = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyKind {
    Always,
    Never,
    Periodic(usize),
    Logistic(PolicyParams),
}

impl PolicyKind {
    pub fn is_stochastic(&self) -> bool {
        matches!(self, PolicyKind::Logistic(_))
    }

    pub fn label(&self) -> String {
        match self {
            PolicyKind::Always => "always".into(),
            PolicyKind::Never => "never".into(),
            PolicyKind::Periodic(t) => format!("periodic:{t}"),
            PolicyKind::Logistic(_) => "rl".into(),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Parses `always`, `never` and `periodic:t`; learned policies load from JSON files.
impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "always" => Ok(PolicyKind::Always),
            "never" => Ok(PolicyKind::Never),
            _ => {
                let t = s
                    .strip_prefix("periodic:")
                    .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))?;
                let t: usize = t
                    .parse()
                    .map_err(|_| Error::Config(format!("bad period in `{s}`")))?;
                if t == 0 {
                    return Err(Error::Config("period must be at least 1".into()));
                }
                Ok(PolicyKind::Periodic(t))
            }
        }
    }
}

/// Logistic function evaluated without overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(z))` without cancellation.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn dot(theta: &[f64], features: &[f64]) -> f64 {
    debug_assert_eq!(theta.len(), features.len());
    theta.iter().zip(features).map(|(a, b)| a * b).sum()
}

/// `pi(0 | s) = sigmoid(theta' s)`: probability of keeping the current plan.
pub fn prob_no_recompute(theta: &[f64], features: &[f64]) -> f64 {
    sigmoid(dot(theta, features))
}

pub fn log_prob(theta: &[f64], features: &[f64], recompute: bool) -> f64 {
    let z = dot(theta, features);
    if recompute {
        log_sigmoid(-z)
    } else {
        log_sigmoid(z)
    }
}

/// Score `grad_theta log pi(a | s)`.
pub fn log_prob_grad(theta: &[f64], features: &[f64], recompute: bool) -> Vec<f64> {
    let p0 = prob_no_recompute(theta, features);
    let w = if recompute { -p0 } else { 1.0 - p0 };
    features.iter().map(|s| w * s).collect()
}

/// Action at absolute step `step`; `true` requests a recomputation.
pub fn sample_action(kind: &PolicyKind, features: &[f64], step: usize, rng: &mut impl Rng) -> bool {
    match kind {
        PolicyKind::Always => true,
        PolicyKind::Never => false,
        PolicyKind::Periodic(t) => step.is_multiple_of(*t),
        PolicyKind::Logistic(params) => {
            let p0 = prob_no_recompute(&params.theta, features);
            rng.random::<f64>() >= p0
        }
    }
}
