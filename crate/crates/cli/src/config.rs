//! Run configuration: a single JSON document, scalar overrides by dotted key.

use std::path::{Path, PathBuf};

use rvm_core::bench::{Against, ExperimentConfig, Metric, SupportRule, ValueRule};
use rvm_core::gibbs::ChainConfig;
use rvm_core::kernel::{DesignKind, KernelSpec};
use rvm_core::oracle::GridSpec;
use rvm_core::prior::{LocalVariancePrior, Regime};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignSource {
    Generate { n: usize, p: usize, design: DesignKind },
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// `Y = K beta0 + noise` with a sparse truth; `q_n` defaults to `ceil(n^gamma)`.
    Simulate {
        #[serde(default)]
        q_n: Option<usize>,
        #[serde(default = "half")]
        gamma: f64,
        #[serde(default = "two")]
        m: f64,
        #[serde(default = "one")]
        sigma0_sq: f64,
        #[serde(default = "random_support")]
        support_rule: SupportRule,
        #[serde(default = "uniform_values")]
        value_rule: ValueRule,
    },
    /// `n x 1` matrix CSV.
    Csv { path: PathBuf },
}

fn half() -> f64 {
    0.5
}
fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn random_support() -> SupportRule {
    SupportRule::Random
}
fn uniform_values() -> ValueRule {
    ValueRule::Uniform
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Simulate {
            q_n: None,
            gamma: half(),
            m: two(),
            sigma0_sq: one(),
            support_rule: random_support(),
            value_rule: uniform_values(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperConfig {
    pub a: f64,
    pub b: f64,
    /// Explicit `tau^2`; when absent it comes from the regime schedule.
    pub tau_sq: Option<f64>,
    pub regime: Regime,
    pub schedule_constant: f64,
    pub schedule_delta: Option<f64>,
    /// Sparsity used by the schedule; defaults to the simulated truth's `q_n`.
    pub q_n: Option<usize>,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0, tau_sq: None, regime: Regime::BoundedKernel, schedule_constant: 1.0, schedule_delta: None, q_n: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelChecks {
    /// Eigenvalue bounds `(c1, c2)`; without them only positive definiteness is required.
    pub certificate: Option<(f64, f64)>,
    /// Pairwise-separation check; defaults to on for Gaussian kernels.
    pub separation: Option<bool>,
    /// `(a_L, a_U)` for the near-orthogonality check.
    pub near_orthogonality: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateFitConfig {
    pub inputs: Vec<PathBuf>,
    pub metric: Metric,
    pub against: Against,
    /// Exit with the threshold code when the fitted slope exceeds this.
    pub max_slope: Option<f64>,
}

impl Default for RateFitConfig {
    fn default() -> Self {
        Self { inputs: Vec::new(), metric: Metric::ErrSq, against: Against::Q, max_slope: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: PathBuf,
    pub verbosity: u8,
    pub threads: Option<usize>,
    /// Root seed; also written into `chain.seed` and `bench.seed` on resolution.
    pub seed: u64,
    pub design: Option<DesignSource>,
    pub kernel: Option<KernelSpec>,
    pub checks: KernelChecks,
    pub data: DataSource,
    pub prior: Option<LocalVariancePrior>,
    pub hyper: HyperConfig,
    pub chain: ChainConfig,
    pub grid: GridSpec,
    pub bench: ExperimentConfig,
    pub rate_fit: RateFitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("rvm-out"),
            verbosity: 0,
            threads: None,
            seed: 0,
            design: None,
            kernel: None,
            checks: KernelChecks::default(),
            data: DataSource::default(),
            prior: None,
            hyper: HyperConfig::default(),
            chain: ChainConfig::default(),
            grid: GridSpec::default(),
            bench: ExperimentConfig::default(),
            rate_fit: RateFitConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn require<'a, T>(value: &'a Option<T>, key: &str, command: &str) -> Result<&'a T, CliError> {
        value.as_ref().ok_or_else(|| CliError::Config(format!("missing config key `{key}` (required by {command})")))
    }

    /// Parses `value` after the overrides have been applied.
    pub fn from_value(value: Value) -> Result<Self, CliError> {
        serde_json::from_value(value).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
    }
}

pub fn load_value(path: Option<&Path>) -> Result<Value, CliError> {
    match path {
        None => Ok(Value::Object(Default::default())),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON when possible, else taken as a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not KEY=VALUE")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    if value.is_object() || value.is_array() {
        return Err(CliError::Config(format!("override `{key}` must be a scalar")));
    }
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        if !cur.is_object() {
            return Err(CliError::Config(format!("override `{key}`: `{part}` is not a section")));
        }
        cur = cur.as_object_mut().unwrap().entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    match cur.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(CliError::Config(format!("override `{key}`: parent is not a section"))),
    }
}
