//! Experiment configuration: a single JSON file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{Activation, NetSpec};
use crate::oracle::{MixtureComponent, MixtureOracle};
use crate::sampler::{check_edges, SampleMode, SamplePlan};
use crate::schedule::NoiseSchedule;
use crate::trainer::TrainPlan;

/// Data distribution of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    Ring { k: usize, radius: f64, std: f64 },
    TwoGaussians { sep: f64, std: f64 },
    SingleGaussian { dim: usize, std: f64 },
    Mixture { components: Vec<MixtureComponent> },
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec::Ring {
            k: 8,
            radius: 2.0,
            std: 0.2,
        }
    }
}

impl OracleSpec {
    pub fn build(&self) -> Result<MixtureOracle> {
        match self {
            OracleSpec::Ring { k, radius, std } => MixtureOracle::ring(*k, *radius, *std),
            OracleSpec::TwoGaussians { sep, std } => MixtureOracle::two_gaussians(*sep, *std),
            OracleSpec::SingleGaussian { dim, std } => MixtureOracle::single_gaussian(*dim, *std),
            OracleSpec::Mixture { components } => MixtureOracle::new(components.clone()),
        }
    }
}

/// Network shape; `dim`, `sigma_data` and the class count come from the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub frequencies: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        let s = NetSpec::new(1, 1.0);
        Self {
            hidden: s.hidden,
            activation: s.activation,
            frequencies: s.frequencies,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub iters: u64,
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iters: 20_000,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Generated and reference sample count.
    pub samples: usize,
    pub projections: usize,
    pub mmd: bool,
    /// DDIM steps of the oracle floor sampler.
    pub floor_steps: usize,
    pub etas: Vec<f64>,
    pub omegas: Vec<f64>,
    /// Edge count for sweeps when the training plan has none.
    pub sweep_edges: usize,
    pub variance_n: Vec<usize>,
    pub variance_points: usize,
    pub variance_trials: usize,
    pub bellman_pairs: Vec<(f64, f64)>,
    pub bellman_points: usize,
    /// Empty grids fall back to defaults derived from the schedule and run length.
    pub dump_times: Vec<f64>,
    pub dump_iters: Vec<u64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            projections: 128,
            mmd: false,
            floor_steps: 64,
            etas: vec![0.8, 0.9, 1.0],
            omegas: vec![0.0, 1.0, 1.2, 1.5, 2.0],
            sweep_edges: 4,
            variance_n: vec![1, 4, 16, 64],
            variance_points: 16,
            variance_trials: 10_000,
            bellman_pairs: vec![(2.0, 1.0), (10.0, 5.0), (0.5, 0.1)],
            bellman_points: 64,
            dump_times: Vec::new(),
            dump_iters: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub oracle: OracleSpec,
    pub schedule: NoiseSchedule,
    pub net: NetConfig,
    pub run: RunConfig,
    pub train: TrainPlan,
    pub sample: SamplePlan,
    pub metrics: MetricsConfig,
}


impl ExperimentConfig {
    /// Reads `path` (or the defaults), applies `overrides` in order, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(Self::default()).expect("defaults serialize"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        NoiseSchedule::new(s.kind, s.t_min, s.t_max)?;
        let oracle = self.oracle.build()?;
        if self.net.hidden.is_empty() || self.net.hidden.contains(&0) {
            return Err(Error::Config("net.hidden needs at least one non-empty layer".into()));
        }
        if self.run.batch_size == 0 {
            return Err(Error::Config("run.batch_size must be positive".into()));
        }
        self.train.validate(s)?;
        if self.train.conditional && oracle.n_classes() < 2 {
            return Err(Error::Config("conditional training needs at least two classes".into()));
        }
        let p = &self.sample;
        if !(p.eta > 0.0 && p.eta <= 1.0) {
            return Err(Error::Range {
                what: "sample.eta",
                value: p.eta,
                lo: 0.0,
                hi: 1.0,
            });
        }
        match p.mode {
            SampleMode::OneStep => {}
            SampleMode::StochasticMultistep => {
                for &t in &p.times {
                    s.check_time("sample.times", t)?;
                }
            }
            SampleMode::PhasedDeterministic => check_edges(s, &p.times)?,
        }
        if let Some(w) = p.guidance {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("sample.guidance must be >= 0, got {w}")));
            }
        }
        let m = &self.metrics;
        if m.samples == 0 || m.projections == 0 || m.floor_steps == 0 {
            return Err(Error::Config("metrics.samples, projections and floor_steps must be positive".into()));
        }
        if m.etas.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(Error::Config(format!("metrics.etas must lie in (0, 1], got {:?}", m.etas)));
        }
        if m.omegas.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("metrics.omegas must be >= 0, got {:?}", m.omegas)));
        }
        if m.sweep_edges < 2 {
            return Err(Error::Config("metrics.sweep_edges must be at least 2".into()));
        }
        if m.variance_n.contains(&0) || m.variance_points == 0 || m.variance_trials == 0 {
            return Err(Error::Config("metrics.variance_* values must be positive".into()));
        }
        for &(t, r) in &m.bellman_pairs {
            s.check_time("metrics.bellman_pairs", t)?;
            s.check_time("metrics.bellman_pairs", r)?;
            if r >= t {
                return Err(Error::Ordering { t, r });
            }
        }
        for &t in &m.dump_times {
            s.check_time("metrics.dump_times", t)?;
        }
        Ok(())
    }

    pub fn net_spec(&self, oracle: &MixtureOracle) -> NetSpec {
        NetSpec {
            dim: oracle.dim(),
            hidden: self.net.hidden.clone(),
            activation: self.net.activation,
            frequencies: self.net.frequencies,
            n_classes: if self.train.conditional { oracle.n_classes() } else { 0 },
            sigma_data: oracle.data_std(),
        }
    }

    /// Canonical JSON: object keys sorted, so equal configs hash equally.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sets the dotted path `key` to `value`, read as JSON when it parses and as
/// a string otherwise. Missing intermediate objects are created; unknown leaf
/// keys are left for the typed parse to reject.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just set")
            }
            _ => {
                return Err(Error::Config(format!(
                    "override `{key}`: `{}` is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("key has at least one segment")
}
