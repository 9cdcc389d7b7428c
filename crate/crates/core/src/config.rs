//! On-disk run configuration: one JSON document holding backends, generator
//! wiring, judge weights, uncertainty levels, budgets, and loop knobs.
//! Command-line flags override individual keys; the effective config is
//! echoed into every run's artifacts for provenance.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

use crate::backend::{ChatBackend, DecodingParams, HttpChatBackend, RetryPolicy, ScriptedChatBackend};
use crate::generators::{default_code_prefixes, GeneratorSpec};
use crate::judge::{Dimension, FusionWeights};
use crate::model::{MarginConfig, Role};
use crate::process::{BudgetPolicy, ProcessConfig};
use crate::prover::{
    default_blocklist, CommandProver, DiagnosticFormat, MockProverTable, ProverGate,
};
use crate::simulation::{SimParams, SimWiring, SimWorldConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("environment variable `{0}` is not set")]
    MissingEnv(String),
}

fn default_seed() -> u64 {
    0
}
fn default_max_steps() -> usize {
    6
}
fn default_votes() -> u32 {
    1
}
fn default_parallelism() -> usize {
    2
}
fn default_step_retries() -> u32 {
    1
}
fn default_parse_retries() -> u32 {
    1
}
fn default_temperature() -> f64 {
    0.7
}
fn default_judge_temperature() -> f64 {
    0.0
}
fn default_max_tokens() -> u32 {
    2048
}
fn default_prover_timeout_s() -> u64 {
    120
}
fn default_deltas() -> [f64; 3] {
    [0.05; 3]
}
fn default_margins() -> [f64; 3] {
    [0.0; 3]
}
fn default_perfect_tolerance() -> f64 {
    1e-12
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Chat-completion endpoint. The API key is read from the named
    /// environment variable at startup and never written to any artifact.
    Http {
        endpoint: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default)]
        send_seed: bool,
        #[serde(default = "default_http_retries")]
        max_retries: u32,
        #[serde(default = "default_retry_base_ms")]
        retry_base_ms: u64,
    },
    /// Replay fixtures keyed by prompt digest.
    Scripted { fixtures: String },
}

fn default_http_retries() -> u32 {
    3
}
fn default_retry_base_ms() -> u64 {
    200
}

impl BackendConfig {
    pub fn build(&self, name: &str) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        match self {
            BackendConfig::Http {
                endpoint,
                model,
                api_key_env,
                send_seed,
                max_retries,
                retry_base_ms,
            } => {
                let api_key = match api_key_env {
                    Some(var) => Some(
                        std::env::var(var).map_err(|_| ConfigError::MissingEnv(var.clone()))?,
                    ),
                    None => None,
                };
                Ok(Arc::new(HttpChatBackend::new(
                    name,
                    endpoint.clone(),
                    model.clone(),
                    api_key,
                    *send_seed,
                    RetryPolicy {
                        max_attempts: (*max_retries).max(1),
                        base_delay: Duration::from_millis(*retry_base_ms),
                    },
                )))
            }
            BackendConfig::Scripted { fixtures } => Ok(Arc::new(
                ScriptedChatBackend::from_file(name, Path::new(fixtures))?,
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProverConfig {
    /// External checker command; `{file}` expands to the candidate path.
    Command {
        template: String,
        #[serde(default)]
        format: Option<DiagnosticFormat>,
        #[serde(default = "default_prover_timeout_s")]
        timeout_s: u64,
    },
    /// Table-driven mock keyed by body fingerprints.
    Mock {
        #[serde(default)]
        table: Option<String>,
        #[serde(default)]
        default_pass: bool,
    },
}

impl ProverConfig {
    pub fn build(&self, blocklist: &[String]) -> Result<ProverGate, ConfigError> {
        let mut gate = match self {
            ProverConfig::Command {
                template,
                format,
                timeout_s,
            } => {
                let mut gate = ProverGate::new(Arc::new(CommandProver::new(
                    template.clone(),
                    format.unwrap_or(DiagnosticFormat::Lines),
                )));
                gate.timeout = Duration::from_secs(*timeout_s);
                gate
            }
            ProverConfig::Mock {
                table,
                default_pass,
            } => {
                let prover = match table {
                    Some(path) => MockProverTable::from_file(Path::new(path))?,
                    None => crate::prover::MockProver::new(*default_pass),
                };
                ProverGate::new(Arc::new(prover))
            }
        };
        gate.blocklist = blocklist.to_vec();
        Ok(gate)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub name: String,
    pub backend: BackendConfig,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Recurrent generators only: which dimensions' judge feedback to embed.
    /// "ALL" selects every dimension.
    #[serde(default)]
    pub feedback_dims: Vec<String>,
}

impl GeneratorConfig {
    fn dims(&self) -> Result<BTreeSet<Dimension>, ConfigError> {
        let mut dims = BTreeSet::new();
        for name in &self.feedback_dims {
            match name.to_ascii_uppercase().as_str() {
                "LP" => {
                    dims.insert(Dimension::Lp);
                }
                "MC" => {
                    dims.insert(Dimension::Mc);
                }
                "FQ" => {
                    dims.insert(Dimension::Fq);
                }
                "ALL" => {
                    dims.extend(Dimension::all());
                }
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "unknown feedback dimension `{other}`"
                    )))
                }
            }
        }
        Ok(dims)
    }

    fn build(&self, role: Role) -> Result<GeneratorSpec, ConfigError> {
        let backend = self.backend.build(&self.name)?;
        let dims = if role == Role::Reg {
            self.dims()?
        } else {
            BTreeSet::new()
        };
        GeneratorSpec::new(
            &self.name,
            role,
            dims,
            backend,
            DecodingParams {
                temperature: self.temperature,
                max_tokens: self.max_tokens,
            },
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GeneratorsConfig {
    #[serde(default)]
    pub oog: Vec<GeneratorConfig>,
    #[serde(default)]
    pub fvr: Vec<GeneratorConfig>,
    #[serde(default)]
    pub reg: Vec<GeneratorConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BudgetConfig {
    Fixed {
        per_generator: u32,
    },
    Responsive {
        total: u32,
        floor: u32,
        #[serde(default = "default_dimension_weights")]
        dimension_weights: [f64; 4],
    },
}

fn default_dimension_weights() -> [f64; 4] {
    [0.25; 4]
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig::Fixed { per_generator: 1 }
    }
}

impl From<&BudgetConfig> for BudgetPolicy {
    fn from(cfg: &BudgetConfig) -> Self {
        match cfg {
            BudgetConfig::Fixed { per_generator } => BudgetPolicy::Fixed {
                per_generator: *per_generator,
            },
            BudgetConfig::Responsive {
                total,
                floor,
                dimension_weights,
            } => BudgetPolicy::Responsive {
                total: *total,
                floor: *floor,
                dimension_weights: *dimension_weights,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    #[serde(default)]
    pub world: Option<SimWorldConfig>,
    #[serde(default)]
    pub seeds: Option<u64>,
    #[serde(default)]
    pub first_seed: Option<u64>,
}

/// The full run configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_deltas")]
    pub deltas: [f64; 3],
    #[serde(default = "default_margins")]
    pub margins: [f64; 3],
    #[serde(default = "default_votes")]
    pub votes_per_aspect: u32,
    #[serde(default = "default_parse_retries")]
    pub parse_retries: u32,
    #[serde(default)]
    pub judge_weights: Option<FusionWeights>,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_step_retries")]
    pub step_retries: u32,
    #[serde(default = "default_perfect_tolerance")]
    pub perfect_tolerance: f64,
    #[serde(default)]
    pub blocklist: Option<Vec<String>>,
    #[serde(default)]
    pub code_prefixes: Option<Vec<String>>,
    #[serde(default = "default_judge_temperature")]
    pub judge_temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub judge_max_tokens: u32,
    #[serde(default)]
    pub judge_backend: Option<BackendConfig>,
    #[serde(default)]
    pub prover: Option<ProverConfig>,
    #[serde(default)]
    pub generators: GeneratorsConfig,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
}

impl Default for FileConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl FileConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn margin_config(&self) -> Result<MarginConfig, ConfigError> {
        MarginConfig::new(self.deltas, self.margins)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Lowers the document into a runtime process configuration, building
    /// every backend. Requires a judge backend, a prover, and at least one
    /// one-off generator.
    pub fn build_process_config(&self) -> Result<ProcessConfig, ConfigError> {
        let judge_backend = self
            .judge_backend
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("judge_backend is required for runs".into()))?
            .build("judge")?;
        let prover = self
            .prover
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("prover is required for runs".into()))?;
        let blocklist = self.blocklist.clone().unwrap_or_else(default_blocklist);
        let gate = prover.build(&blocklist)?;

        let mut oogs = Vec::new();
        for generator in &self.generators.oog {
            oogs.push(generator.build(Role::Oog)?);
        }
        let mut fvrs = Vec::new();
        for generator in &self.generators.fvr {
            fvrs.push(generator.build(Role::Fvr)?);
        }
        let mut regs = Vec::new();
        for generator in &self.generators.reg {
            regs.push(generator.build(Role::Reg)?);
        }

        let cfg = ProcessConfig {
            oogs,
            fvrs,
            regs,
            judge_backend,
            judge_decoding: DecodingParams {
                temperature: self.judge_temperature,
                max_tokens: self.judge_max_tokens,
            },
            weights: self.judge_weights.clone().unwrap_or_default(),
            votes_per_aspect: self.votes_per_aspect,
            parse_retries: self.parse_retries,
            gate,
            max_steps: self.max_steps,
            epsilon: self.epsilon,
            margins: self.margin_config()?,
            budget: BudgetPolicy::from(&self.budget),
            code_prefixes: self
                .code_prefixes
                .clone()
                .unwrap_or_else(default_code_prefixes),
            step_retries: self.step_retries,
            parallelism: self.parallelism,
            perfect_tolerance: self.perfect_tolerance,
        };
        cfg.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    /// Simulation parameters with the document's loop knobs applied.
    pub fn sim_params(&self) -> Result<SimParams, ConfigError> {
        Ok(SimParams {
            max_steps: self.max_steps,
            epsilon: self.epsilon,
            margins: self.margin_config()?,
            votes_per_aspect: self.votes_per_aspect,
            budget: BudgetPolicy::from(&self.budget),
            wiring: SimWiring::default(),
        })
    }

    pub fn world_config(&self) -> SimWorldConfig {
        self.simulation
            .as_ref()
            .and_then(|s| s.world.clone())
            .unwrap_or_default()
    }

    /// The effective configuration header embedded in artifacts. Safe to
    /// persist: credentials are referenced by environment-variable name only.
    pub fn provenance(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or_else(|_| serde_json::json!({}))
    }
}
