//! Run configuration file.
//!
//! ```json
//! {
//!   "sampler": { "n_islands": 2, "particles_per_island": 8, "seed": 7 },
//!   "task": {
//!     "language": "python",
//!     "initial_program_file": "seed.py",
//!     "description": "Pack 26 circles ...",
//!     "evaluator": { "kind": "subprocess", "command": "python3", "args": ["eval.py", "{program}"] }
//!   },
//!   "backend": {
//!     "kind": "llm",
//!     "endpoint": "https://api.example.com/v1",
//!     "api_key_env": "LLM_API_KEY",
//!     "models": ["model-a", "model-b"]
//!   },
//!   "output_dir": "runs/circle"
//! }
//! ```
//!
//! Relative paths are resolved against the config file's directory. Secrets
//! are never stored in the file: `api_key_env` names the environment
//! variable holding the key.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use smc_search::archive::{EmbeddingProvider, HttpEmbeddingProvider, NgramEmbedding, DEFAULT_EMBEDDING_DIM};
use smc_search::eval::{BitstringEvaluator, EvalSpec, Evaluator, SubprocessEvaluator};
use smc_search::llm::{ChatClient, DiffOptions, HttpTransport, LlmKernel, RetryPolicy};
use smc_search::mutate::{Prior, ProposalKernel, SeedPrior};
use smc_search::oracle::{BitFlipKernel, FiniteSpace, SpacePrior};
use smc_search::par::ExecMode;
use smc_search::{AcceptanceMode, Components, Program, RunConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub sampler: RunConfig,
    pub task: TaskConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Adds wall-clock milliseconds to every event (logs are then not
    /// byte-reproducible).
    #[serde(default)]
    pub timestamps: bool,
    #[serde(default)]
    pub exec: ExecMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default = "default_language")]
    pub language: String,
    #[serde(default)]
    pub initial_program: Option<String>,
    #[serde(default)]
    pub initial_program_file: Option<PathBuf>,
    #[serde(default)]
    pub description: String,
    pub evaluator: EvaluatorConfig,
}

fn default_language() -> String {
    "python".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorConfig {
    Subprocess(EvalSpec),
    Bitstring { n_bits: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Llm(LlmConfig),
    /// Exact single-bit-flip proposals; needs the bitstring evaluator.
    BitFlip {
        /// Start from uniform random bitstrings instead of the initial program.
        #[serde(default)]
        uniform_prior: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub models: Vec<String>,
    #[serde(default = "half")]
    pub first_model_ratio: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Upper bound on chat requests for the whole run.
    #[serde(default)]
    pub budget: Option<u64>,
    #[serde(default)]
    pub lenient_trailing_whitespace: bool,
}

fn half() -> f64 {
    0.5
}
fn default_temperature() -> f64 {
    1.0
}
fn default_max_tokens() -> u32 {
    4096
}
fn default_timeout() -> f64 {
    300.0
}
fn default_in_flight() -> usize {
    8
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingConfig {
    #[default]
    Ngram,
    Http {
        endpoint: String,
        model: String,
        dimension: usize,
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: FileConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.task.initial_program_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.output_dir.as_mut() {
            fix(p);
        }
        if let EvaluatorConfig::Subprocess(spec) = &mut self.task.evaluator {
            spec.support_files.iter_mut().for_each(fix);
            // a relative script argument is resolved only if it exists there
            for a in spec.args.iter_mut() {
                let candidate = base.join(&*a);
                if !a.contains("{program}") && Path::new(a).is_relative() && candidate.is_file() {
                    *a = candidate.to_string_lossy().into_owned();
                }
            }
        }
    }

    /// Checks everything that can be checked without doing work.
    pub fn validate(&self) -> Result<(), CliError> {
        self.sampler.validate().map_err(|e| CliError::Config(e.to_string()))?;
        match (&self.task.initial_program, &self.task.initial_program_file) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "give initial_program or initial_program_file, not both".into(),
                ))
            }
            (None, None) if !matches!(self.backend, BackendConfig::BitFlip { uniform_prior: true }) => {
                return Err(CliError::Config("an initial program is required".into()))
            }
            _ => {}
        }
        if let Some(p) = &self.task.initial_program_file {
            if !p.is_file() {
                return Err(CliError::Config(format!(
                    "initial_program_file {} not found",
                    p.display()
                )));
            }
        }
        if let EvaluatorConfig::Subprocess(spec) = &self.task.evaluator {
            if spec.command.trim().is_empty() {
                return Err(CliError::Config("evaluator command is empty".into()));
            }
            if !(spec.timeout_secs.is_finite() && spec.timeout_secs > 0.0) {
                return Err(CliError::Config("evaluator timeout must be > 0".into()));
            }
        }
        match &self.backend {
            BackendConfig::Llm(llm) => {
                if llm.models.is_empty() || llm.models.len() > 2 {
                    return Err(CliError::Config("backend.models must list one or two models".into()));
                }
                if !(0.0..=1.0).contains(&llm.first_model_ratio) {
                    return Err(CliError::Config("first_model_ratio must lie in [0, 1]".into()));
                }
                if self.sampler.acceptance_mode == AcceptanceMode::FullRatio {
                    return Err(CliError::Config(
                        "full_ratio acceptance needs proposal densities, which an LLM backend does not expose".into(),
                    ));
                }
            }
            BackendConfig::BitFlip { uniform_prior } => {
                let EvaluatorConfig::Bitstring { n_bits } = self.task.evaluator else {
                    return Err(CliError::Config(
                        "the bit_flip backend needs the bitstring evaluator".into(),
                    ));
                };
                if n_bits == 0 || n_bits > 12 {
                    return Err(CliError::Config("bitstring n_bits must be in 1..=12".into()));
                }
                if self.sampler.acceptance_mode == AcceptanceMode::FullRatio && !uniform_prior {
                    return Err(CliError::Config("full_ratio acceptance needs uniform_prior".into()));
                }
            }
        }
        if let EmbeddingConfig::Http { dimension: 0, .. } = self.embedding {
            return Err(CliError::Config("embedding dimension must be > 0".into()));
        }
        Ok(())
    }

    pub fn initial_program(&self) -> Result<Option<Program>, CliError> {
        let source = match (&self.task.initial_program, &self.task.initial_program_file) {
            (Some(s), _) => s.clone(),
            (None, Some(p)) => {
                std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            (None, None) => return Ok(None),
        };
        Program::new(source, self.task.language.clone())
            .map(Some)
            .map_err(|e| CliError::Config(format!("initial program: {e}")))
    }

    fn secret(var: &Option<String>) -> Result<Option<String>, CliError> {
        match var {
            None => Ok(None),
            Some(name) => std::env::var(name)
                .map(Some)
                .map_err(|_| CliError::Config(format!("environment variable {name} is not set"))),
        }
    }

    /// Builds the run's components. `used_llm_calls` is deducted from the budget.
    pub fn components(&self, used_llm_calls: usize) -> Result<Components, CliError> {
        self.validate()?;
        let floor = self.sampler.reward_floor;
        let evaluator: Arc<dyn Evaluator> = match &self.task.evaluator {
            EvaluatorConfig::Subprocess(spec) => {
                let mut spec = spec.clone();
                spec.reward_floor = floor;
                Arc::new(SubprocessEvaluator::new(spec))
            }
            EvaluatorConfig::Bitstring { n_bits } => Arc::new(BitstringEvaluator {
                n_bits: *n_bits,
                reward_floor: floor,
            }),
        };
        let seed = self.initial_program()?;
        let (kernel, prior): (Arc<dyn ProposalKernel>, Arc<dyn Prior>) = match &self.backend {
            BackendConfig::Llm(llm) => {
                let key = Self::secret(&llm.api_key_env)?;
                let transport =
                    HttpTransport::new(&llm.endpoint, key.clone(), Duration::from_secs_f64(llm.timeout_secs))
                        .map_err(|e| CliError::Config(e.to_string()))?;
                let mut client =
                    ChatClient::new(Box::new(transport), llm.retry.clone()).with_max_in_flight(llm.max_in_flight);
                if let Some(b) = llm.budget {
                    client = client.with_budget(b.saturating_sub(used_llm_calls as u64));
                }
                let kernel = LlmKernel::new(client, llm.models.clone())
                    .with_ratio(llm.first_model_ratio)
                    .with_sampling(llm.temperature, llm.max_tokens)
                    .with_diff_options(DiffOptions {
                        lenient_trailing_whitespace: llm.lenient_trailing_whitespace,
                    })
                    .with_secrets(key.into_iter().collect());
                let program = seed.ok_or_else(|| CliError::Config("an initial program is required".into()))?;
                (Arc::new(kernel), Arc::new(SeedPrior { program }))
            }
            BackendConfig::BitFlip { uniform_prior } => {
                let EvaluatorConfig::Bitstring { n_bits } = self.task.evaluator else {
                    unreachable!("validated")
                };
                let prior: Arc<dyn Prior> = if *uniform_prior {
                    let space = FiniteSpace::popcount(n_bits).map_err(|e| CliError::Config(e.to_string()))?;
                    Arc::new(SpacePrior(Arc::new(space)))
                } else {
                    Arc::new(SeedPrior {
                        program: seed.ok_or_else(|| CliError::Config("an initial program is required".into()))?,
                    })
                };
                (Arc::new(BitFlipKernel { n_bits }), prior)
            }
        };
        let embedding: Arc<dyn EmbeddingProvider> = match &self.embedding {
            EmbeddingConfig::Ngram => Arc::new(NgramEmbedding {
                dimension: DEFAULT_EMBEDDING_DIM,
            }),
            EmbeddingConfig::Http {
                endpoint,
                model,
                dimension,
                api_key_env,
            } => Arc::new(HttpEmbeddingProvider::new(
                endpoint.clone(),
                model.clone(),
                *dimension,
                Self::secret(api_key_env)?,
            )),
        };
        let mut comps = Components::new(kernel, prior, evaluator);
        comps.embedding = embedding;
        comps.task_description = self.task.description.clone();
        Ok(comps)
    }

    /// Backend description recorded in `run_start` (no secrets).
    pub fn backend_description(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "backend": self.backend,
            "evaluator": self.task.evaluator,
            "language": self.task.language,
        });
        if let BackendConfig::Llm(llm) = &self.backend {
            v["backend"]["api_key_env"] = serde_json::json!(llm.api_key_env);
        }
        v
    }
}
