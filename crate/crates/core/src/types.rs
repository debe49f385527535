//! Domain types shared across the sampler: programs, rewards, particles,
//! the annealing state and the run configuration.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64;

/// Content hash of a program's source bytes (XXH3-64, seed 0).
///
/// Stable across platforms and process restarts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Digest(pub u64);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(xxh3_64(bytes))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl From<Digest> for String {
    fn from(d: Digest) -> Self {
        d.to_string()
    }
}

impl TryFrom<String> for Digest {
    type Error = std::num::ParseIntError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        u64::from_str_radix(&s, 16).map(Digest)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProgramError {
    #[error("program source is empty")]
    EmptySource,
}

/// Immutable source text of a candidate solution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    source: String,
    language: String,
    digest: Digest,
}

impl Program {
    pub fn new(source: impl Into<String>, language: impl Into<String>) -> Result<Self, ProgramError> {
        let source = source.into();
        if source.is_empty() {
            return Err(ProgramError::EmptySource);
        }
        let digest = Digest::of(source.as_bytes());
        Ok(Program {
            source,
            language: language.into(),
            digest,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }
}

/// Convenience wrapper mirroring [`Program::new`].
pub fn make_program(source: &str, language: &str) -> Result<Program, ProgramError> {
    Program::new(source, language)
}

/// Evaluated reward. Always finite; failed evaluations carry the reward floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardValue {
    pub value: f64,
    pub valid: bool,
}

impl RewardValue {
    /// A successful evaluation. Non-finite values degrade to `invalid(floor)`.
    pub fn checked(value: f64, floor: f64) -> Self {
        if value.is_finite() {
            RewardValue { value, valid: true }
        } else {
            RewardValue::invalid(floor)
        }
    }

    pub fn invalid(floor: f64) -> Self {
        debug_assert!(floor.is_finite());
        RewardValue {
            value: floor,
            valid: false,
        }
    }
}

/// One member of an island's population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub program: Program,
    pub reward: RewardValue,
    pub born_iteration: usize,
    pub island_id: usize,
    /// Digest of the ancestor chosen at the most recent resample.
    pub lineage_id: Digest,
}

impl Particle {
    pub fn new(program: Program, reward: RewardValue, born_iteration: usize, island_id: usize) -> Self {
        let lineage_id = program.digest();
        Particle {
            program,
            reward,
            born_iteration,
            island_id,
            lineage_id,
        }
    }
}

/// Position on the tempering path `p_t ∝ p0 · exp(lambda · beta_target · R)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealState {
    pub lambda: f64,
    pub beta_target: f64,
    pub iteration: usize,
    pub terminated: bool,
}

impl AnnealState {
    pub fn start(beta_target: f64) -> Self {
        AnnealState {
            lambda: 0.0,
            beta_target,
            iteration: 0,
            terminated: false,
        }
    }

    pub fn effective_beta(&self) -> f64 {
        effective_beta(self)
    }
}

/// Inverse temperature of the current bridge: `lambda * beta_target`.
pub fn effective_beta(state: &AnnealState) -> f64 {
    state.lambda * state.beta_target
}

/// The four proposal modes: {diff, rewrite} x {with, without inspirations}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelId {
    DiffWithInspo,
    DiffNoInspo,
    RewriteWithInspo,
    RewriteNoInspo,
}

impl KernelId {
    /// Fixed order used for tie-breaking and tabular output.
    pub const ALL: [KernelId; 4] = [
        KernelId::DiffWithInspo,
        KernelId::DiffNoInspo,
        KernelId::RewriteWithInspo,
        KernelId::RewriteNoInspo,
    ];

    pub fn index(self) -> usize {
        match self {
            KernelId::DiffWithInspo => 0,
            KernelId::DiffNoInspo => 1,
            KernelId::RewriteWithInspo => 2,
            KernelId::RewriteNoInspo => 3,
        }
    }

    pub fn uses_inspirations(self) -> bool {
        matches!(self, KernelId::DiffWithInspo | KernelId::RewriteWithInspo)
    }

    pub fn is_diff(self) -> bool {
        matches!(self, KernelId::DiffWithInspo | KernelId::DiffNoInspo)
    }

    /// The no-inspiration twin (identity for no_inspo kernels).
    pub fn without_inspirations(self) -> KernelId {
        match self {
            KernelId::DiffWithInspo => KernelId::DiffNoInspo,
            KernelId::RewriteWithInspo => KernelId::RewriteNoInspo,
            k => k,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KernelId::DiffWithInspo => "diff_with_inspo",
            KernelId::DiffNoInspo => "diff_no_inspo",
            KernelId::RewriteWithInspo => "rewrite_with_inspo",
            KernelId::RewriteNoInspo => "rewrite_no_inspo",
        }
    }
}

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for KernelId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KernelId::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown kernel id `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSelection {
    Adaptive,
    Uniform,
    Fixed(KernelId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceMode {
    RewardOnly,
    FullRatio,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Sampler hyperparameters. Defaults match the published configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_islands: usize,
    pub particles_per_island: usize,
    pub n_proposals: usize,
    pub beta: f64,
    pub kappa: f64,
    pub min_iterations: usize,
    pub max_iterations: usize,
    pub migration_interval: usize,
    pub migration_size: usize,
    pub top_k_inspiration: usize,
    pub diverse_inspirations: usize,
    pub reward_floor: f64,
    pub seed: u64,
    pub kernel_selection: KernelSelection,
    pub acceptance_mode: AcceptanceMode,
    /// Worker threads for per-particle chains; 0 uses every core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_islands: 2,
            particles_per_island: 8,
            n_proposals: 2,
            beta: 20.0,
            kappa: 0.9,
            min_iterations: 3,
            max_iterations: 15,
            migration_interval: 3,
            migration_size: 1,
            top_k_inspiration: 2,
            diverse_inspirations: 2,
            reward_floor: 0.0,
            seed: 0,
            kernel_selection: KernelSelection::Adaptive,
            acceptance_mode: AcceptanceMode::RewardOnly,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if self.n_islands < 1 {
            return fail("n_islands must be >= 1");
        }
        if self.particles_per_island < 1 {
            return fail("particles_per_island must be >= 1");
        }
        if self.n_proposals < 1 {
            return fail("n_proposals must be >= 1");
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return fail("beta must be finite and > 0");
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return fail("kappa must lie in (0, 1)");
        }
        if self.min_iterations < 1 {
            return fail("min_iterations must be >= 1");
        }
        if self.max_iterations < self.min_iterations {
            return fail("max_iterations must be >= min_iterations");
        }
        if self.migration_interval < 1 {
            return fail("migration_interval must be >= 1");
        }
        if self.migration_size > self.particles_per_island {
            return fail("migration_size must be <= particles_per_island");
        }
        if !self.reward_floor.is_finite() {
            return fail("reward_floor must be finite");
        }
        Ok(())
    }
}

/// Reward range of a population or space; `delta_r` is the oscillation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBounds {
    pub r_minus: f64,
    pub r_plus: f64,
    pub delta_r: f64,
}

impl RewardBounds {
    pub fn new(r_minus: f64, r_plus: f64) -> Self {
        assert!(r_plus >= r_minus, "r_plus must be >= r_minus");
        RewardBounds {
            r_minus,
            r_plus,
            delta_r: r_plus - r_minus,
        }
    }

    pub fn of(rewards: &[f64]) -> Option<Self> {
        let min = rewards.iter().copied().reduce(f64::min)?;
        let max = rewards.iter().copied().reduce(f64::max)?;
        Some(RewardBounds::new(min, max))
    }

    /// `(r - r_minus) / delta_r`, or 0 for a degenerate range.
    pub fn normalize(&self, r: f64) -> f64 {
        if self.delta_r > 0.0 {
            (r - self.r_minus) / self.delta_r
        } else {
            0.0
        }
    }
}
