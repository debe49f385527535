//! Sequential Monte Carlo search over programs.
//!
//! A population of programs is moved from a prior `p0` toward the
//! reward-tilted target `p* ∝ p0 · exp(beta R)` through geometric bridges
//! `p_t ∝ p0 · exp(lambda_t beta R)`. Each iteration picks `lambda_t` by ESS
//! bisection ([`schedule`]), reweights and resamples parents by reward
//! ([`resample`]), and mutates every particle with a `K`-step
//! Metropolis–Hastings chain whose proposals come from a Thompson-sampled
//! kernel mixture ([`mutate`]). Islands run independently and exchange
//! their best particles periodically ([`island`]).
//!
//! Proposal kernels are pluggable: an LLM backend ([`llm`]) and exact,
//! density-known kernels on enumerable spaces ([`oracle`]), which also
//! provides brute-force ground truth for testing the sampler.

pub mod archive;
pub mod eval;
pub mod events;
pub mod island;
pub mod llm;
pub mod mutate;
pub mod oracle;
pub mod par;
pub mod resample;
pub mod rng;
pub mod schedule;
pub mod types;

pub use island::{Components, Engine, EngineError, IslandState};
pub use types::{
    effective_beta, make_program, AcceptanceMode, AnnealState, Digest, KernelId, KernelSelection, Particle, Program,
    RewardBounds, RewardValue, RunConfig,
};
