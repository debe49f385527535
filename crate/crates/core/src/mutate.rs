//! The forward kernel: proposal-kernel abstraction, Metropolis–Hastings
//! acceptance, the Thompson-sampled kernel mixture and K-step MH chains.

use rand::{Rng, RngCore};
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::Archive;
use crate::eval::{EvalFailure, Evaluator};
use crate::rng::StreamRng;
use crate::types::{AcceptanceMode, KernelId, KernelSelection, Particle, Program, RewardValue};

#[derive(Debug, Error, PartialEq)]
pub enum MutateError {
    #[error("proposal density unavailable for this kernel")]
    DensityUnavailable,
}

/// Context handed to a proposal kernel for one proposal step.
#[derive(Clone, Debug)]
pub struct MutationContext<'a> {
    pub iteration: usize,
    pub beta_t: f64,
    pub parent_reward: RewardValue,
    pub inspirations: Vec<(Program, RewardValue)>,
    pub kernel_id: KernelId,
    pub task_description: &'a str,
}

/// An LLM request/response pair captured for the transcript file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub model: String,
    pub system: String,
    pub user: String,
    pub response: String,
    pub attempts: usize,
}

#[derive(Clone, Debug)]
pub struct ProposalResult {
    pub candidate: Option<Program>,
    pub kernel_id: KernelId,
    pub raw_response: String,
    pub parse_ok: bool,
    /// Why no candidate was produced, if so.
    pub error: Option<String>,
    /// Number of chat completions consumed by this proposal.
    pub llm_calls: usize,
    pub transcript: Option<Transcript>,
}

impl ProposalResult {
    pub fn candidate(program: Program, kernel_id: KernelId) -> Self {
        ProposalResult {
            candidate: Some(program),
            kernel_id,
            raw_response: String::new(),
            parse_ok: true,
            error: None,
            llm_calls: 0,
            transcript: None,
        }
    }

    pub fn failure(kernel_id: KernelId, error: impl Into<String>) -> Self {
        ProposalResult {
            candidate: None,
            kernel_id,
            raw_response: String::new(),
            parse_ok: false,
            error: Some(error.into()),
            llm_calls: 0,
            transcript: None,
        }
    }
}

/// A proposal distribution `Q(· | x, context)`.
///
/// `propose` must not mutate its inputs. Kernels on enumerable spaces may
/// also expose their conditional density, which enables the full MH ratio.
pub trait ProposalKernel: Send + Sync {
    fn propose(&self, parent: &Program, ctx: &MutationContext<'_>, rng: &mut dyn RngCore) -> ProposalResult;

    fn density(&self, _from: &Program, _to: &Program, _ctx: &MutationContext<'_>) -> Option<f64> {
        None
    }

    fn has_density(&self) -> bool {
        false
    }

    /// Kernel modes this backend distinguishes between.
    fn available_kernels(&self) -> Vec<KernelId> {
        KernelId::ALL.to_vec()
    }
}

/// The initial distribution `p0`.
pub trait Prior: Send + Sync {
    fn sample(&self, index: usize, rng: &mut dyn RngCore) -> Program;

    fn density(&self, _program: &Program) -> Option<f64> {
        None
    }
}

/// Degenerate prior returning one fixed program.
#[derive(Clone, Debug)]
pub struct SeedPrior {
    pub program: Program,
}

impl Prior for SeedPrior {
    fn sample(&self, _index: usize, _rng: &mut dyn RngCore) -> Program {
        self.program.clone()
    }
}

/// `min{1, exp(beta_t (R' - R))}`.
pub fn acceptance_reward_only(reward_current: f64, reward_proposed: f64, beta_t: f64) -> f64 {
    let log_ratio = beta_t * (reward_proposed - reward_current);
    if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

/// `min{1, p_t_ratio * reverse / forward}`.
pub fn acceptance_full_ratio(p_t_ratio: f64, forward_density: f64, reverse_density: f64) -> f64 {
    debug_assert!(p_t_ratio > 0.0 && forward_density > 0.0 && reverse_density > 0.0);
    (p_t_ratio * reverse_density / forward_density).min(1.0)
}

/// Full MH acceptance from log quantities, for density-known kernels:
/// `log p_t(x') - log p_t(x) = log p0(x') - log p0(x) + beta_t (R' - R)`.
pub fn acceptance_full_ratio_log(
    log_prior_ratio: f64,
    beta_t: f64,
    reward_current: f64,
    reward_proposed: f64,
    forward_density: f64,
    reverse_density: f64,
) -> f64 {
    if reverse_density <= 0.0 {
        return 0.0;
    }
    let log_ratio =
        log_prior_ratio + beta_t * (reward_proposed - reward_current) + reverse_density.ln() - forward_density.ln();
    if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

/// Beta posterior parameters for one kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaPosterior {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BetaPosterior {
    fn default() -> Self {
        BetaPosterior { alpha: 1.0, beta: 1.0 }
    }
}

/// Per-kernel Beta posteriors, indexed by [`KernelId::index`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelStats {
    pub posteriors: [BetaPosterior; 4],
}

impl KernelStats {
    pub fn get(&self, k: KernelId) -> BetaPosterior {
        self.posteriors[k.index()]
    }

    pub fn set(&mut self, k: KernelId, p: BetaPosterior) {
        self.posteriors[k.index()] = p;
    }
}

/// Samples each available kernel's posterior and returns the argmax.
/// Ties go to the earlier kernel in [`KernelId::ALL`] order.
pub fn thompson_select<R: Rng + ?Sized>(stats: &KernelStats, rng: &mut R, available: &[KernelId]) -> KernelId {
    assert!(!available.is_empty(), "no kernels available");
    if available.len() == 1 {
        return available[0];
    }
    let mut ordered = available.to_vec();
    ordered.sort();
    let mut best = ordered[0];
    let mut best_draw = f64::NEG_INFINITY;
    for k in ordered {
        let p = stats.get(k);
        let draw = Beta::new(p.alpha, p.beta).map(|d| d.sample(rng)).unwrap_or(0.5);
        if draw > best_draw {
            best_draw = draw;
            best = k;
        }
    }
    best
}

pub fn thompson_update(stats: &KernelStats, kernel_id: KernelId, success: bool) -> KernelStats {
    let mut next = *stats;
    let mut p = next.get(kernel_id);
    if success {
        p.alpha += 1.0;
    } else {
        p.beta += 1.0;
    }
    next.set(kernel_id, p);
    next
}

/// Picks a kernel according to the configured selection mode.
pub fn select_kernel<R: Rng + ?Sized>(
    selection: KernelSelection,
    stats: &KernelStats,
    rng: &mut R,
    available: &[KernelId],
) -> KernelId {
    match selection {
        KernelSelection::Adaptive => thompson_select(stats, rng, available),
        KernelSelection::Uniform => {
            let mut ordered = available.to_vec();
            ordered.sort();
            ordered[rng.random_range(0..ordered.len())]
        }
        KernelSelection::Fixed(k) => k,
    }
}

/// One proposal inside a chain, accepted or not.
#[derive(Clone, Debug)]
pub struct ProposalRecord {
    pub step: usize,
    pub requested_kernel: KernelId,
    pub kernel_id: KernelId,
    pub current: Program,
    pub current_reward: RewardValue,
    pub candidate: Option<Program>,
    pub reward: Option<RewardValue>,
    pub accept_prob: f64,
    pub accepted: bool,
    pub parse_ok: bool,
    /// Thompson success: accepted and not worse than the current state.
    pub success: bool,
    pub failure: Option<String>,
    pub llm_calls: usize,
    pub n_inspirations: usize,
    pub transcript: Option<Transcript>,
}

/// Everything a chain reads but does not own.
pub struct ChainEnv<'a> {
    pub kernel: &'a dyn ProposalKernel,
    pub prior: &'a dyn Prior,
    pub evaluator: &'a dyn Evaluator,
    /// Inspiration source; `None` disables inspirations.
    pub archive: Option<&'a Archive>,
    pub top_k: usize,
    pub diverse_m: usize,
    pub selection: KernelSelection,
    pub acceptance: AcceptanceMode,
    pub stats: KernelStats,
    pub iteration: usize,
    pub beta_t: f64,
    pub reward_floor: f64,
    pub task_description: &'a str,
}

/// Independent random streams used by one chain.
pub struct ChainRngs {
    pub thompson: StreamRng,
    pub proposal: StreamRng,
    pub accept: StreamRng,
}

#[derive(Clone, Debug)]
pub struct ChainOutcome {
    pub particle: Particle,
    pub records: Vec<ProposalRecord>,
}

impl ChainOutcome {
    pub fn stat_updates(&self) -> impl Iterator<Item = (KernelId, bool)> + '_ {
        self.records.iter().map(|r| (r.kernel_id, r.success))
    }
}

/// Runs `k_steps` propose/accept-reject transitions starting from `parent`.
///
/// Parse and evaluator failures are recorded and auto-rejected. The returned
/// particle is the chain's final state.
pub fn mh_chain(parent: &Particle, k_steps: usize, env: &ChainEnv<'_>, rngs: &mut ChainRngs) -> ChainOutcome {
    assert!(k_steps >= 1, "k_steps must be >= 1");
    let available = env.kernel.available_kernels();
    let mut state = parent.clone();
    let mut records = Vec::with_capacity(k_steps);

    for step in 0..k_steps {
        let requested = select_kernel(env.selection, &env.stats, &mut rngs.thompson, &available);
        let mut kernel_id = requested;
        let mut inspirations = Vec::new();
        if requested.uses_inspirations() {
            if let Some(archive) = env.archive {
                inspirations = archive.select_inspirations(&state.program, env.top_k, env.diverse_m);
            }
            if inspirations.is_empty() {
                kernel_id = requested.without_inspirations();
            }
        }
        let ctx = MutationContext {
            iteration: env.iteration,
            beta_t: env.beta_t,
            parent_reward: state.reward,
            inspirations,
            kernel_id,
            task_description: env.task_description,
        };
        let result = env.kernel.propose(&state.program, &ctx, &mut rngs.proposal);

        let mut record = ProposalRecord {
            step,
            requested_kernel: requested,
            kernel_id,
            current: state.program.clone(),
            current_reward: state.reward,
            candidate: result.candidate.clone(),
            reward: None,
            accept_prob: 0.0,
            accepted: false,
            parse_ok: result.parse_ok,
            success: false,
            failure: result.error.clone(),
            llm_calls: result.llm_calls,
            n_inspirations: ctx.inspirations.len(),
            transcript: result.transcript,
        };
        // one uniform per step keeps the accept stream aligned across outcomes
        let u: f64 = rngs.accept.random();

        if let Some(candidate) = result.candidate.filter(|_| result.parse_ok) {
            let evaluation = if candidate.digest() == state.program.digest() && env.evaluator.is_deterministic() {
                crate::eval::Evaluation {
                    reward: state.reward,
                    failure: None,
                }
            } else {
                env.evaluator.evaluate(&candidate)
            };
            record.reward = Some(evaluation.reward);
            if let Some(f) = &evaluation.failure {
                record.failure = Some(eval_failure_text(f));
            }
            if evaluation.reward.valid {
                let alpha = acceptance_probability(env, &state, &candidate, evaluation.reward.value, &ctx);
                record.accept_prob = alpha;
                if u < alpha {
                    record.accepted = true;
                    record.success = evaluation.reward.value >= state.reward.value;
                    state = Particle {
                        program: candidate,
                        reward: evaluation.reward,
                        born_iteration: env.iteration,
                        island_id: state.island_id,
                        lineage_id: state.lineage_id,
                    };
                }
            }
        }
        records.push(record);
    }

    ChainOutcome {
        particle: state,
        records,
    }
}

fn eval_failure_text(f: &EvalFailure) -> String {
    match f {
        EvalFailure::SpawnError(s) => format!("spawn_error: {s}"),
        EvalFailure::Timeout => "timeout".to_string(),
        EvalFailure::BadOutput(s) => format!("bad_output: {s}"),
        EvalFailure::InvalidProgram(s) => format!("invalid_program: {s}"),
    }
}

fn acceptance_probability(
    env: &ChainEnv<'_>,
    current: &Particle,
    candidate: &Program,
    reward_proposed: f64,
    ctx: &MutationContext<'_>,
) -> f64 {
    match env.acceptance {
        AcceptanceMode::RewardOnly => acceptance_reward_only(current.reward.value, reward_proposed, env.beta_t),
        AcceptanceMode::FullRatio => {
            let forward = env.kernel.density(&current.program, candidate, ctx);
            let reverse = env.kernel.density(candidate, &current.program, ctx);
            let p_cur = env.prior.density(&current.program);
            let p_new = env.prior.density(candidate);
            match (forward, reverse, p_cur, p_new) {
                (Some(f), Some(r), Some(pc), Some(pn)) if f > 0.0 && pc > 0.0 => {
                    if pn <= 0.0 {
                        return 0.0;
                    }
                    acceptance_full_ratio_log(
                        pn.ln() - pc.ln(),
                        env.beta_t,
                        current.reward.value,
                        reward_proposed,
                        f,
                        r,
                    )
                }
                // densities are validated up front; an unsupported state is rejected
                _ => 0.0,
            }
        }
    }
}
