//! Enumerable program spaces and density-known proposal kernels on them.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, RngCore};

use super::OracleError;
use crate::eval::{EvalFailure, Evaluation, Evaluator};
use crate::mutate::{MutationContext, Prior, ProposalKernel, ProposalResult};
use crate::types::{Digest, KernelId, Program, RewardBounds};

/// Largest space the dense oracle accepts.
pub const MAX_STATES: usize = 4096;

/// Explicit states with a prior `p0` and reward vector `R`.
#[derive(Clone, Debug)]
pub struct FiniteSpace {
    states: Vec<Program>,
    prior: Vec<f64>,
    rewards: Vec<f64>,
    index: HashMap<Digest, usize>,
}

impl FiniteSpace {
    pub fn new(states: Vec<Program>, prior: Vec<f64>, rewards: Vec<f64>) -> Result<Self, OracleError> {
        let n = states.len();
        if n == 0 || n > MAX_STATES {
            return Err(OracleError::InvalidSpace(format!(
                "{n} states (allowed 1..={MAX_STATES})"
            )));
        }
        if prior.len() != n || rewards.len() != n {
            return Err(OracleError::LengthMismatch);
        }
        let total: f64 = prior.iter().sum();
        if (total - 1.0).abs() > 1e-12 || prior.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(OracleError::InvalidSpace(format!("prior sums to {total}")));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(OracleError::InvalidSpace("non-finite reward".into()));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, s) in states.iter().enumerate() {
            if index.insert(s.digest(), i).is_some() {
                return Err(OracleError::InvalidSpace(format!("duplicate state {}", s.source())));
            }
        }
        Ok(FiniteSpace {
            states,
            prior,
            rewards,
            index,
        })
    }

    /// `{0,1}^n_bits` under the uniform prior with the given reward.
    pub fn bitstrings(n_bits: usize, reward: impl Fn(&str) -> f64) -> Result<Self, OracleError> {
        if n_bits == 0 || n_bits > 12 {
            return Err(OracleError::InvalidSpace(format!("{n_bits} bits")));
        }
        let n = 1usize << n_bits;
        let states: Vec<Program> = (0..n)
            .map(|i| Program::new(bit_string(i, n_bits), "bits").expect("non-empty"))
            .collect();
        let rewards = states.iter().map(|s| reward(s.source())).collect();
        FiniteSpace::new(states, vec![1.0 / n as f64; n], rewards)
    }

    /// `{0,1}^n_bits`, uniform prior, reward = popcount / n_bits.
    pub fn popcount(n_bits: usize) -> Result<Self, OracleError> {
        FiniteSpace::bitstrings(n_bits, |s| {
            s.bytes().filter(|b| *b == b'1').count() as f64 / n_bits as f64
        })
    }

    /// Random prior (normalised exponentials) and rewards uniform in `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, reward_scale: f64, rng: &mut R) -> Result<Self, OracleError> {
        let states: Vec<Program> = (0..n_states)
            .map(|i| Program::new(format!("s{i}"), "state").expect("non-empty"))
            .collect();
        let raw: Vec<f64> = (0..n_states)
            .map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-9)
            .collect();
        let total: f64 = raw.iter().sum();
        let mut prior: Vec<f64> = raw.iter().map(|x| x / total).collect();
        // absorb rounding so the prior sums to one within 1e-12
        let drift = 1.0 - prior.iter().sum::<f64>();
        prior[0] += drift;
        let rewards = (0..n_states)
            .map(|_| reward_scale * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        FiniteSpace::new(states, prior, rewards)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[Program] {
        &self.states
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn index_of(&self, program: &Program) -> Option<usize> {
        self.index.get(&program.digest()).copied()
    }

    pub fn bounds(&self) -> RewardBounds {
        RewardBounds::of(&self.rewards).expect("non-empty space")
    }
}

pub fn bit_string(value: usize, n_bits: usize) -> String {
    (0..n_bits)
        .rev()
        .map(|b| if value >> b & 1 == 1 { '1' } else { '0' })
        .collect()
}

/// Samples from `p0` by inversion; exposes `p0` as its density.
pub struct SpacePrior(pub Arc<FiniteSpace>);

impl Prior for SpacePrior {
    fn sample(&self, _index: usize, rng: &mut dyn RngCore) -> Program {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.0.prior.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.0.states[i].clone();
            }
        }
        let last = self.0.prior.iter().rposition(|p| *p > 0.0).unwrap_or(0);
        self.0.states[last].clone()
    }

    fn density(&self, program: &Program) -> Option<f64> {
        Some(self.0.index_of(program).map_or(0.0, |i| self.0.prior[i]))
    }
}

/// Table lookup of `R`; programs outside the space get the floor.
pub struct SpaceEvaluator {
    pub space: Arc<FiniteSpace>,
    pub reward_floor: f64,
}

impl Evaluator for SpaceEvaluator {
    fn evaluate(&self, program: &Program) -> Evaluation {
        match self.space.index_of(program) {
            Some(i) => Evaluation::ok(self.space.rewards[i], self.reward_floor),
            None => Evaluation::failed(
                self.reward_floor,
                EvalFailure::InvalidProgram("outside the finite space".into()),
            ),
        }
    }
}

/// Flips one uniformly chosen bit. Symmetric: `Q(x, y) = 1/n` at Hamming distance 1.
#[derive(Clone, Debug)]
pub struct BitFlipKernel {
    pub n_bits: usize,
}

impl ProposalKernel for BitFlipKernel {
    fn propose(&self, parent: &Program, ctx: &MutationContext<'_>, rng: &mut dyn RngCore) -> ProposalResult {
        let mut bytes = parent.source().as_bytes().to_vec();
        if bytes.len() != self.n_bits {
            return ProposalResult::failure(ctx.kernel_id, "parent is not an n-bit string");
        }
        let i = rng.random_range(0..self.n_bits);
        bytes[i] = if bytes[i] == b'1' { b'0' } else { b'1' };
        let src = String::from_utf8(bytes).expect("ascii");
        ProposalResult::candidate(Program::new(src, parent.language()).expect("non-empty"), ctx.kernel_id)
    }

    fn density(&self, from: &Program, to: &Program, _ctx: &MutationContext<'_>) -> Option<f64> {
        let (a, b) = (from.source().as_bytes(), to.source().as_bytes());
        if a.len() != self.n_bits || b.len() != self.n_bits {
            return Some(0.0);
        }
        let dist = a.iter().zip(b).filter(|(x, y)| x != y).count();
        Some(if dist == 1 { 1.0 / self.n_bits as f64 } else { 0.0 })
    }

    fn has_density(&self) -> bool {
        true
    }

    fn available_kernels(&self) -> Vec<KernelId> {
        vec![KernelId::DiffNoInspo]
    }
}

/// Always proposes the current state.
#[derive(Clone, Debug, Default)]
pub struct IdentityKernel;

impl ProposalKernel for IdentityKernel {
    fn propose(&self, parent: &Program, ctx: &MutationContext<'_>, _rng: &mut dyn RngCore) -> ProposalResult {
        ProposalResult::candidate(parent.clone(), ctx.kernel_id)
    }

    fn density(&self, from: &Program, to: &Program, _ctx: &MutationContext<'_>) -> Option<f64> {
        Some(if from.digest() == to.digest() { 1.0 } else { 0.0 })
    }

    fn has_density(&self) -> bool {
        true
    }

    fn available_kernels(&self) -> Vec<KernelId> {
        vec![KernelId::DiffNoInspo]
    }
}

/// Arbitrary row-stochastic proposal matrix over a finite space.
#[derive(Clone, Debug)]
pub struct MatrixKernel {
    space: Arc<FiniteSpace>,
    rows: Vec<Vec<f64>>,
}

impl MatrixKernel {
    pub fn new(space: Arc<FiniteSpace>, rows: Vec<Vec<f64>>) -> Result<Self, OracleError> {
        let n = space.len();
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(OracleError::LengthMismatch);
        }
        for r in &rows {
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-12 || r.iter().any(|x| *x < 0.0) {
                return Err(OracleError::InvalidSpace(format!("proposal row sums to {s}")));
            }
        }
        Ok(MatrixKernel { space, rows })
    }
}

impl ProposalKernel for MatrixKernel {
    fn propose(&self, parent: &Program, ctx: &MutationContext<'_>, rng: &mut dyn RngCore) -> ProposalResult {
        let Some(i) = self.space.index_of(parent) else {
            return ProposalResult::failure(ctx.kernel_id, "parent outside space");
        };
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = &self.rows[i];
        let mut pick = row.iter().rposition(|p| *p > 0.0).unwrap_or(i);
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = j;
                break;
            }
        }
        ProposalResult::candidate(self.space.states[pick].clone(), ctx.kernel_id)
    }

    fn density(&self, from: &Program, to: &Program, _ctx: &MutationContext<'_>) -> Option<f64> {
        match (self.space.index_of(from), self.space.index_of(to)) {
            (Some(i), Some(j)) => Some(self.rows[i][j]),
            _ => Some(0.0),
        }
    }

    fn has_density(&self) -> bool {
        true
    }

    fn available_kernels(&self) -> Vec<KernelId> {
        vec![KernelId::DiffNoInspo]
    }
}
