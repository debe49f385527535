//! Parent reweighting and systematic resampling.
//!
//! With the backward kernel taken as the time reversal of the mutation block,
//! forward and backward kernels cancel in the incremental weight, leaving
//! `w_n = exp(delta_beta * R(parent_n))`: the weight depends on the parent's
//! reward only and never on the mutated child. Normalising gives a softmax
//! over rewards at inverse temperature `delta_beta`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::schedule::ScheduleError;

/// Log-weights and their normalised (softmax) counterpart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub log_weights: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }

    /// Builds from arbitrary finite log-weights via log-sum-exp.
    pub fn from_log_weights(log_weights: Vec<f64>) -> Self {
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
        let total: f64 = shifted.iter().sum();
        let normalized = shifted.into_iter().map(|u| u / total).collect();
        WeightVector {
            log_weights,
            normalized,
        }
    }
}

/// Ancestor indices, sorted non-decreasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AncestorIndexVector {
    pub indices: Vec<usize>,
}

pub fn compute_weights(rewards: &[f64], delta_beta: f64) -> Result<WeightVector, ScheduleError> {
    if rewards.is_empty() {
        return Err(ScheduleError::EmptyPopulation);
    }
    debug_assert!(delta_beta >= 0.0);
    Ok(WeightVector::from_log_weights(
        rewards.iter().map(|r| delta_beta * r).collect(),
    ))
}

/// Draws a single `u ~ U[0, 1/N)` and selects the indices whose cumulative
/// weight first reaches `u + i/N`.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &WeightVector, rng: &mut R) -> AncestorIndexVector {
    let n = weights.len();
    let u = rng.random::<f64>() / n as f64;
    systematic_resample_with_offset(weights, u)
}

/// Deterministic core of [`systematic_resample`] for a given offset `u ∈ [0, 1/N)`.
pub fn systematic_resample_with_offset(weights: &WeightVector, u: f64) -> AncestorIndexVector {
    let n = weights.len();
    let mut indices = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    let mut j = 0;
    for i in 0..n {
        let point = u + i as f64 / n as f64;
        // `point < cumulative` selects the first index whose interval
        // [C_{j-1}, C_j) contains the point; ties go to the lower index.
        while j < n {
            let next = cumulative + weights.normalized[j];
            if point < next {
                break;
            }
            cumulative = next;
            j += 1;
        }
        // rounding can leave the last point just past the final cumulative sum
        let pick = if j < n { j } else { last_positive(&weights.normalized) };
        indices.push(pick);
    }
    AncestorIndexVector { indices }
}

fn last_positive(w: &[f64]) -> usize {
    w.iter().rposition(|&x| x > 0.0).unwrap_or(w.len() - 1)
}
