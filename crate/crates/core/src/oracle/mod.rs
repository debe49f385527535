//! Brute-force ground truth on enumerable spaces.
//!
//! Everything here is computed exactly by enumeration: tilted targets
//! `p_t ∝ p0 · exp(beta_t R)`, total-variation distances, the one-step MH
//! transition matrix of a density-known kernel, its invariance residual, the
//! worst-case TV decay of its powers, and the path/bridge quantities that the
//! sampler's concentration bound depends on.
//!
//! Symbols that have no executable counterpart (the backward kernel, which
//! cancels out of the incremental weight; warm-start constants of the mixing
//! analysis) are not represented.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mutate::{acceptance_full_ratio_log, acceptance_reward_only, MutationContext, ProposalKernel};
use crate::types::{AcceptanceMode, KernelId, RewardValue};

pub mod experiment;
pub mod space;

pub use experiment::{theorem1_experiment, ExperimentConfig, ExperimentReport, ExperimentRun};
pub use space::{BitFlipKernel, FiniteSpace, IdentityKernel, MatrixKernel, SpaceEvaluator, SpacePrior};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("length mismatch")]
    LengthMismatch,
    #[error("proposal density unavailable")]
    DensityUnavailable,
    #[error("chain is not uniformly ergodic (d_K plateaus at {plateau:.3e})")]
    NonErgodic { plateau: f64 },
    #[error("invalid finite space: {0}")]
    InvalidSpace(String),
}

/// `p0(x) exp(beta_t R(x)) / Z_t`, normalised in log space.
pub fn exact_tilted(space: &FiniteSpace, beta_t: f64) -> Vec<f64> {
    let logs: Vec<f64> = space
        .prior()
        .iter()
        .zip(space.rewards())
        .map(|(p, r)| {
            if *p > 0.0 {
                p.ln() + beta_t * r
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = unnorm.iter().sum();
    unnorm.into_iter().map(|u| u / z).collect()
}

/// `½ Σ |p - q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64, OracleError> {
    if p.len() != q.len() {
        return Err(OracleError::LengthMismatch);
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

fn density_ctx(beta_t: f64) -> MutationContext<'static> {
    MutationContext {
        iteration: 0,
        beta_t,
        parent_reward: RewardValue {
            value: 0.0,
            valid: true,
        },
        inspirations: Vec::new(),
        kernel_id: KernelId::DiffNoInspo,
        task_description: "",
    }
}

/// Proposal matrix `Q[i][j] = Q(x_j | x_i)`.
pub fn proposal_matrix(space: &FiniteSpace, kernel: &dyn ProposalKernel) -> Result<DMatrix<f64>, OracleError> {
    if !kernel.has_density() {
        return Err(OracleError::DensityUnavailable);
    }
    let ctx = density_ctx(0.0);
    let n = space.len();
    let states = space.states();
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            q[(i, j)] = kernel
                .density(&states[i], &states[j], &ctx)
                .ok_or(OracleError::DensityUnavailable)?;
        }
    }
    Ok(q)
}

/// One-step MH matrix: off-diagonal `Q(i,j) α(i,j)`, rejected mass on the diagonal.
pub fn mh_transition_matrix(
    space: &FiniteSpace,
    beta_t: f64,
    kernel: &dyn ProposalKernel,
    mode: AcceptanceMode,
) -> Result<DMatrix<f64>, OracleError> {
    let q = proposal_matrix(space, kernel)?;
    let n = space.len();
    let (prior, rewards) = (space.prior(), space.rewards());
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut moved = 0.0;
        for j in 0..n {
            if i == j || q[(i, j)] == 0.0 {
                continue;
            }
            let alpha = match mode {
                AcceptanceMode::RewardOnly => acceptance_reward_only(rewards[i], rewards[j], beta_t),
                AcceptanceMode::FullRatio => {
                    if prior[j] == 0.0 {
                        0.0
                    } else {
                        acceptance_full_ratio_log(
                            prior[j].ln() - prior[i].ln(),
                            beta_t,
                            rewards[i],
                            rewards[j],
                            q[(i, j)],
                            q[(j, i)],
                        )
                    }
                }
            };
            p[(i, j)] = q[(i, j)] * alpha;
            moved += p[(i, j)];
        }
        p[(i, i)] = 1.0 - moved;
    }
    Ok(p)
}

/// `max_y |Σ_x p_t(x) P(x, y) - p_t(y)|`.
pub fn check_invariance(
    space: &FiniteSpace,
    beta_t: f64,
    kernel: &dyn ProposalKernel,
    mode: AcceptanceMode,
) -> Result<f64, OracleError> {
    let p = mh_transition_matrix(space, beta_t, kernel, mode)?;
    let target = exact_tilted(space, beta_t);
    Ok(invariance_residual(&p, &target))
}

pub fn invariance_residual(p: &DMatrix<f64>, target: &[f64]) -> f64 {
    let row = DMatrix::from_row_slice(1, target.len(), target);
    let moved = row * p;
    moved.iter().zip(target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Geometric fit `d_K ≈ C ρ^K` of the worst-case TV decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicityFit {
    pub rho_hat: f64,
    pub c_hat: f64,
    pub r_squared: f64,
    /// `d_K` for `K = 1..=k_max`.
    pub tv_by_k: Vec<f64>,
}

/// Points of `d_K` dropped before the fit.
pub const FIT_SKIP: usize = 2;
/// `d_K` below this is numerical noise and excluded from the fit.
const TV_FLOOR: f64 = 1e-12;

pub fn fit_ergodicity_rate(
    space: &FiniteSpace,
    beta_t: f64,
    kernel: &dyn ProposalKernel,
    mode: AcceptanceMode,
    k_max: usize,
) -> Result<ErgodicityFit, OracleError> {
    let p = mh_transition_matrix(space, beta_t, kernel, mode)?;
    let target = exact_tilted(space, beta_t);
    let n = space.len();
    let mut power = p.clone();
    let mut tv_by_k = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        if k > 1 {
            power = &power * &p;
        }
        let worst = (0..n)
            .map(|i| 0.5 * (0..n).map(|j| (power[(i, j)] - target[j]).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        tv_by_k.push(worst);
    }
    fit_geometric(tv_by_k)
}

/// Least-squares fit of `ln d_K = ln C + K ln ρ` on the tail of `tv_by_k`.
pub fn fit_geometric(tv_by_k: Vec<f64>) -> Result<ErgodicityFit, OracleError> {
    let k_max = tv_by_k.len();
    let last = *tv_by_k.last().unwrap_or(&1.0);
    let mid = tv_by_k.get(k_max / 2).copied().unwrap_or(last);
    if last > TV_FLOOR && last >= mid * (1.0 - 1e-9) {
        return Err(OracleError::NonErgodic { plateau: last });
    }
    let points: Vec<(f64, f64)> = tv_by_k
        .iter()
        .enumerate()
        .skip(FIT_SKIP)
        .filter(|(_, d)| **d > TV_FLOOR)
        .map(|(i, d)| ((i + 1) as f64, d.ln()))
        .collect();
    if points.len() < 2 {
        // collapsed to the floor almost immediately
        return Ok(ErgodicityFit {
            rho_hat: 0.0,
            c_hat: tv_by_k.first().copied().unwrap_or(0.0),
            r_squared: 1.0,
            tv_by_k,
        });
    }
    let m = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let rho_hat = slope.exp();
    if rho_hat >= 1.0 {
        return Err(OracleError::NonErgodic { plateau: last });
    }
    Ok(ErgodicityFit {
        rho_hat,
        c_hat: intercept.exp(),
        r_squared,
        tv_by_k,
    })
}

/// Path length `Γ = max_x p*(x) / p0(x)`.
pub fn path_gamma(space: &FiniteSpace, beta: f64) -> f64 {
    let target = exact_tilted(space, beta);
    target
        .iter()
        .zip(space.prior())
        .filter(|(_, p0)| **p0 > 0.0)
        .map(|(t, p0)| t / p0)
        .fold(0.0, f64::max)
}

/// `‖p_t / p_{t-1}‖_∞` between two bridges.
pub fn bridge_linf(space: &FiniteSpace, beta_prev: f64, beta_t: f64) -> f64 {
    let prev = exact_tilted(space, beta_prev);
    let next = exact_tilted(space, beta_t);
    prev.iter()
        .zip(&next)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| b / a)
        .fold(0.0, f64::max)
}

/// `‖p_t / p_{t-1}‖²_{L²(p_{t-1})} = Σ p_t² / p_{t-1}`.
pub fn bridge_l2_sq(space: &FiniteSpace, beta_prev: f64, beta_t: f64) -> f64 {
    let prev = exact_tilted(space, beta_prev);
    let next = exact_tilted(space, beta_t);
    prev.iter()
        .zip(&next)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| b * b / a)
        .sum()
}

/// Summary diagnostics for one schedule on one space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleDiagnostics {
    /// `max_t ‖p_t/p_{t-1}‖²_{L²(p_{t-1})}`, to compare with `1/kappa`.
    pub gamma_cap: f64,
    /// `max_x p*(x)/p0(x)`; bounded by `exp(beta Δ_R)`.
    pub path_gamma: f64,
    pub path_gamma_bound: f64,
    pub rho_hat: Option<f64>,
    pub tv_to_target: Option<f64>,
}

/// Bridge quantities along `lambdas` (starting after `lambda_0 = 0`).
pub fn schedule_diagnostics(space: &FiniteSpace, beta: f64, lambdas: &[f64]) -> OracleDiagnostics {
    let mut prev = 0.0;
    let mut gamma_cap: f64 = 1.0;
    for &l in lambdas {
        gamma_cap = gamma_cap.max(bridge_l2_sq(space, prev * beta, l * beta));
        prev = l;
    }
    OracleDiagnostics {
        gamma_cap,
        path_gamma: path_gamma(space, beta),
        path_gamma_bound: (beta * space.bounds().delta_r).exp(),
        rho_hat: None,
        tv_to_target: None,
    }
}
