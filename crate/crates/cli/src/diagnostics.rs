//! Per-run diagnostics computed from the event log.
//!
//! For the bit-flip backend on a bitstring task with a uniform prior the
//! target family is known exactly, so each iteration also gets the TV
//! distance of the population to `p_t`, and the run gets the bridge and
//! path quantities and the fitted mixing rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use smc_search::events::{Event, RunEvent};
use smc_search::oracle::{
    exact_tilted, fit_ergodicity_rate, schedule_diagnostics, tv_distance, BitFlipKernel, FiniteSpace,
};
use smc_search::{Program, RunConfig};

use crate::config::{BackendConfig, EvaluatorConfig, FileConfig};

/// Largest space for which the mixing-rate fit is attempted.
const RHO_MAX_BITS: usize = 8;
const RHO_K_MAX: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub island: usize,
    pub epoch: usize,
    pub iteration: usize,
    pub lambda: f64,
    pub delta_beta: f64,
    pub ess: f64,
    pub ess_fraction: f64,
    pub forced: bool,
    pub mean_reward: f64,
    pub best_reward: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv_to_target: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IslandOracle {
    pub island: usize,
    /// `max_t ‖p_t/p_{t-1}‖²` in `L²(p_{t-1})` along this island's schedule.
    pub gamma_hat_sq: f64,
    pub gamma_cap_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSection {
    pub n_bits: usize,
    pub path_gamma: f64,
    pub path_gamma_bound: f64,
    pub islands: Vec<IslandOracle>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_r_squared: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub kappa: f64,
    pub min_ess_fraction: Option<f64>,
    pub iterations: Vec<IterationRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSection>,
}

fn oracle_space(cfg: &FileConfig) -> Option<(usize, FiniteSpace)> {
    match (&cfg.backend, &cfg.task.evaluator) {
        (BackendConfig::BitFlip { uniform_prior: true }, EvaluatorConfig::Bitstring { n_bits }) => {
            FiniteSpace::popcount(*n_bits).ok().map(|s| (*n_bits, s))
        }
        _ => None,
    }
}

pub fn compute(cfg: &FileConfig, events: &[RunEvent]) -> Diagnostics {
    let sampler: &RunConfig = &cfg.sampler;
    let n = sampler.particles_per_island as f64;
    let space = oracle_space(cfg);
    let mut pending: BTreeMap<(usize, usize), IterationRecord> = BTreeMap::new();
    let mut iterations = Vec::new();
    let mut lambdas: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

    for ev in events {
        match &ev.event {
            Event::IterationStart {
                island,
                epoch,
                iteration,
                lambda,
                delta_beta,
                ess,
                forced,
                ..
            } => {
                pending.insert(
                    (*island, *iteration),
                    IterationRecord {
                        island: *island,
                        epoch: *epoch,
                        iteration: *iteration,
                        lambda: *lambda,
                        delta_beta: *delta_beta,
                        ess: *ess,
                        ess_fraction: ess / n,
                        forced: *forced,
                        mean_reward: f64::NAN,
                        best_reward: f64::NAN,
                        tv_to_target: None,
                    },
                );
            }
            Event::IterationEnd {
                island,
                iteration,
                best_reward,
                mean_reward,
                checkpoint,
                ..
            } => {
                let Some(mut rec) = pending.remove(&(*island, *iteration)) else {
                    continue;
                };
                rec.mean_reward = *mean_reward;
                rec.best_reward = *best_reward;
                if let Some((_, space)) = &space {
                    let mut counts = vec![0.0; space.len()];
                    for p in &checkpoint.particles {
                        let key = Program::new(p.program.source(), "bits").expect("non-empty");
                        if let Some(i) = space.index_of(&key) {
                            counts[i] += 1.0 / checkpoint.particles.len() as f64;
                        }
                    }
                    let target = exact_tilted(space, rec.lambda * sampler.beta);
                    rec.tv_to_target = tv_distance(&counts, &target).ok();
                }
                lambdas.entry(*island).or_default().push(rec.lambda);
                iterations.push(rec);
            }
            _ => {}
        }
    }

    let oracle = space.map(|(n_bits, space)| {
        let base = schedule_diagnostics(&space, sampler.beta, &[]);
        let islands = lambdas
            .iter()
            .map(|(island, ls)| IslandOracle {
                island: *island,
                gamma_hat_sq: schedule_diagnostics(&space, sampler.beta, ls).gamma_cap,
                gamma_cap_bound: 1.0 / sampler.kappa,
            })
            .collect();
        let fit = (n_bits <= RHO_MAX_BITS)
            .then(|| {
                fit_ergodicity_rate(
                    &space,
                    sampler.beta,
                    &BitFlipKernel { n_bits },
                    sampler.acceptance_mode,
                    RHO_K_MAX,
                )
                .ok()
            })
            .flatten();
        OracleSection {
            n_bits,
            path_gamma: base.path_gamma,
            path_gamma_bound: base.path_gamma_bound,
            islands,
            rho_hat: fit.as_ref().map(|f| f.rho_hat),
            rho_r_squared: fit.as_ref().map(|f| f.r_squared),
        }
    });

    Diagnostics {
        kappa: sampler.kappa,
        min_ess_fraction: iterations.iter().map(|r| r.ess_fraction).reduce(f64::min),
        iterations,
        oracle,
    }
}
