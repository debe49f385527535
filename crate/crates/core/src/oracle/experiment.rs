//! Repeated single-island runs on a finite space, compared against the
//! exact target.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{bridge_l2_sq, bridge_linf, exact_tilted, path_gamma, tv_distance, BitFlipKernel, FiniteSpace};
use super::{SpaceEvaluator, SpacePrior};
use crate::events::{Event, MemorySink};
use crate::island::{Components, Engine, EngineError};
use crate::mutate::ProposalKernel;
use crate::par::{map_indexed, ExecMode};
use crate::types::{AcceptanceMode, RunConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_bits: usize,
    pub beta: f64,
    pub particles: usize,
    pub n_proposals: usize,
    pub kappa: f64,
    pub min_iterations: usize,
    pub max_iterations: usize,
    pub epsilon: f64,
    pub n_runs: usize,
    pub base_seed: u64,
    pub acceptance: AcceptanceMode,
}

impl Default for ExperimentConfig {
    /// `{0,1}^8`, `R = popcount/8`, `beta = 5`, `N = 200`, `K = 10`, `kappa = 0.5`.
    fn default() -> Self {
        ExperimentConfig {
            n_bits: 8,
            beta: 5.0,
            particles: 200,
            n_proposals: 10,
            kappa: 0.5,
            min_iterations: 3,
            max_iterations: 15,
            epsilon: 0.05,
            n_runs: 25,
            base_seed: 0,
            acceptance: AcceptanceMode::FullRatio,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentRun {
    pub seed: u64,
    /// `eta_T^N(f)`: population mean of `f` at termination.
    pub estimate: f64,
    pub error: f64,
    pub success: bool,
    pub lambdas: Vec<f64>,
    /// ESS / N at each chosen `lambda_t`.
    pub ess_fractions: Vec<f64>,
    /// `max_t ‖p_t/p_{t-1}‖²_{L²(p_{t-1})}` along this run's schedule.
    pub gamma_hat_sq: f64,
    /// `max_t ‖p_t/p_{t-1}‖_∞ / exp(Δβ_t Δ_R)`; at most 1.
    pub bridge_linf_ratio: f64,
    /// TV between the final empirical population and `p*`.
    pub tv_to_target: f64,
    /// `N · T · K`.
    pub budget: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub target_mean: f64,
    pub path_gamma: f64,
    pub path_gamma_bound: f64,
    pub successes: usize,
    pub success_rate: f64,
    pub runs: Vec<ExperimentRun>,
}

/// Runs `n_runs` seeded single-island engines with the bit-flip kernel
/// and reports how often `|eta_T^N(f) - p*(f)| <= epsilon` for
/// `f = (R - R₋)/Δ_R`.
pub fn theorem1_experiment(cfg: &ExperimentConfig, mode: ExecMode) -> Result<ExperimentReport, EngineError> {
    let space = Arc::new(FiniteSpace::popcount(cfg.n_bits).map_err(|e| EngineError::Restore(e.to_string()))?);
    let kernel: Arc<dyn ProposalKernel> = Arc::new(BitFlipKernel { n_bits: cfg.n_bits });
    run_experiment(space, kernel, cfg, mode)
}

pub fn run_experiment(
    space: Arc<FiniteSpace>,
    kernel: Arc<dyn ProposalKernel>,
    cfg: &ExperimentConfig,
    mode: ExecMode,
) -> Result<ExperimentReport, EngineError> {
    let bounds = space.bounds();
    let f: Vec<f64> = space.rewards().iter().map(|r| bounds.normalize(*r)).collect();
    let target = exact_tilted(&space, cfg.beta);
    let target_mean: f64 = target.iter().zip(&f).map(|(p, v)| p * v).sum();

    let runs = map_indexed(mode, cfg.n_runs, |r| -> Result<ExperimentRun, EngineError> {
        let seed = cfg.base_seed.wrapping_add(r as u64);
        let comps = Components::new(
            kernel.clone(),
            Arc::new(SpacePrior(space.clone())),
            Arc::new(SpaceEvaluator {
                space: space.clone(),
                reward_floor: bounds.r_minus,
            }),
        );
        let config = RunConfig {
            n_islands: 1,
            particles_per_island: cfg.particles,
            n_proposals: cfg.n_proposals,
            beta: cfg.beta,
            kappa: cfg.kappa,
            min_iterations: cfg.min_iterations,
            max_iterations: cfg.max_iterations,
            migration_size: 0,
            top_k_inspiration: 0,
            diverse_inspirations: 0,
            reward_floor: bounds.r_minus,
            seed,
            acceptance_mode: cfg.acceptance,
            ..RunConfig::default()
        };
        // runs are already spread over threads; each engine runs sequentially
        let mut engine = Engine::new(config, comps)?.with_mode(ExecMode::Sequential);
        let mut sink = MemorySink::default();
        engine.run(&mut sink, serde_json::Value::Null)?;

        let final_particles = &engine.islands()[0].particles;
        let mut counts = vec![0.0; space.len()];
        let mut estimate = 0.0;
        for p in final_particles {
            let i = space.index_of(&p.program).expect("particles stay in the space");
            counts[i] += 1.0;
            estimate += f[i];
        }
        let n = final_particles.len() as f64;
        estimate /= n;
        counts.iter_mut().for_each(|c| *c /= n);

        let mut ess_fractions = Vec::new();
        for e in &sink.events {
            if let Event::IterationStart { ess, .. } = e.event {
                ess_fractions.push(ess / n);
            }
        }
        let lambdas = engine.islands()[0].lambdas.clone();
        let mut gamma_hat_sq: f64 = 1.0;
        let mut linf_ratio: f64 = 0.0;
        for w in lambdas.windows(2) {
            let (b0, b1) = (w[0] * cfg.beta, w[1] * cfg.beta);
            gamma_hat_sq = gamma_hat_sq.max(bridge_l2_sq(&space, b0, b1));
            linf_ratio = linf_ratio.max(bridge_linf(&space, b0, b1) / ((b1 - b0) * bounds.delta_r).exp());
        }
        let error = (estimate - target_mean).abs();
        Ok(ExperimentRun {
            seed,
            estimate,
            error,
            success: error <= cfg.epsilon,
            budget: cfg.particles * (lambdas.len() - 1) * cfg.n_proposals,
            lambdas,
            ess_fractions,
            gamma_hat_sq,
            bridge_linf_ratio: linf_ratio,
            tv_to_target: tv_distance(&counts, &target).expect("same length"),
        })
    });
    let runs: Vec<ExperimentRun> = runs.into_iter().collect::<Result<_, _>>()?;
    let successes = runs.iter().filter(|r| r.success).count();
    Ok(ExperimentReport {
        target_mean,
        path_gamma: path_gamma(&space, cfg.beta),
        path_gamma_bound: (cfg.beta * bounds.delta_r).exp(),
        successes,
        success_rate: successes as f64 / runs.len().max(1) as f64,
        runs,
    })
}
