//! Plot data as CSV, projected from the event log.
//!
//! Every file is a pure function of the log, so exporting twice gives
//! byte-identical output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;
use smc_search::events::{Event, RunEvent};
use smc_search::schedule::ess_curve;
use smc_search::KernelId;

use crate::error::CliError;
use crate::rundir::{self, RunDir};

/// Points per ESS(λ) curve.
const ESS_CURVE_POINTS: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportKind {
    Schedule,
    Kernels,
    Flow,
    BestCurve,
}

#[derive(Serialize)]
struct ScheduleRow {
    island: usize,
    epoch: usize,
    iteration: usize,
    lambda_prev: f64,
    lambda: f64,
    delta_beta: f64,
    beta_t: f64,
    ess: f64,
    ess_fraction: f64,
    forced: bool,
}

#[derive(Serialize)]
struct EssCurveRow {
    island: usize,
    iteration: usize,
    lambda: f64,
    ess: f64,
    ess_fraction: f64,
}

#[derive(Serialize)]
struct KernelRow {
    island: usize,
    iteration: usize,
    kernel: KernelId,
    selected: usize,
    accepted: usize,
    cumulative_selected: usize,
    cumulative_accepted: usize,
    cumulative_acceptance: f64,
}

#[derive(Serialize)]
struct FlowRow {
    island: usize,
    iteration: usize,
    particle: usize,
    ancestor: usize,
    ancestor_weight: f64,
    parent_reward: f64,
    steps: usize,
    accepted_steps: usize,
    reward: f64,
}

#[derive(Serialize)]
struct RankRow {
    island: usize,
    iteration: usize,
    rank: usize,
    particle: usize,
    reward: f64,
    weight: f64,
    expected_copies: f64,
    copies: usize,
}

#[derive(Serialize)]
struct BestRow {
    epoch: usize,
    island: usize,
    iteration: usize,
    best_reward: f64,
    island_best_so_far: f64,
    run_best_so_far: f64,
    llm_calls: usize,
    proposals: usize,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the requested tables under `<run_dir>/export/` and returns their paths.
pub fn cmd_export(run_dir: &Path, what: ExportKind) -> Result<Vec<PathBuf>, CliError> {
    let dir = RunDir::new(run_dir);
    let log = dir.read_events(false)?;
    let out = dir.path(rundir::EXPORT_DIR);
    rundir::ensure_dir(&out)?;
    let n = particles(&log.events)?;
    let beta = beta(&log.events)?;
    let files = match what {
        ExportKind::Schedule => {
            let (sched, curve) = schedule(&log.events, n, beta);
            let (a, b) = (out.join("schedule.csv"), out.join("ess_curve.csv"));
            write_csv(&a, &sched)?;
            write_csv(&b, &curve)?;
            vec![a, b]
        }
        ExportKind::Kernels => {
            let p = out.join("kernels.csv");
            write_csv(&p, &kernels(&log.events))?;
            vec![p]
        }
        ExportKind::Flow => {
            let (flow, ranks) = flow(&log.events);
            let (a, b) = (out.join("flow.csv"), out.join("resampling_by_rank.csv"));
            write_csv(&a, &flow)?;
            write_csv(&b, &ranks)?;
            vec![a, b]
        }
        ExportKind::BestCurve => {
            let p = out.join("best_curve.csv");
            write_csv(&p, &best_curve(&log.events))?;
            vec![p]
        }
    };
    Ok(files)
}

fn run_config(events: &[RunEvent]) -> Result<&smc_search::RunConfig, CliError> {
    match events.first().map(|e| &e.event) {
        Some(Event::RunStart { config, .. }) => Ok(config),
        _ => Err(CliError::NoCheckpoint),
    }
}

fn particles(events: &[RunEvent]) -> Result<usize, CliError> {
    Ok(run_config(events)?.particles_per_island)
}

fn beta(events: &[RunEvent]) -> Result<f64, CliError> {
    Ok(run_config(events)?.beta)
}

fn schedule(events: &[RunEvent], n: usize, beta: f64) -> (Vec<ScheduleRow>, Vec<EssCurveRow>) {
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut lambda_prev: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for ev in events {
        match &ev.event {
            Event::IterationStart {
                island,
                epoch,
                iteration,
                lambda_prev: lp,
                lambda,
                delta_beta,
                beta_t,
                ess,
                forced,
            } => {
                lambda_prev.insert((*island, *iteration), *lp);
                rows.push(ScheduleRow {
                    island: *island,
                    epoch: *epoch,
                    iteration: *iteration,
                    lambda_prev: *lp,
                    lambda: *lambda,
                    delta_beta: *delta_beta,
                    beta_t: *beta_t,
                    ess: *ess,
                    ess_fraction: ess / n as f64,
                    forced: *forced,
                });
            }
            Event::Weights {
                island,
                iteration,
                rewards,
                ..
            } => {
                let lp = lambda_prev.get(&(*island, *iteration)).copied().unwrap_or(0.0);
                for pt in ess_curve(rewards, lp, beta, ESS_CURVE_POINTS) {
                    curves.push(EssCurveRow {
                        island: *island,
                        iteration: *iteration,
                        lambda: pt.lambda,
                        ess: pt.ess,
                        ess_fraction: pt.ess / rewards.len() as f64,
                    });
                }
            }
            _ => {}
        }
    }
    (rows, curves)
}

/// Four rows per island iteration, in kernel order.
fn kernels(events: &[RunEvent]) -> Vec<KernelRow> {
    let mut rows = Vec::new();
    let mut current: BTreeMap<usize, [(usize, usize); 4]> = BTreeMap::new();
    let mut totals: BTreeMap<usize, [(usize, usize); 4]> = BTreeMap::new();
    for ev in events {
        match &ev.event {
            Event::Proposal {
                island,
                kernel,
                accepted,
                ..
            } => {
                let c = &mut current.entry(*island).or_default()[kernel.index()];
                c.0 += 1;
                c.1 += usize::from(*accepted);
            }
            Event::IterationEnd { island, iteration, .. } => {
                let counts = current.remove(island).unwrap_or_default();
                let tot = totals.entry(*island).or_default();
                for k in KernelId::ALL {
                    let (sel, acc) = counts[k.index()];
                    tot[k.index()].0 += sel;
                    tot[k.index()].1 += acc;
                    let (cs, ca) = tot[k.index()];
                    rows.push(KernelRow {
                        island: *island,
                        iteration: *iteration,
                        kernel: k,
                        selected: sel,
                        accepted: acc,
                        cumulative_selected: cs,
                        cumulative_accepted: ca,
                        cumulative_acceptance: if cs == 0 { 0.0 } else { ca as f64 / cs as f64 },
                    });
                }
            }
            _ => {}
        }
    }
    rows
}

fn flow(events: &[RunEvent]) -> (Vec<FlowRow>, Vec<RankRow>) {
    let mut flows = Vec::new();
    let mut ranks = Vec::new();
    // (island, iteration) -> particle -> row under construction
    let mut open: BTreeMap<(usize, usize), BTreeMap<usize, FlowRow>> = BTreeMap::new();
    let mut weights: BTreeMap<(usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ev in events {
        match &ev.event {
            Event::Weights {
                island,
                iteration,
                rewards,
                normalized,
            } => {
                weights.insert((*island, *iteration), (rewards.clone(), normalized.clone()));
            }
            Event::Resample {
                island,
                iteration,
                ancestors,
            } => {
                let Some((rewards, w)) = weights.remove(&(*island, *iteration)) else {
                    continue;
                };
                let mut copies = vec![0usize; w.len()];
                ancestors.iter().for_each(|a| copies[*a] += 1);
                let mut order: Vec<usize> = (0..w.len()).collect();
                order.sort_by(|a, b| w[*b].total_cmp(&w[*a]).then(a.cmp(b)));
                for (rank, p) in order.into_iter().enumerate() {
                    ranks.push(RankRow {
                        island: *island,
                        iteration: *iteration,
                        rank: rank + 1,
                        particle: p,
                        reward: rewards[p],
                        weight: w[p],
                        expected_copies: w[p] * w.len() as f64,
                        copies: copies[p],
                    });
                }
            }
            Event::Proposal {
                island,
                iteration,
                particle,
                ancestor,
                ancestor_weight,
                parent_reward,
                step,
                accepted,
                ..
            } => {
                let row = open
                    .entry((*island, *iteration))
                    .or_default()
                    .entry(*particle)
                    .or_insert(FlowRow {
                        island: *island,
                        iteration: *iteration,
                        particle: *particle,
                        ancestor: *ancestor,
                        ancestor_weight: *ancestor_weight,
                        parent_reward: *parent_reward,
                        steps: 0,
                        accepted_steps: 0,
                        reward: f64::NAN,
                    });
                if *step == 0 {
                    row.parent_reward = *parent_reward;
                }
                row.steps += 1;
                row.accepted_steps += usize::from(*accepted);
            }
            Event::IterationEnd {
                island,
                iteration,
                checkpoint,
                ..
            } => {
                if let Some(rows) = open.remove(&(*island, *iteration)) {
                    for (i, mut row) in rows {
                        row.reward = checkpoint.particles.get(i).map_or(f64::NAN, |p| p.reward.value);
                        flows.push(row);
                    }
                }
            }
            _ => {}
        }
    }
    (flows, ranks)
}

fn best_curve(events: &[RunEvent]) -> Vec<BestRow> {
    let mut rows = Vec::new();
    let mut island_best: BTreeMap<usize, f64> = BTreeMap::new();
    let mut run_best = f64::NEG_INFINITY;
    let (mut calls, mut proposals) = (0usize, 0usize);
    for ev in events {
        match &ev.event {
            Event::InitParticle { island, reward, .. } => {
                let b = island_best.entry(*island).or_insert(f64::NEG_INFINITY);
                *b = b.max(*reward);
                run_best = run_best.max(*reward);
            }
            Event::Proposal { llm_calls, .. } => {
                calls += llm_calls;
                proposals += 1;
            }
            Event::Migration { .. } => {}
            Event::IterationEnd {
                island,
                epoch,
                iteration,
                best_reward,
                ..
            } => {
                let b = island_best.entry(*island).or_insert(f64::NEG_INFINITY);
                *b = b.max(*best_reward);
                run_best = run_best.max(*best_reward);
                rows.push(BestRow {
                    epoch: *epoch,
                    island: *island,
                    iteration: *iteration,
                    best_reward: *best_reward,
                    island_best_so_far: *b,
                    run_best_so_far: run_best,
                    llm_calls: calls,
                    proposals,
                });
            }
            _ => {}
        }
    }
    rows
}
