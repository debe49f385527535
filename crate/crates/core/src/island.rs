//! The sampler's main loop: per-island SMC iterations, inter-island
//! migration, and restoring an engine from its own event log.
//!
//! One epoch runs one iteration on every island that has not terminated
//! (islands in parallel, chains within an island in parallel), then emits
//! the events of each island in island order, then migrates every
//! `migration_interval` epochs. All randomness comes from streams keyed by
//! `(island, iteration, particle)`, so the log does not depend on the
//! thread count or on whether the run was resumed.

use std::collections::HashMap;
use std::io;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::archive::{Archive, ArchiveEntry, EmbeddingProvider, NgramEmbedding};
use crate::eval::{EvalFailure, Evaluation, Evaluator};
use crate::events::{stamp, Event, EventSink, IslandCheckpoint, MigrationMove, RunEvent, RunSummary, SummaryBuilder};
use crate::mutate::{mh_chain, thompson_update, ChainEnv, ChainRngs, KernelStats, Prior, ProposalKernel, Transcript};
use crate::par::{map_indexed, with_threads, ExecMode};
use crate::resample::{compute_weights, systematic_resample};
use crate::rng::{stream, Purpose};
use crate::schedule::{advance, ess, next_lambda, ScheduleError, BISECTION_TOL};
use crate::types::{AcceptanceMode, AnnealState, ConfigError, Particle, RewardValue, RunConfig};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("island {island}: every initial evaluation failed")]
    InitFailure { island: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("full_ratio acceptance needs a kernel and prior with known densities")]
    DensityUnavailable,
    #[error("event log io: {0}")]
    Io(#[from] io::Error),
    #[error("no checkpoint to resume from")]
    NoCheckpoint,
    #[error("cannot restore: {0}")]
    Restore(String),
}

/// The pluggable parts of a run.
#[derive(Clone)]
pub struct Components {
    pub kernel: Arc<dyn ProposalKernel>,
    pub prior: Arc<dyn Prior>,
    pub evaluator: Arc<dyn Evaluator>,
    pub embedding: Arc<dyn EmbeddingProvider>,
    pub task_description: String,
}

impl Components {
    pub fn new(kernel: Arc<dyn ProposalKernel>, prior: Arc<dyn Prior>, evaluator: Arc<dyn Evaluator>) -> Self {
        Components {
            kernel,
            prior,
            evaluator,
            embedding: Arc::new(NgramEmbedding::default()),
            task_description: String::new(),
        }
    }
}

pub struct IslandState {
    pub island_id: usize,
    pub particles: Vec<Particle>,
    pub anneal: AnnealState,
    pub kernel_stats: KernelStats,
    pub archive: Archive,
    /// `lambda_t` for `t = 0..=anneal.iteration`.
    pub lambdas: Vec<f64>,
}

impl IslandState {
    pub fn checkpoint(&self) -> IslandCheckpoint {
        IslandCheckpoint {
            island: self.island_id,
            particles: self.particles.clone(),
            anneal: self.anneal,
            kernel_stats: self.kernel_stats,
            lambdas: self.lambdas.clone(),
        }
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.reward.value).collect()
    }

    pub fn best_reward(&self) -> f64 {
        self.rewards().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean_reward(&self) -> f64 {
        let r = self.rewards();
        r.iter().sum::<f64>() / r.len() as f64
    }

    fn from_checkpoint(c: &IslandCheckpoint, archive: Archive) -> Self {
        IslandState {
            island_id: c.island,
            particles: c.particles.clone(),
            anneal: c.anneal,
            kernel_stats: c.kernel_stats,
            archive,
            lambdas: c.lambdas.clone(),
        }
    }
}

type Emitted = Vec<(Event, Option<Transcript>)>;

fn failure_text(f: &Option<EvalFailure>) -> Option<String> {
    f.as_ref().map(|f| serde_json::to_string(f).unwrap_or_default())
}

/// Draws and evaluates the `N` initial particles of one island.
///
/// Identical programs are evaluated once when the evaluator is deterministic.
pub fn init_island(
    config: &RunConfig,
    comps: &Components,
    island_id: usize,
    mode: ExecMode,
) -> Result<(IslandState, Emitted), EngineError> {
    let n = config.particles_per_island;
    let programs: Vec<_> = (0..n)
        .map(|i| {
            comps
                .prior
                .sample(i, &mut stream(config.seed, Purpose::Init, island_id, 0, i))
        })
        .collect();

    let deterministic = comps.evaluator.is_deterministic();
    let mut unique: Vec<usize> = Vec::new();
    let mut slot_of: Vec<usize> = Vec::with_capacity(n);
    let mut seen: HashMap<_, usize> = HashMap::new();
    for (i, p) in programs.iter().enumerate() {
        let slot = if deterministic {
            *seen.entry(p.digest()).or_insert_with(|| {
                unique.push(i);
                unique.len() - 1
            })
        } else {
            unique.push(i);
            unique.len() - 1
        };
        slot_of.push(slot);
    }
    let evaluations: Vec<Evaluation> =
        map_indexed(mode, unique.len(), |u| comps.evaluator.evaluate(&programs[unique[u]]));

    let mut archive = Archive::with_provider(comps.embedding.clone());
    let mut particles = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    for (i, program) in programs.into_iter().enumerate() {
        let ev = &evaluations[slot_of[i]];
        events.push((
            Event::InitParticle {
                island: island_id,
                index: i,
                program: program.clone(),
                reward: ev.reward.value,
                valid: ev.reward.valid,
                failure: failure_text(&ev.failure),
            },
            None,
        ));
        archive.record(ArchiveEntry {
            program: program.clone(),
            reward: ev.reward,
            iteration: 0,
            kernel: None,
            accepted: true,
            island_id,
        });
        particles.push(Particle::new(program, ev.reward, 0, island_id));
    }
    if particles.iter().all(|p| !p.reward.valid) {
        return Err(EngineError::InitFailure { island: island_id });
    }
    let state = IslandState {
        island_id,
        particles,
        anneal: AnnealState::start(config.beta),
        kernel_stats: KernelStats::default(),
        archive,
        lambdas: vec![0.0],
    };
    Ok((state, events))
}

/// One SMC iteration: choose `lambda_t`, reweight, resample, mutate with
/// `K`-step MH chains, archive every proposal, advance the schedule.
pub fn run_iteration(
    state: &mut IslandState,
    config: &RunConfig,
    comps: &Components,
    epoch: usize,
    mode: ExecMode,
) -> Result<Emitted, EngineError> {
    let island = state.island_id;
    let t = state.anneal.iteration + 1;
    let rewards = state.rewards();
    let lambda_prev = state.anneal.lambda;
    let forced = t >= config.max_iterations;
    let lambda = if forced {
        1.0
    } else {
        next_lambda(
            &rewards,
            &state.anneal,
            config.kappa,
            config.min_iterations,
            BISECTION_TOL,
        )?
    };
    let delta_beta = (lambda - lambda_prev) * config.beta;
    let beta_t = lambda * config.beta;
    let ess_value = ess(&rewards, lambda_prev, lambda, config.beta)?;

    let weights = compute_weights(&rewards, delta_beta)?;
    let ancestors = systematic_resample(&weights, &mut stream(config.seed, Purpose::Resample, island, t, 0));

    let mut events: Emitted = vec![
        (
            Event::IterationStart {
                island,
                epoch,
                iteration: t,
                lambda_prev,
                lambda,
                delta_beta,
                beta_t,
                ess: ess_value,
                forced,
            },
            None,
        ),
        (
            Event::Weights {
                island,
                iteration: t,
                rewards: rewards.clone(),
                normalized: weights.normalized.clone(),
            },
            None,
        ),
        (
            Event::Resample {
                island,
                iteration: t,
                ancestors: ancestors.indices.clone(),
            },
            None,
        ),
    ];

    let use_archive = config.top_k_inspiration + config.diverse_inspirations > 0;
    let env = ChainEnv {
        kernel: comps.kernel.as_ref(),
        prior: comps.prior.as_ref(),
        evaluator: comps.evaluator.as_ref(),
        archive: use_archive.then_some(&state.archive),
        top_k: config.top_k_inspiration,
        diverse_m: config.diverse_inspirations,
        selection: config.kernel_selection,
        acceptance: config.acceptance_mode,
        stats: state.kernel_stats,
        iteration: t,
        beta_t,
        reward_floor: config.reward_floor,
        task_description: &comps.task_description,
    };
    let particles = &state.particles;
    let outcomes = map_indexed(mode, particles.len(), |i| {
        let a = ancestors.indices[i];
        let mut parent = particles[a].clone();
        parent.lineage_id = parent.program.digest();
        let mut rngs = ChainRngs {
            thompson: stream(config.seed, Purpose::Thompson, island, t, i),
            proposal: stream(config.seed, Purpose::Proposal, island, t, i),
            accept: stream(config.seed, Purpose::Accept, island, t, i),
        };
        mh_chain(&parent, config.n_proposals, &env, &mut rngs)
    });

    let mut stats = state.kernel_stats;
    let mut next = Vec::with_capacity(outcomes.len());
    let mut entries = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let a = ancestors.indices[i];
        for r in outcome.records {
            stats = thompson_update(&stats, r.kernel_id, r.success);
            if let Some(c) = &r.candidate {
                entries.push(ArchiveEntry {
                    program: c.clone(),
                    reward: r.reward.unwrap_or(RewardValue::invalid(config.reward_floor)),
                    iteration: t,
                    kernel: Some(r.kernel_id),
                    accepted: r.accepted,
                    island_id: island,
                });
            }
            events.push((
                Event::Proposal {
                    island,
                    iteration: t,
                    particle: i,
                    ancestor: a,
                    ancestor_weight: weights.normalized[a],
                    step: r.step,
                    requested_kernel: r.requested_kernel,
                    kernel: r.kernel_id,
                    parent: r.current.digest(),
                    parent_reward: r.current_reward.value,
                    candidate: r.candidate,
                    reward: r.reward.map(|v| v.value),
                    valid: r.reward.map(|v| v.valid),
                    accept_prob: r.accept_prob,
                    accepted: r.accepted,
                    parse_ok: r.parse_ok,
                    success: r.success,
                    failure: r.failure,
                    llm_calls: r.llm_calls,
                    n_inspirations: r.n_inspirations,
                },
                r.transcript,
            ));
        }
        next.push(outcome.particle);
    }
    for e in entries {
        state.archive.record(e);
    }
    state.particles = next;
    state.kernel_stats = stats;
    state.anneal = advance(&state.anneal, lambda)?;
    state.lambdas.push(lambda);

    events.push((
        Event::IterationEnd {
            island,
            epoch,
            iteration: t,
            best_reward: state.best_reward(),
            mean_reward: state.mean_reward(),
            checkpoint: state.checkpoint(),
        },
        None,
    ));
    Ok(events)
}

/// Order used for migration and truncation: higher reward first, then
/// older birth, then original position.
fn rank(particles: &[Particle]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..particles.len()).collect();
    idx.sort_by(|&a, &b| {
        particles[b]
            .reward
            .value
            .total_cmp(&particles[a].reward.value)
            .then(particles[a].born_iteration.cmp(&particles[b].born_iteration))
            .then(a.cmp(&b))
    });
    idx
}

/// Each island sends copies of its top `m` particles to one uniformly
/// chosen other island; every island then keeps the top `N` of the union.
pub fn migrate<R: Rng + ?Sized>(islands: &mut [IslandState], m: usize, rng: &mut R) -> Vec<MigrationMove> {
    let n_islands = islands.len();
    if m == 0 {
        return Vec::new();
    }
    if n_islands < 2 {
        log::warn!("migration with a single island is a no-op");
        return Vec::new();
    }
    let mut moves = Vec::with_capacity(n_islands);
    let mut inbox: Vec<Vec<Particle>> = vec![Vec::new(); n_islands];
    for (i, isl) in islands.iter().enumerate() {
        let r = rng.random_range(0..n_islands - 1);
        let to = if r >= i { r + 1 } else { r };
        let top: Vec<Particle> = rank(&isl.particles)
            .into_iter()
            .take(m)
            .map(|k| isl.particles[k].clone())
            .collect();
        moves.push(MigrationMove {
            from: i,
            to,
            digests: top.iter().map(|p| p.program.digest()).collect(),
            rewards: top.iter().map(|p| p.reward.value).collect(),
        });
        inbox[to].extend(top);
    }
    for (isl, incoming) in islands.iter_mut().zip(inbox) {
        let n = isl.particles.len();
        let id = isl.island_id;
        isl.particles.extend(incoming.into_iter().map(|mut p| {
            p.island_id = id;
            p
        }));
        let keep: Vec<Particle> = rank(&isl.particles)
            .into_iter()
            .take(n)
            .map(|k| isl.particles[k].clone())
            .collect();
        isl.particles = keep;
    }
    moves
}

/// Result of restoring an engine from a log.
pub struct Restored {
    pub engine: Engine,
    /// Events up to and including the last consistent checkpoint.
    pub keep_events: usize,
    pub finished: bool,
}

pub struct Engine {
    config: RunConfig,
    comps: Components,
    islands: Vec<IslandState>,
    epoch: usize,
    mode: ExecMode,
    timestamps: bool,
    next_seq: u64,
    summary: SummaryBuilder,
    finished: bool,
}

impl Engine {
    pub fn new(config: RunConfig, comps: Components) -> Result<Self, EngineError> {
        config.validate()?;
        if config.acceptance_mode == AcceptanceMode::FullRatio && !comps.kernel.has_density() {
            return Err(EngineError::DensityUnavailable);
        }
        if config.n_islands < 2 && config.migration_size > 0 {
            log::warn!("single island: migration disabled");
        }
        Ok(Engine {
            config,
            comps,
            islands: Vec::new(),
            epoch: 0,
            mode: ExecMode::default(),
            timestamps: false,
            next_seq: 0,
            summary: SummaryBuilder::default(),
            finished: false,
        })
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_timestamps(mut self, on: bool) -> Self {
        self.timestamps = on;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn islands(&self) -> &[IslandState] {
        &self.islands
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn summary(&self) -> RunSummary {
        self.summary.finish()
    }

    pub fn llm_calls(&self) -> usize {
        self.summary.total_llm_calls()
    }

    fn emit(&mut self, sink: &mut dyn EventSink, event: Event, transcript: Option<&Transcript>) -> io::Result<()> {
        self.summary.absorb(&event);
        sink.record(&stamp(event, self.next_seq, self.timestamps), transcript)?;
        self.next_seq += 1;
        Ok(())
    }

    /// Emits `run_start` and initialises every island.
    pub fn start(&mut self, sink: &mut dyn EventSink, backend: serde_json::Value) -> Result<(), EngineError> {
        let config = self.config.clone();
        self.emit(
            sink,
            Event::RunStart {
                config: config.clone(),
                backend,
            },
            None,
        )?;
        let (comps, mode) = (&self.comps, self.mode);
        let inits = map_indexed(mode, config.n_islands, |i| init_island(&config, comps, i, mode));
        for init in inits {
            let (state, events) = init?;
            if config.acceptance_mode == AcceptanceMode::FullRatio
                && state
                    .particles
                    .iter()
                    .any(|p| self.comps.prior.density(&p.program).is_none())
            {
                return Err(EngineError::DensityUnavailable);
            }
            for (e, t) in events {
                self.emit(sink, e, t.as_ref())?;
            }
            self.islands.push(state);
        }
        sink.flush()?;
        Ok(())
    }

    /// Runs one epoch. Returns `true` once the run has ended.
    pub fn step_epoch(&mut self, sink: &mut dyn EventSink) -> Result<bool, EngineError> {
        if self.finished {
            return Ok(true);
        }
        if self.islands.iter().all(|i| i.anneal.terminated) {
            self.finish(sink)?;
            return Ok(true);
        }
        let epoch = self.epoch + 1;
        let (config, comps, mode) = (&self.config, &self.comps, self.mode);
        let mut islands = std::mem::take(&mut self.islands);
        let results = {
            let slots: Vec<std::sync::Mutex<&mut IslandState>> =
                islands.iter_mut().map(std::sync::Mutex::new).collect();
            map_indexed(mode, slots.len(), |i| {
                let mut isl = slots[i].lock().expect("island lock");
                if isl.anneal.terminated {
                    Ok(Vec::new())
                } else {
                    run_iteration(&mut isl, config, comps, epoch, mode)
                }
            })
        };
        self.islands = islands;
        for r in results {
            for (e, t) in r? {
                self.emit(sink, e, t.as_ref())?;
            }
        }
        self.epoch = epoch;

        let all_done = self.islands.iter().all(|i| i.anneal.terminated);
        if !all_done && self.migration_due(epoch) {
            let mut rng = stream(self.config.seed, Purpose::Migration, 0, epoch, 0);
            let moves = migrate(&mut self.islands, self.config.migration_size, &mut rng);
            let checkpoints = self.islands.iter().map(|i| i.checkpoint()).collect();
            self.emit(
                sink,
                Event::Migration {
                    epoch,
                    moves,
                    checkpoints,
                },
                None,
            )?;
        }
        sink.flush()?;
        if all_done {
            self.finish(sink)?;
        }
        Ok(self.finished)
    }

    fn migration_due(&self, epoch: usize) -> bool {
        self.config.n_islands >= 2
            && self.config.migration_size > 0
            && epoch.is_multiple_of(self.config.migration_interval)
    }

    fn finish(&mut self, sink: &mut dyn EventSink) -> Result<(), EngineError> {
        let summary = self.summary.finish();
        self.emit(sink, Event::RunEnd { summary }, None)?;
        sink.flush()?;
        self.finished = true;
        Ok(())
    }

    /// Runs to termination (or for at most `max_epochs` more epochs).
    pub fn run_epochs(&mut self, sink: &mut dyn EventSink, max_epochs: Option<usize>) -> Result<bool, EngineError> {
        let threads = self.config.threads;
        with_threads(threads, || {
            let mut done = self.finished;
            let mut n = 0;
            while !done && max_epochs.is_none_or(|m| n < m) {
                done = self.step_epoch(sink)?;
                n += 1;
            }
            Ok(done)
        })
    }

    /// Starts and runs a fresh engine to termination.
    pub fn run(&mut self, sink: &mut dyn EventSink, backend: serde_json::Value) -> Result<RunSummary, EngineError> {
        let threads = self.config.threads;
        with_threads(threads, || self.start(sink, backend))?;
        self.run_epochs(sink, None)?;
        Ok(self.summary())
    }

    /// Rebuilds an engine from a log prefix.
    ///
    /// The resume point is the last event that closes an epoch: initialisation
    /// of every island, the final `iteration_end` of an epoch without
    /// migration, or a `migration`. Events after it are discarded by the
    /// caller and regenerated.
    pub fn restore(comps: Components, events: &[RunEvent]) -> Result<Restored, EngineError> {
        let Some(Event::RunStart { config, .. }) = events.first().map(|e| &e.event) else {
            return Err(EngineError::NoCheckpoint);
        };
        let config = config.clone();
        let n_islands = config.n_islands;
        let n = config.particles_per_island;
        let mut engine = Engine::new(config.clone(), comps)?;

        let mut inits: Vec<Vec<Particle>> = vec![Vec::new(); n_islands];
        let mut archive_log: Vec<(u64, ArchiveEntry)> = Vec::new();
        let mut pending: Vec<Option<IslandCheckpoint>> = vec![None; n_islands];
        let mut committed: Option<(usize, Vec<IslandCheckpoint>, u64)> = None;
        let mut epoch_seen: Vec<bool> = vec![false; n_islands];
        let mut finished = false;

        for ev in &events[1..] {
            match &ev.event {
                Event::InitParticle {
                    island,
                    program,
                    reward,
                    valid,
                    ..
                } => {
                    let rv = RewardValue {
                        value: *reward,
                        valid: *valid,
                    };
                    archive_log.push((
                        ev.seq,
                        ArchiveEntry {
                            program: program.clone(),
                            reward: rv,
                            iteration: 0,
                            kernel: None,
                            accepted: true,
                            island_id: *island,
                        },
                    ));
                    inits[*island].push(Particle::new(program.clone(), rv, 0, *island));
                    if inits.iter().all(|p| p.len() == n) {
                        let cps: Vec<IslandCheckpoint> = inits
                            .iter()
                            .enumerate()
                            .map(|(i, ps)| IslandCheckpoint {
                                island: i,
                                particles: ps.clone(),
                                anneal: AnnealState::start(config.beta),
                                kernel_stats: KernelStats::default(),
                                lambdas: vec![0.0],
                            })
                            .collect();
                        pending = cps.iter().cloned().map(Some).collect();
                        committed = Some((0, cps, ev.seq));
                    }
                }
                Event::Proposal {
                    island,
                    iteration,
                    kernel,
                    candidate: Some(c),
                    reward,
                    valid,
                    accepted,
                    ..
                } => archive_log.push((
                    ev.seq,
                    ArchiveEntry {
                        program: c.clone(),
                        reward: match (reward, valid) {
                            (Some(r), Some(v)) => RewardValue { value: *r, valid: *v },
                            _ => RewardValue::invalid(config.reward_floor),
                        },
                        iteration: *iteration,
                        kernel: Some(*kernel),
                        accepted: *accepted,
                        island_id: *island,
                    },
                )),
                Event::IterationEnd {
                    island,
                    epoch,
                    checkpoint,
                    ..
                } => {
                    let Some((base_epoch, base, _)) = &committed else {
                        return Err(EngineError::Restore("iteration before initialisation".into()));
                    };
                    if *epoch != base_epoch + 1 {
                        return Err(EngineError::Restore(format!("unexpected epoch {epoch}")));
                    }
                    pending[*island] = Some(checkpoint.clone());
                    epoch_seen[*island] = true;
                    let active: Vec<usize> = base.iter().filter(|c| !c.anneal.terminated).map(|c| c.island).collect();
                    if active.iter().all(|i| epoch_seen[*i]) {
                        let cps: Vec<IslandCheckpoint> = pending.iter().flatten().cloned().collect();
                        let all_done = cps.iter().all(|c| c.anneal.terminated);
                        if all_done || !engine.migration_due(*epoch) {
                            committed = Some((*epoch, cps, ev.seq));
                            epoch_seen = vec![false; n_islands];
                        }
                    }
                }
                Event::Migration { epoch, checkpoints, .. } => {
                    pending = checkpoints.iter().cloned().map(Some).collect();
                    committed = Some((*epoch, checkpoints.clone(), ev.seq));
                    epoch_seen = vec![false; n_islands];
                }
                Event::RunEnd { .. } => finished = true,
                _ => {}
            }
        }

        let Some((epoch, checkpoints, last_seq)) = committed else {
            return Err(EngineError::NoCheckpoint);
        };
        let keep_events = if finished {
            events.len()
        } else {
            events
                .iter()
                .position(|e| e.seq == last_seq)
                .expect("committed seq present")
                + 1
        };

        let mut archives: Vec<Archive> = (0..n_islands)
            .map(|_| Archive::with_provider(engine.comps.embedding.clone()))
            .collect();
        for (seq, entry) in archive_log {
            if seq <= last_seq {
                archives[entry.island_id].record(entry);
            }
        }
        engine.islands = checkpoints
            .iter()
            .zip(archives)
            .map(|(c, a)| IslandState::from_checkpoint(c, a))
            .collect();
        engine.epoch = epoch;
        for e in &events[..keep_events] {
            engine.summary.absorb(&e.event);
        }
        engine.next_seq = events[keep_events - 1].seq + 1;
        engine.finished = finished;
        Ok(Restored {
            engine,
            keep_events,
            finished,
        })
    }
}
