//! The append-only run log.
//!
//! One [`RunEvent`] per line, schema-versioned, with gapless sequence
//! numbers. Every field needed to resume a run or redraw its plots is in
//! the log; wall time is optional so that logs can be byte-identical.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mutate::{KernelStats, Transcript};
use crate::types::{AnnealState, Digest, KernelId, Particle, Program, RunConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub v: u32,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
    #[serde(flatten)]
    pub event: Event,
}

/// Island state at an iteration or migration boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IslandCheckpoint {
    pub island: usize,
    pub particles: Vec<Particle>,
    pub anneal: AnnealState,
    pub kernel_stats: KernelStats,
    /// `lambda_t` for every completed iteration, starting at 0.
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MigrationMove {
    pub from: usize,
    pub to: usize,
    pub digests: Vec<Digest>,
    pub rewards: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    RunStart {
        config: RunConfig,
        /// Free-form description of the proposal/evaluation backends.
        backend: serde_json::Value,
    },
    InitParticle {
        island: usize,
        index: usize,
        program: Program,
        reward: f64,
        valid: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        failure: Option<String>,
    },
    IterationStart {
        island: usize,
        epoch: usize,
        iteration: usize,
        lambda_prev: f64,
        lambda: f64,
        delta_beta: f64,
        beta_t: f64,
        ess: f64,
        /// True when `max_iterations` forced the endpoint.
        forced: bool,
    },
    Weights {
        island: usize,
        iteration: usize,
        rewards: Vec<f64>,
        normalized: Vec<f64>,
    },
    Resample {
        island: usize,
        iteration: usize,
        ancestors: Vec<usize>,
    },
    Proposal {
        island: usize,
        iteration: usize,
        particle: usize,
        ancestor: usize,
        /// Normalised resampling weight of the ancestor.
        ancestor_weight: f64,
        step: usize,
        requested_kernel: KernelId,
        kernel: KernelId,
        parent: Digest,
        parent_reward: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        candidate: Option<Program>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reward: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        valid: Option<bool>,
        accept_prob: f64,
        accepted: bool,
        parse_ok: bool,
        success: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        failure: Option<String>,
        llm_calls: usize,
        n_inspirations: usize,
    },
    IterationEnd {
        island: usize,
        epoch: usize,
        iteration: usize,
        best_reward: f64,
        mean_reward: f64,
        checkpoint: IslandCheckpoint,
    },
    Migration {
        epoch: usize,
        moves: Vec<MigrationMove>,
        checkpoints: Vec<IslandCheckpoint>,
    },
    RunEnd {
        summary: RunSummary,
    },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::RunStart { .. } => "run_start",
            Event::InitParticle { .. } => "init_particle",
            Event::IterationStart { .. } => "iteration_start",
            Event::Weights { .. } => "weights",
            Event::Resample { .. } => "resample",
            Event::Proposal { .. } => "proposal",
            Event::IterationEnd { .. } => "iteration_end",
            Event::Migration { .. } => "migration",
            Event::RunEnd { .. } => "run_end",
        }
    }
}

/// Best program found by a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestProgram {
    pub island: usize,
    pub iteration: usize,
    pub reward: f64,
    pub program: Program,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IslandSummary {
    pub island: usize,
    pub lambdas: Vec<f64>,
    pub iterations: usize,
    pub terminated: bool,
    pub best_reward: f64,
    pub mean_reward: f64,
}

/// End-of-run report, computed purely from the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best: Option<BestProgram>,
    /// Chat requests across all proposals. Initialisation draws from the
    /// seed program and issues none; if a prior did, they would be counted.
    pub total_llm_calls: usize,
    pub total_proposals: usize,
    pub accepted_proposals: usize,
    pub epochs: usize,
    pub islands: Vec<IslandSummary>,
    pub kernel_selections: BTreeMap<KernelId, usize>,
}

impl RunSummary {
    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a RunEvent>) -> RunSummary {
        let mut b = SummaryBuilder::default();
        for e in events {
            b.absorb(&e.event);
        }
        b.finish()
    }
}

/// Incremental [`RunSummary`] over a stream of events.
#[derive(Clone, Debug, Default)]
pub struct SummaryBuilder {
    best: Option<BestProgram>,
    total_llm_calls: usize,
    total_proposals: usize,
    accepted_proposals: usize,
    epochs: usize,
    islands: BTreeMap<usize, IslandSummary>,
    kernel_selections: BTreeMap<KernelId, usize>,
}

impl SummaryBuilder {
    fn consider(&mut self, island: usize, iteration: usize, reward: f64, program: &Program) {
        if self.best.as_ref().is_none_or(|b| reward > b.reward) {
            self.best = Some(BestProgram {
                island,
                iteration,
                reward,
                program: program.clone(),
            });
        }
    }

    fn checkpoint(&mut self, c: &IslandCheckpoint) {
        let rewards: Vec<f64> = c.particles.iter().map(|p| p.reward.value).collect();
        self.islands.insert(
            c.island,
            IslandSummary {
                island: c.island,
                lambdas: c.lambdas.clone(),
                iterations: c.anneal.iteration,
                terminated: c.anneal.terminated,
                best_reward: rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_reward: rewards.iter().sum::<f64>() / rewards.len().max(1) as f64,
            },
        );
    }

    pub fn absorb(&mut self, event: &Event) {
        match event {
            Event::InitParticle {
                island,
                program,
                reward,
                valid: true,
                ..
            } => self.consider(*island, 0, *reward, program),
            Event::Proposal {
                island,
                iteration,
                kernel,
                candidate,
                reward,
                valid,
                accepted,
                llm_calls,
                ..
            } => {
                self.total_proposals += 1;
                self.total_llm_calls += llm_calls;
                self.accepted_proposals += usize::from(*accepted);
                *self.kernel_selections.entry(*kernel).or_default() += 1;
                if let (Some(c), Some(r), Some(true)) = (candidate, reward, valid) {
                    self.consider(*island, *iteration, *r, c);
                }
            }
            Event::IterationEnd { epoch, checkpoint, .. } => {
                self.epochs = self.epochs.max(*epoch);
                self.checkpoint(checkpoint);
            }
            Event::Migration { checkpoints, .. } => {
                for c in checkpoints {
                    self.checkpoint(c);
                }
            }
            _ => {}
        }
    }

    pub fn total_llm_calls(&self) -> usize {
        self.total_llm_calls
    }

    pub fn finish(&self) -> RunSummary {
        let mut kernel_selections: BTreeMap<KernelId, usize> = KernelId::ALL.iter().map(|k| (*k, 0)).collect();
        kernel_selections.extend(self.kernel_selections.iter().map(|(k, v)| (*k, *v)));
        RunSummary {
            best: self.best.clone(),
            total_llm_calls: self.total_llm_calls,
            total_proposals: self.total_proposals,
            accepted_proposals: self.accepted_proposals,
            epochs: self.epochs,
            islands: self.islands.values().cloned().collect(),
            kernel_selections,
        }
    }
}

/// Transcript line written next to the event log, keyed by proposal `seq`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub seq: u64,
    pub island: usize,
    pub iteration: usize,
    pub particle: usize,
    pub step: usize,
    #[serde(flatten)]
    pub transcript: Transcript,
}

pub trait EventSink: Send {
    fn record(&mut self, event: &RunEvent, transcript: Option<&Transcript>) -> io::Result<()>;

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl EventSink for NullSink {
    fn record(&mut self, _event: &RunEvent, _transcript: Option<&Transcript>) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Default)]
pub struct MemorySink {
    pub events: Vec<RunEvent>,
    pub transcripts: Vec<TranscriptRecord>,
}

impl EventSink for MemorySink {
    fn record(&mut self, event: &RunEvent, transcript: Option<&Transcript>) -> io::Result<()> {
        if let (
            Some(t),
            Event::Proposal {
                island,
                iteration,
                particle,
                step,
                ..
            },
        ) = (transcript, &event.event)
        {
            self.transcripts.push(TranscriptRecord {
                seq: event.seq,
                island: *island,
                iteration: *iteration,
                particle: *particle,
                step: *step,
                transcript: t.clone(),
            });
        }
        self.events.push(event.clone());
        Ok(())
    }
}

/// Writes JSON lines to an event stream and a transcript stream.
pub struct JsonlSink<W: Write + Send> {
    events: W,
    transcripts: W,
}

impl<W: Write + Send> JsonlSink<W> {
    pub fn new(events: W, transcripts: W) -> Self {
        JsonlSink { events, transcripts }
    }
}

impl<W: Write + Send> EventSink for JsonlSink<W> {
    fn record(&mut self, event: &RunEvent, transcript: Option<&Transcript>) -> io::Result<()> {
        serde_json::to_writer(&mut self.events, event)?;
        self.events.write_all(b"\n")?;
        if let (
            Some(t),
            Event::Proposal {
                island,
                iteration,
                particle,
                step,
                ..
            },
        ) = (transcript, &event.event)
        {
            let rec = TranscriptRecord {
                seq: event.seq,
                island: *island,
                iteration: *iteration,
                particle: *particle,
                step: *step,
                transcript: t.clone(),
            };
            serde_json::to_writer(&mut self.transcripts, &rec)?;
            self.transcripts.write_all(b"\n")?;
        }
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.events.flush()?;
        self.transcripts.flush()
    }
}

/// Wraps an event with the schema version, a sequence number and, if
/// requested, the current wall time.
pub fn stamp(event: Event, seq: u64, timestamps: bool) -> RunEvent {
    let wall_ms = timestamps.then(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    });
    RunEvent {
        v: SCHEMA_VERSION,
        seq,
        wall_ms,
        event,
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt log at line {line}: {reason} (last good seq: {last_good_seq:?})")]
    Corrupt {
        line: usize,
        reason: String,
        last_good_seq: Option<u64>,
    },
}

impl LogError {
    pub fn last_good_seq(&self) -> Option<u64> {
        match self {
            LogError::Corrupt { last_good_seq, .. } => *last_good_seq,
            LogError::Io(_) => None,
        }
    }
}

/// Parsed log plus the byte length of its valid prefix.
#[derive(Debug)]
pub struct ParsedLog {
    pub events: Vec<RunEvent>,
    /// Byte offset just past each event's line.
    pub line_ends: Vec<u64>,
    pub valid_bytes: u64,
    /// A trailing line without newline that failed to parse, if any.
    pub torn_tail: bool,
}

/// Reads a JSONL event log, checking schema and gapless numbering.
///
/// With `allow_torn_tail`, an unterminated final line that does not parse
/// (a write interrupted by a kill) is dropped instead of reported.
pub fn read_log<R: BufRead>(reader: R, allow_torn_tail: bool) -> Result<ParsedLog, LogError> {
    let mut events: Vec<RunEvent> = Vec::new();
    let mut line_ends = Vec::new();
    let mut valid_bytes = 0u64;
    let mut torn_tail = false;
    let mut reader = reader;
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let last_good_seq = events.last().map(|e| e.seq);
        let terminated = buf.ends_with('\n');
        let corrupt = |reason: String| LogError::Corrupt {
            line: line_no,
            reason,
            last_good_seq,
        };
        let parsed: RunEvent = match serde_json::from_str(buf.trim_end()) {
            Ok(e) if terminated => e,
            Ok(_) | Err(_) if !terminated && allow_torn_tail => {
                torn_tail = true;
                break;
            }
            Ok(_) => return Err(corrupt("unterminated final line".into())),
            Err(e) => return Err(corrupt(e.to_string())),
        };
        if parsed.v != SCHEMA_VERSION {
            return Err(corrupt(format!("schema version {}", parsed.v)));
        }
        let expected = last_good_seq.map_or(0, |s| s + 1);
        if parsed.seq != expected {
            return Err(corrupt(format!(
                "sequence gap: expected {expected}, found {}",
                parsed.seq
            )));
        }
        valid_bytes += n as u64;
        line_ends.push(valid_bytes);
        events.push(parsed);
    }
    Ok(ParsedLog {
        events,
        line_ends,
        valid_bytes,
        torn_tail,
    })
}
