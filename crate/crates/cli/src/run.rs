//! `run` and `resume`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use smc_search::events::{read_log, JsonlSink, RunEvent, RunSummary, TranscriptRecord};
use smc_search::Engine;

use crate::config::FileConfig;
use crate::diagnostics;
use crate::error::CliError;
use crate::rundir::{self, RunDir};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dry_run: bool,
    /// Stop after this many epochs without finishing (simulates a kill).
    pub stop_after_epochs: Option<usize>,
}

#[derive(Debug)]
pub enum RunOutcome {
    DryRun(Box<FileConfig>),
    Finished { dir: PathBuf, summary: RunSummary },
    Stopped { dir: PathBuf, epochs: usize },
}

type FileSink = JsonlSink<BufWriter<File>>;

fn open_sink(dir: &RunDir, append: bool) -> Result<FileSink, CliError> {
    let open = |name: &str| -> Result<BufWriter<File>, CliError> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(dir.path(name))?;
        Ok(BufWriter::new(f))
    };
    Ok(JsonlSink::new(open(rundir::EVENTS)?, open(rundir::TRANSCRIPTS)?))
}

pub fn cmd_run(config_path: &Path, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let mut cfg = FileConfig::load(config_path)?;
    if let Some(seed) = opts.seed {
        cfg.sampler.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| CliError::Config("no output_dir in the config and no --out given".into()))?;
    let dir = RunDir::new(out);
    if dir.has_log() {
        return Err(CliError::RunExists(dir.root.clone()));
    }
    // builds clients and reads key variables, so config problems surface here
    let comps = cfg.components(0)?;
    if opts.dry_run {
        return Ok(RunOutcome::DryRun(Box::new(cfg)));
    }
    rundir::ensure_dir(&dir.root)?;
    dir.write_json(rundir::CONFIG, &cfg)?;

    let result = (|| {
        let mut engine = Engine::new(cfg.sampler.clone(), comps)?
            .with_mode(cfg.exec)
            .with_timestamps(cfg.timestamps);
        let mut sink = open_sink(&dir, false)?;
        log::info!("run started in {}", dir.root.display());
        let threads = cfg.sampler.threads;
        smc_search::par::with_threads(threads, || engine.start(&mut sink, cfg.backend_description()))?;
        drive(&cfg, &dir, &mut engine, &mut sink, opts.stop_after_epochs)
    })();
    record_failure(&dir, result)
}

fn record_failure(dir: &RunDir, result: Result<RunOutcome, CliError>) -> Result<RunOutcome, CliError> {
    if let Err(e) = &result {
        if let Err(w) = dir.write_json(rundir::ERROR, &e.record()) {
            log::warn!("could not write {}: {w}", rundir::ERROR);
        }
    }
    result
}

fn drive(
    cfg: &FileConfig,
    dir: &RunDir,
    engine: &mut Engine,
    sink: &mut FileSink,
    stop_after: Option<usize>,
) -> Result<RunOutcome, CliError> {
    let done = engine.run_epochs(sink, stop_after)?;
    if !done {
        return Ok(RunOutcome::Stopped {
            dir: dir.root.clone(),
            epochs: engine.epoch(),
        });
    }
    let summary = engine.summary();
    write_reports(cfg, dir)?;
    log::info!("run finished after {} epochs", summary.epochs);
    Ok(RunOutcome::Finished {
        dir: dir.root.clone(),
        summary,
    })
}

/// Writes summary.json and diagnostics.json from the log on disk.
fn write_reports(cfg: &FileConfig, dir: &RunDir) -> Result<(), CliError> {
    let log = dir.read_events(false)?;
    dir.write_json(rundir::SUMMARY, &RunSummary::from_events(&log.events))?;
    dir.write_json(rundir::DIAGNOSTICS, &diagnostics::compute(cfg, &log.events))?;
    Ok(())
}

fn load_run_config(dir: &RunDir) -> Result<FileConfig, CliError> {
    let path = dir.path(rundir::CONFIG);
    let text = std::fs::read_to_string(&path).map_err(|_| CliError::NoCheckpoint)?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn cmd_resume(run_dir: &Path, stop_after_epochs: Option<usize>) -> Result<RunOutcome, CliError> {
    let dir = RunDir::new(run_dir);
    if !dir.root.is_dir() {
        return Err(CliError::MissingRun(dir.root.clone()));
    }
    if !dir.has_log() {
        return Err(CliError::NoCheckpoint);
    }
    let cfg = load_run_config(&dir)?;
    let log = dir.read_events(true)?;

    let restored = Engine::restore(cfg.components(0)?, &log.events)?;
    let keep = restored.keep_events;
    let mut engine = if has_budget(&cfg) {
        // rebuild with the budget that is left after the kept prefix
        let used = RunSummary::from_events(&log.events[..keep]).total_llm_calls;
        Engine::restore(cfg.components(used)?, &log.events[..keep])?.engine
    } else {
        restored.engine
    };
    engine = engine.with_mode(cfg.exec).with_timestamps(cfg.timestamps);

    if restored.finished {
        // already complete; only fill in reports a kill may have skipped
        if !dir.path(rundir::SUMMARY).is_file() || !dir.path(rundir::DIAGNOSTICS).is_file() {
            write_reports(&cfg, &dir)?;
        }
        return Ok(RunOutcome::Finished {
            dir: dir.root.clone(),
            summary: RunSummary::from_events(&log.events),
        });
    }
    truncate_log(&dir, &log.line_ends, keep, engine.next_seq())?;
    log::info!("resuming {} at seq {}", dir.root.display(), engine.next_seq());
    let mut sink = open_sink(&dir, true)?;
    let result = drive(&cfg, &dir, &mut engine, &mut sink, stop_after_epochs);
    record_failure(&dir, result)
}

fn has_budget(cfg: &FileConfig) -> bool {
    matches!(&cfg.backend, crate::config::BackendConfig::Llm(l) if l.budget.is_some())
}

/// Drops events past the checkpoint and transcripts that belong to them.
fn truncate_log(dir: &RunDir, line_ends: &[u64], keep: usize, next_seq: u64) -> Result<(), CliError> {
    let end = if keep == 0 { 0 } else { line_ends[keep - 1] };
    OpenOptions::new()
        .write(true)
        .open(dir.path(rundir::EVENTS))?
        .set_len(end)?;

    let path = dir.path(rundir::TRANSCRIPTS);
    if !path.is_file() {
        return Ok(());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(&path)?).lines() {
        let line = line?;
        match serde_json::from_str::<TranscriptRecord>(&line) {
            Ok(rec) if rec.seq < next_seq => {
                kept.extend_from_slice(line.as_bytes());
                kept.push(b'\n');
            }
            // later records and a torn tail are regenerated
            _ => break,
        }
    }
    let mut tmp = tempfile::NamedTempFile::new_in(&dir.root)?;
    tmp.write_all(&kept)?;
    tmp.persist(&path).map_err(|e| e.error)?;
    Ok(())
}

/// Events of a run directory (strict read).
pub fn load_events(run_dir: &Path) -> Result<Vec<RunEvent>, CliError> {
    let dir = RunDir::new(run_dir);
    if !dir.root.is_dir() {
        return Err(CliError::MissingRun(dir.root.clone()));
    }
    let f = File::open(dir.path(rundir::EVENTS)).map_err(|_| CliError::MissingRun(dir.path(rundir::EVENTS)))?;
    Ok(read_log(BufReader::new(f), false)?.events)
}
