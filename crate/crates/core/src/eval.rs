//! Reward evaluation: the evaluator contract, an external-process evaluator
//! speaking a one-line JSON protocol, and a synthetic bitstring evaluator.
//!
//! Subprocess protocol: the program source is written to a file inside a
//! fresh temporary directory, the configured command is run with that
//! directory as its working directory and the file path substituted into its
//! arguments, and the last non-empty stdout line must be a JSON object
//! `{"reward": <finite number>}`. Anything else yields the reward floor.

use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::types::{Program, RewardValue};

/// Why an evaluation fell back to the reward floor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cause", content = "detail", rename_all = "snake_case")]
pub enum EvalFailure {
    SpawnError(String),
    Timeout,
    BadOutput(String),
    InvalidProgram(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub reward: RewardValue,
    pub failure: Option<EvalFailure>,
}

impl Evaluation {
    pub fn ok(value: f64, floor: f64) -> Self {
        let reward = RewardValue::checked(value, floor);
        let failure = (!reward.valid).then(|| EvalFailure::BadOutput(format!("non-finite reward {value}")));
        Evaluation { reward, failure }
    }

    pub fn failed(floor: f64, failure: EvalFailure) -> Self {
        Evaluation {
            reward: RewardValue::invalid(floor),
            failure: Some(failure),
        }
    }
}

/// Scores a program. Implementations never panic or error past this
/// boundary: failures become `RewardValue { floor, valid: false }`.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, program: &Program) -> Evaluation;

    fn is_deterministic(&self) -> bool {
        true
    }
}

impl<E: Evaluator + ?Sized> Evaluator for std::sync::Arc<E> {
    fn evaluate(&self, program: &Program) -> Evaluation {
        (**self).evaluate(program)
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

/// Reward = popcount / n_bits for programs that are exactly `n_bits`
/// characters of `0`/`1`. Bounds: R- = 0, R+ = 1.
#[derive(Clone, Debug)]
pub struct BitstringEvaluator {
    pub n_bits: usize,
    pub reward_floor: f64,
}

impl BitstringEvaluator {
    pub fn new(n_bits: usize) -> Self {
        BitstringEvaluator {
            n_bits,
            reward_floor: 0.0,
        }
    }
}

pub fn evaluate_bitstring(program: &Program, n_bits: usize, reward_floor: f64) -> Evaluation {
    let src = program.source().as_bytes();
    if n_bits == 0 || src.len() != n_bits || !src.iter().all(|b| *b == b'0' || *b == b'1') {
        return Evaluation::failed(
            reward_floor,
            EvalFailure::InvalidProgram(format!("expected {n_bits} binary digits")),
        );
    }
    let ones = src.iter().filter(|b| **b == b'1').count();
    Evaluation::ok(ones as f64 / n_bits as f64, reward_floor)
}

impl Evaluator for BitstringEvaluator {
    fn evaluate(&self, program: &Program) -> Evaluation {
        evaluate_bitstring(program, self.n_bits, self.reward_floor)
    }
}

fn default_args() -> Vec<String> {
    vec![PROGRAM_PLACEHOLDER.to_string()]
}

fn default_timeout() -> f64 {
    90.0
}

fn default_file_name() -> String {
    "program.txt".to_string()
}

fn default_env() -> Vec<String> {
    vec!["PATH".to_string(), "HOME".to_string(), "LANG".to_string()]
}

fn default_concurrency() -> usize {
    8
}

/// Substituted with the absolute path of the program file.
pub const PROGRAM_PLACEHOLDER: &str = "{program}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub command: String,
    #[serde(default = "default_args")]
    pub args: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub reward_floor: f64,
    /// Name of the file the program is written to.
    #[serde(default = "default_file_name")]
    pub file_name: String,
    /// Environment variables passed through to the evaluator.
    #[serde(default = "default_env")]
    pub env_allow: Vec<String>,
    /// Files copied into the scratch directory before each evaluation.
    #[serde(default)]
    pub support_files: Vec<PathBuf>,
    #[serde(default = "default_concurrency")]
    pub max_concurrent: usize,
}

impl EvalSpec {
    pub fn new(command: impl Into<String>) -> Self {
        EvalSpec {
            command: command.into(),
            args: default_args(),
            timeout_secs: default_timeout(),
            reward_floor: 0.0,
            file_name: default_file_name(),
            env_allow: default_env(),
            support_files: Vec::new(),
            max_concurrent: default_concurrency(),
        }
    }
}

/// Runs an external command per program.
pub struct SubprocessEvaluator {
    spec: EvalSpec,
    slots: Mutex<usize>,
    freed: Condvar,
}

impl SubprocessEvaluator {
    pub fn new(spec: EvalSpec) -> Self {
        let slots = spec.max_concurrent.max(1);
        SubprocessEvaluator {
            spec,
            slots: Mutex::new(slots),
            freed: Condvar::new(),
        }
    }

    pub fn spec(&self) -> &EvalSpec {
        &self.spec
    }

    fn acquire(&self) {
        let mut free = self.slots.lock().unwrap();
        while *free == 0 {
            free = self.freed.wait(free).unwrap();
        }
        *free -= 1;
    }

    fn release(&self) {
        *self.slots.lock().unwrap() += 1;
        self.freed.notify_one();
    }
}

impl Evaluator for SubprocessEvaluator {
    fn evaluate(&self, program: &Program) -> Evaluation {
        self.acquire();
        let out = evaluate_subprocess(program, &self.spec);
        self.release();
        out
    }
}

/// Parses the protocol's result line.
pub fn parse_reward_line(stdout: &str) -> Result<f64, String> {
    let line = stdout
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or_else(|| "no output".to_string())?;
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("{e}: {line}"))?;
    let reward = value
        .as_object()
        .and_then(|o| o.get("reward"))
        .and_then(serde_json::Value::as_f64)
        .ok_or_else(|| format!("missing numeric reward: {line}"))?;
    if reward.is_finite() {
        Ok(reward)
    } else {
        Err(format!("non-finite reward: {line}"))
    }
}

pub fn evaluate_subprocess(program: &Program, spec: &EvalSpec) -> Evaluation {
    let floor = spec.reward_floor;
    let fail = |f| Evaluation::failed(floor, f);

    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return fail(EvalFailure::SpawnError(format!("tempdir: {e}"))),
    };
    let path = dir.path().join(&spec.file_name);
    if let Err(e) = std::fs::write(&path, program.source()) {
        return fail(EvalFailure::SpawnError(format!("write program: {e}")));
    }
    for f in &spec.support_files {
        let Some(name) = f.file_name() else { continue };
        if let Err(e) = std::fs::copy(f, dir.path().join(name)) {
            return fail(EvalFailure::SpawnError(format!("copy {}: {e}", f.display())));
        }
    }
    let path_str = path.to_string_lossy();
    let mut cmd = Command::new(&spec.command);
    cmd.args(spec.args.iter().map(|a| a.replace(PROGRAM_PLACEHOLDER, &path_str)))
        .current_dir(dir.path())
        .env_clear()
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::null());
    for key in &spec.env_allow {
        if let Ok(v) = std::env::var(key) {
            cmd.env(key, v);
        }
    }
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => return fail(EvalFailure::SpawnError(format!("{}: {e}", spec.command))),
    };
    let mut stdout = child.stdout.take().expect("piped stdout");
    let reader = std::thread::spawn(move || {
        let mut buf = String::new();
        let _ = stdout.read_to_string(&mut buf);
        buf
    });
    let timeout = Duration::from_secs_f64(spec.timeout_secs.max(0.0));
    match child.wait_timeout(timeout) {
        Ok(Some(_status)) => {}
        Ok(None) => {
            let _ = child.kill();
            let _ = child.wait();
            // grandchildren may still hold the pipe open; do not join the reader
            return fail(EvalFailure::Timeout);
        }
        Err(e) => return fail(EvalFailure::SpawnError(format!("wait: {e}"))),
    }
    let output = reader.join().unwrap_or_default();
    match parse_reward_line(&output) {
        Ok(r) => Evaluation::ok(r, floor),
        Err(e) => fail(EvalFailure::BadOutput(e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prog(s: &str) -> Program {
        Program::new(s, "text").unwrap()
    }

    #[test]
    fn bitstring_examples() {
        assert_eq!(evaluate_bitstring(&prog("111"), 3, 0.0).reward.value, 1.0);
        assert_eq!(evaluate_bitstring(&prog("000"), 3, 0.0).reward.value, 0.0);
        assert_eq!(evaluate_bitstring(&prog("10110"), 5, 0.0).reward.value, 0.6);
    }

    #[test]
    fn bitstring_invalid_gets_floor() {
        let e = evaluate_bitstring(&prog("10a"), 3, -0.5);
        assert_eq!(
            e.reward,
            RewardValue {
                value: -0.5,
                valid: false
            }
        );
        assert!(matches!(e.failure, Some(EvalFailure::InvalidProgram(_))));
        assert!(!evaluate_bitstring(&prog("1011"), 3, 0.0).reward.valid);
    }

    #[test]
    fn reward_line_parsing() {
        assert_eq!(parse_reward_line("noise\n{\"reward\": 0.75}\n\n"), Ok(0.75));
        assert!(parse_reward_line("reward: NaN").is_err());
        assert!(parse_reward_line("{\"score\": 1}").is_err());
        assert!(parse_reward_line("").is_err());
    }

    fn sh(script: &str, timeout: f64) -> EvalSpec {
        EvalSpec {
            args: vec!["-c".into(), script.into(), "sh".into(), PROGRAM_PLACEHOLDER.into()],
            timeout_secs: timeout,
            reward_floor: -1.0,
            ..EvalSpec::new("sh")
        }
    }

    #[test]
    fn subprocess_reports_reward() {
        let e = evaluate_subprocess(&prog("x"), &sh("echo '{\"reward\": 0.75}'", 10.0));
        assert_eq!(
            e.reward,
            RewardValue {
                value: 0.75,
                valid: true
            }
        );
        assert!(e.failure.is_none());
    }

    #[test]
    fn subprocess_sees_program_file() {
        let e = evaluate_subprocess(
            &prog("abcd"),
            &sh("n=$(wc -c < \"$1\"); echo \"{\\\"reward\\\": $n}\"", 10.0),
        );
        assert_eq!(e.reward.value, 4.0);
    }

    #[test]
    fn subprocess_timeout_gets_floor() {
        let e = evaluate_subprocess(&prog("x"), &sh("sleep 5", 0.2));
        assert_eq!(
            e.reward,
            RewardValue {
                value: -1.0,
                valid: false
            }
        );
        assert_eq!(e.failure, Some(EvalFailure::Timeout));
    }

    #[test]
    fn subprocess_bad_output_gets_floor() {
        let e = evaluate_subprocess(&prog("x"), &sh("echo 'reward: NaN'", 10.0));
        assert!(!e.reward.valid);
        assert!(matches!(e.failure, Some(EvalFailure::BadOutput(_))));
    }

    #[test]
    fn subprocess_spawn_error() {
        let spec = EvalSpec::new("/definitely/not/a/binary");
        let e = evaluate_subprocess(&prog("x"), &spec);
        assert!(matches!(e.failure, Some(EvalFailure::SpawnError(_))));
    }

    #[test]
    fn subprocess_environment_is_filtered() {
        std::env::set_var("SMC_SEARCH_SECRET_FOR_TEST", "leak");
        let e = evaluate_subprocess(
            &prog("x"),
            &sh("if [ -z \"$SMC_SEARCH_SECRET_FOR_TEST\" ]; then echo '{\"reward\": 1}'; else echo '{\"reward\": 0}'; fi", 10.0),
        );
        assert_eq!(e.reward.value, 1.0);
    }
}
