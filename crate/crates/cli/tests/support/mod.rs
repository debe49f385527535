//! Scripted chat-completions server and a bitstring task evaluated by a
//! shell script.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use smc_search::llm::client::completion_body;
use smc_search::RunConfig;

/// Answers every chat request from its content alone: find the current
/// program's `bits = "..."` line and flip one bit chosen by a hash of the
/// request body. One request in eleven gets an unparseable reply.
pub struct MockLlm {
    port: u16,
    served: Arc<AtomicUsize>,
    delay_ms: Arc<AtomicU64>,
}

impl MockLlm {
    pub fn start(delay: Duration) -> MockLlm {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        let served = Arc::new(AtomicUsize::new(0));
        let delay_ms = Arc::new(AtomicU64::new(delay.as_millis() as u64));
        let (counter, delay) = (served.clone(), delay_ms.clone());
        std::thread::spawn(move || {
            for conn in listener.incoming() {
                let Ok(conn) = conn else { continue };
                let (counter, delay) = (counter.clone(), delay.clone());
                std::thread::spawn(move || serve(conn, &counter, &delay));
            }
        });
        MockLlm { port, served, delay_ms }
    }

    pub fn set_delay(&self, delay: Duration) {
        self.delay_ms.store(delay.as_millis() as u64, Ordering::SeqCst);
    }

    pub fn endpoint(&self) -> String {
        format!("http://127.0.0.1:{}/v1", self.port)
    }

    pub fn requests(&self) -> usize {
        self.served.load(Ordering::SeqCst)
    }
}

fn serve(conn: TcpStream, served: &AtomicUsize, delay_ms: &AtomicU64) {
    let mut writer = conn.try_clone().unwrap();
    let mut reader = BufReader::new(conn);
    // keep-alive: several requests per connection
    loop {
        let mut content_length = 0usize;
        let mut line = String::new();
        let mut first = true;
        loop {
            line.clear();
            match reader.read_line(&mut line) {
                Ok(0) | Err(_) => return,
                Ok(_) => {}
            }
            if line == "\r\n" || line == "\n" {
                break;
            }
            if !first {
                if let Some((k, v)) = line.split_once(':') {
                    if k.trim().eq_ignore_ascii_case("content-length") {
                        content_length = v.trim().parse().unwrap_or(0);
                    }
                }
            }
            first = false;
        }
        let mut body = vec![0u8; content_length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        std::thread::sleep(Duration::from_millis(delay_ms.load(Ordering::SeqCst)));
        let reply = completion_body(&respond(&body));
        served.fetch_add(1, Ordering::SeqCst);
        let head = format!(
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: keep-alive\r\n\r\n",
            reply.len()
        );
        if writer
            .write_all(head.as_bytes())
            .and_then(|_| writer.write_all(reply.as_bytes()))
            .is_err()
        {
            return;
        }
    }
}

fn respond(body: &[u8]) -> String {
    let mut h = DefaultHasher::new();
    body.hash(&mut h);
    let h = h.finish();
    if h.is_multiple_of(11) {
        return "Sorry, I am not sure what to change here.".to_string();
    }
    let req: serde_json::Value = serde_json::from_slice(body).unwrap();
    let system = req["messages"][0]["content"].as_str().unwrap_or("");
    let user = req["messages"][1]["content"].as_str().unwrap_or("");
    let current = user.split("# Current Program").nth(1).unwrap_or("");
    let Some(bits) = current.split("bits = \"").nth(1).and_then(|s| s.split('"').next()) else {
        return "<NAME>none</NAME>".to_string();
    };
    let mut flipped: Vec<u8> = bits.bytes().collect();
    let i = ((h >> 8) as usize) % flipped.len().max(1);
    flipped[i] = if flipped[i] == b'1' { b'0' } else { b'1' };
    let new_bits = String::from_utf8(flipped).unwrap();
    if system.contains("<DIFF>") {
        format!(
            "<NAME>flip bit {i}</NAME>\n<DESCRIPTION>Flip one bit.</DESCRIPTION>\n<DIFF>\n<<<<<<< SEARCH\nbits = \"{bits}\"\n=======\nbits = \"{new_bits}\"\n>>>>>>> REPLACE\n</DIFF>"
        )
    } else {
        format!(
            "<NAME>rewrite</NAME>\n<DESCRIPTION>Fresh program.</DESCRIPTION>\n<CODE>\n```python\n{}\n```\n</CODE>",
            program(&new_bits).trim_end()
        )
    }
}

pub fn program(bits: &str) -> String {
    format!("bits = \"{bits}\"\n\n\ndef score():\n    return bits.count(\"1\")\n")
}

const EVAL_SH: &str = r#"bits=$(sed -n 's/^bits = "\([01]*\)"$/\1/p' "$1" | head -n 1)
[ -n "$bits" ] || { echo "no bits line"; exit 1; }
ones=$(printf %s "$bits" | tr -cd 1 | wc -c)
awk -v o="$ones" -v n="${#bits}" 'BEGIN { printf "{\"reward\": %.6f}\n", o / n }'
"#;

pub struct BitsTask {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    sampler: RunConfig,
}

impl BitsTask {
    pub fn new(endpoint: &str) -> BitsTask {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("eval.sh"), EVAL_SH).unwrap();
        std::fs::write(dir.path().join("seed.py"), program("0000000000")).unwrap();
        let sampler = RunConfig {
            n_islands: 2,
            particles_per_island: 6,
            n_proposals: 2,
            beta: 10.0,
            kappa: 0.5,
            min_iterations: 5,
            max_iterations: 5,
            migration_interval: 2,
            migration_size: 1,
            top_k_inspiration: 2,
            diverse_inspirations: 1,
            seed: 42,
            ..RunConfig::default()
        };
        let config = serde_json::json!({
            "sampler": sampler,
            "task": {
                "language": "python",
                "initial_program_file": "seed.py",
                "description": "Maximise the number of ones in `bits`.",
                "evaluator": {
                    "kind": "subprocess",
                    "command": "sh",
                    "args": ["eval.sh", "{program}"],
                    "support_files": ["eval.sh"],
                    "timeout_secs": 20
                }
            },
            "backend": {
                "kind": "llm",
                "endpoint": endpoint,
                "models": ["mock-a", "mock-b"],
                "timeout_secs": 30,
                "retry": {"max_retries": 1, "base_delay_ms": 1, "max_delay_ms": 2}
            }
        });
        let path = dir.path().join("config.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
        BitsTask {
            dir,
            config: path,
            sampler,
        }
    }

    pub fn sampler(&self) -> &RunConfig {
        &self.sampler
    }
}
