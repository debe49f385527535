use rand::{Rng, RngCore};

use super::client::{ChatClient, ChatRequest, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};
use super::diff::{apply_diff_with, DiffOptions};
use super::parse::{parse_response, Expect, Payload};
use super::prompts::{format_metrics, render_prompt};
use crate::mutate::{MutationContext, ProposalKernel, ProposalResult, Transcript};
use crate::types::Program;

/// Proposal kernel backed by a chat model ensemble.
///
/// Each request picks `models[0]` with probability `first_model_ratio`,
/// otherwise `models[1]`, using the proposal stream handed to `propose`.
pub struct LlmKernel {
    client: ChatClient,
    models: Vec<String>,
    first_model_ratio: f64,
    temperature: f64,
    max_tokens: u32,
    diff_options: DiffOptions,
    /// Redacted from transcripts.
    secrets: Vec<String>,
}

impl LlmKernel {
    pub fn new(client: ChatClient, models: Vec<String>) -> Self {
        assert!(!models.is_empty(), "at least one model");
        LlmKernel {
            client,
            models,
            first_model_ratio: 0.5,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            diff_options: DiffOptions::default(),
            secrets: Vec::new(),
        }
    }

    pub fn with_ratio(mut self, first_model_ratio: f64) -> Self {
        self.first_model_ratio = first_model_ratio.clamp(0.0, 1.0);
        self
    }

    pub fn with_sampling(mut self, temperature: f64, max_tokens: u32) -> Self {
        self.temperature = temperature;
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_diff_options(mut self, options: DiffOptions) -> Self {
        self.diff_options = options;
        self
    }

    pub fn with_secrets(mut self, secrets: Vec<String>) -> Self {
        self.secrets = secrets.into_iter().filter(|s| !s.is_empty()).collect();
        self
    }

    pub fn client(&self) -> &ChatClient {
        &self.client
    }

    pub fn pick_model(&self, rng: &mut dyn RngCore) -> &str {
        if self.models.len() == 1 {
            return &self.models[0];
        }
        if rng.random::<f64>() < self.first_model_ratio {
            &self.models[0]
        } else {
            &self.models[1]
        }
    }

    fn redact(&self, s: &str) -> String {
        self.secrets
            .iter()
            .fold(s.to_string(), |acc, k| acc.replace(k.as_str(), "[REDACTED]"))
    }
}

impl ProposalKernel for LlmKernel {
    fn propose(&self, parent: &Program, ctx: &MutationContext<'_>, rng: &mut dyn RngCore) -> ProposalResult {
        let kernel_id = ctx.kernel_id;
        let model = self.pick_model(rng).to_string();
        let (mut system, user) = render_prompt(
            kernel_id,
            parent,
            &format_metrics(&ctx.parent_reward),
            &ctx.inspirations,
        );
        if !ctx.task_description.trim().is_empty() {
            system = format!("{system}\n\nProblem description:\n{}", ctx.task_description.trim());
        }
        let request = ChatRequest {
            model: model.clone(),
            system,
            user,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        };
        let completion = match self.client.chat(&request) {
            Ok(c) => c,
            Err(e) => {
                let mut r = ProposalResult::failure(kernel_id, format!("chat: {e}"));
                // a request that reached the API counts against the call total
                r.llm_calls = usize::from(!matches!(e, super::client::ChatError::BudgetExhausted));
                return r;
            }
        };
        let transcript = Transcript {
            model,
            system: self.redact(&request.system),
            user: self.redact(&request.user),
            response: self.redact(&completion.content),
            attempts: completion.attempts,
        };
        let expect = if kernel_id.is_diff() {
            Expect::Diff
        } else {
            Expect::Code
        };
        let outcome = parse_response(&completion.content, expect)
            .map_err(|e| format!("parse: {e}"))
            .and_then(|parsed| match parsed.payload {
                Payload::DiffEdits(edits) => {
                    apply_diff_with(parent.source(), &edits, self.diff_options).map_err(|e| format!("diff: {e}"))
                }
                Payload::FullCode(code) => Ok(code),
            })
            .and_then(|src| Program::new(src, parent.language()).map_err(|e| format!("program: {e}")));

        let mut result = match outcome {
            Ok(program) => ProposalResult::candidate(program, kernel_id),
            Err(e) => ProposalResult::failure(kernel_id, e),
        };
        result.raw_response = completion.content;
        result.llm_calls = 1;
        result.transcript = Some(transcript);
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::client::{completion_body, ChatTransport, HttpResponse, RetryPolicy};
    use crate::rng::{stream, Purpose};
    use crate::types::{KernelId, RewardValue};

    /// Replies to diff prompts with an edit and to rewrite prompts with code.
    struct Echo;
    impl ChatTransport for Echo {
        fn post(&self, body: &serde_json::Value) -> Result<HttpResponse, String> {
            let system = body["messages"][0]["content"].as_str().unwrap();
            let content = if system.contains("SEARCH/REPLACE") {
                "<NAME>bump</NAME>\n<DIFF>\n<<<<<<< SEARCH\nx = 1\n=======\nx = 2\n>>>>>>> REPLACE\n</DIFF>"
            } else {
                "<NAME>fresh</NAME>\n<CODE>\n```python\nx = 3\n```\n</CODE>"
            };
            Ok(HttpResponse {
                status: 200,
                body: completion_body(content),
            })
        }
    }

    fn ctx(kernel_id: KernelId) -> MutationContext<'static> {
        MutationContext {
            iteration: 1,
            beta_t: 1.0,
            parent_reward: RewardValue {
                value: 0.5,
                valid: true,
            },
            inspirations: vec![],
            kernel_id,
            task_description: "",
        }
    }

    fn kernel(models: Vec<&str>) -> LlmKernel {
        let client = ChatClient::new(Box::new(Echo), RetryPolicy::default());
        LlmKernel::new(client, models.into_iter().map(String::from).collect())
    }

    #[test]
    fn diff_kernel_applies_edit() {
        let k = kernel(vec!["m"]);
        let parent = Program::new("x = 1\n", "python").unwrap();
        let r = k.propose(
            &parent,
            &ctx(KernelId::DiffNoInspo),
            &mut stream(0, Purpose::Proposal, 0, 0, 0),
        );
        assert!(r.parse_ok);
        assert_eq!(r.candidate.unwrap().source(), "x = 2\n");
        assert_eq!(r.llm_calls, 1);
        assert!(r.transcript.is_some());
    }

    #[test]
    fn rewrite_kernel_returns_code() {
        let k = kernel(vec!["m"]);
        let parent = Program::new("x = 1\n", "python").unwrap();
        let r = k.propose(
            &parent,
            &ctx(KernelId::RewriteNoInspo),
            &mut stream(0, Purpose::Proposal, 0, 0, 1),
        );
        assert_eq!(r.candidate.unwrap().source(), "x = 3\n");
    }

    #[test]
    fn failed_diff_is_a_parse_failure() {
        let k = kernel(vec!["m"]);
        let parent = Program::new("y = 1\n", "python").unwrap();
        let r = k.propose(
            &parent,
            &ctx(KernelId::DiffNoInspo),
            &mut stream(0, Purpose::Proposal, 0, 0, 2),
        );
        assert!(!r.parse_ok);
        assert!(r.candidate.is_none());
        assert!(r.error.unwrap().starts_with("diff:"));
        assert_eq!(r.llm_calls, 1);
    }

    #[test]
    fn ensemble_split_is_binomial() {
        let k = kernel(vec!["a", "b"]);
        let mut rng = stream(11, Purpose::Proposal, 0, 0, 0);
        let n = 20_000;
        let a = (0..n).filter(|_| k.pick_model(&mut rng) == "a").count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((a - n as f64 / 2.0).abs() <= 3.0 * sd, "{a}");
    }

    #[test]
    fn secrets_are_redacted() {
        let k = kernel(vec!["m"]).with_secrets(vec!["x = 1".into()]);
        let parent = Program::new("x = 1\n", "python").unwrap();
        let r = k.propose(
            &parent,
            &ctx(KernelId::DiffNoInspo),
            &mut stream(0, Purpose::Proposal, 0, 0, 3),
        );
        let t = r.transcript.unwrap();
        assert!(!t.user.contains("x = 1"));
        assert!(t.user.contains("[REDACTED]"));
    }
}
