//! Black-box LLM proposal backend: prompt templates, response parsing,
//! SEARCH/REPLACE application and an OpenAI-compatible chat client.

pub mod client;
pub mod diff;
pub mod kernel;
pub mod parse;
pub mod prompts;

pub use client::{ChatClient, ChatError, ChatRequest, ChatTransport, HttpTransport, RetryPolicy};
pub use diff::{apply_diff, apply_diff_with, DiffEdit, DiffError, DiffOptions};
pub use kernel::LlmKernel;
pub use parse::{parse_response, Expect, ParseError, ParsedResponse, Payload};
pub use prompts::render_prompt;
