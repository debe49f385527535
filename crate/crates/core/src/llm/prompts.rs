//! The four mutation prompt templates and their rendering.
//!
//! Templates live under `templates/` as plain text and are embedded at build
//! time. Placeholders: `{{language}}`, `{{code_content}}`,
//! `{{performance_metrics}}` and `{{inspiration_section}}`.

use crate::types::{KernelId, Program, RewardValue};

pub struct Template {
    pub system: &'static str,
    pub user: &'static str,
}

macro_rules! template {
    ($name:literal) => {
        Template {
            system: include_str!(concat!("../../templates/", $name, ".system.txt")),
            user: include_str!(concat!("../../templates/", $name, ".user.txt")),
        }
    };
}

pub const DIFF_NO_INSPO: Template = template!("diff_no_inspo");
pub const DIFF_WITH_INSPO: Template = template!("diff_with_inspo");
pub const REWRITE_NO_INSPO: Template = template!("rewrite_no_inspo");
pub const REWRITE_WITH_INSPO: Template = template!("rewrite_with_inspo");

pub fn template(kernel: KernelId) -> &'static Template {
    match kernel {
        KernelId::DiffNoInspo => &DIFF_NO_INSPO,
        KernelId::DiffWithInspo => &DIFF_WITH_INSPO,
        KernelId::RewriteNoInspo => &REWRITE_NO_INSPO,
        KernelId::RewriteWithInspo => &REWRITE_WITH_INSPO,
    }
}

/// Substituted when the metrics text is empty.
pub const EMPTY_METRICS: &str = "n/a";

/// Metrics text for a parent program.
pub fn format_metrics(reward: &RewardValue) -> String {
    if reward.valid {
        format!("reward: {}", reward.value)
    } else {
        format!("reward: {} (evaluation failed)", reward.value)
    }
}

/// Reference programs block for `with_inspo` kernels.
pub fn inspiration_section(language: &str, inspirations: &[(Program, RewardValue)]) -> String {
    inspirations
        .iter()
        .enumerate()
        .map(|(i, (p, r))| {
            format!(
                "## Reference Program {} (reward: {})\n\n```{}\n{}\n```",
                i + 1,
                r.value,
                language,
                p.source().trim_end_matches('\n')
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn strip_trailing_newline(s: &str) -> &str {
    s.strip_suffix('\n').unwrap_or(s)
}

/// Returns `(system, user)` for one proposal.
pub fn render_prompt(
    kernel: KernelId,
    parent: &Program,
    metrics: &str,
    inspirations: &[(Program, RewardValue)],
) -> (String, String) {
    let t = template(kernel);
    let language = parent.language();
    let metrics = if metrics.trim().is_empty() {
        EMPTY_METRICS
    } else {
        metrics
    };
    let inspo = inspiration_section(language, inspirations);
    let fill = |s: &str| {
        strip_trailing_newline(s)
            .replace("{{language}}", language)
            .replace("{{performance_metrics}}", metrics)
            .replace("{{inspiration_section}}", &inspo)
            // last, so program text containing placeholders is left untouched
            .replace("{{code_content}}", parent.source().trim_end_matches('\n'))
    };
    (fill(t.system), fill(t.user))
}
