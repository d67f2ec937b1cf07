//! Prompt construction: initial queries from sampled keyphrases, refined
//! queries that fold a model caption back in front of the same keyphrases.
//!
//! The rendered prompt is the parts joined with `", "`. Refined prompts are
//! bounded by a char budget; overflow truncates the caption, never the
//! keyphrases, since the keyphrases carry engagement attribution.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::pool::Keyphrase;

/// Default upper bound on rendered prompt length, in chars.
pub const DEFAULT_MAX_PROMPT_CHARS: usize = 900;

pub const PROMPT_SEPARATOR: &str = ", ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Refined,
}

/// A textual description of an image, as returned by a captioning backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub backend_id: String,
}

impl Caption {
    /// Returns `None` when the text is empty after trimming.
    pub fn new(text: &str, backend_id: &str) -> Option<Self> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return None;
        }
        Some(Caption {
            text: trimmed.to_string(),
            backend_id: backend_id.to_string(),
        })
    }
}

/// An ordered prompt composition, either straight from keyphrases or with
/// a caption folded in front of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub parts: Vec<String>,
    pub stage: Stage,
    pub source_keyphrases: Vec<String>,
    /// Set when the caption had to be cut to fit the prompt budget.
    #[serde(default)]
    pub caption_truncated: bool,
}

impl Query {
    /// The prompt string sent to generation backends.
    pub fn prompt(&self) -> String {
        self.parts.join(PROMPT_SEPARATOR)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum QueryError {
    #[error("cannot compile a query from zero keyphrases")]
    EmptyKeyphrases,
    #[error("refinement requires an initial-stage query")]
    StageMismatch,
}

/// Compile the initial query: parts are the keyphrase texts in given order.
pub fn compile_initial(keyphrases: &[Keyphrase]) -> Result<Query, QueryError> {
    if keyphrases.is_empty() {
        return Err(QueryError::EmptyKeyphrases);
    }
    let texts: Vec<String> = keyphrases.iter().map(|k| k.text.clone()).collect();
    Ok(Query {
        parts: texts.clone(),
        stage: Stage::Initial,
        source_keyphrases: texts,
        caption_truncated: false,
    })
}

/// Fold a caption in front of the initial keyphrases. The caption is
/// truncated (or dropped entirely) when the rendered prompt would exceed
/// `max_prompt_chars`; the keyphrases are never cut or reordered.
pub fn compile_refined(
    initial: &Query,
    caption: &Caption,
    max_prompt_chars: usize,
) -> Result<Query, QueryError> {
    if initial.stage != Stage::Initial {
        return Err(QueryError::StageMismatch);
    }

    let keyphrase_chars: usize = initial
        .parts
        .iter()
        .map(|p| p.chars().count())
        .sum::<usize>()
        + PROMPT_SEPARATOR.len() * initial.parts.len().saturating_sub(1);
    // budget for the caption part, leaving room for its trailing separator
    let budget = max_prompt_chars.saturating_sub(keyphrase_chars + PROMPT_SEPARATOR.len());

    let caption_chars = caption.text.chars().count();
    let (caption_part, truncated) = if caption_chars <= budget {
        (Some(caption.text.clone()), false)
    } else if budget > 0 {
        (Some(caption.text.chars().take(budget).collect()), true)
    } else {
        (None, true)
    };

    let mut parts = Vec::with_capacity(initial.parts.len() + 1);
    if let Some(part) = caption_part {
        parts.push(part);
    }
    parts.extend(initial.parts.iter().cloned());

    Ok(Query {
        parts,
        stage: Stage::Refined,
        source_keyphrases: initial.source_keyphrases.clone(),
        caption_truncated: truncated,
    })
}

/// The keyphrase texts a query was built from, as a set. Used for
/// engagement attribution.
pub fn extract_keyphrases(query: &Query) -> BTreeSet<String> {
    query.source_keyphrases.iter().cloned().collect()
}
