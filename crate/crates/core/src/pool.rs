//! Keyphrase vocabulary: seed ingestion, backend-driven expansion and
//! uniform sampling.
//!
//! A [`Pool`] is an insertion-ordered set of normalized keyphrases. Seeds
//! arrive as text lines (one phrase per line), expansion goes through a
//! [`TextExpansion`] backend in small batches until a target size is
//! reached, and query construction draws uniform samples without
//! replacement.

use std::path::Path;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, TextExpansion};

/// Where a pool entry came from. The pool file format does not carry this;
/// the journal is the authoritative record of entry provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Seed,
    Expanded,
}

/// One vocabulary unit: non-empty, trimmed, lowercased, single-line text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Keyphrase {
    pub text: String,
    pub origin: Origin,
}

impl Keyphrase {
    /// Normalize raw text into canonical keyphrase form. Returns `None`
    /// for text that is empty after trimming or spans multiple lines.
    pub fn normalize(raw: &str) -> Option<String> {
        if raw.contains('\n') || raw.contains('\r') {
            return None;
        }
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            return None;
        }
        Some(trimmed.to_lowercase())
    }

    pub fn new(raw: &str, origin: Origin) -> Option<Self> {
        Self::normalize(raw).map(|text| Keyphrase { text, origin })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("no non-empty keyphrase line in input")]
    EmptyInput,
    #[error("sample size must be at least 1")]
    ZeroSample,
    #[error("sample of {k} exceeds pool size {pool_size}")]
    SampleTooLarge { k: usize, pool_size: usize },
    #[error(
        "expansion stalled at {size} entries after {stale_rounds} unproductive rounds (target {target})"
    )]
    ExpansionStalled {
        size: usize,
        target: usize,
        stale_rounds: u32,
    },
    #[error("expansion backend failed in round {round}")]
    Backend {
        round: u32,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Insertion-ordered set of keyphrases, unique by text.
#[derive(Debug, Clone)]
pub struct Pool {
    entries: IndexMap<String, Origin>,
    pub created_at: DateTime<Utc>,
}

impl Pool {
    pub fn new() -> Self {
        Pool {
            entries: IndexMap::new(),
            created_at: Utc::now(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, text: &str) -> bool {
        self.entries.contains_key(text)
    }

    /// Insert a keyphrase, dropping duplicates by text. Returns whether the
    /// entry was new.
    pub fn insert(&mut self, phrase: Keyphrase) -> bool {
        match self.entries.entry(phrase.text) {
            indexmap::map::Entry::Occupied(_) => false,
            indexmap::map::Entry::Vacant(slot) => {
                slot.insert(phrase.origin);
                true
            }
        }
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = Keyphrase> + '_ {
        self.entries.iter().map(|(text, origin)| Keyphrase {
            text: text.clone(),
            origin: *origin,
        })
    }

    fn get_index(&self, i: usize) -> Keyphrase {
        let (text, origin) = self.entries.get_index(i).expect("index in range");
        Keyphrase {
            text: text.clone(),
            origin: *origin,
        }
    }

    /// Read a pool file: one keyphrase per line, UTF-8, `#`-prefixed
    /// comment lines ignored. Entries load with [`Origin::Seed`] since the
    /// format carries no provenance.
    pub fn read_file(path: &Path) -> Result<Self, PoolError> {
        let raw = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = raw
            .lines()
            .filter(|line| !line.trim_start().starts_with('#'))
            .collect();
        import_seeds(lines)
    }

    /// Write the pool file (texts only, one per line).
    pub fn write_file(&self, path: &Path) -> Result<(), PoolError> {
        let mut out = String::new();
        for text in self.texts() {
            out.push_str(text);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

impl Default for Pool {
    fn default() -> Self {
        Self::new()
    }
}

/// Build a pool from raw seed lines: deduplicated, lowercased, trimmed
/// non-empty lines in first-occurrence order.
pub fn import_seeds<I, S>(lines: I) -> Result<Pool, PoolError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut pool = Pool::new();
    for line in lines {
        if let Some(phrase) = Keyphrase::new(line.as_ref(), Origin::Seed) {
            pool.insert(phrase);
        }
    }
    if pool.is_empty() {
        return Err(PoolError::EmptyInput);
    }
    Ok(pool)
}

/// Knobs for [`expand_pool`]. Batches rotate through existing entries;
/// a round that yields no new unique phrase counts as stale.
#[derive(Debug, Clone)]
pub struct ExpansionConfig {
    pub batch_size: usize,
    pub max_stale_rounds: u32,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            batch_size: 5,
            max_stale_rounds: 10,
        }
    }
}

/// Grow the pool through the expansion backend until it holds at least
/// `target_size` entries. Existing entries are never removed or mutated;
/// new entries insert with [`Origin::Expanded`] and stop exactly at the
/// target.
pub fn expand_pool(
    pool: &Pool,
    expander: &dyn TextExpansion,
    target_size: usize,
    cfg: &ExpansionConfig,
) -> Result<Pool, PoolError> {
    let mut out = pool.clone();
    if out.len() >= target_size {
        return Ok(out);
    }

    let batch_size = cfg.batch_size.max(1);
    let mut cursor = 0usize;
    let mut stale_rounds = 0u32;
    let mut round = 0u32;

    while out.len() < target_size {
        round += 1;
        let len = out.len();
        let batch: Vec<String> = (0..batch_size.min(len))
            .map(|i| out.get_index((cursor + i) % len).text)
            .collect();
        cursor += batch.len();

        let candidates = expander
            .expand(&batch)
            .map_err(|source| PoolError::Backend { round, source })?;

        let mut inserted_this_round = 0usize;
        for candidate in candidates {
            if out.len() >= target_size {
                break;
            }
            if let Some(phrase) = Keyphrase::new(&candidate, Origin::Expanded) {
                if out.insert(phrase) {
                    inserted_this_round += 1;
                }
            }
        }

        if inserted_this_round == 0 {
            stale_rounds += 1;
            if stale_rounds >= cfg.max_stale_rounds {
                return Err(PoolError::ExpansionStalled {
                    size: out.len(),
                    target: target_size,
                    stale_rounds,
                });
            }
        } else {
            stale_rounds = 0;
        }
    }
    Ok(out)
}

/// Draw `k` distinct entries uniformly without replacement. Deterministic
/// for a fixed rng seed.
pub fn sample<R: Rng + ?Sized>(
    pool: &Pool,
    rng: &mut R,
    k: usize,
) -> Result<Vec<Keyphrase>, PoolError> {
    if k == 0 {
        return Err(PoolError::ZeroSample);
    }
    if k > pool.len() {
        return Err(PoolError::SampleTooLarge {
            k,
            pool_size: pool.len(),
        });
    }
    let picks = rand::seq::index::sample(rng, pool.len(), k);
    Ok(picks.into_iter().map(|i| pool.get_index(i)).collect())
}
