//! Emoji-reaction ingestion and per-keyphrase conversion analysis.
//!
//! An item "converts" when at least one reaction references it; reaction
//! multiplicity beyond the first changes nothing. Each keyphrase's
//! conversion rate is the percentage of items containing it that
//! converted, and keyphrases split into more/less engaging relative to the
//! overall rate.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::publish::PlatformId;
use crate::storage::{ItemRecord, Store, StorageError};

/// One emoji reaction on a published item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReactionEvent {
    pub item_id: String,
    pub platform: PlatformId,
    /// Opaque reactor identity (never a readable handle).
    pub reactor: String,
    pub emoji: String,
    pub occurred_at: DateTime<Utc>,
}

impl ReactionEvent {
    pub fn dedup_key(&self) -> (String, String, String, String) {
        (
            self.item_id.clone(),
            self.platform.as_str().to_string(),
            self.reactor.clone(),
            self.emoji.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionRow {
    pub keyphrase: String,
    pub items: u64,
    pub converted: u64,
    /// `round(100 * converted / items)`, rendered as an integer percent.
    pub rate: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionReport {
    /// Rows with at least `min_support` items, sorted by rate descending,
    /// ties by keyphrase.
    pub rows: Vec<ConversionRow>,
    /// Conversion over all items, keyphrase-independent.
    pub overall_rate: u32,
    pub min_support: u64,
}

/// Report plus the reactions that referenced no known item.
#[derive(Debug)]
pub struct ConversionAnalysis {
    pub report: ConversionReport,
    pub orphans: Vec<ReactionEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngagementSplit {
    pub more_engaging: Vec<ConversionRow>,
    pub less_engaging: Vec<ConversionRow>,
}

#[derive(Debug, thiserror::Error)]
pub enum EngagementError {
    #[error("conversion analysis needs at least one item")]
    EmptyItems,
}

fn percent(converted: u64, items: u64) -> u32 {
    if items == 0 {
        return 0;
    }
    (100.0 * converted as f64 / items as f64).round() as u32
}

/// Compute per-keyphrase conversion rates over a snapshot of items and
/// reactions. Orphan reactions are collected, not fatal.
pub fn conversion_rates(
    items: &[ItemRecord],
    reactions: &[ReactionEvent],
    min_support: u64,
) -> Result<ConversionAnalysis, EngagementError> {
    if items.is_empty() {
        return Err(EngagementError::EmptyItems);
    }

    let known: HashSet<&str> = items.iter().map(|i| i.item_id.as_str()).collect();
    let mut converted_ids: HashSet<&str> = HashSet::new();
    let mut orphans = Vec::new();
    for reaction in reactions {
        if known.contains(reaction.item_id.as_str()) {
            converted_ids.insert(reaction.item_id.as_str());
        } else {
            orphans.push(reaction.clone());
        }
    }

    let mut per_keyphrase: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for item in items {
        let converted = converted_ids.contains(item.item_id.as_str());
        let mut seen_in_item: HashSet<&str> = HashSet::new();
        for keyphrase in &item.keyphrases {
            if !seen_in_item.insert(keyphrase.as_str()) {
                continue;
            }
            let slot = per_keyphrase.entry(keyphrase.as_str()).or_insert((0, 0));
            slot.0 += 1;
            if converted {
                slot.1 += 1;
            }
        }
    }

    let mut rows: Vec<ConversionRow> = per_keyphrase
        .into_iter()
        .filter(|(_, (item_count, _))| *item_count >= min_support)
        .map(|(keyphrase, (item_count, converted))| ConversionRow {
            keyphrase: keyphrase.to_string(),
            items: item_count,
            converted,
            rate: percent(converted, item_count),
        })
        .collect();
    rows.sort_by(|a, b| b.rate.cmp(&a.rate).then_with(|| a.keyphrase.cmp(&b.keyphrase)));

    Ok(ConversionAnalysis {
        report: ConversionReport {
            rows,
            overall_rate: percent(converted_ids.len() as u64, items.len() as u64),
            min_support,
        },
        orphans,
    })
}

/// Split rows around the overall rate; rows exactly at it land in neither
/// bucket.
pub fn categorize(report: &ConversionReport) -> EngagementSplit {
    let mut more_engaging = Vec::new();
    let mut less_engaging = Vec::new();
    for row in &report.rows {
        if row.rate > report.overall_rate {
            more_engaging.push(row.clone());
        } else if row.rate < report.overall_rate {
            less_engaging.push(row.clone());
        }
    }
    EngagementSplit {
        more_engaging,
        less_engaging,
    }
}

fn csv_field(value: &str) -> String {
    if value.contains(',') || value.contains('"') || value.contains('\n') {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

/// CSV rendering with header `keyphrase,items,converted,rate`.
pub fn render_csv(report: &ConversionReport) -> String {
    let mut out = String::from("keyphrase,items,converted,rate\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            csv_field(&row.keyphrase),
            row.items,
            row.converted,
            row.rate
        ));
    }
    out
}

/// Outcome of one reaction-import run. Every input line lands in exactly
/// one bucket.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct IngestSummary {
    pub ingested: usize,
    pub malformed: usize,
    pub duplicates: usize,
    pub orphans: usize,
}

impl IngestSummary {
    pub fn skipped(&self) -> usize {
        self.malformed + self.duplicates + self.orphans
    }
}

/// Ingest a JSON Lines reaction stream into the journal.
///
/// Events deduplicate on `(item_id, platform, reactor, emoji)`, both
/// against the journal and within the stream. Malformed lines and events
/// referencing unknown items are skipped and counted.
pub fn ingest_reactions(
    reader: impl BufRead,
    store: &mut Store,
) -> Result<IngestSummary, StorageError> {
    let snapshot = store.journal.snapshot()?;
    let known_items: HashSet<String> = snapshot.items.keys().cloned().collect();
    let mut seen: HashSet<(String, String, String, String)> = snapshot
        .reactions
        .iter()
        .map(ReactionEvent::dedup_key)
        .collect();

    let mut summary = IngestSummary::default();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: ReactionEvent = match serde_json::from_str(&line) {
            Ok(event) => event,
            Err(e) => {
                log::warn!("skipping malformed reaction line: {e}");
                summary.malformed += 1;
                continue;
            }
        };
        if !known_items.contains(&event.item_id) {
            summary.orphans += 1;
            continue;
        }
        if !seen.insert(event.dedup_key()) {
            summary.duplicates += 1;
            continue;
        }
        store.record_reaction(&event)?;
        summary.ingested += 1;
    }
    Ok(summary)
}

/// Brute-force per-keyphrase recount used as an independent oracle in
/// tests: exhaustive scans, no shared index with `conversion_rates`.
#[cfg(test)]
fn brute_force_rates(
    items: &[ItemRecord],
    reactions: &[ReactionEvent],
    min_support: u64,
) -> Vec<ConversionRow> {
    let mut keyphrases: Vec<String> = Vec::new();
    for item in items {
        for k in &item.keyphrases {
            if !keyphrases.contains(k) {
                keyphrases.push(k.clone());
            }
        }
    }
    keyphrases.sort();

    let mut rows = Vec::new();
    for keyphrase in keyphrases {
        let holders: Vec<&ItemRecord> = items
            .iter()
            .filter(|i| i.keyphrases.contains(&keyphrase))
            .collect();
        if (holders.len() as u64) < min_support {
            continue;
        }
        let converted = holders
            .iter()
            .filter(|i| reactions.iter().any(|r| r.item_id == i.item_id))
            .count() as u64;
        rows.push(ConversionRow {
            keyphrase,
            items: holders.len() as u64,
            converted,
            rate: percent(converted, holders.len() as u64),
        });
    }
    rows.sort_by(|a, b| b.rate.cmp(&a.rate).then_with(|| a.keyphrase.cmp(&b.keyphrase)));
    rows
}
