//! Score aggregation per schema and the cross-schema comparison table.
//!
//! Means are kept at full precision internally and rendered to two
//! decimals. The comparison table sorts schemas by mean aesthetic score
//! (descending), breaking ties by technical score and then schema name,
//! and marks the winning row.

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ImageScoring, ScoreRecord};
use crate::pipeline::{PostcardItem, SchemaId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaReport {
    pub schema: SchemaId,
    pub n: usize,
    pub mean_aesthetic: f64,
    pub mean_technical: f64,
    /// Sample standard deviations; an extension beyond the mean-only
    /// report, present when n >= 2.
    pub aesthetic_sd: Option<f64>,
    pub technical_sd: Option<f64>,
}

/// One rendered comparison row. Means are rounded to the two decimals the
/// report displays, so parsing a rendered table reproduces the value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub schema: SchemaId,
    pub n: usize,
    pub mean_aesthetic: f64,
    pub mean_technical: f64,
    pub top: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot aggregate zero scores")]
    EmptyScores,
    #[error("score for item {item_id} out of [1,10]: aesthetic {aesthetic}, technical {technical}")]
    OutOfRangeScore {
        item_id: String,
        aesthetic: f64,
        technical: f64,
    },
    #[error("duplicate schema in comparison: {0}")]
    DuplicateSchema(SchemaId),
    #[error("comparison needs at least two reports, got {got}")]
    NotEnoughReports { got: usize },
    #[error("cannot score an empty item set")]
    EmptyItems,
    #[error("unparsable comparison table: {0}")]
    ParseTable(String),
    #[error("scoring backend unavailable")]
    Backend(#[source] BackendError),
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Arithmetic means over a non-empty, in-range score set.
pub fn aggregate(schema: SchemaId, scores: &[ScoreRecord]) -> Result<SchemaReport, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    for score in scores {
        if !score.in_range() {
            return Err(EvalError::OutOfRangeScore {
                item_id: score.item_id.clone(),
                aesthetic: score.aesthetic,
                technical: score.technical,
            });
        }
    }
    let n = scores.len();
    let mean = |pick: fn(&ScoreRecord) -> f64| scores.iter().map(pick).sum::<f64>() / n as f64;
    let mean_aesthetic = mean(|s| s.aesthetic);
    let mean_technical = mean(|s| s.technical);
    let sd = |pick: fn(&ScoreRecord) -> f64, mean: f64| {
        if n < 2 {
            return None;
        }
        let var = scores
            .iter()
            .map(|s| {
                let d = pick(s) - mean;
                d * d
            })
            .sum::<f64>()
            / (n - 1) as f64;
        Some(var.sqrt())
    };
    Ok(SchemaReport {
        schema,
        n,
        mean_aesthetic,
        mean_technical,
        aesthetic_sd: sd(|s| s.aesthetic, mean_aesthetic),
        technical_sd: sd(|s| s.technical, mean_technical),
    })
}

/// Order per-schema reports into the comparison table.
pub fn compare(reports: &[SchemaReport]) -> Result<ComparisonTable, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::NotEnoughReports {
            got: reports.len(),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for report in reports {
        if !seen.insert(report.schema) {
            return Err(EvalError::DuplicateSchema(report.schema));
        }
    }
    let mut ordered: Vec<&SchemaReport> = reports.iter().collect();
    ordered.sort_by(|a, b| {
        b.mean_aesthetic
            .partial_cmp(&a.mean_aesthetic)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                b.mean_technical
                    .partial_cmp(&a.mean_technical)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| a.schema.as_str().cmp(b.schema.as_str()))
    });
    let rows = ordered
        .into_iter()
        .enumerate()
        .map(|(i, report)| ComparisonRow {
            schema: report.schema,
            n: report.n,
            mean_aesthetic: round2(report.mean_aesthetic),
            mean_technical: round2(report.mean_technical),
            top: i == 0,
        })
        .collect();
    Ok(ComparisonTable { rows })
}

/// Aligned text rendering; the winning row is starred.
pub fn render_table(table: &ComparisonTable) -> String {
    let width = table
        .rows
        .iter()
        .map(|r| r.schema.as_str().len())
        .chain(["schema".len()])
        .max()
        .unwrap_or(6);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>9}  {:>9}\n",
        "schema", "n", "aesthetic", "technical"
    );
    for row in &table.rows {
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>9.2}  {:>9.2}{}\n",
            row.schema.as_str(),
            row.n,
            row.mean_aesthetic,
            row.mean_technical,
            if row.top { "  *" } else { "" },
        ));
    }
    out
}

/// CSV rendering with header `schema,n,mean_aesthetic,mean_technical`.
pub fn render_csv(table: &ComparisonTable) -> String {
    let mut out = String::from("schema,n,mean_aesthetic,mean_technical\n");
    for row in &table.rows {
        out.push_str(&format!(
            "{},{},{:.2},{:.2}\n",
            row.schema.as_str(),
            row.n,
            row.mean_aesthetic,
            row.mean_technical
        ));
    }
    out
}

/// Parse a CSV produced by [`render_csv`]. The first data row is the
/// winning row.
pub fn parse_csv(input: &str) -> Result<ComparisonTable, EvalError> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| EvalError::ParseTable("empty input".into()))?;
    if header != "schema,n,mean_aesthetic,mean_technical" {
        return Err(EvalError::ParseTable(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(EvalError::ParseTable(format!(
                "line {}: expected 4 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let parse_err = |what: &str| EvalError::ParseTable(format!("line {}: bad {what}", i + 2));
        rows.push(ComparisonRow {
            schema: fields[0]
                .parse::<SchemaId>()
                .map_err(|_| parse_err("schema"))?,
            n: fields[1].parse().map_err(|_| parse_err("n"))?,
            mean_aesthetic: fields[2].parse().map_err(|_| parse_err("mean_aesthetic"))?,
            mean_technical: fields[3].parse().map_err(|_| parse_err("mean_technical"))?,
            top: rows.is_empty(),
        });
    }
    Ok(ComparisonTable { rows })
}

#[derive(Debug)]
pub struct ScoreBatchOutcome {
    /// One record per successfully scored item, sorted by item id.
    pub records: Vec<ScoreRecord>,
    pub failures: usize,
}

/// Score every item's final image. Individual failures are counted and
/// skipped; only total unavailability propagates.
pub fn score_batch(
    items: &[PostcardItem],
    scorer: &dyn ImageScoring,
) -> Result<ScoreBatchOutcome, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyItems);
    }
    let mut records = Vec::with_capacity(items.len());
    let mut failures = 0usize;
    let mut last_error: Option<BackendError> = None;
    for item in items {
        match scorer.score(&item.item_id, &item.final_image) {
            Ok(record) => records.push(record),
            Err(e) => {
                log::warn!("scoring {} failed: {e}", item.item_id);
                failures += 1;
                last_error = Some(e);
            }
        }
    }
    if records.is_empty() {
        if let Some(e) = last_error {
            return Err(EvalError::Backend(e));
        }
    }
    records.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    Ok(ScoreBatchOutcome { records, failures })
}
