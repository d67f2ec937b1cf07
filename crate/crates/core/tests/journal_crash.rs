//! Crash-safety fault injection: a journal truncated at any byte offset
//! must reopen and retain every record fully written before the cut. Also
//! checks snapshot views against a brute-force file rebuild.

use std::collections::HashSet;

use archpost_core::backend::mock::MockBackend;
use archpost_core::backend::{Backends, ScoreRecord};
use archpost_core::engagement::ReactionEvent;
use archpost_core::pipeline::{run_batch, RunConfig, SchemaId};
use archpost_core::pool::{import_seeds, Origin};
use archpost_core::publish::{PlatformId, PublicationRecord, PublishStatus};
use archpost_core::storage::{Journal, Store};
use chrono::Utc;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Build a journal holding every record type.
fn populate(store: &mut Store) {
    let pool = import_seeds((0..12).map(|i| format!("phrase {i}"))).unwrap();
    for entry in pool.entries() {
        store.record_pool_entry(&entry.text, Origin::Seed).unwrap();
    }
    let backends = Backends::all_mock(MockBackend::new(0));
    let outcome = run_batch(
        SchemaId::OurSchema,
        8,
        &pool,
        11,
        &backends,
        &RunConfig::default(),
    )
    .unwrap();
    for (i, item) in outcome.items.iter().enumerate() {
        store.record_item(item).unwrap();
        store
            .record_score(&ScoreRecord {
                item_id: item.item_id.clone(),
                aesthetic: 1.0 + (i as f64) * 0.5,
                technical: 2.0 + (i as f64) * 0.25,
            })
            .unwrap();
        store
            .record_publication(&PublicationRecord {
                item_id: item.item_id.clone(),
                platform: PlatformId::Telegram,
                posted_at: Utc::now(),
                remote_id: Some(format!("r{i}")),
                status: PublishStatus::Ok,
                attempt: 1,
                rendered_body: None,
            })
            .unwrap();
        store
            .record_reaction(&ReactionEvent {
                item_id: item.item_id.clone(),
                platform: PlatformId::Telegram,
                reactor: format!("user{i}"),
                emoji: "+1".into(),
                occurred_at: Utc::now(),
            })
            .unwrap();
    }
}

#[test]
fn truncation_at_any_offset_is_recoverable() {
    let dir = tempfile::tempdir().unwrap();
    let journal_path = dir.path().join("journal.jsonl");
    {
        let mut store = Store::open(&journal_path, dir.path().join("blobs")).unwrap();
        populate(&mut store);
    }
    let bytes = std::fs::read(&journal_path).unwrap();
    assert!(bytes.len() > 1000, "fixture journal too small to be useful");

    // line-end offsets tell us how many records survive a cut at N bytes
    let line_ends: Vec<usize> = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .map(|(i, _)| i + 1)
        .collect();
    let expected_records = |cut: usize| line_ends.iter().filter(|&&e| e <= cut).count();

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let work = dir.path().join("truncated.jsonl");
    for trial in 0..100 {
        let cut = rng.random_range(0..=bytes.len());
        std::fs::write(&work, &bytes[..cut]).unwrap();

        let mut journal = Journal::open(&work)
            .unwrap_or_else(|e| panic!("trial {trial}: reopen after cut {cut} failed: {e}"));
        let survivors: Vec<u64> = journal
            .scan(None, ..)
            .unwrap()
            .map(|r| r.unwrap().seq)
            .collect();
        assert_eq!(
            survivors.len(),
            expected_records(cut),
            "trial {trial}: cut at {cut} kept the wrong records"
        );
        assert_eq!(
            survivors,
            (1..=survivors.len() as u64).collect::<Vec<_>>(),
            "seqs must stay contiguous from 1"
        );

        // after repair the journal accepts appends again
        journal.repair().unwrap();
        let seq = journal
            .append(
                archpost_core::storage::RecordType::PoolEntry,
                serde_json::json!({"text": "post-repair", "origin": "seed"}),
            )
            .unwrap();
        assert_eq!(seq, survivors.len() as u64 + 1);
    }
}

#[test]
fn snapshot_handles_ten_thousand_mixed_records() {
    let dir = tempfile::tempdir().unwrap();
    let journal_path = dir.path().join("journal.jsonl");
    let mut store = Store::open(&journal_path, dir.path().join("blobs")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // 10^4 mixed records with deliberate duplicates sprinkled in
    for n in 0..10_000u64 {
        match rng.random_range(0..4) {
            0 => {
                store
                    .record_pool_entry(&format!("phrase {}", n % 700), Origin::Seed)
                    .unwrap();
            }
            1 => {
                store
                    .record_score(&ScoreRecord {
                        item_id: format!("item-{}", n % 300),
                        aesthetic: 1.0 + (n % 9) as f64,
                        technical: 1.0 + ((n * 3) % 9) as f64,
                    })
                    .unwrap();
            }
            2 => {
                store
                    .record_reaction(&ReactionEvent {
                        item_id: format!("item-{}", n % 300),
                        platform: PlatformId::Telegram,
                        reactor: format!("u{}", n % 900),
                        emoji: "+1".into(),
                        occurred_at: Utc::now(),
                    })
                    .unwrap();
            }
            _ => {
                store
                    .journal
                    .append(
                        archpost_core::storage::RecordType::ScheduleTick,
                        serde_json::json!({"minute": "2026-01-01T12:00:00Z", "decision": "skip"}),
                    )
                    .unwrap();
            }
        }
    }

    let snapshot = store.journal.snapshot().unwrap();

    // brute-force rebuild from the raw file
    let mut pool_oracle: Vec<String> = Vec::new();
    let mut scores_oracle: std::collections::HashMap<String, f64> = Default::default();
    let mut reactions_oracle: HashSet<(String, String, String, String)> = HashSet::new();
    let mut total_lines = 0;
    for line in std::fs::read_to_string(&journal_path).unwrap().lines() {
        total_lines += 1;
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        match v["type"].as_str().unwrap() {
            "pool_entry" => {
                let text = v["payload"]["text"].as_str().unwrap().to_string();
                if !pool_oracle.contains(&text) {
                    pool_oracle.push(text);
                }
            }
            "score" => {
                scores_oracle.insert(
                    v["payload"]["item_id"].as_str().unwrap().to_string(),
                    v["payload"]["aesthetic"].as_f64().unwrap(),
                );
            }
            "reaction" => {
                reactions_oracle.insert((
                    v["payload"]["item_id"].as_str().unwrap().to_string(),
                    v["payload"]["platform"].as_str().unwrap().to_string(),
                    v["payload"]["reactor"].as_str().unwrap().to_string(),
                    v["payload"]["emoji"].as_str().unwrap().to_string(),
                ));
            }
            _ => {}
        }
    }
    assert_eq!(total_lines, 10_000);
    let pool_texts: Vec<String> = snapshot.pool_entries.iter().map(|e| e.text.clone()).collect();
    assert_eq!(pool_texts, pool_oracle);
    assert_eq!(snapshot.scores.len(), scores_oracle.len());
    for (id, aesthetic) in &scores_oracle {
        assert_eq!(snapshot.scores[id].aesthetic, *aesthetic, "score {id}");
    }
    assert_eq!(snapshot.reactions.len(), reactions_oracle.len());
}

#[test]
fn snapshot_views_match_brute_force_rebuild() {
    let dir = tempfile::tempdir().unwrap();
    let journal_path = dir.path().join("journal.jsonl");
    let mut store = Store::open(&journal_path, dir.path().join("blobs")).unwrap();
    populate(&mut store);
    // inject duplicates that the views must collapse
    let snapshot_before = store.journal.snapshot().unwrap();
    let first_item = snapshot_before.items.values().next().unwrap().clone();
    let dup_reaction = snapshot_before.reactions[0].clone();
    store
        .journal
        .append(
            archpost_core::storage::RecordType::Item,
            serde_json::to_value(&first_item).unwrap(),
        )
        .unwrap();
    store.record_reaction(&dup_reaction).unwrap();

    let snapshot = store.journal.snapshot().unwrap();

    // brute-force rebuild straight from the file text
    let mut items_oracle: Vec<String> = Vec::new();
    let mut reactions_oracle: HashSet<(String, String, String, String)> = HashSet::new();
    let mut scores_oracle: Vec<(String, f64)> = Vec::new();
    for line in std::fs::read_to_string(&journal_path).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        match v["type"].as_str().unwrap() {
            "item" => {
                let id = v["payload"]["item_id"].as_str().unwrap().to_string();
                if !items_oracle.contains(&id) {
                    items_oracle.push(id);
                }
            }
            "reaction" => {
                reactions_oracle.insert((
                    v["payload"]["item_id"].as_str().unwrap().to_string(),
                    v["payload"]["platform"].as_str().unwrap().to_string(),
                    v["payload"]["reactor"].as_str().unwrap().to_string(),
                    v["payload"]["emoji"].as_str().unwrap().to_string(),
                ));
            }
            "score" => {
                let id = v["payload"]["item_id"].as_str().unwrap().to_string();
                let aesthetic = v["payload"]["aesthetic"].as_f64().unwrap();
                scores_oracle.retain(|(existing, _)| *existing != id);
                scores_oracle.push((id, aesthetic));
            }
            _ => {}
        }
    }

    let item_ids: Vec<String> = snapshot.items.keys().cloned().collect();
    assert_eq!(item_ids, items_oracle);
    assert_eq!(snapshot.reactions.len(), reactions_oracle.len());
    for reaction in &snapshot.reactions {
        assert!(reactions_oracle.contains(&reaction.dedup_key()));
    }
    assert_eq!(snapshot.scores.len(), scores_oracle.len());
    for (id, aesthetic) in scores_oracle {
        assert_eq!(snapshot.scores[&id].aesthetic, aesthetic);
    }

    // blobs referenced by items exist and match their hashes
    for item in snapshot.items.values() {
        let rehydrated = item.rehydrate(&store.blobs).unwrap();
        assert_eq!(
            rehydrated.final_image.content_hash,
            item.final_image.content_hash
        );
    }
}
