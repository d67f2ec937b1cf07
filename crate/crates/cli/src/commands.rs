//! Subcommand implementations. Every workflow reads and writes only the
//! journal/blob/pool paths named in the config; stdout carries the data,
//! stderr the logs.

use std::io::BufReader;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use archpost_core::engagement;
use archpost_core::evaluation;
use archpost_core::pipeline::{run_batch, run_item, SchemaId};
use archpost_core::pool::{expand_pool, ExpansionConfig, Origin, Pool};
use archpost_core::publish::PublishMode;
use archpost_core::schedule::{
    expected_daily_publications, run_daemon, simulate_days, spawn_health_endpoint, ItemQueue,
    PublisherTarget, SystemClock, VecItemQueue,
};
use archpost_core::storage::{Journal, Store};
use archpost_core::PostcardItem;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{token_env_var, AppConfig};

fn open_store(config: &AppConfig) -> Result<Store> {
    Store::open(&config.storage.journal_path, &config.storage.blob_dir)
        .context("opening journal for writing")
}

fn open_journal_read_only(config: &AppConfig) -> Result<Journal> {
    Journal::open_read_only(&config.storage.journal_path).with_context(|| {
        format!(
            "opening journal {} (generate some items first?)",
            config.storage.journal_path.display()
        )
    })
}

fn load_pool(config: &AppConfig) -> Result<Pool> {
    Pool::read_file(&config.pool.path)
        .with_context(|| format!("loading pool {}", config.pool.path.display()))
}

/// Resolve the rng seed: flag beats config; absent both, draw one and say so.
fn resolve_seed(flag: Option<u64>, config: &AppConfig) -> u64 {
    match flag.or(config.run.seed) {
        Some(seed) => seed,
        None => {
            let seed = rand::random::<u64>();
            eprintln!("no seed given; using {seed}");
            seed
        }
    }
}

pub fn seeds_import(config: &AppConfig, file: PathBuf) -> Result<()> {
    let pool = Pool::read_file(&file).with_context(|| format!("reading {}", file.display()))?;
    if let Some(parent) = config.pool.path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    pool.write_file(&config.pool.path)
        .with_context(|| format!("writing {}", config.pool.path.display()))?;

    let mut store = open_store(config)?;
    let already: std::collections::HashSet<String> = store
        .journal
        .snapshot()?
        .pool_entries
        .into_iter()
        .map(|e| e.text)
        .collect();
    let mut journaled = 0;
    for entry in pool.entries() {
        if !already.contains(&entry.text) {
            store.record_pool_entry(&entry.text, Origin::Seed)?;
            journaled += 1;
        }
    }
    println!(
        "imported {} keyphrases into {} ({journaled} journaled)",
        pool.len(),
        config.pool.path.display()
    );
    Ok(())
}

pub fn seeds_expand(config: &AppConfig, target: usize) -> Result<()> {
    let pool = load_pool(config)?;
    let before = pool.len();
    let backends = config.backends.build();
    let expanded = expand_pool(
        &pool,
        backends.expander.as_ref(),
        target,
        &ExpansionConfig::default(),
    )?;
    expanded.write_file(&config.pool.path)?;

    let mut store = open_store(config)?;
    let already: std::collections::HashSet<String> = store
        .journal
        .snapshot()?
        .pool_entries
        .into_iter()
        .map(|e| e.text)
        .collect();
    let mut journaled = 0;
    for entry in expanded.entries() {
        if !already.contains(&entry.text) {
            store.record_pool_entry(&entry.text, entry.origin)?;
            journaled += 1;
        }
    }
    println!(
        "expanded pool from {before} to {} keyphrases ({journaled} journaled)",
        expanded.len()
    );
    Ok(())
}

fn print_item(item: &PostcardItem, seq: u64) {
    println!("item {}", item.item_id);
    println!("  schema: {}", item.schema);
    println!("  keyphrases: {}", item.keyphrases.join(", "));
    if let Some(caption) = &item.caption {
        println!("  caption: {}", caption.text);
    }
    println!(
        "  final image: {}x{} {}",
        item.final_image.width, item.final_image.height, item.final_image.content_hash
    );
    println!("  retries: {}", item.retry_count);
    println!("  journal seq: {seq}");
}

pub fn run_one_item(config: &AppConfig, schema: SchemaId, seed: Option<u64>) -> Result<()> {
    let pool = load_pool(config)?;
    let backends = config.backends.build();
    let item_seed = resolve_seed(seed, config);
    let item = run_item(
        schema,
        &pool,
        item_seed,
        &backends,
        &config.run.to_run_config(),
    )?;
    let mut store = open_store(config)?;
    let seq = store.record_item(&item)?;
    print_item(&item, seq);
    Ok(())
}

pub fn run_batch_cmd(
    config: &AppConfig,
    schema: SchemaId,
    count: usize,
    seed: Option<u64>,
) -> Result<()> {
    let pool = load_pool(config)?;
    let backends = config.backends.build();
    let batch_seed = resolve_seed(seed, config);
    let outcome = run_batch(
        schema,
        count,
        &pool,
        batch_seed,
        &backends,
        &config.run.to_run_config(),
    )?;
    let mut store = open_store(config)?;
    for item in &outcome.items {
        store.record_item(item)?;
    }
    println!(
        "schema {schema}: {} items journaled, {} skipped (seed {batch_seed})",
        outcome.items.len(),
        outcome.skipped
    );
    Ok(())
}

static SHUTDOWN: AtomicBool = AtomicBool::new(false);

extern "C" fn handle_shutdown_signal(_: libc::c_int) {
    SHUTDOWN.store(true, Ordering::SeqCst);
}

fn install_signal_handlers() {
    let handler = handle_shutdown_signal as *const () as libc::sighandler_t;
    unsafe {
        libc::signal(libc::SIGINT, handler);
        libc::signal(libc::SIGTERM, handler);
    }
}

/// Items journaled but never dispatched to any platform, oldest first.
fn unpublished_queue(store: &Store) -> Result<VecItemQueue> {
    let snapshot = store.journal.snapshot()?;
    let published: std::collections::HashSet<&str> = snapshot
        .publications
        .iter()
        .map(|p| p.item_id.as_str())
        .collect();
    let mut items = Vec::new();
    for record in snapshot.items.values() {
        if !published.contains(record.item_id.as_str()) {
            items.push(record.rehydrate(&store.blobs)?);
        }
    }
    Ok(VecItemQueue::new(items))
}

pub fn daemon(config: &AppConfig) -> Result<()> {
    let schedule = config.schedule.to_schedule_config()?;
    let mut store = open_store(config)?;
    let mut queue = unpublished_queue(&store)?;
    let mut targets = Vec::new();
    for (template, adapter, mode) in config.publish.targets()? {
        let token = std::env::var(token_env_var(adapter.platform)).ok();
        if mode == PublishMode::Live && token.is_none() {
            bail!(
                "publish.{} is live but {} is not set",
                adapter.platform,
                token_env_var(adapter.platform)
            );
        }
        targets.push(PublisherTarget {
            template,
            adapter,
            mode,
            token,
            policy: Default::default(),
        });
    }
    if targets.is_empty() {
        bail!("no platform enabled in [publish]");
    }

    install_signal_handlers();
    let shutdown = Arc::new(AtomicBool::new(false));
    {
        // bridge the process-level flag into the clock
        let shutdown = shutdown.clone();
        std::thread::spawn(move || loop {
            if SHUTDOWN.load(Ordering::SeqCst) {
                shutdown.store(true, Ordering::SeqCst);
                return;
            }
            std::thread::sleep(std::time::Duration::from_millis(100));
        });
    }

    let last_tick = Arc::new(Mutex::new(None));
    if !config.schedule.health_addr.is_empty() {
        let addr = spawn_health_endpoint(&config.schedule.health_addr, last_tick.clone())?;
        log::info!("health endpoint on http://{addr}/healthz");
    }

    let seed = config.run.seed.unwrap_or_else(rand::random);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    log::info!(
        "daemon up: {} queued items, {} platforms, expecting {:.2} publications/day",
        queue.len(),
        targets.len(),
        expected_daily_publications(&schedule)
    );

    let mut clock = SystemClock::new(shutdown);
    let stats = run_daemon(
        &mut clock,
        &mut queue,
        &targets,
        &schedule,
        &mut rng,
        &mut store,
        Some(&last_tick),
    )?;
    println!(
        "daemon stopped: {} ticks, {} publish decisions, {} dispatched, {} empty-queue, {} failures",
        stats.ticks,
        stats.publish_decisions,
        stats.dispatched_items,
        stats.empty_queue_publishes,
        stats.publication_failures
    );
    Ok(())
}

pub fn eval_score(config: &AppConfig, schema: SchemaId) -> Result<()> {
    let mut store = open_store(config)?;
    let snapshot = store.journal.snapshot()?;
    let mut items = Vec::new();
    for record in snapshot.items.values() {
        if record.schema == schema {
            items.push(record.rehydrate(&store.blobs)?);
        }
    }
    if items.is_empty() {
        bail!("no journaled items for schema {schema}");
    }
    let backends = config.backends.build();
    let outcome = evaluation::score_batch(&items, backends.scorer.as_ref())?;
    for record in &outcome.records {
        store.record_score(record)?;
    }
    println!(
        "schema {schema}: scored {} items, {} failures",
        outcome.records.len(),
        outcome.failures
    );
    Ok(())
}

pub fn eval_compare(config: &AppConfig, csv: Option<PathBuf>) -> Result<()> {
    let journal = open_journal_read_only(config)?;
    let snapshot = journal.snapshot()?;
    let mut by_schema: std::collections::BTreeMap<SchemaId, Vec<_>> = Default::default();
    for (item_id, score) in &snapshot.scores {
        if let Some(item) = snapshot.items.get(item_id) {
            by_schema.entry(item.schema).or_default().push(score.clone());
        }
    }
    let mut reports = Vec::new();
    for (schema, scores) in &by_schema {
        reports.push(evaluation::aggregate(*schema, scores)?);
    }
    let table = evaluation::compare(&reports)?;
    print!("{}", evaluation::render_table(&table));
    if let Some(path) = csv {
        std::fs::write(&path, evaluation::render_csv(&table))
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

pub fn engage_import(config: &AppConfig, file: PathBuf) -> Result<()> {
    let reader = BufReader::new(
        std::fs::File::open(&file).with_context(|| format!("reading {}", file.display()))?,
    );
    let mut store = open_store(config)?;
    let summary = engagement::ingest_reactions(reader, &mut store)?;
    println!(
        "ingested {} reactions ({} malformed, {} duplicates, {} orphaned skipped)",
        summary.ingested, summary.malformed, summary.duplicates, summary.orphans
    );
    Ok(())
}

pub fn engage_report(config: &AppConfig, min_support: u64, csv: Option<PathBuf>) -> Result<()> {
    let journal = open_journal_read_only(config)?;
    let snapshot = journal.snapshot()?;
    let items: Vec<_> = snapshot.items.values().cloned().collect();
    let analysis = engagement::conversion_rates(&items, &snapshot.reactions, min_support)?;
    let report = &analysis.report;

    println!(
        "items: {}, overall conversion: {}% (min support {})",
        items.len(),
        report.overall_rate,
        report.min_support
    );
    if !analysis.orphans.is_empty() {
        println!("orphan reactions: {}", analysis.orphans.len());
    }
    println!();
    println!("{:>5}  {:>6}  {:>9}  keyphrase", "rate%", "items", "converted");
    for row in &report.rows {
        println!(
            "{:>5}  {:>6}  {:>9}  {}",
            row.rate, row.items, row.converted, row.keyphrase
        );
    }
    let split = engagement::categorize(report);
    println!();
    println!("more engaging ({} above overall):", split.more_engaging.len());
    for row in &split.more_engaging {
        println!("  {} ({}%)", row.keyphrase, row.rate);
    }
    println!("less engaging ({} below overall):", split.less_engaging.len());
    for row in &split.less_engaging {
        println!("  {} ({}%)", row.keyphrase, row.rate);
    }
    if let Some(path) = csv {
        std::fs::write(&path, engagement::render_csv(report))
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

pub fn sched_simulate(config: &AppConfig, days: u64, seed: Option<u64>) -> Result<()> {
    let schedule = config.schedule.to_schedule_config()?;
    schedule.validate()?;
    let seed = resolve_seed(seed, config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stats = simulate_days(days, &mut rng, &schedule);
    println!("days: {}", stats.days);
    println!("trial minutes per day: {}", schedule.window_minutes());
    println!(
        "publish probability: {:.6}",
        schedule.publish_probability
    );
    println!(
        "expected daily mean: {:.4}",
        expected_daily_publications(&schedule)
    );
    println!("mean: {:.4}", stats.mean);
    println!("variance: {:.4}", stats.variance);
    let max_day = stats.histogram.keys().max().copied().unwrap_or(0);
    let busiest = stats
        .histogram
        .iter()
        .max_by_key(|(_, days)| **days)
        .map(|(count, _)| *count)
        .unwrap_or(0);
    println!("busiest day count: {max_day}");
    println!("modal day count: {busiest}");
    Ok(())
}
