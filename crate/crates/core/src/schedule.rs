//! Stochastic publication schedule.
//!
//! Inside a daily local-time window, every minute is an independent
//! Bernoulli trial: with probability `publish_probability` the oldest
//! queued item goes out to all configured platforms. Outside the window
//! nothing happens. With the defaults (p = 1/80 over 10:00-18:59, 540
//! minutes) that is a mean of 6.75 publications per day.
//!
//! The process is memoryless on purpose: minutes missed during downtime
//! are skipped, never replayed, so the daily count stays Binomial(540, p).

use std::collections::VecDeque;
use std::io::Write as IoWrite;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, NaiveTime, Timelike, Utc};
use chrono_tz::Tz;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pipeline::PostcardItem;
use crate::publish::{
    publish, render, PlatformAdapter, PostTemplate, PublicationRecord, PublishMode, PublishStatus,
    PublisherPolicy,
};
use crate::storage::{RecordType, StorageError, Store};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub publish_probability: f64,
    pub window_start: NaiveTime,
    pub window_end_inclusive: NaiveTime,
    /// IANA zone name the window is anchored to.
    pub timezone: String,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            publish_probability: 1.0 / 80.0,
            window_start: NaiveTime::from_hms_opt(10, 0, 0).expect("valid time"),
            window_end_inclusive: NaiveTime::from_hms_opt(18, 59, 0).expect("valid time"),
            timezone: "Europe/Berlin".to_string(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("unresolvable timezone {0:?}")]
    InvalidTimezone(String),
    #[error("publish probability {0} outside [0,1]")]
    InvalidProbability(f64),
    #[error("window start {start} after end {end}")]
    InvalidWindow { start: NaiveTime, end: NaiveTime },
    #[error(transparent)]
    Storage(#[from] StorageError),
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<Tz, ScheduleError> {
        if !(0.0..=1.0).contains(&self.publish_probability) {
            return Err(ScheduleError::InvalidProbability(self.publish_probability));
        }
        if self.window_start > self.window_end_inclusive {
            return Err(ScheduleError::InvalidWindow {
                start: self.window_start,
                end: self.window_end_inclusive,
            });
        }
        self.timezone
            .parse::<Tz>()
            .map_err(|_| ScheduleError::InvalidTimezone(self.timezone.clone()))
    }

    /// Trial minutes per day: window length inclusive of both ends.
    pub fn window_minutes(&self) -> u32 {
        let minute = |t: NaiveTime| t.hour() * 60 + t.minute();
        minute(self.window_end_inclusive) - minute(self.window_start) + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Publish,
    Skip,
    OutsideWindow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickDecision {
    /// UTC timestamp truncated to the minute.
    pub minute: DateTime<Utc>,
    pub decision: Decision,
}

/// Evaluate one minute. Draws from the rng only inside the window, so
/// out-of-window minutes cannot perturb the stream.
pub fn tick<R: Rng + ?Sized>(
    now: DateTime<Utc>,
    rng: &mut R,
    cfg: &ScheduleConfig,
) -> Result<TickDecision, ScheduleError> {
    let tz = cfg.validate()?;
    let minute = now
        .with_second(0)
        .and_then(|t| t.with_nanosecond(0))
        .unwrap_or(now);
    let local = now.with_timezone(&tz);
    let minute_of_day = local.hour() * 60 + local.minute();
    let start = cfg.window_start.hour() * 60 + cfg.window_start.minute();
    let end = cfg.window_end_inclusive.hour() * 60 + cfg.window_end_inclusive.minute();

    let decision = if minute_of_day < start || minute_of_day > end {
        Decision::OutsideWindow
    } else if rng.random_bool(cfg.publish_probability) {
        Decision::Publish
    } else {
        Decision::Skip
    };
    Ok(TickDecision { minute, decision })
}

/// Window minutes times the per-minute probability.
pub fn expected_daily_publications(cfg: &ScheduleConfig) -> f64 {
    cfg.window_minutes() as f64 * cfg.publish_probability
}

#[derive(Debug, Clone, PartialEq)]
pub struct DayStats {
    pub days: u64,
    pub mean: f64,
    /// Sample variance of the per-day publication count.
    pub variance: f64,
    /// Daily count -> number of days that saw it.
    pub histogram: std::collections::BTreeMap<u32, u64>,
}

/// Run `n_days` of in-window Bernoulli trials and summarize the per-day
/// publication counts.
pub fn simulate_days<R: Rng + ?Sized>(n_days: u64, rng: &mut R, cfg: &ScheduleConfig) -> DayStats {
    let trials = cfg.window_minutes();
    let mut histogram = std::collections::BTreeMap::new();
    let mut sum = 0u64;
    let mut sum_sq = 0u128;
    for _ in 0..n_days {
        let mut count = 0u32;
        for _ in 0..trials {
            if rng.random_bool(cfg.publish_probability) {
                count += 1;
            }
        }
        *histogram.entry(count).or_insert(0) += 1;
        sum += count as u64;
        sum_sq += (count as u128) * (count as u128);
    }
    let n = n_days as f64;
    let mean = sum as f64 / n;
    let variance = if n_days > 1 {
        (sum_sq as f64 - n * mean * mean) / (n - 1.0)
    } else {
        0.0
    };
    DayStats {
        days: n_days,
        mean,
        variance,
        histogram,
    }
}

/// Minute source for the daemon loop. Returns `None` to stop.
pub trait MinuteClock {
    fn next_minute(&mut self) -> Option<DateTime<Utc>>;
}

/// Wall-clock minutes; sleeps to each boundary. Minutes that pass while
/// the process is suspended are skipped, never replayed.
pub struct SystemClock {
    shutdown: Arc<AtomicBool>,
}

impl SystemClock {
    pub fn new(shutdown: Arc<AtomicBool>) -> Self {
        SystemClock { shutdown }
    }
}

impl MinuteClock for SystemClock {
    fn next_minute(&mut self) -> Option<DateTime<Utc>> {
        let now = Utc::now();
        let next = (now + chrono::Duration::minutes(1))
            .with_second(0)
            .and_then(|t| t.with_nanosecond(0))
            .unwrap_or(now);
        loop {
            if self.shutdown.load(Ordering::Relaxed) {
                return None;
            }
            let remaining = next - Utc::now();
            if remaining <= chrono::Duration::zero() {
                return Some(Utc::now());
            }
            let step = remaining
                .to_std()
                .unwrap_or_default()
                .min(std::time::Duration::from_millis(200));
            std::thread::sleep(step);
        }
    }
}

/// Scripted minute sequence for tests.
pub struct FakeClock {
    minutes: VecDeque<DateTime<Utc>>,
}

impl FakeClock {
    pub fn new(minutes: impl IntoIterator<Item = DateTime<Utc>>) -> Self {
        FakeClock {
            minutes: minutes.into_iter().collect(),
        }
    }
}

impl MinuteClock for FakeClock {
    fn next_minute(&mut self) -> Option<DateTime<Utc>> {
        self.minutes.pop_front()
    }
}

/// FIFO source of publishable items.
pub trait ItemQueue {
    fn pop_oldest(&mut self) -> Option<PostcardItem>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct VecItemQueue {
    items: VecDeque<PostcardItem>,
}

impl VecItemQueue {
    pub fn new(items: impl IntoIterator<Item = PostcardItem>) -> Self {
        VecItemQueue {
            items: items.into_iter().collect(),
        }
    }
}

impl ItemQueue for VecItemQueue {
    fn pop_oldest(&mut self) -> Option<PostcardItem> {
        self.items.pop_front()
    }

    fn len(&self) -> usize {
        self.items.len()
    }
}

/// Everything needed to post to one platform.
pub struct PublisherTarget {
    pub template: PostTemplate,
    pub adapter: PlatformAdapter,
    pub mode: PublishMode,
    pub token: Option<String>,
    pub policy: PublisherPolicy,
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct DaemonStats {
    pub ticks: u64,
    pub publish_decisions: u64,
    pub dispatched_items: u64,
    pub empty_queue_publishes: u64,
    pub publication_failures: u64,
}

#[derive(Serialize)]
struct TickRecord<'a> {
    minute: DateTime<Utc>,
    decision: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    item_id: Option<&'a str>,
}

/// The daemon loop: one shared Bernoulli trial per minute, fanning a
/// publish out to every configured platform concurrently. Runs until the
/// clock stops. A failing platform is logged and journaled, never fatal.
pub fn run_daemon<R: Rng + ?Sized>(
    clock: &mut dyn MinuteClock,
    queue: &mut dyn ItemQueue,
    targets: &[PublisherTarget],
    cfg: &ScheduleConfig,
    rng: &mut R,
    store: &mut Store,
    last_tick: Option<&Arc<Mutex<Option<DateTime<Utc>>>>>,
) -> Result<DaemonStats, ScheduleError> {
    cfg.validate()?;
    let mut stats = DaemonStats::default();

    while let Some(now) = clock.next_minute() {
        let tick_decision = tick(now, rng, cfg)?;
        stats.ticks += 1;
        if let Some(shared) = last_tick {
            *shared.lock().expect("last tick lock") = Some(tick_decision.minute);
        }
        if tick_decision.decision != Decision::Publish {
            continue;
        }
        stats.publish_decisions += 1;

        let Some(item) = queue.pop_oldest() else {
            stats.empty_queue_publishes += 1;
            let payload = serde_json::to_value(TickRecord {
                minute: tick_decision.minute,
                decision: "publish_no_item",
                item_id: None,
            })
            .expect("tick record serializes");
            store.journal.append(RecordType::ScheduleTick, payload)?;
            continue;
        };

        let records = dispatch_all(&item, targets);
        let payload = serde_json::to_value(TickRecord {
            minute: tick_decision.minute,
            decision: "publish",
            item_id: Some(&item.item_id),
        })
        .expect("tick record serializes");
        store.journal.append(RecordType::ScheduleTick, payload)?;
        for record in &records {
            if record.status == PublishStatus::Failed {
                stats.publication_failures += 1;
            }
            store.record_publication(record)?;
        }
        stats.dispatched_items += 1;
    }
    Ok(stats)
}

/// Render and publish one item to every target, concurrently per
/// platform. Errors (auth, fixture mismatch, template) degrade to failed
/// records so the daemon survives any single platform.
pub fn dispatch_all(item: &PostcardItem, targets: &[PublisherTarget]) -> Vec<PublicationRecord> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = targets
            .iter()
            .map(|target| {
                scope.spawn(move || {
                    let failed = |attempt: u32| PublicationRecord {
                        item_id: item.item_id.clone(),
                        platform: target.adapter.platform,
                        posted_at: Utc::now(),
                        remote_id: None,
                        status: PublishStatus::Failed,
                        attempt,
                        rendered_body: None,
                    };
                    let post = match render(item, &target.template) {
                        Ok(post) => post,
                        Err(e) => {
                            log::error!("render for {}: {e}", target.adapter.platform);
                            return failed(1);
                        }
                    };
                    match publish(
                        &item.item_id,
                        &post,
                        &target.adapter,
                        target.mode,
                        target.token.as_deref(),
                        &target.policy,
                    ) {
                        Ok(record) => record,
                        Err(e) => {
                            log::error!("publish to {}: {e}", target.adapter.platform);
                            failed(1)
                        }
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("publisher thread"))
            .collect()
    })
}

/// Minimal health endpoint: `GET /healthz` answers 200 with the last tick
/// minute as JSON. Runs on a detached thread.
pub fn spawn_health_endpoint(
    addr: &str,
    last_tick: Arc<Mutex<Option<DateTime<Utc>>>>,
) -> std::io::Result<std::net::SocketAddr> {
    let listener = std::net::TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut buf = [0u8; 1024];
            let _ = std::io::Read::read(&mut stream, &mut buf);
            let tick = last_tick
                .lock()
                .ok()
                .and_then(|t| *t)
                .map(|t| format!("\"{}\"", t.to_rfc3339()))
                .unwrap_or_else(|| "null".to_string());
            let body = format!("{{\"last_tick\":{tick}}}");
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            );
        }
    });
    Ok(local)
}
