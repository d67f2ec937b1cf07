//! Append-only JSON Lines journal plus a content-addressed blob store.
//!
//! The journal is the single source of truth for analytics: pool entries,
//! items, publications, scores, reactions and schedule ticks all land here
//! as one JSON object per line with keys `{seq, type, ts, payload}`. Image
//! bytes never enter the journal; item records carry content hashes and
//! the bytes live under `blobs/<first2>/<hash>.png`, written before the
//! referencing record.
//!
//! Exactly one writer owns the journal; readers scan immutable snapshots.
//! A torn final line (crash mid-append) is detected at open: reads ignore
//! it, appends refuse until [`Journal::repair`] truncates it away.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, Write};
use std::ops::{Bound, RangeBounds};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backend::{ImageArtifact, ScoreRecord};
use crate::engagement::ReactionEvent;
use crate::pipeline::{PostcardItem, SchemaId};
use crate::pool::Origin;
use crate::publish::PublicationRecord;
use crate::query::{Caption, Query};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordType {
    PoolEntry,
    Item,
    Publication,
    Score,
    Reaction,
    ScheduleTick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub seq: u64,
    #[serde(rename = "type")]
    pub record_type: RecordType,
    #[serde(rename = "ts")]
    pub recorded_at: DateTime<Utc>,
    pub payload: serde_json::Value,
}

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("journal has a torn final line at byte {offset}; repair before appending")]
    CorruptTail { offset: u64 },
    #[error("corrupt journal record at line {line} (seq {seq_hint} expected): {message}")]
    CorruptRecord {
        line: u64,
        seq_hint: u64,
        message: String,
    },
    #[error("journal opened read-only")]
    ReadOnly,
    #[error("record payload is not usable: {0}")]
    InvalidPayload(String),
    #[error("storage device is full")]
    StorageFull,
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for StorageError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::StorageFull {
            StorageError::StorageFull
        } else {
            StorageError::Io(e)
        }
    }
}

/// Journal-side view of an image: hash reference into the blob store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub content_hash: String,
    pub width: u32,
    pub height: u32,
    pub backend_id: String,
}

impl From<&ImageArtifact> for ImageRef {
    fn from(a: &ImageArtifact) -> Self {
        ImageRef {
            content_hash: a.content_hash.clone(),
            width: a.width,
            height: a.height,
            backend_id: a.backend_id.clone(),
        }
    }
}

/// Journal payload for one postcard item (bytes replaced by blob refs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub schema: SchemaId,
    pub initial_query: Query,
    pub caption: Option<Caption>,
    pub refined_query: Option<Query>,
    pub initial_image: Option<ImageRef>,
    pub final_image: ImageRef,
    pub keyphrases: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub retry_count: u32,
    pub item_seed: u64,
    pub gen_seeds: Vec<u64>,
}

impl From<&PostcardItem> for ItemRecord {
    fn from(item: &PostcardItem) -> Self {
        ItemRecord {
            item_id: item.item_id.clone(),
            schema: item.schema,
            initial_query: item.initial_query.clone(),
            caption: item.caption.clone(),
            refined_query: item.refined_query.clone(),
            initial_image: item.initial_image.as_ref().map(ImageRef::from),
            final_image: ImageRef::from(&item.final_image),
            keyphrases: item.keyphrases.clone(),
            created_at: item.created_at,
            retry_count: item.retry_count,
            item_seed: item.item_seed,
            gen_seeds: item.gen_seeds.clone(),
        }
    }
}

impl ItemRecord {
    /// Rebuild the full in-memory item, loading image bytes back out of
    /// the blob store.
    pub fn rehydrate(&self, blobs: &BlobStore) -> Result<PostcardItem, StorageError> {
        let load = |r: &ImageRef| -> Result<ImageArtifact, StorageError> {
            let bytes = blobs.get(&r.content_hash)?;
            Ok(ImageArtifact::from_bytes(
                bytes,
                r.width,
                r.height,
                &r.backend_id,
            ))
        };
        let initial_image = self.initial_image.as_ref().map(&load).transpose()?;
        Ok(PostcardItem {
            item_id: self.item_id.clone(),
            schema: self.schema,
            initial_query: self.initial_query.clone(),
            caption: self.caption.clone(),
            refined_query: self.refined_query.clone(),
            initial_image,
            final_image: load(&self.final_image)?,
            keyphrases: self.keyphrases.clone(),
            created_at: self.created_at,
            retry_count: self.retry_count,
            item_seed: self.item_seed,
            gen_seeds: self.gen_seeds.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntryRecord {
    pub text: String,
    pub origin: Origin,
}

/// Deduplicated, keyed views over one journal scan.
///
/// Items keep the first record per id (items are immutable), scores keep
/// the last per item (a re-score supersedes), reactions and publications
/// dedup on their identity keys.
#[derive(Debug, Default)]
pub struct Snapshot {
    pub items: IndexMap<String, ItemRecord>,
    pub reactions: Vec<ReactionEvent>,
    pub scores: IndexMap<String, ScoreRecord>,
    pub publications: Vec<PublicationRecord>,
    pub pool_entries: Vec<PoolEntryRecord>,
}

type PublicationKey = (String, String, u32);

fn publication_key(payload: &serde_json::Value) -> Result<PublicationKey, StorageError> {
    let field = |name: &str| {
        payload
            .get(name)
            .ok_or_else(|| StorageError::InvalidPayload(format!("publication missing {name}")))
    };
    let item_id = field("item_id")?
        .as_str()
        .ok_or_else(|| StorageError::InvalidPayload("publication item_id not a string".into()))?
        .to_string();
    let platform = field("platform")?
        .as_str()
        .ok_or_else(|| StorageError::InvalidPayload("publication platform not a string".into()))?
        .to_string();
    let attempt = field("attempt")?
        .as_u64()
        .ok_or_else(|| StorageError::InvalidPayload("publication attempt not a number".into()))?
        as u32;
    Ok((item_id, platform, attempt))
}

/// Append-only journal file. One instance per process may be writable.
pub struct Journal {
    path: PathBuf,
    writable: bool,
    next_seq: u64,
    /// Byte length of the validated prefix (everything scan will read).
    valid_len: u64,
    /// Set when bytes past `valid_len` form a torn final line.
    torn: bool,
    publication_keys: HashSet<PublicationKey>,
}

impl Journal {
    /// Open for writing, creating the file if needed. The whole file is
    /// validated: a torn final line is tolerated (appends refuse until
    /// [`repair`](Self::repair)); corruption before that is an error.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        if !path.exists() {
            File::create(&path)?;
        }
        let mut journal = Journal {
            path,
            writable: true,
            next_seq: 1,
            valid_len: 0,
            torn: false,
            publication_keys: HashSet::new(),
        };
        journal.validate_existing()?;
        Ok(journal)
    }

    /// Open for scanning only. Appends fail with `ReadOnly`.
    pub fn open_read_only(path: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let path = path.into();
        let mut journal = Journal {
            path,
            writable: false,
            next_seq: 1,
            valid_len: 0,
            torn: false,
            publication_keys: HashSet::new(),
        };
        journal.validate_existing()?;
        Ok(journal)
    }

    fn validate_existing(&mut self) -> Result<(), StorageError> {
        let bytes = std::fs::read(&self.path)?;
        let mut offset = 0usize;
        let mut line_no = 0u64;
        while offset < bytes.len() {
            line_no += 1;
            let line_start = offset;
            match bytes[offset..].iter().position(|&b| b == b'\n') {
                Some(rel) => {
                    let line = &bytes[line_start..line_start + rel];
                    offset = line_start + rel + 1;
                    match serde_json::from_slice::<JournalRecord>(line) {
                        Ok(record) => {
                            if record.record_type == RecordType::Publication {
                                if let Ok(key) = publication_key(&record.payload) {
                                    self.publication_keys.insert(key);
                                }
                            }
                            self.next_seq = record.seq + 1;
                            self.valid_len = offset as u64;
                        }
                        Err(e) => {
                            // A bad line that nothing follows is a torn
                            // tail; earlier corruption is unrecoverable.
                            if offset >= bytes.len() {
                                self.torn = true;
                                return Ok(());
                            }
                            return Err(StorageError::CorruptRecord {
                                line: line_no,
                                seq_hint: self.next_seq,
                                message: e.to_string(),
                            });
                        }
                    }
                }
                None => {
                    // trailing bytes without a newline: torn final line
                    self.torn = true;
                    return Ok(());
                }
            }
        }
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn is_torn(&self) -> bool {
        self.torn
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Truncate a torn final line so appends can continue. Returns whether
    /// anything was cut.
    pub fn repair(&mut self) -> Result<bool, StorageError> {
        if !self.torn {
            return Ok(false);
        }
        if !self.writable {
            return Err(StorageError::ReadOnly);
        }
        let file = OpenOptions::new().write(true).open(&self.path)?;
        file.set_len(self.valid_len)?;
        file.sync_data()?;
        self.torn = false;
        Ok(true)
    }

    /// Durably append one record and return its assigned seq.
    ///
    /// Publication payloads are idempotent on `(item_id, platform,
    /// attempt)`: re-appending an already-journaled key is a no-op that
    /// returns 0.
    pub fn append(
        &mut self,
        record_type: RecordType,
        payload: serde_json::Value,
    ) -> Result<u64, StorageError> {
        if !self.writable {
            return Err(StorageError::ReadOnly);
        }
        if self.torn {
            return Err(StorageError::CorruptTail {
                offset: self.valid_len,
            });
        }
        if record_type == RecordType::Publication {
            let key = publication_key(&payload)?;
            if !self.publication_keys.insert(key) {
                return Ok(0);
            }
        }
        let record = JournalRecord {
            seq: self.next_seq,
            record_type,
            recorded_at: Utc::now(),
            payload,
        };
        let mut line = serde_json::to_vec(&record)
            .map_err(|e| StorageError::InvalidPayload(e.to_string()))?;
        line.push(b'\n');

        let mut file = OpenOptions::new().append(true).open(&self.path)?;
        file.write_all(&line)?;
        file.sync_data()?;

        self.valid_len += line.len() as u64;
        self.next_seq += 1;
        Ok(record.seq)
    }

    /// Iterate records in seq order, optionally filtered by type and seq
    /// range. A torn tail is never yielded.
    pub fn scan(
        &self,
        filter: Option<RecordType>,
        range: impl RangeBounds<u64>,
    ) -> Result<ScanIter, StorageError> {
        let mut file = File::open(&self.path)?;
        file.rewind()?;
        let reader = BufReader::new(file.take(self.valid_len));
        let lo = match range.start_bound() {
            Bound::Included(&s) => s,
            Bound::Excluded(&s) => s + 1,
            Bound::Unbounded => 0,
        };
        let hi = match range.end_bound() {
            Bound::Included(&s) => s,
            Bound::Excluded(&s) => s.saturating_sub(1),
            Bound::Unbounded => u64::MAX,
        };
        Ok(ScanIter {
            reader,
            filter,
            lo,
            hi,
            line_no: 0,
            last_seq: 0,
            fused: false,
        })
    }

    /// Materialize the deduplicated views analytics run on.
    pub fn snapshot(&self) -> Result<Snapshot, StorageError> {
        let mut snapshot = Snapshot::default();
        let mut seen_reactions: HashSet<(String, String, String, String)> = HashSet::new();
        let mut seen_publications: HashSet<PublicationKey> = HashSet::new();
        let mut seen_pool: HashSet<String> = HashSet::new();
        let bad =
            |seq: u64, e: serde_json::Error| StorageError::InvalidPayload(format!("seq {seq}: {e}"));

        for record in self.scan(None, ..)? {
            let record = record?;
            match record.record_type {
                RecordType::Item => {
                    let item: ItemRecord =
                        serde_json::from_value(record.payload).map_err(|e| bad(record.seq, e))?;
                    snapshot.items.entry(item.item_id.clone()).or_insert(item);
                }
                RecordType::Reaction => {
                    let reaction: ReactionEvent =
                        serde_json::from_value(record.payload).map_err(|e| bad(record.seq, e))?;
                    if seen_reactions.insert(reaction.dedup_key()) {
                        snapshot.reactions.push(reaction);
                    }
                }
                RecordType::Score => {
                    let score: ScoreRecord =
                        serde_json::from_value(record.payload).map_err(|e| bad(record.seq, e))?;
                    snapshot.scores.insert(score.item_id.clone(), score);
                }
                RecordType::Publication => {
                    let publication: PublicationRecord =
                        serde_json::from_value(record.payload).map_err(|e| bad(record.seq, e))?;
                    let key = (
                        publication.item_id.clone(),
                        publication.platform.as_str().to_string(),
                        publication.attempt,
                    );
                    if seen_publications.insert(key) {
                        snapshot.publications.push(publication);
                    }
                }
                RecordType::PoolEntry => {
                    let entry: PoolEntryRecord =
                        serde_json::from_value(record.payload).map_err(|e| bad(record.seq, e))?;
                    if seen_pool.insert(entry.text.clone()) {
                        snapshot.pool_entries.push(entry);
                    }
                }
                RecordType::ScheduleTick => {}
            }
        }
        Ok(snapshot)
    }
}

pub struct ScanIter {
    reader: BufReader<std::io::Take<File>>,
    filter: Option<RecordType>,
    lo: u64,
    hi: u64,
    line_no: u64,
    last_seq: u64,
    fused: bool,
}

impl Iterator for ScanIter {
    type Item = Result<JournalRecord, StorageError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.fused {
            return None;
        }
        loop {
            let mut line = String::new();
            match self.reader.read_line(&mut line) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    self.fused = true;
                    return Some(Err(e.into()));
                }
            }
            self.line_no += 1;
            let record: JournalRecord = match serde_json::from_str(line.trim_end_matches('\n')) {
                Ok(r) => r,
                Err(e) => {
                    self.fused = true;
                    return Some(Err(StorageError::CorruptRecord {
                        line: self.line_no,
                        seq_hint: self.last_seq + 1,
                        message: e.to_string(),
                    }));
                }
            };
            self.last_seq = record.seq;
            if record.seq > self.hi {
                return None;
            }
            if record.seq < self.lo {
                continue;
            }
            if let Some(filter) = self.filter {
                if record.record_type != filter {
                    continue;
                }
            }
            return Some(Ok(record));
        }
    }
}

/// Content-addressed image payload store: `<root>/<first2>/<hash>.png`.
#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        BlobStore { root: root.into() }
    }

    pub fn path_for(&self, hash: &str) -> PathBuf {
        let prefix = &hash[..2.min(hash.len())];
        self.root.join(prefix).join(format!("{hash}.png"))
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.path_for(hash).exists()
    }

    /// Store bytes under their hash. Existing blobs are left untouched;
    /// new ones are written to a temp file and renamed into place.
    pub fn put(&self, hash: &str, bytes: &[u8]) -> Result<PathBuf, StorageError> {
        let path = self.path_for(hash);
        if path.exists() {
            return Ok(path);
        }
        let dir = path.parent().expect("blob path has parent");
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".{hash}.tmp"));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn get(&self, hash: &str) -> Result<Vec<u8>, StorageError> {
        Ok(std::fs::read(self.path_for(hash))?)
    }
}

/// Journal and blob store bound together: the write path used by the CLI
/// and the daemon.
pub struct Store {
    pub journal: Journal,
    pub blobs: BlobStore,
}

impl Store {
    pub fn open(journal_path: impl Into<PathBuf>, blob_root: impl Into<PathBuf>) -> Result<Self, StorageError> {
        Ok(Store {
            journal: Journal::open(journal_path)?,
            blobs: BlobStore::new(blob_root),
        })
    }

    /// Blob-then-record write of one finished item.
    pub fn record_item(&mut self, item: &PostcardItem) -> Result<u64, StorageError> {
        if let Some(initial) = &item.initial_image {
            self.blobs.put(&initial.content_hash, &initial.bytes)?;
        }
        self.blobs
            .put(&item.final_image.content_hash, &item.final_image.bytes)?;
        let record = ItemRecord::from(item);
        let payload = serde_json::to_value(&record)
            .map_err(|e| StorageError::InvalidPayload(e.to_string()))?;
        self.journal.append(RecordType::Item, payload)
    }

    pub fn record_pool_entry(&mut self, text: &str, origin: Origin) -> Result<u64, StorageError> {
        let payload = serde_json::to_value(PoolEntryRecord {
            text: text.to_string(),
            origin,
        })
        .map_err(|e| StorageError::InvalidPayload(e.to_string()))?;
        self.journal.append(RecordType::PoolEntry, payload)
    }

    pub fn record_score(&mut self, score: &ScoreRecord) -> Result<u64, StorageError> {
        let payload = serde_json::to_value(score)
            .map_err(|e| StorageError::InvalidPayload(e.to_string()))?;
        self.journal.append(RecordType::Score, payload)
    }

    pub fn record_publication(&mut self, publication: &PublicationRecord) -> Result<u64, StorageError> {
        let payload = serde_json::to_value(publication)
            .map_err(|e| StorageError::InvalidPayload(e.to_string()))?;
        self.journal.append(RecordType::Publication, payload)
    }

    pub fn record_reaction(&mut self, reaction: &ReactionEvent) -> Result<u64, StorageError> {
        let payload = serde_json::to_value(reaction)
            .map_err(|e| StorageError::InvalidPayload(e.to_string()))?;
        self.journal.append(RecordType::Reaction, payload)
    }
}
