//! Operator configuration: a TOML file with `APP_<SECTION>_<KEY>`
//! environment overrides. Platform credentials never live in the file;
//! they come from `PUBLISH_<PLATFORM>_TOKEN`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use archpost_core::backend::http::{HttpBackend, RetryPolicy, RoleEndpoints};
use archpost_core::backend::mock::MockBackend;
use archpost_core::backend::Backends;
use archpost_core::pipeline::RunConfig;
use archpost_core::publish::{PlatformAdapter, PlatformId, PostTemplate, PublishMode};
use archpost_core::schedule::ScheduleConfig;
use chrono::NaiveTime;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub pool: PoolSection,
    pub storage: StorageSection,
    pub run: RunSection,
    pub backends: BackendsSection,
    pub schedule: ScheduleSection,
    pub publish: PublishSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    pub path: PathBuf,
}

impl Default for PoolSection {
    fn default() -> Self {
        PoolSection {
            path: PathBuf::from("data/pool.txt"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageSection {
    pub journal_path: PathBuf,
    pub blob_dir: PathBuf,
}

impl Default for StorageSection {
    fn default() -> Self {
        StorageSection {
            journal_path: PathBuf::from("data/journal.jsonl"),
            blob_dir: PathBuf::from("data/blobs"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Base rng seed; absent means a fresh one per invocation.
    pub seed: Option<u64>,
    pub max_safety_retries: u32,
    pub min_keyphrases: usize,
    pub max_keyphrases: usize,
    pub max_prompt_chars: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        let run = RunConfig::default();
        RunSection {
            seed: None,
            max_safety_retries: run.max_safety_retries,
            min_keyphrases: run.min_keyphrases,
            max_keyphrases: run.max_keyphrases,
            max_prompt_chars: run.max_prompt_chars,
        }
    }
}

impl RunSection {
    pub fn to_run_config(&self) -> RunConfig {
        RunConfig {
            max_safety_retries: self.max_safety_retries,
            min_keyphrases: self.min_keyphrases,
            max_keyphrases: self.max_keyphrases,
            max_prompt_chars: self.max_prompt_chars,
        }
    }
}

/// Per-role backend endpoints: `"mock"` or a base URL.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsSection {
    pub generate: String,
    pub img2img: String,
    pub caption: String,
    pub expand: String,
    pub score: String,
    /// Salt folded into every mock digest.
    pub mock_salt: u64,
    /// Deny-list substrings for the mock safety filter.
    pub mock_deny: Vec<String>,
    /// Fraction of mock generations rejected deterministically.
    pub mock_reject_fraction: f64,
}

impl Default for BackendsSection {
    fn default() -> Self {
        BackendsSection {
            generate: "mock".into(),
            img2img: "mock".into(),
            caption: "mock".into(),
            expand: "mock".into(),
            score: "mock".into(),
            mock_salt: 0,
            mock_deny: Vec::new(),
            mock_reject_fraction: 0.0,
        }
    }
}

impl BackendsSection {
    fn mock(&self) -> MockBackend {
        MockBackend::new(self.mock_salt)
            .with_deny_substrings(self.mock_deny.iter().cloned())
            .with_reject_fraction(self.mock_reject_fraction)
    }

    /// Wire up one handle per role, mixing mocks and HTTP endpoints as
    /// configured.
    pub fn build(&self) -> Backends {
        let mock = Arc::new(self.mock());
        let url = |role: &str| -> Option<String> {
            if role == "mock" {
                None
            } else {
                Some(role.to_string())
            }
        };
        let endpoints = RoleEndpoints {
            generate: url(&self.generate),
            img2img: url(&self.img2img),
            caption: url(&self.caption),
            expand: url(&self.expand),
            score: url(&self.score),
        };
        let http = Arc::new(HttpBackend::new(endpoints, RetryPolicy::default()));
        Backends {
            generator: if self.generate == "mock" {
                mock.clone()
            } else {
                http.clone()
            },
            refiner: if self.img2img == "mock" {
                mock.clone()
            } else {
                http.clone()
            },
            captioner: if self.caption == "mock" {
                mock.clone()
            } else {
                http.clone()
            },
            expander: if self.expand == "mock" {
                mock.clone()
            } else {
                http.clone()
            },
            scorer: if self.score == "mock" { mock } else { http },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub publish_probability: f64,
    /// `HH:MM`, local to `timezone`.
    pub window_start: String,
    pub window_end_inclusive: String,
    pub timezone: String,
    /// Bind address for `GET /healthz`; empty disables it.
    pub health_addr: String,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            publish_probability: 1.0 / 80.0,
            window_start: "10:00".into(),
            window_end_inclusive: "18:59".into(),
            timezone: "Europe/Berlin".into(),
            health_addr: String::new(),
        }
    }
}

impl ScheduleSection {
    pub fn to_schedule_config(&self) -> Result<ScheduleConfig, ConfigError> {
        let parse_time = |s: &str| {
            NaiveTime::parse_from_str(s, "%H:%M")
                .map_err(|e| ConfigError::Invalid(format!("time {s:?}: {e}")))
        };
        Ok(ScheduleConfig {
            publish_probability: self.publish_probability,
            window_start: parse_time(&self.window_start)?,
            window_end_inclusive: parse_time(&self.window_end_inclusive)?,
            timezone: self.timezone.clone(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PublishSection {
    /// Mode for platforms without an explicit one.
    pub default_mode: PublishMode,
    pub telegram: PlatformSection,
    pub mastodon: PlatformSection,
    pub tumblr: PlatformSection,
    pub bluesky: PlatformSection,
}

impl Default for PublishSection {
    fn default() -> Self {
        PublishSection {
            default_mode: PublishMode::DryRun,
            telegram: PlatformSection::default(),
            mastodon: PlatformSection::default(),
            tumblr: PlatformSection::default(),
            bluesky: PlatformSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformSection {
    pub enabled: bool,
    /// `live`, `dry_run` or `fixture`; empty inherits `default_mode`.
    pub mode: String,
    pub endpoint: String,
    pub template: String,
    /// 0 means the platform's conventional limit.
    pub max_chars: usize,
    pub fixture_path: String,
}

impl Default for PlatformSection {
    fn default() -> Self {
        PlatformSection {
            enabled: true,
            mode: String::new(),
            endpoint: String::new(),
            template: "{title}\n{caption}\n{tags}".into(),
            max_chars: 0,
            fixture_path: String::new(),
        }
    }
}

impl PublishSection {
    fn section(&self, platform: PlatformId) -> &PlatformSection {
        match platform {
            PlatformId::Telegram => &self.telegram,
            PlatformId::Mastodon => &self.mastodon,
            PlatformId::Tumblr => &self.tumblr,
            PlatformId::Bluesky => &self.bluesky,
        }
    }

    /// Template + adapter + mode for every enabled platform.
    pub fn targets(&self) -> Result<Vec<(PostTemplate, PlatformAdapter, PublishMode)>, ConfigError> {
        let mut out = Vec::new();
        for platform in PlatformId::ALL {
            let section = self.section(platform);
            if !section.enabled {
                continue;
            }
            let mode = if section.mode.is_empty() {
                self.default_mode
            } else {
                match section.mode.as_str() {
                    "live" => PublishMode::Live,
                    "dry_run" => PublishMode::DryRun,
                    "fixture" => PublishMode::Fixture,
                    other => {
                        return Err(ConfigError::Invalid(format!(
                            "publish.{platform}.mode {other:?}"
                        )))
                    }
                }
            };
            let template = PostTemplate {
                platform,
                body_template: section.template.clone(),
                max_chars: if section.max_chars == 0 {
                    platform.default_max_chars()
                } else {
                    section.max_chars
                },
            };
            let mut adapter = PlatformAdapter::default_for(platform, section.endpoint.clone());
            if !section.fixture_path.is_empty() {
                adapter.fixture_path = Some(section.fixture_path.clone());
            }
            out.push((template, adapter, mode));
        }
        Ok(out)
    }
}

/// Env var carrying the credential for a platform.
pub fn token_env_var(platform: PlatformId) -> String {
    format!("PUBLISH_{}_TOKEN", platform.as_str().to_uppercase())
}

impl AppConfig {
    /// Load the file (when present), then apply `APP_*` env overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut value: toml::Value = match path {
            Some(path) => {
                let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                    path: path.to_path_buf(),
                    source,
                })?;
                let table: toml::Table = raw
                    .parse()
                    .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
                toml::Value::Table(table)
            }
            None => toml::Value::Table(Default::default()),
        };
        apply_env_overrides(&mut value, std::env::vars());
        let config: AppConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.schedule.publish_probability) {
            return Err(ConfigError::Invalid(format!(
                "schedule.publish_probability {} outside [0,1]",
                self.schedule.publish_probability
            )));
        }
        if self.run.min_keyphrases == 0 || self.run.min_keyphrases > self.run.max_keyphrases {
            return Err(ConfigError::Invalid(format!(
                "run keyphrase range [{}, {}] is not usable",
                self.run.min_keyphrases, self.run.max_keyphrases
            )));
        }
        if self.run.max_safety_retries == 0 {
            return Err(ConfigError::Invalid(
                "run.max_safety_retries must be at least 1".into(),
            ));
        }
        self.schedule.to_schedule_config()?.validate().map_err(|e| {
            ConfigError::Invalid(e.to_string())
        })?;
        Ok(())
    }
}

/// Apply `APP_<SECTION>_<KEY>` overrides onto the parsed TOML tree.
/// Key segments match greedily so multi-word keys like `journal_path`
/// resolve; unmatched trailing segments become a new key in the deepest
/// table reached.
fn apply_env_overrides(value: &mut toml::Value, vars: impl Iterator<Item = (String, String)>) {
    let mut overrides: BTreeMap<String, String> = BTreeMap::new();
    for (key, val) in vars {
        if let Some(rest) = key.strip_prefix("APP_") {
            overrides.insert(rest.to_lowercase(), val);
        }
    }
    for (path, raw) in overrides {
        let segments: Vec<&str> = path.split('_').collect();
        if segments.len() < 2 {
            continue;
        }
        set_path(value, &segments, &raw);
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn set_path(node: &mut toml::Value, segments: &[&str], raw: &str) {
    let Some(table) = node.as_table_mut() else {
        return;
    };
    // longest existing-key match first, so journal_path beats journal.path
    for take in (1..=segments.len()).rev() {
        let candidate = segments[..take].join("_");
        if table.contains_key(&candidate) {
            if take == segments.len() {
                table.insert(candidate, parse_scalar(raw));
            } else if let Some(child) = table.get_mut(&candidate) {
                set_path(child, &segments[take..], raw);
            }
            return;
        }
    }
    // nothing matches: known section tables recurse, otherwise this is a
    // fresh key in the current table
    let head = segments[0];
    if segments.len() > 1 && table.get(head).map(|v| v.is_table()).unwrap_or(false) {
        set_path(table.get_mut(head).expect("checked"), &segments[1..], raw);
        return;
    }
    if segments.len() == 1 {
        table.insert(head.to_string(), parse_scalar(raw));
    } else {
        // build the section table on demand (config file may be minimal)
        let entry = table
            .entry(head.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
        set_path(entry, &segments[1..], raw);
    }
}
