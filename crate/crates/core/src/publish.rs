//! Per-platform rendering and dispatch of postcard items.
//!
//! Rendering substitutes `{title}`, `{caption}` and `{tags}` into a
//! platform template and truncates at a word boundary to the platform's
//! length budget. Dispatch goes through one "create post with image" HTTP
//! call per platform, with three operating modes:
//!
//! - `live`: real call, 3 attempts with exponential backoff; 401/403 is
//!   terminal.
//! - `dry_run`: no network at all; the rendered post is journaled.
//! - `fixture`: replays a recorded exchange and requires the request body
//!   to match it byte-for-byte.
//!
//! Request bodies use a fixed multipart boundary so identical posts are
//! byte-identical, which is what makes fixture replay exact.

use std::path::Path;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::backend::http::RetryPolicy;
use crate::backend::ImageArtifact;
use crate::pipeline::PostcardItem;

/// Fixed multipart boundary: rendering the same post twice must produce
/// byte-identical request bodies.
const MULTIPART_BOUNDARY: &str = "----archpost-multipart-2f8a91c4";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlatformId {
    Telegram,
    Mastodon,
    Tumblr,
    Bluesky,
}

impl PlatformId {
    pub const ALL: [PlatformId; 4] = [
        PlatformId::Telegram,
        PlatformId::Mastodon,
        PlatformId::Tumblr,
        PlatformId::Bluesky,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlatformId::Telegram => "telegram",
            PlatformId::Mastodon => "mastodon",
            PlatformId::Tumblr => "tumblr",
            PlatformId::Bluesky => "bluesky",
        }
    }

    /// Conventional length budget for a post body on this platform.
    pub fn default_max_chars(self) -> usize {
        match self {
            PlatformId::Telegram => 1024,
            PlatformId::Mastodon => 500,
            PlatformId::Tumblr => 4096,
            PlatformId::Bluesky => 300,
        }
    }
}

impl std::str::FromStr for PlatformId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "telegram" => Ok(PlatformId::Telegram),
            "mastodon" => Ok(PlatformId::Mastodon),
            "tumblr" => Ok(PlatformId::Tumblr),
            "bluesky" => Ok(PlatformId::Bluesky),
            other => Err(format!("unknown platform {other:?}")),
        }
    }
}

impl std::fmt::Display for PlatformId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Post body template. `{caption}` is mandatory; `{title}` and `{tags}`
/// are optional placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostTemplate {
    pub platform: PlatformId,
    pub body_template: String,
    pub max_chars: usize,
}

impl PostTemplate {
    pub fn default_for(platform: PlatformId) -> Self {
        PostTemplate {
            platform,
            body_template: "{title}\n{caption}\n{tags}".to_string(),
            max_chars: platform.default_max_chars(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPost {
    pub body: String,
    pub image: ImageArtifact,
    pub alt_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PublishStatus {
    Ok,
    DryRun,
    Failed,
}

/// Journal payload for one publish attempt. `(item_id, platform, attempt)`
/// is the idempotency key enforced by storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicationRecord {
    pub item_id: String,
    pub platform: PlatformId,
    pub posted_at: DateTime<Utc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remote_id: Option<String>,
    pub status: PublishStatus,
    pub attempt: u32,
    /// Rendered body, kept for dry runs so the journal shows what would
    /// have gone out.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rendered_body: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PublishMode {
    Live,
    DryRun,
    Fixture,
}

/// How to reach one platform: endpoint, auth header shape and the
/// multipart field names its upload call expects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlatformAdapter {
    pub platform: PlatformId,
    pub endpoint: String,
    /// Header name carrying credentials.
    pub auth_header: String,
    /// Header value with `{token}` replaced by the platform credential.
    pub auth_value_template: String,
    pub body_field: String,
    pub image_field: String,
    pub alt_field: String,
    /// JSON field of the response that carries the created post id.
    pub remote_id_field: String,
    /// Fixture file for `fixture` mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixture_path: Option<String>,
}

impl PlatformAdapter {
    pub fn default_for(platform: PlatformId, endpoint: impl Into<String>) -> Self {
        let (body_field, image_field) = match platform {
            PlatformId::Telegram => ("caption", "photo"),
            PlatformId::Mastodon => ("status", "file"),
            PlatformId::Tumblr => ("caption", "data"),
            PlatformId::Bluesky => ("text", "image"),
        };
        PlatformAdapter {
            platform,
            endpoint: endpoint.into(),
            auth_header: "Authorization".to_string(),
            auth_value_template: "Bearer {token}".to_string(),
            body_field: body_field.to_string(),
            image_field: image_field.to_string(),
            alt_field: "alt_text".to_string(),
            remote_id_field: "id".to_string(),
            fixture_path: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PublishError {
    #[error("template references unknown placeholder {{{0}}}")]
    Template(String),
    #[error("template for {0} does not contain {{caption}}")]
    TemplateMissingCaption(PlatformId),
    #[error("{platform} rejected credentials (attempt {attempt}, not retried)")]
    Auth { platform: PlatformId, attempt: u32 },
    #[error("fixture request mismatch for {platform}: {detail}")]
    FixtureMismatch { platform: PlatformId, detail: String },
    #[error("fixture unusable for {platform}: {detail}")]
    FixtureInvalid { platform: PlatformId, detail: String },
    #[error("no credential token for {0} (set the platform token env var)")]
    MissingToken(PlatformId),
}

fn title_case(phrase: &str) -> String {
    phrase
        .split_whitespace()
        .map(|word| {
            let mut chars = word.chars();
            match chars.next() {
                Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lowercase, drop spaces, strip everything non-alphanumeric.
fn hashtag(phrase: &str) -> Option<String> {
    let cleaned: String = phrase
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect();
    if cleaned.is_empty() {
        None
    } else {
        Some(format!("#{cleaned}"))
    }
}

/// Cut `body` to at most `max_chars` chars, preferring a word boundary,
/// with a `…` suffix marking the cut.
fn truncate_at_word(body: &str, max_chars: usize) -> String {
    if body.chars().count() <= max_chars {
        return body.to_string();
    }
    if max_chars == 0 {
        return String::new();
    }
    let prefix: String = body.chars().take(max_chars - 1).collect();
    let cut = match prefix.rfind(char::is_whitespace) {
        Some(pos) if pos > 0 => prefix[..pos].trim_end().to_string(),
        _ => prefix,
    };
    format!("{cut}…")
}

fn find_placeholders(template: &str) -> Vec<&str> {
    let mut found = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let token = &after[..close];
                if !token.is_empty()
                    && token
                        .chars()
                        .all(|c| c.is_ascii_lowercase() || c == '_')
                {
                    found.push(token);
                }
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    found
}

/// Substitute the item into a platform template.
///
/// `{caption}` takes the caption text when present, otherwise the initial
/// query prompt; `{title}` is the first keyphrase, title-cased; `{tags}`
/// are normalized hashtags from the keyphrases. The body is truncated to
/// `max_chars`; alt text carries the full caption.
pub fn render(item: &PostcardItem, template: &PostTemplate) -> Result<RenderedPost, PublishError> {
    let placeholders = find_placeholders(&template.body_template);
    for token in &placeholders {
        if !matches!(*token, "title" | "caption" | "tags") {
            return Err(PublishError::Template(token.to_string()));
        }
    }
    if !placeholders.contains(&"caption") {
        return Err(PublishError::TemplateMissingCaption(template.platform));
    }

    let caption_text = item
        .caption
        .as_ref()
        .map(|c| c.text.clone())
        .unwrap_or_else(|| item.initial_query.prompt());
    let title = item
        .keyphrases
        .first()
        .map(|k| title_case(k))
        .unwrap_or_default();
    let mut tags: Vec<String> = Vec::new();
    for phrase in &item.keyphrases {
        if let Some(tag) = hashtag(phrase) {
            if !tags.contains(&tag) {
                tags.push(tag);
            }
        }
    }

    let body = template
        .body_template
        .replace("{title}", &title)
        .replace("{caption}", &caption_text)
        .replace("{tags}", &tags.join(" "));

    Ok(RenderedPost {
        body: truncate_at_word(&body, template.max_chars),
        image: item.final_image.clone(),
        alt_text: caption_text,
    })
}

/// The exact multipart body a live call sends; also the byte string a
/// fixture must match.
pub fn encode_request_body(post: &RenderedPost, adapter: &PlatformAdapter) -> Vec<u8> {
    let b = MULTIPART_BOUNDARY;
    let mut out = Vec::new();
    let text_part = |out: &mut Vec<u8>, name: &str, value: &str| {
        out.extend_from_slice(
            format!("--{b}\r\nContent-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}\r\n")
                .as_bytes(),
        );
    };
    text_part(&mut out, &adapter.body_field, &post.body);
    text_part(&mut out, &adapter.alt_field, &post.alt_text);
    out.extend_from_slice(
        format!(
            "--{b}\r\nContent-Disposition: form-data; name=\"{}\"; filename=\"{}.png\"\r\nContent-Type: image/png\r\n\r\n",
            adapter.image_field, post.image.content_hash
        )
        .as_bytes(),
    );
    out.extend_from_slice(&post.image.bytes);
    out.extend_from_slice(format!("\r\n--{b}--\r\n").as_bytes());
    out
}

pub fn multipart_content_type() -> String {
    format!("multipart/form-data; boundary={MULTIPART_BOUNDARY}")
}

/// Recorded request/response pair for fixture mode. Bodies are base64.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureExchange {
    pub request: FixtureRequest,
    pub response: FixtureResponse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureRequest {
    pub method: String,
    pub url: String,
    pub content_type: String,
    pub body_b64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureResponse {
    pub status: u16,
    pub body_b64: String,
}

impl FixtureExchange {
    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        serde_json::from_str(&raw).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), String> {
        let raw = serde_json::to_string_pretty(self).map_err(|e| e.to_string())?;
        std::fs::write(path, raw).map_err(|e| e.to_string())
    }
}

/// Live-call knobs; tests shrink the backoff base.
#[derive(Debug, Clone)]
pub struct PublisherPolicy {
    pub retry: RetryPolicy,
}

impl Default for PublisherPolicy {
    fn default() -> Self {
        PublisherPolicy {
            retry: RetryPolicy {
                max_attempts: 3,
                base: Duration::from_secs(1),
                factor: 2.0,
            },
        }
    }
}

fn extract_remote_id(body: &[u8], field: &str) -> Option<String> {
    let value: serde_json::Value = serde_json::from_slice(body).ok()?;
    match value.get(field)? {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Dispatch one rendered post.
///
/// Returns a record with status `ok` or `failed` (transport exhaustion and
/// malformed responses are failures, not errors). Credential rejection and
/// fixture mismatches are errors: they need operator attention and must
/// not be retried.
pub fn publish(
    item_id: &str,
    post: &RenderedPost,
    adapter: &PlatformAdapter,
    mode: PublishMode,
    token: Option<&str>,
    policy: &PublisherPolicy,
) -> Result<PublicationRecord, PublishError> {
    match mode {
        PublishMode::DryRun => Ok(PublicationRecord {
            item_id: item_id.to_string(),
            platform: adapter.platform,
            posted_at: Utc::now(),
            remote_id: None,
            status: PublishStatus::DryRun,
            attempt: 1,
            rendered_body: Some(post.body.clone()),
        }),
        PublishMode::Fixture => publish_fixture(item_id, post, adapter),
        PublishMode::Live => publish_live(item_id, post, adapter, token, policy),
    }
}

fn publish_fixture(
    item_id: &str,
    post: &RenderedPost,
    adapter: &PlatformAdapter,
) -> Result<PublicationRecord, PublishError> {
    let path = adapter
        .fixture_path
        .as_deref()
        .ok_or_else(|| PublishError::FixtureInvalid {
            platform: adapter.platform,
            detail: "no fixture_path configured".into(),
        })?;
    let exchange =
        FixtureExchange::load(Path::new(path)).map_err(|detail| PublishError::FixtureInvalid {
            platform: adapter.platform,
            detail,
        })?;
    let recorded = BASE64
        .decode(exchange.request.body_b64.as_bytes())
        .map_err(|e| PublishError::FixtureInvalid {
            platform: adapter.platform,
            detail: format!("request body_b64: {e}"),
        })?;
    let actual = encode_request_body(post, adapter);
    if recorded != actual {
        return Err(PublishError::FixtureMismatch {
            platform: adapter.platform,
            detail: format!(
                "recorded {} bytes, rendered {} bytes",
                recorded.len(),
                actual.len()
            ),
        });
    }
    let response_body = BASE64
        .decode(exchange.response.body_b64.as_bytes())
        .unwrap_or_default();
    record_from_response(
        item_id,
        adapter,
        exchange.response.status,
        &response_body,
        1,
    )
}

fn record_from_response(
    item_id: &str,
    adapter: &PlatformAdapter,
    status: u16,
    body: &[u8],
    attempt: u32,
) -> Result<PublicationRecord, PublishError> {
    if status == 401 || status == 403 {
        return Err(PublishError::Auth {
            platform: adapter.platform,
            attempt,
        });
    }
    let ok = (200..300).contains(&status);
    let remote_id = if ok {
        extract_remote_id(body, &adapter.remote_id_field)
    } else {
        None
    };
    // 2xx without a post id is treated as failed: `ok` requires a remote id
    let status = if ok && remote_id.is_some() {
        PublishStatus::Ok
    } else {
        PublishStatus::Failed
    };
    Ok(PublicationRecord {
        item_id: item_id.to_string(),
        platform: adapter.platform,
        posted_at: Utc::now(),
        remote_id,
        status,
        attempt,
        rendered_body: None,
    })
}

fn publish_live(
    item_id: &str,
    post: &RenderedPost,
    adapter: &PlatformAdapter,
    token: Option<&str>,
    policy: &PublisherPolicy,
) -> Result<PublicationRecord, PublishError> {
    let token = token.ok_or(PublishError::MissingToken(adapter.platform))?;
    let auth_value = adapter.auth_value_template.replace("{token}", token);
    let body = encode_request_body(post, adapter);
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .expect("http client");

    let mut attempt = 0u32;
    loop {
        attempt += 1;
        let sent = client
            .post(&adapter.endpoint)
            .header(&adapter.auth_header, &auth_value)
            .header("Content-Type", multipart_content_type())
            .body(body.clone())
            .send();
        match sent {
            Ok(resp) => {
                let status = resp.status().as_u16();
                if (500..600).contains(&status) {
                    log::warn!(
                        "{}: status {status} on attempt {attempt}",
                        adapter.platform
                    );
                } else {
                    let bytes = resp.bytes().map(|b| b.to_vec()).unwrap_or_default();
                    return record_from_response(item_id, adapter, status, &bytes, attempt);
                }
            }
            Err(e) => log::warn!("{}: {e} on attempt {attempt}", adapter.platform),
        }
        if attempt >= policy.retry.max_attempts {
            return Ok(PublicationRecord {
                item_id: item_id.to_string(),
                platform: adapter.platform,
                posted_at: Utc::now(),
                remote_id: None,
                status: PublishStatus::Failed,
                attempt,
                rendered_body: None,
            });
        }
        std::thread::sleep(policy.retry.delay_after(attempt));
    }
}
