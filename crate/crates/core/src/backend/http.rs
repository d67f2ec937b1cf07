//! JSON-over-HTTP wire client for the five model roles.
//!
//! Endpoints are configured per role; each call POSTs to
//! `{base}/v1/<op>`. Transport failures and 5xx responses retry with
//! exponential backoff and surface as `Unavailable` once attempts are
//! exhausted. A 422 with `error = "safety_rejected"` is decoded into a
//! [`SafetyRejection`] value; any other 4xx is a protocol error.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use super::{
    BackendError, Caption, Captioning, GenerationOutcome, GenerationRequest, ImageArtifact,
    ImageGeneration, ImageRefinement, ImageScoring, ModelClass, ScoreRecord, SafetyRejection,
    TextExpansion,
};

/// Backoff schedule for transient failures.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before the given retry (1-based attempt that just failed).
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let factor = self.factor.powi(attempt.saturating_sub(1) as i32);
        self.base.mul_f64(factor)
    }
}

/// Base URL per model role; unset roles fail fast with a protocol error.
#[derive(Debug, Clone, Default)]
pub struct RoleEndpoints {
    pub generate: Option<String>,
    pub img2img: Option<String>,
    pub caption: Option<String>,
    pub expand: Option<String>,
    pub score: Option<String>,
}

impl RoleEndpoints {
    /// Point every role at one serving process.
    pub fn single(base_url: &str) -> Self {
        let url = Some(base_url.trim_end_matches('/').to_string());
        RoleEndpoints {
            generate: url.clone(),
            img2img: url.clone(),
            caption: url.clone(),
            expand: url.clone(),
            score: url,
        }
    }
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoints: RoleEndpoints,
    retry: RetryPolicy,
}

#[derive(Deserialize)]
struct GenerateResponse {
    image_b64: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct ErrorResponse {
    error: String,
    #[serde(default)]
    reason: Option<String>,
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

#[derive(Deserialize)]
struct ExpandResponse {
    phrases: Vec<String>,
}

#[derive(Deserialize)]
struct ScoreResponse {
    aesthetic: f64,
    technical: f64,
}

impl HttpBackend {
    pub fn new(endpoints: RoleEndpoints, retry: RetryPolicy) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("http client");
        HttpBackend {
            client,
            endpoints,
            retry,
        }
    }

    fn role_url(base: &Option<String>, op: &str) -> Result<String, BackendError> {
        base.as_deref()
            .map(|b| format!("{}/v1/{op}", b.trim_end_matches('/')))
            .ok_or_else(|| BackendError::Protocol(format!("no endpoint configured for {op}")))
    }

    /// POST with retry on transport errors and 5xx. Returns the terminal
    /// (status, body) pair.
    fn post_json(&self, url: &str, body: &serde_json::Value) -> Result<(u16, Vec<u8>), BackendError> {
        let mut last_failure = String::new();
        for attempt in 1..=self.retry.max_attempts {
            match self.client.post(url).json(body).send() {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    if (500..600).contains(&status) {
                        last_failure = format!("status {status}");
                    } else {
                        let bytes = resp
                            .bytes()
                            .map_err(|e| BackendError::Protocol(format!("body read: {e}")))?;
                        return Ok((status, bytes.to_vec()));
                    }
                }
                Err(e) => last_failure = e.to_string(),
            }
            if attempt < self.retry.max_attempts {
                std::thread::sleep(self.retry.delay_after(attempt));
            }
        }
        Err(BackendError::Unavailable(format!(
            "{url}: {last_failure} after {} attempts",
            self.retry.max_attempts
        )))
    }

    fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, BackendError> {
        serde_json::from_slice(body)
            .map_err(|e| BackendError::Protocol(format!("malformed response: {e}")))
    }

    /// Shared 200/422/4xx handling for the two image-producing ops.
    fn image_outcome(
        &self,
        status: u16,
        body: &[u8],
        expected_size: u32,
        backend_id: &str,
    ) -> Result<GenerationOutcome, BackendError> {
        match status {
            200 => {
                let resp: GenerateResponse = Self::parse(body)?;
                if resp.width != expected_size || resp.height != expected_size {
                    return Err(BackendError::Protocol(format!(
                        "backend returned {}x{}, expected {expected_size}x{expected_size}",
                        resp.width, resp.height
                    )));
                }
                let bytes = BASE64
                    .decode(resp.image_b64.as_bytes())
                    .map_err(|e| BackendError::Protocol(format!("image_b64: {e}")))?;
                if bytes.is_empty() {
                    return Err(BackendError::Protocol("empty image payload".into()));
                }
                Ok(GenerationOutcome::Image(ImageArtifact::from_bytes(
                    bytes,
                    resp.width,
                    resp.height,
                    backend_id,
                )))
            }
            422 => {
                let resp: ErrorResponse = Self::parse(body)?;
                if resp.error == "safety_rejected" {
                    Ok(GenerationOutcome::Rejected(SafetyRejection {
                        reason: resp.reason.unwrap_or_else(|| "safety_rejected".into()),
                    }))
                } else {
                    Err(BackendError::Protocol(format!(
                        "status 422: {}",
                        resp.error
                    )))
                }
            }
            other => Err(BackendError::Protocol(format!("status {other}"))),
        }
    }

    fn expect_200(status: u16, body: &[u8]) -> Result<(), BackendError> {
        if status != 200 {
            return Err(BackendError::Protocol(format!(
                "status {status}: {}",
                String::from_utf8_lossy(&body[..body.len().min(200)])
            )));
        }
        Ok(())
    }
}

impl ImageGeneration for HttpBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationOutcome, BackendError> {
        req.validate()?;
        let url = Self::role_url(&self.endpoints.generate, "generate")?;
        let mut body = json!({
            "prompt": req.prompt,
            "width": req.width,
            "height": req.height,
            "model_class": req.model_class.as_str(),
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        let (status, resp) = self.post_json(&url, &body)?;
        self.image_outcome(status, &resp, req.model_class.target_size(), "http.generate")
    }
}

impl ImageRefinement for HttpBackend {
    fn refine(
        &self,
        image: &ImageArtifact,
        model_class: ModelClass,
    ) -> Result<GenerationOutcome, BackendError> {
        if model_class != ModelClass::XlClass {
            return Err(BackendError::InvalidRequest(
                "image refinement only targets xl_class".into(),
            ));
        }
        if image.is_empty() {
            return Err(BackendError::Protocol("empty image payload".into()));
        }
        let url = Self::role_url(&self.endpoints.img2img, "img2img")?;
        let body = json!({
            "image_b64": BASE64.encode(&image.bytes),
            "model_class": model_class.as_str(),
        });
        let (status, resp) = self.post_json(&url, &body)?;
        self.image_outcome(status, &resp, model_class.target_size(), "http.img2img")
    }
}

impl Captioning for HttpBackend {
    fn caption(&self, image: &ImageArtifact) -> Result<Caption, BackendError> {
        if image.is_empty() {
            return Err(BackendError::Protocol("empty image payload".into()));
        }
        let url = Self::role_url(&self.endpoints.caption, "caption")?;
        let body = json!({ "image_b64": BASE64.encode(&image.bytes) });
        let (status, resp) = self.post_json(&url, &body)?;
        Self::expect_200(status, &resp)?;
        let parsed: CaptionResponse = Self::parse(&resp)?;
        Caption::new(&parsed.caption, "http.caption")
            .ok_or_else(|| BackendError::Protocol("empty caption".into()))
    }
}

impl TextExpansion for HttpBackend {
    fn expand(&self, batch: &[String]) -> Result<Vec<String>, BackendError> {
        if batch.is_empty() {
            return Err(BackendError::InvalidRequest(
                "expansion batch must be non-empty".into(),
            ));
        }
        let url = Self::role_url(&self.endpoints.expand, "expand")?;
        let body = json!({ "phrases": batch });
        let (status, resp) = self.post_json(&url, &body)?;
        Self::expect_200(status, &resp)?;
        let parsed: ExpandResponse = Self::parse(&resp)?;
        Ok(parsed.phrases)
    }
}

impl ImageScoring for HttpBackend {
    fn score(&self, item_id: &str, image: &ImageArtifact) -> Result<ScoreRecord, BackendError> {
        if image.is_empty() {
            return Err(BackendError::Protocol("empty image payload".into()));
        }
        let url = Self::role_url(&self.endpoints.score, "score")?;
        let body = json!({ "image_b64": BASE64.encode(&image.bytes) });
        let (status, resp) = self.post_json(&url, &body)?;
        Self::expect_200(status, &resp)?;
        let parsed: ScoreResponse = Self::parse(&resp)?;
        let record = ScoreRecord {
            item_id: item_id.to_string(),
            aesthetic: parsed.aesthetic,
            technical: parsed.technical,
        };
        if !record.in_range() {
            return Err(BackendError::Protocol(format!(
                "scores out of [1,10]: aesthetic {} technical {}",
                record.aesthetic, record.technical
            )));
        }
        Ok(record)
    }
}
