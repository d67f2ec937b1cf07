//! Model-role contracts and their implementations.
//!
//! Five roles cover everything the pipeline asks of a model: text-to-image
//! generation, image-to-image refinement, captioning, keyphrase expansion
//! and image scoring. Models are reached only through these traits; the
//! [`http`] client talks the JSON wire protocol to a serving process, and
//! [`mock`] provides deterministic in-process stand-ins so the whole
//! pipeline runs and tests without GPUs.

pub mod http;
pub mod mock;
pub mod recording;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crate::query::Caption;

/// Generation model families. The class pins the output size: 512x512 for
/// `SdClass`, 1024x1024 for `XlClass`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelClass {
    SdClass,
    XlClass,
}

impl ModelClass {
    pub fn target_size(self) -> u32 {
        match self {
            ModelClass::SdClass => 512,
            ModelClass::XlClass => 1024,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelClass::SdClass => "sd_class",
            ModelClass::XlClass => "xl_class",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    /// Transport-level failure after retries were exhausted.
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    /// The backend answered, but not in the shape the contract requires.
    #[error("backend protocol error: {0}")]
    Protocol(String),
    /// The request violates a contract precondition; nothing was sent.
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// A text-to-image request. Width and height are pinned by the model class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub width: u32,
    pub height: u32,
    pub model_class: ModelClass,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationRequest {
    /// Build a request with the dimensions the model class dictates.
    pub fn new(prompt: impl Into<String>, model_class: ModelClass, seed: Option<u64>) -> Self {
        let size = model_class.target_size();
        GenerationRequest {
            prompt: prompt.into(),
            width: size,
            height: size,
            model_class,
            seed,
        }
    }

    /// Check the size invariant. Callers reject invalid requests before
    /// any wire traffic.
    pub fn validate(&self) -> Result<(), BackendError> {
        let size = self.model_class.target_size();
        if self.width != size || self.height != size {
            return Err(BackendError::InvalidRequest(format!(
                "{} requires {size}x{size}, got {}x{}",
                self.model_class.as_str(),
                self.width,
                self.height
            )));
        }
        Ok(())
    }
}

/// Generated image bytes (PNG) plus provenance. `width`/`height` are the
/// logical dimensions of the originating request; `content_hash` is the
/// SHA-256 of the bytes and keys the blob store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageArtifact {
    pub bytes: Vec<u8>,
    pub width: u32,
    pub height: u32,
    pub content_hash: String,
    pub backend_id: String,
}

impl ImageArtifact {
    pub fn from_bytes(bytes: Vec<u8>, width: u32, height: u32, backend_id: &str) -> Self {
        let content_hash = hex::encode(Sha256::digest(&bytes));
        ImageArtifact {
            bytes,
            width,
            height,
            content_hash,
            backend_id: backend_id.to_string(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// The generator flagged its own output. This is a value, not an error:
/// the pipeline reacts by re-sampling, which is normal control flow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyRejection {
    pub reason: String,
}

#[derive(Debug, Clone)]
pub enum GenerationOutcome {
    Image(ImageArtifact),
    Rejected(SafetyRejection),
}

/// Aesthetic and technical quality scores, both in [1, 10].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub item_id: String,
    pub aesthetic: f64,
    pub technical: f64,
}

impl ScoreRecord {
    pub fn in_range(&self) -> bool {
        (1.0..=10.0).contains(&self.aesthetic) && (1.0..=10.0).contains(&self.technical)
    }
}

pub trait ImageGeneration: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationOutcome, BackendError>;
}

pub trait ImageRefinement: Send + Sync {
    /// Derive a refined image from an existing one. Only `XlClass` output
    /// is supported.
    fn refine(
        &self,
        image: &ImageArtifact,
        model_class: ModelClass,
    ) -> Result<GenerationOutcome, BackendError>;
}

pub trait Captioning: Send + Sync {
    fn caption(&self, image: &ImageArtifact) -> Result<Caption, BackendError>;
}

pub trait TextExpansion: Send + Sync {
    /// Propose related phrases for a batch of existing ones. May return
    /// duplicates or already-known phrases; the pool dedups.
    fn expand(&self, batch: &[String]) -> Result<Vec<String>, BackendError>;
}

pub trait ImageScoring: Send + Sync {
    fn score(&self, item_id: &str, image: &ImageArtifact) -> Result<ScoreRecord, BackendError>;
}

/// Shareable bundle of one handle per model role.
#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn ImageGeneration>,
    pub refiner: Arc<dyn ImageRefinement>,
    pub captioner: Arc<dyn Captioning>,
    pub expander: Arc<dyn TextExpansion>,
    pub scorer: Arc<dyn ImageScoring>,
}

impl Backends {
    /// All five roles served by one deterministic mock.
    pub fn all_mock(mock: mock::MockBackend) -> Self {
        let mock = Arc::new(mock);
        Backends {
            generator: mock.clone(),
            refiner: mock.clone(),
            captioner: mock.clone(),
            expander: mock.clone(),
            scorer: mock,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_constructor_pins_dimensions() {
        let sd = GenerationRequest::new("slum", ModelClass::SdClass, Some(1));
        assert_eq!((sd.width, sd.height), (512, 512));
        let xl = GenerationRequest::new("slum", ModelClass::XlClass, None);
        assert_eq!((xl.width, xl.height), (1024, 1024));
        assert!(sd.validate().is_ok());
    }

    #[test]
    fn validate_rejects_mismatched_size() {
        let mut req = GenerationRequest::new("slum", ModelClass::XlClass, None);
        req.width = 512;
        assert!(matches!(
            req.validate(),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn artifact_hash_matches_bytes() {
        let artifact = ImageArtifact::from_bytes(vec![1, 2, 3], 512, 512, "test");
        assert_eq!(
            artifact.content_hash,
            hex::encode(Sha256::digest([1u8, 2, 3]))
        );
    }

    #[test]
    fn model_class_serializes_snake_case() {
        assert_eq!(
            serde_json::to_string(&ModelClass::SdClass).unwrap(),
            "\"sd_class\""
        );
        assert_eq!(
            serde_json::to_string(&ModelClass::XlClass).unwrap(),
            "\"xl_class\""
        );
    }
}
