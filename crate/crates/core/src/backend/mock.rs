//! Deterministic in-process backends.
//!
//! Every output is a pure function of the call inputs and the configured
//! salt: byte-identical across runs and platforms. Image payloads are tiny
//! valid PNGs whose pixels encode the request digest, so any downstream
//! image-file consumer can open them.

use std::collections::HashMap;
use std::io::Cursor;

use sha2::{Digest, Sha256};

use super::{
    BackendError, Caption, Captioning, GenerationOutcome, GenerationRequest, ImageArtifact,
    ImageGeneration, ImageRefinement, ImageScoring, ModelClass, ScoreRecord, SafetyRejection,
    TextExpansion,
};

const CAPTION_MEDIUMS: [&str; 8] = [
    "a painting of",
    "a photograph of",
    "a rendering of",
    "a sketch of",
    "an etching of",
    "a model of",
    "a collage of",
    "a study of",
];

const CAPTION_SUBJECTS: [&str; 16] = [
    "towers",
    "arches",
    "shacks",
    "domes",
    "courtyards",
    "facades",
    "bridges",
    "pavilions",
    "stairways",
    "colonnades",
    "rooftops",
    "scaffolds",
    "plazas",
    "cloisters",
    "silos",
    "atriums",
];

const CAPTION_SETTINGS: [&str; 8] = [
    "by a river",
    "at dusk",
    "in fog",
    "under a pale sky",
    "on a hillside",
    "in the desert",
    "after rain",
    "against a grey sea",
];

const EXPAND_PREFIXES: [&str; 8] = [
    "weathered",
    "monumental",
    "brutalist",
    "overgrown",
    "floating",
    "abandoned",
    "mirrored",
    "terraced",
];

const EXPAND_SUFFIXES: [&str; 8] = [
    "at dusk",
    "in fog",
    "with arcades",
    "under scaffolding",
    "carved from basalt",
    "overlooking the sea",
    "in morning light",
    "after rain",
];

/// One mock serving all five model roles.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    salt: u64,
    deny_substrings: Vec<String>,
    reject_fraction: f64,
}

impl MockBackend {
    pub fn new(salt: u64) -> Self {
        MockBackend {
            salt,
            deny_substrings: Vec::new(),
            reject_fraction: 0.0,
        }
    }

    /// Reject any prompt containing one of these substrings.
    pub fn with_deny_substrings(mut self, patterns: impl IntoIterator<Item = String>) -> Self {
        self.deny_substrings = patterns.into_iter().collect();
        self
    }

    /// Reject roughly this fraction of generations, chosen deterministically
    /// by input digest.
    pub fn with_reject_fraction(mut self, fraction: f64) -> Self {
        self.reject_fraction = fraction.clamp(0.0, 1.0);
        self
    }

    fn digest(&self, tag: &str, parts: &[&[u8]]) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(tag.as_bytes());
        hasher.update(self.salt.to_le_bytes());
        for part in parts {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part);
        }
        hasher.finalize().into()
    }

    fn fraction_rejects(&self, digest: &[u8; 32]) -> bool {
        if self.reject_fraction <= 0.0 {
            return false;
        }
        let bucket = u64::from_le_bytes(digest[..8].try_into().unwrap()) % 1_000_000;
        (bucket as f64) < self.reject_fraction * 1_000_000.0
    }

    /// Encode a 16x16 PNG whose pixels tile the digest bytes.
    fn png_from_digest(digest: &[u8; 32]) -> Vec<u8> {
        let img = image::RgbaImage::from_fn(16, 16, |x, y| {
            let i = (y * 16 + x) as usize;
            image::Rgba([
                digest[i % 32],
                digest[(i + 7) % 32],
                digest[(i + 13) % 32],
                255,
            ])
        });
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)
            .expect("in-memory png encode");
        buf.into_inner()
    }

    fn require_nonempty(image: &ImageArtifact) -> Result<(), BackendError> {
        if image.is_empty() {
            return Err(BackendError::Protocol("empty image payload".into()));
        }
        Ok(())
    }
}

impl ImageGeneration for MockBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationOutcome, BackendError> {
        req.validate()?;
        for pattern in &self.deny_substrings {
            if req.prompt.contains(pattern.as_str()) {
                return Ok(GenerationOutcome::Rejected(SafetyRejection {
                    reason: format!("prompt matched deny pattern {pattern:?}"),
                }));
            }
        }
        let seed_bytes = req.seed.unwrap_or(0).to_le_bytes();
        let digest = self.digest(
            "generate",
            &[
                req.prompt.as_bytes(),
                req.model_class.as_str().as_bytes(),
                &seed_bytes,
            ],
        );
        if self.fraction_rejects(&digest) {
            return Ok(GenerationOutcome::Rejected(SafetyRejection {
                reason: "safety filter flagged generated output".into(),
            }));
        }
        let bytes = Self::png_from_digest(&digest);
        Ok(GenerationOutcome::Image(ImageArtifact::from_bytes(
            bytes,
            req.width,
            req.height,
            "mock.generate",
        )))
    }
}

impl ImageRefinement for MockBackend {
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
        Self::require_nonempty(image)?;
        let digest = self.digest(
            "img2img",
            &[image.content_hash.as_bytes(), model_class.as_str().as_bytes()],
        );
        if self.fraction_rejects(&digest) {
            return Ok(GenerationOutcome::Rejected(SafetyRejection {
                reason: "safety filter flagged refined output".into(),
            }));
        }
        let size = model_class.target_size();
        let bytes = Self::png_from_digest(&digest);
        Ok(GenerationOutcome::Image(ImageArtifact::from_bytes(
            bytes,
            size,
            size,
            "mock.img2img",
        )))
    }
}

impl Captioning for MockBackend {
    fn caption(&self, image: &ImageArtifact) -> Result<Caption, BackendError> {
        Self::require_nonempty(image)?;
        let digest = self.digest("caption", &[image.content_hash.as_bytes()]);
        let text = format!(
            "{} {} {}",
            CAPTION_MEDIUMS[digest[0] as usize % CAPTION_MEDIUMS.len()],
            CAPTION_SUBJECTS[digest[1] as usize % CAPTION_SUBJECTS.len()],
            CAPTION_SETTINGS[digest[2] as usize % CAPTION_SETTINGS.len()],
        );
        Ok(Caption {
            text,
            backend_id: "mock.caption".into(),
        })
    }
}

impl TextExpansion for MockBackend {
    fn expand(&self, batch: &[String]) -> Result<Vec<String>, BackendError> {
        if batch.is_empty() {
            return Err(BackendError::InvalidRequest(
                "expansion batch must be non-empty".into(),
            ));
        }
        let mut out = Vec::with_capacity(batch.len() * 4);
        for phrase in batch {
            let digest = self.digest("expand", &[phrase.as_bytes()]);
            for i in 0..2 {
                let prefix = EXPAND_PREFIXES[digest[i] as usize % EXPAND_PREFIXES.len()];
                out.push(format!("{prefix} {phrase}"));
            }
            for i in 2..4 {
                let suffix = EXPAND_SUFFIXES[digest[i] as usize % EXPAND_SUFFIXES.len()];
                out.push(format!("{phrase} {suffix}"));
            }
        }
        Ok(out)
    }
}

impl ImageScoring for MockBackend {
    fn score(&self, item_id: &str, image: &ImageArtifact) -> Result<ScoreRecord, BackendError> {
        Self::require_nonempty(image)?;
        let digest = self.digest("score", &[image.content_hash.as_bytes()]);
        let unit = |a: u8, b: u8| u16::from_le_bytes([a, b]) as f64 / u16::MAX as f64;
        Ok(ScoreRecord {
            item_id: item_id.to_string(),
            aesthetic: 1.0 + 9.0 * unit(digest[0], digest[1]),
            technical: 1.0 + 9.0 * unit(digest[2], digest[3]),
        })
    }
}

/// Scorer that replays injected per-item scores.
#[derive(Debug, Clone, Default)]
pub struct FixtureScorer {
    scores: HashMap<String, (f64, f64)>,
}

impl FixtureScorer {
    pub fn new(scores: HashMap<String, (f64, f64)>) -> Self {
        FixtureScorer { scores }
    }

    pub fn insert(&mut self, item_id: impl Into<String>, aesthetic: f64, technical: f64) {
        self.scores.insert(item_id.into(), (aesthetic, technical));
    }
}

impl ImageScoring for FixtureScorer {
    fn score(&self, item_id: &str, image: &ImageArtifact) -> Result<ScoreRecord, BackendError> {
        MockBackend::require_nonempty(image)?;
        let (aesthetic, technical) = self
            .scores
            .get(item_id)
            .copied()
            .ok_or_else(|| BackendError::Protocol(format!("no fixture score for {item_id}")))?;
        Ok(ScoreRecord {
            item_id: item_id.to_string(),
            aesthetic,
            technical,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock() -> MockBackend {
        MockBackend::new(0)
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        let req = GenerationRequest::new("slum", ModelClass::SdClass, Some(1));
        let a = match mock().generate(&req).unwrap() {
            GenerationOutcome::Image(img) => img,
            GenerationOutcome::Rejected(r) => panic!("unexpected rejection: {r:?}"),
        };
        let b = match mock().generate(&req).unwrap() {
            GenerationOutcome::Image(img) => img,
            GenerationOutcome::Rejected(r) => panic!("unexpected rejection: {r:?}"),
        };
        assert_eq!(a.content_hash, b.content_hash);
        assert_eq!((a.width, a.height), (512, 512));
        // the payload is a real PNG
        assert_eq!(&a.bytes[..8], b"\x89PNG\r\n\x1a\n");
    }

    #[test]
    fn different_seeds_give_different_images() {
        let a = mock()
            .generate(&GenerationRequest::new("slum", ModelClass::SdClass, Some(1)))
            .unwrap();
        let b = mock()
            .generate(&GenerationRequest::new("slum", ModelClass::SdClass, Some(2)))
            .unwrap();
        match (a, b) {
            (GenerationOutcome::Image(a), GenerationOutcome::Image(b)) => {
                assert_ne!(a.content_hash, b.content_hash)
            }
            _ => panic!("expected two images"),
        }
    }

    #[test]
    fn deny_substring_rejects() {
        let backend = mock().with_deny_substrings(["forbidden".to_string()]);
        let req = GenerationRequest::new("a forbidden tower", ModelClass::SdClass, Some(1));
        assert!(matches!(
            backend.generate(&req).unwrap(),
            GenerationOutcome::Rejected(_)
        ));
    }

    #[test]
    fn invalid_size_is_rejected_before_generation() {
        let mut req = GenerationRequest::new("slum", ModelClass::XlClass, None);
        req.width = 512;
        req.height = 512;
        assert!(matches!(
            mock().generate(&req),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn refine_upscales_and_chains_digest() {
        let req = GenerationRequest::new("slum", ModelClass::SdClass, Some(1));
        let input = match mock().generate(&req).unwrap() {
            GenerationOutcome::Image(img) => img,
            _ => unreachable!(),
        };
        let refined = match mock().refine(&input, ModelClass::XlClass).unwrap() {
            GenerationOutcome::Image(img) => img,
            _ => panic!("expected image"),
        };
        assert_eq!((refined.width, refined.height), (1024, 1024));
        let again = match mock().refine(&input, ModelClass::XlClass).unwrap() {
            GenerationOutcome::Image(img) => img,
            _ => panic!("expected image"),
        };
        assert_eq!(refined.content_hash, again.content_hash);
    }

    #[test]
    fn empty_image_is_a_protocol_error() {
        let empty = ImageArtifact::from_bytes(Vec::new(), 512, 512, "test");
        assert!(matches!(
            mock().refine(&empty, ModelClass::XlClass),
            Err(BackendError::Protocol(_))
        ));
        assert!(matches!(
            mock().caption(&empty),
            Err(BackendError::Protocol(_))
        ));
        assert!(matches!(
            mock().score("i", &empty),
            Err(BackendError::Protocol(_))
        ));
    }

    #[test]
    fn captions_are_nonempty_for_many_artifacts() {
        let backend = mock();
        for i in 0..1000u32 {
            let artifact = ImageArtifact::from_bytes(i.to_le_bytes().to_vec(), 512, 512, "t");
            let caption = backend.caption(&artifact).unwrap();
            assert!(!caption.text.trim().is_empty());
        }
    }

    #[test]
    fn caption_is_stable_for_same_input() {
        let artifact = ImageArtifact::from_bytes(vec![5, 6, 7], 512, 512, "t");
        assert_eq!(
            mock().caption(&artifact).unwrap().text,
            mock().caption(&artifact).unwrap().text
        );
    }

    #[test]
    fn expand_is_stable_and_rejects_empty_batch() {
        let a = mock().expand(&["slum".to_string()]).unwrap();
        let b = mock().expand(&["slum".to_string()]).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        assert!(matches!(
            mock().expand(&[]),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn expand_stays_productive_for_fifty_rounds() {
        // rotate batches through a growing set, as pool expansion does
        let backend = mock();
        let mut known: Vec<String> = (0..5).map(|i| format!("seed {i}")).collect();
        let mut seen: std::collections::HashSet<String> = known.iter().cloned().collect();
        let mut cursor = 0usize;
        for round in 1..=50 {
            let len = known.len();
            let batch: Vec<String> = (0..5.min(len))
                .map(|i| known[(cursor + i) % len].clone())
                .collect();
            cursor += batch.len();
            let candidates = backend.expand(&batch).unwrap();
            let mut novel = 0;
            for c in candidates {
                if seen.insert(c.clone()) {
                    known.push(c);
                    novel += 1;
                }
            }
            assert!(novel >= 1, "round {round} produced nothing new");
        }
    }

    #[test]
    fn scores_stay_in_range_over_many_calls() {
        let backend = mock();
        for i in 0..1000u32 {
            let artifact = ImageArtifact::from_bytes(i.to_le_bytes().to_vec(), 512, 512, "t");
            let record = backend.score("item", &artifact).unwrap();
            assert!(record.in_range(), "score out of range: {record:?}");
        }
    }

    #[test]
    fn fixture_scorer_replays_injected_pair() {
        let mut scorer = FixtureScorer::default();
        scorer.insert("item-1", 5.91, 5.20);
        let artifact = ImageArtifact::from_bytes(vec![1], 512, 512, "t");
        let record = scorer.score("item-1", &artifact).unwrap();
        assert_eq!((record.aesthetic, record.technical), (5.91, 5.20));
        assert!(scorer.score("missing", &artifact).is_err());
    }
}
