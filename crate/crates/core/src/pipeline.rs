//! End-to-end execution of one postcard item under a named schema.
//!
//! The full pipeline samples keyphrases, generates a 512x512 image,
//! captions it, folds the caption back into the query and generates the
//! final 1024x1024 image. The three ablated schemas cut that loop short.
//! A safety rejection at any generation step discards the attempt and
//! re-samples fresh keyphrases, up to a bounded retry count.

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    BackendError, Backends, Caption, GenerationOutcome, GenerationRequest, ImageArtifact,
    ModelClass,
};
use crate::pool::{self, Pool, PoolError};
use crate::query::{self, Query, QueryError};

/// The four pipeline variants compared against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaId {
    OurSchema,
    Sd14Only,
    SdxlFromKeyphrases,
    SdxlFromImg,
}

impl SchemaId {
    pub const ALL: [SchemaId; 4] = [
        SchemaId::OurSchema,
        SchemaId::Sd14Only,
        SchemaId::SdxlFromKeyphrases,
        SchemaId::SdxlFromImg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemaId::OurSchema => "our_schema",
            SchemaId::Sd14Only => "sd14_only",
            SchemaId::SdxlFromKeyphrases => "sdxl_from_keyphrases",
            SchemaId::SdxlFromImg => "sdxl_from_img",
        }
    }
}

impl std::str::FromStr for SchemaId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "our_schema" => Ok(SchemaId::OurSchema),
            "sd14_only" => Ok(SchemaId::Sd14Only),
            "sdxl_from_keyphrases" => Ok(SchemaId::SdxlFromKeyphrases),
            "sdxl_from_img" => Ok(SchemaId::SdxlFromImg),
            other => Err(format!(
                "unknown schema {other:?} (expected one of: our_schema, sd14_only, sdxl_from_keyphrases, sdxl_from_img)"
            )),
        }
    }
}

impl std::fmt::Display for SchemaId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One finished postcard: the final image plus the provenance of every
/// stage that produced it.
#[derive(Debug, Clone)]
pub struct PostcardItem {
    pub item_id: String,
    pub schema: SchemaId,
    pub initial_query: Query,
    pub caption: Option<Caption>,
    pub refined_query: Option<Query>,
    pub initial_image: Option<ImageArtifact>,
    pub final_image: ImageArtifact,
    /// Sampled keyphrase texts, unique, in sample order.
    pub keyphrases: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub retry_count: u32,
    /// Seed of the item's rng stream; with the schema and keyphrases it
    /// reproduces the item bit-for-bit.
    pub item_seed: u64,
    /// Generation seeds drawn for the successful attempt, in call order.
    pub gen_seeds: Vec<u64>,
}

impl PostcardItem {
    /// Digest over everything except wall-clock timestamps. Two runs with
    /// the same seed and mocks produce identical digests.
    pub fn content_digest(&self) -> String {
        let mut hasher = Sha256::new();
        let mut put = |bytes: &[u8]| {
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(bytes);
        };
        put(self.item_id.as_bytes());
        put(self.schema.as_str().as_bytes());
        put(self.initial_query.prompt().as_bytes());
        put(
            self.caption
                .as_ref()
                .map(|c| c.text.as_str())
                .unwrap_or("")
                .as_bytes(),
        );
        put(
            self.refined_query
                .as_ref()
                .map(|q| q.prompt())
                .unwrap_or_default()
                .as_bytes(),
        );
        put(
            self.initial_image
                .as_ref()
                .map(|i| i.content_hash.as_str())
                .unwrap_or("")
                .as_bytes(),
        );
        put(self.final_image.content_hash.as_bytes());
        for k in &self.keyphrases {
            put(k.as_bytes());
        }
        put(&self.retry_count.to_le_bytes());
        put(&self.item_seed.to_le_bytes());
        for seed in &self.gen_seeds {
            put(&seed.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Check the per-schema shape rules. Returns the first violation.
    pub fn verify_schema_invariants(&self) -> Result<(), String> {
        let dims = |img: &ImageArtifact| (img.width, img.height);
        match self.schema {
            SchemaId::OurSchema => {
                if self.caption.is_none() || self.refined_query.is_none() {
                    return Err("our_schema requires caption and refined query".into());
                }
                if self.initial_image.is_none() {
                    return Err("our_schema requires the initial image".into());
                }
                if dims(&self.final_image) != (1024, 1024) {
                    return Err("our_schema final image must be 1024x1024".into());
                }
            }
            SchemaId::Sd14Only => {
                if dims(&self.final_image) != (512, 512) {
                    return Err("sd14_only final image must be 512x512".into());
                }
                match &self.initial_image {
                    Some(initial) if initial.content_hash == self.final_image.content_hash => {}
                    _ => return Err("sd14_only final image must equal the initial image".into()),
                }
            }
            SchemaId::SdxlFromKeyphrases => {
                if self.caption.is_some() || self.refined_query.is_some() {
                    return Err("sdxl_from_keyphrases must skip the refinement stage".into());
                }
                if dims(&self.final_image) != (1024, 1024) {
                    return Err("sdxl_from_keyphrases final image must be 1024x1024".into());
                }
            }
            SchemaId::SdxlFromImg => {
                if self.caption.is_some() || self.refined_query.is_some() {
                    return Err("sdxl_from_img must skip the refinement stage".into());
                }
                if self.initial_image.is_none() {
                    return Err("sdxl_from_img requires the initial image".into());
                }
                if dims(&self.final_image) != (1024, 1024) {
                    return Err("sdxl_from_img final image must be 1024x1024".into());
                }
            }
        }
        let from_query: std::collections::BTreeSet<String> =
            query::extract_keyphrases(&self.initial_query);
        let own: std::collections::BTreeSet<String> = self.keyphrases.iter().cloned().collect();
        if from_query != own {
            return Err("item keyphrases must match the initial query's sources".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Consecutive safety rejections tolerated before an item is abandoned.
    pub max_safety_retries: u32,
    /// Keyphrase count per query is drawn uniformly from this range.
    pub min_keyphrases: usize,
    pub max_keyphrases: usize,
    pub max_prompt_chars: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_safety_retries: 5,
            min_keyphrases: 2,
            max_keyphrases: 4,
            max_prompt_chars: query::DEFAULT_MAX_PROMPT_CHARS,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("abandoned item after {retry_count} consecutive safety rejections")]
    RetriesExhausted { retry_count: u32 },
    #[error("backend failure at stage {stage}")]
    Backend {
        stage: &'static str,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Query(#[from] QueryError),
}

/// Per-item rng substream seed, independent of schema so batches with the
/// same seed sample the same keyphrases across schemas.
pub fn derive_item_seed(batch_seed: u64, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(batch_seed.to_le_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn item_id(schema: SchemaId, item_seed: u64, keyphrases: &[String]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(schema.as_str().as_bytes());
    hasher.update(item_seed.to_le_bytes());
    for k in keyphrases {
        hasher.update([0x1f]);
        hasher.update(k.as_bytes());
    }
    hex::encode(hasher.finalize())
}

#[allow(clippy::large_enum_variant)]
enum Attempt {
    Done {
        caption: Option<Caption>,
        refined_query: Option<Query>,
        initial_image: Option<ImageArtifact>,
        final_image: ImageArtifact,
        gen_seeds: Vec<u64>,
    },
    Rejected,
}

/// Run one item to completion. Deterministic for a fixed `item_seed` with
/// mock backends.
pub fn run_item(
    schema: SchemaId,
    pool: &Pool,
    item_seed: u64,
    backends: &Backends,
    cfg: &RunConfig,
) -> Result<PostcardItem, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
    let mut retry_count = 0u32;

    loop {
        let k = rng
            .random_range(cfg.min_keyphrases..=cfg.max_keyphrases.max(cfg.min_keyphrases))
            .min(pool.len());
        let keyphrases = pool::sample(pool, &mut rng, k)?;
        let initial_query = query::compile_initial(&keyphrases)?;

        match run_attempt(schema, &initial_query, &mut rng, backends, cfg)? {
            Attempt::Done {
                caption,
                refined_query,
                initial_image,
                final_image,
                gen_seeds,
            } => {
                let texts: Vec<String> = keyphrases.into_iter().map(|k| k.text).collect();
                return Ok(PostcardItem {
                    item_id: item_id(schema, item_seed, &texts),
                    schema,
                    initial_query,
                    caption,
                    refined_query,
                    initial_image,
                    final_image,
                    keyphrases: texts,
                    created_at: Utc::now(),
                    retry_count,
                    item_seed,
                    gen_seeds,
                });
            }
            Attempt::Rejected => {
                retry_count += 1;
                if retry_count >= cfg.max_safety_retries {
                    return Err(PipelineError::RetriesExhausted { retry_count });
                }
            }
        }
    }
}

fn run_attempt(
    schema: SchemaId,
    initial_query: &Query,
    rng: &mut ChaCha8Rng,
    backends: &Backends,
    cfg: &RunConfig,
) -> Result<Attempt, PipelineError> {
    let mut gen_seeds = Vec::new();
    let generate = |class: ModelClass,
                        prompt: String,
                        stage: &'static str,
                        rng: &mut ChaCha8Rng,
                        gen_seeds: &mut Vec<u64>|
     -> Result<Option<ImageArtifact>, PipelineError> {
        let seed = rng.random::<u64>();
        gen_seeds.push(seed);
        let req = GenerationRequest::new(prompt, class, Some(seed));
        match backends
            .generator
            .generate(&req)
            .map_err(|source| PipelineError::Backend { stage, source })?
        {
            GenerationOutcome::Image(img) => Ok(Some(img)),
            GenerationOutcome::Rejected(_) => Ok(None),
        }
    };

    match schema {
        SchemaId::OurSchema => {
            let Some(initial_image) = generate(
                ModelClass::SdClass,
                initial_query.prompt(),
                "initial_generation",
                rng,
                &mut gen_seeds,
            )?
            else {
                return Ok(Attempt::Rejected);
            };
            let caption = backends
                .captioner
                .caption(&initial_image)
                .map_err(|source| PipelineError::Backend {
                    stage: "caption",
                    source,
                })?;
            let refined_query = query::compile_refined(initial_query, &caption, cfg.max_prompt_chars)?;
            let Some(final_image) = generate(
                ModelClass::XlClass,
                refined_query.prompt(),
                "refined_generation",
                rng,
                &mut gen_seeds,
            )?
            else {
                return Ok(Attempt::Rejected);
            };
            Ok(Attempt::Done {
                caption: Some(caption),
                refined_query: Some(refined_query),
                initial_image: Some(initial_image),
                final_image,
                gen_seeds,
            })
        }
        SchemaId::Sd14Only => {
            let Some(image) = generate(
                ModelClass::SdClass,
                initial_query.prompt(),
                "initial_generation",
                rng,
                &mut gen_seeds,
            )?
            else {
                return Ok(Attempt::Rejected);
            };
            Ok(Attempt::Done {
                caption: None,
                refined_query: None,
                initial_image: Some(image.clone()),
                final_image: image,
                gen_seeds,
            })
        }
        SchemaId::SdxlFromKeyphrases => {
            let Some(final_image) = generate(
                ModelClass::XlClass,
                initial_query.prompt(),
                "initial_generation",
                rng,
                &mut gen_seeds,
            )?
            else {
                return Ok(Attempt::Rejected);
            };
            Ok(Attempt::Done {
                caption: None,
                refined_query: None,
                initial_image: None,
                final_image,
                gen_seeds,
            })
        }
        SchemaId::SdxlFromImg => {
            let Some(initial_image) = generate(
                ModelClass::SdClass,
                initial_query.prompt(),
                "initial_generation",
                rng,
                &mut gen_seeds,
            )?
            else {
                return Ok(Attempt::Rejected);
            };
            let outcome = backends
                .refiner
                .refine(&initial_image, ModelClass::XlClass)
                .map_err(|source| PipelineError::Backend {
                    stage: "img2img",
                    source,
                })?;
            match outcome {
                GenerationOutcome::Image(final_image) => Ok(Attempt::Done {
                    caption: None,
                    refined_query: None,
                    initial_image: Some(initial_image),
                    final_image,
                    gen_seeds,
                }),
                GenerationOutcome::Rejected(_) => Ok(Attempt::Rejected),
            }
        }
    }
}

/// Result of a batch run: finished items plus the count of items abandoned
/// to safety-retry exhaustion.
#[derive(Debug)]
pub struct BatchOutcome {
    pub items: Vec<PostcardItem>,
    pub skipped: usize,
}

/// Run `n` independent items. Each item owns a substream derived from the
/// batch seed, so the batch is reproducible and order-insensitive.
pub fn run_batch(
    schema: SchemaId,
    n: usize,
    pool: &Pool,
    batch_seed: u64,
    backends: &Backends,
    cfg: &RunConfig,
) -> Result<BatchOutcome, PipelineError> {
    let mut items = Vec::with_capacity(n);
    let mut skipped = 0usize;
    for index in 0..n as u64 {
        let item_seed = derive_item_seed(batch_seed, index);
        match run_item(schema, pool, item_seed, backends, cfg) {
            Ok(item) => items.push(item),
            Err(PipelineError::RetriesExhausted { .. }) => skipped += 1,
            Err(other) => return Err(other),
        }
    }
    Ok(BatchOutcome { items, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockBackend;
    use crate::backend::recording::{record, BackendCall};
    use crate::pool::import_seeds;

    fn pool() -> Pool {
        import_seeds((0..20).map(|i| format!("test phrase {i}"))).unwrap()
    }

    fn mock_backends() -> Backends {
        Backends::all_mock(MockBackend::new(0))
    }

    #[test]
    fn our_schema_runs_full_loop() {
        let (backends, recorder) = record(mock_backends());
        let item = run_item(
            SchemaId::OurSchema,
            &pool(),
            7,
            &backends,
            &RunConfig::default(),
        )
        .unwrap();
        assert!(item.caption.is_some());
        assert!(item.refined_query.is_some());
        assert_eq!((item.final_image.width, item.final_image.height), (1024, 1024));
        assert_eq!(
            recorder.calls(),
            vec![
                BackendCall::Generate {
                    class: ModelClass::SdClass
                },
                BackendCall::Caption,
                BackendCall::Generate {
                    class: ModelClass::XlClass
                },
            ]
        );
        item.verify_schema_invariants().unwrap();
    }

    #[test]
    fn sd14_only_reuses_initial_image() {
        let (backends, recorder) = record(mock_backends());
        let item = run_item(
            SchemaId::Sd14Only,
            &pool(),
            7,
            &backends,
            &RunConfig::default(),
        )
        .unwrap();
        assert_eq!(
            item.initial_image.as_ref().unwrap().content_hash,
            item.final_image.content_hash
        );
        assert_eq!((item.final_image.width, item.final_image.height), (512, 512));
        assert_eq!(recorder.count(|c| matches!(c, BackendCall::Caption)), 0);
        item.verify_schema_invariants().unwrap();
    }

    #[test]
    fn sdxl_from_keyphrases_skips_refinement() {
        let (backends, recorder) = record(mock_backends());
        let item = run_item(
            SchemaId::SdxlFromKeyphrases,
            &pool(),
            7,
            &backends,
            &RunConfig::default(),
        )
        .unwrap();
        assert!(item.caption.is_none());
        assert!(item.initial_image.is_none());
        assert_eq!(
            recorder.calls(),
            vec![BackendCall::Generate {
                class: ModelClass::XlClass
            }]
        );
        item.verify_schema_invariants().unwrap();
    }

    #[test]
    fn sdxl_from_img_chains_img2img() {
        let (backends, recorder) = record(mock_backends());
        let item = run_item(
            SchemaId::SdxlFromImg,
            &pool(),
            7,
            &backends,
            &RunConfig::default(),
        )
        .unwrap();
        assert!(item.initial_image.is_some());
        assert_eq!(
            recorder.calls(),
            vec![
                BackendCall::Generate {
                    class: ModelClass::SdClass
                },
                BackendCall::Refine,
            ]
        );
        item.verify_schema_invariants().unwrap();
    }

    #[test]
    fn total_rejection_exhausts_retries() {
        let backends = Backends::all_mock(MockBackend::new(0).with_reject_fraction(1.0));
        let err = run_item(
            SchemaId::Sd14Only,
            &pool(),
            7,
            &backends,
            &RunConfig::default(),
        )
        .unwrap_err();
        match err {
            PipelineError::RetriesExhausted { retry_count } => assert_eq!(retry_count, 5),
            other => panic!("expected RetriesExhausted, got {other:?}"),
        }
    }

    #[test]
    fn successful_retry_records_count() {
        // reject ~40% of generations; some seeds need a re-sample
        let backends = Backends::all_mock(MockBackend::new(0).with_reject_fraction(0.4));
        let cfg = RunConfig::default();
        let p = pool();
        let mut saw_retry = false;
        for seed in 0..50 {
            if let Ok(item) = run_item(SchemaId::Sd14Only, &p, seed, &backends, &cfg) {
                item.verify_schema_invariants().unwrap();
                if item.retry_count > 0 {
                    saw_retry = true;
                }
            }
        }
        assert!(saw_retry, "no retried item in 50 seeds");
    }

    #[test]
    fn batch_of_one_matches_run_item() {
        let backends = mock_backends();
        let cfg = RunConfig::default();
        let p = pool();
        let batch = run_batch(SchemaId::OurSchema, 1, &p, 99, &backends, &cfg).unwrap();
        let single = run_item(
            SchemaId::OurSchema,
            &p,
            derive_item_seed(99, 0),
            &backends,
            &cfg,
        )
        .unwrap();
        assert_eq!(batch.items.len(), 1);
        assert_eq!(batch.items[0].content_digest(), single.content_digest());
    }

    #[test]
    fn batches_are_reproducible_per_seed() {
        let backends = mock_backends();
        let cfg = RunConfig::default();
        let p = pool();
        let a = run_batch(SchemaId::OurSchema, 20, &p, 5, &backends, &cfg).unwrap();
        let b = run_batch(SchemaId::OurSchema, 20, &p, 5, &backends, &cfg).unwrap();
        let digests = |batch: &BatchOutcome| -> Vec<String> {
            batch.items.iter().map(|i| i.content_digest()).collect()
        };
        assert_eq!(digests(&a), digests(&b));
        let c = run_batch(SchemaId::OurSchema, 20, &p, 6, &backends, &cfg).unwrap();
        assert_ne!(digests(&a), digests(&c));
    }

    #[test]
    fn batches_pair_keyphrases_across_schemas() {
        let backends = mock_backends();
        let cfg = RunConfig::default();
        let p = pool();
        let a = run_batch(SchemaId::OurSchema, 10, &p, 42, &backends, &cfg).unwrap();
        let b = run_batch(SchemaId::Sd14Only, 10, &p, 42, &backends, &cfg).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.keyphrases, y.keyphrases);
            assert_ne!(x.item_id, y.item_id);
        }
    }

    #[test]
    fn partial_rejection_skips_but_never_corrupts() {
        // single-retry config makes exhaustion common enough to observe
        let backends = Backends::all_mock(MockBackend::new(0).with_reject_fraction(0.1));
        let cfg = RunConfig {
            max_safety_retries: 1,
            ..RunConfig::default()
        };
        let outcome = run_batch(SchemaId::Sd14Only, 100, &pool(), 3, &backends, &cfg).unwrap();
        assert!(outcome.skipped > 0);
        assert_eq!(outcome.items.len() + outcome.skipped, 100);
        for item in &outcome.items {
            item.verify_schema_invariants().unwrap();
        }
    }

    #[test]
    fn invariants_hold_across_random_seeds() {
        let backends = Backends::all_mock(MockBackend::new(1).with_reject_fraction(0.2));
        let cfg = RunConfig::default();
        let p = pool();
        for seed in 0..200 {
            for schema in SchemaId::ALL {
                if let Ok(item) = run_item(schema, &p, seed, &backends, &cfg) {
                    item.verify_schema_invariants().unwrap();
                }
            }
        }
    }

    #[test]
    fn schema_parses_from_cli_names() {
        assert_eq!("our_schema".parse::<SchemaId>().unwrap(), SchemaId::OurSchema);
        assert_eq!("sd14_only".parse::<SchemaId>().unwrap(), SchemaId::Sd14Only);
        assert!("bogus".parse::<SchemaId>().is_err());
    }
}
