//! Unattended generative-postcard pipeline.
//!
//! The crate is organized around the lifecycle of one "postcard":
//!
//! 1. [`pool`] owns the keyphrase vocabulary and uniform sampling.
//! 2. [`query`] compiles keyphrase samples into prompts and folds captions
//!    back in (the refinement feedback loop).
//! 3. [`backend`] defines the model-role contracts (generate, img2img,
//!    caption, expand, score), an HTTP wire client and deterministic mocks.
//! 4. [`pipeline`] runs one item end-to-end under a named schema, with
//!    safety-rejection retry.
//! 5. [`schedule`] decides when to publish (per-minute Bernoulli trials
//!    inside a local wall-clock window) and drives the daemon loop.
//! 6. [`publish`] renders items through per-platform templates and
//!    dispatches them (live, dry-run or fixture replay).
//! 7. [`storage`] is the append-only journal + content-addressed blob store
//!    every other module reports into.
//! 8. [`evaluation`] and [`engagement`] aggregate scores and emoji-reaction
//!    conversion rates out of the journal.

pub mod backend;
pub mod engagement;
pub mod evaluation;
pub mod pipeline;
pub mod pool;
pub mod publish;
pub mod query;
pub mod schedule;
pub mod storage;

pub use backend::{
    Backends, Caption, GenerationOutcome, GenerationRequest, ImageArtifact, ModelClass,
    SafetyRejection, ScoreRecord,
};
pub use pipeline::{PostcardItem, SchemaId};
pub use pool::{Keyphrase, Origin, Pool};
pub use query::Query;
