//! Shared fixture builders for the criterion benches.

use archpost_core::backend::mock::MockBackend;
use archpost_core::backend::Backends;
use archpost_core::pipeline::{run_batch, PostcardItem, RunConfig, SchemaId};
use archpost_core::pool::{import_seeds, Pool};

pub fn fixture_pool(n: usize) -> Pool {
    import_seeds((0..n).map(|i| format!("bench phrase {i}"))).unwrap()
}

pub fn mock_backends() -> Backends {
    Backends::all_mock(MockBackend::new(0))
}

pub fn fixture_items(n: usize) -> Vec<PostcardItem> {
    run_batch(
        SchemaId::Sd14Only,
        n,
        &fixture_pool(64),
        1,
        &mock_backends(),
        &RunConfig::default(),
    )
    .unwrap()
    .items
}
