//! Call-recording decorator for backend bundles.
//!
//! Wraps every role handle so tests can assert the exact sequence of
//! backend calls a pipeline run issued.

use std::sync::{Arc, Mutex};

use super::{
    BackendError, Backends, Caption, Captioning, GenerationOutcome, GenerationRequest,
    ImageArtifact, ImageGeneration, ImageRefinement, ImageScoring, ModelClass, ScoreRecord,
    TextExpansion,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendCall {
    Generate { class: ModelClass },
    Refine,
    Caption,
    Expand,
    Score,
}

/// Shared log of backend calls, in issue order.
#[derive(Clone, Default)]
pub struct CallRecorder {
    calls: Arc<Mutex<Vec<BackendCall>>>,
}

impl CallRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, call: BackendCall) {
        self.calls.lock().expect("recorder lock").push(call);
    }

    pub fn calls(&self) -> Vec<BackendCall> {
        self.calls.lock().expect("recorder lock").clone()
    }

    pub fn clear(&self) {
        self.calls.lock().expect("recorder lock").clear();
    }

    pub fn count(&self, pred: impl Fn(&BackendCall) -> bool) -> usize {
        self.calls
            .lock()
            .expect("recorder lock")
            .iter()
            .filter(|c| pred(c))
            .count()
    }
}

/// Wrap a backend bundle; the returned bundle logs every call into the
/// recorder before delegating.
pub fn record(inner: Backends) -> (Backends, CallRecorder) {
    let recorder = CallRecorder::new();
    let wrapped = Backends {
        generator: Arc::new(RecordingHandle {
            inner: inner.generator,
            recorder: recorder.clone(),
        }),
        refiner: Arc::new(RecordingHandle {
            inner: inner.refiner,
            recorder: recorder.clone(),
        }),
        captioner: Arc::new(RecordingHandle {
            inner: inner.captioner,
            recorder: recorder.clone(),
        }),
        expander: Arc::new(RecordingHandle {
            inner: inner.expander,
            recorder: recorder.clone(),
        }),
        scorer: Arc::new(RecordingHandle {
            inner: inner.scorer,
            recorder: recorder.clone(),
        }),
    };
    (wrapped, recorder)
}

struct RecordingHandle<T: ?Sized> {
    inner: Arc<T>,
    recorder: CallRecorder,
}

impl ImageGeneration for RecordingHandle<dyn ImageGeneration> {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationOutcome, BackendError> {
        self.recorder.push(BackendCall::Generate {
            class: req.model_class,
        });
        self.inner.generate(req)
    }
}

impl ImageRefinement for RecordingHandle<dyn ImageRefinement> {
    fn refine(
        &self,
        image: &ImageArtifact,
        model_class: ModelClass,
    ) -> Result<GenerationOutcome, BackendError> {
        self.recorder.push(BackendCall::Refine);
        self.inner.refine(image, model_class)
    }
}

impl Captioning for RecordingHandle<dyn Captioning> {
    fn caption(&self, image: &ImageArtifact) -> Result<Caption, BackendError> {
        self.recorder.push(BackendCall::Caption);
        self.inner.caption(image)
    }
}

impl TextExpansion for RecordingHandle<dyn TextExpansion> {
    fn expand(&self, batch: &[String]) -> Result<Vec<String>, BackendError> {
        self.recorder.push(BackendCall::Expand);
        self.inner.expand(batch)
    }
}

impl ImageScoring for RecordingHandle<dyn ImageScoring> {
    fn score(&self, item_id: &str, image: &ImageArtifact) -> Result<ScoreRecord, BackendError> {
        self.recorder.push(BackendCall::Score);
        self.inner.score(item_id, image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockBackend;

    #[test]
    fn recorder_logs_calls_in_order() {
        let (backends, recorder) = record(Backends::all_mock(MockBackend::new(0)));
        let req = GenerationRequest::new("slum", ModelClass::SdClass, Some(1));
        let image = match backends.generator.generate(&req).unwrap() {
            GenerationOutcome::Image(img) => img,
            _ => panic!("expected image"),
        };
        backends.captioner.caption(&image).unwrap();
        backends.refiner.refine(&image, ModelClass::XlClass).unwrap();
        assert_eq!(
            recorder.calls(),
            vec![
                BackendCall::Generate {
                    class: ModelClass::SdClass
                },
                BackendCall::Caption,
                BackendCall::Refine,
            ]
        );
        recorder.clear();
        assert!(recorder.calls().is_empty());
    }
}
