//! Wire-protocol client behavior against a scripted local server:
//! happy paths, safety rejection decoding, protocol errors and the
//! retry/backoff schedule.

mod common;

use std::time::Duration;

use archpost_core::backend::http::{HttpBackend, RetryPolicy, RoleEndpoints};
use archpost_core::backend::{
    BackendError, Captioning, GenerationOutcome, GenerationRequest, ImageArtifact,
    ImageGeneration, ImageRefinement, ImageScoring, ModelClass, TextExpansion,
};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use common::{dead_endpoint, StubResponse, StubServer};

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 5,
        base: Duration::from_millis(1),
        factor: 2.0,
    }
}

fn client_for(server: &StubServer) -> HttpBackend {
    HttpBackend::new(RoleEndpoints::single(&server.url()), fast_retry())
}

fn png_b64() -> (String, Vec<u8>) {
    let bytes = vec![0x89, b'P', b'N', b'G', 1, 2, 3, 4];
    (BASE64.encode(&bytes), bytes)
}

#[test]
fn generate_round_trips_the_wire_shape() {
    let (b64, bytes) = png_b64();
    let server = StubServer::start(vec![StubResponse::json(
        200,
        &format!(r#"{{"image_b64":"{b64}","width":512,"height":512}}"#),
    )]);
    let backend = client_for(&server);
    let req = GenerationRequest::new("slum, granite", ModelClass::SdClass, Some(42));
    let outcome = backend.generate(&req).unwrap();
    let requests = server.finish();

    let artifact = match outcome {
        GenerationOutcome::Image(a) => a,
        GenerationOutcome::Rejected(r) => panic!("unexpected rejection {r:?}"),
    };
    assert_eq!((artifact.width, artifact.height), (512, 512));
    assert_eq!(artifact.bytes, bytes);

    assert_eq!(requests.len(), 1);
    assert_eq!(requests[0].method, "POST");
    assert_eq!(requests[0].path, "/v1/generate");
    let sent: serde_json::Value = serde_json::from_slice(&requests[0].body).unwrap();
    assert_eq!(sent["prompt"], "slum, granite");
    assert_eq!(sent["width"], 512);
    assert_eq!(sent["height"], 512);
    assert_eq!(sent["model_class"], "sd_class");
    assert_eq!(sent["seed"], 42);
}

#[test]
fn safety_rejection_is_a_value_not_an_error() {
    let server = StubServer::start(vec![StubResponse::json(
        422,
        r#"{"error":"safety_rejected","reason":"flagged content"}"#,
    )]);
    let backend = client_for(&server);
    let req = GenerationRequest::new("slum", ModelClass::SdClass, None);
    match backend.generate(&req).unwrap() {
        GenerationOutcome::Rejected(rejection) => {
            assert_eq!(rejection.reason, "flagged content")
        }
        GenerationOutcome::Image(_) => panic!("expected rejection"),
    }
    assert_eq!(server.finish().len(), 1, "422 must not retry");
}

#[test]
fn unknown_422_is_a_protocol_error() {
    let server = StubServer::start(vec![StubResponse::json(
        422,
        r#"{"error":"too_large"}"#,
    )]);
    let backend = client_for(&server);
    let req = GenerationRequest::new("slum", ModelClass::SdClass, None);
    assert!(matches!(
        backend.generate(&req),
        Err(BackendError::Protocol(_))
    ));
}

#[test]
fn plain_4xx_fails_without_retry() {
    let server = StubServer::start(vec![StubResponse::json(400, r#"{"error":"bad"}"#)]);
    let backend = client_for(&server);
    let req = GenerationRequest::new("slum", ModelClass::SdClass, None);
    assert!(matches!(
        backend.generate(&req),
        Err(BackendError::Protocol(_))
    ));
    assert_eq!(server.finish().len(), 1);
}

#[test]
fn transient_5xx_retries_until_success() {
    let (b64, _) = png_b64();
    let ok = format!(r#"{{"image_b64":"{b64}","width":512,"height":512}}"#);
    let server = StubServer::start(vec![
        StubResponse::json(500, "{}"),
        StubResponse::json(503, "{}"),
        StubResponse::json(200, &ok),
    ]);
    let backend = client_for(&server);
    let req = GenerationRequest::new("slum", ModelClass::SdClass, None);
    assert!(matches!(
        backend.generate(&req).unwrap(),
        GenerationOutcome::Image(_)
    ));
    assert_eq!(server.finish().len(), 3);
}

#[test]
fn exhausted_5xx_surfaces_unavailable_after_five_attempts() {
    let server = StubServer::start(vec![StubResponse::json(500, "{}"); 5]);
    let backend = client_for(&server);
    let req = GenerationRequest::new("slum", ModelClass::SdClass, None);
    assert!(matches!(
        backend.generate(&req),
        Err(BackendError::Unavailable(_))
    ));
    assert_eq!(server.finish().len(), 5);
}

#[test]
fn connection_refused_surfaces_unavailable() {
    let backend = HttpBackend::new(RoleEndpoints::single(&dead_endpoint()), fast_retry());
    let req = GenerationRequest::new("slum", ModelClass::SdClass, None);
    assert!(matches!(
        backend.generate(&req),
        Err(BackendError::Unavailable(_))
    ));
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let (b64, _) = png_b64();
    let server = StubServer::start(vec![StubResponse::json(
        200,
        &format!(r#"{{"image_b64":"{b64}","width":256,"height":256}}"#),
    )]);
    let backend = client_for(&server);
    let req = GenerationRequest::new("slum", ModelClass::SdClass, None);
    assert!(matches!(
        backend.generate(&req),
        Err(BackendError::Protocol(_))
    ));
}

#[test]
fn img2img_posts_the_source_image() {
    let (b64, bytes) = png_b64();
    let server = StubServer::start(vec![StubResponse::json(
        200,
        &format!(r#"{{"image_b64":"{b64}","width":1024,"height":1024}}"#),
    )]);
    let backend = client_for(&server);
    let source = ImageArtifact::from_bytes(bytes.clone(), 512, 512, "t");
    let outcome = backend.refine(&source, ModelClass::XlClass).unwrap();
    assert!(matches!(outcome, GenerationOutcome::Image(a) if a.width == 1024));
    let requests = server.finish();
    assert_eq!(requests[0].path, "/v1/img2img");
    let sent: serde_json::Value = serde_json::from_slice(&requests[0].body).unwrap();
    assert_eq!(sent["image_b64"], BASE64.encode(&bytes));
    assert_eq!(sent["model_class"], "xl_class");
}

#[test]
fn caption_expand_score_round_trip() {
    let server = StubServer::start(vec![
        StubResponse::json(200, r#"{"caption":"a painting of towers in fog"}"#),
        StubResponse::json(200, r#"{"phrases":["weathered slum","slum at dusk"]}"#),
        StubResponse::json(200, r#"{"aesthetic":5.91,"technical":5.2}"#),
    ]);
    let backend = client_for(&server);
    let image = ImageArtifact::from_bytes(vec![1, 2, 3], 512, 512, "t");

    let caption = backend.caption(&image).unwrap();
    assert_eq!(caption.text, "a painting of towers in fog");

    let phrases = backend.expand(&["slum".to_string()]).unwrap();
    assert_eq!(phrases, vec!["weathered slum", "slum at dusk"]);

    let score = backend.score("item-1", &image).unwrap();
    assert_eq!(score.item_id, "item-1");
    assert!((score.aesthetic - 5.91).abs() < 1e-9);

    let requests = server.finish();
    let paths: Vec<&str> = requests.iter().map(|r| r.path.as_str()).collect();
    assert_eq!(paths, vec!["/v1/caption", "/v1/expand", "/v1/score"]);
}

#[test]
fn out_of_range_scores_are_protocol_errors() {
    let server = StubServer::start(vec![StubResponse::json(
        200,
        r#"{"aesthetic":11.0,"technical":5.0}"#,
    )]);
    let backend = client_for(&server);
    let image = ImageArtifact::from_bytes(vec![1], 512, 512, "t");
    assert!(matches!(
        backend.score("i", &image),
        Err(BackendError::Protocol(_))
    ));
}
