mod common;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use common::{read, Fixture};
use http_body_util::BodyExt;
use pyragen::service::{router, AppState};
use pyragen::wire::{ErrorBody, GenerateResponse, Meta};
use pyragen::{checkpoint, imageio};
use pyragen_core::image::{Rect, RegionMask};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Api {
    state: AppState,
    f: Fixture,
}

impl Api {
    fn new() -> Self {
        let f = Fixture::new();
        let model = checkpoint::load_model(&f.path("gan.pgc"), None).unwrap();
        Api {
            state: AppState::new(model),
            f,
        }
    }

    fn image_b64(&self) -> String {
        B64.encode(read(&self.f.path("image.png")))
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json");
        let req = match body {
            Some(b) => req.body(Body::from(b.to_string())).unwrap(),
            None => req.body(Body::empty()).unwrap(),
        };
        let resp = router(self.state.clone()).oneshot(req).await.unwrap();
        let status = resp.status();
        (
            status,
            resp.into_body()
                .collect()
                .await
                .unwrap()
                .to_bytes()
                .to_vec(),
        )
    }

    async fn ok(&self, uri: &str, body: Value) -> GenerateResponse {
        let (status, bytes) = self.call("POST", uri, Some(body)).await;
        assert_eq!(
            status,
            StatusCode::OK,
            "{}",
            String::from_utf8_lossy(&bytes)
        );
        serde_json::from_slice(&bytes).unwrap()
    }

    async fn err(&self, uri: &str, body: Value, want: StatusCode) -> ErrorBody {
        let (status, bytes) = self.call("POST", uri, Some(body)).await;
        assert_eq!(status, want, "{}", String::from_utf8_lossy(&bytes));
        serde_json::from_slice(&bytes).unwrap()
    }
}

#[tokio::test]
async fn meta_mirrors_the_spec() {
    let api = Api::new();
    let (status, bytes) = api.call("GET", "/api/meta", None).await;
    assert_eq!(status, StatusCode::OK);
    let meta: Meta = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(meta.levels, ["conv1", "conv2", "fc7", "fc8"]);
    assert_eq!(meta.classes, ["0", "1", "2"]);
    assert_eq!(meta.image_size, 16);
}

#[tokio::test]
async fn invert_is_deterministic_under_a_seed() {
    let api = Api::new();
    let body = json!({"image": api.image_b64(), "level": "conv2", "seed": 11});
    let a = api.ok("/api/invert", body.clone()).await;
    let b = api.ok("/api/invert", body).await;
    assert_eq!(a.samples.len(), 4);
    assert_eq!(a.samples, b.samples);
    assert_eq!(
        (a.seed_used, a.provenance.seed, a.provenance.level.as_str()),
        (11, 11, "conv2")
    );
    for s in &a.samples {
        let im = imageio::decode_image(&B64.decode(s).unwrap()).unwrap();
        assert_eq!((im.width(), im.height()), (16, 16));
    }
    let c = api
        .ok(
            "/api/invert",
            json!({"image": api.image_b64(), "level": "conv2", "seed": 12, "num_samples": 2}),
        )
        .await;
    assert_eq!(c.samples.len(), 2);
    assert_ne!(c.samples[0], a.samples[0]);
}

#[tokio::test]
async fn a_missing_seed_is_drawn_and_echoed() {
    let api = Api::new();
    let body = json!({"image": api.image_b64(), "level": "fc7", "num_samples": 1});
    let a = api.ok("/api/invert", body).await;
    let replay = api.ok("/api/invert", json!({"image": api.image_b64(), "level": "fc7", "num_samples": 1, "seed": a.seed_used})).await;
    assert_eq!(a.samples, replay.samples);
}

#[tokio::test]
async fn all_operations_answer() {
    let api = Api::new();
    let region = RegionMask::from_rect(16, 16, Rect::new(0, 0, 8, 8)).unwrap();
    let region = B64.encode(imageio::encode_region(&region).unwrap());
    let r = api.ok("/api/repaint", json!({"image": api.image_b64(), "region": region, "level": "conv2", "seed": 1, "label": 1})).await;
    assert_eq!(
        (r.provenance.operation.as_str(), r.label_used),
        ("repaint", 1)
    );
    let patch = B64.encode(read(&api.f.path("patch.png")));
    let c = api
        .ok(
            "/api/composite",
            json!({
                "base": api.image_b64(), "patch": patch, "level": "conv2", "seed": 1,
                "placement": {"x": 2, "y": 2, "width": 8, "height": 8},
            }),
        )
        .await;
    assert_eq!(c.provenance.operation, "composite");
    let l = api
        .ok(
            "/api/relabel",
            json!({"image": api.image_b64(), "label": 2, "seed": 1, "num_samples": 3}),
        )
        .await;
    assert_eq!(
        (l.samples.len(), l.label_used, l.provenance.level.as_str()),
        (3, 2, "conv2")
    );
}

#[tokio::test]
async fn semantic_failures_are_422() {
    let api = Api::new();
    let e = api
        .err(
            "/api/invert",
            json!({"image": api.image_b64(), "level": "conv7"}),
            StatusCode::UNPROCESSABLE_ENTITY,
        )
        .await;
    assert_eq!(e.error, "unknown_level");
    assert!(e.message.contains("conv7"));
    let e = api
        .err(
            "/api/relabel",
            json!({"image": api.image_b64(), "label": 3}),
            StatusCode::UNPROCESSABLE_ENTITY,
        )
        .await;
    assert_eq!(e.error, "unknown_class");
    for region in [RegionMask::empty(16, 16), RegionMask::full(16, 16)] {
        let region = B64.encode(imageio::encode_region(&region).unwrap());
        let e = api
            .err(
                "/api/repaint",
                json!({"image": api.image_b64(), "region": region, "level": "conv1"}),
                StatusCode::UNPROCESSABLE_ENTITY,
            )
            .await;
        assert_eq!(e.error, "degenerate_region");
    }
    let e = api
        .err(
            "/api/composite",
            json!({
                "base": api.image_b64(), "patch": api.image_b64(), "level": "conv2",
                "placement": {"x": 12, "y": 0, "width": 8, "height": 8},
            }),
            StatusCode::UNPROCESSABLE_ENTITY,
        )
        .await;
    assert_eq!(e.error, "invalid_input");
}

#[tokio::test]
async fn malformed_requests_are_400_with_the_field() {
    let api = Api::new();
    let cases = [
        (json!({"image": api.image_b64(), "level": 3}), "level"),
        (json!({"image": api.image_b64()}), "."),
        (json!({"image": "not base64!", "level": "conv1"}), "image"),
        (
            json!({"image": B64.encode(b"plain text"), "level": "conv1"}),
            "image",
        ),
        (
            json!({"image": api.image_b64(), "level": "conv1", "num_samples": 0}),
            "num_samples",
        ),
        (
            json!({"image": api.image_b64(), "level": "conv1", "num_samples": 65}),
            "num_samples",
        ),
        (
            json!({"image": api.image_b64(), "level": "conv1", "colour": 1}),
            "colour",
        ),
        (
            json!({"image": api.image_b64(), "level": "conv1", "seed": -4}),
            "seed",
        ),
    ];
    for (body, path) in cases {
        let e = api
            .err("/api/invert", body.clone(), StatusCode::BAD_REQUEST)
            .await;
        assert_eq!(e.error, "bad_request");
        assert_eq!(e.path.as_deref(), Some(path), "{body}: {}", e.message);
    }
    let e = api
        .err(
            "/api/composite",
            json!({
                "base": api.image_b64(), "patch": api.image_b64(), "level": "conv2",
                "placement": {"x": 0, "y": 0, "width": "8", "height": 8},
            }),
            StatusCode::BAD_REQUEST,
        )
        .await;
    assert_eq!(e.path.as_deref(), Some("placement.width"));
    let (status, _) = api.call("POST", "/api/invert", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn requests_leave_the_model_untouched() {
    let api = Api::new();
    let before = (
        api.state.model().generator.digest(),
        api.state.model().classifier.digest(),
    );
    let mut handles = Vec::new();
    for seed in 0..4 {
        let body =
            json!({"image": api.image_b64(), "level": "conv1", "seed": seed, "num_samples": 2});
        let app = router(api.state.clone());
        handles.push(tokio::spawn(async move {
            let req = Request::post("/api/invert")
                .body(Body::from(body.to_string()))
                .unwrap();
            app.oneshot(req).await.unwrap().status()
        }));
    }
    for h in handles {
        assert_eq!(h.await.unwrap(), StatusCode::OK);
    }
    assert_eq!(
        before,
        (
            api.state.model().generator.digest(),
            api.state.model().classifier.digest()
        )
    );
}
