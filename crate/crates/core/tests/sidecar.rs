//! Wire tests against an in-process stub sidecar. The stub answers with the
//! mock providers, so a pipeline over HTTP must match the in-process one.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use base64::Engine;
use prelabel_core::geometry::BBox;
use prelabel_core::model::{display_color, LabelClass, ProjectMode};
use prelabel_core::preannotator::{Pipeline, PipelineSettings};
use prelabel_core::providers::mock::DetectorNoise;
use prelabel_core::providers::sidecar::{wire, SidecarClient};
use prelabel_core::providers::{
    rle, Detector, Embedder, ImageHandle, MaskGenerator, MaskSeed, ProviderConfig, ProviderError, ProviderKind, Providers,
};
use prelabel_core::synth::{generate_scene, ObjectShape, SceneSpec};

#[derive(Clone, Copy, PartialEq)]
enum Fault {
    None,
    RejectDetect,
    GarbageText,
    ShortText,
    SmallMask,
}

#[derive(Clone)]
struct Stub {
    mock: Providers,
    fault: Fault,
}

fn decode(b64: &str) -> ImageHandle {
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
    ImageHandle::decode(&bytes).unwrap()
}

fn bbox([x1, y1, x2, y2]: [f64; 4]) -> BBox<f64> {
    BBox::new(x1, y1, x2, y2).unwrap()
}

async fn detect(State(s): State<Arc<Stub>>, Json(req): Json<wire::DetectRequest>) -> Result<Json<wire::DetectResponse>, StatusCode> {
    if s.fault == Fault::RejectDetect {
        return Err(StatusCode::UNPROCESSABLE_ENTITY);
    }
    let dets = s.mock.detector.detect(&decode(&req.image), &req.classes, req.threshold).unwrap();
    let detections = dets
        .into_iter()
        .map(|d| wire::WireDetection { bbox: [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2], label: d.label_text, score: d.score })
        .collect();
    Ok(Json(wire::DetectResponse { detections }))
}

async fn embed_image(State(s): State<Arc<Stub>>, Json(req): Json<wire::EmbedImageRequest>) -> Json<wire::EmbedImageResponse> {
    let e = s.mock.embedder.embed_image_crop(&decode(&req.image), &bbox(req.bbox)).unwrap();
    Json(wire::EmbedImageResponse { vector: e.values().to_vec() })
}

async fn embed_text(State(s): State<Arc<Stub>>, Json(req): Json<wire::EmbedTextRequest>) -> axum::response::Response {
    use axum::response::IntoResponse;
    match s.fault {
        Fault::GarbageText => "{\"vectors\": 3".into_response(),
        _ => {
            let mut vectors: Vec<Vec<f64>> =
                s.mock.embedder.embed_texts(&req.labels).unwrap().iter().map(|e| e.values().to_vec()).collect();
            if s.fault == Fault::ShortText {
                vectors.pop();
            }
            Json(wire::EmbedTextResponse { vectors }).into_response()
        }
    }
}

async fn mask(State(s): State<Arc<Stub>>, Json(req): Json<wire::MaskRequest>) -> Json<wire::MaskResponse> {
    let img = decode(&req.image);
    if s.fault == Fault::SmallMask {
        let m = prelabel_core::postprocess::BinaryMask::empty(2, 2).unwrap();
        return Json(wire::MaskResponse { mask_rle: rle::encode(&m) });
    }
    let seed = match req.seed {
        wire::WireSeed::Box(b) => MaskSeed::Box(bbox(b)),
        wire::WireSeed::Point([x, y]) => MaskSeed::Point(prelabel_core::Point::new(x, y)),
    };
    let m = s.mock.masker.generate_mask(&img, &seed).unwrap();
    Json(wire::MaskResponse { mask_rle: rle::encode(&m) })
}

fn mock_config() -> ProviderConfig {
    ProviderConfig {
        seed: 5,
        noise: DetectorNoise { duplicates: (1, 3), jitter: 0.02, mislabel_prob: 0.4, ..Default::default() },
        ..Default::default()
    }
}

/// Starts a stub on an ephemeral port; it lives until the process exits.
fn spawn_stub(classes: &[String], fault: Fault) -> SocketAddr {
    let state = Arc::new(Stub { mock: Providers::from_config(&mock_config(), classes).unwrap(), fault });
    let app = Router::new()
        .route("/detect", post(detect))
        .route("/embed_image", post(embed_image))
        .route("/embed_text", post(embed_text))
        .route("/mask", post(mask))
        .with_state(state);
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    addr
}

fn vocabulary(classes: &[String]) -> Vec<LabelClass> {
    classes
        .iter()
        .enumerate()
        .map(|(i, n)| LabelClass { id: i as i64 + 1, project_id: 1, name: n.clone(), display_color: display_color(n) })
        .collect()
}

fn scene_image(seed: u64) -> ImageHandle {
    let spec = SceneSpec { shapes: vec![ObjectShape::Rect, ObjectShape::Ellipse, ObjectShape::Rotated], ..Default::default() };
    let mut png = std::io::Cursor::new(Vec::new());
    generate_scene(&spec, seed).image.write_to(&mut png, image::ImageFormat::Png).unwrap();
    ImageHandle::decode(png.get_ref()).unwrap()
}

#[test]
fn pipeline_over_http_matches_in_process() {
    let classes: Vec<String> = SceneSpec::default().classes;
    let addr = spawn_stub(&classes, Fault::None);
    let sidecar_cfg =
        ProviderConfig { kind: ProviderKind::Sidecar, endpoint: Some(format!("http://{addr}")), ..mock_config() };
    for mode in [ProjectMode::Detection, ProjectMode::Segmentation, ProjectMode::Obb] {
        let remote = Pipeline::new(PipelineSettings::default(), mode, vocabulary(&classes), Providers::from_config(&sidecar_cfg, &classes).unwrap())
            .unwrap();
        let local = Pipeline::new(PipelineSettings::default(), mode, vocabulary(&classes), Providers::from_config(&mock_config(), &classes).unwrap())
            .unwrap();
        for seed in 0..4 {
            let img = scene_image(seed);
            let a = remote.preannotate_image(&img).unwrap();
            let b = local.preannotate_image(&img).unwrap();
            assert_eq!(a.annotations, b.annotations, "{mode} seed {seed}");
            assert_eq!(a.raw_detections, b.raw_detections);
        }
    }
}

#[test]
fn click_mask_crosses_the_wire() {
    let classes = vec!["cat".to_string()];
    let addr = spawn_stub(&classes, Fault::None);
    let client = SidecarClient::new(format!("http://{addr}/"), "stub", 2);
    let img = scene_image(1);
    let seed = MaskSeed::Point(prelabel_core::Point::new(40.0, 30.0));
    let expected = Providers::from_config(&mock_config(), &classes).unwrap().masker.generate_mask(&img, &seed).unwrap();
    assert_eq!(client.generate_mask(&img, &seed).unwrap(), expected);
}

#[test]
fn protocol_faults_are_typed() {
    let classes = vec!["cat".to_string(), "dog".to_string()];
    let img = scene_image(2);
    let client = |fault| SidecarClient::new(format!("http://{}", spawn_stub(&classes, fault)), "stub", 1);

    let err = client(Fault::RejectDetect).detect(&img, &classes, 0.2).unwrap_err();
    assert!(matches!(err, ProviderError::Input(_)), "{err:?}");
    let err = client(Fault::GarbageText).embed_texts(&classes).unwrap_err();
    assert!(matches!(err, ProviderError::Protocol(_)), "{err:?}");
    let err = client(Fault::ShortText).embed_texts(&classes).unwrap_err();
    assert!(matches!(err, ProviderError::Protocol(_)), "{err:?}");
    let err = client(Fault::SmallMask).generate_mask(&img, &MaskSeed::Box(bbox([0.0, 0.0, 10.0, 10.0]))).unwrap_err();
    assert!(matches!(err, ProviderError::Protocol(_)), "{err:?}");
    // local precondition: nothing is sent
    let err = client(Fault::None).detect(&img, &classes, 1.5).unwrap_err();
    assert!(matches!(err, ProviderError::Input(_)), "{err:?}");
}
