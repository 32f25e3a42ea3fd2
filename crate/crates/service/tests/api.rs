//! End-to-end tests through the router, no sockets.

use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use prelabel_core::formats::{self, Format};
use prelabel_core::providers::mock::DetectorNoise;
use prelabel_core::providers::ProviderConfig;
use prelabel_core::synth::{write_folder, SceneSpec};
use prelabel_service::{app, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Client {
    app: Router,
    token: Option<String>,
    _dir: tempfile::TempDir,
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    bytes: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }
}

fn config(dir: &Path) -> ServiceConfig {
    ServiceConfig {
        data_dir: dir.join("data"),
        admin_password: "s3cret-pass".into(),
        provider: ProviderConfig {
            seed: 9,
            noise: DetectorNoise { duplicates: (1, 3), jitter: 0.01, mislabel_prob: 0.3, ..Default::default() },
            ..Default::default()
        },
        ..Default::default()
    }
}

impl Client {
    fn new() -> Self {
        Self::with(|_| {})
    }

    fn with(tweak: impl FnOnce(&mut ServiceConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        tweak(&mut cfg);
        let app = app(AppState::new(cfg).unwrap());
        Self { app, token: None, _dir: dir }
    }

    fn dir(&self) -> &Path {
        self._dir.path()
    }

    async fn send(&self, req: Request<Body>) -> Reply {
        let res = self.app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let headers = res.headers().clone();
        let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
        Reply { status, headers, bytes }
    }

    fn request(&self, method: Method, uri: &str) -> axum::http::request::Builder {
        let mut b = Request::builder().method(method).uri(uri);
        if let Some(t) = &self.token {
            b = b.header(header::AUTHORIZATION, format!("Bearer {t}"));
        }
        b
    }

    async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> Reply {
        let req = match body {
            Some(v) => self
                .request(method, uri)
                .header(header::CONTENT_TYPE, "application/json")
                .body(Body::from(v.to_string())),
            None => self.request(method, uri).body(Body::empty()),
        };
        self.send(req.unwrap()).await
    }

    async fn login(mut self) -> Self {
        let r = self.call(Method::POST, "/api/login", Some(json!({"username": "admin", "password": "s3cret-pass"}))).await;
        assert_eq!(r.status, StatusCode::OK);
        self.token = Some(r.json()["token"].as_str().unwrap().to_string());
        self
    }

    async fn project(&self, name: &str, mode: &str) -> i64 {
        let body = json!({"name": name, "mode": mode, "classes": ["cat", "dog", "bird"]});
        let r = self.call(Method::POST, "/api/projects", Some(body)).await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.json());
        r.json()["id"].as_i64().unwrap()
    }

    async fn upload(&self, project: i64, files: &[(String, Vec<u8>)]) -> Reply {
        let boundary = "xxBOUNDARYxx";
        let mut body = Vec::new();
        for (name, bytes) in files {
            body.extend_from_slice(
                format!(
                    "--{boundary}\r\nContent-Disposition: form-data; name=\"files\"; filename=\"{name}\"\r\nContent-Type: image/png\r\n\r\n"
                )
                .as_bytes(),
            );
            body.extend_from_slice(bytes);
            body.extend_from_slice(b"\r\n");
        }
        body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
        let req = self
            .request(Method::POST, &format!("/api/projects/{project}/images"))
            .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
            .body(Body::from(body))
            .unwrap();
        self.send(req).await
    }

    async fn wait_job(&self, id: i64) -> Value {
        for _ in 0..2000 {
            let job = self.call(Method::GET, &format!("/api/jobs/{id}"), None).await.json();
            if job["state"] == "done" || job["state"] == "failed" {
                return job;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("job {id} did not finish");
    }

    async fn images(&self, project: i64) -> Vec<Value> {
        let r = self.call(Method::GET, &format!("/api/projects/{project}/images?limit=500"), None).await;
        r.json()["items"].as_array().unwrap().clone()
    }
}

fn scene_files(dir: &Path, count: usize) -> Vec<(String, Vec<u8>)> {
    let paths = write_folder(dir, &SceneSpec::default(), count, 21).unwrap();
    paths.iter().map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap())).collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn requests_without_a_session_are_rejected() {
    let c = Client::new();
    assert_eq!(c.call(Method::GET, "/health", None).await.status, StatusCode::OK);
    for (m, uri) in [(Method::GET, "/api/projects"), (Method::GET, "/api/jobs"), (Method::POST, "/api/projects/1/preannotate")] {
        let r = c.call(m, uri, None).await;
        assert_eq!(r.status, StatusCode::UNAUTHORIZED, "{uri}");
        assert!(r.json()["error"].is_string());
    }
    let bad = c.call(Method::POST, "/api/login", Some(json!({"username": "admin", "password": "nope"}))).await;
    assert_eq!(bad.status, StatusCode::UNAUTHORIZED);

    let c = c.login().await;
    assert_eq!(c.call(Method::GET, "/api/me", None).await.json()["username"], "admin");
    assert_eq!(c.call(Method::POST, "/api/logout", None).await.status, StatusCode::NO_CONTENT);
    assert_eq!(c.call(Method::GET, "/api/projects", None).await.status, StatusCode::UNAUTHORIZED);
}

#[tokio::test(flavor = "multi_thread")]
async fn registration_follows_the_config_switch() {
    let body = json!({"username": "ann", "password": "longenough"});
    let closed = Client::new();
    assert_eq!(closed.call(Method::POST, "/api/register", Some(body.clone())).await.status, StatusCode::FORBIDDEN);

    let open = Client::with(|c| c.allow_registration = true);
    let short = open.call(Method::POST, "/api/register", Some(json!({"username": "x", "password": "short"}))).await;
    assert_eq!(short.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(short.json()["fields"][0]["field"], "password");
    assert_eq!(open.call(Method::POST, "/api/register", Some(body.clone())).await.status, StatusCode::CREATED);
    assert_eq!(open.call(Method::POST, "/api/register", Some(body)).await.status, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread")]
async fn project_validation_and_duplicates() {
    let c = Client::new().login().await;
    c.project("alpha", "detection").await;
    let dup = c.call(Method::POST, "/api/projects", Some(json!({"name": "alpha", "mode": "obb", "classes": ["x"]}))).await;
    assert_eq!(dup.status, StatusCode::CONFLICT);

    let bad = c.call(Method::POST, "/api/projects", Some(json!({"name": " ", "mode": "cuboid", "classes": []}))).await;
    assert_eq!(bad.status, StatusCode::UNPROCESSABLE_ENTITY);
    let fields: Vec<String> = bad.json()["fields"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap().into()).collect();
    assert_eq!(fields, ["name", "mode", "classes"]);

    let malformed = c
        .send(
            c.request(Method::POST, "/api/projects")
                .header(header::CONTENT_TYPE, "application/json")
                .body(Body::from("{\"name\": 3"))
                .unwrap(),
        )
        .await;
    assert_eq!(malformed.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(malformed.json()["error"].is_string());

    assert_eq!(c.call(Method::GET, "/api/projects/999", None).await.status, StatusCode::NOT_FOUND);
    let class = c.call(Method::POST, "/api/projects/1/classes", Some(json!({"name": "Fox"}))).await;
    assert_eq!((class.status, class.json()["name"].clone()), (StatusCode::CREATED, json!("fox")));
    let again = c.call(Method::POST, "/api/projects/1/classes", Some(json!({"name": "fox"}))).await;
    assert_eq!(again.status, StatusCode::OK);
    assert_eq!(c.call(Method::GET, "/api/projects/1/classes", None).await.json().as_array().unwrap().len(), 4);
}

#[tokio::test(flavor = "multi_thread")]
async fn pagination_is_clamped() {
    let c = Client::new().login().await;
    for i in 0..7 {
        c.project(&format!("p{i}"), "detection").await;
    }
    let page = c.call(Method::GET, "/api/projects?offset=2&limit=3", None).await.json();
    assert_eq!((page["total"].as_u64(), page["items"].as_array().unwrap().len()), (Some(7), 3));
    assert_eq!(page["items"][0]["name"], "p2");
    let huge = c.call(Method::GET, "/api/projects?limit=100000", None).await.json();
    assert_eq!(huge["limit"], 500);
    let zero = c.call(Method::GET, "/api/projects?limit=0", None).await.json();
    assert_eq!(zero["limit"], 1);
    assert_eq!(c.call(Method::GET, "/api/projects?limit=abc", None).await.status, StatusCode::UNPROCESSABLE_ENTITY);
}

/// Upload, pre-annotate in the background, review stats and export.
#[tokio::test(flavor = "multi_thread")]
async fn upload_preannotate_export() {
    let c = Client::new().login().await;
    let project = c.project("scenes", "detection").await;
    let files = scene_files(&c.dir().join("src"), 10);

    let up = c.upload(project, &files).await;
    assert_eq!(up.status, StatusCode::CREATED, "{}", up.json());
    assert_eq!(up.json()["added"].as_array().unwrap().len(), 10);
    let images = c.images(project).await;
    assert_eq!(images.len(), 10);
    assert!(images.iter().all(|i| i["status"] == "unannotated"));

    let file = c.call(Method::GET, &format!("/api/images/{}/file", images[0]["id"]), None).await;
    assert_eq!(file.headers[header::CONTENT_TYPE], "image/png");
    assert_eq!(file.bytes, files[0].1);

    let started = c.call(Method::POST, &format!("/api/projects/{project}/preannotate"), None).await;
    assert_eq!(started.status, StatusCode::ACCEPTED);
    let job = c.wait_job(started.json()["id"].as_i64().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["report"]["processed"], 10);
    assert_eq!(job["report"]["failures"], 0);
    assert_eq!(job["progress"], json!({"processed": 10, "total": 10}));
    assert_eq!(job["updates"], 10);

    let stats = c.call(Method::GET, &format!("/api/projects/{project}/stats"), None).await.json();
    assert_eq!(stats["processed"], 10);
    let sum: f64 = stats["completion"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);
    assert!(stats["annotation_count"].as_u64().unwrap() > 0);

    // nothing accepted yet, so include pending annotations
    let started = c
        .call(Method::POST, &format!("/api/projects/{project}/export?format=coco&include_pending=true"), None)
        .await;
    assert_eq!(started.status, StatusCode::ACCEPTED);
    let job = c.wait_job(started.json()["id"].as_i64().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["report"]["diagnostics"], json!([]));
    let url = job["download_url"].as_str().unwrap();
    let zip = c.call(Method::GET, url, None).await;
    assert_eq!(zip.headers[header::CONTENT_TYPE], "application/zip");
    let files = prelabel_service::bundle::unzip_files(&zip.bytes).unwrap();
    assert!(formats::validate_bundle(Format::Coco, &files).is_empty());
    let (entries, _) = formats::read_bundle(Format::Coco, &files).unwrap();
    assert_eq!(entries.len(), stats["annotation_count"].as_u64().unwrap() as usize);

    let voc = c.call(Method::POST, &format!("/api/projects/{project}/export?format=pascal"), None).await;
    assert_eq!(voc.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread")]
async fn corrupt_upload_is_a_per_image_failure() {
    let c = Client::new().login().await;
    let project = c.project("mixed", "segmentation").await;
    let files = scene_files(&c.dir().join("src"), 4);
    c.upload(project, &files).await;
    // readable header, truncated body: accepted at upload, fails in the pipeline
    let mut broken = files[0].1.clone();
    broken.truncate(broken.len() / 3);
    let up = c.upload(project, &[("broken.png".into(), broken), ("notes.png".into(), b"text".to_vec())]).await;
    assert_eq!(up.status, StatusCode::CREATED, "{}", up.json());
    assert_eq!(up.json()["skipped"][0]["file"], "notes.png");

    let started = c.call(Method::POST, &format!("/api/projects/{project}/preannotate"), None).await.json();
    let job = c.wait_job(started["id"].as_i64().unwrap()).await;
    assert_eq!(job["state"], "done");
    assert_eq!((job["report"]["processed"].as_u64(), job["report"]["failures"].as_u64()), (Some(4), Some(1)));
    let failed: Vec<_> = c.images(project).await.into_iter().filter(|i| i["status"] == "failed").collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0]["file_name"], "broken.png");
}

#[tokio::test(flavor = "multi_thread")]
async fn one_preannotation_per_project_at_a_time() {
    let c = Client::new().login().await;
    let project = c.project("busy", "obb").await;
    c.upload(project, &scene_files(&c.dir().join("src"), 6)).await;
    let uri = format!("/api/projects/{project}/preannotate");
    let first = c.call(Method::POST, &uri, None).await;
    assert_eq!(first.status, StatusCode::ACCEPTED);
    let second = c.call(Method::POST, &uri, None).await;
    let id = first.json()["id"].as_i64().unwrap();
    // the first run may already be over on a fast machine
    if c.call(Method::GET, &format!("/api/jobs/{id}"), None).await.json()["state"] == "running" {
        assert!(matches!(second.status, StatusCode::CONFLICT | StatusCode::ACCEPTED));
    }
    c.wait_job(id).await;
    if second.status == StatusCode::ACCEPTED {
        c.wait_job(second.json()["id"].as_i64().unwrap()).await;
    }
    let third = c.call(Method::POST, &uri, None).await;
    assert_eq!(third.status, StatusCode::ACCEPTED);
    c.wait_job(third.json()["id"].as_i64().unwrap()).await;
    let listed = c.call(Method::GET, &format!("/api/jobs?project={project}"), None).await.json();
    assert!(listed.as_array().unwrap().len() >= 2);

    let empty = c.project("empty", "detection").await;
    let r = c.call(Method::POST, &format!("/api/projects/{empty}/preannotate"), None).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread")]
async fn annotation_edits_are_all_or_nothing() {
    let c = Client::new().login().await;
    let project = c.project("edit", "detection").await;
    c.upload(project, &scene_files(&c.dir().join("src"), 1)).await;
    let image = c.images(project).await[0]["id"].as_i64().unwrap();
    let uri = format!("/api/images/{image}/annotations");

    let good = json!({"class_id": 1, "geometry": {"type": "bbox", "x1": 10.0, "y1": 10.0, "x2": 50.0, "y2": 40.0},
                      "source": "manual", "state": "accepted"});
    let put = c.call(Method::PUT, &uri, Some(json!({"revision": 0, "annotations": [good.clone()]}))).await;
    assert_eq!(put.status, StatusCode::OK, "{}", put.json());
    let listed = put.json();
    assert_eq!(listed["annotations"].as_array().unwrap().len(), 1);
    let revision = listed["revision"].as_i64().unwrap();

    // a polygon in a detection project and an unknown class
    let polygon = json!({"class_id": 1, "geometry": {"type": "polygon", "points": [[0.0, 0.0], [9.0, 0.0], [0.0, 9.0]]},
                         "source": "manual", "state": "accepted"});
    let mut stranger = good.clone();
    stranger["class_id"] = json!(77);
    let bad = c
        .call(Method::PUT, &uri, Some(json!({"revision": revision, "annotations": [good.clone(), polygon, stranger]})))
        .await;
    assert_eq!(bad.status, StatusCode::UNPROCESSABLE_ENTITY);
    let fields: Vec<Value> = bad.json()["fields"].as_array().unwrap().iter().map(|f| f["field"].clone()).collect();
    assert_eq!(fields, [json!("annotations[1]"), json!("annotations[2]")]);
    let after = c.call(Method::GET, &uri, None).await.json();
    assert_eq!(after["annotations"], listed["annotations"]);
    assert_eq!(after["revision"], revision);

    let stale = c.call(Method::PUT, &uri, Some(json!({"revision": revision - 1, "annotations": []}))).await;
    assert_eq!(stale.status, StatusCode::CONFLICT);

    let aid = after["annotations"][0]["id"].as_i64().unwrap();
    let review = c.call(Method::PATCH, &format!("{uri}/{aid}"), Some(json!({"state": "pending"}))).await;
    assert_eq!(review.json()["annotations"][0]["state"], "pending", "{}", review.json());
    assert_eq!(c.call(Method::DELETE, &format!("{uri}?ids={aid},999"), None).await.status, StatusCode::NOT_FOUND);
    assert_eq!(c.call(Method::DELETE, &format!("{uri}?ids=x"), None).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    let del = c.call(Method::DELETE, &format!("{uri}?ids={aid}"), None).await.json();
    assert_eq!(del["deleted"], 1);

    let done = c.call(Method::PATCH, &format!("/api/images/{image}"), Some(json!({"marked_done": true}))).await.json();
    assert_eq!(done["status"], "annotated");
}

#[tokio::test(flavor = "multi_thread")]
async fn mask_endpoint_returns_project_geometry() {
    let c = Client::new().login().await;
    let files = scene_files(&c.dir().join("src"), 1);
    let spec = SceneSpec::default();
    let scene = prelabel_core::synth::generate_scene(&spec, 21);
    let object = &scene.objects[0];
    let [x1, y1, x2, y2] = [object.bbox.x1, object.bbox.y1, object.bbox.x2, object.bbox.y2];
    let centre = [(x1 + x2) / 2.0, (y1 + y2) / 2.0];

    for (mode, kind) in [("detection", "bbox"), ("obb", "obb"), ("segmentation", "polygon")] {
        let project = c.project(mode, mode).await;
        c.upload(project, &files).await;
        let image = c.images(project).await[0]["id"].as_i64().unwrap();
        let uri = format!("/api/images/{image}/mask");
        let r = c.call(Method::POST, &uri, Some(json!({"point": centre}))).await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.json());
        let shape = &r.json()["shape"];
        assert_eq!(shape["type"], kind, "{mode}: {shape}");
        let boxed = c.call(Method::POST, &uri, Some(json!({"box": [x1, y1, x2, y2]}))).await.json();
        assert_eq!(boxed["shape"]["type"], kind);
        assert!(boxed["mask_pixels"].as_u64().unwrap() > 0);
    }
    let neither = c.call(Method::POST, "/api/images/1/mask", Some(json!({}))).await;
    assert_eq!(neither.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread")]
async fn import_validates_before_writing() {
    let c = Client::new().login().await;
    let project = c.project("imp", "detection").await;
    let files = scene_files(&c.dir().join("src"), 2);
    c.upload(project, &files).await;
    let name = &files[0].0;
    let stem = name.trim_end_matches(".png");
    let labels = format!("labels/{stem}.txt");

    let broken = json!({"format": "yolo", "files": {"data.yaml": "names: [cat, dog]\n", labels.clone(): "0 0.5 0.5 nope 0.2\n"}});
    let r = c.call(Method::POST, &format!("/api/projects/{project}/import"), Some(broken)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "{}", r.json());
    let stats = c.call(Method::GET, &format!("/api/projects/{project}/stats"), None).await.json();
    assert_eq!(stats["annotation_count"], 0);

    let ok = json!({"format": "yolo", "files": {"data.yaml": "names: [cat, dog]\n", labels: "1 0.5 0.5 0.25 0.25\n0 0.2 0.2 0.1 0.1\n"}});
    let r = c.call(Method::POST, &format!("/api/projects/{project}/import"), Some(ok.clone())).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.json());
    let job = c.wait_job(r.json()["id"].as_i64().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    let stats = c.call(Method::GET, &format!("/api/projects/{project}/stats"), None).await.json();
    assert_eq!(stats["annotation_count"], 2);

    let diag = c.call(Method::POST, "/api/validate", Some(ok)).await.json();
    assert_eq!(diag["diagnostics"], json!([]));
    let bad = json!({"format": "yolo", "files": {"data.yaml": "names: [cat]\n", "labels/a.txt": "0 1.5 0.5 0.2 0.2\n"}});
    let diag = c.call(Method::POST, "/api/validate", Some(bad)).await.json();
    assert!(!diag["diagnostics"].as_array().unwrap().is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn folder_ingest_and_static_fallback() {
    let c = Client::with(|_| {});
    let ui = c.dir().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html>app</html>").unwrap();
    std::fs::write(ui.join("app.js"), "console.log(1)").unwrap();
    let c = Client::with(|cfg| cfg.static_dir = Some(ui.clone())).login().await;

    let root = c.call(Method::GET, "/", None).await;
    assert_eq!((root.status, root.bytes.as_slice()), (StatusCode::OK, b"<html>app</html>".as_slice()));
    let js = c.call(Method::GET, "/app.js", None).await;
    assert_eq!(js.headers[header::CONTENT_TYPE], "text/javascript");
    assert_eq!(c.call(Method::GET, "/projects/3/review", None).await.bytes, b"<html>app</html>");
    assert_eq!(c.call(Method::GET, "/missing.css", None).await.status, StatusCode::NOT_FOUND);
    assert_eq!(c.call(Method::GET, "/api/nothing", None).await.status, StatusCode::NOT_FOUND);

    let project = c.project("folder", "detection").await;
    let src = c.dir().join("src");
    scene_files(&src, 3);
    std::fs::write(src.join("junk.png"), b"junk").unwrap();
    let r = c.call(Method::POST, &format!("/api/projects/{project}/images"), Some(json!({"folder": src}))).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.json());
    assert_eq!(r.json()["added"].as_array().unwrap().len(), 3);
    assert_eq!(r.json()["skipped"].as_array().unwrap().len(), 1);
}
