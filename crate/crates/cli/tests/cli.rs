mod common;

use axum::http::Method;
use common::{run, run_env, s, Client};
use prelabel_cli::{EXIT_INTERNAL, EXIT_OK, EXIT_USER};
use prelabel_core::formats::{export_project, ExportOptions, Format, GeometryPolicy};
use prelabel_core::store::Store;
use prelabel_service::ServiceConfig;
use serde_json::json;

#[test]
fn headless_preannotate_prints_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (data, images) = (dir.path().join("data"), dir.path().join("scenes"));
    assert_eq!(run(&["--seed", "4", "synth", "--out", s(&images), "--count", "6"]).code, EXIT_OK);

    let r = run(&["--data-dir", s(&data), "preannotate", "--images", s(&images), "--classes", "cat,dog,bird"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.starts_with("processed=6 failures=0 "), "{}", r.out);
    assert!(r.out.trim_end().ends_with("project=scenes"));

    // a second run over the same folder adds nothing new
    let again = run(&["--data-dir", s(&data), "--json", "preannotate", "--project", "scenes", "--images", s(&images)]);
    assert_eq!(again.code, EXIT_OK, "{}", again.err);
    let report: serde_json::Value = serde_json::from_str(&again.out).unwrap();
    assert_eq!(report["total"], 6);

    let mode = run(&["--data-dir", s(&data), "preannotate", "--project", "scenes", "--mode", "obb"]);
    assert_eq!(mode.code, EXIT_USER);
    assert!(mode.err.contains("--mode"), "{}", mode.err);
}

#[test]
fn creating_a_project_needs_classes() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("imgs");
    run(&["synth", "--out", s(&images), "--count", "1"]);
    let data = dir.path().join("data");
    let r = run(&["--data-dir", s(&data), "preannotate", "--images", s(&images)]);
    assert_eq!(r.code, EXIT_USER);
    assert!(r.err.contains("--classes"), "{}", r.err);
    let r = run(&["--data-dir", s(&data), "preannotate", "--project", "ghost"]);
    assert_eq!(r.code, EXIT_USER, "{}", r.err);
    let r = run(&["--data-dir", s(&data), "preannotate", "--images", s(&images), "--classes", "cat", "--threshold", "1.5"]);
    assert_eq!(r.code, EXIT_USER);
}

#[test]
fn voc_refuses_polygons_unless_boxed() {
    let dir = tempfile::tempdir().unwrap();
    let (data, images) = (dir.path().join("data"), dir.path().join("seg"));
    run(&["synth", "--out", s(&images), "--count", "3"]);
    let r = run(&["--data-dir", s(&data), "preannotate", "--images", s(&images), "--classes", "cat,dog,bird", "--mode", "segmentation"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);

    let out = dir.path().join("voc");
    let r = run(&["--data-dir", s(&data), "export", "--project", "seg", "--format", "voc", "--out", s(&out), "--include-pending"]);
    assert_eq!(r.code, EXIT_USER);
    assert!(r.err.contains("cannot hold segmentation geometry"), "{}", r.err);
    assert!(!out.exists());

    let r = run(&[
        "--data-dir", s(&data), "export", "--project", "seg", "--format", "voc", "--out", s(&out), "--include-pending", "--boxes-only",
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert_eq!(std::fs::read_dir(out.join("Annotations")).unwrap().count(), 3);
}

#[test]
fn stats_json_matches_the_service_body() {
    let dir = tempfile::tempdir().unwrap();
    let (data, images) = (dir.path().join("data"), dir.path().join("demo"));
    run(&["synth", "--out", s(&images), "--count", "4"]);
    run(&["--data-dir", s(&data), "preannotate", "--images", s(&images), "--classes", "cat,dog,bird"]);
    let r = run(&["--data-dir", s(&data), "--json", "stats", "--project", "demo"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);

    let store = Store::open(&data).unwrap();
    let p = store.project_by_name("demo").unwrap();
    let body = axum_json_body(&store.compute_stats(p.id).unwrap());
    assert_eq!(r.out.trim_end().as_bytes(), body.as_slice());

    let text = run(&["--data-dir", s(&data), "stats", "--project", "demo"]);
    assert!(text.out.contains("processed=4"), "{}", text.out);
    assert_eq!(run(&["--data-dir", s(&data), "stats", "--project", "nope"]).code, EXIT_USER);
}

/// The bytes the service's JSON responder writes.
fn axum_json_body<T: serde::Serialize>(v: &T) -> Vec<u8> {
    use axum::response::IntoResponse;
    let res = axum::Json(v).into_response();
    let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
    rt.block_on(async { http_body_util::BodyExt::collect(res.into_body()).await.unwrap().to_bytes().to_vec() })
}

#[test]
fn export_then_import_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let (data, images) = (dir.path().join("data"), dir.path().join("set"));
    run(&["synth", "--out", s(&images), "--count", "3"]);
    run(&["--data-dir", s(&data), "preannotate", "--images", s(&images), "--classes", "cat,dog,bird"]);
    let zip = dir.path().join("out/set.zip");
    let folder = dir.path().join("out/yolo");
    for (fmt, out) in [("coco", &zip), ("yolo", &folder)] {
        let r = run(&["--data-dir", s(&data), "export", "--project", "set", "--format", fmt, "--out", s(out), "--include-pending"]);
        assert_eq!(r.code, EXIT_OK, "{}", r.err);
    }
    assert!(zip.is_file() && folder.join("data.yaml").is_file());

    // a fresh store with the same images
    let other = dir.path().join("other");
    run(&["--data-dir", s(&other), "preannotate", "--images", s(&images), "--classes", "cat", "--threshold", "1"]);
    let before = Store::open(&other).unwrap();
    let p = before.project_by_name("set").unwrap();
    assert_eq!(before.compute_stats(p.id).unwrap().annotation_count, 0);
    drop(before);

    let r = run(&["--data-dir", s(&other), "import", "--project", "set", "--format", "coco", "--files", s(&zip)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.starts_with("matched_images=3"), "{}", r.out);
    let r = run(&["--data-dir", s(&other), "--json", "import", "--project", "set", "--format", "yolo", "--files", s(&folder)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let report: serde_json::Value = serde_json::from_str(&r.out).unwrap();
    assert_eq!(report["matched_images"], 3);

    let missing = run(&["--data-dir", s(&other), "import", "--project", "set", "--format", "coco", "--files", "/no/such/file"]);
    assert_eq!(missing.code, EXIT_USER);
    let garbage = dir.path().join("bad.json");
    std::fs::write(&garbage, "{").unwrap();
    let parse = run(&["--data-dir", s(&other), "import", "--project", "set", "--format", "coco", "--files", s(&garbage)]);
    assert_eq!(parse.code, EXIT_USER, "{}", parse.err);
}

#[test]
fn flags_env_and_exit_codes() {
    let r = run(&["--frobnicate"]);
    assert_eq!(r.code, EXIT_USER);
    assert!(r.err.contains("Usage"), "{}", r.err);
    assert_eq!(run(&["export", "--project", "x"]).code, EXIT_USER);
    let help = run(&["--help"]);
    assert_eq!(help.code, EXIT_OK);
    for cmd in ["serve", "preannotate", "export", "import", "stats"] {
        assert!(help.out.contains(cmd), "{cmd}");
    }

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("from-env");
    let r = run_env(&[("PRELABEL_DATA_DIR", s(&data))], &["projects"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(data.join("registry.sqlite").exists() || data.read_dir().unwrap().next().is_some());
    assert_eq!(run_env(&[("PRELABEL_SEED", "abc")], &["projects"]).code, EXIT_USER);

    // a regular file where the store directory should be
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let r = run(&["--data-dir", s(&blocker), "projects"]);
    assert_eq!(r.code, EXIT_INTERNAL, "{}", r.err);
}

const NOISE: &str = "duplicates=1..4,jitter=0.02,mislabel=0.3,false_positives=1";

/// Same folder, classes and seed: a headless run and a service job leave
/// identical annotations behind.
#[test]
fn headless_and_service_runs_store_the_same_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("same");
    run(&["synth", "--out", s(&images), "--count", "5"]);
    let images = images.canonicalize().unwrap();
    let (cli_data, svc_data) = (dir.path().join("cli"), dir.path().join("svc"));
    let env = [("PRELABEL_MOCK_NOISE", NOISE)];
    let r = run_env(
        &env,
        &["--data-dir", s(&cli_data), "--seed", "8", "preannotate", "--images", s(&images), "--classes", "cat,dog,bird", "--mode", "obb"],
    );
    assert_eq!(r.code, EXIT_OK, "{}", r.err);

    let mut cfg = ServiceConfig::from_lookup(|k| env.iter().find(|(n, _)| *n == k).map(|(_, v)| v.to_string())).unwrap();
    cfg.data_dir = svc_data.clone();
    cfg.provider.seed = 8;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    rt.block_on(async {
        let c = Client::start(cfg).await;
        let body = json!({"name": "same", "mode": "obb", "classes": ["cat", "dog", "bird"]});
        let id = c.call(Method::POST, "/api/projects", Some(body)).await.json()["id"].as_i64().unwrap();
        let r = c.call(Method::POST, &format!("/api/projects/{id}/images"), Some(json!({"folder": images}))).await;
        assert_eq!(r.json()["added"].as_array().unwrap().len(), 5);
        let job = c.call(Method::POST, &format!("/api/projects/{id}/preannotate"), None).await.json();
        assert_eq!(c.wait_job(job["id"].as_i64().unwrap()).await["state"], "done");
    });

    let (a, b) = (Store::open(&cli_data).unwrap(), Store::open(&svc_data).unwrap());
    let (pa, pb) = (a.project_by_name("same").unwrap(), b.project_by_name("same").unwrap());
    assert_eq!(a.images(pa.id).unwrap(), b.images(pb.id).unwrap());
    let anns = a.project_annotations(pa.id).unwrap();
    assert!(!anns.is_empty());
    assert_eq!(anns, b.project_annotations(pb.id).unwrap());
    for format in Format::ALL {
        let policy = if format.supports(pa.mode) { GeometryPolicy::AsStored } else { GeometryPolicy::BoxesOnly };
        let opts = ExportOptions { policy, include_pending: true };
        assert_eq!(export_project(&a, pa.id, format, opts).unwrap(), export_project(&b, pb.id, format, opts).unwrap());
    }
}
