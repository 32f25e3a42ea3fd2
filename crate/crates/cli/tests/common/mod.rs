//! Helpers shared by the CLI and acceptance tests: in-process CLI runs and
//! a socket-free client for the service router.
#![allow(dead_code)]

use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use prelabel_cli::dispatch;
use prelabel_service::{app, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

pub struct Run {
    pub code: i32,
    pub out: String,
    pub err: String,
}

pub fn run_env(env: &[(&str, &str)], args: &[&str]) -> Run {
    let env: Vec<(String, String)> = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let lookup = move |k: &str| env.iter().find(|(n, _)| n == k).map(|(_, v)| v.clone());
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("prelabel").chain(args.iter().copied());
    let code = dispatch(argv, lookup, &mut out, &mut err);
    Run { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}

pub fn run(args: &[&str]) -> Run {
    run_env(&[], args)
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: axum::http::HeaderMap,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }
}

pub struct Client {
    app: Router,
    token: Option<String>,
}

impl Client {
    /// Logs in as the configured admin.
    pub async fn start(config: ServiceConfig) -> Self {
        let (user, password) = (config.admin_user.clone(), config.admin_password.clone());
        let mut c = Self { app: app(AppState::new(config).unwrap()), token: None };
        let r = c.call(Method::POST, "/api/login", Some(json!({"username": user, "password": password}))).await;
        assert_eq!(r.status, StatusCode::OK, "login");
        c.token = Some(r.json()["token"].as_str().unwrap().to_string());
        c
    }

    fn request(&self, method: Method, uri: &str) -> axum::http::request::Builder {
        let b = Request::builder().method(method).uri(uri);
        match &self.token {
            Some(t) => b.header(header::AUTHORIZATION, format!("Bearer {t}")),
            None => b,
        }
    }

    pub async fn send(&self, req: Request<Body>) -> Reply {
        let res = self.app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let headers = res.headers().clone();
        let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
        Reply { status, headers, bytes }
    }

    pub async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> Reply {
        let req = match body {
            Some(v) => self.request(method, uri).header(header::CONTENT_TYPE, "application/json").body(Body::from(v.to_string())),
            None => self.request(method, uri).body(Body::empty()),
        };
        self.send(req.unwrap()).await
    }

    pub async fn upload(&self, project: i64, files: &[(String, Vec<u8>)]) -> Reply {
        let boundary = "----prelabel-test-boundary";
        let mut body = Vec::new();
        for (name, bytes) in files {
            let head = format!(
                "--{boundary}\r\nContent-Disposition: form-data; name=\"files\"; filename=\"{name}\"\r\nContent-Type: image/png\r\n\r\n"
            );
            body.extend_from_slice(head.as_bytes());
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

    /// Polls a job until it is done or failed.
    pub async fn wait_job(&self, id: i64) -> Value {
        for _ in 0..6000 {
            let job = self.call(Method::GET, &format!("/api/jobs/{id}"), None).await.json();
            if job["state"] == "done" || job["state"] == "failed" {
                return job;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("job {id} did not finish");
    }
}
