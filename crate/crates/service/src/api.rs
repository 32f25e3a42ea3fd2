//! Route handlers. Store calls run on the blocking pool; long work runs as
//! jobs.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use axum::body::Body;
use axum::extract::{FromRequest, FromRequestParts, Multipart, Path as UrlPath, Request, State};
use axum::http::header::{AUTHORIZATION, CONTENT_DISPOSITION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::{StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64_engine::decode_base64;
use prelabel_core::formats::{self, ExportOptions, Format, GeometryPolicy};
use prelabel_core::model::{
    AnnotationId, AnnotationState, ImageId, ImageRecord, LabelClass, NewAnnotation, Project, ProjectId, ProjectMode,
};
use prelabel_core::postprocess::mask_to_shape;
use prelabel_core::preannotator::batch::{preannotate_batch, ProgressEvent};
use prelabel_core::preannotator::PipelineSettings;
use prelabel_core::providers::{ImageHandle, MaskSeed, Providers};
use prelabel_core::store::{Stats, Store};
use prelabel_core::{BBox, Point, Shape};
use serde::{Deserialize, Serialize};

use crate::auth::{self, Session};
use crate::error::{ApiError, ApiJson, ApiQuery};
use crate::jobs::{JobKind, JobStatus};
use crate::{bundle, AppState};

pub const DEFAULT_PAGE: u32 = 50;
pub const MAX_PAGE: u32 = 500;

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/login", post(login))
        .route("/logout", post(logout))
        .route("/register", post(register))
        .route("/me", get(me))
        .route("/projects", get(list_projects).post(create_project))
        .route("/projects/{id}", get(get_project).delete(delete_project))
        .route("/projects/{id}/settings", put(update_settings))
        .route("/projects/{id}/classes", get(list_classes).post(add_class))
        .route("/projects/{id}/images", get(list_images).post(add_images))
        .route("/projects/{id}/preannotate", post(start_preannotate))
        .route("/projects/{id}/import", post(start_import))
        .route("/projects/{id}/export", post(start_export))
        .route("/projects/{id}/stats", get(stats))
        .route("/images/{id}", get(get_image).patch(patch_image).delete(delete_image))
        .route("/images/{id}/file", get(image_file))
        .route("/images/{id}/annotations", get(get_annotations).put(put_annotations).delete(delete_annotations))
        .route("/images/{id}/annotations/{aid}", axum::routing::patch(review_annotation))
        .route("/images/{id}/mask", post(mask))
        .route("/validate", post(validate))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/download", get(download));
    Router::new()
        .route("/health", get(health))
        .nest("/api", api)
        .fallback(static_files)
        .with_state(state)
}

/// Runs store work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

// ---- auth ----

/// An authenticated request.
pub struct Authed(pub Session);

impl FromRequestParts<AppState> for Authed {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .ok_or_else(ApiError::unauthorized)?;
        state.sessions.resolve(token).map(Authed).ok_or_else(ApiError::unauthorized)
    }
}

#[derive(Deserialize)]
struct Credentials {
    username: String,
    password: String,
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn login(State(st): State<AppState>, ApiJson(c): ApiJson<Credentials>) -> ApiResult<Json<Session>> {
    let store = st.store.clone();
    let user = c.username.clone();
    let hash = blocking(move || Ok(store.password_hash(&user)?)).await?;
    let ok = match hash {
        Some(h) => blocking(move || Ok(auth::verify_password(&c.password, &h))).await?,
        None => false,
    };
    if !ok {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "invalid username or password"));
    }
    Ok(Json(st.sessions.create(&c.username)))
}

async fn logout(State(st): State<AppState>, Authed(s): Authed) -> StatusCode {
    st.sessions.revoke(&s.token);
    StatusCode::NO_CONTENT
}

async fn me(Authed(s): Authed) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "username": s.username, "expires_at": s.expires_at }))
}

async fn register(State(st): State<AppState>, ApiJson(c): ApiJson<Credentials>) -> ApiResult<(StatusCode, Json<Session>)> {
    if !st.config.allow_registration {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "registration is disabled"));
    }
    if c.password.len() < 8 {
        return Err(ApiError::field("password", "must be at least 8 characters"));
    }
    let store = st.store.clone();
    let user = c.username.trim().to_string();
    let name = user.clone();
    blocking(move || Ok(store.create_user(&name, &auth::hash_password(&c.password))?)).await?;
    Ok((StatusCode::CREATED, Json(st.sessions.create(&user))))
}

// ---- pagination ----

#[derive(Debug, Default, Deserialize)]
struct PageQuery {
    offset: Option<u64>,
    limit: Option<u32>,
}

impl PageQuery {
    fn limit(&self) -> u32 {
        self.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub total: u64,
    pub offset: u64,
    pub limit: u32,
}

// ---- projects ----

#[derive(Deserialize)]
struct NewProject {
    name: String,
    mode: String,
    classes: Vec<String>,
    #[serde(default)]
    settings: PipelineSettings,
}

async fn list_projects(State(st): State<AppState>, _: Authed, ApiQuery(q): ApiQuery<PageQuery>) -> ApiResult<Json<Page<Project>>> {
    let store = st.store.clone();
    let all = blocking(move || Ok(store.projects()?)).await?;
    let (offset, limit) = (q.offset.unwrap_or(0), q.limit());
    let items = all.iter().skip(offset as usize).take(limit as usize).cloned().collect();
    Ok(Json(Page { items, total: all.len() as u64, offset, limit }))
}

async fn create_project(
    State(st): State<AppState>,
    _: Authed,
    ApiJson(p): ApiJson<NewProject>,
) -> ApiResult<(StatusCode, Json<Project>)> {
    let mut fields = Vec::new();
    if p.name.trim().is_empty() {
        fields.push(("name", "must not be empty".to_string()));
    }
    let mode = ProjectMode::parse(&p.mode);
    if mode.is_none() {
        fields.push(("mode", format!("{:?} is not detection, obb or segmentation", p.mode)));
    }
    if p.classes.iter().all(|c| prelabel_core::providers::normalize_label(c).is_empty()) {
        fields.push(("classes", "at least one nonempty class is required".into()));
    }
    if let Err(e) = p.settings.validate() {
        fields.push(("settings", e.to_string()));
    }
    if !fields.is_empty() {
        return Err(ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: "invalid project".into(),
            fields: fields
                .into_iter()
                .map(|(f, m)| crate::error::FieldError { field: f.into(), message: m })
                .collect(),
        });
    }
    let store = st.store.clone();
    let project = blocking(move || Ok(store.create_project(&p.name, mode.expect("checked"), &p.classes, p.settings)?)).await?;
    Ok((StatusCode::CREATED, Json(project)))
}

async fn get_project(State(st): State<AppState>, _: Authed, UrlPath(id): UrlPath<ProjectId>) -> ApiResult<Json<Project>> {
    let store = st.store.clone();
    Ok(Json(blocking(move || Ok(store.project(id)?)).await?))
}

async fn delete_project(State(st): State<AppState>, _: Authed, UrlPath(id): UrlPath<ProjectId>) -> ApiResult<StatusCode> {
    let store = st.store.clone();
    blocking(move || Ok(store.delete_project(id)?)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn update_settings(
    State(st): State<AppState>,
    _: Authed,
    UrlPath(id): UrlPath<ProjectId>,
    ApiJson(settings): ApiJson<PipelineSettings>,
) -> ApiResult<Json<Project>> {
    settings.validate().map_err(|e| ApiError::field("settings", e.to_string()))?;
    let store = st.store.clone();
    Ok(Json(blocking(move || {
        store.update_settings(id, &settings)?;
        Ok(store.project(id)?)
    })
    .await?))
}

async fn list_classes(State(st): State<AppState>, _: Authed, UrlPath(id): UrlPath<ProjectId>) -> ApiResult<Json<Vec<LabelClass>>> {
    let store = st.store.clone();
    Ok(Json(blocking(move || {
        store.project(id)?;
        Ok(store.classes(id)?)
    })
    .await?))
}

#[derive(Deserialize)]
struct NewClass {
    name: String,
}

async fn add_class(
    State(st): State<AppState>,
    _: Authed,
    UrlPath(id): UrlPath<ProjectId>,
    ApiJson(c): ApiJson<NewClass>,
) -> ApiResult<(StatusCode, Json<LabelClass>)> {
    if prelabel_core::providers::normalize_label(&c.name).is_empty() {
        return Err(ApiError::field("name", "must not be empty"));
    }
    let store = st.store.clone();
    let (class, created) = blocking(move || {
        store.project(id)?;
        Ok(store.ensure_class(id, &c.name)?)
    })
    .await?;
    Ok((if created { StatusCode::CREATED } else { StatusCode::OK }, Json(class)))
}

async fn stats(State(st): State<AppState>, _: Authed, UrlPath(id): UrlPath<ProjectId>) -> ApiResult<Json<Stats>> {
    let store = st.store.clone();
    Ok(Json(blocking(move || Ok(store.compute_stats(id)?)).await?))
}

// ---- images ----

async fn list_images(
    State(st): State<AppState>,
    _: Authed,
    UrlPath(id): UrlPath<ProjectId>,
    ApiQuery(q): ApiQuery<PageQuery>,
) -> ApiResult<Json<Page<ImageRecord>>> {
    let store = st.store.clone();
    let (offset, limit) = (q.offset.unwrap_or(0), q.limit());
    let (items, total) = blocking(move || {
        let total = store.compute_stats(id)?.image_count;
        Ok((store.images_page(id, offset, limit)?, total))
    })
    .await?;
    Ok(Json(Page { items, total, offset, limit }))
}

#[derive(Serialize)]
struct AddedImages {
    added: Vec<ImageRecord>,
    skipped: Vec<prelabel_core::store::SkippedFile>,
}

#[derive(Deserialize)]
struct FolderIngest {
    folder: PathBuf,
}

/// Keeps only the final path component of an uploaded file name.
fn safe_file_name(raw: &str) -> Option<String> {
    let last = raw.rsplit(['/', '\\']).next()?.trim();
    (!last.is_empty() && last != "." && last != "..").then(|| last.to_string())
}

fn unique_path(dir: &Path, name: &str) -> PathBuf {
    let candidate = dir.join(name);
    if !candidate.exists() {
        return candidate;
    }
    let p = Path::new(name);
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = p.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    (1..).map(|i| dir.join(format!("{stem}-{i}{ext}"))).find(|p| !p.exists()).expect("unbounded suffixes")
}

/// Multipart upload (any number of file parts) or JSON `{"folder": path}`
/// ingesting a server-side directory in place.
async fn add_images(
    State(st): State<AppState>,
    _: Authed,
    UrlPath(id): UrlPath<ProjectId>,
    req: Request,
) -> ApiResult<(StatusCode, Json<AddedImages>)> {
    let is_multipart = req
        .headers()
        .get(CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let store = st.store.clone();
    {
        let store = store.clone();
        blocking(move || Ok(store.project(id).map(|_| ())?)).await?;
    }
    if !is_multipart {
        let ApiJson(body) = ApiJson::<FolderIngest>::from_request(req, &st).await?;
        let out = blocking(move || Ok(store.ingest_folder(id, &body.folder)?)).await?;
        return Ok((StatusCode::CREATED, Json(AddedImages { added: out.added, skipped: out.skipped })));
    }

    let mut multipart = Multipart::from_request(req, &st).await.map_err(|e| ApiError::invalid(e.body_text()))?;
    let dir = store.project_dir(id).join("images");
    std::fs::create_dir_all(&dir).map_err(|e| ApiError::internal(e.to_string()))?;
    let mut uploads = Vec::new();
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::invalid(e.body_text()))? {
        let Some(name) = field.file_name().and_then(safe_file_name) else { continue };
        let bytes = field.bytes().await.map_err(|e| ApiError::invalid(e.body_text()))?;
        uploads.push((name, bytes));
    }
    if uploads.is_empty() {
        return Err(ApiError::field("files", "no file parts in upload"));
    }
    let out = blocking(move || {
        let mut out = AddedImages { added: Vec::new(), skipped: Vec::new() };
        for (name, bytes) in uploads {
            let path = unique_path(&dir, &name);
            std::fs::write(&path, &bytes).map_err(|e| ApiError::internal(e.to_string()))?;
            match store.ingest_image(id, &path) {
                Ok(rec) => out.added.push(rec),
                Err(prelabel_core::store::StoreError::Input(reason)) => {
                    let _ = std::fs::remove_file(&path);
                    out.skipped.push(prelabel_core::store::SkippedFile { file: name, reason });
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(out)
    })
    .await?;
    if out.added.is_empty() {
        let reasons: Vec<String> = out.skipped.iter().map(|s| format!("{}: {}", s.file, s.reason)).collect();
        return Err(ApiError::field("files", format!("no readable images ({})", reasons.join("; "))));
    }
    Ok((StatusCode::CREATED, Json(out)))
}

async fn get_image(State(st): State<AppState>, _: Authed, UrlPath(id): UrlPath<i64>) -> ApiResult<Json<ImageRecord>> {
    let store = st.store.clone();
    Ok(Json(blocking(move || Ok(store.image(ImageId(id))?)).await?))
}

#[derive(Deserialize)]
struct ImagePatch {
    marked_done: bool,
}

async fn patch_image(
    State(st): State<AppState>,
    _: Authed,
    UrlPath(id): UrlPath<i64>,
    ApiJson(p): ApiJson<ImagePatch>,
) -> ApiResult<Json<ImageRecord>> {
    let store = st.store.clone();
    Ok(Json(blocking(move || {
        store.set_marked_done(ImageId(id), p.marked_done)?;
        Ok(store.image(ImageId(id))?)
    })
    .await?))
}

async fn delete_image(State(st): State<AppState>, _: Authed, UrlPath(id): UrlPath<i64>) -> ApiResult<StatusCode> {
    let store = st.store.clone();
    blocking(move || Ok(store.delete_image(ImageId(id))?)).await?;
    Ok(StatusCode::NO_CONTENT)
}

fn content_type_for(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("bmp") => "image/bmp",
        Some("webp") => "image/webp",
        Some("tif" | "tiff") => "image/tiff",
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("ico") => "image/x-icon",
        _ => "application/octet-stream",
    }
}

async fn image_file(State(st): State<AppState>, _: Authed, UrlPath(id): UrlPath<i64>) -> ApiResult<Response> {
    let store = st.store.clone();
    let rec = blocking(move || Ok(store.image(ImageId(id))?)).await?;
    let path = PathBuf::from(&rec.path);
    let bytes = tokio::task::spawn_blocking({
        let path = path.clone();
        move || std::fs::read(path)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(|e| ApiError::not_found(format!("image file {}: {e}", rec.path)))?;
    Ok(([(CONTENT_TYPE, content_type_for(&path))], bytes).into_response())
}

// ---- annotations ----

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationList {
    pub image_id: ImageId,
    pub revision: i64,
    pub annotations: Vec<prelabel_core::model::Annotation>,
}

async fn annotation_list(store: std::sync::Arc<Store>, id: ImageId) -> ApiResult<AnnotationList> {
    blocking(move || {
        let rec = store.image(id)?;
        Ok(AnnotationList { image_id: id, revision: rec.revision, annotations: store.annotations(id)? })
    })
    .await
}

async fn get_annotations(State(st): State<AppState>, _: Authed, UrlPath(id): UrlPath<i64>) -> ApiResult<Json<AnnotationList>> {
    Ok(Json(annotation_list(st.store.clone(), ImageId(id)).await?))
}

#[derive(Deserialize)]
struct AnnotationPut {
    /// Revision the client edited; a mismatch is a conflict.
    revision: Option<i64>,
    annotations: Vec<NewAnnotation>,
}

/// Full-list replace. Nothing is written unless every item is valid.
async fn put_annotations(
    State(st): State<AppState>,
    _: Authed,
    UrlPath(id): UrlPath<i64>,
    ApiJson(body): ApiJson<AnnotationPut>,
) -> ApiResult<Json<AnnotationList>> {
    let store = st.store.clone();
    blocking(move || Ok(store.replace_annotations_strict(ImageId(id), &body.annotations, body.revision)?)).await?;
    Ok(Json(annotation_list(st.store.clone(), ImageId(id)).await?))
}

#[derive(Deserialize)]
struct DeleteQuery {
    /// Comma-separated annotation ids; all annotations when absent.
    ids: Option<String>,
}

async fn delete_annotations(
    State(st): State<AppState>,
    _: Authed,
    UrlPath(id): UrlPath<i64>,
    ApiQuery(q): ApiQuery<DeleteQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let ids: Option<Vec<AnnotationId>> = match q.ids.as_deref().map(str::trim).filter(|s| !s.is_empty()) {
        None => None,
        Some(s) => Some(
            s.split(',')
                .map(|t| t.trim().parse().map_err(|_| ApiError::field("ids", format!("{t:?} is not an annotation id"))))
                .collect::<ApiResult<_>>()?,
        ),
    };
    let store = st.store.clone();
    let deleted = blocking(move || Ok(store.delete_annotations(ImageId(id), ids.as_deref())?)).await?;
    Ok(Json(serde_json::json!({ "deleted": deleted })))
}

#[derive(Deserialize)]
struct Review {
    state: AnnotationState,
}

async fn review_annotation(
    State(st): State<AppState>,
    _: Authed,
    UrlPath((id, aid)): UrlPath<(i64, AnnotationId)>,
    ApiJson(r): ApiJson<Review>,
) -> ApiResult<Json<AnnotationList>> {
    let store = st.store.clone();
    blocking(move || Ok(store.set_annotation_state(ImageId(id), aid, r.state)?)).await?;
    Ok(Json(annotation_list(st.store.clone(), ImageId(id)).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskRequest {
    point: Option<[f64; 2]>,
    #[serde(rename = "box")]
    bbox: Option<[f64; 4]>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskResponse {
    /// Geometry in the project's mode; `None` when the mask is empty.
    pub shape: Option<Shape>,
    pub mask_pixels: usize,
}

/// Mask from a click or a box, post-processed into the project's geometry.
async fn mask(
    State(st): State<AppState>,
    _: Authed,
    UrlPath(id): UrlPath<i64>,
    ApiJson(req): ApiJson<MaskRequest>,
) -> ApiResult<Json<MaskResponse>> {
    let seed = match (req.point, req.bbox) {
        (Some([x, y]), None) => MaskSeed::Point(Point::new(x, y)),
        (None, Some([x1, y1, x2, y2])) => {
            MaskSeed::Box(BBox::new(x1, y1, x2, y2).map_err(|e| ApiError::field("box", e.to_string()))?)
        }
        _ => return Err(ApiError::field("seed", "give exactly one of `point` or `box`")),
    };
    let (store, provider) = (st.store.clone(), st.config.provider.clone());
    let out = blocking(move || {
        let rec = store.image(ImageId(id))?;
        let project = store.project(rec.project_id)?;
        let names: Vec<String> = store.classes(project.id)?.into_iter().map(|c| c.name).collect();
        let bytes = std::fs::read(&rec.path).map_err(|e| ApiError::not_found(format!("image file {}: {e}", rec.path)))?;
        let image = ImageHandle::decode(&bytes)?;
        let providers = Providers::from_config(&provider, &names)?;
        let m = providers.masker.generate_mask(&image, &seed)?;
        Ok(MaskResponse { shape: mask_to_shape(&m, project.mode), mask_pixels: m.count() })
    })
    .await?;
    Ok(Json(out))
}

// ---- jobs ----

fn spawn_job<F>(st: &AppState, id: u64, work: F)
where
    F: FnOnce(&AppState, u64) -> Result<(serde_json::Value, Option<(String, Vec<u8>)>), String> + Send + 'static,
{
    let jobs = st.jobs.clone();
    let worker_state = st.clone();
    let handle = tokio::task::spawn_blocking(move || {
        worker_state.jobs.start(id);
        work(&worker_state, id)
    });
    tokio::spawn(async move {
        match handle.await {
            Ok(Ok((report, artifact))) => jobs.finish(id, report, artifact),
            Ok(Err(e)) => jobs.fail(id, e),
            Err(e) => jobs.fail(id, format!("job aborted: {e}")),
        }
    });
}

async fn start_preannotate(
    State(st): State<AppState>,
    _: Authed,
    UrlPath(id): UrlPath<ProjectId>,
) -> ApiResult<(StatusCode, Json<JobStatus>)> {
    let store = st.store.clone();
    let (total, names) = blocking(move || {
        let images = store.images(id)?;
        if images.is_empty() {
            return Err(ApiError::invalid(format!("project {id} has no images")));
        }
        let names: Vec<String> = store.classes(id)?.into_iter().map(|c| c.name).collect();
        Ok((images.len(), names))
    })
    .await?;
    let providers = Providers::from_config(&st.config.provider, &names)?;
    let job = st.jobs.create(JobKind::Preannotate, id, total)?;
    spawn_job(&st, job.id, move |st, job_id| {
        let sink = |e: &ProgressEvent| st.jobs.progress(job_id, e.completed, e.total);
        let report = preannotate_batch(&st.store, id, providers, Some(&sink)).map_err(|e| e.to_string())?;
        Ok((serde_json::to_value(&report).map_err(|e| e.to_string())?, None))
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum FileEncoding {
    Utf8,
    Base64,
}

#[derive(Deserialize)]
struct BundleBody {
    format: String,
    files: BTreeMap<String, String>,
    #[serde(default = "utf8")]
    encoding: FileEncoding,
}

fn utf8() -> FileEncoding {
    FileEncoding::Utf8
}

fn parse_format(raw: &str) -> ApiResult<Format> {
    Format::parse(raw).ok_or_else(|| ApiError::field("format", format!("{raw:?} is not coco, yolo, voc or csv")))
}

impl BundleBody {
    fn decode(self) -> ApiResult<(Format, BTreeMap<String, Vec<u8>>)> {
        let format = parse_format(&self.format)?;
        if self.files.is_empty() {
            return Err(ApiError::field("files", "no files"));
        }
        let mut files = BTreeMap::new();
        for (name, content) in self.files {
            let bytes = match self.encoding {
                FileEncoding::Utf8 => content.into_bytes(),
                FileEncoding::Base64 => decode_base64(&content).map_err(|e| ApiError::field(format!("files.{name}"), e))?,
            };
            files.insert(name, bytes);
        }
        Ok((format, files))
    }
}

/// Parses the bundle up front (422 on malformed files, nothing written),
/// then merges it in a job.
async fn start_import(
    State(st): State<AppState>,
    _: Authed,
    UrlPath(id): UrlPath<ProjectId>,
    ApiJson(body): ApiJson<BundleBody>,
) -> ApiResult<(StatusCode, Json<JobStatus>)> {
    let (format, files) = body.decode()?;
    let store = st.store.clone();
    let (files, items) = blocking(move || {
        store.project(id)?;
        let (entries, _) = formats::read_bundle(format, &files)?;
        Ok((files, entries.len()))
    })
    .await?;
    let job = st.jobs.create(JobKind::Import, id, items)?;
    spawn_job(&st, job.id, move |st, _| {
        let report = formats::import_annotations(&st.store, id, format, &files).map_err(|e| e.to_string())?;
        Ok((serde_json::to_value(&report).map_err(|e| e.to_string())?, None))
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

#[derive(Deserialize)]
struct ExportQuery {
    format: String,
    #[serde(default)]
    boxes_only: bool,
    #[serde(default)]
    include_pending: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportReport {
    pub format: Format,
    pub files: usize,
    pub bytes: usize,
    pub diagnostics: Vec<formats::Diagnostic>,
}

async fn start_export(
    State(st): State<AppState>,
    _: Authed,
    UrlPath(id): UrlPath<ProjectId>,
    ApiQuery(q): ApiQuery<ExportQuery>,
) -> ApiResult<(StatusCode, Json<JobStatus>)> {
    let format = parse_format(&q.format)?;
    let policy = if q.boxes_only { GeometryPolicy::BoxesOnly } else { GeometryPolicy::AsStored };
    let options = ExportOptions { policy, include_pending: q.include_pending };
    let store = st.store.clone();
    let project = blocking(move || Ok(store.project(id)?)).await?;
    let effective = if q.boxes_only { ProjectMode::Detection } else { project.mode };
    if !format.supports(effective) {
        return Err(formats::FormatError::Unsupported { mode: effective, format }.into());
    }
    let job = st.jobs.create(JobKind::Export, id, 1)?;
    spawn_job(&st, job.id, move |st, _| {
        let bundle = formats::export_project(&st.store, id, format, options).map_err(|e| e.to_string())?;
        let diagnostics = formats::validate_bundle(format, &bundle.files);
        let zip = bundle::zip_bundle(&bundle).map_err(|e| e.to_string())?;
        let report = ExportReport { format, files: bundle.files.len(), bytes: zip.len(), diagnostics };
        let name = format!("{}-{}.zip", project.name.replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_"), format);
        Ok((serde_json::to_value(&report).map_err(|e| e.to_string())?, Some((name, zip))))
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

/// Checks a bundle without touching any project.
async fn validate(_: Authed, ApiJson(body): ApiJson<BundleBody>) -> ApiResult<Json<serde_json::Value>> {
    let (format, files) = body.decode()?;
    let diagnostics = blocking(move || Ok(formats::validate_bundle(format, &files))).await?;
    Ok(Json(serde_json::json!({ "format": format, "diagnostics": diagnostics })))
}

#[derive(Deserialize)]
struct JobsQuery {
    project: Option<ProjectId>,
}

async fn list_jobs(State(st): State<AppState>, _: Authed, ApiQuery(q): ApiQuery<JobsQuery>) -> Json<Vec<JobStatus>> {
    Json(st.jobs.list(q.project))
}

async fn get_job(State(st): State<AppState>, _: Authed, UrlPath(id): UrlPath<u64>) -> ApiResult<Json<JobStatus>> {
    st.jobs.get(id).map(Json).ok_or_else(|| ApiError::not_found(format!("job {id}")))
}

async fn download(State(st): State<AppState>, _: Authed, UrlPath(id): UrlPath<u64>) -> ApiResult<Response> {
    let (name, bytes) = st.jobs.artifact(id).ok_or_else(|| ApiError::not_found(format!("no download for job {id}")))?;
    Ok((
        [(CONTENT_TYPE, "application/zip".to_string()), (CONTENT_DISPOSITION, format!("attachment; filename=\"{name}\""))],
        Body::from(bytes.as_ref().clone()),
    )
        .into_response())
}

// ---- static UI ----

async fn static_files(State(st): State<AppState>, uri: Uri) -> ApiResult<Response> {
    let not_found = || ApiError::not_found(format!("no route for {}", uri.path()));
    let Some(root) = st.config.static_dir.clone() else { return Err(not_found()) };
    if uri.path().starts_with("/api/") {
        return Err(not_found());
    }
    let rel = PathBuf::from(uri.path().trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(not_found());
    }
    let mut path = root.join(&rel);
    if rel.as_os_str().is_empty() || path.is_dir() {
        path = path.join("index.html");
    }
    // client-side routes fall back to the app shell
    if !path.is_file() && rel.extension().is_none() {
        path = root.join("index.html");
    }
    let bytes = std::fs::read(&path).map_err(|_| not_found())?;
    Ok(([(CONTENT_TYPE, content_type_for(&path))], bytes).into_response())
}

mod base64_engine {
    use base64::Engine;

    pub fn decode_base64(s: &str) -> Result<Vec<u8>, String> {
        base64::engine::general_purpose::STANDARD.decode(s.trim()).map_err(|e| format!("invalid base64: {e}"))
    }
}
