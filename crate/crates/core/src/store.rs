//! SQLite persistence: a global registry (users, projects) plus one database
//! file per project (classes, images, annotations).
//!
//! Layout under the data directory:
//!
//! ```text
//! registry.sqlite3
//! projects/<id>/project.sqlite3
//! ```
//!
//! Each file carries `meta.schema_version`; opening a file with a newer
//! version fails instead of guessing. Every project file has one writer
//! connection and one reader connection, each behind a mutex, so writes are
//! serialized and reads see committed snapshots (WAL mode).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use rusqlite::{params, Connection, OptionalExtension, Row};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    display_color, Annotation, AnnotationId, AnnotationSource, AnnotationState, ClassId, ImageId, ImageRecord,
    ImageStatus, LabelClass, NewAnnotation, Project, ProjectId, ProjectMode,
};
use crate::preannotator::PipelineSettings;
use crate::providers::normalize_label;
use crate::Shape;

pub const SCHEMA_VERSION: i64 = 1;
pub const REGISTRY_FILE: &str = "registry.sqlite3";
pub const PROJECT_FILE: &str = "project.sqlite3";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid input: {0}")]
    Input(String),
    /// Items refused by an all-or-nothing write, as `(position, reason)`.
    #[error("{} item(s) rejected", .0.len())]
    Rejected(Vec<(usize, String)>),
    #[error("unsupported schema version {found} in {path} (this build reads up to {SCHEMA_VERSION})")]
    Schema { path: String, found: i64 },
    #[error("corrupt row: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Db(#[from] rusqlite::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

const REGISTRY_SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS users (
    username TEXT PRIMARY KEY,
    password_hash TEXT NOT NULL,
    created_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS projects (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    name TEXT NOT NULL UNIQUE,
    mode TEXT NOT NULL,
    settings TEXT NOT NULL,
    created_at INTEGER NOT NULL
);
";

const PROJECT_SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS classes (
    id INTEGER PRIMARY KEY,
    name TEXT NOT NULL UNIQUE,
    display_color TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS images (
    id INTEGER PRIMARY KEY,
    file_name TEXT NOT NULL,
    path TEXT NOT NULL,
    width INTEGER NOT NULL CHECK (width >= 1),
    height INTEGER NOT NULL CHECK (height >= 1),
    status TEXT NOT NULL,
    needs_manual INTEGER NOT NULL DEFAULT 0,
    preannotated INTEGER NOT NULL DEFAULT 0,
    failed INTEGER NOT NULL DEFAULT 0,
    marked_done INTEGER NOT NULL DEFAULT 0,
    revision INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS annotations (
    id INTEGER PRIMARY KEY,
    image_id INTEGER NOT NULL REFERENCES images(id) ON DELETE CASCADE,
    class_id INTEGER NOT NULL REFERENCES classes(id) ON DELETE CASCADE,
    kind TEXT NOT NULL,
    geometry TEXT NOT NULL,
    detector_score REAL,
    verified_score REAL,
    source TEXT NOT NULL,
    state TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS annotations_by_image ON annotations(image_id);
";

fn now() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs() as i64).unwrap_or(0)
}

fn configure(conn: &Connection) -> Result<()> {
    conn.busy_timeout(std::time::Duration::from_secs(10))?;
    conn.pragma_update(None, "foreign_keys", true)?;
    conn.pragma_update(None, "journal_mode", "WAL")?;
    conn.pragma_update(None, "synchronous", "NORMAL")?;
    Ok(())
}

fn init_schema(conn: &Connection, ddl: &str, path: &Path) -> Result<()> {
    conn.execute_batch(ddl)?;
    let found: Option<String> =
        conn.query_row("SELECT value FROM meta WHERE key = 'schema_version'", [], |r| r.get(0)).optional()?;
    match found {
        None => {
            conn.execute("INSERT INTO meta (key, value) VALUES ('schema_version', ?1)", [SCHEMA_VERSION.to_string()])?;
        }
        Some(v) => {
            let found: i64 = v.parse().map_err(|_| StoreError::Corrupt(format!("schema_version {v:?}")))?;
            if found > SCHEMA_VERSION {
                return Err(StoreError::Schema { path: path.display().to_string(), found });
            }
        }
    }
    Ok(())
}

fn open_pair(path: &Path, ddl: &str) -> Result<(Connection, Connection)> {
    let writer = Connection::open(path)?;
    configure(&writer)?;
    init_schema(&writer, ddl, path)?;
    let reader = Connection::open(path)?;
    configure(&reader)?;
    Ok((writer, reader))
}

fn lock(m: &Mutex<Connection>) -> MutexGuard<'_, Connection> {
    // A panic while holding the lock leaves SQLite itself consistent (the
    // transaction rolls back on drop), so poisoning is not fatal here.
    m.lock().unwrap_or_else(|e| e.into_inner())
}

struct ProjectDb {
    writer: Mutex<Connection>,
    reader: Mutex<Connection>,
}

/// Result of one bulk annotation write.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpsertReport {
    pub inserted: usize,
    pub deleted: usize,
    /// `(position in the input list, reason)`.
    pub rejected: Vec<(usize, String)>,
}

/// Status fractions; they sum to 1 (all `unannotated` for an empty project).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub unannotated: f64,
    pub pending_review: f64,
    pub annotated: f64,
    pub failed: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub label: String,
    pub min: u64,
    /// Inclusive upper bound; `None` for the open last bucket.
    pub max: Option<u64>,
    pub count: u64,
}

/// Dashboard numbers. A pure function of the store contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub project_id: ProjectId,
    pub image_count: u64,
    pub annotation_count: u64,
    /// Images that went through pre-annotation successfully.
    pub processed: u64,
    pub status_counts: BTreeMap<ImageStatus, u64>,
    pub completion: Completion,
    /// Accepted plus pending annotations per class, zero counts included.
    pub class_counts: BTreeMap<String, u64>,
    pub per_image_histogram: Vec<HistogramBucket>,
}

pub const HISTOGRAM_BOUNDS: [(u64, Option<u64>); 5] = [(0, Some(5)), (6, Some(10)), (11, Some(15)), (16, Some(20)), (21, None)];

/// File extensions picked up by [`Store::ingest_folder`].
pub const IMAGE_EXTENSIONS: [&str; 8] = ["png", "jpg", "jpeg", "bmp", "gif", "webp", "tif", "tiff"];

pub fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FolderIngest {
    pub added: Vec<ImageRecord>,
    pub skipped: Vec<SkippedFile>,
}

/// Persisted effect of pre-annotating one image.
#[derive(Debug, Clone, PartialEq)]
pub enum PreannotationWrite {
    Done { annotations: Vec<NewAnnotation>, needs_manual: bool },
    Failed { reason: String },
}

pub struct Store {
    root: PathBuf,
    registry: Mutex<Connection>,
    registry_reader: Mutex<Connection>,
    projects: Mutex<HashMap<ProjectId, Arc<ProjectDb>>>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("root", &self.root).finish()
    }
}

fn project_from_row(r: &Row<'_>) -> rusqlite::Result<(ProjectId, String, String, String, i64)> {
    Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?))
}

fn decode_project(raw: (ProjectId, String, String, String, i64)) -> Result<Project> {
    let (id, name, mode, settings, created_at) = raw;
    Ok(Project {
        id,
        name,
        mode: ProjectMode::parse(&mode).ok_or_else(|| StoreError::Corrupt(format!("project mode {mode:?}")))?,
        settings: serde_json::from_str(&settings).map_err(|e| StoreError::Corrupt(format!("settings: {e}")))?,
        created_at,
    })
}

const IMAGE_COLUMNS: &str = "id, file_name, path, width, height, status, needs_manual, preannotated, revision";

fn image_from_row(project: ProjectId, r: &Row<'_>) -> rusqlite::Result<ImageRecord> {
    let status: String = r.get(5)?;
    Ok(ImageRecord {
        id: ImageId::new(project, r.get(0)?),
        project_id: project,
        file_name: r.get(1)?,
        path: r.get(2)?,
        width: r.get(3)?,
        height: r.get(4)?,
        status: ImageStatus::parse(&status).unwrap_or(ImageStatus::Unannotated),
        needs_manual: r.get(6)?,
        preannotated: r.get(7)?,
        revision: r.get(8)?,
    })
}

const ANNOTATION_COLUMNS: &str = "id, image_id, class_id, geometry, detector_score, verified_score, source, state";

fn annotation_from_row(project: ProjectId, r: &Row<'_>) -> rusqlite::Result<Result<Annotation>> {
    let geometry: String = r.get(3)?;
    let source: String = r.get(6)?;
    let state: String = r.get(7)?;
    let id: AnnotationId = r.get(0)?;
    let local: i64 = r.get(1)?;
    let class_id: ClassId = r.get(2)?;
    let detector_score: Option<f64> = r.get(4)?;
    let verified_score: Option<f64> = r.get(5)?;
    Ok((|| {
        Ok(Annotation {
            id,
            image_id: ImageId::new(project, local),
            class_id,
            geometry: serde_json::from_str::<Shape>(&geometry)
                .map_err(|e| StoreError::Corrupt(format!("annotation {id} geometry: {e}")))?,
            detector_score,
            verified_score,
            source: AnnotationSource::parse(&source)
                .ok_or_else(|| StoreError::Corrupt(format!("annotation {id} source {source:?}")))?,
            state: AnnotationState::parse(&state)
                .ok_or_else(|| StoreError::Corrupt(format!("annotation {id} state {state:?}")))?,
        })
    })())
}

fn check_score(name: &str, s: Option<f64>) -> Result<(), String> {
    match s {
        Some(v) if !(0.0..=1.0).contains(&v) => Err(format!("{name} {v} outside [0, 1]")),
        _ => Ok(()),
    }
}

/// Recomputes the derived status of one image inside a transaction.
fn refresh_status(tx: &Connection, local: i64) -> Result<ImageStatus> {
    let (failed, marked_done): (bool, bool) =
        tx.query_row("SELECT failed, marked_done FROM images WHERE id = ?1", [local], |r| Ok((r.get(0)?, r.get(1)?)))?;
    let count = |state: AnnotationState| -> Result<i64> {
        Ok(tx.query_row(
            "SELECT COUNT(*) FROM annotations WHERE image_id = ?1 AND state = ?2",
            params![local, state.as_str()],
            |r| r.get(0),
        )?)
    };
    let status = if marked_done || count(AnnotationState::Accepted)? > 0 {
        ImageStatus::Annotated
    } else if count(AnnotationState::Pending)? > 0 {
        ImageStatus::PendingReview
    } else if failed {
        ImageStatus::Failed
    } else {
        ImageStatus::Unannotated
    };
    tx.execute("UPDATE images SET status = ?1 WHERE id = ?2", params![status.as_str(), local])?;
    Ok(status)
}

impl Store {
    /// Opens or creates a store rooted at `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(root.join("projects"))?;
        let (registry, registry_reader) = open_pair(&root.join(REGISTRY_FILE), REGISTRY_SCHEMA)?;
        Ok(Self {
            root,
            registry: Mutex::new(registry),
            registry_reader: Mutex::new(registry_reader),
            projects: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn project_dir(&self, id: ProjectId) -> PathBuf {
        self.root.join("projects").join(id.to_string())
    }

    fn project_db(&self, id: ProjectId) -> Result<Arc<ProjectDb>> {
        let mut cache = self.projects.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(db) = cache.get(&id) {
            return Ok(db.clone());
        }
        self.project(id)?;
        let dir = self.project_dir(id);
        std::fs::create_dir_all(&dir)?;
        let (writer, reader) = open_pair(&dir.join(PROJECT_FILE), PROJECT_SCHEMA)?;
        let db = Arc::new(ProjectDb { writer: Mutex::new(writer), reader: Mutex::new(reader) });
        cache.insert(id, db.clone());
        Ok(db)
    }

    // ---- users ----

    pub fn create_user(&self, username: &str, password_hash: &str) -> Result<()> {
        if username.trim().is_empty() {
            return Err(StoreError::Input("username is empty".into()));
        }
        let conn = lock(&self.registry);
        let n = conn.execute(
            "INSERT OR IGNORE INTO users (username, password_hash, created_at) VALUES (?1, ?2, ?3)",
            params![username, password_hash, now()],
        )?;
        if n == 0 {
            return Err(StoreError::Conflict(format!("user {username:?} exists")));
        }
        Ok(())
    }

    pub fn password_hash(&self, username: &str) -> Result<Option<String>> {
        let conn = lock(&self.registry_reader);
        Ok(conn
            .query_row("SELECT password_hash FROM users WHERE username = ?1", [username], |r| r.get(0))
            .optional()?)
    }

    pub fn user_count(&self) -> Result<u64> {
        let conn = lock(&self.registry_reader);
        Ok(conn.query_row("SELECT COUNT(*) FROM users", [], |r| r.get::<_, i64>(0))? as u64)
    }

    // ---- projects ----

    /// Creates a project with normalized, deduplicated classes.
    pub fn create_project(
        &self,
        name: &str,
        mode: ProjectMode,
        classes: &[String],
        settings: PipelineSettings,
    ) -> Result<Project> {
        let name = name.trim();
        if name.is_empty() {
            return Err(StoreError::Input("project name is empty".into()));
        }
        settings.validate().map_err(|e| StoreError::Input(e.to_string()))?;
        let mut names: Vec<String> = Vec::new();
        for c in classes {
            let n = normalize_label(c);
            if !n.is_empty() && !names.contains(&n) {
                names.push(n);
            }
        }
        if names.is_empty() {
            return Err(StoreError::Input("a project needs at least one class".into()));
        }
        let settings_json = serde_json::to_string(&settings).expect("settings serialize");
        let created_at = now();
        let id = {
            let conn = lock(&self.registry);
            let n = conn.execute(
                "INSERT OR IGNORE INTO projects (name, mode, settings, created_at) VALUES (?1, ?2, ?3, ?4)",
                params![name, mode.as_str(), settings_json, created_at],
            )?;
            if n == 0 {
                return Err(StoreError::Conflict(format!("project {name:?} exists")));
            }
            conn.last_insert_rowid()
        };
        // A stale directory can only come from a crash between registry
        // delete and directory removal; start clean.
        let dir = self.project_dir(id);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        let db = self.project_db(id)?;
        {
            let mut conn = lock(&db.writer);
            let tx = conn.transaction()?;
            for n in &names {
                tx.execute("INSERT INTO classes (name, display_color) VALUES (?1, ?2)", params![n, display_color(n)])?;
            }
            tx.commit()?;
        }
        Ok(Project { id, name: name.to_string(), mode, settings, created_at })
    }

    pub fn project(&self, id: ProjectId) -> Result<Project> {
        let conn = lock(&self.registry_reader);
        let raw = conn
            .query_row("SELECT id, name, mode, settings, created_at FROM projects WHERE id = ?1", [id], project_from_row)
            .optional()?
            .ok_or_else(|| StoreError::NotFound(format!("project {id}")))?;
        decode_project(raw)
    }

    pub fn project_by_name(&self, name: &str) -> Result<Project> {
        let conn = lock(&self.registry_reader);
        let raw = conn
            .query_row(
                "SELECT id, name, mode, settings, created_at FROM projects WHERE name = ?1",
                [name.trim()],
                project_from_row,
            )
            .optional()?
            .ok_or_else(|| StoreError::NotFound(format!("project {name:?}")))?;
        decode_project(raw)
    }

    pub fn projects(&self) -> Result<Vec<Project>> {
        let conn = lock(&self.registry_reader);
        let mut stmt = conn.prepare("SELECT id, name, mode, settings, created_at FROM projects ORDER BY id")?;
        let rows = stmt.query_map([], project_from_row)?.collect::<rusqlite::Result<Vec<_>>>()?;
        rows.into_iter().map(decode_project).collect()
    }

    pub fn update_settings(&self, id: ProjectId, settings: &PipelineSettings) -> Result<()> {
        settings.validate().map_err(|e| StoreError::Input(e.to_string()))?;
        let conn = lock(&self.registry);
        let n = conn.execute(
            "UPDATE projects SET settings = ?1 WHERE id = ?2",
            params![serde_json::to_string(settings).expect("settings serialize"), id],
        )?;
        if n == 0 {
            return Err(StoreError::NotFound(format!("project {id}")));
        }
        Ok(())
    }

    /// Removes the project, its database file and everything in it.
    pub fn delete_project(&self, id: ProjectId) -> Result<()> {
        {
            let conn = lock(&self.registry);
            if conn.execute("DELETE FROM projects WHERE id = ?1", [id])? == 0 {
                return Err(StoreError::NotFound(format!("project {id}")));
            }
        }
        self.projects.lock().unwrap_or_else(|e| e.into_inner()).remove(&id);
        let dir = self.project_dir(id);
        if dir.exists() {
            std::fs::remove_dir_all(dir)?;
        }
        Ok(())
    }

    // ---- classes ----

    pub fn classes(&self, project: ProjectId) -> Result<Vec<LabelClass>> {
        let db = self.project_db(project)?;
        let conn = lock(&db.reader);
        let mut stmt = conn.prepare("SELECT id, name, display_color FROM classes ORDER BY id")?;
        let rows = stmt
            .query_map([], |r| {
                Ok(LabelClass { id: r.get(0)?, project_id: project, name: r.get(1)?, display_color: r.get(2)? })
            })?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(rows)
    }

    /// Returns the class with this (normalized) name, creating it if needed.
    /// The flag is true when the class was created.
    pub fn ensure_class(&self, project: ProjectId, name: &str) -> Result<(LabelClass, bool)> {
        let n = normalize_label(name);
        if n.is_empty() {
            return Err(StoreError::Input("class name is empty after normalization".into()));
        }
        let db = self.project_db(project)?;
        let conn = lock(&db.writer);
        let created = conn.execute(
            "INSERT OR IGNORE INTO classes (name, display_color) VALUES (?1, ?2)",
            params![n, display_color(&n)],
        )? > 0;
        let class = conn.query_row("SELECT id, name, display_color FROM classes WHERE name = ?1", [&n], |r| {
            Ok(LabelClass { id: r.get(0)?, project_id: project, name: r.get(1)?, display_color: r.get(2)? })
        })?;
        Ok((class, created))
    }

    // ---- images ----

    /// Registers an image by path. The file must exist; its bytes are not
    /// copied into the database.
    pub fn add_image(&self, project: ProjectId, path: &Path, width: u32, height: u32) -> Result<ImageRecord> {
        if width == 0 || height == 0 {
            return Err(StoreError::Input("image dimensions must be at least 1x1".into()));
        }
        if !path.is_file() {
            return Err(StoreError::Input(format!("image file {} does not exist", path.display())));
        }
        let file_name = path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .ok_or_else(|| StoreError::Input(format!("no file name in {}", path.display())))?;
        let db = self.project_db(project)?;
        let conn = lock(&db.writer);
        conn.execute(
            "INSERT INTO images (file_name, path, width, height, status) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![file_name, path.to_string_lossy(), width, height, ImageStatus::Unannotated.as_str()],
        )?;
        let local = conn.last_insert_rowid();
        Ok(ImageRecord {
            id: ImageId::new(project, local),
            project_id: project,
            file_name,
            path: path.to_string_lossy().into_owned(),
            width,
            height,
            status: ImageStatus::Unannotated,
            needs_manual: false,
            preannotated: false,
            revision: 0,
        })
    }

    /// Registers an image, reading its dimensions from the file header.
    pub fn ingest_image(&self, project: ProjectId, path: &Path) -> Result<ImageRecord> {
        let (w, h) = image::image_dimensions(path)
            .map_err(|e| StoreError::Input(format!("cannot read image {}: {e}", path.display())))?;
        self.add_image(project, path, w, h)
    }

    /// Ingests every image file directly inside `dir`, in file-name order.
    /// Unreadable files are reported and skipped.
    pub fn ingest_folder(&self, project: ProjectId, dir: &Path) -> Result<FolderIngest> {
        if !dir.is_dir() {
            return Err(StoreError::Input(format!("{} is not a directory", dir.display())));
        }
        self.project(project)?;
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && has_image_extension(p))
            .collect();
        paths.sort();
        let mut out = FolderIngest::default();
        for path in paths {
            match self.ingest_image(project, &path) {
                Ok(rec) => out.added.push(rec),
                Err(StoreError::Input(reason)) => {
                    out.skipped.push(SkippedFile { file: path.to_string_lossy().into_owned(), reason })
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    pub fn image(&self, id: ImageId) -> Result<ImageRecord> {
        let db = self.project_db(id.project()).map_err(|e| match e {
            StoreError::NotFound(_) => StoreError::NotFound(format!("image {id}")),
            other => other,
        })?;
        let conn = lock(&db.reader);
        conn.query_row(&format!("SELECT {IMAGE_COLUMNS} FROM images WHERE id = ?1"), [id.local()], |r| {
            image_from_row(id.project(), r)
        })
        .optional()?
        .ok_or_else(|| StoreError::NotFound(format!("image {id}")))
    }

    pub fn images(&self, project: ProjectId) -> Result<Vec<ImageRecord>> {
        self.images_page(project, 0, u32::MAX)
    }

    /// Images in id order.
    pub fn images_page(&self, project: ProjectId, offset: u64, limit: u32) -> Result<Vec<ImageRecord>> {
        let db = self.project_db(project)?;
        let conn = lock(&db.reader);
        let mut stmt = conn.prepare(&format!("SELECT {IMAGE_COLUMNS} FROM images ORDER BY id LIMIT ?1 OFFSET ?2"))?;
        let rows = stmt
            .query_map(params![limit as i64, offset as i64], |r| image_from_row(project, r))?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(rows)
    }

    pub fn delete_image(&self, id: ImageId) -> Result<()> {
        let db = self.project_db(id.project())?;
        let conn = lock(&db.writer);
        if conn.execute("DELETE FROM images WHERE id = ?1", [id.local()])? == 0 {
            return Err(StoreError::NotFound(format!("image {id}")));
        }
        Ok(())
    }

    /// Marks an image done (or not) regardless of its annotations.
    pub fn set_marked_done(&self, id: ImageId, done: bool) -> Result<ImageStatus> {
        let db = self.project_db(id.project())?;
        let mut conn = lock(&db.writer);
        let tx = conn.transaction()?;
        if tx.execute(
            "UPDATE images SET marked_done = ?1, revision = revision + 1 WHERE id = ?2",
            params![done, id.local()],
        )? == 0
        {
            return Err(StoreError::NotFound(format!("image {id}")));
        }
        let status = refresh_status(&tx, id.local())?;
        tx.commit()?;
        Ok(status)
    }

    // ---- annotations ----

    pub fn annotations(&self, image: ImageId) -> Result<Vec<Annotation>> {
        let db = self.project_db(image.project())?;
        let conn = lock(&db.reader);
        let exists: bool =
            conn.query_row("SELECT EXISTS(SELECT 1 FROM images WHERE id = ?1)", [image.local()], |r| r.get(0))?;
        if !exists {
            return Err(StoreError::NotFound(format!("image {image}")));
        }
        let mut stmt =
            conn.prepare(&format!("SELECT {ANNOTATION_COLUMNS} FROM annotations WHERE image_id = ?1 ORDER BY id"))?;
        let rows = stmt
            .query_map([image.local()], |r| annotation_from_row(image.project(), r))?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        rows.into_iter().collect()
    }

    /// Every annotation of the project, ordered by image then id.
    pub fn project_annotations(&self, project: ProjectId) -> Result<Vec<Annotation>> {
        let db = self.project_db(project)?;
        let conn = lock(&db.reader);
        let mut stmt =
            conn.prepare(&format!("SELECT {ANNOTATION_COLUMNS} FROM annotations ORDER BY image_id, id"))?;
        let rows = stmt.query_map([], |r| annotation_from_row(project, r))?.collect::<rusqlite::Result<Vec<_>>>()?;
        rows.into_iter().collect()
    }

    /// Atomically deletes the image's annotations whose source is in
    /// `replace_sources` and inserts `items`. Invalid items are rejected
    /// individually; the valid ones still commit.
    pub fn upsert_annotations(
        &self,
        image: ImageId,
        items: &[NewAnnotation],
        replace_sources: &[AnnotationSource],
    ) -> Result<UpsertReport> {
        let mut reports = self.upsert_many(image.project(), &[(image, items.to_vec())], replace_sources)?;
        Ok(reports.pop().expect("one report per image"))
    }

    /// [`Store::upsert_annotations`] for several images in one transaction.
    pub fn upsert_many(
        &self,
        project: ProjectId,
        batch: &[(ImageId, Vec<NewAnnotation>)],
        replace_sources: &[AnnotationSource],
    ) -> Result<Vec<UpsertReport>> {
        let mode = self.project(project)?.mode;
        let db = self.project_db(project)?;
        let mut conn = lock(&db.writer);
        let tx = conn.transaction()?;
        let classes = class_ids(&tx)?;
        let mut reports = Vec::with_capacity(batch.len());
        for (image, items) in batch {
            if image.project() != project {
                return Err(StoreError::Input(format!("image {image} is not in project {project}")));
            }
            reports.push(upsert_in(&tx, mode, &classes, *image, items, replace_sources)?);
        }
        tx.commit()?;
        Ok(reports)
    }

    /// Replaces the full annotation list of an image.
    pub fn replace_annotations(&self, image: ImageId, items: &[NewAnnotation]) -> Result<UpsertReport> {
        self.upsert_annotations(image, items, AnnotationSource::ALL)
    }

    /// Replaces the full annotation list of an image only if every item is
    /// valid and, when given, the image is still at `expected_revision`.
    /// Returns the report and the new revision.
    pub fn replace_annotations_strict(
        &self,
        image: ImageId,
        items: &[NewAnnotation],
        expected_revision: Option<i64>,
    ) -> Result<(UpsertReport, i64)> {
        let mode = self.project(image.project())?.mode;
        let db = self.project_db(image.project())?;
        let mut conn = lock(&db.writer);
        let tx = conn.transaction()?;
        let current = revision_in(&tx, image)?;
        if let Some(expected) = expected_revision {
            if expected != current {
                return Err(StoreError::Conflict(format!("image {image} is at revision {current}, not {expected}")));
            }
        }
        let classes = class_ids(&tx)?;
        let report = upsert_in(&tx, mode, &classes, image, items, AnnotationSource::ALL)?;
        if !report.rejected.is_empty() {
            // dropping the transaction rolls everything back
            return Err(StoreError::Rejected(report.rejected));
        }
        let revision = revision_in(&tx, image)?;
        tx.commit()?;
        Ok((report, revision))
    }

    /// Deletes the listed annotations of an image, or all of them for
    /// `None`. Unknown ids are a not-found error and nothing is deleted.
    pub fn delete_annotations(&self, image: ImageId, ids: Option<&[AnnotationId]>) -> Result<usize> {
        let db = self.project_db(image.project())?;
        let mut conn = lock(&db.writer);
        let tx = conn.transaction()?;
        revision_in(&tx, image)?;
        let deleted = match ids {
            None => tx.execute("DELETE FROM annotations WHERE image_id = ?1", [image.local()])?,
            Some(ids) => {
                let mut n = 0;
                for id in ids {
                    if tx.execute("DELETE FROM annotations WHERE id = ?1 AND image_id = ?2", params![id, image.local()])? == 0 {
                        return Err(StoreError::NotFound(format!("annotation {id} on image {image}")));
                    }
                    n += 1;
                }
                n
            }
        };
        tx.execute("UPDATE images SET revision = revision + 1 WHERE id = ?1", [image.local()])?;
        refresh_status(&tx, image.local())?;
        tx.commit()?;
        Ok(deleted)
    }

    /// Accepts or re-opens one annotation (review in the UI).
    pub fn set_annotation_state(&self, image: ImageId, id: AnnotationId, state: AnnotationState) -> Result<()> {
        let db = self.project_db(image.project())?;
        let mut conn = lock(&db.writer);
        let tx = conn.transaction()?;
        if tx.execute(
            "UPDATE annotations SET state = ?1 WHERE id = ?2 AND image_id = ?3",
            params![state.as_str(), id, image.local()],
        )? == 0
        {
            return Err(StoreError::NotFound(format!("annotation {id} on image {image}")));
        }
        tx.execute("UPDATE images SET revision = revision + 1 WHERE id = ?1", [image.local()])?;
        refresh_status(&tx, image.local())?;
        tx.commit()?;
        Ok(())
    }

    /// Stores the outcome of pre-annotating one image: replaces its `auto`
    /// annotations and updates the pipeline flags, in one transaction.
    pub fn record_preannotation(&self, image: ImageId, write: &PreannotationWrite) -> Result<UpsertReport> {
        let db = self.project_db(image.project())?;
        match write {
            PreannotationWrite::Done { annotations, needs_manual } => {
                let mode = self.project(image.project())?.mode;
                let mut conn = lock(&db.writer);
                let tx = conn.transaction()?;
                let classes = class_ids(&tx)?;
                tx.execute(
                    "UPDATE images SET preannotated = 1, failed = 0, needs_manual = ?1 WHERE id = ?2",
                    params![needs_manual, image.local()],
                )?;
                let report = upsert_in(&tx, mode, &classes, image, annotations, &[AnnotationSource::Auto])?;
                tx.commit()?;
                Ok(report)
            }
            PreannotationWrite::Failed { reason } => {
                log::warn!("image {image} failed pre-annotation: {reason}");
                let mut conn = lock(&db.writer);
                let tx = conn.transaction()?;
                if tx.execute("UPDATE images SET failed = 1 WHERE id = ?1", [image.local()])? == 0 {
                    return Err(StoreError::NotFound(format!("image {image}")));
                }
                refresh_status(&tx, image.local())?;
                tx.commit()?;
                Ok(UpsertReport::default())
            }
        }
    }

    // ---- statistics ----

    pub fn compute_stats(&self, project: ProjectId) -> Result<Stats> {
        let db = self.project_db(project)?;
        let conn = lock(&db.reader);
        // one read transaction so the numbers come from a single snapshot
        conn.execute_batch("BEGIN DEFERRED")?;
        let result = stats_in(&conn, project);
        conn.execute_batch("COMMIT")?;
        result
    }
}

fn class_ids(tx: &Connection) -> Result<HashSet<ClassId>> {
    let mut stmt = tx.prepare("SELECT id FROM classes")?;
    let ids = stmt.query_map([], |r| r.get::<_, i64>(0))?.collect::<rusqlite::Result<HashSet<_>>>()?;
    Ok(ids)
}

fn upsert_in(
    tx: &Connection,
    mode: ProjectMode,
    classes: &HashSet<ClassId>,
    image: ImageId,
    items: &[NewAnnotation],
    replace_sources: &[AnnotationSource],
) -> Result<UpsertReport> {
    let dims: Option<(u32, u32)> = tx
        .query_row("SELECT width, height FROM images WHERE id = ?1", [image.local()], |r| Ok((r.get(0)?, r.get(1)?)))
        .optional()?;
    let (w, h) = dims.ok_or_else(|| StoreError::NotFound(format!("image {image}")))?;
    let mut report = UpsertReport::default();
    for source in replace_sources {
        report.deleted += tx.execute(
            "DELETE FROM annotations WHERE image_id = ?1 AND source = ?2",
            params![image.local(), source.as_str()],
        )?;
    }
    for (i, item) in items.iter().enumerate() {
        let geometry = match validate_item(item, mode, w, h, classes) {
            Ok(g) => g,
            Err(reason) => {
                report.rejected.push((i, reason));
                continue;
            }
        };
        tx.execute(
            "INSERT INTO annotations (image_id, class_id, kind, geometry, detector_score, verified_score, source, state)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            params![
                image.local(),
                item.class_id,
                geometry.kind().as_str(),
                serde_json::to_string(&geometry).expect("shape serialize"),
                item.detector_score,
                item.verified_score,
                item.source.as_str(),
                item.state.as_str()
            ],
        )?;
        report.inserted += 1;
    }
    tx.execute("UPDATE images SET revision = revision + 1 WHERE id = ?1", [image.local()])?;
    refresh_status(tx, image.local())?;
    Ok(report)
}

fn revision_in(tx: &Connection, image: ImageId) -> Result<i64> {
    tx.query_row("SELECT revision FROM images WHERE id = ?1", [image.local()], |r| r.get(0))
        .optional()?
        .ok_or_else(|| StoreError::NotFound(format!("image {image}")))
}

fn validate_item(
    item: &NewAnnotation,
    mode: ProjectMode,
    width: u32,
    height: u32,
    classes: &HashSet<ClassId>,
) -> Result<Shape, String> {
    if !classes.contains(&item.class_id) {
        return Err(format!("unknown class id {}", item.class_id));
    }
    let geometry = item.geometry.clone().validated().map_err(|e| format!("invalid geometry: {e}"))?;
    if !mode.allows(geometry.kind()) {
        return Err(format!("{} geometry not allowed in {mode} projects", geometry.kind().as_str()));
    }
    if !geometry.within(width as f64, height as f64) {
        return Err(format!("geometry exceeds image bounds {width}x{height}"));
    }
    check_score("detector_score", item.detector_score)?;
    check_score("verified_score", item.verified_score)?;
    Ok(geometry)
}

fn stats_in(conn: &Connection, project: ProjectId) -> Result<Stats> {
    let mut status_counts: BTreeMap<ImageStatus, u64> = ImageStatus::ALL.iter().map(|s| (*s, 0)).collect();
    let mut processed = 0u64;
    {
        let mut stmt = conn.prepare("SELECT status, preannotated FROM images")?;
        let mut rows = stmt.query([])?;
        while let Some(r) = rows.next()? {
            let s: String = r.get(0)?;
            let status = ImageStatus::parse(&s).ok_or_else(|| StoreError::Corrupt(format!("image status {s:?}")))?;
            *status_counts.entry(status).or_default() += 1;
            if r.get::<_, bool>(1)? {
                processed += 1;
            }
        }
    }
    let image_count: u64 = status_counts.values().sum();
    let frac = |s: ImageStatus| {
        if image_count == 0 {
            if s == ImageStatus::Unannotated {
                1.0
            } else {
                0.0
            }
        } else {
            status_counts[&s] as f64 / image_count as f64
        }
    };
    let completion = Completion {
        unannotated: frac(ImageStatus::Unannotated),
        pending_review: frac(ImageStatus::PendingReview),
        annotated: frac(ImageStatus::Annotated),
        failed: frac(ImageStatus::Failed),
    };

    let mut class_counts = BTreeMap::new();
    {
        let mut stmt = conn.prepare(
            "SELECT c.name, COUNT(a.id) FROM classes c LEFT JOIN annotations a ON a.class_id = c.id GROUP BY c.id",
        )?;
        let mut rows = stmt.query([])?;
        while let Some(r) = rows.next()? {
            class_counts.insert(r.get::<_, String>(0)?, r.get::<_, i64>(1)? as u64);
        }
    }
    let annotation_count: u64 = class_counts.values().sum();

    let mut per_image_histogram: Vec<HistogramBucket> = HISTOGRAM_BOUNDS
        .iter()
        .map(|&(min, max)| HistogramBucket {
            label: match max {
                Some(m) => format!("{min}-{m}"),
                None => format!("{min}+"),
            },
            min,
            max,
            count: 0,
        })
        .collect();
    {
        let mut stmt = conn.prepare(
            "SELECT COUNT(a.id) FROM images i LEFT JOIN annotations a ON a.image_id = i.id GROUP BY i.id",
        )?;
        let mut rows = stmt.query([])?;
        while let Some(r) = rows.next()? {
            let n = r.get::<_, i64>(0)? as u64;
            let bucket = per_image_histogram
                .iter_mut()
                .find(|b| n >= b.min && b.max.map_or(true, |m| n <= m))
                .expect("buckets cover all counts");
            bucket.count += 1;
        }
    }

    Ok(Stats {
        project_id: project,
        image_count,
        annotation_count,
        processed,
        status_counts,
        completion,
        class_counts,
        per_image_histogram,
    })
}
