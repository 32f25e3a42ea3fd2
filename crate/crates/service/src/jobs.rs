//! Background job registry. Jobs run on the blocking pool; their status is
//! readable at any time. Progress never decreases and terminal states are
//! final.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Mutex, MutexGuard};

use prelabel_core::model::ProjectId;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Preannotate,
    Import,
    Export,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub processed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub kind: JobKind,
    pub project_id: ProjectId,
    pub state: JobState,
    pub progress: Progress,
    /// Number of progress events applied.
    pub updates: u64,
    /// Batch, import or export report once done.
    pub report: Option<serde_json::Value>,
    pub error: Option<String>,
    /// Where a finished export can be fetched.
    pub download_url: Option<String>,
}

struct Entry {
    status: JobStatus,
    artifact: Option<(String, Arc<Vec<u8>>)>,
}

#[derive(Default)]
struct Inner {
    next_id: u64,
    jobs: BTreeMap<u64, Entry>,
    preannotating: HashSet<ProjectId>,
}

#[derive(Default)]
pub struct Jobs {
    inner: Mutex<Inner>,
}

impl Jobs {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Registers a queued job. A second preannotate job on a project that
    /// already has one queued or running is a conflict.
    pub fn create(&self, kind: JobKind, project_id: ProjectId, total: usize) -> Result<JobStatus, ApiError> {
        let mut inner = self.lock();
        if kind == JobKind::Preannotate && !inner.preannotating.insert(project_id) {
            return Err(ApiError::conflict(format!("project {project_id} already has a pre-annotation job running")));
        }
        inner.next_id += 1;
        let status = JobStatus {
            id: inner.next_id,
            kind,
            project_id,
            state: JobState::Queued,
            progress: Progress { processed: 0, total },
            updates: 0,
            report: None,
            error: None,
            download_url: None,
        };
        inner.jobs.insert(status.id, Entry { status: status.clone(), artifact: None });
        Ok(status)
    }

    fn update(&self, id: u64, f: impl FnOnce(&mut Entry)) {
        let mut inner = self.lock();
        let Some(entry) = inner.jobs.get_mut(&id) else { return };
        if entry.status.state.is_terminal() {
            return;
        }
        f(entry);
        if entry.status.state.is_terminal() && entry.status.kind == JobKind::Preannotate {
            let project = entry.status.project_id;
            inner.preannotating.remove(&project);
        }
    }

    pub fn start(&self, id: u64) {
        self.update(id, |e| e.status.state = JobState::Running);
    }

    pub fn progress(&self, id: u64, processed: usize, total: usize) {
        self.update(id, |e| {
            let p = &mut e.status.progress;
            p.total = p.total.max(total);
            p.processed = p.processed.max(processed).min(p.total);
            e.status.updates += 1;
        });
    }

    pub fn finish(&self, id: u64, report: serde_json::Value, artifact: Option<(String, Vec<u8>)>) {
        self.update(id, |e| {
            e.status.state = JobState::Done;
            e.status.progress.processed = e.status.progress.total;
            e.status.report = Some(report);
            if let Some((name, bytes)) = artifact {
                e.status.download_url = Some(format!("/api/jobs/{id}/download"));
                e.artifact = Some((name, Arc::new(bytes)));
            }
        });
    }

    pub fn fail(&self, id: u64, error: impl Into<String>) {
        let error = error.into();
        log::warn!("job {id} failed: {error}");
        self.update(id, |e| {
            e.status.state = JobState::Failed;
            e.status.error = Some(error);
        });
    }

    pub fn get(&self, id: u64) -> Option<JobStatus> {
        self.lock().jobs.get(&id).map(|e| e.status.clone())
    }

    /// Newest first, optionally for one project.
    pub fn list(&self, project: Option<ProjectId>) -> Vec<JobStatus> {
        self.lock()
            .jobs
            .values()
            .rev()
            .filter(|e| project.is_none_or(|p| e.status.project_id == p))
            .map(|e| e.status.clone())
            .collect()
    }

    /// File name and bytes of a finished export.
    pub fn artifact(&self, id: u64) -> Option<(String, Arc<Vec<u8>>)> {
        self.lock().jobs.get(&id).and_then(|e| e.artifact.clone())
    }
}
