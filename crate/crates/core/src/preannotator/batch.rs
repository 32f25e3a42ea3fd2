//! Whole-project runs. Images are processed in parallel; results are written
//! to the store one at a time in image-id order, so a re-run with the same
//! seed leaves byte-identical rows regardless of scheduling.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ImageOutcome, Pipeline, PipelineError};
use crate::model::{ImageId, ImageRecord, ProjectId};
use crate::providers::{ImageHandle, ProviderError, Providers};
use crate::store::{PreannotationWrite, Store, StoreError};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("invalid batch input: {0}")]
    Input(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRunStatus {
    Done,
    /// Nothing was detected; left for manual or assisted annotation.
    NeedsManual,
    Failed,
}

/// Emitted once per image, in image-id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub image_id: ImageId,
    pub status: ImageRunStatus,
    pub annotations: usize,
    pub completed: usize,
    pub total: usize,
}

pub trait ProgressSink: Send + Sync {
    fn on_progress(&self, event: &ProgressEvent);
}

impl<F: Fn(&ProgressEvent) + Send + Sync> ProgressSink for F {
    fn on_progress(&self, event: &ProgressEvent) {
        self(event)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub image_id: ImageId,
    pub file_name: String,
    pub status: ImageRunStatus,
    pub raw_detections: usize,
    pub clusters: usize,
    pub annotations: usize,
    pub rejected: usize,
    pub error: Option<String>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub project_id: ProjectId,
    pub total: usize,
    /// Images that completed without error (including ones needing manual work).
    pub processed: usize,
    pub failures: usize,
    pub needs_manual: usize,
    pub annotations: usize,
    pub raw_detections: usize,
    pub elapsed_ms: u64,
    pub images: Vec<ImageReport>,
}

fn load(record: &ImageRecord) -> Result<ImageHandle, PipelineError> {
    let bytes = std::fs::read(&record.path)
        .map_err(|e| PipelineError::Provider(ProviderError::Input(format!("{}: {e}", record.path))))?;
    let handle = ImageHandle::decode(&bytes)?;
    if (handle.width(), handle.height()) != (record.width, record.height) {
        return Err(PipelineError::Input(format!(
            "{} is {}x{}, registered as {}x{}",
            record.path,
            handle.width(),
            handle.height(),
            record.width,
            record.height
        )));
    }
    Ok(handle)
}

fn run_one(pipeline: &Pipeline, record: &ImageRecord) -> (Result<ImageOutcome, PipelineError>, u64) {
    let start = Instant::now();
    let result = load(record).and_then(|img| pipeline.preannotate_image(&img));
    (result, start.elapsed().as_millis() as u64)
}

/// Pre-annotates every image of a project with the project's settings.
/// A failing image is marked failed and the batch continues.
pub fn preannotate_batch(
    store: &Store,
    project: ProjectId,
    providers: Providers,
    progress: Option<&dyn ProgressSink>,
) -> Result<BatchReport, BatchError> {
    let started = Instant::now();
    let proj = store.project(project).map_err(|e| match e {
        StoreError::NotFound(m) => BatchError::Input(m),
        other => other.into(),
    })?;
    let images = store.images(project)?;
    if images.is_empty() {
        return Err(BatchError::Input(format!("project {:?} has no images", proj.name)));
    }
    let pipeline = Pipeline::new(proj.settings.clone(), proj.mode, store.classes(project)?, providers)?;
    let total = images.len();

    let (tx, rx) = mpsc::channel();
    let mut reports = Vec::with_capacity(total);
    std::thread::scope(|scope| -> Result<(), BatchError> {
        let (pipeline, images) = (&pipeline, &images);
        scope.spawn(move || {
            images.par_iter().enumerate().for_each_with(tx, |tx, (i, rec)| {
                // the receiver only hangs up after a store error; stop quietly then
                let _ = tx.send((i, run_one(pipeline, rec)));
            });
        });

        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (i, result) in rx.iter() {
            pending.insert(i, result);
            while let Some((result, elapsed_ms)) = pending.remove(&next) {
                let rec = &images[next];
                let report = write_one(store, rec, result, elapsed_ms)?;
                if let Some(sink) = progress {
                    sink.on_progress(&ProgressEvent {
                        image_id: rec.id,
                        status: report.status,
                        annotations: report.annotations,
                        completed: next + 1,
                        total,
                    });
                }
                reports.push(report);
                next += 1;
            }
        }
        Ok(())
    })?;

    let count = |s: ImageRunStatus| reports.iter().filter(|r| r.status == s).count();
    Ok(BatchReport {
        project_id: project,
        total,
        processed: total - count(ImageRunStatus::Failed),
        failures: count(ImageRunStatus::Failed),
        needs_manual: count(ImageRunStatus::NeedsManual),
        annotations: reports.iter().map(|r| r.annotations).sum(),
        raw_detections: reports.iter().map(|r| r.raw_detections).sum(),
        elapsed_ms: started.elapsed().as_millis() as u64,
        images: reports,
    })
}

fn write_one(
    store: &Store,
    rec: &ImageRecord,
    result: Result<ImageOutcome, PipelineError>,
    elapsed_ms: u64,
) -> Result<ImageReport, StoreError> {
    let mut report = ImageReport {
        image_id: rec.id,
        file_name: rec.file_name.clone(),
        status: ImageRunStatus::Failed,
        raw_detections: 0,
        clusters: 0,
        annotations: 0,
        rejected: 0,
        error: None,
        elapsed_ms,
    };
    match result {
        Ok(outcome) => {
            let written = store.record_preannotation(
                rec.id,
                &PreannotationWrite::Done { annotations: outcome.annotations, needs_manual: outcome.needs_manual },
            )?;
            report.status = if outcome.needs_manual { ImageRunStatus::NeedsManual } else { ImageRunStatus::Done };
            report.raw_detections = outcome.raw_detections;
            report.clusters = outcome.clusters;
            report.annotations = written.inserted;
            report.rejected = written.rejected.len();
        }
        Err(e) => {
            let reason = e.to_string();
            store.record_preannotation(rec.id, &PreannotationWrite::Failed { reason: reason.clone() })?;
            report.error = Some(reason);
        }
    }
    Ok(report)
}
