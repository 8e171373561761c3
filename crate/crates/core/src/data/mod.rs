//! Corpora and task schedules for incremental multi-label runs.

mod manifest;
mod schedule;
mod synthetic;

pub use manifest::{load_external_corpus, png_to_image, resize_image, save_corpus};
pub use schedule::{build_schedule, TaskSchedule};
pub use synthetic::{
    default_prototypes, empirical_cooccurrence, generate_corpus, random_cooccurrence,
    sample_labels, BlobPrototype, SyntheticCorpusSpec,
};

use ndarray::Array3;
use std::sync::Arc;

/// An image with its complete label vector over the class universe.
/// Images are CHW in [0, 1] and shared so task views stay cheap.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Arc<Array3<f64>>,
    pub labels: Vec<bool>,
}

/// A full corpus: fixed class-name universe plus train/test splits.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub classes: Vec<String>,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

/// A training sample as the task-t pipeline sees it. Only the slots of task
/// `task_id` carry annotation; `full_labels` is kept for evaluation and must
/// never feed supervision.
#[derive(Debug, Clone)]
pub struct MultiLabelSample {
    pub image: Arc<Array3<f64>>,
    /// Indexed by model output slot, length = class universe. True only on
    /// the slots of task `task_id`; everything else is unannotated, not
    /// negative.
    pub visible_labels: Vec<bool>,
    /// Multi-hot over the whole universe, indexed by global class id.
    /// Evaluation only.
    pub full_labels: Vec<bool>,
    /// 1-based task index this sample was materialized for.
    pub task_id: usize,
}

/// Task-t view of a sample collection: drops samples without any positive
/// among the task's classes and exposes labels only on the task's slots.
pub fn restrict_to_task(
    samples: &[LabeledImage],
    schedule: &TaskSchedule,
    t: usize,
) -> crate::Result<Vec<MultiLabelSample>> {
    let slots = schedule.task_slots(t)?;
    let total = schedule.total_classes();
    let mut out = Vec::new();
    for s in samples {
        if s.labels.len() != total {
            return Err(crate::Error::shape(
                "corpus sample labels",
                format!("{total}"),
                format!("{}", s.labels.len()),
            ));
        }
        let mut visible = vec![false; total];
        let mut any = false;
        for slot in slots.clone() {
            if s.labels[schedule.class_of_slot(slot)] {
                visible[slot] = true;
                any = true;
            }
        }
        if any {
            out.push(MultiLabelSample {
                image: Arc::clone(&s.image),
                visible_labels: visible,
                full_labels: s.labels.clone(),
                task_id: t,
            });
        }
    }
    Ok(out)
}
