//! Epoch pool assembly and deterministic batch shuffling.
//!
//! The pool for task t is the task's samples followed by every stored
//! exemplar; each epoch shuffles pool indices with its own seed and cuts
//! them into batches, the last one possibly short.

use crate::data::{MultiLabelSample, TaskSchedule};
use crate::error::{Error, Result};
use crate::trainer::buffer::ReplayBuffer;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::ops::Range;
use std::sync::Arc;

/// One pool entry: an image plus the output slots its binary supervision
/// applies to. Current-task samples target the task's slots; replayed
/// exemplars target their origin task's slots with their stored labels.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub image: Arc<Array3<f64>>,
    pub ce_slots: Range<usize>,
    pub ce_targets: Vec<f64>,
    /// True for replayed exemplars; used only for diagnostics.
    pub replayed: bool,
}

pub fn assemble_pool(
    task_samples: &[MultiLabelSample],
    buffer: &ReplayBuffer,
    schedule: &TaskSchedule,
    t: usize,
) -> Result<Vec<TrainItem>> {
    let slots = schedule.task_slots(t)?;
    let mut pool = Vec::with_capacity(task_samples.len() + buffer.len());
    for sample in task_samples {
        if sample.visible_labels.len() < slots.end {
            return Err(Error::shape(
                "task sample labels",
                format!("at least {}", slots.end),
                format!("{}", sample.visible_labels.len()),
            ));
        }
        pool.push(TrainItem {
            image: Arc::clone(&sample.image),
            ce_slots: slots.clone(),
            ce_targets: slots
                .clone()
                .map(|s| f64::from(u8::from(sample.visible_labels[s])))
                .collect(),
            replayed: false,
        });
    }
    for exemplar in buffer.iter() {
        let origin = schedule.task_slots(exemplar.task_id)?;
        if origin.end > slots.start {
            return Err(Error::config(format!(
                "replay exemplar from task {} cannot appear while training task {t}",
                exemplar.task_id
            )));
        }
        pool.push(TrainItem {
            image: Arc::clone(&exemplar.image),
            ce_slots: origin.clone(),
            ce_targets: origin
                .clone()
                .map(|s| f64::from(u8::from(exemplar.labels[s])))
                .collect(),
            replayed: true,
        });
    }
    Ok(pool)
}

/// Index batches over a pool, shuffled by the epoch seed.
pub fn make_batches(pool_len: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let mut indices: Vec<usize> = (0..pool_len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    indices.shuffle(&mut rng);
    indices
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_schedule;

    fn sample(labels: Vec<bool>, task_id: usize) -> MultiLabelSample {
        MultiLabelSample {
            image: Arc::new(Array3::zeros((3, 4, 4))),
            visible_labels: labels,
            full_labels: vec![false; 4],
            task_id,
        }
    }

    #[test]
    fn empty_buffer_yields_only_task_items() {
        let schedule = build_schedule(4, 2, 2, None).unwrap();
        let samples = vec![
            sample(vec![true, false, false, false], 1),
            sample(vec![false, true, false, false], 1),
        ];
        let pool = assemble_pool(&samples, &ReplayBuffer::new(0), &schedule, 1).unwrap();
        assert_eq!(pool.len(), 2);
        assert!(pool.iter().all(|i| !i.replayed));
        assert_eq!(pool[0].ce_slots, 0..2);
        assert_eq!(pool[0].ce_targets, vec![1.0, 0.0]);
    }

    #[test]
    fn pool_appends_replay_and_batches_split_evenly() {
        let schedule = build_schedule(4, 2, 2, None).unwrap();
        let task1: Vec<_> = (0..10)
            .map(|_| sample(vec![true, false, false, false], 1))
            .collect();
        let mut buffer = ReplayBuffer::new(10);
        buffer.update(&task1, &schedule, 1, 3).unwrap();
        assert_eq!(buffer.len(), 10);

        let task2: Vec<_> = (0..90)
            .map(|_| sample(vec![false, false, true, true], 2))
            .collect();
        let pool = assemble_pool(&task2, &buffer, &schedule, 2).unwrap();
        assert_eq!(pool.len(), 100);
        assert_eq!(pool.iter().filter(|i| i.replayed).count(), 10);
        // replayed exemplars keep their origin slots
        let replayed = pool.iter().find(|i| i.replayed).unwrap();
        assert_eq!(replayed.ce_slots, 0..2);
        assert_eq!(replayed.ce_targets, vec![1.0, 0.0]);

        let batches = make_batches(pool.len(), 20, 99);
        assert_eq!(batches.len(), 5);
        assert!(batches.iter().all(|b| b.len() == 20));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn same_epoch_seed_means_same_batches() {
        assert_eq!(make_batches(37, 8, 5), make_batches(37, 8, 5));
        assert_ne!(make_batches(37, 8, 5), make_batches(37, 8, 6));
    }

    #[test]
    fn uneven_pool_leaves_one_short_batch() {
        let batches = make_batches(23, 10, 1);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].len(), 3);
    }

    #[test]
    fn future_exemplars_are_rejected() {
        let schedule = build_schedule(4, 2, 2, None).unwrap();
        let task2: Vec<_> = (0..5)
            .map(|_| sample(vec![false, false, true, false], 2))
            .collect();
        let mut buffer = ReplayBuffer::new(4);
        buffer.update(&task2, &schedule, 2, 3).unwrap();
        let err = assemble_pool(&task2, &buffer, &schedule, 2).unwrap_err();
        assert!(err.to_string().contains("task 2"));
    }
}
