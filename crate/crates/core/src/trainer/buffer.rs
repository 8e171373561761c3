//! Per-class exemplar storage with reservoir sampling, for the replay
//! variant of the trainer.

use crate::data::{MultiLabelSample, TaskSchedule};
use crate::error::Result;
use crate::util::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// A stored training sample. Labels are the visible labels at storage time;
/// they are never back-filled when later tasks add classes.
#[derive(Debug, Clone)]
pub struct Exemplar {
    pub image: Arc<ndarray::Array3<f64>>,
    pub labels: Vec<bool>,
    pub task_id: usize,
}

/// Reservoir-sampled exemplars, one list per class slot. Classes are filled
/// exactly once, during their own task; later updates never touch them.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    classes: Vec<Vec<Exemplar>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            classes: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_exemplars(&self, slot: usize) -> &[Exemplar] {
        self.classes.get(slot).map_or(&[], Vec::as_slice)
    }

    /// All exemplars in class-slot order; deterministic.
    pub fn iter(&self) -> impl Iterator<Item = &Exemplar> {
        self.classes.iter().flatten()
    }

    /// Reservoir-samples up to `capacity` exemplars per task-t class from
    /// the samples positive for that class. A sample positive for several
    /// new classes can back more than one of them.
    pub fn update(
        &mut self,
        task_samples: &[MultiLabelSample],
        schedule: &TaskSchedule,
        t: usize,
        seed: u64,
    ) -> Result<()> {
        if self.capacity == 0 {
            return Ok(());
        }
        let slots = schedule.task_slots(t)?;
        if self.classes.len() < slots.end {
            self.classes.resize_with(slots.end, Vec::new);
        }
        for slot in slots {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[slot as u64]));
            let mut reservoir: Vec<&MultiLabelSample> = Vec::with_capacity(self.capacity);
            let mut seen = 0u64;
            for sample in task_samples.iter().filter(|s| s.visible_labels[slot]) {
                if reservoir.len() < self.capacity {
                    reservoir.push(sample);
                } else {
                    let j = rng.gen_range(0..=seen);
                    if (j as usize) < self.capacity {
                        reservoir[j as usize] = sample;
                    }
                }
                seen += 1;
            }
            self.classes[slot] = reservoir
                .into_iter()
                .map(|s| Exemplar {
                    image: Arc::clone(&s.image),
                    labels: s.visible_labels.clone(),
                    task_id: s.task_id,
                })
                .collect();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_schedule;
    use ndarray::Array3;

    fn sample(labels: Vec<bool>, task_id: usize) -> MultiLabelSample {
        MultiLabelSample {
            image: Arc::new(Array3::zeros((3, 4, 4))),
            visible_labels: labels,
            full_labels: vec![false; 3],
            task_id,
        }
    }

    #[test]
    fn zero_capacity_stores_nothing() {
        let schedule = build_schedule(3, 1, 1, None).unwrap();
        let mut buf = ReplayBuffer::new(0);
        let samples = vec![sample(vec![true, false, false], 1)];
        buf.update(&samples, &schedule, 1, 7).unwrap();
        assert!(buf.is_empty());
    }

    #[test]
    fn under_capacity_keeps_every_positive() {
        let schedule = build_schedule(3, 1, 1, None).unwrap();
        let mut buf = ReplayBuffer::new(5);
        let samples: Vec<_> = (0..3)
            .map(|_| sample(vec![true, false, false], 1))
            .collect();
        buf.update(&samples, &schedule, 1, 7).unwrap();
        assert_eq!(buf.class_exemplars(0).len(), 3);
        assert_eq!(buf.len(), 3);
    }

    #[test]
    fn earlier_classes_survive_later_updates() {
        let schedule = build_schedule(3, 1, 1, None).unwrap();
        let mut buf = ReplayBuffer::new(2);
        let task1: Vec<_> = (0..4).map(|_| sample(vec![true, false, false], 1)).collect();
        buf.update(&task1, &schedule, 1, 7).unwrap();
        let before: Vec<*const ndarray::Array3<f64>> = buf
            .class_exemplars(0)
            .iter()
            .map(|e| Arc::as_ptr(&e.image))
            .collect();

        let task2: Vec<_> = (0..4).map(|_| sample(vec![false, true, false], 2)).collect();
        buf.update(&task2, &schedule, 2, 8).unwrap();
        let after: Vec<*const ndarray::Array3<f64>> = buf
            .class_exemplars(0)
            .iter()
            .map(|e| Arc::as_ptr(&e.image))
            .collect();
        assert_eq!(before, after);
        assert_eq!(buf.class_exemplars(1).len(), 2);
    }

    #[test]
    fn stored_labels_are_the_visible_labels_at_storage_time() {
        let schedule = build_schedule(3, 1, 1, None).unwrap();
        let mut buf = ReplayBuffer::new(3);
        let mut s = sample(vec![true, false, false], 1);
        s.full_labels = vec![true, true, false]; // also positive for class 1, invisibly
        buf.update(&[s], &schedule, 1, 7).unwrap();
        assert_eq!(buf.class_exemplars(0)[0].labels, vec![true, false, false]);
    }

    #[test]
    fn same_seed_gives_the_same_subset() {
        let schedule = build_schedule(3, 1, 1, None).unwrap();
        let samples: Vec<_> = (0..50)
            .map(|i| {
                let mut s = sample(vec![true, false, false], 1);
                s.image = Arc::new(Array3::from_elem((3, 4, 4), i as f64));
                s
            })
            .collect();
        let pick = |seed| {
            let mut buf = ReplayBuffer::new(5);
            buf.update(&samples, &schedule, 1, seed).unwrap();
            buf.class_exemplars(0)
                .iter()
                .map(|e| e.image[(0, 0, 0)] as usize)
                .collect::<Vec<_>>()
        };
        assert_eq!(pick(42), pick(42));
        assert_ne!(pick(42), pick(43));
    }

    /// Reservoir sampling gives each item equal inclusion probability; a
    /// chi-squared statistic over many reseeded draws must stay under the
    /// 99.9th percentile for 99 degrees of freedom.
    #[test]
    fn reservoir_inclusion_is_uniform() {
        let schedule = build_schedule(3, 1, 1, None).unwrap();
        let n = 100;
        let cap = 5;
        let draws = 10_000;
        let samples: Vec<_> = (0..n)
            .map(|i| {
                let mut s = sample(vec![true, false, false], 1);
                s.image = Arc::new(Array3::from_elem((3, 1, 1), i as f64));
                s
            })
            .collect();
        let mut counts = vec![0u64; n];
        for seed in 0..draws {
            let mut buf = ReplayBuffer::new(cap);
            buf.update(&samples, &schedule, 1, seed).unwrap();
            for e in buf.class_exemplars(0) {
                counts[e.image[(0, 0, 0)] as usize] += 1;
            }
        }
        let expected = (draws * cap as u64) as f64 / n as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 99.9th percentile of chi-squared with 99 dof is about 148.2
        assert!(chi2 < 148.2, "chi2 = {chi2}, counts skewed");
    }
}
