//! Decomposition of a class universe into an incremental task sequence.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Partition of `0..total_classes` into consecutive tasks along a class
/// order: the first task holds `base_size` classes (or `increment` when the
/// base is 0) and every later task holds `increment`.
///
/// Model output slot `i` always corresponds to `class_order[i]`; with the
/// default identity order, slots and global class ids coincide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    total_classes: usize,
    base_size: usize,
    increment: usize,
    class_order: Vec<usize>,
    /// Global class ids per task, in learning order.
    tasks: Vec<Vec<usize>>,
}

/// Builds the schedule. Passing `None` for the seed keeps the identity class
/// order; a seed shuffles it deterministically.
pub fn build_schedule(
    total_classes: usize,
    base_size: usize,
    increment: usize,
    class_order_seed: Option<u64>,
) -> Result<TaskSchedule> {
    if total_classes == 0 {
        return Err(Error::config("total_classes must be positive"));
    }
    if increment == 0 {
        return Err(Error::config("increment must be positive"));
    }
    if base_size > total_classes {
        return Err(Error::config(format!(
            "base_size {base_size} exceeds total_classes {total_classes}"
        )));
    }
    let remainder = total_classes - base_size;
    if remainder % increment != 0 {
        return Err(Error::config(format!(
            "schedule (total_classes {total_classes}, base_size {base_size}, \
             increment {increment}) leaves {remainder} classes, not divisible \
             by the increment"
        )));
    }
    if base_size == 0 && total_classes % increment != 0 {
        // unreachable given the check above; kept for clarity
        return Err(Error::config("inconsistent schedule"));
    }

    let mut class_order: Vec<usize> = (0..total_classes).collect();
    if let Some(seed) = class_order_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        class_order.shuffle(&mut rng);
    }

    let first = if base_size == 0 { increment } else { base_size };
    let mut tasks = Vec::new();
    let mut cursor = 0;
    while cursor < total_classes {
        let size = if tasks.is_empty() { first } else { increment };
        tasks.push(class_order[cursor..cursor + size].to_vec());
        cursor += size;
    }

    Ok(TaskSchedule {
        total_classes,
        base_size,
        increment,
        class_order,
        tasks,
    })
}

impl TaskSchedule {
    pub fn total_classes(&self) -> usize {
        self.total_classes
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn increment(&self) -> usize {
        self.increment
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// The full learning order; slot `i` of the model maps to this class.
    pub fn class_order(&self) -> &[usize] {
        &self.class_order
    }

    fn check_task(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.tasks.len() {
            return Err(Error::config(format!(
                "task index {t} outside 1..={}",
                self.tasks.len()
            )));
        }
        Ok(())
    }

    /// Classes of task `t` (1-based), as global class ids.
    pub fn task_classes(&self, t: usize) -> Result<&[usize]> {
        self.check_task(t)?;
        Ok(&self.tasks[t - 1])
    }

    /// Number of classes known after task `t`, |C^{1:t}|.
    pub fn cumulative_count(&self, t: usize) -> Result<usize> {
        self.check_task(t)?;
        Ok(self.tasks[..t].iter().map(Vec::len).sum())
    }

    /// Model output slots occupied by task `t`'s classes.
    pub fn task_slots(&self, t: usize) -> Result<std::ops::Range<usize>> {
        let end = self.cumulative_count(t)?;
        Ok(end - self.tasks[t - 1].len()..end)
    }

    /// Global class id handled by model output slot `slot`.
    pub fn class_of_slot(&self, slot: usize) -> usize {
        self.class_order[slot]
    }
}
