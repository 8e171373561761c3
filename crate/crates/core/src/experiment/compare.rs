//! Side-by-side comparison of finished runs from their summary files.

use super::runner::RunSummary;
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Comparison {
    pub runs: Vec<RunSummary>,
}

pub fn load_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ingest(path, format!("cannot read summary: {e}")))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::ingest(path, format!("not a run summary: {e}")))
}

/// Groups summaries for comparison. All runs must come from the same
/// scenario and class order, otherwise their task columns would not line up.
pub fn compare_summaries(runs: Vec<RunSummary>) -> Result<Comparison> {
    let first = runs
        .first()
        .ok_or_else(|| Error::config("nothing to compare: no summaries given"))?;
    for run in &runs[1..] {
        if run.scenario != first.scenario || run.class_order != first.class_order {
            return Err(Error::config(format!(
                "run {:?} used a different scenario than {:?}; refusing to compare",
                run.name, first.name
            )));
        }
    }
    Ok(Comparison { runs })
}

impl Comparison {
    fn num_tasks(&self) -> usize {
        self.runs.first().map_or(0, |r| r.per_task.len())
    }

    /// Fixed-width text table: one row per run, mAP per task plus the
    /// whole-run aggregates from the final task.
    pub fn to_text_table(&self) -> String {
        let tasks = self.num_tasks();
        let name_w = self
            .runs
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}  {:<11}  {:>4}", "name", "method", "seed");
        for t in 1..=tasks {
            let _ = write!(out, "  {:>8}", format!("mAP@t{t}"));
        }
        let _ = writeln!(out, "  {:>8}  {:>8}  {:>8}  {:>8}", "avg mAP", "CF1", "OF1", "FPR");
        for run in &self.runs {
            let _ = write!(
                out,
                "{:<name_w$}  {:<11}  {:>4}",
                run.name,
                run.method.label(),
                run.seed
            );
            for eval in &run.per_task {
                let _ = write!(out, "  {:>8.4}", eval.map);
            }
            let last = run.per_task.last().expect("summaries have tasks");
            let _ = writeln!(
                out,
                "  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}",
                run.average_map, last.cf1, last.of1, last.fpr
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let tasks = self.num_tasks();
        let mut out = String::from("name,method,seed,average_map,last_map,last_cf1,last_of1,last_fpr");
        for t in 1..=tasks {
            let _ = write!(out, ",map_task_{t}");
        }
        out.push('\n');
        for run in &self.runs {
            let last = run.per_task.last().expect("summaries have tasks");
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{}",
                run.name,
                run.method.label(),
                run.seed,
                run.average_map,
                run.last_map,
                last.cf1,
                last.of1,
                last.fpr
            );
            for eval in &run.per_task {
                let _ = write!(out, ",{}", eval.map);
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::config::{Method, ScenarioSection};
    use crate::metrics::{ConfidenceHistogram, TaskEval};

    fn summary(name: &str, method: Method, maps: &[f64]) -> RunSummary {
        let per_task: Vec<TaskEval> = maps
            .iter()
            .enumerate()
            .map(|(i, &map)| TaskEval {
                task_id: i + 1,
                map,
                cf1: 0.5,
                of1: 0.6,
                fpr: 0.1,
                cr_minus_cp: 0.0,
                or_minus_op: 0.0,
                mean_entropy: 0.2,
                classes_without_positives: Vec::new(),
                notes: Vec::new(),
            })
            .collect();
        RunSummary {
            name: name.to_string(),
            method,
            seed: 0,
            scenario: ScenarioSection {
                total_classes: 4,
                base_classes: 2,
                increment: 1,
                class_order_seed: None,
            },
            class_order: vec![0, 1, 2, 3],
            average_map: maps.iter().sum::<f64>() / maps.len() as f64,
            last_map: *maps.last().unwrap(),
            per_task,
            final_histogram: ConfidenceHistogram {
                bins: 20,
                tp_counts: vec![0; 20],
                fp_counts: vec![0; 20],
            },
        }
    }

    #[test]
    fn tables_carry_one_row_per_run_and_one_map_column_per_task() {
        let cmp = compare_summaries(vec![
            summary("a", Method::Csc, &[0.9, 0.8, 0.7]),
            summary("b", Method::FineTuning, &[0.9, 0.5, 0.3]),
        ])
        .unwrap();
        let table = cmp.to_text_table();
        assert_eq!(table.trim_end().lines().count(), 3);
        assert!(table.contains("mAP@t3"));
        assert!(table.contains("fine-tuning"));

        let csv = cmp.to_csv();
        let header = csv.lines().next().unwrap();
        assert!(header.ends_with("map_task_1,map_task_2,map_task_3"));
        assert_eq!(csv.trim_end().lines().count(), 3);
    }

    #[test]
    fn mismatched_scenarios_refuse_to_compare() {
        let a = summary("a", Method::Csc, &[0.9]);
        let mut b = summary("b", Method::Csc, &[0.9]);
        b.scenario.total_classes = 6;
        let err = compare_summaries(vec![a, b]).unwrap_err();
        assert!(err.to_string().contains("different scenario"));
    }

    #[test]
    fn empty_comparisons_are_rejected() {
        assert!(compare_summaries(Vec::new()).is_err());
    }
}
