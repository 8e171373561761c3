//! Executes a resolved experiment: train task by task, evaluate on the
//! cumulative test set after each, and write the artifact tree.
//!
//! Artifact layout under the output directory:
//!   resolved_config.json   effective config after method resolution
//!   logs/task_NN.jsonl     per-epoch loss terms and gradient norms
//!   reports/task_NN.json   per-task metrics
//!   histograms/task_NN.csv old-class confidence histogram (TP/FP per bin)
//!   checkpoints/task_NN.json
//!   cams/…                 optional activation-mask dumps
//!   summary.json           whole-run summary; byte-stable across reruns
//!   metadata.json          timestamps and corpus sizes (not byte-stable)
//!
//! Every file except metadata.json depends only on the config, so two runs
//! of the same config produce identical bytes.

use super::config::{apply_env_overrides, ExperimentConfig, Method, ResolvedRun, ScenarioSection};
use crate::data::{restrict_to_task, Corpus};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_task, ConfidenceHistogram, EvalReport, TaskEval};
use crate::model::{save_checkpoint, CscModel};
use crate::trainer::{run_task, ReplayBuffer};
use crate::util::derive_seed;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

const TAG_MODEL_INIT: u64 = 0x30;
const CAM_EXPORT_SAMPLES: usize = 4;
const CAM_EXPORT_SCALE: usize = 8;

/// Whole-run record; everything in it is deterministic given the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub method: Method,
    pub seed: u64,
    pub scenario: ScenarioSection,
    /// Model slot i handles this global class id.
    pub class_order: Vec<usize>,
    pub per_task: Vec<TaskEval>,
    pub average_map: f64,
    pub last_map: f64,
    pub final_histogram: ConfidenceHistogram,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Set when artifacts were written.
    pub out_dir: Option<PathBuf>,
    pub summary: RunSummary,
    /// Exact bytes of summary.json.
    pub summary_json: String,
    pub report: EvalReport,
}

#[derive(Serialize)]
struct Metadata<'a> {
    name: &'a str,
    method: &'a str,
    started_unix: u64,
    finished_unix: u64,
    duration_seconds: u64,
    tasks: usize,
    train_samples: usize,
    test_samples: usize,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Loads nothing from disk: corpus comes from the config (generated or via
/// manifests), artifacts go under the resolved output directory.
pub fn run_experiment(mut cfg: ExperimentConfig) -> Result<RunOutcome> {
    apply_env_overrides(&mut cfg)?;
    let resolved = cfg.resolve()?;
    let corpus = cfg.build_corpus()?;
    execute_run(&cfg, &resolved, &corpus, true)
}

/// Runs training and evaluation on an already materialized corpus. With
/// `write_artifacts` off nothing touches the filesystem; callers comparing
/// many variants on one corpus use this directly.
pub fn execute_run(
    cfg: &ExperimentConfig,
    resolved: &ResolvedRun,
    corpus: &Corpus,
    write_artifacts: bool,
) -> Result<RunOutcome> {
    let started = unix_now();
    let schedule = &resolved.schedule;
    let out = resolved.out_dir.clone();

    if write_artifacts {
        for sub in ["logs", "reports", "histograms", "checkpoints"] {
            fs::create_dir_all(out.join(sub))?;
        }
        if resolved.export_cams {
            fs::create_dir_all(out.join("cams"))?;
        }
        let echo = serde_json::json!({
            "config": cfg,
            "resolved": resolved,
        });
        write_text(
            &out.join("resolved_config.json"),
            &(serde_json::to_string_pretty(&echo)? + "\n"),
        )?;
    }

    let mut model = CscModel::new(
        resolved.model.clone(),
        schedule.cumulative_count(1)?,
        derive_seed(resolved.seed, &[TAG_MODEL_INIT]),
    )?;
    let mut replay = ReplayBuffer::new(resolved.train.buffer_per_class);

    let mut per_task: Vec<TaskEval> = Vec::with_capacity(schedule.num_tasks());
    let mut last_histogram: Option<ConfidenceHistogram> = None;
    for t in 1..=schedule.num_tasks() {
        let task_samples = restrict_to_task(&corpus.train, schedule, t)?;
        if task_samples.is_empty() {
            return Err(Error::config(format!(
                "no training sample carries a positive for task {t}; the corpus is too sparse"
            )));
        }
        let log = run_task(
            &mut model,
            &mut replay,
            &task_samples,
            schedule,
            t,
            &resolved.train,
            &resolved.loss,
        )?;
        let (eval, histogram) = evaluate_task(&model, &corpus.test, schedule, t, &resolved.metrics)?;

        if write_artifacts {
            let file = fs::File::create(out.join(format!("logs/task_{t:02}.jsonl")))?;
            log.write_jsonl(std::io::BufWriter::new(file))?;
            write_text(
                &out.join(format!("reports/task_{t:02}.json")),
                &(serde_json::to_string_pretty(&eval)? + "\n"),
            )?;
            write_text(
                &out.join(format!("histograms/task_{t:02}.csv")),
                &histogram.to_csv_string(),
            )?;
            save_checkpoint(&model, &out.join(format!("checkpoints/task_{t:02}.json")))?;
            if resolved.export_cams {
                export_cams(&model, corpus, &out.join("cams"), t)?;
            }
        }

        per_task.push(eval);
        last_histogram = Some(histogram);
    }

    let histogram = last_histogram.expect("at least one task ran");
    let report = EvalReport::from_tasks(per_task.clone(), histogram.clone())?;
    let summary = RunSummary {
        name: resolved.name.clone(),
        method: resolved.method,
        seed: resolved.seed,
        scenario: cfg.scenario.clone(),
        class_order: schedule.class_order().to_vec(),
        per_task,
        average_map: report.average_map,
        last_map: report.last_map,
        final_histogram: histogram,
    };
    let summary_json = serde_json::to_string_pretty(&summary)? + "\n";

    if write_artifacts {
        write_text(&out.join("summary.json"), &summary_json)?;
        let finished = unix_now();
        let metadata = Metadata {
            name: &resolved.name,
            method: resolved.method.label(),
            started_unix: started,
            finished_unix: finished,
            duration_seconds: finished.saturating_sub(started),
            tasks: schedule.num_tasks(),
            train_samples: corpus.train.len(),
            test_samples: corpus.test.len(),
        };
        write_text(
            &out.join("metadata.json"),
            &(serde_json::to_string_pretty(&metadata)? + "\n"),
        )?;
    }

    Ok(RunOutcome {
        out_dir: write_artifacts.then_some(out),
        summary,
        summary_json,
        report,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(text.as_bytes())?;
    Ok(())
}

/// Per-class activation masks for the first few test images, tiled into one
/// grayscale strip per image and upscaled for visibility.
fn export_cams(model: &CscModel, corpus: &Corpus, dir: &Path, t: usize) -> Result<()> {
    for (i, sample) in corpus.test.iter().take(CAM_EXPORT_SAMPLES).enumerate() {
        let trace = model.forward(&sample.image)?;
        let (h, w) = trace.mask_grid;
        let classes = trace.masks.ncols();
        let tile_w = w * CAM_EXPORT_SCALE;
        let mut img = image::GrayImage::new(
            (tile_w * classes + classes.saturating_sub(1)) as u32,
            (h * CAM_EXPORT_SCALE) as u32,
        );
        for c in 0..classes {
            let column = trace.masks.column(c);
            let peak = column.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
            for gy in 0..h * CAM_EXPORT_SCALE {
                for gx in 0..tile_w {
                    let cell = (gy / CAM_EXPORT_SCALE) * w + gx / CAM_EXPORT_SCALE;
                    let value = (column[cell] / peak * 255.0).clamp(0.0, 255.0) as u8;
                    img.put_pixel((c * (tile_w + 1) + gx) as u32, gy as u32, image::Luma([value]));
                }
            }
        }
        let path = dir.join(format!("task_{t:02}_sample_{i:02}.png"));
        img.save(&path)
            .map_err(|e| Error::ingest(&path, format!("cannot write mask image: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::config::{CorpusSection, ScenarioSection, TrainSection};

    fn tiny_config(dir: Option<PathBuf>) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.run.name = "tiny".to_string();
        cfg.run.output_dir = dir;
        cfg.scenario = ScenarioSection {
            total_classes: 4,
            base_classes: 2,
            increment: 1,
            class_order_seed: None,
        };
        cfg.corpus = CorpusSection::Synthetic {
            image_size: (16, 16),
            train_samples: 24,
            test_samples: 10,
            noise_level: 0.03,
            corpus_seed: 5,
            pair_density: 0.5,
            marginal_range: (0.25, 0.45),
            correlation_strength: 0.8,
        };
        cfg.model.backbone_channels = vec![4, 8];
        cfg.model.d1 = 6;
        cfg.model.d2 = 5;
        cfg.train = TrainSection {
            epochs_per_task: 1,
            batch_size: 8,
            ..TrainSection::default()
        };
        cfg
    }

    #[test]
    fn a_full_run_writes_the_complete_artifact_tree() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        let outcome = run_experiment(tiny_config(Some(out.clone()))).unwrap();
        assert_eq!(outcome.out_dir.as_deref(), Some(out.as_path()));
        assert_eq!(outcome.summary.per_task.len(), 3);

        for file in [
            "resolved_config.json",
            "summary.json",
            "metadata.json",
            "logs/task_01.jsonl",
            "logs/task_03.jsonl",
            "reports/task_01.json",
            "reports/task_03.json",
            "histograms/task_03.csv",
            "checkpoints/task_03.json",
        ] {
            assert!(out.join(file).exists(), "missing {file}");
        }
        let written = fs::read_to_string(out.join("summary.json")).unwrap();
        assert_eq!(written, outcome.summary_json);
        let parsed: RunSummary = serde_json::from_str(&written).unwrap();
        assert_eq!(parsed, outcome.summary);

        // checkpoints reload into a model covering the cumulative classes
        let model =
            crate::model::load_checkpoint(&out.join("checkpoints/task_02.json")).unwrap();
        assert_eq!(model.known_classes(), 3);
    }

    #[test]
    fn rerunning_the_same_config_reproduces_summary_bytes() {
        let cfg = tiny_config(None);
        let resolved = cfg.resolve().unwrap();
        let corpus = cfg.build_corpus().unwrap();
        let a = execute_run(&cfg, &resolved, &corpus, false).unwrap();
        let b = execute_run(&cfg, &resolved, &corpus, false).unwrap();
        assert_eq!(a.summary_json, b.summary_json);
        assert!(a.out_dir.is_none());
    }

    #[test]
    fn cam_export_writes_mask_strips() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("cams-run");
        let mut cfg = tiny_config(Some(out.clone()));
        cfg.run.export_cams = true;
        run_experiment(cfg).unwrap();
        assert!(out.join("cams/task_01_sample_00.png").exists());
        assert!(out.join("cams/task_03_sample_03.png").exists());
    }
}
