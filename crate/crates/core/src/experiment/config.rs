//! TOML-backed experiment description and its resolution into the concrete
//! pieces a run needs.
//!
//! The `method` decides the architectural switches (graph branch,
//! distillation, entropy term, replay); the sections hold everything else.
//! Resolution fails loudly on contradictions like replay under a non-replay
//! method instead of silently reinterpreting them.

use crate::data::{
    build_schedule, load_external_corpus, random_cooccurrence, resize_image, Corpus, LabeledImage,
    SyntheticCorpusSpec, TaskSchedule,
};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::MetricOptions;
use crate::model::ModelConfig;
use crate::trainer::{LrSchedule, TrainConfig};
use crate::util::derive_seed;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

const TAG_COOCCURRENCE: u64 = 0xC0;
const TAG_STYLE: u64 = 0x57;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// New-class supervision only; forgets freely. Lower anchor.
    FineTuning,
    /// Adds output distillation against the previous model.
    BaselineKd,
    /// Distillation plus the graph branch and the entropy regularizer.
    Csc,
    /// Csc plus an exemplar replay buffer.
    CscR,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::FineTuning => "fine-tuning",
            Method::BaselineKd => "baseline-kd",
            Method::Csc => "csc",
            Method::CscR => "csc-r",
        }
    }
}

fn default_name() -> String {
    "experiment".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub method: Method,
    pub seed: u64,
    /// Defaults to `runs/<name>`.
    pub output_dir: Option<PathBuf>,
    /// Dump per-class activation-mask images for a few test samples after
    /// each task.
    pub export_cams: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            name: default_name(),
            method: Method::Csc,
            seed: 0,
            output_dir: None,
            export_cams: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub total_classes: usize,
    pub base_classes: usize,
    pub increment: usize,
    /// None keeps the identity class order.
    pub class_order_seed: Option<u64>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            total_classes: 12,
            base_classes: 4,
            increment: 2,
            class_order_seed: None,
        }
    }
}

impl ScenarioSection {
    pub fn schedule(&self) -> Result<TaskSchedule> {
        build_schedule(
            self.total_classes,
            self.base_classes,
            self.increment,
            self.class_order_seed,
        )
    }
}

fn default_image_size() -> (usize, usize) {
    (32, 32)
}
fn default_train_samples() -> usize {
    5000
}
fn default_test_samples() -> usize {
    1000
}
fn default_noise() -> f64 {
    0.05
}
fn default_corpus_seed() -> u64 {
    7
}
fn default_pair_density() -> f64 {
    0.35
}
fn default_marginal_range() -> (f64, f64) {
    (0.10, 0.35)
}
fn default_strength() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorpusSection {
    /// Generated blob corpus with a random feasible co-occurrence structure.
    Synthetic {
        #[serde(default = "default_image_size")]
        image_size: (usize, usize),
        #[serde(default = "default_train_samples")]
        train_samples: usize,
        #[serde(default = "default_test_samples")]
        test_samples: usize,
        #[serde(default = "default_noise")]
        noise_level: f64,
        /// Fixes labels, images, and the co-occurrence structure;
        /// independent of the run seed so methods share one corpus.
        #[serde(default = "default_corpus_seed")]
        corpus_seed: u64,
        #[serde(default = "default_pair_density")]
        pair_density: f64,
        #[serde(default = "default_marginal_range")]
        marginal_range: (f64, f64),
        #[serde(default = "default_strength")]
        correlation_strength: f64,
    },
    /// Image corpus described by manifest files on disk.
    Manifest {
        train_manifest: PathBuf,
        test_manifest: PathBuf,
        /// Resize every image to (height, width) when set.
        #[serde(default)]
        image_size: Option<(usize, usize)>,
    },
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection::Synthetic {
            image_size: default_image_size(),
            train_samples: default_train_samples(),
            test_samples: default_test_samples(),
            noise_level: default_noise(),
            corpus_seed: default_corpus_seed(),
            pair_density: default_pair_density(),
            marginal_range: default_marginal_range(),
            correlation_strength: default_strength(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    /// Exemplars kept per class; only the csc-r method may set this.
    pub buffer_per_class: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs_per_task: t.epochs_per_task,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_schedule: t.lr_schedule,
            weight_decay: t.weight_decay,
            buffer_per_class: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub scenario: ScenarioSection,
    pub corpus: CorpusSection,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub metrics: MetricOptions,
}

/// Everything a run needs, with the method folded into the configs.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedRun {
    pub name: String,
    pub method: Method,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub export_cams: bool,
    pub schedule: TaskSchedule,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub metrics: MetricOptions,
}

impl ExperimentConfig {
    pub fn resolve(&self) -> Result<ResolvedRun> {
        let name = self.run.name.trim();
        if name.is_empty()
            || !name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(Error::config(format!(
                "run name {:?} must be non-empty and limited to letters, digits, '-', '_', '.'",
                self.run.name
            )));
        }

        let method = self.run.method;
        let (use_graph, use_kd, use_max_entropy, replay) = match method {
            Method::FineTuning => (false, false, false, false),
            Method::BaselineKd => (false, true, false, false),
            Method::Csc => (true, true, true, false),
            Method::CscR => (true, true, true, true),
        };
        if use_graph && !self.model.use_graph {
            return Err(Error::config(format!(
                "method {:?} needs the graph branch; remove use_graph = false from [model]",
                method.label()
            )));
        }
        if replay && self.train.buffer_per_class == 0 {
            return Err(Error::config(
                "method \"csc-r\" needs buffer_per_class >= 1 in [train]",
            ));
        }
        if !replay && self.train.buffer_per_class > 0 {
            return Err(Error::config(format!(
                "buffer_per_class = {} conflicts with method {:?}; replay belongs to \
                 \"csc-r\" (or set buffer_per_class = 0)",
                self.train.buffer_per_class,
                method.label()
            )));
        }

        let schedule = self.scenario.schedule()?;
        let model = ModelConfig {
            use_graph,
            ..self.model.clone()
        };
        model.validate()?;
        self.loss.validate()?;
        if !(self.metrics.threshold > 0.0 && self.metrics.threshold < 1.0) {
            return Err(Error::config(format!(
                "metrics.threshold must lie in (0, 1), got {}",
                self.metrics.threshold
            )));
        }
        if let CorpusSection::Synthetic {
            train_samples,
            test_samples,
            ..
        } = &self.corpus
        {
            if *train_samples == 0 || *test_samples == 0 {
                return Err(Error::config(
                    "synthetic corpus needs train_samples >= 1 and test_samples >= 1",
                ));
            }
        }

        let train = TrainConfig {
            epochs_per_task: self.train.epochs_per_task,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            lr_schedule: self.train.lr_schedule,
            weight_decay: self.train.weight_decay,
            seed: self.run.seed,
            buffer_per_class: self.train.buffer_per_class,
            use_cigcn: use_graph,
            use_kd,
            use_max_entropy,
            cm_mode: model.cm_mode,
            debug_ag_trace: false,
        };
        train.validate()?;

        let out_dir = self
            .run
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(name));

        Ok(ResolvedRun {
            name: name.to_string(),
            method,
            seed: self.run.seed,
            out_dir,
            export_cams: self.run.export_cams,
            schedule,
            model,
            train,
            loss: self.loss,
            metrics: self.metrics,
        })
    }

    /// Materializes the corpus and checks it against the scenario.
    pub fn build_corpus(&self) -> Result<Corpus> {
        let total = self.scenario.total_classes;
        let corpus = match &self.corpus {
            CorpusSection::Synthetic {
                image_size,
                train_samples,
                test_samples,
                noise_level,
                corpus_seed,
                pair_density,
                marginal_range,
                correlation_strength,
            } => {
                let cooccurrence = random_cooccurrence(
                    total,
                    *pair_density,
                    *marginal_range,
                    *correlation_strength,
                    derive_seed(*corpus_seed, &[TAG_COOCCURRENCE]),
                );
                let spec = SyntheticCorpusSpec::with_default_prototypes(
                    total,
                    *image_size,
                    cooccurrence,
                    *noise_level,
                    *train_samples,
                    *test_samples,
                    derive_seed(*corpus_seed, &[TAG_STYLE]),
                );
                crate::data::generate_corpus(&spec, *corpus_seed)?
            }
            CorpusSection::Manifest {
                train_manifest,
                test_manifest,
                image_size,
            } => {
                let (classes, train) = load_external_corpus(train_manifest)?;
                let (classes_test, test) = load_external_corpus(test_manifest)?;
                if classes != classes_test {
                    return Err(Error::config(format!(
                        "train and test manifests disagree on classes: {classes:?} vs {classes_test:?}"
                    )));
                }
                let fit = |samples: Vec<LabeledImage>| -> Vec<LabeledImage> {
                    match image_size {
                        None => samples,
                        Some((h, w)) => samples
                            .into_iter()
                            .map(|s| LabeledImage {
                                image: Arc::new(resize_image(&s.image, *h, *w)),
                                labels: s.labels,
                            })
                            .collect(),
                    }
                };
                Corpus {
                    classes,
                    train: fit(train),
                    test: fit(test),
                }
            }
        };
        if corpus.classes.len() != total {
            return Err(Error::config(format!(
                "corpus has {} classes but the scenario declares {total}",
                corpus.classes.len()
            )));
        }
        Ok(corpus)
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ingest(path, format!("cannot read config: {e}")))?;
    toml::from_str(&text).map_err(|e| Error::ingest(path, format!("invalid config: {e}")))
}

/// `MLCIL_SEED` overrides the run seed, `MLCIL_OUT_DIR` the output
/// directory. Applied by `run_experiment` before resolution.
pub fn apply_env_overrides(cfg: &mut ExperimentConfig) -> Result<()> {
    apply_env_overrides_from(cfg, &|key| std::env::var(key).ok())
}

pub fn apply_env_overrides_from(
    cfg: &mut ExperimentConfig,
    lookup: &dyn Fn(&str) -> Option<String>,
) -> Result<()> {
    if let Some(raw) = lookup("MLCIL_SEED") {
        cfg.run.seed = raw.trim().parse().map_err(|_| {
            Error::config(format!("MLCIL_SEED must be an unsigned integer, got {raw:?}"))
        })?;
    }
    if let Some(raw) = lookup("MLCIL_OUT_DIR") {
        if raw.trim().is_empty() {
            return Err(Error::config("MLCIL_OUT_DIR is set but empty"));
        }
        cfg.run.output_dir = Some(PathBuf::from(raw));
    }
    Ok(())
}
