//! Config-driven end-to-end experiments: one TOML file describes the
//! scenario, corpus, model, and training method; running it yields a
//! deterministic artifact tree plus a summary that can be compared across
//! methods.

mod compare;
mod config;
mod presets;
mod runner;

pub use compare::{compare_summaries, load_summary, Comparison};
pub use config::{
    apply_env_overrides, apply_env_overrides_from, load_config, CorpusSection, ExperimentConfig,
    Method, ResolvedRun, RunSection, ScenarioSection, TrainSection,
};
pub use presets::{benchmark_b4c2, smoke};
pub use runner::{execute_run, run_experiment, RunOutcome, RunSummary};
