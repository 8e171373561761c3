//! Ready-made experiment configurations.

use super::config::{
    CorpusSection, ExperimentConfig, Method, RunSection, ScenarioSection, TrainSection,
};
use crate::model::ModelConfig;

/// Minutes-scale benchmark: 12 classes learned as a base task of 4 plus four
/// increments of 2, on a generated corpus with strong pairwise label
/// structure. All methods share the corpus because its seed is fixed here.
pub fn benchmark_b4c2(method: Method, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.run = RunSection {
        name: format!("{}-s{seed}", method.label()),
        method,
        seed,
        output_dir: None,
        export_cams: false,
    };
    cfg.scenario = ScenarioSection {
        total_classes: 12,
        base_classes: 4,
        increment: 2,
        class_order_seed: None,
    };
    cfg.corpus = CorpusSection::Synthetic {
        image_size: (32, 32),
        train_samples: 5000,
        test_samples: 1000,
        noise_level: 0.05,
        corpus_seed: 7,
        pair_density: 0.45,
        marginal_range: (0.12, 0.32),
        correlation_strength: 0.9,
    };
    cfg.model = ModelConfig {
        backbone_channels: vec![12, 24, 48],
        d1: 24,
        d2: 24,
        ..ModelConfig::default()
    };
    cfg.train = TrainSection {
        epochs_per_task: 8,
        batch_size: 32,
        learning_rate: 1e-3,
        buffer_per_class: if method == Method::CscR { 8 } else { 0 },
        ..TrainSection::default()
    };
    cfg
}

/// Seconds-scale end-to-end check: 4 classes over 3 tasks on a small corpus
/// with a small model.
pub fn smoke(method: Method, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.run = RunSection {
        name: format!("smoke-{}-s{seed}", method.label()),
        method,
        seed,
        output_dir: None,
        export_cams: false,
    };
    cfg.scenario = ScenarioSection {
        total_classes: 4,
        base_classes: 2,
        increment: 1,
        class_order_seed: None,
    };
    cfg.corpus = CorpusSection::Synthetic {
        image_size: (16, 16),
        train_samples: 80,
        test_samples: 40,
        noise_level: 0.03,
        corpus_seed: 5,
        pair_density: 0.5,
        marginal_range: (0.25, 0.45),
        correlation_strength: 0.8,
    };
    cfg.model = ModelConfig {
        backbone_channels: vec![6, 12],
        d1: 8,
        d2: 8,
        ..ModelConfig::default()
    };
    cfg.train = TrainSection {
        epochs_per_task: 2,
        batch_size: 16,
        learning_rate: 2e-3,
        buffer_per_class: if method == Method::CscR { 4 } else { 0 },
        ..TrainSection::default()
    };
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_for_every_method() {
        for method in [
            Method::FineTuning,
            Method::BaselineKd,
            Method::Csc,
            Method::CscR,
        ] {
            benchmark_b4c2(method, 0).resolve().unwrap();
            smoke(method, 3).resolve().unwrap();
        }
    }

    #[test]
    fn benchmark_preset_matches_its_published_scale() {
        let cfg = benchmark_b4c2(Method::Csc, 1);
        let r = cfg.resolve().unwrap();
        assert_eq!(r.schedule.num_tasks(), 5);
        assert_eq!(r.schedule.cumulative_count(5).unwrap(), 12);
        match cfg.corpus {
            CorpusSection::Synthetic {
                train_samples,
                test_samples,
                ..
            } => {
                assert_eq!(train_samples, 5000);
                assert_eq!(test_samples, 1000);
            }
            CorpusSection::Manifest { .. } => panic!("benchmark corpus is synthetic"),
        }
    }

    #[test]
    fn methods_share_the_benchmark_corpus_seed() {
        let a = benchmark_b4c2(Method::Csc, 0);
        let b = benchmark_b4c2(Method::FineTuning, 4);
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.scenario, b.scenario);
    }
}
