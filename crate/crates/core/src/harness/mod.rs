//! Synthetic corpora, metrics, and experiment orchestration.

mod corpus_io;
mod eval;
mod experiment;
mod metrics;
mod report;
mod stages;
mod sweep;
mod synthetic;

pub use corpus_io::{load_corpus, read_pairs, save_corpus, write_pairs, Vocab};
pub use eval::{decode_corpus, evaluate, score, Scores};
pub use experiment::{
    extraction_stage, general_stage, prepare_data, run_experiment, run_with_corpora, Corpora, ExperimentConfig,
    ExtractionStage, GeneralStage, Method, TargetDomain, Workspace,
};
pub use metrics::{corpus_bleu, token_accuracy};
pub use report::{write_csv, MetricReport, ReportRow};
pub use stages::StageStore;
pub use sweep::{lowresource_sweep, order_sweep, sparsity_sweep, subsample};
pub use synthetic::{apply_task, gen_synthetic_domain, DomainCorpus, SyntheticDomainSpec, TaskKind};
