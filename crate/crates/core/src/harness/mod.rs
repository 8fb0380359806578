//! Data, tokenization, training and evaluation loops, and the analysis
//! exports behind the `damoe` command.

pub mod compare;
pub mod data;
pub mod eval;
pub mod export;
pub mod run;
pub mod sentiment;
pub mod task;
pub mod tokenizer;
pub mod train;

pub use compare::{compare_runs, Comparison, GroupRow, RunRow};
pub use data::{ingest, ingest_text, parse_labeled, Corpus, DataSource, LabeledExample, Split, SplitChoice, TEMPEST};
pub use eval::{classification_metrics, evaluate, evaluate_model, EvalMetrics};
pub use export::{export_importance, records_to_csv, route_trace, AttentionDump, ImportanceExport, ImportanceRecord, RouteRecord};
pub use run::RunConfig;
pub use sentiment::generate_sentiment;
pub use task::{prepare, tokenizer_from_meta, Prepared, TokenData};
pub use tokenizer::{Tokenizer, TokenizerMode};
pub use train::{read_metrics, read_summary, train, RunSummary, TrainOutcome, TrainingMetrics};
