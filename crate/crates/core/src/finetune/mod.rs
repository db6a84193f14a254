//! Classification, matching and sequence-labeling heads with their metrics.

pub mod metrics;
pub mod runner;
pub mod task;

pub use metrics::{bio_entities, f1, span_counts, span_f1, Entity, EvalReport, SpanCounts};
pub use runner::{classify, finetune_run, predictions, tag, EpochRecord, FinetuneOutcome, TaskModel};
pub use task::{parse_task_data, read_task_data, Example, Framed, Target, TaskKind, TaskSpec};
