//! Masked-LM and next-sentence pretraining.

pub mod checkpoint;
pub mod corpus;
pub mod heads;
pub mod masking;
pub mod schedule;
pub mod trainer;
pub mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use corpus::{make_nsp_pairs, sample_pair, truncate_pair, Corpus, NspLabel, NspPair};
pub use heads::{cls_rows, mlm_loss, nsp_loss, HeadLoss};
pub use masking::{apply_mlm_mask, frame_pair, make_example, MaskedSequence, PretrainExample};
pub use schedule::LrSchedule;
pub use trainer::{pretrain_run, EvalMetrics, Pretrainer, RunSummary, StepMetrics, TrainConfig};
pub use vocab::{build_vocab, Vocabulary, RESERVED};
