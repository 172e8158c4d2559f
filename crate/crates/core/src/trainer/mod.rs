//! Joint-objective training, schedules, evaluation and toy data.

mod config;
mod data;
mod eval;
mod metrics;
mod optim;
mod train;

pub use config::{TrainConfig, TrainMode};
pub use data::{filler_types, make_toy_corpus, Corpus, ToySpec, ToyTask, Vocab, FILLER_RATE};
pub use eval::{evaluate, finetune_l0drop, EvalReport, FinetuneOutcome, GateSource};
pub use metrics::{ngram_overlap, token_accuracy};
pub use optim::{clip_global_norm, lambda_schedule, lr_schedule, Adam};
pub use train::{joint_loss, BatchStats, LogRecord, Trainer};

#[cfg(test)]
mod tests;
