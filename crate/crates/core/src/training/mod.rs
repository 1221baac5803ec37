//! Joint training of the language model and retriever.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod schedule;
mod trainer;

pub use loss::{lambda_pairs, lambdarank_loss, lm_loss, retrieval_hinges, RankPair};
pub use optim::{AdaBelief, OptimizerState, StepReport};
pub use schedule::{SamplingSchedule, Schedules};
pub use trainer::{
    bm25_neighbors, doc_for_step, scheduled_sample, step_rng, training_loss, LossBreakdown, LossVars, TrainConfig,
    TrainDoc, TrainState,
};

#[cfg(test)]
mod tests;
