//! Training: configuration, data plumbing, the optimization loop, the MAE
//! metric, hyperparameter grid search, and the variant ablation runner.
//!
//! The protocol, end to end:
//!
//! 1. [`TrainConfig`] holds every knob; [`CorpusSplits`] holds a disjoint
//!    train/validation/test partition.
//! 2. [`fit`] builds the vocabulary from the train split alone, assembles
//!    per-example documents that exclude each example's own review, and
//!    optimizes the alpha-weighted trace + rating objective with seeded
//!    shuffle/dropout streams, validating each epoch and early-stopping on
//!    stalled validation MAE.
//! 3. [`train`] restores the best-validation snapshot and scores it on the
//!    test split exactly once, yielding a [`MetricsReport`] that serializes
//!    byte-identically across same-seed runs.
//! 4. [`grid_search`] repeats that per grid combination, selects the winner
//!    by validation MAE, and only then touches the test set; [`run_ablation`]
//!    trains the three model variants under one shared config and seed.

mod config;
mod data;
mod fit;
mod grid;

pub use config::{
    TrainConfig, GRID_ALPHA, GRID_FC_LAYERS, GRID_LEARNING_RATE, GRID_N_FILTERS,
    GRID_WINDOW_SIZES,
};
pub use data::{evaluate_mae, mae, CorpusSplits, DocAssembler};
pub use fit::{fit, train, EpochMetrics, FitResult, MetricsReport, TrainOutcome};
pub use grid::{
    grid_search, run_ablation, AblationReport, AblationRow, GridReport, GridRunRecord, GridSpec,
};
