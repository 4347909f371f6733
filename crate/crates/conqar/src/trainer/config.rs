//! Training configuration: every hyperparameter in one serializable struct.
//!
//! A [`TrainConfig`] can be built in code, deserialized from TOML or JSON
//! (every field has a default, so partial files work), and validated at two
//! levels:
//!
//! * [`TrainConfig::validate`] — basic sanity (ranges, positivity). Always
//!   enforced before training.
//! * [`TrainConfig::validate_grid_values`] — membership in the canonical
//!   hyperparameter grids used by the grid search. Only enforced when a grid
//!   search runs in grid mode; manually supplied configs may use free values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::l_max;
use crate::density::DistMode;
use crate::error::{Error, Result};
use crate::head::{ModelConfig, Variant};
use crate::numerics::{Activation, OptimizerKind};
use crate::attention::PoolKind;

/// Canonical window-size grid: single sizes 1, 2, 3 and the combination.
pub const GRID_WINDOW_SIZES: [&[usize]; 4] = [&[1], &[2], &[3], &[1, 2, 3]];
/// Canonical filter-count grid.
pub const GRID_N_FILTERS: [usize; 3] = [50, 100, 150];
/// Canonical depth grid for the fully connected head.
pub const GRID_FC_LAYERS: [usize; 4] = [1, 2, 3, 4];
/// Canonical trace-loss weight grid.
pub const GRID_ALPHA: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
/// Canonical learning-rate grid.
pub const GRID_LEARNING_RATE: [f64; 4] = [0.1, 0.01, 0.001, 0.0001];

fn default_embed_dim() -> usize {
    16
}
fn default_window_sizes() -> Vec<usize> {
    vec![1, 2, 3]
}
fn default_n_filters() -> usize {
    50
}
fn default_fc_layers() -> usize {
    1
}
fn default_dropout_rate() -> f64 {
    0.5
}
fn default_max_review_words() -> usize {
    100
}
fn default_max_reviews() -> usize {
    15
}
fn default_min_token_count() -> u64 {
    1
}
fn default_alpha() -> f64 {
    0.5
}
fn default_learning_rate() -> f64 {
    0.001
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    10
}
fn default_seed() -> u64 {
    42
}
fn default_patience() -> Option<usize> {
    Some(5)
}

/// Every knob of one training run.
///
/// Serialization note: all fields have defaults, so a config file only needs
/// to name the fields it changes. The same struct is embedded verbatim in
/// the final metrics report, which keeps reports self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Word-embedding dimension d.
    pub embed_dim: usize,
    /// Convolution window sizes; a subset of {1, 2, 3}.
    pub window_sizes: Vec<usize>,
    /// Total convolution filters n across all window sizes.
    pub n_filters: usize,
    /// Number of fully connected layers in the prediction head.
    pub fc_layers: usize,
    /// Dropout rate for hidden head layers, in [0, 1).
    pub dropout_rate: f64,
    /// Convolution activation.
    pub activation: Activation,
    /// Model variant: `full`, `conv_quant`, or `conv_mutual`.
    pub variant: Variant,
    /// Position-distribution parameterization: `softmax` or `free`.
    pub dist_mode: DistMode,
    /// Attention pooling: `mean` or `max`.
    pub pool: PoolKind,
    /// Words kept per review (w); longer reviews are truncated.
    pub max_review_words: usize,
    /// Reviews kept per user/item document (s).
    pub max_reviews: usize,
    /// Tokens rarer than this in the train split map to UNK.
    pub min_token_count: u64,
    /// Trace-loss weight in [0, 1]; the rating loss gets 1 - alpha.
    pub alpha: f64,
    /// Optimizer step size.
    pub learning_rate: f64,
    /// Mini-batch size.
    pub batch_size: usize,
    /// Maximum training epochs.
    pub epochs: usize,
    /// Seed for parameter init, shuffling, and dropout streams.
    pub seed: u64,
    /// `adam` (default) or `sgd`.
    pub optimizer: OptimizerKind,
    /// Early stopping: stop after this many epochs without validation-MAE
    /// improvement. `None` disables early stopping.
    pub patience: Option<usize>,
    /// Clamp predictions to [1, 5] at evaluation time (never in training).
    pub clip_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            embed_dim: default_embed_dim(),
            window_sizes: default_window_sizes(),
            n_filters: default_n_filters(),
            fc_layers: default_fc_layers(),
            dropout_rate: default_dropout_rate(),
            activation: Activation::Relu,
            variant: Variant::Full,
            dist_mode: DistMode::Softmax,
            pool: PoolKind::Mean,
            max_review_words: default_max_review_words(),
            max_reviews: default_max_reviews(),
            min_token_count: default_min_token_count(),
            alpha: default_alpha(),
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: default_seed(),
            optimizer: OptimizerKind::Adam,
            patience: default_patience(),
            clip_eval: false,
        }
    }
}

impl TrainConfig {
    /// Parse a TOML config.
    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    /// Parse a JSON config.
    pub fn from_json(text: &str) -> Result<TrainConfig> {
        Ok(serde_json::from_str(text)?)
    }

    /// Load a config file, dispatching on the `.toml` / `.json` extension.
    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => TrainConfig::from_toml(&text),
            Some("json") => TrainConfig::from_json(&text),
            other => Err(Error::Config(format!(
                "config file must end in .toml or .json, got {:?} ({})",
                other,
                path.display()
            ))),
        }
    }

    /// Basic sanity checks, enforced before every training run.
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.window_sizes.is_empty() {
            return Err(Error::Config("window_sizes must be nonempty".into()));
        }
        if self.n_filters == 0 {
            return Err(Error::Config("n_filters must be positive".into()));
        }
        if self.fc_layers == 0 {
            return Err(Error::Config("fc_layers must be positive".into()));
        }
        if !self.dropout_rate.is_finite() || !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !self.alpha.is_finite() || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.max_review_words == 0 {
            return Err(Error::Config("max_review_words must be positive".into()));
        }
        if self.max_reviews == 0 {
            return Err(Error::Config("max_reviews must be positive".into()));
        }
        Ok(())
    }

    /// Check that the searched hyperparameters sit on the canonical grids.
    ///
    /// Applies to exactly the five searched fields: window sizes, filter
    /// count, head depth, alpha, and learning rate. Everything else is free
    /// even in grid mode.
    pub fn validate_grid_values(&self) -> Result<()> {
        if !GRID_WINDOW_SIZES.iter().any(|w| *w == self.window_sizes.as_slice()) {
            return Err(Error::Config(format!(
                "window_sizes {:?} is not one of the grid choices {:?}",
                self.window_sizes, GRID_WINDOW_SIZES
            )));
        }
        if !GRID_N_FILTERS.contains(&self.n_filters) {
            return Err(Error::Config(format!(
                "n_filters {} is not one of the grid choices {:?}",
                self.n_filters, GRID_N_FILTERS
            )));
        }
        if !GRID_FC_LAYERS.contains(&self.fc_layers) {
            return Err(Error::Config(format!(
                "fc_layers {} is not one of the grid choices {:?}",
                self.fc_layers, GRID_FC_LAYERS
            )));
        }
        // Grid values are short decimal literals; exact equality would be
        // brittle against configs that round-trip through text, so compare
        // within a tolerance far below the grid spacing.
        if !GRID_ALPHA.iter().any(|&a| (a - self.alpha).abs() < 1e-12) {
            return Err(Error::Config(format!(
                "alpha {} is not one of the grid choices {:?}",
                self.alpha, GRID_ALPHA
            )));
        }
        if !GRID_LEARNING_RATE.iter().any(|&l| (l - self.learning_rate).abs() < 1e-12) {
            return Err(Error::Config(format!(
                "learning_rate {} is not one of the grid choices {:?}",
                self.learning_rate, GRID_LEARNING_RATE
            )));
        }
        Ok(())
    }

    /// The architectural slice of this config, as the model layer wants it.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            window_sizes: self.window_sizes.clone(),
            n_filters: self.n_filters,
            fc_layers: self.fc_layers,
            dropout_rate: self.dropout_rate,
            activation: self.activation,
            variant: self.variant,
            dist_mode: self.dist_mode,
            pool: self.pool,
        }
    }

    /// Fixed document length implied by the packing parameters.
    pub fn doc_len(&self) -> usize {
        l_max(self.max_review_words, self.max_reviews)
    }
}
