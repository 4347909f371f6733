//! Hyperparameter grid search and the three-variant ablation runner.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::checkpoint_from_json;
use crate::error::{Error, Result};
use crate::head::Variant;

use super::config::{
    TrainConfig, GRID_ALPHA, GRID_FC_LAYERS, GRID_LEARNING_RATE, GRID_N_FILTERS, GRID_WINDOW_SIZES,
};
use super::data::{evaluate_mae, CorpusSplits, DocAssembler};
use super::fit::{fit, train, FitResult};

/// A hyperparameter search space: a base config plus one value list per
/// searched axis. Combinations are enumerated in fixed axis order
/// (window sizes, filter count, head depth, alpha, learning rate), so a
/// grid run is reproducible run to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Values shared by every combination.
    pub base: TrainConfig,
    pub window_sizes: Vec<Vec<usize>>,
    pub n_filters: Vec<usize>,
    pub fc_layers: Vec<usize>,
    pub alpha: Vec<f64>,
    pub learning_rate: Vec<f64>,
    /// When true, every combination must sit on the canonical grids
    /// ([`GridSpec::canonical`] sets this). Hand-written specs default to
    /// manual mode, where free values are allowed.
    pub enforce_grid: bool,
    /// Run combinations across threads. The report is identical either
    /// way; parallelism only changes wall-clock time.
    pub parallel: bool,
}

impl Default for GridSpec {
    fn default() -> GridSpec {
        GridSpec::canonical(TrainConfig::default())
    }
}

impl GridSpec {
    /// The full canonical search space: 4 window choices x 3 filter counts
    /// x 4 depths x 5 alphas x 4 learning rates = 960 combinations.
    pub fn canonical(base: TrainConfig) -> GridSpec {
        GridSpec {
            base,
            window_sizes: GRID_WINDOW_SIZES.iter().map(|w| w.to_vec()).collect(),
            n_filters: GRID_N_FILTERS.to_vec(),
            fc_layers: GRID_FC_LAYERS.to_vec(),
            alpha: GRID_ALPHA.to_vec(),
            learning_rate: GRID_LEARNING_RATE.to_vec(),
            enforce_grid: true,
            parallel: false,
        }
    }

    /// A single-combination space pinned to the base config's own values —
    /// the degenerate grid used to smoke-test search plumbing.
    pub fn single(base: TrainConfig) -> GridSpec {
        GridSpec {
            window_sizes: vec![base.window_sizes.clone()],
            n_filters: vec![base.n_filters],
            fc_layers: vec![base.fc_layers],
            alpha: vec![base.alpha],
            learning_rate: vec![base.learning_rate],
            enforce_grid: false,
            parallel: false,
            base,
        }
    }

    /// Parse a TOML spec.
    pub fn from_toml(text: &str) -> Result<GridSpec> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    /// Parse a JSON spec.
    pub fn from_json(text: &str) -> Result<GridSpec> {
        Ok(serde_json::from_str(text)?)
    }

    /// Load a spec file, dispatching on the `.toml` / `.json` extension.
    pub fn load(path: &Path) -> Result<GridSpec> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => GridSpec::from_toml(&text),
            Some("json") => GridSpec::from_json(&text),
            other => Err(Error::Config(format!(
                "grid file must end in .toml or .json, got {:?} ({})",
                other,
                path.display()
            ))),
        }
    }

    /// Enumerate every combination as a concrete config, in axis order.
    pub fn combinations(&self) -> Result<Vec<TrainConfig>> {
        for (axis, len) in [
            ("window_sizes", self.window_sizes.len()),
            ("n_filters", self.n_filters.len()),
            ("fc_layers", self.fc_layers.len()),
            ("alpha", self.alpha.len()),
            ("learning_rate", self.learning_rate.len()),
        ] {
            if len == 0 {
                return Err(Error::Empty(format!("grid axis {} has no values", axis)));
            }
        }
        let mut combos = Vec::with_capacity(
            self.window_sizes.len()
                * self.n_filters.len()
                * self.fc_layers.len()
                * self.alpha.len()
                * self.learning_rate.len(),
        );
        for w in &self.window_sizes {
            for &n in &self.n_filters {
                for &fc in &self.fc_layers {
                    for &a in &self.alpha {
                        for &lr in &self.learning_rate {
                            let mut cfg = self.base.clone();
                            cfg.window_sizes = w.clone();
                            cfg.n_filters = n;
                            cfg.fc_layers = fc;
                            cfg.alpha = a;
                            cfg.learning_rate = lr;
                            cfg.validate()?;
                            if self.enforce_grid {
                                cfg.validate_grid_values()?;
                            }
                            combos.push(cfg);
                        }
                    }
                }
            }
        }
        Ok(combos)
    }
}

/// One grid combination's outcome. A diverged run (non-finite loss during
/// training) is recorded with an infinite validation MAE instead of
/// aborting the whole search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRunRecord {
    pub config: TrainConfig,
    pub validation_mae: f64,
    pub diverged: bool,
}

/// Search outcome: all runs in enumeration order, the winner, and the one
/// test-set score of the winner's best snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridReport {
    pub runs: Vec<GridRunRecord>,
    /// Index into `runs` of the winning combination.
    pub best_index: usize,
    pub best_config: TrainConfig,
    pub best_validation_mae: f64,
    /// Test MAE of the winner alone; losing combinations never touch the
    /// test split.
    pub test_mae: f64,
}

impl GridReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn run_one(cfg: &TrainConfig, splits: &CorpusSplits) -> Result<(f64, bool, Option<FitResult>)> {
    match fit(cfg, splits) {
        Ok(fitted) => Ok((fitted.best_validation_mae, false, Some(fitted))),
        // Divergence is a legitimate grid outcome (think learning rate
        // 0.1 on a hard corpus): score it as infinitely bad and move on.
        Err(Error::NonFinite(_)) => Ok((f64::INFINITY, true, None)),
        Err(other) => Err(other),
    }
}

/// Run every combination, pick the lowest validation MAE (first wins ties),
/// and score only that winner on the test split.
pub fn grid_search(spec: &GridSpec, splits: &CorpusSplits) -> Result<GridReport> {
    if splits.test.is_empty() {
        return Err(Error::Empty("grid_search: test split is empty".into()));
    }
    let combos = spec.combinations()?;

    let outcomes: Vec<(f64, bool, Option<FitResult>)> = if spec.parallel {
        // Combinations are independent; results are collected back in
        // enumeration order, so parallel and sequential reports match.
        combos
            .par_iter()
            .map(|cfg| run_one(cfg, splits))
            .collect::<Result<Vec<_>>>()?
    } else {
        let mut v = Vec::with_capacity(combos.len());
        for cfg in &combos {
            v.push(run_one(cfg, splits)?);
        }
        v
    };

    let best_index = outcomes
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.0.total_cmp(&b.0))
        .map(|(i, _)| i)
        .expect("combinations() guarantees at least one run");
    let best_fit = match &outcomes[best_index].2 {
        Some(f) => f,
        None => {
            return Err(Error::NonFinite(
                "grid_search: every combination diverged; nothing to evaluate".into(),
            ))
        }
    };

    // The single test-set touch of the whole search.
    let (model, vocab) = checkpoint_from_json(&best_fit.checkpoint_json)?;
    let best_config = combos[best_index].clone();
    let assembler = DocAssembler::new(
        &vocab,
        &splits.train,
        best_config.max_review_words,
        best_config.max_reviews,
    );
    let test_mae = evaluate_mae(&model, &assembler, &splits.test, best_config.clip_eval)?;

    let runs = combos
        .into_iter()
        .zip(&outcomes)
        .map(|(config, (mae, diverged, _))| GridRunRecord {
            config,
            validation_mae: *mae,
            diverged: *diverged,
        })
        .collect();
    Ok(GridReport {
        runs,
        best_index,
        best_config,
        best_validation_mae: outcomes[best_index].0,
        test_mae,
    })
}

/// One ablation row: a variant trained under the shared base config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Length of the fused interaction vector this variant feeds the head.
    pub fused_len: usize,
    /// Train MSE at the final epoch.
    pub final_train_mse: f64,
    pub best_validation_mae: f64,
    pub test_mae: f64,
}

/// Ablation outcome, one row per variant in fixed order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Train all three variants under one base config and seed, so the rows
/// differ only in architecture: convolution + densities without attention
/// weighting, convolution + attention without densities, and the full
/// model with both.
pub fn run_ablation(base: &TrainConfig, splits: &CorpusSplits) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(3);
    for variant in [Variant::ConvQuant, Variant::ConvMutual, Variant::Full] {
        let mut cfg = base.clone();
        cfg.variant = variant;
        let outcome = train(&cfg, splits)?;
        let final_train_mse = outcome
            .report
            .epochs
            .last()
            .map(|e| e.train_mse)
            .unwrap_or(f64::NAN);
        rows.push(AblationRow {
            variant,
            fused_len: variant.fused_len(cfg.n_filters),
            final_train_mse,
            best_validation_mae: outcome.report.best_validation_mae,
            test_mae: outcome.report.test_mae,
        });
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::testutil::{toy_config, toy_splits};

    #[test]
    fn canonical_grid_has_960_combinations() {
        let spec = GridSpec::canonical(TrainConfig::default());
        let combos = spec.combinations().unwrap();
        assert_eq!(combos.len(), 4 * 3 * 4 * 5 * 4);
        // Every combination is grid-legal, and the enumeration starts at
        // the first value of every axis and ends at the last.
        for cfg in &combos {
            cfg.validate_grid_values().unwrap();
        }
        assert_eq!(combos[0].window_sizes, vec![1]);
        assert_eq!(combos[0].learning_rate, 0.1);
        let last = combos.last().unwrap();
        assert_eq!(last.window_sizes, vec![1, 2, 3]);
        assert_eq!(last.n_filters, 150);
        assert_eq!(last.fc_layers, 4);
        assert_eq!(last.alpha, 0.9);
        assert_eq!(last.learning_rate, 0.0001);
    }

    #[test]
    fn enforced_grid_rejects_free_values() {
        let mut spec = GridSpec::canonical(TrainConfig::default());
        spec.n_filters = vec![64];
        assert!(matches!(spec.combinations(), Err(Error::Config(_))));
        // The same axis passes in manual mode.
        spec.enforce_grid = false;
        assert_eq!(spec.combinations().unwrap().len(), 4 * 1 * 4 * 5 * 4);
    }

    #[test]
    fn empty_axis_is_rejected() {
        let mut spec = GridSpec::single(toy_config());
        spec.alpha.clear();
        assert!(matches!(spec.combinations(), Err(Error::Empty(_))));
    }

    #[test]
    fn single_combination_grid_returns_it() {
        let mut base = toy_config();
        base.epochs = 3;
        let spec = GridSpec::single(base.clone());
        let splits = toy_splits();
        let report = grid_search(&spec, &splits).unwrap();
        assert_eq!(report.runs.len(), 1);
        assert_eq!(report.best_index, 0);
        assert_eq!(report.best_config, base);
        assert!(!report.runs[0].diverged);
        assert!(report.best_validation_mae.is_finite());
        assert!(report.test_mae.is_finite());
    }

    #[test]
    fn sabotaged_combination_loses_to_the_stable_one() {
        let mut base = toy_config();
        // Enough steps for the bad arm to compound past f64 range.
        base.epochs = 8;
        // SGD so the bad arm actually compounds to overflow; Adam's
        // normalized steps would keep even an absurd rate finite.
        base.optimizer = crate::numerics::OptimizerKind::Sgd;
        // Two learning rates: one sane, one that explodes the parameters
        // within an epoch. The search must survive the explosion, mark the
        // run diverged, and crown the stable config.
        let mut spec = GridSpec::single(base);
        spec.learning_rate = vec![1e8, 0.001];
        let splits = toy_splits();
        let report = grid_search(&spec, &splits).unwrap();
        assert_eq!(report.runs.len(), 2);
        assert!(report.runs[0].diverged);
        assert_eq!(report.runs[0].validation_mae, f64::INFINITY);
        assert!(!report.runs[1].diverged);
        assert_eq!(report.best_index, 1);
        assert_eq!(report.best_config.learning_rate, 0.001);
        assert!(report.test_mae.is_finite());
    }

    #[test]
    fn parallel_and_sequential_reports_match() {
        let mut base = toy_config();
        base.epochs = 2;
        let mut spec = GridSpec::single(base);
        spec.alpha = vec![0.3, 0.7];
        let splits = toy_splits();
        let sequential = grid_search(&spec, &splits).unwrap();
        spec.parallel = true;
        let parallel = grid_search(&spec, &splits).unwrap();
        assert_eq!(sequential.to_json().unwrap(), parallel.to_json().unwrap());
    }

    #[test]
    fn grid_spec_files_round_trip_with_defaults() {
        // A partial TOML spec: base table plus one overridden axis.
        let spec = GridSpec::from_toml(
            "parallel = true\nn_filters = [50]\n\n[base]\nepochs = 2\nseed = 9\n",
        )
        .unwrap();
        assert!(spec.parallel);
        assert_eq!(spec.n_filters, vec![50]);
        assert_eq!(spec.base.epochs, 2);
        assert_eq!(spec.base.seed, 9);
        // Unspecified axes fall back to the canonical grid, and
        // hand-written files stay in manual mode unless they opt in.
        assert_eq!(spec.window_sizes.len(), 4);
        assert_eq!(spec.alpha.len(), 5);

        let json = serde_json::to_string(&spec).unwrap();
        let back = GridSpec::from_json(&json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn ablation_covers_all_variants_with_shared_seed() {
        let mut base = toy_config();
        base.epochs = 4;
        let splits = toy_splits();
        let report = run_ablation(&base, &splits).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.rows[0].variant, Variant::ConvQuant);
        assert_eq!(report.rows[1].variant, Variant::ConvMutual);
        assert_eq!(report.rows[2].variant, Variant::Full);
        let n = base.n_filters;
        assert_eq!(report.rows[0].fused_len, n + 1);
        assert_eq!(report.rows[1].fused_len, 3 * n + 1);
        assert_eq!(report.rows[2].fused_len, 3 * n + 1);
        for row in &report.rows {
            assert!(row.test_mae.is_finite(), "{:?} produced a bad MAE", row.variant);
            assert!(row.final_train_mse.is_finite());
        }
        // The report serializes (it is the CLI's output format).
        report.to_json().unwrap();
    }
}
