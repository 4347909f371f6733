//! The training loop: seeded shuffling, mini-batch optimization with the
//! combined trace + rating objective, per-epoch validation, early stopping,
//! and divergence detection.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_from_json, checkpoint_to_json};
use crate::corpus::{build_vocab, Document, Vocabulary};
use crate::density::{trace_loss, DensityMatrix};
use crate::error::{Error, Result};
use crate::head::{forward, rating_loss, total_loss, LossWeights, Model};
use crate::numerics::{Optimizer, Tape, Tensor};

use super::config::TrainConfig;
use super::data::{evaluate_mae, CorpusSplits, DocAssembler};

/// XOR masks deriving independent RNG streams from one seed, so that
/// shuffling and dropout consume from separate generators: adding an epoch
/// of shuffling must never shift the dropout pattern and vice versa.
const SHUFFLE_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
const DROPOUT_STREAM: u64 = 0x5851_F42D_4C95_7F2D;

/// One epoch's scores, emitted as one JSON line in the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Mean optimized objective (alpha-weighted trace + rating loss).
    pub train_loss: f64,
    /// Mean squared rating error alone, unweighted.
    pub train_mse: f64,
    /// MAE on the validation split, target review excluded per example.
    pub validation_mae: f64,
}

/// What a training run produced, before the test set is touched.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch (1-based) whose model snapshot won on validation MAE.
    pub best_epoch: usize,
    pub best_validation_mae: f64,
    /// Lossless checkpoint of the winning snapshot.
    pub checkpoint_json: String,
}

/// Everything `train` hands back: the report, the restored best model, its
/// vocabulary, and the raw checkpoint.
#[derive(Debug)]
pub struct TrainOutcome {
    pub report: MetricsReport,
    pub model: Model,
    pub vocab: Vocabulary,
    pub checkpoint_json: String,
}

/// Final training report: per-epoch curves plus the one test-set number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_validation_mae: f64,
    /// MAE of the best-validation snapshot on the test split; computed
    /// exactly once per run.
    pub test_mae: f64,
}

impl MetricsReport {
    /// Per-epoch records as JSON lines (one compact object per epoch).
    pub fn epochs_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for em in &self.epochs {
            out.push_str(&serde_json::to_string(em)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// The whole report as pretty JSON. Contains no timestamps or other
    /// ambient state: two runs with the same seed produce identical bytes.
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct Example {
    user_doc: Document,
    item_doc: Document,
    user_id: String,
    item_id: String,
    rating: f64,
}

/// Name the first thing that went non-finite, for the abort message:
/// a parameter if one blew up on the last update, otherwise the first
/// offending op on the tape, otherwise the loss itself.
fn first_non_finite_report(named: &[(String, Tensor)], tape: &Tape) -> String {
    for (name, t) in named {
        if t.data().iter().any(|v| !v.is_finite()) {
            return format!("training aborted: parameter {} went non-finite", name);
        }
    }
    match tape.first_non_finite() {
        Some((idx, kind)) => {
            format!("training aborted: {} op (node {}) produced a non-finite value", kind, idx)
        }
        None => "training aborted: loss is non-finite".to_string(),
    }
}

/// Train a model on `splits.train`, validating each epoch.
///
/// Deterministic for a fixed config: parameter init, shuffling, and dropout
/// each draw from their own stream seeded from `config.seed`. The returned
/// checkpoint is the snapshot of the epoch with the lowest validation MAE
/// (ties keep the earlier epoch). Training documents exclude the example's
/// own review, exactly like evaluation — the model never reads the review
/// whose rating it is predicting.
///
/// A non-finite loss aborts with [`Error::NonFinite`] naming the first
/// offending tensor. With `patience: Some(p)`, training stops after `p`
/// consecutive epochs without improvement.
pub fn fit(config: &TrainConfig, splits: &CorpusSplits) -> Result<FitResult> {
    config.validate()?;
    if splits.validation.is_empty() {
        return Err(Error::Empty("fit: validation split is empty".into()));
    }

    let vocab = build_vocab(&splits.train, config.min_token_count);
    let assembler =
        DocAssembler::new(&vocab, &splits.train, config.max_review_words, config.max_reviews);

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new_random(
        &config.model_config(),
        vocab.len(),
        assembler.doc_len(),
        &mut init_rng,
    )?;
    if model.uses_distributions() {
        let users: Vec<&str> = assembler.user_ids().collect();
        let items: Vec<&str> = assembler.item_ids().collect();
        model.register_users(users)?;
        model.register_items(items)?;
    }

    // Warm start: the head's output bias begins at the train-mean rating,
    // so early epochs fit residuals instead of first crawling from zero up
    // to the rating scale (ratings live in [1, 5], far from the origin).
    let mean_rating =
        splits.train.iter().map(|r| r.rating).sum::<f64>() / splits.train.len() as f64;
    let (_, out_bias) = model.stack.layer(model.stack.n_layers() - 1);
    out_bias.set_data(vec![mean_rating])?;

    // Assemble each example's documents once; they are fixed across epochs.
    let examples: Vec<Example> = splits
        .train
        .iter()
        .map(|rec| Example {
            user_doc: assembler.user_doc(&rec.user_id, Some(&rec.review_id)),
            item_doc: assembler.item_doc(&rec.item_id, Some(&rec.review_id)),
            user_id: rec.user_id.clone(),
            item_id: rec.item_id.clone(),
            rating: rec.rating,
        })
        .collect();

    let named = model.named_parameters();
    let params: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate)?;
    let weights = LossWeights::new(config.alpha)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DROPOUT_STREAM);

    let mut epochs: Vec<EpochMetrics> = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut best_ckpt: Option<String> = None;
    let mut stall = 0usize;
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut mse_sum = 0.0;
        let mut seen = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let mut preds: Vec<Tensor> = Vec::with_capacity(chunk.len());
            let mut ratings: Vec<f64> = Vec::with_capacity(chunk.len());
            // The trace penalty covers each distinct user/item once per
            // batch, through its first occurrence (order fixed by the
            // seeded shuffle, so this stays deterministic).
            let mut user_rhos: Vec<DensityMatrix> = Vec::new();
            let mut item_rhos: Vec<DensityMatrix> = Vec::new();
            let mut seen_users: BTreeSet<&str> = BTreeSet::new();
            let mut seen_items: BTreeSet<&str> = BTreeSet::new();

            for &idx in chunk {
                let ex = &examples[idx];
                let out =
                    forward(&mut tape, &model, &ex.user_doc, &ex.item_doc, true, &mut dropout_rng)?;
                preds.push(out.prediction.clone());
                ratings.push(ex.rating);
                if let Some(rho) = out.rho_u {
                    if seen_users.insert(ex.user_id.as_str()) {
                        user_rhos.push(rho);
                    }
                }
                if let Some(rho) = out.rho_v {
                    if seen_items.insert(ex.item_id.as_str()) {
                        item_rhos.push(rho);
                    }
                }
            }

            let n_batch = preds.len();
            let predictions = tape.concat(&preds)?;
            let truths = Tensor::from_vec(&[n_batch], ratings)?;
            let l_rating = rating_loss(&mut tape, &predictions, &truths)?;
            let loss = if user_rhos.is_empty() {
                // No density matrices (conv_mutual): no trace term, the
                // objective is the alpha-weighted rating loss alone.
                let zero = Tensor::from_vec(&[1], vec![0.0])?;
                total_loss(&mut tape, &zero, &l_rating, &weights)?
            } else {
                let l_trace = trace_loss(&mut tape, &user_rhos, &item_rhos)?;
                total_loss(&mut tape, &l_trace, &l_rating, &weights)?
            };

            let batch_loss = loss.item();
            let batch_mse = l_rating.item();
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(first_non_finite_report(&named, &tape)));
            }
            for p in &params {
                p.zero_grad();
            }
            tape.backward(&loss)?;
            optimizer.step(&params)?;

            loss_sum += batch_loss * n_batch as f64;
            mse_sum += batch_mse * n_batch as f64;
            seen += n_batch;
        }

        let validation_mae = evaluate_mae(&model, &assembler, &splits.validation, config.clip_eval)?;
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_mse: mse_sum / seen as f64,
            validation_mae,
        });

        if validation_mae < best_val {
            best_val = validation_mae;
            best_epoch = epoch;
            best_ckpt = Some(checkpoint_to_json(&model, &vocab)?);
            stall = 0;
        } else {
            stall += 1;
            if let Some(p) = config.patience {
                if stall >= p {
                    break;
                }
            }
        }
    }

    let checkpoint_json = match best_ckpt {
        Some(c) => c,
        // Unreachable in practice — the first epoch always improves on
        // +infinity — but a final snapshot beats a panic.
        None => checkpoint_to_json(&model, &vocab)?,
    };
    Ok(FitResult { epochs, best_epoch, best_validation_mae: best_val, checkpoint_json })
}

/// Full training protocol: fit on train, select by validation MAE, then
/// score the winning snapshot on the test split exactly once.
pub fn train(config: &TrainConfig, splits: &CorpusSplits) -> Result<TrainOutcome> {
    if splits.test.is_empty() {
        return Err(Error::Empty("train: test split is empty".into()));
    }
    let fitted = fit(config, splits)?;
    let (model, vocab) = checkpoint_from_json(&fitted.checkpoint_json)?;
    let assembler =
        DocAssembler::new(&vocab, &splits.train, config.max_review_words, config.max_reviews);
    let test_mae = evaluate_mae(&model, &assembler, &splits.test, config.clip_eval)?;
    Ok(TrainOutcome {
        report: MetricsReport {
            config: config.clone(),
            epochs: fitted.epochs,
            best_epoch: fitted.best_epoch,
            best_validation_mae: fitted.best_validation_mae,
            test_mae,
        },
        model,
        vocab,
        checkpoint_json: fitted.checkpoint_json,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::DistMode;
    use crate::trainer::testutil::{toy_config, toy_splits};

    #[test]
    fn toy_corpus_trains_to_low_mse() {
        // 4 users x 4 items with ratings planted on sentiment tokens: the
        // full model must essentially memorize the train split within 300
        // epochs at the paper's smallest grid learning rate.
        let mut cfg = toy_config();
        cfg.epochs = 300;
        cfg.learning_rate = 0.001;
        cfg.batch_size = 1;
        cfg.patience = None;
        let splits = toy_splits();
        let fitted = fit(&cfg, &splits).unwrap();
        let last = fitted.epochs.last().unwrap();
        assert!(
            last.train_mse < 0.05,
            "train MSE after {} epochs: {}",
            fitted.epochs.len(),
            last.train_mse
        );
    }

    #[test]
    fn same_seed_gives_byte_identical_reports_and_checkpoints() {
        let mut cfg = toy_config();
        cfg.epochs = 6;
        cfg.batch_size = 3;
        cfg.dropout_rate = 0.4; // exercise the dropout stream too
        let splits = toy_splits();
        let a = train(&cfg, &splits).unwrap();
        let b = train(&cfg, &splits).unwrap();
        assert_eq!(a.report.summary_json().unwrap(), b.report.summary_json().unwrap());
        assert_eq!(a.report.epochs_jsonl().unwrap(), b.report.epochs_jsonl().unwrap());
        assert_eq!(a.checkpoint_json, b.checkpoint_json);

        // A different seed must actually change the outcome, or the
        // determinism above would be vacuous.
        let mut other = cfg.clone();
        other.seed = cfg.seed + 1;
        let c = train(&other, &splits).unwrap();
        assert_ne!(a.checkpoint_json, c.checkpoint_json);
    }

    #[test]
    fn alpha_one_free_mode_drives_trace_loss_below_threshold() {
        // With alpha = 1 the optimized objective is exactly the trace
        // penalty; in free mode the distributions start far from unit
        // trace, and 200 full-batch steps must push the penalty under 1e-3.
        let mut cfg = toy_config();
        cfg.alpha = 1.0;
        cfg.dist_mode = DistMode::Free;
        cfg.epochs = 200;
        cfg.batch_size = 64; // larger than the train split: full batch
        cfg.learning_rate = 0.01;
        cfg.patience = None;
        let splits = toy_splits();
        let fitted = fit(&cfg, &splits).unwrap();
        assert_eq!(fitted.epochs.len(), 200);
        let first = fitted.epochs.first().unwrap();
        let last = fitted.epochs.last().unwrap();
        assert!(first.train_loss > 1e-3, "penalty starts at {}", first.train_loss);
        assert!(last.train_loss < 1e-3, "penalty after 200 steps: {}", last.train_loss);
    }

    #[test]
    fn exploding_run_aborts_with_named_non_finite() {
        let mut cfg = toy_config();
        // Plain SGD at an absurd rate compounds multiplicatively and
        // overflows within a few steps. (Adam would not: its normalized
        // step moves parameters only linearly in the learning rate.)
        cfg.optimizer = crate::numerics::OptimizerKind::Sgd;
        cfg.learning_rate = 1e8; // free value: manual mode has no grid check
        cfg.epochs = 50;
        cfg.patience = None;
        let splits = toy_splits();
        match fit(&cfg, &splits) {
            Err(Error::NonFinite(msg)) => {
                assert!(msg.contains("training aborted"), "unexpected message: {}", msg)
            }
            other => panic!("expected a non-finite abort, got {:?}", other.map(|f| f.best_epoch)),
        }
    }

    #[test]
    fn early_stopping_and_best_epoch_bookkeeping() {
        // A deliberately unstable learning rate makes validation MAE bounce,
        // so a 2-epoch patience must cut the run short.
        let mut cfg = toy_config();
        cfg.learning_rate = 5.0;
        cfg.epochs = 40;
        cfg.patience = Some(2);
        let splits = toy_splits();
        let fitted = fit(&cfg, &splits).unwrap();
        assert!(
            fitted.epochs.len() < cfg.epochs,
            "expected an early stop, ran all {} epochs",
            fitted.epochs.len()
        );

        // The recorded best must be the (first) minimum of the curve.
        let min = fitted
            .epochs
            .iter()
            .map(|e| e.validation_mae)
            .min_by(f64::total_cmp)
            .unwrap();
        assert_eq!(fitted.best_validation_mae, min);
        let first_argmin =
            fitted.epochs.iter().position(|e| e.validation_mae == min).unwrap() + 1;
        assert_eq!(fitted.best_epoch, first_argmin);
    }

    #[test]
    fn train_scores_the_validation_winner_on_test() {
        let mut cfg = toy_config();
        cfg.epochs = 8;
        let splits = toy_splits();
        let outcome = train(&cfg, &splits).unwrap();
        assert!(outcome.report.test_mae.is_finite());
        assert_eq!(outcome.report.config, cfg);
        assert_eq!(outcome.report.best_epoch, {
            let min = outcome
                .report
                .epochs
                .iter()
                .map(|e| e.validation_mae)
                .min_by(f64::total_cmp)
                .unwrap();
            outcome.report.epochs.iter().position(|e| e.validation_mae == min).unwrap() + 1
        });

        // Reproduce the test score from the checkpoint by hand: the report
        // number must come from the best snapshot, not the final model.
        let (model, vocab) = checkpoint_from_json(&outcome.checkpoint_json).unwrap();
        let asm =
            DocAssembler::new(&vocab, &splits.train, cfg.max_review_words, cfg.max_reviews);
        let expect = evaluate_mae(&model, &asm, &splits.test, cfg.clip_eval).unwrap();
        assert_eq!(outcome.report.test_mae.to_bits(), expect.to_bits());

        // The metrics log has one line per epoch and parses back.
        let jsonl = outcome.report.epochs_jsonl().unwrap();
        let lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(lines.len(), outcome.report.epochs.len());
        let first: EpochMetrics = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first, outcome.report.epochs[0]);
        let parsed: MetricsReport =
            serde_json::from_str(&outcome.report.summary_json().unwrap()).unwrap();
        assert_eq!(parsed, outcome.report);
    }

    #[test]
    fn fit_requires_validation_examples() {
        let mut splits = toy_splits();
        splits.validation.clear();
        let cfg = toy_config();
        assert!(matches!(fit(&cfg, &splits), Err(Error::Empty(_))));
    }

    #[test]
    fn train_requires_test_examples() {
        let mut splits = toy_splits();
        splits.test.clear();
        let cfg = toy_config();
        assert!(matches!(train(&cfg, &splits), Err(Error::Empty(_))));
    }
}
