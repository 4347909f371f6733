//! Data plumbing for training: split containers, per-example document
//! assembly, and the MAE metric.

use std::collections::{BTreeMap, HashSet};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    assemble_document, group_by_item, group_by_user, l_max, split_dataset, Document, ReviewRecord,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::head::{forward, Model};
use crate::numerics::Tape;

/// Train/validation/test partition of a review corpus.
///
/// Construction checks that no review id appears in two parts: the split
/// must be a partition, or test examples would leak into the training
/// documents.
#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub train: Vec<ReviewRecord>,
    pub validation: Vec<ReviewRecord>,
    pub test: Vec<ReviewRecord>,
}

impl CorpusSplits {
    pub fn new(
        train: Vec<ReviewRecord>,
        validation: Vec<ReviewRecord>,
        test: Vec<ReviewRecord>,
    ) -> Result<CorpusSplits> {
        if train.is_empty() {
            return Err(Error::Empty("corpus splits: train part is empty".into()));
        }
        let mut seen: HashSet<&str> = HashSet::new();
        for (part, records) in
            [("train", &train), ("validation", &validation), ("test", &test)]
        {
            for rec in records.iter() {
                if !seen.insert(rec.review_id.as_str()) {
                    return Err(Error::Config(format!(
                        "corpus splits: review id {} appears in more than one part (last seen in {})",
                        rec.review_id, part
                    )));
                }
            }
        }
        Ok(CorpusSplits { train, validation, test })
    }

    /// Shuffle and partition a record list by ratios, deterministically.
    pub fn from_records(
        records: &[ReviewRecord],
        ratios: (f64, f64, f64),
        seed: u64,
    ) -> Result<CorpusSplits> {
        let (train, validation, test) = split_dataset(records, ratios, seed)?;
        CorpusSplits::new(train, validation, test)
    }
}

/// Builds user and item documents from the *train* split only.
///
/// Holding the grouped train reviews in one place guarantees that every
/// document ever fed to the model — during training and during evaluation —
/// is assembled from training reviews alone. Validation/test text enters
/// the model only through the leakage-checked `exclude` path, i.e. never.
#[derive(Debug)]
pub struct DocAssembler<'a> {
    vocab: &'a Vocabulary,
    by_user: BTreeMap<String, Vec<ReviewRecord>>,
    by_item: BTreeMap<String, Vec<ReviewRecord>>,
    max_review_words: usize,
    max_reviews: usize,
}

impl<'a> DocAssembler<'a> {
    pub fn new(
        vocab: &'a Vocabulary,
        train_records: &[ReviewRecord],
        max_review_words: usize,
        max_reviews: usize,
    ) -> DocAssembler<'a> {
        DocAssembler {
            vocab,
            by_user: group_by_user(train_records),
            by_item: group_by_item(train_records),
            max_review_words,
            max_reviews,
        }
    }

    /// Fixed document length L produced by this assembler.
    pub fn doc_len(&self) -> usize {
        l_max(self.max_review_words, self.max_reviews)
    }

    /// Users present in the train split, in sorted order.
    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.by_user.keys().map(|s| s.as_str())
    }

    /// Items present in the train split, in sorted order.
    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.by_item.keys().map(|s| s.as_str())
    }

    /// The user's document, optionally excluding one review id (the
    /// ground-truth guard when predicting that very review). An unknown
    /// user yields an all-PAD document — the cold-start case.
    pub fn user_doc(&self, user_id: &str, exclude: Option<&str>) -> Document {
        let reviews = self.by_user.get(user_id).map(|v| v.as_slice()).unwrap_or(&[]);
        assemble_document(user_id, reviews, self.vocab, self.max_review_words, self.max_reviews, exclude)
    }

    /// Item-side twin of [`DocAssembler::user_doc`].
    pub fn item_doc(&self, item_id: &str, exclude: Option<&str>) -> Document {
        let reviews = self.by_item.get(item_id).map(|v| v.as_slice()).unwrap_or(&[]);
        assemble_document(item_id, reviews, self.vocab, self.max_review_words, self.max_reviews, exclude)
    }
}

/// Mean absolute error between two equal-length slices.
///
/// The absolute errors are sorted before summation, so the result is
/// bitwise identical under any permutation of the example order — floating
/// point addition is not associative, and an unsorted sum would differ in
/// the last ulp between runs that enumerate examples differently.
///
/// Examples: identical slices give exactly 0; predictions `[4, 2]` against
/// truths `[5, 1]` give exactly 1.
pub fn mae(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("mae: no examples".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::Dim(format!(
            "mae: {} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut errors: Vec<f64> = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t).abs())
        .collect();
    errors.sort_by(f64::total_cmp);
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Evaluate a model's MAE on a set of examples.
///
/// For each example the user and item documents are assembled with that
/// example's review excluded, the model runs in inference mode (dropout
/// off), and the absolute rating error is recorded. `clip` clamps
/// predictions to the valid rating range [1, 5] first.
///
/// The result is independent of the order of `examples` (bitwise — see
/// [`mae`]). A non-finite prediction is an error naming the offending
/// review rather than a silently poisoned mean.
pub fn evaluate_mae(
    model: &Model,
    assembler: &DocAssembler<'_>,
    examples: &[ReviewRecord],
    clip: bool,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluate_mae: no examples".into()));
    }
    let mut predictions = Vec::with_capacity(examples.len());
    let mut truths = Vec::with_capacity(examples.len());
    // Inference consumes no randomness; the rng is a signature stand-in.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for ex in examples {
        let user_doc = assembler.user_doc(&ex.user_id, Some(&ex.review_id));
        let item_doc = assembler.item_doc(&ex.item_id, Some(&ex.review_id));
        let mut tape = Tape::new();
        let out = forward(&mut tape, model, &user_doc, &item_doc, false, &mut rng)?;
        let mut pred = out.prediction.item();
        if !pred.is_finite() {
            return Err(Error::NonFinite(format!(
                "evaluate_mae: prediction for review {} is {}",
                ex.review_id, pred
            )));
        }
        if clip {
            pred = pred.clamp(1.0, 5.0);
        }
        predictions.push(pred);
        truths.push(ex.rating);
    }
    mae(&predictions, &truths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;
    use crate::head::{Model, Variant};
    use crate::trainer::testutil::{tiny_config, toy_reviews};

    fn rec(user: &str, item: &str, rating: f64, text: &str, id: &str) -> ReviewRecord {
        ReviewRecord {
            user_id: user.into(),
            item_id: item.into(),
            rating,
            text: text.into(),
            review_id: id.into(),
        }
    }

    #[test]
    fn splits_reject_duplicate_review_ids() {
        let a = rec("u0", "i0", 5.0, "love it", "r0");
        let b = rec("u1", "i1", 1.0, "bad", "r1");
        let err = CorpusSplits::new(vec![a.clone()], vec![b.clone()], vec![a.clone()]);
        assert!(matches!(err, Err(Error::Config(_))));
        CorpusSplits::new(vec![a], vec![b], vec![]).unwrap();
    }

    #[test]
    fn splits_require_training_data() {
        let a = rec("u0", "i0", 5.0, "love it", "r0");
        assert!(matches!(
            CorpusSplits::new(vec![], vec![a.clone()], vec![a]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn from_records_partitions_everything() {
        let records: Vec<ReviewRecord> = (0..10)
            .map(|i| rec(&format!("u{}", i % 3), &format!("i{}", i % 2), 3.0, "ok fine", &format!("r{}", i)))
            .collect();
        let splits = CorpusSplits::from_records(&records, (0.6, 0.2, 0.2), 7).unwrap();
        assert_eq!(splits.train.len(), 6);
        assert_eq!(splits.validation.len(), 2);
        assert_eq!(splits.test.len(), 2);
    }

    #[test]
    fn assembler_excludes_and_handles_unknown_owners() {
        let records = vec![
            rec("u0", "i0", 5.0, "alpha beta", "r0"),
            rec("u0", "i1", 1.0, "gamma delta", "r1"),
        ];
        let vocab = build_vocab(&records, 1);
        let asm = DocAssembler::new(&vocab, &records, 3, 2);
        assert_eq!(asm.doc_len(), l_max(3, 2));

        let full = asm.user_doc("u0", None);
        assert_eq!(full.n_reviews, 2);
        let without_r0 = asm.user_doc("u0", Some("r0"));
        assert_eq!(without_r0.n_reviews, 1);
        // The surviving review is r1: its first token is gamma.
        assert_eq!(without_r0.token_ids[0], vocab.id("gamma"));

        let cold = asm.user_doc("nobody", None);
        assert!(cold.empty);
        assert!(cold.mask.iter().all(|&m| !m));

        let item = asm.item_doc("i1", None);
        assert_eq!(item.n_reviews, 1);
        assert_eq!(item.token_ids[0], vocab.id("gamma"));
    }

    #[test]
    fn mae_matches_hand_arithmetic() {
        // Identical predictions: exactly zero.
        assert_eq!(mae(&[3.0, 4.0, 5.0], &[3.0, 4.0, 5.0]).unwrap(), 0.0);
        // |4-5| = 1 and |2-1| = 1, mean 1.
        assert_eq!(mae(&[4.0, 2.0], &[5.0, 1.0]).unwrap(), 1.0);
        // Mixed signs: (0.5 + 2.5) / 2 = 1.5.
        assert_eq!(mae(&[4.5, 1.5], &[4.0, 4.0]).unwrap(), 1.5);
    }

    #[test]
    fn mae_rejects_empty_and_mismatched_inputs() {
        assert!(matches!(mae(&[], &[]), Err(Error::Empty(_))));
        assert!(matches!(mae(&[1.0], &[1.0, 2.0]), Err(Error::Dim(_))));
    }

    #[test]
    fn evaluate_mae_is_order_invariant_bitwise() {
        let reviews = toy_reviews();
        let vocab = build_vocab(&reviews, 1);
        let cfg = tiny_config(Variant::Full);
        let asm = DocAssembler::new(&vocab, &reviews, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model =
            Model::new_random(&cfg.model_config(), vocab.len(), asm.doc_len(), &mut rng).unwrap();
        model.register_users(asm.user_ids()).unwrap();
        model.register_items(asm.item_ids()).unwrap();

        let forwardly = evaluate_mae(&model, &asm, &reviews, false).unwrap();
        let mut reversed = reviews.clone();
        reversed.reverse();
        let backwardly = evaluate_mae(&model, &asm, &reversed, false).unwrap();
        assert_eq!(forwardly.to_bits(), backwardly.to_bits());
        assert!(forwardly.is_finite());
    }

    #[test]
    fn evaluate_mae_clip_clamps_into_rating_range() {
        let reviews = toy_reviews();
        let vocab = build_vocab(&reviews, 1);
        let cfg = tiny_config(Variant::Full);
        let asm = DocAssembler::new(&vocab, &reviews, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model =
            Model::new_random(&cfg.model_config(), vocab.len(), asm.doc_len(), &mut rng).unwrap();
        model.register_users(asm.user_ids()).unwrap();
        model.register_items(asm.item_ids()).unwrap();

        // An untrained model predicts near zero, far below every true
        // rating, so clamping to [1, 5] must shrink the error of each
        // example by raising the prediction toward the truth.
        let raw = evaluate_mae(&model, &asm, &reviews, false).unwrap();
        let clipped = evaluate_mae(&model, &asm, &reviews, true).unwrap();
        assert!(clipped < raw, "clipped {} vs raw {}", clipped, raw);

        // And the clipped error can be reproduced by hand.
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let mut errors: Vec<f64> = Vec::new();
        for ex in &reviews {
            let ud = asm.user_doc(&ex.user_id, Some(&ex.review_id));
            let id = asm.item_doc(&ex.item_id, Some(&ex.review_id));
            let mut tape = Tape::new();
            let out = forward(&mut tape, &model, &ud, &id, false, &mut rng2).unwrap();
            errors.push((out.prediction.item().clamp(1.0, 5.0) - ex.rating).abs());
        }
        errors.sort_by(f64::total_cmp);
        let expect = errors.iter().sum::<f64>() / errors.len() as f64;
        assert_eq!(clipped.to_bits(), expect.to_bits());
    }

    #[test]
    fn evaluate_mae_rejects_empty_examples() {
        let reviews = toy_reviews();
        let vocab = build_vocab(&reviews, 1);
        let cfg = tiny_config(Variant::Full);
        let asm = DocAssembler::new(&vocab, &reviews, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model =
            Model::new_random(&cfg.model_config(), vocab.len(), asm.doc_len(), &mut rng).unwrap();
        assert!(matches!(evaluate_mae(&model, &asm, &[], false), Err(Error::Empty(_))));
    }
}
