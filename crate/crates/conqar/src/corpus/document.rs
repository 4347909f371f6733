//! Per-owner document assembly.
//!
//! A document is a fixed grid of review slots. Each slot holds exactly
//! `max_review_words` token positions (PAD-filled when the review is
//! shorter) plus one trailing DELIM, so the document length is always
//! `L_max = max_reviews * (max_review_words + 1)` regardless of how many
//! reviews the owner actually has. Fixed slots keep position semantics
//! stable across owners, which matters because every owner learns its own
//! distribution over positions.

use crate::corpus::records::ReviewRecord;
use crate::corpus::vocab::{tokenize, Vocabulary, DELIM_ID, PAD_ID};
use crate::error::{Error, Result};

/// Document length implied by the slot geometry.
pub fn l_max(max_review_words: usize, max_reviews: usize) -> usize {
    max_reviews * (max_review_words + 1)
}

/// One assembled document (a single row of a [`DocumentBatch`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub owner_id: String,
    /// Exactly `L_max` ids.
    pub token_ids: Vec<usize>,
    /// `mask[i]` is true iff position `i` holds a real (non-PAD) token in a
    /// used review slot. DELIMs of used slots count as real; everything in
    /// unused slots is false.
    pub mask: Vec<bool>,
    /// Reviews actually packed into slots (after exclusion and truncation).
    pub n_reviews: usize,
    /// True when the owner had zero usable reviews: the row is all PAD.
    pub empty: bool,
}

impl Document {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Concatenate an owner's reviews into one fixed-length document.
///
/// * reviews are taken in input order; everything beyond `max_reviews` is
///   dropped
/// * each review is truncated to `max_review_words` tokens and padded up to
///   that length with PAD, then one DELIM is appended to close the slot
/// * the review whose id equals `exclude` is omitted *before* truncation —
///   this is the ground-truth leakage guard used at evaluation time
/// * unknown tokens map to UNK
///
/// Zero usable reviews is not an error: the result is an all-PAD row with
/// the `empty` flag set.
pub fn assemble_document(
    owner_id: &str,
    reviews: &[ReviewRecord],
    vocab: &Vocabulary,
    max_review_words: usize,
    max_reviews: usize,
    exclude: Option<&str>,
) -> Document {
    let total = l_max(max_review_words, max_reviews);
    let usable: Vec<&ReviewRecord> = reviews
        .iter()
        .filter(|r| exclude.map_or(true, |ex| r.review_id != ex))
        .take(max_reviews)
        .collect();

    if usable.is_empty() {
        return Document {
            owner_id: owner_id.to_string(),
            token_ids: vec![PAD_ID; total],
            mask: vec![false; total],
            n_reviews: 0,
            empty: true,
        };
    }

    let mut token_ids = Vec::with_capacity(total);
    let mut mask = Vec::with_capacity(total);
    for slot in 0..max_reviews {
        let used = slot < usable.len();
        if used {
            let mut toks = tokenize(&usable[slot].text);
            toks.truncate(max_review_words);
            for tok in &toks {
                let id = vocab.id(tok);
                token_ids.push(id);
                mask.push(id != PAD_ID);
            }
            for _ in toks.len()..max_review_words {
                token_ids.push(PAD_ID);
                mask.push(false);
            }
        } else {
            token_ids.extend(std::iter::repeat(PAD_ID).take(max_review_words));
            mask.extend(std::iter::repeat(false).take(max_review_words));
        }
        // Every slot is closed by a DELIM; only DELIMs of used slots count
        // as real positions.
        token_ids.push(DELIM_ID);
        mask.push(used);
    }
    debug_assert_eq!(token_ids.len(), total);

    Document {
        owner_id: owner_id.to_string(),
        token_ids,
        mask,
        n_reviews: usable.len(),
        empty: false,
    }
}

/// A batch of documents with a common geometry: token-id matrix
/// `[batch x L_max]`, mask matrix of the same shape, and the owner ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentBatch {
    pub owner_ids: Vec<String>,
    pub token_ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub l_max: usize,
}

impl DocumentBatch {
    pub fn new(l_max: usize) -> DocumentBatch {
        DocumentBatch { owner_ids: Vec::new(), token_ids: Vec::new(), mask: Vec::new(), l_max }
    }

    /// Append one document; its length must match the batch geometry.
    pub fn push(&mut self, doc: &Document) -> Result<()> {
        if doc.len() != self.l_max {
            return Err(Error::Dim(format!(
                "DocumentBatch: row for {:?} has {} positions, batch expects {}",
                doc.owner_id,
                doc.len(),
                self.l_max
            )));
        }
        self.owner_ids.push(doc.owner_id.clone());
        self.token_ids.push(doc.token_ids.clone());
        self.mask.push(doc.mask.clone());
        Ok(())
    }

    pub fn from_documents(docs: &[Document]) -> Result<DocumentBatch> {
        let l_max = docs.first().map(Document::len).ok_or_else(|| {
            Error::Empty("DocumentBatch::from_documents: no documents".into())
        })?;
        let mut batch = DocumentBatch::new(l_max);
        for doc in docs {
            batch.push(doc)?;
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.owner_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner_ids.is_empty()
    }
}
