//! Review-corpus handling: dataset parsing, train/validation/test splitting,
//! tokenization, vocabulary construction, and per-owner document assembly.
//!
//! The central preprocessing contract: all reviews of a user (or item) are
//! concatenated into one document of fixed-size review slots — each review
//! truncated/padded to `max_review_words` tokens and followed by one DELIM
//! token — so every document has exactly
//! `L_max = max_reviews * (max_review_words + 1)` positions. When a rating
//! is being *predicted* for a (user, item) pair, the review that pair wrote
//! is excluded from both documents (no ground-truth leakage).

mod cache;
mod document;
mod records;
mod vocab;

pub use cache::{load_document_cache, save_document_cache, DocumentCache};
pub use document::{assemble_document, l_max, Document, DocumentBatch};
pub use records::{
    group_by_item, group_by_user, parse_dataset, parse_reader, split_dataset, DatasetFormat,
    ParseOutcome, ReviewRecord,
};
pub use vocab::{build_vocab, tokenize, Vocabulary, DELIM_ID, DELIM_TOKEN, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};
