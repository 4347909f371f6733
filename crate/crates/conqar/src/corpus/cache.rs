//! Binary cache for assembled documents.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "CQDC"
//! version 1 byte   (currently 1)
//! max_review_words u32
//! max_reviews      u32
//! vocab_len        u32
//! user document count u32, then that many documents
//! item document count u32, then that many documents
//!
//! document := owner-id length u32 | owner-id bytes (UTF-8)
//!           | n_reviews u32 | empty u8
//!           | position count u32 | token ids (u32 each) | mask bytes (0/1)
//! ```
//!
//! The geometry fields let a consumer reject a cache built with different
//! preprocessing parameters instead of silently training on the wrong
//! documents.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corpus::document::Document;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CQDC";
const VERSION: u8 = 1;

/// A loaded cache: both document sides plus the geometry they were built
/// with.
#[derive(Debug, PartialEq)]
pub struct DocumentCache {
    pub max_review_words: usize,
    pub max_reviews: usize,
    pub vocab_len: usize,
    pub user_docs: Vec<Document>,
    pub item_docs: Vec<Document>,
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Format(format!("document cache: value {} exceeds u32", v)))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf) as usize)
}

fn write_document<W: Write>(w: &mut W, doc: &Document) -> Result<()> {
    write_u32(w, doc.owner_id.len())?;
    w.write_all(doc.owner_id.as_bytes())?;
    write_u32(w, doc.n_reviews)?;
    w.write_all(&[doc.empty as u8])?;
    write_u32(w, doc.token_ids.len())?;
    for &id in &doc.token_ids {
        write_u32(w, id)?;
    }
    let mask_bytes: Vec<u8> = doc.mask.iter().map(|&m| m as u8).collect();
    w.write_all(&mask_bytes)?;
    Ok(())
}

fn read_document<R: Read>(r: &mut R) -> Result<Document> {
    let name_len = read_u32(r)?;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let owner_id = String::from_utf8(name)
        .map_err(|_| Error::Format("document cache: owner id is not UTF-8".into()))?;
    let n_reviews = read_u32(r)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let positions = read_u32(r)?;
    let mut token_ids = Vec::with_capacity(positions);
    for _ in 0..positions {
        token_ids.push(read_u32(r)?);
    }
    let mut mask_bytes = vec![0u8; positions];
    r.read_exact(&mut mask_bytes)?;
    Ok(Document {
        owner_id,
        token_ids,
        mask: mask_bytes.into_iter().map(|b| b != 0).collect(),
        n_reviews,
        empty: flag[0] != 0,
    })
}

/// Write user and item documents with their geometry header.
pub fn save_document_cache(
    path: &Path,
    user_docs: &[Document],
    item_docs: &[Document],
    max_review_words: usize,
    max_reviews: usize,
    vocab_len: usize,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    write_u32(&mut w, max_review_words)?;
    write_u32(&mut w, max_reviews)?;
    write_u32(&mut w, vocab_len)?;
    write_u32(&mut w, user_docs.len())?;
    for doc in user_docs {
        write_document(&mut w, doc)?;
    }
    write_u32(&mut w, item_docs.len())?;
    for doc in item_docs {
        write_document(&mut w, doc)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a cache written by [`save_document_cache`].
pub fn load_document_cache(path: &Path) -> Result<DocumentCache> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "document cache: bad magic {:?} (expected {:?})",
            magic, MAGIC
        )));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(Error::Format(format!(
            "document cache: version {} not supported",
            version[0]
        )));
    }
    let max_review_words = read_u32(&mut r)?;
    let max_reviews = read_u32(&mut r)?;
    let vocab_len = read_u32(&mut r)?;
    let n_users = read_u32(&mut r)?;
    let mut user_docs = Vec::with_capacity(n_users);
    for _ in 0..n_users {
        user_docs.push(read_document(&mut r)?);
    }
    let n_items = read_u32(&mut r)?;
    let mut item_docs = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        item_docs.push(read_document(&mut r)?);
    }
    Ok(DocumentCache { max_review_words, max_reviews, vocab_len, user_docs, item_docs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::document::assemble_document;
    use crate::corpus::records::ReviewRecord;
    use crate::corpus::vocab::build_vocab;

    fn docs() -> (Vec<Document>, Vec<Document>, usize) {
        let reviews: Vec<ReviewRecord> = (0..3)
            .map(|i| ReviewRecord {
                user_id: format!("u{}", i),
                item_id: "i0".into(),
                rating: 3.0,
                text: format!("sample review text number {}", i),
                review_id: format!("r{}", i),
            })
            .collect();
        let vocab = build_vocab(&reviews, 1);
        let users: Vec<Document> = (0..3)
            .map(|i| {
                assemble_document(&format!("u{}", i), &reviews[i..i + 1], &vocab, 4, 2, None)
            })
            .collect();
        let items = vec![assemble_document("i0", &reviews, &vocab, 4, 2, None)];
        (users, items, vocab.len())
    }

    #[test]
    fn cache_round_trips() {
        let (users, items, vocab_len) = docs();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.bin");
        save_document_cache(&path, &users, &items, 4, 2, vocab_len).unwrap();
        let cache = load_document_cache(&path).unwrap();
        assert_eq!(cache.max_review_words, 4);
        assert_eq!(cache.max_reviews, 2);
        assert_eq!(cache.vocab_len, vocab_len);
        assert_eq!(cache.user_docs, users);
        assert_eq!(cache.item_docs, items);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.bin");
        std::fs::write(&path, b"NOPE\x01junkjunkjunk").unwrap();
        let err = load_document_cache(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let (users, items, vocab_len) = docs();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.bin");
        save_document_cache(&path, &users, &items, 4, 2, vocab_len).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_document_cache(&path).is_err());
    }
}
