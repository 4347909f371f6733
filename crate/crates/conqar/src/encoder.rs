//! Embedding lookup and the convolutional text encoder.
//!
//! A document of L token ids becomes an embedding matrix X ∈ R^{d×L}
//! (PAD positions are structural zero columns), then a bank of 1-D
//! convolutions with window sizes drawn from {1, 2, 3} slides over the
//! position axis. All windows produce SAME-length outputs (zero columns
//! are implicitly appended on the right), so the per-window feature rows
//! stack into a single rectangular feature map C ∈ R^{n×L} no matter how
//! the window sizes are mixed.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use crate::corpus::{Document, Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Tape, Tensor};

/// The word-embedding matrix W_e, laid out `[d, |V|]` so that a token's
/// embedding is a column.
///
/// The PAD column is frozen at zero: the lookup never reads it and the
/// backward pass never writes it, so padding cannot acquire semantics.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub weights: Tensor,
    pub dim: usize,
    pub vocab_len: usize,
}

impl EmbeddingTable {
    /// Fresh table with uniform(-0.05, 0.05) entries and a zeroed PAD
    /// column.
    pub fn new_random<R: Rng + ?Sized>(
        dim: usize,
        vocab_len: usize,
        rng: &mut R,
    ) -> Result<EmbeddingTable> {
        if dim == 0 || vocab_len <= PAD_ID {
            return Err(Error::Config(format!(
                "embedding table needs positive dim and vocab, got {}x{}",
                dim, vocab_len
            )));
        }
        let mut data = vec![0.0; dim * vocab_len];
        for (i, v) in data.iter_mut().enumerate() {
            let col = i % vocab_len;
            if col != PAD_ID {
                *v = rng.gen_range(-0.05..0.05);
            }
        }
        Ok(EmbeddingTable {
            weights: Tensor::param(&[dim, vocab_len], data)?,
            dim,
            vocab_len,
        })
    }

    /// Initialize from a word2vec-format text file: first line
    /// `"<count> <dim>"`, then one `"token v1 ... vd"` line per vector.
    /// Vocabulary tokens absent from the file keep their random
    /// initialization; file tokens outside the vocabulary are ignored.
    /// Returns the table plus how many vocabulary tokens were covered.
    pub fn from_pretrained<R: Rng + ?Sized>(
        path: &Path,
        vocab: &Vocabulary,
        rng: &mut R,
    ) -> Result<(EmbeddingTable, usize)> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("embedding file: missing header line".into()))??;
        let mut parts = header.split_whitespace();
        let _count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("embedding file: bad vector count in header".into()))?;
        let dim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("embedding file: bad dimension in header".into()))?;
        let table = EmbeddingTable::new_random(dim, vocab.len(), rng)?;
        let mut covered = 0usize;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields
                .next()
                .ok_or_else(|| Error::Format("embedding file: empty vector line".into()))?;
            let values: Vec<f64> = fields
                .map(|s| {
                    s.parse::<f64>().map_err(|_| {
                        Error::Format(format!("embedding file: non-numeric value for {:?}", token))
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(Error::Format(format!(
                    "embedding file: token {:?} has {} values, header says {}",
                    token,
                    values.len(),
                    dim
                )));
            }
            let id = vocab.id(token);
            // only overwrite real vocabulary hits; UNK absorbs the rest of
            // the file and PAD stays zero
            if id != crate::corpus::UNK_ID && id != PAD_ID && vocab.token(id) == Some(token) {
                table.weights.update_data(|data| {
                    for (r, &v) in values.iter().enumerate() {
                        data[r * vocab.len() + id] = v;
                    }
                });
                covered += 1;
            }
        }
        Ok((table, covered))
    }
}

/// Look up a document's embedding matrix `X [d, L]` on the tape.
/// PAD positions become structural zero columns.
pub fn embed(tape: &mut Tape, table: &EmbeddingTable, doc: &Document) -> Result<Tensor> {
    tape.embed(&table.weights, &doc.token_ids, PAD_ID)
}

/// A bank of convolution filters grouped by window size. `n` total filters
/// are spread as evenly as possible across the requested window sizes
/// (earlier sizes take the remainder).
#[derive(Debug, Clone)]
pub struct ConvFilterBank {
    pub window_sizes: Vec<usize>,
    pub filters_per_size: Vec<usize>,
    /// One weight tensor `[filters, d, h]` per window size.
    pub weights: Vec<Tensor>,
    /// One bias vector `[filters]` per window size.
    pub biases: Vec<Tensor>,
    pub total_filters: usize,
    pub embed_dim: usize,
}

/// Split `total` filters over `k` window sizes: earlier sizes get the
/// remainder, so the sum is exact.
pub fn split_filters(total: usize, k: usize) -> Vec<usize> {
    let base = total / k;
    let extra = total % k;
    (0..k).map(|i| base + usize::from(i < extra)).collect()
}

impl ConvFilterBank {
    pub fn new_random<R: Rng + ?Sized>(
        window_sizes: &[usize],
        total_filters: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<ConvFilterBank> {
        if window_sizes.is_empty() {
            return Err(Error::Config("convolution bank: no window sizes".into()));
        }
        let mut sorted = window_sizes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != window_sizes.len() {
            return Err(Error::Config(format!(
                "convolution bank: duplicate window sizes in {:?}",
                window_sizes
            )));
        }
        if let Some(&bad) = sorted.iter().find(|&&h| !(1..=3).contains(&h)) {
            return Err(Error::Config(format!(
                "convolution bank: window size {} outside {{1, 2, 3}}",
                bad
            )));
        }
        if total_filters < sorted.len() {
            return Err(Error::Config(format!(
                "convolution bank: {} filters cannot cover {} window sizes",
                total_filters,
                sorted.len()
            )));
        }
        let filters_per_size = split_filters(total_filters, sorted.len());
        let mut weights = Vec::with_capacity(sorted.len());
        let mut biases = Vec::with_capacity(sorted.len());
        for (&h, &f) in sorted.iter().zip(&filters_per_size) {
            // Glorot-style uniform: fan_in = d*h, fan_out = f
            let limit = (6.0 / (embed_dim * h + f) as f64).sqrt();
            let data: Vec<f64> =
                (0..f * embed_dim * h).map(|_| rng.gen_range(-limit..limit)).collect();
            weights.push(Tensor::param(&[f, embed_dim, h], data)?);
            // Biases start slightly positive: an all-PAD window's
            // pre-activation is exactly the bias, and a zero bias would park
            // it on the ReLU kink where gradients are ill-defined (and
            // finite-difference checks meaningless).
            let bias: Vec<f64> = (0..f).map(|_| rng.gen_range(0.01..0.05)).collect();
            biases.push(Tensor::param(&[f], bias)?);
        }
        Ok(ConvFilterBank {
            window_sizes: sorted,
            filters_per_size,
            weights,
            biases,
            total_filters,
            embed_dim,
        })
    }

    /// All trainable tensors, window-size groups in order.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.weights.iter().chain(self.biases.iter()).cloned().collect()
    }
}

/// Convolutional feature map C ∈ R^{n×L} plus the document's position mask.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

/// Run the filter bank over an embedded document.
///
/// Every window size produces a `[f_h, L]` block (SAME padding), the blocks
/// are stacked in window-size order, and the activation is applied
/// pointwise: `C[s][i] = act(w_s · X[:, i..i+h] + b_s)`.
pub fn feature_map(
    tape: &mut Tape,
    x: &Tensor,
    bank: &ConvFilterBank,
    activation: Activation,
    mask: &[bool],
) -> Result<FeatureMap> {
    let (_, len) = x.dims2("feature_map input")?;
    if mask.len() != len {
        return Err(Error::Dim(format!(
            "feature_map: mask has {} positions, document has {}",
            mask.len(),
            len
        )));
    }
    let mut blocks = Vec::with_capacity(bank.window_sizes.len());
    for ((w, b), _) in bank.weights.iter().zip(&bank.biases).zip(&bank.window_sizes) {
        blocks.push(tape.conv1d_same(x, w, b)?);
    }
    let stacked = if blocks.len() == 1 {
        blocks.pop().expect("one block")
    } else {
        tape.concat_rows(&blocks)?
    };
    let values = tape.activation(&stacked, activation)?;
    Ok(FeatureMap { values, mask: mask.to_vec() })
}
