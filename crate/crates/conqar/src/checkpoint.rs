//! Versioned model checkpoints.
//!
//! A checkpoint is a single JSON document holding the architecture config,
//! the document geometry, the full vocabulary, and every parameter tensor
//! by name. `f64` values are printed in shortest-round-trip form, so a
//! save → load → save cycle is lossless and byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::density::PositionDistribution;
use crate::encoder::{ConvFilterBank, EmbeddingTable};
use crate::error::{Error, Result};
use crate::head::{DenseStack, Model, ModelConfig};
use crate::numerics::Tensor;

const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SavedTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    doc_len: usize,
    vocab: Vec<String>,
    /// Parameter name → tensor; BTreeMap keeps the serialization order
    /// stable so identical models write identical bytes.
    params: BTreeMap<String, SavedTensor>,
}

/// Serialize the model (with its vocabulary) to a JSON string.
pub fn checkpoint_to_json(model: &Model, vocab: &Vocabulary) -> Result<String> {
    let mut params = BTreeMap::new();
    for (name, tensor) in model.named_parameters() {
        let prev = params.insert(name.clone(), SavedTensor {
            shape: tensor.shape(),
            data: tensor.to_vec(),
        });
        if prev.is_some() {
            return Err(Error::Format(format!("duplicate parameter name {:?}", name)));
        }
    }
    let file = CheckpointFile {
        version: VERSION,
        config: model.config.clone(),
        doc_len: model.doc_len,
        vocab: vocab.tokens().to_vec(),
        params,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn save_checkpoint(path: &Path, model: &Model, vocab: &Vocabulary) -> Result<()> {
    fs::write(path, checkpoint_to_json(model, vocab)?)?;
    Ok(())
}

fn take(params: &mut BTreeMap<String, SavedTensor>, name: &str) -> Result<Tensor> {
    let saved = params
        .remove(name)
        .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {:?}", name)))?;
    Tensor::param(&saved.shape, saved.data)
}

/// Rebuild the model and vocabulary from checkpoint JSON.
pub fn checkpoint_from_json(json: &str) -> Result<(Model, Vocabulary)> {
    let file: CheckpointFile = serde_json::from_str(json)?;
    if file.version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} not supported (expected {})",
            file.version, VERSION
        )));
    }
    let vocab = Vocabulary::from_tokens(file.vocab)?;
    let config = file.config;
    let mut params = file.params;

    let emb = take(&mut params, "embedding.weights")?;
    let (dim, vocab_len) = emb.dims2("embedding.weights")?;
    if dim != config.embed_dim {
        return Err(Error::Format(format!(
            "checkpoint embedding is {}-dimensional but the config says {}",
            dim, config.embed_dim
        )));
    }
    if vocab_len != vocab.len() {
        return Err(Error::Format(format!(
            "checkpoint embedding covers {} tokens but the vocabulary has {}",
            vocab_len,
            vocab.len()
        )));
    }
    let embedding = EmbeddingTable { weights: emb, dim, vocab_len };

    let mut conv_weights = Vec::new();
    let mut conv_biases = Vec::new();
    let mut filters_per_size = Vec::new();
    let mut window_sizes = config.window_sizes.clone();
    window_sizes.sort_unstable();
    for &h in &window_sizes {
        let w = take(&mut params, &format!("conv.w{}", h))?;
        let b = take(&mut params, &format!("conv.b{}", h))?;
        let shape = w.shape();
        if shape.len() != 3 || shape[1] != config.embed_dim || shape[2] != h {
            return Err(Error::Format(format!(
                "checkpoint conv.w{} has shape {:?}, expected [f, {}, {}]",
                h, shape, config.embed_dim, h
            )));
        }
        if b.dim1("conv bias")? != shape[0] {
            return Err(Error::Format(format!(
                "checkpoint conv.b{} has {} entries for {} filters",
                h,
                b.numel(),
                shape[0]
            )));
        }
        filters_per_size.push(shape[0]);
        conv_weights.push(w);
        conv_biases.push(b);
    }
    let total_filters: usize = filters_per_size.iter().sum();
    if total_filters != config.n_filters {
        return Err(Error::Format(format!(
            "checkpoint holds {} filters but the config says {}",
            total_filters, config.n_filters
        )));
    }
    let conv = ConvFilterBank {
        window_sizes,
        filters_per_size,
        weights: conv_weights,
        biases: conv_biases,
        total_filters,
        embed_dim: config.embed_dim,
    };

    let mut fc_weights = Vec::new();
    let mut fc_biases = Vec::new();
    for i in 0..config.fc_layers {
        fc_weights.push(take(&mut params, &format!("fc.w{}", i))?);
        fc_biases.push(take(&mut params, &format!("fc.b{}", i))?);
    }
    let stack = DenseStack::from_parts(fc_weights, fc_biases, config.dropout_rate)?;
    if stack.input_dim() != config.variant.fused_len(config.n_filters) {
        return Err(Error::Format(format!(
            "checkpoint stack expects {} inputs but the {} variant with {} filters fuses {}",
            stack.input_dim(),
            config.variant,
            config.n_filters,
            config.variant.fused_len(config.n_filters)
        )));
    }

    let mut user_dists = BTreeMap::new();
    let mut item_dists = BTreeMap::new();
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let owner_and_side = name
            .strip_prefix("dist.user.")
            .map(|id| (id.to_string(), true))
            .or_else(|| name.strip_prefix("dist.item.").map(|id| (id.to_string(), false)));
        let Some((owner, is_user)) = owner_and_side else {
            return Err(Error::Format(format!("unrecognized checkpoint parameter {:?}", name)));
        };
        let logits = take(&mut params, &name)?;
        if logits.dim1("distribution logits")? != file.doc_len {
            return Err(Error::Format(format!(
                "checkpoint {:?} has {} positions but documents have {}",
                name,
                logits.numel(),
                file.doc_len
            )));
        }
        let dist = PositionDistribution::from_logits(&owner, logits, config.dist_mode);
        if is_user {
            user_dists.insert(owner, dist);
        } else {
            item_dists.insert(owner, dist);
        }
    }

    let model = Model {
        config,
        embedding,
        conv,
        stack,
        doc_len: file.doc_len,
        user_dists,
        item_dists,
    };
    Ok((model, vocab))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Vocabulary)> {
    checkpoint_from_json(&fs::read_to_string(path)?)
}
