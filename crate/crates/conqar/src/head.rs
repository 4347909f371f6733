//! Fully connected prediction stack, the training losses, and the
//! end-to-end forward pass from a (user document, item document) pair to a
//! predicted rating.
//!
//! The stack maps the fused vector z through `m` layers: every hidden layer
//! is an affine map + ELU + inverted dropout, the final layer is affine with
//! scalar output. The training objective combines the rating MSE with the
//! density-trace penalty:
//!
//! ```text
//! L = α·L_trace + (1−α)·L_rating
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{fuse, mutual_matrix, FusedRepresentation, MutualAttention, PoolKind};
use crate::corpus::Document;
use crate::density::{density_matrix, unit_states, DensityMatrix, DistMode, PositionDistribution};
use crate::encoder::{embed, feature_map, ConvFilterBank, EmbeddingTable, FeatureMap};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Tape, Tensor};

/// Which slice of the architecture a model runs.
///
/// * `full` — convolution → density matrices → mutual attention → head.
/// * `conv_quant` — density matrices but no attention weighting; the head
///   sees `[tr(M) | diag(M)]` only (length n+1).
/// * `conv_mutual` — no density matrices; the interaction matrix is the
///   product of the raw (mask-gated) feature maps and the attention weights
///   position-averaged filter activations (length 3n+1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    ConvQuant,
    ConvMutual,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "conv_quant" => Ok(Variant::ConvQuant),
            "conv_mutual" => Ok(Variant::ConvMutual),
            other => Err(Error::Config(format!(
                "unknown variant {:?}: expected full, conv_quant or conv_mutual",
                other
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::ConvQuant => "conv_quant",
            Variant::ConvMutual => "conv_mutual",
        })
    }
}

impl Variant {
    /// Length of the fused representation for `n` filters.
    pub fn fused_len(&self, n: usize) -> usize {
        match self {
            Variant::Full | Variant::ConvMutual => 3 * n + 1,
            Variant::ConvQuant => n + 1,
        }
    }
}

/// The fully connected prediction stack.
#[derive(Debug, Clone)]
pub struct DenseStack {
    /// One `[out, in]` matrix per layer.
    weights: Vec<Tensor>,
    /// One `[out]` vector per layer.
    biases: Vec<Tensor>,
    pub dropout_rate: f64,
}

impl DenseStack {
    /// A stack of `n_layers` total layers (`n_layers − 1` hidden + final
    /// scalar layer). Hidden layers keep the input width. Weights are
    /// Glorot-style uniform, biases start at zero (ELU is smooth at zero,
    /// so there is no kink to avoid here).
    pub fn new_random<R: Rng + ?Sized>(
        input_dim: usize,
        n_layers: usize,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<DenseStack> {
        if input_dim == 0 {
            return Err(Error::Config("dense stack: input dimension must be positive".into()));
        }
        if n_layers == 0 {
            return Err(Error::Config("dense stack: need at least one layer".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!(
                "dense stack: dropout rate must lie in [0, 1), got {}",
                dropout_rate
            )));
        }
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for layer in 0..n_layers {
            let (fan_in, fan_out) =
                if layer + 1 == n_layers { (input_dim, 1) } else { (input_dim, input_dim) };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> =
                (0..fan_out * fan_in).map(|_| rng.gen_range(-limit..limit)).collect();
            weights.push(Tensor::param(&[fan_out, fan_in], data)?);
            biases.push(Tensor::param(&[fan_out], vec![0.0; fan_out])?);
        }
        Ok(DenseStack { weights, biases, dropout_rate })
    }

    /// Rebuild a stack from explicit tensors (checkpoint restore). Validates
    /// that the layer dimensions chain and end in a scalar.
    pub fn from_parts(
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
        dropout_rate: f64,
    ) -> Result<DenseStack> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Config(format!(
                "dense stack: {} weight and {} bias tensors",
                weights.len(),
                biases.len()
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!(
                "dense stack: dropout rate must lie in [0, 1), got {}",
                dropout_rate
            )));
        }
        let mut prev_out = None;
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            let (out_dim, in_dim) = w.dims2("dense stack layer")?;
            if b.dim1("dense stack bias")? != out_dim {
                return Err(Error::Dim(format!(
                    "dense stack: layer {} weight is {:?} but bias has {} entries",
                    i,
                    w.shape(),
                    b.numel()
                )));
            }
            if let Some(prev) = prev_out {
                if in_dim != prev {
                    return Err(Error::Dim(format!(
                        "dense stack: layer {} expects {} inputs but layer {} produced {}",
                        i,
                        in_dim,
                        i - 1,
                        prev
                    )));
                }
            }
            prev_out = Some(out_dim);
        }
        if prev_out != Some(1) {
            return Err(Error::Dim("dense stack: final layer must produce a scalar".into()));
        }
        Ok(DenseStack { weights, biases, dropout_rate })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].shape()[1]
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn layer(&self, i: usize) -> (&Tensor, &Tensor) {
        (&self.weights[i], &self.biases[i])
    }

    /// All trainable tensors: layer weights then layer biases.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.weights.iter().chain(self.biases.iter()).cloned().collect()
    }
}

/// Run the stack on a fused vector. Dropout fires only when `training` is
/// true (inverted scaling, so inference needs no correction) and consumes
/// the caller's RNG stream; with `training = false` the pass is a pure
/// function of its inputs.
pub fn predict<R: Rng + ?Sized>(
    tape: &mut Tape,
    z: &FusedRepresentation,
    stack: &DenseStack,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if z.len() != stack.input_dim() {
        return Err(Error::Dim(format!(
            "predict: fused vector has {} entries but the stack expects {}",
            z.len(),
            stack.input_dim()
        )));
    }
    let mut h = z.z.clone();
    let last = stack.n_layers() - 1;
    for i in 0..stack.n_layers() {
        let (w, b) = stack.layer(i);
        h = tape.matvec(w, &h)?;
        h = tape.add(&h, b)?;
        if i < last {
            h = tape.activation(&h, Activation::Elu)?;
            if training && stack.dropout_rate > 0.0 {
                h = tape.dropout(&h, stack.dropout_rate, rng)?;
            }
        }
    }
    Ok(h)
}

/// The α knob weighting the trace penalty against the rating loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    alpha: f64,
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<LossWeights> {
        if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", alpha)));
        }
        Ok(LossWeights { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Mean squared error between predictions and true ratings.
pub fn rating_loss(tape: &mut Tape, predictions: &Tensor, truths: &Tensor) -> Result<Tensor> {
    let n = predictions.dim1("rating_loss predictions")?;
    let m = truths.dim1("rating_loss truths")?;
    if n != m {
        return Err(Error::Dim(format!("rating_loss: {} predictions but {} truths", n, m)));
    }
    if n == 0 {
        return Err(Error::Empty("rating_loss: no examples".into()));
    }
    let diff = tape.sub(predictions, truths)?;
    let sq = tape.mul(&diff, &diff)?;
    tape.mean(&sq)
}

/// `α·l_trace + (1−α)·l_rating`, exact at both endpoints.
pub fn total_loss(
    tape: &mut Tape,
    l_trace: &Tensor,
    l_rating: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    let trace_term = tape.scale(l_trace, w.alpha())?;
    let rating_term = tape.scale(l_rating, 1.0 - w.alpha())?;
    tape.add(&trace_term, &rating_term)
}

/// Architecture hyperparameters — everything needed to rebuild the trainable
/// tensors at a fixed vocabulary and document length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub window_sizes: Vec<usize>,
    pub n_filters: usize,
    /// Total FC layer count (hidden layers + the final scalar layer).
    pub fc_layers: usize,
    pub dropout_rate: f64,
    /// Convolution activation.
    pub activation: Activation,
    pub variant: Variant,
    pub dist_mode: DistMode,
    /// Pooling for the attention logits; the defining equations average.
    pub pool: PoolKind,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            window_sizes: vec![1, 2, 3],
            n_filters: 50,
            fc_layers: 1,
            dropout_rate: 0.5,
            activation: Activation::Relu,
            variant: Variant::Full,
            dist_mode: DistMode::Softmax,
            pool: PoolKind::Mean,
        }
    }
}

/// The complete trainable model: embedding table, convolution bank, dense
/// stack, and one position distribution per user and item seen in training.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub embedding: EmbeddingTable,
    pub conv: ConvFilterBank,
    pub stack: DenseStack,
    /// Document length both sides are assembled to.
    pub doc_len: usize,
    pub user_dists: BTreeMap<String, PositionDistribution>,
    pub item_dists: BTreeMap<String, PositionDistribution>,
}

impl Model {
    /// Fresh model with random parameters and empty distribution stores.
    pub fn new_random<R: Rng + ?Sized>(
        config: &ModelConfig,
        vocab_len: usize,
        doc_len: usize,
        rng: &mut R,
    ) -> Result<Model> {
        if doc_len == 0 {
            return Err(Error::Config("model: document length must be positive".into()));
        }
        let embedding = EmbeddingTable::new_random(config.embed_dim, vocab_len, rng)?;
        let conv = ConvFilterBank::new_random(
            &config.window_sizes,
            config.n_filters,
            config.embed_dim,
            rng,
        )?;
        let stack = DenseStack::new_random(
            config.variant.fused_len(config.n_filters),
            config.fc_layers,
            config.dropout_rate,
            rng,
        )?;
        Ok(Model {
            config: config.clone(),
            embedding,
            conv,
            stack,
            doc_len,
            user_dists: BTreeMap::new(),
            item_dists: BTreeMap::new(),
        })
    }

    /// Filter count n — the side length of every density matrix.
    pub fn n(&self) -> usize {
        self.conv.total_filters
    }

    /// Does this variant use per-owner position distributions at all?
    pub fn uses_distributions(&self) -> bool {
        self.config.variant != Variant::ConvMutual
    }

    /// Register a trainable position distribution for every owner id,
    /// skipping ones already present.
    pub fn register_users<'a, I: IntoIterator<Item = &'a str>>(&mut self, ids: I) -> Result<()> {
        for id in ids {
            if !self.user_dists.contains_key(id) {
                let dist = PositionDistribution::new(id, self.doc_len, self.config.dist_mode)?;
                self.user_dists.insert(id.to_string(), dist);
            }
        }
        Ok(())
    }

    /// See [`Model::register_users`].
    pub fn register_items<'a, I: IntoIterator<Item = &'a str>>(&mut self, ids: I) -> Result<()> {
        for id in ids {
            if !self.item_dists.contains_key(id) {
                let dist = PositionDistribution::new(id, self.doc_len, self.config.dist_mode)?;
                self.item_dists.insert(id.to_string(), dist);
            }
        }
        Ok(())
    }

    /// Every trainable tensor with a stable name, in a fixed order:
    /// embedding, convolution weights/biases per window size, dense layers,
    /// then user and item distributions in id order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut params = vec![("embedding.weights".to_string(), self.embedding.weights.clone())];
        for (i, h) in self.conv.window_sizes.iter().enumerate() {
            params.push((format!("conv.w{}", h), self.conv.weights[i].clone()));
            params.push((format!("conv.b{}", h), self.conv.biases[i].clone()));
        }
        for i in 0..self.stack.n_layers() {
            let (w, b) = self.stack.layer(i);
            params.push((format!("fc.w{}", i), w.clone()));
            params.push((format!("fc.b{}", i), b.clone()));
        }
        if self.uses_distributions() {
            for (id, dist) in &self.user_dists {
                params.push((format!("dist.user.{}", id), dist.logits.clone()));
            }
            for (id, dist) in &self.item_dists {
                params.push((format!("dist.item.{}", id), dist.logits.clone()));
            }
        }
        params
    }

    /// The position distribution used for a user document: the trained one
    /// when the owner was seen in training, otherwise an untrained uniform
    /// stand-in (cold owner at inference).
    pub fn user_dist(&self, owner_id: &str) -> Result<PositionDistribution> {
        match self.user_dists.get(owner_id) {
            Some(d) => Ok(d.clone()),
            None => PositionDistribution::new(owner_id, self.doc_len, self.config.dist_mode),
        }
    }

    /// See [`Model::user_dist`].
    pub fn item_dist(&self, owner_id: &str) -> Result<PositionDistribution> {
        match self.item_dists.get(owner_id) {
            Some(d) => Ok(d.clone()),
            None => PositionDistribution::new(owner_id, self.doc_len, self.config.dist_mode),
        }
    }
}

/// Everything one forward pass produces; the intermediates feed the
/// visualization exports and the tests.
#[derive(Debug)]
pub struct Forward {
    /// Predicted rating, shape `[1]`.
    pub prediction: Tensor,
    /// User/item density matrices (absent under `conv_mutual`).
    pub rho_u: Option<DensityMatrix>,
    pub rho_v: Option<DensityMatrix>,
    /// The interaction matrix: ρ_u·ρ_vᵀ, or C_u·C_vᵀ under `conv_mutual`.
    pub m: Tensor,
    /// Attention intermediates (absent under `conv_quant`).
    pub attention: Option<MutualAttention>,
    pub fused: FusedRepresentation,
    /// Position probabilities for each side (absent under `conv_mutual`).
    pub p_user: Option<Tensor>,
    pub p_item: Option<Tensor>,
}

/// Zero masked columns of a feature map so padding carries no signal.
fn gated_values(tape: &mut Tape, map: &FeatureMap) -> Result<Tensor> {
    if map.mask.iter().all(|&m| m) {
        return Ok(map.values.clone());
    }
    let gate: Vec<f64> = map.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let gate = Tensor::from_vec(&[map.mask.len()], gate)?;
    tape.scale_columns(&map.values, &gate)
}

/// Run the model end to end on one (user document, item document) pair.
///
/// Pipeline: embed → convolutional feature map per side, then per variant:
///
/// * `full` — unit states → density matrices → M = ρ_u·ρ_vᵀ → pooled
///   attention → fused `[tr | diag | ρ_u·a_u | a_vᵀ·ρ_v]` → dense stack.
/// * `conv_quant` — density matrices and M as above, but the head sees
///   `[tr | diag]` only.
/// * `conv_mutual` — M′ = C_u·C_vᵀ on mask-gated feature maps; attention as
///   above; the weighted parts are `a ⊙ row_means(C)` per side.
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &Model,
    user_doc: &Document,
    item_doc: &Document,
    training: bool,
    rng: &mut R,
) -> Result<Forward> {
    if user_doc.token_ids.len() != model.doc_len || item_doc.token_ids.len() != model.doc_len {
        return Err(Error::Dim(format!(
            "forward: documents have {} and {} positions but the model expects {}",
            user_doc.token_ids.len(),
            item_doc.token_ids.len(),
            model.doc_len
        )));
    }
    let xu = embed(tape, &model.embedding, user_doc)?;
    let xv = embed(tape, &model.embedding, item_doc)?;
    let cu = feature_map(tape, &xu, &model.conv, model.config.activation, &user_doc.mask)?;
    let cv = feature_map(tape, &xv, &model.conv, model.config.activation, &item_doc.mask)?;

    match model.config.variant {
        Variant::Full | Variant::ConvQuant => {
            let su = unit_states(tape, &cu)?;
            let sv = unit_states(tape, &cv)?;
            let dist_u = model.user_dist(&user_doc.owner_id)?;
            let dist_v = model.item_dist(&item_doc.owner_id)?;
            let rho_u = density_matrix(tape, &su, &dist_u)?;
            let rho_v = density_matrix(tape, &sv, &dist_v)?;
            let m = mutual_matrix(tape, &rho_u, &rho_v)?;
            let p_user = dist_u.probabilities(tape)?;
            let p_item = dist_v.probabilities(tape)?;
            let (fused, attention) = if model.config.variant == Variant::Full {
                let attn = MutualAttention::compute_with(tape, m.clone(), model.config.pool)?;
                (fuse(tape, &rho_u, &rho_v, &attn)?, Some(attn))
            } else {
                // conv_quant: trace and diagonal only, no attention weighting
                let trace = tape.trace(&m)?;
                let diag = tape.diag(&m)?;
                let z = tape.concat(&[trace, diag])?;
                (FusedRepresentation { z }, None)
            };
            let prediction = predict(tape, &fused, &model.stack, training, rng)?;
            Ok(Forward {
                prediction,
                rho_u: Some(rho_u),
                rho_v: Some(rho_v),
                m,
                attention,
                fused,
                p_user: Some(p_user),
                p_item: Some(p_item),
            })
        }
        Variant::ConvMutual => {
            let gu = gated_values(tape, &cu)?;
            let gv = gated_values(tape, &cv)?;
            let gv_t = tape.transpose(&gv)?;
            let m = tape.matmul(&gu, &gv_t)?;
            let attn = MutualAttention::compute_with(tape, m.clone(), model.config.pool)?;
            let ru = tape.row_means(&gu)?;
            let rv = tape.row_means(&gv)?;
            let z_u = tape.mul(&attn.a_u, &ru)?;
            let z_v = tape.mul(&attn.a_v, &rv)?;
            let z =
                tape.concat(&[attn.trace.clone(), attn.diag.clone(), z_u, z_v])?;
            let fused = FusedRepresentation { z };
            let prediction = predict(tape, &fused, &model.stack, training, rng)?;
            Ok(Forward {
                prediction,
                rho_u: None,
                rho_v: None,
                m,
                attention: Some(attn),
                fused,
                p_user: None,
                p_item: None,
            })
        }
    }
}
