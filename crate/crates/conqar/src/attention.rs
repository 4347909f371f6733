//! Mutual attention between a user's and an item's density matrices.
//!
//! The interaction matrix M = ρ_u ρ_vᵀ generalizes the inner product of the
//! two representations: its trace equals Σ_{i,j} p_i p_j ⟨c_i|c_j⟩², the
//! expected squared overlap of the two sides' states. Row means of M
//! (softmaxed) weight the user's density matrix, column means weight the
//! item's, and everything is concatenated into the fused vector
//!
//! ```text
//! z = [ tr(M) | diag(M) | ρ_u·a_u | a_vᵀ·ρ_v ]      (length 3n+1)
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::density::DensityMatrix;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};

/// The interaction matrix plus everything derived from it.
#[derive(Debug, Clone)]
pub struct MutualAttention {
    /// M = ρ_u ρ_vᵀ, `[n, n]`. Generally not symmetric; never symmetrized.
    pub m: Tensor,
    /// tr(M), shape `[1]`.
    pub trace: Tensor,
    /// Main diagonal of M, `[n]`.
    pub diag: Tensor,
    /// Softmax of row means: attention over the user side.
    pub a_u: Tensor,
    /// Softmax of column means: attention over the item side.
    pub a_v: Tensor,
}

/// The (3n+1)-vector fed to the prediction head.
#[derive(Debug, Clone)]
pub struct FusedRepresentation {
    pub z: Tensor,
}

impl FusedRepresentation {
    pub fn len(&self) -> usize {
        self.z.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.z.numel() == 0
    }
}

/// M = ρ_u · ρ_vᵀ. The transpose is a no-op value-wise (ρ_v is symmetric)
/// but is applied explicitly, matching the defining formula.
pub fn mutual_matrix(
    tape: &mut Tape,
    rho_u: &DensityMatrix,
    rho_v: &DensityMatrix,
) -> Result<Tensor> {
    if rho_u.n() != rho_v.n() {
        return Err(Error::Dim(format!(
            "mutual_matrix: user side is {}x{} but item side is {}x{}",
            rho_u.n(),
            rho_u.n(),
            rho_v.n(),
            rho_v.n()
        )));
    }
    let rho_v_t = tape.transpose(&rho_v.values)?;
    tape.matmul(&rho_u.values, &rho_v_t)
}

/// How rows/columns of M are pooled before the attention softmax. The
/// defining equations average; max pooling is kept selectable because the
/// surrounding prose describes the pooling both ways.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    #[default]
    Mean,
    Max,
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<PoolKind> {
        match s {
            "mean" => Ok(PoolKind::Mean),
            "max" => Ok(PoolKind::Max),
            other => Err(Error::Config(format!("unknown pooling kind {:?}", other))),
        }
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::Mean => "mean",
            PoolKind::Max => "max",
        })
    }
}

/// Pool M by rows and by columns, then softmax each pooled vector:
/// `a_u = softmax(pool_rows(M))`, `a_v = softmax(pool_cols(M))`.
pub fn pooled_attention_with(
    tape: &mut Tape,
    m: &Tensor,
    kind: PoolKind,
) -> Result<(Tensor, Tensor)> {
    let (r, c) = m.dims2("pooled_attention")?;
    if r != c {
        return Err(Error::Dim(format!(
            "pooled_attention: matrix must be square, got {:?}",
            m.shape()
        )));
    }
    let (theta, gamma) = match kind {
        PoolKind::Mean => (tape.row_means(m)?, tape.col_means(m)?),
        PoolKind::Max => (tape.row_maxes(m)?, tape.col_maxes(m)?),
    };
    let a_u = tape.softmax(&theta)?;
    let a_v = tape.softmax(&gamma)?;
    Ok((a_u, a_v))
}

/// [`pooled_attention_with`] under the default mean pooling.
pub fn pooled_attention(tape: &mut Tape, m: &Tensor) -> Result<(Tensor, Tensor)> {
    pooled_attention_with(tape, m, PoolKind::Mean)
}

impl MutualAttention {
    /// Derive trace, diagonal and both attention vectors from M.
    pub fn compute(tape: &mut Tape, m: Tensor) -> Result<MutualAttention> {
        MutualAttention::compute_with(tape, m, PoolKind::Mean)
    }

    /// [`MutualAttention::compute`] with an explicit pooling kind.
    pub fn compute_with(tape: &mut Tape, m: Tensor, kind: PoolKind) -> Result<MutualAttention> {
        let trace = tape.trace(&m)?;
        let diag = tape.diag(&m)?;
        let (a_u, a_v) = pooled_attention_with(tape, &m, kind)?;
        Ok(MutualAttention { m, trace, diag, a_u, a_v })
    }
}

/// Weight each side by its attention vector and concatenate:
/// `z = [tr(M)] ⊕ diag(M) ⊕ (ρ_u·a_u) ⊕ (a_vᵀ·ρ_v)`.
pub fn fuse(
    tape: &mut Tape,
    rho_u: &DensityMatrix,
    rho_v: &DensityMatrix,
    attn: &MutualAttention,
) -> Result<FusedRepresentation> {
    let z_u = tape.matvec(&rho_u.values, &attn.a_u)?;
    let z_v = tape.vecmat(&attn.a_v, &rho_v.values)?;
    let z = tape.concat(&[attn.trace.clone(), attn.diag.clone(), z_u, z_v])?;
    Ok(FusedRepresentation { z })
}
