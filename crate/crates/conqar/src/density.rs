//! Quantum-like density matrices over document positions.
//!
//! Each feature-map column, L2-normalized, is treated as a unit state
//! vector |c_i⟩. A learned per-owner distribution p over positions mixes
//! the corresponding dyads into a density matrix
//!
//! ```text
//! ρ = Σ_i p_i · |c_i⟩⟨c_i|
//! ```
//!
//! In `softmax` mode p is the softmax of the owner's logits, which makes ρ
//! symmetric, positive semi-definite, and trace-1 whenever no state column
//! was zeroed by padding. In `free` mode the logits are used as-is and the
//! trace-constraint loss is what pushes Σ p_i toward 1 — the reading in
//! which the constraint loss is not redundant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};

/// How the per-position weights are parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistMode {
    /// p = softmax(logits): always a valid distribution.
    Softmax,
    /// p = logits, unconstrained: relies on the trace loss.
    Free,
}

impl fmt::Display for DistMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistMode::Softmax => write!(f, "softmax"),
            DistMode::Free => write!(f, "free"),
        }
    }
}

impl FromStr for DistMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<DistMode> {
        match s {
            "softmax" => Ok(DistMode::Softmax),
            "free" => Ok(DistMode::Free),
            other => Err(Error::Config(format!(
                "unknown distribution mode {:?} (expected softmax or free)",
                other
            ))),
        }
    }
}

/// A per-owner learned distribution over document positions.
#[derive(Debug, Clone)]
pub struct PositionDistribution {
    pub owner_id: String,
    /// Length-L trainable vector.
    pub logits: Tensor,
    pub mode: DistMode,
}

impl PositionDistribution {
    /// Fresh distribution: uniform under either mode (zero logits for
    /// softmax, 1/L weights for free).
    pub fn new(owner_id: &str, len: usize, mode: DistMode) -> Result<PositionDistribution> {
        if len == 0 {
            return Err(Error::Empty(format!(
                "position distribution for {:?} needs at least one position",
                owner_id
            )));
        }
        let init = match mode {
            DistMode::Softmax => vec![0.0; len],
            DistMode::Free => vec![1.0 / len as f64; len],
        };
        Ok(PositionDistribution {
            owner_id: owner_id.to_string(),
            logits: Tensor::param(&[len], init)?,
            mode,
        })
    }

    /// Wrap existing logits (checkpoint restore).
    pub fn from_logits(owner_id: &str, logits: Tensor, mode: DistMode) -> PositionDistribution {
        PositionDistribution { owner_id: owner_id.to_string(), logits, mode }
    }

    pub fn len(&self) -> usize {
        self.logits.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.numel() == 0
    }

    /// The position weights p on the tape: softmax of the logits, or the
    /// logits themselves in free mode.
    pub fn probabilities(&self, tape: &mut Tape) -> Result<Tensor> {
        match self.mode {
            DistMode::Softmax => tape.softmax(&self.logits),
            DistMode::Free => Ok(self.logits.clone()),
        }
    }
}

/// A density matrix with the owner it belongs to.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    /// `[n, n]`, symmetric by construction.
    pub values: Tensor,
    pub owner_id: String,
}

impl DensityMatrix {
    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Normalize every feature-map column to unit length: the unit states |c_i⟩.
///
/// Masked positions are zeroed first so they hold zero states rather than
/// bias-colored ones; the trace of the resulting density matrix then falls
/// short of 1 by exactly the probability mass sitting on padding, which is
/// the deficit the trace loss acts on. All-zero columns stay zero under the
/// normalizer's zero-guard.
pub fn unit_states(tape: &mut Tape, feature_map: &FeatureMap) -> Result<Tensor> {
    let (_, len) = feature_map.values.dims2("unit_states")?;
    if feature_map.mask.len() != len {
        return Err(Error::Dim(format!(
            "unit_states: feature map has {} positions but mask has {}",
            len,
            feature_map.mask.len()
        )));
    }
    let values = if feature_map.mask.iter().all(|&m| m) {
        feature_map.values.clone()
    } else {
        let gate: Vec<f64> = feature_map.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let gate = Tensor::from_vec(&[len], gate)?;
        tape.scale_columns(&feature_map.values, &gate)?
    };
    tape.l2_normalize(&values, 1e-12)
}

/// Mix the state dyads into ρ = Σ_i p_i s_i s_iᵀ.
///
/// Computed as `(S · diag(p)) · Sᵀ`, which the tape differentiates through
/// both the states and the distribution. Entries (a, b) and (b, a) sum the
/// same values with rounding applied in different multiplication orders,
/// so symmetry holds to machine precision but not bitwise.
pub fn density_matrix(
    tape: &mut Tape,
    states: &Tensor,
    dist: &PositionDistribution,
) -> Result<DensityMatrix> {
    let (_, len) = states.dims2("density_matrix states")?;
    if len != dist.len() {
        return Err(Error::Dim(format!(
            "density_matrix: {} states but {} position weights for owner {:?}",
            len,
            dist.len(),
            dist.owner_id
        )));
    }
    let p = dist.probabilities(tape)?;
    let weighted = tape.scale_columns(states, &p)?;
    let states_t = tape.transpose(states)?;
    let rho = tape.matmul(&weighted, &states_t)?;
    Ok(DensityMatrix { values: rho, owner_id: dist.owner_id.clone() })
}

/// The trace-constraint loss:
///
/// ```text
/// (1/U) Σ_u (tr ρ_u − 1)² + (1/V) Σ_v (tr ρ_v − 1)²
/// ```
pub fn trace_loss(
    tape: &mut Tape,
    user_rhos: &[DensityMatrix],
    item_rhos: &[DensityMatrix],
) -> Result<Tensor> {
    if user_rhos.is_empty() || item_rhos.is_empty() {
        return Err(Error::Empty(
            "trace_loss: need at least one user and one item density matrix".into(),
        ));
    }
    let mut side_mean = |rhos: &[DensityMatrix], tape: &mut Tape| -> Result<Tensor> {
        let mut sq_devs = Vec::with_capacity(rhos.len());
        for rho in rhos {
            let tr = tape.trace(&rho.values)?;
            let dev = tape.add_scalar(&tr, -1.0)?;
            sq_devs.push(tape.mul(&dev, &dev)?);
        }
        let all = tape.concat(&sq_devs)?;
        tape.mean(&all)
    };
    let user_term = side_mean(user_rhos, tape)?;
    let item_term = side_mean(item_rhos, tape)?;
    tape.add(&user_term, &item_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fm(values: Tensor) -> FeatureMap {
        let len = values.shape()[1];
        FeatureMap { values, mask: vec![true; len] }
    }

    #[test]
    fn unit_states_normalizes_and_guards_zero() {
        let mut tape = Tape::new();
        let c = Tensor::from_vec(&[3, 2], vec![3.0, 0.0, 4.0, 0.0, 0.0, 0.0]).unwrap();
        let s = unit_states(&mut tape, &fm(c)).unwrap();
        let v = s.to_vec();
        assert!((v[0] - 0.6).abs() < 1e-15);
        assert!((v[2] - 0.8).abs() < 1e-15);
        // second column was all zero and stays all zero
        assert_eq!((v[1], v[3], v[5]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn masked_positions_hold_zero_states_and_shed_trace() {
        // every raw column nonzero (bias-colored padding), middle one masked out
        let mut tape = Tape::new();
        let c = Tensor::from_vec(&[2, 3], vec![3.0, 0.2, 1.0, 4.0, 0.2, 0.0]).unwrap();
        let map = FeatureMap { values: c, mask: vec![true, false, true] };
        let s = unit_states(&mut tape, &map).unwrap();
        let v = s.to_vec();
        assert!((v[0] - 0.6).abs() < 1e-15);
        assert!((v[3] - 0.8).abs() < 1e-15);
        assert_eq!((v[1], v[4]), (0.0, 0.0)); // masked column zeroed
        assert_eq!((v[2], v[5]), (1.0, 0.0));
        // trace drops by exactly the masked position's probability mass
        let dist = PositionDistribution::new("u", 3, DistMode::Softmax).unwrap();
        let rho = density_matrix(&mut tape, &s, &dist).unwrap();
        let p = dist.probabilities(&mut tape).unwrap().to_vec();
        let tr = tape.trace(&rho.values).unwrap().item();
        assert!((tr - (p[0] + p[2])).abs() < 1e-9);
    }

    #[test]
    fn all_masked_feature_map_gives_zero_density() {
        let mut tape = Tape::new();
        let c = Tensor::from_vec(&[2, 2], vec![0.3, 0.3, 0.3, 0.3]).unwrap();
        let map = FeatureMap { values: c, mask: vec![false, false] };
        let s = unit_states(&mut tape, &map).unwrap();
        let dist = PositionDistribution::new("u", 2, DistMode::Softmax).unwrap();
        let rho = density_matrix(&mut tape, &s, &dist).unwrap();
        assert!(rho.values.to_vec().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_length_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let c = Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        let map = FeatureMap { values: c, mask: vec![true, true] };
        assert!(unit_states(&mut tape, &map).is_err());
    }

    #[test]
    fn nonzero_state_columns_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(2..8);
            let len = rng.gen_range(2..12);
            let data: Vec<f64> = (0..n * len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let c = Tensor::from_vec(&[n, len], data).unwrap();
            let mut tape = Tape::new();
            let s = unit_states(&mut tape, &fm(c)).unwrap();
            let v = s.to_vec();
            for j in 0..len {
                let norm: f64 = (0..n).map(|i| v[i * len + j] * v[i * len + j]).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9, "column {} norm {}", j, norm);
            }
        }
    }

    #[test]
    fn single_pure_state_is_a_projector() {
        let mut tape = Tape::new();
        let states = Tensor::from_vec(&[3, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let dist = PositionDistribution::new("u", 1, DistMode::Softmax).unwrap();
        let rho = density_matrix(&mut tape, &states, &dist).unwrap();
        let v = rho.values.to_vec();
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
        assert_eq!(tape.trace(&rho.values).unwrap().item(), 1.0);
    }

    #[test]
    fn orthogonal_mixture_is_diagonal() {
        let mut tape = Tape::new();
        let states = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        // softmax of equal logits = (0.5, 0.5)
        let dist = PositionDistribution::new("u", 2, DistMode::Softmax).unwrap();
        let rho = density_matrix(&mut tape, &states, &dist).unwrap();
        assert_eq!(rho.values.to_vec(), vec![0.5, 0.0, 0.0, 0.5]);
    }

    /// Build a random softmax-mode instance: returns (states, dist).
    fn random_instance(
        rng: &mut ChaCha8Rng,
        n: usize,
        len: usize,
        zero_cols: &[usize],
    ) -> (Tensor, PositionDistribution) {
        let mut data: Vec<f64> = (0..n * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for &j in zero_cols {
            for i in 0..n {
                data[i * len + j] = 0.0;
            }
        }
        let c = Tensor::from_vec(&[n, len], data).unwrap();
        let mut tape = Tape::new();
        let states = unit_states(&mut tape, &fm(c)).unwrap();
        let dist = PositionDistribution::new("owner", len, DistMode::Softmax).unwrap();
        dist.logits.update_data(|d| {
            for v in d.iter_mut() {
                *v = rng.gen_range(-1.5..1.5);
            }
        });
        (states, dist)
    }

    #[test]
    fn density_matches_brute_force_outer_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (states, dist) = random_instance(&mut rng, 4, 6, &[]);
        let mut tape = Tape::new();
        let rho = density_matrix(&mut tape, &states, &dist).unwrap();
        let p = dist.probabilities(&mut tape).unwrap().to_vec();
        let s = states.to_vec();
        let v = rho.values.to_vec();
        // brute force: Σ_i p_i outer(s_i, s_i)
        for a in 0..4 {
            for b in 0..4 {
                let mut expect = 0.0;
                for i in 0..6 {
                    expect += p[i] * s[a * 6 + i] * s[b * 6 + i];
                }
                assert!(
                    (v[a * 4 + b] - expect).abs() < 1e-12,
                    "entry ({},{}): {} vs {}",
                    a,
                    b,
                    v[a * 4 + b],
                    expect
                );
            }
        }
        // symmetric to machine precision (well inside the 1e-8 contract)
        for a in 0..4 {
            for b in 0..4 {
                assert!((v[a * 4 + b] - v[b * 4 + a]).abs() < 1e-12);
            }
        }
        // PSD via an eigensolver oracle
        let m = nalgebra::DMatrix::from_row_slice(4, 4, &v);
        let eigen = m.symmetric_eigen();
        let min = eigen.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-10, "min eigenvalue {}", min);
    }

    #[test]
    fn trace_equals_p_mass_on_nonzero_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // columns 1 and 4 zeroed (padding storyline)
        let (states, dist) = random_instance(&mut rng, 3, 6, &[1, 4]);
        let mut tape = Tape::new();
        let rho = density_matrix(&mut tape, &states, &dist).unwrap();
        let tr = tape.trace(&rho.values).unwrap().item();
        let p = dist.probabilities(&mut tape).unwrap().to_vec();
        let expected: f64 = p.iter().enumerate().filter(|(i, _)| ![1, 4].contains(i)).map(|(_, &x)| x).sum();
        assert!((tr - expected).abs() < 1e-9, "trace {} vs p mass {}", tr, expected);
        // and with no zero columns the trace is 1
        let (states2, dist2) = random_instance(&mut rng, 3, 6, &[]);
        let rho2 = density_matrix(&mut tape, &states2, &dist2).unwrap();
        let tr2 = tape.trace(&rho2.values).unwrap().item();
        assert!((tr2 - 1.0).abs() < 1e-6);
    }

    fn dyad(owner: &str, tape: &mut Tape, trace_target: f64) -> DensityMatrix {
        // diag(trace_target, 0): a scaled projector with a known trace
        let values = Tensor::from_vec(&[2, 2], vec![trace_target, 0.0, 0.0, 0.0]).unwrap();
        let _ = tape; // matrices built directly; no ops needed
        DensityMatrix { values, owner_id: owner.into() }
    }

    #[test]
    fn trace_loss_zero_when_all_traces_are_one() {
        let mut tape = Tape::new();
        let u = vec![dyad("u1", &mut tape, 1.0), dyad("u2", &mut tape, 1.0)];
        let v = vec![dyad("i1", &mut tape, 1.0)];
        let loss = trace_loss(&mut tape, &u, &v).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn trace_loss_hand_arithmetic() {
        // one user with trace 0.5, one item with trace 1 → 0.25 + 0 = 0.25
        let mut tape = Tape::new();
        let u = vec![dyad("u1", &mut tape, 0.5)];
        let v = vec![dyad("i1", &mut tape, 1.0)];
        let loss = trace_loss(&mut tape, &u, &v).unwrap();
        assert!((loss.item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn trace_loss_rejects_empty_sides() {
        let mut tape = Tape::new();
        let u = vec![dyad("u1", &mut tape, 1.0)];
        assert!(trace_loss(&mut tape, &u, &[]).is_err());
        assert!(trace_loss(&mut tape, &[], &u).is_err());
    }

    #[test]
    fn softmax_mode_without_padding_has_negligible_trace_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let mut users = Vec::new();
        let mut items = Vec::new();
        for k in 0..4 {
            let (states, dist) = random_instance(&mut rng, 4, 8, &[]);
            let rho = density_matrix(&mut tape, &states, &dist).unwrap();
            if k % 2 == 0 {
                users.push(rho);
            } else {
                items.push(rho);
            }
        }
        let loss = trace_loss(&mut tape, &users, &items).unwrap();
        assert!(loss.item() < 1e-10, "loss {}", loss.item());
    }

    #[test]
    fn trace_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 3;
        let len = 5;
        let raw: Vec<f64> = (0..n * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = Tensor::param(&[n, len], raw).unwrap();
        let user_dist = PositionDistribution::new("u", len, DistMode::Free).unwrap();
        let item_dist = PositionDistribution::new("i", len, DistMode::Free).unwrap();
        // nudge the free weights off uniform so the loss is not at a minimum
        user_dist.logits.update_data(|d| d.iter_mut().enumerate().for_each(|(i, v)| *v += 0.1 * i as f64));
        item_dist.logits.update_data(|d| d.iter_mut().enumerate().for_each(|(i, v)| *v -= 0.05 * i as f64));
        let report = gradient_check(
            |tape| {
                let states = tape.l2_normalize(&features, 1e-12)?;
                let rho_u = density_matrix(tape, &states, &user_dist)?;
                let rho_v = density_matrix(tape, &states, &item_dist)?;
                trace_loss(tape, &[rho_u], &[rho_v])
            },
            &[user_dist.logits.clone(), item_dist.logits.clone(), features.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "report: {:?}", report);
    }

    #[test]
    fn density_matrix_rejects_length_mismatch() {
        let mut tape = Tape::new();
        let states = Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        let dist = PositionDistribution::new("u", 4, DistMode::Softmax).unwrap();
        assert!(density_matrix(&mut tape, &states, &dist).is_err());
    }
}
