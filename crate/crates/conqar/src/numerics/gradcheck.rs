//! Central-finite-difference verification of tape gradients.
//!
//! For every element of every parameter the checker perturbs the value by
//! `+step` and `-step`, re-evaluates the loss, and compares the numeric
//! slope `(f(x+h) - f(x-h)) / 2h` against the gradient produced by the
//! reverse sweep. The comparison uses the relative error
//! `|g_tape - g_fd| / max(1, |g_fd|)`, which behaves like an absolute error
//! for small gradients and a relative one for large gradients.
//!
//! Before measuring anything, the checker evaluates the loss twice and
//! requires the two values to agree *bitwise*. A loss that disagrees with
//! itself (usually dropout left enabled, or an unseeded RNG somewhere in
//! the closure) would make finite differences meaningless, so it is
//! reported as an error instead of a huge mismatch.

use crate::error::{Error, Result};
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;

/// Outcome of a gradient check: the worst relative error and where it was
/// found, for diagnostics.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over all elements of |g_tape - g_fd| / max(1, |g_fd|)
    pub max_rel_error: f64,
    /// Index into the `params` slice where the worst error lives.
    pub param_index: usize,
    /// Flat element index within that parameter.
    pub element_index: usize,
    /// Tape gradient at the worst element.
    pub analytic: f64,
    /// Finite-difference gradient at the worst element.
    pub numeric: f64,
    /// Total number of scalar elements compared.
    pub elements_checked: usize,
}

/// Verify tape gradients of `loss_fn` with central finite differences.
///
/// `loss_fn` must build the loss from scratch on the tape it is given and
/// return a single-element tensor. `step` must lie in `[1e-6, 1e-4]`:
/// larger steps truncate too coarsely, smaller ones drown in cancellation.
///
/// On success the parameters' gradient buffers hold the analytic gradients
/// (the checker does not reset them afterwards).
pub fn gradient_check<F>(mut loss_fn: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape) -> Result<Tensor>,
{
    if !(1e-6..=1e-4).contains(&step) {
        return Err(Error::Config(format!(
            "gradient_check: step {} outside [1e-6, 1e-4]",
            step
        )));
    }
    if params.is_empty() {
        return Err(Error::Empty("gradient_check: no parameters to perturb".into()));
    }

    let eval = |loss_fn: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape)?;
        if loss.numel() != 1 {
            return Err(Error::Dim(format!(
                "gradient_check: loss must be a single element, got shape {:?}",
                loss.shape()
            )));
        }
        Ok(loss.item())
    };

    // Determinism guard: two evaluations of the untouched parameters must
    // agree to the last bit.
    let first = eval(&mut loss_fn)?;
    let second = eval(&mut loss_fn)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    if !first.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient_check: loss evaluated to {}",
            first
        )));
    }

    // Analytic gradients from one reverse sweep.
    for p in params {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad().ok_or_else(|| {
                Error::Dim("gradient_check: parameter does not require grad".into())
            })
        })
        .collect::<Result<_>>()?;
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        param_index: 0,
        element_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        elements_checked: 0,
    };

    for (pi, p) in params.iter().enumerate() {
        for idx in 0..p.numel() {
            let orig = p.get(idx);
            p.set(idx, orig + step);
            let plus = eval(&mut loss_fn)?;
            p.set(idx, orig - step);
            let minus = eval(&mut loss_fn)?;
            p.set(idx, orig);

            let numeric = (plus - minus) / (2.0 * step);
            let tape_grad = analytic[pi][idx];
            let rel = (tape_grad - numeric).abs() / numeric.abs().max(1.0);
            report.elements_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.param_index = pi;
                report.element_index = idx;
                report.analytic = tape_grad;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Fill a parameter tensor with small deterministic values that avoid
    /// activation kinks (nothing lands near 0 for relu inputs).
    fn seeded_param(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.25..1.0);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn rejects_out_of_range_step() {
        let p = seeded_param(&[2], 0);
        let err = gradient_check(
            |tape| {
                let q = tape.mul(&p, &p)?;
                tape.mean(&q)
            },
            &[p.clone()],
            1e-2,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn detects_nondeterministic_loss() {
        let p = seeded_param(&[8], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let err = gradient_check(
            |tape| {
                // dropout with a shared advancing RNG: two evaluations see
                // different masks, which the checker must flag.
                let d = tape.dropout(&p, 0.5, &mut rng)?;
                tape.mean(&d)
            },
            &[p.clone()],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }), "got {:?}", err);
    }

    #[test]
    fn quadratic_gradient_matches() {
        // f = mean(x * x), df/dx_i = 2 x_i / n: an exact parabola, so the
        // central difference is exact up to rounding.
        let p = seeded_param(&[6], 2);
        let report = gradient_check(
            |tape| {
                let sq = tape.mul(&p, &p)?;
                tape.mean(&sq)
            },
            &[p.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "report: {:?}", report);
        assert_eq!(report.elements_checked, 6);
    }

    #[test]
    fn matmul_chain_gradient_matches() {
        let a = seeded_param(&[3, 4], 3);
        let b = seeded_param(&[4, 2], 4);
        let report = gradient_check(
            |tape| {
                let prod = tape.matmul(&a, &b)?;
                let act = tape.activation(&prod, Activation::Elu)?;
                tape.mean(&act)
            },
            &[a.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "report: {:?}", report);
        assert_eq!(report.elements_checked, 12 + 8);
    }

    #[test]
    fn softmax_normalize_chain_gradient_matches() {
        let x = seeded_param(&[5], 5);
        let w = seeded_param(&[5], 6);
        let report = gradient_check(
            |tape| {
                let n = tape.l2_normalize(&x, 1e-12)?;
                let s = tape.softmax(&w)?;
                let prod = tape.mul(&n, &s)?;
                tape.mean(&prod)
            },
            &[x.clone(), w.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "report: {:?}", report);
    }

    #[test]
    fn conv_and_embed_gradient_matches() {
        // Two-channel table, four tokens (one is padding), single filter of
        // width 2: small enough to be obvious, wide enough to cross ops.
        let table = seeded_param(&[2, 4], 7);
        let w = seeded_param(&[1, 2, 2], 8);
        let b = seeded_param(&[1], 9);
        let ids = [3usize, 1, 0, 2, 1]; // 0 is the padding id below
        let report = gradient_check(
            |tape| {
                let emb = tape.embed(&table, &ids, 0)?;
                let fm = tape.conv1d_same(&emb, &w, &b)?;
                let act = tape.activation(&fm, Activation::Elu)?;
                tape.mean(&act)
            },
            &[table.clone(), w.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "report: {:?}", report);
    }

    #[test]
    fn stacking_and_pooling_gradient_matches() {
        let a = seeded_param(&[2, 3], 20);
        let b = seeded_param(&[1, 3], 21);
        let report = gradient_check(
            |tape| {
                let stacked = tape.concat_rows(&[a.clone(), b.clone()])?;
                let rows = tape.row_means(&stacked)?;
                let cols = tape.col_means(&stacked)?;
                let all = tape.concat(&[rows, cols])?;
                let sm = tape.softmax(&all)?;
                tape.mean(&sm)
            },
            &[a.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "report: {:?}", report);
    }

    #[test]
    fn density_style_composition_gradient_matches() {
        // scale_columns + matmul(transpose) + trace/diag: the exact shape of
        // the density-matrix construction downstream.
        let states = seeded_param(&[3, 4], 22);
        let logits = seeded_param(&[4], 23);
        let report = gradient_check(
            |tape| {
                let unit = tape.l2_normalize(&states, 1e-12)?;
                let p = tape.softmax(&logits)?;
                let weighted = tape.scale_columns(&unit, &p)?;
                let unit_t = tape.transpose(&unit)?;
                let rho = tape.matmul(&weighted, &unit_t)?;
                let tr = tape.trace(&rho)?;
                let dg = tape.diag(&rho)?;
                let dsum = tape.mean(&dg)?;
                let both = tape.concat(&[tr, dsum])?;
                tape.mean(&both)
            },
            &[states.clone(), logits.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "report: {:?}", report);
    }

    #[test]
    fn padding_embedding_gets_zero_gradient() {
        let table = seeded_param(&[2, 3], 10);
        let ids = [0usize, 1, 0, 2];
        let mut tape = Tape::new();
        let emb = tape.embed(&table, &ids, 0).unwrap();
        let loss = tape.mean(&emb).unwrap();
        tape.backward(&loss).unwrap();
        let grad = table.grad().unwrap();
        // column 0 is the padding column: both its rows must stay zero
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[3], 0.0);
        // non-padding columns received gradient
        assert!(grad[1] != 0.0 && grad[2] != 0.0);
    }
}
