//! Central finite-difference gradient verification.
//!
//! The oracle side of every gradient test: perturb each parameter
//! component by `±step`, re-run the forward pass under `no_grad`, and
//! compare the slope against the recorded analytic gradient.

use crate::tape::{backward, clear_tape, no_grad};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Largest relative error over all checked components, counting a
    /// component as 0 when the absolute difference sits below the
    /// truncation cushion.
    pub max_rel_err: f64,
    /// Components compared (those above the magnitude floor).
    pub checked: usize,
    /// Components skipped as too small to compare reliably.
    pub skipped: usize,
}

/// Absolute cushion for central-difference truncation noise: components
/// whose analytic/numeric difference is below this are counted as exact.
/// At step 1e-5 on O(1) losses the quotient carries ~1e-10 of h^2-order
/// truncation plus cancellation error, so near-zero gradients cannot be
/// resolved more finely than this.
pub const GRADCHECK_ABS_CUSHION: f64 = 1e-9;

/// Compare analytic gradients of `loss_fn` w.r.t. `params` against central
/// finite differences.
///
/// `loss_fn` must be a pure function of the parameter values (seeded
/// internally if it uses randomness). Components where both the analytic
/// and numeric gradient magnitudes fall below `mag_floor` are skipped.
pub fn check_gradients(
    params: &[Tensor],
    mut loss_fn: impl FnMut() -> Tensor,
    step: f64,
    mag_floor: f64,
) -> GradCheckReport {
    clear_tape();
    for p in params {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    let loss = loss_fn();
    backward(&loss).expect("gradcheck loss must be scalar");

    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for (p, ga) in params.iter().zip(&analytic) {
        let base = p.to_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += step;
            p.set_data(plus);
            let f_plus = no_grad(&mut loss_fn).item();

            let mut minus = base.clone();
            minus[i] -= step;
            p.set_data(minus);
            let f_minus = no_grad(&mut loss_fn).item();

            p.set_data(base.clone());
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = ga[i];
            let mag = a.abs().max(numeric.abs());
            if mag < mag_floor {
                skipped += 1;
                continue;
            }
            let diff = (a - numeric).abs();
            let rel = if diff <= GRADCHECK_ABS_CUSHION {
                0.0
            } else {
                diff / mag
            };
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err,
        checked,
        skipped,
    }
}
