//! Central-finite-difference gradient verification.
//!
//! Every differentiable op and both full networks are checked against
//! `(f(x + h) - f(x - h)) / 2h` in 64-bit with `h = 1e-5`. Probe points
//! within `1e-3` of a non-smooth kink (ReLU at zero, pooling ties) are the
//! caller's responsibility to avoid.

use super::{DenseTensor, Tape};
use crate::error::Result;

/// Result of one gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over the probed components.
    pub max_rel_err: f64,
    /// Flat index at which it occurred.
    pub worst_index: usize,
    /// Analytic and numeric values at that index.
    pub worst_pair: (f64, f64),
    /// Number of components probed.
    pub probed: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Scalar loss `Σ w_i · y_i` with fixed quasi-random weights, so that every
/// output element influences the loss with a distinct coefficient.
pub fn loss_of(tape: &mut Tape, y: &DenseTensor) -> Result<DenseTensor> {
    let w: Vec<f64> = (0..y.len())
        .map(|i| ((i as f64 + 1.0) * 0.7391).sin() + 0.1)
        .collect();
    let wt = DenseTensor::from_vec(w, y.shape())?;
    let prod = super::mul(tape, y, &wt)?;
    super::sum(tape, &prod)
}

/// Check the gradient of `f` (leaf values → scalar loss) at `x0` over all
/// components.
pub fn central_diff_check(
    x0: &[f64],
    f: impl FnMut(&mut Tape, &DenseTensor) -> Result<DenseTensor>,
    h: f64,
) -> Result<GradCheckReport> {
    let indices: Vec<usize> = (0..x0.len()).collect();
    central_diff_check_at(x0, f, h, &indices)
}

/// Check the gradient of `f` at `x0`, probing only `indices`. Used for the
/// full-network checks where probing every parameter would be wasteful.
pub fn central_diff_check_at(
    x0: &[f64],
    mut f: impl FnMut(&mut Tape, &DenseTensor) -> Result<DenseTensor>,
    h: f64,
    indices: &[usize],
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let x = tape.leaf(x0.to_vec(), &[x0.len()])?;
    let loss = f(&mut tape, &x)?;
    tape.backward(&loss)?;
    let analytic: Vec<f64> = match tape.grad(&x) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x0.len()],
    };
    drop(tape);

    let mut eval = |vals: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        t.set_recording(false);
        let x = t.leaf(vals.to_vec(), &[vals.len()])?;
        Ok(f(&mut t, &x)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        worst_pair: (0.0, 0.0),
        probed: indices.len(),
    };
    let mut probe = x0.to_vec();
    for &i in indices {
        probe[i] = x0[i] + h;
        let fp = eval(&probe)?;
        probe[i] = x0[i] - h;
        let fm = eval(&probe)?;
        probe[i] = x0[i];
        let numeric = (fp - fm) / (2.0 * h);
        let e = rel_err(analytic[i], numeric);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
            report.worst_pair = (analytic[i], numeric);
        }
    }
    Ok(report)
}

/// Evenly spaced probe indices covering `[0, len)`, at most `max` of them.
pub fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}
