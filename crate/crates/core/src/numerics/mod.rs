//! Shared numerical kernels.
//!
//! Everything here is a pure function of its inputs. Matrices are plain
//! `ndarray` arrays; callers that need the finiteness invariant check it at
//! construction with [`ensure_finite`].

mod kmeans;
mod linalg;
mod pca;

pub use kmeans::{kmeans, KMeansResult, Metric};
pub use linalg::{
    solve_spd, symmetric_eigen, weighted_least_squares, weighted_least_squares_multi, SpdFactor,
    WEIGHT_FLOOR,
};
pub use pca::{pca, PcaResult};

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Matrix alias used across the crate (row-major, `f64`).
pub type Matrix = ndarray::Array2<f64>;

/// Returns an error naming `what` if any entry is NaN or infinite.
pub fn ensure_finite(m: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if let Some(((r, c), v)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Data(format!(
            "{what} has non-finite value {v} at ({r}, {c})"
        )));
    }
    Ok(())
}

/// Numerically stable `ln Σ exp(v_i)`.
///
/// Entries may be `-inf` (zero mass) but not all of them.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::argument("log_sum_exp of an empty vector"));
    }
    if let Some(v) = values.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
        return Err(Error::Domain(format!("log_sum_exp entry {v} is not allowed")));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Domain("log_sum_exp: every entry is -inf".into()));
    }
    Ok(lse_with_max(values, max))
}

#[inline]
fn lse_with_max(values: &[f64], max: f64) -> f64 {
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Turns log-domain scores into normalized probabilities in place and
/// returns their log-normalizer.
///
/// Callers guarantee at least one finite entry.
pub(crate) fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite());
    let lse = lse_with_max(logits, max);
    let mut total = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - lse).exp();
        total += *v;
    }
    for v in logits.iter_mut() {
        *v /= total;
    }
    lse
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
