//! Coordinate-wise aggregators: mean, median and trimmed mean.
//!
//! Each coordinate's values are sorted before they are combined, which
//! makes all three outputs bit-identical under any permutation of the
//! inputs.

use crate::error::{invalid, Error, Result};
use crate::vector::{common_dim, UpdateVector};

/// Median of an unsorted slice; the middle pair is averaged for even
/// lengths. Reorders `values`.
pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    sorted_median(values)
}

pub(crate) fn sorted_median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Applies `reduce` to each coordinate's sorted column.
fn per_coordinate(updates: &[UpdateVector], mut reduce: impl FnMut(&[f64]) -> f64) -> Result<UpdateVector> {
    let dim = common_dim(updates)?;
    let mut column = vec![0.0; updates.len()];
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim {
        for (slot, u) in column.iter_mut().zip(updates) {
            *slot = u[i];
        }
        column.sort_unstable_by(f64::total_cmp);
        out.push(reduce(&column));
    }
    Ok(UpdateVector::from_finite(out))
}

fn sorted_mean(sorted: &[f64]) -> f64 {
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

pub fn mean(updates: &[UpdateVector]) -> Result<UpdateVector> {
    per_coordinate(updates, sorted_mean)
}

pub fn coordinate_median(updates: &[UpdateVector]) -> Result<UpdateVector> {
    per_coordinate(updates, sorted_median)
}

/// Number of values removed from each end for `k` inputs.
pub fn trim_count(k: usize, beta: f64) -> usize {
    (beta * k as f64).floor() as usize
}

pub fn trimmed_mean(updates: &[UpdateVector], beta: f64) -> Result<UpdateVector> {
    if !(0.0..0.5).contains(&beta) {
        return Err(invalid("trim_fraction", format!("must lie in [0, 0.5), got {beta}")));
    }
    if updates.is_empty() {
        return Err(Error::Empty("update list"));
    }
    let k = updates.len();
    let cut = trim_count(k, beta);
    if k <= 2 * cut {
        return Err(Error::TooFewUpdates {
            required: 2 * cut + 1,
            found: k,
        });
    }
    per_coordinate(updates, |sorted| sorted_mean(&sorted[cut..k - cut]))
}
