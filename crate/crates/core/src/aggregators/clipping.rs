use serde::{Deserialize, Serialize};

use crate::aggregators::coordinate::median_in_place;
use crate::error::{invalid, Error, Result};
use crate::vector::{check_dims, common_dim, distance, l2_norm, UpdateVector};

/// Every update norm the server has received so far, across clients and
/// rounds. Append-only.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormHistory {
    norms: Vec<f64>,
}

impl NormHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, norm: f64) {
        debug_assert!(norm >= 0.0);
        self.norms.push(norm);
    }

    pub fn extend(&mut self, norms: impl IntoIterator<Item = f64>) {
        norms.into_iter().for_each(|n| self.record(n));
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }
}

/// The clipping threshold: median of the recorded norms.
pub fn adaptive_tau(history: &NormHistory) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::Empty("norm history"));
    }
    let mut values = history.norms.clone();
    Ok(median_in_place(&mut values))
}

/// Median of the history after appending `pending` norms, without
/// mutating the history.
pub fn adaptive_tau_with(history: &NormHistory, pending: &[f64]) -> Result<f64> {
    let mut values = Vec::with_capacity(history.len() + pending.len());
    values.extend_from_slice(&history.norms);
    values.extend_from_slice(pending);
    if values.is_empty() {
        return Err(Error::Empty("norm history"));
    }
    Ok(median_in_place(&mut values))
}

/// Scales `v` down to norm `tau` when it is longer; shorter vectors pass
/// through untouched.
pub fn clip_by_norm(v: &UpdateVector, tau: f64) -> Result<UpdateVector> {
    if !(tau >= 0.0) {
        return Err(invalid("tau", format!("must be nonnegative, got {tau}")));
    }
    let norm = v.norm();
    if norm <= tau {
        return Ok(v.clone());
    }
    Ok(v.scaled(tau / norm))
}

/// Centered clipping from the warm start `center`, `iters` times.
pub fn centered_clipping(
    updates: &[UpdateVector],
    center: &UpdateVector,
    tau: f64,
    iters: usize,
) -> Result<UpdateVector> {
    if !(tau > 0.0) {
        return Err(invalid("tau", format!("must be positive, got {tau}")));
    }
    if iters == 0 {
        return Err(invalid("iters", "must be at least 1"));
    }
    let dim = common_dim(updates)?;
    check_dims(dim, center.dim())?;
    let k = updates.len() as f64;
    let mut current = center.as_slice().to_vec();
    let mut step = vec![0.0; dim];
    for _ in 0..iters {
        step.iter_mut().for_each(|s| *s = 0.0);
        for u in updates {
            let gap = distance(u, &current);
            if gap == 0.0 {
                continue;
            }
            let scale = (tau / gap).min(1.0);
            for ((s, ui), ci) in step.iter_mut().zip(u.iter()).zip(&current) {
                *s += (ui - ci) * scale;
            }
        }
        debug_assert!(l2_norm(&step) / k <= tau * (1.0 + 1e-12));
        current.iter_mut().zip(&step).for_each(|(c, s)| *c += s / k);
    }
    Ok(UpdateVector::from_finite(current))
}
