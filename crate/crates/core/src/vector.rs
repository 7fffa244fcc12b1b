//! Shared value types: update vectors, client identities and the
//! geometry helpers every aggregator builds on.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A flat parameter delta or gradient uploaded by one client.
///
/// Every coordinate is finite; constructors reject NaN and infinities so
/// nothing non-finite can reach an aggregator.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpdateVector(Vec<f64>);

impl UpdateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec())
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Replaces every non-finite coordinate with zero.
    pub fn sanitized(mut values: Vec<f64>) -> (Self, usize) {
        let mut replaced = 0;
        for v in values.iter_mut().filter(|v| !v.is_finite()) {
            *v = 0.0;
            replaced += 1;
        }
        (Self(values), replaced)
    }

    /// Wraps values produced by arithmetic on finite inputs. Overflow is
    /// still caught in debug builds.
    pub(crate) fn from_finite(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::from_finite(self.0.iter().map(|v| v * factor).collect())
    }
}

impl Deref for UpdateVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl<'de> Deserialize<'de> for UpdateVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(deserializer)?;
        Self::new(values).map_err(serde::de::Error::custom)
    }
}

/// Index of a client in `[0, K)`. Clients `0..M` are the Byzantine ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId(pub usize);

impl ClientId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn is_byzantine(self, num_byzantine: usize) -> bool {
        self.0 < num_byzantine
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    check_dims(a.len(), b.len())?;
    let (na2, nb2) = (dot(a, a), dot(b, b));
    if na2 == 0.0 || nb2 == 0.0 {
        return Ok(None);
    }
    // One square root keeps cos(a, a) exactly 1 more often.
    let mut denom = (na2 * nb2).sqrt();
    if !denom.is_finite() || denom == 0.0 {
        denom = na2.sqrt() * nb2.sqrt();
    }
    Ok(Some((dot(a, b) / denom).clamp(-1.0, 1.0)))
}

/// `1 - cos(a, b)`, in `[0, 2]`. A zero vector is at distance 1 from
/// everything, itself included.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(cosine_similarity(a, b)?.map_or(1.0, |s| 1.0 - s))
}

pub(crate) fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Checks that `updates` is nonempty with a common dimension and returns it.
pub(crate) fn common_dim(updates: &[UpdateVector]) -> Result<usize> {
    let first = updates.first().ok_or(Error::Empty("update list"))?;
    let dim = first.dim();
    for u in &updates[1..] {
        check_dims(dim, u.dim())?;
    }
    Ok(dim)
}
