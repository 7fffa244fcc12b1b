//! Similarity analysis, loss clamping and run summaries.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::federation::RoundLog;
use crate::vector::{common_dim, cosine_similarity, UpdateVector};

/// Upper end of the reported loss range; also the divergence sentinel.
pub const LOSS_CEILING: f64 = 1e5;

/// Symmetric `K x K` matrix of pairwise cosine similarities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    size: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.size)
    }

    /// Mean over the `K(K-1)` off-diagonal entries.
    pub fn mean_off_diagonal(&self) -> f64 {
        let k = self.size;
        let mut sum = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    sum += self.get(i, j);
                }
            }
        }
        sum / (k * (k - 1)) as f64
    }
}

/// Pairwise cosine similarities. A zero-norm update has similarity 0 to
/// every other update and a zero diagonal entry.
pub fn pairwise_cosine(updates: &[UpdateVector]) -> Result<SimilarityMatrix> {
    if updates.len() < 2 {
        return Err(Error::TooFewUpdates {
            required: 2,
            found: updates.len(),
        });
    }
    common_dim(updates)?;
    let k = updates.len();
    let mut values = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let s = cosine_similarity(&updates[i], &updates[j])?.unwrap_or(0.0);
            let s = if i == j && s != 0.0 { 1.0 } else { s };
            values[i * k + j] = s;
            values[j * k + i] = s;
        }
    }
    Ok(SimilarityMatrix { size: k, values })
}

/// Clamps a loss into `[0, LOSS_CEILING]`; NaN maps to the ceiling.
pub fn clamp_loss(loss: f64) -> f64 {
    if loss.is_nan() {
        LOSS_CEILING
    } else {
        loss.clamp(0.0, LOSS_CEILING)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: usize,
    pub evaluations: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub final_loss: f64,
    /// Average of the captured mean off-diagonal similarities.
    pub mean_similarity: Option<f64>,
}

/// Final and best accuracy over the evaluated rounds.
pub fn summarize(logs: &[RoundLog]) -> Result<Summary> {
    let evaluated: Vec<_> = logs.iter().filter_map(|l| l.evaluation).collect();
    let last = evaluated.last().ok_or(Error::Empty("evaluated rounds"))?;
    let best = evaluated.iter().map(|e| e.accuracy).fold(f64::NEG_INFINITY, f64::max);
    let sims: Vec<f64> = logs.iter().filter_map(|l| l.mean_similarity).collect();
    let mean_similarity = (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64);
    if !best.is_finite() {
        return Err(invalid("accuracy", "non-finite evaluation"));
    }
    Ok(Summary {
        rounds: logs.len(),
        evaluations: evaluated.len(),
        final_accuracy: last.accuracy,
        best_accuracy: best,
        final_loss: last.loss,
        mean_similarity,
    })
}
