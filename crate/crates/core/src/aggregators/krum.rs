use crate::error::{Error, Result};
use crate::vector::{common_dim, squared_distance, UpdateVector};

/// Krum score of every update: the sum of squared distances to its
/// `K - M - 2` nearest other updates.
pub fn krum_scores(updates: &[UpdateVector], num_byzantine: usize) -> Result<Vec<f64>> {
    common_dim(updates)?;
    let k = updates.len();
    let neighbours = k
        .checked_sub(num_byzantine + 2)
        .filter(|n| *n >= 1)
        .ok_or(Error::KrumTooFewClients {
            clients: k,
            byzantine: num_byzantine,
        })?;

    let mut dist = vec![0.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            let d = squared_distance(&updates[i], &updates[j]);
            dist[i * k + j] = d;
            dist[j * k + i] = d;
        }
    }
    let mut row = Vec::with_capacity(k - 1);
    Ok((0..k)
        .map(|i| {
            row.clear();
            row.extend((0..k).filter(|&j| j != i).map(|j| dist[i * k + j]));
            row.sort_unstable_by(f64::total_cmp);
            row[..neighbours].iter().sum()
        })
        .collect())
}

/// Index of the Krum winner; ties go to the lowest index.
pub fn krum_select(updates: &[UpdateVector], num_byzantine: usize) -> Result<usize> {
    let scores = krum_scores(updates, num_byzantine)?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s < scores[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn krum(updates: &[UpdateVector], num_byzantine: usize) -> Result<UpdateVector> {
    krum_select(updates, num_byzantine).map(|i| updates[i].clone())
}
