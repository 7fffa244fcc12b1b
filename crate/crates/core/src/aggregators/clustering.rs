//! Cosine-distance agglomerative clustering into two groups, and the
//! Clustering / ClippedClustering aggregators built on it.

use serde::{Deserialize, Serialize};

use crate::aggregators::clipping::{adaptive_tau, clip_by_norm, NormHistory};
use crate::aggregators::coordinate::mean;
use crate::error::{Error, Result};
use crate::vector::{common_dim, cosine_distance, UpdateVector};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    #[default]
    Average,
    Complete,
}

/// Symmetric `K x K` matrix of cosine distances.
#[derive(Clone, Debug)]
pub struct DistanceMatrix {
    k: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn cosine(updates: &[UpdateVector]) -> Result<Self> {
        common_dim(updates)?;
        let k = updates.len();
        let mut values = vec![0.0; k * k];
        for i in 0..k {
            // a zero vector is at distance 1 even from itself
            values[i * k + i] = cosine_distance(&updates[i], &updates[i])?;
            for j in i + 1..k {
                let d = cosine_distance(&updates[i], &updates[j])?;
                values[i * k + j] = d;
                values[j * k + i] = d;
            }
        }
        Ok(Self { k, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k + j]
    }

    /// Distance between two clusters under `linkage`.
    pub fn linkage(&self, a: &[usize], b: &[usize], linkage: Linkage) -> f64 {
        let pairs = a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j)));
        match linkage {
            Linkage::Average => {
                pairs.map(|(i, j)| self.get(i, j)).sum::<f64>() / (a.len() * b.len()) as f64
            }
            Linkage::Complete => pairs.map(|(i, j)| self.get(i, j)).fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Mean pairwise distance inside a group; zero for singletons.
    pub fn cohesion(&self, group: &[usize]) -> f64 {
        if group.len() < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for (x, &i) in group.iter().enumerate() {
            for &j in &group[x + 1..] {
                sum += self.get(i, j);
            }
        }
        sum / (group.len() * (group.len() - 1) / 2) as f64
    }
}

/// Two groups of client indices, each sorted ascending. `first` holds
/// client 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TwoGroups {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

/// Bottom-up merging on a precomputed distance matrix until exactly two
/// clusters remain. Clusters are ordered by their smallest member; among
/// equal linkage distances the lexicographically smallest pair merges.
pub fn agglomerate(dist: &DistanceMatrix, linkage: Linkage) -> Result<TwoGroups> {
    if dist.k < 2 {
        return Err(Error::TooFewUpdates {
            required: 2,
            found: dist.k,
        });
    }
    let mut clusters: Vec<Vec<usize>> = (0..dist.k).map(|i| vec![i]).collect();
    while clusters.len() > 2 {
        let mut best = (0, 1);
        let mut best_d = f64::INFINITY;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let d = dist.linkage(&clusters[a], &clusters[b], linkage);
                if d < best_d {
                    best_d = d;
                    best = (a, b);
                }
            }
        }
        let merged = clusters.remove(best.1);
        clusters[best.0].extend(merged);
        clusters[best.0].sort_unstable();
    }
    let second = clusters.pop().expect("two clusters");
    let first = clusters.pop().expect("two clusters");
    Ok(TwoGroups { first, second })
}

pub fn cluster_two_groups(updates: &[UpdateVector], linkage: Linkage) -> Result<TwoGroups> {
    if updates.len() < 2 {
        return Err(Error::TooFewUpdates {
            required: 2,
            found: updates.len(),
        });
    }
    agglomerate(&DistanceMatrix::cosine(updates)?, linkage)
}

/// The group the server keeps: the larger one, then the more cohesive,
/// then the one with the lowest client index.
pub fn select_majority(groups: &TwoGroups, dist: &DistanceMatrix) -> Vec<usize> {
    let TwoGroups { first, second } = groups;
    if first.len() != second.len() {
        return if first.len() > second.len() { first } else { second }.clone();
    }
    if dist.cohesion(second) < dist.cohesion(first) {
        second.clone()
    } else {
        first.clone()
    }
}

pub fn clustering_agg(updates: &[UpdateVector], linkage: Linkage) -> Result<UpdateVector> {
    if updates.len() < 2 {
        return Err(Error::TooFewUpdates {
            required: 2,
            found: updates.len(),
        });
    }
    let dist = DistanceMatrix::cosine(updates)?;
    let groups = agglomerate(&dist, linkage)?;
    let kept: Vec<UpdateVector> = select_majority(&groups, &dist)
        .into_iter()
        .map(|i| updates[i].clone())
        .collect();
    mean(&kept)
}

/// Records the raw norms, clips every update to the median historical
/// norm, then aggregates with [`clustering_agg`]. Returns the output and
/// the threshold used.
pub fn clipped_clustering(
    updates: &[UpdateVector],
    history: &mut NormHistory,
    linkage: Linkage,
) -> Result<(UpdateVector, f64)> {
    if updates.len() < 2 {
        return Err(Error::TooFewUpdates {
            required: 2,
            found: updates.len(),
        });
    }
    common_dim(updates)?;
    history.extend(updates.iter().map(|u| u.norm()));
    let tau = adaptive_tau(history)?;
    let clipped = updates
        .iter()
        .map(|u| clip_by_norm(u, tau))
        .collect::<Result<Vec<_>>>()?;
    Ok((clustering_agg(&clipped, linkage)?, tau))
}
