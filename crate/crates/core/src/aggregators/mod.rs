//! Server-side aggregation rules.
//!
//! | Scheme              | Mechanism                                   |
//! |---------------------|---------------------------------------------|
//! | `mean`              | coordinate-wise average                     |
//! | `krum`              | Euclidean nearest-neighbour selection        |
//! | `geomed`            | geometric median (Weiszfeld)                |
//! | `autogm`            | auto-weighted geometric median              |
//! | `median`            | coordinate-wise median                      |
//! | `trimmed_mean`      | coordinate-wise trimmed average             |
//! | `centered_clipping` | clipped averaging around last round's output |
//! | `clustering`        | cosine clustering, mean of the larger group |
//! | `clipped_clustering`| median-norm clipping, then `clustering`     |

pub mod clipping;
pub mod clustering;
pub mod coordinate;
pub mod geomed;
pub mod krum;

pub use clipping::{adaptive_tau, adaptive_tau_with, centered_clipping, clip_by_norm, NormHistory};
pub use clustering::{
    agglomerate, cluster_two_groups, clipped_clustering, clustering_agg, select_majority, DistanceMatrix,
    Linkage, TwoGroups,
};
pub use coordinate::{coordinate_median, mean, trim_count, trimmed_mean};
pub use geomed::{
    autogm, autogm_objective, autogm_solve, autogm_weights, geomed, geomed_solve, objective, project_to_simplex,
    weighted_objective, AutoGmSolution, Solution, WeiszfeldOptions,
};
pub use krum::{krum, krum_scores, krum_select};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::vector::{common_dim, UpdateVector};

pub const DEFAULT_CC_TAU: f64 = 10.0;
pub const DEFAULT_CC_ITERS: usize = 1;
pub const DEFAULT_AUTOGM_LAMBDA: f64 = 1.0;

fn default_cc_tau() -> f64 {
    DEFAULT_CC_TAU
}

fn default_cc_iters() -> usize {
    DEFAULT_CC_ITERS
}

fn default_lambda() -> f64 {
    DEFAULT_AUTOGM_LAMBDA
}

/// Declarative choice of aggregation rule and its parameters.
///
/// `num_byzantine` for Krum and `trim_fraction` for the trimmed mean may
/// be left unset; [`Aggregator::new`] then fills them from the run's
/// `M` and `M / K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorSpec {
    Mean {},
    Krum {
        #[serde(default, rename = "num_byzantine_assumed", skip_serializing_if = "Option::is_none")]
        num_byzantine: Option<usize>,
    },
    #[serde(rename = "geomed")]
    GeoMed {},
    #[serde(rename = "autogm")]
    AutoGm {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Median {},
    TrimmedMean {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        trim_fraction: Option<f64>,
    },
    CenteredClipping {
        #[serde(default = "default_cc_tau", rename = "cc_tau")]
        tau: f64,
        #[serde(default = "default_cc_iters", rename = "cc_iters")]
        iters: usize,
    },
    Clustering {
        #[serde(default)]
        linkage: Linkage,
    },
    ClippedClustering {
        #[serde(default)]
        linkage: Linkage,
    },
}

impl AggregatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Mean {} => "mean",
            Self::Krum { .. } => "krum",
            Self::GeoMed {} => "geomed",
            Self::AutoGm { .. } => "autogm",
            Self::Median {} => "median",
            Self::TrimmedMean { .. } => "trimmed_mean",
            Self::CenteredClipping { .. } => "centered_clipping",
            Self::Clustering { .. } => "clustering",
            Self::ClippedClustering { .. } => "clipped_clustering",
        }
    }

    /// Fills unset parameters and checks ranges for a run with `k`
    /// clients of which `m` are Byzantine.
    pub fn resolve(&self, k: usize, m: usize) -> Result<Self> {
        let resolved = match *self {
            Self::Krum { num_byzantine } => {
                let assumed = num_byzantine.unwrap_or(m);
                if k < assumed + 3 {
                    return Err(Error::KrumTooFewClients {
                        clients: k,
                        byzantine: assumed,
                    });
                }
                Self::Krum {
                    num_byzantine: Some(assumed),
                }
            }
            Self::TrimmedMean { trim_fraction } => {
                let beta = trim_fraction.unwrap_or(m as f64 / k.max(1) as f64);
                if !(0.0..0.5).contains(&beta) {
                    return Err(invalid("trim_fraction", format!("must lie in [0, 0.5), got {beta}")));
                }
                Self::TrimmedMean {
                    trim_fraction: Some(beta),
                }
            }
            Self::AutoGm { lambda } if !(lambda > 0.0 && lambda.is_finite()) => {
                return Err(invalid("lambda", format!("must be positive, got {lambda}")));
            }
            Self::CenteredClipping { tau, .. } if !(tau > 0.0 && tau.is_finite()) => {
                return Err(invalid("cc_tau", format!("must be positive, got {tau}")));
            }
            Self::CenteredClipping { iters: 0, .. } => {
                return Err(invalid("cc_iters", "must be at least 1"));
            }
            ref other => other.clone(),
        };
        let needs_pairs = matches!(resolved, Self::Clustering { .. } | Self::ClippedClustering { .. });
        if needs_pairs && k < 2 {
            return Err(Error::TooFewUpdates { required: 2, found: k });
        }
        Ok(resolved)
    }

    pub fn linkage(&self) -> Option<Linkage> {
        match self {
            Self::Clustering { linkage } | Self::ClippedClustering { linkage } => Some(*linkage),
            _ => None,
        }
    }
}

/// Cross-round server memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AggregatorState {
    /// Last round's output; `None` stands for the zero vector.
    pub previous_aggregate: Option<UpdateVector>,
    pub norm_history: NormHistory,
}

/// An aggregation rule together with its cross-round state.
#[derive(Clone, Debug)]
pub struct Aggregator {
    spec: AggregatorSpec,
    state: AggregatorState,
    solver: WeiszfeldOptions,
    last_tau: Option<f64>,
}

impl Aggregator {
    pub fn new(spec: &AggregatorSpec, num_clients: usize, num_byzantine: usize) -> Result<Self> {
        Ok(Self {
            spec: spec.resolve(num_clients, num_byzantine)?,
            state: AggregatorState::default(),
            solver: WeiszfeldOptions::default(),
            last_tau: None,
        })
    }

    pub fn with_solver(mut self, solver: WeiszfeldOptions) -> Self {
        self.solver = solver;
        self
    }

    pub fn spec(&self) -> &AggregatorSpec {
        &self.spec
    }

    pub fn state(&self) -> &AggregatorState {
        &self.state
    }

    /// Clipping threshold used by the most recent ClippedClustering round.
    pub fn last_tau(&self) -> Option<f64> {
        self.last_tau
    }

    /// Aggregates one round of updates and advances the state.
    pub fn aggregate(&mut self, updates: &[UpdateVector]) -> Result<UpdateVector> {
        let dim = common_dim(updates)?;
        let out = match &self.spec {
            AggregatorSpec::Mean {} => mean(updates)?,
            AggregatorSpec::Krum { num_byzantine } => krum(updates, num_byzantine.unwrap_or(0))?,
            AggregatorSpec::GeoMed {} => geomed(updates, self.solver.tol, self.solver.max_iters)?,
            AggregatorSpec::AutoGm { lambda } => autogm(updates, *lambda, self.solver.tol, self.solver.max_iters)?,
            AggregatorSpec::Median {} => coordinate_median(updates)?,
            AggregatorSpec::TrimmedMean { trim_fraction } => trimmed_mean(updates, trim_fraction.unwrap_or(0.0))?,
            AggregatorSpec::CenteredClipping { tau, iters } => {
                let zero;
                let center = match &self.state.previous_aggregate {
                    Some(prev) => prev,
                    None => {
                        zero = UpdateVector::zeros(dim);
                        &zero
                    }
                };
                centered_clipping(updates, center, *tau, *iters)?
            }
            AggregatorSpec::Clustering { linkage } => clustering_agg(updates, *linkage)?,
            AggregatorSpec::ClippedClustering { linkage } => {
                let (out, tau) = clipped_clustering(updates, &mut self.state.norm_history, *linkage)?;
                self.last_tau = Some(tau);
                out
            }
        };
        self.state.previous_aggregate = Some(out.clone());
        Ok(out)
    }
}
