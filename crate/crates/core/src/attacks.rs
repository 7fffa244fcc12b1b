//! Byzantine behaviours.
//!
//! Omniscient attacks (`noise`, `alie`, `ipm`, `adaptive_clipped`) replace
//! the Byzantine clients' uploads after all benign updates of a round are
//! known. `sign_flip` and `label_flip` instead change how the Byzantine
//! clients train.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aggregators::clustering::{agglomerate, select_majority, DistanceMatrix, Linkage};
use crate::error::{invalid, Error, Result};
use crate::vector::{common_dim, dot, l2_norm, UpdateVector};

pub const NOISE_MEAN: f64 = 0.1;
pub const NOISE_VARIANCE: f64 = 0.1;
pub const DEFAULT_Z_MAX: f64 = 1.0;
pub const DEFAULT_EPS_MARGIN: f64 = 1e-3;

fn default_noise_mean() -> f64 {
    NOISE_MEAN
}

fn default_noise_variance() -> f64 {
    NOISE_VARIANCE
}

fn default_z_max() -> f64 {
    DEFAULT_Z_MAX
}

fn default_eps_margin() -> f64 {
    DEFAULT_EPS_MARGIN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    None {},
    Noise {
        #[serde(default = "default_noise_mean")]
        mean: f64,
        #[serde(default = "default_noise_variance")]
        variance: f64,
    },
    Alie {
        #[serde(default = "default_z_max")]
        z_max: f64,
    },
    Ipm {
        epsilon: f64,
    },
    SignFlip {},
    LabelFlip {},
    AdaptiveClipped {
        #[serde(default = "default_eps_margin")]
        eps_margin: f64,
    },
}

/// How a client runs its local optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalTraining {
    Descent,
    /// Gradient ascent: under FedSGD the uploaded gradient is negated,
    /// under FedAvg every local step moves along `+eta * grad`.
    Ascent,
}

impl LocalTraining {
    pub fn sign(self) -> f64 {
        match self {
            Self::Descent => 1.0,
            Self::Ascent => -1.0,
        }
    }
}

impl AttackSpec {
    pub fn none() -> Self {
        Self::None {}
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None {} => "none",
            Self::Noise { .. } => "noise",
            Self::Alie { .. } => "alie",
            Self::Ipm { .. } => "ipm",
            Self::SignFlip {} => "sign_flip",
            Self::LabelFlip {} => "label_flip",
            Self::AdaptiveClipped { .. } => "adaptive_clipped",
        }
    }

    /// File-name friendly label that includes the distinguishing parameter.
    pub fn label(&self) -> String {
        match self {
            Self::Ipm { epsilon } => format!("ipm_eps{epsilon}"),
            Self::Alie { z_max } => format!("alie_z{z_max}"),
            other => other.name().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Noise { variance, .. } if !(variance >= 0.0) => {
                Err(invalid("variance", format!("must be nonnegative, got {variance}")))
            }
            Self::Alie { z_max } if !(z_max >= 0.0) => Err(invalid("z_max", format!("must be nonnegative, got {z_max}"))),
            Self::Ipm { epsilon } if !(epsilon >= 0.0) => {
                Err(invalid("epsilon", format!("must be nonnegative, got {epsilon}")))
            }
            Self::AdaptiveClipped { eps_margin } if !(eps_margin >= 0.0) => {
                Err(invalid("eps_margin", format!("must be nonnegative, got {eps_margin}")))
            }
            _ => Ok(()),
        }
    }

    pub fn local_training(&self) -> LocalTraining {
        match self {
            Self::SignFlip {} => LocalTraining::Ascent,
            _ => LocalTraining::Descent,
        }
    }

    pub fn flips_labels(&self) -> bool {
        matches!(self, Self::LabelFlip {})
    }

    /// Whether Byzantine clients still compute an honest update each round.
    /// Noise perturbs it; the training-time attacks upload it directly.
    pub fn byzantine_clients_train(&self) -> bool {
        matches!(
            self,
            Self::None {} | Self::Noise { .. } | Self::SignFlip {} | Self::LabelFlip {}
        )
    }

    /// Whether uploads are synthesized after the benign round completes.
    pub fn is_omniscient(&self) -> bool {
        matches!(
            self,
            Self::Noise { .. } | Self::Alie { .. } | Self::Ipm { .. } | Self::AdaptiveClipped { .. }
        )
    }
}

/// What the attacker knows when crafting a round's uploads.
#[derive(Clone, Debug)]
pub struct AttackContext<'a> {
    pub benign_updates: &'a [UpdateVector],
    /// The Byzantine clients' own honestly computed updates, when they
    /// trained this round.
    pub own_updates: &'a [UpdateVector],
    pub num_clients: usize,
    pub num_byzantine: usize,
    pub server_tau: Option<f64>,
    pub server_linkage: Linkage,
}

impl AttackContext<'_> {
    fn check(&self) -> Result<usize> {
        if self.num_byzantine * 2 >= self.num_clients {
            return Err(invalid(
                "byzantine",
                format!(
                    "M = {} of K = {} violates the benign-majority assumption",
                    self.num_byzantine, self.num_clients
                ),
            ));
        }
        common_dim(self.benign_updates)
    }
}

/// Synthesizes the `M` Byzantine uploads for an omniscient attack.
pub fn craft(spec: &AttackSpec, ctx: &AttackContext<'_>, rng: &mut impl Rng) -> Result<Vec<UpdateVector>> {
    match *spec {
        AttackSpec::Noise { mean, variance } => noise_attack(ctx.own_updates, mean, variance, rng),
        AttackSpec::Alie { z_max } => alie_attack(ctx, z_max),
        AttackSpec::Ipm { epsilon } => ipm_attack(ctx, epsilon),
        AttackSpec::AdaptiveClipped { eps_margin } => Ok(adaptive_attack(ctx, eps_margin)?.updates),
        _ => Err(invalid("attack", format!("`{}` does not synthesize uploads", spec.name()))),
    }
}

/// Adds i.i.d. `N(mean, variance)` noise to each honest update.
pub fn noise_attack(
    own_updates: &[UpdateVector],
    mean: f64,
    variance: f64,
    rng: &mut impl Rng,
) -> Result<Vec<UpdateVector>> {
    let normal = Normal::new(mean, variance.sqrt()).map_err(|e| invalid("variance", e.to_string()))?;
    own_updates
        .iter()
        .map(|u| UpdateVector::new(u.iter().map(|v| v + normal.sample(rng)).collect()))
        .collect()
}

/// Coordinate-wise mean and population standard deviation.
pub fn coordinate_moments(updates: &[UpdateVector]) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = common_dim(updates)?;
    let n = updates.len() as f64;
    let mut mu = vec![0.0; dim];
    for u in updates {
        mu.iter_mut().zip(u.iter()).for_each(|(m, v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for u in updates {
        for ((s, v), m) in var.iter_mut().zip(u.iter()).zip(&mu) {
            *s += (v - m) * (v - m);
        }
    }
    let sd = var.into_iter().map(|s| (s / n).sqrt()).collect();
    Ok((mu, sd))
}

/// All Byzantine uploads set to `mu - z_max * sigma`.
pub fn alie_attack(ctx: &AttackContext<'_>, z_max: f64) -> Result<Vec<UpdateVector>> {
    ctx.check()?;
    let (mu, sd) = coordinate_moments(ctx.benign_updates)?;
    let v = UpdateVector::new(mu.iter().zip(&sd).map(|(m, s)| m - z_max * s).collect())?;
    Ok(vec![v; ctx.num_byzantine])
}

/// All Byzantine uploads set to `-(epsilon / (K - M)) * sum(benign)`.
pub fn ipm_attack(ctx: &AttackContext<'_>, epsilon: f64) -> Result<Vec<UpdateVector>> {
    let dim = ctx.check()?;
    let mut sum = vec![0.0; dim];
    for u in ctx.benign_updates {
        sum.iter_mut().zip(u.iter()).for_each(|(s, v)| *s += v);
    }
    let scale = -epsilon / (ctx.num_clients - ctx.num_byzantine) as f64;
    let v = UpdateVector::new(sum.into_iter().map(|s| s * scale).collect())?;
    Ok(vec![v; ctx.num_byzantine])
}

/// The scalar `c` with `mean(all K updates) = c * sum(benign)` under IPM.
pub fn ipm_mean_coefficient(k: usize, m: usize, epsilon: f64) -> f64 {
    let (k, m) = (k as f64, m as f64);
    (k - m * (1.0 + epsilon)) / (k * (k - m))
}

/// `L - label - 1`.
pub fn label_flip_transform(label: usize, num_classes: usize) -> Result<usize> {
    if label >= num_classes {
        return Err(Error::LabelOutOfRange {
            label,
            classes: num_classes,
        });
    }
    Ok(num_classes - label - 1)
}

/// Intermediate geometry of the adaptive attack, exposed for inspection.
#[derive(Clone, Debug)]
pub struct AdaptivePlan {
    /// Unit benign mean.
    pub e: Vec<f64>,
    /// Unit center of the larger benign cluster.
    pub e_prime: Vec<f64>,
    /// Unit direction of the malicious uploads.
    pub e1: Vec<f64>,
    /// Angle between `e` and `e_prime`.
    pub theta: f64,
    /// Angle between `e1` and `e_prime`.
    pub theta_prime: f64,
    /// Similarity bound between the benign clusters.
    pub delta: f64,
    pub degenerate: bool,
    pub updates: Vec<UpdateVector>,
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = l2_norm(v);
    (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
}

/// A unit vector orthogonal to unit vector `e`, built from the standard
/// basis vector where `e` is smallest in magnitude.
fn orthogonal_unit(e: &[f64]) -> Vec<f64> {
    let pivot = (0..e.len())
        .min_by(|&a, &b| e[a].abs().total_cmp(&e[b].abs()))
        .unwrap_or(0);
    let mut u: Vec<f64> = e.iter().map(|x| -e[pivot] * x).collect();
    u[pivot] += 1.0;
    unit(&u).unwrap_or_else(|| {
        let mut fallback = vec![0.0; e.len()];
        fallback[pivot] = 1.0;
        fallback
    })
}

/// Unit vector at angle `theta_prime` from `e_prime`, rotated away from
/// `e` within the plane they span.
pub fn rotate_away(e: &[f64], e_prime: &[f64], theta_prime: f64) -> (Vec<f64>, bool) {
    if theta_prime == 0.0 {
        return (e_prime.to_vec(), false);
    }
    let cos_t = dot(e, e_prime).clamp(-1.0, 1.0);
    let theta = cos_t.acos();
    let sin_t = theta.sin();
    if sin_t.abs() < 1e-9 || e.len() < 2 {
        let u = orthogonal_unit(e_prime);
        let e1 = e_prime
            .iter()
            .zip(&u)
            .map(|(p, q)| theta_prime.cos() * p + theta_prime.sin() * q)
            .collect();
        return (e1, true);
    }
    let tan_t = theta.tan();
    let a = (theta + theta_prime).cos() - (theta + theta_prime).sin() / tan_t;
    let b = theta_prime.cos() + theta_prime.sin() / tan_t;
    (e.iter().zip(e_prime).map(|(x, y)| a * x + b * y).collect(), false)
}

/// Crafts uploads that stay inside the server's majority cluster while
/// pointing as far from the benign mean as that allows, scaled to the
/// server's clipping threshold.
pub fn adaptive_attack(ctx: &AttackContext<'_>, eps_margin: f64) -> Result<AdaptivePlan> {
    ctx.check()?;
    let tau = ctx
        .server_tau
        .ok_or_else(|| invalid("server_tau", "the adaptive attack needs the server's clipping threshold"))?;
    let benign = ctx.benign_updates;
    if benign.len() < 2 {
        return Err(Error::TooFewUpdates {
            required: 2,
            found: benign.len(),
        });
    }
    let dist = DistanceMatrix::cosine(benign)?;
    let groups = agglomerate(&dist, ctx.server_linkage)?;
    let cross = groups
        .first
        .iter()
        .flat_map(|&i| groups.second.iter().map(move |&j| (i, j)))
        .map(|(i, j)| 1.0 - dist.get(i, j));
    let delta = match ctx.server_linkage {
        Linkage::Average => {
            let n = (groups.first.len() * groups.second.len()) as f64;
            cross.sum::<f64>() / n
        }
        Linkage::Complete => cross.fold(f64::INFINITY, f64::min),
    }
    .clamp(-1.0, 1.0);

    let dim = benign[0].dim();
    let mut total = vec![0.0; dim];
    for u in benign {
        total.iter_mut().zip(u.iter()).for_each(|(t, v)| *t += v);
    }
    let majority = select_majority(&groups, &dist);
    let mut center = vec![0.0; dim];
    for &i in &majority {
        center.iter_mut().zip(benign[i].iter()).for_each(|(c, v)| *c += v);
    }
    let e = unit(&total).ok_or(Error::Empty("nonzero benign mean"))?;
    let e_prime = unit(&center).ok_or(Error::Empty("nonzero majority center"))?;

    let theta = dot(&e, &e_prime).clamp(-1.0, 1.0).acos();
    let theta_prime = (delta.acos() - eps_margin).max(0.0);
    let (e1, degenerate) = rotate_away(&e, &e_prime, theta_prime);
    let upload = UpdateVector::new(e1.iter().map(|x| tau * x).collect())?;
    Ok(AdaptivePlan {
        e,
        e_prime,
        e1,
        theta,
        theta_prime,
        delta,
        degenerate,
        updates: vec![upload; ctx.num_byzantine],
    })
}
