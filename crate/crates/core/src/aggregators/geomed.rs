//! Geometric-median aggregators.
//!
//! `geomed` runs a smoothed Weiszfeld iteration. `autogm` alternates
//! between a weighted Weiszfeld solve for the center and a closed-form
//! simplex projection for the weights.

use log::warn;

use crate::error::{invalid, Error, Result};
use crate::vector::{common_dim, distance, UpdateVector};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeiszfeldOptions {
    /// Floor on distances in the weight denominators.
    pub smoothing: f64,
    /// Stop once the iterate moves less than this (Euclidean).
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for WeiszfeldOptions {
    fn default() -> Self {
        Self {
            smoothing: 1e-8,
            tol: 1e-7,
            max_iters: 1000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub point: UpdateVector,
    pub converged: bool,
    pub iterations: usize,
}

/// `sum_k w_k * ||z - x_k||`.
pub fn weighted_objective(z: &[f64], updates: &[UpdateVector], weights: &[f64]) -> f64 {
    updates
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(u, w)| w * distance(z, u))
        .sum()
}

pub fn objective(z: &[f64], updates: &[UpdateVector]) -> f64 {
    updates.iter().map(|u| distance(z, u)).sum()
}

fn weighted_mean(updates: &[UpdateVector], weights: &[f64], dim: usize) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut z = vec![0.0; dim];
    for (u, w) in updates.iter().zip(weights) {
        if *w > 0.0 {
            let c = w / total;
            z.iter_mut().zip(u.iter()).for_each(|(zi, ui)| *zi += c * ui);
        }
    }
    z
}

/// Weighted Weiszfeld from `start`. The returned point is never worse
/// (in weighted objective) than the weighted mean or any input point with
/// positive weight.
fn weiszfeld(
    updates: &[UpdateVector],
    weights: &[f64],
    start: Vec<f64>,
    opts: &WeiszfeldOptions,
) -> (Vec<f64>, bool, usize) {
    let dim = start.len();
    let mut z = start;
    let mut next = vec![0.0; dim];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        next.iter_mut().for_each(|v| *v = 0.0);
        let mut denom = 0.0;
        for (u, w) in updates.iter().zip(weights) {
            if *w <= 0.0 {
                continue;
            }
            let beta = w / distance(&z, u).max(opts.smoothing);
            denom += beta;
            next.iter_mut().zip(u.iter()).for_each(|(n, ui)| *n += beta * ui);
        }
        next.iter_mut().for_each(|n| *n /= denom);
        let step = distance(&next, &z);
        std::mem::swap(&mut z, &mut next);
        if step < opts.tol {
            converged = true;
            break;
        }
    }

    let mut best_obj = weighted_objective(&z, updates, weights);
    let mut best: Option<Vec<f64>> = None;
    let wmean = weighted_mean(updates, weights, dim);
    let candidates = std::iter::once(wmean.as_slice()).chain(
        updates
            .iter()
            .zip(weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(u, _)| u.as_slice()),
    );
    for c in candidates {
        let obj = weighted_objective(c, updates, weights);
        if obj < best_obj {
            best_obj = obj;
            best = Some(c.to_vec());
        }
    }
    (best.unwrap_or(z), converged, iterations)
}

pub fn geomed_solve(updates: &[UpdateVector], opts: &WeiszfeldOptions) -> Result<Solution> {
    let dim = common_dim(updates)?;
    let weights = vec![1.0; updates.len()];
    let start = weighted_mean(updates, &weights, dim);
    let (z, converged, iterations) = weiszfeld(updates, &weights, start, opts);
    Ok(Solution {
        point: UpdateVector::from_finite(z),
        converged,
        iterations,
    })
}

pub fn geomed(updates: &[UpdateVector], tol: f64, max_iters: usize) -> Result<UpdateVector> {
    let opts = WeiszfeldOptions {
        tol,
        max_iters,
        ..WeiszfeldOptions::default()
    };
    let sol = geomed_solve(updates, &opts)?;
    if !sol.converged {
        warn!("geomed did not converge in {max_iters} iterations; returning best iterate");
    }
    Ok(sol.point)
}

/// Euclidean projection onto the probability simplex
/// `{a : a >= 0, sum(a) = 1}`.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut shift = 0.0;
    for (i, s) in sorted.iter().enumerate() {
        cumulative += s;
        let candidate = (cumulative - 1.0) / (i + 1) as f64;
        if s - candidate > 0.0 {
            shift = candidate;
        }
    }
    v.iter().map(|x| (x - shift).max(0.0)).collect()
}

#[derive(Clone, Debug)]
pub struct AutoGmSolution {
    pub point: UpdateVector,
    pub weights: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Joint AutoGM objective `sum_k a_k ||z - x_k|| + lambda/2 ||a||^2`.
pub fn autogm_objective(z: &[f64], weights: &[f64], updates: &[UpdateVector], lambda: f64) -> f64 {
    weighted_objective(z, updates, weights) + 0.5 * lambda * weights.iter().map(|a| a * a).sum::<f64>()
}

/// Optimal weights for a fixed center: the projection of `-d / lambda`.
pub fn autogm_weights(z: &[f64], updates: &[UpdateVector], lambda: f64) -> Vec<f64> {
    let scaled: Vec<f64> = updates.iter().map(|u| -distance(z, u) / lambda).collect();
    project_to_simplex(&scaled)
}

pub fn autogm_solve(updates: &[UpdateVector], lambda: f64, opts: &WeiszfeldOptions) -> Result<AutoGmSolution> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", format!("must be positive and finite, got {lambda}")));
    }
    let dim = common_dim(updates)?;
    let mut weights = vec![1.0 / updates.len() as f64; updates.len()];
    let start = weighted_mean(updates, &weights, dim);
    let (mut z, _, _) = weiszfeld(updates, &weights, start, opts);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        weights = autogm_weights(&z, updates, lambda);
        let (next, _, _) = weiszfeld(updates, &weights, z.clone(), opts);
        let step = distance(&next, &z);
        z = next;
        if step < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(AutoGmSolution {
        point: UpdateVector::from_finite(z),
        weights,
        converged,
        iterations,
    })
}

pub fn autogm(updates: &[UpdateVector], lambda: f64, tol: f64, max_iters: usize) -> Result<UpdateVector> {
    if updates.is_empty() {
        return Err(Error::Empty("update list"));
    }
    let opts = WeiszfeldOptions {
        tol,
        max_iters,
        ..WeiszfeldOptions::default()
    };
    let sol = autogm_solve(updates, lambda, &opts)?;
    if !sol.converged {
        warn!("autogm did not converge in {max_iters} iterations; returning best iterate");
    }
    Ok(sol.point)
}
