//! k-means over canonical normal sets.

use log::debug;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centers: Vec<Vec<f64>>,
    /// Training-sample assignments (not persisted).
    #[serde(skip)]
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each Lloyd iteration (not persisted).
    #[serde(skip)]
    pub objective: Vec<f64>,
}

impl ClusterModel {
    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = dist2(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Nearest center by Euclidean distance; ties go to the lowest id.
pub fn assign_cluster(model: &ClusterModel, feature: &[f64]) -> Result<usize> {
    if feature.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), actual: feature.len() });
    }
    Ok(nearest(&model.centers, feature).0)
}

fn plus_plus_seeds<R: Rng>(features: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centers = vec![features[rng.random_range(0..features.len())].clone()];
    let mut d2: Vec<f64> = features.iter().map(|f| dist2(f, &centers[0])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Every sample coincides with a center already.
            Err(_) => rng.random_range(0..features.len()),
        };
        centers.push(features[next].clone());
        let c = centers.last().unwrap();
        for (d, f) in d2.iter_mut().zip(features) {
            *d = d.min(dist2(f, c));
        }
    }
    centers
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when no assignment changes or after `max_iters` updates. A center
/// left without samples is moved onto the sample farthest from its own center.
pub fn kmeans_cluster<R: Rng>(features: &[Vec<f64>], k: usize, rng: &mut R, max_iters: usize) -> Result<ClusterModel> {
    if k == 0 || k > features.len() {
        return Err(Error::NotEnoughSamples { needed: k.max(1), got: features.len() });
    }
    let dim = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, actual: f.len() });
    }
    let mut centers = plus_plus_seeds(features, k, rng);
    let mut assignments: Vec<usize> = features.iter().map(|f| nearest(&centers, f).0).collect();
    let mut objective = Vec::new();

    for iter in 0..max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (f, &a) in features.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(f) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let (far, _) = features
                    .iter()
                    .zip(&assignments)
                    .enumerate()
                    .map(|(i, (f, &a))| (i, dist2(f, &centers[a])))
                    .fold((0, -1.0), |best, x| if x.1 > best.1 { x } else { best });
                debug!("k-means: cluster {c} empty at iteration {iter}; reseeding at sample {far}");
                centers[c] = features[far].clone();
            }
        }
        let next: Vec<usize> = features.iter().map(|f| nearest(&centers, f).0).collect();
        let changed = next != assignments;
        assignments = next;
        objective.push(features.iter().zip(&assignments).map(|(f, &a)| dist2(f, &centers[a])).sum());
        if !changed {
            break;
        }
    }
    Ok(ClusterModel { centers, assignments, objective })
}
