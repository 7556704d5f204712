//! Error metrics, ECDFs and k-means.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Relative percent error `100 |x̂ − x| / |mean(pool)|`.
pub fn rpe_with(estimates: &[f64], truths: &[f64], normalizer: f64) -> Result<Vec<f64>> {
    check_len("estimates", truths.len(), estimates.len())?;
    let d = normalizer.abs();
    if !(d > 1e-12) {
        return Err(Error::InvalidInput(format!("degenerate RPE normalizer {normalizer}")));
    }
    Ok(estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| 100.0 * (e - t).abs() / d)
        .collect())
}

/// RPE normalized by the mean of `truths` itself.
pub fn rpe(estimates: &[f64], truths: &[f64]) -> Result<Vec<f64>> {
    if truths.is_empty() {
        return Err(Error::InvalidInput("empty RPE pool".into()));
    }
    let mean = truths.iter().sum::<f64>() / truths.len() as f64;
    rpe_with(estimates, truths, mean)
}

/// Right-continuous ECDF points `(value, fraction ≤ value)`, one per distinct value.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (i, &x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = frac,
            _ => out.push((x, frac)),
        }
    }
    out
}

/// Linear-interpolation quantile (type 7).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len().max(1) as f64;
    Summary {
        mean: values.iter().sum::<f64>() / n,
        min: quantile(values, 0.0),
        q1: quantile(values, 0.25),
        median: quantile(values, 0.5),
        q3: quantile(values, 0.75),
        max: quantile(values, 1.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centers: Vec<DVector<f64>>,
    /// Sum of squared distances after each Lloyd iteration.
    pub distortion: Vec<f64>,
}

fn nearest(x: &DVector<f64>, centers: &[DVector<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = (x - c).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd iterations from a seeded k-means++ start, at most 100 rounds.
pub fn kmeans(points: &[DVector<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidInput(format!("k = {k} with {} points", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut idx = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            // all remaining points coincide with a center
            rng.random_range(0..points.len())
        };
        centers.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min((p - &centers[centers.len() - 1]).norm_squared());
        }
    }
    let mut assignments = vec![usize::MAX; points.len()];
    let mut distortion = Vec::new();
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (j, _) = nearest(p, &centers);
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = points[0].len();
        let mut sums = vec![DVector::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            sums[assignments[i]] += p;
            counts[assignments[i]] += 1;
        }
        for j in 0..k {
            // empty clusters keep their previous center
            if counts[j] > 0 {
                centers[j] = &sums[j] / counts[j] as f64;
            }
        }
        let after: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &j)| (p - &centers[j]).norm_squared())
            .sum();
        distortion.push(after);
    }
    Ok(KMeans {
        assignments,
        centers,
        distortion,
    })
}
