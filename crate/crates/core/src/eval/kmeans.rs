//! Seeded k-means with k-means++ initialization and Lloyd iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub k: usize,
    /// Within-cluster sum of squares after each assignment pass.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Clusters the rows of the `n × dim` matrix `data`.
pub fn kmeans(data: &[f64], dim: usize, k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::Internal(format!(
            "{} values do not form rows of width {dim}",
            data.len()
        )));
    }
    let n = data.len() / dim;
    if k == 0 || k > n {
        return Err(Error::Config(format!(
            "cluster count {k} must lie in [1, {n}]"
        )));
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++: first centre uniform, the rest proportional to D².
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(row(i), row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // Every point coincides with a centre; take the first unused row.
            (0..n).find(|i| !chosen.contains(i)).expect("k ≤ n")
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(row(i), row(next)));
        }
    }
    let mut centroids: Vec<f64> = chosen.iter().flat_map(|&i| row(i).to_vec()).collect();

    let mut labels = vec![usize::MAX; n];
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut sse = 0.0;
        for i in 0..n {
            let (best, bd) = (0..k)
                .map(|c| (c, dist2(row(i), &centroids[c * dim..(c + 1) * dim])))
                .fold(
                    (0, f64::INFINITY),
                    |acc, x| if x.1 < acc.1 { x } else { acc },
                );
            sse += bd;
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        sse_history.push(sse);
        if !changed || iterations >= max_iters {
            break;
        }
        iterations += 1;
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = labels[i];
            counts[c] += 1;
            sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(row(i))
                .for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            // An empty cluster keeps its previous centre.
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(KMeans {
        labels,
        centroids,
        k,
        sse_history,
        iterations,
    })
}
