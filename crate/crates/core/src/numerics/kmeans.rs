use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    /// Rows are L2-normalized, then clustered with the Euclidean metric.
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::argument(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// `k × d`; for the cosine metric these live in the normalized space.
    pub centroids: Array2<f64>,
    /// Within-cluster sum of squares for the final assignment and centroids.
    pub sse: f64,
    /// SSE after every assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn seed_plus_plus(data: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::zeros((k, data.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(first))).collect();
    let mut chosen = vec![first];
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in closest.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // every point coincides with a chosen centroid
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(pick);
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), data.row(pick)));
        }
    }
    centroids
}

fn assign(data: ArrayView2<'_, f64>, centroids: &Array2<f64>, out: &mut [usize]) -> f64 {
    let mut sse = 0.0;
    for (i, row) in data.axis_iter(Axis(0)).enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.axis_iter(Axis(0)).enumerate() {
            let d = sq_dist(row, centroid);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        out[i] = best;
        sse += best_d;
    }
    sse
}

/// Lloyd's algorithm with k-means++ seeding, deterministic for a given seed.
///
/// Empty clusters keep their previous centroid. Ties go to the lowest
/// centroid index.
pub fn kmeans(
    data: ArrayView2<'_, f64>,
    k: usize,
    metric: Metric,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansResult> {
    let n = data.nrows();
    if k == 0 || k > n {
        return Err(Error::argument(format!("k must lie in 1..={n}, got {k}")));
    }
    let normalized;
    let data = match metric {
        Metric::Euclidean => data,
        Metric::Cosine => {
            let mut m = data.to_owned();
            for (i, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
                let norm = row.dot(&row).sqrt();
                if norm == 0.0 {
                    return Err(Error::Data(format!(
                        "row {i} has zero norm; cosine metric is undefined"
                    )));
                }
                row.mapv_inplace(|v| v / norm);
            }
            normalized = m;
            normalized.view()
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(data, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut next = vec![0usize; n];
    let mut sse_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters.max(1) {
        iterations += 1;
        let sse = assign(data, &centroids, &mut next);
        sse_history.push(sse);
        if next == assignments {
            converged = true;
            break;
        }
        assignments.copy_from_slice(&next);
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &data.row(i));
            counts[c] += 1;
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / count as f64));
            }
        }
    }
    if !converged {
        // assignments lag one step behind `next` when the budget ran out
        assignments.copy_from_slice(&next);
    }
    let sse = assignments
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(data.row(i), centroids.row(c)))
        .sum();

    Ok(KMeansResult {
        assignments,
        centroids,
        sse,
        sse_history,
        iterations,
        converged,
    })
}
