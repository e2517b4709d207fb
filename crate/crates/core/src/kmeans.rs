//! Small dense k-means used by the spectral candidate generator.
//! Greedy spread-out (k-means++ style) seeding, Lloyd iterations, several
//! restarts keeping the best inertia. Fully deterministic given the RNG.

use nalgebra::DMatrix;
use rand::Rng;

pub struct KmeansOutcome {
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub distinct: usize,
}

fn sq_dist(data: &DMatrix<f64>, row: usize, center: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (c, &v) in center.iter().enumerate() {
        let d = data[(row, c)] - v;
        acc += d * d;
    }
    acc
}

fn seed_centers<R: Rng>(data: &DMatrix<f64>, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = data.nrows();
    let dim = data.ncols();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centers.push((0..dim).map(|c| data[(first, c)]).collect());
    let mut best = vec![f64::INFINITY; n];
    while centers.len() < k {
        let last = centers.last().unwrap();
        for (row, slot) in best.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(data, row, last));
        }
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (row, &w) in best.iter().enumerate() {
                if target < w {
                    pick = row;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push((0..dim).map(|c| data[(next, c)]).collect());
    }
    centers
}

fn lloyd<R: Rng>(data: &DMatrix<f64>, k: usize, rng: &mut R) -> KmeansOutcome {
    let n = data.nrows();
    let dim = data.ncols();
    let mut centers = seed_centers(data, k, rng);
    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for row in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, center) in centers.iter().enumerate() {
                let d = sq_dist(data, row, center);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if labels[row] != best {
                labels[row] = best;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; dim]; k];
        for row in 0..n {
            counts[labels[row]] += 1;
            for c in 0..dim {
                sums[labels[row]][c] += data[(row, c)];
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // relocate an empty centroid to the point farthest from its
                // current center and try again
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(data, a, &centers[labels[a]])
                            .total_cmp(&sq_dist(data, b, &centers[labels[b]]))
                    })
                    .unwrap();
                centers[j] = (0..dim).map(|c| data[(far, c)]).collect();
                changed = true;
            } else {
                for c in 0..dim {
                    centers[j][c] = sums[j][c] / counts[j] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let inertia: f64 = (0..n).map(|row| sq_dist(data, row, &centers[labels[row]])).sum();
    let mut seen = vec![false; k];
    for &l in &labels {
        seen[l] = true;
    }
    KmeansOutcome {
        labels,
        inertia,
        distinct: seen.iter().filter(|&&s| s).count(),
    }
}

/// Cluster the rows of `data` into `k` groups; `restarts` independent runs,
/// the best inertia among runs that reached k distinct clusters wins.
/// Returns None when no run produced k non-empty clusters.
pub fn kmeans<R: Rng>(
    data: &DMatrix<f64>,
    k: usize,
    restarts: usize,
    rng: &mut R,
) -> Option<Vec<usize>> {
    if k == 0 || k > data.nrows() {
        return None;
    }
    let mut best: Option<KmeansOutcome> = None;
    for _ in 0..restarts {
        let outcome = lloyd(data, k, rng);
        if outcome.distinct == k {
            let better = best
                .as_ref()
                .map(|b| outcome.inertia < b.inertia)
                .unwrap_or(true);
            if better {
                best = Some(outcome);
            }
        }
    }
    best.map(|b| b.labels)
}
