//! Classification, imputation and clustering metrics.

use ndarray::{Array2, ArrayView1, ArrayView2};
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KMEANS_MAX_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated labels.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub n_samples: usize,
}

pub fn accuracy_report(predicted: &[usize], truth: &[usize], n_classes: usize) -> Result<AccuracyReport> {
    if predicted.len() != truth.len() {
        return Err(Error::dim("prediction count", truth.len(), predicted.len()));
    }
    if truth.is_empty() {
        return Err(Error::Input("no samples to score".into()));
    }
    let c = predicted
        .iter()
        .chain(truth)
        .copied()
        .max()
        .map_or(n_classes, |m| n_classes.max(m + 1));
    let mut confusion = vec![vec![0usize; c]; c];
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[i] as f64 / total as f64)
        })
        .collect();
    Ok(AccuracyReport {
        accuracy: correct as f64 / truth.len() as f64,
        per_class_accuracy,
        confusion,
        n_samples: truth.len(),
    })
}

/// Output of [`kmeans`] for the best restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub assignments: Vec<usize>,
    pub acc: f64,
    pub nmi: f64,
    pub inertia: f64,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_seed(points: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.gen_range(0..n)));
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(points.row(i), centroids.row(c)));
        }
    }
    centroids
}

fn assign(points: ArrayView2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    points
        .rows()
        .into_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, centroid) in centroids.rows().into_iter().enumerate() {
                let d = sq_dist(p, centroid);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn lloyd(points: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let (n, dim) = points.dim();
    let mut centroids = plus_plus_seed(points, k, rng);
    let (mut assignments, mut dists) = assign(points, &centroids);
    let mut trace = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            let mut row = sums.row_mut(a);
            row += &points.row(i);
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // re-seed the empty cluster at the point worst served so far
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                    .unwrap_or(0);
                centroids.row_mut(c).assign(&points.row(far));
                dists[far] = 0.0;
            }
        }
        let (next, next_dists) = assign(points, &centroids);
        trace.push(next_dists.iter().sum());
        dists = next_dists;
        if next == assignments {
            break;
        }
        assignments = next;
    }
    KMeansResult {
        inertia: *trace.last().unwrap(),
        assignments,
        centroids,
        iterations,
        inertia_trace: trace,
    }
}

/// k-means++ seeding followed by Lloyd iterations; the restart with the
/// lowest inertia wins.
pub fn kmeans(points: ArrayView2<f64>, k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if k > points.nrows() {
        return Err(Error::Config(format!("k = {k} exceeds {} points", points.nrows())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(points, k, &mut rng);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<usize>>, usize, usize) {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    (table, ka, kb)
}

/// Best accuracy over one-to-one cluster-to-class matchings.
pub fn clustering_acc(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(Error::dim("assignment count", labels.len(), assignments.len()));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let (table, ka, kb) = contingency(assignments, labels);
    let size = ka.max(kb);
    let mut weights = Matrix::new(size, size, 0i64);
    for (i, row) in table.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            weights[(i, j)] = count as i64;
        }
    }
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / labels.len() as f64)
}

/// Mutual information normalised by the geometric mean of the entropies
/// (natural log).
pub fn nmi(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(Error::dim("assignment count", labels.len(), assignments.len()));
    }
    let n = labels.len() as f64;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let (table, _, _) = contingency(assignments, labels);
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let col_sums: Vec<f64> = (0..table.first().map_or(0, Vec::len))
        .map(|j| table.iter().map(|r| r[j]).sum::<usize>() as f64)
        .collect();
    let entropy = |sums: &[f64]| -> f64 {
        sums.iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| {
                let p = s / n;
                -p * p.ln()
            })
            .sum()
    };
    let (ha, hb) = (entropy(&row_sums), entropy(&col_sums));
    if ha <= 0.0 && hb <= 0.0 {
        return Ok(1.0);
    }
    if ha <= 0.0 || hb <= 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            if count > 0 {
                let c = count as f64;
                mi += c / n * (c * n / (row_sums[i] * col_sums[j])).ln();
            }
        }
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrmseReport {
    /// `None` for views without any counted slot.
    pub per_view: Vec<Option<f64>>,
    /// Mean over views with counted slots; `None` when nothing was counted.
    pub overall: Option<f64>,
    /// Views whose ground-truth range collapsed and was floored.
    pub degenerate: Vec<bool>,
}

pub const NRMSE_RANGE_FLOOR: f64 = 1e-12;

/// RMSE over the counted rows of each view divided by the value range of the
/// ground truth on those rows. `counted[[n, v]]` selects the slots to score,
/// normally the missing ones.
pub fn nrmse(filled: &[Array2<f64>], truth: &[Array2<f64>], counted: &Array2<bool>) -> Result<NrmseReport> {
    if filled.len() != truth.len() || counted.ncols() != truth.len() {
        return Err(Error::dim("view count", truth.len(), filled.len()));
    }
    let mut per_view = Vec::with_capacity(truth.len());
    let mut degenerate = Vec::with_capacity(truth.len());
    for (v, (f, t)) in filled.iter().zip(truth).enumerate() {
        if f.dim() != t.dim() || t.nrows() != counted.nrows() {
            return Err(Error::dim(format!("view {v} shape"), t.len(), f.len()));
        }
        let rows: Vec<usize> = (0..t.nrows()).filter(|&n| counted[[n, v]]).collect();
        if rows.is_empty() {
            per_view.push(None);
            degenerate.push(false);
            continue;
        }
        let (mut sq, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
        for &n in &rows {
            for (a, b) in f.row(n).iter().zip(t.row(n)) {
                sq += (a - b) * (a - b);
                lo = lo.min(*b);
                hi = hi.max(*b);
            }
        }
        let rmse = (sq / (rows.len() * t.ncols()) as f64).sqrt();
        let range = hi - lo;
        degenerate.push(range < NRMSE_RANGE_FLOOR);
        per_view.push(Some(rmse / range.max(NRMSE_RANGE_FLOOR)));
    }
    let scored: Vec<f64> = per_view.iter().flatten().copied().collect();
    let overall = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(NrmseReport {
        per_view,
        overall,
        degenerate,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (mean, var.sqrt())
}
