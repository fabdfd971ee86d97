//! Reference imputers and feature-concatenation classifiers.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MultiViewDataset;
use crate::error::{Error, Result};
use crate::linalg::{operator_norm, to_dmatrix};
use crate::metrics::{accuracy_report, AccuracyReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftImputeConfig {
    /// Maximum rank kept per iteration; `None` keeps every singular value.
    pub rank: Option<usize>,
    /// Singular value shrinkage; `None` picks it on held-out observed entries.
    pub tau: Option<f64>,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SoftImputeConfig {
    fn default() -> Self {
        SoftImputeConfig {
            rank: None,
            tau: None,
            max_iters: 200,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImputerKind {
    GlobalMean,
    ClassMean,
    SvdSoftImpute(SoftImputeConfig),
}

impl ImputerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ImputerKind::GlobalMean => "global_mean",
            ImputerKind::ClassMean => "class_mean",
            ImputerKind::SvdSoftImpute(_) => "svd_soft_impute",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ImputerKind::SvdSoftImpute(cfg) = self {
            if cfg.rank == Some(0) {
                return Err(Error::Config("soft-impute rank must be at least 1".into()));
            }
            if let Some(tau) = cfg.tau {
                if !(tau >= 0.0) || !tau.is_finite() {
                    return Err(Error::Config(format!("soft-impute tau must be non-negative, got {tau}")));
                }
            }
        }
        Ok(())
    }
}

/// A cell that could not be filled as requested and used a fallback value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackFlag {
    pub view: usize,
    /// Class whose statistics were missing; `None` for a fully unobserved view.
    pub class: Option<usize>,
    pub feature: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationOutcome {
    /// Every slot filled; the mask is all ones.
    pub data: MultiViewDataset,
    /// Which slots were imputed.
    pub imputed: Array2<bool>,
    pub fallbacks: Vec<FallbackFlag>,
    /// Per-view soft-impute runs, empty for the mean imputers.
    pub soft_impute: Vec<SoftImputeResult>,
}

impl ImputationOutcome {
    pub fn views(&self) -> &[Array2<f64>] {
        self.data.views()
    }
}

fn column_means(x: ArrayView2<f64>, rows: &[usize]) -> Option<Array1<f64>> {
    if rows.is_empty() {
        return None;
    }
    let mut sum = Array1::zeros(x.ncols());
    for &r in rows {
        sum += &x.row(r);
    }
    Some(sum / rows.len() as f64)
}

pub fn impute_baseline(data: &MultiViewDataset, kind: &ImputerKind) -> Result<ImputationOutcome> {
    kind.validate()?;
    let mask = data.mask();
    let mut fallbacks = Vec::new();
    let mut soft_runs = Vec::new();
    let mut views = data.views().to_vec();
    match kind {
        ImputerKind::GlobalMean => {
            for (v, x) in views.iter_mut().enumerate() {
                fill_global(x, mask, v, &mut fallbacks);
            }
        }
        ImputerKind::ClassMean => {
            let labels = data
                .labels()
                .ok_or_else(|| Error::Input("class-mean imputation needs labels".into()))?;
            let n_classes = data.n_classes();
            for (v, x) in views.iter_mut().enumerate() {
                let observed: Vec<usize> = (0..x.nrows()).filter(|&n| mask[[n, v]]).collect();
                let global = column_means(x.view(), &observed);
                for c in 0..n_classes {
                    let rows: Vec<usize> = observed.iter().copied().filter(|&n| labels[n] == c).collect();
                    let missing: Vec<usize> = (0..x.nrows()).filter(|&n| !mask[[n, v]] && labels[n] == c).collect();
                    if missing.is_empty() {
                        continue;
                    }
                    let fill = match column_means(x.view(), &rows) {
                        Some(m) => m,
                        None => {
                            fallbacks.extend((0..x.ncols()).map(|feature| FallbackFlag {
                                view: v,
                                class: Some(c),
                                feature,
                            }));
                            global.clone().unwrap_or_else(|| Array1::zeros(x.ncols()))
                        }
                    };
                    for &n in &missing {
                        x.row_mut(n).assign(&fill);
                    }
                }
            }
        }
        ImputerKind::SvdSoftImpute(cfg) => {
            let results = views
                .par_iter()
                .enumerate()
                .map(|(v, x)| {
                    let observed = Array2::from_shape_fn(x.dim(), |(n, _)| mask[[n, v]]);
                    soft_impute_auto(x.view(), observed.view(), cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            for (v, (x, run)) in views.iter_mut().zip(&results).enumerate() {
                for n in 0..x.nrows() {
                    if !mask[[n, v]] {
                        x.row_mut(n).assign(&run.filled.row(n));
                    }
                }
                if !mask.column(v).iter().any(|&s| s) {
                    fallbacks.extend((0..x.ncols()).map(|feature| FallbackFlag { view: v, class: None, feature }));
                }
            }
            soft_runs = results;
        }
    }
    let full = Array2::from_elem(mask.raw_dim(), true);
    let filled = MultiViewDataset::with_classes(
        views,
        full,
        data.labels().map(<[usize]>::to_vec),
        Some(data.view_names().to_vec()),
        data.n_classes(),
    )?;
    Ok(ImputationOutcome {
        data: filled,
        imputed: mask.mapv(|s| !s),
        fallbacks,
        soft_impute: soft_runs,
    })
}

fn fill_global(x: &mut Array2<f64>, mask: &Array2<bool>, v: usize, fallbacks: &mut Vec<FallbackFlag>) {
    let observed: Vec<usize> = (0..x.nrows()).filter(|&n| mask[[n, v]]).collect();
    let fill = column_means(x.view(), &observed).unwrap_or_else(|| {
        fallbacks.extend((0..x.ncols()).map(|feature| FallbackFlag { view: v, class: None, feature }));
        Array1::zeros(x.ncols())
    });
    for n in 0..x.nrows() {
        if !mask[[n, v]] {
            x.row_mut(n).assign(&fill);
        }
    }
}

// ---------------------------------------------------------------------------
// Soft-impute

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftImputeResult {
    /// Observed entries unchanged, the rest from the low-rank estimate.
    pub filled: Array2<f64>,
    pub tau: f64,
    pub iterations: usize,
    /// `0.5 * ||P_obs(X - Z)||^2 + tau * ||Z||_*` after every iteration.
    pub objective: Vec<f64>,
    pub converged: bool,
}

/// Rank-truncated, soft-thresholded SVD of `m`; returns the estimate and its
/// nuclear norm.
fn shrink(m: &Array2<f64>, tau: f64, rank: usize) -> (Array2<f64>, f64) {
    let svd = to_dmatrix(m.view()).svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut z = Array2::zeros(m.raw_dim());
    let mut nuclear = 0.0;
    for &i in order.iter().take(rank) {
        let s = (svd.singular_values[i] - tau).max(0.0);
        if s == 0.0 {
            break;
        }
        nuclear += s;
        z += &Array2::from_shape_fn(m.raw_dim(), |(r, c)| s * u[(r, i)] * vt[(i, c)]);
    }
    (z, nuclear)
}

/// Iterative soft-thresholded SVD completion of `x` where `observed` marks
/// the known entries. Missing entries start at their column means.
pub fn soft_impute(
    x: ArrayView2<f64>,
    observed: ArrayView2<bool>,
    tau: f64,
    rank: Option<usize>,
    max_iters: usize,
    tol: f64,
) -> Result<SoftImputeResult> {
    if x.dim() != observed.dim() {
        return Err(Error::dim("observed mask size", x.len(), observed.len()));
    }
    if !(tau >= 0.0) {
        return Err(Error::Config(format!("soft-impute tau must be non-negative, got {tau}")));
    }
    let (n, d) = x.dim();
    let rank = rank.unwrap_or(n.min(d)).min(n.min(d));
    let mut filled = x.to_owned();
    for j in 0..d {
        let obs: Vec<f64> = (0..n).filter(|&i| observed[[i, j]]).map(|i| x[[i, j]]).collect();
        let mean = if obs.is_empty() { 0.0 } else { obs.iter().sum::<f64>() / obs.len() as f64 };
        for i in 0..n {
            if !observed[[i, j]] {
                filled[[i, j]] = mean;
            }
        }
    }
    let mut objective = Vec::new();
    let mut z_prev: Option<Array2<f64>> = None;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let (z, nuclear) = shrink(&filled, tau, rank);
        let mut fit = 0.0;
        for ((i, j), &o) in observed.indexed_iter() {
            if o {
                fit += (x[[i, j]] - z[[i, j]]).powi(2);
            } else {
                filled[[i, j]] = z[[i, j]];
            }
        }
        objective.push(0.5 * fit + tau * nuclear);
        let change = z_prev.as_ref().map(|p| {
            let num = (&z - p).mapv(|v| v * v).sum();
            num / p.mapv(|v| v * v).sum().max(1e-300)
        });
        z_prev = Some(z);
        if change.is_some_and(|c| c < tol) {
            converged = true;
            break;
        }
    }
    Ok(SoftImputeResult {
        filled,
        tau,
        iterations,
        objective,
        converged,
    })
}

/// Soft-impute with `tau` either fixed or chosen from `{0, 0.01, 0.1}` times
/// the largest singular value by error on held-out observed entries. When
/// every row is either fully observed or fully missing, whole rows are held
/// out so the validation task looks like the real one.
pub fn soft_impute_auto(x: ArrayView2<f64>, observed: ArrayView2<bool>, cfg: &SoftImputeConfig) -> Result<SoftImputeResult> {
    if let Some(tau) = cfg.tau {
        return soft_impute(x, observed, tau, cfg.rank, cfg.max_iters, cfg.tol);
    }
    let row_wise = observed
        .rows()
        .into_iter()
        .all(|r| r.iter().all(|&o| o) || r.iter().all(|&o| !o));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let held: Vec<(usize, usize)> = if row_wise {
        let mut rows: Vec<usize> = (0..x.nrows()).filter(|&i| observed.row(i).iter().any(|&o| o)).collect();
        rows.shuffle(&mut rng);
        rows.truncate(rows.len() / 10);
        rows.iter().flat_map(|&i| (0..x.ncols()).map(move |j| (i, j))).collect()
    } else {
        let mut known: Vec<(usize, usize)> = observed.indexed_iter().filter(|(_, &o)| o).map(|(ij, _)| ij).collect();
        known.shuffle(&mut rng);
        known.truncate(known.len() / 10);
        known
    };
    if held.is_empty() {
        return soft_impute(x, observed, 0.0, cfg.rank, cfg.max_iters, cfg.tol);
    }
    let mut train_mask = observed.to_owned();
    for &ij in &held {
        train_mask[ij] = false;
    }
    let sigma_max = operator_norm(x.view());
    let mut best = (f64::INFINITY, 0.0);
    for frac in [0.0, 0.01, 0.1] {
        let tau = frac * sigma_max;
        let run = soft_impute(x, train_mask.view(), tau, cfg.rank, cfg.max_iters, cfg.tol)?;
        let err: f64 = held.iter().map(|&ij| (run.filled[ij] - x[ij]).powi(2)).sum();
        if err < best.0 {
            best = (err, tau);
        }
    }
    soft_impute(x, observed, best.1, cfg.rank, cfg.max_iters, cfg.tol)
}

// ---------------------------------------------------------------------------
// Feature-concatenation classifiers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierRule {
    NearestCentroid,
    Knn(usize),
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fits `rule` on the concatenated views of `train` and scores `test`.
/// Both datasets must be fully filled.
pub fn concat_classify(train: &MultiViewDataset, test: &MultiViewDataset, rule: ClassifierRule) -> Result<AccuracyReport> {
    if !train.is_complete() || !test.is_complete() {
        return Err(Error::Input("concatenation classifiers need fully filled views".into()));
    }
    if train.view_dims() != test.view_dims() {
        return Err(Error::Input("train and test view dimensions differ".into()));
    }
    let train_labels = train.require_labels()?;
    let test_labels = test
        .labels()
        .ok_or_else(|| Error::Input("test data has no labels".into()))?;
    let n_classes = train.n_classes().max(test.n_classes());
    let xtr = train.concatenated();
    let xte = test.concatenated();
    let predictions: Vec<usize> = match rule {
        ClassifierRule::NearestCentroid => {
            let mut sums = Array2::<f64>::zeros((n_classes, xtr.ncols()));
            let mut counts = vec![0usize; n_classes];
            for (row, &y) in xtr.rows().into_iter().zip(train_labels) {
                let mut s = sums.row_mut(y);
                s += &row;
                counts[y] += 1;
            }
            let present: Vec<usize> = (0..n_classes).filter(|&c| counts[c] > 0).collect();
            for &c in &present {
                let mut s = sums.row_mut(c);
                s /= counts[c] as f64;
            }
            xte.axis_iter(Axis(0))
                .map(|row| {
                    let mut best = (f64::INFINITY, 0);
                    for &c in &present {
                        let d = sq_dist(sums.row(c), row);
                        if d < best.0 {
                            best = (d, c);
                        }
                    }
                    best.1
                })
                .collect()
        }
        ClassifierRule::Knn(k) => {
            if k == 0 || k > xtr.nrows() {
                return Err(Error::Config(format!("k = {k} outside 1..={}", xtr.nrows())));
            }
            xte.axis_iter(Axis(0))
                .map(|row| {
                    let mut dists: Vec<(f64, usize)> = xtr
                        .axis_iter(Axis(0))
                        .enumerate()
                        .map(|(i, r)| (sq_dist(r, row), i))
                        .collect();
                    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    let neighbours = &dists[..k];
                    let mut votes = vec![0usize; n_classes];
                    neighbours.iter().for_each(|&(_, i)| votes[train_labels[i]] += 1);
                    let top = *votes.iter().max().unwrap();
                    // ties go to the class of the closest tied neighbour
                    neighbours
                        .iter()
                        .map(|&(_, i)| train_labels[i])
                        .find(|&c| votes[c] == top)
                        .unwrap()
                })
                .collect()
        }
    };
    accuracy_report(&predictions, test_labels, n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_missing_pattern, synth_dataset, MissingSpec};
    use ndarray::array;
    use rand::Rng;

    fn two_view(mask: Array2<bool>, labels: Vec<usize>) -> MultiViewDataset {
        let a = array![[1.0, 10.0], [3.0, 20.0], [5.0, 30.0], [7.0, 40.0]];
        let b = array![[0.0], [1.0], [2.0], [3.0]];
        MultiViewDataset::new(vec![a, b], mask, Some(labels), None).unwrap()
    }

    #[test]
    fn global_mean_examples() {
        let mask = array![[true, true], [true, true], [false, true], [false, true]];
        let out = impute_baseline(&two_view(mask, vec![0, 1, 0, 1]), &ImputerKind::GlobalMean).unwrap();
        assert_eq!(out.views()[0].row(2), array![2.0, 15.0]);
        assert_eq!(out.views()[0].row(3), array![2.0, 15.0]);
        assert!(out.data.is_complete());
        assert!(out.fallbacks.is_empty());
        assert_eq!(out.imputed.column(0).to_vec(), vec![false, false, true, true]);
    }

    #[test]
    fn class_mean_and_fallback() {
        let mask = array![[true, true], [true, true], [false, true], [false, true]];
        let out = impute_baseline(&two_view(mask.clone(), vec![0, 1, 0, 1]), &ImputerKind::ClassMean).unwrap();
        assert_eq!(out.views()[0].row(2), array![1.0, 10.0]);
        assert_eq!(out.views()[0].row(3), array![3.0, 20.0]);

        // class 2 has no observed view-0 row
        let out = impute_baseline(&two_view(mask.clone(), vec![0, 1, 2, 2]), &ImputerKind::ClassMean).unwrap();
        assert_eq!(out.views()[0].row(2), array![2.0, 15.0]);
        assert_eq!(out.fallbacks.len(), 2);
        assert!(out.fallbacks.iter().all(|f| f.view == 0 && f.class == Some(2)));

        let single = two_view(mask, vec![0, 0, 0, 0]);
        let a = impute_baseline(&single, &ImputerKind::ClassMean).unwrap();
        let b = impute_baseline(&single, &ImputerKind::GlobalMean).unwrap();
        assert_eq!(a.data, b.data);

        assert!(impute_baseline(&single.without_labels(), &ImputerKind::ClassMean).is_err());
    }

    #[test]
    fn imputers_preserve_observed_entries() {
        let data = synth_dataset(60, 3, 4, &[5, 6, 3], 2).unwrap();
        let masked = apply_missing_pattern(&data, &MissingSpec { target_rate: 0.4, seed: 1 }).unwrap();
        for kind in [
            ImputerKind::GlobalMean,
            ImputerKind::ClassMean,
            ImputerKind::SvdSoftImpute(SoftImputeConfig::default()),
        ] {
            let out = impute_baseline(&masked, &kind).unwrap();
            for v in 0..3 {
                for n in 0..60 {
                    if masked.is_observed(n, v) {
                        for (a, b) in out.views()[v].row(n).iter().zip(masked.view(v).row(n)) {
                            assert_eq!(a.to_bits(), b.to_bits());
                        }
                    }
                }
            }
        }
    }

    fn rank_one(n: usize, d: usize, seed: u64) -> (Array2<f64>, Array2<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Array1::from_shape_fn(n, |_| rng.gen_range(0.5..2.0));
        let v = Array1::from_shape_fn(d, |_| rng.gen_range(0.5..2.0));
        let x = Array2::from_shape_fn((n, d), |(i, j)| u[i] * v[j]);
        let mut cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..d).map(move |j| (i, j))).collect();
        cells.shuffle(&mut rng);
        let mut observed = Array2::from_elem((n, d), true);
        for &ij in cells.iter().take(n * d / 5) {
            observed[ij] = false;
        }
        (x, observed)
    }

    #[test]
    fn soft_impute_recovers_rank_one() {
        let (x, observed) = rank_one(30, 12, 4);
        let run = soft_impute(x.view(), observed.view(), 1e-9, Some(1), 2000, 1e-14).unwrap();
        let err = (&run.filled - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-3, "max abs error {err}");

        let mean_err = {
            let data = x.clone();
            let mut filled = data.clone();
            for j in 0..12 {
                let obs: Vec<f64> = (0..30).filter(|&i| observed[[i, j]]).map(|i| data[[i, j]]).collect();
                let m = obs.iter().sum::<f64>() / obs.len() as f64;
                (0..30).filter(|&i| !observed[[i, j]]).for_each(|i| filled[[i, j]] = m);
            }
            (&filled - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        assert!(err < mean_err);
    }

    #[test]
    fn soft_impute_objective_non_increasing() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_fn((15, 8), |_| rng.gen_range(-1.0..1.0));
            let observed = Array2::from_shape_fn((15, 8), |_| rng.gen_bool(0.7));
            for (tau, rank) in [(0.5, None), (0.1, Some(3)), (1.5, Some(2))] {
                let run = soft_impute(x.view(), observed.view(), tau, rank, 100, 0.0).unwrap();
                for w in run.objective.windows(2) {
                    assert!(w[1] <= w[0] * (1.0 + 1e-10) + 1e-12, "{} -> {}", w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn soft_impute_zero_tau_full_mask_is_identity() {
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]];
        let observed = Array2::from_elem((3, 2), true);
        let run = soft_impute(x.view(), observed.view(), 0.0, None, 5, 1e-6).unwrap();
        assert_eq!(run.filled, x);
        assert!(run.objective[0] < 1e-20);
    }

    #[test]
    fn invalid_soft_impute_settings() {
        let kind = ImputerKind::SvdSoftImpute(SoftImputeConfig { rank: Some(0), ..Default::default() });
        assert!(matches!(kind.validate(), Err(Error::Config(_))));
        let kind = ImputerKind::SvdSoftImpute(SoftImputeConfig { tau: Some(-1.0), ..Default::default() });
        assert!(matches!(kind.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn classifier_examples() {
        let data = synth_dataset(30, 3, 4, &[5, 4], 3).unwrap();
        let r = concat_classify(&data, &data, ClassifierRule::Knn(1)).unwrap();
        assert_eq!(r.accuracy, 1.0);

        let one = synth_dataset(10, 1, 2, &[3], 0).unwrap();
        assert_eq!(concat_classify(&one, &one, ClassifierRule::NearestCentroid).unwrap().accuracy, 1.0);
        assert_eq!(concat_classify(&one, &one, ClassifierRule::Knn(3)).unwrap().accuracy, 1.0);
        assert!(matches!(
            concat_classify(&one, &one, ClassifierRule::Knn(11)),
            Err(Error::Config(_))
        ));

        let masked = apply_missing_pattern(&data, &MissingSpec { target_rate: 0.2, seed: 0 }).unwrap();
        assert!(concat_classify(&masked, &data, ClassifierRule::NearestCentroid).is_err());
    }

    #[test]
    fn knn_matches_brute_force() {
        let train = synth_dataset(45, 3, 3, &[4, 3], 7).unwrap();
        let test = synth_dataset(20, 3, 3, &[4, 3], 8).unwrap();
        let xtr = train.concatenated();
        let xte = test.concatenated();
        let ytr = train.labels().unwrap();
        for k in [1, 3, 5] {
            let report = concat_classify(&train, &test, ClassifierRule::Knn(k)).unwrap();
            let mut correct = 0;
            for (i, row) in xte.rows().into_iter().enumerate() {
                let mut d: Vec<(f64, usize)> = (0..45)
                    .map(|j| ((&xtr.row(j) - &row).mapv(|v| v * v).sum(), j))
                    .collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut votes = [0; 3];
                d[..k].iter().for_each(|&(_, j)| votes[ytr[j]] += 1);
                let top = *votes.iter().max().unwrap();
                let pred = d[..k].iter().map(|&(_, j)| ytr[j]).find(|&c| votes[c] == top).unwrap();
                if pred == test.labels().unwrap()[i] {
                    correct += 1;
                }
            }
            assert_eq!(report.accuracy, correct as f64 / 20.0);
        }
    }
}
