//! Supervised training: per-sample latents, per-view reconstruction nets and
//! a centroid hinge loss.
//!
//! Training alternates network steps on the masked reconstruction loss with
//! latent steps on reconstruction plus `lambda` times the classification
//! loss. Class centroids are the means of the training latents and are held
//! constant within an epoch. Before testing, the networks are re-tuned on the
//! frozen training latents with the reconstruction loss alone, so test-time
//! latent inference (which cannot see labels) solves the same problem the
//! networks were last fitted to.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MultiViewDataset;
use crate::error::{Error, Result};
use crate::linalg::operator_norm;
use crate::metrics::{accuracy_report, AccuracyReport};
use crate::nn::{Activation, DenseNet};

/// The `N x K` matrix of per-sample latent representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTable(Array2<f64>);

impl LatentTable {
    pub fn new(h: Array2<f64>) -> Result<Self> {
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("latent table has non-finite entries".into()));
        }
        Ok(LatentTable(h))
    }

    pub fn zeros(n: usize, k: usize) -> Self {
        LatentTable(Array2::zeros((n, k)))
    }

    pub fn n_samples(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn row(&self, n: usize) -> ArrayView1<'_, f64> {
        self.0.row(n)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub latent_dim: usize,
    /// Hidden layer widths of every reconstruction net (may be empty).
    pub hidden_dims: Vec<usize>,
    pub lambda: f64,
    pub lr_theta: f64,
    /// Step size for latent updates, applied per sample.
    pub lr_h: f64,
    pub epochs: usize,
    pub inner_theta_iters: usize,
    pub inner_h_iters: usize,
    pub retune_epochs: usize,
    pub test_infer_iters: usize,
    pub seed: u64,
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub l2: f64,
    /// Leave each sample out of its own class centroid.
    pub exclude_self_from_centroid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 32,
            hidden_dims: vec![64],
            lambda: 1.0,
            lr_theta: 0.05,
            lr_h: 0.01,
            epochs: 300,
            inner_theta_iters: 1,
            inner_h_iters: 1,
            retune_epochs: 200,
            test_infer_iters: 300,
            seed: 0,
            convergence_tol: 1e-5,
            convergence_window: 10,
            l2: 0.001,
            exclude_self_from_centroid: false,
        }
    }
}

impl TrainConfig {
    /// Six-view digit features: K = 64, one hidden layer of 200.
    pub fn handwritten() -> Self {
        TrainConfig {
            latent_dim: 64,
            hidden_dims: vec![200],
            lr_theta: 0.001,
            ..Self::default()
        }
    }

    /// Two-view image/text features: K = 128, no hidden layer.
    pub fn cub() -> Self {
        TrainConfig {
            latent_dim: 128,
            hidden_dims: vec![],
            lr_theta: 0.01,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("epochs", self.epochs),
            ("inner_theta_iters", self.inner_theta_iters),
            ("inner_h_iters", self.inner_h_iters),
            ("test_infer_iters", self.test_infer_iters),
            ("convergence_window", self.convergence_window),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden dims must be positive".into()));
        }
        for (name, v) in [("lr_theta", self.lr_theta), ("lr_h", self.lr_h)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda", self.lambda), ("l2", self.l2), ("convergence_tol", self.convergence_tol)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    fn layer_dims(&self, out_dim: usize) -> Vec<usize> {
        let mut dims = vec![self.latent_dim];
        dims.extend(&self.hidden_dims);
        dims.push(out_dim);
        dims
    }
}

/// Per-epoch values of the training objective and its two parts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Entry 0 is the objective at initialisation.
    pub objective: Vec<f64>,
    pub reconstruction: Vec<f64>,
    pub classification: Vec<f64>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedModel {
    pub latent: LatentTable,
    pub recon_nets: Vec<DenseNet>,
    pub retuned_nets: Option<Vec<DenseNet>>,
    /// `C x K`, row `y` is the mean training latent of class `y`.
    pub centroids: Array2<f64>,
    pub train_labels: Vec<usize>,
    pub config: TrainConfig,
    pub trace: TrainTrace,
}

impl SupervisedModel {
    pub fn n_classes(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.recon_nets.iter().map(DenseNet::output_dim).collect()
    }

    /// The nets used for test-time inference and whether they are the
    /// re-tuned ones.
    pub fn inference_nets(&self) -> (&[DenseNet], bool) {
        match &self.retuned_nets {
            Some(nets) => (nets, true),
            None => (&self.recon_nets, false),
        }
    }
}

// ---------------------------------------------------------------------------
// Losses and gradients

fn observed_rows(mask: &Array2<bool>, v: usize) -> Vec<usize> {
    (0..mask.nrows()).filter(|&n| mask[[n, v]]).collect()
}

fn check_shapes(nets: &[DenseNet], h: ArrayView2<f64>, views: &[Array2<f64>], mask: &Array2<bool>) -> Result<()> {
    if nets.len() != views.len() {
        return Err(Error::dim("network count", views.len(), nets.len()));
    }
    if mask.dim() != (h.nrows(), views.len()) {
        return Err(Error::dim("mask rows", h.nrows(), mask.nrows()));
    }
    for (v, (net, x)) in nets.iter().zip(views).enumerate() {
        if net.input_dim() != h.ncols() {
            return Err(Error::dim(format!("view {v} net input"), h.ncols(), net.input_dim()));
        }
        if net.output_dim() != x.ncols() {
            return Err(Error::dim(format!("view {v} net output"), x.ncols(), net.output_dim()));
        }
        if x.nrows() != h.nrows() {
            return Err(Error::dim(format!("view {v} rows"), h.nrows(), x.nrows()));
        }
    }
    Ok(())
}

/// Sum over observed slots of `||f_v(h_n) - x_n^(v)||^2` for one view.
fn view_sq_error(net: &DenseNet, h: ArrayView2<f64>, x: ArrayView2<f64>, rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let out = net.forward(h.select(Axis(0), rows).view())?;
    let target = x.select(Axis(0), rows);
    Ok((&out - &target).mapv(|d| d * d).sum())
}

/// `(1/N) sum_n sum_v s_nv ||f_v(h_n) - x_n^(v)||^2` on raw parts. Unobserved
/// slots are never read.
pub fn masked_reconstruction_loss(
    nets: &[DenseNet],
    h: ArrayView2<f64>,
    views: &[Array2<f64>],
    mask: &Array2<bool>,
) -> Result<f64> {
    check_shapes(nets, h, views, mask)?;
    let n = h.nrows().max(1) as f64;
    let mut total = 0.0;
    for (v, (net, x)) in nets.iter().zip(views).enumerate() {
        total += view_sq_error(net, h, x.view(), &observed_rows(mask, v))?;
    }
    Ok(total / n)
}

pub fn reconstruction_loss(nets: &[DenseNet], latent: &LatentTable, data: &MultiViewDataset) -> Result<f64> {
    masked_reconstruction_loss(nets, latent.view(), data.views(), data.mask())
}

/// Gradient of [`masked_reconstruction_loss`] with respect to `h`, per view
/// in parallel and summed in view order.
pub fn reconstruction_latent_gradient(
    nets: &[DenseNet],
    h: ArrayView2<f64>,
    views: &[Array2<f64>],
    mask: &Array2<bool>,
) -> Result<Array2<f64>> {
    check_shapes(nets, h, views, mask)?;
    let scale = 2.0 / h.nrows().max(1) as f64;
    let parts = nets
        .par_iter()
        .zip(views.par_iter())
        .enumerate()
        .map(|(v, (net, x))| {
            let rows = observed_rows(mask, v);
            if rows.is_empty() {
                return Ok((rows, Array2::zeros((0, h.ncols()))));
            }
            let hv = h.select(Axis(0), &rows);
            let mut upstream = net.forward(hv.view())?;
            upstream -= &x.select(Axis(0), &rows);
            upstream *= scale;
            Ok((rows, net.input_gradient(hv.view(), upstream.view())?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = Array2::zeros(h.raw_dim());
    for (rows, g) in parts {
        for (i, &r) in rows.iter().enumerate() {
            let mut dst = grad.row_mut(r);
            dst += &g.row(i);
        }
    }
    Ok(grad)
}

/// Mean latent per class. Fails if a class has no sample.
pub fn class_centroids(h: ArrayView2<f64>, labels: &[usize], n_classes: usize) -> Result<Array2<f64>> {
    if labels.len() != h.nrows() {
        return Err(Error::dim("label count", h.nrows(), labels.len()));
    }
    let mut sums = Array2::zeros((n_classes, h.ncols()));
    let mut counts = vec![0usize; n_classes];
    for (row, &y) in h.rows().into_iter().zip(labels) {
        if y >= n_classes {
            return Err(Error::Input(format!("label {y} outside 0..{n_classes}")));
        }
        let mut s = sums.row_mut(y);
        s += &row;
        counts[y] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::TrainingState(format!("class {empty} has no training sample")));
    }
    for (mut s, c) in sums.rows_mut().into_iter().zip(counts) {
        s /= c as f64;
    }
    Ok(sums)
}

/// Scores `c_y . h` against every class, ties resolved toward the smaller id.
fn argmax_class(scores: &[f64]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

pub fn classify_latent(centroids: &Array2<f64>, h: ArrayView1<f64>) -> usize {
    let scores: Vec<f64> = centroids.rows().into_iter().map(|c| c.dot(&h)).collect();
    argmax_class(&scores)
}

/// Centroid scores for one training sample. With `loo_counts`, the sample's
/// own class centroid excludes the sample itself.
fn sample_scores(centroids: &Array2<f64>, h: ArrayView1<f64>, y: usize, loo_counts: Option<&[usize]>) -> Vec<f64> {
    centroids
        .rows()
        .into_iter()
        .enumerate()
        .map(|(c, centroid)| match loo_counts {
            Some(counts) if c == y && counts[y] > 1 => {
                let m = counts[y] as f64;
                (centroid.dot(&h) * m - h.dot(&h)) / (m - 1.0)
            }
            _ => centroid.dot(&h),
        })
        .collect()
}

/// Own-class centroid with the sample removed (or the plain centroid).
fn own_centroid(centroids: &Array2<f64>, h: ArrayView1<f64>, y: usize, loo_counts: Option<&[usize]>) -> Array1<f64> {
    match loo_counts {
        Some(counts) if counts[y] > 1 => {
            let m = counts[y] as f64;
            (&centroids.row(y) * m - &h) / (m - 1.0)
        }
        _ => centroids.row(y).to_owned(),
    }
}

fn check_centroids(h: ArrayView2<f64>, labels: &[usize], centroids: &Array2<f64>) -> Result<()> {
    if labels.len() != h.nrows() {
        return Err(Error::dim("label count", h.nrows(), labels.len()));
    }
    if centroids.ncols() != h.ncols() {
        return Err(Error::dim("centroid width", h.ncols(), centroids.ncols()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= centroids.nrows()) {
        return Err(Error::TrainingState(format!("no centroid for class {y}")));
    }
    Ok(())
}

fn hinge_loss(h: ArrayView2<f64>, labels: &[usize], centroids: &Array2<f64>, loo: Option<&[usize]>) -> Result<f64> {
    check_centroids(h, labels, centroids)?;
    let mut total = 0.0;
    for (row, &y) in h.rows().into_iter().zip(labels) {
        let scores = sample_scores(centroids, row, y, loo);
        let pred = argmax_class(&scores);
        if pred != y {
            total += (1.0 + scores[pred] - scores[y]).max(0.0);
        }
    }
    Ok(total / h.nrows().max(1) as f64)
}

/// Mean centroid hinge: for each sample, `max(0, D + c_pred . h - c_y . h)`
/// where `pred` is the best-scoring class and `D` is 1 on a mistake, 0
/// otherwise. Correctly classified samples contribute exactly zero.
pub fn classification_loss(latent: &LatentTable, labels: &[usize], centroids: &Array2<f64>) -> Result<f64> {
    hinge_loss(latent.view(), labels, centroids, None)
}

fn hinge_latent_gradient(
    h: ArrayView2<f64>,
    labels: &[usize],
    centroids: &Array2<f64>,
    loo: Option<&[usize]>,
) -> Result<Array2<f64>> {
    check_centroids(h, labels, centroids)?;
    let scale = 1.0 / h.nrows().max(1) as f64;
    let mut grad = Array2::zeros(h.raw_dim());
    for (n, (row, &y)) in h.rows().into_iter().zip(labels).enumerate() {
        let scores = sample_scores(centroids, row, y, loo);
        let pred = argmax_class(&scores);
        if pred != y {
            let own = own_centroid(centroids, row, y, loo);
            let mut g = grad.row_mut(n);
            g.assign(&((&centroids.row(pred) - &own) * scale));
        }
    }
    Ok(grad)
}

/// Gradient of the classification loss with respect to the latents,
/// centroids held constant.
pub fn classification_latent_gradient(
    latent: &LatentTable,
    labels: &[usize],
    centroids: &Array2<f64>,
) -> Result<Array2<f64>> {
    hinge_latent_gradient(latent.view(), labels, centroids, None)
}

/// Gradient of `recon + lambda * class` with respect to every latent row.
pub fn objective_latent_gradient(
    nets: &[DenseNet],
    latent: &LatentTable,
    data: &MultiViewDataset,
    centroids: &Array2<f64>,
    lambda: f64,
) -> Result<Array2<f64>> {
    let labels = data.require_labels()?;
    let mut grad = reconstruction_latent_gradient(nets, latent.view(), data.views(), data.mask())?;
    if lambda > 0.0 {
        grad.scaled_add(lambda, &classification_latent_gradient(latent, labels, centroids)?);
    }
    Ok(grad)
}

/// One gradient step on every net for the reconstruction loss (plus each
/// net's weight decay). Views are independent and run in parallel.
fn reconstruction_net_step(
    nets: &mut [DenseNet],
    h: ArrayView2<f64>,
    views: &[Array2<f64>],
    rows: &[Vec<usize>],
    n: usize,
    lr: f64,
) -> Result<()> {
    let scale = 2.0 / n.max(1) as f64;
    nets.par_iter_mut()
        .zip(views.par_iter())
        .zip(rows.par_iter())
        .try_for_each(|((net, x), rows)| -> Result<()> {
            if rows.is_empty() {
                return Ok(());
            }
            let hv = h.select(Axis(0), rows);
            let mut upstream = net.forward(hv.view())?;
            upstream -= &x.select(Axis(0), rows);
            upstream *= scale;
            let bundle = net.backward(hv.view(), upstream.view())?;
            net.apply_gradients(&bundle, lr)
        })
}

// ---------------------------------------------------------------------------
// Training

fn class_counts(labels: &[usize], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    labels.iter().for_each(|&y| counts[y] += 1);
    counts
}

pub fn train(data: &MultiViewDataset, config: &TrainConfig) -> Result<SupervisedModel> {
    config.validate()?;
    let labels = data.require_labels()?.to_vec();
    let n_classes = data.n_classes();
    let counts = class_counts(&labels, n_classes);
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::TrainingState(format!("class {empty} has no training sample")));
    }
    let loo = config.exclude_self_from_centroid.then_some(counts.as_slice());

    let n = data.n_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut nets = data
        .view_dims()
        .iter()
        .map(|&d| DenseNet::new_random(&config.layer_dims(d), Activation::SigmoidHidden, config.l2, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut h = Array2::from_shape_fn((n, config.latent_dim), |_| rng.gen_range(-0.01..0.01));
    let rows: Vec<Vec<usize>> = (0..data.n_views()).map(|v| observed_rows(data.mask(), v)).collect();

    let evaluate = |nets: &[DenseNet], h: &Array2<f64>, centroids: &Array2<f64>| -> Result<(f64, f64)> {
        let rec = masked_reconstruction_loss(nets, h.view(), data.views(), data.mask())?;
        let cls = hinge_loss(h.view(), &labels, centroids, loo)?;
        Ok((rec, cls))
    };

    let mut trace = TrainTrace::default();
    let mut centroids = class_centroids(h.view(), &labels, n_classes)?;
    let (rec, cls) = evaluate(&nets, &h, &centroids)?;
    trace.reconstruction.push(rec);
    trace.classification.push(cls);
    trace.objective.push(rec + config.lambda * cls);

    // latent steps are taken per sample, undoing the 1/N of the mean loss
    let h_step = config.lr_h * n as f64;
    for epoch in 0..config.epochs {
        centroids = class_centroids(h.view(), &labels, n_classes)?;
        for _ in 0..config.inner_theta_iters {
            reconstruction_net_step(&mut nets, h.view(), data.views(), &rows, n, config.lr_theta)?;
        }
        for _ in 0..config.inner_h_iters {
            let mut grad = reconstruction_latent_gradient(&nets, h.view(), data.views(), data.mask())?;
            if config.lambda > 0.0 {
                grad.scaled_add(config.lambda, &hinge_latent_gradient(h.view(), &labels, &centroids, loo)?);
            }
            h.scaled_add(-h_step, &grad);
        }
        let (rec, cls) = evaluate(&nets, &h, &centroids)?;
        let objective = rec + config.lambda * cls;
        if !objective.is_finite() {
            return Err(Error::Diverged {
                epoch,
                phase: "supervised training".into(),
            });
        }
        trace.reconstruction.push(rec);
        trace.classification.push(cls);
        trace.objective.push(objective);

        let w = config.convergence_window;
        if config.convergence_tol > 0.0 && trace.objective.len() > w {
            let then = trace.objective[trace.objective.len() - 1 - w];
            if (then - objective).abs() / then.abs().max(1e-12) < config.convergence_tol {
                trace.stopped_early = true;
                break;
            }
        }
    }
    let centroids = class_centroids(h.view(), &labels, n_classes)?;
    Ok(SupervisedModel {
        latent: LatentTable::new(h)?,
        recon_nets: nets,
        retuned_nets: None,
        centroids,
        train_labels: labels,
        config: config.clone(),
        trace,
    })
}

/// Re-fits copies of the reconstruction nets to the frozen training latents
/// with the reconstruction loss only. A step is kept only if it does not
/// increase the view's reconstruction error; otherwise the step size is
/// halved and retried.
pub fn retune(model: &SupervisedModel, data: &MultiViewDataset) -> Result<SupervisedModel> {
    let h = model.latent.view();
    check_shapes(&model.recon_nets, h, data.views(), data.mask())?;
    let n = data.n_samples();
    let scale = 2.0 / n.max(1) as f64;
    let epochs = model.config.retune_epochs;
    let base_lr = model.config.lr_theta;

    let retuned = model
        .recon_nets
        .par_iter()
        .enumerate()
        .map(|(v, net)| -> Result<DenseNet> {
            let mut net = net.clone();
            let rows = observed_rows(data.mask(), v);
            if rows.is_empty() {
                return Ok(net);
            }
            let hv = h.select(Axis(0), &rows);
            let xv = data.view(v).select(Axis(0), &rows);
            let sq_err = |net: &DenseNet| -> Result<f64> {
                Ok((&net.forward(hv.view())? - &xv).mapv(|d| d * d).sum())
            };
            let mut current = sq_err(&net)?;
            let mut lr = base_lr;
            for _ in 0..epochs {
                let mut upstream = net.forward(hv.view())?;
                upstream -= &xv;
                upstream *= scale;
                let bundle = net.backward(hv.view(), upstream.view())?;
                let mut accepted = false;
                for _ in 0..30 {
                    let candidate = net.sgd_step(&bundle, lr)?;
                    let err = sq_err(&candidate)?;
                    if err <= current {
                        net = candidate;
                        current = err;
                        accepted = true;
                        break;
                    }
                    lr *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
            Ok(net)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SupervisedModel {
        retuned_nets: Some(retuned),
        ..model.clone()
    })
}

/// Latent inference for a batch of (possibly partial) samples: starting from
/// zero, gradient steps on each row's masked reconstruction error through
/// the frozen nets. Returns the best iterate per row and whether the
/// re-tuned nets were used.
pub fn infer_latents(model: &SupervisedModel, data: &MultiViewDataset) -> Result<(LatentTable, bool)> {
    let (nets, retuned) = model.inference_nets();
    if !retuned {
        warn!("no re-tuned networks; inferring latents with the training networks");
    }
    let h = infer_with_nets(
        nets,
        data.views(),
        data.mask(),
        model.config.latent_dim,
        model.config.lr_h,
        model.config.test_infer_iters,
    )?;
    Ok((LatentTable::new(h)?, retuned))
}

pub(crate) fn infer_with_nets(
    nets: &[DenseNet],
    views: &[Array2<f64>],
    mask: &Array2<bool>,
    latent_dim: usize,
    lr: f64,
    iters: usize,
) -> Result<Array2<f64>> {
    let n = mask.nrows();
    if let Some(row) = mask.rows().into_iter().position(|r| !r.iter().any(|&s| s)) {
        return Err(Error::Input(format!("sample {row} has no available view")));
    }
    let mut h = Array2::zeros((n, latent_dim));
    check_shapes(nets, h.view(), views, mask)?;
    let rows: Vec<Vec<usize>> = (0..views.len()).map(|v| observed_rows(mask, v)).collect();

    let per_row_error = |h: &Array2<f64>| -> Result<Array1<f64>> {
        let mut err = Array1::zeros(n);
        for (v, (net, x)) in nets.iter().zip(views).enumerate() {
            if rows[v].is_empty() {
                continue;
            }
            let out = net.forward(h.select(Axis(0), &rows[v]).view())?;
            for (i, &r) in rows[v].iter().enumerate() {
                err[r] += out.row(i).iter().zip(x.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        Ok(err)
    };

    let mut best_h = h.clone();
    let mut best_err = per_row_error(&h)?;
    for _ in 0..iters {
        // per-sample gradient: the mean-loss gradient times N
        let mut grad = reconstruction_latent_gradient(nets, h.view(), views, mask)?;
        grad *= n as f64;
        h.scaled_add(-lr, &grad);
        let err = per_row_error(&h)?;
        for r in 0..n {
            if err[r] < best_err[r] {
                best_err[r] = err[r];
                best_h.row_mut(r).assign(&h.row(r));
            }
        }
    }
    Ok(best_h)
}

/// Latent for a single sample given its views and availability flags.
pub fn infer_latent(model: &SupervisedModel, sample_views: &[Array1<f64>], sample_mask: &[bool]) -> Result<Array1<f64>> {
    if sample_views.len() != model.recon_nets.len() || sample_mask.len() != sample_views.len() {
        return Err(Error::dim("sample view count", model.recon_nets.len(), sample_views.len()));
    }
    if !sample_mask.iter().any(|&s| s) {
        return Err(Error::Input("sample has no available view".into()));
    }
    let views: Vec<Array2<f64>> = sample_views
        .iter()
        .zip(sample_mask)
        .map(|(x, &s)| {
            let row = if s { x.clone() } else { Array1::zeros(x.len()) };
            row.insert_axis(Axis(0))
        })
        .collect();
    let mask = Array2::from_shape_vec((1, sample_mask.len()), sample_mask.to_vec()).expect("1 x V");
    let (nets, retuned) = model.inference_nets();
    if !retuned {
        warn!("no re-tuned networks; inferring latents with the training networks");
    }
    let h = infer_with_nets(nets, &views, &mask, model.config.latent_dim, model.config.lr_h, model.config.test_infer_iters)?;
    Ok(h.row(0).to_owned())
}

pub fn classify(model: &SupervisedModel, latent: ArrayView1<f64>) -> usize {
    classify_latent(&model.centroids, latent)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report: AccuracyReport,
    pub predictions: Vec<usize>,
    pub used_retuned_nets: bool,
}

pub fn predict(model: &SupervisedModel, data: &MultiViewDataset) -> Result<(Vec<usize>, bool)> {
    let (h, retuned) = infer_latents(model, data)?;
    Ok((h.view().rows().into_iter().map(|r| classify(model, r)).collect(), retuned))
}

pub fn evaluate(model: &SupervisedModel, test: &MultiViewDataset) -> Result<EvalReport> {
    let labels = test
        .labels()
        .ok_or_else(|| Error::Input("evaluation data has no labels".into()))?;
    let (predictions, used_retuned_nets) = predict(model, test)?;
    Ok(EvalReport {
        report: accuracy_report(&predictions, labels, model.n_classes())?,
        predictions,
        used_retuned_nets,
    })
}

// ---------------------------------------------------------------------------
// Versatility

/// Errors of a linear probe `x -> P_v x` applied to reconstructions versus
/// observations, against the reconstruction error itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VersatilityCheck {
    /// `sum s_nv ||P_v f_v(h_n) - P_v x_n^(v)||^2`
    pub probe_error: f64,
    /// `sum s_nv ||f_v(h_n) - x_n^(v)||^2`
    pub reconstruction_error: f64,
    /// `max_v ||P_v||_2`, the probe's Lipschitz constant.
    pub lipschitz: f64,
}

impl VersatilityCheck {
    /// `probe_error <= lipschitz^2 * reconstruction_error`, up to rounding.
    pub fn bound_holds(&self) -> bool {
        let bound = self.lipschitz * self.lipschitz * self.reconstruction_error;
        self.probe_error <= bound * (1.0 + 1e-12) + 1e-300
    }
}

pub fn versatility_check(
    nets: &[DenseNet],
    latent: &LatentTable,
    data: &MultiViewDataset,
    probes: &[Array2<f64>],
) -> Result<VersatilityCheck> {
    check_shapes(nets, latent.view(), data.views(), data.mask())?;
    if probes.len() != nets.len() {
        return Err(Error::dim("probe count", nets.len(), probes.len()));
    }
    let mut probe_error = 0.0;
    let mut reconstruction_error = 0.0;
    for (v, (net, probe)) in nets.iter().zip(probes).enumerate() {
        if probe.ncols() != net.output_dim() {
            return Err(Error::dim(format!("probe {v} columns"), net.output_dim(), probe.ncols()));
        }
        let rows = observed_rows(data.mask(), v);
        if rows.is_empty() {
            continue;
        }
        let diff = &net.forward(latent.view().select(Axis(0), &rows).view())? - &data.view(v).select(Axis(0), &rows);
        reconstruction_error += diff.mapv(|d| d * d).sum();
        probe_error += diff.dot(&probe.t()).mapv(|d| d * d).sum();
    }
    let lipschitz = probes.iter().map(|p| operator_norm(p.view())).fold(0.0, f64::max);
    Ok(VersatilityCheck {
        probe_error,
        reconstruction_error,
        lipschitz,
    })
}
