//! Unsupervised training with adversarial imputation.
//!
//! Each view has a generator mapping latents to features and a discriminator
//! scoring feature vectors. Observed entries supervise the generators through
//! the reconstruction loss; entries generated for missing slots are scored
//! against the observed ones by the discriminator of that view.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MultiViewDataset;
use crate::error::{Error, Result};
use crate::metrics::{clustering_acc, kmeans, nmi, nrmse, ClusteringReport, NrmseReport};
use crate::nn::{Activation, DenseNet};
use crate::supervised::{masked_reconstruction_loss, LatentTable};

/// Discriminator outputs are clamped to `[LOG_EPS, 1 - LOG_EPS]` inside logs.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub latent_dim: usize,
    /// Generator hidden widths; discriminators mirror them.
    pub hidden_dims: Vec<usize>,
    /// Step size for generators and discriminators.
    pub lr: f64,
    /// Step size for latent updates, applied per sample.
    pub lr_h: f64,
    pub epochs: usize,
    pub d_steps_per_epoch: usize,
    pub g_steps_per_epoch: usize,
    pub h_steps_per_epoch: usize,
    /// Weight of the adversarial term; 0 disables it.
    pub adv_weight: f64,
    pub seed: u64,
    pub l2: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            latent_dim: 32,
            hidden_dims: vec![64],
            lr: 0.05,
            lr_h: 0.01,
            epochs: 300,
            d_steps_per_epoch: 1,
            g_steps_per_epoch: 1,
            h_steps_per_epoch: 1,
            adv_weight: 1.0,
            seed: 0,
            l2: 0.001,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.epochs == 0 {
            return Err(Error::Config("latent_dim and epochs must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden dims must be positive".into()));
        }
        if self.d_steps_per_epoch == 0 || self.g_steps_per_epoch == 0 || self.h_steps_per_epoch == 0 {
            return Err(Error::Config("steps per epoch must be positive".into()));
        }
        for (name, v) in [("lr", self.lr), ("lr_h", self.lr_h)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adv_weight", self.adv_weight), ("l2", self.l2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    fn generator_dims(&self, d: usize) -> Vec<usize> {
        let mut dims = vec![self.latent_dim];
        dims.extend(&self.hidden_dims);
        dims.push(d);
        dims
    }

    fn discriminator_dims(&self, d: usize) -> Vec<usize> {
        let mut dims = vec![d];
        dims.extend(self.hidden_dims.iter().rev());
        dims.push(1);
        dims
    }
}

/// Loss values recorded after each phase of every epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GanTrace {
    /// Adversarial loss after the discriminator phase.
    pub discriminator: Vec<f64>,
    /// `adv_weight * L_adv + L_rec` after the generator phase.
    pub generator: Vec<f64>,
    /// The same objective after the latent phase.
    pub latent: Vec<f64>,
    /// Reconstruction loss after the latent phase.
    pub reconstruction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialModel {
    pub latent: LatentTable,
    pub generators: Vec<DenseNet>,
    pub discriminators: Vec<DenseNet>,
    pub config: GanConfig,
    pub trace: GanTrace,
}

impl AdversarialModel {
    /// Fresh model: generators, then discriminators, then latents drawn from
    /// one seeded stream.
    pub fn init(view_dims: &[usize], n: usize, config: &GanConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generators = view_dims
            .iter()
            .map(|&d| DenseNet::new_random(&config.generator_dims(d), Activation::SigmoidHidden, config.l2, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let discriminators = view_dims
            .iter()
            .map(|&d| DenseNet::new_random(&config.discriminator_dims(d), Activation::SigmoidAll, config.l2, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let h = Array2::from_shape_fn((n, config.latent_dim), |_| rng.gen_range(-0.01..0.01));
        Ok(AdversarialModel {
            latent: LatentTable::new(h)?,
            generators,
            discriminators,
            config: config.clone(),
            trace: GanTrace::default(),
        })
    }

    fn check(&self, data: &MultiViewDataset) -> Result<()> {
        if data.n_samples() != self.latent.n_samples() {
            return Err(Error::Input(format!(
                "model has {} latent rows but data has {} samples",
                self.latent.n_samples(),
                data.n_samples()
            )));
        }
        if data.view_dims() != self.generators.iter().map(DenseNet::output_dim).collect::<Vec<_>>() {
            return Err(Error::Input("view dimensions differ from the model".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Losses and gradients

fn clamp_prob(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

fn interior(p: f64) -> bool {
    p > LOG_EPS && p < 1.0 - LOG_EPS
}

/// Forward pieces of one view's adversarial term.
struct ViewAdversary {
    observed: Vec<usize>,
    missing: Vec<usize>,
    /// `D(x)` on observed rows.
    d_real: Vec<f64>,
    /// `G(h)` on missing rows and `D` of it.
    fake: Array2<f64>,
    d_fake: Vec<f64>,
}

impl ViewAdversary {
    fn new(gen: &DenseNet, disc: &DenseNet, h: ArrayView2<f64>, x: ArrayView2<f64>, mask: &Array2<bool>, v: usize) -> Result<Option<Self>> {
        let missing: Vec<usize> = (0..h.nrows()).filter(|&n| !mask[[n, v]]).collect();
        if missing.is_empty() {
            return Ok(None);
        }
        let observed: Vec<usize> = (0..h.nrows()).filter(|&n| mask[[n, v]]).collect();
        let d_real = if observed.is_empty() {
            Vec::new()
        } else {
            disc.forward(x.select(Axis(0), &observed).view())?.column(0).to_vec()
        };
        let fake = gen.forward(h.select(Axis(0), &missing).view())?;
        let d_fake = disc.forward(fake.view())?.column(0).to_vec();
        Ok(Some(ViewAdversary {
            observed,
            missing,
            d_real,
            fake,
            d_fake,
        }))
    }

    fn loss(&self) -> f64 {
        let real = if self.d_real.is_empty() {
            0.0
        } else {
            self.d_real.iter().map(|&p| clamp_prob(p).ln()).sum::<f64>() / self.d_real.len() as f64
        };
        let fake = self.d_fake.iter().map(|&p| (1.0 - clamp_prob(p)).ln()).sum::<f64>() / self.d_fake.len() as f64;
        real + fake
    }

    /// d(fake term)/d(D output) per missing row, zero where clamped.
    fn fake_upstream(&self, weight: f64) -> Array2<f64> {
        let m = self.d_fake.len() as f64;
        Array2::from_shape_fn((self.d_fake.len(), 1), |(i, _)| {
            let p = self.d_fake[i];
            if interior(p) {
                -weight / ((1.0 - p) * m)
            } else {
                0.0
            }
        })
    }
}

fn check_models(gens: &[DenseNet], discs: &[DenseNet], h: ArrayView2<f64>, views: &[Array2<f64>], mask: &Array2<bool>) -> Result<()> {
    if gens.len() != views.len() || discs.len() != views.len() {
        return Err(Error::dim("network count", views.len(), gens.len().min(discs.len())));
    }
    if mask.dim() != (h.nrows(), views.len()) {
        return Err(Error::dim("mask rows", h.nrows(), mask.nrows()));
    }
    for (v, ((g, d), x)) in gens.iter().zip(discs).zip(views).enumerate() {
        if g.input_dim() != h.ncols() || g.output_dim() != x.ncols() {
            return Err(Error::dim(format!("view {v} generator output"), x.ncols(), g.output_dim()));
        }
        if d.input_dim() != x.ncols() || d.output_dim() != 1 {
            return Err(Error::dim(format!("view {v} discriminator input"), x.ncols(), d.input_dim()));
        }
        if x.nrows() != h.nrows() {
            return Err(Error::dim(format!("view {v} rows"), h.nrows(), x.nrows()));
        }
    }
    Ok(())
}

/// Sum over views with missing rows of the mean log-score of observed rows
/// plus the mean log(1 - score) of generated rows.
pub fn adversarial_loss_parts(
    gens: &[DenseNet],
    discs: &[DenseNet],
    h: ArrayView2<f64>,
    views: &[Array2<f64>],
    mask: &Array2<bool>,
) -> Result<f64> {
    check_models(gens, discs, h, views, mask)?;
    let mut total = 0.0;
    for v in 0..views.len() {
        if let Some(adv) = ViewAdversary::new(&gens[v], &discs[v], h, views[v].view(), mask, v)? {
            total += adv.loss();
        }
    }
    Ok(total)
}

pub fn adversarial_loss(model: &AdversarialModel, data: &MultiViewDataset) -> Result<f64> {
    model.check(data)?;
    adversarial_loss_parts(&model.generators, &model.discriminators, model.latent.view(), data.views(), data.mask())
}

/// Reconstruction error of the generators on observed slots, divided by N.
pub fn unsup_reconstruction_loss(model: &AdversarialModel, data: &MultiViewDataset) -> Result<f64> {
    model.check(data)?;
    masked_reconstruction_loss(&model.generators, model.latent.view(), data.views(), data.mask())
}

/// Gradient of `-L_adv` (plus weight decay) for one discriminator, or `None`
/// when the view has no missing rows.
pub fn discriminator_gradient(
    gen: &DenseNet,
    disc: &DenseNet,
    h: ArrayView2<f64>,
    x: ArrayView2<f64>,
    mask: &Array2<bool>,
    v: usize,
) -> Result<Option<crate::nn::GradientBundle>> {
    let Some(adv) = ViewAdversary::new(gen, disc, h, x, mask, v)? else {
        return Ok(None);
    };
    let n_real = adv.d_real.len() as f64;
    let real_up = Array2::from_shape_fn((adv.d_real.len(), 1), |(i, _)| {
        let p = adv.d_real[i];
        if interior(p) {
            -1.0 / (p * n_real)
        } else {
            0.0
        }
    });
    // descent on -L_adv flips the sign of the fake term's derivative
    let fake_up = -adv.fake_upstream(1.0);
    let inputs = concatenate(Axis(0), &[x.select(Axis(0), &adv.observed).view(), adv.fake.view()])
        .expect("same width");
    let upstream = concatenate(Axis(0), &[real_up.view(), fake_up.view()]).expect("one column");
    Ok(Some(disc.backward(inputs.view(), upstream.view())?))
}

/// Upstream gradient at one generator's output for
/// `adv_weight * L_adv + L_rec`, one row per sample.
fn generator_upstream(
    gen: &DenseNet,
    disc: &DenseNet,
    h: ArrayView2<f64>,
    x: ArrayView2<f64>,
    mask: &Array2<bool>,
    v: usize,
    adv_weight: f64,
) -> Result<Array2<f64>> {
    let n = h.nrows();
    let mut upstream = Array2::zeros((n, gen.output_dim()));
    let observed: Vec<usize> = (0..n).filter(|&r| mask[[r, v]]).collect();
    if !observed.is_empty() {
        let mut diff = gen.forward(h.select(Axis(0), &observed).view())?;
        diff -= &x.select(Axis(0), &observed);
        diff *= 2.0 / n as f64;
        for (i, &r) in observed.iter().enumerate() {
            upstream.row_mut(r).assign(&diff.row(i));
        }
    }
    if adv_weight > 0.0 {
        if let Some(adv) = ViewAdversary::new(gen, disc, h, x, mask, v)? {
            let g = disc.input_gradient(adv.fake.view(), adv.fake_upstream(adv_weight).view())?;
            for (i, &r) in adv.missing.iter().enumerate() {
                upstream.row_mut(r).assign(&g.row(i));
            }
        }
    }
    Ok(upstream)
}

/// Gradients of `adv_weight * L_adv + L_rec` for every generator.
pub fn generator_gradients(
    gens: &[DenseNet],
    discs: &[DenseNet],
    h: ArrayView2<f64>,
    views: &[Array2<f64>],
    mask: &Array2<bool>,
    adv_weight: f64,
) -> Result<Vec<crate::nn::GradientBundle>> {
    check_models(gens, discs, h, views, mask)?;
    (0..views.len())
        .into_par_iter()
        .map(|v| {
            let up = generator_upstream(&gens[v], &discs[v], h, views[v].view(), mask, v, adv_weight)?;
            gens[v].backward(h, up.view())
        })
        .collect()
}

/// Gradient of `adv_weight * L_adv + L_rec` with respect to the latents.
pub fn latent_gradient(
    gens: &[DenseNet],
    discs: &[DenseNet],
    h: ArrayView2<f64>,
    views: &[Array2<f64>],
    mask: &Array2<bool>,
    adv_weight: f64,
) -> Result<Array2<f64>> {
    check_models(gens, discs, h, views, mask)?;
    let parts = (0..views.len())
        .into_par_iter()
        .map(|v| {
            let up = generator_upstream(&gens[v], &discs[v], h, views[v].view(), mask, v, adv_weight)?;
            gens[v].input_gradient(h, up.view())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = Array2::zeros(h.raw_dim());
    for g in parts {
        grad += &g;
    }
    Ok(grad)
}

fn combined_objective(model: &AdversarialModel, data: &MultiViewDataset) -> Result<(f64, f64, f64)> {
    let adv = if model.config.adv_weight > 0.0 {
        adversarial_loss(model, data)?
    } else {
        0.0
    };
    let rec = unsup_reconstruction_loss(model, data)?;
    Ok((model.config.adv_weight * adv + rec, adv, rec))
}

fn diverged(value: f64, epoch: usize, phase: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            phase: phase.into(),
        })
    }
}

pub fn train_unsupervised(data: &MultiViewDataset, config: &GanConfig) -> Result<AdversarialModel> {
    let mut model = AdversarialModel::init(&data.view_dims(), data.n_samples(), config)?;
    let views = data.views();
    let mask = data.mask();
    let n = data.n_samples() as f64;
    let adversarial = config.adv_weight > 0.0;

    for epoch in 0..config.epochs {
        if adversarial {
            for _ in 0..config.d_steps_per_epoch {
                let h = model.latent.view();
                let gens = &model.generators;
                model
                    .discriminators
                    .par_iter_mut()
                    .enumerate()
                    .try_for_each(|(v, disc)| -> Result<()> {
                        if let Some(bundle) = discriminator_gradient(&gens[v], disc, h, views[v].view(), mask, v)? {
                            disc.apply_gradients(&bundle, config.lr)?;
                        }
                        Ok(())
                    })?;
            }
        }
        let (_, adv, _) = combined_objective(&model, data)?;
        diverged(adv, epoch, "discriminator")?;
        model.trace.discriminator.push(adv);

        for _ in 0..config.g_steps_per_epoch {
            let bundles = generator_gradients(
                &model.generators,
                &model.discriminators,
                model.latent.view(),
                views,
                mask,
                config.adv_weight,
            )?;
            for (gen, bundle) in model.generators.iter_mut().zip(&bundles) {
                gen.apply_gradients(bundle, config.lr)?;
            }
        }
        let (objective, _, _) = combined_objective(&model, data)?;
        diverged(objective, epoch, "generator")?;
        model.trace.generator.push(objective);

        for _ in 0..config.h_steps_per_epoch {
            let grad = latent_gradient(
                &model.generators,
                &model.discriminators,
                model.latent.view(),
                views,
                mask,
                config.adv_weight,
            )?;
            let h = model.latent.view().to_owned() - grad * (config.lr_h * n);
            model.latent = LatentTable::new(h).map_err(|_| Error::Diverged {
                epoch,
                phase: "latent".into(),
            })?;
        }
        let (objective, _, rec) = combined_objective(&model, data)?;
        diverged(objective, epoch, "latent")?;
        model.trace.latent.push(objective);
        model.trace.reconstruction.push(rec);
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Imputation and clustering

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationResult {
    /// Every slot filled; the mask is all ones.
    pub completed: MultiViewDataset,
    /// Slots that were generated.
    pub imputed: Array2<bool>,
    /// Present only when ground truth was supplied.
    pub nrmse: Option<NrmseReport>,
}

/// Fills the missing slots of `data` with generator outputs. With `truth`
/// (the same samples before masking), scores the filled slots.
pub fn impute(model: &AdversarialModel, data: &MultiViewDataset, truth: Option<&MultiViewDataset>) -> Result<ImputationResult> {
    model.check(data)?;
    let mask = data.mask();
    let mut views = data.views().to_vec();
    for (v, x) in views.iter_mut().enumerate() {
        let missing: Vec<usize> = (0..x.nrows()).filter(|&n| !mask[[n, v]]).collect();
        if missing.is_empty() {
            continue;
        }
        let generated = model.generators[v].forward(model.latent.view().select(Axis(0), &missing).view())?;
        for (i, &n) in missing.iter().enumerate() {
            x.row_mut(n).assign(&generated.row(i));
        }
    }
    let imputed = mask.mapv(|s| !s);
    let nrmse = match truth {
        Some(t) => {
            if t.n_samples() != data.n_samples() || t.view_dims() != data.view_dims() {
                return Err(Error::Input("ground truth does not match the imputed data".into()));
            }
            Some(nrmse(&views, t.views(), &imputed)?)
        }
        None => None,
    };
    let completed = MultiViewDataset::with_classes(
        views,
        Array2::from_elem(mask.raw_dim(), true),
        data.labels().map(<[usize]>::to_vec),
        Some(data.view_names().to_vec()),
        data.n_classes(),
    )?;
    Ok(ImputationResult {
        completed,
        imputed,
        nrmse,
    })
}

pub fn extract_latents(model: &AdversarialModel) -> LatentTable {
    model.latent.clone()
}

/// k-means on the latents scored against `labels`.
pub fn cluster_latents(latent: &LatentTable, labels: &[usize], k: usize, seed: u64, restarts: usize) -> Result<ClusteringReport> {
    let km = kmeans(latent.view(), k, seed, restarts)?;
    Ok(ClusteringReport {
        acc: clustering_acc(&km.assignments, labels)?,
        nmi: nmi(&km.assignments, labels)?,
        inertia: km.inertia,
        assignments: km.assignments,
    })
}
