//! Multi-view datasets with per-sample view availability.
//!
//! A dataset holds `V` feature matrices sharing `N` rows, an `N x V`
//! availability mask and optional integer labels. Entries of unavailable
//! views are stored as zeros and never read by masked losses.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    views: Vec<Array2<f64>>,
    mask: Array2<bool>,
    labels: Option<Vec<usize>>,
    n_classes: usize,
    view_names: Vec<String>,
}

impl MultiViewDataset {
    /// Builds a dataset, zeroing the entries of unavailable views. Labels,
    /// when given, must cover every class in `0..=max(label)`.
    pub fn new(
        views: Vec<Array2<f64>>,
        mask: Array2<bool>,
        labels: Option<Vec<usize>>,
        view_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n_classes = match &labels {
            Some(l) if !l.is_empty() => {
                let c = l.iter().max().unwrap() + 1;
                let mut seen = vec![false; c];
                l.iter().for_each(|&y| seen[y] = true);
                if let Some(missing) = seen.iter().position(|s| !s) {
                    return Err(Error::Dataset(format!(
                        "labels skip class {missing}; classes must be 0..{c}"
                    )));
                }
                c
            }
            _ => 0,
        };
        Self::with_classes(views, mask, labels, view_names, n_classes)
    }

    /// Like [`new`](Self::new) but with an explicit class count, so subsets
    /// that happen to miss a class keep the parent's label space.
    pub fn with_classes(
        mut views: Vec<Array2<f64>>,
        mask: Array2<bool>,
        labels: Option<Vec<usize>>,
        view_names: Option<Vec<String>>,
        n_classes: usize,
    ) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Dataset("a dataset needs at least one view".into()));
        }
        let n = views[0].nrows();
        for (v, x) in views.iter().enumerate() {
            if x.nrows() != n {
                return Err(Error::dim(format!("row count of view {v}"), n, x.nrows()));
            }
            if x.ncols() == 0 {
                return Err(Error::Dataset(format!("view {v} has no features")));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Dataset(format!("view {v} contains non-finite values")));
            }
        }
        if mask.dim() != (n, views.len()) {
            return Err(Error::Dataset(format!(
                "mask shape {:?} does not match {} samples x {} views",
                mask.dim(),
                n,
                views.len()
            )));
        }
        if let Some(row) = mask.rows().into_iter().position(|r| !r.iter().any(|&s| s)) {
            return Err(Error::Dataset(format!("sample {row} has no available view")));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::dim("label count", n, l.len()));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= n_classes) {
                return Err(Error::Dataset(format!("label {bad} outside 0..{n_classes}")));
            }
        }
        let view_names = match view_names {
            Some(names) if names.len() == views.len() => names,
            Some(names) => return Err(Error::dim("view name count", views.len(), names.len())),
            None => (0..views.len()).map(|v| format!("view{v}")).collect(),
        };
        for (v, x) in views.iter_mut().enumerate() {
            for (mut row, &avail) in x.rows_mut().into_iter().zip(mask.column(v)) {
                if !avail {
                    row.fill(0.0);
                }
            }
        }
        Ok(MultiViewDataset {
            views,
            mask,
            labels,
            n_classes,
            view_names,
        })
    }

    /// Dataset with every view available.
    pub fn complete(views: Vec<Array2<f64>>, labels: Option<Vec<usize>>) -> Result<Self> {
        let n = views.first().map(|x| x.nrows()).unwrap_or(0);
        let mask = Array2::from_elem((n, views.len()), true);
        Self::new(views, mask, labels, None)
    }

    pub fn n_samples(&self) -> usize {
        self.mask.nrows()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn view(&self, v: usize) -> ArrayView2<'_, f64> {
        self.views[v].view()
    }

    pub fn views(&self) -> &[Array2<f64>] {
        &self.views
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|x| x.ncols()).collect()
    }

    pub fn view_names(&self) -> &[String] {
        &self.view_names
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn is_observed(&self, n: usize, v: usize) -> bool {
        self.mask[[n, v]]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels().ok_or_else(|| Error::Input("dataset has no labels".into()))
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&s| s)
    }

    /// Replaces the availability mask; newly hidden entries are zeroed.
    pub fn with_mask(&self, mask: Array2<bool>) -> Result<Self> {
        Self::with_classes(
            self.views.clone(),
            mask,
            self.labels.clone(),
            Some(self.view_names.clone()),
            self.n_classes,
        )
    }

    pub fn without_labels(&self) -> Self {
        MultiViewDataset {
            labels: None,
            n_classes: 0,
            ..self.clone()
        }
    }

    /// Rows `rows` in the given order, keeping the class count.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n_samples()) {
            return Err(Error::Input(format!("row {bad} out of range")));
        }
        let views = self.views.iter().map(|x| x.select(Axis(0), rows)).collect();
        let mask = self.mask.select(Axis(0), rows);
        let labels = self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect());
        Self::with_classes(views, mask, labels, Some(self.view_names.clone()), self.n_classes)
    }

    /// All views side by side, `N x sum(D_v)`.
    pub fn concatenated(&self) -> Array2<f64> {
        let parts: Vec<_> = self.views.iter().map(|x| x.view()).collect();
        concatenate(Axis(1), &parts).expect("views share row count")
    }
}

/// Target fraction of absent (sample, view) slots plus the draw seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingSpec {
    pub target_rate: f64,
    pub seed: u64,
}

/// Fraction of unavailable (sample, view) slots.
pub fn measured_rate(data: &MultiViewDataset) -> f64 {
    let zeros = data.mask.iter().filter(|&&s| !s).count();
    zeros as f64 / data.mask.len() as f64
}

/// Removes `round(rate * V * N)` view entries uniformly over the slots that
/// can go without leaving a sample empty.
pub fn apply_missing_pattern(data: &MultiViewDataset, spec: &MissingSpec) -> Result<MultiViewDataset> {
    let (n, v) = data.mask.dim();
    let max_rate = (v as f64 - 1.0) / v as f64;
    if !(spec.target_rate >= 0.0) || spec.target_rate > max_rate + 1e-12 {
        return Err(Error::Config(format!(
            "missing rate {} infeasible with {v} views (max {max_rate:.4})",
            spec.target_rate
        )));
    }
    if !data.is_complete() {
        return Err(Error::Input("missing pattern must be applied to complete data".into()));
    }
    let target = ((spec.target_rate * (v * n) as f64).round() as usize).min(n * (v - 1));

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut slots: Vec<(usize, usize)> = (0..n).flat_map(|r| (0..v).map(move |c| (r, c))).collect();
    slots.shuffle(&mut rng);

    let mut mask = data.mask.clone();
    let mut remaining = vec![v; n];
    let mut removed = 0;
    for (r, c) in slots {
        if removed == target {
            break;
        }
        if remaining[r] > 1 {
            mask[[r, c]] = false;
            remaining[r] -= 1;
            removed += 1;
        }
    }
    debug_assert_eq!(removed, target);
    data.with_mask(mask)
}

/// Per-feature min-max scaling to `[0, 1]` computed on available rows only.
/// Constant features map to 0.
pub fn normalize(data: &MultiViewDataset) -> MultiViewDataset {
    let mut out = data.clone();
    for (v, x) in out.views.iter_mut().enumerate() {
        let observed: Vec<usize> = (0..x.nrows()).filter(|&r| data.mask[[r, v]]).collect();
        for mut col in x.columns_mut() {
            let (lo, hi) = observed
                .iter()
                .map(|&r| col[r])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), val| (lo.min(val), hi.max(val)));
            let range = hi - lo;
            for &r in &observed {
                col[r] = if range > 0.0 { (col[r] - lo) / range } else { 0.0 };
            }
        }
    }
    out
}

/// Shape of the synthetic generator beyond the basic counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub classes: usize,
    pub latent_dim: usize,
    pub view_dims: Vec<usize>,
    pub seed: u64,
    /// Distance of every class centre from the origin.
    pub separation: f64,
    /// Standard deviation of additive feature noise.
    pub noise: f64,
    /// Number of latent directions each view depends on; `None` = all.
    pub view_rank: Option<usize>,
}

impl SynthSpec {
    pub fn new(n: usize, classes: usize, latent_dim: usize, view_dims: &[usize], seed: u64) -> Self {
        SynthSpec {
            n,
            classes,
            latent_dim,
            view_dims: view_dims.to_vec(),
            seed,
            separation: 3.0,
            noise: 0.05,
            view_rank: None,
        }
    }
}

pub fn synth_dataset(
    n: usize,
    classes: usize,
    latent_dim: usize,
    view_dims: &[usize],
    seed: u64,
) -> Result<MultiViewDataset> {
    synth_dataset_with(&SynthSpec::new(n, classes, latent_dim, view_dims, seed))
}

/// Class-conditional latent clusters pushed through fixed random
/// sigmoid maps, one per view. Classes are assigned round-robin.
pub fn synth_dataset_with(spec: &SynthSpec) -> Result<MultiViewDataset> {
    if spec.n == 0 || spec.classes == 0 || spec.latent_dim == 0 || spec.view_dims.is_empty() {
        return Err(Error::Config("synthetic dataset counts must be positive".into()));
    }
    if spec.view_dims.contains(&0) {
        return Err(Error::Config("view dims must be positive".into()));
    }
    if spec.classes > spec.n {
        return Err(Error::Config("more classes than samples".into()));
    }
    let rank = spec.view_rank.unwrap_or(spec.latent_dim).clamp(1, spec.latent_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    // Random directions, made mutually orthogonal while the latent space
    // has room for them.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    for c in 0..spec.classes {
        let mut dir: Vec<f64> = (0..spec.latent_dim).map(|_| gauss(&mut rng)).collect();
        if c < spec.latent_dim && spec.separation > 0.0 {
            for prev in &centers {
                let dot: f64 = dir.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>() / spec.separation.powi(2);
                dir.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
        centers.push(dir.into_iter().map(|d| spec.separation * d / norm).collect());
    }

    // Each view reads `rank` randomly chosen latent coordinates.
    let maps: Vec<(Array2<f64>, Vec<f64>)> = spec
        .view_dims
        .iter()
        .map(|&d| {
            let mut coords: Vec<usize> = (0..spec.latent_dim).collect();
            coords.shuffle(&mut rng);
            coords.truncate(rank);
            let gain = (1.0 / rank as f64).sqrt() * 1.5;
            let mut a = Array2::zeros((d, spec.latent_dim));
            for i in 0..d {
                for &c in &coords {
                    a[[i, c]] = gain * gauss(&mut rng);
                }
            }
            let b = (0..d).map(|_| 0.1 * gauss(&mut rng)).collect();
            (a, b)
        })
        .collect();

    let labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    let latent = Array2::from_shape_fn((spec.n, spec.latent_dim), |(i, k)| centers[labels[i]][k])
        + Array2::from_shape_fn((spec.n, spec.latent_dim), |_| gauss(&mut rng));

    let views = maps
        .iter()
        .map(|(a, b)| {
            let mut x = latent.dot(&a.t());
            for mut row in x.rows_mut() {
                for (val, bias) in row.iter_mut().zip(b) {
                    *val = sigmoid(*val + bias);
                }
            }
            x.mapv_inplace(|val| val + spec.noise * gauss(&mut rng));
            x
        })
        .collect();
    MultiViewDataset::complete(views, Some(labels))
}

/// Stratified split by label (plain shuffle when unlabeled).
pub fn split(
    data: &MultiViewDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(MultiViewDataset, MultiViewDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = match data.labels() {
        Some(labels) => {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &y) in labels.iter().enumerate() {
                by_class.entry(y).or_default().push(i);
            }
            if let Some((y, rows)) = by_class.iter().find(|(_, rows)| rows.len() < 2) {
                return Err(Error::Split(format!("class {y} has only {} sample(s)", rows.len())));
            }
            by_class.into_values().collect()
        }
        None if data.n_samples() < 2 => {
            return Err(Error::Split("need at least two samples".into()));
        }
        None => vec![(0..data.n_samples()).collect()],
    };
    // largest-remainder allocation so the per-class quotas sum to round(N * f)
    let target = (data.n_samples() as f64 * train_fraction).round() as usize;
    let mut quotas: Vec<usize> = groups
        .iter()
        .map(|g| (g.len() as f64 * train_fraction).floor() as usize)
        .collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = groups[a].len() as f64 * train_fraction - quotas[a] as f64;
        let rb = groups[b].len() as f64 * train_fraction - quotas[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = target.saturating_sub(quotas.iter().sum());
    for &g in order.iter().cycle().take(groups.len() * 2) {
        if left == 0 {
            break;
        }
        if quotas[g] < groups[g].len() {
            quotas[g] += 1;
            left -= 1;
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (mut rows, quota) in groups.into_iter().zip(quotas) {
        rows.shuffle(&mut rng);
        let k = quota.clamp(1, rows.len() - 1);
        train.extend_from_slice(&rows[..k]);
        test.extend_from_slice(&rows[k..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Split("split leaves one side empty".into()));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train)?, data.subset(&test)?))
}

// ---------------------------------------------------------------------------
// CSV files and bundles

fn ingest(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Ingest {
        file: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn read_records(path: &Path, has_header: bool) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ingest(path, 0, e.to_string()))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            ingest(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        rows.push((line, record.iter().map(str::to_owned).collect()));
    }
    Ok(rows)
}

/// Reads a numeric matrix; every row must have the same width.
pub fn read_matrix_csv(path: &Path, has_header: bool) -> Result<Array2<f64>> {
    let rows = read_records(path, has_header)?;
    let width = rows.first().map(|(_, r)| r.len()).unwrap_or(0);
    let mut flat = Vec::with_capacity(rows.len() * width);
    for (line, row) in &rows {
        if row.len() != width {
            return Err(ingest(path, *line, format!("expected {width} fields, found {}", row.len())));
        }
        for cell in row {
            let val: f64 = cell
                .parse()
                .map_err(|_| ingest(path, *line, format!("non-numeric cell {cell:?}")))?;
            flat.push(val);
        }
    }
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| ingest(path, 0, e.to_string()))
}

fn read_int_matrix(path: &Path, has_header: bool) -> Result<Vec<(usize, Vec<i64>)>> {
    read_records(path, has_header)?
        .into_iter()
        .map(|(line, row)| {
            row.iter()
                .map(|cell| {
                    cell.parse::<i64>()
                        .map_err(|_| ingest(path, line, format!("non-integer cell {cell:?}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(|r| (line, r))
        })
        .collect()
}

pub fn read_labels_csv(path: &Path, has_header: bool) -> Result<Vec<usize>> {
    read_int_matrix(path, has_header)?
        .into_iter()
        .map(|(line, row)| match row.as_slice() {
            [y] if *y >= 0 => Ok(*y as usize),
            _ => Err(ingest(path, line, "expected one non-negative integer label")),
        })
        .collect()
}

pub fn read_mask_csv(path: &Path, has_header: bool) -> Result<Array2<bool>> {
    let rows = read_int_matrix(path, has_header)?;
    let width = rows.first().map(|(_, r)| r.len()).unwrap_or(0);
    let mut flat = Vec::with_capacity(rows.len() * width);
    for (line, row) in &rows {
        if row.len() != width {
            return Err(ingest(path, *line, format!("expected {width} fields, found {}", row.len())));
        }
        match row.iter().find(|&&s| s != 0 && s != 1) {
            Some(bad) => return Err(ingest(path, *line, format!("mask entry {bad} is not 0/1"))),
            None => flat.extend(row.iter().map(|&s| s == 1)),
        }
        if row.iter().all(|&s| s == 0) {
            return Err(ingest(path, *line, "sample has no available view"));
        }
    }
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| ingest(path, 0, e.to_string()))
}

pub fn load_csv_views<P: AsRef<Path>>(
    paths: &[P],
    label_path: Option<&Path>,
    mask_path: Option<&Path>,
    has_header: bool,
) -> Result<MultiViewDataset> {
    if paths.is_empty() {
        return Err(Error::Input("no view files given".into()));
    }
    let views = paths
        .iter()
        .map(|p| read_matrix_csv(p.as_ref(), has_header))
        .collect::<Result<Vec<_>>>()?;
    let n = views[0].nrows();
    for (p, x) in paths.iter().zip(&views) {
        if x.nrows() != n {
            return Err(ingest(p.as_ref(), x.nrows(), format!("has {} rows, expected {n}", x.nrows())));
        }
    }
    let mask = match mask_path {
        Some(p) => {
            let m = read_mask_csv(p, has_header)?;
            if m.dim() != (n, views.len()) {
                return Err(ingest(p, m.nrows(), format!("mask is {:?}, expected ({n}, {})", m.dim(), views.len())));
            }
            m
        }
        None => Array2::from_elem((n, views.len()), true),
    };
    let labels = match label_path {
        Some(p) => {
            let l = read_labels_csv(p, has_header)?;
            if l.len() != n {
                return Err(ingest(p, l.len(), format!("has {} labels, expected {n}", l.len())));
            }
            Some(l)
        }
        None => None,
    };
    let names = paths
        .iter()
        .map(|p| {
            p.as_ref()
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    MultiViewDataset::new(views, mask, labels, Some(names))
}

/// Reads the UCI multiple-features digit collection (whitespace separated
/// `mfeat-*` files) in the order pix, fou, fac, zer, kar, mor.
pub fn load_handwritten(dir: &Path) -> Result<MultiViewDataset> {
    const FILES: [&str; 6] = ["mfeat-pix", "mfeat-fou", "mfeat-fac", "mfeat-zer", "mfeat-kar", "mfeat-mor"];
    let mut views = Vec::new();
    for name in FILES {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|e| ingest(&path, 0, e.to_string()))?;
        let mut flat = Vec::new();
        let mut width = None;
        let mut rows = 0;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let vals = line
                .split_whitespace()
                .map(|c| c.parse::<f64>().map_err(|_| ingest(&path, i + 1, format!("non-numeric cell {c:?}"))))
                .collect::<Result<Vec<_>>>()?;
            match width {
                None => width = Some(vals.len()),
                Some(w) if w != vals.len() => {
                    return Err(ingest(&path, i + 1, format!("expected {w} fields, found {}", vals.len())))
                }
                _ => {}
            }
            flat.extend(vals);
            rows += 1;
        }
        let x = Array2::from_shape_vec((rows, width.unwrap_or(0)), flat).map_err(|e| ingest(&path, 0, e.to_string()))?;
        views.push(x);
    }
    let n = views[0].nrows();
    if n % 10 != 0 {
        return Err(Error::Dataset(format!("expected 10 equal digit blocks, got {n} rows")));
    }
    let per_class = n / 10;
    let labels = (0..n).map(|i| i / per_class).collect();
    let names = FILES.iter().map(|f| f.trim_start_matches("mfeat-").to_owned()).collect();
    let mask = Array2::from_elem((n, 6), true);
    MultiViewDataset::new(views, mask, Some(labels), Some(names))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub name: String,
    pub path: String,
}

/// JSON manifest describing a dataset bundle; paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    #[serde(default)]
    pub has_header: bool,
    pub views: Vec<ViewEntry>,
    #[serde(default)]
    pub mask: Option<String>,
    #[serde(default)]
    pub labels: Option<String>,
    #[serde(default)]
    pub n_classes: Option<usize>,
}

pub const BUNDLE_FORMAT: &str = "pmvl-bundle/1";
pub const MANIFEST_NAME: &str = "manifest.json";

fn write_matrix_csv(path: &Path, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes views, mask, labels and `manifest.json` into `dir`; returns the
/// manifest path. Floats use the shortest round-trip representation.
pub fn save_bundle(data: &MultiViewDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut views = Vec::new();
    for (v, x) in data.views.iter().enumerate() {
        let file = format!("view{v}.csv");
        write_matrix_csv(
            &dir.join(&file),
            x.rows().into_iter().map(|r| r.iter().map(|val| val.to_string()).collect()),
        )?;
        views.push(ViewEntry {
            name: data.view_names[v].clone(),
            path: file,
        });
    }
    write_matrix_csv(
        &dir.join("mask.csv"),
        data.mask
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&s| if s { "1" } else { "0" }.to_owned()).collect()),
    )?;
    let labels = match &data.labels {
        Some(l) => {
            write_matrix_csv(&dir.join("labels.csv"), l.iter().map(|y| vec![y.to_string()]))?;
            Some("labels.csv".to_owned())
        }
        None => None,
    };
    let manifest = BundleManifest {
        format: BUNDLE_FORMAT.to_owned(),
        has_header: false,
        views,
        mask: Some("mask.csv".to_owned()),
        labels,
        n_classes: data.labels.as_ref().map(|_| data.n_classes),
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

/// Loads a bundle from its manifest file or from a directory containing
/// `manifest.json`.
pub fn load_bundle(path: &Path) -> Result<MultiViewDataset> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: BundleManifest = serde_json::from_str(&text)?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(ingest(&manifest_path, 1, format!("unsupported bundle format {:?}", manifest.format)));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let paths: Vec<PathBuf> = manifest.views.iter().map(|v| base.join(&v.path)).collect();
    let mask = manifest.mask.as_ref().map(|m| base.join(m));
    let labels = manifest.labels.as_ref().map(|l| base.join(l));
    let data = load_csv_views(&paths, labels.as_deref(), mask.as_deref(), manifest.has_header)?;
    let names = manifest.views.iter().map(|v| v.name.clone()).collect();
    let n_classes = manifest.n_classes.unwrap_or(data.n_classes);
    MultiViewDataset::with_classes(data.views, data.mask, data.labels, Some(names), n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> MultiViewDataset {
        MultiViewDataset::complete(
            vec![array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], array![[0.5], [0.25], [0.0]]],
            Some(vec![0, 1, 0]),
        )
        .unwrap()
    }

    #[test]
    fn constructor_enforces_invariants() {
        let x = array![[1.0], [2.0]];
        let mask = array![[true, false], [false, false]];
        assert!(MultiViewDataset::new(vec![x.clone(), x.clone()], mask, None, None).is_err());
        let ragged = MultiViewDataset::complete(vec![x.clone(), array![[1.0]]], None);
        assert!(ragged.is_err());
        let gap = MultiViewDataset::complete(vec![x.clone()], Some(vec![0, 2]));
        assert!(gap.is_err());
    }

    #[test]
    fn masked_entries_are_zeroed() {
        let d = tiny().with_mask(array![[true, false], [false, true], [true, true]]).unwrap();
        assert_eq!(d.view(1)[[0, 0]], 0.0);
        assert_eq!(d.view(0).row(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(d.view(0)[[2, 1]], 6.0);
    }

    #[test]
    fn measured_rate_examples() {
        let d = tiny();
        assert_eq!(measured_rate(&d), 0.0);
        let two = MultiViewDataset::new(
            vec![array![[1.0], [2.0]], array![[1.0], [2.0]]],
            array![[true, true], [true, false]],
            None,
            None,
        )
        .unwrap();
        assert_eq!(measured_rate(&two), 0.25);
    }

    #[test]
    fn zero_rate_leaves_mask() {
        let d = synth_dataset(50, 2, 3, &[4, 5], 1).unwrap();
        let m = apply_missing_pattern(&d, &MissingSpec { target_rate: 0.0, seed: 3 }).unwrap();
        assert!(m.is_complete());
        assert_eq!(m, d);
    }

    #[test]
    fn half_rate_two_views_keeps_exactly_one() {
        let d = synth_dataset(100, 2, 3, &[4, 5], 1).unwrap();
        let m = apply_missing_pattern(&d, &MissingSpec { target_rate: 0.5, seed: 9 }).unwrap();
        for row in m.mask().rows() {
            assert_eq!(row.iter().filter(|&&s| s).count(), 1);
        }
    }

    #[test]
    fn six_view_rate_counts() {
        let d = synth_dataset(2000, 10, 4, &[3, 3, 3, 3, 3, 3], 2).unwrap();
        let m = apply_missing_pattern(&d, &MissingSpec { target_rate: 0.3, seed: 4 }).unwrap();
        let zeros = m.mask().iter().filter(|&&s| !s).count();
        assert_eq!(zeros, 3600);
        assert!((measured_rate(&m) - 0.3).abs() <= 1.0 / 12000.0);
    }

    #[test]
    fn infeasible_rate_rejected() {
        let d = synth_dataset(10, 2, 3, &[2, 2], 0).unwrap();
        for rate in [0.51, -0.1, f64::NAN] {
            let err = apply_missing_pattern(&d, &MissingSpec { target_rate: rate, seed: 0 });
            assert!(matches!(err, Err(Error::Config(_))));
        }
        let partial = apply_missing_pattern(&d, &MissingSpec { target_rate: 0.2, seed: 0 }).unwrap();
        assert!(apply_missing_pattern(&partial, &MissingSpec { target_rate: 0.2, seed: 0 }).is_err());
    }

    #[test]
    fn normalize_examples() {
        let d = MultiViewDataset::complete(vec![array![[2.0, 0.3, 7.0], [4.0, 0.9, 7.0]]], None).unwrap();
        let n = normalize(&d);
        assert_eq!(n.view(0).column(0).to_vec(), vec![0.0, 1.0]);
        assert_eq!(n.view(0).column(2).to_vec(), vec![0.0, 0.0]);

        let unit = MultiViewDataset::complete(vec![array![[0.0, 0.2], [1.0, 1.0], [0.5, 0.0]]], None).unwrap();
        let un = normalize(&unit);
        for (a, b) in un.view(0).iter().zip(unit.view(0).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_ignores_masked_rows() {
        let views = vec![array![[1.0], [3.0], [100.0], [2.0]], array![[0.0], [0.0], [0.0], [0.0]]];
        let mask = array![[true, true], [true, true], [false, true], [true, true]];
        let d = MultiViewDataset::new(views, mask, None, None).unwrap();
        let n = normalize(&d);
        // oracle: min/max over rows 0, 1, 3 only
        let expected = [(1.0 - 1.0) / 2.0, (3.0 - 1.0) / 2.0, 0.0, (2.0 - 1.0) / 2.0];
        assert_eq!(n.view(0).column(0).to_vec(), expected.to_vec());
    }

    #[test]
    fn synth_determinism_and_single_class() {
        let a = synth_dataset(40, 3, 4, &[5, 6], 77).unwrap();
        let b = synth_dataset(40, 3, 4, &[5, 6], 77).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(40, 3, 4, &[5, 6], 78).unwrap());
        let one = synth_dataset(20, 1, 4, &[3], 0).unwrap();
        assert!(one.labels().unwrap().iter().all(|&y| y == 0));
        assert!(synth_dataset(0, 1, 1, &[1], 0).is_err());
    }

    #[test]
    fn synth_is_separable_by_nearest_centroid() {
        let d = synth_dataset(300, 3, 8, &[20, 20, 20], 5).unwrap();
        let x = d.concatenated();
        let labels = d.labels().unwrap();
        let mut centroids = Array2::<f64>::zeros((3, x.ncols()));
        let mut counts = [0.0; 3];
        for (row, &y) in x.rows().into_iter().zip(labels) {
            let mut c = centroids.row_mut(y);
            c += &row;
            counts[y] += 1.0;
        }
        for (mut c, n) in centroids.rows_mut().into_iter().zip(counts) {
            c /= n;
        }
        let correct = x
            .rows()
            .into_iter()
            .zip(labels)
            .filter(|(row, &y)| {
                let best = (0..3)
                    .min_by(|&a, &b| {
                        let da = (&centroids.row(a) - row).mapv(|v| v * v).sum();
                        let db = (&centroids.row(b) - row).mapv(|v| v * v).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == y
            })
            .count();
        assert!(correct as f64 / 300.0 >= 0.95, "accuracy {}", correct as f64 / 300.0);
    }

    #[test]
    fn split_examples() {
        let views = vec![Array2::from_shape_fn((10, 2), |(i, j)| (i * 2 + j) as f64)];
        let d = MultiViewDataset::complete(views, Some((0..10).map(|i| i % 2).collect())).unwrap();
        let (train, test) = split(&d, 0.5, 1).unwrap();
        assert_eq!(train.n_samples(), 5);
        assert_eq!(test.n_samples(), 5);
        let mut ids: Vec<f64> = train.view(0).column(0).iter().chain(test.view(0).column(0).iter()).copied().collect();
        ids.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(ids, d.view(0).column(0).to_vec());

        let lonely = MultiViewDataset::complete(vec![array![[1.0], [2.0], [3.0]]], Some(vec![0, 0, 1])).unwrap();
        assert!(matches!(split(&lonely, 0.5, 0), Err(Error::Split(_))));
        assert!(split(&d, 1.0, 0).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let d = synth_dataset(90, 3, 3, &[4], 0).unwrap();
        let (train, test) = split(&d, 0.7, 5).unwrap();
        for side in [&train, &test] {
            let mut counts = [0usize; 3];
            side.labels().unwrap().iter().for_each(|&y| counts[y] += 1);
            assert_eq!(counts[0], counts[1]);
            assert_eq!(counts[1], counts[2]);
        }
        assert_eq!(train.n_samples(), 63);
    }

    #[test]
    fn csv_loading_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        fs::write(&a, "1,2\n3,4\n5,6\n").unwrap();
        fs::write(&b, "0.5\n0.25\n1e-3\n").unwrap();
        let d = load_csv_views(&[&a, &b], None, None, false).unwrap();
        assert_eq!((d.n_samples(), d.n_views()), (3, 2));
        assert!(d.is_complete());

        let mask = dir.path().join("mask.csv");
        fs::write(&mask, "1,1\n0,0\n1,0\n").unwrap();
        let err = load_csv_views(&[&a, &b], None, Some(&mask), false).unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 2, .. }), "{err}");

        let ragged = dir.path().join("ragged.csv");
        fs::write(&ragged, "1,2\n3\n5,6\n").unwrap();
        let err = load_csv_views(&[&ragged], None, None, false).unwrap_err();
        assert!(matches!(err, Error::Ingest { line: 2, .. }), "{err}");

        let text = dir.path().join("text.csv");
        fs::write(&text, "1,2\n3,x\n").unwrap();
        assert!(load_csv_views(&[&text], None, None, false).is_err());

        let short = dir.path().join("short.csv");
        fs::write(&short, "1\n2\n").unwrap();
        assert!(load_csv_views(&[&a, &short], None, None, false).is_err());

        let header = dir.path().join("header.csv");
        fs::write(&header, "f0,f1\n1,2\n").unwrap();
        assert_eq!(load_csv_views(&[&header], None, None, true).unwrap().n_samples(), 1);
    }

    #[test]
    fn bundle_round_trip_is_exact() {
        let d = synth_dataset(30, 3, 4, &[3, 5], 9).unwrap();
        let d = apply_missing_pattern(&d, &MissingSpec { target_rate: 0.3, seed: 1 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_bundle(&d, dir.path()).unwrap();
        let back = load_bundle(&manifest).unwrap();
        assert_eq!(back, d);
        assert_eq!(load_bundle(dir.path()).unwrap(), d);
    }

    #[test]
    fn handwritten_layout() {
        let dir = tempfile::tempdir().unwrap();
        let dims = [("mfeat-pix", 240), ("mfeat-fou", 76), ("mfeat-fac", 216), ("mfeat-zer", 47), ("mfeat-kar", 64), ("mfeat-mor", 6)];
        for (name, d) in dims {
            let row = vec!["1.5"; d].join("  ");
            let body: String = (0..2000).map(|_| format!("  {row}\n")).collect();
            fs::write(dir.path().join(name), body).unwrap();
        }
        let data = load_handwritten(dir.path()).unwrap();
        assert_eq!(data.view_dims(), vec![240, 76, 216, 47, 64, 6]);
        assert_eq!(data.n_samples(), 2000);
        assert_eq!(data.n_classes(), 10);
        assert_eq!(data.labels().unwrap()[199], 0);
        assert_eq!(data.labels().unwrap()[200], 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn masks_never_empty_and_rate_exact(
                n in 1usize..40, v in 1usize..6, frac in 0.0f64..1.0, seed in any::<u64>(),
            ) {
                let views = (0..v).map(|_| Array2::from_elem((n, 2), 1.0)).collect();
                let d = MultiViewDataset::complete(views, None).unwrap();
                let rate = frac * (v as f64 - 1.0) / v as f64;
                let m = apply_missing_pattern(&d, &MissingSpec { target_rate: rate, seed }).unwrap();
                prop_assert!(m.mask().rows().into_iter().all(|r| r.iter().any(|&s| s)));
                prop_assert!((measured_rate(&m) - rate).abs() <= 1.0 / (v * n) as f64);
                // brute-force recount
                let zeros = m.mask().iter().filter(|&&s| !s).count();
                prop_assert_eq!(measured_rate(&m), zeros as f64 / (v * n) as f64);
            }
        }
    }
}
