//! On-disk model directories.
//!
//! A model directory holds `model.json` (configuration, shapes, traces), one
//! binary file per network and the latent table (plus centroids for
//! supervised models) as matrices: `u64` rows, `u64` columns, then row-major
//! little-endian `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{AdversarialModel, GanConfig, GanTrace};
use crate::nn::{read_f64_vec, read_u64, DenseNet};
use crate::supervised::{LatentTable, SupervisedModel, TrainConfig, TrainTrace};

const MATRIX_MAGIC: &[u8; 8] = b"PMVLMAT1";
pub const SUPERVISED_FORMAT: &str = "pmvl-supervised/1";
pub const ADVERSARIAL_FORMAT: &str = "pmvl-adversarial/1";

pub fn write_matrix<W: Write>(m: &Array2<f64>, mut out: W) -> Result<()> {
    out.write_all(MATRIX_MAGIC)?;
    out.write_all(&(m.nrows() as u64).to_le_bytes())?;
    out.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix<R: Read>(mut input: R) -> Result<Array2<f64>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::Checkpoint("not a matrix file".into()));
    }
    let rows = read_u64(&mut input)? as usize;
    let cols = read_u64(&mut input)? as usize;
    let len = rows
        .checked_mul(cols)
        .filter(|&l| l <= 1 << 32)
        .ok_or_else(|| Error::Checkpoint(format!("implausible matrix shape {rows}x{cols}")))?;
    let values = read_f64_vec(&mut input, len)?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

fn save_matrix(m: &Array2<f64>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_matrix(m, &mut out)?;
    out.flush()?;
    Ok(())
}

fn load_matrix(path: &Path) -> Result<Array2<f64>> {
    read_matrix(BufReader::new(File::open(path)?))
}

fn save_net(net: &DenseNet, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    net.write_checkpoint(&mut out)?;
    out.flush()?;
    Ok(())
}

fn load_net(path: &Path) -> Result<DenseNet> {
    DenseNet::read_checkpoint(BufReader::new(File::open(path)?))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    let path = dir.join("model.json");
    let file = File::open(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SupervisedManifest {
    format: String,
    config: TrainConfig,
    n_classes: usize,
    n_samples: usize,
    view_dims: Vec<usize>,
    retuned: bool,
    train_labels: Vec<usize>,
    trace: TrainTrace,
}

pub fn save_supervised(model: &SupervisedModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = SupervisedManifest {
        format: SUPERVISED_FORMAT.into(),
        config: model.config.clone(),
        n_classes: model.n_classes(),
        n_samples: model.latent.n_samples(),
        view_dims: model.view_dims(),
        retuned: model.retuned_nets.is_some(),
        train_labels: model.train_labels.clone(),
        trace: model.trace.clone(),
    };
    write_json(&manifest, &dir.join("model.json"))?;
    for (v, net) in model.recon_nets.iter().enumerate() {
        save_net(net, &dir.join(format!("recon{v}.bin")))?;
    }
    if let Some(nets) = &model.retuned_nets {
        for (v, net) in nets.iter().enumerate() {
            save_net(net, &dir.join(format!("retuned{v}.bin")))?;
        }
    }
    save_matrix(model.latent.as_array(), &dir.join("latent.bin"))?;
    save_matrix(&model.centroids, &dir.join("centroids.bin"))
}

pub fn load_supervised(dir: &Path) -> Result<SupervisedModel> {
    let manifest: SupervisedManifest = read_manifest(dir)?;
    if manifest.format != SUPERVISED_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", manifest.format)));
    }
    let k = manifest.config.latent_dim;
    let load_nets = |prefix: &str| -> Result<Vec<DenseNet>> {
        manifest
            .view_dims
            .iter()
            .enumerate()
            .map(|(v, &d)| {
                let net = load_net(&dir.join(format!("{prefix}{v}.bin")))?;
                if net.input_dim() != k || net.output_dim() != d {
                    return Err(Error::Checkpoint(format!("{prefix}{v}.bin has the wrong shape")));
                }
                Ok(net)
            })
            .collect()
    };
    let recon_nets = load_nets("recon")?;
    let retuned_nets = if manifest.retuned { Some(load_nets("retuned")?) } else { None };
    let latent = load_matrix(&dir.join("latent.bin"))?;
    let centroids = load_matrix(&dir.join("centroids.bin"))?;
    if latent.dim() != (manifest.n_samples, k) || centroids.dim() != (manifest.n_classes, k) {
        return Err(Error::Checkpoint("latent or centroid shape disagrees with model.json".into()));
    }
    Ok(SupervisedModel {
        latent: LatentTable::new(latent)?,
        recon_nets,
        retuned_nets,
        centroids,
        train_labels: manifest.train_labels,
        config: manifest.config,
        trace: manifest.trace,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdversarialManifest {
    format: String,
    config: GanConfig,
    n_samples: usize,
    view_dims: Vec<usize>,
    trace: GanTrace,
}

pub fn save_adversarial(model: &AdversarialModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = AdversarialManifest {
        format: ADVERSARIAL_FORMAT.into(),
        config: model.config.clone(),
        n_samples: model.latent.n_samples(),
        view_dims: model.generators.iter().map(DenseNet::output_dim).collect(),
        trace: model.trace.clone(),
    };
    write_json(&manifest, &dir.join("model.json"))?;
    for (v, (g, d)) in model.generators.iter().zip(&model.discriminators).enumerate() {
        save_net(g, &dir.join(format!("generator{v}.bin")))?;
        save_net(d, &dir.join(format!("discriminator{v}.bin")))?;
    }
    save_matrix(model.latent.as_array(), &dir.join("latent.bin"))
}

pub fn load_adversarial(dir: &Path) -> Result<AdversarialModel> {
    let manifest: AdversarialManifest = read_manifest(dir)?;
    if manifest.format != ADVERSARIAL_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", manifest.format)));
    }
    let k = manifest.config.latent_dim;
    let mut generators = Vec::new();
    let mut discriminators = Vec::new();
    for (v, &d) in manifest.view_dims.iter().enumerate() {
        let g = load_net(&dir.join(format!("generator{v}.bin")))?;
        let disc = load_net(&dir.join(format!("discriminator{v}.bin")))?;
        if g.input_dim() != k || g.output_dim() != d || disc.input_dim() != d || disc.output_dim() != 1 {
            return Err(Error::Checkpoint(format!("view {v} networks have the wrong shape")));
        }
        generators.push(g);
        discriminators.push(disc);
    }
    let latent = load_matrix(&dir.join("latent.bin"))?;
    if latent.dim() != (manifest.n_samples, k) {
        return Err(Error::Checkpoint("latent shape disagrees with model.json".into()));
    }
    Ok(AdversarialModel {
        latent: LatentTable::new(latent)?,
        generators,
        discriminators,
        config: manifest.config,
        trace: manifest.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{apply_missing_pattern, synth_dataset, MissingSpec};
    use crate::gan::train_unsupervised;
    use crate::supervised::{retune, train};

    #[test]
    fn matrix_round_trip() {
        let m = Array2::from_shape_fn((3, 4), |(i, j)| i as f64 - 0.25 * j as f64);
        let mut buf = Vec::new();
        write_matrix(&m, &mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 12 * 8);
        assert_eq!(read_matrix(buf.as_slice()).unwrap(), m);
        assert!(read_matrix(&buf[..30]).is_err());
        assert!(matches!(read_matrix(&b"garbage!........"[..]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn supervised_round_trip() {
        let data = synth_dataset(30, 3, 3, &[4, 5], 1).unwrap();
        let config = TrainConfig {
            latent_dim: 4,
            hidden_dims: vec![6],
            epochs: 5,
            retune_epochs: 3,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let model = train(&data, &config).unwrap();
        save_supervised(&model, dir.path()).unwrap();
        assert_eq!(load_supervised(dir.path()).unwrap(), model);

        let tuned = retune(&model, &data).unwrap();
        save_supervised(&tuned, dir.path()).unwrap();
        assert_eq!(load_supervised(dir.path()).unwrap(), tuned);

        std::fs::remove_file(dir.path().join("recon1.bin")).unwrap();
        assert!(load_supervised(dir.path()).is_err());
    }

    #[test]
    fn adversarial_round_trip() {
        let data = synth_dataset(20, 2, 3, &[4, 3], 2).unwrap();
        let data = apply_missing_pattern(&data, &MissingSpec { target_rate: 0.3, seed: 0 }).unwrap();
        let config = GanConfig {
            latent_dim: 3,
            hidden_dims: vec![5],
            epochs: 4,
            ..GanConfig::default()
        };
        let model = train_unsupervised(&data, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_adversarial(&model, dir.path()).unwrap();
        assert_eq!(load_adversarial(dir.path()).unwrap(), model);
        assert!(load_supervised(dir.path()).is_err());
    }
}
