//! Checkpoints: `<stem>.toml` manifest and `<stem>.bin` little-endian float64 payload.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use super::kmeans::Centroids;
use super::network::{build_autoencoder, Autoencoder};
use crate::error::{Error, Result};
use crate::util::sha256_hex;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    payload: String,
    payload_sha256: String,
    centroid_counts: Vec<u64>,
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
}

/// A trained network with its centroids and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Autoencoder,
    pub centroids: Centroids,
    pub config: NetworkConfig,
}

fn sibling(stem: &Path, suffix: &str) -> PathBuf {
    let mut name = stem.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    stem.with_file_name(name)
}

/// Every stored tensor in payload order.
fn tensors(model: &Autoencoder, centroids: &Centroids) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out: Vec<(String, Vec<usize>, Vec<f64>)> =
        model.params().iter().map(|p| (p.name.clone(), p.shape.clone(), p.value.clone())).collect();
    for (i, bn) in model.bn_layers().enumerate() {
        let c = bn.running_mean.len();
        out.push((format!("bn{i}.running_mean"), vec![c], bn.running_mean.clone()));
        out.push((format!("bn{i}.running_var"), vec![c], bn.running_var.clone()));
    }
    out.push(("centroids".into(), vec![centroids.len(), centroids.dim()], centroids.data().to_vec()));
    out
}

/// Returns the sha256 of the payload, usable as a checkpoint id.
pub fn save_checkpoint(
    model: &Autoencoder,
    centroids: &Centroids,
    cfg: &NetworkConfig,
    stem: impl AsRef<Path>,
) -> Result<String> {
    let stem = stem.as_ref();
    if centroids.dim() != model.latent_dim() || centroids.len() != cfg.c {
        return Err(Error::Shape("centroids do not match the network configuration".into()));
    }
    let payload_path = sibling(stem, ".bin");
    let manifest_path = sibling(stem, ".toml");
    let mut entries = Vec::new();
    let mut values = Vec::new();
    for (name, shape, v) in tensors(model, centroids) {
        entries.push(TensorEntry { name, shape, offset: values.len() });
        values.extend(v);
    }
    let mut bytes = vec![0u8; values.len() * 8];
    LittleEndian::write_f64_into(&values, &mut bytes);
    let checksum = sha256_hex(&bytes);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "float64".into(),
        payload: payload_path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        payload_sha256: checksum.clone(),
        centroid_counts: centroids.counts().to_vec(),
        config: cfg.clone(),
        tensors: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&payload_path, &bytes).map_err(|e| Error::io(&payload_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(checksum)
}

pub fn load_checkpoint(stem: impl AsRef<Path>) -> Result<Checkpoint> {
    let stem = stem.as_ref();
    let manifest_path = sibling(stem, ".toml");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", manifest.format_version)));
    }
    if manifest.dtype != "float64" {
        return Err(Error::UnsupportedDatatype(format!("checkpoint dtype {}", manifest.dtype)));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let payload_path = dir.join(&manifest.payload);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Shape(format!("payload length {} is not a multiple of 8", bytes.len())));
    }
    let mut values = vec![0f64; bytes.len() / 8];
    LittleEndian::read_f64_into(&bytes, &mut values);

    let cfg = manifest.config.clone();
    let mut model = build_autoencoder(&cfg, 0)?;
    let template = Centroids::new(cfg.latent_dim, vec![0.0; cfg.c * cfg.latent_dim])?;
    let expected = tensors(&model, &template);
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Shape(format!("manifest lists {} tensors, configuration implies {}", manifest.tensors.len(), expected.len())));
    }
    let mut offset = 0;
    for ((name, shape, _), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name || *shape != entry.shape || entry.offset != offset {
            return Err(Error::Shape(format!("tensor {} {:?} does not match expected {name} {shape:?}", entry.name, entry.shape)));
        }
        offset += shape.iter().product::<usize>();
    }
    if offset != values.len() {
        return Err(Error::Shape(format!("payload holds {} values, manifest declares {offset}", values.len())));
    }
    if sha256_hex(&bytes) != manifest.payload_sha256 {
        return Err(Error::Format(format!("{} does not match its checksum", payload_path.display())));
    }

    let mut cursor = 0;
    let mut take = |n: usize| {
        let s = &values[cursor..cursor + n];
        cursor += n;
        s.to_vec()
    };
    for p in model.params_mut() {
        p.value = take(p.value.len());
    }
    for bn in model.bn_layers_mut() {
        bn.running_mean = take(bn.running_mean.len());
        bn.running_var = take(bn.running_var.len());
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("checkpoint contains non-finite values".into()));
    }
    let centroids = Centroids::with_counts(cfg.latent_dim, take(cfg.c * cfg.latent_dim), manifest.centroid_counts)?;
    Ok(Checkpoint { model, centroids, config: cfg })
}
