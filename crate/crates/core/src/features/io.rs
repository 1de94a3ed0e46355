//! Feature persistence: `<stem>.toml` manifest, `<stem>.f32` row-major
//! little-endian payload, `<stem>.voxels.csv` with `row,i,j,k`.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, FeatureParams};
use crate::error::{Error, Result};
use crate::util::sha256_hex;

const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub format: u32,
    pub subject_id: String,
    pub rows: usize,
    pub k: usize,
    pub mask_checksum: String,
    pub payload_sha256: String,
    pub payload: String,
    pub voxels: String,
    pub params: FeatureParams,
}

fn sibling(stem: &Path, suffix: &str) -> PathBuf {
    let mut name = stem.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    stem.with_file_name(name)
}

fn file_name(p: &Path) -> String {
    p.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

/// Writes the three feature files next to `stem` and returns the manifest.
pub fn save_features(
    m: &FeatureMatrix,
    subject_id: &str,
    mask_checksum: &str,
    params: &FeatureParams,
    stem: impl AsRef<Path>,
) -> Result<FeatureManifest> {
    let stem = stem.as_ref();
    let payload_path = sibling(stem, ".f32");
    let voxels_path = sibling(stem, ".voxels.csv");
    let manifest_path = sibling(stem, ".toml");

    let mut bytes = vec![0u8; m.data.len() * 4];
    LittleEndian::write_f32_into(&m.data, &mut bytes);
    fs::write(&payload_path, &bytes).map_err(|e| Error::io(&payload_path, e))?;

    let mut w = csv::Writer::from_path(&voxels_path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["row", "i", "j", "k"]).map_err(|e| Error::Format(e.to_string()))?;
    for (r, c) in m.voxels.iter().enumerate() {
        w.serialize((r, c[0], c[1], c[2])).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&voxels_path, e))?;

    let manifest = FeatureManifest {
        format: FORMAT,
        subject_id: subject_id.to_owned(),
        rows: m.rows(),
        k: m.k,
        mask_checksum: mask_checksum.to_owned(),
        payload_sha256: sha256_hex(&bytes),
        payload: file_name(&payload_path),
        voxels: file_name(&voxels_path),
        params: *params,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn load_features(stem: impl AsRef<Path>) -> Result<(FeatureMatrix, FeatureManifest)> {
    let stem = stem.as_ref();
    let manifest_path = sibling(stem, ".toml");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: FeatureManifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("unsupported feature format {}", manifest.format)));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));

    let payload_path = dir.join(&manifest.payload);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if bytes.len() != manifest.rows * manifest.k * 4 {
        return Err(Error::Shape(format!(
            "payload has {} bytes, manifest declares {} x {}",
            bytes.len(),
            manifest.rows,
            manifest.k
        )));
    }
    if sha256_hex(&bytes) != manifest.payload_sha256 {
        return Err(Error::Format(format!("{} does not match its checksum", payload_path.display())));
    }
    let mut data = vec![0f32; manifest.rows * manifest.k];
    LittleEndian::read_f32_into(&bytes, &mut data);

    let voxels_path = dir.join(&manifest.voxels);
    let mut rdr = csv::Reader::from_path(&voxels_path).map_err(|e| Error::Parse(e.to_string()))?;
    let mut voxels = Vec::with_capacity(manifest.rows);
    for (expected, rec) in rdr.deserialize::<(usize, usize, usize, usize)>().enumerate() {
        let (r, i, j, k) = rec.map_err(|e| Error::Parse(format!("{}: {e}", voxels_path.display())))?;
        if r != expected {
            return Err(Error::Parse(format!("{}: row {r} out of order", voxels_path.display())));
        }
        voxels.push([i, j, k]);
    }
    if voxels.len() != manifest.rows {
        return Err(Error::Shape(format!("{} voxel rows, manifest declares {}", voxels.len(), manifest.rows)));
    }
    let m = FeatureMatrix::new(manifest.k, voxels, data)?;
    Ok((m, manifest))
}
