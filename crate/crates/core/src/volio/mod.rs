//! Volumetric data: geometry, scalar volumes, binary masks and labelmaps.
//!
//! Voxel data is stored x-fastest (`i + nx * (j + ny * k)`), matching the
//! NIfTI on-disk order. All processing happens in voxel-index space; the
//! affine is only used to bring world-space streamline points onto the grid.

mod morph;
mod nifti;
mod traverse;

pub use morph::{connected_components, dilate_mask, Components};
pub use nifti::{load_labelmap, load_mask, load_volume, save_volume, Datatype, VolumeRef};
pub use traverse::traverse_segment;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Affine = [[f64; 4]; 4];

/// Voxel neighborhood used by morphology and component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Face neighbors.
    Six,
    /// Face and edge neighbors.
    Eighteen,
    /// Face, edge and corner neighbors.
    #[default]
    TwentySix,
}

impl Connectivity {
    /// Offsets of the neighborhood, excluding the center voxel.
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::Eighteen => manhattan == 1 || manhattan == 2,
                        Connectivity::TwentySix => manhattan >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::Parameter(format!("connectivity must be 6, 18 or 26, got {other}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        c.as_u8()
    }
}

impl std::str::FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::Parameter(format!("invalid connectivity '{s}'")))?;
        Connectivity::try_from(n)
    }
}

/// Grid shape, voxel size and voxel-index to world-mm transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Affine,
    inverse: Affine,
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], affine: Affine) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Parameter(format!("grid dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Parameter(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        let inverse = invert_affine(&affine)
            .ok_or_else(|| Error::Parameter("affine is not invertible".into()))?;
        Ok(Self { dims, spacing, affine, inverse })
    }

    /// Axis-aligned grid with the origin at voxel (0,0,0).
    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let mut affine = [[0.0; 4]; 4];
        for (a, s) in spacing.iter().enumerate() {
            affine[a][a] = *s;
        }
        affine[3][3] = 1.0;
        Self::new(dims, spacing, affine)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, [i, j, k]: [usize; 3]) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Flat index for a signed coordinate, or `None` outside the grid.
    #[inline]
    pub fn checked_index(&self, c: [i64; 3]) -> Option<usize> {
        for a in 0..3 {
            if c[a] < 0 || c[a] >= self.dims[a] as i64 {
                return None;
            }
        }
        Some(self.index([c[0] as usize, c[1] as usize, c[2] as usize]))
    }

    /// Continuous voxel coordinates; voxel centers sit at integers.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.inverse, p)
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.affine, v)
    }

    /// Same dims and (to f32 precision) same spacing and affine.
    pub fn same_grid(&self, other: &Geometry) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-5 * (1.0 + a.abs().max(b.abs()));
        self.dims == other.dims
            && self.spacing.iter().zip(&other.spacing).all(|(a, b)| close(*a, *b))
            && self
                .affine
                .iter()
                .flatten()
                .zip(other.affine.iter().flatten())
                .all(|(a, b)| close(*a, *b))
    }

    pub(crate) fn ensure_same_grid(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: grid {:?} does not match {:?}",
                other.dims, self.dims
            )))
        }
    }
}

pub fn apply_affine(m: &Affine, p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (r, o) in out.iter_mut().enumerate() {
        *o = m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3];
    }
    out
}

/// Inverse of an affine whose last row is `[0, 0, 0, 1]`.
pub fn invert_affine(m: &Affine) -> Option<Affine> {
    let a = m;
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    if !det.is_finite() || det.abs() < 1e-12 {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut r = [[0.0; 4]; 4];
    r[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) * inv_det;
    r[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv_det;
    r[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv_det;
    r[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) * inv_det;
    r[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv_det;
    r[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv_det;
    r[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) * inv_det;
    r[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * inv_det;
    r[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv_det;
    for row in 0..3 {
        r[row][3] = -(r[row][0] * a[0][3] + r[row][1] * a[1][3] + r[row][2] * a[2][3]);
    }
    r[3][3] = 1.0;
    Some(r)
}

/// Scalar image such as an FA map.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub geometry: Geometry,
    pub data: Vec<f32>,
}

impl Volume3D {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        check_len(&geometry, data.len())?;
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.len();
        Self { geometry, data: vec![0.0; n] }
    }

    pub fn get(&self, c: [usize; 3]) -> f32 {
        self.data[self.geometry.index(c)]
    }
}

/// Binary mask; every value is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub geometry: Geometry,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(geometry: Geometry, data: Vec<u8>) -> Result<Self> {
        check_len(&geometry, data.len())?;
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Format(format!("mask values must be 0 or 1, found {v}")));
        }
        Ok(Self { geometry, data })
    }

    pub fn empty(geometry: Geometry) -> Self {
        let n = geometry.len();
        Self { geometry, data: vec![0; n] }
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut([usize; 3]) -> bool) -> Self {
        let data = (0..geometry.len()).map(|idx| f(geometry.coords(idx)) as u8).collect();
        Self { geometry, data }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn is_set(&self, idx: usize) -> bool {
        self.data[idx] != 0
    }

    pub fn get(&self, c: [usize; 3]) -> bool {
        self.is_set(self.geometry.index(c))
    }

    pub fn set(&mut self, c: [usize; 3], on: bool) {
        let idx = self.geometry.index(c);
        self.data[idx] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Flat indices of foreground voxels in storage order.
    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i)
    }

    /// Foreground voxel coordinates in lexicographic `(i, j, k)` order.
    pub fn foreground_lexicographic(&self) -> Vec<[usize; 3]> {
        let [nx, ny, nz] = self.geometry.dims();
        let mut out = Vec::with_capacity(self.count());
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    if self.get([i, j, k]) {
                        out.push([i, j, k]);
                    }
                }
            }
        }
        out
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| *a <= *b)
    }

    /// SHA-256 over dims and voxel payload.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::with_capacity(self.data.len() + 24);
        for d in self.geometry.dims() {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&self.data);
        crate::util::sha256_hex(&bytes)
    }
}

/// Integer labels, 0 = background.
#[derive(Debug, Clone, PartialEq)]
pub struct Labelmap {
    pub geometry: Geometry,
    pub data: Vec<u32>,
}

impl Labelmap {
    pub fn new(geometry: Geometry, data: Vec<u32>) -> Result<Self> {
        check_len(&geometry, data.len())?;
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.len();
        Self { geometry, data: vec![0; n] }
    }

    pub fn get(&self, c: [usize; 3]) -> u32 {
        self.data[self.geometry.index(c)]
    }

    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Mask of voxels carrying `label`.
    pub fn region(&self, label: u32) -> Mask {
        Mask {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|&v| (v == label) as u8).collect(),
        }
    }

    /// Mask of all nonzero voxels.
    pub fn support(&self) -> Mask {
        Mask {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|&v| (v != 0) as u8).collect(),
        }
    }

    /// Voxel count per label `0..=max_label`.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.max_label() as usize + 1];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }
}

fn check_len(geometry: &Geometry, len: usize) -> Result<()> {
    if geometry.len() != len {
        return Err(Error::Shape(format!(
            "data length {len} does not match dims {:?}",
            geometry.dims()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neighborhood_sizes() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
        assert!("12".parse::<Connectivity>().is_err());
    }

    #[test]
    fn affine_inverse_roundtrip() {
        let affine = [
            [0.0, -1.25, 0.0, 90.0],
            [1.25, 0.0, 0.0, -126.0],
            [0.0, 0.1, 1.25, -72.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let g = Geometry::new([10, 12, 14], [1.25; 3], affine).unwrap();
        let v = [3.5, -2.0, 7.25];
        let back = g.world_to_voxel(g.voxel_to_world(v));
        for a in 0..3 {
            assert!((back[a] - v[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn geometry_rejects_bad_input() {
        assert!(Geometry::with_spacing([0, 4, 4], [1.0; 3]).is_err());
        assert!(Geometry::with_spacing([4, 4, 4], [1.0, -1.0, 1.0]).is_err());
        let singular = [[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        assert!(Geometry::new([4, 4, 4], [1.0; 3], singular).is_err());
    }

    #[test]
    fn index_coords_inverse() {
        let g = Geometry::with_spacing([3, 4, 5], [1.0; 3]).unwrap();
        for idx in 0..g.len() {
            assert_eq!(g.index(g.coords(idx)), idx);
        }
    }

    #[test]
    fn mask_rejects_non_binary() {
        let g = Geometry::with_spacing([2, 1, 1], [1.0; 3]).unwrap();
        assert!(Mask::new(g, vec![0, 2]).is_err());
    }
}
