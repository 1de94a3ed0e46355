//! Voxel-wise connectivity features from cluster-labeled streamlines.
//!
//! Each nucleus voxel gets one entry per streamline cluster. The binary
//! intersection matrix is refined in two passes:
//!
//! 1. *dilation*: a voxel that no cluster intersects inherits every cluster
//!    intersecting one of its neighbors;
//! 2. *smoothing*: every remaining zero entry becomes `exp(-d^2 / 2)`, where
//!    `d` is the distance to the nearest voxel intersected by that cluster.

mod edt;
mod io;

pub use io::{load_features, save_features, FeatureManifest};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tract::StreamlineSet;
use crate::volio::{Connectivity, Mask};

/// Units for smoothing distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceUnits {
    #[default]
    Voxel,
    Millimeter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    /// Apply cluster dilation and Gaussian smoothing; off yields raw binary rows.
    pub dilate_smooth: bool,
    pub connectivity: Connectivity,
    pub units: DistanceUnits,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self { dilate_smooth: true, connectivity: Connectivity::TwentySix, units: DistanceUnits::Voxel }
    }
}

/// Binary voxel-by-cluster intersections, rows in lexicographic voxel order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntersectionMatrix {
    k: usize,
    voxels: Vec<[usize; 3]>,
    data: Vec<u8>,
}

impl IntersectionMatrix {
    pub fn new(k: usize, voxels: Vec<[usize; 3]>, data: Vec<u8>) -> Result<Self> {
        if data.len() != voxels.len() * k {
            return Err(Error::Shape(format!("{} entries for {} x {k}", data.len(), voxels.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Parameter("intersection entries must be 0 or 1".into()));
        }
        Ok(Self { k, voxels, data })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.voxels.len()
    }

    pub fn voxels(&self) -> &[[usize; 3]] {
        &self.voxels
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.data[r * self.k..(r + 1) * self.k]
    }

    pub fn get(&self, r: usize, j: usize) -> bool {
        self.data[r * self.k + j] != 0
    }

    pub fn is_empty_row(&self, r: usize) -> bool {
        self.row(r).iter().all(|&v| v == 0)
    }

    /// The matrix as 0/1 features.
    pub fn to_features(&self) -> FeatureMatrix {
        FeatureMatrix {
            k: self.k,
            voxels: self.voxels.clone(),
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Real-valued features in `[0, 1]`, one row per nucleus voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    k: usize,
    voxels: Vec<[usize; 3]>,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(k: usize, voxels: Vec<[usize; 3]>, data: Vec<f32>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Parameter("feature width must be positive".into()));
        }
        if data.len() != voxels.len() * k {
            return Err(Error::Shape(format!("{} entries for {} x {k}", data.len(), voxels.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("feature value {v} outside [0, 1]")));
        }
        Ok(Self { k, voxels, data })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.voxels.len()
    }

    pub fn voxels(&self) -> &[[usize; 3]] {
        &self.voxels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.k..(r + 1) * self.k]
    }

    pub fn get(&self, r: usize, j: usize) -> f32 {
        self.data[r * self.k + j]
    }
}

/// Row lookup from flat grid index; `u32::MAX` marks voxels outside the nucleus.
fn row_lookup(nucleus: &Mask, voxels: &[[usize; 3]]) -> Result<Vec<u32>> {
    if voxels.len() != nucleus.count() {
        return Err(Error::Shape(format!(
            "{} feature rows but the nucleus has {} voxels",
            voxels.len(),
            nucleus.count()
        )));
    }
    let mut lut = vec![u32::MAX; nucleus.geometry.len()];
    for (r, &c) in voxels.iter().enumerate() {
        if c.iter().zip(nucleus.geometry.dims()).any(|(&x, d)| x >= d) || !nucleus.get(c) {
            return Err(Error::Shape(format!("row {r} voxel {c:?} is not in the nucleus")));
        }
        lut[nucleus.geometry.index(c)] = r as u32;
    }
    Ok(lut)
}

/// Marks `v[i][j] = 1` when a streamline of cluster `j` passes through voxel `i`.
///
/// `ids` holds one cluster id in `1..=k` per streamline.
pub fn compute_intersections(
    set: &StreamlineSet,
    ids: &[u32],
    nucleus: &Mask,
    k: usize,
) -> Result<IntersectionMatrix> {
    if ids.len() != set.len() {
        return Err(Error::Shape(format!("{} cluster ids for {} streamlines", ids.len(), set.len())));
    }
    if k == 0 {
        return Err(Error::Parameter("K must be positive".into()));
    }
    if let Some(bad) = ids.iter().find(|&&id| id == 0 || id as usize > k) {
        return Err(Error::Parameter(format!("cluster id {bad} outside 1..={k}")));
    }
    if nucleus.count() == 0 {
        return Err(Error::Parameter("nucleus mask is empty".into()));
    }
    let voxels = nucleus.foreground_lexicographic();
    let lut = row_lookup(nucleus, &voxels)?;
    let geom = &nucleus.geometry;
    let mut data = vec![0u8; voxels.len() * k];
    for (s, &id) in set.streamlines.iter().zip(ids) {
        let col = id as usize - 1;
        s.voxels(geom, |c| {
            if let Some(idx) = geom.checked_index(c) {
                let r = lut[idx];
                if r != u32::MAX {
                    data[r as usize * k + col] = 1;
                }
            }
        });
    }
    IntersectionMatrix::new(k, voxels, data)
}

/// Fills each all-zero row with the union of its nucleus neighbors' rows.
/// Rows with any set entry are left as they are; neighbors are read from the
/// input, so fills do not cascade.
pub fn dilate_features(
    m: &IntersectionMatrix,
    nucleus: &Mask,
    connectivity: Connectivity,
) -> Result<IntersectionMatrix> {
    let lut = row_lookup(nucleus, &m.voxels)?;
    let geom = &nucleus.geometry;
    let offsets = connectivity.offsets();
    let k = m.k;
    let mut data = m.data.clone();
    for r in 0..m.rows() {
        if !m.is_empty_row(r) {
            continue;
        }
        let c = m.voxels[r];
        for o in &offsets {
            let n = [c[0] as i64 + o[0], c[1] as i64 + o[1], c[2] as i64 + o[2]];
            let Some(idx) = geom.checked_index(n) else { continue };
            let nr = lut[idx];
            if nr == u32::MAX {
                continue;
            }
            for j in 0..k {
                data[r * k + j] |= m.data[nr as usize * k + j];
            }
        }
    }
    IntersectionMatrix::new(k, m.voxels.clone(), data)
}

/// Unnormalized Gaussian with zero mean and unit sigma, taking `d^2`.
#[inline]
pub fn gaussian_of_squared(d2: f64) -> f64 {
    (-0.5 * d2).exp()
}

/// Replaces zero entries with `exp(-d^2/2)` of the distance to the nearest
/// voxel intersecting the same cluster; columns with no intersection stay 0.
pub fn smooth_features(m: &IntersectionMatrix, nucleus: &Mask, units: DistanceUnits) -> Result<FeatureMatrix> {
    row_lookup(nucleus, &m.voxels)?;
    let k = m.k;
    let rows = m.rows();
    let mut data: Vec<f32> = m.data.iter().map(|&v| v as f32).collect();
    if rows == 0 {
        return FeatureMatrix::new(k, m.voxels.clone(), data);
    }

    // distances only need the nucleus bounding box
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for c in &m.voxels {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let local = |c: [usize; 3]| (c[0] - lo[0]) + dims[0] * ((c[1] - lo[1]) + dims[1] * (c[2] - lo[2]));
    let weights = match units {
        DistanceUnits::Voxel => [1.0; 3],
        DistanceUnits::Millimeter => {
            let s = nucleus.geometry.spacing();
            [s[0] * s[0], s[1] * s[1], s[2] * s[2]]
        }
    };

    let box_len = dims.iter().product();
    let mut targets = vec![false; box_len];
    for j in 0..k {
        targets.fill(false);
        let mut any = false;
        for r in 0..rows {
            if m.get(r, j) {
                targets[local(m.voxels[r])] = true;
                any = true;
            }
        }
        if !any {
            continue;
        }
        let d2 = edt::squared_edt(&targets, dims, weights);
        for r in 0..rows {
            if !m.get(r, j) {
                data[r * k + j] = gaussian_of_squared(d2[local(m.voxels[r])]) as f32;
            }
        }
    }
    FeatureMatrix::new(k, m.voxels.clone(), data)
}

/// Intersections followed by dilation and smoothing, or raw binary rows when
/// `params.dilate_smooth` is off.
pub fn build_features(
    set: &StreamlineSet,
    ids: &[u32],
    nucleus: &Mask,
    k: usize,
    params: &FeatureParams,
) -> Result<FeatureMatrix> {
    let m = compute_intersections(set, ids, nucleus, k)?;
    if !params.dilate_smooth {
        return Ok(m.to_features());
    }
    let dilated = dilate_features(&m, nucleus, params.connectivity)?;
    smooth_features(&dilated, nucleus, params.units)
}

/// One voxel's feature row expanded to a circulant `K x K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    k: usize,
    data: Vec<f64>,
}

impl AugmentedSample {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Row-major `K x K` values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.k..(r + 1) * self.k]
    }
}

/// Row `r` of the output is the input rotated left by `r` positions.
pub fn augment_cyclic(row: &[f64]) -> Result<AugmentedSample> {
    let k = row.len();
    if k == 0 {
        return Err(Error::Parameter("cannot augment an empty feature row".into()));
    }
    let mut data = vec![0.0; k * k];
    write_circulant(row, &mut data);
    Ok(AugmentedSample { k, data })
}

pub(crate) fn write_circulant(row: &[f64], out: &mut [f64]) {
    let k = row.len();
    for r in 0..k {
        let dst = &mut out[r * k..(r + 1) * k];
        dst[..k - r].copy_from_slice(&row[r..]);
        dst[k - r..].copy_from_slice(&row[..r]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tract::Streamline;
    use crate::volio::Geometry;

    fn block_nucleus() -> Mask {
        let g = Geometry::with_spacing([6, 6, 6], [1.0; 3]).unwrap();
        Mask::from_fn(g, |c| c.iter().all(|&x| (1..5).contains(&x)))
    }

    #[test]
    fn streamline_through_three_voxels() {
        let g = Geometry::with_spacing([5, 5, 5], [1.0; 3]).unwrap();
        let nucleus = Mask::from_fn(g, |[i, j, k]| j == 2 && k == 2 && (1..4).contains(&i) || i == 0 && j == 0);
        let s = Streamline::new(vec![[-3.0, 2.0, 2.0], [3.2, 2.0, 2.0]]).unwrap();
        let m = compute_intersections(&StreamlineSet::new("s", vec![s]), &[1], &nucleus, 2).unwrap();
        let hit: Vec<[usize; 3]> = (0..m.rows()).filter(|&r| m.get(r, 0)).map(|r| m.voxels()[r]).collect();
        assert_eq!(hit, vec![[1, 2, 2], [2, 2, 2], [3, 2, 2]]);
        assert!((0..m.rows()).all(|r| !m.get(r, 1)));
    }

    #[test]
    fn no_streamline_in_nucleus_gives_zero_matrix() {
        let nucleus = block_nucleus();
        let s = Streamline::new(vec![[40.0, 40.0, 40.0], [50.0, 40.0, 40.0]]).unwrap();
        let m = compute_intersections(&StreamlineSet::new("s", vec![s]), &[1], &nucleus, 3).unwrap();
        assert!((0..m.rows()).all(|r| m.is_empty_row(r)));
        // and smoothing keeps all-zero columns at zero
        let f = smooth_features(&m, &nucleus, DistanceUnits::Voxel).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_ids_rejected() {
        let nucleus = block_nucleus();
        let s = Streamline::new(vec![[0.0; 3], [1.0, 1.0, 1.0]]).unwrap();
        let set = StreamlineSet::new("s", vec![s]);
        assert!(compute_intersections(&set, &[0], &nucleus, 3).is_err());
        assert!(compute_intersections(&set, &[4], &nucleus, 3).is_err());
        assert!(compute_intersections(&set, &[1, 2], &nucleus, 3).is_err());
        assert!(compute_intersections(&set, &[1], &Mask::empty(nucleus.geometry.clone()), 3).is_err());
    }

    fn matrix_with(nucleus: &Mask, k: usize, set: &[([usize; 3], usize)]) -> IntersectionMatrix {
        let voxels = nucleus.foreground_lexicographic();
        let mut data = vec![0u8; voxels.len() * k];
        for &(c, j) in set {
            let r = voxels.iter().position(|&v| v == c).unwrap();
            data[r * k + j] = 1;
        }
        IntersectionMatrix::new(k, voxels, data).unwrap()
    }

    #[test]
    fn dilation_fills_from_face_neighbor() {
        let nucleus = block_nucleus();
        let m = matrix_with(&nucleus, 5, &[([2, 2, 2], 3)]);
        let d = dilate_features(&m, &nucleus, Connectivity::Six).unwrap();
        let r = d.voxels().iter().position(|&v| v == [3, 2, 2]).unwrap();
        assert!(d.get(r, 3));
        // a voxel two steps away stays empty
        let far = d.voxels().iter().position(|&v| v == [4, 2, 2]).unwrap();
        assert!(d.is_empty_row(far));
        // corner neighbor only under 26-connectivity
        let corner = d.voxels().iter().position(|&v| v == [3, 3, 3]).unwrap();
        assert!(d.is_empty_row(corner));
        let d26 = dilate_features(&m, &nucleus, Connectivity::TwentySix).unwrap();
        assert!(d26.get(corner, 3));
    }

    #[test]
    fn dilation_leaves_nonempty_rows() {
        let nucleus = block_nucleus();
        let all: Vec<([usize; 3], usize)> = nucleus.foreground_lexicographic().into_iter().map(|c| (c, (c[0] + c[1]) % 3)).collect();
        let m = matrix_with(&nucleus, 3, &all);
        assert_eq!(dilate_features(&m, &nucleus, Connectivity::TwentySix).unwrap(), m);
        // a non-empty row next to other clusters is untouched
        let m = matrix_with(&nucleus, 3, &[([2, 2, 2], 0), ([2, 2, 3], 1)]);
        let d = dilate_features(&m, &nucleus, Connectivity::TwentySix).unwrap();
        let r = d.voxels().iter().position(|&v| v == [2, 2, 2]).unwrap();
        assert_eq!(d.row(r), &[1, 0, 0]);
    }

    #[test]
    fn smoothing_values() {
        let nucleus = block_nucleus();
        let m = matrix_with(&nucleus, 2, &[([2, 2, 2], 0)]);
        let f = smooth_features(&m, &nucleus, DistanceUnits::Voxel).unwrap();
        let at = |c: [usize; 3]| f.voxels().iter().position(|&v| v == c).unwrap();
        assert_eq!(f.get(at([2, 2, 2]), 0), 1.0);
        assert!((f.get(at([3, 2, 2]), 0) as f64 - (-0.5f64).exp()).abs() < 1e-7);
        assert!((f.get(at([3, 3, 2]), 0) as f64 - (-1.0f64).exp()).abs() < 1e-7);
        assert_eq!(f.get(at([3, 3, 2]), 1), 0.0);
    }

    #[test]
    fn millimeter_units_scale_distance() {
        let g = Geometry::with_spacing([4, 4, 4], [2.0, 2.0, 2.0]).unwrap();
        let nucleus = Mask::from_fn(g, |_| true);
        let m = matrix_with(&nucleus, 1, &[([0, 0, 0], 0)]);
        let f = smooth_features(&m, &nucleus, DistanceUnits::Millimeter).unwrap();
        let r = f.voxels().iter().position(|&v| v == [1, 0, 0]).unwrap();
        assert!((f.get(r, 0) as f64 - (-2.0f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn circulant_rows() {
        let a = augment_cyclic(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0, 3.0, 2.0, 3.0, 1.0, 3.0, 1.0, 2.0]);
        let c = augment_cyclic(&[0.5; 4]).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.5));
        assert!(augment_cyclic(&[]).is_err());
    }

    #[test]
    fn mismatched_nucleus_rejected() {
        let nucleus = block_nucleus();
        let m = matrix_with(&nucleus, 2, &[]);
        let other = Mask::from_fn(nucleus.geometry.clone(), |c| c[0] < 3);
        assert!(dilate_features(&m, &other, Connectivity::Six).is_err());
        assert!(smooth_features(&m, &other, DistanceUnits::Voxel).is_err());
    }
}
