//! Streamlines: ingestion, inclusion-mask filtering and groupwise clustering.

mod cluster;
mod tck;

pub use cluster::{
    assign_clusters, cluster_streamlines, load_cluster_model, save_cluster_model, ClusterModel,
    ClusterParams,
};
pub use tck::{load_tck, save_tck};

use crate::error::{Error, Result};
use crate::volio::{traverse_segment, Affine, Geometry, Mask};

pub type Point = [f64; 3];

/// A polyline in world (mm) coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Streamline {
    points: Vec<Point>,
}

impl Streamline {
    /// At least two finite points, no two consecutive points equal.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Degenerate(format!("streamline has {} points", points.len())));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("streamline has non-finite coordinates".into()));
        }
        if points.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Degenerate("streamline has repeated consecutive points".into()));
        }
        Ok(Self { points })
    }

    pub(crate) fn from_points_unchecked(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(&w[0], &w[1])).sum()
    }

    pub fn reversed(&self) -> Self {
        let mut points = self.points.clone();
        points.reverse();
        Self { points }
    }

    /// Every grid voxel the polyline passes through, in traversal order.
    /// Coordinates may fall outside the grid; consecutive duplicates are
    /// suppressed but revisits are not.
    pub fn voxels(&self, geometry: &Geometry, mut visit: impl FnMut([i64; 3])) {
        let mut prev: Option<[i64; 3]> = None;
        let pts: Vec<Point> = self.points.iter().map(|p| geometry.world_to_voxel(*p)).collect();
        for w in pts.windows(2) {
            traverse_segment(w[0], w[1], |c| {
                if prev != Some(c) {
                    prev = Some(c);
                    visit(c);
                }
            });
        }
    }
}

#[inline]
pub(crate) fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Streamlines of one subject.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StreamlineSet {
    pub streamlines: Vec<Streamline>,
    pub subject_id: String,
    /// Affine of the companion volume, when known.
    pub reference: Option<Affine>,
}

impl StreamlineSet {
    pub fn new(subject_id: impl Into<String>, streamlines: Vec<Streamline>) -> Self {
        Self { streamlines, subject_id: subject_id.into(), reference: None }
    }

    pub fn len(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }
}

/// Result of [`filter_by_mask`].
#[derive(Debug, Clone)]
pub struct Filtered {
    pub set: StreamlineSet,
    /// Index in the input set of each retained streamline.
    pub kept: Vec<usize>,
    /// Set when the inclusion mask has no foreground.
    pub empty_mask: bool,
}

/// Keeps the streamlines that pass through at least one foreground voxel.
///
/// Segments are walked voxel by voxel, so a segment that crosses a voxel
/// between two vertices lying outside it still counts as passing through.
pub fn filter_by_mask(set: &StreamlineSet, inclusion: &Mask) -> Filtered {
    let empty_mask = inclusion.count() == 0;
    if empty_mask {
        log::warn!("inclusion mask for '{}' is empty; no streamlines retained", set.subject_id);
    }
    let geom = &inclusion.geometry;
    let mut kept = Vec::new();
    if !empty_mask {
        for (i, s) in set.streamlines.iter().enumerate() {
            let mut hit = false;
            s.voxels(geom, |c| {
                if !hit {
                    hit = geom.checked_index(c).is_some_and(|idx| inclusion.is_set(idx));
                }
            });
            if hit {
                kept.push(i);
            }
        }
    }
    let streamlines = kept.iter().map(|&i| set.streamlines[i].clone()).collect();
    Filtered {
        set: StreamlineSet {
            streamlines,
            subject_id: set.subject_id.clone(),
            reference: set.reference,
        },
        kept,
        empty_mask,
    }
}

/// Resamples to `count` points at equal arc-length spacing, keeping endpoints.
pub fn resample_streamline(s: &Streamline, count: usize) -> Result<Streamline> {
    if count < 2 {
        return Err(Error::Parameter(format!("resample count must be >= 2, got {count}")));
    }
    let pts = s.points();
    let mut cumulative = Vec::with_capacity(pts.len());
    cumulative.push(0.0);
    for w in pts.windows(2) {
        let last = *cumulative.last().unwrap();
        cumulative.push(last + dist(&w[0], &w[1]));
    }
    let total = *cumulative.last().unwrap();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Degenerate("zero-length streamline cannot be resampled".into()));
    }

    let mut out = Vec::with_capacity(count);
    out.push(pts[0]);
    let mut seg = 0usize;
    for n in 1..count - 1 {
        let target = total * n as f64 / (count - 1) as f64;
        while seg + 1 < cumulative.len() - 1 && cumulative[seg + 1] < target {
            seg += 1;
        }
        let seg_len = cumulative[seg + 1] - cumulative[seg];
        let t = if seg_len > 0.0 { (target - cumulative[seg]) / seg_len } else { 0.0 };
        let (a, b) = (pts[seg], pts[seg + 1]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]);
    }
    out.push(pts[pts.len() - 1]);
    Ok(Streamline::from_points_unchecked(out))
}

/// Symmetric mean closest-point distance in mm.
///
/// For every point of one streamline the nearest point of the other is found;
/// the two directed means are averaged. Matching by nearest point makes the
/// distance independent of either streamline's orientation.
pub fn streamline_distance(a: &Streamline, b: &Streamline) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "streamline point counts differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(mean_closest_point(a.points(), b.points()))
}

pub(crate) fn mean_closest_point(a: &[Point], b: &[Point]) -> f64 {
    let mut a_to_b = vec![f64::INFINITY; a.len()];
    let mut b_to_a = vec![f64::INFINITY; b.len()];
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            if d < a_to_b[i] {
                a_to_b[i] = d;
            }
            if d < b_to_a[j] {
                b_to_a[j] = d;
            }
        }
    }
    let ma = a_to_b.iter().map(|d| d.sqrt()).sum::<f64>() / a.len() as f64;
    let mb = b_to_a.iter().map(|d| d.sqrt()).sum::<f64>() / b.len() as f64;
    0.5 * (ma + mb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::Geometry;

    fn line(pts: &[Point]) -> Streamline {
        Streamline::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn streamline_invariants() {
        assert!(Streamline::new(vec![[0.0; 3]]).is_err());
        assert!(Streamline::new(vec![[0.0; 3], [0.0; 3]]).is_err());
        assert!(Streamline::new(vec![[0.0; 3], [f64::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn straight_segment_resample() {
        let r = resample_streamline(&line(&[[0.0; 3], [1.0, 0.0, 0.0]]), 3).unwrap();
        assert_eq!(r.points(), &[[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn resample_is_fixed_point_on_equal_spacing() {
        let s = line(&[[0.0; 3], [1.0, 1.0, 0.0], [2.0, 2.0, 0.0], [3.0, 3.0, 0.0]]);
        let r = resample_streamline(&s, 4).unwrap();
        for (p, q) in r.points().iter().zip(s.points()) {
            assert!(dist(p, q) < 1e-12);
        }
    }

    #[test]
    fn resample_rejects_bad_input() {
        let s = line(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(resample_streamline(&s, 1).is_err());
        // a closed loop whose vertices are distinct still has positive length
        let loop_ = line(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0; 3]]);
        assert!(resample_streamline(&loop_, 5).is_ok());
    }

    #[test]
    fn distance_basics() {
        let a = resample_streamline(&line(&[[0.0; 3], [10.0, 0.0, 0.0]]), 11).unwrap();
        let b = resample_streamline(&line(&[[0.0, 2.5, 0.0], [10.0, 2.5, 0.0]]), 11).unwrap();
        assert_eq!(streamline_distance(&a, &a).unwrap(), 0.0);
        assert!((streamline_distance(&a, &b).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(streamline_distance(&a, &a.reversed()).unwrap(), 0.0);
        let short = resample_streamline(&a, 5).unwrap();
        assert!(streamline_distance(&a, &short).is_err());
    }

    #[test]
    fn filter_keeps_crossing_segment() {
        let g = Geometry::with_spacing([5, 5, 5], [2.0; 3]).unwrap();
        let mut m = Mask::empty(g);
        m.set([2, 2, 2], true);
        // vertices at voxel x = 0 and x = 4; the segment passes through voxel (2,2,2)
        let through = line(&[[0.0, 4.0, 4.0], [8.0, 4.0, 4.0]]);
        let outside = line(&[[100.0, 100.0, 100.0], [120.0, 100.0, 100.0]]);
        let set = StreamlineSet::new("s", vec![through, outside]);
        let f = filter_by_mask(&set, &m);
        assert_eq!(f.kept, vec![0]);
        assert!(!f.empty_mask);

        let empty = filter_by_mask(&set, &Mask::empty(m.geometry.clone()));
        assert!(empty.empty_mask);
        assert!(empty.set.is_empty());
    }
}
