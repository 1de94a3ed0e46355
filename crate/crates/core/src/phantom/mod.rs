//! Synthetic nuclei with streamline bundles and known sector parcels.
//!
//! The nucleus is an ellipsoid split into `G` angular sectors of the axial
//! plane. Each sector's wedge is shrunk by `inset` on both sides; all of its
//! streamlines leave the apex of that shrunken wedge as straight rays in the
//! axial plane, cross the nucleus, and then bend towards a target far
//! outside on the sector bisector. The bundles of a sector interleave over
//! the whole wedge and differ only in the height of their targets. Ray
//! angles and heights follow a fixed low-discrepancy layout, with a third of
//! the rays pinned to the wedge edges. Each streamline is shifted by one
//! rigid Gaussian offset in millimeters with norm clipped at
//! `2 * sigma_jitter`; while that stays below `inset` every streamline stays
//! in its sector. Subjects differ only through the seed.

mod recovery;

pub use recovery::{adjusted_rand_index, evaluate_recovery, Recovery};

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tract::{save_tck, Streamline, StreamlineSet};
use crate::util;
use crate::volio::{save_volume, Geometry, Labelmap, Mask, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Ellipsoid center in voxel coordinates.
    pub center: [f64; 3],
    /// Ellipsoid semi-axes in voxels.
    pub radii: [f64; 3],
    pub sectors: usize,
    pub bundles_per_sector: usize,
    pub streamlines_per_bundle: usize,
    pub points_per_streamline: usize,
    /// Standard deviation of the per-streamline offset, in millimeters.
    pub sigma_jitter: f64,
    /// Distance of each sector's target from the center, in voxels.
    pub r_target: f64,
    /// Clearance of entry points from the sector borders, in voxels.
    pub inset: f64,
    pub fa_levels: Vec<f64>,
    pub fa_background: f64,
    pub fa_noise: f64,
    /// Streamlines well away from the nucleus, labeled bundle 0.
    pub distractors: usize,
    pub subjects: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            spacing: [1.0; 3],
            center: [15.5, 15.5, 16.0],
            radii: [9.0, 9.0, 3.0],
            sectors: 4,
            bundles_per_sector: 2,
            streamlines_per_bundle: 50,
            points_per_streamline: 12,
            sigma_jitter: 0.0,
            r_target: 40.0,
            inset: 2.5,
            fa_levels: vec![0.3, 0.45, 0.6, 0.75],
            fa_background: 0.1,
            fa_noise: 0.02,
            distractors: 5,
            subjects: 4,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.radii.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
            return bad(format!("degenerate ellipsoid radii {:?}", self.radii));
        }
        if self.sectors < 2 {
            return bad("at least two sectors are needed".into());
        }
        if self.bundles_per_sector == 0 || self.streamlines_per_bundle == 0 {
            return bad("every sector needs at least one bundle with one streamline".into());
        }
        if self.points_per_streamline < 2 {
            return bad("streamlines need at least two points".into());
        }
        if self.fa_levels.len() != self.sectors {
            return bad(format!("{} FA levels for {} sectors", self.fa_levels.len(), self.sectors));
        }
        if self.fa_levels.iter().chain([&self.fa_background]).any(|&f| !(f > 0.0 && f < 1.0)) {
            return bad("FA levels must lie in (0, 1)".into());
        }
        if !(self.sigma_jitter >= 0.0 && self.fa_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(self.inset >= 0.0 && self.r_target > self.radii[0].max(self.radii[1])) {
            return bad("inset must be non-negative and r_target beyond the nucleus".into());
        }
        let apex = self.inset / (PI / self.sectors as f64).sin();
        if apex >= self.radii[0].min(self.radii[1]) * (1.0 - ZETA_MAX * ZETA_MAX).sqrt() {
            return bad(format!("inset {} leaves no room for entry points", self.inset));
        }
        if self.subjects == 0 {
            return bad("at least one subject".into());
        }
        let nucleus = self.nucleus()?;
        if nucleus.count() == 0 {
            return bad("ellipsoid contains no voxel center".into());
        }
        for s in 0..self.sectors {
            if !nucleus.foreground().any(|i| self.sector_of(nucleus.geometry.coords(i)) == s) {
                return bad(format!("sector {s} contains no voxel"));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::with_spacing(self.dims, self.spacing)
    }

    pub fn nucleus(&self) -> Result<Mask> {
        let g = self.geometry()?;
        Ok(Mask::from_fn(g, |v| {
            (0..3).map(|a| ((v[a] as f64 - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
        }))
    }

    /// Sector index of a voxel-space position, by axial angle about the center.
    pub fn sector_of_point(&self, p: [f64; 3]) -> usize {
        let angle = (p[1] - self.center[1]).atan2(p[0] - self.center[0]).rem_euclid(TAU);
        ((angle / (TAU / self.sectors as f64)) as usize).min(self.sectors - 1)
    }

    pub fn sector_of(&self, v: [usize; 3]) -> usize {
        self.sector_of_point([v[0] as f64, v[1] as f64, v[2] as f64])
    }

    fn bisector(&self, g: usize) -> f64 {
        (g as f64 + 0.5) * TAU / self.sectors as f64
    }

    /// Target point of sector `g`, in voxel coordinates.
    /// Far end of bundle `b` in sector `g`: on the bisector at `r_target`,
    /// with bundles spread over `r_target` in z.
    pub fn bundle_target(&self, g: usize, b: usize) -> [f64; 3] {
        let phi = self.bisector(g);
        let dz = (2.0 * (b as f64 + 0.5) / self.bundles_per_sector as f64 - 1.0) * self.r_target / 2.0;
        [self.center[0] + self.r_target * phi.cos(), self.center[1] + self.r_target * phi.sin(), self.center[2] + dz]
    }

    /// Voxel-space polyline of streamline `i` of bundle `b` in sector `g`,
    /// before jitter. The bundles of a sector interleave over the whole
    /// wedge. Index 0 of a single bundle runs along the bisector at the
    /// center height.
    pub fn streamline_path(&self, g: usize, b: usize, i: usize) -> Vec<[f64; 3]> {
        let u = low_discrepancy(i * self.bundles_per_sector + b);
        let zeta = ZETA_MAX * (2.0 * u[1] - 1.0);
        let half = PI / self.sectors as f64;
        let phi = self.bisector(g);
        let spread = ((u[0] - 0.5) / (0.5 - EDGE_SHARE / 2.0)).clamp(-1.0, 1.0);
        let theta = phi + spread * half;
        let s = self.inset / half.sin();
        let (ox, oy) = (s * phi.cos(), s * phi.sin());
        let (dx, dy) = (theta.cos(), theta.sin());
        let [ax, ay, az] = self.radii;
        // t where the ray leaves the ellipse slice at zeta
        let qa = (dx / ax).powi(2) + (dy / ay).powi(2);
        let qb = 2.0 * (ox * dx / (ax * ax) + oy * dy / (ay * ay));
        let qc = (ox / ax).powi(2) + (oy / ay).powi(2) - (1.0 - zeta * zeta);
        let t_exit = (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa) + 1.0;
        let z = self.center[2] + zeta * az;
        let np = self.points_per_streamline;
        let mut pts: Vec<[f64; 3]> = (0..np)
            .map(|k| {
                let t = t_exit * k as f64 / (np - 1) as f64;
                [self.center[0] + ox + t * dx, self.center[1] + oy + t * dy, z]
            })
            .collect();
        pts.push(self.bundle_target(g, b));
        pts
    }
}

/// Share of rays pinned to the two wedge edges.
const EDGE_SHARE: f64 = 1.0 / 3.0;

/// Rays stay this far inside the ellipsoid's z extent.
const ZETA_MAX: f64 = 0.9;

/// Additive recurrence in two dimensions, started at the square center.
fn low_discrepancy(i: usize) -> [f64; 2] {
    const PLASTIC: f64 = 1.324_717_957_244_746;
    std::array::from_fn(|j| (0.5 + i as f64 / PLASTIC.powi(j as i32 + 1)).fract())
}

/// Ground truth of one synthetic subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    /// Sector label `1..=G` on the nucleus.
    pub labels: Labelmap,
    /// Bundle id per streamline: `g * B + b + 1`, or 0 for distractors.
    pub bundle_ids: Vec<u32>,
    pub fa: Volume3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub mask: Mask,
    pub streamlines: StreamlineSet,
    pub truth: PhantomTruth,
}

pub fn subject_id(index: usize) -> String {
    format!("sub{:02}", index + 1)
}

/// One subject; `index` selects the seed stream.
pub fn generate_subject(spec: &PhantomSpec, index: usize) -> Result<PhantomSubject> {
    spec.validate()?;
    let geometry = spec.geometry()?;
    let mask = spec.nucleus()?;
    let mut rng = util::rng(util::sub_seed(spec.seed, index as u64));
    let jitter = Normal::new(0.0, spec.sigma_jitter.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let clip = 2.0 * spec.sigma_jitter;

    let mut streamlines = Vec::new();
    let mut bundle_ids = Vec::new();
    for g in 0..spec.sectors {
        for b in 0..spec.bundles_per_sector {
            for n in 0..spec.streamlines_per_bundle {
                let path = spec.streamline_path(g, b, n);
                let mut off = [0.0; 3];
                if spec.sigma_jitter > 0.0 {
                    off = std::array::from_fn(|_| jitter.sample(&mut rng));
                    let norm = off.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > clip {
                        off.iter_mut().for_each(|v| *v *= clip / norm);
                    }
                }
                let pts = path
                    .iter()
                    .map(|&v| {
                        let w = geometry.voxel_to_world(v);
                        [w[0] + off[0], w[1] + off[1], w[2] + off[2]]
                    })
                    .collect();
                streamlines.push(Streamline::new(pts)?);
                bundle_ids.push((g * spec.bundles_per_sector + b + 1) as u32);
            }
        }
    }
    // distractors run parallel to x in the lowest slices, far below the nucleus
    for d in 0..spec.distractors {
        let y = (d as f64 + 0.5) * spec.dims[1] as f64 / spec.distractors as f64;
        let z = 1.0 + rng.random::<f64>();
        let pts = vec![
            geometry.voxel_to_world([0.0, y, z]),
            geometry.voxel_to_world([spec.dims[0] as f64 - 1.0, y, z]),
        ];
        streamlines.push(Streamline::new(pts)?);
        bundle_ids.push(0);
    }

    let mut labels = Labelmap::zeros(geometry.clone());
    for i in mask.foreground() {
        labels.data[i] = spec.sector_of(geometry.coords(i)) as u32 + 1;
    }
    let noise = Normal::new(0.0, spec.fa_noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let fa_data = (0..geometry.len())
        .map(|i| {
            let level = match labels.data[i] {
                0 => spec.fa_background,
                l => spec.fa_levels[l as usize - 1],
            };
            let n = if spec.fa_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (level + n).clamp(1e-3, 1.0 - 1e-3) as f32
        })
        .collect();
    let fa = Volume3D::new(geometry, fa_data)?;
    Ok(PhantomSubject {
        mask,
        streamlines: StreamlineSet::new(subject_id(index), streamlines),
        truth: PhantomTruth { labels, bundle_ids, fa },
    })
}

/// All `spec.subjects` subjects.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Vec<PhantomSubject>> {
    (0..spec.subjects).map(|s| generate_subject(spec, s)).collect()
}

/// File names inside each subject directory.
pub mod files {
    pub const MASK: &str = "mask.nii";
    pub const TRUTH: &str = "truth.nii";
    pub const FA: &str = "fa.nii";
    pub const TRACKS: &str = "tracks.tck";
    pub const BUNDLES: &str = "bundles.csv";
    pub const SPEC: &str = "phantom.toml";
}

/// Writes `<dir>/phantom.toml` and one directory per subject; returns the
/// subject directories.
pub fn save_phantom(spec: &PhantomSpec, subjects: &[PhantomSubject], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for s in subjects {
        let sd = dir.join(&s.streamlines.subject_id);
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        save_volume(&s.mask, sd.join(files::MASK))?;
        save_volume(&s.truth.labels, sd.join(files::TRUTH))?;
        save_volume(&s.truth.fa, sd.join(files::FA))?;
        save_tck(&s.streamlines, sd.join(files::TRACKS))?;
        let path = sd.join(files::BUNDLES);
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
        w.write_record(["streamline", "bundle"]).map_err(|e| Error::Format(e.to_string()))?;
        for (i, b) in s.truth.bundle_ids.iter().enumerate() {
            w.serialize((i, b)).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        out.push(sd);
    }
    let text = toml::to_string(spec).map_err(|e| Error::Format(e.to_string()))?;
    let p = dir.join(files::SPEC);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        let spec = PhantomSpec::default();
        let s = generate_subject(&spec, 0).unwrap();
        assert_eq!(s.streamlines.len(), 4 * 2 * 50 + 5);
        assert_eq!(s.truth.labels.histogram().iter().skip(1).sum::<usize>(), s.mask.count());
        assert_eq!(s.truth.labels.support(), s.mask);
        assert!(s.truth.fa.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn bad_specs() {
        let d = PhantomSpec::default();
        for spec in [
            PhantomSpec { radii: [0.0, 9.0, 3.0], ..d.clone() },
            PhantomSpec { sectors: 1, fa_levels: vec![0.5], ..d.clone() },
            PhantomSpec { fa_levels: vec![0.5; 3], ..d.clone() },
            PhantomSpec { bundles_per_sector: 0, ..d.clone() },
        ] {
            assert!(generate_subject(&spec, 0).is_err());
        }
    }

    #[test]
    fn seeds_change_only_the_noise() {
        let spec = PhantomSpec { sigma_jitter: 0.0, ..Default::default() };
        let a = generate_subject(&spec, 0).unwrap();
        let b = generate_subject(&spec, 1).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.truth.labels, b.truth.labels);
        assert_eq!(a.streamlines.streamlines[..400], b.streamlines.streamlines[..400]);
        assert_ne!(a.truth.fa, b.truth.fa);
        assert_eq!(generate_subject(&spec, 1).unwrap(), b);
    }
}
