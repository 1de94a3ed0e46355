//! Groupwise k-medoids clustering of streamlines pooled across subjects.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean_closest_point, resample_streamline, tck, Streamline, StreamlineSet};
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Number of clusters (K).
    pub k: usize,
    /// Points per resampled streamline (P).
    pub points: usize,
    pub seed: u64,
    /// Upper bound on pooled streamlines across all subjects.
    pub max_pool: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { k: 100, points: 15, seed: 0, max_pool: 20_000 }
    }
}

/// K medoid streamlines, each resampled to the same point count.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    medoids: Vec<Streamline>,
    points: usize,
    seed: u64,
}

impl ClusterModel {
    pub fn new(medoids: Vec<Streamline>, points: usize, seed: u64) -> Result<Self> {
        if medoids.is_empty() {
            return Err(Error::Parameter("cluster model needs at least one medoid".into()));
        }
        if let Some(m) = medoids.iter().find(|m| m.len() != points) {
            return Err(Error::Shape(format!("medoid has {} points, expected {points}", m.len())));
        }
        Ok(Self { medoids, points, seed })
    }

    pub fn k(&self) -> usize {
        self.medoids.len()
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn medoids(&self) -> &[Streamline] {
        &self.medoids
    }
}

/// Condensed symmetric distance matrix (upper triangle, no diagonal).
struct DistanceMatrix {
    n: usize,
    values: Vec<f32>,
}

impl DistanceMatrix {
    fn build(lines: &[Streamline]) -> Self {
        let n = lines.len();
        let rows: Vec<Vec<f32>> = (0..n)
            .into_par_iter()
            .map(|i| {
                ((i + 1)..n)
                    .map(|j| mean_closest_point(lines[i].points(), lines[j].points()) as f32)
                    .collect()
            })
            .collect();
        Self { n, values: rows.concat() }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        // rows 0..a hold n-1, n-2, ... entries
        let row_start = a * (2 * self.n - a - 1) / 2;
        self.values[row_start + (b - a - 1)] as f64
    }
}

/// Splits `budget` across subjects as evenly as their sizes allow.
fn pool_quotas(sizes: &[usize], budget: usize) -> Vec<usize> {
    let mut quotas = vec![0usize; sizes.len()];
    let mut remaining = budget.min(sizes.iter().sum());
    while remaining > 0 {
        let open: Vec<usize> = (0..sizes.len()).filter(|&s| quotas[s] < sizes[s]).collect();
        let share = (remaining / open.len()).max(1);
        for s in open {
            if remaining == 0 {
                break;
            }
            let add = share.min(sizes[s] - quotas[s]).min(remaining);
            quotas[s] += add;
            remaining -= add;
        }
    }
    quotas
}

/// Pools streamlines across subjects, resamples them and runs k-medoids.
///
/// Initialization is seeded farthest-first traversal; refinement uses eager
/// best-swap passes (FasterPAM-style) until no swap lowers the total
/// distance to the nearest medoid.
pub fn cluster_streamlines(sets: &[StreamlineSet], params: &ClusterParams) -> Result<ClusterModel> {
    let k = params.k;
    if k == 0 {
        return Err(Error::Parameter("K must be positive".into()));
    }
    if params.points < 2 {
        return Err(Error::Parameter("points per streamline must be >= 2".into()));
    }
    let total: usize = sets.iter().map(|s| s.len()).sum();
    if total < k {
        return Err(Error::Parameter(format!("{total} streamlines available, fewer than K = {k}")));
    }
    if params.max_pool < k {
        return Err(Error::Parameter(format!("max_pool {} is smaller than K = {k}", params.max_pool)));
    }

    let mut rng = util::rng(params.seed);
    let sizes: Vec<usize> = sets.iter().map(|s| s.len()).collect();
    let quotas = pool_quotas(&sizes, params.max_pool);
    let mut pooled = Vec::with_capacity(quotas.iter().sum());
    for (set, &q) in sets.iter().zip(&quotas) {
        let mut picks = sample(&mut rng, set.len(), q).into_vec();
        picks.sort_unstable();
        for i in picks {
            pooled.push(resample_streamline(&set.streamlines[i], params.points)?);
        }
    }

    let dm = DistanceMatrix::build(&pooled);
    let medoids = kmedoids(&dm, k, &mut rng)?;
    let medoids = medoids.into_iter().map(|m| pooled[m].clone()).collect();
    ClusterModel::new(medoids, params.points, params.seed)
}

fn kmedoids(dm: &DistanceMatrix, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = dm.n;
    if k == 1 {
        let best = util::argmin((0..n).map(|i| (0..n).map(|j| dm.get(i, j)).sum::<f64>()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        return Ok(vec![best]);
    }

    // farthest-first from a random start
    let mut medoids = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|o| dm.get(o, medoids[0])).collect();
    while medoids.len() < k {
        let mut best = (0usize, -1.0f64);
        for (o, &d) in nearest.iter().enumerate() {
            if d > best.1 {
                best = (o, d);
            }
        }
        if best.1 <= 0.0 {
            return Err(Error::Parameter(format!(
                "only {} distinct streamlines in the pool, fewer than K = {k}",
                medoids.len()
            )));
        }
        medoids.push(best.0);
        for (o, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dm.get(o, best.0));
        }
    }

    let mut state = SwapState::new(dm, &medoids);
    let scale = state.loss.abs().max(1e-12);
    for _pass in 0..100 {
        let mut swapped = false;
        for x in 0..n {
            if medoids.contains(&x) {
                continue;
            }
            let (delta, slot) = state.best_swap(dm, x);
            if delta < -1e-9 * scale {
                medoids[slot] = x;
                state = SwapState::new(dm, &medoids);
                swapped = true;
            }
        }
        if !swapped {
            break;
        }
    }
    medoids.sort_unstable();
    Ok(medoids)
}

struct SwapState {
    near: Vec<(usize, f64)>,
    second: Vec<f64>,
    removal_loss: Vec<f64>,
    loss: f64,
}

impl SwapState {
    fn new(dm: &DistanceMatrix, medoids: &[usize]) -> Self {
        let n = dm.n;
        let mut near = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        let mut removal_loss = vec![0.0; medoids.len()];
        let mut loss = 0.0;
        for o in 0..n {
            let mut best = (0usize, f64::INFINITY);
            let mut sec = f64::INFINITY;
            for (slot, &m) in medoids.iter().enumerate() {
                let d = dm.get(o, m);
                if d < best.1 {
                    sec = best.1;
                    best = (slot, d);
                } else if d < sec {
                    sec = d;
                }
            }
            loss += best.1;
            removal_loss[best.0] += sec - best.1;
            near.push(best);
            second.push(sec);
        }
        Self { near, second, removal_loss, loss }
    }

    /// Change in loss from swapping `x` in for the best medoid slot.
    fn best_swap(&self, dm: &DistanceMatrix, x: usize) -> (f64, usize) {
        let mut delta = self.removal_loss.clone();
        let mut acc = 0.0;
        for o in 0..dm.n {
            let d = dm.get(o, x);
            let (slot, dn) = self.near[o];
            let ds = self.second[o];
            if d < dn {
                acc += d - dn;
                delta[slot] += dn - ds;
            } else if d < ds {
                delta[slot] += d - ds;
            }
        }
        let (slot, best) = util::argmin(delta.iter().copied()).expect("k >= 1");
        (best + acc, slot)
    }
}

/// Nearest-medoid cluster id in `1..=K` for every streamline; ties go to the
/// lowest id.
pub fn assign_clusters(set: &StreamlineSet, model: &ClusterModel) -> Result<Vec<u32>> {
    set.streamlines
        .par_iter()
        .map(|s| {
            let r = resample_streamline(s, model.points)?;
            let (id, _) = util::argmin(
                model.medoids.iter().map(|m| mean_closest_point(r.points(), m.points())),
            )
            .expect("model has medoids");
            Ok(id as u32 + 1)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format: u32,
    k: usize,
    points: usize,
    seed: u64,
    medoids: String,
}

/// Writes `<stem>.tck` (medoids) and `<stem>.toml` (K, P, seed).
pub fn save_cluster_model(model: &ClusterModel, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    let tck_path = stem.with_extension("tck");
    let set = StreamlineSet::new("medoids", model.medoids.clone());
    tck::save_tck(&set, &tck_path)?;
    let manifest = ModelManifest {
        format: 1,
        k: model.k(),
        points: model.points,
        seed: model.seed,
        medoids: tck_path.file_name().unwrap().to_string_lossy().into_owned(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let manifest_path = stem.with_extension("toml");
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_cluster_model(stem: impl AsRef<Path>) -> Result<ClusterModel> {
    let stem = stem.as_ref();
    let manifest_path = stem.with_extension("toml");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ModelManifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != 1 {
        return Err(Error::Format(format!("unsupported cluster model format {}", manifest.format)));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let set = tck::load_tck(dir.join(&manifest.medoids))?;
    if set.len() != manifest.k {
        return Err(Error::Shape(format!("manifest K = {} but {} medoids stored", manifest.k, set.len())));
    }
    ClusterModel::new(set.streamlines, manifest.points, manifest.seed)
}
