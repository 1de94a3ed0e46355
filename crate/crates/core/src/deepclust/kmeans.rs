//! Plain Lloyd k-means with k-means++ seeding and restarts.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::util;

const MAX_ITER: usize = 300;

/// Centroid matrix plus per-centroid update counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    dim: usize,
    data: Vec<f64>,
    counts: Vec<u64>,
}

impl Centroids {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} centroid values for dimension {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite centroid".into()));
        }
        let c = data.len() / dim;
        Ok(Self { dim, data, counts: vec![1; c] })
    }

    pub(crate) fn with_counts(dim: usize, data: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        let mut s = Self::new(dim, data)?;
        if counts.len() != s.len() {
            return Err(Error::Shape(format!("{} counts for {} centroids", counts.len(), s.len())));
        }
        s.counts = counts;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub(crate) fn get_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub(crate) fn counts_mut(&mut self) -> &mut [u64] {
        &mut self.counts
    }

    /// Index of the nearest centroid; ties go to the lower index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        util::argmin((0..self.len()).map(|k| util::squared_distance(x, self.get(k))))
            .map(|(i, _)| i)
            .expect("at least one centroid")
    }
}

fn distinct_rows(points: &[f64], dim: usize) -> usize {
    let set: HashSet<Vec<u64>> = points.chunks_exact(dim).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    set.len()
}

fn plus_plus(points: &[f64], dim: usize, c: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centers = Vec::with_capacity(c * dim);
    centers.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| util::squared_distance(row(i), &centers[..dim])).collect();
    while centers.len() < c * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if r < d {
                        break;
                    }
                    r -= d;
                }
            }
            pick.expect("positive mass")
        } else {
            unreachable!("distinct point count checked")
        };
        let start = centers.len();
        centers.extend_from_slice(row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(util::squared_distance(row(i), &centers[start..]));
        }
    }
    centers
}

/// Lloyd iterations from `centers`; returns the final within-cluster sum of squares.
fn lloyd(points: &[f64], dim: usize, centers: &mut [f64]) -> f64 {
    let n = points.len() / dim;
    let c = centers.len() / dim;
    let mut labels = vec![usize::MAX; n];
    let mut sums = vec![0.0; c * dim];
    let mut sizes = vec![0usize; c];
    for _ in 0..MAX_ITER {
        let mut changed = false;
        for (i, x) in points.chunks_exact(dim).enumerate() {
            let (best, _) = util::argmin(centers.chunks_exact(dim).map(|m| util::squared_distance(x, m))).unwrap();
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        sums.fill(0.0);
        sizes.fill(0);
        for (x, &l) in points.chunks_exact(dim).zip(&labels) {
            sizes[l] += 1;
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(x) {
                *s += v;
            }
        }
        for k in 0..c {
            if sizes[k] > 0 {
                for d in 0..dim {
                    centers[k * dim + d] = sums[k * dim + d] / sizes[k] as f64;
                }
            } else {
                // re-seed an empty cluster at the point worst served by its centroid
                let far = util::argmin(points.chunks_exact(dim).zip(&labels).map(|(x, &l)| {
                    -util::squared_distance(x, &centers[l * dim..(l + 1) * dim])
                }))
                .unwrap()
                .0;
                let p = points[far * dim..(far + 1) * dim].to_vec();
                centers[k * dim..(k + 1) * dim].copy_from_slice(&p);
                labels[far] = k;
            }
        }
    }
    points
        .chunks_exact(dim)
        .map(|x| centers.chunks_exact(dim).map(|m| util::squared_distance(x, m)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// k-means over row-major `points`; keeps the restart with the lowest
/// within-cluster sum of squares.
pub fn init_centroids(points: &[f64], dim: usize, c: usize, seed: u64, restarts: usize) -> Result<Centroids> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!("{} values do not form rows of {dim}", points.len())));
    }
    if c == 0 || restarts == 0 {
        return Err(Error::Parameter("c and restarts must be positive".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite point passed to k-means".into()));
    }
    let distinct = distinct_rows(points, dim);
    if distinct < c {
        return Err(Error::Degenerate(format!("{distinct} distinct points for {c} centroids")));
    }
    let mut rng = util::rng(seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..restarts {
        let mut centers = plus_plus(points, dim, c, &mut rng);
        let sse = lloyd(points, dim, &mut centers);
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, centers));
        }
    }
    Centroids::new(dim, best.unwrap().1)
}
