//! Pretraining, joint training with centroid updates, inference.

use std::io::Write;

use rand::seq::SliceRandom;

use super::config::NetworkConfig;
use super::kmeans::Centroids;
use super::layers::Tensor;
use super::network::{circulant_batch, Autoencoder};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::util;

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const INFER_BATCH: usize = 256;

/// Feature rows pooled for training or inference; each row becomes one
/// circulant `K x K` image on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    k: usize,
    rows: Vec<f32>,
}

impl TrainingSet {
    pub fn new(k: usize, rows: Vec<f32>) -> Result<Self> {
        if k == 0 || !rows.len().is_multiple_of(k) {
            return Err(Error::Shape(format!("{} values do not form rows of {k}", rows.len())));
        }
        Ok(Self { k, rows })
    }

    pub fn from_features<'a>(parts: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<Self> {
        let mut k = None;
        let mut rows = Vec::new();
        for m in parts {
            if *k.get_or_insert(m.k()) != m.k() {
                return Err(Error::Shape("feature matrices disagree on K".into()));
            }
            rows.extend_from_slice(m.data());
        }
        let k = k.ok_or_else(|| Error::Parameter("no feature matrices given".into()))?;
        Self::new(k, rows)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.k..(i + 1) * self.k]
    }

    fn batch(&self, idx: &[usize]) -> Tensor {
        circulant_batch(idx.iter().map(|&i| self.row(i)), self.k)
    }
}

/// One epoch of training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon_loss: f64,
    pub centroid_loss: f64,
    pub total_loss: f64,
    /// Samples assigned to each centroid over the epoch (empty when pretraining).
    pub occupancy: Vec<usize>,
    pub rescues: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn total_rescues(&self) -> usize {
        self.epochs.iter().map(|e| e.rescues).sum()
    }

    /// CSV with `epoch,recon_loss,centroid_loss,total_loss,occupancy_1..c,rescues`.
    pub fn write_csv(&self, c: usize, out: impl Write) -> Result<()> {
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["epoch".to_string(), "recon_loss".into(), "centroid_loss".into(), "total_loss".into()];
        header.extend((1..=c).map(|k| format!("occupancy_{k}")));
        header.push("rescues".into());
        w.write_record(&header).map_err(fmt)?;
        for e in &self.epochs {
            let mut rec = vec![e.epoch.to_string(), e.recon_loss.to_string(), e.centroid_loss.to_string(), e.total_loss.to_string()];
            rec.extend((0..c).map(|k| e.occupancy.get(k).copied().unwrap_or(0).to_string()));
            rec.push(e.rescues.to_string());
            w.write_record(&rec).map_err(fmt)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

/// Loss terms for one batch; `total = lambda * recon + beta * centroid`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub recon: f64,
    pub centroid: f64,
    pub total: f64,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &Autoencoder) -> Self {
        let m: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { v: m.clone(), m, t: 0 }
    }

    fn step(&mut self, model: &mut Autoencoder, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_B1.powi(self.t);
        let c2 = 1.0 - ADAM_B2.powi(self.t);
        for ((p, m), v) in model.params_mut().into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * g;
                v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * g * g;
                p.value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Shuffled batches; a trailing partial batch is merged into the one before it.
fn epoch_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut util::rng(seed));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().unwrap().len() < batch_size {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Mean over samples of the per-image mean squared error, and its gradient.
fn recon_loss(recon: &Tensor, x: &Tensor, weight: f64) -> (f64, Tensor) {
    let n = x.n as f64;
    let per = x.per_sample() as f64;
    let mut grad = Tensor { data: vec![0.0; x.data.len()], ..*x };
    let mut sum = 0.0;
    for ((g, r), t) in grad.data.iter_mut().zip(&recon.data).zip(&x.data) {
        let d = r - t;
        sum += d * d;
        *g = weight * 2.0 * d / (per * n);
    }
    (sum / (per * n), grad)
}

/// Mean squared latent distance to the assigned centroid, and its gradient.
fn centroid_loss(latent: &[f64], centroids: &Centroids, assignment: &[usize], weight: f64) -> (f64, Vec<f64>) {
    let dim = centroids.dim();
    let n = assignment.len() as f64;
    let mut grad = vec![0.0; latent.len()];
    let mut sum = 0.0;
    for (i, &k) in assignment.iter().enumerate() {
        let m = centroids.get(k);
        for d in 0..dim {
            let diff = latent[i * dim + d] - m[d];
            sum += diff * diff;
            grad[i * dim + d] = weight * 2.0 * diff / n;
        }
    }
    (sum / n, grad)
}

fn check_finite(loss: f64, stage: &str, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{stage}: loss became {loss} at epoch {epoch}, batch {batch}")))
    }
}

fn check_data(model: &Autoencoder, data: &TrainingSet) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    if data.k() != model.k() {
        return Err(Error::Shape(format!("features have K = {}, network expects {}", data.k(), model.k())));
    }
    Ok(())
}

/// Reconstruction-only training.
pub fn pretrain(model: &mut Autoencoder, data: &TrainingSet, cfg: &NetworkConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(model, data)?;
    let mut adam = Adam::new(model);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.pretrain_epochs {
        let mut recon_sum = 0.0;
        for (b, idx) in epoch_batches(data.len(), cfg.batch_size, util::sub_seed(cfg.seed, epoch as u64)).iter().enumerate() {
            let x = data.batch(idx);
            let (fwd, tape) = model.forward_train(&x);
            let (loss, d_recon) = recon_loss(&fwd.recon, &x, 1.0);
            check_finite(loss, "pretraining", epoch, b)?;
            recon_sum += loss * idx.len() as f64;
            model.zero_grad();
            model.backward(&tape, &d_recon, &vec![0.0; fwd.latent.len()]);
            model.update_running_stats(&tape);
            adam.step(model, cfg.pretrain_lr);
        }
        let recon = recon_sum / data.len() as f64;
        log::debug!("pretrain epoch {epoch}: mse {recon:.6e}");
        report.epochs.push(EpochRecord { epoch, recon_loss: recon, centroid_loss: 0.0, total_loss: recon, occupancy: Vec::new(), rescues: 0 });
    }
    Ok(report)
}

/// Replaces every centroid whose batch occupancy is strictly below
/// `empty_fraction * batch_len` with the mean of the remaining centroids,
/// taken before any replacement; its update count restarts at 1.
pub fn rescue_empty_clusters(
    centroids: &mut Centroids,
    occupancy: &[usize],
    batch_len: usize,
    empty_fraction: f64,
) -> Vec<usize> {
    let threshold = empty_fraction * batch_len as f64;
    let c = centroids.len();
    let rescued: Vec<usize> = (0..c).filter(|&k| (occupancy[k] as f64) < threshold).collect();
    if rescued.is_empty() || c < 2 {
        return Vec::new();
    }
    let snapshot = centroids.clone();
    let dim = centroids.dim();
    for &k in &rescued {
        let mut mean = vec![0.0; dim];
        for j in (0..c).filter(|&j| j != k) {
            for (a, b) in mean.iter_mut().zip(snapshot.get(j)) {
                *a += b;
            }
        }
        mean.iter_mut().for_each(|a| *a /= (c - 1) as f64);
        centroids.get_mut(k).copy_from_slice(&mean);
        centroids.counts_mut()[k] = 1;
    }
    rescued
}

/// Moves each centroid toward the mean latent of its batch members with step
/// `n_k / count_k`, after adding `n_k` to the running count.
fn update_centroids(centroids: &mut Centroids, latent: &[f64], assignment: &[usize]) {
    let dim = centroids.dim();
    let c = centroids.len();
    let mut sums = vec![0.0; c * dim];
    let mut n = vec![0usize; c];
    for (i, &k) in assignment.iter().enumerate() {
        n[k] += 1;
        for d in 0..dim {
            sums[k * dim + d] += latent[i * dim + d];
        }
    }
    for k in 0..c {
        if n[k] == 0 {
            continue;
        }
        centroids.counts_mut()[k] += n[k] as u64;
        let eta = n[k] as f64 / centroids.counts()[k] as f64;
        let nk = n[k] as f64;
        for (d, m) in centroids.get_mut(k).iter_mut().enumerate() {
            *m += eta * (sums[k * dim + d] / nk - *m);
        }
    }
}

fn nearest_all(latent: &[f64], centroids: &Centroids) -> Vec<usize> {
    latent.chunks_exact(centroids.dim()).map(|z| centroids.nearest(z)).collect()
}

/// Joint reconstruction and clustering training.
pub fn joint_train(
    model: &mut Autoencoder,
    centroids: &mut Centroids,
    data: &TrainingSet,
    cfg: &NetworkConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(model, data)?;
    if centroids.len() != cfg.c || centroids.dim() != model.latent_dim() {
        return Err(Error::Shape(format!(
            "{} centroids of dimension {}, expected {} of dimension {}",
            centroids.len(),
            centroids.dim(),
            cfg.c,
            model.latent_dim()
        )));
    }
    if cfg.c > cfg.batch_size {
        return Err(Error::Config("c exceeds the batch size".into()));
    }
    let mut adam = Adam::new(model);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.joint_epochs {
        let (mut recon_sum, mut cent_sum) = (0.0, 0.0);
        let mut occupancy = vec![0usize; cfg.c];
        let mut rescues = 0;
        let seed = util::sub_seed(cfg.seed, (1 << 32) + epoch as u64);
        for (b, idx) in epoch_batches(data.len(), cfg.batch_size, seed).iter().enumerate() {
            let x = data.batch(idx);
            let (fwd, tape) = model.forward_train(&x);
            let assignment = nearest_all(&fwd.latent, centroids);
            let (recon, d_recon) = recon_loss(&fwd.recon, &x, cfg.lambda);
            let (cent, d_latent) = centroid_loss(&fwd.latent, centroids, &assignment, cfg.beta);
            check_finite(cfg.lambda * recon + cfg.beta * cent, "joint training", epoch, b)?;
            recon_sum += recon * idx.len() as f64;
            cent_sum += cent * idx.len() as f64;

            model.zero_grad();
            model.backward(&tape, &d_recon, &d_latent);
            model.update_running_stats(&tape);
            adam.step(model, cfg.joint_lr);

            update_centroids(centroids, &fwd.latent, &assignment);
            let mut batch_occ = vec![0usize; cfg.c];
            for &k in &assignment {
                batch_occ[k] += 1;
            }
            for (o, b) in occupancy.iter_mut().zip(&batch_occ) {
                *o += b;
            }
            if cfg.adaptive_rescue {
                let r = rescue_empty_clusters(centroids, &batch_occ, idx.len(), cfg.empty_fraction);
                if !r.is_empty() {
                    log::debug!("epoch {epoch} batch {b}: rescued centroids {r:?}");
                }
                rescues += r.len();
            }
        }
        let recon = recon_sum / data.len() as f64;
        let cent = cent_sum / data.len() as f64;
        let total = cfg.lambda * recon + cfg.beta * cent;
        log::debug!("joint epoch {epoch}: recon {recon:.6e} centroid {cent:.6e} rescues {rescues}");
        report.epochs.push(EpochRecord { epoch, recon_loss: recon, centroid_loss: cent, total_loss: total, occupancy, rescues });
    }
    Ok(report)
}

/// Inference-mode latent vectors, row-major `n x L`.
pub fn encode(model: &Autoencoder, data: &TrainingSet) -> Result<Vec<f64>> {
    if data.k() != model.k() {
        return Err(Error::Shape(format!("features have K = {}, network expects {}", data.k(), model.k())));
    }
    let mut out = Vec::with_capacity(data.len() * model.latent_dim());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(INFER_BATCH) {
        out.extend(model.encode_tensor(&data.batch(chunk)));
    }
    Ok(out)
}

/// Nearest-centroid labels in `1..=c`; ties go to the lowest label.
pub fn assign(latent: &[f64], centroids: &Centroids) -> Result<Vec<u32>> {
    if !latent.len().is_multiple_of(centroids.dim()) {
        return Err(Error::Shape(format!("{} latent values for dimension {}", latent.len(), centroids.dim())));
    }
    Ok(nearest_all(latent, centroids).into_iter().map(|k| k as u32 + 1).collect())
}

fn joint_pass(
    model: &mut Autoencoder,
    data: &TrainingSet,
    centroids: &Centroids,
    assignment: &[usize],
    lambda: f64,
    beta: f64,
    backward: bool,
) -> Result<BatchLoss> {
    check_data(model, data)?;
    if assignment.len() != data.len() || assignment.iter().any(|&k| k >= centroids.len()) {
        return Err(Error::Shape("assignment does not match the samples and centroids".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let x = data.batch(&idx);
    let (fwd, tape) = model.forward_train(&x);
    let (recon, d_recon) = recon_loss(&fwd.recon, &x, lambda);
    let (cent, d_latent) = centroid_loss(&fwd.latent, centroids, assignment, beta);
    if backward {
        model.zero_grad();
        model.backward(&tape, &d_recon, &d_latent);
    }
    Ok(BatchLoss { recon, centroid: cent, total: lambda * recon + beta * cent })
}

/// Training-mode joint loss of one batch under a fixed assignment (0-based).
pub fn joint_loss(
    model: &Autoencoder,
    data: &TrainingSet,
    centroids: &Centroids,
    assignment: &[usize],
    lambda: f64,
    beta: f64,
) -> Result<BatchLoss> {
    joint_pass(&mut model.clone(), data, centroids, assignment, lambda, beta, false)
}

/// Analytic gradient of `joint_loss` in `Autoencoder::flat_parameters` order.
pub fn joint_loss_gradient(
    model: &Autoencoder,
    data: &TrainingSet,
    centroids: &Centroids,
    assignment: &[usize],
    lambda: f64,
    beta: f64,
) -> Result<(BatchLoss, Vec<f64>)> {
    let mut m = model.clone();
    let loss = joint_pass(&mut m, data, centroids, assignment, lambda, beta, true)?;
    let grad = m.params().iter().flat_map(|p| p.grad.iter().copied()).collect();
    Ok((loss, grad))
}

/// Inference-mode reconstruction of every sample, row-major `n x K x K`.
pub fn reconstruct(model: &Autoencoder, data: &TrainingSet) -> Result<Vec<f64>> {
    check_data(model, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len() * data.k() * data.k());
    for chunk in idx.chunks(INFER_BATCH) {
        out.extend(model.reconstruct(&data.batch(chunk)).recon.data);
    }
    Ok(out)
}
