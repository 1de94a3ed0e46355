//! Stage implementations. Each stage reads only files written by earlier
//! stages and finishes by writing its manifest.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use nucparc::deepclust::{
    assign, build_autoencoder, encode, init_centroids, joint_train, load_checkpoint, pretrain, save_checkpoint,
    Centroids, TrainingSet,
};
use nucparc::features::{build_features, load_features, save_features, FeatureMatrix};
use nucparc::parcel::{
    assemble_labelmap, atlas_dice, export_parcel_fa_stats, MetricReport, ParcellationResult, Provenance,
};
use nucparc::phantom::{evaluate_recovery, generate_phantom, save_phantom, Recovery};
use nucparc::tract::{
    assign_clusters, cluster_streamlines, filter_by_mask, load_cluster_model, load_tck, save_cluster_model,
    ClusterParams, StreamlineSet,
};
use nucparc::volio::{dilate_mask, load_labelmap, load_mask, load_volume, save_volume, Volume3D};
use serde::Serialize;

use crate::config::{RunConfig, SubjectPaths};
use crate::manifest::{sha256_file, RunManifest, Stage};

pub const CLUSTER_MODEL: &str = "model";
pub const CHECKPOINT: &str = "checkpoint";
pub const CENTROIDS: &str = "centroids.csv";
pub const METRICS: &str = "metrics.csv";
pub const RECOVERY: &str = "recovery.csv";
pub const GRID: &str = "grid.csv";

fn assignments_file(id: &str) -> String {
    format!("{id}.assignments.csv")
}

fn labels_file(id: &str) -> String {
    format!("{id}.labels.nii")
}

fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the phantom subjects described by `cfg.phantom`.
pub fn cmd_phantom(cfg: &RunConfig, force: bool) -> Result<RunManifest> {
    let cfg = cfg.resolved();
    let subjects = generate_phantom(&cfg.phantom)?;
    let mut stage = Stage::create(cfg.phantom_dir(), "phantom", force)?;
    for dir in save_phantom(&cfg.phantom, &subjects, &stage.dir)? {
        for entry in std::fs::read_dir(&dir)? {
            stage.output(entry?.path());
        }
    }
    stage.output(stage.path(nucparc::phantom::files::SPEC));
    info!("phantom: {} subjects in {}", subjects.len(), stage.dir.display());
    stage.finish(&cfg)
}

/// Selects streamlines near each nucleus, clusters the training pool and
/// writes per-subject assignments.
pub fn cmd_cluster(cfg: &RunConfig, force: bool) -> Result<RunManifest> {
    let cfg = cfg.resolved();
    let subjects = cfg.validated_subjects()?;
    let mut stage = Stage::create(cfg.stage_dir("cluster"), "cluster", force)?;
    let mut filtered = Vec::new();
    for s in &subjects {
        stage.input(&s.mask)?;
        stage.input(&s.tracks)?;
        let mask = load_mask(&s.mask)?;
        let inclusion = dilate_mask(&mask, cfg.tract.dilation_radius, cfg.tract.connectivity)?;
        let tracks = load_tck(&s.tracks)?;
        let f = filter_by_mask(&tracks, &inclusion);
        info!("{}: {} of {} streamlines reach the nucleus", s.id, f.kept.len(), tracks.len());
        if f.kept.is_empty() {
            warn!("{}: no streamlines reach the nucleus; excluded from pooling", s.id);
        }
        filtered.push(f);
    }
    let pool: Vec<StreamlineSet> = subjects
        .iter()
        .zip(&filtered)
        .filter(|(s, f)| cfg.is_training(&s.id) && !f.kept.is_empty())
        .map(|(_, f)| f.set.clone())
        .collect();
    let params =
        ClusterParams { k: cfg.tract.k, points: cfg.tract.points, seed: cfg.seed, max_pool: cfg.tract.max_pool };
    let model = cluster_streamlines(&pool, &params)?;
    let stem = stage.path(CLUSTER_MODEL);
    save_cluster_model(&model, &stem)?;
    stage.output(stem.with_extension("toml"));
    stage.output(stem.with_extension("tck"));
    for (s, f) in subjects.iter().zip(&filtered) {
        let ids = if f.kept.is_empty() { Vec::new() } else { assign_clusters(&f.set, &model)? };
        let path = stage.path(&assignments_file(&s.id));
        write_csv(&path, &["streamline", "cluster"], f.kept.iter().zip(&ids))?;
        stage.output(path);
    }
    stage.finish(&cfg)
}

fn read_assignments(path: &Path) -> Result<Vec<(usize, u32)>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<(usize, u32)>, _>>();
    rows.with_context(|| format!("parsing {}", path.display()))
}

/// Builds and persists the feature matrix of every subject with assignments.
pub fn cmd_features(cfg: &RunConfig, force: bool) -> Result<RunManifest> {
    let cfg = cfg.resolved();
    let subjects = cfg.validated_subjects()?;
    let cluster_dir = cfg.stage_dir("cluster");
    let model = load_cluster_model(cluster_dir.join(CLUSTER_MODEL))?;
    ensure!(model.k() == cfg.tract.k, "cluster model has K = {}, config asks for {}", model.k(), cfg.tract.k);
    let mut stage = Stage::create(cfg.stage_dir("features"), "features", force)?;
    stage.input(&cluster_dir.join(CLUSTER_MODEL).with_extension("toml"))?;
    for s in &subjects {
        let apath = cluster_dir.join(assignments_file(&s.id));
        stage.input(&apath)?;
        stage.input(&s.mask)?;
        stage.input(&s.tracks)?;
        let rows = read_assignments(&apath)?;
        if rows.is_empty() {
            warn!("{}: no cluster assignments; skipped", s.id);
            continue;
        }
        let tracks = load_tck(&s.tracks)?;
        let mut picked = Vec::with_capacity(rows.len());
        let mut ids = Vec::with_capacity(rows.len());
        for &(i, id) in &rows {
            let Some(sl) = tracks.streamlines.get(i) else {
                bail!("{}: assignment row {i} but the tractogram has {} streamlines", s.id, tracks.len());
            };
            picked.push(sl.clone());
            ids.push(id);
        }
        let set = StreamlineSet::new(s.id.clone(), picked);
        let mask = load_mask(&s.mask)?;
        let m = build_features(&set, &ids, &mask, cfg.tract.k, &cfg.features)?;
        let stem = stage.path(&s.id);
        let man = save_features(&m, &s.id, &mask.checksum(), &cfg.features, &stem)?;
        for name in [&man.payload, &man.voxels] {
            stage.output(stage.path(name));
        }
        stage.output(stage.path(&format!("{}.toml", s.id)));
        info!("{}: {} voxels x {} clusters", s.id, m.rows(), m.k());
    }
    stage.finish(&cfg)
}

fn feature_stem(cfg: &RunConfig, id: &str) -> PathBuf {
    cfg.stage_dir("features").join(id)
}

fn has_features(cfg: &RunConfig, id: &str) -> bool {
    cfg.stage_dir("features").join(format!("{id}.toml")).is_file()
}

fn as_f64(m: &FeatureMatrix) -> Vec<f64> {
    m.data().iter().map(|&v| f64::from(v)).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub manifest: RunManifest,
    /// Empty-cluster rescues during joint training.
    pub rescues: usize,
}

/// Trains the network and centroids, or fits plain k-means for that baseline.
pub fn cmd_train(cfg: &RunConfig, force: bool) -> Result<TrainOutcome> {
    let cfg = cfg.resolved();
    let subjects = cfg.validated_subjects()?;
    let mut stage = Stage::create(cfg.stage_dir("train"), "train", force)?;
    let mut mats = Vec::new();
    for s in subjects.iter().filter(|s| cfg.is_training(&s.id) && has_features(&cfg, &s.id)) {
        let stem = feature_stem(&cfg, &s.id);
        stage.input(&stem.with_extension("f32"))?;
        mats.push(load_features(&stem)?.0);
    }
    ensure!(!mats.is_empty(), "no training subject has features");
    let k = cfg.tract.k;
    if let Some(m) = mats.iter().find(|m| m.k() != k) {
        bail!("features have K = {}, config asks for {k}", m.k());
    }
    let c = cfg.network.c;
    let pooled: usize = mats.iter().map(|m| m.rows()).sum();
    ensure!(c < pooled, "c = {c} must be smaller than the {pooled} pooled voxels");

    if !cfg.baseline.uses_network() {
        let rows: Vec<f64> = mats.iter().flat_map(as_f64).collect();
        let centroids = init_centroids(&rows, k, c, cfg.seed, cfg.network.kmeans_restarts)?;
        let path = stage.path(CENTROIDS);
        let header: Vec<String> = (1..=k).map(|j| format!("f{j}")).collect();
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(&header)?;
        for i in 0..c {
            w.serialize(centroids.get(i))?;
        }
        w.flush()?;
        stage.output(path);
        return Ok(TrainOutcome { manifest: stage.finish(&cfg)?, rescues: 0 });
    }

    let data = TrainingSet::from_features(&mats)?;
    let net = &cfg.network;
    let mut model = build_autoencoder(net, cfg.seed)?;
    info!("pretraining on {} voxels, {} parameters", data.len(), model.num_parameters());
    let pre = pretrain(&mut model, &data, net)?;
    let latent = encode(&model, &data)?;
    let mut centroids = init_centroids(&latent, net.latent_dim, c, cfg.seed, net.kmeans_restarts)?;
    let joint = joint_train(&mut model, &mut centroids, &data, net)?;
    let rescues = joint.total_rescues();
    info!("joint training done, {rescues} rescues");
    let stem = stage.path(CHECKPOINT);
    save_checkpoint(&model, &centroids, net, &stem)?;
    stage.output(stage.path("checkpoint.toml"));
    stage.output(stage.path("checkpoint.bin"));
    for (name, report) in [("pretrain.csv", &pre), ("report.csv", &joint)] {
        let path = stage.path(name);
        report.write_csv(c, BufWriter::new(File::create(&path)?))?;
        stage.output(path);
    }
    Ok(TrainOutcome { manifest: stage.finish(&cfg)?, rescues })
}

enum Clusterer {
    Network(Box<nucparc::deepclust::Checkpoint>),
    Kmeans(Centroids),
}

fn read_centroids(path: &Path) -> Result<Centroids> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let dim = r.headers()?.len();
    let mut data = Vec::new();
    for rec in r.deserialize::<Vec<f64>>() {
        data.extend(rec?);
    }
    Ok(Centroids::new(dim, data)?)
}

#[derive(Debug, Clone)]
pub struct ParcellateOutcome {
    pub manifest: RunManifest,
    pub results: Vec<ParcellationResult>,
    pub report: MetricReport,
    /// Recovery against the truth labelmap for subjects that have one.
    pub recovery: Vec<(String, Recovery)>,
}

/// Labels every subject with features and computes the evaluation tables.
/// `checkpoint` overrides the stem under the train directory.
pub fn cmd_parcellate(cfg: &RunConfig, checkpoint: Option<&Path>, force: bool) -> Result<ParcellateOutcome> {
    let cfg = cfg.resolved();
    let subjects = cfg.validated_subjects()?;
    let train_dir = cfg.stage_dir("train");
    let mut stage = Stage::create(cfg.stage_dir("parcellate"), "parcellate", force)?;
    let (clusterer, checkpoint_id) = if cfg.baseline.uses_network() {
        let stem = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| train_dir.join(CHECKPOINT));
        let bin = stem.with_extension("bin");
        stage.input(&bin)?;
        (Clusterer::Network(Box::new(load_checkpoint(&stem)?)), sha256_file(&bin)?)
    } else {
        let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| train_dir.join(CENTROIDS));
        stage.input(&path)?;
        (Clusterer::Kmeans(read_centroids(&path)?), sha256_file(&path)?)
    };
    let (k, c) = match &clusterer {
        Clusterer::Network(ck) => (ck.config.k, ck.config.c),
        Clusterer::Kmeans(cs) => (cs.dim(), cs.len()),
    };

    let mut results = Vec::new();
    let mut used: Vec<&SubjectPaths> = Vec::new();
    for s in subjects.iter().filter(|s| has_features(&cfg, &s.id)) {
        let stem = feature_stem(&cfg, &s.id);
        stage.input(&stem.with_extension("f32"))?;
        stage.input(&s.mask)?;
        let (m, man) = load_features(&stem)?;
        ensure!(m.k() == k, "{}: features have K = {} but the model expects {k}", s.id, m.k());
        let labels = match &clusterer {
            Clusterer::Network(ck) => {
                let latent = encode(&ck.model, &TrainingSet::new(k, m.data().to_vec())?)?;
                assign(&latent, &ck.centroids)?
            }
            Clusterer::Kmeans(cs) => assign(&as_f64(&m), cs)?,
        };
        let mask = load_mask(&s.mask)?;
        let provenance = Provenance { checkpoint_id: checkpoint_id.clone(), feature_checksum: man.payload_sha256 };
        let p = assemble_labelmap(&labels, m.voxels(), &mask, c, &s.id, provenance)?;
        let path = stage.path(&labels_file(&s.id));
        save_volume(&p.labelmap, &path)?;
        stage.output(path);
        results.push(p);
        used.push(s);
    }
    ensure!(!results.is_empty(), "no subject has features");
    let refs: Vec<&ParcellationResult> = results.iter().collect();

    let fa: Option<Vec<Volume3D>> = if used.iter().all(|s| s.fa.is_some()) {
        Some(used.iter().map(|s| load_volume(s.fa.as_ref().unwrap())).collect::<nucparc::Result<_>>()?)
    } else {
        None
    };
    let fa_refs: Option<Vec<&Volume3D>> = fa.as_ref().map(|v| v.iter().collect());
    let report = MetricReport::compute(&refs, fa_refs.as_deref(), cfg.parcel.connectivity, cfg.parcel.rsd)?;
    let path = stage.path(METRICS);
    report.write_csv(BufWriter::new(File::create(&path)?))?;
    stage.output(path);
    if let Some(fa_refs) = &fa_refs {
        let path = stage.path("fa_stats.csv");
        export_parcel_fa_stats(&refs, fa_refs, BufWriter::new(File::create(&path)?))?;
        stage.output(path);
    }

    let mut atlas_rows = Vec::new();
    let mut recovery = Vec::new();
    for (s, p) in used.iter().zip(&results) {
        if let Some(a) = &s.atlas {
            let ad = atlas_dice(p, &load_labelmap(a)?)?;
            atlas_rows.extend(ad.per_region.iter().map(|&(region, d)| (s.id.clone(), region, d)));
        }
        if let Some(t) = &s.truth {
            let r = evaluate_recovery(&p.labelmap, &load_labelmap(t)?, c)?;
            info!("{}: ARI {:.4}, matched Dice {:.4}", s.id, r.ari, r.mean_dice);
            recovery.push((s.id.clone(), r));
        }
    }
    if !atlas_rows.is_empty() {
        let path = stage.path("atlas_dice.csv");
        write_csv(&path, &["subject", "region", "dice"], atlas_rows)?;
        stage.output(path);
    }
    if !recovery.is_empty() {
        let path = stage.path(RECOVERY);
        write_csv(&path, &["subject", "ari", "mean_dice"], recovery.iter().map(|(id, r)| (id, r.ari, r.mean_dice)))?;
        stage.output(path);
    }
    info!("mean SC {:.4}, mean Dice {:?}, mean RSD {:?}", report.mean_sc, report.mean_dice, report.mean_rsd);
    Ok(ParcellateOutcome { manifest: stage.finish(&cfg)?, results, report, recovery })
}

/// Cluster, features, train and parcellate in sequence.
pub fn run_pipeline(cfg: &RunConfig, force: bool) -> Result<ParcellateOutcome> {
    cmd_cluster(cfg, force)?;
    cmd_features(cfg, force)?;
    cmd_train(cfg, force)?;
    cmd_parcellate(cfg, None, force)
}

/// One cell of the sweep grid. Failed cells carry the error text.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub c: usize,
    #[serde(rename = "Dice")]
    pub dice: Option<f64>,
    #[serde(rename = "SC")]
    pub sc: Option<f64>,
    #[serde(rename = "RSD")]
    pub rsd: Option<f64>,
    pub error: String,
}

/// Runs the full pipeline for every `(k, c)` pair in its own directory.
pub fn cmd_sweep(cfg: &RunConfig, force: bool) -> Result<Vec<SweepRow>> {
    let cfg = cfg.resolved();
    cfg.validate_sweep()?;
    let subjects = cfg.validated_subjects()?;
    let mut stage = Stage::create(cfg.stage_dir("sweep"), "sweep", force)?;
    let mut rows = Vec::new();
    for &k in &cfg.sweep.k {
        for &c in &cfg.sweep.c {
            let mut cell = cfg.clone();
            cell.paths.subjects = subjects.clone();
            cell.paths.out = stage.path(&format!("k{k}_c{c}"));
            cell.tract.k = k;
            cell.network.c = c;
            let row = match run_pipeline(&cell, true) {
                Ok(o) => SweepRow {
                    k,
                    c,
                    dice: o.report.mean_dice,
                    sc: Some(o.report.mean_sc),
                    rsd: o.report.mean_rsd,
                    error: String::new(),
                },
                Err(e) => {
                    warn!("sweep cell k={k} c={c} failed: {e:#}");
                    SweepRow { k, c, dice: None, sc: None, rsd: None, error: format!("{e:#}") }
                }
            };
            rows.push(row);
        }
    }
    let path = stage.path(GRID);
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    stage.output(path);
    stage.finish(&cfg)?;
    Ok(rows)
}
