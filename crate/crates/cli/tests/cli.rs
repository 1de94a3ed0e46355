use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nucparc::features::load_features;
use nucparc_cli::manifest::RunManifest;

const TINY: &str = r#"
seed = 3
deterministic = true

[tract]
k = 8

[network]
c = 4
num_levels = 1
channels = [4]
latent_dim = 4
batch_size = 64
pretrain_epochs = 2
joint_epochs = 1
kmeans_restarts = 2

[sweep]
k = [4, 8]
c = [2, 4]
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("{TINY}\n[paths]\nout = {:?}\n", dir.path().join("run").display().to_string())).unwrap();
    (dir, cfg)
}

fn nucparc(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nucparc")).arg("--config").arg(cfg).args(args).output().unwrap()
}

fn ok(cfg: &Path, args: &[&str]) {
    let out = nucparc(cfg, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn manifest(dir: &Path) -> RunManifest {
    toml::from_str(&fs::read_to_string(dir.join("manifest.toml")).unwrap()).unwrap()
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn phantom_writes_subjects_and_refuses_to_overwrite() {
    let (dir, cfg) = setup();
    ok(&cfg, &["phantom"]);
    let ph = dir.path().join("run/phantom");
    for id in ["sub01", "sub02", "sub03", "sub04"] {
        for f in ["mask.nii", "truth.nii", "fa.nii", "tracks.tck", "bundles.csv"] {
            assert!(ph.join(id).join(f).is_file(), "{id}/{f}");
        }
    }
    let before = fs::read(ph.join("manifest.toml")).unwrap();
    let refused = nucparc(&cfg, &["phantom"]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    assert_eq!(fs::read(ph.join("manifest.toml")).unwrap(), before);
    ok(&cfg, &["phantom", "--force"]);
    assert_eq!(fs::read(ph.join("manifest.toml")).unwrap(), before);
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let (dir, cfg) = setup();
    ok(&cfg, &["phantom"]);
    ok(&cfg, &["run"]);
    let run = dir.path().join("run");
    let first = snapshot(&run);
    let m = manifest(&run.join("parcellate"));
    assert_eq!(m.created_unix, None);
    assert!(m.outputs.contains_key("sub01.labels.nii"));
    assert!(m.outputs.contains_key("recovery.csv"));
    ok(&cfg, &["run", "--force"]);
    assert_eq!(snapshot(&run), first);

    // a different seed changes the trained network
    ok(&cfg, &["train", "--force", "--seed", "4"]);
    assert_ne!(fs::read(run.join("train/checkpoint.bin")).unwrap(), first[Path::new("train/checkpoint.bin")]);
}

#[test]
fn timestamps_only_outside_deterministic_mode() {
    let (dir, cfg) = setup();
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap().replace("deterministic = true", "deterministic = false")).unwrap();
    ok(&cfg, &["phantom"]);
    assert!(manifest(&dir.path().join("run/phantom")).created_unix.is_some());
}

#[test]
fn feat_orig_features_are_binary_and_kmeans_skips_the_network() {
    let (dir, cfg) = setup();
    ok(&cfg, &["phantom"]);
    ok(&cfg, &["cluster", "--baseline", "feat-orig"]);
    ok(&cfg, &["features", "--baseline", "feat-orig"]);
    let (f, _) = load_features(dir.path().join("run/features/sub01")).unwrap();
    assert!(f.data().iter().all(|&v| v == 0.0 || v == 1.0));

    ok(&cfg, &["train", "--baseline", "kmeans"]);
    let train = dir.path().join("run/train");
    assert!(train.join("centroids.csv").is_file());
    assert!(!train.join("checkpoint.bin").exists());
    ok(&cfg, &["parcellate", "--baseline", "kmeans"]);
    assert!(dir.path().join("run/parcellate/sub04.labels.nii").is_file());
}

#[test]
fn sweep_fills_the_grid() {
    let (dir, cfg) = setup();
    ok(&cfg, &["phantom"]);
    ok(&cfg, &["sweep"]);
    let mut r = csv::Reader::from_path(dir.path().join("run/sweep/grid.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["k", "c", "Dice", "SC", "RSD", "error"]);
    let cells: Vec<(usize, usize, String)> = r
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].parse().unwrap(), rec[1].parse().unwrap(), rec[5].to_string())
        })
        .collect();
    let pairs: Vec<(usize, usize)> = cells.iter().map(|&(k, c, _)| (k, c)).collect();
    assert_eq!(pairs, vec![(4, 2), (4, 4), (8, 2), (8, 4)]);
    assert!(cells.iter().all(|(_, _, e)| e.is_empty()), "{cells:?}");
}

#[test]
fn missing_inputs_are_reported() {
    let (_dir, cfg) = setup();
    let out = nucparc(&cfg, &["cluster"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("phantom"));
}
