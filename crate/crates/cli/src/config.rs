use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nucparc::deepclust::NetworkConfig;
use nucparc::features::FeatureParams;
use nucparc::parcel::RsdMode;
use nucparc::phantom::{self, PhantomSpec};
use nucparc::volio::Connectivity;
use serde::{Deserialize, Serialize};

/// Which variant of the method a run trains and evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Dilated and smoothed features with the dense network and rescue rule.
    #[default]
    Ours,
    /// k-means directly on raw binary features, no network.
    Kmeans,
    /// Raw binary features fed to the full network.
    FeatOrig,
    /// Smoothed features, network without dense connections or rescue.
    NetOrig,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Ours => "ours",
            Baseline::Kmeans => "kmeans",
            Baseline::FeatOrig => "feat-orig",
            Baseline::NetOrig => "net-orig",
        }
    }

    pub fn uses_network(self) -> bool {
        self != Baseline::Kmeans
    }
}

/// Input files of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectPaths {
    pub id: String,
    pub mask: PathBuf,
    pub tracks: PathBuf,
    pub fa: Option<PathBuf>,
    pub atlas: Option<PathBuf>,
    /// Ground-truth labelmap, present for phantom subjects.
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Run directory; each stage writes a subdirectory.
    pub out: PathBuf,
    /// Phantom directory used when `subjects` is empty. Defaults to
    /// `<out>/phantom`.
    pub phantom: Option<PathBuf>,
    pub subjects: Vec<SubjectPaths>,
    /// Subject ids pooled for clustering and training; empty means all.
    pub training: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TractConfig {
    /// Number of streamline clusters (K).
    pub k: usize,
    /// Points per resampled streamline (P).
    pub points: usize,
    pub max_pool: usize,
    /// Dilation of the nucleus mask used to select streamlines, in voxels.
    pub dilation_radius: usize,
    pub connectivity: Connectivity,
}

impl Default for TractConfig {
    fn default() -> Self {
        Self { k: 8, points: 15, max_pool: 20_000, dilation_radius: 2, connectivity: Connectivity::TwentySix }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParcelConfig {
    /// Neighborhood for spatial continuity.
    pub connectivity: Connectivity,
    pub rsd: RsdMode,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub k: Vec<usize>,
    pub c: Vec<usize>,
}

/// Full description of a run. The top-level seed drives every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub baseline: Baseline,
    pub deterministic: bool,
    pub paths: Paths,
    pub phantom: PhantomSpec,
    pub tract: TractConfig,
    pub features: FeatureParams,
    pub network: NetworkConfig,
    pub parcel: ParcelConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            baseline: Baseline::Ours,
            deterministic: true,
            paths: Paths { out: PathBuf::from("run"), ..Default::default() },
            phantom: PhantomSpec::default(),
            tract: TractConfig::default(),
            features: FeatureParams::default(),
            network: NetworkConfig::default(),
            parcel: ParcelConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Copies shared values into the per-stage sections: the seed, K and the
    /// baseline switches.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.phantom.seed = c.seed;
        c.network.seed = c.seed;
        c.network.k = c.tract.k;
        match c.baseline {
            Baseline::Ours => {}
            Baseline::Kmeans | Baseline::FeatOrig => c.features.dilate_smooth = false,
            Baseline::NetOrig => {
                c.network.dense_connections = false;
                c.network.adaptive_rescue = false;
            }
        }
        c
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.paths.out.join(stage)
    }

    pub fn phantom_dir(&self) -> PathBuf {
        self.paths.phantom.clone().unwrap_or_else(|| self.stage_dir("phantom"))
    }

    /// Explicit subjects, or the subjects of the phantom directory.
    pub fn subjects(&self) -> Result<Vec<SubjectPaths>> {
        if !self.paths.subjects.is_empty() {
            return Ok(self.paths.subjects.clone());
        }
        let dir = self.phantom_dir();
        let spec_path = dir.join(phantom::files::SPEC);
        if !spec_path.is_file() {
            bail!("no subjects configured and no phantom at {}", dir.display());
        }
        let spec: PhantomSpec = toml::from_str(&std::fs::read_to_string(&spec_path)?)
            .with_context(|| format!("parsing {}", spec_path.display()))?;
        Ok((0..spec.subjects)
            .map(|s| {
                let id = phantom::subject_id(s);
                let d = dir.join(&id);
                SubjectPaths {
                    id,
                    mask: d.join(phantom::files::MASK),
                    tracks: d.join(phantom::files::TRACKS),
                    fa: Some(d.join(phantom::files::FA)),
                    atlas: None,
                    truth: Some(d.join(phantom::files::TRUTH)),
                }
            })
            .collect())
    }

    /// Subjects checked for existing input files.
    pub fn validated_subjects(&self) -> Result<Vec<SubjectPaths>> {
        let subjects = self.subjects()?;
        for s in &subjects {
            let optional = [&s.fa, &s.atlas, &s.truth];
            for p in [&s.mask, &s.tracks].into_iter().chain(optional.into_iter().flatten()) {
                if !p.is_file() {
                    bail!("subject {}: missing input {}", s.id, p.display());
                }
            }
        }
        let mut ids: Vec<&str> = subjects.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            bail!("duplicate subject ids");
        }
        if let Some(t) = self.paths.training.iter().find(|t| !ids.contains(&t.as_str())) {
            bail!("training subject {t} is not configured");
        }
        Ok(subjects)
    }

    pub fn is_training(&self, id: &str) -> bool {
        self.paths.training.is_empty() || self.paths.training.iter().any(|t| t == id)
    }

    pub fn validate_sweep(&self) -> Result<()> {
        if self.sweep.k.is_empty() || self.sweep.c.is_empty() {
            bail!("sweep grids for k and c must be non-empty");
        }
        Ok(())
    }
}
