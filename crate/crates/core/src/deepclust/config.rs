use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and training hyperparameters of the clustering autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Side length of the square input (number of streamline clusters).
    pub k: usize,
    pub latent_dim: usize,
    pub num_levels: usize,
    /// Output channels of each encoder level.
    pub channels: Vec<usize>,
    /// Number of parcels.
    pub c: usize,
    /// Weight of the reconstruction term.
    pub lambda: f64,
    /// Weight of the centroid term.
    pub beta: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub pretrain_lr: f64,
    pub joint_lr: f64,
    pub seed: u64,
    /// A cluster holding fewer than this fraction of a batch is rescued.
    pub empty_fraction: f64,
    pub dense_connections: bool,
    pub adaptive_rescue: bool,
    pub kmeans_restarts: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            k: 100,
            latent_dim: 10,
            num_levels: 3,
            channels: vec![16, 32, 64],
            c: 9,
            lambda: 15000.0,
            beta: 0.5,
            batch_size: 256,
            pretrain_epochs: 100,
            joint_epochs: 50,
            pretrain_lr: 1e-3,
            joint_lr: 1e-4,
            seed: 0,
            empty_fraction: 1.0 / 80.0,
            dense_connections: true,
            adaptive_rescue: true,
            kmeans_restarts: 10,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_levels == 0 {
            return bad("num_levels must be at least 1".into());
        }
        if self.channels.len() != self.num_levels {
            return bad(format!("{} channel counts for {} levels", self.channels.len(), self.num_levels));
        }
        if self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.num_levels >= usize::BITS as usize || self.k < (1usize << self.num_levels) {
            return bad(format!("K = {} is too small for {} pooling levels", self.k, self.num_levels));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.c < 2 {
            return bad(format!("c must be at least 2, got {}", self.c));
        }
        if self.batch_size < self.c {
            return bad(format!("batch_size {} is smaller than c = {}", self.batch_size, self.c));
        }
        if !(self.empty_fraction > 0.0 && self.empty_fraction < 1.0) {
            return bad(format!("empty_fraction must lie in (0, 1), got {}", self.empty_fraction));
        }
        for (name, lr) in [("pretrain_lr", self.pretrain_lr), ("joint_lr", self.joint_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.kmeans_restarts == 0 {
            return bad("kmeans_restarts must be at least 1".into());
        }
        Ok(())
    }

    /// Spatial side length after each pooling level, starting with `k`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.k];
        for _ in 0..self.num_levels {
            s.push(s.last().unwrap() / 2);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        NetworkConfig::default().validate().unwrap();
        assert_eq!(NetworkConfig::default().sizes(), vec![100, 50, 25, 12]);
    }

    #[test]
    fn invalid_configs() {
        let base = NetworkConfig::default();
        let cases = [
            NetworkConfig { k: 7, ..base.clone() },
            NetworkConfig { c: 1, ..base.clone() },
            NetworkConfig { batch_size: 4, c: 5, ..base.clone() },
            NetworkConfig { lambda: 0.0, ..base.clone() },
            NetworkConfig { beta: -1.0, ..base.clone() },
            NetworkConfig { empty_fraction: 1.0, ..base.clone() },
            NetworkConfig { channels: vec![4, 4], ..base.clone() },
        ];
        for cfg in cases {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = NetworkConfig { k: 8, channels: vec![4, 8, 8], ..Default::default() };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<NetworkConfig>(&text).unwrap(), cfg);
    }
}
