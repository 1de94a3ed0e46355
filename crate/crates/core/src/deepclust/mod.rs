//! Convolutional autoencoder trained jointly with k-means in its latent space.
//!
//! Inputs are circulant `K x K` images built from voxel feature rows. The
//! encoder stacks 5x5 convolution, batch normalization, ReLU and 2x2 max
//! pooling per level; with dense connections each level's pooled output is
//! pooled again and concatenated onto the next level's output. A fully
//! connected layer maps to the latent space. The decoder mirrors the encoder
//! with nearest-neighbor upsampling and has no dense connections.
//!
//! All arithmetic is `f64` and single-threaded, so training is bit-reproducible
//! for a fixed seed.

mod checkpoint;
mod config;
mod kmeans;
mod layers;
mod network;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::NetworkConfig;
pub use kmeans::{init_centroids, Centroids};
pub use layers::Param;
pub use network::{build_autoencoder, Autoencoder};
pub use train::{
    assign, encode, joint_loss, joint_loss_gradient, joint_train, pretrain, reconstruct, rescue_empty_clusters,
    BatchLoss, EpochRecord, TrainReport, TrainingSet,
};
