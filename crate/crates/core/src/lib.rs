//! Weakly supervised anomaly/target segmentation over patch-embedding grids.
//!
//! The pipeline fits a cluster codebook on a mixed corpus of patch embeddings,
//! flags clusters whose reference-to-mixed frequency ratio collapses as anomaly
//! clusters, and turns patch-level anomaly hits into tri-class segmentation
//! masks (0 background, 1 target, 2 anomaly), either by nearest-neighbor
//! upsampling of the patch grid or by voting over externally supplied instance
//! masks. A reconstructed hypersphere/feature-voting baseline, an IoU
//! evaluation harness, and a seeded synthetic corpus generator round out the
//! toolkit.

pub mod baseline;
pub mod clustering;
pub mod distribution;
pub mod evaluation;
pub mod segmentation;
pub mod synth;
pub mod tensor_io;
