//! Cluster distribution estimation and anomaly cluster definition.
//!
//! A corpus is projected into the codebook's cluster space and tallied into a
//! patch-count-weighted frequency distribution. For each cluster the ratio of
//! its reference frequency to its mixed frequency is computed; clusters whose
//! ratio falls strictly below the threshold are the anomaly clusters (visual
//! patterns present before separation but suppressed after). Clusters with
//! zero mixed mass have an undefined ratio and stay nominal.

use thiserror::Error;

use crate::clustering::{self, ClusterCodebook, ClusterError};
use crate::tensor_io::{self, DatasetManifest, FeatureGrid, IoError};

#[derive(Debug, Error)]
pub enum DistError {
    #[error("cluster count mismatch: {0} vs {1}")]
    KMismatch(usize, usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("manifest contains no records")]
    EmptyManifest,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

impl DistError {
    pub fn is_io(&self) -> bool {
        matches!(self, DistError::Io(e) if e.is_io())
    }
}

pub type Result<T> = std::result::Result<T, DistError>;

/// Per-cluster assignment counts and frequencies over one corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDistribution {
    counts: Vec<u64>,
    probs: Vec<f64>,
    total: u64,
}

impl ClusterDistribution {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let probs = if total == 0 {
            vec![0.0; counts.len()]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        Self {
            counts,
            probs,
            total,
        }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

/// The set of anomaly clusters plus the per-cluster ratios it was derived
/// from. `None` marks an undefined ratio (zero mixed mass).
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyClusterSet {
    anomaly_ids: Vec<usize>,
    is_anomaly: Vec<bool>,
    ratios: Vec<Option<f64>>,
    threshold: f64,
}

impl AnomalyClusterSet {
    pub(crate) fn from_parts(
        ratios: Vec<Option<f64>>,
        threshold: f64,
        anomaly_ids: Vec<usize>,
    ) -> Result<Self> {
        let expected: Vec<usize> = ratios
            .iter()
            .enumerate()
            .filter(|(_, r)| matches!(r, Some(v) if *v < threshold))
            .map(|(i, _)| i)
            .collect();
        if expected != anomaly_ids {
            return Err(DistError::InvalidParameter(
                "anomaly ids inconsistent with ratios and threshold".into(),
            ));
        }
        let mut is_anomaly = vec![false; ratios.len()];
        for &id in &anomaly_ids {
            is_anomaly[id] = true;
        }
        Ok(Self {
            anomaly_ids,
            is_anomaly,
            ratios,
            threshold,
        })
    }

    /// Sorted anomaly cluster ids.
    pub fn anomaly_ids(&self) -> &[usize] {
        &self.anomaly_ids
    }

    pub fn contains(&self, cluster: usize) -> bool {
        self.is_anomaly.get(cluster).copied().unwrap_or(false)
    }

    pub fn ratios(&self) -> &[Option<f64>] {
        &self.ratios
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn is_empty(&self) -> bool {
        self.anomaly_ids.is_empty()
    }
}

/// The trained artifact: codebook, both corpus distributions, the anomaly
/// cluster set, and the mask-fusion voting threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PastaModel {
    pub codebook: ClusterCodebook,
    pub mixed_dist: ClusterDistribution,
    pub ref_dist: ClusterDistribution,
    pub anomaly_set: AnomalyClusterSet,
    pub gamma: f64,
}

impl PastaModel {
    pub(crate) fn from_parts(
        codebook: ClusterCodebook,
        mixed_dist: ClusterDistribution,
        ref_dist: ClusterDistribution,
        anomaly_set: AnomalyClusterSet,
        gamma: f64,
    ) -> Result<Self> {
        let k = codebook.k();
        if mixed_dist.k() != k || ref_dist.k() != k || anomaly_set.ratios().len() != k {
            return Err(DistError::KMismatch(k, mixed_dist.k().min(ref_dist.k())));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(DistError::InvalidParameter(format!(
                "gamma {gamma} outside [0,1]"
            )));
        }
        Ok(Self {
            codebook,
            mixed_dist,
            ref_dist,
            anomaly_set,
            gamma,
        })
    }
}

/// Tallies per-cluster patch counts over every image of a manifest.
pub fn estimate_distribution(
    codebook: &ClusterCodebook,
    manifest: &DatasetManifest,
) -> Result<ClusterDistribution> {
    if manifest.records.is_empty() {
        return Err(DistError::EmptyManifest);
    }
    let mut counts = vec![0u64; codebook.k()];
    for record in &manifest.records {
        let grid = tensor_io::read_feature_grid(&record.feature_path)?;
        tally_grid(codebook, &grid, &mut counts)?;
    }
    Ok(ClusterDistribution::from_counts(counts))
}

/// In-memory variant of [`estimate_distribution`] for callers that already
/// hold the grids (sweeps re-estimate per fitted codebook).
pub fn estimate_distribution_grids(
    codebook: &ClusterCodebook,
    grids: &[FeatureGrid],
) -> Result<ClusterDistribution> {
    if grids.is_empty() {
        return Err(DistError::EmptyManifest);
    }
    let mut counts = vec![0u64; codebook.k()];
    for grid in grids {
        tally_grid(codebook, grid, &mut counts)?;
    }
    Ok(ClusterDistribution::from_counts(counts))
}

fn tally_grid(codebook: &ClusterCodebook, grid: &FeatureGrid, counts: &mut [u64]) -> Result<()> {
    if grid.dim() != codebook.dim() {
        return Err(DistError::DimMismatch(format!(
            "grid dim {} != codebook dim {}",
            grid.dim(),
            codebook.dim()
        )));
    }
    for cell in 0..grid.cells() {
        let c = clustering::assign(codebook, grid.patch(cell))?;
        counts[c] += 1;
    }
    Ok(())
}

/// Per-cluster ratio R_i = refProb_i / mixedProb_i; `None` where the mixed
/// probability is zero.
pub fn compute_ratios(
    ref_dist: &ClusterDistribution,
    mixed_dist: &ClusterDistribution,
) -> Result<Vec<Option<f64>>> {
    if ref_dist.k() != mixed_dist.k() {
        return Err(DistError::KMismatch(ref_dist.k(), mixed_dist.k()));
    }
    Ok(ref_dist
        .probs()
        .iter()
        .zip(mixed_dist.probs().iter())
        .map(|(&r, &m)| if m > 0.0 { Some(r / m) } else { None })
        .collect())
}

/// Clusters with a defined ratio strictly below the threshold form the
/// anomaly set. Undefined-ratio clusters stay nominal (no mixed evidence).
pub fn define_anomaly_set(ratios: &[Option<f64>], threshold: f64) -> AnomalyClusterSet {
    let anomaly_ids: Vec<usize> = ratios
        .iter()
        .enumerate()
        .filter(|(_, r)| matches!(r, Some(v) if *v < threshold))
        .map(|(i, _)| i)
        .collect();
    let undefined = ratios.iter().filter(|r| r.is_none()).count();
    if undefined > 0 {
        log::warn!("{undefined} cluster(s) have zero mixed mass; ratio undefined, kept nominal");
    }
    let mut is_anomaly = vec![false; ratios.len()];
    for &id in &anomaly_ids {
        is_anomaly[id] = true;
    }
    AnomalyClusterSet {
        anomaly_ids,
        is_anomaly,
        ratios: ratios.to_vec(),
        threshold,
    }
}

/// Builds the full model: estimates both distributions with a frozen
/// codebook, derives ratios and the anomaly set, and attaches gamma.
pub fn build_model(
    codebook: ClusterCodebook,
    mixed_manifest: &DatasetManifest,
    ref_manifest: &DatasetManifest,
    r_threshold: f64,
    gamma: f64,
) -> Result<PastaModel> {
    let mixed_dist = estimate_distribution(&codebook, mixed_manifest)?;
    let ref_dist = estimate_distribution(&codebook, ref_manifest)?;
    build_model_from_dists(codebook, mixed_dist, ref_dist, r_threshold, gamma)
}

/// In-memory variant of [`build_model`] over preloaded grids.
pub fn build_model_grids(
    codebook: ClusterCodebook,
    mixed_grids: &[FeatureGrid],
    ref_grids: &[FeatureGrid],
    r_threshold: f64,
    gamma: f64,
) -> Result<PastaModel> {
    let mixed_dist = estimate_distribution_grids(&codebook, mixed_grids)?;
    let ref_dist = estimate_distribution_grids(&codebook, ref_grids)?;
    build_model_from_dists(codebook, mixed_dist, ref_dist, r_threshold, gamma)
}

fn build_model_from_dists(
    codebook: ClusterCodebook,
    mixed_dist: ClusterDistribution,
    ref_dist: ClusterDistribution,
    r_threshold: f64,
    gamma: f64,
) -> Result<PastaModel> {
    if !(0.0..=1.0).contains(&r_threshold) {
        return Err(DistError::InvalidParameter(format!(
            "ratio threshold {r_threshold} outside [0,1]"
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(DistError::InvalidParameter(format!(
            "gamma {gamma} outside [0,1]"
        )));
    }
    let ratios = compute_ratios(&ref_dist, &mixed_dist)?;
    let anomaly_set = define_anomaly_set(&ratios, r_threshold);
    PastaModel::from_parts(codebook, mixed_dist, ref_dist, anomaly_set, gamma)
}

pub const DEFAULT_R_THRESHOLD: f64 = 0.05;
pub const DEFAULT_GAMMA: f64 = 0.1;
