//! Mini-batch K-Means quantization of the embedding space.
//!
//! Fitting is deterministic: k-means++ seeding on a uniform subsample, then
//! per-epoch passes over the stream in order, batch by batch. Within a batch
//! every sample is assigned to its nearest centroid (squared Euclidean,
//! ties to the smallest index) before any update is applied; updates then run
//! in sample order with per-centroid counts that reset at each epoch
//! boundary, so an epoch's end state is the incremental running mean of the
//! samples assigned during that epoch. A full-batch configuration therefore
//! performs exact Lloyd iterations. Fitting stops when the mean squared
//! centroid displacement over an epoch drops below `tol`.

use thiserror::Error;

use crate::segmentation::PatchLabelMap;
use crate::tensor_io::{FeatureGrid, FeatureSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("degenerate data: fewer than K distinct vectors")]
    DegenerateData,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, ClusterError>;

/// Number of candidates drawn per k-means++ step; the candidate with the
/// lowest resulting potential wins (greedy k-means++). Cuts the chance of
/// leaving a small far component unseeded to effectively zero.
const KMEANSPP_CANDIDATES: usize = 12;

/// Fitting parameters for mini-batch K-Means.
#[derive(Debug, Clone)]
pub struct MiniBatchConfig {
    /// Samples per batch. Must be >= K; values >= the dataset size give
    /// exact Lloyd iterations.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Convergence threshold on the mean squared centroid displacement over
    /// one epoch. 0 disables early stopping.
    pub tol: f64,
    /// Size of the uniform subsample used for k-means++ seeding (clamped to
    /// the dataset size).
    pub init_sample_size: usize,
    pub seed: u64,
}

impl Default for MiniBatchConfig {
    fn default() -> Self {
        Self {
            batch_size: 4096,
            max_epochs: 100,
            tol: 1e-6,
            init_sample_size: 65536,
            seed: 0,
        }
    }
}

/// K centroids quantizing the embedding space, plus fitting diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCodebook {
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
    counts: Vec<u64>,
    seed: u64,
    inertia_history: Vec<f64>,
}

impl ClusterCodebook {
    /// Builds a codebook from raw parts, validating the type invariants.
    pub fn new(
        k: usize,
        dim: usize,
        centroids: Vec<f32>,
        counts: Vec<u64>,
        seed: u64,
        inertia_history: Vec<f64>,
    ) -> Result<Self> {
        if k < 2 {
            return Err(ClusterError::InvalidConfig(format!(
                "K must be >= 2, got {k}"
            )));
        }
        if centroids.len() != k * dim {
            return Err(ClusterError::DimMismatch(format!(
                "centroid data length {} != K*dim = {}",
                centroids.len(),
                k * dim
            )));
        }
        if counts.len() != k {
            return Err(ClusterError::DimMismatch(format!(
                "counts length {} != K = {k}",
                counts.len()
            )));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(ClusterError::InvalidConfig("non-finite centroid".into()));
        }
        Ok(Self {
            k,
            dim,
            centroids,
            counts,
            seed,
            inertia_history,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Flat K x dim centroid matrix.
    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Per-cluster assignment counts from the final fitting epoch.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Mean squared distance to the assigned centroid, recorded per epoch at
    /// assignment time.
    pub fn inertia_history(&self) -> &[f64] {
        &self.inertia_history
    }
}

/// Squared Euclidean distance, accumulated in f64 in coordinate order.
pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc
}

fn squared_distance_f64(a: &[f64], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y as f64;
        acc += d * d;
    }
    acc
}

/// Nearest centroid in a flat K x dim matrix; ties go to the smallest index.
fn nearest_in(centroids: &[f64], dim: usize, v: &[f32]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (idx, c) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance_f64(c, v);
        if d < best_d {
            best_d = d;
            best = idx;
        }
    }
    (best, best_d)
}

/// k-means++ seeding on a uniform subsample, greedy candidate variant.
/// Deterministic for a fixed (features, k, init_sample_size, seed) tuple;
/// `fit_codebook` uses exactly this function, so oracle implementations can
/// share its output.
pub fn kmeans_plus_plus_seeds(
    features: &FeatureSet,
    k: usize,
    init_sample_size: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    let n = features.len();
    let dim = features.dim();
    if n < k {
        return Err(ClusterError::TooFewSamples { needed: k, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample_size = init_sample_size.clamp(1, n);
    let sample: Vec<usize> = rand::seq::index::sample(&mut rng, n, sample_size).into_vec();

    let mut chosen: Vec<f32> = Vec::with_capacity(k * dim);
    let first = sample[rng.random_range(0..sample_size)];
    chosen.extend_from_slice(features.vector(first));

    // min squared distance of each subsample vector to the chosen set
    let mut d2: Vec<f64> = sample
        .iter()
        .map(|&i| squared_distance(features.vector(i), &chosen[..dim]))
        .collect();
    let mut total: f64 = d2.iter().sum();

    while chosen.len() < k * dim {
        let picked = if total > 0.0 {
            pick_greedy_candidate(features, &sample, &d2, total, &mut rng)
        } else {
            None
        };
        let next = match picked {
            Some(i) => i,
            // All remaining subsample weight is zero: fall back to scanning
            // the full stream for the first vector distinct from every
            // chosen centroid.
            None => match (0..n).find(|&i| {
                let v = features.vector(i);
                chosen
                    .chunks_exact(dim)
                    .all(|c| squared_distance(v, c) > 0.0)
            }) {
                Some(i) => i,
                None => return Err(ClusterError::DegenerateData),
            },
        };
        let start = chosen.len();
        chosen.extend_from_slice(features.vector(next));
        let new_c = &chosen[start..start + dim];
        for (slot, &i) in d2.iter_mut().zip(sample.iter()) {
            let d = squared_distance(features.vector(i), new_c);
            if d < *slot {
                *slot = d;
            }
        }
        total = d2.iter().sum();
    }
    Ok(chosen)
}

/// Draws `KMEANSPP_CANDIDATES` subsample indices proportionally to d2 and
/// returns the dataset index of the candidate minimizing the resulting
/// potential. Returns None when no positive-weight candidate was drawn.
fn pick_greedy_candidate(
    features: &FeatureSet,
    sample: &[usize],
    d2: &[f64],
    total: f64,
    rng: &mut ChaCha8Rng,
) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for _ in 0..KMEANSPP_CANDIDATES {
        let mut u = rng.random::<f64>() * total;
        let mut cand = None;
        for (j, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if u < w {
                cand = Some(j);
                break;
            }
            u -= w;
        }
        // floating point may leave u slightly above the last bucket
        let cand = cand.or_else(|| d2.iter().rposition(|&w| w > 0.0));
        let Some(j) = cand else { continue };
        if d2[j] <= 0.0 {
            continue;
        }
        let cand_vec = features.vector(sample[j]);
        let potential: f64 = sample
            .iter()
            .zip(d2.iter())
            .map(|(&i, &w)| w.min(squared_distance(features.vector(i), cand_vec)))
            .sum();
        match best {
            Some((p, _)) if potential >= p => {}
            _ => best = Some((potential, sample[j])),
        }
    }
    best.map(|(_, i)| i)
}

/// Fits K centroids with mini-batch K-Means. Identical inputs and seed give
/// a bit-identical codebook.
pub fn fit_codebook(
    features: &FeatureSet,
    k: usize,
    cfg: &MiniBatchConfig,
) -> Result<ClusterCodebook> {
    let n = features.len();
    let dim = features.dim();
    if k < 2 {
        return Err(ClusterError::InvalidConfig(format!(
            "K must be >= 2, got {k}"
        )));
    }
    if cfg.batch_size < k {
        return Err(ClusterError::InvalidConfig(format!(
            "batch_size {} must be >= K {k}",
            cfg.batch_size
        )));
    }
    if cfg.max_epochs == 0 {
        return Err(ClusterError::InvalidConfig(
            "max_epochs must be >= 1".into(),
        ));
    }
    if cfg.tol.is_nan() || cfg.tol < 0.0 {
        return Err(ClusterError::InvalidConfig(format!(
            "tol {} must be >= 0",
            cfg.tol
        )));
    }
    if n < k {
        return Err(ClusterError::TooFewSamples { needed: k, got: n });
    }

    let seeds = kmeans_plus_plus_seeds(features, k, cfg.init_sample_size, cfg.seed)?;
    // Working state in f64; quantized to f32 only in the returned codebook.
    let mut centroids: Vec<f64> = seeds.iter().map(|&v| v as f64).collect();
    let mut counts = vec![0u64; k];
    let mut assignments: Vec<(u32, f64)> = vec![(0, 0.0); n];
    let mut inertia_history = Vec::new();

    for _epoch in 0..cfg.max_epochs {
        let snapshot = centroids.clone();
        counts.fill(0);
        let mut inertia_sum = 0.0f64;

        let mut start = 0;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            // assignment step: pure, against the centroids as of batch start
            for (i, slot) in assignments[start..end].iter_mut().enumerate() {
                let (c, d) = nearest_in(&centroids, dim, features.vector(start + i));
                *slot = (c as u32, d);
                inertia_sum += d;
            }
            // update step: sequential, in sample order
            for (&(c, _), i) in assignments[start..end].iter().zip(start..) {
                let c = c as usize;
                counts[c] += 1;
                let inv = 1.0 / counts[c] as f64;
                let cent = &mut centroids[c * dim..(c + 1) * dim];
                for (slot, &x) in cent.iter_mut().zip(features.vector(i)) {
                    *slot += (x as f64 - *slot) * inv;
                }
            }
            start = end;
        }

        reseed_empty_clusters(features, &mut centroids, &mut counts, &assignments, dim);

        let mut disp = 0.0f64;
        for (a, b) in centroids.chunks_exact(dim).zip(snapshot.chunks_exact(dim)) {
            let mut d = 0.0f64;
            for (x, y) in a.iter().zip(b.iter()) {
                let diff = x - y;
                d += diff * diff;
            }
            disp += d;
        }
        disp /= k as f64;

        inertia_history.push(inertia_sum / n as f64);
        if disp < cfg.tol {
            break;
        }
    }

    let centroids_f32: Vec<f32> = centroids.iter().map(|&v| v as f32).collect();
    ClusterCodebook::new(k, dim, centroids_f32, counts, cfg.seed, inertia_history)
}

/// Clusters that received no assignment during the epoch are re-seeded to
/// the samples farthest from their assigned centroids (assignment-time
/// distances; the r-th empty cluster in index order takes the r-th farthest
/// sample, ties by smaller sample index).
fn reseed_empty_clusters(
    features: &FeatureSet,
    centroids: &mut [f64],
    counts: &mut [u64],
    assignments: &[(u32, f64)],
    dim: usize,
) {
    let empties: Vec<usize> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| i)
        .collect();
    if empties.is_empty() {
        return;
    }
    let mut order: Vec<usize> = (0..assignments.len()).collect();
    order.sort_by(|&a, &b| {
        assignments[b]
            .1
            .total_cmp(&assignments[a].1)
            .then_with(|| a.cmp(&b))
    });
    for (rank, &cluster) in empties.iter().enumerate() {
        let sample = order[rank.min(order.len() - 1)];
        let v = features.vector(sample);
        for (slot, &x) in centroids[cluster * dim..(cluster + 1) * dim]
            .iter_mut()
            .zip(v)
        {
            *slot = x as f64;
        }
        counts[cluster] = 1;
    }
}

/// Index of the nearest centroid by squared Euclidean distance; equidistant
/// candidates resolve to the smallest cluster index.
pub fn assign(codebook: &ClusterCodebook, vector: &[f32]) -> Result<usize> {
    if vector.len() != codebook.dim() {
        return Err(ClusterError::DimMismatch(format!(
            "query dim {} != codebook dim {}",
            vector.len(),
            codebook.dim()
        )));
    }
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for i in 0..codebook.k() {
        let d = squared_distance(codebook.centroid(i), vector);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

/// Per-patch cluster ids for a whole grid.
pub fn assign_grid(codebook: &ClusterCodebook, grid: &FeatureGrid) -> Result<PatchLabelMap> {
    if grid.dim() != codebook.dim() {
        return Err(ClusterError::DimMismatch(format!(
            "grid dim {} != codebook dim {}",
            grid.dim(),
            codebook.dim()
        )));
    }
    let mut cells = Vec::with_capacity(grid.cells());
    for cell in 0..grid.cells() {
        cells.push(assign(codebook, grid.patch(cell))? as u32);
    }
    Ok(PatchLabelMap::new(grid.grid_h(), grid.grid_w(), cells))
}

/// Mean squared distance of every vector to its assigned centroid.
pub fn inertia(codebook: &ClusterCodebook, features: &FeatureSet) -> Result<f64> {
    if features.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    if features.dim() != codebook.dim() {
        return Err(ClusterError::DimMismatch(format!(
            "feature dim {} != codebook dim {}",
            features.dim(),
            codebook.dim()
        )));
    }
    let mut sum = 0.0f64;
    for i in 0..features.len() {
        let v = features.vector(i);
        let c = assign(codebook, v)?;
        sum += squared_distance(codebook.centroid(c), v);
    }
    Ok(sum / features.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature_set(dim: usize, rows: &[&[f32]]) -> FeatureSet {
        let mut data = Vec::new();
        for r in rows {
            assert_eq!(r.len(), dim);
            data.extend_from_slice(r);
        }
        FeatureSet::new(dim, data).unwrap()
    }

    fn codebook_2d(centroids: &[&[f32]]) -> ClusterCodebook {
        let flat: Vec<f32> = centroids.iter().flat_map(|c| c.iter().copied()).collect();
        ClusterCodebook::new(
            centroids.len(),
            2,
            flat,
            vec![1; centroids.len()],
            0,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn assign_basics_and_tie_rule() {
        let cb = codebook_2d(&[&[0.0, 0.0], &[10.0, 10.0]]);
        assert_eq!(assign(&cb, &[1.0, 1.0]).unwrap(), 0);
        // (5,5) is equidistant: smallest index wins
        assert_eq!(assign(&cb, &[5.0, 5.0]).unwrap(), 0);
        assert!(matches!(
            assign(&cb, &[1.0]),
            Err(ClusterError::DimMismatch(_))
        ));
    }

    #[test]
    fn assign_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = 5;
        let dim = 3;
        let centroids: Vec<f32> = (0..k * dim)
            .map(|_| rng.random::<f32>() * 4.0 - 2.0)
            .collect();
        let cb = ClusterCodebook::new(k, dim, centroids.clone(), vec![0; k], 0, vec![]).unwrap();
        for _ in 0..100 {
            let q: Vec<f32> = (0..dim).map(|_| rng.random::<f32>() * 4.0 - 2.0).collect();
            // brute-force oracle with its own distance computation
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for i in 0..k {
                let c = &centroids[i * dim..(i + 1) * dim];
                let d: f64 = c
                    .iter()
                    .zip(q.iter())
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            assert_eq!(assign(&cb, &q).unwrap(), best);
        }
    }

    #[test]
    fn assign_grid_matches_cellwise_assign() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cb = codebook_2d(&[&[0.0, 0.0], &[3.0, 0.0], &[0.0, 3.0]]);
        let data: Vec<f32> = (0..9 * 2).map(|_| rng.random::<f32>() * 4.0).collect();
        let grid = FeatureGrid::new(3, 3, 2, data).unwrap();
        let map = assign_grid(&cb, &grid).unwrap();
        for cell in 0..9 {
            assert_eq!(
                map.cells()[cell] as usize,
                assign(&cb, grid.patch(cell)).unwrap()
            );
        }

        // constant grid gives a constant map
        let grid = FeatureGrid::new(2, 2, 2, vec![2.9, 0.1, 2.9, 0.1, 2.9, 0.1, 2.9, 0.1]).unwrap();
        let map = assign_grid(&cb, &grid).unwrap();
        assert!(map.cells().iter().all(|&c| c == 1));
    }

    #[test]
    fn inertia_zero_at_centroids_and_arithmetic() {
        let cb = codebook_2d(&[&[0.0, 0.0], &[10.0, 10.0]]);
        let fs = feature_set(2, &[&[0.0, 0.0], &[10.0, 10.0]]);
        assert_eq!(inertia(&cb, &fs).unwrap(), 0.0);

        // one point at Euclidean distance 2 from its nearest centroid
        let fs = feature_set(2, &[&[2.0, 0.0]]);
        assert_eq!(inertia(&cb, &fs).unwrap(), 4.0);

        assert!(matches!(
            inertia(&cb, &FeatureSet::empty(2)),
            Err(ClusterError::EmptyInput)
        ));
    }

    #[test]
    fn fit_two_tight_groups() {
        let pts: Vec<[f32; 2]> = vec![
            [0.1, 0.0],
            [-0.1, 0.05],
            [0.0, -0.1],
            [10.1, 10.0],
            [9.9, 10.05],
            [10.0, 9.9],
        ];
        let rows: Vec<&[f32]> = pts.iter().map(|p| p.as_slice()).collect();
        let fs = feature_set(2, &rows);
        let cfg = MiniBatchConfig {
            batch_size: 16,
            seed: 3,
            ..Default::default()
        };
        let cb = fit_codebook(&fs, 2, &cfg).unwrap();
        let labels: Vec<usize> = (0..6).map(|i| assign(&cb, fs.vector(i)).unwrap()).collect();
        assert_eq!(labels[0], labels[1]);
        assert_eq!(labels[1], labels[2]);
        assert_eq!(labels[3], labels[4]);
        assert_eq!(labels[4], labels[5]);
        assert_ne!(labels[0], labels[3]);
    }

    #[test]
    fn fit_k_equals_distinct_points() {
        let fs = feature_set(2, &[&[0.0, 0.0], &[5.0, 0.0], &[0.0, 5.0], &[5.0, 0.0]]);
        let cfg = MiniBatchConfig {
            batch_size: 8,
            tol: 0.0,
            max_epochs: 10,
            seed: 1,
            ..Default::default()
        };
        let cb = fit_codebook(&fs, 3, &cfg).unwrap();
        let mut got: Vec<Vec<i32>> = (0..3)
            .map(|i| cb.centroid(i).iter().map(|&v| v.round() as i32).collect())
            .collect();
        got.sort();
        assert_eq!(got, vec![vec![0, 0], vec![0, 5], vec![5, 0]]);
        assert!(inertia(&cb, &fs).unwrap() < 1e-12);
    }

    #[test]
    fn fit_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..200 * 3).map(|_| rng.random::<f32>()).collect();
        let fs = FeatureSet::new(3, data).unwrap();
        let cfg = MiniBatchConfig {
            batch_size: 32,
            seed: 42,
            ..Default::default()
        };
        let a = fit_codebook(&fs, 4, &cfg).unwrap();
        let b = fit_codebook(&fs, 4, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        let fs = feature_set(2, &[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(matches!(
            fit_codebook(&fs, 3, &MiniBatchConfig::default()),
            Err(ClusterError::TooFewSamples { .. })
        ));
        let cfg = MiniBatchConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(matches!(
            fit_codebook(&fs, 2, &cfg),
            Err(ClusterError::InvalidConfig(_))
        ));

        // 4 copies of the same two distinct points cannot support K=3
        let fs = feature_set(2, &[&[1.0, 1.0], &[1.0, 1.0], &[2.0, 2.0], &[2.0, 2.0]]);
        assert!(matches!(
            fit_codebook(
                &fs,
                3,
                &MiniBatchConfig {
                    batch_size: 8,
                    ..Default::default()
                }
            ),
            Err(ClusterError::DegenerateData)
        ));
    }

    #[test]
    fn full_batch_inertia_history_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..128 * 2).map(|_| rng.random::<f32>()).collect();
        let fs = FeatureSet::new(2, data).unwrap();
        let cfg = MiniBatchConfig {
            batch_size: 128,
            tol: 0.0,
            max_epochs: 40,
            seed: 2,
            ..Default::default()
        };
        let cb = fit_codebook(&fs, 3, &cfg).unwrap();
        let hist = cb.inertia_history();
        assert!(!hist.is_empty());
        for w in hist.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12 * w[0].max(1.0),
                "inertia increased: {w:?}"
            );
        }
    }

    #[test]
    fn well_separated_components_recovered() {
        // 4 Gaussian blobs, pairwise mean distance >= 10 sigma
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let means = [[0.0f32, 0.0], [20.0, 0.0], [0.0, 20.0], [20.0, 20.0]];
        let sigma = 1.0f32;
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for i in 0..200 {
            let comp = i % 4;
            truth.push(comp);
            for &m in &means[comp] {
                let noise: f64 = rng.sample(rand_distr::StandardNormal);
                data.push(m + sigma * noise as f32);
            }
        }
        let fs = FeatureSet::new(2, data).unwrap();
        let cfg = MiniBatchConfig {
            batch_size: 64,
            seed: 4,
            ..Default::default()
        };
        let cb = fit_codebook(&fs, 4, &cfg).unwrap();
        // assignments must equal planted labels up to relabeling
        let mut mapping = [usize::MAX; 4];
        for i in 0..200 {
            let c = assign(&cb, fs.vector(i)).unwrap();
            if mapping[truth[i]] == usize::MAX {
                mapping[truth[i]] = c;
            }
            assert_eq!(
                mapping[truth[i]], c,
                "sample {i} broke the component mapping"
            );
        }
        let mut seen: Vec<usize> = mapping.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 4);
    }
}
