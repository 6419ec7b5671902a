//! Reconstructed hypersphere/feature-voting baseline.
//!
//! Object embeddings are pooled from the patch grid under each instance mask.
//! Every embedding of the source corpus gets a hypersphere radius equal to
//! the Euclidean distance to its kSphere-th nearest neighbor (self excluded);
//! the densest `bagFraction` of embeddings form the target feature bag. A
//! query is classified by its kVote nearest bag entries: it is a target when
//! at least ceil(kVote/2) of them contain it within their radius, otherwise
//! an anomaly.

use thiserror::Error;

use crate::segmentation::{InstanceMaskSet, SegError, TriClassMask};
use crate::tensor_io::FeatureGrid;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("too few samples: need more than {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("bag too small: {size} entries < kVote {k_vote}")]
    BagTooSmall { size: usize, k_vote: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Seg(#[from] SegError),
}

impl BaselineError {
    pub fn is_io(&self) -> bool {
        matches!(self, BaselineError::Seg(e) if e.is_io())
    }
}

pub type Result<T> = std::result::Result<T, BaselineError>;

#[derive(Debug, Clone)]
pub struct BaselineConfig {
    /// Neighbor index defining each hypersphere radius.
    pub k_sphere: usize,
    /// Number of nearest bag entries that vote during classification.
    pub k_vote: usize,
    /// Fraction of densest embeddings retained in the bag.
    pub bag_fraction: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            k_sphere: 260,
            k_vote: 10,
            bag_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagEntry {
    pub embedding: Vec<f32>,
    /// Euclidean distance to the kSphere-th nearest neighbor in the source
    /// set, self excluded.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    entries: Vec<BagEntry>,
    k_sphere: usize,
    dim: usize,
}

impl FeatureBag {
    pub(crate) fn from_parts(entries: Vec<BagEntry>, k_sphere: usize, dim: usize) -> Result<Self> {
        if entries.iter().any(|e| e.embedding.len() != dim) {
            return Err(BaselineError::DimMismatch("bag entry dim mismatch".into()));
        }
        Ok(Self {
            entries,
            k_sphere,
            dim,
        })
    }

    pub fn entries(&self) -> &[BagEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn k_sphere(&self) -> usize {
        self.k_sphere
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectClass {
    Target,
    Anomaly,
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    crate::clustering::squared_distance(a, b).sqrt()
}

/// Mean of the patch vectors under a mask's upsampled footprint, weighted by
/// intersecting pixel count (each foreground pixel contributes the vector of
/// the patch it reads under nearest-neighbor upsampling).
pub fn pool_object_embedding(
    grid: &FeatureGrid,
    mask: &crate::segmentation::InstanceMask,
    h: usize,
    w: usize,
) -> Result<Vec<f32>> {
    if mask.pixels.is_empty() {
        return Err(BaselineError::EmptyMask);
    }
    if h < grid.grid_h() || w < grid.grid_w() {
        return Err(BaselineError::DimMismatch(format!(
            "image {h}x{w} smaller than grid {}x{}",
            grid.grid_h(),
            grid.grid_w()
        )));
    }
    let mut acc = vec![0.0f64; grid.dim()];
    for &p in &mask.pixels {
        let p = p as usize;
        if p >= h * w {
            return Err(BaselineError::DimMismatch(format!(
                "mask pixel {p} outside image {h}x{w}"
            )));
        }
        let (y, x) = (p / w, p % w);
        let cell = (y * grid.grid_h() / h) * grid.grid_w() + x * grid.grid_w() / w;
        for (slot, &v) in acc.iter_mut().zip(grid.patch(cell)) {
            *slot += v as f64;
        }
    }
    let n = mask.pixels.len() as f64;
    Ok(acc.into_iter().map(|v| (v / n) as f32).collect())
}

/// Computes hypersphere radii for every embedding and retains the densest
/// `bagFraction` (smallest radii; ties broken by input index).
pub fn build_bag(embeddings: &[Vec<f32>], cfg: &BaselineConfig) -> Result<FeatureBag> {
    let n = embeddings.len();
    if cfg.k_sphere == 0 {
        return Err(BaselineError::InvalidConfig("kSphere must be >= 1".into()));
    }
    if !(cfg.bag_fraction > 0.0 && cfg.bag_fraction <= 1.0) {
        return Err(BaselineError::InvalidConfig(format!(
            "bagFraction {} outside (0,1]",
            cfg.bag_fraction
        )));
    }
    if n <= cfg.k_sphere {
        return Err(BaselineError::TooFewSamples {
            needed: cfg.k_sphere,
            got: n,
        });
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(BaselineError::DimMismatch("embedding dims differ".into()));
    }

    let mut radii = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n - 1);
    for (i, e) in embeddings.iter().enumerate() {
        dists.clear();
        for (j, other) in embeddings.iter().enumerate() {
            if j != i {
                dists.push(euclidean(e, other));
            }
        }
        let (_, kth, _) = dists.select_nth_unstable_by(cfg.k_sphere - 1, f64::total_cmp);
        radii.push(*kth);
    }

    let keep = ((cfg.bag_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| radii[a].total_cmp(&radii[b]).then_with(|| a.cmp(&b)));
    let mut retained: Vec<bool> = vec![false; n];
    for &i in order.iter().take(keep) {
        retained[i] = true;
    }
    // keep input order among retained entries
    let entries = embeddings
        .iter()
        .enumerate()
        .filter(|(i, _)| retained[*i])
        .map(|(i, e)| BagEntry {
            embedding: e.clone(),
            radius: radii[i],
        })
        .collect();
    FeatureBag::from_parts(entries, cfg.k_sphere, dim)
}

/// Majority containment vote over the kVote nearest bag entries. Nearer
/// entries sort first; equal distances resolve by entry index.
pub fn classify_embedding(bag: &FeatureBag, query: &[f32], k_vote: usize) -> Result<ObjectClass> {
    if k_vote == 0 {
        return Err(BaselineError::InvalidConfig("kVote must be >= 1".into()));
    }
    if bag.len() < k_vote {
        return Err(BaselineError::BagTooSmall {
            size: bag.len(),
            k_vote,
        });
    }
    if query.len() != bag.dim() {
        return Err(BaselineError::DimMismatch(format!(
            "query dim {} != bag dim {}",
            query.len(),
            bag.dim()
        )));
    }
    let mut order: Vec<(f64, usize)> = bag
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (euclidean(query, &e.embedding), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let contained = order
        .iter()
        .take(k_vote)
        .filter(|(d, i)| *d <= bag.entries[*i].radius)
        .count();
    if contained >= k_vote.div_ceil(2) {
        Ok(ObjectClass::Target)
    } else {
        Ok(ObjectClass::Anomaly)
    }
}

/// Pools and classifies every instance mask, painting targets 1 and
/// anomalies 2 with the same anomaly-wins overlap rule as mask fusion.
pub fn baseline_segment(
    grid: &FeatureGrid,
    masks: &InstanceMaskSet,
    bag: &FeatureBag,
    cfg: &BaselineConfig,
    h: usize,
    w: usize,
) -> Result<TriClassMask> {
    if masks.h() != h || masks.w() != w {
        return Err(BaselineError::DimMismatch(format!(
            "mask set {}x{} != output {h}x{w}",
            masks.h(),
            masks.w()
        )));
    }
    let mut labels = Vec::with_capacity(masks.masks().len());
    for mask in masks.masks() {
        let embedding = pool_object_embedding(grid, mask, h, w)?;
        labels.push(classify_embedding(bag, &embedding, cfg.k_vote)?);
    }
    let mut pixels = vec![0u8; h * w];
    for (mask, _) in masks
        .masks()
        .iter()
        .zip(&labels)
        .filter(|(_, l)| **l == ObjectClass::Target)
    {
        for &p in &mask.pixels {
            pixels[p as usize] = 1;
        }
    }
    for (mask, _) in masks
        .masks()
        .iter()
        .zip(&labels)
        .filter(|(_, l)| **l == ObjectClass::Anomaly)
    {
        for &p in &mask.pixels {
            pixels[p as usize] = 2;
        }
    }
    Ok(TriClassMask::new(h, w, pixels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::InstanceMask;

    fn embeddings_1d(points: &[f32]) -> Vec<Vec<f32>> {
        points.iter().map(|&p| vec![p]).collect()
    }

    #[test]
    fn default_config_is_the_reported_operating_point() {
        let cfg = BaselineConfig::default();
        assert_eq!((cfg.k_sphere, cfg.k_vote), (260, 10));
    }

    #[test]
    fn bag_radii_hand_example() {
        // 1-D points {0,1,2,10}, kSphere=1 -> radii [1,1,1,8]
        let cfg = BaselineConfig {
            k_sphere: 1,
            k_vote: 1,
            bag_fraction: 1.0,
        };
        let bag = build_bag(&embeddings_1d(&[0.0, 1.0, 2.0, 10.0]), &cfg).unwrap();
        let radii: Vec<f64> = bag.entries().iter().map(|e| e.radius).collect();
        assert_eq!(radii, vec![1.0, 1.0, 1.0, 8.0]);

        // bagFraction=0.75 keeps {0,1,2}
        let cfg = BaselineConfig {
            bag_fraction: 0.75,
            ..cfg
        };
        let bag = build_bag(&embeddings_1d(&[0.0, 1.0, 2.0, 10.0]), &cfg).unwrap();
        let kept: Vec<f32> = bag.entries().iter().map(|e| e.embedding[0]).collect();
        assert_eq!(kept, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn bag_identical_points_all_retained() {
        let cfg = BaselineConfig {
            k_sphere: 2,
            k_vote: 1,
            bag_fraction: 0.5,
        };
        let bag = build_bag(&embeddings_1d(&[3.0, 3.0, 3.0, 3.0]), &cfg).unwrap();
        assert!(bag.entries().iter().all(|e| e.radius == 0.0));
        // ceil(0.5 * 4) = 2 kept, ties by input index
        assert_eq!(bag.len(), 2);
    }

    #[test]
    fn bag_too_few_samples() {
        let cfg = BaselineConfig {
            k_sphere: 3,
            k_vote: 1,
            bag_fraction: 1.0,
        };
        assert!(matches!(
            build_bag(&embeddings_1d(&[0.0, 1.0, 2.0]), &cfg),
            Err(BaselineError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn classify_hand_examples() {
        let cfg = BaselineConfig {
            k_sphere: 1,
            k_vote: 1,
            bag_fraction: 0.75,
        };
        let bag = build_bag(&embeddings_1d(&[0.0, 1.0, 2.0, 10.0]), &cfg).unwrap();
        // query 0.5: nearest entry 0 (or 1) at distance 0.5 <= radius 1
        assert_eq!(
            classify_embedding(&bag, &[0.5], 1).unwrap(),
            ObjectClass::Target
        );
        // query 5: nearest entry 2 at distance 3 > radius 1
        assert_eq!(
            classify_embedding(&bag, &[5.0], 1).unwrap(),
            ObjectClass::Anomaly
        );
        // bag member is its own nearest neighbor at distance 0
        assert_eq!(
            classify_embedding(&bag, &[2.0], 1).unwrap(),
            ObjectClass::Target
        );

        assert!(matches!(
            classify_embedding(&bag, &[0.0], 4),
            Err(BaselineError::BagTooSmall { size: 3, k_vote: 4 })
        ));
    }

    #[test]
    fn equal_distances_resolve_by_entry_index() {
        // query 1.0 is exactly 1.0 from both entries; entry 0 must win the
        // kVote=1 slot, and its radius decides the class
        let bag = FeatureBag::from_parts(
            vec![
                BagEntry {
                    embedding: vec![0.0],
                    radius: 2.0,
                },
                BagEntry {
                    embedding: vec![2.0],
                    radius: 0.5,
                },
            ],
            1,
            1,
        )
        .unwrap();
        assert_eq!(
            classify_embedding(&bag, &[1.0], 1).unwrap(),
            ObjectClass::Target
        );

        let reversed = FeatureBag::from_parts(
            vec![
                BagEntry {
                    embedding: vec![0.0],
                    radius: 0.5,
                },
                BagEntry {
                    embedding: vec![2.0],
                    radius: 2.0,
                },
            ],
            1,
            1,
        )
        .unwrap();
        assert_eq!(
            classify_embedding(&reversed, &[1.0], 1).unwrap(),
            ObjectClass::Anomaly
        );
    }

    #[test]
    fn query_outside_every_radius_is_anomaly() {
        let cfg = BaselineConfig {
            k_sphere: 1,
            k_vote: 3,
            bag_fraction: 1.0,
        };
        let bag = build_bag(&embeddings_1d(&[0.0, 1.0, 2.0, 10.0]), &cfg).unwrap();
        assert_eq!(
            classify_embedding(&bag, &[100.0], 3).unwrap(),
            ObjectClass::Anomaly
        );
    }

    #[test]
    fn radii_monotone_in_k_sphere() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let embeddings: Vec<Vec<f32>> = (0..20)
            .map(|_| (0..3).map(|_| rng.random::<f32>() * 5.0).collect())
            .collect();
        let mut prev: Option<Vec<f64>> = None;
        for k_sphere in 1..embeddings.len() {
            let cfg = BaselineConfig {
                k_sphere,
                k_vote: 1,
                bag_fraction: 1.0,
            };
            let bag = build_bag(&embeddings, &cfg).unwrap();
            let radii: Vec<f64> = bag.entries().iter().map(|e| e.radius).collect();
            if let Some(p) = prev {
                for (a, b) in p.iter().zip(radii.iter()) {
                    assert!(b >= a, "radius shrank as kSphere grew");
                }
            }
            prev = Some(radii);
        }
    }

    #[test]
    fn radii_permutation_invariant() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let embeddings = embeddings_1d(&[0.0, 0.5, 1.0, 4.0, 4.5, 9.0]);
        let cfg = BaselineConfig {
            k_sphere: 2,
            k_vote: 1,
            bag_fraction: 0.5,
        };
        let bag = build_bag(&embeddings, &cfg).unwrap();
        let mut base_radii: Vec<f64> = bag.entries().iter().map(|e| e.radius).collect();
        base_radii.sort_by(f64::total_cmp);
        let mut base_kept: Vec<f32> = bag.entries().iter().map(|e| e.embedding[0]).collect();
        base_kept.sort_by(f32::total_cmp);

        let mut shuffled = embeddings.clone();
        shuffled.shuffle(&mut rng);
        let bag2 = build_bag(&shuffled, &cfg).unwrap();
        let mut radii: Vec<f64> = bag2.entries().iter().map(|e| e.radius).collect();
        radii.sort_by(f64::total_cmp);
        let mut kept: Vec<f32> = bag2.entries().iter().map(|e| e.embedding[0]).collect();
        kept.sort_by(f32::total_cmp);
        assert_eq!(base_radii, radii);
        assert_eq!(base_kept, kept);
    }

    #[test]
    fn pool_single_patch_and_uniform_grid() {
        // 2x2 grid, dim 2, distinct patch vectors, image 4x4
        let grid = FeatureGrid::new(2, 2, 2, vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0, 0.0]).unwrap();
        // mask covering exactly patch (0,1)'s footprint: pixels x in 2..4, y in 0..2
        let mask = InstanceMask {
            id: 1,
            pixels: vec![2, 3, 6, 7],
        };
        assert_eq!(
            pool_object_embedding(&grid, &mask, 4, 4).unwrap(),
            [2.0, 0.0]
        );

        let uniform = FeatureGrid::new(2, 2, 2, [[5.0f32, -1.0]; 4].concat()).unwrap();
        let mask = InstanceMask {
            id: 1,
            pixels: vec![0, 5, 10, 15],
        };
        assert_eq!(
            pool_object_embedding(&uniform, &mask, 4, 4).unwrap(),
            [5.0, -1.0]
        );
    }

    #[test]
    fn pool_matches_pixel_weighted_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let (gh, gw, dim, h, w) = (3, 4, 2, 7, 9);
        let data: Vec<f32> = (0..gh * gw * dim).map(|_| rng.random::<f32>()).collect();
        let grid = FeatureGrid::new(gh, gw, dim, data).unwrap();
        let pixels: Vec<u32> = (0..(h * w) as u32)
            .filter(|_| rng.random::<f64>() < 0.3)
            .collect();
        if pixels.is_empty() {
            return;
        }
        let mask = InstanceMask {
            id: 1,
            pixels: pixels.clone(),
        };
        let pooled = pool_object_embedding(&grid, &mask, h, w).unwrap();

        // oracle: loop pixels, look up patch by floor formula, average
        let mut acc = vec![0.0f64; dim];
        for &p in &pixels {
            let (y, x) = (p as usize / w, p as usize % w);
            let cell = (y * gh / h) * gw + x * gw / w;
            for (slot, &v) in acc.iter_mut().zip(grid.patch(cell)) {
                *slot += v as f64;
            }
        }
        for (a, b) in acc.iter().zip(pooled.iter()) {
            assert!((a / pixels.len() as f64 - *b as f64).abs() < 1e-6);
        }
    }
}
