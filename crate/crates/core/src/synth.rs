//! Seeded synthetic corpora with planted Gaussian components.
//!
//! Scenes are patch grids: background cells draw from background components,
//! non-overlapping rectangular blobs draw from target or anomaly components
//! (each blob is independently anomalous with probability lambda when the
//! corpus allows anomalies). Component means are rejection-sampled so every
//! pairwise distance is at least delta; patch vectors are mean + sigma *
//! standard normal. Ground truth is emitted patch-aligned through the same
//! floor pixel-to-patch map the segmentation path uses, so a perfect
//! clustering can reach IoU 100.
//!
//! RNG stream order is fixed: stream 0 draws component means, stream 1+i
//! drives image i (blob count; per blob: height, width, placement attempts,
//! class, component pick; then per background cell a component pick; then
//! per cell the noise vector), with images indexed globally across the
//! mixed, reference and test corpora in that order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor_io::{self, FeatureGrid, IoError, LabelRaster};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("placement failure: {0}")]
    PlacementFailure(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl SynthError {
    pub fn is_io(&self) -> bool {
        matches!(self, SynthError::Io(e) if e.is_io())
    }
}

pub type Result<T> = std::result::Result<T, SynthError>;

const MEAN_PLACEMENT_RETRIES: usize = 1000;
const BLOB_PLACEMENT_RETRIES: usize = 200;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub n_background: usize,
    pub n_target: usize,
    pub n_anomaly: usize,
    /// Per-blob anomaly probability in anomaly-bearing corpora.
    pub lambda: f64,
    /// Within-component noise scale.
    pub sigma: f64,
    /// Minimum pairwise distance between component means.
    pub delta: f64,
    /// Inclusive (min, max) blobs per image.
    pub blobs_per_image: (usize, usize),
    /// Inclusive (min, max) blob side length in patches.
    pub blob_size: (usize, usize),
    pub images_mixed: usize,
    pub images_reference: usize,
    pub images_test: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// The default desk-scale preset: 64-d embeddings on a 16x16 grid,
    /// 2 background + 2 target + 1 anomaly components separated by
    /// 10*sigma*sqrt(d), lambda 0.2, 100/100/50 images.
    pub fn easy_preset(seed: u64) -> Self {
        let dim = 64usize;
        let sigma = 1.0;
        Self {
            dim,
            grid_h: 16,
            grid_w: 16,
            image_h: 128,
            image_w: 128,
            n_background: 2,
            n_target: 2,
            n_anomaly: 1,
            lambda: 0.2,
            sigma,
            delta: 10.0 * sigma * (dim as f64).sqrt(),
            blobs_per_image: (3, 6),
            blob_size: (2, 5),
            images_mixed: 100,
            images_reference: 100,
            images_test: 50,
            seed,
        }
    }

    pub fn n_components(&self) -> usize {
        self.n_background + self.n_target + self.n_anomaly
    }

    pub fn component_role(&self, comp: usize) -> ComponentRole {
        if comp < self.n_background {
            ComponentRole::Background
        } else if comp < self.n_background + self.n_target {
            ComponentRole::Target
        } else {
            ComponentRole::Anomaly
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(SynthError::InvalidConfig("dim must be >= 2".into()));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(SynthError::InvalidConfig("grid dims must be >= 1".into()));
        }
        if self.image_h < self.grid_h || self.image_w < self.grid_w {
            return Err(SynthError::InvalidConfig(
                "image dims must cover grid dims".into(),
            ));
        }
        if self.n_background == 0 || self.n_target == 0 || self.n_anomaly == 0 {
            return Err(SynthError::InvalidConfig(
                "need >= 1 component of each role".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(SynthError::InvalidConfig(format!(
                "lambda {} outside [0,1]",
                self.lambda
            )));
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(SynthError::InvalidConfig("sigma must be >= 0".into()));
        }
        if self.delta.is_nan() || self.delta <= 0.0 {
            return Err(SynthError::InvalidConfig("delta must be > 0".into()));
        }
        let (bmin, bmax) = self.blobs_per_image;
        if bmin > bmax {
            return Err(SynthError::InvalidConfig("blobsPerImage min > max".into()));
        }
        let (smin, smax) = self.blob_size;
        if smin == 0 || smin > smax {
            return Err(SynthError::InvalidConfig("blobSize range invalid".into()));
        }
        if smax > self.grid_h || smax > self.grid_w {
            return Err(SynthError::InvalidConfig("blobSize exceeds grid".into()));
        }
        if self.images_mixed == 0 || self.images_reference == 0 || self.images_test == 0 {
            return Err(SynthError::InvalidConfig(
                "every corpus needs >= 1 image".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentRole {
    Background,
    Target,
    Anomaly,
}

impl ComponentRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ComponentRole::Background => "background",
            ComponentRole::Target => "target",
            ComponentRole::Anomaly => "anomaly",
        }
    }

    /// The tri-class label this role paints.
    pub fn class(&self) -> u8 {
        match self {
            ComponentRole::Background => 0,
            ComponentRole::Target => 1,
            ComponentRole::Anomaly => 2,
        }
    }
}

/// Ground truth for one generated scene.
#[derive(Debug, Clone)]
pub struct SceneTruth {
    pub tri_class_gt: LabelRaster,
    pub instance_gt: LabelRaster,
    /// Per-patch planted component id, row-major.
    pub patch_component: Vec<u32>,
}

/// Component means on a shell of radius [delta, 2*delta], rejection-sampled
/// until every pairwise distance is at least delta.
pub fn generate_component_means(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f32>>> {
    cfg.validate()?;
    let n = cfg.n_components();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n);
    for comp in 0..n {
        let mut placed = false;
        for _attempt in 0..MEAN_PLACEMENT_RETRIES {
            let mut dir: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let radius = cfg.delta * (1.0 + rng.random::<f64>());
            for v in &mut dir {
                *v *= radius / norm;
            }
            let ok = means.iter().all(|m| {
                let d2: f64 = m
                    .iter()
                    .zip(dir.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2.sqrt() >= cfg.delta
            });
            if ok {
                means.push(dir);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::PlacementFailure(format!(
                "could not place component {comp} at pairwise distance >= {}",
                cfg.delta
            )));
        }
    }
    Ok(means
        .into_iter()
        .map(|m| m.into_iter().map(|v| v as f32).collect())
        .collect())
}

struct Blob {
    row: usize,
    col: usize,
    height: usize,
    width: usize,
    component: usize,
}

/// Generates one scene. `allow_anomalies` gates the per-blob lambda draw;
/// reference corpora pass false and therefore never contain anomaly patches.
pub fn generate_scene(
    cfg: &SynthConfig,
    means: &[Vec<f32>],
    rng: &mut ChaCha8Rng,
    allow_anomalies: bool,
) -> Result<(FeatureGrid, SceneTruth)> {
    cfg.validate()?;
    if means.len() != cfg.n_components() {
        return Err(SynthError::InvalidConfig(format!(
            "expected {} component means, got {}",
            cfg.n_components(),
            means.len()
        )));
    }
    let (gh, gw) = (cfg.grid_h, cfg.grid_w);
    let cells = gh * gw;
    let blob_count = rng.random_range(cfg.blobs_per_image.0..=cfg.blobs_per_image.1);

    let mut occupied = vec![false; cells];
    let mut blobs: Vec<Blob> = Vec::with_capacity(blob_count);
    for b in 0..blob_count {
        let height = rng.random_range(cfg.blob_size.0..=cfg.blob_size.1);
        let width = rng.random_range(cfg.blob_size.0..=cfg.blob_size.1);
        let mut placed = false;
        for _attempt in 0..BLOB_PLACEMENT_RETRIES {
            let row = rng.random_range(0..=gh - height);
            let col = rng.random_range(0..=gw - width);
            let overlaps =
                (row..row + height).any(|r| (col..col + width).any(|c| occupied[r * gw + c]));
            if overlaps {
                continue;
            }
            for r in row..row + height {
                for c in col..col + width {
                    occupied[r * gw + c] = true;
                }
            }
            // class decision and component pick happen after placement so the
            // stream order is fixed per blob
            let u: f64 = rng.random();
            let component = if allow_anomalies && u < cfg.lambda {
                cfg.n_background + cfg.n_target + rng.random_range(0..cfg.n_anomaly)
            } else {
                cfg.n_background + rng.random_range(0..cfg.n_target)
            };
            blobs.push(Blob {
                row,
                col,
                height,
                width,
                component,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(SynthError::PlacementFailure(format!(
                "could not place blob {b} ({height}x{width}) without overlap"
            )));
        }
    }

    // per-patch component map: blobs first, then background picks in
    // row-major order for the remaining cells
    let mut patch_component = vec![u32::MAX; cells];
    let mut patch_instance = vec![0u16; cells];
    for (idx, blob) in blobs.iter().enumerate() {
        for r in blob.row..blob.row + blob.height {
            for c in blob.col..blob.col + blob.width {
                patch_component[r * gw + c] = blob.component as u32;
                patch_instance[r * gw + c] = (idx + 1) as u16;
            }
        }
    }
    for slot in patch_component.iter_mut() {
        if *slot == u32::MAX {
            *slot = rng.random_range(0..cfg.n_background) as u32;
        }
    }

    // per-patch noise, row-major
    let mut data = Vec::with_capacity(cells * cfg.dim);
    for cell in 0..cells {
        let mean = &means[patch_component[cell] as usize];
        for &m in mean.iter() {
            let noise: f64 = rng.sample(StandardNormal);
            data.push((m as f64 + cfg.sigma * noise) as f32);
        }
    }
    let grid = FeatureGrid::new(gh, gw, cfg.dim, data)?;

    // pixel ground truth through the same floor map as upsampling
    let (h, w) = (cfg.image_h, cfg.image_w);
    let mut tri = Vec::with_capacity(h * w);
    let mut inst = Vec::with_capacity(h * w);
    for y in 0..h {
        let row = y * gh / h;
        for x in 0..w {
            let cell = row * gw + x * gw / w;
            tri.push(cfg.component_role(patch_component[cell] as usize).class() as u16);
            inst.push(patch_instance[cell]);
        }
    }
    let truth = SceneTruth {
        tri_class_gt: LabelRaster::new(h, w, tri)?,
        instance_gt: LabelRaster::new(h, w, inst)?,
        patch_component,
    };
    Ok((grid, truth))
}

/// Filesystem layout produced by [`generate_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub mixed_manifest: PathBuf,
    pub reference_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub truth_csv: PathBuf,
}

/// Writes the three corpora (features, instance masks, ground truth,
/// manifests) plus a truth.csv of planted components. (cfg, seed) fully
/// determines every emitted byte.
pub fn generate_corpus(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<CorpusPaths> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(IoError::Io)?;

    let mut means_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    means_rng.set_stream(0);
    let means = generate_component_means(cfg, &mut means_rng)?;

    let corpora: [(&str, usize, bool); 3] = [
        ("mixed", cfg.images_mixed, true),
        ("reference", cfg.images_reference, false),
        ("test", cfg.images_test, true),
    ];

    let mut global_index = 0u64;
    let mut manifest_paths = Vec::with_capacity(3);
    for (name, count, allow_anomalies) in corpora {
        let sub = out_dir.join(name);
        std::fs::create_dir_all(&sub).map_err(IoError::Io)?;
        let mut manifest = format!("role={name}\n");
        for i in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1 + global_index);
            global_index += 1;
            let (grid, truth) = generate_scene(cfg, &means, &mut rng, allow_anomalies)?;

            let stem = format!("img_{i:05}");
            tensor_io::write_feature_grid(&grid, sub.join(format!("{stem}.pfv")))?;
            tensor_io::write_label_raster(
                &truth.instance_gt,
                sub.join(format!("{stem}_inst.pgm")),
            )?;
            tensor_io::write_label_raster(&truth.tri_class_gt, sub.join(format!("{stem}_gt.pgm")))?;
            writeln!(
                manifest,
                "{name}/{stem}.pfv\t{}\t{}\t{name}/{stem}_inst.pgm\t{name}/{stem}_gt.pgm",
                cfg.image_h, cfg.image_w
            )
            .expect("writing to string cannot fail");
        }
        let manifest_path = out_dir.join(format!("{name}.tsv"));
        tensor_io::atomic_write(&manifest_path, manifest.as_bytes())?;
        manifest_paths.push(manifest_path);
    }

    let mut truth_csv = String::from("componentId,role,meanNorm\n");
    for (comp, mean) in means.iter().enumerate() {
        let norm: f64 = mean
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        writeln!(
            truth_csv,
            "{comp},{},{norm:.6}",
            cfg.component_role(comp).as_str()
        )
        .expect("writing to string cannot fail");
    }
    let truth_path = out_dir.join("truth.csv");
    tensor_io::atomic_write(&truth_path, truth_csv.as_bytes())?;

    let mut it = manifest_paths.into_iter();
    Ok(CorpusPaths {
        mixed_manifest: it.next().unwrap(),
        reference_manifest: it.next().unwrap(),
        test_manifest: it.next().unwrap(),
        truth_csv: truth_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            dim: 8,
            grid_h: 8,
            grid_w: 8,
            image_h: 24,
            image_w: 24,
            n_background: 1,
            n_target: 1,
            n_anomaly: 1,
            lambda: 0.5,
            sigma: 0.5,
            delta: 10.0 * 0.5 * (8f64).sqrt(),
            blobs_per_image: (1, 3),
            blob_size: (1, 3),
            images_mixed: 2,
            images_reference: 2,
            images_test: 1,
            seed,
        }
    }

    #[test]
    fn component_means_respect_delta() {
        let mut cfg = small_cfg(1);
        cfg.n_background = 2;
        cfg.n_target = 2;
        cfg.n_anomaly = 2;
        cfg.delta = 10.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let means = generate_component_means(&cfg, &mut rng).unwrap();
        assert_eq!(means.len(), 6);
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d2: f64 = means[i]
                    .iter()
                    .zip(means[j].iter())
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum();
                assert!(d2.sqrt() >= 10.0, "components {i},{j} too close");
            }
        }
    }

    #[test]
    fn zero_delta_rejected() {
        let mut cfg = small_cfg(1);
        cfg.delta = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            generate_component_means(&cfg, &mut rng),
            Err(SynthError::InvalidConfig(_))
        ));
    }

    #[test]
    fn lambda_zero_means_no_anomalies() {
        let mut cfg = small_cfg(3);
        cfg.lambda = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let means = generate_component_means(&cfg, &mut rng).unwrap();
        for stream in 0..10 {
            let mut img_rng = ChaCha8Rng::seed_from_u64(3);
            img_rng.set_stream(stream);
            let (_, truth) = generate_scene(&cfg, &means, &mut img_rng, true).unwrap();
            assert!(truth.tri_class_gt.values().iter().all(|&v| v != 2));
        }
    }

    #[test]
    fn sigma_zero_gives_exact_means() {
        let mut cfg = small_cfg(4);
        cfg.sigma = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let means = generate_component_means(&cfg, &mut rng).unwrap();
        let mut img_rng = ChaCha8Rng::seed_from_u64(4);
        img_rng.set_stream(7);
        let (grid, truth) = generate_scene(&cfg, &means, &mut img_rng, true).unwrap();
        for cell in 0..grid.cells() {
            let comp = truth.patch_component[cell] as usize;
            assert_eq!(grid.patch(cell), means[comp].as_slice());
        }
    }

    #[test]
    fn scene_regeneration_is_identical() {
        let cfg = small_cfg(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let means = generate_component_means(&cfg, &mut rng).unwrap();
        let gen = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            r.set_stream(stream);
            generate_scene(&cfg, &means, &mut r, true).unwrap()
        };
        let (g1, t1) = gen(2);
        let (g2, t2) = gen(2);
        assert_eq!(g1, g2);
        assert_eq!(t1.tri_class_gt, t2.tri_class_gt);
        assert_eq!(t1.instance_gt, t2.instance_gt);
        assert_eq!(t1.patch_component, t2.patch_component);
    }

    #[test]
    fn ground_truth_is_patch_aligned() {
        let cfg = small_cfg(6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let means = generate_component_means(&cfg, &mut rng).unwrap();
        let mut img_rng = ChaCha8Rng::seed_from_u64(6);
        img_rng.set_stream(0);
        let (_, truth) = generate_scene(&cfg, &means, &mut img_rng, true).unwrap();
        for y in 0..cfg.image_h {
            for x in 0..cfg.image_w {
                let cell =
                    (y * cfg.grid_h / cfg.image_h) * cfg.grid_w + x * cfg.grid_w / cfg.image_w;
                let role = cfg.component_role(truth.patch_component[cell] as usize);
                assert_eq!(truth.tri_class_gt.get(y, x), role.class() as u16);
            }
        }
    }

    #[test]
    fn impossible_packing_fails_placement() {
        let mut cfg = small_cfg(7);
        cfg.blob_size = (8, 8);
        cfg.blobs_per_image = (2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let means = generate_component_means(&cfg, &mut rng).unwrap();
        let mut img_rng = ChaCha8Rng::seed_from_u64(7);
        img_rng.set_stream(0);
        assert!(matches!(
            generate_scene(&cfg, &means, &mut img_rng, true),
            Err(SynthError::PlacementFailure(_))
        ));
    }

    #[test]
    fn corpus_roundtrips_through_manifests() {
        let dir = tempfile::TempDir::new().unwrap();
        let cfg = small_cfg(8);
        let paths = generate_corpus(&cfg, dir.path()).unwrap();
        let mixed = tensor_io::read_manifest(&paths.mixed_manifest).unwrap();
        assert_eq!(mixed.records.len(), 2);
        assert_eq!(mixed.role, tensor_io::ManifestRole::Mixed);
        let reference = tensor_io::read_manifest(&paths.reference_manifest).unwrap();
        // reference corpora never contain anomaly pixels
        for record in &reference.records {
            let gt = tensor_io::read_label_raster(record.gt_mask_path.as_ref().unwrap()).unwrap();
            assert!(gt.values().iter().all(|&v| v != 2));
        }
        let test = tensor_io::read_manifest(&paths.test_manifest).unwrap();
        assert_eq!(test.records.len(), 1);
    }

    #[test]
    fn corpus_generation_is_byte_deterministic() {
        let dir_a = tempfile::TempDir::new().unwrap();
        let dir_b = tempfile::TempDir::new().unwrap();
        let cfg = small_cfg(9);
        generate_corpus(&cfg, dir_a.path()).unwrap();
        generate_corpus(&cfg, dir_b.path()).unwrap();
        for sub in ["mixed", "reference", "test"] {
            let mut names: Vec<_> = std::fs::read_dir(dir_a.path().join(sub))
                .unwrap()
                .map(|e| e.unwrap().file_name())
                .collect();
            names.sort();
            assert!(!names.is_empty());
            for name in names {
                let a = std::fs::read(dir_a.path().join(sub).join(&name)).unwrap();
                let b = std::fs::read(dir_b.path().join(sub).join(&name)).unwrap();
                assert_eq!(a, b, "{sub}/{name:?} differs between runs");
            }
        }
        for f in ["mixed.tsv", "reference.tsv", "test.tsv", "truth.csv"] {
            assert_eq!(
                std::fs::read(dir_a.path().join(f)).unwrap(),
                std::fs::read(dir_b.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn anomaly_patch_share_tracks_lambda() {
        let mut cfg = small_cfg(10);
        cfg.lambda = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let means = generate_component_means(&cfg, &mut rng).unwrap();

        let mut blob_sizes: Vec<(usize, bool)> = Vec::new();
        for stream in 0..200 {
            let mut img_rng = ChaCha8Rng::seed_from_u64(10);
            img_rng.set_stream(100 + stream);
            let (_, truth) = generate_scene(&cfg, &means, &mut img_rng, true).unwrap();
            // recover per-blob pixel size and class from the rasters
            let mut sizes = std::collections::HashMap::new();
            for (i, &inst) in truth.instance_gt.values().iter().enumerate() {
                if inst > 0 {
                    let anom = truth.tri_class_gt.values()[i] == 2;
                    sizes.entry(inst).or_insert((0usize, anom)).0 += 1;
                }
            }
            blob_sizes.extend(sizes.values().copied());
        }
        let total: f64 = blob_sizes.iter().map(|(s, _)| *s as f64).sum();
        let anom: f64 = blob_sizes
            .iter()
            .filter(|(_, a)| *a)
            .map(|(s, _)| *s as f64)
            .sum();
        let p_hat = anom / total;
        let sum_sq: f64 = blob_sizes.iter().map(|(s, _)| (*s as f64).powi(2)).sum();
        let se = (cfg.lambda * (1.0 - cfg.lambda) * sum_sq).sqrt() / total;
        assert!(
            (p_hat - cfg.lambda).abs() <= 3.0 * se,
            "anomaly share {p_hat:.4} not within 3 SE ({se:.4}) of lambda {}",
            cfg.lambda
        );
    }
}
