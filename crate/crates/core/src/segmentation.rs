//! Patch-level anomaly inference and mask-feature fusion.
//!
//! The patch path classifies each grid cell as anomaly/nominal by cluster
//! membership and upsamples the binary map to image resolution with
//! nearest-neighbor interpolation (pixel (y,x) reads cell
//! (floor(y*gridH/H), floor(x*gridW/W))). The fusion path overlays instance
//! masks on the upsampled cluster-id raster, labels a whole mask anomalous
//! when its anomaly-cluster area fraction strictly exceeds gamma, and paints
//! a tri-class mask; anomaly-labeled masks win overlaps.

use thiserror::Error;

use crate::clustering::{self, ClusterError};
use crate::distribution::{AnomalyClusterSet, PastaModel};
use crate::tensor_io::{FeatureGrid, IoError, LabelRaster};

#[derive(Debug, Error)]
pub enum SegError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("bad dims: {0}")]
    BadDims(String),
    #[error("empty mask")]
    EmptyMask,
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl SegError {
    pub fn is_io(&self) -> bool {
        matches!(self, SegError::Io(e) if e.is_io())
    }
}

pub type Result<T> = std::result::Result<T, SegError>;

/// Per-patch cluster ids at grid resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLabelMap {
    grid_h: usize,
    grid_w: usize,
    cells: Vec<u32>,
}

impl PatchLabelMap {
    pub fn new(grid_h: usize, grid_w: usize, cells: Vec<u32>) -> Self {
        assert_eq!(cells.len(), grid_h * grid_w);
        Self {
            grid_h,
            grid_w,
            cells,
        }
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }
}

/// Per-patch anomaly flags: 0 nominal, 1 anomaly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryAnomalyPatchMap {
    grid_h: usize,
    grid_w: usize,
    cells: Vec<u8>,
}

impl BinaryAnomalyPatchMap {
    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }
}

/// H x W pixels over {0 background, 1 target, 2 anomaly}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriClassMask {
    h: usize,
    w: usize,
    pixels: Vec<u8>,
}

impl TriClassMask {
    pub fn new(h: usize, w: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != h * w {
            return Err(SegError::BadDims(format!(
                "pixel count {} != {h}x{w}",
                pixels.len()
            )));
        }
        if let Some(&bad) = pixels.iter().find(|&&p| p > 2) {
            return Err(SegError::DimMismatch(format!("tri-class value {bad} > 2")));
        }
        Ok(Self { h, w, pixels })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn to_raster(&self) -> LabelRaster {
        LabelRaster::new(
            self.h,
            self.w,
            self.pixels.iter().map(|&p| p as u16).collect(),
        )
        .expect("tri-class mask dims are valid")
    }

    pub fn from_raster(raster: &LabelRaster) -> Result<Self> {
        raster.validate_tri_class()?;
        Ok(Self {
            h: raster.height(),
            w: raster.width(),
            pixels: raster.values().iter().map(|&v| v as u8).collect(),
        })
    }
}

/// Upsampled cluster ids at image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterRaster {
    h: usize,
    w: usize,
    cells: Vec<u32>,
}

impl ClusterRaster {
    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }
}

/// One instance mask: the flat pixel indices (y*W + x) of its foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    pub id: u32,
    pub pixels: Vec<u32>,
}

/// A set of instance masks sharing one image geometry. Masks from real
/// segmenters may overlap; empty masks are dropped with a warning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMaskSet {
    h: usize,
    w: usize,
    masks: Vec<InstanceMask>,
}

impl InstanceMaskSet {
    pub fn new(h: usize, w: usize, masks: Vec<InstanceMask>) -> Self {
        let masks = masks
            .into_iter()
            .filter(|m| {
                if m.pixels.is_empty() {
                    log::warn!("dropping empty instance mask {}", m.id);
                    false
                } else {
                    true
                }
            })
            .collect();
        Self { h, w, masks }
    }

    /// Extracts masks from an instance-id raster (0 = background, 1..k =
    /// instances), in ascending id order.
    pub fn from_raster(raster: &LabelRaster) -> Self {
        let max_id = raster.values().iter().copied().max().unwrap_or(0) as usize;
        let mut pixels: Vec<Vec<u32>> = vec![Vec::new(); max_id + 1];
        for (i, &v) in raster.values().iter().enumerate() {
            if v > 0 {
                pixels[v as usize].push(i as u32);
            }
        }
        let masks = pixels
            .into_iter()
            .enumerate()
            .skip(1)
            .filter(|(_, px)| !px.is_empty())
            .map(|(id, px)| InstanceMask {
                id: id as u32,
                pixels: px,
            })
            .collect();
        Self {
            h: raster.height(),
            w: raster.width(),
            masks,
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn masks(&self) -> &[InstanceMask] {
        &self.masks
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Nearest-neighbor upsampling of a grid of cells to H x W. Requires
/// H >= gridH and W >= gridW.
pub fn upsample_nearest<T: Copy>(
    cells: &[T],
    grid_h: usize,
    grid_w: usize,
    h: usize,
    w: usize,
) -> Result<Vec<T>> {
    if cells.len() != grid_h * grid_w {
        return Err(SegError::BadDims(format!(
            "cell count {} != {grid_h}x{grid_w}",
            cells.len()
        )));
    }
    if h < grid_h || w < grid_w || grid_h == 0 || grid_w == 0 {
        return Err(SegError::BadDims(format!(
            "cannot upsample {grid_h}x{grid_w} to {h}x{w}"
        )));
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let row = y * grid_h / h;
        let base = row * grid_w;
        for x in 0..w {
            let col = x * grid_w / w;
            out.push(cells[base + col]);
        }
    }
    Ok(out)
}

/// Flags each patch whose cluster belongs to the model's anomaly set.
pub fn infer_patch_anomaly(
    model: &PastaModel,
    grid: &FeatureGrid,
) -> Result<BinaryAnomalyPatchMap> {
    let map = clustering::assign_grid(&model.codebook, grid)?;
    let cells = map
        .cells()
        .iter()
        .map(|&c| u8::from(model.anomaly_set.contains(c as usize)))
        .collect();
    Ok(BinaryAnomalyPatchMap {
        grid_h: map.grid_h(),
        grid_w: map.grid_w(),
        cells,
    })
}

/// Upsamples a binary patch map to an image-resolution raster with values
/// {0 nominal, 2 anomaly}, directly comparable against tri-class ground
/// truth with classes {0,1} merged.
pub fn upsample_patch_anomaly(
    map: &BinaryAnomalyPatchMap,
    h: usize,
    w: usize,
) -> Result<TriClassMask> {
    let cells = upsample_nearest(map.cells(), map.grid_h(), map.grid_w(), h, w)?;
    TriClassMask::new(h, w, cells.into_iter().map(|c| c * 2).collect())
}

/// Upsamples a cluster-id map to image resolution.
pub fn upsample_cluster_map(
    map: &crate::segmentation::PatchLabelMap,
    h: usize,
    w: usize,
) -> Result<ClusterRaster> {
    let cells = upsample_nearest(map.cells(), map.grid_h(), map.grid_w(), h, w)?;
    Ok(ClusterRaster { h, w, cells })
}

/// Fraction of a mask's foreground lying over anomaly clusters.
pub fn anomaly_fraction(
    mask: &InstanceMask,
    raster: &ClusterRaster,
    anomaly_set: &AnomalyClusterSet,
) -> Result<f64> {
    if mask.pixels.is_empty() {
        return Err(SegError::EmptyMask);
    }
    let size = raster.h * raster.w;
    let mut hits = 0usize;
    for &p in &mask.pixels {
        let p = p as usize;
        if p >= size {
            return Err(SegError::DimMismatch(format!(
                "mask pixel {p} outside raster {}x{}",
                raster.h, raster.w
            )));
        }
        if anomaly_set.contains(raster.cells[p] as usize) {
            hits += 1;
        }
    }
    Ok(hits as f64 / mask.pixels.len() as f64)
}

/// Outcome of fusing one mask: its area, anomaly fraction and final label.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskFusionReport {
    pub mask_id: u32,
    pub area_px: usize,
    pub anomaly_fraction: f64,
    /// 1 = target, 2 = anomaly.
    pub label: u8,
}

/// Mask-feature fusion: labels every instance mask by its anomaly fraction
/// (strictly greater than gamma flips it to anomaly) and paints the
/// tri-class output. Pixels outside every mask stay background; anomaly
/// labels win overlaps.
pub fn fuse_masks(
    model: &PastaModel,
    grid: &FeatureGrid,
    masks: &InstanceMaskSet,
    h: usize,
    w: usize,
) -> Result<TriClassMask> {
    fuse_masks_with_report(model, grid, masks, h, w).map(|(mask, _)| mask)
}

/// [`fuse_masks`] plus the per-mask fusion report.
pub fn fuse_masks_with_report(
    model: &PastaModel,
    grid: &FeatureGrid,
    masks: &InstanceMaskSet,
    h: usize,
    w: usize,
) -> Result<(TriClassMask, Vec<MaskFusionReport>)> {
    if masks.h != h || masks.w != w {
        return Err(SegError::DimMismatch(format!(
            "mask set {}x{} != output {h}x{w}",
            masks.h, masks.w
        )));
    }
    let cluster_map = clustering::assign_grid(&model.codebook, grid)?;
    let raster = upsample_cluster_map(&cluster_map, h, w)?;

    let mut reports = Vec::with_capacity(masks.masks.len());
    for mask in &masks.masks {
        let fraction = anomaly_fraction(mask, &raster, &model.anomaly_set)?;
        let label = if fraction > model.gamma { 2 } else { 1 };
        reports.push(MaskFusionReport {
            mask_id: mask.id,
            area_px: mask.pixels.len(),
            anomaly_fraction: fraction,
            label,
        });
    }

    let mut pixels = vec![0u8; h * w];
    for (mask, _) in masks
        .masks
        .iter()
        .zip(&reports)
        .filter(|(_, r)| r.label == 1)
    {
        for &p in &mask.pixels {
            pixels[p as usize] = 1;
        }
    }
    for (mask, _) in masks
        .masks
        .iter()
        .zip(&reports)
        .filter(|(_, r)| r.label == 2)
    {
        for &p in &mask.pixels {
            pixels[p as usize] = 2;
        }
    }
    Ok((TriClassMask::new(h, w, pixels)?, reports))
}
