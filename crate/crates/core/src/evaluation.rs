//! Pixel-level IoU evaluation, multi-seed aggregation, and K x seed sweeps.
//!
//! Confusion counts accumulate dataset-wide (micro IoU): per pixel, a match
//! increments the ground-truth class's TP, a mismatch increments the
//! predicted class's FP and the ground-truth class's FN. Per-class IoU is
//! 100*TP/(TP+FP+FN); classes with an empty union are undefined and excluded
//! from mIoU.

use std::time::Instant;

use thiserror::Error;

use crate::clustering::{self, ClusterError, MiniBatchConfig};
use crate::distribution::{self, DistError, PastaModel};
use crate::segmentation::{self, InstanceMaskSet, SegError, TriClassMask};
use crate::tensor_io::{self, DatasetManifest, FeatureGrid, IoError, LabelRaster};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("all classes undefined: no pixels accumulated")]
    AllClassesUndefined,
    #[error("empty input")]
    EmptyInput,
    #[error("record {0} lacks a ground-truth mask")]
    MissingGroundTruth(String),
    #[error("record {0} lacks an instance mask")]
    MissingInstanceMasks(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

impl EvalError {
    pub fn is_io(&self) -> bool {
        match self {
            EvalError::Io(e) => e.is_io(),
            EvalError::Dist(e) => e.is_io(),
            EvalError::Seg(SegError::Io(e)) => e.is_io(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const CLASS_COUNT: usize = 3;

/// Per-class TP/FP/FN pixel counts, accumulated dataset-wide.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_positive: [u64; CLASS_COUNT],
    pub false_positive: [u64; CLASS_COUNT],
    pub false_negative: [u64; CLASS_COUNT],
}

impl ConfusionCounts {
    pub fn merge(&mut self, other: &ConfusionCounts) {
        for c in 0..CLASS_COUNT {
            self.true_positive[c] += other.true_positive[c];
            self.false_positive[c] += other.false_positive[c];
            self.false_negative[c] += other.false_negative[c];
        }
    }
}

/// Adds one prediction/ground-truth pair into the running counts.
pub fn accumulate_confusion(
    pred: &TriClassMask,
    gt: &TriClassMask,
    counts: &mut ConfusionCounts,
) -> Result<()> {
    if pred.h() != gt.h() || pred.w() != gt.w() {
        return Err(EvalError::DimMismatch(format!(
            "pred {}x{} != gt {}x{}",
            pred.h(),
            pred.w(),
            gt.h(),
            gt.w()
        )));
    }
    for (&p, &g) in pred.pixels().iter().zip(gt.pixels().iter()) {
        if p == g {
            counts.true_positive[g as usize] += 1;
        } else {
            counts.false_positive[p as usize] += 1;
            counts.false_negative[g as usize] += 1;
        }
    }
    Ok(())
}

/// Per-class IoU percentages; `None` when a class never occurs in either
/// prediction or ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    pub iou_per_class: [Option<f64>; CLASS_COUNT],
    pub miou: f64,
}

pub fn iou_report(counts: &ConfusionCounts) -> Result<IoUReport> {
    let mut iou_per_class = [None; CLASS_COUNT];
    let mut sum = 0.0;
    let mut defined = 0usize;
    for (c, slot) in iou_per_class.iter_mut().enumerate() {
        let denom = counts.true_positive[c] + counts.false_positive[c] + counts.false_negative[c];
        if denom > 0 {
            let iou = 100.0 * counts.true_positive[c] as f64 / denom as f64;
            *slot = Some(iou);
            sum += iou;
            defined += 1;
        }
    }
    if defined == 0 {
        return Err(EvalError::AllClassesUndefined);
    }
    Ok(IoUReport {
        iou_per_class,
        miou: sum / defined as f64,
    })
}

/// Mean and sample standard deviation over per-seed values.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedAggregate {
    pub mean: f64,
    pub std_dev: f64,
    pub values: Vec<f64>,
}

pub fn aggregate_seeds(values: &[f64]) -> Result<SeedAggregate> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std_dev = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(SeedAggregate {
        mean,
        std_dev,
        values: values.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    /// Patch-grid anomaly inference, scored on the anomaly class only
    /// against ground truth with classes {0,1} merged.
    Patch,
    /// Mask-feature fusion producing full tri-class masks.
    Fused,
}

impl InferMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InferMode::Patch => "patch",
            InferMode::Fused => "fused",
        }
    }
}

/// Merges target into background, leaving {0, 2}: the ground-truth view the
/// patch path is scored against.
pub fn merge_nominal_classes(mask: &TriClassMask) -> TriClassMask {
    let pixels = mask
        .pixels()
        .iter()
        .map(|&p| if p == 2 { 2 } else { 0 })
        .collect();
    TriClassMask::new(mask.h(), mask.w(), pixels).expect("merge preserves dims")
}

fn load_gt(record: &tensor_io::ImageRecord) -> Result<TriClassMask> {
    let path = record
        .gt_mask_path
        .as_ref()
        .ok_or_else(|| EvalError::MissingGroundTruth(record.feature_path.display().to_string()))?;
    let raster = tensor_io::read_label_raster(path)?;
    Ok(TriClassMask::from_raster(&raster)?)
}

fn load_instances(record: &tensor_io::ImageRecord) -> Result<InstanceMaskSet> {
    let path = record.instance_mask_path.as_ref().ok_or_else(|| {
        EvalError::MissingInstanceMasks(record.feature_path.display().to_string())
    })?;
    let raster: LabelRaster = tensor_io::read_label_raster(path)?;
    Ok(InstanceMaskSet::from_raster(&raster))
}

/// One scored pass over a test manifest.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub counts: ConfusionCounts,
    pub report: IoUReport,
    pub infer_ms_per_image: f64,
    pub images: usize,
}

/// Scores the patch path over a test manifest (Evaluation A): inference is
/// assign + membership + nearest-neighbor upsampling; ground truth is merged
/// to {0,2}. Only the anomaly-class IoU is meaningful here.
pub fn eval_patch(model: &PastaModel, test: &DatasetManifest) -> Result<EvalOutcome> {
    let mut counts = ConfusionCounts::default();
    let mut infer_seconds = 0.0f64;
    for record in &test.records {
        let grid = tensor_io::read_feature_grid(&record.feature_path)?;
        let gt = load_gt(record)?;
        let t0 = Instant::now();
        let map = segmentation::infer_patch_anomaly(model, &grid)?;
        let pred = segmentation::upsample_patch_anomaly(&map, record.image_h, record.image_w)?;
        infer_seconds += t0.elapsed().as_secs_f64();
        accumulate_confusion(&pred, &merge_nominal_classes(&gt), &mut counts)?;
    }
    let report = iou_report(&counts)?;
    Ok(EvalOutcome {
        counts,
        report,
        infer_ms_per_image: infer_seconds * 1000.0 / test.records.len() as f64,
        images: test.records.len(),
    })
}

/// Scores the fusion path over a test manifest (Evaluation B). Images whose
/// instance raster holds no masks predict all-background and still count.
pub fn eval_fused(model: &PastaModel, test: &DatasetManifest) -> Result<EvalOutcome> {
    let mut counts = ConfusionCounts::default();
    let mut infer_seconds = 0.0f64;
    for record in &test.records {
        let grid = tensor_io::read_feature_grid(&record.feature_path)?;
        let gt = load_gt(record)?;
        let masks = load_instances(record)?;
        let t0 = Instant::now();
        let pred = segmentation::fuse_masks(model, &grid, &masks, record.image_h, record.image_w)?;
        infer_seconds += t0.elapsed().as_secs_f64();
        accumulate_confusion(&pred, &gt, &mut counts)?;
    }
    let report = iou_report(&counts)?;
    Ok(EvalOutcome {
        counts,
        report,
        infer_ms_per_image: infer_seconds * 1000.0 / test.records.len() as f64,
        images: test.records.len(),
    })
}

/// Everything a sweep needs besides K and seed.
#[derive(Debug, Clone)]
pub struct SweepParams {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub tol: f64,
    pub init_sample_size: usize,
    pub r_threshold: f64,
    pub gamma: f64,
}

impl Default for SweepParams {
    fn default() -> Self {
        let mb = MiniBatchConfig::default();
        Self {
            batch_size: mb.batch_size,
            max_epochs: mb.max_epochs,
            tol: mb.tol,
            init_sample_size: mb.init_sample_size,
            r_threshold: distribution::DEFAULT_R_THRESHOLD,
            gamma: distribution::DEFAULT_GAMMA,
        }
    }
}

/// One fitted and scored (K, seed) sweep cell.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub k: usize,
    pub seed: u64,
    pub iou_per_class: [Option<f64>; CLASS_COUNT],
    pub miou: f64,
    pub model_setup_seconds: f64,
    pub infer_ms_per_image: f64,
}

/// Aggregate over seeds for one (K, class) pair.
#[derive(Debug, Clone)]
pub struct SweepAggregate {
    pub k: usize,
    pub class: usize,
    pub mean: f64,
    pub std_dev: f64,
}

/// The shared inputs of a sweep, preloaded once.
pub struct SweepInputs {
    pub mixed_features: tensor_io::FeatureSet,
    pub mixed_grids: Vec<FeatureGrid>,
    pub ref_grids: Vec<FeatureGrid>,
}

impl SweepInputs {
    pub fn load(mixed: &DatasetManifest, reference: &DatasetManifest) -> Result<Self> {
        let mixed_features = tensor_io::load_feature_set(mixed)?;
        let mixed_grids = mixed
            .records
            .iter()
            .map(|r| tensor_io::read_feature_grid(&r.feature_path))
            .collect::<std::result::Result<_, _>>()?;
        let ref_grids = reference
            .records
            .iter()
            .map(|r| tensor_io::read_feature_grid(&r.feature_path))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            mixed_features,
            mixed_grids,
            ref_grids,
        })
    }
}

/// Fits and scores one sweep cell: fit on the mixed corpus with this seed,
/// freeze, estimate both distributions, infer over the test corpus. Cells
/// are independent and may run in parallel.
pub fn run_sweep_cell(
    inputs: &SweepInputs,
    test: &DatasetManifest,
    k: usize,
    seed: u64,
    mode: InferMode,
    params: &SweepParams,
) -> Result<SweepCell> {
    let t0 = Instant::now();
    let cfg = MiniBatchConfig {
        batch_size: params.batch_size,
        max_epochs: params.max_epochs,
        tol: params.tol,
        init_sample_size: params.init_sample_size,
        seed,
    };
    let codebook = clustering::fit_codebook(&inputs.mixed_features, k, &cfg)?;
    let model = distribution::build_model_grids(
        codebook,
        &inputs.mixed_grids,
        &inputs.ref_grids,
        params.r_threshold,
        params.gamma,
    )?;
    let model_setup_seconds = t0.elapsed().as_secs_f64();
    let outcome = match mode {
        InferMode::Patch => eval_patch(&model, test)?,
        InferMode::Fused => eval_fused(&model, test)?,
    };
    Ok(SweepCell {
        k,
        seed,
        iou_per_class: outcome.report.iou_per_class,
        miou: outcome.report.miou,
        model_setup_seconds,
        infer_ms_per_image: outcome.infer_ms_per_image,
    })
}

/// Fits and scores every (K, seed) cell in order.
pub fn run_sweep(
    mixed: &DatasetManifest,
    reference: &DatasetManifest,
    test: &DatasetManifest,
    ks: &[usize],
    seeds: &[u64],
    mode: InferMode,
    params: &SweepParams,
) -> Result<Vec<SweepCell>> {
    if ks.is_empty() || seeds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let inputs = SweepInputs::load(mixed, reference)?;
    let mut cells = Vec::with_capacity(ks.len() * seeds.len());
    for &k in ks {
        for &seed in seeds {
            cells.push(run_sweep_cell(&inputs, test, k, seed, mode, params)?);
        }
    }
    Ok(cells)
}

/// Per-(K, class) mean and sample std over seeds, for every class defined in
/// at least one seed (undefined seeds are skipped).
pub fn aggregate_sweep(cells: &[SweepCell]) -> Vec<SweepAggregate> {
    let mut ks: Vec<usize> = cells.iter().map(|c| c.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut out = Vec::new();
    for k in ks {
        for class in 0..CLASS_COUNT {
            let values: Vec<f64> = cells
                .iter()
                .filter(|c| c.k == k)
                .filter_map(|c| c.iou_per_class[class])
                .collect();
            if let Ok(agg) = aggregate_seeds(&values) {
                out.push(SweepAggregate {
                    k,
                    class,
                    mean: agg.mean,
                    std_dev: agg.std_dev,
                });
            }
        }
    }
    out
}

/// Fixed-header sweep CSV: per-seed rows then aggregate rows.
pub fn sweep_csv(cells: &[SweepCell], aggregates: &[SweepAggregate]) -> String {
    let mut out = String::from("rowType,k,seed,class,iou,mean,std\n");
    for cell in cells {
        for class in 0..CLASS_COUNT {
            if let Some(iou) = cell.iou_per_class[class] {
                out.push_str(&format!(
                    "seed,{},{},{},{:.6},,\n",
                    cell.k, cell.seed, class, iou
                ));
            }
        }
    }
    for agg in aggregates {
        out.push_str(&format!(
            "aggregate,{},,{},,{:.6},{:.6}\n",
            agg.k, agg.class, agg.mean, agg.std_dev
        ));
    }
    out
}

/// Fixed-header timing CSV for sweep cells.
pub fn timing_csv(cells: &[SweepCell], mode: InferMode) -> String {
    let mut out = String::from("k,seed,mode,modelSetupSeconds,inferMsPerImage\n");
    for cell in cells {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            cell.k,
            cell.seed,
            mode.as_str(),
            cell.model_setup_seconds,
            cell.infer_ms_per_image
        ));
    }
    out
}
