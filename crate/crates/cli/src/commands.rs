//! Command implementations.
//!
//! Every command is deterministic given identical flags, inputs and seeds;
//! wall-clock measurements go to stdout (and the opt-in sweep timing CSV)
//! only, never into the default output files. Outputs are written atomically.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use pasta_core::baseline::{self, BaselineConfig, ObjectClass};
use pasta_core::clustering::{self, MiniBatchConfig};
use pasta_core::distribution::{self, PastaModel};
use pasta_core::evaluation::{
    self, accumulate_confusion, iou_report, merge_nominal_classes, ConfusionCounts, InferMode,
    SweepParams,
};
use pasta_core::segmentation::{self, InstanceMaskSet, TriClassMask};
use pasta_core::synth::{self, SynthConfig};
use pasta_core::tensor_io::{self, DatasetManifest, ImageRecord};

use crate::args;

/// Errors carrying their exit code: 1 for validation, 2 for I/O.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

macro_rules! impl_from_error {
    ($ty:ty) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                if e.is_io() {
                    CliError::Io(e.to_string())
                } else {
                    CliError::Validation(e.to_string())
                }
            }
        }
    };
}

impl_from_error!(tensor_io::IoError);
impl_from_error!(distribution::DistError);
impl_from_error!(segmentation::SegError);
impl_from_error!(baseline::BaselineError);
impl_from_error!(evaluation::EvalError);
impl_from_error!(synth::SynthError);

impl From<clustering::ClusterError> for CliError {
    fn from(e: clustering::ClusterError) -> Self {
        CliError::Validation(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    tensor_io::atomic_write(path, text.as_bytes())?;
    Ok(())
}

/// Predictions are named after the record's ground-truth mask so `eval` can
/// pair them (and `--pred <gt dir>` scores a perfect run).
fn prediction_filename(record: &ImageRecord) -> String {
    match &record.gt_mask_path {
        Some(p) => p
            .file_name()
            .expect("gt path has a name")
            .to_string_lossy()
            .into_owned(),
        None => {
            let stem = record
                .feature_path
                .file_stem()
                .expect("feature path has a name")
                .to_string_lossy();
            format!("{stem}_pred.pgm")
        }
    }
}

fn feature_stem(record: &ImageRecord) -> String {
    record
        .feature_path
        .file_stem()
        .expect("feature path has a name")
        .to_string_lossy()
        .into_owned()
}

pub fn synth(a: &args::SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        dim: a.dim,
        grid_h: a.grid_h,
        grid_w: a.grid_w,
        image_h: a.image_h,
        image_w: a.image_w,
        n_background: a.background_components,
        n_target: a.target_components,
        n_anomaly: a.anomaly_components,
        lambda: a.lambda,
        sigma: a.sigma,
        delta: a.delta.unwrap_or(10.0 * a.sigma * (a.dim as f64).sqrt()),
        blobs_per_image: (a.blobs_min, a.blobs_max),
        blob_size: (a.blob_min, a.blob_max),
        images_mixed: a.images_mixed,
        images_reference: a.images_reference,
        images_test: a.images_test,
        seed: a.seed,
    };
    let paths = synth::generate_corpus(&cfg, &a.out)?;
    println!("mixedManifest={}", paths.mixed_manifest.display());
    println!("referenceManifest={}", paths.reference_manifest.display());
    println!("testManifest={}", paths.test_manifest.display());
    println!("truthCsv={}", paths.truth_csv.display());
    Ok(())
}

pub fn fit(a: &args::FitArgs) -> Result<()> {
    let manifest = tensor_io::read_manifest(&a.mixed)?;
    let features = tensor_io::load_feature_set(&manifest)?;
    let cfg = MiniBatchConfig {
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
        tol: a.tol,
        init_sample_size: a.init_sample_size,
        seed: a.seed,
    };
    let t0 = Instant::now();
    let codebook = clustering::fit_codebook(&features, a.k, &cfg)?;
    let setup = t0.elapsed().as_secs_f64();
    tensor_io::save_codebook(&codebook, &a.out)?;
    println!(
        "k={} dim={} patches={}",
        codebook.k(),
        codebook.dim(),
        features.len()
    );
    println!("epochs={}", codebook.inertia_history().len());
    if let Some(last) = codebook.inertia_history().last() {
        println!("finalInertia={last:.6}");
    }
    println!("modelSetupSeconds={setup:.6}");
    Ok(())
}

pub fn define_anomalies(a: &args::DefineAnomaliesArgs) -> Result<()> {
    let codebook = tensor_io::load_codebook(&a.codebook)?;
    let mixed = tensor_io::read_manifest(&a.mixed)?;
    let reference = tensor_io::read_manifest(&a.reference)?;
    let t0 = Instant::now();
    let model = distribution::build_model(codebook, &mixed, &reference, a.r_threshold, a.gamma)?;
    let setup = t0.elapsed().as_secs_f64();
    tensor_io::save_model(&model, &a.out)?;
    let ids: Vec<String> = model
        .anomaly_set
        .anomaly_ids()
        .iter()
        .map(|id| id.to_string())
        .collect();
    println!("anomalyClusters={}", ids.join(","));
    println!("modelSetupSeconds={setup:.6}");
    Ok(())
}

struct InferOutput {
    filename: String,
    mask: TriClassMask,
    report_csv: Option<(String, String)>,
    infer_seconds: f64,
}

fn run_infer(
    model: &PastaModel,
    manifest: &DatasetManifest,
    fused: bool,
) -> Result<Vec<InferOutput>> {
    manifest
        .records
        .par_iter()
        .map(|record| -> Result<InferOutput> {
            let grid = tensor_io::read_feature_grid(&record.feature_path)?;
            if fused {
                let raster = tensor_io::read_label_raster(
                    record.instance_mask_path.as_ref().ok_or_else(|| {
                        CliError::Validation(format!(
                            "{}: fused inference needs an instance mask",
                            record.feature_path.display()
                        ))
                    })?,
                )?;
                let masks = InstanceMaskSet::from_raster(&raster);
                let t0 = Instant::now();
                let (mask, reports) = segmentation::fuse_masks_with_report(
                    model,
                    &grid,
                    &masks,
                    record.image_h,
                    record.image_w,
                )?;
                let infer_seconds = t0.elapsed().as_secs_f64();
                let mut csv = String::from("maskId,areaPx,anomalyFraction,label\n");
                for r in &reports {
                    let label = if r.label == 2 { "anomaly" } else { "target" };
                    writeln!(
                        csv,
                        "{},{},{:.6},{label}",
                        r.mask_id, r.area_px, r.anomaly_fraction
                    )
                    .expect("writing to string cannot fail");
                }
                Ok(InferOutput {
                    filename: prediction_filename(record),
                    mask,
                    report_csv: Some((format!("{}_fusion.csv", feature_stem(record)), csv)),
                    infer_seconds,
                })
            } else {
                let t0 = Instant::now();
                let map = segmentation::infer_patch_anomaly(model, &grid)?;
                let mask =
                    segmentation::upsample_patch_anomaly(&map, record.image_h, record.image_w)?;
                let infer_seconds = t0.elapsed().as_secs_f64();
                Ok(InferOutput {
                    filename: prediction_filename(record),
                    mask,
                    report_csv: None,
                    infer_seconds,
                })
            }
        })
        .collect()
}

pub fn infer(a: &args::InferArgs, fused: bool) -> Result<()> {
    let t_load = Instant::now();
    let model = tensor_io::load_model(&a.model)?;
    let model_load_seconds = t_load.elapsed().as_secs_f64();
    let manifest = tensor_io::read_manifest(&a.test)?;
    ensure_dir(&a.out_dir)?;
    let outputs = run_infer(&model, &manifest, fused)?;
    let mut infer_seconds = 0.0;
    for out in &outputs {
        tensor_io::write_label_raster(&out.mask.to_raster(), a.out_dir.join(&out.filename))?;
        if let Some((name, csv)) = &out.report_csv {
            write_text(&a.out_dir.join(name), csv)?;
        }
        infer_seconds += out.infer_seconds;
    }
    println!("mode={}", if fused { "fused" } else { "patch" });
    println!("images={}", outputs.len());
    println!("modelLoadSeconds={model_load_seconds:.6}");
    println!(
        "inferMsPerImage={:.6}",
        infer_seconds * 1000.0 / outputs.len().max(1) as f64
    );
    println!("totalInferSeconds={infer_seconds:.6}");
    Ok(())
}

/// Pools one embedding per instance mask across a manifest, in record order
/// then mask-id order.
fn pooled_embeddings(manifest: &DatasetManifest) -> Result<Vec<Vec<f32>>> {
    let per_record: Vec<Vec<Vec<f32>>> = manifest
        .records
        .par_iter()
        .map(|record| -> Result<Vec<Vec<f32>>> {
            let grid = tensor_io::read_feature_grid(&record.feature_path)?;
            let raster = tensor_io::read_label_raster(
                record.instance_mask_path.as_ref().ok_or_else(|| {
                    CliError::Validation(format!(
                        "{}: baseline needs instance masks",
                        record.feature_path.display()
                    ))
                })?,
            )?;
            let masks = InstanceMaskSet::from_raster(&raster);
            masks
                .masks()
                .iter()
                .map(|m| {
                    baseline::pool_object_embedding(&grid, m, record.image_h, record.image_w)
                        .map_err(CliError::from)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_record.into_iter().flatten().collect())
}

pub fn baseline_fit(a: &args::BaselineFitArgs) -> Result<()> {
    let manifest = tensor_io::read_manifest(&a.mixed)?;
    let embeddings = pooled_embeddings(&manifest)?;
    let cfg = BaselineConfig {
        k_sphere: a.k_sphere,
        k_vote: 1,
        bag_fraction: a.bag_fraction,
    };
    let t0 = Instant::now();
    let bag = baseline::build_bag(&embeddings, &cfg)?;
    let setup = t0.elapsed().as_secs_f64();
    tensor_io::save_bag(&bag, &a.out)?;
    println!(
        "objects={} bagSize={} kSphere={}",
        embeddings.len(),
        bag.len(),
        bag.k_sphere()
    );
    println!("modelSetupSeconds={setup:.6}");
    Ok(())
}

pub fn baseline_infer(a: &args::BaselineInferArgs) -> Result<()> {
    let bag = tensor_io::load_bag(&a.bag)?;
    let manifest = tensor_io::read_manifest(&a.test)?;
    ensure_dir(&a.out_dir)?;
    let cfg = BaselineConfig {
        k_sphere: bag.k_sphere(),
        k_vote: a.k_vote,
        bag_fraction: 1.0,
    };
    let outputs: Vec<(String, TriClassMask, f64)> = manifest
        .records
        .par_iter()
        .map(|record| -> Result<(String, TriClassMask, f64)> {
            let grid = tensor_io::read_feature_grid(&record.feature_path)?;
            let raster = tensor_io::read_label_raster(
                record.instance_mask_path.as_ref().ok_or_else(|| {
                    CliError::Validation(format!(
                        "{}: baseline needs instance masks",
                        record.feature_path.display()
                    ))
                })?,
            )?;
            let masks = InstanceMaskSet::from_raster(&raster);
            let t0 = Instant::now();
            let mask = baseline::baseline_segment(
                &grid,
                &masks,
                &bag,
                &cfg,
                record.image_h,
                record.image_w,
            )?;
            Ok((
                prediction_filename(record),
                mask,
                t0.elapsed().as_secs_f64(),
            ))
        })
        .collect::<Result<_>>()?;
    let mut infer_seconds = 0.0;
    for (name, mask, secs) in &outputs {
        tensor_io::write_label_raster(&mask.to_raster(), a.out_dir.join(name))?;
        infer_seconds += secs;
    }
    println!("mode=baseline");
    println!("images={}", outputs.len());
    println!(
        "inferMsPerImage={:.6}",
        infer_seconds * 1000.0 / outputs.len().max(1) as f64
    );
    Ok(())
}

pub fn baseline_sweep(a: &args::BaselineSweepArgs) -> Result<()> {
    if a.k_sphere.is_empty() || a.k_vote.is_empty() {
        return Err(CliError::Validation(
            "kSphere and kVote lists must be non-empty".into(),
        ));
    }
    let mixed = tensor_io::read_manifest(&a.mixed)?;
    let test = tensor_io::read_manifest(&a.test)?;
    let embeddings = pooled_embeddings(&mixed)?;

    // per test record: pooled object embeddings, their masks, and the gt
    struct TestImage {
        objects: Vec<(Vec<f32>, Vec<u32>)>,
        gt: TriClassMask,
        h: usize,
        w: usize,
    }
    let images: Vec<TestImage> = test
        .records
        .par_iter()
        .map(|record| -> Result<TestImage> {
            let grid = tensor_io::read_feature_grid(&record.feature_path)?;
            let inst = tensor_io::read_label_raster(
                record.instance_mask_path.as_ref().ok_or_else(|| {
                    CliError::Validation(format!(
                        "{}: baseline needs instance masks",
                        record.feature_path.display()
                    ))
                })?,
            )?;
            let gt_path = record.gt_mask_path.as_ref().ok_or_else(|| {
                CliError::Validation(format!(
                    "{}: baseline sweep needs ground truth",
                    record.feature_path.display()
                ))
            })?;
            let gt = TriClassMask::from_raster(&tensor_io::read_label_raster(gt_path)?)?;
            let masks = InstanceMaskSet::from_raster(&inst);
            let objects = masks
                .masks()
                .iter()
                .map(|m| {
                    baseline::pool_object_embedding(&grid, m, record.image_h, record.image_w)
                        .map(|e| (e, m.pixels.clone()))
                        .map_err(CliError::from)
                })
                .collect::<Result<_>>()?;
            Ok(TestImage {
                objects,
                gt,
                h: record.image_h,
                w: record.image_w,
            })
        })
        .collect::<Result<_>>()?;

    let mut csv = String::from("kSphere,kVote,class,iou\n");
    for &k_sphere in &a.k_sphere {
        let cfg = BaselineConfig {
            k_sphere,
            k_vote: 1,
            bag_fraction: a.bag_fraction,
        };
        let bag = baseline::build_bag(&embeddings, &cfg)?;
        for &k_vote in &a.k_vote {
            let mut counts = ConfusionCounts::default();
            for image in &images {
                let mut pixels = vec![0u8; image.h * image.w];
                let mut labels = Vec::with_capacity(image.objects.len());
                for (embedding, _) in &image.objects {
                    labels.push(baseline::classify_embedding(&bag, embedding, k_vote)?);
                }
                for ((_, px), label) in image.objects.iter().zip(&labels) {
                    if *label == ObjectClass::Target {
                        for &p in px {
                            pixels[p as usize] = 1;
                        }
                    }
                }
                for ((_, px), label) in image.objects.iter().zip(&labels) {
                    if *label == ObjectClass::Anomaly {
                        for &p in px {
                            pixels[p as usize] = 2;
                        }
                    }
                }
                let pred = TriClassMask::new(image.h, image.w, pixels)?;
                accumulate_confusion(&pred, &image.gt, &mut counts)?;
            }
            let report = iou_report(&counts)?;
            for (class, iou) in report.iou_per_class.iter().enumerate() {
                if let Some(iou) = iou {
                    writeln!(csv, "{k_sphere},{k_vote},{class},{iou:.6}")
                        .expect("writing to string cannot fail");
                }
            }
        }
    }
    write_text(&a.out, &csv)?;
    println!("cells={}", a.k_sphere.len() * a.k_vote.len());
    Ok(())
}

pub fn eval(a: &args::EvalArgs) -> Result<()> {
    let manifest = tensor_io::read_manifest(&a.test)?;
    let patch_mode = a.mode == args::ModeArg::Patch;
    let per_image: Vec<ConfusionCounts> = manifest
        .records
        .par_iter()
        .map(|record| -> Result<ConfusionCounts> {
            let gt_path = record.gt_mask_path.as_ref().ok_or_else(|| {
                CliError::Validation(format!(
                    "{}: eval needs ground truth",
                    record.feature_path.display()
                ))
            })?;
            let gt = TriClassMask::from_raster(&tensor_io::read_label_raster(gt_path)?)?;
            let pred_path = a.pred.join(prediction_filename(record));
            let pred = TriClassMask::from_raster(&tensor_io::read_label_raster(&pred_path)?)?;
            let (pred, gt) = if patch_mode {
                (merge_nominal_classes(&pred), merge_nominal_classes(&gt))
            } else {
                (pred, gt)
            };
            let mut counts = ConfusionCounts::default();
            accumulate_confusion(&pred, &gt, &mut counts)?;
            Ok(counts)
        })
        .collect::<Result<_>>()?;
    let mut counts = ConfusionCounts::default();
    for c in &per_image {
        counts.merge(c);
    }
    let report = iou_report(&counts)?;

    let mut csv = String::from("metric,value\n");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    if patch_mode {
        writeln!(csv, "anomaly_iou,{}", fmt(report.iou_per_class[2]))
            .expect("writing to string cannot fail");
    } else {
        writeln!(csv, "background_iou,{}", fmt(report.iou_per_class[0])).unwrap();
        writeln!(csv, "target_iou,{}", fmt(report.iou_per_class[1])).unwrap();
        writeln!(csv, "anomaly_iou,{}", fmt(report.iou_per_class[2])).unwrap();
        writeln!(csv, "miou,{:.6}", report.miou).unwrap();
    }
    write_text(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn sweep(a: &args::SweepArgs) -> Result<()> {
    if a.k.is_empty() || a.seeds.is_empty() {
        return Err(CliError::Validation(
            "k and seeds lists must be non-empty".into(),
        ));
    }
    let mixed = tensor_io::read_manifest(&a.mixed)?;
    let reference = tensor_io::read_manifest(&a.reference)?;
    let test = tensor_io::read_manifest(&a.test)?;
    let params = SweepParams {
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
        tol: a.tol,
        init_sample_size: a.init_sample_size,
        r_threshold: a.r_threshold,
        gamma: a.gamma,
    };
    let mode = match a.mode {
        args::ModeArg::Patch => InferMode::Patch,
        args::ModeArg::Fused => InferMode::Fused,
    };
    let inputs = evaluation::SweepInputs::load(&mixed, &reference)?;
    let grid: Vec<(usize, u64)> =
        a.k.iter()
            .flat_map(|&k| a.seeds.iter().map(move |&s| (k, s)))
            .collect();
    let cells: Vec<evaluation::SweepCell> = grid
        .par_iter()
        .map(|&(k, seed)| {
            evaluation::run_sweep_cell(&inputs, &test, k, seed, mode, &params)
                .map_err(CliError::from)
        })
        .collect::<Result<_>>()?;
    let aggregates = evaluation::aggregate_sweep(&cells);
    write_text(&a.out, &evaluation::sweep_csv(&cells, &aggregates))?;
    if let Some(timing) = &a.timing_out {
        write_text(timing, &evaluation::timing_csv(&cells, mode))?;
    }
    for cell in &cells {
        println!(
            "k={} seed={} modelSetupSeconds={:.6} inferMsPerImage={:.6}",
            cell.k, cell.seed, cell.model_setup_seconds, cell.infer_ms_per_image
        );
    }
    println!("cells={}", cells.len());
    Ok(())
}

pub fn hist(a: &args::HistArgs) -> Result<()> {
    let model = tensor_io::load_model(&a.model)?;
    let mut csv = String::from("clusterId,mixedProb,refProb,ratio,isAnomaly\n");
    for cluster in 0..model.codebook.k() {
        let ratio = model.anomaly_set.ratios()[cluster]
            .map(|r| format!("{r:.9}"))
            .unwrap_or_default();
        writeln!(
            csv,
            "{cluster},{:.9},{:.9},{ratio},{}",
            model.mixed_dist.probs()[cluster],
            model.ref_dist.probs()[cluster],
            model.anomaly_set.contains(cluster)
        )
        .expect("writing to string cannot fail");
    }
    write_text(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}
