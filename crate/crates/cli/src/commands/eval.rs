use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::Args;
use gfi_core::evaluation::{
    center_baseline, localization_error, localization_sweep, localize, mae_metric, pointing_game, precision_recall_f,
    salient_binarize, EvalReport, LocalizationSample, PointingReport, PointingTrial, ReportRow,
};
use gfi_core::io::{ingest_annotations, load_class_names, load_gt_mask, AnnotationRecord, RunConfig};
use rayon::prelude::*;
use serde::Serialize;

use super::{mean, saliency, write_json, Method};
use crate::context::{input_err, Ctx};

#[derive(Args, Debug)]
pub struct DataArgs {
    /// JSONL annotation file, or a directory of VOC XML files.
    #[arg(long)]
    annotations: PathBuf,
    /// Class-name list (one per line) for string labels.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gfi")]
    method: Method,
    /// Reuse masks already present under <out-dir>/masks.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
pub struct LocalizationArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Binarization threshold as a multiple of the mean saliency.
    #[arg(long)]
    alpha: Option<f64>,
    /// Evaluate every alpha of the grid and write localization_sweep.csv.
    #[arg(long)]
    sweep: bool,
    #[arg(long)]
    iou_threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PointingArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    beta_sq: Option<f64>,
}

struct Loaded {
    ctx: Ctx,
    records: Vec<AnnotationRecord>,
    names: Option<Vec<String>>,
    masks_dir: PathBuf,
}

fn load(cfg: RunConfig, data: &DataArgs) -> anyhow::Result<Loaded> {
    let ctx = Ctx::new(cfg)?;
    let [h, w] = ctx.model.entry().input_size;
    let records = ingest_annotations(&data.annotations, (h, w))?;
    if records.is_empty() {
        return Err(input_err(format!("{} holds no annotation records", data.annotations.display())));
    }
    let names = data.labels.as_deref().map(load_class_names).transpose()?;
    let masks_dir = ctx.out("masks");
    std::fs::create_dir_all(&masks_dir).with_context(|| format!("creating {}", masks_dir.display()))?;
    Ok(Loaded { ctx, records, names, masks_dir })
}

fn cache_path(dir: &Path, method: Method, id: &str, class: usize) -> PathBuf {
    let tag = match method {
        Method::Gfi => "gfi",
        Method::Grad => "grad",
    };
    dir.join(format!("{id}_{class}_{tag}.gfimask"))
}

pub fn localization(mut cfg: RunConfig, args: LocalizationArgs) -> anyhow::Result<()> {
    cfg.alpha = args.alpha.or(cfg.alpha);
    cfg.iou_threshold = args.iou_threshold.or(cfg.iou_threshold);
    let l = load(cfg, &args.data)?;
    let names = l.names.as_deref();
    let samples = l
        .records
        .par_iter()
        .map(|r| -> anyhow::Result<LocalizationSample> {
            // the first annotated class is the image's label
            let class = r.classes(names)?[0];
            let cache = cache_path(&l.masks_dir, args.data.method, &r.image_id, class);
            let (_, mask) = saliency(&l.ctx, args.data.method, &r.image, class, &cache, args.data.resume)?;
            log::info!("{} explained for class {class}", r.image_id);
            Ok(LocalizationSample { image_id: r.image_id.clone(), mask, gt: r.boxes_for(class, names) })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let thr = l.ctx.eval.iou_success_threshold;
    let mut report = EvalReport::default();
    let point = if args.sweep {
        let (points, best) = localization_sweep(&samples, &l.ctx.eval.alphas, thr);
        let csv_path = l.ctx.out("localization_sweep.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        for p in &points {
            w.serialize(p)?;
        }
        w.flush()?;
        println!("sweep: {}", csv_path.display());
        best.ok_or_else(|| input_err("no image could be scored"))?
    } else {
        localization_error(&samples, l.ctx.eval.alpha, thr)
    };
    for s in &samples {
        let o = localize(&s.mask, &s.gt, point.alpha, thr);
        report.rows.push(ReportRow {
            image_id: s.image_id.clone(),
            alpha: Some(point.alpha),
            iou: Some(o.best_iou),
            ..Default::default()
        });
    }
    report.summary.insert("alpha".into(), point.alpha);
    report.summary.insert("error".into(), point.error);
    report.summary.insert("n_images".into(), point.n_images as f64);
    report.summary.insert("n_skipped".into(), point.n_skipped as f64);
    let path = l.ctx.out("localization_report.json");
    write_json(&path, &report)?;
    println!(
        "localization error {:.4} at alpha {:.2} over {} images ({} skipped); report: {}",
        point.error,
        point.alpha,
        point.n_images,
        point.n_skipped,
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PointingOutput {
    method: PointingReport,
    center: PointingReport,
    rows: Vec<ReportRow>,
}

pub fn pointing(cfg: RunConfig, args: PointingArgs) -> anyhow::Result<()> {
    let l = load(cfg, &args.data)?;
    let names = l.names.as_deref();
    let mut jobs = Vec::new();
    for r in &l.records {
        for class in r.classes(names)? {
            jobs.push((r, class));
        }
    }
    let trials = jobs
        .par_iter()
        .map(|&(r, class)| -> anyhow::Result<(PointingTrial, PointingTrial)> {
            let cache = cache_path(&l.masks_dir, args.data.method, &r.image_id, class);
            let (_, mask) = saliency(&l.ctx, args.data.method, &r.image, class, &cache, args.data.resume)?;
            let boxes = r.boxes_for(class, names);
            let make = |point| PointingTrial { image_id: r.image_id.clone(), class, point, boxes: boxes.clone() };
            Ok((make(mask.argmax()), make(center_baseline(mask.dim()))))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let (ours, center): (Vec<_>, Vec<_>) = trials.into_iter().unzip();
    let rows = ours
        .iter()
        .map(|t| ReportRow {
            image_id: t.image_id.clone(),
            class: Some(t.class),
            hit: Some(gfi_core::evaluation::pointing_hit(t.point, &t.boxes)),
            ..Default::default()
        })
        .collect();
    let out = PointingOutput { method: pointing_game(&ours), center: pointing_game(&center), rows };
    let path = l.ctx.out("pointing_report.json");
    write_json(&path, &out)?;
    println!(
        "pointing accuracy {:.4} (center baseline {:.4}) over {} classes; report: {}",
        out.method.mean_accuracy,
        out.center.mean_accuracy,
        out.method.per_class.len(),
        path.display()
    );
    Ok(())
}

pub fn detect(mut cfg: RunConfig, args: DetectArgs) -> anyhow::Result<()> {
    cfg.beta_sq = args.beta_sq.or(cfg.beta_sq);
    let l = load(cfg, &args.data)?;
    let frame = {
        let [h, w] = l.ctx.model.entry().input_size;
        (h, w)
    };
    let beta_sq = l.ctx.eval.beta_sq;
    let rows = l
        .records
        .par_iter()
        .map(|r| -> anyhow::Result<ReportRow> {
            let gt_path =
                r.mask.as_ref().ok_or_else(|| input_err(format!("record {} has no ground-truth mask", r.image_id)))?;
            let gt = load_gt_mask(gt_path, frame)?;
            let class = match l.ctx.cfg.target_class {
                Some(c) => c,
                None => {
                    let image = gfi_core::io::load_image(&r.image, l.ctx.model.entry())?;
                    l.ctx.model.class_prob(image.normalized())?.argmax().0
                }
            };
            let cache = cache_path(&l.masks_dir, args.data.method, &r.image_id, class);
            let (_, mask) = saliency(&l.ctx, args.data.method, &r.image, class, &cache, args.data.resume)?;
            let prf = precision_recall_f(&salient_binarize(&mask), &gt, beta_sq)?;
            let mae = mae_metric(&mask, &gt.mapv(|g| if g { 1.0 } else { 0.0 }))?;
            Ok(ReportRow {
                image_id: r.image_id.clone(),
                class: Some(class),
                precision: Some(prf.precision),
                recall: Some(prf.recall),
                f_beta: Some(prf.f_beta),
                mae: Some(mae),
                ..Default::default()
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let p = mean(rows.iter().filter_map(|r| r.precision));
    let r = mean(rows.iter().filter_map(|r| r.recall));
    let mut summary = BTreeMap::new();
    summary.insert("precision".to_string(), p);
    summary.insert("recall".to_string(), r);
    summary.insert("f_beta".to_string(), gfi_core::evaluation::f_beta(p, r, beta_sq));
    summary.insert("mean_image_f_beta".to_string(), mean(rows.iter().filter_map(|r| r.f_beta)));
    summary.insert("mae".to_string(), mean(rows.iter().filter_map(|r| r.mae)));
    let report = EvalReport { rows, summary };
    let path = l.ctx.out("saliency_report.json");
    write_json(&path, &report)?;
    println!(
        "precision {:.4} recall {:.4} F {:.4} MAE {:.4}; report: {}",
        report.summary["precision"],
        report.summary["recall"],
        report.summary["f_beta"],
        report.summary["mae"],
        path.display()
    );
    Ok(())
}
