use std::path::PathBuf;

use clap::Args;
use gfi_core::evaluation::{binarize, fgsm_attack, iou, tightest_bbox, BoundingBox};
use gfi_core::io::{ingest_annotations, load_class_names, load_image, save_pixels, RunConfig};
use gfi_core::SaliencyMask;
use rayon::prelude::*;
use serde::Serialize;

use super::{explain_and_write, mean, write_json};
use crate::context::{expand_inputs, input_err, unique_stems, Ctx};

#[derive(Args, Debug)]
pub struct FgsmArgs {
    /// Images to attack; the true class is --target-class or the clean top-1.
    inputs: Vec<PathBuf>,
    /// Take images, true classes and boxes from annotations instead.
    #[arg(long, conflicts_with = "inputs")]
    annotations: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Perturbation size in [0, 1] pixel units (default 8/255).
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Serialize)]
struct FgsmRow {
    image_id: String,
    true_class: usize,
    clean_top1: usize,
    adversarial_top1: usize,
    flipped: bool,
    clean_box: Option<BoundingBox>,
    adversarial_box: Option<BoundingBox>,
    /// Overlap between the boxes from the clean and adversarial masks.
    box_iou: f64,
    /// Best overlap of the adversarial box with the annotated boxes.
    gt_iou: Option<f64>,
}

#[derive(Serialize)]
struct FgsmReport {
    epsilon: f64,
    alpha: f64,
    flip_rate: f64,
    mean_box_iou: f64,
    rows: Vec<FgsmRow>,
}

struct Job {
    id: String,
    path: PathBuf,
    class: Option<usize>,
    boxes: Option<Vec<BoundingBox>>,
}

fn bbox(m: &SaliencyMask, alpha: f64) -> Option<BoundingBox> {
    tightest_bbox(&binarize(m, alpha))
}

pub fn run(mut cfg: RunConfig, args: FgsmArgs) -> anyhow::Result<()> {
    cfg.epsilon = args.epsilon.or(cfg.epsilon);
    cfg.alpha = args.alpha.or(cfg.alpha);
    let ctx = Ctx::new(cfg)?;
    let jobs: Vec<Job> = match &args.annotations {
        Some(path) => {
            let [h, w] = ctx.model.entry().input_size;
            let names = args.labels.as_deref().map(load_class_names).transpose()?;
            let names = names.as_deref();
            ingest_annotations(path, (h, w))?
                .into_iter()
                .map(|r| {
                    let class = r.classes(names)?.first().copied();
                    let boxes = class.map(|c| r.boxes_for(c, names));
                    Ok(Job { id: r.image_id, path: r.image, class, boxes })
                })
                .collect::<anyhow::Result<_>>()?
        }
        None => {
            if args.inputs.is_empty() {
                return Err(input_err("give images or --annotations"));
            }
            let paths = expand_inputs(&args.inputs)?;
            let stems = unique_stems(&paths);
            paths
                .into_iter()
                .zip(stems)
                .map(|(path, id)| Job { id, path, class: ctx.cfg.target_class, boxes: None })
                .collect()
        }
    };
    let (eps, alpha) = (ctx.eval.fgsm_epsilon, ctx.eval.alpha);
    let rows = jobs
        .par_iter()
        .map(|job| -> anyhow::Result<FgsmRow> {
            let x = load_image(&job.path, ctx.model.entry())?;
            let clean_top1 = ctx.model.class_prob(x.normalized())?.argmax().0;
            let true_class = job.class.unwrap_or(clean_top1);
            let adv = fgsm_attack(&ctx.model, &x, true_class, eps)?;
            let adversarial_top1 = ctx.model.class_prob(adv.normalized())?.argmax().0;
            save_pixels(&ctx.out(format!("{}_adv.png", job.id)), adv.pixels())?;
            let (clean, _) = explain_and_write(&ctx, &job.path, &x, Some(true_class), &ctx.out_dir, &job.id)?;
            let (attacked, _) =
                explain_and_write(&ctx, &job.path, &adv, Some(true_class), &ctx.out_dir, &format!("{}_adv", job.id))?;
            let clean_box = bbox(&clean.mask, alpha);
            let adversarial_box = bbox(&attacked.mask, alpha);
            let box_iou = match (&clean_box, &adversarial_box) {
                (Some(a), Some(b)) => iou(a, b),
                _ => 0.0,
            };
            let gt_iou = job
                .boxes
                .as_ref()
                .map(|gt| adversarial_box.map_or(0.0, |b| gt.iter().map(|g| iou(&b, g)).fold(0.0, f64::max)));
            let flipped = adversarial_top1 != clean_top1;
            println!(
                "{}: top-1 {clean_top1} -> {adversarial_top1}{} box IOU {box_iou:.3}",
                job.id,
                if flipped { " (flipped)" } else { "" }
            );
            Ok(FgsmRow {
                image_id: job.id.clone(),
                true_class,
                clean_top1,
                adversarial_top1,
                flipped,
                clean_box,
                adversarial_box,
                box_iou,
                gt_iou,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = FgsmReport {
        epsilon: eps,
        alpha,
        flip_rate: mean(rows.iter().map(|r| if r.flipped { 1.0 } else { 0.0 })),
        mean_box_iou: mean(rows.iter().map(|r| r.box_iou)),
        rows,
    };
    let path = ctx.out("fgsm_report.json");
    write_json(&path, &report)?;
    println!("flip rate {:.3}, mean box IOU {:.3}; report: {}", report.flip_rate, report.mean_box_iou, path.display());
    Ok(())
}
