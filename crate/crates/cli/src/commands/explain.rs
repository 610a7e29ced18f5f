use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use gfi_core::backend::vanilla_gradient_saliency;
use gfi_core::io::{load_image, ManifestItem, RunConfig, RunManifest};
use rayon::prelude::*;

use super::{explain_and_write, write_mask_outputs};
use crate::context::{expand_inputs, input_err, unique_stems, Ctx};

#[derive(Args, Debug)]
pub struct ExplainArgs {
    /// Image files or directories of images.
    inputs: Vec<PathBuf>,
    /// Repeat the run recorded in a manifest.json; --out-dir still applies.
    #[arg(long, conflicts_with = "inputs")]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradArgs {
    inputs: Vec<PathBuf>,
}

pub fn run(cfg: RunConfig, args: ExplainArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let (ctx, inputs) = match &args.manifest {
        Some(path) => {
            let m = RunManifest::load(path)?;
            let mut replay = m.config.clone();
            if cfg.out_dir.is_some() {
                replay.out_dir = cfg.out_dir.clone();
            }
            if cfg.threads.is_some() {
                replay.threads = cfg.threads;
            }
            let mut ctx = Ctx::new(replay)?;
            ctx.interpret = m.interpret;
            (ctx, m.inputs)
        }
        None => {
            if args.inputs.is_empty() {
                return Err(input_err("give at least one image or --manifest"));
            }
            (Ctx::new(cfg)?, expand_inputs(&args.inputs)?)
        }
    };
    let stems = unique_stems(&inputs);
    let items = inputs
        .par_iter()
        .zip(stems.par_iter())
        .map(|(input, stem)| -> anyhow::Result<ManifestItem> {
            let image = load_image(input, ctx.model.entry())?;
            let (res, w) = explain_and_write(&ctx, input, &image, ctx.cfg.target_class, &ctx.out_dir, stem)?;
            println!(
                "{} -> class {} (top-1 {} p={:.4}) {}{}",
                input.display(),
                res.target_class,
                res.predicted_class,
                res.predicted_prob,
                w.mask.display(),
                if res.degenerate { " [degenerate]" } else { "" }
            );
            Ok(ManifestItem {
                input: input.clone(),
                target_class: res.target_class,
                predicted_class: res.predicted_class,
                predicted_prob: res.predicted_prob,
                mask: w.mask,
                overlay: w.overlay,
                mask_png: w.mask_png,
                degenerate: res.degenerate,
                wall_time_seconds: res.wall_time_seconds,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: "explain".to_string(),
        arch: ctx.cfg.arch().to_string(),
        seed: ctx.interpret.seed,
        config: ctx.cfg.clone(),
        interpret: ctx.interpret.clone(),
        eval: ctx.eval.clone(),
        inputs,
        items,
        total_seconds: started.elapsed().as_secs_f64(),
    };
    let path = ctx.out("manifest.json");
    manifest.save(&path)?;
    println!("manifest: {}", path.display());
    Ok(())
}

pub fn grad(cfg: RunConfig, args: GradArgs) -> anyhow::Result<()> {
    let ctx = Ctx::new(cfg)?;
    let inputs = expand_inputs(&args.inputs)?;
    let stems = unique_stems(&inputs);
    inputs.par_iter().zip(stems.par_iter()).try_for_each(|(input, stem)| -> anyhow::Result<()> {
        let image = load_image(input, ctx.model.entry())?;
        let class = match ctx.cfg.target_class {
            Some(c) => c,
            None => ctx.model.class_prob(image.normalized())?.argmax().0,
        };
        let mask = vanilla_gradient_saliency(&ctx.model, &image, class)?;
        let w = write_mask_outputs(&ctx.out_dir, &format!("{stem}_grad"), &image, &mask)?;
        println!("{} -> class {class} {}", input.display(), w.mask.display());
        Ok(())
    })
}
