pub mod eval;
pub mod explain;
pub mod fgsm;

use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::ValueEnum;
use gfi_core::backend::vanilla_gradient_saliency;
use gfi_core::io::{load_image, load_mask, render_overlay, save_mask};
use gfi_core::solver::TraceEntry;
use gfi_core::{explain, ExplanationResult, ImageTensor, MaskWeights, SaliencyMask};
use serde::Serialize;

use crate::context::Ctx;

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Two-stage guided feature inversion.
    Gfi,
    /// Vanilla gradient magnitude.
    Grad,
}

/// Per-image sidecar with the optimizer traces.
#[derive(Serialize)]
struct Sidecar<'a> {
    input: &'a Path,
    target_class: usize,
    predicted_class: usize,
    predicted_prob: f64,
    degenerate: bool,
    wall_time_seconds: f64,
    weights: &'a MaskWeights,
    stage1_trace: &'a [TraceEntry],
    stage2_trace: &'a [TraceEntry],
}

pub struct Written {
    pub mask: PathBuf,
    pub overlay: PathBuf,
    pub mask_png: PathBuf,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Stores `<stem>.gfimask` plus overlay and greyscale PNGs in `dir`.
pub fn write_mask_outputs(dir: &Path, stem: &str, image: &ImageTensor, mask: &SaliencyMask) -> anyhow::Result<Written> {
    let w = Written {
        mask: dir.join(format!("{stem}.gfimask")),
        overlay: dir.join(format!("{stem}_overlay.png")),
        mask_png: dir.join(format!("{stem}_mask.png")),
    };
    save_mask(&w.mask, mask)?;
    render_overlay(image.pixels(), mask, &w.overlay, &w.mask_png)?;
    Ok(w)
}

pub fn explain_and_write(
    ctx: &Ctx,
    input: &Path,
    image: &ImageTensor,
    class: Option<usize>,
    dir: &Path,
    stem: &str,
) -> anyhow::Result<(ExplanationResult, Written)> {
    let res =
        explain(&ctx.model, image, class, &ctx.interpret).with_context(|| format!("explaining {}", input.display()))?;
    if res.degenerate {
        log::warn!("{}: mask degenerated to zero", input.display());
    }
    let written = write_mask_outputs(dir, stem, image, &res.mask)?;
    let sidecar = Sidecar {
        input,
        target_class: res.target_class,
        predicted_class: res.predicted_class,
        predicted_prob: res.predicted_prob,
        degenerate: res.degenerate,
        wall_time_seconds: res.wall_time_seconds,
        weights: &res.weights,
        stage1_trace: &res.stage1_trace,
        stage2_trace: &res.stage2_trace,
    };
    write_json(&dir.join(format!("{stem}.json")), &sidecar)?;
    Ok((res, written))
}

/// Saliency for one (image, class), reusing a cached mask file when asked.
pub fn saliency(
    ctx: &Ctx,
    method: Method,
    input: &Path,
    class: usize,
    cache: &Path,
    resume: bool,
) -> anyhow::Result<(ImageTensor, SaliencyMask)> {
    let image = load_image(input, ctx.model.entry())?;
    if resume && cache.exists() {
        let m = load_mask(cache)?;
        if m.dim() == image.spatial() {
            return Ok((image, m));
        }
        log::warn!("{}: cached mask has the wrong size, recomputing", cache.display());
    }
    let mask = match method {
        Method::Gfi => {
            explain(&ctx.model, &image, Some(class), &ctx.interpret)
                .with_context(|| format!("explaining {}", input.display()))?
                .mask
        }
        Method::Grad => vanilla_gradient_saliency(&ctx.model, &image, class)?,
    };
    save_mask(cache, &mask)?;
    Ok((image, mask))
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}
