use std::path::{Path, PathBuf};

use anyhow::Context as _;
use gfi_core::evaluation::EvalConfig;
use gfi_core::io::RunConfig;
use gfi_core::{Error, InterpretConfig, Model, Registry};

/// Everything a command needs after configuration is resolved.
pub struct Ctx {
    pub cfg: RunConfig,
    pub interpret: InterpretConfig,
    pub eval: EvalConfig,
    pub model: Model,
    pub out_dir: PathBuf,
}

pub fn input_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Input(msg.into()).into()
}

fn resolve_weights(cfg: &RunConfig, default_name: &str) -> Result<PathBuf, Error> {
    if let Some(w) = &cfg.weights {
        return Ok(w.clone());
    }
    if default_name == "builtin" {
        return Ok(PathBuf::from("builtin"));
    }
    let dir = std::env::var_os("GFI_WEIGHTS_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    let path = dir.join(default_name);
    if !path.exists() {
        return Err(Error::Weights(format!(
            "no checkpoint given and {} does not exist; pass --weights or set GFI_WEIGHTS_DIR",
            path.display()
        )));
    }
    Ok(path)
}

impl Ctx {
    pub fn new(mut cfg: RunConfig) -> anyhow::Result<Self> {
        let registry = match &cfg.registry {
            Some(p) => Registry::from_path(p)?,
            None => Registry::builtin(),
        };
        let entry = registry.get(cfg.arch())?.clone();
        let weights = resolve_weights(&cfg, &entry.weights)?;
        let mut model = Model::load(&entry, &weights)?;
        if cfg.inversion_layer.is_some() || cfg.base_layer.is_some() {
            let inv = cfg.inversion_layer.clone().unwrap_or_else(|| entry.inversion_layer.clone());
            let base = cfg.base_layer.clone().unwrap_or_else(|| entry.base_channel_layer.clone());
            model = model.with_layers(&inv, &base)?;
        }
        cfg.arch = Some(entry.name.clone());
        cfg.weights = Some(weights);
        let interpret = cfg.interpret_config()?;
        let eval = cfg.eval_config()?;
        let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("gfi-out"));
        std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        if let Some(n) = cfg.threads {
            // a second initialization in the same process is harmless
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ok(Self { cfg, interpret, eval, model, out_dir })
    }

    pub fn out(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Image files named directly or found (non-recursively) in directories,
/// directory contents in sorted order.
pub fn expand_inputs(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(input_err("no input images"));
    }
    Ok(out)
}

/// File stems made unique by suffixing repeats with their position.
pub fn unique_stems(paths: &[PathBuf]) -> Vec<String> {
    let mut seen = std::collections::HashMap::new();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("image{i}"));
            let n = seen.entry(stem.clone()).or_insert(0usize);
            *n += 1;
            if *n == 1 {
                stem
            } else {
                format!("{stem}_{i}")
            }
        })
        .collect()
}
