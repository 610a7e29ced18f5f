//! Data access for the acceptance suite. Criteria on real images read a
//! directory named by `$GFI_ACCEPTANCE_DATA` (default `acceptance-data/` at
//! the workspace root) holding a pretrained VGG-19 checkpoint and JSONL
//! annotation sets.

use std::path::{Path, PathBuf};

use gfi_core::io::{ingest_annotations, load_image, AnnotationRecord};
use gfi_core::{ImageTensor, Model, Registry};

pub const CHECKPOINT: &str = "vgg19.safetensors";

pub fn data_root() -> PathBuf {
    std::env::var_os("GFI_ACCEPTANCE_DATA").map(PathBuf::from).unwrap_or_else(|| {
        let here = Path::new(env!("CARGO_MANIFEST_DIR"));
        here.parent().and_then(Path::parent).unwrap_or(here).join("acceptance-data")
    })
}

pub struct AcceptanceData {
    pub root: PathBuf,
    pub model: Model,
}

impl AcceptanceData {
    /// Errors name the missing file so a failing criterion says why.
    pub fn load() -> Result<Self, String> {
        let root = data_root();
        let weights = root.join(CHECKPOINT);
        if !weights.exists() {
            return Err(format!("missing pretrained VGG-19 checkpoint {}", weights.display()));
        }
        let registry = Registry::builtin();
        let entry = registry.get("vgg19").map_err(|e| e.to_string())?;
        let model = Model::load(entry, &weights).map_err(|e| e.to_string())?;
        Ok(Self { root, model })
    }

    /// The first `want` records of `<root>/<set>/annotations.jsonl`.
    pub fn records(&self, set: &str, want: usize) -> Result<Vec<AnnotationRecord>, String> {
        let path = self.root.join(set).join("annotations.jsonl");
        if !path.exists() {
            return Err(format!("missing {}", path.display()));
        }
        let [h, w] = self.model.entry().input_size;
        let records = ingest_annotations(&path, (h, w)).map_err(|e| e.to_string())?;
        if records.len() < want {
            return Err(format!("{} has {} records, need {want}", path.display(), records.len()));
        }
        Ok(records.into_iter().take(want).collect())
    }

    /// Preprocessed image and its label (the first annotated class).
    pub fn image(&self, r: &AnnotationRecord) -> Result<(ImageTensor, usize), String> {
        let img = load_image(&r.image, self.model.entry()).map_err(|e| e.to_string())?;
        let class = *r.classes(None).map_err(|e| e.to_string())?.first().ok_or("record without a label")?;
        Ok((img, class))
    }
}
