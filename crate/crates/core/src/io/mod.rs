//! File formats: images, annotations, mask files, overlays, configuration.

pub mod annotations;
pub mod config;
pub mod image;
pub mod maskfile;
pub mod overlay;

pub use annotations::{ingest_annotations, load_class_names, load_gt_mask, Annotation, AnnotationRecord, Label};
pub use config::{parse_baseline, ManifestItem, RunConfig, RunManifest};
pub use image::{load_image, save_pixels};
pub use maskfile::{decode_mask, encode_mask, load_mask, save_mask};
pub use overlay::render_overlay;
