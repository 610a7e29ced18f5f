//! Box annotations: newline-delimited JSON records, or a directory of VOC
//! XML files. Boxes are rescaled into the model-input frame on ingestion.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::BoundingBox;

/// Box in original-image pixel coordinates, inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawObject {
    pub label: Label,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

/// Class given either by index or by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Index(usize),
    Name(String),
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Index(i) => write!(f, "{i}"),
            Label::Name(n) => f.write_str(n),
        }
    }
}

impl Label {
    /// Class index, looking names up in `names` (one class name per index).
    pub fn resolve(&self, names: Option<&[String]>) -> Result<usize> {
        match self {
            Label::Index(i) => Ok(*i),
            Label::Name(n) => {
                if let Ok(i) = n.parse() {
                    return Ok(i);
                }
                names
                    .and_then(|ns| ns.iter().position(|x| x == n))
                    .ok_or_else(|| Error::input(format!("label '{n}' is not in the class list")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub image: String,
    #[serde(default)]
    pub width: Option<u32>,
    #[serde(default)]
    pub height: Option<u32>,
    /// May be empty only when a ground-truth mask is given.
    #[serde(default)]
    pub objects: Vec<RawObject>,
    #[serde(default)]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub label: Label,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    /// Image path, resolved against the annotation file's directory.
    pub image: PathBuf,
    pub objects: Vec<Annotation>,
    pub mask: Option<PathBuf>,
}

impl AnnotationRecord {
    pub fn boxes_for(&self, class: usize, names: Option<&[String]>) -> Vec<BoundingBox> {
        self.objects.iter().filter(|o| o.label.resolve(names).ok() == Some(class)).map(|o| o.bbox).collect()
    }

    /// Distinct classes present, in first-seen order.
    pub fn classes(&self, names: Option<&[String]>) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for o in &self.objects {
            let c = o.label.resolve(names)?;
            if !out.contains(&c) {
                out.push(c);
            }
        }
        Ok(out)
    }
}

/// Maps an inclusive original coordinate into `0..to`.
fn rescale(v: f64, from: u32, to: usize) -> usize {
    let s = (v * to as f64 / from as f64).floor();
    (s.max(0.0) as usize).min(to - 1)
}

/// Validates a raw record and rescales its boxes into `frame` (height, width).
pub fn resolve_record(raw: RawRecord, base: &Path, frame: (usize, usize)) -> Result<AnnotationRecord> {
    if raw.objects.is_empty() && raw.mask.is_none() {
        return Err(Error::input("record has neither objects nor a mask"));
    }
    let image = base.join(&raw.image);
    let (w, h) = match (raw.width, raw.height) {
        (Some(w), Some(h)) => (w, h),
        _ => image::image_dimensions(&image)
            .map_err(|e| Error::input(format!("cannot read size of {}: {e}", image.display())))?,
    };
    if w == 0 || h == 0 {
        return Err(Error::input("image size must be positive"));
    }
    let mut objects = Vec::with_capacity(raw.objects.len());
    for o in raw.objects {
        let coords = [o.xmin, o.ymin, o.xmax, o.ymax];
        if coords.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::input(format!("box for '{}' has invalid coordinates", o.label)));
        }
        if o.xmin > o.xmax || o.ymin > o.ymax {
            return Err(Error::input(format!(
                "inverted box for '{}': ({}, {}, {}, {})",
                o.label, o.xmin, o.ymin, o.xmax, o.ymax
            )));
        }
        let bbox = BoundingBox::new(
            rescale(o.xmin, w, frame.1),
            rescale(o.ymin, h, frame.0),
            rescale(o.xmax, w, frame.1),
            rescale(o.ymax, h, frame.0),
        )?;
        objects.push(Annotation { label: o.label, bbox });
    }
    let image_id = Path::new(&raw.image)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| raw.image.clone());
    Ok(AnnotationRecord { image_id, image, objects, mask: raw.mask.map(|m| base.join(m)) })
}

pub fn parse_jsonl(text: &str, base: &Path, frame: (usize, usize), source: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| Error::Ingestion {
            path: source.to_path_buf(),
            reason: format!("line {}: {reason}", i + 1),
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        out.push(resolve_record(raw, base, frame).map_err(|e| fail(e.to_string()))?);
    }
    Ok(out)
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<&'a str> {
    node.children().find(|c| c.has_tag_name(name)).and_then(|c| c.text()).map(str::trim)
}

/// Converts the VOC XML subset (filename, size, object name and bndbox).
/// VOC coordinates are 1-based and are shifted to 0-based.
pub fn voc_to_raw(xml: &str) -> Result<RawRecord> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| Error::Format(format!("VOC XML: {e}")))?;
    let root = doc.root_element();
    let filename = child_text(root, "filename").ok_or_else(|| Error::Format("VOC XML: missing <filename>".into()))?;
    let size = root.children().find(|c| c.has_tag_name("size"));
    let dim = |name: &str| -> Option<u32> { size.and_then(|s| child_text(s, name)).and_then(|t| t.parse().ok()) };
    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = child_text(obj, "name").ok_or_else(|| Error::Format("VOC XML: object without <name>".into()))?;
        let bb = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| Error::Format(format!("VOC XML: object '{name}' without <bndbox>")))?;
        let coord = |tag: &str| -> Result<f64> {
            child_text(bb, tag)
                .and_then(|t| t.parse::<f64>().ok())
                .map(|v| (v - 1.0).max(0.0))
                .ok_or_else(|| Error::Format(format!("VOC XML: object '{name}' has bad <{tag}>")))
        };
        objects.push(RawObject {
            label: Label::Name(name.to_string()),
            xmin: coord("xmin")?,
            ymin: coord("ymin")?,
            xmax: coord("xmax")?,
            ymax: coord("ymax")?,
        });
    }
    Ok(RawRecord { image: filename.to_string(), width: dim("width"), height: dim("height"), objects, mask: None })
}

/// JSONL file, or a directory of VOC `*.xml` files whose images live in
/// the same directory. Records come back in file (or sorted name) order.
pub fn ingest_annotations(path: &Path, frame: (usize, usize)) -> Result<Vec<AnnotationRecord>> {
    let fail = |reason: String| Error::Ingestion { path: path.to_path_buf(), reason };
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| fail(e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "xml"))
            .collect();
        files.sort();
        return files
            .iter()
            .map(|f| {
                let text = std::fs::read_to_string(f)?;
                resolve_record(voc_to_raw(&text)?, path, frame)
                    .map_err(|e| Error::Ingestion { path: f.clone(), reason: e.to_string() })
            })
            .collect();
    }
    let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_jsonl(&text, base, frame, path)
}

/// Ground-truth object mask resized to `frame` (nearest neighbour), any
/// nonzero pixel counting as object. Empty masks are rejected.
pub fn load_gt_mask(path: &Path, frame: (usize, usize)) -> Result<Array2<bool>> {
    let img = image::open(path).map_err(|e| Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })?;
    let g = img.resize_exact(frame.1 as u32, frame.0 as u32, image::imageops::FilterType::Nearest).to_luma8();
    let mask = Array2::from_shape_fn(frame, |(y, x)| g.get_pixel(x as u32, y as u32)[0] > 0);
    if !mask.iter().any(|&b| b) {
        return Err(Error::Ingestion { path: path.to_path_buf(), reason: "ground-truth mask is empty".into() });
    }
    Ok(mask)
}

/// One class name per line.
pub fn load_class_names(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?.lines().map(|l| l.trim().to_string()).collect())
}
