//! Boxes, annotations, datasets, and the `annotations.json` directory format.
//!
//! Boxes use continuous pixel coordinates: `(x1, y1)` is the top-left corner
//! and `(x2, y2)` the exclusive bottom-right corner, so `width = x2 - x1`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RgbImage;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.check().map_err(Error::DegenerateBox)?;
        Ok(b)
    }

    /// Builds a box without validation; used for intermediate geometry
    /// (decoded proposals, clipped windows) whose validity is checked later.
    pub const fn raw(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::raw(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn check(&self) -> std::result::Result<(), String> {
        let v = [self.x1, self.y1, self.x2, self.y2];
        if v.iter().any(|c| !c.is_finite()) {
            return Err(format!("non-finite coordinate in {v:?}"));
        }
        if self.x2 <= self.x1 {
            return Err(format!("x2 ({}) <= x1 ({})", self.x2, self.x1));
        }
        if self.y2 <= self.y1 {
            return Err(format!("y2 ({}) <= y1 ({})", self.y2, self.y1));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.check().is_ok()
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self::raw(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::raw(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn clipped(&self, width: f64, height: f64) -> Self {
        Self::raw(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: usize,
    pub image_id: String,
}

/// One image and its ground truth. `file` is relative to the dataset root;
/// `pixels` optionally holds the decoded image in memory.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub id: String,
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
    pub pixels: Option<Arc<RgbImage>>,
}

impl PartialEq for ImageRecord {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.file == other.file
            && self.width == other.width
            && self.height == other.height
            && self.annotations == other.annotations
    }
}

impl ImageRecord {
    pub fn boxes(&self) -> Vec<BBox> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.annotations.iter().map(|a| a.class_id).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base_classes: BTreeSet<usize>,
    pub novel_classes: BTreeSet<usize>,
}

impl ClassSplit {
    pub fn new(
        base: impl IntoIterator<Item = usize>,
        novel: impl IntoIterator<Item = usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let split = Self {
            base_classes: base.into_iter().collect(),
            novel_classes: novel.into_iter().collect(),
        };
        if let Some(c) = split.base_classes.intersection(&split.novel_classes).next() {
            return Err(Error::InvalidInput(format!(
                "class {c} is both base and novel"
            )));
        }
        let all: BTreeSet<usize> = (0..num_classes).collect();
        let union: BTreeSet<usize> = split
            .base_classes
            .union(&split.novel_classes)
            .copied()
            .collect();
        if union != all {
            return Err(Error::InvalidInput(format!(
                "split covers {union:?}, expected all of 0..{num_classes}"
            )));
        }
        Ok(split)
    }

    pub fn num_classes(&self) -> usize {
        self.base_classes.len() + self.novel_classes.len()
    }
}

/// A labelled image collection. `root` is the directory the dataset was
/// loaded from, used to resolve image files; it does not take part in
/// equality.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub images: Vec<ImageRecord>,
    pub root: Option<PathBuf>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.classes == other.classes && self.images == other.images
    }
}

impl Dataset {
    pub fn new(classes: Vec<String>, images: Vec<ImageRecord>) -> Self {
        Self {
            classes,
            images,
            root: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_instances(&self) -> usize {
        self.images.iter().map(|i| i.annotations.len()).sum()
    }

    pub fn instances_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for ann in self.images.iter().flat_map(|i| &i.annotations) {
            if let Some(c) = counts.get_mut(ann.class_id) {
                *c += 1;
            }
        }
        counts
    }

    /// Checks every type invariant, reporting the first violation with the
    /// offending image id.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for img in &self.images {
            let fail = |message: String| Error::Validation {
                image_id: img.id.clone(),
                message,
            };
            if !seen.insert(img.id.as_str()) {
                return Err(fail("duplicate image id".into()));
            }
            if img.width == 0 || img.height == 0 {
                return Err(fail("zero image dimension".into()));
            }
            for (i, ann) in img.annotations.iter().enumerate() {
                ann.bbox
                    .check()
                    .map_err(|m| fail(format!("annotation {i}: {m}")))?;
                let b = &ann.bbox;
                if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > img.width as f64 || b.y2 > img.height as f64 {
                    return Err(fail(format!(
                        "annotation {i}: box {:?} outside image {}x{}",
                        b.to_array(),
                        img.width,
                        img.height
                    )));
                }
                if ann.class_id >= self.num_classes() {
                    return Err(fail(format!(
                        "annotation {i}: class {} out of range (num_classes = {})",
                        ann.class_id,
                        self.num_classes()
                    )));
                }
                if ann.image_id != img.id {
                    return Err(fail(format!(
                        "annotation {i} belongs to image {}",
                        ann.image_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Decoded pixels for `record`: the in-memory copy if present, else the
    /// PNG under `root`.
    pub fn load_pixels(&self, record: &ImageRecord) -> Result<Arc<RgbImage>> {
        if let Some(px) = &record.pixels {
            return Ok(px.clone());
        }
        let root = self.root.as_ref().ok_or_else(|| {
            Error::InvalidInput(format!(
                "image {} has no pixels and the dataset has no root directory",
                record.id
            ))
        })?;
        let img = RgbImage::load_png(&root.join(&record.file))?;
        if img.width != record.width as usize || img.height != record.height as usize {
            return Err(Error::Validation {
                image_id: record.id.clone(),
                message: format!(
                    "png is {}x{}, annotations say {}x{}",
                    img.width, img.height, record.width, record.height
                ),
            });
        }
        Ok(Arc::new(img))
    }

    /// Loads every image into memory.
    pub fn preload(&mut self) -> Result<()> {
        for i in 0..self.images.len() {
            if self.images[i].pixels.is_none() {
                let px = self.load_pixels(&self.images[i])?;
                self.images[i].pixels = Some(px);
            }
        }
        Ok(())
    }

    /// Keeps only annotations of `classes`; images left without annotations
    /// are dropped.
    pub fn restrict_to_classes(&self, classes: &BTreeSet<usize>) -> Dataset {
        let images = self
            .images
            .iter()
            .filter_map(|img| {
                let annotations: Vec<_> = img
                    .annotations
                    .iter()
                    .filter(|a| classes.contains(&a.class_id))
                    .cloned()
                    .collect();
                (!annotations.is_empty()).then(|| ImageRecord {
                    annotations,
                    ..img.clone()
                })
            })
            .collect();
        Dataset {
            classes: self.classes.clone(),
            images,
            root: self.root.clone(),
        }
    }

    /// Union of two datasets over the same class list; annotations of images
    /// present in both are concatenated.
    pub fn merge(&self, other: &Dataset) -> Result<Dataset> {
        if self.classes != other.classes {
            return Err(Error::InvalidInput("merging datasets with different class lists".into()));
        }
        let mut images = self.images.clone();
        let mut by_id: BTreeMap<String, usize> = images
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        for img in &other.images {
            match by_id.get(&img.id) {
                Some(&i) => {
                    for ann in &img.annotations {
                        if !images[i].annotations.contains(ann) {
                            images[i].annotations.push(ann.clone());
                        }
                    }
                }
                None => {
                    let mut rec = img.clone();
                    if rec.pixels.is_none() && other.root != self.root {
                        if let Some(root) = &other.root {
                            rec.pixels = Some(Arc::new(RgbImage::load_png(&root.join(&rec.file))?));
                        }
                    }
                    by_id.insert(rec.id.clone(), images.len());
                    images.push(rec);
                }
            }
        }
        Ok(Dataset {
            classes: self.classes.clone(),
            images,
            root: self.root.clone().or_else(|| other.root.clone()),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationsFile {
    classes: Vec<String>,
    images: Vec<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageEntry {
    id: String,
    file: String,
    width: u32,
    height: u32,
    boxes: Vec<BoxEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxEntry {
    class: i64,
    xyxy: [f64; 4],
}

/// Reads `<dir>/annotations.json` and validates every record.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: AnnotationsFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut images = Vec::with_capacity(file.images.len());
    for (idx, value) in file.images.into_iter().enumerate() {
        let id_hint = value
            .get("id")
            .and_then(|v| v.as_str())
            .map(|s| format!(" (id {s})"))
            .unwrap_or_default();
        let entry: ImageEntry = serde_json::from_value(value).map_err(|e| Error::Parse {
            context: format!("images[{idx}]{id_hint}"),
            message: e.to_string(),
        })?;
        let mut annotations = Vec::with_capacity(entry.boxes.len());
        for (j, b) in entry.boxes.iter().enumerate() {
            if b.class < 0 {
                return Err(Error::Validation {
                    image_id: entry.id.clone(),
                    message: format!("annotation {j}: negative class {}", b.class),
                });
            }
            let [x1, y1, x2, y2] = b.xyxy;
            annotations.push(Annotation {
                bbox: BBox::raw(x1, y1, x2, y2),
                class_id: b.class as usize,
                image_id: entry.id.clone(),
            });
        }
        images.push(ImageRecord {
            id: entry.id,
            file: entry.file,
            width: entry.width,
            height: entry.height,
            annotations,
            pixels: None,
        });
    }
    let ds = Dataset {
        classes: file.classes,
        images,
        root: Some(dir.to_path_buf()),
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `annotations.json` plus image files under `dir`. In-memory pixels
/// are encoded as PNG; file-backed images are copied from the source root.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir.join(IMAGE_DIR)).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.images.len());
    for img in &dataset.images {
        let dest = dir.join(&img.file);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        match (&img.pixels, &dataset.root) {
            (Some(px), _) => px.save_png(&dest)?,
            (None, Some(root)) => {
                let src = root.join(&img.file);
                if src != dest {
                    fs::copy(&src, &dest).map_err(|e| Error::io(&src, e))?;
                }
            }
            (None, None) => {
                return Err(Error::InvalidInput(format!(
                    "image {} has neither pixels nor a source file",
                    img.id
                )))
            }
        }
        let entry = ImageEntry {
            id: img.id.clone(),
            file: img.file.clone(),
            width: img.width,
            height: img.height,
            boxes: img
                .annotations
                .iter()
                .map(|a| BoxEntry {
                    class: a.class_id as i64,
                    xyxy: a.bbox.to_array(),
                })
                .collect(),
        };
        entries.push(serde_json::to_value(entry).expect("serializable entry"));
    }
    let file = AnnotationsFile {
        classes: dataset.classes.clone(),
        images: entries,
    };
    let path = dir.join(ANNOTATIONS_FILE);
    let text = serde_json::to_string_pretty(&file).expect("serializable dataset");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
