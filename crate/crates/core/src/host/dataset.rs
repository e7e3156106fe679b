use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::FrameGroundTruth;
use crate::protocol::{ElementType, FrameMessage};
use crate::vision::{BBox, GroundTruthBox};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("reading {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("unparsable annotations in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("annotation references unknown image id {0}")]
    UnknownImage(u64),
    #[error("annotation references unknown category id {0}")]
    UnknownCategory(u32),
    #[error("image id {0} appears more than once")]
    DuplicateImage(u64),
    #[error("image id {id} has zero size {width}x{height}")]
    EmptyImage { id: u64, width: u32, height: u32 },
    #[error("annotation on image {image_id} has invalid bbox {bbox:?}")]
    InvalidBox { image_id: u64, bbox: [f64; 4] },
    #[error("image files missing: {0:?}")]
    MissingImages(Vec<PathBuf>),
    #[error("decoding {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("{path} is {actual_w}x{actual_h} but the annotations say {width}x{height}")]
    SizeMismatch { path: PathBuf, width: u32, height: u32, actual_w: u32, actual_h: u32 },
}

/// The subset of the COCO annotation format this loader reads. Other fields
/// are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub image_id: u64,
    pub category_id: u32,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    File(PathBuf),
    /// Interleaved BGR pixels, row-major.
    Memory(Arc<Vec<u8>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEntry {
    pub frame_id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub source: ImageSource,
}

/// Frames in ascending id order plus their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    frames: Vec<FrameEntry>,
    annotations: FrameGroundTruth,
    classes: BTreeMap<u32, String>,
}

fn read_coco(path: &Path) -> Result<CocoFile, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io { path: path.into(), reason: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse { path: path.into(), reason: e.to_string() })
}

/// Ground truth keyed by frame id, with boxes in corner form and clipped to
/// their image. Shared by [`load_dataset`] and targets that replay ground
/// truth.
pub fn ground_truth_from_coco(coco: &CocoFile) -> Result<FrameGroundTruth, DatasetError> {
    let mut sizes = BTreeMap::new();
    for img in &coco.images {
        if sizes.insert(img.id, (img.width, img.height)).is_some() {
            return Err(DatasetError::DuplicateImage(img.id));
        }
    }
    let categories: BTreeSet<u32> = coco.categories.iter().map(|c| c.id).collect();
    let mut gt = FrameGroundTruth::new();
    for ann in &coco.annotations {
        let &(w, h) = sizes.get(&ann.image_id).ok_or(DatasetError::UnknownImage(ann.image_id))?;
        if !categories.contains(&ann.category_id) {
            return Err(DatasetError::UnknownCategory(ann.category_id));
        }
        let [x, y, bw, bh] = ann.bbox;
        let raw = BBox::from_xywh(x, y, bw, bh)
            .map_err(|_| DatasetError::InvalidBox { image_id: ann.image_id, bbox: ann.bbox })?;
        let bbox = raw.clipped(w as f64, h as f64);
        if bbox != raw {
            log::warn!("image {}: bbox {:?} exceeds {w}x{h}; clipped", ann.image_id, ann.bbox);
        }
        gt.entry(ann.image_id).or_default().push(GroundTruthBox { bbox, class_id: ann.category_id, frame_id: ann.image_id });
    }
    Ok(gt)
}

/// Reads only the ground truth of a COCO annotation file.
pub fn load_ground_truth(annotation_file: &Path) -> Result<FrameGroundTruth, DatasetError> {
    ground_truth_from_coco(&read_coco(annotation_file)?)
}

/// Loads a COCO-format annotation file whose `file_name`s are relative to
/// `image_dir`. Every referenced image must exist.
pub fn load_dataset(image_dir: &Path, annotation_file: &Path) -> Result<Dataset, DatasetError> {
    let coco = read_coco(annotation_file)?;
    let annotations = ground_truth_from_coco(&coco)?;
    let mut images = coco.images.clone();
    images.sort_by_key(|i| i.id);
    let mut missing = Vec::new();
    let mut frames = Vec::with_capacity(images.len());
    for img in images {
        if img.width == 0 || img.height == 0 {
            return Err(DatasetError::EmptyImage { id: img.id, width: img.width, height: img.height });
        }
        let path = image_dir.join(&img.file_name);
        if !path.is_file() {
            missing.push(path.clone());
        }
        frames.push(FrameEntry {
            frame_id: img.id,
            file_name: img.file_name,
            width: img.width,
            height: img.height,
            source: ImageSource::File(path),
        });
    }
    if !missing.is_empty() {
        return Err(DatasetError::MissingImages(missing));
    }
    let classes = coco.categories.into_iter().map(|c| (c.id, c.name)).collect();
    Ok(Dataset { frames, annotations, classes })
}

impl Dataset {
    /// Builds a dataset from parts. Frames are sorted by id; annotations
    /// must refer to known frames.
    pub fn new(
        mut frames: Vec<FrameEntry>,
        annotations: FrameGroundTruth,
        classes: BTreeMap<u32, String>,
    ) -> Result<Self, DatasetError> {
        frames.sort_by_key(|f| f.frame_id);
        if let Some(w) = frames.windows(2).find(|w| w[0].frame_id == w[1].frame_id) {
            return Err(DatasetError::DuplicateImage(w[0].frame_id));
        }
        let ids: BTreeSet<u64> = frames.iter().map(|f| f.frame_id).collect();
        for (frame_id, boxes) in &annotations {
            if !ids.contains(frame_id) {
                return Err(DatasetError::UnknownImage(*frame_id));
            }
            if let Some(b) = boxes.iter().find(|b| !classes.contains_key(&b.class_id)) {
                return Err(DatasetError::UnknownCategory(b.class_id));
            }
        }
        Ok(Dataset { frames, annotations, classes })
    }

    /// A seeded scene of `frame_count` in-memory images with non-overlapping
    /// boxes spread over `class_count` classes. Every class appears.
    pub fn synthetic(frame_count: usize, class_count: u32, width: u32, height: u32, seed: u64) -> Self {
        assert!(class_count > 0 && width >= 16 && height >= 16, "synthetic scene too small");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = (0..class_count).map(|c| (c + 1, format!("class{}", c + 1))).collect();
        // A 4x3 grid of cells; each box sits inside its own cell.
        let (cols, rows) = (4u32, 3u32);
        let (cw, ch) = ((width / cols) as f64, (height / rows) as f64);
        let mut frames = Vec::with_capacity(frame_count);
        let mut annotations = FrameGroundTruth::new();
        let mut next_class = 0u32;
        for i in 0..frame_count {
            let frame_id = i as u64 + 1;
            let mut px = vec![32u8; (width * height * 3) as usize];
            let count = rng.random_range(1..=4usize);
            let mut cells: Vec<u32> = (0..cols * rows).collect();
            let mut boxes = Vec::with_capacity(count);
            for _ in 0..count {
                let cell = cells.swap_remove(rng.random_range(0..cells.len()));
                let (gx, gy) = ((cell % cols) as f64 * cw, (cell / cols) as f64 * ch);
                let x0 = (gx + rng.random_range(0.0..cw * 0.3)).floor();
                let y0 = (gy + rng.random_range(0.0..ch * 0.3)).floor();
                let x1 = (x0 + rng.random_range(cw * 0.3..cw * 0.65)).floor();
                let y1 = (y0 + rng.random_range(ch * 0.3..ch * 0.65)).floor();
                let class_id = next_class % class_count + 1;
                next_class += 1;
                let shade = (60 + 60 * (class_id % 4)) as u8;
                for y in y0 as u32..y1 as u32 {
                    for x in x0 as u32..x1 as u32 {
                        let o = ((y * width + x) * 3) as usize;
                        px[o..o + 3].copy_from_slice(&[shade, shade / 2, 255 - shade]);
                    }
                }
                boxes.push(GroundTruthBox { bbox: BBox { x0, y0, x1, y1 }, class_id, frame_id });
            }
            annotations.insert(frame_id, boxes);
            frames.push(FrameEntry {
                frame_id,
                file_name: format!("{frame_id:06}.png"),
                width,
                height,
                source: ImageSource::Memory(Arc::new(px)),
            });
        }
        Dataset { frames, annotations, classes }
    }

    pub fn frames(&self) -> &[FrameEntry] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_ids(&self) -> BTreeSet<u64> {
        self.frames.iter().map(|f| f.frame_id).collect()
    }

    pub fn annotations(&self) -> &FrameGroundTruth {
        &self.annotations
    }

    pub fn classes(&self) -> &BTreeMap<u32, String> {
        &self.classes
    }

    pub fn annotation_count(&self) -> usize {
        self.annotations.values().map(Vec::len).sum()
    }

    /// Decodes a frame to 3-channel 8-bit BGR and wraps it for `session_id`.
    pub fn frame_message(&self, entry: &FrameEntry, session_id: &str) -> Result<FrameMessage, DatasetError> {
        let pixel_data = match &entry.source {
            ImageSource::Memory(px) => px.as_ref().clone(),
            ImageSource::File(path) => {
                let img = image::open(path)
                    .map_err(|e| DatasetError::Decode { path: path.clone(), reason: e.to_string() })?
                    .to_rgb8();
                if img.dimensions() != (entry.width, entry.height) {
                    return Err(DatasetError::SizeMismatch {
                        path: path.clone(),
                        width: entry.width,
                        height: entry.height,
                        actual_w: img.width(),
                        actual_h: img.height(),
                    });
                }
                let mut px = img.into_raw();
                px.chunks_exact_mut(3).for_each(|p| p.swap(0, 2));
                px
            }
        };
        Ok(FrameMessage {
            session_id: session_id.to_string(),
            frame_id: entry.frame_id,
            rows: entry.height,
            cols: entry.width,
            channels: 3,
            element_type: ElementType::U8,
            pixel_data,
            end_of_stream: false,
        })
    }

    /// The annotations as a COCO document.
    pub fn to_coco(&self) -> CocoFile {
        CocoFile {
            images: self
                .frames
                .iter()
                .map(|f| CocoImage { id: f.frame_id, file_name: f.file_name.clone(), width: f.width, height: f.height })
                .collect(),
            annotations: self
                .annotations
                .values()
                .flatten()
                .map(|g| CocoAnnotation {
                    image_id: g.frame_id,
                    category_id: g.class_id,
                    bbox: [g.bbox.x0, g.bbox.y0, g.bbox.width(), g.bbox.height()],
                })
                .collect(),
            categories: self.classes.iter().map(|(&id, name)| CocoCategory { id, name: name.clone() }).collect(),
        }
    }

    /// Writes every frame as a PNG into `image_dir` and the annotations to
    /// `annotation_file`, in the layout [`load_dataset`] reads.
    pub fn write_coco(&self, image_dir: &Path, annotation_file: &Path) -> Result<(), DatasetError> {
        let io = |path: &Path, e: &dyn std::fmt::Display| DatasetError::Io { path: path.into(), reason: e.to_string() };
        fs::create_dir_all(image_dir).map_err(|e| io(image_dir, &e))?;
        for f in &self.frames {
            let msg = self.frame_message(f, "_")?;
            let path = image_dir.join(&f.file_name);
            write_bgr_image(&path, f.width, f.height, &msg.pixel_data)?;
        }
        let json = serde_json::to_string_pretty(&self.to_coco()).expect("COCO document serializes");
        fs::write(annotation_file, json).map_err(|e| io(annotation_file, &e))
    }
}

/// Saves interleaved BGR pixels; the format follows the file extension.
pub fn write_bgr_image(path: &Path, width: u32, height: u32, bgr: &[u8]) -> Result<(), DatasetError> {
    let mut rgb = bgr.to_vec();
    rgb.chunks_exact_mut(3).for_each(|p| p.swap(0, 2));
    let img = image::RgbImage::from_raw(width, height, rgb).ok_or_else(|| DatasetError::Decode {
        path: path.into(),
        reason: format!("{} bytes do not form a {width}x{height} BGR image", bgr.len()),
    })?;
    img.save(path).map_err(|e| DatasetError::Io { path: path.into(), reason: e.to_string() })
}
