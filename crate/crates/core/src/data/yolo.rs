use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::NUM_CLASSES;
use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Annotation in normalized centre form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl LabeledBox {
    /// Corner box in pixels of an image with the given size.
    pub fn to_pixels(&self, width: u32, height: u32) -> BBox {
        let (w, h) = (width as f64, height as f64);
        BBox::from_center(self.cx * w, self.cy * h, self.w * w, self.h * h)
    }

    pub fn from_pixels(class_id: usize, b: &BBox, width: u32, height: u32) -> Self {
        let (w, h) = (width as f64, height as f64);
        let (cx, cy) = b.center();
        Self { class_id, cx: cx / w, cy: cy / h, w: b.width() / w, h: b.height() / h }
    }

    fn clamped(self) -> Self {
        let inside = |c: f64, half: f64| c - half >= 0.0 && c + half <= 1.0;
        if inside(self.cx, self.w / 2.0) && inside(self.cy, self.h / 2.0) {
            return self;
        }
        let x1 = (self.cx - self.w / 2.0).clamp(0.0, 1.0);
        let x2 = (self.cx + self.w / 2.0).clamp(0.0, 1.0);
        let y1 = (self.cy - self.h / 2.0).clamp(0.0, 1.0);
        let y2 = (self.cy + self.h / 2.0).clamp(0.0, 1.0);
        Self { class_id: self.class_id, cx: (x1 + x2) / 2.0, cy: (y1 + y2) / 2.0, w: x2 - x1, h: y2 - y1 }
    }
}

pub fn format_label_line(b: &LabeledBox) -> String {
    format!("{} {:.6} {:.6} {:.6} {:.6}", b.class_id, b.cx, b.cy, b.w, b.h)
}

/// Parses one `class cx cy w h` line. `Ok(None)` for blank lines.
pub fn parse_label_line(line: &str) -> std::result::Result<Option<LabeledBox>, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.is_empty() {
        return Ok(None);
    }
    if fields.len() != 5 {
        return Err(format!("expected 5 fields, found {}", fields.len()));
    }
    let class_id: usize = fields[0].parse().map_err(|_| format!("class id {:?} is not a non-negative integer", fields[0]))?;
    if class_id >= NUM_CLASSES {
        return Err(format!("class id {class_id} out of range (0..{NUM_CLASSES})"));
    }
    let mut v = [0.0; 4];
    for (slot, f) in v.iter_mut().zip(&fields[1..]) {
        *slot = f.parse::<f64>().map_err(|_| format!("{f:?} is not a number"))?;
        if !slot.is_finite() || !(0.0..=1.0).contains(slot) {
            return Err(format!("coordinate {f} outside [0, 1]"));
        }
    }
    let b = LabeledBox { class_id, cx: v[0], cy: v[1], w: v[2], h: v[3] }.clamped();
    if b.w <= 0.0 || b.h <= 0.0 {
        return Err("box has zero width or height".into());
    }
    Ok(Some(b))
}

pub fn parse_label_file(path: &Path) -> Result<Vec<LabeledBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        match parse_label_line(line) {
            Ok(Some(b)) => out.push(b),
            Ok(None) => {}
            Err(message) => return Err(Error::Data { path: path.to_path_buf(), line: i + 1, message }),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub stem: String,
    pub image_path: PathBuf,
    pub boxes: Vec<LabeledBox>,
}

/// Images under `root/images/*.png` with labels under `root/labels/<stem>.txt`.
/// Labels are parsed eagerly; images are decoded on access.
#[derive(Clone, Debug)]
pub struct YoloDataset {
    pub root: PathBuf,
    pub items: Vec<DatasetItem>,
}

pub fn load_yolo_dataset(root: impl AsRef<Path>) -> Result<YoloDataset> {
    let root = root.as_ref().to_path_buf();
    let images = root.join("images");
    let labels = root.join("labels");
    let entries = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(&images, e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            paths.push(p);
        }
    }
    paths.sort();
    let mut items = Vec::with_capacity(paths.len());
    for image_path in paths {
        let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let label = labels.join(format!("{stem}.txt"));
        let boxes = if label.exists() { parse_label_file(&label)? } else { Vec::new() };
        items.push(DatasetItem { stem, image_path, boxes });
    }
    Ok(YoloDataset { root, items })
}

impl YoloDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn image(&self, i: usize) -> Result<RgbImage> {
        let p = &self.items[i].image_path;
        let img = image::open(p).map_err(|e| Error::Image { path: p.clone(), message: e.to_string() })?;
        Ok(img.to_rgb8())
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<(RgbImage, &[LabeledBox])>> + '_ {
        (0..self.len()).map(|i| Ok((self.image(i)?, self.items[i].boxes.as_slice())))
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for b in self.items.iter().flat_map(|it| &it.boxes) {
            c[b.class_id] += 1;
        }
        c
    }
}
