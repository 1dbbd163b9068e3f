use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::yolo::{format_label_line, LabeledBox};
use super::{CLASS_NAMES, NUM_CLASSES};
use crate::boxes::BBox;
use crate::error::{ensure_config, Error, Result};
use crate::nn::stream_seed;

fn d_rows() -> usize {
    3
}
fn d_cols() -> usize {
    4
}
fn d_occupancy() -> f64 {
    0.9
}
fn d_freq() -> Vec<f64> {
    vec![0.4, 0.2, 0.15, 0.1, 0.08, 0.05, 0.02]
}
fn d_occlusion() -> f64 {
    0.15
}
fn d_jitter() -> [f64; 2] {
    [0.8, 1.0]
}
fn d_size() -> u32 {
    256
}

/// Desk-grid scene layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default = "d_rows")]
    pub rows: usize,
    #[serde(default = "d_cols")]
    pub cols: usize,
    /// Probability that a seat holds a student.
    #[serde(default = "d_occupancy")]
    pub occupancy: f64,
    #[serde(default = "d_freq")]
    pub class_frequencies: Vec<f64>,
    /// Probability that a student leans into the previous seat and overlaps it.
    #[serde(default = "d_occlusion")]
    pub occlusion: f64,
    /// Glyph scale range relative to the seat height.
    #[serde(default = "d_jitter")]
    pub scale_jitter: [f64; 2],
    #[serde(default = "d_size")]
    pub width: u32,
    #[serde(default = "d_size")]
    pub height: u32,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.rows >= 1 && self.cols >= 1, "scene.rows and scene.cols must be ≥ 1");
        ensure_config!((0.0..=1.0).contains(&self.occupancy), "scene.occupancy must be in [0, 1]");
        ensure_config!((0.0..=1.0).contains(&self.occlusion), "scene.occlusion must be in [0, 1]");
        ensure_config!(
            self.class_frequencies.len() == NUM_CLASSES,
            "scene.class_frequencies must have {NUM_CLASSES} entries, got {}",
            self.class_frequencies.len()
        );
        ensure_config!(
            self.class_frequencies.iter().all(|&f| f.is_finite() && f >= 0.0),
            "scene.class_frequencies must be non-negative"
        );
        let sum: f64 = self.class_frequencies.iter().sum();
        ensure_config!((sum - 1.0).abs() <= 1e-9, "scene.class_frequencies must sum to 1, got {sum}");
        let [lo, hi] = self.scale_jitter;
        ensure_config!(lo > 0.0 && lo <= hi && hi <= 1.0, "scene.scale_jitter must satisfy 0 < min ≤ max ≤ 1");
        ensure_config!(self.width >= 32 && self.height >= 32, "scene.width and scene.height must be ≥ 32");
        ensure_config!(
            self.height as usize / self.rows >= 16 && self.width as usize / self.cols >= 12,
            "scene grid {}×{} is too dense for a {}×{} image",
            self.rows,
            self.cols,
            self.width,
            self.height
        );
        Ok(())
    }
}

const BACKGROUND: [u8; 3] = [205, 200, 185];
const DESK: [u8; 3] = [140, 100, 60];
const SKIN: [u8; 3] = [235, 195, 160];
const PAPER: [u8; 3] = [245, 245, 240];
const INK: [u8; 3] = [30, 30, 35];
const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [70, 110, 200],
    [200, 80, 70],
    [70, 170, 90],
    [220, 170, 40],
    [150, 80, 190],
    [40, 170, 180],
    [230, 120, 40],
];

/// Paints onto an image while tracking the painted pixel extent.
struct Canvas<'a> {
    img: &'a mut RgbImage,
    extent: Option<(i64, i64, i64, i64)>,
}

impl Canvas<'_> {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.img.width() as i64 || y >= self.img.height() as i64 {
            return;
        }
        self.img.put_pixel(x as u32, y as u32, Rgb(c));
        self.extent = Some(match self.extent {
            None => (x, y, x, y),
            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
        });
    }

    /// Pixels whose centres fall in `[x0, x1) × [y0, y1)`.
    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: [u8; 3]) {
        for y in (y0 - 0.5).ceil() as i64..(y1 - 0.5).ceil() as i64 {
            for x in (x0 - 0.5).ceil() as i64..(x1 - 0.5).ceil() as i64 {
                self.put(x, y, c);
            }
        }
    }

    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, c: [u8; 3]) {
        for y in (cy - ry).floor() as i64..=(cy + ry).ceil() as i64 {
            for x in (cx - rx).floor() as i64..=(cx + rx).ceil() as i64 {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                if dx * dx + dy * dy <= 1.0 {
                    self.put(x, y, c);
                }
            }
        }
    }

    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), half_width: f64, c: [u8; 3]) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()) * 2.0).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            self.rect(x - half_width, y - half_width, x + half_width, y + half_width, c);
        }
    }
}

/// Draws one student whose seat line is at `gy`, centred on `gx`, with glyph scale `s`.
fn draw_student(cv: &mut Canvas<'_>, class_id: usize, gx: f64, gy: f64, s: f64, side: f64) {
    let body = PALETTE[class_id];
    let tw = 0.5 * s;
    let standing = class_id == 5;
    let th = if standing { 0.6 * s } else { 0.45 * s };
    let legs = if standing { 0.22 * s } else { 0.0 };
    let top = gy - legs - th;
    if standing {
        cv.rect(gx - 0.2 * s, gy - legs, gx - 0.06 * s, gy, INK);
        cv.rect(gx + 0.06 * s, gy - legs, gx + 0.2 * s, gy, INK);
    }
    cv.rect(gx - tw / 2.0, top, gx + tw / 2.0, gy - legs, body);
    let r = 0.15 * s;
    match class_id {
        1 => {
            // Head bowed into the shoulders, crown showing.
            cv.ellipse(gx, top + 0.02 * s, r, 0.8 * r, SKIN);
            cv.ellipse(gx, top - 0.06 * s, r, 0.45 * r, INK);
        }
        2 => {
            let hx = gx + side * 0.14 * s;
            cv.ellipse(hx, top - 0.13 * s, r, r, SKIN);
            cv.rect(hx + side * r - 0.03 * s, top - 0.16 * s, hx + side * r + 0.03 * s, top - 0.1 * s, INK);
        }
        _ => cv.ellipse(gx, top - 0.13 * s, r, r, SKIN),
    }
    match class_id {
        3 => {
            let (cy, bw, bh) = (top + th * 0.5, 0.42 * s, 0.2 * s);
            cv.rect(gx - bw / 2.0, cy - bh / 2.0, gx + bw / 2.0, cy + bh / 2.0, PAPER);
            cv.rect(gx - 0.015 * s, cy - bh / 2.0, gx + 0.015 * s, cy + bh / 2.0, INK);
        }
        4 => {
            cv.rect(gx - 0.2 * s, gy - 0.12 * s, gx + 0.1 * s, gy, PAPER);
            cv.line((gx + 0.02 * s, gy - 0.06 * s), (gx + 0.2 * s, gy - 0.3 * s), 0.025 * s, INK);
        }
        6 => {
            let ax = gx + side * 0.2 * s;
            cv.rect(ax - 0.045 * s, top - 0.55 * s, ax + 0.045 * s, top + 0.05 * s, body);
            cv.ellipse(ax, top - 0.55 * s, 0.06 * s, 0.06 * s, SKIN);
        }
        _ => {}
    }
}

/// Renders scene `index` of `spec`. Deterministic in `(spec, index)`.
pub fn synthesize_scene(spec: &SceneSpec, index: u64) -> Result<(RgbImage, Vec<LabeledBox>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, &format!("scene/{index}")));
    let classes = WeightedIndex::new(&spec.class_frequencies).map_err(|e| Error::config(format!("scene.class_frequencies: {e}")))?;
    let (w, h) = (spec.width, spec.height);
    let mut img = RgbImage::from_pixel(w, h, Rgb(BACKGROUND));
    let cell_w = w as f64 / spec.cols as f64;
    let cell_h = h as f64 / spec.rows as f64;
    let mut boxes = Vec::new();
    for row in 0..spec.rows {
        let desk_y = (row as f64 + 1.0) * cell_h - 0.16 * cell_h;
        Canvas { img: &mut img, extent: None }.rect(0.0, desk_y, w as f64, desk_y + 0.08 * cell_h, DESK);
        for col in 0..spec.cols {
            if !rng.gen_bool(spec.occupancy) {
                continue;
            }
            let class_id = classes.sample(&mut rng);
            let s = cell_h * 0.6 * rng.gen_range(spec.scale_jitter[0]..=spec.scale_jitter[1]);
            let mut gx = (col as f64 + 0.5) * cell_w + rng.gen_range(-0.08..0.08) * cell_w;
            let gy = (row as f64 + 1.0) * cell_h - 0.1 * cell_h + rng.gen_range(-0.04..0.04) * cell_h;
            if col > 0 && rng.gen_bool(spec.occlusion) {
                gx -= 0.4 * cell_w;
            }
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let mut cv = Canvas { img: &mut img, extent: None };
            draw_student(&mut cv, class_id, gx, gy, s, side);
            let Some((x0, y0, x1, y1)) = cv.extent else { continue };
            // One pixel of margin so the glyph lies strictly inside its box.
            let b = BBox::new(x0 as f64 - 1.0, y0 as f64 - 1.0, x1 as f64 + 2.0, y1 as f64 + 2.0).clamp(w as f64, h as f64);
            boxes.push(LabeledBox::from_pixels(class_id, &b, w, h));
        }
    }
    Ok((img, boxes))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub n_images: usize,
    pub counts: [usize; NUM_CLASSES],
}

/// Writes scenes `start..start + n_images` as `images/NNNNNN.png` and
/// `labels/NNNNNN.txt` under `out_root`.
pub fn export_dataset(spec: &SceneSpec, start: u64, n_images: usize, out_root: &Path) -> Result<ExportSummary> {
    spec.validate()?;
    let images = out_root.join("images");
    let labels = out_root.join("labels");
    for d in [&images, &labels] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut summary = ExportSummary { n_images, ..Default::default() };
    for i in 0..n_images as u64 {
        let index = start + i;
        let (img, boxes) = synthesize_scene(spec, index)?;
        let ip = images.join(format!("{index:06}.png"));
        img.save(&ip).map_err(|e| Error::Image { path: ip.clone(), message: e.to_string() })?;
        let mut text = String::new();
        for b in &boxes {
            summary.counts[b.class_id] += 1;
            text.push_str(&format_label_line(b));
            text.push('\n');
        }
        let lp = labels.join(format!("{index:06}.txt"));
        fs::write(&lp, text).map_err(|e| Error::io(&lp, e))?;
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub splits: std::collections::BTreeMap<String, usize>,
    pub counts: std::collections::BTreeMap<String, [usize; NUM_CLASSES]>,
}

impl Manifest {
    pub fn new(splits: &[(&str, &ExportSummary)]) -> Self {
        Self {
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            splits: splits.iter().map(|(k, s)| (k.to_string(), s.n_images)).collect(),
            counts: splits.iter().map(|(k, s)| (k.to_string(), s.counts)).collect(),
        }
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_occupancy_gives_one_box_per_seat() {
        let spec = SceneSpec { occupancy: 1.0, ..Default::default() };
        let (_, boxes) = synthesize_scene(&spec, 0).unwrap();
        assert_eq!(boxes.len(), 12);
    }

    #[test]
    fn one_hot_frequencies() {
        let mut f = vec![0.0; 7];
        f[6] = 1.0;
        let spec = SceneSpec { class_frequencies: f, occupancy: 1.0, ..Default::default() };
        for i in 0..5 {
            assert!(synthesize_scene(&spec, i).unwrap().1.iter().all(|b| b.class_id == 6));
        }
    }

    #[test]
    fn deterministic_per_index() {
        let spec = SceneSpec { seed: 3, ..Default::default() };
        let a = synthesize_scene(&spec, 11).unwrap();
        let b = synthesize_scene(&spec, 11).unwrap();
        assert_eq!(a.0.as_raw(), b.0.as_raw());
        assert_eq!(a.1, b.1);
        assert_ne!(synthesize_scene(&spec, 12).unwrap().0.as_raw(), a.0.as_raw());
    }

    #[test]
    fn glyphs_lie_inside_their_boxes() {
        // Paint each glyph alone and compare its pixels to the emitted box.
        let spec = SceneSpec { occupancy: 1.0, class_frequencies: vec![1.0 / 7.0; 7], rows: 1, cols: 1, ..Default::default() };
        for i in 0..30 {
            let (img, boxes) = synthesize_scene(&spec, i).unwrap();
            let b = boxes[0].to_pixels(img.width(), img.height());
            for (x, y, p) in img.enumerate_pixels() {
                if p.0 != BACKGROUND && p.0 != DESK {
                    let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
                    assert!(b.contains(xf, yf), "pixel ({x},{y}) outside {b:?}");
                }
            }
        }
    }

    #[test]
    fn frequency_validation_names_field() {
        let spec = SceneSpec { class_frequencies: vec![0.5; 7], ..Default::default() };
        match spec.validate() {
            Err(Error::Config(m)) => assert!(m.contains("class_frequencies")),
            other => panic!("{other:?}"),
        }
    }
}
