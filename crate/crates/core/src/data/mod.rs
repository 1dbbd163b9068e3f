//! Dataset plumbing: the class catalog, YOLO text labels, letterboxing and a
//! deterministic synthetic classroom generator.

mod letterbox;
mod synth;
mod yolo;

pub use letterbox::{image_to_tensor, letterbox, Letterbox, PAD_GRAY};
pub use synth::{export_dataset, synthesize_scene, write_manifest, ExportSummary, Manifest, SceneSpec};
pub use yolo::{format_label_line, load_yolo_dataset, parse_label_file, parse_label_line, LabeledBox, YoloDataset};

pub const NUM_CLASSES: usize = 7;

/// Behaviour classes in their fixed label order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "sitting_listening",
    "looking_down",
    "looking_around",
    "reading",
    "writing",
    "standing",
    "hand_raising",
];

pub fn class_name(id: usize) -> Option<&'static str> {
    CLASS_NAMES.get(id).copied()
}

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&n| n == name)
}
