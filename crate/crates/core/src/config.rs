//! Run configuration: one JSON document per run, every field defaulted so
//! `{}` is a complete config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SceneSpec;
use crate::detector::ModelConfig;
use crate::error::{ensure_config, Error, Result};
use crate::objective::ObjectiveConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

fn d_kind() -> OptimizerKind {
    OptimizerKind::Sgd
}
fn d_lr() -> f64 {
    0.01
}
fn d_momentum() -> f64 {
    0.937
}
fn d_wd() -> f64 {
    5e-4
}
fn d_iters() -> usize {
    500
}
fn d_batch() -> usize {
    4
}
fn d_warmup() -> usize {
    50
}
fn d_final() -> f64 {
    0.01
}
fn d_clip() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "d_kind")]
    pub kind: OptimizerKind,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// SGD momentum, or Adam's first-moment decay.
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    /// Applied to convolution and linear weights only.
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_iters")]
    pub iterations: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Steps of linear learning-rate warmup from zero.
    #[serde(default = "d_warmup")]
    pub warmup_steps: usize,
    /// After warmup the rate decays linearly to `lr × final_lr_fraction`.
    #[serde(default = "d_final")]
    pub final_lr_fraction: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

fn d_flip() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training split root; synthesized into `<out>/data/train` when absent.
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub val: Option<PathBuf>,
    #[serde(default = "d_flip")]
    pub flip_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

fn d_ntrain() -> usize {
    64
}
fn d_nval() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default)]
    pub scene: SceneSpec,
    #[serde(default = "d_ntrain")]
    pub n_train: usize,
    #[serde(default = "d_nval")]
    pub n_val: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

fn d_conf() -> f64 {
    0.25
}
fn d_nms() -> f64 {
    0.7
}
fn d_det_conf() -> f64 {
    0.001
}
fn d_eval_batch() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Operating point for precision and recall.
    #[serde(default = "d_conf")]
    pub conf_threshold: f64,
    #[serde(default = "d_nms")]
    pub nms_threshold: f64,
    /// Detections below this confidence are discarded before NMS.
    #[serde(default = "d_det_conf")]
    pub detection_conf: f64,
    #[serde(default = "d_eval_batch")]
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Val,
}

fn d_split() -> EvalSplit {
    EvalSplit::Val
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Overrides `optimizer.iterations` for every row.
    #[serde(default)]
    pub iterations: Option<usize>,
    /// Split the rows are scored on; falls back to train when val is empty.
    #[serde(default = "d_split")]
    pub eval_split: EvalSplit,
}

impl Default for AblationConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// When set, overrides `model.seed`, `synth.scene.seed` and the data-order seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Applies the top-level seed, if any, everywhere it belongs.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.model.seed = s;
            self.synth.scene.seed = s;
        }
        self
    }

    pub fn data_seed(&self) -> u64 {
        self.seed.unwrap_or(self.model.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        self.synth.scene.validate()?;
        let o = &self.optimizer;
        ensure_config!(o.iterations >= 1, "optimizer.iterations must be ≥ 1");
        ensure_config!(o.batch_size >= 1, "optimizer.batch_size must be ≥ 1");
        ensure_config!(o.lr > 0.0 && o.lr.is_finite(), "optimizer.lr must be > 0");
        ensure_config!((0.0..1.0).contains(&o.momentum), "optimizer.momentum must be in [0, 1)");
        ensure_config!(o.weight_decay >= 0.0, "optimizer.weight_decay must be ≥ 0");
        ensure_config!((0.0..=1.0).contains(&o.final_lr_fraction), "optimizer.final_lr_fraction must be in [0, 1]");
        ensure_config!(o.grad_clip >= 0.0, "optimizer.grad_clip must be ≥ 0");
        ensure_config!((0.0..=1.0).contains(&self.data.flip_prob), "data.flip_prob must be in [0, 1]");
        let e = &self.eval;
        ensure_config!((0.0..=1.0).contains(&e.conf_threshold), "eval.conf_threshold must be in [0, 1]");
        ensure_config!(e.nms_threshold > 0.0 && e.nms_threshold < 1.0, "eval.nms_threshold must be in (0, 1)");
        ensure_config!((0.0..=1.0).contains(&e.detection_conf), "eval.detection_conf must be in [0, 1]");
        ensure_config!(e.batch_size >= 1, "eval.batch_size must be ≥ 1");
        if let Some(n) = self.ablation.iterations {
            ensure_config!(n >= 1, "ablation.iterations must be ≥ 1");
        }
        for p in [&self.data.train, &self.data.val].into_iter().flatten() {
            ensure_config!(p.is_dir(), "dataset path {} does not exist", p.display());
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_complete() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
        assert_eq!(c.optimizer.momentum, 0.937);
        assert_eq!(c.model.input_size, 256);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        let c = RunConfig::from_json(r#"{"optimizer": {"iterations": 0}}"#).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_propagates() {
        let c = RunConfig::default().with_seed(Some(9));
        assert_eq!((c.model.seed, c.synth.scene.seed, c.data_seed()), (9, 9, 9));
    }
}
