//! Anchor-free one-stage detector: C2f backbone, SPPF, top-down/bottom-up
//! neck and a decoupled head with distribution-based box regression.
//!
//! Toggle A swaps the SPPF block for its attention-gated variant. Toggle B
//! calibrates the deepest backbone output with context attention and replaces
//! both top-down concat junctions with spatially calibrated fusion. Toggle C
//! only changes the classification loss and so is not visible here.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::boxes::{BBox, DetectionBox};
use crate::cfc_crb::{CfcCrb, DEFAULT_BINS};
use crate::error::{ensure_config, Error, Result};
use crate::nn::{Conv2d, ConvBlock, Ctx, ParamKind, ParamStore, Scope, WeightInit, C2f};
use crate::ops::conv::ConvSpec;
use crate::sfc_g2::{Feature, SfcG2, DEFAULT_GROUPS};
use crate::sppf_lska::{LskaConfig, Sppf};
use crate::tensor::{Scalar, Tensor};

pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Initial classification probability implied by the head bias.
pub const PRIOR_PROB: f64 = 0.01;

const BASE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 1024];
const BASE_DEPTHS: [usize; 4] = [3, 6, 6, 3];

fn default_classes() -> usize {
    crate::data::NUM_CLASSES
}
fn default_width() -> f64 {
    0.25
}
fn default_depth() -> f64 {
    0.33
}
fn default_input() -> usize {
    256
}
fn default_bins() -> usize {
    16
}
fn default_max_channels() -> usize {
    1024
}
fn default_cfc_bins() -> Vec<usize> {
    DEFAULT_BINS.to_vec()
}
fn default_groups() -> usize {
    DEFAULT_GROUPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_width")]
    pub width_multiple: f64,
    #[serde(default = "default_depth")]
    pub depth_multiple: f64,
    #[serde(default = "default_input")]
    pub input_size: usize,
    #[serde(default)]
    pub enable_a: bool,
    #[serde(default)]
    pub enable_b: bool,
    #[serde(default)]
    pub enable_c: bool,
    #[serde(default = "default_bins")]
    pub dfl_bins: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_channels")]
    pub max_channels: usize,
    #[serde(default)]
    pub lska: LskaConfig,
    #[serde(default = "default_cfc_bins")]
    pub cfc_bins: Vec<usize>,
    #[serde(default = "default_groups")]
    pub sfc_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ModelConfig {
    /// YOLOv8s multipliers, for parameter-count reporting.
    pub fn paper_shape() -> Self {
        Self { width_multiple: 0.5, depth_multiple: 0.33, input_size: 640, ..Self::default() }
    }

    pub fn with_toggles(&self, a: bool, b: bool, c: bool) -> Self {
        Self { enable_a: a, enable_b: b, enable_c: c, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.num_classes >= 1, "model.num_classes must be ≥ 1");
        ensure_config!(
            self.width_multiple > 0.0 && self.width_multiple <= 1.0,
            "model.width_multiple must be in (0, 1], got {}",
            self.width_multiple
        );
        ensure_config!(
            self.depth_multiple > 0.0 && self.depth_multiple <= 1.0,
            "model.depth_multiple must be in (0, 1], got {}",
            self.depth_multiple
        );
        ensure_config!(
            self.input_size >= 64 && self.input_size % 32 == 0,
            "model.input_size must be a multiple of 32 and ≥ 64, got {}",
            self.input_size
        );
        ensure_config!(self.dfl_bins >= 2, "model.dfl_bins must be ≥ 2, got {}", self.dfl_bins);
        ensure_config!(self.max_channels >= 8, "model.max_channels must be ≥ 8");
        if self.enable_a {
            self.lska.validate()?;
        }
        if self.enable_b {
            crate::cfc_crb::validate_bins(&self.cfc_bins, usize::MAX, usize::MAX)?;
            ensure_config!(self.sfc_groups >= 1, "model.sfc_groups must be ≥ 1");
        }
        Ok(())
    }

    /// Channel widths of the five backbone stages.
    pub fn channels(&self) -> [usize; 5] {
        BASE_CHANNELS.map(|c| {
            let scaled = (c.min(self.max_channels) as f64 * self.width_multiple / 8.0).ceil() as usize * 8;
            scaled.max(8)
        })
    }

    /// Bottleneck repeats of the four C2f stages.
    pub fn depths(&self) -> [usize; 4] {
        BASE_DEPTHS.map(|n| ((n as f64 * self.depth_multiple).round() as usize).max(1))
    }
}

#[derive(Clone, Debug)]
struct Head {
    box_convs: [ConvBlock; 2],
    box_out: Conv2d,
    cls_convs: [ConvBlock; 2],
    cls_out: Conv2d,
}

#[derive(Clone, Debug)]
struct Network {
    stem: ConvBlock,
    down1: ConvBlock,
    stage1: C2f,
    down2: ConvBlock,
    stage2: C2f,
    down3: ConvBlock,
    stage3: C2f,
    down4: ConvBlock,
    stage4: C2f,
    sppf: Sppf,
    cfc: Option<CfcCrb>,
    sfc4: Option<SfcG2>,
    sfc3: Option<SfcG2>,
    top_down4: C2f,
    top_down3: C2f,
    bottom_up_conv4: ConvBlock,
    bottom_up4: C2f,
    bottom_up_conv5: ConvBlock,
    bottom_up5: C2f,
    heads: Vec<Head>,
}

impl Network {
    fn build<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        let [c0, c1, c2, c3, c4] = cfg.channels();
        let [n1, n2, n3, n4] = cfg.depths();
        let n_neck = n4;
        let mut root = Scope::root(store, cfg.seed);
        let mut bb = root.child("backbone");
        let stem = ConvBlock::new(&mut bb.child("stem"), 3, c0, 3, 2)?;
        let down1 = ConvBlock::new(&mut bb.child("down1"), c0, c1, 3, 2)?;
        let stage1 = C2f::new(&mut bb.child("stage1"), c1, c1, n1, true)?;
        let down2 = ConvBlock::new(&mut bb.child("down2"), c1, c2, 3, 2)?;
        let stage2 = C2f::new(&mut bb.child("stage2"), c2, c2, n2, true)?;
        let down3 = ConvBlock::new(&mut bb.child("down3"), c2, c3, 3, 2)?;
        let stage3 = C2f::new(&mut bb.child("stage3"), c3, c3, n3, true)?;
        let down4 = ConvBlock::new(&mut bb.child("down4"), c3, c4, 3, 2)?;
        let stage4 = C2f::new(&mut bb.child("stage4"), c4, c4, n4, true)?;
        let sppf = Sppf::new(
            &mut bb.child("sppf"),
            c4,
            c4,
            Sppf::POOL_KERNEL,
            cfg.enable_a.then_some(&cfg.lska),
        )?;
        let cfc = if cfg.enable_b { Some(CfcCrb::new(&mut bb.child("cfc"), c4, &cfg.cfc_bins)?) } else { None };
        drop(bb);

        let mut neck = root.child("neck");
        let (sfc4, sfc3, top_down4, top_down3) = if cfg.enable_b {
            (
                Some(SfcG2::new(&mut neck.child("sfc4"), c4, c3, c3, cfg.sfc_groups)?),
                Some(SfcG2::new(&mut neck.child("sfc3"), c3, c2, c2, cfg.sfc_groups)?),
                C2f::new(&mut neck.child("top_down4"), c3, c3, n_neck, false)?,
                C2f::new(&mut neck.child("top_down3"), c2, c2, n_neck, false)?,
            )
        } else {
            (
                None,
                None,
                C2f::new(&mut neck.child("top_down4"), c4 + c3, c3, n_neck, false)?,
                C2f::new(&mut neck.child("top_down3"), c3 + c2, c2, n_neck, false)?,
            )
        };
        let bottom_up_conv4 = ConvBlock::new(&mut neck.child("bottom_up_conv4"), c2, c2, 3, 2)?;
        let bottom_up4 = C2f::new(&mut neck.child("bottom_up4"), c2 + c3, c3, n_neck, false)?;
        let bottom_up_conv5 = ConvBlock::new(&mut neck.child("bottom_up_conv5"), c3, c3, 3, 2)?;
        let bottom_up5 = C2f::new(&mut neck.child("bottom_up5"), c3 + c4, c4, n_neck, false)?;
        drop(neck);

        let bins = cfg.dfl_bins;
        let nc = cfg.num_classes;
        let box_w = 16.max(c2 / 4).max(4 * bins);
        let cls_w = c2.max(nc.min(100));
        let prior = (PRIOR_PROB / (1.0 - PRIOR_PROB)).ln();
        let mut heads = Vec::new();
        for (i, &cin) in [c2, c3, c4].iter().enumerate() {
            let mut h = root.child(&format!("head{i}"));
            let box_convs = [
                ConvBlock::new(&mut h.child("box0"), cin, box_w, 3, 1)?,
                ConvBlock::new(&mut h.child("box1"), box_w, box_w, 3, 1)?,
            ];
            let box_out =
                Conv2d::new(&mut h.child("box_out"), box_w, 4 * bins, (1, 1), ConvSpec::same(1, 1), true, WeightInit::FanIn)?;
            let cls_convs = [
                ConvBlock::new(&mut h.child("cls0"), cin, cls_w, 3, 1)?,
                ConvBlock::new(&mut h.child("cls1"), cls_w, cls_w, 3, 1)?,
            ];
            let mut cs = h.child("cls_out");
            let w = cs.uniform("weight", ParamKind::Weight, &[nc, cls_w, 1, 1], 1.0 / (cls_w as f64).sqrt());
            let b = cs.constant("bias", ParamKind::Bias, &[nc], prior);
            let cls_out = Conv2d {
                weight: w,
                bias: Some(b),
                spec: ConvSpec::same(1, 1),
                in_channels: cls_w,
                out_channels: nc,
            };
            heads.push(Head { box_convs, box_out, cls_convs, cls_out });
        }

        Ok(Self {
            stem,
            down1,
            stage1,
            down2,
            stage2,
            down3,
            stage3,
            down4,
            stage4,
            sppf,
            cfc,
            sfc4,
            sfc3,
            top_down4,
            top_down3,
            bottom_up_conv4,
            bottom_up4,
            bottom_up_conv5,
            bottom_up5,
            heads,
        })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<[Var; 3]> {
        let y = self.stem.forward(cx, x);
        let y = self.down1.forward(cx, y);
        let y = self.stage1.forward(cx, y);
        let y = self.down2.forward(cx, y);
        let p3 = self.stage2.forward(cx, y);
        let y = self.down3.forward(cx, p3);
        let p4 = self.stage3.forward(cx, y);
        let y = self.down4.forward(cx, p4);
        let y = self.stage4.forward(cx, y);
        let mut p5 = self.sppf.forward(cx, y)?;
        if let Some(cfc) = &self.cfc {
            p5 = cfc.forward(cx, p5)?;
        }

        let n4 = match &self.sfc4 {
            Some(sfc) => sfc.forward(cx, Feature { var: p5, stride: 32 }, Feature { var: p4, stride: 16 })?.var,
            None => {
                let up = cx.graph.upsample2(p5);
                cx.graph.concat(&[up, p4], 1)
            }
        };
        let n4 = self.top_down4.forward(cx, n4);
        let n3 = match &self.sfc3 {
            Some(sfc) => sfc.forward(cx, Feature { var: n4, stride: 16 }, Feature { var: p3, stride: 8 })?.var,
            None => {
                let up = cx.graph.upsample2(n4);
                cx.graph.concat(&[up, p3], 1)
            }
        };
        let out3 = self.top_down3.forward(cx, n3);
        let d = self.bottom_up_conv4.forward(cx, out3);
        let cat = cx.graph.concat(&[d, n4], 1);
        let out4 = self.bottom_up4.forward(cx, cat);
        let d = self.bottom_up_conv5.forward(cx, out4);
        let cat = cx.graph.concat(&[d, p5], 1);
        let out5 = self.bottom_up5.forward(cx, cat);
        Ok([out3, out4, out5])
    }
}

/// Head outputs recorded on a tape, one entry per scale.
#[derive(Clone, Debug)]
pub struct HeadVars {
    pub cls: Vec<Var>,
    pub dist: Vec<Var>,
}

/// Per-scale head outputs: class logits `(B, nc, H, W)` and box-distribution
/// logits `(B, 4·bins, H, W)` laid out side-major (`l, t, r, b`).
#[derive(Clone, Debug, PartialEq)]
pub struct RawPredictions<T> {
    pub cls: Vec<Tensor<T>>,
    pub dist: Vec<Tensor<T>>,
    pub strides: Vec<usize>,
    pub num_classes: usize,
    pub dfl_bins: usize,
    /// Input image `(height, width)` in pixels.
    pub input_hw: (usize, usize),
}

impl<T: Scalar> RawPredictions<T> {
    pub fn batch(&self) -> usize {
        self.cls[0].shape()[0]
    }

    pub fn locations(&self) -> Vec<Location> {
        locations(&self.cls.iter().map(|t| (t.shape()[2], t.shape()[3])).collect::<Vec<_>>(), &self.strides)
    }

    pub fn from_graph(g: &Graph<T>, vars: &HeadVars, cfg: &ModelConfig, input_hw: (usize, usize)) -> Self {
        Self {
            cls: vars.cls.iter().map(|&v| g.value(v).clone()).collect(),
            dist: vars.dist.iter().map(|&v| g.value(v).clone()).collect(),
            strides: STRIDES.to_vec(),
            num_classes: cfg.num_classes,
            dfl_bins: cfg.dfl_bins,
            input_hw,
        }
    }
}

/// A grid cell of one head scale; `index` runs over all scales in order
/// (scale, row, column).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Location {
    pub index: usize,
    pub scale: usize,
    pub row: usize,
    pub col: usize,
    pub stride: usize,
    /// Cell centre in input pixels.
    pub cx: f64,
    pub cy: f64,
}

pub fn locations(dims: &[(usize, usize)], strides: &[usize]) -> Vec<Location> {
    let mut out = Vec::new();
    for (scale, (&(h, w), &stride)) in dims.iter().zip(strides).enumerate() {
        for row in 0..h {
            for col in 0..w {
                out.push(Location {
                    index: out.len(),
                    scale,
                    row,
                    col,
                    stride,
                    cx: (col as f64 + 0.5) * stride as f64,
                    cy: (row as f64 + 0.5) * stride as f64,
                });
            }
        }
    }
    out
}

pub struct Detector<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    net: Network,
}

impl<T: Scalar> Detector<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let net = Network::build(cfg, &mut params)?;
        Ok(Self { cfg: cfg.clone(), params, net })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_trainable()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        Detector { cfg: self.cfg.clone(), params: self.params.cast(), net: self.net.clone() }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::contract(format!("detector input must be (B, 3, H, W), got {shape:?}")));
        }
        ensure_config!(
            shape[2] >= 32 && shape[3] >= 32 && shape[2] % 32 == 0 && shape[3] % 32 == 0,
            "input spatial dims must be multiples of 32, got {}×{}",
            shape[2],
            shape[3]
        );
        Ok(())
    }

    /// Records a forward pass of `x` (shape `(B, 3, H, W)`) on `graph`.
    pub fn forward(&self, graph: &mut Graph<T>, x: Var) -> Result<HeadVars> {
        self.forward_with(&mut Ctx::new(graph, &self.params), x)
    }

    /// [`Detector::forward`] reading parameters from `cx` instead of the
    /// model's own store; the store must come from the same architecture.
    pub fn forward_with(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<HeadVars> {
        self.check_input(cx.graph.shape(x))?;
        if cx.params.len() != self.params.len() {
            return Err(Error::contract("parameter store does not belong to this architecture"));
        }
        let mut cx = Ctx::new(cx.graph, cx.params);
        let feats = self.net.forward(&mut cx, x)?;
        let mut cls = Vec::new();
        let mut dist = Vec::new();
        for (head, f) in self.net.heads.iter().zip(feats) {
            let b = head.box_convs[0].forward(&mut cx, f);
            let b = head.box_convs[1].forward(&mut cx, b);
            dist.push(head.box_out.forward(&mut cx, b));
            let c = head.cls_convs[0].forward(&mut cx, f);
            let c = head.cls_convs[1].forward(&mut cx, c);
            cls.push(head.cls_out.forward(&mut cx, c));
        }
        Ok(HeadVars { cls, dist })
    }

    /// Inference with running normalization statistics.
    pub fn predict(&self, images: &Tensor<T>) -> Result<RawPredictions<T>> {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(images.clone());
        let vars = self.forward(&mut g, x)?;
        let s = images.shape();
        Ok(RawPredictions::from_graph(&g, &vars, &self.cfg, (s[2], s[3])))
    }
}

fn softmax_expectation(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut e = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        let p = (l - m).exp();
        z += p;
        e += i as f64 * p;
    }
    e / z
}

/// Expected bin index per side (`l, t, r, b`) at one cell.
pub fn side_distances<T: Scalar>(dist: &Tensor<T>, b: usize, row: usize, col: usize, bins: usize) -> [f64; 4] {
    let (_, _, h, w) = dist.dims4();
    let d = dist.data();
    let mut logits = vec![0.0; bins];
    let mut out = [0.0; 4];
    for (side, o) in out.iter_mut().enumerate() {
        for (k, l) in logits.iter_mut().enumerate() {
            *l = d[((b * 4 * bins + side * bins + k) * h + row) * w + col].f64();
        }
        *o = softmax_expectation(&logits);
    }
    out
}

/// Decodes every cell into at most one detection (its best class), per image.
pub fn decode_predictions<T: Scalar>(raw: &RawPredictions<T>, conf_threshold: f64) -> Result<Vec<Vec<DetectionBox>>> {
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(Error::contract(format!("conf_threshold must be in [0, 1], got {conf_threshold}")));
    }
    let (ih, iw) = raw.input_hw;
    let nc = raw.num_classes;
    let mut out = vec![Vec::new(); raw.batch()];
    for loc in raw.locations() {
        let cls = &raw.cls[loc.scale];
        let (_, _, h, w) = cls.dims4();
        for (b, dets) in out.iter_mut().enumerate() {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..nc {
                let l = cls.data()[((b * nc + c) * h + loc.row) * w + loc.col].f64();
                if l > best.1 {
                    best = (c, l);
                }
            }
            let conf = 1.0 / (1.0 + (-best.1).exp());
            if conf < conf_threshold || conf == 0.0 {
                continue;
            }
            let s = loc.stride as f64;
            let [l, t, r, bt] = side_distances(&raw.dist[loc.scale], b, loc.row, loc.col, raw.dfl_bins);
            let bbox = BBox::new(loc.cx - l * s, loc.cy - t * s, loc.cx + r * s, loc.cy + bt * s).clamp(iw as f64, ih as f64);
            dets.push(DetectionBox { class_id: best.0, confidence: conf, bbox });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_widths_and_depths() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.channels(), [16, 32, 64, 128, 256]);
        assert_eq!(cfg.depths(), [1, 2, 2, 1]);
        assert_eq!(ModelConfig::paper_shape().channels(), [32, 64, 128, 256, 512]);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = [
            ModelConfig { input_size: 100, ..Default::default() },
            ModelConfig { num_classes: 0, ..Default::default() },
            ModelConfig { dfl_bins: 1, ..Default::default() },
            ModelConfig { width_multiple: 0.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(Detector::<f32>::new(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn one_hot_distribution_decodes_to_bin_index() {
        let bins = 16;
        let mut dist = Tensor::<f64>::full(&[1, 4 * bins, 4, 4], -50.0);
        // Cell (1, 1) at stride 8 has centre (12, 12).
        for side in 0..4 {
            let c = side * bins + 2;
            dist.data_mut()[(c * 4 + 1) * 4 + 1] = 50.0;
        }
        let d = side_distances(&dist, 0, 1, 1, bins);
        assert!(d.iter().all(|&v| (v - 2.0).abs() < 1e-12));
        let raw = RawPredictions {
            cls: vec![Tensor::from_fn(&[1, 1, 4, 4], |i| if i == 5 { 5.0 } else { -50.0 })],
            dist: vec![dist],
            strides: vec![8],
            num_classes: 1,
            dfl_bins: bins,
            input_hw: (32, 32),
        };
        let dets = decode_predictions(&raw, 0.5).unwrap();
        assert_eq!(dets[0].len(), 1);
        assert_eq!(dets[0][0].bbox, BBox::new(0.0, 0.0, 28.0, 28.0));
    }

    #[test]
    fn very_negative_logits_decode_to_nothing() {
        let raw = RawPredictions {
            cls: vec![Tensor::<f32>::full(&[2, 3, 4, 4], -1e4)],
            dist: vec![Tensor::zeros(&[2, 8, 4, 4])],
            strides: vec![8],
            num_classes: 3,
            dfl_bins: 2,
            input_hw: (32, 32),
        };
        assert!(decode_predictions(&raw, 0.01).unwrap().iter().all(|d| d.is_empty()));
        assert!(decode_predictions(&raw, 1.5).is_err());
    }
}
