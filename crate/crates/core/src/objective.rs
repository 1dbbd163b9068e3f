//! Task-aligned assignment and the detection loss: classification (plain BCE
//! or the adaptive threshold focal form), complete-IoU box regression and
//! distribution focal loss.
//!
//! The loss is evaluated outside the tape. [`loss_with_targets`] returns the
//! breakdown plus the gradient of the weighted total with respect to every
//! head output, which then seeds the reverse pass of the network.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox, GtBox};
use crate::detector::RawPredictions;
use crate::error::{ensure_config, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Guards divisions in the IoU terms.
pub const IOU_EPS: f64 = 1e-7;
/// DFL targets stay this far below the last bin.
pub const DFL_MARGIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauMode {
    Fixed,
    BatchAdaptive,
}

fn d_gamma() -> f64 {
    2.0
}
fn d_tau() -> f64 {
    0.25
}
fn d_tau_mode() -> TauMode {
    TauMode::BatchAdaptive
}
fn d_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtfConfig {
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    /// Initial (or fixed) confidence threshold.
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_tau_mode")]
    pub tau_mode: TauMode,
    #[serde(default = "d_momentum")]
    pub tau_momentum: f64,
    /// Per-class multipliers; empty means 1 for every class.
    #[serde(default)]
    pub class_weights: Vec<f64>,
}

impl Default for AtfConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl AtfConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.gamma >= 0.0 && self.gamma.is_finite(), "atf.gamma must be ≥ 0, got {}", self.gamma);
        ensure_config!((0.0..1.0).contains(&self.tau), "atf.tau must be in [0, 1), got {}", self.tau);
        ensure_config!(
            (0.0..1.0).contains(&self.tau_momentum),
            "atf.tau_momentum must be in [0, 1), got {}",
            self.tau_momentum
        );
        ensure_config!(
            self.class_weights.iter().all(|w| w.is_finite() && *w >= 0.0),
            "atf.class_weights must be non-negative"
        );
        Ok(())
    }

    fn class_weight(&self, c: usize) -> f64 {
        self.class_weights.get(c).copied().unwrap_or(1.0)
    }
}

fn d_k() -> usize {
    10
}
fn d_alpha() -> f64 {
    0.5
}
fn d_beta() -> f64 {
    6.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignerConfig {
    #[serde(default = "d_k")]
    pub top_k: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
}

impl Default for AssignerConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

fn d_wcls() -> f64 {
    0.5
}
fn d_wbox() -> f64 {
    7.5
}
fn d_wdfl() -> f64 {
    1.5
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "d_wcls")]
    pub cls: f64,
    #[serde(default = "d_wbox", rename = "box")]
    pub box_: f64,
    #[serde(default = "d_wdfl")]
    pub dfl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: d_wcls(), box_: d_wbox(), dfl: d_wdfl() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default)]
    pub atf: AtfConfig,
    #[serde(default)]
    pub assigner: AssignerConfig,
    #[serde(default)]
    pub weights: LossWeights,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.atf.validate()?;
        ensure_config!(self.assigner.top_k >= 1, "assigner.top_k must be ≥ 1");
        ensure_config!(self.assigner.alpha >= 0.0 && self.assigner.beta >= 0.0, "assigner.alpha and beta must be ≥ 0");
        let w = self.weights;
        ensure_config!(w.cls >= 0.0 && w.box_ >= 0.0 && w.dfl >= 0.0, "loss weights must be ≥ 0");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    #[serde(rename = "box")]
    pub box_loss: f64,
    pub dfl: f64,
    pub total: f64,
    pub weights: LossWeights,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with a soft target.
pub fn bce(p: f64, target: f64) -> f64 {
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// `((1 − p_t)/(1 − τ))^γ` above the threshold, 1 at or below it.
pub fn atf_factor(p_t: f64, gamma: f64, tau: f64) -> f64 {
    if p_t > tau {
        ((1.0 - p_t) / (1.0 - tau)).powf(gamma)
    } else {
        1.0
    }
}

/// Adaptive threshold focal loss of one probability. Any positive target
/// marks a positive sample (`p_t = p`); a zero target a negative one.
pub fn atf_loss(p: f64, target: f64, gamma: f64, tau: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::contract(format!("atf_loss needs p in (0, 1), got {p}")));
    }
    ensure_config!(gamma >= 0.0, "atf gamma must be ≥ 0, got {gamma}");
    let p_t = if target > 0.0 { p } else { 1.0 - p };
    Ok(atf_factor(p_t, gamma, tau) * bce(p, target))
}

/// BCE on a logit: `(loss, d loss / d x)`.
pub fn bce_with_logits(x: f64, target: f64) -> (f64, f64) {
    let loss = target * softplus(-x) + (1.0 - target) * softplus(x);
    (loss, sigmoid(x) - target)
}

/// Adaptive threshold focal loss on a logit: `(loss, d loss / d x)`.
pub fn atf_with_logits(x: f64, target: f64, gamma: f64, tau: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let (ce, dce) = bce_with_logits(x, target);
    let positive = target > 0.0;
    let (p_t, q) = if positive { (p, sigmoid(-x)) } else { (1.0 - p, p) };
    if p_t <= tau {
        return (ce, dce);
    }
    let f = (q / (1.0 - tau)).powf(gamma);
    // d f / d x simplifies because dq/dx = ∓ p·(1 − p) and q is one of the two factors.
    let df = if positive { -gamma * f * p } else { gamma * f * sigmoid(-x) };
    (f * ce, f * dce + ce * df)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Expected bin index `Σ i·S_i`.
pub fn dfl_expectation(logits: &[f64]) -> f64 {
    log_softmax(logits).iter().enumerate().map(|(i, l)| i as f64 * l.exp()).sum()
}

/// Gradient of [`dfl_expectation`]: `S_j·(j − E)`.
pub fn dfl_expectation_grad(logits: &[f64]) -> (f64, Vec<f64>) {
    let s: Vec<f64> = log_softmax(logits).iter().map(|l| l.exp()).collect();
    let e: f64 = s.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
    (e, s.iter().enumerate().map(|(j, p)| p * (j as f64 - e)).collect())
}

/// Distribution focal loss against the two bins bracketing `y`:
/// `(loss, d loss / d logits)`.
pub fn dfl_loss(logits: &[f64], y: f64) -> Result<(f64, Vec<f64>)> {
    let n = logits.len();
    if n < 2 {
        return Err(Error::contract("dfl needs at least two bins"));
    }
    if !(0.0..=(n - 1) as f64).contains(&y) {
        return Err(Error::contract(format!("dfl target {y} outside [0, {}]", n - 1)));
    }
    let l = (y.floor() as usize).min(n - 2);
    let (wl, wr) = (l as f64 + 1.0 - y, y - l as f64);
    let ls = log_softmax(logits);
    let loss = -(wl * ls[l] + wr * ls[l + 1]);
    let mut grad: Vec<f64> = ls.iter().map(|v| v.exp() * (wl + wr)).collect();
    grad[l] -= wl;
    grad[l + 1] -= wr;
    Ok((loss, grad))
}

/// Complete IoU of two corner boxes `[x1, y1, x2, y2]`.
pub fn ciou(pred: [f64; 4], gt: [f64; 4]) -> f64 {
    1.0 - ciou_loss(pred, gt).0
}

/// `1 − CIoU` and its gradient with respect to the predicted corners.
pub fn ciou_loss(pred: [f64; 4], gt: [f64; 4]) -> (f64, [f64; 4]) {
    let [x1, y1, x2, y2] = pred;
    let [gx1, gy1, gx2, gy2] = gt;
    let eps = IOU_EPS;
    let (w1, h1) = (x2 - x1, y2 - y1 + eps);
    let (w2, h2) = (gx2 - gx1, gy2 - gy1 + eps);

    let iw_raw = x2.min(gx2) - x1.max(gx1);
    let ih_raw = y2.min(gy2) - y1.max(gy1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = w1 * h1 + w2 * h2 - inter + eps;
    let iou = inter / union;

    let cw = x2.max(gx2) - x1.min(gx1);
    let chh = y2.max(gy2) - y1.min(gy1);
    let c2 = cw * cw + chh * chh + eps;
    let (dx, dy) = (gx1 + gx2 - x1 - x2, gy1 + gy2 - y1 - y2);
    let rho2 = (dx * dx + dy * dy) / 4.0;

    let k = 4.0 / (PI * PI);
    let (t1, t2) = ((w1 / h1).atan(), (w2 / h2).atan());
    let v = k * (t2 - t1).powi(2);
    let den = v - iou + 1.0 + eps;
    let alpha = v / den;
    let value = iou - (rho2 / c2 + v * alpha);

    // Reverse pass; d loss = −d value.
    let g_iou = -(1.0 - v * v / (den * den));
    let g_v = alpha + v * (1.0 + eps - iou) / (den * den);
    let g_rho2 = 1.0 / c2;
    let g_c2 = -rho2 / (c2 * c2);

    let mut g = [0.0; 4];
    // IoU through the intersection and the predicted area.
    let g_inter = g_iou * (union + inter) / (union * union);
    let g_a1 = -g_iou * inter / (union * union);
    let (g_iw, g_ih) = (g_inter * ih, g_inter * iw);
    if iw_raw > 0.0 {
        if x2 < gx2 {
            g[2] += g_iw;
        }
        if x1 > gx1 {
            g[0] -= g_iw;
        }
    }
    if ih_raw > 0.0 {
        if y2 < gy2 {
            g[3] += g_ih;
        }
        if y1 > gy1 {
            g[1] -= g_ih;
        }
    }
    let (mut g_w1, mut g_h1) = (g_a1 * h1, g_a1 * w1);
    // Aspect term.
    let g_t1 = g_v * k * 2.0 * (t2 - t1) * -1.0;
    let r2 = w1 * w1 + h1 * h1;
    g_w1 += g_t1 * h1 / r2;
    g_h1 -= g_t1 * w1 / r2;
    g[2] += g_w1;
    g[0] -= g_w1;
    g[3] += g_h1;
    g[1] -= g_h1;
    // Enclosing diagonal.
    let (g_cw, g_ch) = (g_c2 * 2.0 * cw, g_c2 * 2.0 * chh);
    if x2 > gx2 {
        g[2] += g_cw;
    }
    if x1 < gx1 {
        g[0] -= g_cw;
    }
    if y2 > gy2 {
        g[3] += g_ch;
    }
    if y1 < gy1 {
        g[1] -= g_ch;
    }
    // Centre distance.
    let (g_dx, g_dy) = (g_rho2 * dx / 2.0, g_rho2 * dy / 2.0);
    g[0] -= g_dx;
    g[2] -= g_dx;
    g[1] -= g_dy;
    g[3] -= g_dy;
    (1.0 - value, g)
}

/// Box regression loss `1 − CIoU` on [`BBox`] values.
pub fn box_regression_loss(pred: &BBox, gt: &BBox) -> f64 {
    ciou_loss([pred.x1, pred.y1, pred.x2, pred.y2], [gt.x1, gt.y1, gt.x2, gt.y2]).0
}

/// Dense assignment inputs, location-major (`[loc * n_gt + gt]`).
pub struct AssignInput<'a> {
    pub n_locations: usize,
    pub n_gt: usize,
    /// Predicted probability of each ground truth's class.
    pub scores: &'a [f64],
    pub ious: &'a [f64],
    /// Whether the location's cell centre lies inside the ground truth.
    pub candidate: &'a [bool],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    pub positive: Vec<bool>,
    pub gt_index: Vec<Option<usize>>,
    /// Alignment `score^α · iou^β` with the matched ground truth (0 for negatives).
    pub alignment: Vec<f64>,
    pub per_gt_count: Vec<usize>,
}

pub fn task_aligned_assign(input: &AssignInput<'_>, k: usize, alpha: f64, beta: f64) -> Result<AssignmentResult> {
    ensure_config!(k >= 1, "assigner top_k must be ≥ 1");
    let (n, m) = (input.n_locations, input.n_gt);
    let len = n * m;
    if input.scores.len() != len || input.ious.len() != len || input.candidate.len() != len {
        return Err(Error::contract("assignment inputs must be n_locations × n_gt"));
    }
    let mut gt_index: Vec<Option<usize>> = vec![None; n];
    let mut alignment = vec![0.0; n];
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for j in 0..m {
        cand.clear();
        for loc in 0..n {
            if input.candidate[loc * m + j] {
                let i = loc * m + j;
                cand.push((input.scores[i].powf(alpha) * input.ious[i].powf(beta), loc));
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(t, loc) in cand.iter().take(k) {
            // Ground truths are visited in index order, so a tie keeps the lower index.
            if gt_index[loc].is_none() || t > alignment[loc] {
                gt_index[loc] = Some(j);
                alignment[loc] = t;
            }
        }
    }
    let mut per_gt_count = vec![0; m];
    for j in gt_index.iter().flatten() {
        per_gt_count[*j] += 1;
    }
    Ok(AssignmentResult { positive: gt_index.iter().map(Option::is_some).collect(), gt_index, alignment, per_gt_count })
}

/// Training target of one positive location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositiveTarget {
    pub gt: usize,
    pub class_id: usize,
    /// Soft classification target for `class_id`.
    pub score: f64,
    /// Ground-truth box in input pixels.
    pub bbox: BBox,
}

/// Per-image, per-location targets (location order as in [`RawPredictions::locations`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub per_image: Vec<Vec<Option<PositiveTarget>>>,
}

impl Targets {
    pub fn num_positive(&self) -> usize {
        self.per_image.iter().flatten().filter(|t| t.is_some()).count()
    }
}

fn dist_logits<T: Scalar>(dist: &Tensor<T>, b: usize, side: usize, row: usize, col: usize, bins: usize, out: &mut [f64]) {
    let (_, _, h, w) = dist.dims4();
    let d = dist.data();
    for (k, o) in out.iter_mut().enumerate() {
        *o = d[((b * 4 * bins + side * bins + k) * h + row) * w + col].f64();
    }
}

/// Soft class target of a positive: its alignment relative to the best match
/// of its ground truth, scaled by that ground truth's best IoU. No absolute
/// epsilon: one would zero every target once scores shrink, and training
/// would then drift to all-background.
pub fn soft_target(alignment: f64, max_alignment: f64, max_iou: f64) -> f64 {
    if max_alignment > 0.0 {
        alignment * max_iou / max_alignment
    } else {
        0.0
    }
}

/// Runs the assigner on the current predictions. Targets carry no gradient.
pub fn build_targets<T: Scalar>(raw: &RawPredictions<T>, gts: &[Vec<GtBox>], cfg: &AssignerConfig) -> Result<Targets> {
    let batch = raw.batch();
    if gts.len() != batch {
        return Err(Error::contract(format!("{} ground-truth lists for a batch of {batch}", gts.len())));
    }
    let locs = raw.locations();
    let nc = raw.num_classes;
    let bins = raw.dfl_bins;
    let mut per_image = Vec::with_capacity(batch);
    let mut logits = vec![0.0; bins];
    for (b, image_gts) in gts.iter().enumerate() {
        let valid: Vec<&GtBox> = image_gts.iter().filter(|g| g.bbox.area() > 0.0).collect();
        for g in &valid {
            if g.class_id >= nc {
                return Err(Error::contract(format!("ground-truth class {} ≥ {nc}", g.class_id)));
            }
        }
        let m = valid.len();
        let mut targets = vec![None; locs.len()];
        if m == 0 {
            per_image.push(targets);
            continue;
        }
        let n = locs.len();
        let mut scores = vec![0.0; n * m];
        let mut ious = vec![0.0; n * m];
        let mut candidate = vec![false; n * m];
        for loc in &locs {
            let cls = &raw.cls[loc.scale];
            let (_, _, h, w) = cls.dims4();
            let s = loc.stride as f64;
            let mut d = [0.0; 4];
            for (side, v) in d.iter_mut().enumerate() {
                dist_logits(&raw.dist[loc.scale], b, side, loc.row, loc.col, bins, &mut logits);
                *v = dfl_expectation(&logits) * s;
            }
            let pred = BBox::new(loc.cx - d[0], loc.cy - d[1], loc.cx + d[2], loc.cy + d[3]);
            for (j, g) in valid.iter().enumerate() {
                let i = loc.index * m + j;
                candidate[i] = g.bbox.contains(loc.cx, loc.cy);
                if candidate[i] {
                    let x = cls.data()[((b * nc + g.class_id) * h + loc.row) * w + loc.col].f64();
                    scores[i] = sigmoid(x);
                    ious[i] = iou(&pred, &g.bbox);
                }
            }
        }
        let input = AssignInput { n_locations: n, n_gt: m, scores: &scores, ious: &ious, candidate: &candidate };
        let a = task_aligned_assign(&input, cfg.top_k, cfg.alpha, cfg.beta)?;
        let mut max_t = vec![0.0f64; m];
        let mut max_iou = vec![0.0f64; m];
        for (loc, j) in a.gt_index.iter().enumerate() {
            if let Some(j) = *j {
                max_t[j] = max_t[j].max(a.alignment[loc]);
                max_iou[j] = max_iou[j].max(ious[loc * m + j]);
            }
        }
        for (loc, j) in a.gt_index.iter().enumerate() {
            if let Some(j) = *j {
                let score = soft_target(a.alignment[loc], max_t[j], max_iou[j]);
                targets[loc] = Some(PositiveTarget { gt: j, class_id: valid[j].class_id, score, bbox: valid[j].bbox });
            }
        }
        per_image.push(targets);
    }
    Ok(Targets { per_image })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClsLoss {
    Bce,
    Atf { gamma: f64, tau: f64 },
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub breakdown: LossBreakdown,
    /// `d total / d` class logits, per scale.
    pub grad_cls: Vec<Tensor<T>>,
    /// `d total / d` box-distribution logits, per scale.
    pub grad_dist: Vec<Tensor<T>>,
    pub num_positive: usize,
    pub target_score_sum: f64,
    /// Mean predicted probability over positive samples.
    pub mean_positive_p: Option<f64>,
}

/// Loss for fixed targets.
pub fn loss_with_targets<T: Scalar>(
    raw: &RawPredictions<T>,
    targets: &Targets,
    cls_loss: ClsLoss,
    cfg: &ObjectiveConfig,
) -> Result<LossOutput<T>> {
    let batch = raw.batch();
    if targets.per_image.len() != batch {
        return Err(Error::contract("targets do not match the batch"));
    }
    let nc = raw.num_classes;
    let bins = raw.dfl_bins;
    let w = cfg.weights;
    let locs = raw.locations();
    let score_sum: f64 = targets.per_image.iter().flatten().flatten().map(|t| t.score).sum();
    let norm = score_sum.max(1.0);

    let mut grad_cls: Vec<Vec<f64>> = raw.cls.iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut grad_dist: Vec<Vec<f64>> = raw.dist.iter().map(|t| vec![0.0; t.numel()]).collect();
    let (mut cls_sum, mut box_sum, mut dfl_sum) = (0.0, 0.0, 0.0);
    let (mut pos_p, mut pos_n) = (0.0, 0usize);
    let mut logits = vec![0.0; bins];

    for (b, image_targets) in targets.per_image.iter().enumerate() {
        if image_targets.len() != locs.len() {
            return Err(Error::contract("targets do not match the prediction grid"));
        }
        for loc in &locs {
            let cls = &raw.cls[loc.scale];
            let (_, _, h, wd) = cls.dims4();
            let target = image_targets[loc.index];
            for c in 0..nc {
                let i = ((b * nc + c) * h + loc.row) * wd + loc.col;
                let x = cls.data()[i].f64();
                let t = match target {
                    Some(p) if p.class_id == c => p.score,
                    _ => 0.0,
                };
                let (l, g) = match cls_loss {
                    ClsLoss::Bce => bce_with_logits(x, t),
                    ClsLoss::Atf { gamma, tau } => {
                        let cw = cfg.atf.class_weight(c);
                        let (l, g) = atf_with_logits(x, t, gamma, tau);
                        (cw * l, cw * g)
                    }
                };
                if t > 0.0 {
                    pos_p += sigmoid(x);
                    pos_n += 1;
                }
                cls_sum += l;
                grad_cls[loc.scale][i] += w.cls * g / norm;
            }

            let Some(p) = target else { continue };
            let s = loc.stride as f64;
            let (ax, ay) = (loc.cx / s, loc.cy / s);
            let gt = [p.bbox.x1 / s, p.bbox.y1 / s, p.bbox.x2 / s, p.bbox.y2 / s];
            let mut e = [0.0; 4];
            let mut de: Vec<Vec<f64>> = Vec::with_capacity(4);
            let mut side_logits: Vec<Vec<f64>> = Vec::with_capacity(4);
            for side in 0..4 {
                dist_logits(&raw.dist[loc.scale], b, side, loc.row, loc.col, bins, &mut logits);
                let (ev, g) = dfl_expectation_grad(&logits);
                e[side] = ev;
                de.push(g);
                side_logits.push(logits.clone());
            }
            let pred = [ax - e[0], ay - e[1], ax + e[2], ay + e[3]];
            let (bl, bg) = ciou_loss(pred, gt);
            box_sum += p.score * bl;
            let g_side = [-bg[0], -bg[1], bg[2], bg[3]];
            let hi = bins as f64 - 1.0 - DFL_MARGIN;
            let ltrb = [ax - gt[0], ay - gt[1], gt[2] - ax, gt[3] - ay];
            let (_, _, h, wd) = raw.dist[loc.scale].dims4();
            for side in 0..4 {
                let y = ltrb[side].clamp(0.0, hi);
                let (dl, dg) = dfl_loss(&side_logits[side], y)?;
                dfl_sum += p.score * dl / 4.0;
                for k in 0..bins {
                    let i = ((b * 4 * bins + side * bins + k) * h + loc.row) * wd + loc.col;
                    let box_g = w.box_ * p.score * g_side[side] * de[side][k];
                    let dfl_g = w.dfl * p.score * dg[k] / 4.0;
                    grad_dist[loc.scale][i] += (box_g + dfl_g) / norm;
                }
            }
        }
    }
    let (cls, box_loss, dfl) = (cls_sum / norm, box_sum / norm, dfl_sum / norm);
    let breakdown = LossBreakdown { cls, box_loss, dfl, total: w.cls * cls + w.box_ * box_loss + w.dfl * dfl, weights: w };
    let to_t = |v: Vec<f64>, like: &Tensor<T>| Tensor::from_vec(like.shape(), v.into_iter().map(T::of).collect());
    Ok(LossOutput {
        breakdown,
        grad_cls: grad_cls.into_iter().zip(&raw.cls).map(|(g, t)| to_t(g, t)).collect(),
        grad_dist: grad_dist.into_iter().zip(&raw.dist).map(|(g, t)| to_t(g, t)).collect(),
        num_positive: targets.num_positive(),
        target_score_sum: score_sum,
        mean_positive_p: (pos_n > 0).then(|| pos_p / pos_n as f64),
    })
}

/// The loss with its one piece of mutable state, the adaptive threshold.
#[derive(Clone, Debug)]
pub struct Objective {
    cfg: ObjectiveConfig,
    adaptive: bool,
    tau: f64,
}

impl Objective {
    /// `adaptive` selects the threshold focal classification loss.
    pub fn new(cfg: &ObjectiveConfig, adaptive: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg: cfg.clone(), adaptive, tau: cfg.atf.tau })
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.cfg
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn cls_loss(&self) -> ClsLoss {
        if self.adaptive {
            ClsLoss::Atf { gamma: self.cfg.atf.gamma, tau: self.tau }
        } else {
            ClsLoss::Bce
        }
    }

    pub fn compute<T: Scalar>(&self, raw: &RawPredictions<T>, gts: &[Vec<GtBox>]) -> Result<LossOutput<T>> {
        let targets = build_targets(raw, gts, &self.cfg.assigner)?;
        loss_with_targets(raw, &targets, self.cls_loss(), &self.cfg)
    }

    /// Moves the threshold toward this step's mean positive confidence.
    pub fn update<T>(&mut self, out: &LossOutput<T>) {
        if !self.adaptive || self.cfg.atf.tau_mode != TauMode::BatchAdaptive {
            return;
        }
        if let Some(p) = out.mean_positive_p {
            let m = self.cfg.atf.tau_momentum;
            self.tau = (m * self.tau + (1.0 - m) * p).clamp(0.0, 0.99);
        }
    }
}
