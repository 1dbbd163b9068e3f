//! Training loop, whole-dataset evaluation and the toggle ablation.

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode};
use crate::boxes::{BBox, DetectionBox, GtBox};
use crate::config::{OptimizerConfig, OptimizerKind, RunConfig};
use crate::data::{image_to_tensor, letterbox, YoloDataset};
use crate::detector::{decode_predictions, Detector, RawPredictions};
use crate::error::{Error, Result};
use crate::eval::{evaluate, nms, EvalReport};
use crate::nn::{stream_seed, ParamStore};
use crate::objective::{LossBreakdown, Objective};
use crate::tensor::Tensor;

/// A dataset letterboxed to the model input, kept as 8-bit images.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub size: u32,
    pub images: Vec<RgbImage>,
    /// Ground truth in letterboxed pixels.
    pub gts: Vec<Vec<GtBox>>,
}

impl PreparedSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(B, 3, S, S)` batch, mirrored horizontally where `flip[i]` is set.
    pub fn batch(&self, indices: &[usize], flip: &[bool]) -> (Tensor<f32>, Vec<Vec<GtBox>>) {
        let s = self.size as usize;
        let plane = 3 * s * s;
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut gts = Vec::with_capacity(indices.len());
        for (&i, &f) in indices.iter().zip(flip) {
            let img = if f { image::imageops::flip_horizontal(&self.images[i]) } else { self.images[i].clone() };
            data.extend(image_to_tensor::<f32>(&img).into_data());
            let w = self.size as f64;
            gts.push(
                self.gts[i]
                    .iter()
                    .map(|g| {
                        let b = g.bbox;
                        let bbox = if f { BBox::new(w - b.x2, b.y1, w - b.x1, b.y2) } else { b };
                        GtBox { class_id: g.class_id, bbox }
                    })
                    .collect(),
            );
        }
        (Tensor::from_vec(&[indices.len(), 3, s, s], data), gts)
    }
}

pub fn prepare(dataset: &YoloDataset, size: u32, num_classes: usize) -> Result<PreparedSet> {
    let mut images = Vec::with_capacity(dataset.len());
    let mut gts = Vec::with_capacity(dataset.len());
    for (i, item) in dataset.items.iter().enumerate() {
        if let Some(b) = item.boxes.iter().find(|b| b.class_id >= num_classes) {
            return Err(Error::config(format!(
                "{}: class {} does not exist in a {num_classes}-class model",
                item.image_path.display(),
                b.class_id
            )));
        }
        let img = dataset.image(i)?;
        let (out, lb) = letterbox(&img, size)?;
        gts.push(
            item.boxes
                .iter()
                .map(|b| GtBox { class_id: b.class_id, bbox: lb.forward(&b.to_pixels(img.width(), img.height())) })
                .collect(),
        );
        images.push(out);
    }
    Ok(PreparedSet { size, images, gts })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub cls: f64,
    #[serde(rename = "box")]
    pub box_loss: f64,
    pub dfl: f64,
    pub total: f64,
    pub tau: f64,
}

impl StepLog {
    fn new(step: usize, b: &LossBreakdown, tau: f64) -> Self {
        Self { step, cls: b.cls, box_loss: b.box_loss, dfl: b.dfl, total: b.total, tau }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }
}

/// Learning rate at 0-based `step`.
pub fn learning_rate(o: &OptimizerConfig, step: usize) -> f64 {
    if step < o.warmup_steps {
        return o.lr * (step + 1) as f64 / o.warmup_steps as f64;
    }
    let span = o.iterations.saturating_sub(o.warmup_steps).max(1) as f64;
    let t = (step - o.warmup_steps) as f64 / span;
    o.lr * (1.0 - t * (1.0 - o.final_lr_fraction))
}

/// SGD with momentum or Adam; weight decay on decaying kinds only.
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Option<Vec<f32>>>,
    second: Vec<Option<Vec<f32>>>,
    steps: usize,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, n_params: usize) -> Self {
        Self { cfg: cfg.clone(), first: vec![None; n_params], second: vec![None; n_params], steps: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &mut [Option<Tensor<f32>>], lr: f64) {
        if self.cfg.grad_clip > 0.0 {
            let norm: f64 =
                grads.iter().flatten().flat_map(|g| g.data()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm > self.cfg.grad_clip {
                let s = (self.cfg.grad_clip / norm) as f32;
                for g in grads.iter_mut().flatten() {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        self.steps += 1;
        let (lr, mom, wd) = (lr as f32, self.cfg.momentum as f32, self.cfg.weight_decay as f32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let kind = store.kind(id);
            let Some(g) = &grads[id.index()] else { continue };
            if !kind.trainable() {
                continue;
            }
            let decay = if kind.decays() { wd } else { 0.0 };
            let p = store.get_mut(id).data_mut();
            let m = self.first[id.index()].get_or_insert_with(|| vec![0.0; p.len()]);
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    for ((w, &gv), mv) in p.iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *mv = mom * *mv + gv + decay * *w;
                        *w -= lr * *mv;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second[id.index()].get_or_insert_with(|| vec![0.0; p.len()]);
                    let (b1, b2) = (mom, 0.999f32);
                    let c1 = 1.0 - b1.powi(self.steps as i32);
                    let c2 = 1.0 - b2.powi(self.steps as i32);
                    for (((w, &gv), mv), vv) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = b1 * *mv + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        let upd = (*mv / c1) / ((*vv / c2).sqrt() + 1e-8);
                        *w -= lr * (upd + decay * *w);
                    }
                }
            }
        }
    }
}

/// Momentum of the normalization running estimates.
pub const NORM_MOMENTUM: f64 = 0.03;

pub struct TrainOutcome {
    pub last: Detector<f32>,
    /// Parameters that produced the lowest batch loss.
    pub best: Detector<f32>,
    /// Number of updates applied to `best`.
    pub best_step: usize,
    pub best_loss: f64,
    pub log: Vec<StepLog>,
}

/// One optimization step; returns the loss before the update.
pub fn train_step(
    det: &mut Detector<f32>,
    objective: &mut Objective,
    opt: &mut Optimizer,
    images: &Tensor<f32>,
    gts: &[Vec<GtBox>],
    lr: f64,
) -> Result<LossBreakdown> {
    let mut g = Graph::new(Mode::Train);
    let x = g.input(images.clone());
    let vars = det.forward(&mut g, x)?;
    let s = images.shape();
    let raw = RawPredictions::from_graph(&g, &vars, det.config(), (s[2], s[3]));
    let out = objective.compute(&raw, gts)?;
    if !out.breakdown.total.is_finite() {
        return Err(Error::Runtime(format!("non-finite loss {:?}", out.breakdown)));
    }
    let seeds: Vec<_> = vars
        .cls
        .iter()
        .zip(&out.grad_cls)
        .chain(vars.dist.iter().zip(&out.grad_dist))
        .map(|(&v, t)| (v, t.clone()))
        .collect();
    let mut grads = g.backward(&seeds).param_grads(det.params());
    let updates = g.norm_updates().to_vec();
    drop(g);
    opt.step(det.params_mut(), &mut grads, lr);
    det.params_mut().apply_norm_updates(&updates, NORM_MOMENTUM as f32);
    objective.update(&out);
    Ok(out.breakdown)
}

/// Trains a fresh model on `data`, calling `on_step` after every step.
pub fn train(cfg: &RunConfig, data: &PreparedSet, mut on_step: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if data.size as usize != cfg.model.input_size {
        return Err(Error::config("prepared set does not match model.input_size"));
    }
    let mut det = Detector::<f32>::new(&cfg.model)?;
    let mut objective = Objective::new(&cfg.objective, cfg.model.enable_c)?;
    let o = &cfg.optimizer;
    let mut opt = Optimizer::new(o, det.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.data_seed(), "train/order"));
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(o.iterations);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for step in 0..o.iterations {
        let mut idx = Vec::with_capacity(o.batch_size);
        while idx.len() < o.batch_size.min(data.len()) {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            idx.push(order.pop().expect("refilled"));
        }
        let flip: Vec<bool> = idx.iter().map(|_| rng.gen_bool(cfg.data.flip_prob)).collect();
        let (x, gts) = data.batch(&idx, &flip);
        let lr = learning_rate(o, step);
        let tau = objective.tau();
        let before = det.params().clone();
        let b = train_step(&mut det, &mut objective, &mut opt, &x, &gts, lr)?;
        let entry = StepLog::new(step + 1, &b, tau);
        on_step(&entry);
        log.push(entry);
        // The batch loss was produced by the parameters before this update.
        if best.as_ref().is_none_or(|(l, _, _)| b.total < *l) {
            best = Some((b.total, step, before));
        }
    }
    let (best_loss, best_step, best_params) = best.expect("at least one step");
    let mut best_det = Detector::<f32>::new(&cfg.model)?;
    *best_det.params_mut() = best_params;
    Ok(TrainOutcome { last: det, best: best_det, best_step, best_loss, log })
}

/// Decodes and scores every image of `data`.
pub fn evaluate_detector(det: &Detector<f32>, data: &PreparedSet, eval: &crate::config::EvalConfig) -> Result<EvalReport> {
    let mut dets = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(eval.batch_size) {
        let (x, _) = data.batch(chunk, &vec![false; chunk.len()]);
        let raw = det.predict(&x)?;
        dets.extend(decode_predictions(&raw, eval.detection_conf)?);
    }
    evaluate(&dets, &data.gts, det.config().num_classes, eval.conf_threshold, eval.nms_threshold)
}

/// Detections on one image of any size, in its own pixel coordinates:
/// letterbox, predict, keep scores ≥ `conf_threshold`, suppress, map back.
pub fn detect_image(det: &Detector<f32>, img: &RgbImage, conf_threshold: f64, nms_threshold: f64) -> Result<Vec<DetectionBox>> {
    let (boxed, lb) = letterbox(img, det.config().input_size as u32)?;
    let t = image_to_tensor::<f32>(&boxed);
    let x = Tensor::from_vec(&[1, 3, lb.size as usize, lb.size as usize], t.data().to_vec());
    let raw = det.predict(&x)?;
    let decoded = decode_predictions(&raw, conf_threshold)?.pop().unwrap_or_default();
    let (w, h) = (img.width() as f64, img.height() as f64);
    Ok(nms(&decoded, nms_threshold)
        .into_iter()
        .map(|d| DetectionBox { bbox: lb.inverse(&d.bbox).clamp(w, h), ..d })
        .collect())
}

/// The eight toggle combinations in reporting order.
pub const ABLATION_PLAN: [(&str, bool, bool, bool); 8] = [
    ("Baseline", false, false, false),
    ("+A", true, false, false),
    ("+B", false, true, false),
    ("+C", false, false, true),
    ("+A+B", true, true, false),
    ("+A+C", true, false, true),
    ("+B+C", false, true, true),
    ("+A+B+C", true, true, true),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    /// `None` when the row failed.
    pub metrics: Option<[f64; 4]>,
    pub error: Option<String>,
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.4}")
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<8} {:>8} {:>8} {:>8} {:>9}\n", "Model", "P", "R", "mAP50", "mAP50-95");
    for r in rows {
        match &r.metrics {
            Some(m) => {
                let v: Vec<String> = m.iter().map(|&x| fmt_metric(x)).collect();
                s.push_str(&format!("{:<8} {:>8} {:>8} {:>8} {:>9}\n", r.model, v[0], v[1], v[2], v[3]));
            }
            None => s.push_str(&format!("{:<8} {:>8} {:>8} {:>8} {:>9}\n", r.model, "failed", "-", "-", "-")),
        }
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("Model,P,R,mAP50,mAP50-95\n");
    for r in rows {
        match &r.metrics {
            Some(m) => {
                let v: Vec<String> = m.iter().map(|&x| fmt_metric(x)).collect();
                s.push_str(&format!("{},{}\n", r.model, v.join(",")));
            }
            None => s.push_str(&format!("{},failed,,,\n", r.model)),
        }
    }
    s
}

/// Trains and scores one row of the plan.
pub fn run_ablation_row(cfg: &RunConfig, toggles: (bool, bool, bool), train_set: &PreparedSet, eval_set: &PreparedSet) -> Result<(EvalReport, Vec<StepLog>)> {
    let mut row = cfg.clone();
    row.model = cfg.model.with_toggles(toggles.0, toggles.1, toggles.2);
    if let Some(n) = cfg.ablation.iterations {
        row.optimizer.iterations = n;
    }
    let outcome = train(&row, train_set, |_| {})?;
    Ok((evaluate_detector(&outcome.last, eval_set, &cfg.eval)?, outcome.log))
}
