//! Context feature calibration (part of improvement B).
//!
//! Every spatial position issues a query that attends over a small set of
//! context units produced by cascaded adaptive average pooling; the attended
//! context is projected back to the input width and added to the input.

use crate::autograd::{Graph, Var};
use crate::error::{ensure_config, Error, Result};
use crate::nn::{Conv2d, Ctx, Linear, Scope, WeightInit};
use crate::ops::conv::ConvSpec;
use crate::tensor::Scalar;

pub const DEFAULT_BINS: [usize; 4] = [1, 2, 3, 6];

/// Pooled context vectors, `(batch, n_units, channels)`, with units ordered by
/// ascending bin size and row-major within a bin.
#[derive(Clone, Debug)]
pub struct ContextSet {
    pub units: Var,
    pub bins: Vec<usize>,
}

impl ContextSet {
    pub fn n_units(&self) -> usize {
        self.bins.iter().map(|b| b * b).sum()
    }
}

pub fn validate_bins(bins: &[usize], h: usize, w: usize) -> Result<()> {
    ensure_config!(!bins.is_empty(), "pyramid bins must not be empty");
    ensure_config!(bins[0] >= 1, "pyramid bins must be ≥ 1");
    ensure_config!(bins.windows(2).all(|p| p[0] < p[1]), "pyramid bins must be strictly increasing: {bins:?}");
    let last = *bins.last().expect("non-empty");
    ensure_config!(last <= h.min(w), "pyramid bin {last} exceeds feature size {h}×{w}");
    Ok(())
}

/// Cascaded pyramid pooling: the largest bin pools `x`, every smaller bin pools
/// the previous (next larger) level's output.
pub fn cascaded_pyramid_context<T: Scalar>(g: &mut Graph<T>, x: Var, bins: &[usize]) -> Result<ContextSet> {
    let (b, c, h, w) = g.value(x).dims4();
    validate_bins(bins, h, w)?;
    let mut levels = vec![x; bins.len()];
    let mut current = x;
    for (i, &bin) in bins.iter().enumerate().rev() {
        current = g.adaptive_avg_pool(current, bin, bin);
        levels[i] = current;
    }
    let tokens: Vec<Var> = bins
        .iter()
        .zip(levels)
        .map(|(&bin, level)| {
            let flat = g.reshape(level, &[b, c, bin * bin]);
            g.transpose12(flat)
        })
        .collect();
    let units = if tokens.len() == 1 { tokens[0] } else { g.concat(&tokens, 1) };
    Ok(ContextSet { units, bins: bins.to_vec() })
}

pub struct Calibration {
    pub output: Var,
    /// `(batch, positions, n_units)`; rows sum to one.
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct CfcCrb {
    query: Conv2d,
    context: Conv2d,
    key: Linear,
    value: Linear,
    project: Conv2d,
    bins: Vec<usize>,
    channels: usize,
    embed: usize,
}

impl CfcCrb {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, channels: usize, bins: &[usize]) -> Result<Self> {
        ensure_config!(channels >= 2, "cfc-crb needs at least two channels");
        validate_bins(bins, usize::MAX, usize::MAX)?;
        let embed = channels / 2;
        let pw = |s: &mut Scope<'_, T>, cin, cout| {
            Conv2d::new(s, cin, cout, (1, 1), ConvSpec::same(1, 1), true, WeightInit::FanIn)
        };
        Ok(Self {
            query: pw(&mut scope.child("query"), channels, embed)?,
            context: pw(&mut scope.child("context"), channels, embed)?,
            key: Linear::new(&mut scope.child("key"), embed, embed, true)?,
            value: Linear::new(&mut scope.child("value"), embed, embed, true)?,
            project: pw(&mut scope.child("project"), embed, channels)?,
            bins: bins.to_vec(),
            channels,
            embed,
        })
    }

    pub fn embed_width(&self) -> usize {
        self.embed
    }

    /// Configured bins that fit a `h×w` map.
    pub fn effective_bins(&self, h: usize, w: usize) -> Vec<usize> {
        self.bins.iter().copied().filter(|&b| b <= h.min(w)).collect()
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let c = g.shape(x)[1];
        if c != self.channels {
            return Err(Error::config(format!("cfc-crb built for {} channels, got {c}", self.channels)));
        }
        Ok(())
    }

    /// Projects `x` to the embedding width and pools it into context units.
    pub fn context<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, bins: &[usize]) -> Result<ContextSet> {
        self.check_input(cx.graph, x)?;
        let e = self.context.forward(cx, x);
        cascaded_pyramid_context(cx.graph, e, bins)
    }

    pub fn calibrate<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, ctx: &ContextSet) -> Result<Calibration> {
        self.check_input(cx.graph, x)?;
        let us = cx.graph.shape(ctx.units).to_vec();
        if us.len() != 3 || us[2] != self.embed {
            return Err(Error::config(format!("context units {:?} do not match embedding width {}", us, self.embed)));
        }
        let (b, _, h, w) = cx.graph.value(x).dims4();
        let q = self.query.forward(cx, x);
        let q = cx.graph.reshape(q, &[b, self.embed, h * w]);
        let q = cx.graph.transpose12(q);
        let k = self.key.forward(cx, ctx.units);
        let v = self.value.forward(cx, ctx.units);
        let scores = cx.graph.batch_matmul(q, k, true);
        let scores = cx.graph.affine(scores, T::of(1.0 / (self.embed as f64).sqrt()), T::zero());
        let weights = cx.graph.softmax(scores);
        let agg = cx.graph.batch_matmul(weights, v, false);
        let agg = cx.graph.transpose12(agg);
        let agg = cx.graph.reshape(agg, &[b, self.embed, h, w]);
        let back = self.project.forward(cx, agg);
        let output = cx.graph.add(x, back);
        Ok(Calibration { output, weights })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = cx.graph.value(x).dims4();
        let bins = self.effective_bins(h, w);
        let ctx = self.context(cx, x, &bins)?;
        Ok(self.calibrate(cx, x, &ctx)?.output)
    }
}
