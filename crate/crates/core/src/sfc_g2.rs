//! Spatial feature calibration for cross-layer fusion (part of improvement B).
//!
//! A high-level (coarse) and a low-level (fine) stream are projected to a
//! common width and resolution, each is resampled by its own predicted
//! per-group displacement field, and the two calibrated streams are blended
//! by a bounded gate on top of the low-level projection.

use crate::autograd::{Graph, Var};
use crate::error::{ensure_config, Error, Result};
use crate::nn::{Conv2d, ConvBlock, Ctx, Scope, WeightInit};
use crate::ops::conv::ConvSpec;
use crate::tensor::Scalar;

pub const DEFAULT_GROUPS: usize = 4;

/// Gates live in `[GATE_MARGIN, 1 - GATE_MARGIN]`.
pub const GATE_MARGIN: f64 = 1e-6;

/// A feature map on the tape together with its stride relative to the input image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Feature {
    pub var: Var,
    pub stride: usize,
}

/// Resamples each channel group of `x` at `(col + dx_g, row + dy_g)`.
/// `disp` is `(batch, 2·groups, H, W)` with interleaved `(dx, dy)` per group.
pub fn grouped_warp<T: Scalar>(g: &mut Graph<T>, x: Var, disp: Var) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4();
    let (dn, dc, dh, dw) = g.value(disp).dims4();
    if dn != n || dh != h || dw != w || dc % 2 != 0 || dc == 0 {
        return Err(Error::contract(format!(
            "displacement field {:?} does not match feature {:?}",
            g.shape(disp),
            g.shape(x)
        )));
    }
    ensure_config!(c % (dc / 2) == 0, "{} groups do not divide {c} channels", dc / 2);
    Ok(g.grouped_warp(x, disp))
}

/// `residual + gate ⊙ a + (1 − gate) ⊙ b`.
pub fn gated_fuse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, gate: Var, residual: Var) -> Result<Var> {
    let s = g.shape(a).to_vec();
    if g.shape(b) != s.as_slice() || g.shape(residual) != s.as_slice() {
        return Err(Error::contract("gated_fuse operands must share a shape"));
    }
    if s.len() != 4 || g.shape(gate) != [s[0], 1, s[2], s[3]] {
        return Err(Error::contract(format!("gate {:?} is not broadcastable over {:?}", g.shape(gate), s)));
    }
    Ok(g.gated_fuse(a, b, gate, residual))
}

/// Maps pre-activations into `(0, 1)`: a logistic curve compressed by
/// [`GATE_MARGIN`] so saturation never reaches the endpoints.
pub fn bounded_gate<T: Scalar>(g: &mut Graph<T>, pre: Var) -> Var {
    let t = g.affine(pre, T::of(0.5), T::zero());
    let t = g.tanh(t);
    g.affine(t, T::of(0.5 - GATE_MARGIN), T::of(0.5))
}

#[derive(Clone, Debug)]
pub struct SfcG2 {
    high_proj: ConvBlock,
    low_proj: ConvBlock,
    offset_hidden: ConvBlock,
    offset_out: Conv2d,
    gate: Conv2d,
    groups: usize,
    out_channels: usize,
    high_channels: usize,
    low_channels: usize,
}

pub struct SfcTrace {
    pub high_aligned: Var,
    pub low_aligned: Var,
    pub high_offsets: Var,
    pub low_offsets: Var,
    pub gate: Var,
    pub output: Var,
}

impl SfcG2 {
    pub fn new<T: Scalar>(
        scope: &mut Scope<'_, T>,
        high_channels: usize,
        low_channels: usize,
        out_channels: usize,
        groups: usize,
    ) -> Result<Self> {
        ensure_config!(groups >= 1, "sfc-g2 needs at least one group");
        ensure_config!(out_channels % groups == 0, "{groups} groups do not divide {out_channels} channels");
        let offsets = 2 * groups * 2;
        Ok(Self {
            high_proj: ConvBlock::new(&mut scope.child("high_proj"), high_channels, out_channels, 1, 1)?,
            low_proj: ConvBlock::new(&mut scope.child("low_proj"), low_channels, out_channels, 1, 1)?,
            offset_hidden: ConvBlock::new(&mut scope.child("offset_hidden"), 2 * out_channels, out_channels, 3, 1)?,
            offset_out: Conv2d::new(
                &mut scope.child("offset_out"),
                out_channels,
                offsets,
                (3, 3),
                ConvSpec::same(3, 1),
                true,
                WeightInit::Zero,
            )?,
            gate: Conv2d::new(&mut scope.child("gate"), 2 * out_channels, 1, (1, 1), ConvSpec::same(1, 1), true, WeightInit::Zero)?,
            groups,
            out_channels,
            high_channels,
            low_channels,
        })
    }

    pub fn offset_layer(&self) -> &Conv2d {
        &self.offset_out
    }

    pub fn gate_layer(&self) -> &Conv2d {
        &self.gate
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Projects both streams to `out_channels` and upsamples the high stream ×2.
    pub fn align_streams<T: Scalar>(&self, cx: &mut Ctx<'_, T>, high: Feature, low: Feature) -> Result<(Var, Var)> {
        ensure_config!(
            high.stride == 2 * low.stride,
            "sfc-g2 needs high stride = 2 × low stride, got {} and {}",
            high.stride,
            low.stride
        );
        let (_, ch, hh, hw) = cx.graph.value(high.var).dims4();
        let (_, cl, lh, lw) = cx.graph.value(low.var).dims4();
        ensure_config!(ch == self.high_channels && cl == self.low_channels, "sfc-g2 channel mismatch: {ch}/{cl}");
        ensure_config!(2 * hh == lh && 2 * hw == lw, "sfc-g2 spatial mismatch: {hh}×{hw} vs {lh}×{lw}");
        let a = self.high_proj.forward(cx, high.var);
        let a = cx.graph.upsample2(a);
        let b = self.low_proj.forward(cx, low.var);
        Ok((a, b))
    }

    /// One `(batch, 2·groups, H, W)` field per stream.
    pub fn predict_displacements<T: Scalar>(&self, cx: &mut Ctx<'_, T>, a: Var, b: Var) -> Result<(Var, Var)> {
        if cx.graph.shape(a) != cx.graph.shape(b) {
            return Err(Error::contract("displacement predictor streams must share a shape"));
        }
        let cat = cx.graph.concat(&[a, b], 1);
        let hidden = self.offset_hidden.forward(cx, cat);
        let both = self.offset_out.forward(cx, hidden);
        let fields = cx.graph.chunk(both, 1, 2);
        Ok((fields[0], fields[1]))
    }

    pub fn trace<T: Scalar>(&self, cx: &mut Ctx<'_, T>, high: Feature, low: Feature) -> Result<SfcTrace> {
        let (a, b) = self.align_streams(cx, high, low)?;
        let (da, db) = self.predict_displacements(cx, a, b)?;
        let wa = grouped_warp(cx.graph, a, da)?;
        let wb = grouped_warp(cx.graph, b, db)?;
        let cat = cx.graph.concat(&[wa, wb], 1);
        let pre = self.gate.forward(cx, cat);
        let gate = bounded_gate(cx.graph, pre);
        let output = gated_fuse(cx.graph, wa, wb, gate, b)?;
        Ok(SfcTrace { high_aligned: a, low_aligned: b, high_offsets: da, low_offsets: db, gate, output })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, high: Feature, low: Feature) -> Result<Feature> {
        let t = self.trace(cx, high, low)?;
        Ok(Feature { var: t.output, stride: low.stride })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }
}
