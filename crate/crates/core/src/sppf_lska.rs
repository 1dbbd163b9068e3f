//! Serialized spatial pyramid pooling, optionally gated by large-kernel
//! separable attention (improvement A).
//!
//! The attention branch decomposes a large 2-D depthwise kernel into a local
//! horizontal/vertical 1-D pair followed by a dilated horizontal/vertical 1-D
//! pair and a pointwise channel mix. The result multiplies the block input
//! elementwise. With a `base_kernel` of `k0`, a `dilated_kernel` of `k1` and
//! dilation `d`, the spatial support is `k0 + (k1 - 1)·d` on each axis.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{ensure_config, Error, Result};
use crate::nn::{Conv2d, ConvBlock, Ctx, Scope, WeightInit};
use crate::ops::conv::ConvSpec;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LskaConfig {
    pub base_kernel: usize,
    pub dilated_kernel: usize,
    pub dilation: usize,
}

impl Default for LskaConfig {
    fn default() -> Self {
        Self { base_kernel: 5, dilated_kernel: 7, dilation: 3 }
    }
}

impl LskaConfig {
    pub const MIN_FIELD: usize = 11;

    pub fn effective_field(&self) -> usize {
        self.base_kernel + (self.dilated_kernel.saturating_sub(1)) * self.dilation
    }

    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.dilation >= 1, "lska dilation must be ≥ 1, got {}", self.dilation);
        ensure_config!(
            self.base_kernel % 2 == 1 && self.dilated_kernel % 2 == 1,
            "lska kernels must be odd, got {} and {}",
            self.base_kernel,
            self.dilated_kernel
        );
        ensure_config!(
            self.effective_field() >= Self::MIN_FIELD,
            "lska effective field {} is below {}",
            self.effective_field(),
            Self::MIN_FIELD
        );
        Ok(())
    }
}

/// `concat(x, pool(x), pool²(x), pool³(x))` along channels with stride-1
/// "same" max pooling.
pub fn sppf<T: Scalar>(g: &mut Graph<T>, x: Var, pool_kernel: usize) -> Result<Var> {
    ensure_config!(pool_kernel % 2 == 1, "sppf pool kernel must be odd, got {pool_kernel}");
    let p1 = g.max_pool_same(x, pool_kernel);
    let p2 = g.max_pool_same(p1, pool_kernel);
    let p3 = g.max_pool_same(p2, pool_kernel);
    Ok(g.concat(&[x, p1, p2, p3], 1))
}

#[derive(Clone, Debug)]
pub struct Lska {
    local_h: Conv2d,
    local_v: Conv2d,
    dilated_h: Conv2d,
    dilated_v: Conv2d,
    mix: Conv2d,
    channels: usize,
}

impl Lska {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, channels: usize, cfg: &LskaConfig, bias: bool) -> Result<Self> {
        cfg.validate()?;
        ensure_config!(channels >= 1, "lska needs at least one channel");
        let (k0, k1, d) = (cfg.base_kernel, cfg.dilated_kernel, cfg.dilation);
        let dw = |pad: (usize, usize), dilation: (usize, usize)| ConvSpec { stride: (1, 1), pad, dilation, groups: channels };
        let c = channels;
        Ok(Self {
            local_h: Conv2d::new(&mut scope.child("local_h"), c, c, (1, k0), dw((0, k0 / 2), (1, 1)), bias, WeightInit::FanIn)?,
            local_v: Conv2d::new(&mut scope.child("local_v"), c, c, (k0, 1), dw((k0 / 2, 0), (1, 1)), bias, WeightInit::FanIn)?,
            dilated_h: Conv2d::new(
                &mut scope.child("dilated_h"),
                c,
                c,
                (1, k1),
                dw((0, (k1 / 2) * d), (1, d)),
                bias,
                WeightInit::FanIn,
            )?,
            dilated_v: Conv2d::new(
                &mut scope.child("dilated_v"),
                c,
                c,
                (k1, 1),
                dw(((k1 / 2) * d, 0), (d, 1)),
                bias,
                WeightInit::FanIn,
            )?,
            mix: Conv2d::new(&mut scope.child("mix"), c, c, (1, 1), ConvSpec::same(1, 1), bias, WeightInit::FanIn)?,
            channels,
        })
    }

    /// The attention map before gating.
    pub fn attention_map<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = cx.graph.shape(x)[1];
        if c != self.channels {
            return Err(Error::config(format!("lska built for {} channels, got {c}", self.channels)));
        }
        let a = self.local_h.forward(cx, x);
        let a = self.local_v.forward(cx, a);
        let a = self.dilated_h.forward(cx, a);
        let a = self.dilated_v.forward(cx, a);
        Ok(self.mix.forward(cx, a))
    }

    /// `x ⊙ attention(x)`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let attn = self.attention_map(cx, x)?;
        Ok(cx.graph.mul(x, attn))
    }
}

/// SPPF block; with an [`Lska`] attached the attention gates the pooled
/// concatenation before the output projection, leaving the block's
/// input/output shapes unchanged.
#[derive(Clone, Debug)]
pub struct Sppf {
    reduce: ConvBlock,
    project: ConvBlock,
    pool_kernel: usize,
    lska: Option<Lska>,
    in_channels: usize,
}

impl Sppf {
    pub const POOL_KERNEL: usize = 5;

    pub fn new<T: Scalar>(
        scope: &mut Scope<'_, T>,
        in_channels: usize,
        out_channels: usize,
        pool_kernel: usize,
        lska: Option<&LskaConfig>,
    ) -> Result<Self> {
        ensure_config!(pool_kernel % 2 == 1, "sppf pool kernel must be odd, got {pool_kernel}");
        ensure_config!(in_channels >= 2, "sppf needs at least two input channels");
        let hidden = in_channels / 2;
        let reduce = ConvBlock::new(&mut scope.child("cv1"), in_channels, hidden, 1, 1)?;
        let project = ConvBlock::new(&mut scope.child("cv2"), 4 * hidden, out_channels, 1, 1)?;
        let lska = lska.map(|cfg| Lska::new(&mut scope.child("lska"), 4 * hidden, cfg, true)).transpose()?;
        Ok(Self { reduce, project, pool_kernel, lska, in_channels })
    }

    pub fn has_attention(&self) -> bool {
        self.lska.is_some()
    }

    pub fn out_channels(&self) -> usize {
        self.project.out_channels()
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = cx.graph.shape(x)[1];
        if c != self.in_channels {
            return Err(Error::config(format!("sppf expects {} input channels, got {c}", self.in_channels)));
        }
        let y = self.reduce.forward(cx, x);
        let mut cat = sppf(cx.graph, y, self.pool_kernel)?;
        if let Some(lska) = &self.lska {
            cat = lska.forward(cx, cat)?;
        }
        Ok(self.project.forward(cx, cat))
    }
}
