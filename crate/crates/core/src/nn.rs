//! Parameter storage, deterministic initialization and the basic layers the
//! detector is assembled from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NormUpdate, Var};
use crate::error::{ensure_config, Result};
use crate::ops::conv::ConvSpec;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Only convolution/linear weights receive weight decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), kinds: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.kinds.push(kind);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.ids().filter(|&id| self.kind(id).trainable()).map(|id| self.get(id).numel()).sum()
    }

    /// Concatenation of every tensor in registration order.
    pub fn flat(&self) -> Vec<T> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Folds batch statistics from a training pass into the running estimates.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate<T>], momentum: T) {
        let keep = T::one() - momentum;
        for u in updates {
            for (r, &m) in self.values[u.running_mean.0].data_mut().iter_mut().zip(&u.mean) {
                *r = keep * *r + momentum * m;
            }
            for (r, &v) in self.values[u.running_var.0].data_mut().iter_mut().zip(&u.var) {
                *r = keep * *r + momentum * v;
            }
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic seed for a named stream: the same `(seed, name)` always
/// yields the same values, independent of what else was initialized.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)) ^ fnv1a(name)
}

/// Hierarchically named view onto a [`ParamStore`] used while building layers.
pub struct Scope<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    prefix: String,
}

impl<'a, T: Scalar> Scope<'a, T> {
    pub fn root(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, seed, prefix: String::new() }
    }

    pub fn child(&mut self, name: &str) -> Scope<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        Scope { store: self.store, seed: self.seed, prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Uniform `(-bound, bound)` values from the parameter's own stream.
    pub fn uniform(&mut self, name: &str, kind: ParamKind, shape: &[usize], bound: f64) -> ParamId {
        let full = self.full(name);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, &full));
        let t = Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)));
        self.store.add(full, kind, t)
    }

    pub fn constant(&mut self, name: &str, kind: ParamKind, shape: &[usize], value: f64) -> ParamId {
        let full = self.full(name);
        self.store.add(full, kind, Tensor::full(shape, T::of(value)))
    }
}

/// Forward-pass context: the tape being recorded and the parameters read from.
pub struct Ctx<'a, T> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a ParamStore<T>) -> Self {
        Self { graph, params }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.graph.param(self.params, id)
    }
}

/// Plain convolution (no normalization or activation).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum WeightInit {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn,
    Zero,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        scope: &mut Scope<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        spec: ConvSpec,
        bias: bool,
        init: WeightInit,
    ) -> Result<Self> {
        ensure_config!(in_channels >= 1 && out_channels >= 1, "channel counts must be ≥ 1 (got {in_channels}→{out_channels})");
        ensure_config!(kernel.0 % 2 == 1 && kernel.1 % 2 == 1, "kernel must be odd, got {}×{}", kernel.0, kernel.1);
        ensure_config!(
            spec.groups >= 1 && in_channels % spec.groups == 0 && out_channels % spec.groups == 0,
            "groups {} must divide {in_channels} and {out_channels}",
            spec.groups
        );
        ensure_config!(spec.stride.0 >= 1 && spec.stride.1 >= 1, "stride must be ≥ 1");
        ensure_config!(spec.dilation.0 >= 1 && spec.dilation.1 >= 1, "dilation must be ≥ 1");
        let cig = in_channels / spec.groups;
        let shape = [out_channels, cig, kernel.0, kernel.1];
        let weight = match init {
            WeightInit::FanIn => {
                let fan_in = (cig * kernel.0 * kernel.1) as f64;
                scope.uniform("weight", ParamKind::Weight, &shape, 1.0 / fan_in.sqrt())
            }
            WeightInit::Zero => scope.constant("weight", ParamKind::Weight, &shape, 0.0),
        };
        let bias = bias.then(|| scope.constant("bias", ParamKind::Bias, &[out_channels], 0.0));
        Ok(Self { weight, bias, spec, in_channels, out_channels })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = cx.p(self.weight);
        let b = self.bias.map(|b| cx.p(b));
        cx.graph.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-3;

    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, channels: usize) -> Self {
        Self {
            scale: scope.constant("scale", ParamKind::NormScale, &[channels], 1.0),
            shift: scope.constant("shift", ParamKind::NormShift, &[channels], 0.0),
            running_mean: scope.constant("running_mean", ParamKind::RunningMean, &[channels], 0.0),
            running_var: scope.constant("running_var", ParamKind::RunningVar, &[channels], 1.0),
            eps: Self::EPS,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let g = cx.p(self.scale);
        let b = cx.p(self.shift);
        cx.graph.batch_norm(x, g, b, T::of(self.eps), cx.params, self.running_mean, self.running_var)
    }
}

/// Convolution → per-channel normalization → SiLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
}

impl ConvBlock {
    pub fn new<T: Scalar>(
        scope: &mut Scope<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        ensure_config!(kernel % 2 == 1, "conv_block kernel must be odd, got {kernel}");
        ensure_config!(stride == 1 || stride == 2, "conv_block stride must be 1 or 2, got {stride}");
        let conv = Conv2d::new(
            &mut scope.child("conv"),
            in_channels,
            out_channels,
            (kernel, kernel),
            ConvSpec::same(kernel, stride),
            false,
            WeightInit::FanIn,
        )?;
        let norm = BatchNorm2d::new(&mut scope.child("bn"), out_channels);
        Ok(Self { conv, norm })
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = self.conv.forward(cx, x);
        let y = self.norm.forward(cx, y);
        cx.graph.silu(y)
    }
}

#[derive(Clone, Debug)]
pub struct Bottleneck {
    cv1: ConvBlock,
    cv2: ConvBlock,
    shortcut: bool,
}

impl Bottleneck {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, channels: usize, shortcut: bool) -> Result<Self> {
        Ok(Self {
            cv1: ConvBlock::new(&mut scope.child("cv1"), channels, channels, 3, 1)?,
            cv2: ConvBlock::new(&mut scope.child("cv2"), channels, channels, 3, 1)?,
            shortcut,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = self.cv1.forward(cx, x);
        let y = self.cv2.forward(cx, y);
        if self.shortcut {
            cx.graph.add(x, y)
        } else {
            y
        }
    }
}

/// Split-transform-concat block: a pointwise projection is split in two halves,
/// the second half runs through a chain of bottlenecks and every intermediate
/// is concatenated before a final projection.
#[derive(Clone, Debug)]
pub struct C2f {
    cv1: ConvBlock,
    cv2: ConvBlock,
    blocks: Vec<Bottleneck>,
    hidden: usize,
}

impl C2f {
    pub fn new<T: Scalar>(
        scope: &mut Scope<'_, T>,
        in_channels: usize,
        out_channels: usize,
        n_bottlenecks: usize,
        shortcut: bool,
    ) -> Result<Self> {
        ensure_config!(out_channels % 2 == 0 && out_channels >= 2, "c2f out_channels must be even, got {out_channels}");
        let hidden = out_channels / 2;
        let cv1 = ConvBlock::new(&mut scope.child("cv1"), in_channels, 2 * hidden, 1, 1)?;
        let cv2 = ConvBlock::new(&mut scope.child("cv2"), (2 + n_bottlenecks) * hidden, out_channels, 1, 1)?;
        let blocks = (0..n_bottlenecks)
            .map(|i| Bottleneck::new(&mut scope.child(&format!("m{i}")), hidden, shortcut))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cv1, cv2, blocks, hidden })
    }

    pub fn out_channels(&self) -> usize {
        self.cv2.out_channels()
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = self.cv1.forward(cx, x);
        let mut parts = cx.graph.chunk(y, 1, 2);
        debug_assert_eq!(cx.graph.shape(parts[1])[1], self.hidden);
        let mut last = parts[1];
        for b in &self.blocks {
            last = b.forward(cx, last);
            parts.push(last);
        }
        let cat = cx.graph.concat(&parts, 1);
        self.cv2.forward(cx, cat)
    }
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(scope: &mut Scope<'_, T>, in_features: usize, out_features: usize, bias: bool) -> Result<Self> {
        ensure_config!(in_features >= 1 && out_features >= 1, "linear features must be ≥ 1");
        let bound = 1.0 / (in_features as f64).sqrt();
        Ok(Self {
            weight: scope.uniform("weight", ParamKind::Weight, &[out_features, in_features], bound),
            bias: bias.then(|| scope.constant("bias", ParamKind::Bias, &[out_features], 0.0)),
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = cx.p(self.weight);
        let b = self.bias.map(|b| cx.p(b));
        cx.graph.linear(x, w, b)
    }
}
