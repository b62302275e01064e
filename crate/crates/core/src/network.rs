//! Detector network: extended VGG-style backbone, low-level feature pyramid
//! starting from a middle tap, context-sensitive prediction modules and
//! 20-channel prediction heads.
//!
//! Widths scale with `width_factor` so the same topology (and therefore the
//! same strides and receptive fields) runs at full or toy size.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::anchors::{standard_layers, AnchorGrid, PyramidAnchorConfig};
use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Graph, UpsampleMode, Var, L2_EPS};
use crate::tensor::{Real, Tensor};

/// Names of the six detection taps, shallow to deep.
pub const TAP_NAMES: [&str; 6] = ["conv3_3", "conv4_3", "conv5_3", "conv_fc7", "conv6_2", "conv7_2"];
/// Channels of every prediction head.
pub const HEAD_CHANNELS: usize = 20;
/// Taps whose features are L2-rescaled before prediction.
pub const L2_TAPS: usize = 3;
pub const L2_GAMMA_INIT: f64 = 20.0;
/// Xavier gain for ReLU layers, `√2`; keeps activation variance flat
/// through the un-normalised backbone.
pub const INIT_GAIN: f64 = core::f64::consts::SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LfpnStart {
    #[default]
    Auto,
    Tap(usize),
}

/// How the lateral and top-down signals combine in a pyramid block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MergeOp {
    #[default]
    Add,
    Mul,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub width_factor: f64,
    pub lfpn_start: LfpnStart,
    pub lfpn_merge: MergeOp,
    pub upsample: UpsampleMode,
    pub cpm_width: usize,
    pub pyramid: PyramidAnchorConfig,
}

impl NetworkConfig {
    /// 640 input, full VGG16 widths.
    pub fn full_scale() -> Self {
        NetworkConfig {
            input_size: 640,
            width_factor: 1.0,
            lfpn_start: LfpnStart::Auto,
            lfpn_merge: MergeOp::Add,
            upsample: UpsampleMode::Nearest,
            cpm_width: 512,
            pyramid: PyramidAnchorConfig::default(),
        }
    }

    /// CPU-trainable variant: 160 input, widths divided by eight.
    pub fn toy() -> Self {
        NetworkConfig { input_size: 160, width_factor: 0.125, cpm_width: 32, ..Self::full_scale() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % crate::anchors::POOLED_STRIDE != 0 {
            return Err(Error::config(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size,
                crate::anchors::POOLED_STRIDE
            )));
        }
        if !(self.width_factor > 0.0 && self.width_factor <= 4.0) {
            return Err(Error::config(format!("width_factor {} out of range (0, 4]", self.width_factor)));
        }
        if self.cpm_width == 0 || self.cpm_width % 4 != 0 {
            return Err(Error::config(format!("cpm_width {} must be a positive multiple of 4", self.cpm_width)));
        }
        if let LfpnStart::Tap(t) = self.lfpn_start {
            if t >= TAP_NAMES.len() {
                return Err(Error::config(format!("lfpn_start {t} is not a tap index (0..=5)")));
            }
        }
        self.pyramid.validate()
    }

    fn width(&self, full: usize) -> usize {
        ((full as f64 * self.width_factor).round() as usize).max(1)
    }

    /// Backbone layers in execution order.
    pub fn backbone(&self) -> Vec<LayerDesc> {
        let mut layers = Vec::new();
        let push_pool = |layers: &mut Vec<LayerDesc>, name| layers.push(LayerDesc { name, kind: LayerKind::Pool });
        let push_conv = |layers: &mut Vec<LayerDesc>, name, full, k, stride| {
            layers.push(LayerDesc { name, kind: LayerKind::Conv { out: full, k, stride, pad: k / 2, dilation: 1 } })
        };
        push_conv(&mut layers, "conv1_1", 64, 3, 1);
        push_conv(&mut layers, "conv1_2", 64, 3, 1);
        push_pool(&mut layers, "pool1");
        push_conv(&mut layers, "conv2_1", 128, 3, 1);
        push_conv(&mut layers, "conv2_2", 128, 3, 1);
        push_pool(&mut layers, "pool2");
        for name in ["conv3_1", "conv3_2", "conv3_3"] {
            push_conv(&mut layers, name, 256, 3, 1);
        }
        push_pool(&mut layers, "pool3");
        for name in ["conv4_1", "conv4_2", "conv4_3"] {
            push_conv(&mut layers, name, 512, 3, 1);
        }
        push_pool(&mut layers, "pool4");
        for name in ["conv5_1", "conv5_2", "conv5_3"] {
            push_conv(&mut layers, name, 512, 3, 1);
        }
        push_pool(&mut layers, "pool5");
        push_conv(&mut layers, "conv_fc6", 1024, 3, 1);
        push_conv(&mut layers, "conv_fc7", 1024, 1, 1);
        push_conv(&mut layers, "conv6_1", 256, 1, 1);
        push_conv(&mut layers, "conv6_2", 512, 3, 2);
        push_conv(&mut layers, "conv7_1", 128, 1, 1);
        push_conv(&mut layers, "conv7_2", 256, 3, 2);
        for l in &mut layers {
            if let LayerKind::Conv { out, .. } = &mut l.kind {
                *out = self.width(*out);
            }
        }
        layers
    }

    /// Index into [`NetworkConfig::backbone`] of each tap.
    pub fn tap_layers(&self) -> Vec<usize> {
        let bb = self.backbone();
        TAP_NAMES
            .iter()
            .map(|t| bb.iter().position(|l| l.name == *t).expect("tap present in backbone"))
            .collect()
    }

    /// Channel count of every tap.
    pub fn tap_channels(&self) -> Vec<usize> {
        let bb = self.backbone();
        self.tap_layers()
            .into_iter()
            .map(|i| match bb[i].kind {
                LayerKind::Conv { out, .. } => out,
                LayerKind::Pool => unreachable!("taps are convolutions"),
            })
            .collect()
    }

    /// Feature-map side of tap `l`: pooled strides divide exactly, strided
    /// convolutions round up.
    pub fn tap_side(&self, l: usize) -> usize {
        self.input_size.div_ceil(1 << (2 + l))
    }

    pub fn resolved_lfpn_start(&self) -> usize {
        match self.lfpn_start {
            LfpnStart::Tap(t) => t,
            LfpnStart::Auto => select_lfpn_start(self),
        }
    }

    pub fn head_layout(&self) -> Vec<HeadLayout> {
        (0..TAP_NAMES.len()).map(|l| HeadLayout::for_tap(l, self.tap_side(l))).collect()
    }

    pub fn anchor_grid(&self) -> Result<AnchorGrid> {
        AnchorGrid::build(&standard_layers(), self.input_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { out: usize, k: usize, stride: usize, pad: usize, dilation: usize },
    /// 2×2, stride 2.
    Pool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDesc {
    pub name: &'static str,
    pub kind: LayerKind,
}

impl LayerDesc {
    fn rf_step(&self) -> (usize, usize, usize) {
        match self.kind {
            LayerKind::Conv { k, stride, dilation, .. } => (k, stride, dilation),
            LayerKind::Pool => (2, 2, 1),
        }
    }
}

/// Receptive field of a chain of `(kernel, stride, dilation)` layers.
pub fn chain_receptive_field(chain: impl IntoIterator<Item = (usize, usize, usize)>) -> usize {
    let (mut rf, mut jump) = (1, 1);
    for (k, s, d) in chain {
        rf += (d * (k - 1)) * jump;
        jump *= s;
    }
    rf
}

/// Receptive field, in input pixels and as a fraction of the input size, of
/// the 3×3 prediction convolution placed on tap `tap`.
pub fn receptive_field(config: &NetworkConfig, tap: usize) -> Result<(usize, f64)> {
    if tap >= TAP_NAMES.len() {
        return Err(Error::config(format!("tap {tap} out of range")));
    }
    let bb = config.backbone();
    let end = config.tap_layers()[tap];
    let chain = bb[..=end].iter().map(LayerDesc::rf_step).chain(core::iter::once((3, 1, 1)));
    let rf = chain_receptive_field(chain);
    Ok((rf, rf as f64 / config.input_size as f64))
}

/// Tap whose receptive field is closest to half the input; deeper tap on
/// ties.
pub fn select_lfpn_start(config: &NetworkConfig) -> usize {
    let mut best = 0;
    let mut best_gap = f64::INFINITY;
    for tap in 0..TAP_NAMES.len() {
        let (_, ratio) = receptive_field(config, tap).expect("tap in range");
        let gap = (ratio - 0.5).abs();
        if gap <= best_gap {
            best = tap;
            best_gap = gap;
        }
    }
    best
}

/// Channel layout of one prediction head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub side: usize,
    /// Max-in-out positive channels.
    pub cp: usize,
    /// Max-in-out negative channels.
    pub cn: usize,
}

impl HeadLayout {
    pub const HEAD_CLS: usize = 4;
    pub const BODY_CLS: usize = 6;
    pub const FACE_REG: usize = 8;
    pub const HEAD_REG: usize = 12;
    pub const BODY_REG: usize = 16;

    pub fn for_tap(l: usize, side: usize) -> Self {
        let cp = if l == 0 { 1 } else { 3 };
        HeadLayout { side, cp, cn: 4 - cp }
    }

    /// Channel offsets of the two-way classifier and the regressor for
    /// pyramid level `k` (face, head, body). Face classification is the
    /// max-in-out group and has no fixed pair.
    pub fn level_channels(k: usize) -> (Option<usize>, usize) {
        match k {
            0 => (None, Self::FACE_REG),
            1 => (Some(Self::HEAD_CLS), Self::HEAD_REG),
            _ => (Some(Self::BODY_CLS), Self::BODY_REG),
        }
    }

    pub fn channels(&self) -> usize {
        self.cp + self.cn + 2 + 2 + 4 + 4 + 4
    }
}

/// Named learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Puts every tensor on the graph as a differentiable leaf.
    pub fn register(&self, g: &mut Graph<T>) -> ParamVars {
        ParamVars { vars: self.tensors.iter().map(|(k, v)| (k.clone(), g.param(v.clone()))).collect() }
    }
}

/// Graph handles of registered parameters.
pub struct ParamVars {
    pub vars: BTreeMap<String, Var>,
}

impl ParamVars {
    fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvShape {
    out: usize,
    inp: usize,
    k: usize,
}

/// The assembled detector: layer plan plus the parameter shapes it needs.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub lfpn_start: usize,
    backbone: Vec<LayerDesc>,
    convs: BTreeMap<String, ConvShape>,
    gammas: BTreeMap<String, usize>,
}

fn bottleneck_names(prefix: &str) -> [String; 3] {
    [format!("{prefix}.reduce"), format!("{prefix}.conv"), format!("{prefix}.expand")]
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let backbone = config.backbone();
        let lfpn_start = config.resolved_lfpn_start();
        let mut convs = BTreeMap::new();
        let mut gammas = BTreeMap::new();
        let mut ch = 3;
        for l in &backbone {
            if let LayerKind::Conv { out, k, .. } = l.kind {
                convs.insert(l.name.to_string(), ConvShape { out, inp: ch, k });
                ch = out;
            }
        }
        let taps = config.tap_channels();
        for j in (0..lfpn_start).rev() {
            let above = taps[j + 1];
            convs.insert(format!("lfpn{j}.top"), ConvShape { out: taps[j], inp: above, k: 1 });
            convs.insert(format!("lfpn{j}.lateral"), ConvShape { out: taps[j], inp: taps[j], k: 1 });
            convs.insert(format!("lfpn{j}.smooth"), ConvShape { out: taps[j], inp: taps[j], k: 3 });
        }
        for (j, &c) in taps.iter().enumerate().take(L2_TAPS) {
            gammas.insert(format!("l2norm{j}.gamma"), c);
        }
        let w = config.cpm_width;
        for (l, &c) in taps.iter().enumerate() {
            let p = format!("cpm{l}");
            convs.insert(format!("{p}.proj"), ConvShape { out: w, inp: c, k: 1 });
            let mut bottleneck = |prefix: String, inp: usize, out: usize| {
                let mid = (out / 4).max(1);
                let [r, m, e] = bottleneck_names(&prefix);
                convs.insert(r, ConvShape { out: mid, inp, k: 1 });
                convs.insert(m, ConvShape { out: mid, inp: mid, k: 3 });
                convs.insert(e, ConvShape { out, inp: mid, k: 1 });
            };
            bottleneck(format!("{p}.a"), c, w / 2);
            bottleneck(format!("{p}.ctx"), c, w / 4);
            bottleneck(format!("{p}.b"), w / 4, w / 4);
            bottleneck(format!("{p}.c1"), w / 4, w / 4);
            bottleneck(format!("{p}.c2"), w / 4, w / 4);
            convs.insert(format!("head{l}"), ConvShape { out: HEAD_CHANNELS, inp: w, k: 3 });
        }
        Ok(Network { config, lfpn_start, backbone, convs, gammas })
    }

    /// Xavier (fan-average uniform) weights, zero biases, L2 gammas at 20.
    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> ModelParams<T> {
        let mut tensors = BTreeMap::new();
        for (name, s) in &self.convs {
            let fan_in = s.inp * s.k * s.k;
            let fan_out = s.out * s.k * s.k;
            let limit = INIT_GAIN * (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Tensor::from_fn(&[s.out, s.inp, s.k, s.k], |_| T::lit(rng.gen_range(-limit..limit)));
            tensors.insert(format!("{name}.weight"), w);
            tensors.insert(format!("{name}.bias"), Tensor::zeros(&[s.out]));
        }
        for (name, &c) in &self.gammas {
            tensors.insert(name.clone(), Tensor::full(&[c], T::lit(L2_GAMMA_INIT)));
        }
        ModelParams { tensors }
    }

    /// Expected shape of every parameter, by name.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        for (name, s) in &self.convs {
            out.insert(format!("{name}.weight"), vec![s.out, s.inp, s.k, s.k]);
            out.insert(format!("{name}.bias"), vec![s.out]);
        }
        for (name, &c) in &self.gammas {
            out.insert(name.clone(), vec![c]);
        }
        out
    }

    /// Checks that `params` has exactly the expected names and shapes.
    pub fn check_params<T: Real>(&self, params: &ModelParams<T>) -> Result<()> {
        let shapes = self.param_shapes();
        for (name, shape) in &shapes {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::config(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        if let Some(extra) = params.tensors.keys().find(|k| !shapes.contains_key(*k)) {
            return Err(Error::config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    fn conv<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
        let w = p.get(&format!("{name}.weight"))?;
        let b = p.get(&format!("{name}.bias"))?;
        g.conv2d(x, w, Some(b), spec)
    }

    fn conv_relu<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
        let y = self.conv(g, p, name, x, spec)?;
        g.relu(y)
    }

    /// Backbone features at the six taps.
    pub fn backbone_taps<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, input: Var) -> Result<Vec<Var>> {
        let mut taps = Vec::with_capacity(TAP_NAMES.len());
        let mut x = input;
        for l in &self.backbone {
            x = match l.kind {
                LayerKind::Pool => g.maxpool2x(x)?,
                LayerKind::Conv { stride, pad, dilation, .. } => {
                    self.conv_relu(g, p, l.name, x, ConvSpec::new(stride, pad, dilation))?
                }
            };
            if TAP_NAMES.contains(&l.name) {
                taps.push(x);
            }
        }
        Ok(taps)
    }

    /// Top-down merge from `self.lfpn_start` towards the shallowest tap.
    /// Taps at or above the start pass through unchanged.
    pub fn build_lfpn<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, taps: &[Var]) -> Result<Vec<Var>> {
        if taps.len() != TAP_NAMES.len() {
            return Err(Error::dim(format!("expected {} taps, got {}", TAP_NAMES.len(), taps.len())));
        }
        let mut out = taps.to_vec();
        let mut running = taps[self.lfpn_start];
        for j in (0..self.lfpn_start).rev() {
            let top = self.conv_relu(g, p, &format!("lfpn{j}.top"), running, ConvSpec::new(1, 0, 1))?;
            let up = g.upsample2x(top, self.config.upsample)?;
            let lateral = self.conv_relu(g, p, &format!("lfpn{j}.lateral"), taps[j], ConvSpec::new(1, 0, 1))?;
            // ceil-sized deep maps upsample one cell too far; keep the top-left
            let (_, _, lh, lw) = g.value(lateral).dims4()?;
            let (_, _, uh, uw) = g.value(up).dims4()?;
            let up = if (uh, uw) == (lh, lw) { up } else { g.crop_spatial(up, lh, lw)? };
            let merged = match self.config.lfpn_merge {
                MergeOp::Add => g.add(up, lateral)?,
                MergeOp::Mul => g.mul(up, lateral)?,
            };
            out[j] = self.conv(g, p, &format!("lfpn{j}.smooth"), merged, ConvSpec::same(3))?;
            running = merged;
        }
        Ok(out)
    }

    fn bottleneck<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
        let [r, m, e] = bottleneck_names(prefix);
        let y = self.conv_relu(g, p, &r, x, ConvSpec::new(1, 0, 1))?;
        let y = self.conv_relu(g, p, &m, y, ConvSpec::same(3))?;
        self.conv_relu(g, p, &e, y, ConvSpec::new(1, 0, 1))
    }

    /// Context-sensitive prediction module of tap `l`: three context branches
    /// with 3×3, 5×5 and 7×7 receptive fields (widths w/2, w/4, w/4), each
    /// 3×3 conv a 1×1–3×3–1×1 bottleneck, concatenated and added to a 1×1
    /// projection of the input.
    pub fn build_cpm<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, l: usize, x: Var) -> Result<Var> {
        let pre = format!("cpm{l}");
        let a = self.bottleneck(g, p, &format!("{pre}.a"), x)?;
        let ctx = self.bottleneck(g, p, &format!("{pre}.ctx"), x)?;
        let b = self.bottleneck(g, p, &format!("{pre}.b"), ctx)?;
        let c = self.bottleneck(g, p, &format!("{pre}.c1"), ctx)?;
        let c = self.bottleneck(g, p, &format!("{pre}.c2"), c)?;
        let branches = g.concat_channels(&[a, b, c])?;
        let proj = self.conv(g, p, &format!("{pre}.proj"), x, ConvSpec::new(1, 0, 1))?;
        g.add(branches, proj)
    }

    /// Full forward pass: raw `N × 20 × side × side` head maps per tap.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, input: Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = g.value(input).dims4()?;
        if c != 3 || h != self.config.input_size || w != self.config.input_size {
            return Err(Error::dim(format!(
                "network expects N×3×{s}×{s} input, got {c}×{h}×{w}",
                s = self.config.input_size
            )));
        }
        let taps = self.backbone_taps(g, p, input)?;
        let feats = self.build_lfpn(g, p, &taps)?;
        let mut heads = Vec::with_capacity(feats.len());
        for (l, &f) in feats.iter().enumerate() {
            let f = if l < L2_TAPS {
                let gamma = p.get(&format!("l2norm{l}.gamma"))?;
                g.l2_rescale(f, gamma, T::lit(L2_EPS))?
            } else {
                f
            };
            let cpm = self.build_cpm(g, p, l, f)?;
            heads.push(self.conv(g, p, &format!("head{l}"), cpm, ConvSpec::same(3))?);
        }
        Ok(heads)
    }
}

/// Max-in-out face logits of tap `l`: `(positive, negative)` single-channel
/// maps.
pub fn face_scores<T: Real>(g: &mut Graph<T>, head: Var, l: usize) -> Result<(Var, Var)> {
    let side = g.value(head).shape().get(2).copied().unwrap_or(0);
    let layout = HeadLayout::for_tap(l, side);
    let pos = g.channel_group_max(head, 0, layout.cp)?;
    let neg = g.channel_group_max(head, layout.cp, layout.cn)?;
    Ok((pos, neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_scale_receptive_fields() {
        let cfg = NetworkConfig::full_scale();
        let rf: Vec<usize> = (0..6).map(|t| receptive_field(&cfg, t).unwrap().0).collect();
        assert_eq!(rf, vec![48, 108, 228, 340, 468, 724]);
        let ratios: Vec<f64> = (1..6).rev().map(|t| receptive_field(&cfg, t).unwrap().1).collect();
        assert_eq!(ratios, vec![1.13125, 0.73125, 0.53125, 0.35625, 0.16875]);
        assert_eq!(select_lfpn_start(&cfg), 3);
    }

    #[test]
    fn single_conv_receptive_field() {
        assert_eq!(chain_receptive_field([(3, 1, 1)]), 3);
        assert_eq!(chain_receptive_field([(3, 1, 2)]), 5);
        assert_eq!(chain_receptive_field([]), 1);
    }

    #[test]
    fn toy_start_is_argmin() {
        let cfg = NetworkConfig::toy();
        let gaps: Vec<f64> = (0..6).map(|t| (receptive_field(&cfg, t).unwrap().1 - 0.5).abs()).collect();
        let start = select_lfpn_start(&cfg);
        assert!(gaps.iter().all(|&g| g >= gaps[start]));
    }

    #[test]
    fn head_layout_sums_to_twenty() {
        for cfg in [NetworkConfig::full_scale(), NetworkConfig::toy()] {
            for (l, h) in cfg.head_layout().iter().enumerate() {
                assert_eq!(h.channels(), HEAD_CHANNELS);
                assert_eq!(h.cp, if l == 0 { 1 } else { 3 });
                assert_eq!(h.cp + h.cn, 4);
            }
        }
        let full: Vec<usize> = NetworkConfig::full_scale().head_layout().iter().map(|h| h.side).collect();
        assert_eq!(full, vec![160, 80, 40, 20, 10, 5]);
    }

    #[test]
    fn cpm_width_must_divide_by_four() {
        let cfg = NetworkConfig { cpm_width: 30, ..NetworkConfig::toy() };
        assert!(matches!(Network::new(cfg), Err(Error::Config(_))));
    }

    fn tiny() -> NetworkConfig {
        NetworkConfig { input_size: 64, width_factor: 1.0 / 32.0, cpm_width: 8, ..NetworkConfig::toy() }
    }

    #[test]
    fn forward_shapes_match_grid() {
        let net = Network::new(tiny()).unwrap();
        let params = net.init_params::<f32>(&mut ChaCha8Rng::seed_from_u64(1));
        net.check_params(&params).unwrap();
        let mut g = Graph::new();
        let pv = params.register(&mut g);
        let x = g.constant(Tensor::full(&[2, 3, 64, 64], 0.1));
        let heads = net.forward(&mut g, &pv, x).unwrap();
        let grid = net.config.anchor_grid().unwrap();
        let mut total = 0;
        for (l, h) in heads.iter().enumerate() {
            let side = grid.layers[l].rows;
            assert_eq!(g.value(*h).shape(), &[2, HEAD_CHANNELS, side, side]);
            total += side * side;
        }
        assert_eq!(total, grid.len());
    }

    #[test]
    fn lfpn_shapes_follow_taps() {
        for start in 0..6 {
            let cfg = NetworkConfig { lfpn_start: LfpnStart::Tap(start), ..tiny() };
            let net = Network::new(cfg).unwrap();
            let params = net.init_params::<f32>(&mut ChaCha8Rng::seed_from_u64(2));
            let mut g = Graph::new();
            let pv = params.register(&mut g);
            let x = g.constant(Tensor::full(&[1, 3, 64, 64], 0.3));
            let taps = net.backbone_taps(&mut g, &pv, x).unwrap();
            let out = net.build_lfpn(&mut g, &pv, &taps).unwrap();
            for (j, (&t, &o)) in taps.iter().zip(&out).enumerate() {
                assert_eq!(g.value(t).shape(), g.value(o).shape());
                assert_eq!(t == o, j >= start, "tap {j} with start {start}");
            }
        }
    }

    #[test]
    fn zero_branches_leave_projection() {
        let net = Network::new(tiny()).unwrap();
        let mut params = net.init_params::<f64>(&mut ChaCha8Rng::seed_from_u64(3));
        for (name, t) in params.tensors.iter_mut() {
            if name.starts_with("cpm0.") && !name.starts_with("cpm0.proj") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let mut g = Graph::new();
        let pv = params.register(&mut g);
        let c = net.config.tap_channels()[0];
        let x = g.constant(Tensor::from_fn(&[1, c, 6, 6], |i| (i as f64 * 0.37).sin()));
        let y = net.build_cpm(&mut g, &pv, 0, x).unwrap();
        let proj = net.conv(&mut g, &pv, "cpm0.proj", x, ConvSpec::new(1, 0, 1)).unwrap();
        assert_eq!(g.value(y), g.value(proj));
        assert_eq!(g.value(y).shape(), &[1, 8, 6, 6]);
    }

    #[test]
    fn max_in_out_groups() {
        let mut g = Graph::new();
        let mut vals = vec![0.0f64; 20];
        vals[..4].copy_from_slice(&[0.1, 0.7, 0.3, 0.2]);
        let head = g.constant(Tensor::new(&[1, 20, 1, 1], vals).unwrap());
        let (pos, neg) = face_scores(&mut g, head, 1).unwrap();
        assert_eq!(g.value(pos).data(), &[0.7]);
        assert_eq!(g.value(neg).data(), &[0.2]);
        let (pos0, neg0) = face_scores(&mut g, head, 0).unwrap();
        assert_eq!(g.value(pos0).data(), &[0.1]);
        assert_eq!(g.value(neg0).data(), &[0.7]);
    }
}
