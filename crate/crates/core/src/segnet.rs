//! DensePyramid segmentation network: dilated dense blocks, a pyramid pool at
//! the bottleneck, and bilinear/transposed-conv resampling.

use std::fmt;
use std::str::FromStr;

use classwise_tensor::{Bound, Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layers::{absorb_observed, checksum_pair, BatchNorm, Conv, ConvUp, Ctx, Mode, PyramidPool};
use crate::seeds;

/// ELU slope for negative inputs.
pub const ELU_ALPHA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Full,
    Desk,
}

/// Which copy of the network this is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Trained on synthetic data and then frozen.
    CnnC,
    /// Adapted toward the real domain.
    CnnR,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::CnnC => "cnn_c",
            Role::CnnR => "cnn_r",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Parse(format!("unknown profile `{s}`"))),
        }
    }
}

/// One dilated dense block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub layers: usize,
    pub growth: usize,
    /// One dilation per layer.
    pub dilations: Vec<usize>,
    /// Extra channels emitted by the last layer only.
    pub tail_extra: usize,
    /// Output width the block must reach, if pinned.
    pub expected_out: Option<usize>,
}

impl StageConfig {
    pub fn new(layers: usize, growth: usize, dilations: Vec<usize>) -> Self {
        Self {
            layers,
            growth,
            dilations,
            tail_extra: 0,
            expected_out: None,
        }
    }

    pub fn out_channels(&self, m0: usize) -> usize {
        m0 + self.growth * self.layers + self.tail_extra
    }
}

/// Doubling dilations capped at 8, reversed for upsampling-phase blocks.
pub fn dilation_schedule(layers: usize, upsampling: bool) -> Vec<usize> {
    let mut d: Vec<usize> = (0..layers).map(|i| (1usize << i.min(3)).min(8)).collect();
    if upsampling {
        d.reverse();
    }
    d
}

/// Pyramid scales `(1, 2, 3, b, b)` clipped to a `b x b` bottleneck.
pub fn pyramid_scales_for(bottleneck: usize) -> Vec<usize> {
    [1, 2, 3, bottleneck, bottleneck].iter().map(|&s| s.min(bottleneck).max(1)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub profile: Profile,
    pub input_channels: usize,
    pub class_count: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    /// Six dense blocks: three before the bottleneck, the bottleneck, two after.
    pub stages: Vec<StageConfig>,
    /// Width of each dense layer's 1x1 conv, as a multiple of its growth rate.
    pub bottleneck_factor: usize,
    pub pyramid_scales: Vec<usize>,
    pub pyramid_branch_channels: usize,
    pub pyramid_identity_channels: usize,
    pub down_divisor: usize,
    pub up_divisor: usize,
    pub head_channels: usize,
}

/// Spatial reduction between the input and the bottleneck.
pub const TOTAL_STRIDE: usize = 8;

impl SegNetConfig {
    /// Table-scale network for 240x240 inputs.
    pub fn full(input_channels: usize, class_count: usize) -> Self {
        let stage = |layers, growth, up: bool, out| StageConfig {
            expected_out: Some(out),
            ..StageConfig::new(layers, growth, dilation_schedule(layers, up))
        };
        let mut bottleneck = stage(9, 28, true, 1088);
        bottleneck.tail_extra = 4;
        Self {
            profile: Profile::Full,
            input_channels,
            class_count,
            stem_channels: 64,
            stem_kernel: 7,
            stages: vec![
                stage(3, 64, false, 256),
                stage(6, 64, false, 512),
                stage(9, 64, false, 832),
                bottleneck,
                stage(6, 64, true, 656),
                stage(3, 64, true, 356),
            ],
            bottleneck_factor: 4,
            pyramid_scales: vec![1, 2, 3, 6, 30],
            pyramid_branch_channels: 104,
            pyramid_identity_channels: 312,
            down_divisor: 2,
            up_divisor: 4,
            head_channels: 256,
        }
    }

    /// Small network for 48x48 inputs.
    pub fn desk(input_channels: usize, class_count: usize) -> Self {
        Self::desk_for_size(input_channels, class_count, 48)
    }

    /// Desk network with pyramid scales fitted to a `size x size` input.
    pub fn desk_for_size(input_channels: usize, class_count: usize, size: usize) -> Self {
        let layers = [2, 2, 3, 3, 2, 2];
        let stages = layers
            .iter()
            .enumerate()
            .map(|(i, &n)| StageConfig::new(n, 16, dilation_schedule(n, i >= 3)))
            .collect();
        Self {
            profile: Profile::Desk,
            input_channels,
            class_count,
            stem_channels: 16,
            stem_kernel: 7,
            stages,
            bottleneck_factor: 4,
            pyramid_scales: pyramid_scales_for((size / TOTAL_STRIDE).max(1)),
            pyramid_branch_channels: 8,
            pyramid_identity_channels: 36,
            down_divisor: 2,
            up_divisor: 4,
            head_channels: 32,
        }
    }

    /// Channel count after every row of the architecture.
    pub fn channel_plan(&self) -> Result<ChannelPlan> {
        self.validate_shape_free()?;
        let s = &self.stages;
        let d1 = s[0].out_channels(self.stem_channels);
        let down1 = d1 / self.down_divisor;
        let d2 = s[1].out_channels(down1);
        let down2 = d2 / self.down_divisor;
        let d3 = s[2].out_channels(down2);
        let pyramid = self.pyramid_identity_channels + self.pyramid_scales.len() * self.pyramid_branch_channels;
        let d4 = s[3].out_channels(pyramid);
        let up1 = d4 / self.up_divisor;
        let d5 = s[4].out_channels(up1);
        let up2 = d5 / self.up_divisor;
        let d6 = s[5].out_channels(up2);
        let plan = ChannelPlan {
            blocks_in: [self.stem_channels, down1, down2, pyramid, up1, up2],
            blocks_out: [d1, d2, d3, d4, d5, d6],
            pyramid,
        };
        for (i, (st, &out)) in s.iter().zip(&plan.blocks_out).enumerate() {
            if let Some(want) = st.expected_out {
                if want != out {
                    return Err(Error::Config(format!(
                        "dense block {} reaches {out} channels, expected {want}",
                        i + 1
                    )));
                }
            }
        }
        if [down1, down2, up1, up2].contains(&0) {
            return Err(Error::Config("resampling divides the channel count to zero".into()));
        }
        Ok(plan)
    }

    fn validate_shape_free(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 || self.class_count < 2 {
            return bad("need at least one input channel and two classes".into());
        }
        if self.stages.len() != 6 {
            return bad(format!("{} dense blocks, expected 6", self.stages.len()));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.layers == 0 || st.growth == 0 {
                return bad(format!("dense block {} is empty", i + 1));
            }
            if st.dilations.len() != st.layers || st.dilations.contains(&0) {
                return bad(format!("dense block {} needs {} positive dilations", i + 1, st.layers));
            }
            let monotone = if i < 3 {
                st.dilations.windows(2).all(|w| w[0] <= w[1])
            } else {
                st.dilations.windows(2).all(|w| w[0] >= w[1])
            };
            if !monotone {
                return bad(format!("dilations of dense block {} are not monotone", i + 1));
            }
        }
        if self.pyramid_scales.len() != 5 || self.pyramid_scales.contains(&0) {
            return bad("the pyramid pool needs five positive scales".into());
        }
        let s = &self.stages;
        let d3 = s[2].out_channels(s[1].out_channels(s[0].out_channels(self.stem_channels) / self.down_divisor) / self.down_divisor);
        if self.pyramid_identity_channels > d3 {
            return bad(format!("pyramid identity stream {} wider than its input {d3}", self.pyramid_identity_channels));
        }
        if self.down_divisor == 0 || self.up_divisor == 0 || self.bottleneck_factor == 0 || self.head_channels == 0 {
            return bad("divisors and widths must be positive".into());
        }
        if self.stem_kernel.is_multiple_of(2) {
            return bad("stem kernel must be odd".into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.channel_plan().map(|_| ())
    }

    /// Convolutions per architecture row, derived from the config.
    pub fn conv_counts(&self) -> Vec<(&'static str, usize)> {
        let n: Vec<usize> = self.stages.iter().map(|s| 2 * s.layers).collect();
        vec![
            ("stem_conv", 1),
            ("avg_pool", 0),
            ("dense1", n[0]),
            ("down1", 1),
            ("dense2", n[1]),
            ("down2", 1),
            ("dense3", n[2]),
            ("pyramid", self.pyramid_scales.len()),
            ("dense4", n[3]),
            ("up1", 1),
            ("dense5", n[4]),
            ("up2", 1),
            ("dense6", n[5]),
            ("bilinear", 0),
            ("head_conv3", 1),
            ("head_conv1", 1),
        ]
    }

    pub fn total_convs(&self) -> usize {
        self.conv_counts().iter().map(|r| r.1).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelPlan {
    pub blocks_in: [usize; 6],
    pub blocks_out: [usize; 6],
    pub pyramid: usize,
}

#[derive(Clone, Debug)]
struct DenseLayer {
    bn1: BatchNorm,
    conv1: Conv,
    bn2: BatchNorm,
    conv2: Conv,
}

#[derive(Clone, Debug)]
struct DenseBlock {
    layers: Vec<DenseLayer>,
}

impl DenseBlock {
    fn new<S: Scalar, R: Rng>(
        params: &mut ParamStore<S>,
        buffers: &mut ParamStore<S>,
        name: &str,
        m0: usize,
        st: &StageConfig,
        factor: usize,
        rng: &mut R,
    ) -> Self {
        let mid = factor * st.growth;
        let layers = (0..st.layers)
            .map(|l| {
                let cin = m0 + l * st.growth;
                let cout = st.growth + if l + 1 == st.layers { st.tail_extra } else { 0 };
                let n = format!("{name}.layer{l}");
                DenseLayer {
                    bn1: BatchNorm::new(params, buffers, &format!("{n}.bn1"), cin),
                    conv1: Conv::new(params, &format!("{n}.conv1"), cin, mid, 1, 1, false, rng),
                    bn2: BatchNorm::new(params, buffers, &format!("{n}.bn2"), mid),
                    conv2: Conv::new(params, &format!("{n}.conv2"), mid, cout, 3, st.dilations[l], true, rng),
                }
            })
            .collect();
        Self { layers }
    }

    fn apply<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let alpha = S::lit(ELU_ALPHA);
        let mut produced = vec![x];
        for layer in &self.layers {
            let input = if produced.len() == 1 { x } else { cx.g.concat(&produced)? };
            let mut h = layer.bn1.apply(cx, input)?;
            h = cx.g.elu(h, alpha);
            h = layer.conv1.apply(cx, h)?;
            h = layer.bn2.apply(cx, h)?;
            h = cx.g.elu(h, alpha);
            h = layer.conv2.apply(cx, h)?;
            produced.push(h);
        }
        Ok(cx.g.concat(&produced)?)
    }
}

#[derive(Clone, Debug)]
struct Arch {
    stem: Conv,
    blocks: Vec<DenseBlock>,
    down: [Conv; 2],
    pyramid: PyramidPool,
    up: [ConvUp; 2],
    head_bn1: BatchNorm,
    head_conv3: Conv,
    head_bn2: BatchNorm,
    head_conv1: Conv,
}

/// Output shape and executed convolutions of one architecture row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowTrace {
    pub name: &'static str,
    pub shape: [usize; 3],
    pub convs: usize,
}

/// The segmentation network: parameters, batch-norm buffers and layout.
#[derive(Clone, Debug)]
pub struct SegNet<S: Scalar> {
    config: SegNetConfig,
    role: Role,
    params: ParamStore<S>,
    buffers: ParamStore<S>,
    arch: Arch,
}

impl<S: Scalar> SegNet<S> {
    pub fn build(config: SegNetConfig, role: Role, seed: u64) -> Result<Self> {
        let plan = config.channel_plan()?;
        let mut rng = seeds::rng(seed, &[seeds::tag("segnet")]);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let (p, b, r) = (&mut params, &mut buffers, &mut rng);
        let c = &config;
        let stem = Conv::new(p, "stem", c.input_channels, c.stem_channels, c.stem_kernel, 1, true, r);
        let mut blocks = Vec::with_capacity(6);
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut pyramid = None;
        for i in 0..6 {
            if i == 3 {
                pyramid = Some(PyramidPool::new(
                    p,
                    "pyramid",
                    plan.blocks_out[2],
                    &c.pyramid_scales,
                    c.pyramid_branch_channels,
                    c.pyramid_identity_channels,
                    r,
                ));
            }
            let name = format!("dense{}", i + 1);
            blocks.push(DenseBlock::new(p, b, &name, plan.blocks_in[i], &c.stages[i], c.bottleneck_factor, r));
            match i {
                0 | 1 => down.push(Conv::new(p, &format!("down{}", i + 1), plan.blocks_out[i], plan.blocks_in[i + 1], 1, 1, true, r)),
                3 | 4 => up.push(ConvUp::new(p, &format!("up{}", i - 2), plan.blocks_out[i], plan.blocks_in[i + 1], r)),
                _ => {}
            }
        }
        let d6 = plan.blocks_out[5];
        let head_bn1 = BatchNorm::new(p, b, "head.bn1", d6);
        let head_conv3 = Conv::new(p, "head.conv3", d6, c.head_channels, 3, 1, true, r);
        let head_bn2 = BatchNorm::new(p, b, "head.bn2", c.head_channels);
        let head_conv1 = Conv::new(p, "head.conv1", c.head_channels, c.class_count, 1, 1, true, r);
        let [d1, d2]: [Conv; 2] = down.try_into().expect("two downsamples");
        let [u1, u2]: [ConvUp; 2] = up.try_into().expect("two upsamples");
        let arch = Arch {
            stem,
            blocks,
            down: [d1, d2],
            pyramid: pyramid.expect("built before the bottleneck"),
            up: [u1, u2],
            head_bn1,
            head_conv3,
            head_bn2,
            head_conv1,
        };
        Ok(Self {
            config,
            role,
            params,
            buffers,
            arch,
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore<S> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.buffers
    }

    /// Hash of parameters and running statistics.
    pub fn checksum(&self) -> u64 {
        checksum_pair(&self.params, &self.buffers)
    }

    /// A copy with a different role and identical weights.
    pub fn clone_as(&self, role: Role) -> Self {
        Self {
            role,
            ..self.clone()
        }
    }

    /// Zero the final 1x1 conv so every pixel gets equal logits.
    pub fn zero_final_layer(&mut self) {
        let conv = &self.arch.head_conv1;
        for id in std::iter::once(conv.weight).chain(conv.bias) {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound<S> {
        self.params.bind(g, trainable)
    }

    /// Logits `[n, k, h, w]`; the last conv's output, which is also the feature map.
    pub fn forward(&self, g: &mut Graph<S>, bound: &mut Bound<S>, x: Var, mode: Mode) -> Result<Var> {
        let mut cx = Ctx::new(g, bound, &self.buffers, mode);
        self.run(&mut cx, x, &mut |_, _, _| {})
    }

    /// Identical to [`SegNet::forward`].
    pub fn features(&self, g: &mut Graph<S>, bound: &mut Bound<S>, x: Var, mode: Mode) -> Result<Var> {
        self.forward(g, bound, x, mode)
    }

    fn check_input(&self, shape: (usize, usize, usize, usize)) -> Result<()> {
        let (_, c, h, w) = shape;
        if c != self.config.input_channels {
            return Err(Error::Shape(format!("{c} input channels, network expects {}", self.config.input_channels)));
        }
        if h == 0 || w == 0 || h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 {
            return Err(Error::Shape(format!("input {h}x{w} not divisible by {TOTAL_STRIDE}")));
        }
        Ok(())
    }

    fn run(
        &self,
        cx: &mut Ctx<'_, S>,
        x: Var,
        trace: &mut dyn FnMut(&'static str, Var, &Ctx<'_, S>),
    ) -> Result<Var> {
        let shape = cx.shape(x)?;
        self.check_input(shape)?;
        let (_, _, h, w) = shape;
        let a = &self.arch;
        let alpha = S::lit(ELU_ALPHA);
        let mut y = a.stem.apply(cx, x)?;
        trace("stem_conv", y, cx);
        y = cx.g.adaptive_avg_pool(y, h / 2, w / 2)?;
        trace("avg_pool", y, cx);
        for i in 0..6 {
            if i == 3 {
                y = a.pyramid.apply(cx, y)?;
                trace("pyramid", y, cx);
            }
            y = a.blocks[i].apply(cx, y)?;
            trace(["dense1", "dense2", "dense3", "dense4", "dense5", "dense6"][i], y, cx);
            match i {
                0 | 1 => {
                    let (_, _, bh, bw) = cx.shape(y)?;
                    y = cx.g.resize_bilinear(y, bh / 2, bw / 2)?;
                    y = a.down[i].apply(cx, y)?;
                    trace(["down1", "down2"][i], y, cx);
                }
                3 | 4 => {
                    y = a.up[i - 3].apply(cx, y)?;
                    trace(["up1", "up2"][i - 3], y, cx);
                }
                _ => {}
            }
        }
        y = cx.g.resize_bilinear(y, h, w)?;
        trace("bilinear", y, cx);
        y = a.head_bn1.apply(cx, y)?;
        y = cx.g.elu(y, alpha);
        y = a.head_conv3.apply(cx, y)?;
        trace("head_conv3", y, cx);
        y = a.head_bn2.apply(cx, y)?;
        y = cx.g.elu(y, alpha);
        y = a.head_conv1.apply(cx, y)?;
        trace("head_conv1", y, cx);
        Ok(y)
    }

    /// Evaluation-mode logits for a batch.
    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let mut bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &mut bound, xv, Mode::Eval)?;
        Ok(g.value(y).clone())
    }

    /// Per-pixel argmax labels, `n * h * w` entries.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Vec<u8>> {
        Ok(argmax_channels(&self.infer(x)?))
    }

    /// Evaluation-mode forward recording each row's shape and conv count.
    pub fn forward_traced(&self, x: &Tensor<S>) -> Result<Vec<RowTrace>> {
        let mut g = Graph::new();
        let mut bound = self.bind(&mut g, false);
        let mut cx = Ctx::new(&mut g, &mut bound, &self.buffers, Mode::Eval);
        let xv = cx.g.constant(x.clone());
        let mut rows = Vec::new();
        let mut last = 0;
        self.run(&mut cx, xv, &mut |name, v, cx| {
            let s = cx.g.value(v).shape();
            rows.push(RowTrace {
                name,
                shape: [s[1], s[2], s[3]],
                convs: cx.convs - last,
            });
            last = cx.convs;
        })?;
        Ok(rows)
    }

    /// Standalone checkpoint holding the config, role, parameters and buffers.
    pub fn to_checkpoint(&self) -> Result<Checkpoint<S>> {
        let mut ck = Checkpoint::new(serde_json::to_value(&self.config)?);
        ck.meta = serde_json::json!({ "role": self.role });
        ck.push_store("params", &self.params);
        ck.push_store("buffers", &self.buffers);
        Ok(ck)
    }

    /// Inverse of [`Self::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint<S>) -> Result<Self> {
        let config: SegNetConfig = serde_json::from_value(ck.config.clone())?;
        let role: Role = serde_json::from_value(ck.meta["role"].clone())?;
        let mut net = Self::build(config, role, 0)?;
        ck.restore_store("params", &mut net.params)?;
        ck.restore_store("buffers", &mut net.buffers)?;
        Ok(net)
    }

    /// Fold running statistics observed in a training-mode pass.
    pub fn absorb_observed(&mut self, bound: &mut Bound<S>) {
        absorb_observed(&mut self.buffers, bound);
    }
}

/// Channel argmax of `[n, k, h, w]`, ties to the lowest class.
pub fn argmax_channels<S: Scalar>(logits: &Tensor<S>) -> Vec<u8> {
    let s = logits.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * hw + p] > d[(b * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_profile_channels_follow_the_table() {
        let plan = SegNetConfig::full(4, 38).channel_plan().unwrap();
        assert_eq!(plan.blocks_out, [256, 512, 832, 1088, 656, 356]);
        assert_eq!(plan.blocks_in, [64, 128, 256, 832, 272, 164]);
        assert_eq!(plan.pyramid, 832);
        assert_eq!(SegNetConfig::full(4, 38).total_convs(), 84);
    }

    #[test]
    fn desk_channels_follow_growth() {
        let plan = SegNetConfig::desk(4, 6).channel_plan().unwrap();
        assert_eq!(plan.blocks_out, [48, 56, 76, 124, 63, 47]);
        assert_eq!(plan.blocks_in, [16, 24, 28, 76, 31, 15]);
    }

    #[test]
    fn violated_growth_is_a_config_error() {
        let mut c = SegNetConfig::full(4, 38);
        c.stages[3].tail_extra = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn non_monotone_dilations_rejected() {
        let mut c = SegNetConfig::desk(4, 6);
        c.stages[0].dilations = vec![2, 1];
        assert!(c.validate().is_err());
        let mut c = SegNetConfig::desk(4, 6);
        c.stages[4].dilations = vec![1, 2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn desk_forward_shape_and_zero_head() {
        let mut net = SegNet::<f32>::build(SegNetConfig::desk(4, 6), Role::CnnC, 1).unwrap();
        let x = Tensor::from_fn(&[1, 4, 48, 48], |i| ((i % 13) as f32) / 13.0);
        assert_eq!(net.infer(&x).unwrap().shape(), &[1, 6, 48, 48]);
        net.zero_final_layer();
        let y = net.infer(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_input_rejected() {
        let net = SegNet::<f32>::build(SegNetConfig::desk(4, 6), Role::CnnC, 1).unwrap();
        assert!(matches!(net.infer(&Tensor::zeros(&[1, 4, 44, 48])), Err(Error::Shape(_))));
        assert!(matches!(net.infer(&Tensor::zeros(&[1, 3, 48, 48])), Err(Error::Shape(_))));
    }

    #[test]
    fn traced_conv_counts_match_config() {
        let net = SegNet::<f32>::build(SegNetConfig::desk(4, 6), Role::CnnC, 1).unwrap();
        let rows = net.forward_traced(&Tensor::zeros(&[1, 4, 48, 48])).unwrap();
        let want = net.config().conv_counts();
        assert_eq!(rows.len(), want.len());
        for (r, (name, n)) in rows.iter().zip(want) {
            assert_eq!((r.name, r.convs), (name, n));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = SegNet::<f32>::build(SegNetConfig::desk(4, 6), Role::CnnR, 3).unwrap();
        let bytes = net.to_checkpoint().unwrap().to_bytes().unwrap();
        let back = SegNet::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.checksum(), net.checksum());
        assert_eq!(back.role(), Role::CnnR);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = SegNet::<f32>::build(SegNetConfig::desk(4, 6), Role::CnnC, 5).unwrap();
        let b = SegNet::<f32>::build(SegNetConfig::desk(4, 6), Role::CnnR, 5).unwrap();
        let c = SegNet::<f32>::build(SegNetConfig::desk(4, 6), Role::CnnR, 6).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }
}
