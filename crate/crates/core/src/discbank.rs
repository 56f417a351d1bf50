//! Per-class domain discriminators and the single-discriminator baseline.

use classwise_tensor::{Bound, Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv, Ctx, Mode, PyramidPool};
use crate::objectives::DomainProbMap;
use crate::seeds;

/// Overall reduction before the pyramid pool.
pub const DISC_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub hidden_channels: usize,
    pub kernel: usize,
    pub pyramid_scales: Vec<usize>,
    pub pyramid_branch_channels: usize,
}

impl DiscConfig {
    /// Table-scale discriminator (16 channels, four 4-channel pyramid streams).
    pub fn full() -> Self {
        Self {
            hidden_channels: 16,
            kernel: 7,
            pyramid_scales: vec![1, 2, 4, 8],
            pyramid_branch_channels: 4,
        }
    }

    /// Narrow discriminator with scales fitted to a `size x size` input.
    pub fn desk_for_size(size: usize) -> Self {
        let m = (size / DISC_STRIDE).max(1);
        Self {
            hidden_channels: 8,
            kernel: 7,
            pyramid_scales: [1, 2, 4, 8].iter().map(|&s: &usize| s.min(m)).collect(),
            pyramid_branch_channels: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 || self.pyramid_branch_channels == 0 {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("discriminator kernel must be odd".into()));
        }
        if self.pyramid_scales.len() != 4 || self.pyramid_scales.contains(&0) {
            return Err(Error::Config("discriminator pyramid needs four positive scales".into()));
        }
        if self.pyramid_scales.len() * self.pyramid_branch_channels != self.hidden_channels {
            return Err(Error::Config(format!(
                "pyramid streams give {} channels, hidden width is {}",
                self.pyramid_scales.len() * self.pyramid_branch_channels,
                self.hidden_channels
            )));
        }
        Ok(())
    }
}

/// One discriminator: features in, per-pixel domain softmax out.
#[derive(Clone, Debug)]
pub struct Discriminator<S: Scalar> {
    params: ParamStore<S>,
    input_channels: usize,
    conv1: Conv,
    conv2: Conv,
    pyramid: PyramidPool,
    out: Conv,
}

/// Shapes of each row of a discriminator pass, `[c, h, w]`.
pub type DiscTrace = Vec<(&'static str, [usize; 3], usize)>;

impl<S: Scalar> Discriminator<S> {
    pub fn build(cfg: &DiscConfig, input_channels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeds::rng(seed, &[seeds::tag("discriminator")]);
        let mut p = ParamStore::new();
        let h = cfg.hidden_channels;
        let conv1 = Conv::new(&mut p, "conv1", input_channels, h, cfg.kernel, 1, true, &mut rng);
        let conv2 = Conv::new(&mut p, "conv2", h, h, cfg.kernel, 1, true, &mut rng);
        let pyramid = PyramidPool::new(&mut p, "pyramid", h, &cfg.pyramid_scales, cfg.pyramid_branch_channels, 0, &mut rng);
        let out = Conv::new(&mut p, "out", h, 2, 1, 1, true, &mut rng);
        Ok(Self {
            params: p,
            input_channels,
            conv1,
            conv2,
            pyramid,
            out,
        })
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound<S> {
        self.params.bind(g, trainable)
    }

    pub fn zero_output_layer(&mut self) {
        for id in std::iter::once(self.out.weight).chain(self.out.bias) {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Softmax over `{synthetic, real}`, `[n, 2, h, w]`.
    pub fn forward(&self, g: &mut Graph<S>, bound: &mut Bound<S>, x: Var) -> Result<Var> {
        self.run(g, bound, x, &mut |_, _, _| {})
    }

    fn run(
        &self,
        g: &mut Graph<S>,
        bound: &mut Bound<S>,
        x: Var,
        trace: &mut dyn FnMut(&'static str, &Tensor<S>, usize),
    ) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.input_channels {
            return Err(Error::Shape(format!("discriminator expects {} channels, got {c}", self.input_channels)));
        }
        if h % DISC_STRIDE != 0 || w % DISC_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("discriminator input {h}x{w} not divisible by {DISC_STRIDE}")));
        }
        let empty = ParamStore::new();
        let mut cx = Ctx::new(g, bound, &empty, Mode::Eval);
        let mut last = 0;
        let mut mark = |name, v: Var, cx: &Ctx<'_, S>| {
            trace(name, cx.g.value(v), cx.convs - last);
            last = cx.convs;
        };
        let mut y = cx.g.relu(x);
        y = self.conv1.apply(&mut cx, y)?;
        y = cx.g.relu(y);
        mark("conv1", y, &cx);
        y = cx.g.adaptive_avg_pool(y, h / 2, w / 2)?;
        mark("pool1", y, &cx);
        y = self.conv2.apply(&mut cx, y)?;
        y = cx.g.relu(y);
        mark("conv2", y, &cx);
        y = cx.g.adaptive_avg_pool(y, h / 4, w / 4)?;
        mark("pool2", y, &cx);
        y = self.pyramid.apply(&mut cx, y)?;
        y = cx.g.relu(y);
        mark("pyramid", y, &cx);
        y = cx.g.resize_bilinear(y, h, w)?;
        mark("bilinear", y, &cx);
        y = self.out.apply(&mut cx, y)?;
        mark("out_conv", y, &cx);
        Ok(cx.g.softmax(y)?)
    }

    /// Row name, output shape and conv count for every row.
    pub fn forward_traced(&self, x: &Tensor<S>) -> Result<DiscTrace> {
        let mut g = Graph::new();
        let mut bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mut rows = Vec::new();
        self.run(&mut g, &mut bound, xv, &mut |name, t, convs| {
            let s = t.shape();
            rows.push((name, [s[1], s[2], s[3]], convs));
        })?;
        Ok(rows)
    }
}

/// Class-wise bank or the single-discriminator baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankKind {
    /// One discriminator per class, each seeing one feature channel.
    ClassWise,
    /// One discriminator over all channels.
    Single,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorBank<S: Scalar> {
    kind: BankKind,
    class_count: usize,
    config: DiscConfig,
    discs: Vec<Discriminator<S>>,
}

impl<S: Scalar> DiscriminatorBank<S> {
    pub fn build(kind: BankKind, class_count: usize, config: DiscConfig, seed: u64) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::Config("a bank needs at least one class".into()));
        }
        let discs = match kind {
            BankKind::ClassWise => (0..class_count)
                .map(|j| Discriminator::build(&config, 1, seeds::derive(seed, &[j as u64])))
                .collect::<Result<Vec<_>>>()?,
            BankKind::Single => vec![Discriminator::build(&config, class_count, seed)?],
        };
        Ok(Self {
            kind,
            class_count,
            config,
            discs,
        })
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.discs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.discs.is_empty()
    }

    pub fn discriminators(&self) -> &[Discriminator<S>] {
        &self.discs
    }

    pub fn discriminators_mut(&mut self) -> &mut [Discriminator<S>] {
        &mut self.discs
    }

    pub fn checksums(&self) -> Vec<u64> {
        self.discs.iter().map(|d| d.checksum()).collect()
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Vec<Bound<S>> {
        self.discs.iter().map(|d| d.bind(g, trainable)).collect()
    }

    /// One probability map per discriminator; class-wise discriminator `j`
    /// sees only channel `j` of `features`.
    pub fn discriminate(&self, g: &mut Graph<S>, bounds: &mut [Bound<S>], features: Var) -> Result<Vec<Var>> {
        let (_, c, _, _) = g.value(features).dims4()?;
        if c != self.class_count {
            return Err(Error::Shape(format!("{c} feature channels for a {}-class bank", self.class_count)));
        }
        match self.kind {
            BankKind::ClassWise => (0..self.class_count)
                .map(|j| {
                    let slice = g.slice_channels(features, j, 1)?;
                    self.discs[j].forward(g, &mut bounds[j], slice)
                })
                .collect(),
            BankKind::Single => Ok(vec![self.discs[0].forward(g, &mut bounds[0], features)?]),
        }
    }

    /// Value-level convenience wrapper around [`Self::discriminate`].
    pub fn discriminate_values(&self, features: &Tensor<S>) -> Result<Vec<DomainProbMap<S>>> {
        let mut g = Graph::new();
        let mut bounds = self.bind(&mut g, false);
        let f = g.constant(features.clone());
        self.discriminate(&mut g, &mut bounds, f)?
            .into_iter()
            .map(|v| DomainProbMap::new(g.value(v).clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(k: usize, s: usize) -> Tensor<f64> {
        Tensor::from_fn(&[1, k, s, s], |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0)
    }

    #[test]
    fn probabilities_normalized() {
        let bank = DiscriminatorBank::<f64>::build(BankKind::ClassWise, 3, DiscConfig::desk_for_size(16), 2).unwrap();
        let maps = bank.discriminate_values(&feats(3, 16)).unwrap();
        assert_eq!(maps.len(), 3);
        assert_eq!(maps[0].tensor().shape(), &[1, 2, 16, 16]);
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let mut bank = DiscriminatorBank::<f64>::build(BankKind::ClassWise, 2, DiscConfig::desk_for_size(16), 2).unwrap();
        bank.discriminators_mut()[1].zero_output_layer();
        let maps = bank.discriminate_values(&feats(2, 16)).unwrap();
        assert!(maps[1].tensor().data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let bank = DiscriminatorBank::<f64>::build(BankKind::ClassWise, 3, DiscConfig::desk_for_size(16), 2).unwrap();
        assert!(matches!(bank.discriminate_values(&feats(4, 16)), Err(Error::Shape(_))));
    }

    #[test]
    fn discriminators_are_independent() {
        let mut bank = DiscriminatorBank::<f64>::build(BankKind::ClassWise, 3, DiscConfig::desk_for_size(16), 2).unwrap();
        let x = feats(3, 16);
        let before = bank.discriminate_values(&x).unwrap();
        for t in bank.discriminators_mut()[0].params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.1);
        }
        let after = bank.discriminate_values(&x).unwrap();
        assert_ne!(before[0], after[0]);
        assert_eq!(before[1..], after[1..]);
    }

    #[test]
    fn class_isolation() {
        let bank = DiscriminatorBank::<f64>::build(BankKind::ClassWise, 3, DiscConfig::desk_for_size(16), 2).unwrap();
        let x = feats(3, 16);
        let mut y = x.clone();
        for v in &mut y.data_mut()[256..512] {
            *v += 3.0;
        }
        let (a, b) = (bank.discriminate_values(&x).unwrap(), bank.discriminate_values(&y).unwrap());
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1], b[1]);
        assert_eq!(a[2], b[2]);
    }

    #[test]
    fn single_kind_has_one_member() {
        let bank = DiscriminatorBank::<f64>::build(BankKind::Single, 4, DiscConfig::desk_for_size(16), 2).unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.discriminate_values(&feats(4, 16)).unwrap().len(), 1);
    }

    #[test]
    fn conv_count_is_seven() {
        let d = Discriminator::<f64>::build(&DiscConfig::desk_for_size(16), 1, 0).unwrap();
        let rows = d.forward_traced(&feats(1, 16)).unwrap();
        assert_eq!(rows.iter().map(|r| r.2).sum::<usize>(), 7);
    }
}
