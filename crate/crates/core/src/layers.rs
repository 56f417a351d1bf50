//! Parameterized building blocks shared by the segmentation network and the
//! discriminators.

use classwise_tensor::{he_normal, BnStats, Bound, ConvGeom, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Batch-norm behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics; running averages are observed for later update.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Mutable state threaded through one forward pass.
pub struct Ctx<'a, S: Scalar> {
    pub g: &'a mut Graph<S>,
    pub bound: &'a mut Bound<S>,
    pub buffers: &'a ParamStore<S>,
    pub mode: Mode,
    /// Convolutions executed so far.
    pub convs: usize,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(g: &'a mut Graph<S>, bound: &'a mut Bound<S>, buffers: &'a ParamStore<S>, mode: Mode) -> Self {
        Self {
            g,
            bound,
            buffers,
            mode,
            convs: 0,
        }
    }

    pub fn shape(&self, x: Var) -> Result<(usize, usize, usize, usize)> {
        Ok(self.g.value(x).dims4()?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    /// Square "same" convolution with He-normal weights and zero bias.
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = params.add(format!("{name}.weight"), he_normal(&[cout, cin, kernel, kernel], fan_in, rng));
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            geom: ConvGeom::same(kernel, dilation),
            cin,
            cout,
        }
    }

    pub fn apply<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let w = cx.bound.var(self.weight);
        let b = self.bias.map(|b| cx.bound.var(b));
        cx.convs += 1;
        Ok(cx.g.conv2d(x, w, b, self.geom)?)
    }
}

/// Stride-2, kernel-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct ConvUp {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvUp {
    pub fn new<S: Scalar, R: Rng>(params: &mut ParamStore<S>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let weight = params.add(format!("{name}.weight"), he_normal(&[cin, cout, 2, 2], cin, rng));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias }
    }

    pub fn apply<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let (w, b) = (cx.bound.var(self.weight), cx.bound.var(self.bias));
        cx.convs += 1;
        Ok(cx.g.conv_transpose2d(x, w, Some(b), 2)?)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<S: Scalar>(params: &mut ParamStore<S>, buffers: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[channels], S::one())),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: buffers.add(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: buffers.add(format!("{name}.running_var"), Tensor::full(&[channels], S::one())),
        }
    }

    pub fn apply<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let (gamma, beta) = (cx.bound.var(self.gamma), cx.bound.var(self.beta));
        let eps = S::lit(BN_EPS);
        match cx.mode {
            Mode::Train => {
                let (y, observed) = cx.g.batch_norm(x, gamma, beta, BnStats::Batch, eps)?;
                if let Some((mean, var)) = observed {
                    cx.bound.observe(self.running_mean, self.running_var, mean, var);
                }
                Ok(y)
            }
            Mode::Eval => {
                let m = cx.buffers.get(self.running_mean).data();
                let v = cx.buffers.get(self.running_var).data();
                Ok(cx.g.batch_norm(x, gamma, beta, BnStats::Running(m, v), eps)?.0)
            }
        }
    }
}

/// Fold batch statistics recorded on `bound` into the running averages.
pub fn absorb_observed<S: Scalar>(buffers: &mut ParamStore<S>, bound: &mut Bound<S>) {
    let m = S::lit(BN_MOMENTUM);
    for (mean_id, var_id, mean, var) in bound.take_observed() {
        for (dst, src) in [(mean_id, mean), (var_id, var)] {
            for (r, o) in buffers.get_mut(dst).data_mut().iter_mut().zip(src) {
                *r = (S::one() - m) * *r + m * o;
            }
        }
    }
}

/// Parallel average-pool branches, each reduced by a 1x1 conv and resized
/// back, concatenated after an optional identity slice of the input.
#[derive(Clone, Debug)]
pub struct PyramidPool {
    pub scales: Vec<usize>,
    pub branches: Vec<Conv>,
    pub identity: usize,
}

impl PyramidPool {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        scales: &[usize],
        branch_channels: usize,
        identity: usize,
        rng: &mut R,
    ) -> Self {
        let branches = (0..scales.len())
            .map(|i| Conv::new(params, &format!("{name}.branch{i}"), cin, branch_channels, 1, 1, true, rng))
            .collect();
        Self {
            scales: scales.to_vec(),
            branches,
            identity,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.identity + self.branches.iter().map(|b| b.cout).sum::<usize>()
    }

    pub fn apply<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let (_, _, h, w) = cx.shape(x)?;
        let mut streams = Vec::with_capacity(self.branches.len() + 1);
        if self.identity > 0 {
            streams.push(cx.g.slice_channels(x, 0, self.identity)?);
        }
        for (&s, conv) in self.scales.iter().zip(&self.branches) {
            if s == 0 || s > h.min(w) {
                return Err(Error::Shape(format!("pyramid scale {s} exceeds a {h}x{w} map")));
            }
            let pooled = cx.g.adaptive_avg_pool(x, s, s)?;
            let reduced = conv.apply(cx, pooled)?;
            streams.push(cx.g.resize_bilinear(reduced, h, w)?);
        }
        Ok(cx.g.concat(&streams)?)
    }
}

/// Combined checksum of parameters and buffers.
pub fn checksum_pair<S: Scalar>(params: &ParamStore<S>, buffers: &ParamStore<S>) -> u64 {
    crate::seeds::mix64(params.checksum() ^ buffers.checksum().rotate_left(17))
}
