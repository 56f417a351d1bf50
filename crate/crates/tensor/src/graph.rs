//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse and only visits nodes that depend on a variable leaf, so
//! frozen sub-networks (constant leaves) cost nothing on the way back.

use crate::error::{Result, TensorError};
use crate::kernels::{self, BnSaved, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Pool {
        x: Var,
    },
    Resize {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<S>,
        train: bool,
    },
    Elu {
        x: Var,
        alpha: S,
    },
    Relu {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Tensor<S>,
        labels: Vec<usize>,
        ignore: Option<usize>,
        count: usize,
    },
    ProbNll {
        probs: Var,
        targets: Vec<usize>,
        eps: S,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: S,
    },
    Mean {
        x: Var,
    },
    WeightedSum {
        terms: Vec<(Var, S)>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Normalization statistics source for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a, S> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed running `(mean, var)`.
    Running(&'a [S], &'a [S]),
}

/// Batch statistics observed by a training-mode batch norm: `(mean, unbiased var)`.
pub type Observed<S> = (Vec<S>, Vec<S>);

#[derive(Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// A constant copy of `v`, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let y = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &geom,
        )?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(y, Op::Conv { x, w, b, geom }, ng))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let y = kernels::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(y, Op::ConvT { x, w, b, stride }, ng))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let y = kernels::adaptive_avg_pool(self.value(x), oh, ow)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::Pool { x }, ng))
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let y = kernels::bilinear_resize(self.value(x), oh, ow)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::Resize { x }, ng))
    }

    /// Batch norm. In [`BnStats::Batch`] mode the observed batch statistics
    /// are returned so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_, S>,
        eps: S,
    ) -> Result<(Var, Option<Observed<S>>)> {
        let train = matches!(stats, BnStats::Batch);
        let fixed = match stats {
            BnStats::Batch => None,
            BnStats::Running(m, v) => Some((m, v)),
        };
        let (y, saved) =
            kernels::batch_norm(self.value(x), self.value(gamma), self.value(beta), fixed, eps)?;
        let observed = train.then(|| {
            let (n, _, h, w) = self.value(x).dims4().expect("checked by kernel");
            let m = (n * h * w) as f64;
            let corr = if m > 1.0 { S::lit(m / (m - 1.0)) } else { S::one() };
            (
                saved.mean.clone(),
                saved.var.iter().map(|&v| v * corr).collect(),
            )
        });
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                train,
            },
            ng,
        );
        Ok((v, observed))
    }

    pub fn elu(&mut self, x: Var, alpha: S) -> Var {
        let y = self
            .value(x)
            .map(|v| if v > S::zero() { v } else { alpha * (v.exp() - S::one()) });
        let ng = self.needs(x);
        self.push(y, Op::Elu { x, alpha }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(S::zero()));
        let ng = self.needs(x);
        self.push(y, Op::Relu { x }, ng)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let y = {
            let refs: Vec<&Tensor<S>> = xs.iter().map(|&v| self.value(v)).collect();
            kernels::concat_channels(&refs)?
        };
        let ng = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(y, Op::Concat { xs: xs.to_vec() }, ng))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = kernels::slice_channels(self.value(x), start, len)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::Slice { x, start }, ng))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = kernels::softmax_channels(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::Softmax { x }, ng))
    }

    /// Mean pixel-wise cross entropy; errors if every pixel is ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], ignore: Option<usize>) -> Result<Var> {
        let (loss, probs, count) = kernels::cross_entropy(self.value(logits), labels, ignore)?;
        if count == 0 {
            return Err(TensorError::Invalid("every pixel is ignored".into()));
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                ignore,
                count,
            },
            ng,
        ))
    }

    /// Mean of `-log clamp(probs[b, targets[b]], eps, 1-eps)` over batch and pixels.
    pub fn prob_nll(&mut self, probs: Var, targets: &[usize], eps: S) -> Result<Var> {
        let loss = kernels::prob_nll(self.value(probs), targets, eps)?;
        let ng = self.needs(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::ProbNll {
                probs,
                targets: targets.to_vec(),
                eps,
            },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::Shape(format!(
                "cannot add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, k: S) -> Var {
        let y = self.value(x).map(|v| v * k);
        let ng = self.needs(x);
        self.push(y, Op::Scale { x, k }, ng)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::scalar(t.sum() / S::from_usize(t.numel()).unwrap());
        let ng = self.needs(x);
        self.push(y, Op::Mean { x }, ng)
    }

    /// `sum_i k_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, S)]) -> Result<Var> {
        let mut acc = S::zero();
        for &(v, k) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(TensorError::Shape(format!(
                    "weighted_sum expects scalars, got {:?}",
                    t.shape()
                )));
            }
            acc += k * t.item();
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            Tensor::scalar(acc),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<S>, gy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv { x, w, b, geom } => {
                let need = (self.needs(x), self.needs(w), b.is_some_and(|b| self.needs(b)));
                let cg = kernels::conv2d_backward(self.value(x), self.value(w), gy, &geom, need)?;
                self.scatter_conv(grads, x, w, b, cg);
            }
            &Op::ConvT { x, w, b, stride } => {
                let need = (self.needs(x), self.needs(w), b.is_some_and(|b| self.needs(b)));
                let cg = kernels::conv_transpose2d_backward(self.value(x), self.value(w), gy, stride, need)?;
                self.scatter_conv(grads, x, w, b, cg);
            }
            &Op::Pool { x } => {
                let gx = kernels::adaptive_avg_pool_backward(self.value(x).shape(), gy)?;
                self.accumulate(grads, x, gx);
            }
            &Op::Resize { x } => {
                let gx = kernels::bilinear_resize_backward(self.value(x).shape(), gy)?;
                self.accumulate(grads, x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                train,
            } => {
                let (gx, gg, gb) = kernels::batch_norm_backward(saved, self.value(*gamma), gy, *train)?;
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
            &Op::Elu { x, alpha } => {
                let xv = self.value(x);
                let mut gx = gy.clone();
                for ((g, &xi), &yi) in gx.data_mut().iter_mut().zip(xv.data()).zip(node.value.data()) {
                    if xi <= S::zero() {
                        *g *= yi + alpha;
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::Relu { x } => {
                let mut gx = gy.clone();
                for (g, &xi) in gx.data_mut().iter_mut().zip(self.value(x).data()) {
                    if xi <= S::zero() {
                        *g = S::zero();
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::Concat { xs } => {
                let mut start = 0;
                for &x in xs {
                    let c = self.value(x).shape()[1];
                    if self.needs(x) {
                        let gx = kernels::slice_channels(gy, start, c)?;
                        self.accumulate(grads, x, gx);
                    }
                    start += c;
                }
            }
            &Op::Slice { x, start } => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let len = gy.shape()[1];
                let hw = h * w;
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for b in 0..n {
                    let dst = (b * c + start) * hw;
                    gx.data_mut()[dst..dst + len * hw]
                        .copy_from_slice(&gy.data()[b * len * hw..(b + 1) * len * hw]);
                }
                self.accumulate(grads, x, gx);
            }
            &Op::Softmax { x } => {
                let gx = kernels::softmax_channels_backward(&node.value, gy)?;
                self.accumulate(grads, x, gx);
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                ignore,
                count,
            } => {
                let gx = kernels::cross_entropy_backward(probs, labels, *ignore, *count, gy.item())?;
                self.accumulate(grads, *logits, gx);
            }
            Op::ProbNll { probs, targets, eps } => {
                let gx = kernels::prob_nll_backward(self.value(*probs), targets, *eps, gy.item())?;
                self.accumulate(grads, *probs, gx);
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, gy.clone());
                self.accumulate(grads, b, gy.clone());
            }
            &Op::Scale { x, k } => {
                self.accumulate(grads, x, gy.map(|g| g * k));
            }
            &Op::Mean { x } => {
                let shape = self.value(x).shape().to_vec();
                let n = S::from_usize(self.value(x).numel()).unwrap();
                self.accumulate(grads, x, Tensor::full(&shape, gy.item() / n));
            }
            Op::WeightedSum { terms } => {
                for &(v, k) in terms {
                    let shape = self.value(v).shape().to_vec();
                    self.accumulate(grads, v, Tensor::full(&shape, gy.item() * k));
                }
            }
        }
        Ok(())
    }

    fn scatter_conv(
        &self,
        grads: &mut [Option<Tensor<S>>],
        x: Var,
        w: Var,
        b: Option<Var>,
        cg: kernels::ConvGrads<S>,
    ) {
        if let Some(gx) = cg.input {
            self.accumulate(grads, x, gx);
        }
        if let Some(gw) = cg.weight {
            self.accumulate(grads, w, gw);
        }
        if let (Some(b), Some(gb)) = (b, cg.bias) {
            self.accumulate(grads, b, gb);
        }
    }
}
