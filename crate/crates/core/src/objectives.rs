//! Supervised segmentation loss, per-class domain loss and the
//! label-flipped adversarial loss, as plain values and as graph nodes.

use classwise_tensor::{Graph, Scalar, Tensor, Var};

use crate::datamodel::Domain;
use crate::error::{Error, Result};

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;
/// Allowed deviation of `p0 + p1` from one.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// One-hot domain vector over `{synthetic = 0, real = 1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DomainLabel(Domain);

impl DomainLabel {
    pub fn new(domain: Domain) -> Self {
        Self(domain)
    }

    /// Parse a one-hot vector; anything but exactly one `1` and one `0` fails.
    pub fn from_one_hot(d: &[f64]) -> Result<Self> {
        match d {
            [a, b] if *a == 1.0 && *b == 0.0 => Ok(Self(Domain::Synthetic)),
            [a, b] if *a == 0.0 && *b == 1.0 => Ok(Self(Domain::Real)),
            _ => Err(Error::InvalidParam(format!("{d:?} is not a one-hot domain label"))),
        }
    }

    pub fn one_hot(self) -> [f64; 2] {
        match self.0 {
            Domain::Synthetic => [1.0, 0.0],
            Domain::Real => [0.0, 1.0],
        }
    }

    pub fn domain(self) -> Domain {
        self.0
    }

    pub fn index(self) -> usize {
        self.0.index()
    }

    /// `1 - d`.
    pub fn flip(self) -> Self {
        Self(self.0.flip())
    }
}

impl From<Domain> for DomainLabel {
    fn from(d: Domain) -> Self {
        Self(d)
    }
}

/// Per-pixel distribution over the two domains, `[n, 2, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainProbMap<S: Scalar>(Tensor<S>);

impl<S: Scalar> DomainProbMap<S> {
    /// Wrap a tensor after checking that every pixel holds a distribution.
    pub fn new(t: Tensor<S>) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if c != 2 {
            return Err(Error::Shape(format!("domain map has {c} channels, expected 2")));
        }
        let hw = h * w;
        let tol = S::lit(NORMALIZATION_TOL);
        for b in 0..n {
            let base = b * 2 * hw;
            for p in 0..hw {
                let (p0, p1) = (t.data()[base + p], t.data()[base + hw + p]);
                let in_unit = |v: S| v >= S::zero() && v <= S::one();
                if !in_unit(p0) || !in_unit(p1) || (p0 + p1 - S::one()).abs() > tol {
                    return Err(Error::InvalidDistribution(format!(
                        "pixel {p} of item {b}: ({p0}, {p1})"
                    )));
                }
            }
        }
        Ok(Self(t))
    }

    /// Uniform `(0.5, 0.5)` map.
    pub fn uniform(n: usize, h: usize, w: usize) -> Self {
        Self(Tensor::full(&[n, 2, h, w], S::lit(0.5)))
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.0
    }

    /// `p_i` at batch item `b`, pixel `(y, x)`.
    pub fn prob(&self, b: usize, domain: usize, y: usize, x: usize) -> S {
        let s = self.0.shape();
        self.0.data()[((b * 2 + domain) * s[2] + y) * s[3] + x]
    }
}

fn clamp_ln<S: Scalar>(p: S) -> S {
    let eps = S::lit(PROB_EPS);
    p.max(eps).min(S::one() - eps).ln()
}

/// Mean negative log-probability of the true domain over every pixel.
pub fn domain_loss<S: Scalar>(p: &DomainProbMap<S>, d: DomainLabel) -> S {
    let t = p.tensor();
    let s = t.shape();
    let (n, hw) = (s[0], s[2] * s[3]);
    let mut total = S::zero();
    for b in 0..n {
        let o = (b * 2 + d.index()) * hw;
        for &v in &t.data()[o..o + hw] {
            total -= clamp_ln(v);
        }
    }
    total / S::from_usize(n * hw).unwrap()
}

/// Domain loss against the flipped label.
pub fn adversarial_loss<S: Scalar>(p: &DomainProbMap<S>, d: DomainLabel) -> S {
    domain_loss(p, d.flip())
}

fn flat_labels(labels: &[u8], k: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            let l = l as usize;
            if l < k {
                Ok(l)
            } else {
                Err(Error::InvalidParam(format!("label {l} >= class count {k}")))
            }
        })
        .collect()
}

fn counted(labels: &[usize], ignore: Option<usize>) -> usize {
    labels.iter().filter(|&&l| Some(l) != ignore).count()
}

/// Mean cross entropy of `logits: [n, k, h, w]` over non-ignored pixels.
/// `labels` holds `n * h * w` class indices in batch-major row order.
pub fn seg_loss<S: Scalar>(logits: &Tensor<S>, labels: &[u8], ignore: Option<usize>) -> Result<S> {
    let (_, k, _, _) = logits.dims4()?;
    let labels = flat_labels(labels, k)?;
    if counted(&labels, ignore) == 0 {
        return Err(Error::EmptyLoss);
    }
    let (loss, _, _) = classwise_tensor::kernels::cross_entropy(logits, &labels, ignore)?;
    Ok(loss)
}

/// Graph version of [`seg_loss`].
pub fn seg_loss_node<S: Scalar>(g: &mut Graph<S>, logits: Var, labels: &[u8], ignore: Option<usize>) -> Result<Var> {
    let (_, k, _, _) = g.value(logits).dims4()?;
    let labels = flat_labels(labels, k)?;
    if counted(&labels, ignore) == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(g.cross_entropy(logits, &labels, ignore)?)
}

/// Graph version of [`domain_loss`]; `probs` must be a softmax output.
pub fn domain_loss_node<S: Scalar>(g: &mut Graph<S>, probs: Var, d: DomainLabel) -> Result<Var> {
    let n = g.value(probs).dims4()?.0;
    Ok(g.prob_nll(probs, &vec![d.index(); n], S::lit(PROB_EPS))?)
}

/// Graph version of [`adversarial_loss`].
pub fn adversarial_loss_node<S: Scalar>(g: &mut Graph<S>, probs: Var, d: DomainLabel) -> Result<Var> {
    domain_loss_node(g, probs, d.flip())
}

/// Per-class loss weights; all ones unless configured.
pub fn unit_weights(k: usize) -> Vec<f64> {
    vec![1.0; k]
}
