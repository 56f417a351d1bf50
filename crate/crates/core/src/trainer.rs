//! Supervised pre-training of CNN_C, the alternating discriminator /
//! adversarial loop that adapts CNN_R, and evaluation.

use std::time::Instant;

use classwise_tensor::{Adam, Graph, Scalar, Sgd, Tensor, Var};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{fill_sample_holes, random_augment, AugmentPolicy, NoisePolicy};
use crate::checkpoint::Checkpoint;
use crate::datamodel::{to_network_input, Domain, Modality, Sample, DEFAULT_MAX_DEPTH};
use crate::discbank::{BankKind, DiscConfig, DiscriminatorBank};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::{ConfusionMatrix, MeanMode, MetricsReport};
use crate::objectives::{adversarial_loss_node, domain_loss_node, seg_loss_node, DomainLabel};
use crate::segnet::{argmax_channels, Role, SegNet, SegNetConfig};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_iterations: usize,
    pub batch_size: usize,
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adapt_iterations: usize,
    pub adapt_batch_size: usize,
    /// Step size for CNN_R in the adversarial phase.
    pub sgd_lr: f64,
    /// Step size for the discriminators.
    pub disc_lr: f64,
    /// Weight of the adversarial terms against the segmentation loss.
    pub adversarial_weight: f64,
    /// Per-class adversarial weights; empty means all ones.
    pub class_weights: Vec<f64>,
    pub seed: u64,
    /// Save a checkpoint every this many iterations; zero disables.
    pub checkpoint_every: usize,
    pub modality: Modality,
    pub max_depth: f32,
    pub ignore_index: Option<usize>,
    pub noise: NoisePolicy,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_iterations: 2000,
            batch_size: 8,
            adam_lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adapt_iterations: 1000,
            adapt_batch_size: 4,
            sgd_lr: 1e-2,
            disc_lr: 1e-2,
            adversarial_weight: 0.01,
            class_weights: Vec::new(),
            seed: 0,
            checkpoint_every: 0,
            modality: Modality::Rgbd,
            max_depth: DEFAULT_MAX_DEPTH,
            ignore_index: Some(0),
            noise: NoisePolicy::default(),
            augment: AugmentPolicy::identity(48, 48),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("adam_lr", self.adam_lr),
            ("sgd_lr", self.sgd_lr),
            ("disc_lr", self.disc_lr),
            ("max_depth", self.max_depth as f64),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adversarial_weight >= 0.0 && self.adversarial_weight.is_finite()) {
            return bad(format!("adversarial_weight must be >= 0, got {}", self.adversarial_weight));
        }
        if self.batch_size == 0 || self.adapt_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !self.class_weights.is_empty() && self.class_weights.len() != class_count {
            return bad(format!("{} class weights for {class_count} classes", self.class_weights.len()));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("class weights must be finite and non-negative".into());
        }
        if self.ignore_index.is_some_and(|i| i >= class_count) {
            return bad("ignore_index out of range".into());
        }
        self.noise.validate()?;
        self.augment.validate()
    }

    pub fn weights(&self, class_count: usize) -> Vec<f64> {
        if self.class_weights.is_empty() {
            vec![1.0; class_count]
        } else {
            self.class_weights.clone()
        }
    }
}

/// Deterministic epoch-wise shuffled index stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Loader {
    pub len: usize,
    pub batch: usize,
    pub seed: u64,
    pub stream: u64,
    pub epoch: u64,
    pub pos: usize,
}

impl Loader {
    pub fn new(len: usize, batch: usize, seed: u64, stream: &str) -> Self {
        Self {
            len,
            batch,
            seed,
            stream: seeds::tag(stream),
            epoch: 0,
            pos: 0,
        }
    }

    fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len).collect();
        idx.shuffle(&mut seeds::rng(self.seed, &[self.stream, self.epoch]));
        idx
    }

    /// Next batch as `(sample index, epoch)` pairs.
    pub fn next_batch(&mut self, what: &str) -> Result<Vec<(usize, u64)>> {
        if self.len == 0 {
            return Err(Error::EmptyDomainBatch(what.into()));
        }
        let mut out = Vec::with_capacity(self.batch);
        let mut order = self.order();
        while out.len() < self.batch {
            if self.pos == self.len {
                self.pos = 0;
                self.epoch += 1;
                order = self.order();
            }
            out.push((order[self.pos], self.epoch));
            self.pos += 1;
        }
        Ok(out)
    }
}

/// Network input batch and flattened labels.
#[derive(Clone, Debug)]
pub struct Batch<S: Scalar> {
    pub x: Tensor<S>,
    pub labels: Vec<u8>,
}

/// Inpaint, optionally augment (and re-inpaint), and lay out as `C x H x W`.
pub fn prepare_sample(sample: &Sample, cfg: &TrainConfig, augment_seed: Option<u64>) -> Result<(Vec<f32>, Array2<u8>, [usize; 3])> {
    let mut s = sample.clone();
    fill_sample_holes(&mut s)?;
    if let Some(seed) = augment_seed {
        s = random_augment(&s, &cfg.noise, &cfg.augment, cfg.max_depth, seed)?;
        fill_sample_holes(&mut s)?;
    }
    let input = to_network_input(&s, cfg.modality, cfg.max_depth)?;
    let (c, h, w) = input.dim();
    Ok((input.into_raw_vec_and_offset().0, s.label, [c, h, w]))
}

fn assemble<S: Scalar>(items: Vec<(Vec<f32>, Array2<u8>, [usize; 3])>) -> Result<Batch<S>> {
    let dims = items[0].2;
    if items.iter().any(|it| it.2 != dims) {
        return Err(Error::Shape("samples in a batch differ in size".into()));
    }
    let mut data = Vec::with_capacity(items.len() * dims.iter().product::<usize>());
    let mut labels = Vec::new();
    for (x, l, _) in &items {
        data.extend(x.iter().map(|&v| S::lit(v as f64)));
        labels.extend(l.iter().copied());
    }
    let x = Tensor::from_vec(&[items.len(), dims[0], dims[1], dims[2]], data)?;
    Ok(Batch { x, labels })
}

/// Augmented batch; each sample's seed depends on `(seed, stream, epoch, index)`.
pub fn make_batch<S: Scalar>(samples: &[Sample], picks: &[(usize, u64)], cfg: &TrainConfig, stream: &str) -> Result<Batch<S>> {
    let items = picks
        .iter()
        .map(|&(i, epoch)| {
            let seed = seeds::derive(cfg.seed, &[seeds::tag(stream), epoch, i as u64]);
            prepare_sample(&samples[i], cfg, Some(seed))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(items)
}

/// Un-augmented batch (inpainting only).
pub fn clean_batch<S: Scalar>(samples: &[Sample], cfg: &TrainConfig) -> Result<Batch<S>> {
    assemble(samples.iter().map(|s| prepare_sample(s, cfg, None)).collect::<Result<Vec<_>>>()?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub seg: Option<f64>,
    pub disc: Option<f64>,
    pub adv: Option<f64>,
}

/// Per-iteration losses; wall-clock time is kept apart so the loss log is
/// reproducible byte for byte.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub wall_seconds: Vec<f64>,
}

impl TrainLog {
    pub fn push(&mut self, row: LogRow, seconds: f64) {
        self.rows.push(row);
        self.wall_seconds.push(seconds);
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| format!("{v:.9e}")).unwrap_or_default();
        let mut s = String::from("iteration,l_seg,mean_l_d,mean_l_a\n");
        for r in &self.rows {
            s += &format!("{},{},{},{}\n", r.iteration, f(r.seg), f(r.disc), f(r.adv));
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("iteration,wall_seconds\n");
        for (r, t) in self.rows.iter().zip(&self.wall_seconds) {
            s += &format!("{},{t:.6}\n", r.iteration);
        }
        s
    }
}

fn finite_or_diverged<S: Scalar>(v: S, grads: &[Tensor<S>], iteration: u64, what: &str) -> Result<f64> {
    let x = v.to_f64_lossy();
    if !x.is_finite() {
        return Err(Error::TrainingDiverged {
            iteration,
            what: what.into(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::TrainingDiverged {
            iteration,
            what: format!("gradient of {what}"),
        });
    }
    Ok(x)
}

fn require_domain(samples: &[Sample], domain: Domain, what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyDomainBatch(what.into()));
    }
    if let Some(s) = samples.iter().find(|s| s.domain != domain) {
        return Err(Error::InvalidParam(format!("{what} sample `{}` is {}, expected {domain}", s.id, s.domain)));
    }
    Ok(())
}

/// Supervised training of CNN_C on synthetic data with Adam.
pub struct Pretrainer<'a, S: Scalar> {
    cfg: TrainConfig,
    source: &'a [Sample],
    net: SegNet<S>,
    adam: Adam<S>,
    loader: Loader,
    iteration: u64,
    pub log: TrainLog,
}

impl<'a, S: Scalar> Pretrainer<'a, S> {
    pub fn new(cfg: TrainConfig, net_cfg: SegNetConfig, source: &'a [Sample]) -> Result<Self> {
        cfg.validate(net_cfg.class_count)?;
        require_domain(source, Domain::Synthetic, "source")?;
        if net_cfg.input_channels != cfg.modality.channels() {
            return Err(Error::Config(format!(
                "network takes {} channels, modality gives {}",
                net_cfg.input_channels,
                cfg.modality.channels()
            )));
        }
        let net = SegNet::build(net_cfg, Role::CnnC, seeds::derive(cfg.seed, &[seeds::tag("cnn_c")]))?;
        let adam = Adam::new(net.params(), cfg.adam_lr, cfg.adam_beta1, cfg.adam_beta2);
        let loader = Loader::new(source.len(), cfg.batch_size, cfg.seed, "pretrain");
        Ok(Self {
            cfg,
            source,
            net,
            adam,
            loader,
            iteration: 0,
            log: TrainLog::default(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn net(&self) -> &SegNet<S> {
        &self.net
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.pretrain_iterations as u64
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let start = Instant::now();
        let picks = self.loader.next_batch("source")?;
        let batch: Batch<S> = make_batch(self.source, &picks, &self.cfg, "pretrain")?;
        let mut g = Graph::new();
        let mut bound = self.net.bind(&mut g, true);
        let x = g.constant(batch.x);
        let logits = self.net.forward(&mut g, &mut bound, x, Mode::Train)?;
        let loss = seg_loss_node(&mut g, logits, &batch.labels, self.cfg.ignore_index);
        let seg = match loss {
            Err(Error::EmptyLoss) => None,
            Err(e) => return Err(e),
            Ok(loss) => {
                let grads = g.backward(loss)?;
                let grads = bound.grads(self.net.params(), &grads);
                let v = finite_or_diverged(g.value(loss).item(), &grads, self.iteration, "L_seg")?;
                self.adam.update(self.net.params_mut(), &grads)?;
                self.net.absorb_observed(&mut bound);
                Some(v)
            }
        };
        self.log.push(
            LogRow {
                iteration: self.iteration,
                seg,
                ..LogRow::default()
            },
            start.elapsed().as_secs_f64(),
        );
        self.iteration += 1;
        Ok(seg.unwrap_or(f64::NAN))
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    fn config_echo(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "stage": "pretrain",
            "train": serde_json::to_value(&self.cfg)?,
            "segnet": serde_json::to_value(self.net.config())?,
        }))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<S>> {
        let mut ck = Checkpoint::new(self.config_echo()?);
        ck.meta = serde_json::json!({
            "iteration": self.iteration,
            "adam_step": self.adam.step,
            "loader": serde_json::to_value(&self.loader)?,
        });
        ck.push_store("cnn_c/params", self.net.params());
        ck.push_store("cnn_c/buffers", self.net.buffers());
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            ck.push(format!("adam/m/{i}"), m.clone());
            ck.push(format!("adam/v/{i}"), v.clone());
        }
        Ok(ck)
    }

    /// Rebuild from a checkpoint written by [`Self::checkpoint`] with the same configs.
    pub fn resume(cfg: TrainConfig, net_cfg: SegNetConfig, source: &'a [Sample], ck: &Checkpoint<S>) -> Result<Self> {
        let mut p = Self::new(cfg, net_cfg, source)?;
        ck.expect_config(&p.config_echo()?)?;
        ck.restore_store("cnn_c/params", p.net.params_mut())?;
        ck.restore_store("cnn_c/buffers", p.net.buffers_mut())?;
        for i in 0..p.adam.m.len() {
            p.adam.m[i] = ck.get(&format!("adam/m/{i}"))?.clone();
            p.adam.v[i] = ck.get(&format!("adam/v/{i}"))?.clone();
        }
        p.iteration = meta_u64(&ck.meta, "iteration")?;
        p.adam.step = meta_u64(&ck.meta, "adam_step")?;
        p.loader = serde_json::from_value(ck.meta["loader"].clone())?;
        Ok(p)
    }

    pub fn into_net(self) -> SegNet<S> {
        self.net
    }
}

fn meta_u64(meta: &serde_json::Value, key: &str) -> Result<u64> {
    meta[key]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint(format!("metadata field `{key}` missing")))
}

/// Train CNN_C for the configured number of iterations.
pub fn pretrain_source<S: Scalar>(cfg: &TrainConfig, net_cfg: SegNetConfig, source: &[Sample]) -> Result<(SegNet<S>, TrainLog)> {
    let mut p = Pretrainer::new(cfg.clone(), net_cfg, source)?;
    p.run()?;
    let log = std::mem::take(&mut p.log);
    Ok((p.into_net(), log))
}

/// The adversarial loop: a discriminator phase then an adversarial phase per iteration.
pub struct Adapter<'a, S: Scalar> {
    cfg: TrainConfig,
    source: &'a [Sample],
    target: &'a [Sample],
    cnn_c: SegNet<S>,
    cnn_r: SegNet<S>,
    bank: DiscriminatorBank<S>,
    weights: Vec<f64>,
    source_loader: Loader,
    target_loader: Loader,
    iteration: u64,
    pending: Option<(Batch<S>, Batch<S>)>,
    current: LogRow,
    started: Option<Instant>,
    pub log: TrainLog,
}

impl<'a, S: Scalar> Adapter<'a, S> {
    pub fn new(
        cfg: TrainConfig,
        cnn_c: &SegNet<S>,
        source: &'a [Sample],
        target: &'a [Sample],
        kind: BankKind,
        disc_cfg: DiscConfig,
    ) -> Result<Self> {
        let k = cnn_c.config().class_count;
        cfg.validate(k)?;
        require_domain(source, Domain::Synthetic, "source")?;
        require_domain(target, Domain::Real, "target")?;
        let bank = DiscriminatorBank::build(kind, k, disc_cfg, seeds::derive(cfg.seed, &[seeds::tag("bank")]))?;
        Ok(Self {
            weights: cfg.weights(k),
            source_loader: Loader::new(source.len(), cfg.adapt_batch_size, cfg.seed, "adapt_source"),
            target_loader: Loader::new(target.len(), cfg.adapt_batch_size, cfg.seed, "adapt_target"),
            cfg,
            source,
            target,
            cnn_c: cnn_c.clone_as(Role::CnnC),
            cnn_r: cnn_c.clone_as(Role::CnnR),
            bank,
            iteration: 0,
            pending: None,
            current: LogRow::default(),
            started: None,
            log: TrainLog::default(),
        })
    }

    pub fn cnn_c(&self) -> &SegNet<S> {
        &self.cnn_c
    }

    pub fn cnn_r(&self) -> &SegNet<S> {
        &self.cnn_r
    }

    pub fn bank(&self) -> &DiscriminatorBank<S> {
        &self.bank
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.adapt_iterations as u64
    }

    fn ensure_batches(&mut self) -> Result<()> {
        if self.pending.is_none() {
            self.started = Some(Instant::now());
            let s = self.source_loader.next_batch("source")?;
            let t = self.target_loader.next_batch("target")?;
            let sb = make_batch(self.source, &s, &self.cfg, "adapt_source")?;
            let tb = make_batch(self.target, &t, &self.cfg, "adapt_target")?;
            self.pending = Some((sb, tb));
        }
        Ok(())
    }

    fn disc_input(&self, features: &Tensor<S>, j: usize) -> Result<Tensor<S>> {
        Ok(match self.bank.kind() {
            BankKind::ClassWise => classwise_tensor::kernels::slice_channels(features, j, 1)?,
            BankKind::Single => features.clone(),
        })
    }

    /// Update every discriminator on detached CNN_C (synthetic) and CNN_R
    /// (real) features. Returns the mean domain loss.
    pub fn d_phase(&mut self) -> Result<f64> {
        self.ensure_batches()?;
        let (sb, tb) = self.pending.as_ref().expect("batches drawn");
        let f_syn = self.cnn_c.infer(&sb.x)?;
        let f_real = self.cnn_r.infer(&tb.x)?;
        let sgd = Sgd { lr: self.cfg.disc_lr };
        let mut total = 0.0;
        for j in 0..self.bank.len() {
            let w = match self.bank.kind() {
                BankKind::ClassWise => self.weights[j],
                BankKind::Single => 1.0,
            };
            let (xs, xr) = (self.disc_input(&f_syn, j)?, self.disc_input(&f_real, j)?);
            let disc = &self.bank.discriminators()[j];
            let mut g = Graph::new();
            let mut bound = disc.bind(&mut g, true);
            let vs = g.constant(xs);
            let vr = g.constant(xr);
            let ps = disc.forward(&mut g, &mut bound, vs)?;
            let pr = disc.forward(&mut g, &mut bound, vr)?;
            let ls = domain_loss_node(&mut g, ps, DomainLabel::new(Domain::Synthetic))?;
            let lr = domain_loss_node(&mut g, pr, DomainLabel::new(Domain::Real))?;
            let w = S::lit(w);
            let loss = g.weighted_sum(&[(ls, w), (lr, w)])?;
            let grads = g.backward(loss)?;
            let grads = bound.grads(disc.params(), &grads);
            let raw = g.value(ls).item() + g.value(lr).item();
            let v = finite_or_diverged(raw, &grads, self.iteration, &format!("L_D_{j}"))?;
            sgd.update(self.bank.discriminators_mut()[j].params_mut(), &grads)?;
            total += v / 2.0;
        }
        let mean = total / self.bank.len() as f64;
        self.current.disc = Some(mean);
        Ok(mean)
    }

    /// Update CNN_R on `L_seg + lambda * sum_j w_j L_A_j` with the bank frozen.
    /// Returns `(L_seg, mean L_A)`.
    pub fn a_phase(&mut self) -> Result<(f64, f64)> {
        self.ensure_batches()?;
        let (sb, tb) = self.pending.as_ref().expect("batches drawn");
        let mut g = Graph::new();
        let mut bound = self.cnn_r.bind(&mut g, true);
        let xr = g.constant(tb.x.clone());
        let feats = self.cnn_r.features(&mut g, &mut bound, xr, Mode::Eval)?;
        let mut dbounds = self.bank.bind(&mut g, false);
        let probs = self.bank.discriminate(&mut g, &mut dbounds, feats)?;
        let lambda = self.cfg.adversarial_weight;
        let mut terms: Vec<(Var, S)> = Vec::with_capacity(probs.len() + 1);
        let mut adv_vars = Vec::with_capacity(probs.len());
        for (j, &p) in probs.iter().enumerate() {
            let la = adversarial_loss_node(&mut g, p, DomainLabel::new(Domain::Real))?;
            let w = match self.bank.kind() {
                BankKind::ClassWise => self.weights[j],
                BankKind::Single => 1.0,
            };
            terms.push((la, S::lit(lambda * w)));
            adv_vars.push(la);
        }
        let xs = g.constant(sb.x.clone());
        let logits = self.cnn_r.forward(&mut g, &mut bound, xs, Mode::Train)?;
        let seg = match seg_loss_node(&mut g, logits, &sb.labels, self.cfg.ignore_index) {
            Ok(l) => {
                terms.push((l, S::one()));
                Some(l)
            }
            Err(Error::EmptyLoss) => None,
            Err(e) => return Err(e),
        };
        let total = g.weighted_sum(&terms)?;
        let grads = g.backward(total)?;
        let grads = bound.grads(self.cnn_r.params(), &grads);
        finite_or_diverged(g.value(total).item(), &grads, self.iteration, "adaptation loss")?;
        Sgd { lr: self.cfg.sgd_lr }.update(self.cnn_r.params_mut(), &grads)?;
        self.cnn_r.absorb_observed(&mut bound);
        let seg_v = seg.map(|l| g.value(l).item().to_f64_lossy());
        let adv = adv_vars.iter().map(|&v| g.value(v).item().to_f64_lossy()).sum::<f64>() / adv_vars.len() as f64;
        self.current.seg = seg_v;
        self.current.adv = Some(adv);
        Ok((seg_v.unwrap_or(f64::NAN), adv))
    }

    /// Close the current iteration: log it and release its batches.
    pub fn finish_iteration(&mut self) {
        let row = LogRow {
            iteration: self.iteration,
            ..std::mem::take(&mut self.current)
        };
        let secs = self.started.take().map(|t| t.elapsed().as_secs_f64()).unwrap_or(0.0);
        self.log.push(row, secs);
        self.pending = None;
        self.iteration += 1;
    }

    pub fn step(&mut self) -> Result<()> {
        self.d_phase()?;
        self.a_phase()?;
        self.finish_iteration();
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    fn config_echo(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "stage": "adapt",
            "train": serde_json::to_value(&self.cfg)?,
            "segnet": serde_json::to_value(self.cnn_c.config())?,
            "disc": serde_json::to_value(self.bank.config())?,
            "kind": serde_json::to_value(self.bank.kind())?,
        }))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<S>> {
        let mut ck = Checkpoint::new(self.config_echo()?);
        ck.meta = serde_json::json!({
            "iteration": self.iteration,
            "source_loader": serde_json::to_value(&self.source_loader)?,
            "target_loader": serde_json::to_value(&self.target_loader)?,
        });
        for (net, name) in [(&self.cnn_c, "cnn_c"), (&self.cnn_r, "cnn_r")] {
            ck.push_store(&format!("{name}/params"), net.params());
            ck.push_store(&format!("{name}/buffers"), net.buffers());
        }
        for (j, d) in self.bank.discriminators().iter().enumerate() {
            ck.push_store(&format!("disc/{j}"), d.params());
        }
        Ok(ck)
    }

    /// Rebuild from an adaptation checkpoint taken with the same configs.
    pub fn resume(
        cfg: TrainConfig,
        cnn_c: &SegNet<S>,
        source: &'a [Sample],
        target: &'a [Sample],
        kind: BankKind,
        disc_cfg: DiscConfig,
        ck: &Checkpoint<S>,
    ) -> Result<Self> {
        let mut a = Self::new(cfg, cnn_c, source, target, kind, disc_cfg)?;
        ck.expect_config(&a.config_echo()?)?;
        ck.restore_store("cnn_c/params", a.cnn_c.params_mut())?;
        ck.restore_store("cnn_c/buffers", a.cnn_c.buffers_mut())?;
        ck.restore_store("cnn_r/params", a.cnn_r.params_mut())?;
        ck.restore_store("cnn_r/buffers", a.cnn_r.buffers_mut())?;
        for (j, d) in a.bank.discriminators_mut().iter_mut().enumerate() {
            ck.restore_store(&format!("disc/{j}"), d.params_mut())?;
        }
        a.iteration = meta_u64(&ck.meta, "iteration")?;
        a.source_loader = serde_json::from_value(ck.meta["source_loader"].clone())?;
        a.target_loader = serde_json::from_value(ck.meta["target_loader"].clone())?;
        Ok(a)
    }

    pub fn into_parts(self) -> (SegNet<S>, DiscriminatorBank<S>, TrainLog) {
        (self.cnn_r, self.bank, self.log)
    }
}

/// Run the whole adaptation loop; returns CNN_R, the bank and the log.
pub fn adapt<S: Scalar>(
    cfg: &TrainConfig,
    cnn_c: &SegNet<S>,
    source: &[Sample],
    target: &[Sample],
    kind: BankKind,
    disc_cfg: DiscConfig,
) -> Result<(SegNet<S>, DiscriminatorBank<S>, TrainLog)> {
    let mut a = Adapter::new(cfg.clone(), cnn_c, source, target, kind, disc_cfg)?;
    a.run()?;
    Ok(a.into_parts())
}

/// The single-discriminator baseline.
pub fn run_baseline_adaptation<S: Scalar>(
    cfg: &TrainConfig,
    cnn_c: &SegNet<S>,
    source: &[Sample],
    target: &[Sample],
    disc_cfg: DiscConfig,
) -> Result<(SegNet<S>, DiscriminatorBank<S>, TrainLog)> {
    adapt(cfg, cnn_c, source, target, BankKind::Single, disc_cfg)
}

/// Samples per inference batch.
pub const EVAL_BATCH: usize = 16;

/// Argmax label maps for every sample, without augmentation.
pub fn predict_samples<S: Scalar>(net: &SegNet<S>, samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<Array2<u8>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch: Batch<S> = clean_batch(chunk, cfg)?;
        let pred = argmax_channels(&net.infer(&batch.x)?);
        let (h, w) = (batch.x.shape()[2], batch.x.shape()[3]);
        for p in pred.chunks(h * w) {
            out.push(Array2::from_shape_vec((h, w), p.to_vec()).expect("h * w labels"));
        }
    }
    Ok(out)
}

/// Metrics of precomputed predictions against the samples' labels.
pub fn evaluate_predictions(
    preds: &[Array2<u8>],
    samples: &[Sample],
    class_count: usize,
    ignore: Option<usize>,
    mode: MeanMode,
) -> Result<MetricsReport> {
    if preds.len() != samples.len() {
        return Err(Error::Shape(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let mut cm = ConfusionMatrix::new(class_count, ignore);
    for (p, s) in preds.iter().zip(samples) {
        cm.accumulate(p, &s.label)?;
    }
    MetricsReport::from_confusion(&cm, mode)
}

pub fn evaluate<S: Scalar>(net: &SegNet<S>, samples: &[Sample], cfg: &TrainConfig, mode: MeanMode) -> Result<MetricsReport> {
    let preds = predict_samples(net, samples, cfg)?;
    evaluate_predictions(&preds, samples, net.config().class_count, cfg.ignore_index, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loader_covers_each_epoch_once() {
        let mut l = Loader::new(10, 4, 3, "x");
        let mut seen = Vec::new();
        for _ in 0..5 {
            seen.extend(l.next_batch("x").unwrap());
        }
        let mut first: Vec<usize> = seen.iter().filter(|p| p.1 == 0).map(|p| p.0).collect();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(seen.iter().filter(|p| p.1 == 1).count(), 10);
    }

    #[test]
    fn empty_loader_errors() {
        let mut l = Loader::new(0, 4, 3, "x");
        assert!(matches!(l.next_batch("target"), Err(Error::EmptyDomainBatch(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate(6).is_ok());
        c.class_weights = vec![1.0; 5];
        assert!(c.validate(6).is_err());
        c.class_weights.clear();
        c.adversarial_weight = -1.0;
        assert!(c.validate(6).is_err());
    }

    #[test]
    fn csv_has_blank_missing_fields() {
        let mut log = TrainLog::default();
        log.push(LogRow { iteration: 0, seg: Some(0.5), ..LogRow::default() }, 0.1);
        assert_eq!(log.to_csv(), "iteration,l_seg,mean_l_d,mean_l_a\n0,5.000000000e-1,,\n");
    }
}
