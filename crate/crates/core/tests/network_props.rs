//! Structural properties of the segmentation network and the discriminator
//! bank, checked from outside through parameters, statistics and gradients.

use std::collections::BTreeMap;

use classwise_adapt::discbank::{BankKind, DiscConfig, DiscriminatorBank};
use classwise_adapt::layers::Mode;
use classwise_adapt::objectives::{adversarial_loss_node, DomainLabel};
use classwise_adapt::datamodel::Domain;
use classwise_adapt::segnet::{Role, SegNet, SegNetConfig};
use classwise_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn desk(size: usize) -> SegNetConfig {
    SegNetConfig::desk_for_size(4, 6, size)
}

/// Per-channel batch means and variances seen by every batch norm in one
/// training-mode pass, keyed by buffer name.
fn observed_stats(net: &SegNet<f64>, x: &Tensor<f64>) -> BTreeMap<String, (Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let mut bound = net.bind(&mut g, false);
    let xv = g.constant(x.clone());
    net.forward(&mut g, &mut bound, xv, Mode::Train).unwrap();
    bound
        .take_observed()
        .into_iter()
        .map(|(mean_id, _, m, v)| (net.buffers().name(mean_id).trim_end_matches(".running_mean").to_string(), (m, v)))
        .collect()
}

fn zero_param(net: &mut SegNet<f64>, name: &str) {
    let id = net.params().ids().find(|&id| net.params().name(id) == name).unwrap_or_else(|| panic!("no `{name}`"));
    net.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
}

#[test]
fn every_later_dense_layer_sees_earlier_outputs() {
    let cfg = desk(16);
    let plan = cfg.channel_plan().unwrap();
    let (m0, r) = (plan.blocks_in[2], cfg.stages[2].growth);
    assert_eq!(cfg.stages[2].layers, 3);
    let net = SegNet::<f64>::build(cfg, Role::CnnC, 3).unwrap();
    let x = random(&[2, 4, 16, 16], 1);
    let base = observed_stats(&net, &x);

    let mut ablated = net.clone();
    zero_param(&mut ablated, "dense3.layer0.conv2.weight");
    zero_param(&mut ablated, "dense3.layer0.conv2.bias");
    let cut = observed_stats(&ablated, &x);

    for later in ["dense3.layer1.bn1", "dense3.layer2.bn1"] {
        let (bm, bv) = &base[later];
        let (cm, cv) = &cut[later];
        assert_eq!(&bm[..m0], &cm[..m0], "{later}: block input unaffected");
        assert!(cm[m0..m0 + r].iter().chain(&cv[m0..m0 + r]).all(|&v| v == 0.0), "{later}");
        assert!(bv[m0..m0 + r].iter().all(|&v| v > 0.0), "{later}: layer 0 output is live");
    }
    assert_eq!(base["dense3.layer2.bn1"].0.len(), m0 + 2 * r);
}

#[test]
fn features_are_the_logits() {
    let net = SegNet::<f64>::build(desk(16), Role::CnnR, 8).unwrap();
    let x = random(&[1, 4, 16, 16], 2);
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new();
        let mut bound = net.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let a = net.forward(&mut g, &mut bound, xv, mode).unwrap();
        let b = net.features(&mut g, &mut bound, xv, mode).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_eq!(g.value(a).shape(), &[1, 6, 16, 16]);
    }
}

#[test]
fn evaluation_forward_is_bit_reproducible() {
    let net = SegNet::<f32>::build(desk(24), Role::CnnC, 4).unwrap();
    let x = Tensor::<f32>::from_fn(&[2, 4, 24, 24], |i| ((i * 31) % 17) as f32 / 8.0 - 1.0);
    let a = net.infer(&x).unwrap();
    assert_eq!(a, net.infer(&x).unwrap());
    assert_eq!(a, net.clone_as(Role::CnnR).infer(&x).unwrap());
    let ck = SegNet::<f32>::from_checkpoint(&net.to_checkpoint().unwrap()).unwrap();
    assert_eq!(a, ck.infer(&x).unwrap());
}

#[test]
fn parameter_layout_depends_only_on_config() {
    let a = SegNet::<f64>::build(desk(16), Role::CnnC, 1).unwrap();
    let b = SegNet::<f64>::build(desk(16), Role::CnnC, 2).unwrap();
    assert_eq!(a.params().numel(), b.params().numel());
    let names = |n: &SegNet<f64>| n.params().iter().map(|(k, t)| (k.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
    assert_eq!(names(&a), names(&b));
    assert_ne!(a.checksum(), b.checksum());
    let mut c = b.clone();
    c.params_mut().load_from(a.params()).unwrap();
    c.buffers_mut().load_from(a.buffers()).unwrap();
    assert_eq!(c.checksum(), a.checksum());

    let wider = SegNetConfig { head_channels: 40, ..desk(16) };
    assert_ne!(SegNet::<f64>::build(wider, Role::CnnC, 1).unwrap().params().numel(), a.params().numel());
}

#[test]
fn adversarial_gradient_for_class_j_flows_only_through_channel_j() {
    let k = 4;
    let bank = DiscriminatorBank::<f64>::build(BankKind::ClassWise, k, DiscConfig::desk_for_size(16), 5).unwrap();
    let f = random(&[2, k, 16, 16], 6);
    for j in 0..k {
        let mut g = Graph::new();
        let mut bounds = bank.bind(&mut g, false);
        let fv = g.variable(f.clone());
        let probs = bank.discriminate(&mut g, &mut bounds, fv).unwrap();
        let loss = adversarial_loss_node(&mut g, probs[j], DomainLabel::new(Domain::Real)).unwrap();
        let grads = g.backward(loss).unwrap();
        let gf = grads.get(fv).unwrap();
        let hw = 16 * 16;
        for b in 0..2 {
            for c in 0..k {
                let block = &gf.data()[(b * k + c) * hw..(b * k + c + 1) * hw];
                if c == j {
                    assert!(block.iter().any(|&v| v != 0.0), "class {j} gets no gradient");
                } else {
                    assert!(block.iter().all(|&v| v == 0.0), "class {j} leaks into channel {c}");
                }
            }
        }
    }
}

#[test]
fn adversarial_gradient_reaches_the_segmentation_network() {
    let net = SegNet::<f64>::build(desk(16), Role::CnnR, 9).unwrap();
    let bank = DiscriminatorBank::<f64>::build(BankKind::ClassWise, 6, DiscConfig::desk_for_size(16), 10).unwrap();
    let mut g = Graph::new();
    let mut bound = net.bind(&mut g, true);
    let x = g.constant(random(&[1, 4, 16, 16], 11));
    let feats = net.features(&mut g, &mut bound, x, Mode::Eval).unwrap();
    let mut dbounds = bank.bind(&mut g, false);
    let probs = bank.discriminate(&mut g, &mut dbounds, feats).unwrap();
    let loss = adversarial_loss_node(&mut g, probs[2], DomainLabel::new(Domain::Real)).unwrap();
    let grads = g.backward(loss).unwrap();
    let pg = bound.grads(net.params(), &grads);
    assert!(pg.iter().flat_map(|t| t.data()).any(|&v| v != 0.0));
    for (b, d) in dbounds.iter().zip(bank.discriminators()) {
        assert!(b.grads(d.params(), &grads).iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn single_baseline_reads_every_channel() {
    let cfg = DiscConfig::desk_for_size(16);
    let single = DiscriminatorBank::<f64>::build(BankKind::Single, 5, cfg.clone(), 1).unwrap();
    let classwise = DiscriminatorBank::<f64>::build(BankKind::ClassWise, 5, cfg.clone(), 1).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(classwise.len(), 5);
    let first = single.discriminators()[0].params().iter().next().unwrap().1.shape().to_vec();
    assert_eq!(first, vec![cfg.hidden_channels, 5, cfg.kernel, cfg.kernel]);
    let total = |b: &DiscriminatorBank<f64>| b.discriminators().iter().map(|d| d.params().numel()).sum::<usize>();
    assert_ne!(total(&single), total(&classwise));

    let f = random(&[1, 5, 16, 16], 3);
    let base = single.discriminate_values(&f).unwrap();
    for m in 0..5 {
        let mut g = f.clone();
        g.data_mut()[m * 256 + 17] += 0.5;
        assert_ne!(single.discriminate_values(&g).unwrap()[0].tensor(), base[0].tensor(), "channel {m} unseen");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn perturbing_other_channels_leaves_a_discriminator_unchanged(
        seed in any::<u64>(), j in 0usize..3, m in 0usize..3, delta in -2.0f64..2.0,
    ) {
        prop_assume!(j != m);
        let bank = DiscriminatorBank::<f64>::build(BankKind::ClassWise, 3, DiscConfig::desk_for_size(8), seed).unwrap();
        let f = random(&[1, 3, 8, 8], seed ^ 1);
        let mut g = f.clone();
        for v in &mut g.data_mut()[m * 64..(m + 1) * 64] {
            *v += delta;
        }
        let a = bank.discriminate_values(&f).unwrap();
        let b = bank.discriminate_values(&g).unwrap();
        prop_assert_eq!(a[j].tensor(), b[j].tensor());
    }

    #[test]
    fn domain_probabilities_are_distributions(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let bank = DiscriminatorBank::<f64>::build(BankKind::ClassWise, 2, DiscConfig::desk_for_size(8), seed).unwrap();
        let mut f = random(&[2, 2, 8, 8], seed);
        f.data_mut().iter_mut().for_each(|v| *v *= scale);
        for map in bank.discriminate_values(&f).unwrap() {
            let t = map.tensor();
            for b in 0..2 {
                for p in 0..64 {
                    let (p0, p1) = (t.data()[b * 128 + p], t.data()[b * 128 + 64 + p]);
                    prop_assert!((0.0..=1.0).contains(&p0) && (0.0..=1.0).contains(&p1));
                    prop_assert!((p0 + p1 - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
