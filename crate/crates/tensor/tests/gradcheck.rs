//! Central finite differences against the reverse pass, op by op, in f64.

use classwise_tensor::{BnStats, ConvGeom, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks d f / d inputs[i] for every input element.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let o = f(&mut g, &vs);
        g.value(o).item()
    };
    let h = 1e-6;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("gradient reached input");
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic.data()[j];
            let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-4);
            assert!(err < 1e-5, "input {i} elem {j}: fd {fd} vs analytic {an}");
        }
    }
}

/// Scalar summary mixing linear and nonlinear paths so every output element
/// carries a distinct gradient.
fn probe(g: &mut Graph<f64>, y: Var) -> Var {
    let s = g.softmax(y).unwrap();
    let e = g.elu(y, 1.0);
    let m1 = g.mean(y);
    let n = g.value(y).shape()[0];
    let m2 = g.prob_nll(s, &vec![0; n], 1e-12).unwrap();
    let m3 = g.mean(e);
    g.weighted_sum(&[(m1, 0.3), (m2, 1.7), (m3, -0.9)]).unwrap()
}

#[test]
fn conv2d_dilated_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check(
        vec![
            rand_tensor(&[2, 2, 5, 5], &mut rng),
            rand_tensor(&[3, 2, 3, 3], &mut rng),
            rand_tensor(&[3], &mut rng),
        ],
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::same(3, 2)).unwrap();
            probe(g, y)
        },
    );
}

#[test]
fn strided_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check(
        vec![rand_tensor(&[1, 2, 6, 6], &mut rng), rand_tensor(&[2, 2, 3, 3], &mut rng)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, ConvGeom::new(3, 2, 1, 1)).unwrap();
            probe(g, y)
        },
    );
}

#[test]
fn pointwise_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check(
        vec![rand_tensor(&[2, 3, 3, 3], &mut rng), rand_tensor(&[2, 3, 1, 1], &mut rng)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, ConvGeom::same(1, 1)).unwrap();
            probe(g, y)
        },
    );
}

#[test]
fn transposed_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check(
        vec![
            rand_tensor(&[2, 3, 2, 3], &mut rng),
            rand_tensor(&[3, 2, 2, 2], &mut rng),
            rand_tensor(&[2], &mut rng),
        ],
        |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2).unwrap();
            probe(g, y)
        },
    );
}

#[test]
fn pool_and_resize_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check(vec![rand_tensor(&[1, 2, 6, 6], &mut rng)], |g, v| {
        let p = g.adaptive_avg_pool(v[0], 4, 3).unwrap();
        let r = g.resize_bilinear(p, 7, 5).unwrap();
        probe(g, r)
    });
}

#[test]
fn batch_norm_train_and_eval_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ins = vec![
        rand_tensor(&[2, 3, 3, 3], &mut rng),
        rand_tensor(&[3], &mut rng),
        rand_tensor(&[3], &mut rng),
    ];
    check(ins.clone(), |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], BnStats::Batch, 1e-5).unwrap();
        probe(g, y)
    });
    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 2.0];
    check(ins, |g, v| {
        let (y, _) = g
            .batch_norm(v[0], v[1], v[2], BnStats::Running(&mean, &var), 1e-5)
            .unwrap();
        probe(g, y)
    });
}

#[test]
fn concat_slice_relu_scale_add_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    check(
        vec![rand_tensor(&[2, 2, 3, 3], &mut rng), rand_tensor(&[2, 3, 3, 3], &mut rng)],
        |g, v| {
            let c = g.concat(&[v[0], v[1]]).unwrap();
            let s = g.slice_channels(c, 1, 3).unwrap();
            let r = g.relu(s);
            let k = g.scale(r, 1.5);
            let back = g.slice_channels(c, 2, 3).unwrap();
            let a = g.add(k, back).unwrap();
            probe(g, a)
        },
    );
}

#[test]
fn cross_entropy_gradients_with_ignore() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels: Vec<usize> = (0..2 * 9).map(|i| (i * 7) % 4).collect();
    check(vec![rand_tensor(&[2, 4, 3, 3], &mut rng)], move |g, v| {
        g.cross_entropy(v[0], &labels, Some(0)).unwrap()
    });
}

#[test]
fn prob_nll_through_softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    check(vec![rand_tensor(&[3, 2, 2, 4], &mut rng)], |g, v| {
        let p = g.softmax(v[0]).unwrap();
        g.prob_nll(p, &[0, 1, 1], 1e-7).unwrap()
    });
}
