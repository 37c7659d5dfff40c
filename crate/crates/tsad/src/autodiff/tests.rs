use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn conv2d_hand_computed_1x1() {
    // 3 * 2 + 1 = 7
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap(), false);
    let w = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(), false);
    let b = g.leaf(Tensor::new(vec![1], vec![1.0]).unwrap(), false);
    let spec = ConvSpec::new(1, 1, (1, 1));
    let y = g.conv2d(x, w, b, &spec).unwrap();
    assert_eq!(g.value(y).data(), &[7.0]);
}

#[test]
fn conv2d_identity_kernel_preserves_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xt = randn_tensor(&mut rng, &[2, 1, 5, 4]);
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(xt.clone(), false);
    let w = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), false);
    let b = g.leaf(Tensor::zeros(vec![1]), false);
    let y = g.conv2d(x, w, b, &ConvSpec::new(1, 1, (1, 1))).unwrap();
    assert_eq!(g.value(y).data(), xt.data());
}

#[test]
fn conv2d_shape_mismatch_is_config_error() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![1, 2, 4, 4]), false);
    let w = g.leaf(Tensor::zeros(vec![3, 1, 1, 1]), false);
    let b = g.leaf(Tensor::zeros(vec![3]), false);
    let err = g.conv2d(x, w, b, &ConvSpec::new(1, 3, (1, 1))).unwrap_err();
    assert!(matches!(err, crate::Error::Config(_)), "{err}");
}

#[test]
fn conv2d_padding_stride_geometry() {
    // 6x6 input, 3x3 kernel, pad 1, stride 2 -> 3x3 output.
    let spec = ConvSpec::new(1, 1, (3, 3)).with_padding(1).with_stride(2);
    assert_eq!(spec.out_size(6, 6).unwrap(), (3, 3));
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::full(vec![1, 1, 6, 6], 1.0), false);
    let w = g.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0), false);
    let b = g.leaf(Tensor::zeros(vec![1]), false);
    let y = g.conv2d(x, w, b, &spec).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
    // corner window covers 4 ones, edge 6, center 9
    assert_eq!(g.value(y).data(), &[4.0, 6.0, 6.0, 6.0, 9.0, 9.0, 6.0, 9.0, 9.0]);
}

#[test]
fn leaky_relu_hand_cases() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::new(vec![3], vec![0.0, -2.0, 5.0]).unwrap(), false);
    let y = g.leaky_relu(x, 0.1).unwrap();
    let out = g.value(y).data();
    assert_eq!(out[0], 0.0);
    assert!((out[1] - (-0.2)).abs() < 1e-12);
    assert_eq!(out[2], 5.0);
    assert!(g.leaky_relu(x, 1.5).is_err());
}

#[test]
fn sigmoid_hand_cases() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::new(vec![2], vec![0.0, 10.0]).unwrap(), false);
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).data()[0], 0.5);
    assert!((g.value(y).data()[1] - 0.9999546).abs() < 1e-6);
}

#[test]
fn softmax_ce_uniform_logits_is_ln_k() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![3, 4]), false);
    let loss = g.softmax_ce(x, &[0, 1, 3]).unwrap();
    assert!((g.value(loss).item() - (4.0f64).ln()).abs() < 1e-12);
}

#[test]
fn softmax_ce_saturated_target_is_near_zero() {
    let mut g: Graph<f64> = Graph::new();
    let mut t = Tensor::zeros(vec![2, 5]);
    t.data_mut()[2] = 100.0;
    t.data_mut()[5 + 4] = 100.0;
    let x = g.leaf(t, false);
    let loss = g.softmax_ce(x, &[2, 4]).unwrap();
    assert!(g.value(loss).item() < 1e-6);
}

#[test]
fn softmax_ce_target_out_of_range_is_input_error() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![1, 3]), false);
    assert!(matches!(g.softmax_ce(x, &[3]), Err(crate::Error::Input(_))));
}

#[test]
fn softmax_rows_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = Tensor::from_fn(vec![6, 9], |_| rng.gen_range(-4.0..4.0));
    let p = softmax_rows(&t).unwrap();
    for row in 0..6 {
        let s: f64 = p.data()[row * 9..(row + 1) * 9].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(p.data()[row * 9..(row + 1) * 9].iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn maxpool2_hand_case_and_tie_break() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
    let y = g.maxpool2(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    // constant input: output constant, tie routes grad to first element.
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::full(vec![1, 1, 2, 2], 3.5), true);
    let y = g.maxpool2(x).unwrap();
    assert_eq!(g.value(y).data(), &[3.5]);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);

    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![1, 1, 3, 4]), false);
    assert!(matches!(g.maxpool2(x), Err(crate::Error::Config(_))));
}

#[test]
fn upsample2_replicates() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap(), false);
    let y = g.upsample2_nn(x).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[5.0, 5.0, 5.0, 5.0]);

    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![2, 3, 4, 5]), false);
    let y = g.upsample2_nn(x).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 3, 8, 10]);
}

#[test]
fn concat_singletons_and_slice_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let at = randn_tensor(&mut rng, &[2, 3, 4, 4]);
    let bt = randn_tensor(&mut rng, &[2, 2, 4, 4]);
    let mut g: Graph<f64> = Graph::new();
    let a = g.leaf(at.clone(), false);
    let b = g.leaf(bt.clone(), false);
    let y = g.concat_channels(a, b).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 5, 4, 4]);
    // slicing channels back recovers both inputs exactly
    let yd = g.value(y).data();
    let plane = 16;
    for img in 0..2 {
        let base = img * 5 * plane;
        assert_eq!(&yd[base..base + 3 * plane], &at.data()[img * 3 * plane..(img + 1) * 3 * plane]);
        assert_eq!(
            &yd[base + 3 * plane..base + 5 * plane],
            &bt.data()[img * 2 * plane..(img + 1) * 2 * plane]
        );
    }

    // singleton channels [x], [y] -> [x, y]
    let mut g: Graph<f64> = Graph::new();
    let a = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap(), false);
    let b = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![-1.0]).unwrap(), false);
    let y = g.concat_channels(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[2.5, -1.0]);
}

#[test]
fn concat_zero_half_conv_matches_plain_conv() {
    // concat(a, zeros) then 1x1 conv whose weights are zero on the zero half
    // equals the 1x1 conv of `a` alone.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let at = randn_tensor(&mut rng, &[1, 2, 3, 3]);
    let wt = randn_tensor(&mut rng, &[4, 2, 1, 1]);

    let mut g: Graph<f64> = Graph::new();
    let a = g.leaf(at.clone(), false);
    let w = g.leaf(wt.clone(), false);
    let b = g.leaf(Tensor::zeros(vec![4]), false);
    let plain = g.conv2d(a, w, b, &ConvSpec::new(2, 4, (1, 1))).unwrap();
    let plain_out = g.value(plain).data().to_vec();

    let mut g: Graph<f64> = Graph::new();
    let a = g.leaf(at, false);
    let z = g.constant(Tensor::zeros(vec![1, 2, 3, 3]));
    let cat = g.concat_channels(a, z).unwrap();
    // widen weights with zeros over the zero half
    let mut wide = Tensor::zeros(vec![4, 4, 1, 1]);
    for co in 0..4 {
        for ci in 0..2 {
            wide.data_mut()[co * 4 + ci] = wt.data()[co * 2 + ci];
        }
    }
    let w = g.leaf(wide, false);
    let b = g.leaf(Tensor::zeros(vec![4]), false);
    let fused = g.conv2d(cat, w, b, &ConvSpec::new(4, 4, (1, 1))).unwrap();
    assert_eq!(g.value(fused).data(), &plain_out[..]);
}

#[test]
fn backward_sum_gives_ones_and_square_gives_2x() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::full(vec![2, 3], 1.25), true);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    // loss = sum(x^2) at x = 3 -> grad 6
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_requires_scalar_loss_and_nonempty_tape() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![3]), true);
    assert!(matches!(g.backward(x), Err(crate::Error::Usage(_))));
    let y = g.leaky_relu(x, 0.1).unwrap();
    assert!(matches!(g.backward(y), Err(crate::Error::Usage(_))));
}

#[test]
fn backward_accumulates_across_calls() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0), true);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
}

#[test]
fn frozen_leaf_gets_no_grad() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0), false);
    let y = g.leaf(Tensor::scalar(3.0), true);
    let p = g.mul(x, y).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).is_none());
    assert_eq!(g.grad(y).unwrap().data(), &[2.0]);
}

#[test]
fn forward_determinism_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xt = randn_tensor(&mut rng, &[2, 3, 8, 8]);
    let wt = randn_tensor(&mut rng, &[4, 3, 3, 3]);
    let bt = randn_tensor(&mut rng, &[4]);
    let spec = ConvSpec::new(3, 4, (3, 3)).with_padding(1);
    let run = || {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(xt.clone(), false);
        let w = g.leaf(wt.clone(), false);
        let b = g.leaf(bt.clone(), false);
        let c = g.conv2d(x, w, b, &spec).unwrap();
        let r = g.leaky_relu(c, 0.1).unwrap();
        let p = g.maxpool2(r).unwrap();
        g.value(p).data().to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn non_finite_forward_is_numeric_error() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::scalar(1e308), false);
    let y = g.mul(x, x); // overflows to inf
    assert!(matches!(y, Err(crate::Error::Numeric { .. })));
}

// ---- finite-difference gradient checks --------------------------------

#[test]
fn grad_check_linear_function_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn_tensor(&mut rng, &[4]);
    let err = grad_check(
        |g, x| {
            let s = g.scale(x, 2.5)?;
            g.sum(s)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-10, "linear grad err {err}");
}

#[test]
fn grad_check_all_ops_randomized() {
    // every differentiable op on randomized small shapes
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..3usize);
        let ci = rng.gen_range(1..4usize);
        let co = rng.gen_range(1..4usize);
        let h = 2 * rng.gen_range(1..3usize);
        let w = 2 * rng.gen_range(1..3usize);
        let x = randn_tensor(&mut rng, &[n, ci, h, w]);
        let wt = randn_tensor(&mut rng, &[co, ci, 3, 3]);
        let bt = randn_tensor(&mut rng, &[co]);
        let spec = ConvSpec::new(ci, co, (3, 3)).with_padding(1);

        // conv w.r.t. input
        let (w2, b2, s2) = (wt.clone(), bt.clone(), spec.clone());
        let err = grad_check(
            move |g, xv| {
                let w = g.leaf(w2.clone(), false);
                let b = g.leaf(b2.clone(), false);
                let c = g.conv2d(xv, w, b, &s2)?;
                g.sum(c)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "conv dx err {err} seed {seed}");

        // conv w.r.t. weights
        let (x2, b2, s2) = (x.clone(), bt.clone(), spec.clone());
        let err = grad_check(
            move |g, wv| {
                let x = g.leaf(x2.clone(), false);
                let b = g.leaf(b2.clone(), false);
                let c = g.conv2d(x, wv, b, &s2)?;
                g.sum(c)
            },
            &wt,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "conv dw err {err} seed {seed}");

        // conv w.r.t. bias
        let (x2, w2, s2) = (x.clone(), wt.clone(), spec.clone());
        let err = grad_check(
            move |g, bv| {
                let x = g.leaf(x2.clone(), false);
                let w = g.leaf(w2.clone(), false);
                let c = g.conv2d(x, w, bv, &s2)?;
                g.sum(c)
            },
            &bt,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "conv db err {err} seed {seed}");

        // activations, pooling, upsample, concat, gather, sqrt, gap
        let err = grad_check(
            |g, xv| {
                let r = g.leaky_relu(xv, 0.1)?;
                let s = g.sigmoid(r)?;
                let p = g.maxpool2(s)?;
                let u = g.upsample2_nn(p)?;
                g.mean(u)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "activation chain err {err} seed {seed}");

        let other = randn_tensor(&mut rng, &[n, ci, h, w]);
        let o2 = other.clone();
        let err = grad_check(
            move |g, xv| {
                let o = g.leaf(o2.clone(), false);
                let c = g.concat_channels(xv, o)?;
                let m = g.mul(c, c)?;
                let sq = g.sqrt_shift(m, 0.1)?;
                g.mean(sq)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "concat/sqrt err {err} seed {seed}");

        let idx: Vec<usize> = (0..x.numel()).step_by(2).collect();
        let k = idx.len();
        let err = grad_check(
            move |g, xv| {
                let gth = g.gather(xv, idx.clone(), vec![k])?;
                let sq = g.mul(gth, gth)?;
                g.sum(sq)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "gather err {err} seed {seed}");

        let err = grad_check(
            |g, xv| {
                let p = g.global_avg_pool(xv)?;
                let s = g.sigmoid(p)?;
                g.sum(s)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "gap err {err} seed {seed}");
    }
}

#[test]
fn grad_check_softmax_ce_and_linear_layer() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = rng.gen_range(1..4usize);
        let d = rng.gen_range(2..5usize);
        let k = rng.gen_range(2..5usize);
        let x = randn_tensor(&mut rng, &[n, d]);
        let wt = randn_tensor(&mut rng, &[d, k]);
        let bt = randn_tensor(&mut rng, &[k]);
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();

        let (w2, b2, t2) = (wt.clone(), bt.clone(), targets.clone());
        let err = grad_check(
            move |g, xv| {
                let w = g.leaf(w2.clone(), false);
                let b = g.leaf(b2.clone(), false);
                let l = g.linear(xv, w, b)?;
                g.softmax_ce(l, &t2)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "ce dx err {err} seed {seed}");

        let (x2, b2, t2) = (x.clone(), bt.clone(), targets.clone());
        let err = grad_check(
            move |g, wv| {
                let x = g.leaf(x2.clone(), false);
                let b = g.leaf(b2.clone(), false);
                let l = g.linear(x, wv, b)?;
                g.softmax_ce(l, &t2)
            },
            &wt,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "ce dw err {err} seed {seed}");
    }
}

#[test]
fn grad_check_composite_conv_relu_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = randn_tensor(&mut rng, &[1, 2, 4, 4]);
    let wt = randn_tensor(&mut rng, &[3, 2, 3, 3]);
    let bt = randn_tensor(&mut rng, &[3]);
    let spec = ConvSpec::new(2, 3, (3, 3)).with_padding(1);
    let err = grad_check(
        move |g, xv| {
            let w = g.leaf(wt.clone(), false);
            let b = g.leaf(bt.clone(), false);
            let c = g.conv2d(xv, w, b, &spec)?;
            let r = g.leaky_relu(c, 0.1)?;
            g.sum(r)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "composite err {err}");
}

#[test]
fn corrupted_backward_rule_fails_the_check() {
    // negative control: a deliberately wrong analytic gradient must be
    // flagged by the finite-difference oracle.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn_tensor(&mut rng, &[5]);
    let f = |g: &mut Graph<f64>, xv: Var| {
        let m = g.mul(xv, xv)?;
        g.sum(m)
    };
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&mut g, xv).unwrap();
    g.backward(loss).unwrap();
    let mut analytic = g.take_grad(xv).unwrap();
    for v in analytic.data_mut() {
        *v *= 1.05; // corrupt
    }
    let numeric = finite_diff_grad(&f, &x, 1e-4).unwrap();
    let err = max_rel_err(analytic.data(), numeric.data());
    assert!(err > 1e-2, "corruption not detected: {err}");
}
