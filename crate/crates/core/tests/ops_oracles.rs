mod common;

use proptest::prelude::*;
use sadlr::gradcheck::{finite_diff_grad, rel_err};
use sadlr::ops;
use sadlr::{Error, Graph, Tensor, Var};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn matmul_examples() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(ops::matmul(&a, &eye).unwrap(), a);
    let col = t(&[2, 1], &[5.0, 6.0]);
    assert_eq!(ops::matmul(&a, &col).unwrap().data(), &[17.0, 39.0]);
    let z = Tensor::zeros(&[2, 3]).unwrap();
    assert!(ops::matmul(&a, &z)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
    match ops::matmul(&a, &Tensor::zeros(&[3, 1]).unwrap()) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 2]);
            assert_eq!(rhs, vec![3, 1]);
        }
        other => panic!("expected a dimension error, got {other:?}"),
    }
}

#[test]
fn conv_examples() {
    let mut r = common::rng(1);
    let x = common::random(&[2, 4, 4], &mut r);
    let eye = t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]);
    let zb = Tensor::zeros(&[2]).unwrap();
    assert_eq!(ops::conv2d(&x, &eye, &zb, 1, 0).unwrap(), x);

    let zw = Tensor::zeros(&[3, 2, 3, 3]).unwrap();
    let b = t(&[3], &[0.5, -1.0, 2.0]);
    let out = ops::conv2d(&x, &zw, &b, 1, 1).unwrap();
    for (c, &bc) in b.data().iter().enumerate() {
        assert!(out.data()[c * 16..(c + 1) * 16].iter().all(|&v| v == bc));
    }

    let w = common::random(&[3, 2, 3, 3], &mut r);
    let b = common::random(&[3], &mut r);
    let out = ops::conv2d(&x, &w, &b, 1, 1).unwrap();
    let (oracle, oh, ow) = common::conv2d(x.data(), (2, 4, 4), w.data(), b.data(), 3, 3, 1, 1);
    assert_eq!((oh, ow), (4, 4));
    assert!(common::close(out.data(), &oracle, 1e-12));

    // (4 + 2 - 3) / 2 is not integral
    assert!(matches!(
        ops::conv2d(&x, &w, &b, 2, 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn floor_conv_halves_even_inputs() {
    let mut r = common::rng(2);
    let x = common::random(&[3, 48, 48], &mut r);
    let w = common::random(&[4, 3, 3, 3], &mut r);
    let b = common::random(&[4], &mut r);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv2d_floor(xv, wv, bv, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[4, 24, 24]);
    let (oracle, _, _) = common::conv2d(x.data(), (3, 48, 48), w.data(), b.data(), 4, 3, 2, 1);
    assert!(common::close(g.value(y).data(), &oracle, 1e-12));
}

#[test]
fn layer_norm_examples() {
    let x = Tensor::<f64>::full(&[4, 2, 2], 3.0).unwrap();
    let ones = Tensor::full(&[4], 1.0).unwrap();
    let zeros = Tensor::zeros(&[4]).unwrap();
    let y = ops::layer_norm(&x, &ones, &zeros, 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let mut r = common::rng(3);
    let x = common::random(&[4, 2, 2], &mut r);
    let b = t(&[4], &[0.25; 4]);
    let y = ops::layer_norm(&x, &zeros, &b, 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.25));

    let y = ops::layer_norm(&x, &ones, &zeros, 1e-5).unwrap();
    let moments = |col: &[f64]| {
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        (mean, var)
    };
    for p in 0..4 {
        let xin: Vec<f64> = (0..4).map(|c| x.data()[c * 4 + p]).collect();
        let col: Vec<f64> = (0..4).map(|c| y.data()[c * 4 + p]).collect();
        let (_, vx) = moments(&xin);
        let (mean, var) = moments(&col);
        assert!(mean.abs() < 1e-12, "mean {mean}");
        // unit variance up to the eps in the denominator
        assert!((var - vx / (vx + 1e-5)).abs() < 1e-12, "var {var}");
    }
    assert!(ops::layer_norm(&x, &ones, &zeros, 0.0).is_err());
}

#[test]
fn relu_examples() {
    let x = t(&[3], &[-1.0, 0.0, 2.0]);
    assert_eq!(ops::relu(&x).data(), &[0.0, 0.0, 2.0]);
    assert!(ops::relu(&t(&[2], &[-3.0, -0.5]))
        .data()
        .iter()
        .all(|&v| v == 0.0));

    let mut g = Graph::new();
    let xv = g.input(t(&[2], &[-1.0, 2.0]));
    let y = g.relu(xv);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(xv).unwrap().data(), &[0.0, 1.0]);
    let fd = finite_diff_grad(|x| common::relu(x).iter().sum(), &[-1.0, 2.0], 1e-5);
    assert!(common::close(&fd, &[0.0, 1.0], 1e-9));
}

#[test]
fn softmax_examples() {
    let y = ops::softmax_channel(&t(&[2, 1, 1], &[0.0, 0.0])).unwrap();
    assert_eq!(y.data(), &[0.5, 0.5]);
    let y = ops::softmax_channel(&t(&[2, 1, 1], &[0.0, 3f64.ln()])).unwrap();
    assert!(common::close(y.data(), &[0.25, 0.75], 1e-15));
    let a = ops::softmax_channel(&t(&[2, 1, 2], &[1.0, -4.0, 3.5, 2.0])).unwrap();
    let b = ops::softmax_channel(&t(&[2, 1, 2], &[101.0, 96.0, 103.5, 102.0])).unwrap();
    assert!(common::close(a.data(), b.data(), 1e-12));
    assert!(ops::softmax_channel(&Tensor::<f64>::zeros(&[3, 1, 1]).unwrap()).is_err());
}

#[test]
fn upsample_examples() {
    let x = t(&[1, 1, 2], &[0.0, 2.0]);
    let y = ops::bilinear_upsample(&x, 2).unwrap();
    assert_eq!(y.shape(), &[1, 2, 4]);
    assert!(common::close(&y.data()[..4], &[0.0, 0.5, 1.5, 2.0], 1e-15));
    let mut r = common::rng(4);
    let x = common::random(&[2, 3, 3], &mut r);
    assert_eq!(ops::bilinear_upsample(&x, 1).unwrap(), x);
    let c = Tensor::<f64>::full(&[1, 3, 2], 0.7).unwrap();
    assert!(ops::bilinear_upsample(&c, 4)
        .unwrap()
        .data()
        .iter()
        .all(|&v| (v - 0.7).abs() < 1e-15));
    assert!(ops::bilinear_upsample(&c, 0).is_err());
}

#[test]
fn embedding_examples() {
    let mut r = common::rng(5);
    let table = common::random(&[5, 3], &mut r);
    let out = ops::embedding_lookup(&table, &[2, 1]).unwrap();
    assert_eq!(out.shape(), &[3, 2]);
    for c in 0..3 {
        assert_eq!(out.data()[c * 2], table.data()[2 * 3 + c]);
        assert_eq!(out.data()[c * 2 + 1], table.data()[3 + c]);
    }
    let row0 = ops::embedding_lookup(&table, &[0]).unwrap();
    assert_eq!(row0.data(), &table.data()[..3]);
    assert!(matches!(
        ops::embedding_lookup(&table, &[5]),
        Err(Error::Index { .. })
    ));

    let mut g = Graph::new();
    let tv = g.input(table);
    let e = g.embedding_lookup(tv, &[4, 4]).unwrap();
    let s = g.sum(e);
    let grads = g.backward(s).unwrap();
    let gt = grads.wrt(tv).unwrap().data();
    assert!(gt[12..15].iter().all(|&v| v == 2.0));
    assert!(gt[..12].iter().all(|&v| v == 0.0));
}

/// Checks the gradient of `sum(proj ⊙ op(inputs))` against central
/// differences for every input.
fn audit(inputs: &[Tensor<f64>], seed: u64, op: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = op(&mut g, &vars);
    let proj = common::random(g.shape(out), &mut common::rng(seed));
    let pv = g.constant(proj.clone());
    let prod = g.mul(out, pv).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();
    for (k, x) in inputs.iter().enumerate() {
        let numeric = finite_diff_grad(
            |xk| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        if j == k {
                            g.input(Tensor::new(v.shape(), xk.to_vec()).unwrap())
                        } else {
                            g.input(v.clone())
                        }
                    })
                    .collect();
                let out = op(&mut g, &vars);
                g.value(out)
                    .data()
                    .iter()
                    .zip(proj.data())
                    .map(|(a, b)| a * b)
                    .sum()
            },
            x.data(),
            1e-5,
        );
        let analytic = grads.wrt(vars[k]).unwrap().data();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(
                rel_err(*a, *n) < 1e-6,
                "input {k}: analytic {a} numeric {n}"
            );
        }
    }
}

#[test]
fn backward_rules_match_finite_differences() {
    let mut r = common::rng(6);
    let mut rand = |s: &[usize]| common::random(s, &mut r);

    audit(&[rand(&[3, 4]), rand(&[4, 2])], 1, |g, v| {
        g.matmul(v[0], v[1]).unwrap()
    });
    audit(&[rand(&[3, 4])], 2, |g, v| g.transpose(v[0]).unwrap());
    audit(&[rand(&[2, 3]), rand(&[2, 3])], 3, |g, v| {
        g.add(v[0], v[1]).unwrap()
    });
    audit(&[rand(&[2, 3]), rand(&[2, 3])], 4, |g, v| {
        g.mul(v[0], v[1]).unwrap()
    });
    audit(&[rand(&[5])], 5, |g, v| g.scale(v[0], -1.5));
    audit(&[rand(&[2, 6])], 6, |g, v| {
        g.reshape(v[0], &[3, 4]).unwrap()
    });
    audit(
        &[rand(&[2, 5, 5]), rand(&[3, 2, 3, 3]), rand(&[3])],
        7,
        |g, v| g.conv2d(v[0], v[1], v[2], 1, 1).unwrap(),
    );
    audit(
        &[rand(&[2, 6, 6]), rand(&[3, 2, 3, 3]), rand(&[3])],
        8,
        |g, v| g.conv2d_floor(v[0], v[1], v[2], 2, 1).unwrap(),
    );
    audit(&[rand(&[4, 2, 3]), rand(&[4]), rand(&[4])], 9, |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });
    audit(&[rand(&[2, 3, 3])], 10, |g, v| {
        g.softmax_channel(v[0]).unwrap()
    });
    audit(&[rand(&[2, 3, 2])], 11, |g, v| {
        g.bilinear_upsample(v[0], 3).unwrap()
    });
    audit(&[rand(&[5, 3])], 12, |g, v| {
        g.embedding_lookup(v[0], &[1, 4, 1]).unwrap()
    });
    audit(&[rand(&[2, 3, 3]), rand(&[1, 3, 3])], 13, |g, v| {
        g.concat_channels(&[v[0], v[1]]).unwrap()
    });
    audit(&[rand(&[3, 1])], 14, |g, v| {
        g.broadcast_spatial(v[0], 2, 3).unwrap()
    });
    audit(&[rand(&[2, 3, 3])], 15, |g, v| {
        g.select_channel(v[0], 1).unwrap()
    });
    audit(&[rand(&[3]), rand(&[3])], 16, |g, v| {
        let a = g.sum(v[0]);
        let b = g.sum(v[1]);
        g.weighted_sum(&[a, b], &[0.3, 0.7]).unwrap()
    });
}

#[test]
fn dice_node_gradient() {
    let gt = [1u8, 0, 1, 1, 0, 0];
    let gt_r: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
    let p = [0.2, 0.9, 0.6, 0.5, 0.1, 0.3];
    let mut g = Graph::new();
    let pv = g.input(t(&[2, 3], &p));
    let l = g.dice_loss(pv, &gt_r, 1.0).unwrap();
    assert!((g.value(l).item() - common::dice(&p, &gt, 1.0)).abs() < 1e-15);
    let grads = g.backward(l).unwrap();
    let fd = finite_diff_grad(|x| common::dice(x, &gt, 1.0), &p, 1e-6);
    for (a, n) in grads.wrt(pv).unwrap().data().iter().zip(&fd) {
        assert!(rel_err(*a, *n) < 1e-6);
    }
}

#[test]
fn backward_rejects_non_scalar_and_reverses_tape() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.0, 2.0]));
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.visit_order(), &[s.index(), y.index(), x.index()]);
    let mut g = Graph::new();
    let x = g.input(t(&[1], &[3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    assert_eq!(g.backward(s).unwrap().wrt(x).unwrap().data(), &[6.0]);
}

#[test]
fn finite_difference_oracle_examples() {
    let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5);
    assert!((g[0] - 6.0).abs() < 1e-6);
    let g = finite_diff_grad(|_| 4.0, &[1.0, -2.0], 1e-5);
    assert_eq!(g, vec![0.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let a = common::random(&[m, k], &mut r);
        let b = common::random(&[k, n], &mut r);
        let out = ops::matmul(&a, &b).unwrap();
        prop_assert!(common::close(out.data(), &common::matmul(a.data(), b.data(), m, k, n), 1e-12));
    }

    #[test]
    fn conv_matches_sliding_window(
        cin in 1usize..4, cout in 1usize..4, h in 3usize..8, w in 3usize..8,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, pad in 0usize..2,
        seed in 0u64..1000,
    ) {
        let mut r = common::rng(seed);
        let x = common::random(&[cin, h, w], &mut r);
        let wt = common::random(&[cout, cin, k, k], &mut r);
        let b = common::random(&[cout], &mut r);
        let integral = (h + 2 * pad - k) % stride == 0 && (w + 2 * pad - k) % stride == 0;
        match ops::conv2d(&x, &wt, &b, stride, pad) {
            Ok(out) => {
                prop_assert!(integral);
                let (oracle, oh, ow) = common::conv2d(x.data(), (cin, h, w), wt.data(), b.data(), cout, k, stride, pad);
                prop_assert_eq!(out.shape(), &[cout, oh, ow]);
                prop_assert!(common::close(out.data(), &oracle, 1e-12));
            }
            Err(e) => {
                prop_assert!(!integral);
                prop_assert!(matches!(e, Error::Config(_)));
            }
        }
    }

    #[test]
    fn layer_norm_matches_direct_statistics(c in 1usize..6, h in 1usize..4, w in 1usize..4, seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let x = common::random(&[c, h, w], &mut r);
        let gamma = common::random(&[c], &mut r);
        let beta = common::random(&[c], &mut r);
        let y = ops::layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        let oracle = common::layer_norm(x.data(), c, h * w, gamma.data(), beta.data(), 1e-5);
        prop_assert!(common::close(y.data(), &oracle, 1e-12));
    }

    #[test]
    fn softmax_is_a_distribution(h in 1usize..5, w in 1usize..5, shift in -50.0f64..50.0, seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let x = common::random(&[2, h, w], &mut r);
        let y = ops::softmax_channel(&x).unwrap();
        let hw = h * w;
        prop_assert!(common::close(y.data(), &common::softmax2(x.data(), hw), 1e-12));
        for p in 0..hw {
            prop_assert!((y.data()[p] + y.data()[hw + p] - 1.0).abs() < 1e-12);
        }
        let shifted = Tensor::new(&[2, h, w], x.data().iter().map(|v| v + shift).collect()).unwrap();
        prop_assert!(common::close(ops::softmax_channel(&shifted).unwrap().data(), y.data(), 1e-12));
    }

    #[test]
    fn upsample_matches_formula(c in 1usize..3, h in 1usize..5, w in 1usize..5, f in 1usize..5, seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let x = common::random(&[c, h, w], &mut r);
        let y = ops::bilinear_upsample(&x, f).unwrap();
        prop_assert_eq!(y.shape(), &[c, h * f, w * f]);
        prop_assert!(common::close(y.data(), &common::upsample(x.data(), c, h, w, f), 1e-12));
    }

    #[test]
    fn relu_is_elementwise_max(xs in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let x = Tensor::new(&[xs.len()], xs.clone()).unwrap();
        let y = ops::relu(&x);
        let want = common::relu(&xs);
        prop_assert_eq!(y.data(), want.as_slice());
    }
}
