//! Forward kernels against naive-loop oracles.

mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use xmodal::{Graph, Target, Tensor};

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv2d_matches_naive_loops_on_reference_shape() {
    let mut r = rng(100);
    let x = random_tensor(&[2, 5, 5], &mut r);
    let w = random_tensor(&[3, 2, 3, 3], &mut r);
    let b = random_tensor(&[3], &mut r);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, (1, 1), (0, 0)).unwrap();
    assert_eq!(g.shape(y), &[3, 3, 3]);
    let oracle = naive_conv2d(x.data(), (2, 5, 5), w.data(), (3, 3, 3), b.data(), (1, 1), (0, 0));
    assert!(max_abs_diff(g.data(y), &oracle) < 1e-12);
}

#[test]
fn conv2d_matches_naive_loops_over_random_geometries() {
    let mut r = rng(101);
    for case in 0..120 {
        let batch = r.gen_range(1..4);
        let cin = r.gen_range(1..4);
        let cout = r.gen_range(1..5);
        let (h, w) = (r.gen_range(1..8), r.gen_range(1..8));
        let (ph, pw) = (r.gen_range(0..2), r.gen_range(0..2));
        let kh = r.gen_range(1..=(h + 2 * ph).min(4));
        let kw = r.gen_range(1..=(w + 2 * pw).min(4));
        let stride = (r.gen_range(1..3), r.gen_range(1..3));
        let x = random_tensor(&[batch, cin, h, w], &mut r);
        let wt = random_tensor(&[cout, cin, kh, kw], &mut r);
        let b = random_tensor(&[cout], &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, stride, (ph, pw)).unwrap();
        let per = cin * h * w;
        let oracle: Vec<f64> = (0..batch)
            .flat_map(|i| {
                naive_conv2d(&x.data()[i * per..(i + 1) * per], (cin, h, w), wt.data(), (cout, kh, kw), b.data(), stride, (ph, pw))
            })
            .collect();
        assert!(max_abs_diff(g.data(y), &oracle) < 1e-12, "case {case}");
    }
}

#[test]
fn linear_matches_naive_matmul() {
    let mut r = rng(102);
    let mut shapes = vec![(4, 8, 5)];
    shapes.extend((0..100).map(|_| (r.gen_range(1..12), r.gen_range(1..12), r.gen_range(1..12))));
    for (rows, din, dout) in shapes {
        let x = random_tensor(&[rows, din], &mut r);
        let w = random_tensor(&[dout, din], &mut r);
        let b = random_tensor(&[dout], &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.linear(xv, wv, Some(bv)).unwrap();
        let oracle = naive_linear(x.data(), rows, din, w.data(), dout, b.data());
        assert!(max_abs_diff(g.data(y), &oracle) < 1e-12);
    }
}

#[test]
fn linear_broadcasts_leading_axes() {
    let mut r = rng(103);
    let x = random_tensor(&[2, 3, 4], &mut r);
    let w = random_tensor(&[5, 4], &mut r);
    let b = random_tensor(&[5], &mut r);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.linear(xv, wv, Some(bv)).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 5]);
    assert!(max_abs_diff(g.data(y), &naive_linear(x.data(), 6, 4, w.data(), 5, b.data())) < 1e-12);
}

#[test]
fn sq_euclidean_matches_naive() {
    let mut r = rng(104);
    let a = random_tensor(&[16], &mut r);
    let bs = random_tensor(&[7, 16], &mut r);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(bs.clone()));
    let d = g.pairwise_sq_euclidean(av, bv).unwrap();
    let oracle: Vec<f64> = (0..7).map(|k| sq_dist(a.data(), bs.row(k))).collect();
    assert!(max_abs_diff(g.data(d), &oracle) < 1e-12);
}

#[test]
fn mean_matches_naive() {
    let mut r = rng(105);
    let x = random_tensor(&[8, 6], &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let m = g.mean_over_axis(xv, 0).unwrap();
    let oracle: Vec<f64> = (0..6).map(|j| (0..8).map(|i| x.data()[i * 6 + j]).sum::<f64>() / 8.0).collect();
    assert!(max_abs_diff(g.data(m), &oracle) < 1e-12);
}

#[test]
fn cross_entropy_uniform_target_hand_value() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let l = g.softmax_cross_entropy(x, &[Target::uniform(3)]).unwrap();
    let oracle = naive_cross_entropy(&[1.0, 2.0, 3.0], &[1.0 / 3.0; 3]);
    assert!((g.value(l).item() - oracle).abs() < 1e-12);
    // (1/3) Σ (lse - x_k) with lse = 3 + ln(1 + e^-1 + e^-2).
    assert!((oracle - 1.407_605_964_444_380_1).abs() < 1e-12);
}

#[test]
fn cross_entropy_equal_logits_is_ln_k() {
    for k in 2..=64 {
        for level in [0.0, -3.7, 12.5] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_fn(&[k], |_| level));
            let hard = g.softmax_cross_entropy(x, &[Target::Index(k - 1)]).unwrap();
            let soft = g.softmax_cross_entropy(x, &[Target::uniform(k)]).unwrap();
            assert!((g.value(hard).item() - (k as f64).ln()).abs() < 1e-9);
            assert!((g.value(soft).item() - (k as f64).ln()).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_length_matches_shape(shape in prop::collection::vec(1usize..5, 0..4), extra in 1usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(shape.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(shape, vec![0.0; n + extra]).is_err());
    }

    #[test]
    fn forward_ops_stay_finite(data in prop::collection::vec(-1e3f64..1e3, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], data).unwrap());
        let r = g.relu(x);
        let m = g.mean_over_axis(r, 0).unwrap();
        let d = g.pairwise_sq_euclidean(m, x).unwrap();
        let n = g.neg(d);
        let l = g.softmax_cross_entropy(n, &[Target::Index(0)]).unwrap();
        prop_assert!(g.value(l).is_finite());
        prop_assert!(g.value(l).item() >= 0.0);
    }
}
