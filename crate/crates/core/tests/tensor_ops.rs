mod common;

use common::*;
use hmsa::tensor::{Tape, Tensor};
use hmsa::{LabelMap, IGNORE_ID};
use proptest::prelude::*;

fn conv_f64(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
    let mut tape = Tape::<f64>::new();
    let (x, w, b) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.conv2d(x, w, b, s, p).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_of_ones_counts_overlap() {
    let ones = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
    let y = conv_f64(&ones, &ones, &Tensor::zeros(&[1]).unwrap(), 1, 1);
    // Hand convolution: each output counts the in-bounds cells of its 3x3 window.
    assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv_identity_kernel_and_zero_weight() {
    let mut r = rng(3);
    let x = random_tensor::<f64>(&mut r, &[2, 1, 5, 4]);
    let mut k = Tensor::<f64>::zeros(&[1, 1, 3, 3]).unwrap();
    k.data_mut()[4] = 1.0;
    assert_eq!(conv_f64(&x, &k, &Tensor::zeros(&[1]).unwrap(), 1, 1), x);

    let x = random_tensor::<f64>(&mut r, &[1, 3, 4, 4]);
    let w = Tensor::<f64>::zeros(&[2, 3, 3, 3]).unwrap();
    let b = Tensor::new(&[2], vec![0.5, -2.0]).unwrap();
    let y = conv_f64(&x, &w, &b, 1, 1);
    assert!(y.data()[..16].iter().all(|&v| v == 0.5));
    assert!(y.data()[16..].iter().all(|&v| v == -2.0));
}

#[test]
fn conv_errors() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 6, 6]).unwrap());
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]).unwrap());
    assert!(matches!(tape.conv2d(x, w, b, 1, 1), Err(hmsa::Error::Dimension(_))));
    let w = tape.constant(Tensor::zeros(&[1, 2, 3, 3]).unwrap());
    assert!(matches!(tape.conv2d(x, w, b, 2, 0), Err(hmsa::Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_loop_oracle(
        batch in 1usize..=2, cin in 1usize..=4, cout in 1usize..=4,
        h in 3usize..=9, w in 3usize..=9, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..=2, seed in 0u64..1000,
    ) {
        let pad = k / 2;
        let mut r = rng(seed);
        let x = random_tensor::<f64>(&mut r, &[batch, cin, h, w]);
        let wt = random_tensor::<f64>(&mut r, &[cout, cin, k, k]);
        let b = random_tensor::<f64>(&mut r, &[cout]);
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        match tape.conv2d(xv, wv, bv, stride, pad) {
            Ok(y) => {
                let oracle = conv2d_loops(&x, &wt, &b, stride, pad);
                prop_assert_eq!(tape.value(y).shape(), oracle.shape());
                prop_assert!(tape.value(y).max_abs_diff(&oracle) < 1e-12);
            }
            Err(e) => prop_assert!(matches!(e, hmsa::Error::Config(_)), "{}", e),
        }
    }

    #[test]
    fn resize_is_linear(seed in 0u64..1000, oh in 1usize..12, ow in 1usize..12, a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let mut r = rng(seed);
        let x = random_tensor::<f32>(&mut r, &[1, 2, 5, 6]);
        let y = random_tensor::<f32>(&mut r, &[1, 2, 5, 6]);
        let mut tape = Tape::<f32>::new();
        let combo = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let (xv, yv, cv) = (tape.constant(x), tape.constant(y), tape.constant(combo));
        let rx = tape.bilinear_resize(xv, oh, ow).unwrap();
        let ry = tape.bilinear_resize(yv, oh, ow).unwrap();
        let rc = tape.bilinear_resize(cv, oh, ow).unwrap();
        for ((&c, &p), &q) in tape.value(rc).data().iter().zip(tape.value(rx).data()).zip(tape.value(ry).data()) {
            prop_assert!((c - (a * p + b * q)).abs() <= 1e-5);
        }
    }

    #[test]
    fn softmax_sums_to_one(seed in 0u64..1000, c in 1usize..6, scale in 0.1f32..60.0) {
        let mut r = rng(seed);
        let x = random_tensor::<f32>(&mut r, &[1, c, 3, 4]).map(|v| v * scale);
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x);
        let s = tape.softmax_channels(xv).unwrap();
        let p = tape.value(s).data();
        for px in 0..12 {
            let total: f32 = (0..c).map(|ch| p[ch * 12 + px]).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
        }
    }
}

/// Scalar half-pixel bilinear sample, written from the definition.
fn bilinear_point(img: &[[f64; 2]; 2], oy: usize, ox: usize, scale: f64) -> f64 {
    let coord = |o: usize| ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, 1.0);
    let (y, x) = (coord(oy), coord(ox));
    let top = img[0][0] * (1.0 - x) + img[0][1] * x;
    let bottom = img[1][0] * (1.0 - x) + img[1][1] * x;
    top * (1.0 - y) + bottom * y
}

#[test]
fn bilinear_upsample_matches_hand_values() {
    let img = [[0.0, 2.0], [4.0, 6.0]];
    let oracle: Vec<f64> = (0..16).map(|i| bilinear_point(&img, i / 4, i % 4, 0.5)).collect();
    #[rustfmt::skip]
    let frozen = [
        0.0, 0.5, 1.5, 2.0,
        1.0, 1.5, 2.5, 3.0,
        3.0, 3.5, 4.5, 5.0,
        4.0, 4.5, 5.5, 6.0,
    ];
    assert_eq!(oracle, frozen);

    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap());
    let y = tape.bilinear_resize(x, 4, 4).unwrap();
    assert_eq!(tape.value(y).data(), &frozen);
}

#[test]
fn bilinear_identity_and_constant() {
    let mut r = rng(9);
    let x = random_tensor::<f32>(&mut r, &[1, 3, 5, 7]);
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.clone());
    let same = tape.bilinear_resize(xv, 5, 7).unwrap();
    assert_eq!(tape.value(same), &x);

    let c = tape.constant(Tensor::full(&[1, 2, 3, 5], 1.7f32).unwrap());
    for (oh, ow) in [(1, 1), (6, 10), (7, 3), (13, 2)] {
        let y = tape.bilinear_resize(c, oh, ow).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 1.7).abs() <= 1e-6));
    }
}

#[test]
fn group_norm_reference_cases() {
    let mut tape = Tape::<f64>::new();
    let gamma1 = tape.constant(Tensor::ones(&[4]).unwrap());
    let beta0 = tape.constant(Tensor::zeros(&[4]).unwrap());
    let c = tape.constant(Tensor::full(&[1, 4, 3, 3], 2.5).unwrap());
    let y = tape.group_norm(c, 2, gamma1, beta0, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    // Each group already standardized: output reproduces the input.
    let base = [-1.5, -0.5, 0.5, 1.5];
    let std = (base.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
    let data: Vec<f64> = (0..16).map(|i| base[i % 4] / std).collect();
    let x = tape.constant(Tensor::new(&[1, 4, 2, 2], data.clone()).unwrap());
    let y = tape.group_norm(x, 4, gamma1, beta0, 1e-12).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(&data) {
        assert!((a - b).abs() < 1e-5);
    }

    let gamma0 = tape.constant(Tensor::zeros(&[4]).unwrap());
    let beta5 = tape.constant(Tensor::full(&[4], 5.0).unwrap());
    let y = tape.group_norm(x, 2, gamma0, beta5, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 5.0));

    assert!(matches!(
        tape.group_norm(x, 3, gamma1, beta0, 1e-5),
        Err(hmsa::Error::Config(_))
    ));
}

#[test]
fn elementwise_reference_cases() {
    let mut r = rng(4);
    let x = random_tensor::<f64>(&mut r, &[1, 3, 2, 2]);
    let alpha = random_tensor::<f64>(&mut r, &[1, 1, 2, 2]);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let ones = tape.constant(Tensor::ones(&[1, 3, 2, 2]).unwrap());
    let zeros = tape.constant(Tensor::zeros(&[1, 3, 2, 2]).unwrap());
    let m = tape.mul(xv, ones).unwrap();
    assert_eq!(tape.value(m), &x);
    let a = tape.add(xv, zeros).unwrap();
    assert_eq!(tape.value(a), &x);

    let av = tape.constant(alpha.clone());
    let scaled = tape.mul(av, xv).unwrap();
    let mut oracle = vec![0.0; 12];
    for c in 0..3 {
        for p in 0..4 {
            oracle[c * 4 + p] = alpha.data()[p] * x.data()[c * 4 + p];
        }
    }
    assert_eq!(tape.value(scaled).data(), oracle.as_slice());
}

#[test]
fn softmax_reference_cases() {
    let mut tape = Tape::<f64>::new();
    let flat = tape.constant(Tensor::full(&[1, 4, 1, 1], 3.0).unwrap());
    let s = tape.softmax_channels(flat).unwrap();
    assert!(tape.value(s).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

    let extreme = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![500.0, -500.0]).unwrap());
    let s = tape.softmax_channels(extreme).unwrap();
    assert!((tape.value(s).data()[0] - 1.0).abs() < 1e-6);
    assert!(tape.value(s).data()[1].abs() < 1e-6);

    let logits = [1.0f64, 2.0, 3.0];
    let denom: f64 = logits.iter().map(|v| v.exp()).sum();
    let oracle: Vec<f64> = logits.iter().map(|v| v.exp() / denom).collect();
    let x = tape.constant(Tensor::new(&[1, 3, 1, 1], logits.to_vec()).unwrap());
    let s = tape.softmax_channels(x).unwrap();
    for (a, b) in tape.value(s).data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_reference_cases() {
    let mut tape = Tape::<f64>::new();
    let confident = tape.leaf(Tensor::new(&[1, 2, 1, 1], vec![40.0, -40.0]).unwrap(), true);
    let l = LabelMap::new(1, 1, 2, vec![0]).unwrap();
    let loss = tape.cross_entropy_ignore(confident, &l, IGNORE_ID).unwrap();
    assert!(tape.value(loss).data()[0] < 1e-12);

    let even = tape.leaf(Tensor::zeros(&[1, 2, 1, 2]).unwrap(), true);
    let l = LabelMap::new(1, 2, 2, vec![0, 1]).unwrap();
    let loss = tape.cross_entropy_ignore(even, &l, IGNORE_ID).unwrap();
    assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

    let ignored = LabelMap::filled(1, 2, 2, IGNORE_ID).unwrap();
    let loss = tape.cross_entropy_ignore(even, &ignored, IGNORE_ID).unwrap();
    assert_eq!(tape.value(loss).data()[0], 0.0);
    tape.backward(loss).unwrap();
    assert!(tape.grad(even).unwrap().data().iter().all(|&g| g == 0.0));

    let bad = LabelMap::new(1, 2, 3, vec![2, 0]).unwrap();
    assert!(matches!(
        tape.cross_entropy_ignore(even, &bad, IGNORE_ID),
        Err(hmsa::Error::Data(_))
    ));
}

#[test]
fn ignored_pixels_do_not_affect_loss() {
    let mut r = rng(12);
    let labels = LabelMap::new(2, 2, 3, vec![0, IGNORE_ID, 2, IGNORE_ID]).unwrap();
    let x = random_tensor::<f64>(&mut r, &[1, 3, 2, 2]);
    let mut y = x.clone();
    for c in 0..3 {
        y.data_mut()[c * 4 + 1] += 10.0;
        y.data_mut()[c * 4 + 3] -= 7.0 * c as f64;
    }
    let mut tape = Tape::<f64>::new();
    let (xv, yv) = (tape.leaf(x, true), tape.leaf(y, true));
    let lx = tape.cross_entropy_ignore(xv, &labels, IGNORE_ID).unwrap();
    let ly = tape.cross_entropy_ignore(yv, &labels, IGNORE_ID).unwrap();
    assert_eq!(tape.value(lx).data()[0], tape.value(ly).data()[0]);
    tape.backward(lx).unwrap();
    let g = tape.grad(xv).unwrap().data();
    for c in 0..3 {
        assert_eq!(g[c * 4 + 1], 0.0);
        assert_eq!(g[c * 4 + 3], 0.0);
    }
}

#[test]
fn every_op_passes_gradcheck_in_verification_precision() {
    for case in op_cases(2024) {
        let err = gradcheck::<f64>(&case.inputs, &case, 1e-5);
        assert!(err <= 1e-6, "{}: relative error {err:e}", case.name);
    }
}

#[test]
fn every_op_passes_gradcheck_in_standard_precision() {
    for case in op_cases(2025) {
        let err = gradcheck::<f32>(&case.inputs, &case, 1e-5);
        assert!(err <= 1e-2, "{}: relative error {err:e}", case.name);
    }
}

#[test]
fn forward_is_deterministic() {
    let case = op_cases(7).pop().unwrap();
    let run = || {
        let mut tape = Tape::<f32>::new();
        let vars: Vec<_> = case.inputs.iter().map(|t| tape.leaf(t.cast(), true)).collect();
        let l = case.build(&mut tape, &vars);
        tape.value(l).data()[0].to_bits()
    };
    assert_eq!(run(), run());
}
