mod common;

use common::*;
use kdseg::tensor::{finite_diff_check, softmax_t, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn t32(shape: &[usize], data: Vec<f32>) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn conv_pointwise_scaling() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones(&[1, 3, 3, 1]));
    let w = tape.constant(t32(&[1, 1, 1, 1], vec![2.0]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, b, 1, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 3, 1]);
    assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv_single_pixel_centre_tap() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t32(&[1, 1, 1, 1], vec![5.0]));
    let w = tape.constant(Tensor::ones(&[3, 3, 1, 1]));
    let b = tape.constant(t32(&[1], vec![1.0]));
    let y = tape.conv2d(x, w, b, 1, 1, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[6.0]);
}

#[test]
fn conv_dilated_centre_matches_tap_sum() {
    let mut r = rng(3);
    let input = uniform(&[1, 5, 5, 1], -1.0, 1.0, &mut r);
    let weight = uniform(&[3, 3, 1, 1], -1.0, 1.0, &mut r);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(weight.clone());
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, b, 1, 2, 2).unwrap();
    let centre = tape.value(y).data()[2 * 5 + 2];
    let mut expected = 0.0;
    for ky in 0..3 {
        for kx in 0..3 {
            expected += input.data()[(ky * 2) * 5 + kx * 2] * weight.data()[ky * 3 + kx];
        }
    }
    assert!((centre - expected).abs() < 1e-12);
}

#[test]
fn conv_channel_mismatch_is_shape_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones(&[1, 4, 4, 2]));
    let w = tape.constant(Tensor::ones(&[3, 3, 3, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let err = tape.conv2d(x, w, b, 1, 1, 1).unwrap_err();
    assert!(matches!(err, kdseg::Error::Shape { op: "conv2d", .. }), "{err}");
}

#[test]
fn conv_same_padding_output_extent() {
    for (h, stride) in [(8, 1), (8, 2), (9, 2), (7, 1)] {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, h, h, 1]));
        let w = tape.constant(Tensor::ones(&[3, 3, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, stride, 4, 4).unwrap();
        assert_eq!(tape.shape(y)[1], h.div_ceil(stride));
    }
}

#[test]
fn conv_matches_naive_oracle() {
    for seed in 0..40 {
        let mut r = rng(seed);
        let b = r.gen_range(1..=2);
        let h = r.gen_range(1..=9);
        let w = r.gen_range(1..=9);
        let cin = r.gen_range(1..=3);
        let cout = r.gen_range(1..=3);
        let k = [1, 3, 5][r.gen_range(0..3)];
        let stride = r.gen_range(1..=2);
        let dilation = r.gen_range(1..=3);
        let padding = dilation * (k - 1) / 2;
        let input = uniform(&[b, h, w, cin], -1.0, 1.0, &mut r);
        let weight = uniform(&[k, k, cin, cout], -1.0, 1.0, &mut r);
        let bias = uniform(&[cout], -1.0, 1.0, &mut r);
        let expected = naive_conv2d(&input, &weight, &bias, stride, dilation, padding);

        let mut tape = Tape::<f32>::new();
        let x = tape.constant(input.cast());
        let wv = tape.constant(weight.cast());
        let bv = tape.constant(bias.cast());
        let y = tape.conv2d(x, wv, bv, stride, dilation, padding).unwrap();
        assert_eq!(tape.shape(y), expected.shape());
        for (&got, &want) in tape.value(y).data().iter().zip(expected.data()) {
            let err = (got as f64 - want).abs() / want.abs().max(1.0);
            assert!(err < 1e-5, "seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn backward_linear_map() {
    let mut tape = Tape::<f64>::new();
    let x_val = Tensor::new(vec![4], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
    let w = tape.param(Tensor::new(vec![4], vec![0.3, 0.1, -0.7, 2.0]).unwrap());
    let x = tape.constant(x_val.clone());
    let p = tape.mul(w, x).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &x_val);
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_frobenius_against_constant() {
    let mut r = rng(11);
    let a_val = uniform(&[1, 2, 3, 2], -1.0, 1.0, &mut r);
    let c_val = uniform(&[1, 2, 3, 2], -1.0, 1.0, &mut r);
    let mut tape = Tape::<f64>::new();
    let a = tape.param(a_val.clone());
    let c = tape.constant(c_val.clone());
    let loss = tape.frobenius_sq(a, c).unwrap();
    tape.backward(loss).unwrap();
    for ((g, x), y) in tape.grad(a).unwrap().data().iter().zip(a_val.data()).zip(c_val.data()) {
        assert!((g - 2.0 * (x - y)).abs() < 1e-12);
    }
}

#[test]
fn frobenius_examples() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[1, 2, 2, 1]));
    let b = tape.constant(Tensor::ones(&[1, 2, 2, 1]));
    let d = tape.frobenius_sq(a, b).unwrap();
    assert_eq!(tape.value(d).item(), 4.0);
    let same = tape.frobenius_sq(b, b).unwrap();
    assert_eq!(tape.value(same).item(), 0.0);
    let c = tape.constant(Tensor::ones(&[1, 2, 1, 2]));
    assert!(tape.frobenius_sq(a, c).is_err());
}

#[test]
fn backward_rejects_non_scalar_and_zeros_unreachable_leaves() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::ones(&[3]));
    let unused = tape.param(Tensor::ones(&[2]));
    assert!(matches!(tape.backward(a), Err(kdseg::Error::Param(_))));
    let loss = tape.sum(a);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(unused).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::ones(&[2]));
    let d = tape.detach(a);
    let p = tape.mul(a, d).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss).unwrap();
    // d(a·stop(a))/da = stop(a) = 1
    assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn trivial_primitive_identities() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![1, 2, 2, 2], vec![1., -2., 3., -4., 5., 6., -7., 8.]).unwrap());
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[1., 0., 3., 0., 5., 6., 0., 8.]);
    let cs = tape.channel_sum(x).unwrap();
    assert_eq!(tape.shape(cs), &[1, 2, 2]);
    assert_eq!(tape.value(cs).data(), &[-1., -1., 11., 1.]);
    let ss = tape.spatial_sum(x).unwrap();
    assert_eq!(tape.value(ss).data(), &[2., 8.]);
    let same = tape.bilinear_resize(x, 2, 2).unwrap();
    assert_eq!(tape.value(same), tape.value(x));
    let m = tape.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let mt = tape.transpose(m).unwrap();
    assert_eq!(tape.value(mt).data(), &[1., 4., 2., 5., 3., 6.]);
    let eye = tape.constant(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    let prod = tape.matmul(m, eye).unwrap();
    assert_eq!(tape.value(prod), tape.value(m));
    let one = tape.constant(Tensor::ones(&[2, 3]));
    let l = tape.log(one);
    assert!(tape.value(l).data().iter().all(|&v| v == 0.0));
    let zero = tape.constant(Tensor::zeros(&[2]));
    let lz = tape.log(zero);
    assert!(tape.value(lz).data().iter().all(|&v| (v - 1e-12f64.ln()).abs() < 1e-9));
    let s = tape.add(m, one).unwrap();
    assert_eq!(tape.value(s).data(), &[2., 3., 4., 5., 6., 7.]);
    let z = tape.constant(Tensor::new(vec![2, 2], vec![0., 0., 3., 4.]).unwrap());
    let n = tape.row_l2_normalize(z).unwrap();
    assert_eq!(tape.value(n).data(), &[0., 0., 0.6, 0.8]);
}

#[test]
fn finite_diff_linear_is_exact() {
    let mut r = rng(5);
    let w = uniform(&[3, 4], -1.0, 1.0, &mut r);
    let report = finite_diff_check(|t, v| weighted_sum(t, v[0], 9), &[w], 1e-4).unwrap();
    assert!(report.max_rel_error < 1e-10, "{report:?}");
}

#[test]
fn finite_diff_rejects_bad_eps() {
    let w = Tensor::<f64>::ones(&[2]);
    assert!(finite_diff_check(|t, v| Ok(t.sum(v[0])), &[w], 1.0).is_err());
}

#[test]
fn every_primitive_passes_gradient_check() {
    for seed in 0..20 {
        for case in primitive_cases(seed) {
            let report = finite_diff_check(|t, v| (case.f)(t, v), &case.params, 1e-6).unwrap();
            assert!(report.passed(1e-4), "{} seed {seed}: {report:?}", case.name);
        }
        let case = composite_case(seed);
        let report = finite_diff_check(|t, v| (case.f)(t, v), &case.params, 1e-6).unwrap();
        assert!(report.passed(1e-4), "composite seed {seed}: {report:?}");
    }
}

fn logits_strategy() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (1usize..6, 1usize..5)
        .prop_flat_map(|(c, rows)| (prop::collection::vec(-50.0f64..50.0, c * rows), Just(c)))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one((data, c) in logits_strategy(), t in 0.05f64..1000.0) {
        let n = data.len();
        let x = Tensor::new(vec![n / c, c], data).unwrap();
        let y = softmax_t(&x, t).unwrap();
        for row in y.data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_shift_invariant((data, c) in logits_strategy(), shift in -100.0f64..100.0) {
        let n = data.len();
        let x = Tensor::new(vec![n / c, c], data.clone()).unwrap();
        let shifted = Tensor::new(vec![n / c, c], data.iter().map(|v| v + shift).collect()).unwrap();
        let (a, b) = (softmax_t(&x, 1.5).unwrap(), softmax_t(&shifted, 1.5).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_temperature_is_logit_scaling((data, c) in logits_strategy(), t in 0.1f64..100.0) {
        let n = data.len();
        let x = Tensor::new(vec![n / c, c], data.clone()).unwrap();
        let scaled = Tensor::new(vec![n / c, c], data.iter().map(|v| v / t).collect()).unwrap();
        let (a, b) = (softmax_t(&x, t).unwrap(), softmax_t(&scaled, 1.0).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }
}
