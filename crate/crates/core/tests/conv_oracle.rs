mod common;

use common::*;
use pip_hsi_core::ops::{conv2d_forward, conv3d_forward, Conv2dConfig, Conv3dConfig};
use pip_hsi_core::pixel::{custom_conv3d, FitDomain, PixelTransferModel, TransferBasis};
use pip_hsi_core::GradTensor;
use rand::Rng;

#[test]
fn conv3d_matches_loop_reference_on_stride_example() {
    let mut r = rng(1);
    let x = random_tensor(&mut r, &[1, 1, 4, 5, 5], -1.0, 1.0);
    let w = random_tensor(&mut r, &[2, 1, 3, 3, 3], -1.0, 1.0);
    let b = random_tensor(&mut r, &[2], -1.0, 1.0);
    let out = conv3d_forward(&x, &w, &b, Conv3dConfig::new([3, 1, 1], [0; 3])).unwrap();
    assert_eq!(out.shape(), &[1, 2, 1, 3, 3]);
    let (shape, reference) = naive_conv3d(&x, &w, &b, [3, 1, 1], [0; 3], |a, b| a * b);
    assert_eq!(shape, out.shape());
    for (a, e) in out.values().iter().zip(&reference) {
        assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
    }
}

#[test]
fn conv3d_matches_loop_reference_on_random_cases() {
    let mut r = rng(2);
    for _ in 0..200 {
        let (xs, ws, s, p) = random_conv3d_case(&mut r);
        let x = random_tensor(&mut r, &xs, -1.0, 1.0);
        let w = random_tensor(&mut r, &ws, -1.0, 1.0);
        let b = random_tensor(&mut r, &[ws[0]], -1.0, 1.0);
        let out = conv3d_forward(&x, &w, &b, Conv3dConfig::new(s, p)).unwrap();
        let (shape, reference) = naive_conv3d(&x, &w, &b, s, p, |a, b| a * b);
        assert_eq!(shape, out.shape());
        for (a, e) in out.values().iter().zip(&reference) {
            assert!((a - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn conv2d_matches_loop_reference_on_random_cases() {
    let mut r = rng(3);
    for _ in 0..200 {
        let (xs, ws, s, p) = random_conv3d_case(&mut r);
        let x = random_tensor(&mut r, &[xs[0], xs[1], xs[3], xs[4]], -1.0, 1.0);
        let w = random_tensor(&mut r, &[ws[0], ws[1], ws[3], ws[4]], -1.0, 1.0);
        let b = random_tensor(&mut r, &[ws[0]], -1.0, 1.0);
        let cfg = Conv2dConfig::new([s[1], s[2]], [p[1], p[2]]);
        let out = conv2d_forward(&x, &w, &b, cfg).unwrap();
        let (shape, reference) = naive_conv2d(&x, &w, &b, [s[1], s[2]], [p[1], p[2]]);
        assert_eq!(shape, out.shape());
        for (a, e) in out.values().iter().zip(&reference) {
            assert!((a - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn trivial_conv_values() {
    let ones3 = GradTensor::full(&[1, 1, 3, 3, 3], 1.0);
    let out = conv3d_forward(&ones3, &ones3, &GradTensor::zeros(&[1]), Conv3dConfig::default()).unwrap();
    assert_eq!(out.values(), &[27.0]);
    let ones2 = GradTensor::full(&[1, 1, 3, 3], 1.0);
    let out = conv2d_forward(&ones2, &ones2, &GradTensor::zeros(&[1]), Conv2dConfig::default()).unwrap();
    assert_eq!(out.values(), &[9.0]);
    let mut r = rng(4);
    let w = random_tensor(&mut r, &[3, 2, 2, 2, 2], -1.0, 1.0);
    let out =
        conv3d_forward(&GradTensor::zeros(&[2, 2, 4, 4, 4]), &w, &GradTensor::zeros(&[3]), Conv3dConfig::default())
            .unwrap();
    assert!(out.values().iter().all(|&v| v == 0.0));
}

#[test]
fn full_depth_conv3d_equals_conv2d() {
    let mut r = rng(5);
    for _ in 0..100 {
        let (xs, ws, s, p) = random_conv3d_case(&mut r);
        let depth = r.random_range(1..=4);
        let x = random_tensor(&mut r, &[xs[0], xs[1], depth, xs[3], xs[4]], -1.0, 1.0);
        let w = random_tensor(&mut r, &[ws[0], ws[1], depth, ws[3], ws[4]], -1.0, 1.0);
        let b = random_tensor(&mut r, &[ws[0]], -1.0, 1.0);
        let sd = r.random_range(1..=3);
        let out3 = conv3d_forward(&x, &w, &b, Conv3dConfig::new([sd, s[1], s[2]], [0, p[1], p[2]])).unwrap();
        // Fold depth into channels: [N, C·D, H, W].
        let x2 = x.clone().reshape(&[xs[0], xs[1] * depth, xs[3], xs[4]]).unwrap();
        let w2 = w.clone().reshape(&[ws[0], ws[1] * depth, ws[3], ws[4]]).unwrap();
        let out2 = conv2d_forward(&x2, &w2, &b, Conv2dConfig::new([s[1], s[2]], [p[1], p[2]])).unwrap();
        assert_eq!(out3.shape()[2], 1);
        assert_eq!(out3.len(), out2.len());
        for (a, e) in out3.values().iter().zip(out2.values()) {
            assert!((a - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn identity_transfer_equals_conv3d_on_100_instances() {
    let mut r = rng(6);
    let exact = PixelTransferModel::exact_product();
    for _ in 0..100 {
        let (mut xs, mut ws, s, p) = random_conv3d_case(&mut r);
        xs[1] = 1;
        ws[1] = 1;
        let x = random_tensor(&mut r, &xs, 0.0, 1.0);
        let w = random_tensor(&mut r, &ws, -1.0, 1.0);
        let b = random_tensor(&mut r, &[ws[0]], -1.0, 1.0);
        let cfg = Conv3dConfig::new(s, p);
        let custom = custom_conv3d(&x, &w, &b, &exact, cfg).unwrap();
        let reference = conv3d_forward(&x, &w, &b, cfg).unwrap();
        assert_eq!(custom.clamped, 0);
        assert_eq!(custom.output.shape(), reference.shape());
        for (a, e) in custom.output.values().iter().zip(reference.values()) {
            assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
        }
    }
}

#[test]
fn custom_conv3d_matches_elementwise_loop_reference() {
    let mut r = rng(7);
    let transfer = PixelTransferModel {
        basis: TransferBasis::SeparablePolynomial { degree: 3 },
        coefficients: (0..9).map(|_| r.random_range(-1.0..1.0)).collect(),
        domain: FitDomain::new(-1.0, 1.0, 0.0, 1.0),
        rmse: 0.0,
    };
    for _ in 0..50 {
        let (mut xs, mut ws, s, p) = random_conv3d_case(&mut r);
        xs[1] = 1;
        ws[1] = 1;
        let x = random_tensor(&mut r, &xs, 0.0, 1.0);
        let w = random_tensor(&mut r, &ws, -1.0, 1.0);
        let b = random_tensor(&mut r, &[ws[0]], -1.0, 1.0);
        let out = custom_conv3d(&x, &w, &b, &transfer, Conv3dConfig::new(s, p)).unwrap();
        let f = |wv: f64, xv: f64| {
            let mut acc = 0.0;
            for i in 1..=3 {
                for j in 1..=3 {
                    acc += transfer.coefficients[(i - 1) * 3 + (j - 1)] * wv.powi(i as i32) * xv.powi(j as i32);
                }
            }
            acc
        };
        let (shape, reference) = naive_conv3d(&x, &w, &b, s, p, f);
        assert_eq!(shape, out.output.shape());
        for (a, e) in out.output.values().iter().zip(&reference) {
            assert!((a - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn custom_conv3d_zero_input_gives_bias_only() {
    let mut r = rng(8);
    let transfer = PixelTransferModel {
        basis: TransferBasis::SeparablePolynomial { degree: 2 },
        coefficients: vec![0.3, -0.2, 0.5, 0.1],
        domain: FitDomain::new(-1.0, 1.0, 0.0, 1.0),
        rmse: 0.0,
    };
    let w = random_tensor(&mut r, &[2, 1, 3, 3, 3], -1.0, 1.0);
    let out = custom_conv3d(
        &GradTensor::zeros(&[1, 1, 5, 5, 5]),
        &w,
        &GradTensor::zeros(&[2]),
        &transfer,
        Conv3dConfig::default(),
    )
    .unwrap();
    assert!(out.output.values().iter().all(|&v| v == 0.0));
}
