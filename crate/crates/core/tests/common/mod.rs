#![allow(dead_code)]

use pip_hsi_core::GradTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> GradTensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    GradTensor::from_vec(shape, values).unwrap()
}

/// Central difference of `f` with respect to every element of `x`.
pub fn numeric_grad(x: &GradTensor, h: f64, mut f: impl FnMut(&GradTensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.values()[i];
            probe.values_mut()[i] = orig + h;
            let up = f(&probe);
            probe.values_mut()[i] = orig - h;
            let down = f(&probe);
            probe.values_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Weighted sum `Σ r_i · y_i`, the scalar probe loss for gradient checks.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct 3-D convolution: `out[n,o,d,h,w] = b[o] + Σ w[o,c,i,j,l]·f(w, x[n,c,d·s+i−p, ...])`,
/// with out-of-range taps skipped.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv3d(
    x: &GradTensor,
    w: &GradTensor,
    b: &GradTensor,
    stride: [usize; 3],
    pad: [usize; 3],
    f: impl Fn(f64, f64) -> f64,
) -> (Vec<usize>, Vec<f64>) {
    let [n, ci, d, h, wd] = <[usize; 5]>::try_from(x.shape()).unwrap();
    let [co, _, kd, kh, kw] = <[usize; 5]>::try_from(w.shape()).unwrap();
    let od = (d + 2 * pad[0] - kd) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let xv = x.values();
    let wv = w.values();
    let mut out = vec![0.0; n * co * od * oh * ow];
    for s in 0..n {
        for o in 0..co {
            for a in 0..od {
                for bb in 0..oh {
                    for cc in 0..ow {
                        let mut acc = b.values()[o];
                        for c in 0..ci {
                            for i in 0..kd {
                                for j in 0..kh {
                                    for l in 0..kw {
                                        let zd = (a * stride[0] + i) as isize - pad[0] as isize;
                                        let zh = (bb * stride[1] + j) as isize - pad[1] as isize;
                                        let zw = (cc * stride[2] + l) as isize - pad[2] as isize;
                                        if zd < 0
                                            || zh < 0
                                            || zw < 0
                                            || zd >= d as isize
                                            || zh >= h as isize
                                            || zw >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xi =
                                            (((s * ci + c) * d + zd as usize) * h + zh as usize) * wd + zw as usize;
                                        let wi = (((o * ci + c) * kd + i) * kh + j) * kw + l;
                                        acc += f(wv[wi], xv[xi]);
                                    }
                                }
                            }
                        }
                        out[(((s * co + o) * od + a) * oh + bb) * ow + cc] = acc;
                    }
                }
            }
        }
    }
    (vec![n, co, od, oh, ow], out)
}

/// Direct 2-D convolution over `[N, C, H, W]`.
pub fn naive_conv2d(
    x: &GradTensor,
    w: &GradTensor,
    b: &GradTensor,
    stride: [usize; 2],
    pad: [usize; 2],
) -> (Vec<usize>, Vec<f64>) {
    let [n, ci, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [co, _, kh, kw] = <[usize; 4]>::try_from(w.shape()).unwrap();
    let oh = (h + 2 * pad[0] - kh) / stride[0] + 1;
    let ow = (wd + 2 * pad[1] - kw) / stride[1] + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for s in 0..n {
        for o in 0..co {
            for a in 0..oh {
                for bb in 0..ow {
                    let mut acc = b.values()[o];
                    for c in 0..ci {
                        for j in 0..kh {
                            for l in 0..kw {
                                let zh = (a * stride[0] + j) as isize - pad[0] as isize;
                                let zw = (bb * stride[1] + l) as isize - pad[1] as isize;
                                if zh < 0 || zw < 0 || zh >= h as isize || zw >= wd as isize {
                                    continue;
                                }
                                acc += w.values()[((o * ci + c) * kh + j) * kw + l]
                                    * x.values()[((s * ci + c) * h + zh as usize) * wd + zw as usize];
                            }
                        }
                    }
                    out[((s * co + o) * oh + a) * ow + bb] = acc;
                }
            }
        }
    }
    (vec![n, co, oh, ow], out)
}

/// Random small convolution instance: `(input shape, weight shape, stride, padding)`.
pub fn random_conv3d_case(rng: &mut ChaCha8Rng) -> ([usize; 5], [usize; 5], [usize; 3], [usize; 3]) {
    let n = rng.random_range(1..=2);
    let ci = rng.random_range(1..=2);
    let co = rng.random_range(1..=3);
    let mut input = [n, ci, 0, 0, 0];
    let mut kernel = [co, ci, 0, 0, 0];
    let mut stride = [1; 3];
    let mut pad = [0; 3];
    for a in 0..3 {
        let k: usize = rng.random_range(1..=3);
        pad[a] = rng.random_range(0..=1);
        stride[a] = rng.random_range(1..=2);
        kernel[a + 2] = k;
        input[a + 2] = (k + rng.random_range(0..=3usize)).saturating_sub(2 * pad[a]).max(1);
        while input[a + 2] + 2 * pad[a] < k {
            input[a + 2] += 1;
        }
    }
    (input, kernel, stride, pad)
}
