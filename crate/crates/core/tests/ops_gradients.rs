mod common;

use audiogen::nn::ops;
use candle_core::{Device, Tensor};
use common::{grad_check, max_abs_diff, randn};

// direct loops, independent of candle's convolution kernels
fn naive_conv1d(x: &Tensor, k: &Tensor, pad: usize, stride: usize, dil: usize) -> Tensor {
    let xv = x.to_vec3::<f64>().unwrap();
    let kv = k.to_vec3::<f64>().unwrap();
    let (b, c, l) = x.dims3().unwrap();
    let (o, _, ks) = k.dims3().unwrap();
    let l_out = (l + 2 * pad - dil * (ks - 1) - 1) / stride + 1;
    let mut out = vec![0f64; b * o * l_out];
    for bi in 0..b {
        for oi in 0..o {
            for t in 0..l_out {
                let mut acc = 0.0;
                for ci in 0..c {
                    for j in 0..ks {
                        let pos = (t * stride + j * dil) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < l {
                            acc += xv[bi][ci][pos as usize] * kv[oi][ci][j];
                        }
                    }
                }
                out[(bi * o + oi) * l_out + t] = acc;
            }
        }
    }
    Tensor::from_vec(out, (b, o, l_out), &Device::Cpu).unwrap()
}

fn naive_conv_transpose1d(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
    let xv = x.to_vec3::<f64>().unwrap();
    let kv = k.to_vec3::<f64>().unwrap();
    let (b, c, l) = x.dims3().unwrap();
    let (_, o, ks) = k.dims3().unwrap();
    let l_out = (l - 1) * stride + ks;
    let mut out = vec![0f64; b * o * l_out];
    for bi in 0..b {
        for ci in 0..c {
            for q in 0..l {
                for oi in 0..o {
                    for j in 0..ks {
                        out[(bi * o + oi) * l_out + q * stride + j] += xv[bi][ci][q] * kv[ci][oi][j];
                    }
                }
            }
        }
    }
    Tensor::from_vec(out, (b, o, l_out), &Device::Cpu).unwrap()
}

const CONV_CASES: [(usize, usize, usize, usize); 5] = [
    // kernel, padding, stride, dilation
    (3, 1, 1, 1),
    (7, 3, 1, 3),
    (4, 0, 2, 1),
    (5, 2, 3, 2),
    (1, 0, 1, 1),
];

#[test]
fn conv1d_forward_matches_loops() {
    for (n, &(ks, p, s, d)) in CONV_CASES.iter().enumerate() {
        let x = randn(&[2, 3, 23], n as u64);
        let k = randn(&[4, 3, ks], 100 + n as u64);
        let got = ops::conv1d(&x, &k, p, s, d).unwrap();
        assert!(max_abs_diff(&got, &naive_conv1d(&x, &k, p, s, d)) < 1e-12);
        // non-contiguous operands go through the same path
        let xt = x.transpose(1, 2).unwrap().contiguous().unwrap().transpose(1, 2).unwrap();
        let got_t = ops::conv1d(&xt, &k, p, s, d).unwrap();
        assert!(max_abs_diff(&got_t, &got) < 1e-12);
    }
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    for (n, &(ks, p, s, d)) in CONV_CASES.iter().enumerate() {
        let x = randn(&[2, 3, 23], n as u64);
        let k = randn(&[4, 3, ks], 100 + n as u64);
        let w = randn(&[2, 4, naive_conv1d(&x, &k, p, s, d).dim(2).unwrap()], 200 + n as u64);
        let kc = k.clone();
        let wc = w.clone();
        let err_x = grad_check(
            |x| (ops::conv1d(x, &kc, p, s, d).unwrap() * &wc).unwrap().sum_all().unwrap(),
            &x,
            1e-5,
            60,
            1,
        );
        let xc = x.clone();
        let err_k = grad_check(
            |k| (ops::conv1d(&xc, k, p, s, d).unwrap() * &w).unwrap().sum_all().unwrap(),
            &k,
            1e-5,
            60,
            2,
        );
        assert!(err_x < 1e-6, "case {n}: dx rel err {err_x}");
        assert!(err_k < 1e-6, "case {n}: dk rel err {err_k}");
    }
}

#[test]
fn conv_transpose1d_forward_and_gradients() {
    for (n, &(stride, ks)) in [(2usize, 4usize), (4, 8), (3, 6), (1, 3), (3, 4), (2, 2)].iter().enumerate() {
        let x = randn(&[2, 3, 7], 300 + n as u64);
        let k = randn(&[3, 4, ks], 400 + n as u64);
        let got = ops::conv_transpose1d(&x, &k, stride).unwrap();
        let want = naive_conv_transpose1d(&x, &k, stride);
        let d = max_abs_diff(&got, &want);
        assert!(d < 1e-12, "stride {stride} kernel {ks}: forward diff {d}");
        let w = randn(want.dims(), 500 + n as u64);
        let (kc, wc) = (k.clone(), w.clone());
        let err_x = grad_check(
            |x| (ops::conv_transpose1d(x, &kc, stride).unwrap() * &wc).unwrap().sum_all().unwrap(),
            &x,
            1e-5,
            60,
            3,
        );
        let xc = x.clone();
        let err_k = grad_check(
            |k| (ops::conv_transpose1d(&xc, k, stride).unwrap() * &w).unwrap().sum_all().unwrap(),
            &k,
            1e-5,
            60,
            4,
        );
        assert!(err_x < 1e-6, "stride {stride}: dx rel err {err_x}");
        assert!(err_k < 1e-6, "stride {stride}: dk rel err {err_k}");
    }
}

#[test]
fn rfft_gradient_matches_finite_differences() {
    for n in [8usize, 9, 16] {
        let x = randn(&[2, 3, n], n as u64);
        let bins = n / 2 + 1;
        let w = randn(&[2, 3, 2 * bins], 50 + n as u64);
        let err = grad_check(
            |x| (ops::rfft(x).unwrap() * &w).unwrap().sum_all().unwrap(),
            &x,
            1e-5,
            200,
            5,
        );
        assert!(err < 1e-6, "n={n}: rel err {err}");
    }
}

#[test]
fn fir_same_matches_padded_convolution() {
    let x = randn(&[2, 3, 40], 7);
    let taps: Vec<f64> = randn(&[9], 8).to_vec1().unwrap();
    // convolution = correlation with the reversed taps, centred by padding
    let rev: Vec<f64> = taps.iter().rev().copied().collect();
    let k = Tensor::from_vec(rev, (1, 1, 9), &Device::Cpu).unwrap();
    let flat = x.reshape((6, 1, 40)).unwrap();
    let want = naive_conv1d(&flat, &k, 4, 1, 1).reshape((2, 3, 40)).unwrap();
    let got = ops::fir_same(&x, &taps).unwrap();
    assert!(max_abs_diff(&got, &want) < 1e-12);
    let w = randn(&[2, 3, 40], 9);
    let err = grad_check(|x| (ops::fir_same(x, &taps).unwrap() * &w).unwrap().sum_all().unwrap(), &x, 1e-5, 80, 3);
    assert!(err < 1e-6, "fir rel err {err}");
    assert!(ops::fir_same(&x, &taps[..8]).is_err());
}

#[test]
fn framed_rfft_matches_gathered_frames() {
    let (n, hop, frames) = (8, 3, 5);
    let x = randn(&[2, 3, 21], 10);
    let window: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
    // route 2: gather overlapping frames, window, plain rfft
    let idx: Vec<u32> = (0..frames).flat_map(|f| (f * hop..f * hop + n).map(|i| i as u32)).collect();
    let idx = Tensor::from_vec(idx, frames * n, &Device::Cpu).unwrap();
    let w = Tensor::from_vec(window.clone(), n, &Device::Cpu).unwrap();
    let gathered = x.index_select(&idx, 2).unwrap().reshape((2, 3, frames, n)).unwrap();
    let want = ops::rfft(&gathered.broadcast_mul(&w).unwrap()).unwrap();
    let got = ops::framed_rfft(&x, &window, hop, frames).unwrap();
    assert_eq!(got.dims(), &[2, 3, frames, 2 * (n / 2 + 1)]);
    assert!(max_abs_diff(&got, &want) < 1e-12);
    let g = randn(got.dims(), 11);
    let err = grad_check(|x| (ops::framed_rfft(x, &window, hop, frames).unwrap() * &g).unwrap().sum_all().unwrap(), &x, 1e-5, 126, 4);
    assert!(err < 1e-6, "framed rfft rel err {err}");
    assert!(ops::framed_rfft(&x, &window, hop, 6).is_err());
}
