//! Per-primitive verification: forward values against brute-force oracles
//! and analytic gradients against central finite differences.

use msrf::kernels::conv::Pad;
use msrf::tape::{Tape, Var};
use msrf::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const INSTANCES: usize = 10;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.gen_range(lo..hi)).collect() }
}

/// Checks d(loss)/d(input) for every input coordinate against central
/// differences, where loss = sum(output ⊗ fixed random weights). The
/// finite-difference side only ever runs forward passes, so it is
/// independent of the backward implementation it verifies.
fn fd_check(inputs: &[Tensor], seed: u64, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let loss_of = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let w = rand_tensor(&tape.value(out).shape.clone(), &mut wrng, -1.0, 1.0);
        let wv = tape.constant(w);
        let prod = tape.hadamard(out, wv).unwrap();
        let loss = tape.sum_all(prod);
        tape.value(loss).item().unwrap()
    };

    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = rand_tensor(&tape.value(out).shape.clone(), &mut wrng, -1.0, 1.0);
    let wv = tape.constant(w);
    let prod = tape.hadamard(out, wv).unwrap();
    let loss = tape.sum_all(prod);
    let grads = tape.backward(loss).unwrap();

    for (i, input) in inputs.iter().enumerate() {
        let g = grads.get(vars[i]).expect("leaf gradient missing");
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += FD_H;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= FD_H;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * FD_H);
            let rel = (g.data[j] - fd).abs() / fd.abs().max(1.0);
            assert!(
                rel < FD_TOL,
                "input {} coord {}: ad={} fd={} rel={}",
                i,
                j,
                g.data[j],
                fd,
                rel
            );
        }
    }
}

// ---- conv2d ------------------------------------------------------------------

/// Direct nested-loop cross-correlation with explicit zero padding.
fn conv_oracle(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
) -> Tensor {
    let (n, cin, h, ww) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (cout, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let mut out = Tensor::zeros(vec![n, cout, out_h, out_w]);
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = b.data[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad_top as isize;
                                let ix = (ox * stride + kx) as isize - pad_left as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < ww {
                                    acc += w.data[((co * cin + ci) * kh + ky) * kw + kx]
                                        * x.data
                                            [((ni * cin + ci) * h + iy as usize) * ww + ix as usize];
                                }
                            }
                        }
                    }
                    out.data[((ni * cout + co) * out_h + oy) * out_w + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_identity_kernel_preserves_input() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
    w.data[4] = 1.0;
    let w = tape.constant(w);
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.conv2d(x, w, b, 1, Pad::Same).unwrap();
    assert_eq!(tape.value(y).data, vec![1.0; 9]);
}

#[test]
fn conv2d_stride2_shape_arithmetic() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![2, 16, 32, 32]));
    let w = tape.constant(Tensor::zeros(vec![32, 16, 3, 3]));
    let b = tape.constant(Tensor::zeros(vec![32]));
    let y = tape.conv2d(x, w, b, 2, Pad::Same).unwrap();
    assert_eq!(tape.value(y).shape, vec![2, 32, 16, 16]);
}

#[test]
fn conv2d_valid_2x2_kernel_example() {
    // input [[1,2],[3,4]], kernel [[1,0],[0,1]] valid -> [[5]]
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.conv2d(x, w, b, 1, Pad::Valid).unwrap();
    assert_eq!(tape.value(y).data, vec![5.0]);
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for i in 0..INSTANCES {
        let stride = 1 + i % 2;
        let x = rand_tensor(&[2, 3, 6, 5], &mut rng, -1.0, 1.0);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[4], &mut rng, -0.5, 0.5);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, bv, stride, Pad::Same).unwrap();
        let (out_h, out_w) = (6usize.div_ceil(stride), 5usize.div_ceil(stride));
        let pad_h = ((out_h - 1) * stride + 3).saturating_sub(6) / 2;
        let pad_w = ((out_w - 1) * stride + 3).saturating_sub(5) / 2;
        let expect = conv_oracle(&x, &w, &b, stride, pad_h, pad_w, out_h, out_w);
        for (a, e) in tape.value(y).data.iter().zip(&expect.data) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for i in 0..INSTANCES {
        let stride = 1 + i % 2;
        let x = rand_tensor(&[1, 2, 4, 4], &mut rng, -1.0, 1.0);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[3], &mut rng, -0.5, 0.5);
        fd_check(&[x, w, b], 1000 + i as u64, move |tape, vars| {
            tape.conv2d(vars[0], vars[1], vars[2], stride, Pad::Same).unwrap()
        });
    }
    // valid padding path
    let x = rand_tensor(&[1, 2, 5, 5], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&[2, 2, 2, 2], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[2], &mut rng, -0.5, 0.5);
    fd_check(&[x, w, b], 77, |tape, vars| {
        tape.conv2d(vars[0], vars[1], vars[2], 1, Pad::Valid).unwrap()
    });
}

#[test]
fn conv2d_is_linear_for_zero_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let x = rand_tensor(&[1, 2, 5, 5], &mut rng, -1.0, 1.0);
    let y = rand_tensor(&[1, 2, 5, 5], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng, -1.0, 1.0);
    let (a, b) = (0.7, -1.3);
    let zero_b = Tensor::zeros(vec![3]);

    let conv = |input: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.constant(input.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(zero_b.clone());
        let y = tape.conv2d(xv, wv, bv, 1, Pad::Same).unwrap();
        tape.value(y).clone()
    };
    let mixed = Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().zip(&y.data).map(|(&xv, &yv)| a * xv + b * yv).collect(),
    };
    let lhs = conv(&mixed);
    let (cx, cy) = (conv(&x), conv(&y));
    for i in 0..lhs.numel() {
        let rhs = a * cx.data[i] + b * cy.data[i];
        assert!((lhs.data[i] - rhs).abs() < 1e-10);
    }
}

#[test]
fn conv2d_rejects_channel_mismatch_and_bad_stride() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    let w = tape.constant(Tensor::zeros(vec![2, 4, 3, 3]));
    let b = tape.constant(Tensor::zeros(vec![2]));
    let err = tape.conv2d(x, w, b, 1, Pad::Same).unwrap_err();
    assert!(err.to_string().contains("channels"));
    let w2 = tape.constant(Tensor::zeros(vec![2, 3, 3, 3]));
    assert!(tape.conv2d(x, w2, b, 0, Pad::Same).is_err());
}

// ---- conv_transpose2d ------------------------------------------------------------

/// Scatter-accumulate oracle: every input pixel stamps the kernel into the
/// (implicitly padded) output.
fn convt_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, ww) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (_, cout, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let (out_h, out_w) = (h * stride, ww * stride);
    let mut out = Tensor::zeros(vec![n, cout, out_h, out_w]);
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    out.data[((ni * cout + co) * out_h + oy) * out_w + ox] = b.data[co];
                }
            }
        }
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..ww {
                    for co in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < out_h && (ox as usize) < out_w
                                {
                                    out.data[((ni * cout + co) * out_h + oy as usize) * out_w
                                        + ox as usize] += x.data[((ni * cin + ci) * h + iy) * ww + ix]
                                        * w.data[((ci * cout + co) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv_transpose_identity_kernel_at_stride_1() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
    w.data[4] = 1.0;
    let w = tape.constant(w);
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.conv_transpose2d(x, w, b, 1).unwrap();
    assert_eq!(tape.value(y).data, vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn conv_transpose_doubles_spatial_extent() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 8, 16, 16]));
    let w = tape.constant(Tensor::zeros(vec![8, 5, 3, 3]));
    let b = tape.constant(Tensor::zeros(vec![5]));
    let y = tape.conv_transpose2d(x, w, b, 2).unwrap();
    assert_eq!(tape.value(y).shape, vec![1, 5, 32, 32]);
}

#[test]
fn conv_transpose_scatter_example() {
    // single input value 2, 2x2 kernel of ones, stride 2 -> 2x2 of 2s
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
    let w = tape.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.conv_transpose2d(x, w, b, 2).unwrap();
    assert_eq!(tape.value(y).shape, vec![1, 1, 2, 2]);
    assert_eq!(tape.value(y).data, vec![2.0; 4]);
}

#[test]
fn conv_transpose_matches_scatter_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for i in 0..INSTANCES {
        let stride = 1 + i % 2;
        let pad = if stride == 1 { 1 } else { 1 }; // k=3 always pads 1
        let x = rand_tensor(&[2, 2, 3, 4], &mut rng, -1.0, 1.0);
        let w = rand_tensor(&[2, 3, 3, 3], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[3], &mut rng, -0.5, 0.5);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv_transpose2d(xv, wv, bv, stride).unwrap();
        let expect = convt_oracle(&x, &w, &b, stride, pad);
        assert_eq!(tape.value(y).shape, expect.shape);
        for (a, e) in tape.value(y).data.iter().zip(&expect.data) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_transpose_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for i in 0..INSTANCES {
        let stride = 1 + i % 2;
        let x = rand_tensor(&[1, 2, 3, 3], &mut rng, -1.0, 1.0);
        let w = rand_tensor(&[2, 2, 3, 3], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[2], &mut rng, -0.5, 0.5);
        fd_check(&[x, w, b], 2000 + i as u64, move |tape, vars| {
            tape.conv_transpose2d(vars[0], vars[1], vars[2], stride).unwrap()
        });
    }
}

// ---- pooling and resizing ------------------------------------------------------

#[test]
fn maxpool_examples_and_window_oracle() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.value(y).data, vec![4.0]);

    let x = tape.constant(Tensor::zeros(vec![1, 4, 64, 64]));
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.value(y).shape, vec![1, 4, 32, 32]);

    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..INSTANCES {
        let x = rand_tensor(&[1, 2, 4, 4], &mut rng, -2.0, 2.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.maxpool2(xv).unwrap();
        for c in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let vals = [
                        x.at4(0, c, 2 * oy, 2 * ox),
                        x.at4(0, c, 2 * oy, 2 * ox + 1),
                        x.at4(0, c, 2 * oy + 1, 2 * ox),
                        x.at4(0, c, 2 * oy + 1, 2 * ox + 1),
                    ];
                    let expect = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(tape.value(y).at4(0, c, oy, ox), expect);
                }
            }
        }
    }
}

#[test]
fn maxpool_rejects_odd_dims_and_breaks_ties_first_in_row_major_order() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 1, 3, 4]));
    assert!(tape.maxpool2(x).is_err());

    // all-equal window: gradient goes to the first element only
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(vec![1, 1, 2, 2], 3.0));
    let y = tape.maxpool2(x).unwrap();
    let loss = tape.sum_all(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data, vec![1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_gradients_match_finite_differences() {
    // Values spaced apart so the argmax never switches under the FD step.
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for _ in 0..INSTANCES {
        let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
        for i in (1..32).rev() {
            let j = rng.gen_range(0..=i);
            vals.swap(i, j);
        }
        let x = Tensor::new(vec![1, 2, 4, 4], vals).unwrap();
        fd_check(&[x], 3000, |tape, vars| tape.maxpool2(vars[0]).unwrap());
    }
}

#[test]
fn bilinear_examples_and_interpolation_oracle() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![1, 1, 4, 4], 5.0));
    let y = tape.bilinear_upsample(x, 8, 8).unwrap();
    assert!(tape.value(y).data.iter().all(|&v| (v - 5.0).abs() < 1e-12));

    let x = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap());
    let y = tape.bilinear_upsample(x, 3, 7).unwrap();
    assert!(tape.value(y).data.iter().all(|&v| v == 2.5));

    // 2x2 -> 4x4 against hand-evaluated half-pixel interpolation weights
    let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 1.0, 2.0]).unwrap());
    let y = tape.bilinear_upsample(x, 4, 4).unwrap();
    let expect = [
        0.0, 0.25, 0.75, 1.0, 0.25, 0.5, 1.0, 1.25, 0.75, 1.0, 1.5, 1.75, 1.0, 1.25, 1.75, 2.0,
    ];
    for (a, e) in tape.value(y).data.iter().zip(expect) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn bilinear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for _ in 0..INSTANCES {
        let x = rand_tensor(&[1, 2, 3, 3], &mut rng, -1.0, 1.0);
        fd_check(&[x], 4000, |tape, vars| tape.bilinear_upsample(vars[0], 6, 6).unwrap());
    }
}

#[test]
fn global_avg_pool_examples_and_gradients() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![2, 3, 4, 4], 0.7));
    let y = tape.global_avg_pool(x).unwrap();
    assert!(tape.value(y).data.iter().all(|&v| (v - 0.7).abs() < 1e-12));

    let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(y).data, vec![4.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(108);
    for _ in 0..INSTANCES {
        let x = rand_tensor(&[2, 2, 3, 3], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.global_avg_pool(xv).unwrap();
        for n in 0..2 {
            for c in 0..2 {
                let s: f64 = (0..9).map(|i| x.data[(n * 2 + c) * 9 + i]).sum();
                assert!((tape.value(y).data[n * 2 + c] - s / 9.0).abs() < 1e-12);
            }
        }
        fd_check(&[x], 5000, |tape, vars| tape.global_avg_pool(vars[0]).unwrap());
    }
}

#[test]
fn replicate_pad_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    for _ in 0..INSTANCES {
        let x = rand_tensor(&[1, 1, 3, 4], &mut rng, -1.0, 1.0);
        fd_check(&[x], 5500, |tape, vars| tape.replicate_pad1(vars[0]).unwrap());
    }
}

// ---- elementwise, dense, reductions ----------------------------------------------

#[test]
fn elementwise_trivial_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![2], vec![2.0, 3.0]).unwrap());
    let b = tape.constant(Tensor::new(vec![2], vec![4.0, 5.0]).unwrap());
    let h = tape.hadamard(a, b).unwrap();
    assert_eq!(tape.value(h).data, vec![8.0, 15.0]);

    let x = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s).data, vec![0.5]);

    // add_scaled with w = 0 is a bitwise identity
    let m = tape.constant(Tensor::new(vec![2], vec![9.0, -9.0]).unwrap());
    let y = tape.add_scaled(a, m, 0.0).unwrap();
    assert!(tape.value(y).bit_eq(tape.value(a)));
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    for i in 0..INSTANCES {
        let a = rand_tensor(&[2, 3], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[2, 3], &mut rng, 0.5, 1.5); // away from 0 for div
        let seed = 6000 + i as u64;
        fd_check(&[a.clone(), b.clone()], seed, |t, v| t.add(v[0], v[1]).unwrap());
        fd_check(&[a.clone(), b.clone()], seed, |t, v| t.sub(v[0], v[1]).unwrap());
        fd_check(&[a.clone(), b.clone()], seed, |t, v| t.hadamard(v[0], v[1]).unwrap());
        fd_check(&[a.clone(), b.clone()], seed, |t, v| t.div(v[0], v[1]).unwrap());
        fd_check(&[a.clone(), b.clone()], seed, |t, v| t.add_scaled(v[0], v[1], 0.4).unwrap());
        fd_check(&[a.clone(), b.clone()], seed, |t, v| t.hypot(v[0], v[1]).unwrap());
        fd_check(&[a.clone()], seed, |t, v| t.leaky_relu(v[0], 0.01));
        fd_check(&[b.clone()], seed, |t, v| t.relu(v[0]));
        fd_check(&[a.clone()], seed, |t, v| t.sigmoid(v[0]));
        fd_check(&[b.clone()], seed, |t, v| t.ln(v[0]));
        fd_check(&[a.clone()], seed, |t, v| t.clamp(v[0], -0.9, 0.9));
        fd_check(&[a.clone()], seed, |t, v| t.one_minus(v[0]));
        fd_check(&[a.clone()], seed, |t, v| t.add_const(v[0], 1.0));
        fd_check(&[a.clone()], seed, |t, v| t.mul_const(v[0], -2.5));
    }
}

#[test]
fn dense_and_broadcast_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    for i in 0..INSTANCES {
        let seed = 7000 + i as u64;
        let x = rand_tensor(&[2, 4], &mut rng, -1.0, 1.0);
        let w = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[3], &mut rng, -0.5, 0.5);
        fd_check(&[x, w, b], seed, |t, v| t.dense(v[0], v[1], v[2]).unwrap());

        let x4 = rand_tensor(&[2, 3, 2, 2], &mut rng, -1.0, 1.0);
        let s = rand_tensor(&[2, 3], &mut rng, -1.0, 1.0);
        fd_check(&[x4.clone(), s], seed, |t, v| t.scale_channels(v[0], v[1]).unwrap());

        let m = rand_tensor(&[2, 1, 2, 2], &mut rng, -1.0, 1.0);
        fd_check(&[x4, m], seed, |t, v| t.mul_spatial1(v[0], v[1]).unwrap());
    }
}

#[test]
fn concat_and_reduction_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    for i in 0..INSTANCES {
        let seed = 8000 + i as u64;
        let a = rand_tensor(&[1, 2, 3, 3], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[1, 3, 3, 3], &mut rng, -1.0, 1.0);
        fd_check(&[a.clone(), b], seed, |t, v| t.concat(&[v[0], v[1]]).unwrap());
        fd_check(&[a.clone()], seed, |t, v| t.sum_all(v[0]));
        fd_check(&[a.clone()], seed, |t, v| t.mean_all(v[0]));
        fd_check(&[a], seed, |t, v| t.sum_per_image(v[0]).unwrap());
    }
}

#[test]
fn concat_rejects_mismatched_spatial_dims() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let b = tape.constant(Tensor::zeros(vec![1, 2, 2, 2]));
    assert!(tape.concat(&[a, b]).is_err());
}

#[test]
fn training_dropout_gradient_is_the_saved_mask() {
    use rand::SeedableRng as _;
    let mut tape = Tape::new();
    tape.set_dropout_rng(ChaCha8Rng::seed_from_u64(5));
    let x = tape.leaf(Tensor::full(vec![64], 2.0));
    let y = tape.dropout(x, 0.5, true).unwrap();
    let loss = tape.sum_all(y);
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(x).unwrap();
    let out = tape.value(y);
    // survivors carry 1/(1-p) = 2, dropped elements carry 0; forward value
    // must equal x * mask with the same mask
    let mut kept = 0;
    for i in 0..64 {
        assert!(g.data[i] == 0.0 || g.data[i] == 2.0);
        assert_eq!(out.data[i], 2.0 * g.data[i]);
        if g.data[i] != 0.0 {
            kept += 1;
        }
    }
    assert!(kept > 10 && kept < 60);
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    // Same inputs and parameters through a mixed graph twice, comparing
    // every value and gradient bit for bit (the kernels may run on the
    // rayon pool, so this also covers the parallel reduction contract).
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(900);
        let x = rand_tensor(&[2, 3, 8, 8], &mut rng, -1.0, 1.0);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[4], &mut rng, -0.5, 0.5);
        let wt = rand_tensor(&[4, 2, 3, 3], &mut rng, -1.0, 1.0);
        let bt = rand_tensor(&[2], &mut rng, -0.5, 0.5);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let wv = tape.leaf(w);
        let bv = tape.leaf(b);
        let c = tape.conv2d(xv, wv, bv, 2, Pad::Same).unwrap();
        let a = tape.leaky_relu(c, 0.01);
        let wtv = tape.leaf(wt);
        let btv = tape.leaf(bt);
        let u = tape.conv_transpose2d(a, wtv, btv, 2).unwrap();
        let s = tape.sigmoid(u);
        let loss = tape.mean_all(s);
        let grads = tape.backward(loss).unwrap();
        let mut bits: Vec<u64> = tape.value(s).data.iter().map(|v| v.to_bits()).collect();
        for v in [xv, wv, bv, wtv, btv] {
            bits.extend(grads.get(v).unwrap().data.iter().map(|v| v.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}
