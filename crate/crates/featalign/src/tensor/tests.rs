use super::*;
use crate::tensor::tape::Reduction;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], values: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(shape.to_vec(), values).unwrap()
}

// ---- matmul ------------------------------------------------------------

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let i2 = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = tape.matmul(i2, a).unwrap();
    assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_selector_row() {
    let mut tape = Tape::new();
    let a = tape.constant(&t(&[1, 2], &[1.0, 0.0]));
    let b = tape.constant(&t(&[2, 1], &[2.0, 5.0]));
    let p = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(p), &[2.0]);
}

#[test]
fn matmul_shape_mismatch_rejected() {
    let mut tape = Tape::new();
    let a = tape.constant(&t(&[2, 3], &[0.0; 6]));
    let b = tape.constant(&t(&[2, 2], &[0.0; 4]));
    assert!(tape.matmul(a, b).is_err());
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 2]);
    // grad w.r.t. a with b fixed
    let b2 = b.clone();
    let f = move |tape: &mut Tape, x: NodeId| {
        let bn = tape.constant(&b2);
        let p = tape.matmul(x, bn)?;
        let sq = tape.mul(p, p)?;
        Ok(tape.sum_all(sq))
    };
    assert!(grad_check(&f, &a, 1e-6).unwrap() < 1e-6);
    // grad w.r.t. b with a fixed
    let a2 = a.clone();
    let g = move |tape: &mut Tape, x: NodeId| {
        let an = tape.constant(&a2);
        let p = tape.matmul(an, x)?;
        let sq = tape.mul(p, p)?;
        Ok(tape.sum_all(sq))
    };
    assert!(grad_check(&g, &b, 1e-6).unwrap() < 1e-6);
}

// ---- conv2d ------------------------------------------------------------

/// Direct six-nested-loop cross-correlation used as an oracle.
fn conv_naive(
    input: &[f64],
    kernel: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (f, k): (usize, usize),
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; n * f * ho * wo];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += input[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                    * kernel[((fi * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((ni * f + fi) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_all_ones_sums_to_nine() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[1, 1, 3, 3], &[1.0; 9]));
    let k = tape.constant(&t(&[1, 1, 3, 3], &[1.0; 9]));
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y), &[9.0]);
}

#[test]
fn conv2d_stride2_pad1_shape() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[1, 1, 4, 4], &[0.0; 16]));
    let k = tape.constant(&t(&[1, 1, 3, 3], &[0.0; 9]));
    let y = tape.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
}

#[test]
fn conv2d_non_positive_extent_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[1, 1, 2, 2], &[0.0; 4]));
    let k = tape.constant(&t(&[1, 1, 3, 3], &[0.0; 9]));
    assert!(tape.conv2d(x, k, 1, 0).is_err());
}

#[test]
fn conv2d_matches_naive_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(n, c, h, w, f, k, s, p) in &[
        (1usize, 1usize, 5usize, 5usize, 2usize, 3usize, 1usize, 0usize),
        (2, 3, 8, 8, 4, 3, 2, 1),
        (1, 2, 6, 7, 3, 3, 1, 1),
        (2, 1, 4, 4, 1, 3, 2, 1),
    ] {
        let x = random_tensor(&mut rng, &[n, c, h, w]);
        let kr = random_tensor(&mut rng, &[f, c, k, k]);
        let mut tape = Tape::new();
        let xn = tape.constant(&x);
        let kn = tape.constant(&kr);
        let y = tape.conv2d(xn, kn, s, p).unwrap();
        let expect = conv_naive(&x.values, &kr.values, (n, c, h, w), (f, k), s, p);
        for (a, b) in tape.value(y).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "conv2d deviates from naive oracle");
        }
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_tensor(&mut rng, &[1, 2, 4, 4]);
    let k = random_tensor(&mut rng, &[2, 2, 3, 3]);
    let k2 = k.clone();
    let f_input = move |tape: &mut Tape, xin: NodeId| {
        let kn = tape.constant(&k2);
        let y = tape.conv2d(xin, kn, 1, 1)?;
        let sq = tape.mul(y, y)?;
        Ok(tape.sum_all(sq))
    };
    assert!(grad_check(&f_input, &x, 1e-6).unwrap() < 1e-5);
    let x2 = x.clone();
    let f_kernel = move |tape: &mut Tape, kin: NodeId| {
        let xn = tape.constant(&x2);
        let y = tape.conv2d(xn, kin, 2, 1)?;
        let sq = tape.mul(y, y)?;
        Ok(tape.sum_all(sq))
    };
    assert!(grad_check(&f_kernel, &k, 1e-6).unwrap() < 1e-5);
}

// ---- activations -------------------------------------------------------

#[test]
fn leaky_relu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[2], &[2.0, -1.0]));
    let y = tape.leaky_relu(x, 0.01).unwrap();
    assert_eq!(tape.value(y), &[2.0, -0.01]);
}

#[test]
fn leaky_relu_slope_bounds() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[1], &[1.0]));
    assert!(tape.leaky_relu(x, 0.0).is_err());
    assert!(tape.leaky_relu(x, 1.0).is_err());
}

#[test]
fn leaky_relu_gradient_in_negative_branch() {
    let f = |tape: &mut Tape, x: NodeId| {
        let y = tape.leaky_relu(x, 0.01)?;
        Ok(tape.sum_all(y))
    };
    let point = t(&[1], &[-3.0]);
    let num = finite_diff_gradient(&f, &point, 1e-6).unwrap();
    assert!((num[0] - 0.01).abs() < 1e-9);
    assert!(grad_check(&f, &point, 1e-6).unwrap() < 1e-9);
}

#[test]
fn arsinh_at_zero_and_one() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[2], &[0.0, 1.0]));
    let y = tape.arsinh(x);
    assert_eq!(tape.value(y)[0], 0.0);
    let expect = (1.0 + 2.0_f64.sqrt()).ln();
    assert!((tape.value(y)[1] - expect).abs() < 1e-15);
}

#[test]
fn sinh_inverts_arsinh() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[4], &[-10.0, -1.0, 0.5, 100.0]));
    let a = tape.arsinh(x);
    let s = tape.sinh(a);
    for (got, want) in tape.value(s).iter().zip(tape.value(x)) {
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn sinh_arsinh_identity_over_range() {
    for i in 0..=200 {
        let x = -100.0 + i as f64;
        let mut tape = Tape::new();
        let xn = tape.constant(&Tensor::scalar(x));
        let a = tape.arsinh(xn);
        let s = tape.sinh(a);
        assert!((tape.scalar_value(s) - x).abs() < 1e-9, "x={}", x);
    }
}

// ---- mse ---------------------------------------------------------------

#[test]
fn mse_of_equal_tensors_is_zero() {
    let mut tape = Tape::new();
    let a = tape.constant(&t(&[3], &[1.0, -2.0, 0.5]));
    let b = tape.constant(&t(&[3], &[1.0, -2.0, 0.5]));
    let l = tape.mse(a, b, Reduction::Sum).unwrap();
    assert_eq!(tape.scalar_value(l), 0.0);
}

#[test]
fn mse_hand_sum() {
    let mut tape = Tape::new();
    let a = tape.constant(&t(&[2], &[1.0, 2.0]));
    let b = tape.constant(&t(&[2], &[0.0, 0.0]));
    let l = tape.mse(a, b, Reduction::Sum).unwrap();
    assert_eq!(tape.scalar_value(l), 5.0);
    let m = tape.mse(a, b, Reduction::MeanAll).unwrap();
    assert_eq!(tape.scalar_value(m), 2.5);
}

#[test]
fn mse_shape_mismatch_rejected() {
    let mut tape = Tape::new();
    let a = tape.constant(&t(&[2], &[1.0, 2.0]));
    let b = tape.constant(&t(&[3], &[0.0; 3]));
    assert!(tape.mse(a, b, Reduction::Sum).is_err());
}

#[test]
fn mse_gradient_is_two_delta() {
    let mut tape = Tape::new();
    let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
    let b = tape.constant(&t(&[2], &[0.0, 0.0]));
    let l = tape.mse(a, b, Reduction::Sum).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[2.0, 4.0]);
    let f = |tape: &mut Tape, x: NodeId| {
        let b = tape.constant(&t(&[2], &[0.0, 0.0]));
        tape.mse(x, b, Reduction::Sum)
    };
    assert!(grad_check(&f, &t(&[2], &[1.0, 2.0]), 1e-6).unwrap() < 1e-8);
}

// ---- backward ----------------------------------------------------------

#[test]
fn backward_square_at_three() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(3.0));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_linear_regression_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w = random_tensor(&mut rng, &[4, 3]);
    let x = random_tensor(&mut rng, &[2, 4]);
    let target = random_tensor(&mut rng, &[2, 3]);
    let (x2, t2) = (x.clone(), target.clone());
    let f = move |tape: &mut Tape, wn: NodeId| {
        let xn = tape.constant(&x2);
        let tn = tape.constant(&t2);
        let y = tape.matmul(xn, wn)?;
        tape.mse(y, tn, Reduction::Sum)
    };
    assert!(grad_check(&f, &w, 1e-6).unwrap() < 1e-6);
}

#[test]
fn backward_twice_doubles_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(3.0));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[12.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
    let y = tape.mul(x, x).unwrap();
    assert!(matches!(tape.backward(y), Err(crate::Error::NonScalarLoss(_))));
}

#[test]
fn backward_unreachable_leaf_gets_zero_grad() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(3.0));
    let orphan = tape.leaf(&Tensor::scalar(1.0));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(orphan).unwrap(), &[0.0]);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_tensor(&mut rng, &[5, 5]);
        let x = random_tensor(&mut rng, &[3, 5]);
        let mut tape = Tape::new();
        let wn = tape.leaf(&w);
        let xn = tape.constant(&x);
        let y = tape.matmul(xn, wn).unwrap();
        let a = tape.arsinh(y);
        let loss = tape.sum_all(a);
        tape.backward(loss).unwrap();
        tape.grad(wn).unwrap().to_vec()
    };
    let g1 = run();
    let g2 = run();
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(3.0));
    let d = tape.detach(x);
    let sq = tape.mul(d, d).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0]);
}

// ---- grad_check --------------------------------------------------------

#[test]
fn grad_check_constant_gradient() {
    let f = |tape: &mut Tape, x: NodeId| Ok(tape.sum_all(x));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_tensor(&mut rng, &[4]);
    assert!(grad_check(&f, &p, 1e-4).unwrap() < 1e-10);
}

#[test]
fn grad_check_composed_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = random_tensor(&mut rng, &[4, 3]);
    let target = random_tensor(&mut rng, &[2, 3]);
    let f = move |tape: &mut Tape, x: NodeId| {
        let wn = tape.constant(&w);
        let h = tape.matmul(x, wn)?;
        let a = tape.arsinh(h);
        let tn = tape.constant(&target);
        tape.mse(a, tn, Reduction::Sum)
    };
    let p = random_tensor(&mut ChaCha8Rng::seed_from_u64(10), &[2, 4]);
    assert!(grad_check(&f, &p, 1e-6).unwrap() < 1e-5);
}

#[test]
fn grad_check_detects_corrupted_backward_rule() {
    // pretend the gradient of sum(x^2) is 3x instead of 2x
    let f = |tape: &mut Tape, x: NodeId| {
        let sq = tape.mul(x, x)?;
        Ok(tape.sum_all(sq))
    };
    let p = t(&[3], &[1.0, -2.0, 0.7]);
    let numeric = finite_diff_gradient(&f, &p, 1e-6).unwrap();
    let corrupted: Vec<f64> = p.values.iter().map(|v| 3.0 * v).collect();
    assert!(max_rel_err(&corrupted, &numeric) > 1e-2);
}

#[test]
fn grad_check_rejects_non_positive_step() {
    let f = |tape: &mut Tape, x: NodeId| Ok(tape.sum_all(x));
    assert!(finite_diff_gradient(&f, &Tensor::scalar(1.0), 0.0).is_err());
}

// ---- whole-op gradient sweep ------------------------------------------

/// Every registered op passes grad_check on randomized small instances.
#[test]
fn gradient_sweep_over_all_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..20 {
        let rows = rng.gen_range(1..=4);
        let cols = rng.gen_range(1..=4);
        let inner = rng.gen_range(1..=4);
        let seed = rng.gen::<u64>();

        let b = random_tensor(&mut rng, &[inner, cols]);
        let bias = random_tensor(&mut rng, &[cols]);
        let other = random_tensor(&mut rng, &[2, rows]);
        let f = move |tape: &mut Tape, x: NodeId| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let bn = tape.constant(&b);
            let biasn = tape.constant(&bias);
            let on = tape.constant(&other);
            let mut h = tape.matmul(x, bn)?;
            h = tape.add_bias(h, biasn)?;
            match r.gen_range(0..6) {
                0 => h = tape.arsinh(h),
                1 => h = tape.leaky_relu(h, 0.01)?,
                2 => h = tape.sinh(h),
                3 => h = tape.exp(h),
                4 => {
                    let m = tape.matmul(on, x)?;
                    let s = tape.sum_all(m);
                    h = tape.scale_by_scalar(h, s)?;
                }
                _ => {
                    let neg = tape.neg(h);
                    h = tape.mul(h, neg)?;
                }
            }
            let rsum = tape.sum_cols(h)?;
            let rs = tape.sum_all(rsum);
            let cs = tape.sum_rows(h)?;
            let cssum = tape.sum_all(cs);
            let tot = tape.add(rs, cssum)?;
            let scaled = tape.scale(tot, 0.5);
            Ok(tape.add_const(scaled, 0.0))
        };
        let p = random_tensor(&mut rng, &[rows, inner]);
        let err = grad_check(&f, &p, 1e-6).unwrap();
        assert!(err < 1e-5, "trial {}: rel err {}", trial, err);
    }
}

#[test]
fn gradient_sweep_concat_slice_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let rows = rng.gen_range(1..=3);
        let ca = rng.gen_range(1..=3);
        let cb = rng.gen_range(1..=3);
        let b = random_tensor(&mut rng, &[rows, cb]);
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..ca + cb)).collect();
        let f = move |tape: &mut Tape, x: NodeId| {
            let bn = tape.constant(&b);
            let cat = tape.concat_cols(x, bn)?;
            let ce = tape.softmax_cross_entropy(cat, &labels)?;
            let sl = tape.slice_cols(cat, 0, ca)?;
            let sq = tape.mul(sl, sl)?;
            let s = tape.sum_all(sq);
            tape.add(ce, s)
        };
        let p = random_tensor(&mut rng, &[rows, ca]);
        let err = grad_check(&f, &p, 1e-6).unwrap();
        assert!(err < 1e-5, "rel err {}", err);
    }
}

#[test]
fn gradient_sweep_conv_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let c = rng.gen_range(1..=2);
        let f_ = rng.gen_range(1..=2);
        let h = rng.gen_range(3..=6);
        let w = rng.gen_range(3..=6);
        let stride = rng.gen_range(1..=2);
        let k = random_tensor(&mut rng, &[f_, c, 3, 3]);
        let fcheck = move |tape: &mut Tape, x: NodeId| {
            let kn = tape.constant(&k);
            let y = tape.conv2d(x, kn, stride, 1)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        };
        let p = random_tensor(&mut rng, &[1, c, h, w]);
        let err = grad_check(&fcheck, &p, 1e-6).unwrap();
        assert!(err < 1e-5, "rel err {}", err);
    }
}

// ---- second order (double backprop through grad_nodes) -----------------

#[test]
fn second_order_gradient_through_grad_nodes() {
    // f(x) = x^3; g = df/dx = 3x^2 built as graph; d(g)/dx = 6x
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(2.0));
    let x2 = tape.mul(x, x).unwrap();
    let x3 = tape.mul(x2, x).unwrap();
    let loss = tape.sum_all(x3);
    let g = tape.grad_nodes(loss, &[x]).unwrap()[0];
    assert!((tape.value(g)[0] - 12.0).abs() < 1e-12);
    let gsum = tape.sum_all(g);
    tape.backward(gsum).unwrap();
    assert!((tape.grad(x).unwrap()[0] - 12.0).abs() < 1e-12);
}

#[test]
fn second_order_through_matmul_adjoint() {
    // L(w) = || (z - x w)  ||^2 ; inner grad wrt x, then differentiate
    // the updated x wrt w. Compare against finite differences over w.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x0 = random_tensor(&mut rng, &[1, 3]);
    let z = random_tensor(&mut rng, &[1, 2]);
    let f = move |tape: &mut Tape, w: NodeId| {
        let xn = tape.constant(&x0);
        let zn = tape.constant(&z);
        let y = tape.matmul(xn, w)?;
        let l = tape.mse(zn, y, Reduction::Sum)?;
        let gx = tape.grad_nodes(l, &[xn])?[0];
        // one extraction step: x1 = x0 - gx (gradient flows through w)
        let x1 = tape.sub(xn, gx)?;
        let sq = tape.mul(x1, x1)?;
        Ok(tape.sum_all(sq))
    };
    let w = random_tensor(&mut rng, &[3, 2]);
    let err = grad_check(&f, &w, 1e-6).unwrap();
    assert!(err < 1e-5, "second-order rel err {}", err);
}
