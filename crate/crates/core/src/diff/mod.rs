//! Minimal reverse-mode differentiable tensor engine.
//!
//! The op set is exactly what the completion networks need: conv3d and its
//! transpose, matmul, softmax, concat, reshape, permute, relu, group norm,
//! masked L1, and elementwise add/scale/tanh/sum. Every op has an analytic
//! backward verified against the central finite-difference harness in
//! [`gradcheck`]. Forward passes are deterministic for a fixed input
//! regardless of thread count, and reductions over the key axis are
//! permutation-stable (see [`tape`]).

mod conv;
mod tape;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod params;

pub use params::{Bound, Param, Params};
pub use tape::{Gradients, Tape, Val};
pub use tensor::{sorted_sum, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced or received a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{gradcheck, FD_STEP, FD_TOLERANCE};
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv3d_scalar_example() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_f64_slice(&[1, 1, 1, 1, 1], &[2.0]).unwrap(), false).unwrap();
        let w = t.leaf(Tensor::from_f64_slice(&[1, 1, 1, 1, 1], &[3.0]).unwrap(), false).unwrap();
        let b = t.leaf(Tensor::from_f64_slice(&[1], &[1.0]).unwrap(), false).unwrap();
        let y = t.conv3d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(t.value(y).data(), &[7.0]);
    }

    #[test]
    fn conv3d_delta_kernel_is_identity() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(randn(&[1, 1, 4, 4, 4], 1), false).unwrap();
        let mut w = Tensor::zeros(&[1, 1, 3, 3, 3]);
        w.data_mut()[13] = 1.0; // center of the 3^3 kernel
        let w = t.leaf(w, false).unwrap();
        let y = t.conv3d(x, w, None, 1, 1).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());
    }

    #[test]
    fn conv3d_matches_naive_loop_oracle() {
        // random 1x2x4^3 input, k=2, stride 2, no pad
        let x = randn(&[1, 2, 4, 4, 4], 2);
        let w = randn(&[3, 2, 2, 2, 2], 3);
        let b = randn(&[3], 4);
        let mut t = Tape::<f64>::new();
        let xv = t.leaf(x.clone(), false).unwrap();
        let wv = t.leaf(w.clone(), false).unwrap();
        let bv = t.leaf(b.clone(), false).unwrap();
        let y = t.conv3d(xv, wv, Some(bv), 2, 0).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 3, 2, 2, 2]);

        // independent six-nested-loop reference
        let idx_x = |ci: usize, z: usize, yy: usize, xx: usize| ((ci * 4 + z) * 4 + yy) * 4 + xx;
        let idx_w = |co: usize, ci: usize, kd: usize, kh: usize, kw: usize| {
            (((co * 2 + ci) * 2 + kd) * 2 + kh) * 2 + kw
        };
        for co in 0..3 {
            for oz in 0..2 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        let mut acc = b.data()[co];
                        for ci in 0..2 {
                            for kd in 0..2 {
                                for kh in 0..2 {
                                    for kw in 0..2 {
                                        acc += x.data()[idx_x(ci, oz * 2 + kd, oy * 2 + kh, ox * 2 + kw)]
                                            * w.data()[idx_w(co, ci, kd, kh, kw)];
                                    }
                                }
                            }
                        }
                        let got = t.value(y).data()[((co * 2 + oz) * 2 + oy) * 2 + ox];
                        assert!((got - acc).abs() < 1e-12, "co={co} oz={oz} oy={oy} ox={ox}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x, w), y> == <x, conv_transpose(y, w)> for pad-free conv.
        for (stride, k, d) in [(1usize, 2usize, 4usize), (2, 2, 4), (2, 4, 6), (4, 4, 4)] {
            let o = (d - k) / stride + 1;
            let x = randn(&[1, 2, d, d, d], 10 + stride as u64);
            let w = randn(&[3, 2, k, k, k], 20 + k as u64);
            let y = randn(&[1, 3, o, o, o], 30 + d as u64);

            let mut t = Tape::<f64>::new();
            let xv = t.leaf(x.clone(), false).unwrap();
            let wv = t.leaf(w.clone(), false).unwrap();
            let yv = t.leaf(y.clone(), false).unwrap();
            let cx = t.conv3d(xv, wv, None, stride, 0).unwrap();
            let ty = t.conv3d_transpose(yv, wv, None, stride).unwrap();
            assert_eq!(t.value(ty).shape(), x.shape());

            let lhs: f64 = t.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(t.value(ty).data()).map(|(a, b)| a * b).sum();
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
            assert!(rel < 1e-4, "stride={stride} k={k}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_transpose_single_cell_broadcasts_weight() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_f64_slice(&[1, 1, 1, 1, 1], &[2.5]).unwrap(), false).unwrap();
        let w = t.leaf(randn(&[1, 1, 2, 2, 2], 40), false).unwrap();
        let y = t.conv3d_transpose(x, w, None, 2).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 2, 2, 2]);
        for (o, wv) in t.value(y).data().iter().zip(t.value(w).data()) {
            assert!((o - 2.5 * wv).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_zero_input_gives_bias() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(&[1, 1, 2, 2, 2]), false).unwrap();
        let w = t.leaf(randn(&[1, 1, 2, 2, 2], 41), false).unwrap();
        let b = t.leaf(Tensor::from_f64_slice(&[1], &[0.75]).unwrap(), false).unwrap();
        let y = t.conv3d_transpose(x, w, Some(b), 2).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn softmax_uniform_vector() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_f64_slice(&[1, 4], &[0.7; 4]).unwrap(), false).unwrap();
        let y = t.softmax(x, 1).unwrap();
        for &v in t.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(randn(&[5, 7], 50), false).unwrap();
        let y = t.softmax(x, 1).unwrap();
        for row in t.value(y).data().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(randn(&[2, 3], 60), false).unwrap();
        let b = t.leaf(randn(&[2, 5], 61), false).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 8]);
        // row 0 is a's row 0 then b's row 0
        assert_eq!(&t.value(c).data()[0..3], &t.value(a).data()[0..3]);
        assert_eq!(&t.value(c).data()[3..8], &t.value(b).data()[0..5]);
    }

    #[test]
    fn l1_masked_constant_difference() {
        let mut t = Tape::<f64>::new();
        let pred = t.leaf(Tensor::from_f64_slice(&[4], &[1.3; 4]).unwrap(), false).unwrap();
        let target = Tensor::from_f64_slice(&[4], &[1.0; 4]).unwrap();
        let mask = Tensor::from_f64_slice(&[4], &[1.0; 4]).unwrap();
        let loss = t.l1_masked(pred, &target, &mask).unwrap();
        assert!((t.value(loss).item().unwrap() - 0.3).abs() < 1e-12);

        let empty_mask = Tensor::zeros(&[4]);
        let zero = t.l1_masked(pred, &target, &empty_mask).unwrap();
        assert_eq!(t.value(zero).item().unwrap(), 0.0);
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(randn(&[2, 3], 70), true).unwrap();
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gradcheck_conv3d_l1_chain() {
        // loss = l1(conv3d(x, w) vs 0) on a 1x1x4^3 input
        let x = randn(&[1, 1, 4, 4, 4], 80);
        let w = randn(&[2, 1, 2, 2, 2], 81);
        let b = randn(&[2], 82);
        let target = Tensor::<f64>::zeros(&[1, 2, 2, 2, 2]);
        let mask = Tensor::<f64>::full(&[1, 2, 2, 2, 2], 1.0);
        let err = gradcheck(
            move |t, vs| {
                let y = t.conv3d(vs[0], vs[1], Some(vs[2]), 2, 0)?;
                t.l1_masked(y, &target, &mask)
            },
            &[x, w, b],
            FD_STEP,
        )
        .unwrap();
        assert!(err < FD_TOLERANCE, "err {err}");
    }

    #[test]
    fn gradcheck_softmax_matmul_chain() {
        // the patch-blending pattern: softmax(Q K^T / (d/2)) . V summed
        let q = randn(&[3, 4], 90);
        let k = randn(&[5, 4], 91);
        let v = randn(&[5, 6], 92);
        let err = gradcheck(
            |t, vs| {
                let kt = t.permute(vs[1], &[1, 0])?;
                let scores = t.matmul(vs[0], kt)?;
                let scaled = t.scale(scores, 1.0 / 2.0)?;
                let attn = t.softmax(scaled, 1)?;
                let blended = t.matmul(attn, vs[2])?;
                t.sum(blended)
            },
            &[q, k, v],
            FD_STEP,
        )
        .unwrap();
        assert!(err < FD_TOLERANCE, "err {err}");
    }

    #[test]
    fn gradcheck_every_op() {
        // conv3d with padding and stride
        let err = gradcheck(
            |t, vs| {
                let y = t.conv3d(vs[0], vs[1], Some(vs[2]), 2, 1)?;
                t.sum(y)
            },
            &[randn(&[2, 2, 4, 4, 4], 100), randn(&[3, 2, 4, 4, 4], 101), randn(&[3], 102)],
            FD_STEP,
        )
        .unwrap();
        assert!(err < FD_TOLERANCE, "conv3d err {err}");

        // conv3d_transpose
        let err = gradcheck(
            |t, vs| {
                let y = t.conv3d_transpose(vs[0], vs[1], Some(vs[2]), 2)?;
                t.sum(y)
            },
            &[randn(&[1, 2, 2, 2, 2], 103), randn(&[2, 3, 2, 2, 2], 104), randn(&[3], 105)],
            FD_STEP,
        )
        .unwrap();
        assert!(err < FD_TOLERANCE, "conv3d_transpose err {err}");

        // matmul
        let err = gradcheck(
            |t, vs| {
                let y = t.matmul(vs[0], vs[1])?;
                t.sum(y)
            },
            &[randn(&[3, 4], 106), randn(&[4, 2], 107)],
            FD_STEP,
        )
        .unwrap();
        assert!(err < FD_TOLERANCE, "matmul err {err}");

        // softmax (projected through a fixed matrix so the gradient is not zero)
        let weights = randn(&[5, 3], 200);
        let err = gradcheck(
            move |t, vs| {
                let y = t.softmax(vs[0], 1)?;
                let w = t.constant(weights.clone())?;
                let prod = t.matmul(y, w)?;
                let sq = t.tanh(prod)?;
                t.sum(sq)
            },
            &[randn(&[2, 5], 108)],
            FD_STEP,
        )
        .unwrap();
        assert!(err < FD_TOLERANCE, "softmax err {err}");

        // concat + permute + reshape + relu + tanh + add + scale
        let err = gradcheck(
            |t, vs| {
                let c = t.concat(&[vs[0], vs[1]], 1)?;
                let p = t.permute(c, &[1, 0])?;
                let r = t.reshape(p, &[2, 5])?;
                let a = t.relu(r)?;
                let b = t.tanh(r)?;
                let s = t.add(a, b)?;
                let sc = t.scale(s, 1.7)?;
                t.sum(sc)
            },
            &[randn(&[2, 2], 109), randn(&[2, 3], 110)],
            FD_STEP,
        )
        .unwrap();
        assert!(err < FD_TOLERANCE, "elementwise chain err {err}");

        // group_norm
        let err = gradcheck(
            |t, vs| {
                let y = t.group_norm(vs[0], vs[1], vs[2], 2)?;
                let sq = t.tanh(y)?;
                t.sum(sq)
            },
            &[randn(&[2, 4, 2, 2, 2], 111), randn(&[4], 112), randn(&[4], 113)],
            FD_STEP,
        )
        .unwrap();
        assert!(err < FD_TOLERANCE, "group_norm err {err}");

        // l1_masked
        let target = randn(&[6], 114);
        let mask = Tensor::from_f64_slice(&[6], &[1., 0., 1., 1., 0., 1.]).unwrap();
        let err = gradcheck(
            move |t, vs| t.l1_masked(vs[0], &target, &mask),
            &[randn(&[6], 115)],
            FD_STEP,
        )
        .unwrap();
        assert!(err < FD_TOLERANCE, "l1_masked err {err}");
    }

    #[test]
    fn nan_guard_names_the_op() {
        let mut t = Tape::<f64>::new();
        let big = t.leaf(Tensor::from_f64_slice(&[2], &[1e308, 1e308]).unwrap(), false).unwrap();
        let sum = t.add(big, big);
        match sum {
            Err(DiffError::NonFinite { op }) => assert_eq!(op, "add"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        // leaves refuse non-finite input outright
        assert!(matches!(
            t.leaf(Tensor::from_f64_slice(&[1], &[f64::INFINITY]).unwrap(), false),
            Err(DiffError::NonFinite { op: "leaf" })
        ));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut t = Tape::<f32>::new();
            let x = t.leaf(randn(&[2, 3, 4, 4, 4], 120).map(|v| v as f32), false).unwrap();
            let w = t.leaf(randn(&[4, 3, 2, 2, 2], 121).map(|v| v as f32), false).unwrap();
            let y = t.conv3d(x, w, None, 2, 0).unwrap();
            let q = t.reshape(y, &[8, 8]).unwrap();
            let s = t.softmax(q, 1).unwrap();
            let m = t.matmul(s, q).unwrap();
            t.value(m).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_leaf_receives_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(randn(&[2, 2], 130), true).unwrap();
        let b = t.leaf(randn(&[2, 2], 131), false).unwrap();
        let y = t.matmul(a, b).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.has(a));
        assert!(!g.has(b));
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // y = x + x => dy/dx = 2
        let mut t = Tape::<f64>::new();
        let x = t.leaf(randn(&[3], 140), true).unwrap();
        let y = t.add(x, x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 2.0));
    }
}
