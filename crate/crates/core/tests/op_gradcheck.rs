//! Finite-difference gradient checks for every differentiable tape op.
//!
//! Elementwise primitives must agree with central differences to 1e-6,
//! everything else to 1e-4.

mod common;

use common::{check_grads, random_tensor, weighted_sum};
use petl_core::{BnState, Tape, Tensor};

const ELEMENTWISE_TOL: f64 = 1e-6;
const GENERAL_TOL: f64 = 1e-4;

#[test]
fn matmul_gradcheck_random_3x4_4x2() {
    let mut inputs = vec![random_tensor(&[3, 4], 10), random_tensor(&[4, 2], 11)];
    check_grads(
        &mut inputs,
        |tape, vs| {
            let c = tape.matmul(vs[0], vs[1]).unwrap();
            weighted_sum(tape, c, 12)
        },
        1e-6,
    );
}

#[test]
fn matmul_gradcheck_batched_lhs() {
    let mut inputs = vec![random_tensor(&[2, 3, 4], 20), random_tensor(&[4, 5], 21)];
    check_grads(
        &mut inputs,
        |tape, vs| {
            let c = tape.matmul(vs[0], vs[1]).unwrap();
            weighted_sum(tape, c, 22)
        },
        1e-6,
    );
}

#[test]
fn bmm_gradcheck() {
    let mut inputs = vec![random_tensor(&[2, 2, 3, 4], 30), random_tensor(&[2, 2, 4, 2], 31)];
    check_grads(
        &mut inputs,
        |tape, vs| {
            let c = tape.bmm(vs[0], vs[1]).unwrap();
            weighted_sum(tape, c, 32)
        },
        GENERAL_TOL,
    );
}

#[test]
fn layer_norm_gradcheck_random_4x8() {
    let mut inputs = vec![
        random_tensor(&[4, 8], 40),
        random_tensor(&[8], 41),
        random_tensor(&[8], 42),
    ];
    check_grads(
        &mut inputs,
        |tape, vs| {
            let y = tape.layer_norm(vs[0], vs[1], vs[2], 1e-5).unwrap();
            weighted_sum(tape, y, 43)
        },
        1e-5,
    );
}

#[test]
fn glu_gradcheck_random_4x12() {
    let mut inputs = vec![random_tensor(&[4, 12], 50)];
    check_grads(
        &mut inputs,
        |tape, vs| {
            let y = tape.glu(vs[0]).unwrap();
            weighted_sum(tape, y, 51)
        },
        ELEMENTWISE_TOL,
    );
}

#[test]
fn elementwise_activations_gradcheck() {
    for (seed, f) in [
        (60u64, 0usize), // relu
        (61, 1),         // sigmoid
        (62, 2),         // gelu
        (63, 3),         // swish
    ] {
        let mut inputs = vec![random_tensor(&[5, 7], seed)];
        check_grads(
            &mut inputs,
            |tape: &mut Tape, vs| {
                let y = match f {
                    0 => tape.relu(vs[0]),
                    1 => tape.sigmoid(vs[0]),
                    2 => tape.gelu(vs[0]),
                    _ => tape.swish(vs[0]),
                };
                weighted_sum(tape, y, seed + 100)
            },
            ELEMENTWISE_TOL,
        );
    }
}

#[test]
fn softmax_rows_gradcheck() {
    let mut inputs = vec![random_tensor(&[4, 6], 70)];
    check_grads(
        &mut inputs,
        |tape, vs| {
            let y = tape.softmax_rows(vs[0]).unwrap();
            weighted_sum(tape, y, 71)
        },
        ELEMENTWISE_TOL,
    );
}

#[test]
fn depthwise_conv1d_gradcheck() {
    let mut inputs = vec![
        random_tensor(&[2, 7, 3], 80),
        random_tensor(&[3, 5], 81),
        random_tensor(&[3], 82),
    ];
    check_grads(
        &mut inputs,
        |tape, vs| {
            let y = tape.depthwise_conv1d(vs[0], vs[1], vs[2]).unwrap();
            weighted_sum(tape, y, 83)
        },
        GENERAL_TOL,
    );
}

#[test]
fn batch_norm_training_gradcheck() {
    let mut inputs = vec![
        random_tensor(&[3, 4, 2], 90),
        random_tensor(&[2], 91),
        random_tensor(&[2], 92),
    ];
    check_grads(
        &mut inputs,
        |tape, vs| {
            let mut state = BnState::new(2);
            let y = tape.batch_norm1d(vs[0], vs[1], vs[2], &mut state, true).unwrap();
            weighted_sum(tape, y, 93)
        },
        GENERAL_TOL,
    );
}

#[test]
fn batch_norm_eval_gradcheck() {
    let mut inputs = vec![
        random_tensor(&[3, 4, 2], 95),
        random_tensor(&[2], 96),
        random_tensor(&[2], 97),
    ];
    check_grads(
        &mut inputs,
        |tape, vs| {
            let mut state = BnState::new(2);
            state.running_mean = vec![0.3, -0.4];
            state.running_var = vec![1.5, 0.8];
            let y = tape.batch_norm1d(vs[0], vs[1], vs[2], &mut state, false).unwrap();
            weighted_sum(tape, y, 98)
        },
        GENERAL_TOL,
    );
}

#[test]
fn shape_ops_gradcheck() {
    let mut inputs = vec![random_tensor(&[2, 3, 4], 100), random_tensor(&[2, 2, 4], 101)];
    check_grads(
        &mut inputs,
        |tape, vs| {
            let swapped = tape.swap_axes(vs[0], 1, 2).unwrap();
            let back = tape.swap_axes(swapped, 1, 2).unwrap();
            let cat = tape.concat(&[back, vs[1]], 1).unwrap();
            let mid = tape.narrow(cat, 1, 1, 3).unwrap();
            let flat = tape.reshape(mid, &[2, 12]).unwrap();
            weighted_sum(tape, flat, 102)
        },
        GENERAL_TOL,
    );
}

#[test]
fn broadcast_and_bias_gradcheck() {
    let mut inputs = vec![random_tensor(&[3, 4], 110), random_tensor(&[4], 111)];
    check_grads(
        &mut inputs,
        |tape, vs| {
            let b = tape.broadcast_batch(vs[0], 2).unwrap();
            let y = tape.add_bias(b, vs[1]).unwrap();
            weighted_sum(tape, y, 112)
        },
        GENERAL_TOL,
    );
}

#[test]
fn patchify_gradcheck() {
    let mut inputs = vec![random_tensor(&[2, 4, 6], 120)];
    check_grads(
        &mut inputs,
        |tape, vs| {
            let p = tape.patchify(vs[0], 2, 3).unwrap();
            weighted_sum(tape, p, 121)
        },
        GENERAL_TOL,
    );
}

#[test]
fn cross_entropy_gradcheck() {
    let mut inputs = vec![random_tensor(&[4, 5], 130)];
    check_grads(
        &mut inputs,
        |tape, vs| tape.cross_entropy(vs[0], &[0, 2, 4, 1]).unwrap(),
        GENERAL_TOL,
    );
}

#[test]
fn add_mul_scale_mean_gradcheck() {
    let mut inputs = vec![random_tensor(&[3, 3], 140), random_tensor(&[3, 3], 141)];
    check_grads(
        &mut inputs,
        |tape, vs| {
            let s = tape.add(vs[0], vs[1]).unwrap();
            let p = tape.mul(s, vs[0]).unwrap();
            let sc = tape.scale(p, 0.7);
            tape.mean(sc)
        },
        GENERAL_TOL,
    );
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut inputs = vec![random_tensor(&[4, 6], 150), random_tensor(&[6, 3], 151)];
        inputs.iter_mut().for_each(|t| t.set_requires_grad(true));
        let mut tape = Tape::new();
        let a = tape.leaf(&inputs[0]);
        let b = tape.leaf(&inputs[1]);
        let c = tape.matmul(a, b).unwrap();
        let sm = tape.softmax_rows(c).unwrap();
        let loss = tape.sum(sm);
        tape.backward(loss).unwrap();
        (tape.grad(a).unwrap().to_vec(), tape.grad(b).unwrap().to_vec())
    };
    let (ga1, gb1) = run();
    let (ga2, gb2) = run();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ga1), bits(&ga2));
    assert_eq!(bits(&gb1), bits(&gb2));
}

#[test]
fn grads_flow_through_composite_pipeline() {
    // exercise a conformer-like chain end to end
    let mut inputs = vec![
        random_tensor(&[2, 5, 4], 160), // x
        random_tensor(&[4, 8], 161),    // pw1 (to 2r, r=4)
        random_tensor(&[4, 3], 162),    // dw kernel
        random_tensor(&[4], 163),       // dw bias
        random_tensor(&[4, 4], 164),    // pw2
    ];
    check_grads(
        &mut inputs,
        |tape, vs| {
            let h = tape.matmul(vs[0], vs[1]).unwrap();
            let gated = tape.glu(h).unwrap();
            let conv = tape.depthwise_conv1d(gated, vs[2], vs[3]).unwrap();
            let act = tape.swish(conv);
            let out = tape.matmul(act, vs[4]).unwrap();
            weighted_sum(tape, out, 165)
        },
        GENERAL_TOL,
    );
}

#[test]
fn identity_tensor_matmul_examples_hold_under_grad() {
    // d(sum(x . y))/dx = y
    let mut x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    x.set_requires_grad(true);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let yv = tape.constant(vec![4.0, 5.0, 6.0], &[3]).unwrap();
    let p = tape.mul(xv, yv).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(xv).unwrap(), &[4.0, 5.0, 6.0]);
}
