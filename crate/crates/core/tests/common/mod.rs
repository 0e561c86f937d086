//! Shared finite-difference oracle for gradient tests.
//!
//! Deliberately independent of the tape's backward pass: gradients are
//! estimated by re-running the forward closure with perturbed inputs.

use petl_core::{Tape, Tensor, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_H: f64 = 1e-6;

/// Relative error with a small floor so near-zero gradients compare on an
/// absolute scale instead of amplifying finite-difference noise.
pub fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-3)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut t = Tensor::new(data, shape).unwrap();
    t.set_requires_grad(true);
    t
}

/// Reduces a value to a scalar through a fixed random weighting, so no
/// output coordinate cancels out of the loss.
pub fn weighted_sum(tape: &mut Tape, v: Value, seed: u64) -> Value {
    let shape = tape.shape(v).to_vec();
    let numel: usize = shape.iter().product();
    let mut r = rng(seed);
    let w: Vec<f64> = (0..numel).map(|_| r.gen_range(0.25..1.75)).collect();
    let wv = tape.constant(w, &shape).unwrap();
    let p = tape.mul(v, wv).unwrap();
    tape.sum(p)
}

/// Checks autodiff gradients of every input coordinate against central
/// differences. `build` must be a pure function of the leaf values.
pub fn check_grads(
    inputs: &mut [Tensor],
    build: impl Fn(&mut Tape, &[Value]) -> Value,
    tol: f64,
) -> f64 {
    // autodiff pass
    let mut tape = Tape::new();
    let leaves: Vec<Value> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &leaves);
    tape.backward(loss).unwrap();
    let ad_grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&l| tape.grad(l).expect("input should receive a gradient").to_vec())
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<Value> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &leaves);
        tape.scalar(loss)
    };

    let mut max_err = 0.0f64;
    for ti in 0..inputs.len() {
        for j in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[j];
            inputs[ti].data_mut()[j] = orig + FD_H;
            let up = eval(inputs);
            inputs[ti].data_mut()[j] = orig - FD_H;
            let down = eval(inputs);
            inputs[ti].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * FD_H);
            let err = rel_err(ad_grads[ti][j], fd);
            assert!(
                err < tol,
                "input {ti} coord {j}: autodiff {} vs central diff {} (rel err {err:.3e}, tol {tol:.1e})",
                ad_grads[ti][j],
                fd
            );
            max_err = max_err.max(err);
        }
    }
    max_err
}
