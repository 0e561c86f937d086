//! Depthwise convolution against a brute-force direct-convolution oracle.

mod common;

use common::random_tensor;
use petl_core::Tape;

/// Independent direct convolution: triple loop, bounds-checked, written
/// without reference to the tape implementation.
fn direct_conv(x: &[f64], n: usize, c: usize, w: &[f64], k: usize, bias: &[f64]) -> Vec<f64> {
    let pad_left = (k - 1) / 2;
    let mut out = vec![0.0; n * c];
    for pos in 0..n {
        for ch in 0..c {
            let mut acc = bias[ch];
            for j in 0..k {
                let src = pos as isize + j as isize - pad_left as isize;
                if src >= 0 && (src as usize) < n {
                    acc += x[src as usize * c + ch] * w[ch * k + j];
                }
            }
            out[pos * c + ch] = acc;
        }
    }
    out
}

#[test]
fn matches_brute_force_on_full_shape_grid() {
    let mut seed = 1000u64;
    for n in 1..=8usize {
        for c in 1..=4usize {
            for k in 1..=7usize {
                seed += 1;
                let x = random_tensor(&[n, c], seed);
                let w = random_tensor(&[c, k], seed + 50_000);
                let b = random_tensor(&[c], seed + 100_000);
                let expect = direct_conv(x.data(), n, c, w.data(), k, b.data());

                let mut tape = Tape::new();
                let xv = tape.leaf(&x);
                let wv = tape.leaf(&w);
                let bv = tape.leaf(&b);
                let y = tape.depthwise_conv1d(xv, wv, bv).unwrap();
                for (got, want) in tape.data(y).iter().zip(expect.iter()) {
                    assert!(
                        (got - want).abs() < 1e-12,
                        "n={n} c={c} k={k}: {got} vs {want}"
                    );
                }
            }
        }
    }
}

#[test]
fn matches_brute_force_random_7x3_k5() {
    let x = random_tensor(&[7, 3], 7);
    let w = random_tensor(&[3, 5], 8);
    let b = random_tensor(&[3], 9);
    let expect = direct_conv(x.data(), 7, 3, w.data(), 5, b.data());
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let wv = tape.leaf(&w);
    let bv = tape.leaf(&b);
    let y = tape.depthwise_conv1d(xv, wv, bv).unwrap();
    for (got, want) in tape.data(y).iter().zip(expect.iter()) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn batched_input_equals_per_sample_convolution() {
    let x = random_tensor(&[3, 6, 2], 77);
    let w = random_tensor(&[2, 4], 78);
    let b = random_tensor(&[2], 79);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let wv = tape.leaf(&w);
    let bv = tape.leaf(&b);
    let y = tape.depthwise_conv1d(xv, wv, bv).unwrap();
    let batched = tape.data(y).to_vec();
    for bi in 0..3 {
        let slice = &x.data()[bi * 12..(bi + 1) * 12];
        let expect = direct_conv(slice, 6, 2, w.data(), 4, b.data());
        assert_eq!(&batched[bi * 12..(bi + 1) * 12], expect.as_slice());
    }
}

#[test]
fn even_kernel_uses_asymmetric_same_padding() {
    // k=4: pad_left = 1, pad_right = 2
    let x = random_tensor(&[5, 1], 88);
    let w = random_tensor(&[1, 4], 89);
    let b = random_tensor(&[1], 90);
    let expect = direct_conv(x.data(), 5, 1, w.data(), 4, b.data());
    // first output touches x[-1..3) -> only j>=1 contribute
    let hand: f64 = b.data()[0]
        + w.data()[1] * x.data()[0]
        + w.data()[2] * x.data()[1]
        + w.data()[3] * x.data()[2];
    assert!((expect[0] - hand).abs() < 1e-12);

    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let wv = tape.leaf(&w);
    let bv = tape.leaf(&b);
    let y = tape.depthwise_conv1d(xv, wv, bv).unwrap();
    for (got, want) in tape.data(y).iter().zip(expect.iter()) {
        assert!((got - want).abs() < 1e-12);
    }
}
