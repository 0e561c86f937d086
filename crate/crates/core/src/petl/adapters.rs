//! Bottleneck and conformer-style adapter modules.
//!
//! Both are residual branches that read a `[B, S, d]` sequence and emit a
//! same-shape correction, zero at initialization:
//!
//! - bottleneck: LN -> down-project to r -> ReLU -> up-project to d,
//!   up-projection zero-initialized;
//! - conformer: LN -> pointwise d->2r -> GLU gate to r -> depthwise conv
//!   (kernel k along the sequence) -> batch norm -> swish -> pointwise
//!   r->d, the final pointwise zero-initialized.
//!
//! Parameters live in the store under a site prefix such as
//! `layer.3.conformer.mhsa`; the forward functions read hyperparameters
//! back from the stored shapes.

use rand::Rng;

use crate::error::Result;
use crate::store::{ParamRole, ParamStore};
use crate::tape::{BnState, Tape, Value};
use crate::tensor::Tensor;

use super::PETL_INIT_STD;

pub(crate) const LN_EPS: f64 = 1e-5;

pub fn init_bottleneck<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    r: usize,
    rng: &mut R,
) -> Result<()> {
    let entries: [(&str, Tensor, ParamRole); 6] = [
        ("ln.gamma", Tensor::full(&[d], 1.0), ParamRole::NormScale),
        ("ln.beta", Tensor::zeros(&[d]), ParamRole::NormShift),
        ("down.weight", Tensor::randn(&[d, r], PETL_INIT_STD, rng), ParamRole::Weight),
        ("down.bias", Tensor::zeros(&[r]), ParamRole::Bias),
        ("up.weight", Tensor::zeros(&[r, d]), ParamRole::Weight),
        ("up.bias", Tensor::zeros(&[d]), ParamRole::Bias),
    ];
    for (name, tensor, role) in entries {
        let id = format!("{prefix}.{name}");
        store.insert(id.clone(), tensor, role)?;
        store.mark_trainable(&id)?;
    }
    Ok(())
}

pub fn init_conformer<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    r: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    let entries: [(&str, Tensor, ParamRole); 10] = [
        ("ln.gamma", Tensor::full(&[d], 1.0), ParamRole::NormScale),
        ("ln.beta", Tensor::zeros(&[d]), ParamRole::NormShift),
        ("pw1.weight", Tensor::randn(&[d, 2 * r], PETL_INIT_STD, rng), ParamRole::Weight),
        ("pw1.bias", Tensor::zeros(&[2 * r]), ParamRole::Bias),
        ("dw.weight", Tensor::randn(&[r, k], PETL_INIT_STD, rng), ParamRole::Weight),
        ("dw.bias", Tensor::zeros(&[r]), ParamRole::Bias),
        ("bn.gamma", Tensor::full(&[r], 1.0), ParamRole::NormScale),
        ("bn.beta", Tensor::zeros(&[r]), ParamRole::NormShift),
        ("pw2.weight", Tensor::zeros(&[r, d]), ParamRole::Weight),
        ("pw2.bias", Tensor::zeros(&[d]), ParamRole::Bias),
    ];
    for (name, tensor, role) in entries {
        let id = format!("{prefix}.{name}");
        store.insert(id.clone(), tensor, role)?;
        store.mark_trainable(&id)?;
    }
    // running statistics are state, not parameters
    store.insert(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[r]), ParamRole::Buffer)?;
    store.insert(format!("{prefix}.bn.running_var"), Tensor::full(&[r], 1.0), ParamRole::Buffer)?;
    Ok(())
}

/// LN -> down -> ReLU -> up over `[B, S, d]`.
pub fn bottleneck_forward(tape: &mut Tape, store: &ParamStore, x: Value, prefix: &str) -> Result<Value> {
    let gamma = tape.param(store, &format!("{prefix}.ln.gamma"))?;
    let beta = tape.param(store, &format!("{prefix}.ln.beta"))?;
    let normed = tape.layer_norm(x, gamma, beta, LN_EPS)?;

    let wd = tape.param(store, &format!("{prefix}.down.weight"))?;
    let bd = tape.param(store, &format!("{prefix}.down.bias"))?;
    let down = tape.matmul(normed, wd)?;
    let down = tape.add_bias(down, bd)?;
    let hidden = tape.relu(down);

    let wu = tape.param(store, &format!("{prefix}.up.weight"))?;
    let bu = tape.param(store, &format!("{prefix}.up.bias"))?;
    let up = tape.matmul(hidden, wu)?;
    tape.add_bias(up, bu)
}

/// LN -> pointwise(d->2r) -> GLU -> depthwise conv(k) -> batch norm ->
/// swish -> pointwise(r->d) over `[B, S, d]`.
///
/// Training mode folds the batch statistics into the stored running
/// buffers; eval mode normalizes with the stored values.
pub fn conformer_adapter_forward(
    tape: &mut Tape,
    store: &mut ParamStore,
    x: Value,
    prefix: &str,
    training: bool,
) -> Result<Value> {
    let gamma = tape.param(store, &format!("{prefix}.ln.gamma"))?;
    let beta = tape.param(store, &format!("{prefix}.ln.beta"))?;
    let normed = tape.layer_norm(x, gamma, beta, LN_EPS)?;

    let w1 = tape.param(store, &format!("{prefix}.pw1.weight"))?;
    let b1 = tape.param(store, &format!("{prefix}.pw1.bias"))?;
    let widened = tape.matmul(normed, w1)?;
    let widened = tape.add_bias(widened, b1)?;
    let gated = tape.glu(widened)?;

    let wk = tape.param(store, &format!("{prefix}.dw.weight"))?;
    let bk = tape.param(store, &format!("{prefix}.dw.bias"))?;
    let conv = tape.depthwise_conv1d(gated, wk, bk)?;

    let bn_gamma = tape.param(store, &format!("{prefix}.bn.gamma"))?;
    let bn_beta = tape.param(store, &format!("{prefix}.bn.beta"))?;
    let mean_id = format!("{prefix}.bn.running_mean");
    let var_id = format!("{prefix}.bn.running_var");
    let mut bn = BnState::new(store.tensor(&mean_id)?.numel());
    bn.running_mean.copy_from_slice(store.tensor(&mean_id)?.data());
    bn.running_var.copy_from_slice(store.tensor(&var_id)?.data());
    let normed_channels = tape.batch_norm1d(conv, bn_gamma, bn_beta, &mut bn, training)?;
    if training {
        store.tensor_mut(&mean_id)?.data_mut().copy_from_slice(&bn.running_mean);
        store.tensor_mut(&var_id)?.data_mut().copy_from_slice(&bn.running_var);
    }
    let activated = tape.swish(normed_channels);

    let w2 = tape.param(store, &format!("{prefix}.pw2.weight"))?;
    let b2 = tape.param(store, &format!("{prefix}.pw2.bias"))?;
    let up = tape.matmul(activated, w2)?;
    tape.add_bias(up, b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(99)
    }

    fn randomize_all(store: &mut ParamStore, std: f64) {
        let ids: Vec<String> = store.ids().cloned().collect();
        let mut r = rng();
        for id in ids {
            if store.role(&id).unwrap() == ParamRole::Buffer {
                continue;
            }
            let t = store.tensor_mut(&id).unwrap();
            let fresh = Tensor::randn(&t.shape().to_vec(), std, &mut r);
            t.data_mut().copy_from_slice(fresh.data());
        }
    }

    #[test]
    fn bottleneck_is_zero_at_init() {
        let mut store = ParamStore::new();
        init_bottleneck(&mut store, "layer.0.adapter.mhsa", 8, 3, &mut rng()).unwrap();
        let x = Tensor::randn(&[2, 5, 8], 1.0, &mut rng());
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = bottleneck_forward(&mut tape, &store, xv, "layer.0.adapter.mhsa").unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conformer_is_zero_at_init() {
        let mut store = ParamStore::new();
        init_conformer(&mut store, "layer.0.conformer.mhsa", 8, 4, 3, &mut rng()).unwrap();
        let x = Tensor::randn(&[2, 6, 8], 1.0, &mut rng());
        for training in [true, false] {
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let y =
                conformer_adapter_forward(&mut tape, &mut store, xv, "layer.0.conformer.mhsa", training)
                    .unwrap();
            assert!(tape.data(y).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conformer_k1_in_eval_mode_acts_per_token() {
        let d = 6;
        let r = 3;
        let mut store = ParamStore::new();
        init_conformer(&mut store, "a", d, r, 1, &mut rng()).unwrap();
        randomize_all(&mut store, 0.5);
        // fixed, non-trivial running stats
        store.tensor_mut("a.bn.running_mean").unwrap().data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        store.tensor_mut("a.bn.running_var").unwrap().data_mut().copy_from_slice(&[1.2, 0.7, 0.9]);

        let x = Tensor::randn(&[1, 5, d], 1.0, &mut rng());
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let whole = conformer_adapter_forward(&mut tape, &mut store, xv, "a", false).unwrap();
        let whole_out = tape.data(whole).to_vec();

        for tok in 0..5 {
            let row = Tensor::new(x.data()[tok * d..(tok + 1) * d].to_vec(), &[1, 1, d]).unwrap();
            let mut tape = Tape::new();
            let rv = tape.leaf(&row);
            let y = conformer_adapter_forward(&mut tape, &mut store, rv, "a", false).unwrap();
            for (a, b) in tape.data(y).iter().zip(&whole_out[tok * d..(tok + 1) * d]) {
                assert!((a - b).abs() < 1e-12, "token {tok}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conformer_eval_equivariant_to_batch_permutation_and_time_shift() {
        let d = 6;
        let r = 2;
        let k = 3;
        let mut store = ParamStore::new();
        init_conformer(&mut store, "a", d, r, k, &mut rng()).unwrap();
        randomize_all(&mut store, 0.4);

        // batch permutation (training mode: batch stats are permutation-invariant)
        let x = Tensor::randn(&[3, 4, d], 1.0, &mut rng());
        let perm = [2usize, 0, 1];
        let mut permuted = vec![0.0; x.numel()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 4 * d..(dst + 1) * 4 * d].copy_from_slice(&x.data()[src * 4 * d..(src + 1) * 4 * d]);
        }
        let xp = Tensor::new(permuted, &[3, 4, d]).unwrap();
        for training in [false, true] {
            let mut store_a = store.clone();
            let mut store_b = store.clone();
            let mut t1 = Tape::new();
            let v1 = t1.leaf(&x);
            let y1 = conformer_adapter_forward(&mut t1, &mut store_a, v1, "a", training).unwrap();
            let mut t2 = Tape::new();
            let v2 = t2.leaf(&xp);
            let y2 = conformer_adapter_forward(&mut t2, &mut store_b, v2, "a", training).unwrap();
            for (dst, &src) in perm.iter().enumerate() {
                let lhs = &t2.data(y2)[dst * 4 * d..(dst + 1) * 4 * d];
                let rhs = &t1.data(y1)[src * 4 * d..(src + 1) * 4 * d];
                for (a, b) in lhs.iter().zip(rhs) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }

        // time shift: interior tokens (>= floor(k/2) from the edges) match
        let s = 9;
        let xs = Tensor::randn(&[1, s, d], 1.0, &mut rng());
        let shift = 2usize;
        let mut shifted = vec![0.0; (s + shift) * d];
        shifted[shift * d..].copy_from_slice(xs.data());
        let xs2 = Tensor::new(shifted, &[1, s + shift, d]).unwrap();
        let mut t1 = Tape::new();
        let v1 = t1.leaf(&xs);
        let y1 = conformer_adapter_forward(&mut t1, &mut store.clone(), v1, "a", false).unwrap();
        let mut t2 = Tape::new();
        let v2 = t2.leaf(&xs2);
        let y2 = conformer_adapter_forward(&mut t2, &mut store.clone(), v2, "a", false).unwrap();
        let margin = k / 2;
        for tok in margin..s - margin {
            let lhs = &t1.data(y1)[tok * d..(tok + 1) * d];
            let rhs = &t2.data(y2)[(tok + shift) * d..(tok + shift + 1) * d];
            for (a, b) in lhs.iter().zip(rhs) {
                assert!((a - b).abs() < 1e-12, "token {tok}");
            }
        }
    }

    #[test]
    fn training_mode_updates_running_stats() {
        let mut store = ParamStore::new();
        init_conformer(&mut store, "a", 4, 2, 3, &mut rng()).unwrap();
        randomize_all(&mut store, 0.5);
        store.tensor_mut("a.bn.running_mean").unwrap().data_mut().fill(0.0);
        store.tensor_mut("a.bn.running_var").unwrap().data_mut().fill(1.0);
        let x = Tensor::randn(&[2, 5, 4], 1.0, &mut rng());
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        conformer_adapter_forward(&mut tape, &mut store, xv, "a", true).unwrap();
        let mean_after = store.tensor("a.bn.running_mean").unwrap().data().to_vec();
        assert!(mean_after.iter().any(|&v| v != 0.0));
    }
}
