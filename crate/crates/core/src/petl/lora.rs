//! Low-rank adaptation of frozen projection weights.
//!
//! The frozen projection `x W` gains a trainable low-rank update:
//! `x W + s (x A) B` with `A [d, r]` Gaussian-initialized and `B [r, d]`
//! zero-initialized, so the update vanishes at step 0. Merging
//! `W + s A B` into a single weight reproduces the two-path forward.

use rand::Rng;

use crate::backbone::BackboneConfig;
use crate::error::{shape_err, Result};
use crate::store::{ParamRole, ParamStore};
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

use super::{LoraSite, PETL_INIT_STD};

pub(crate) fn id_a(layer: usize, target: char) -> String {
    format!("layer.{layer}.mhsa.lora.a_{target}")
}

pub(crate) fn id_b(layer: usize, target: char) -> String {
    format!("layer.{layer}.mhsa.lora.b_{target}")
}

pub(crate) fn init_lora<R: Rng>(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    layer: usize,
    site: LoraSite,
    rng: &mut R,
) -> Result<()> {
    let d = cfg.d;
    for (enabled, target) in [(site.targets.q, 'q'), (site.targets.v, 'v')] {
        if !enabled {
            continue;
        }
        let a = Tensor::randn(&[d, site.r], PETL_INIT_STD, rng);
        let b = Tensor::zeros(&[site.r, d]);
        store.insert(id_a(layer, target), a, ParamRole::Weight)?;
        store.insert(id_b(layer, target), b, ParamRole::Weight)?;
        store.mark_trainable(&id_a(layer, target))?;
        store.mark_trainable(&id_b(layer, target))?;
    }
    Ok(())
}

/// `x W + s (x A) B` on the tape. `w` stays frozen; only `a` and `b`
/// receive gradients.
pub fn lora_qv_forward(tape: &mut Tape, x: Value, w: Value, a: Value, b: Value, s: f64) -> Result<Value> {
    let base = tape.matmul(x, w)?;
    let delta = lora_delta(tape, x, a, b, s)?;
    tape.add(base, delta)
}

/// Just the scaled low-rank update `s (x A) B`.
pub fn lora_delta(tape: &mut Tape, x: Value, a: Value, b: Value, s: f64) -> Result<Value> {
    let down = tape.matmul(x, a)?;
    let up = tape.matmul(down, b)?;
    Ok(tape.scale(up, s))
}

/// Merged weight `W + s A B`, for equivalence checks and deployment
/// export. Operates on plain tensors, off-tape.
pub fn lora_merge(w: &Tensor, a: &Tensor, b: &Tensor, s: f64) -> Result<Tensor> {
    let (ws, as_, bs) = (w.shape(), a.shape(), b.shape());
    if ws.len() != 2 || as_.len() != 2 || bs.len() != 2 || ws[0] != as_[0] || as_[1] != bs[0] || bs[1] != ws[1]
    {
        return Err(shape_err(
            "lora_merge",
            format!("w {ws:?}, a {as_:?}, b {bs:?}"),
        ));
    }
    let (d_in, d_out, r) = (ws[0], ws[1], as_[1]);
    let mut merged = w.data().to_vec();
    for i in 0..d_in {
        for p in 0..r {
            let av = a.data()[i * r + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..d_out {
                merged[i * d_out + j] += s * av * b.data()[p * d_out + j];
            }
        }
    }
    Tensor::new(merged, ws)
}
