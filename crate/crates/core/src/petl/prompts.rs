//! Prompt tuning (shallow and deep) and key/value prefix tuning.
//!
//! Shallow prompts are inserted once, after the CLS token of the first
//! layer's input. Deep prompts replace the previous layer's prompt
//! positions with fresh embeddings at every layer. Prefix tuning leaves
//! the token sequence alone and instead prepends projections of a
//! per-layer embedding table to the attention keys and values.

use rand::Rng;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::store::{ParamRole, ParamStore};
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

use super::PETL_INIT_STD;

pub(crate) fn shallow_prompt_id() -> String {
    "prompt.shallow.embed".to_string()
}

pub(crate) fn deep_prompt_id(layer: usize) -> String {
    format!("layer.{layer}.prompt.embed")
}

pub(crate) fn prefix_id(layer: usize) -> String {
    format!("layer.{layer}.prefix.embed")
}

pub(crate) fn init_shallow_prompts<R: Rng>(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    p: usize,
    rng: &mut R,
) -> Result<()> {
    let id = shallow_prompt_id();
    store.insert(id.clone(), Tensor::randn(&[p, cfg.d], PETL_INIT_STD, rng), ParamRole::Embedding)?;
    store.mark_trainable(&id)
}

pub(crate) fn init_deep_prompts<R: Rng>(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    layer: usize,
    p: usize,
    rng: &mut R,
) -> Result<()> {
    let id = deep_prompt_id(layer);
    store.insert(id.clone(), Tensor::randn(&[p, cfg.d], PETL_INIT_STD, rng), ParamRole::Embedding)?;
    store.mark_trainable(&id)
}

pub(crate) fn init_prefix(store: &mut ParamStore, cfg: &BackboneConfig, layer: usize, p: usize) -> Result<()> {
    let id = prefix_id(layer);
    store.insert(id.clone(), Tensor::zeros(&[p, cfg.d]), ParamRole::Embedding)?;
    store.mark_trainable(&id)
}

/// Inserts `p` prompt rows between the CLS token and the patch tokens.
/// Valid only before the first layer.
pub fn attach_prompts_shallow(tape: &mut Tape, x: Value, prompts: Value, layer: usize) -> Result<Value> {
    if layer != 0 {
        return Err(Error::Contract(format!(
            "shallow prompts attach before layer 0 only, got layer {layer}"
        )));
    }
    splice_prompts(tape, x, prompts, None)
}

/// Replaces the prompt block with fresh embeddings at layer `i`; at
/// layer 0 the block is inserted (nothing to discard yet).
pub fn attach_prompts_deep(tape: &mut Tape, x: Value, prompts: Value, layer: usize) -> Result<Value> {
    let drop = if layer == 0 {
        None
    } else {
        Some(tape.shape(prompts)[0])
    };
    splice_prompts(tape, x, prompts, drop)
}

/// `[CLS | prompts | rest]`, optionally discarding `drop` rows that
/// followed the CLS token.
fn splice_prompts(tape: &mut Tape, x: Value, prompts: Value, drop: Option<usize>) -> Result<Value> {
    let shape = tape.shape(x);
    if shape.len() != 3 {
        return Err(Error::Contract(format!("expected [B, S, d] tokens, got {shape:?}")));
    }
    let (b, s) = (shape[0], shape[1]);
    let skip = 1 + drop.unwrap_or(0);
    if s < skip {
        return Err(Error::Contract(format!(
            "sequence of length {s} cannot drop {} prompt rows",
            skip - 1
        )));
    }
    let cls = tape.narrow(x, 1, 0, 1)?;
    let rest = tape.narrow(x, 1, skip, s - skip)?;
    let prompts_b = tape.broadcast_batch(prompts, b)?;
    tape.concat(&[cls, prompts_b, rest], 1)
}

/// Extends attention keys and values with projections of the prefix
/// embeddings: rows `0..p` of the result are `P W_k` / `P W_v` (no bias),
/// broadcast over the batch; queries are untouched.
pub fn prefix_kv(
    tape: &mut Tape,
    k: Value,
    v: Value,
    prefix: Value,
    w_k: Value,
    w_v: Value,
) -> Result<(Value, Value)> {
    let b = tape.shape(k)[0];
    let k_pre = tape.matmul(prefix, w_k)?;
    let v_pre = tape.matmul(prefix, w_v)?;
    let k_pre = tape.broadcast_batch(k_pre, b)?;
    let v_pre = tape.broadcast_batch(v_pre, b)?;
    let k_ext = tape.concat(&[k_pre, k], 1)?;
    let v_ext = tape.concat(&[v_pre, v], 1)?;
    Ok((k_ext, v_ext))
}
