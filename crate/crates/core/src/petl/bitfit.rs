//! Bias-only tuning: trains the additive terms of the encoder layers.

use crate::error::Result;
use crate::store::{ParamRole, ParamStore};

/// Marks trainable every encoder-layer parameter whose role is an
/// additive term: projection and feed-forward biases plus layer-norm
/// shifts. Multiplicative weights, norm scales, the patch embedding, and
/// the final norm stay frozen. The classification head is handled by the
/// injection step.
pub fn apply_bitfit_mask(store: &mut ParamStore) -> Result<()> {
    let ids: Vec<String> = store
        .iter()
        .filter(|(id, e)| {
            id.starts_with("layer.") && matches!(e.role, ParamRole::Bias | ParamRole::NormShift)
        })
        .map(|(id, _)| id.clone())
        .collect();
    for id in ids {
        store.mark_trainable(&id)?;
    }
    Ok(())
}
