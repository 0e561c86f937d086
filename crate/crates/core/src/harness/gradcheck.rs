//! Finite-difference verification of the full model gradient.
//!
//! Compares the autodiff gradient of the batch loss against central
//! differences on randomly chosen trainable coordinates. Runs with
//! batch-norm in eval mode so the loss is a deterministic function of the
//! parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, SpectrogramBatch};
use crate::error::{Error, Result};
use crate::petl::InjectionPlan;
use crate::store::{ParamRole, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Floor for the relative-error denominator: near-zero gradients are
/// compared on an absolute scale so finite-difference noise is not
/// amplified into false mismatches.
const REL_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// (id, coordinate, autodiff, central difference) of the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Result of probing one specific coordinate.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeOutcome {
    Checked { autodiff: f64, central_diff: f64, rel_err: f64 },
    /// The parameter is frozen: no gradient exists, which is not a
    /// mismatch.
    NoGradient,
}

pub fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(REL_FLOOR)
}

/// Re-initializes every trainable parameter with Gaussian noise. Zero-
/// initialized no-op modules have zero gradients upstream of the final
/// projection; checking at a random point exercises every path.
pub fn randomize_trainable(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = store.trainable_ids().cloned().collect();
    for id in ids {
        let t = store.tensor_mut(&id).expect("trainable id exists");
        let fresh = Tensor::randn(&t.shape().to_vec(), std, &mut rng);
        t.data_mut().copy_from_slice(fresh.data());
    }
}

fn batch_loss(
    backbone: &Backbone,
    store: &mut ParamStore,
    plan: &InjectionPlan,
    batch: &SpectrogramBatch,
) -> Result<f64> {
    let mut tape = Tape::new();
    let logits = backbone.logits(&mut tape, store, &batch.x, plan, false)?;
    let loss = tape.cross_entropy(logits, &batch.labels)?;
    Ok(tape.scalar(loss))
}

/// Checks `n_probes` random trainable coordinates. `corruption`
/// multiplies every autodiff gradient before comparison — a negative
/// control hook (any non-unit factor must make the check fail).
pub fn gradcheck_with_corruption(
    backbone: &Backbone,
    store: &mut ParamStore,
    plan: &InjectionPlan,
    batch: &SpectrogramBatch,
    n_probes: usize,
    seed: u64,
    corruption: Option<f64>,
) -> Result<GradCheckReport> {
    // autodiff gradients at the current point
    let mut tape = Tape::new();
    let logits = backbone.logits(&mut tape, store, &batch.x, plan, false)?;
    let loss = tape.cross_entropy(logits, &batch.labels)?;
    tape.backward(loss)?;
    tape.write_grads(store)?;

    let trainable: Vec<(String, usize)> = {
        let mut out = Vec::new();
        for id in store.trainable_ids() {
            let numel = store.tensor(id)?.numel();
            out.push((id.clone(), numel));
        }
        out
    };
    let total: usize = trainable.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Contract("plan has no trainable coordinates".into()));
    }

    let mut grads: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for (id, _) in &trainable {
        let g = store
            .tensor(id)?
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.tensor(id).unwrap().numel()]);
        grads.insert(id.clone(), g);
    }
    store.clear_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { probes: 0, max_rel_err: 0.0, worst: None };
    let factor = corruption.unwrap_or(1.0);
    for _ in 0..n_probes {
        let mut flat = rng.gen_range(0..total);
        let (id, coord) = {
            let mut found = None;
            for (id, numel) in &trainable {
                if flat < *numel {
                    found = Some((id.clone(), flat));
                    break;
                }
                flat -= numel;
            }
            found.expect("flat index within total")
        };

        let ad = grads[&id][coord] * factor;
        let orig = store.tensor(&id)?.data()[coord];
        store.tensor_mut(&id)?.data_mut()[coord] = orig + FD_STEP;
        let up = batch_loss(backbone, store, plan, batch)?;
        store.tensor_mut(&id)?.data_mut()[coord] = orig - FD_STEP;
        let down = batch_loss(backbone, store, plan, batch)?;
        store.tensor_mut(&id)?.data_mut()[coord] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);

        let err = rel_err(ad, fd);
        report.probes += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((id, coord, ad, fd));
        }
    }
    Ok(report)
}

/// Checks `n_probes` random trainable coordinates against central
/// differences and reports the maximum relative error.
pub fn gradcheck(
    backbone: &Backbone,
    store: &mut ParamStore,
    plan: &InjectionPlan,
    batch: &SpectrogramBatch,
    n_probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    gradcheck_with_corruption(backbone, store, plan, batch, n_probes, seed, None)
}

/// Probes one named coordinate; frozen parameters report
/// [`ProbeOutcome::NoGradient`] rather than a mismatch.
pub fn probe_coordinate(
    backbone: &Backbone,
    store: &mut ParamStore,
    plan: &InjectionPlan,
    batch: &SpectrogramBatch,
    id: &str,
    coord: usize,
) -> Result<ProbeOutcome> {
    if store.role(id)? == ParamRole::Buffer || !store.is_trainable(id) {
        return Ok(ProbeOutcome::NoGradient);
    }
    let mut tape = Tape::new();
    let logits = backbone.logits(&mut tape, store, &batch.x, plan, false)?;
    let loss = tape.cross_entropy(logits, &batch.labels)?;
    tape.backward(loss)?;
    let ad = tape.param_grad(id).map(|g| g[coord]).unwrap_or(0.0);

    let orig = store.tensor(id)?.data()[coord];
    store.tensor_mut(id)?.data_mut()[coord] = orig + FD_STEP;
    let up = batch_loss(backbone, store, plan, batch)?;
    store.tensor_mut(id)?.data_mut()[coord] = orig - FD_STEP;
    let down = batch_loss(backbone, store, plan, batch)?;
    store.tensor_mut(id)?.data_mut()[coord] = orig;
    let fd = (up - down) / (2.0 * FD_STEP);
    Ok(ProbeOutcome::Checked { autodiff: ad, central_diff: fd, rel_err: rel_err(ad, fd) })
}
