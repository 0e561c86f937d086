//! Exact trainable-parameter accounting.
//!
//! Two independent routes produce every number: [`count_trainable`]
//! enumerates the store's trainable mask, while [`closed_form`] predicts
//! the same count from the method's hyperparameters. Their agreement
//! (head excluded on both sides) is a tested invariant. Budget inversion
//! picks the largest rank or prompt length that fits a parameter target.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::backbone::{backbone_param_count, BackboneConfig};
use crate::error::{Error, Result};
use crate::petl::{InjectionPlan, PetlMethod};
use crate::store::ParamStore;

/// Census of trainable parameters under a plan.
#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    pub method: PetlMethod,
    /// All non-buffer parameters in the store (backbone + head + method).
    pub total_params: usize,
    /// Everything in the trainable mask, head included.
    pub trainable_params: usize,
    /// Classification head share of the trainable mask.
    pub head_params: usize,
    /// Trainable parameters added/selected by the method (head excluded).
    pub method_params: usize,
    /// Closed-form prediction of `method_params`.
    pub closed_form: usize,
    /// Trainable counts grouped by module path.
    pub per_module: BTreeMap<String, usize>,
    /// Caveats about externally published rounded figures.
    pub note: Option<String>,
}

/// Module key for grouping: drops the field name and collapses
/// single-projection sub-paths (`ln`, `down`, `up`, `pw1`, `pw2`, `dw`,
/// `bn`) into their parent module.
fn module_key(id: &str) -> String {
    let mut parts: Vec<&str> = id.split('.').collect();
    if parts.len() > 1 {
        parts.pop();
    }
    while parts.len() > 1 {
        match *parts.last().unwrap() {
            "ln" | "down" | "up" | "pw1" | "pw2" | "dw" | "bn" => {
                parts.pop();
            }
            _ => break,
        }
    }
    parts.join(".")
}

/// Enumerates the trainable mask. Independent of the closed forms.
pub fn count_trainable(store: &ParamStore, plan: &InjectionPlan, cfg: &BackboneConfig) -> ParamReport {
    let mut per_module: BTreeMap<String, usize> = BTreeMap::new();
    let mut trainable = 0usize;
    let mut head = 0usize;
    for id in store.trainable_ids() {
        let numel = store.tensor(id).expect("trainable id exists").numel();
        trainable += numel;
        if id.starts_with("head.") {
            head += numel;
        }
        *per_module.entry(module_key(id)).or_default() += numel;
    }
    let method_params = trainable - head;
    let note = match plan.method {
        PetlMethod::Conformer { .. } => Some(
            "count is exact by enumeration; rounded published totals for this adapter family are approximations"
                .to_string(),
        ),
        _ => None,
    };
    ParamReport {
        method: plan.method,
        total_params: store.count_total(),
        trainable_params: trainable,
        head_params: head,
        method_params,
        closed_form: closed_form(&plan.method, cfg),
        per_module,
        note,
    }
}

/// Parameters the method itself adds or selects (head excluded).
pub fn closed_form(method: &PetlMethod, cfg: &BackboneConfig) -> usize {
    let d = cfg.d;
    let l = cfg.layers;
    match *method {
        PetlMethod::FullFineTune => backbone_param_count(cfg),
        PetlMethod::LinearProbe => 0,
        // per layer: q/k/v biases 3d, output bias d, ff biases (ff+1)d,
        // two norm shifts 2d
        PetlMethod::BitFit => l * d * (7 + cfg.ff_ratio),
        PetlMethod::Lora { r, ref targets, .. } => targets.count() * 2 * l * d * r,
        PetlMethod::PromptShallow { p } => p * d,
        PetlMethod::PromptDeep { p } | PetlMethod::Prefix { p } => p * d * l,
        // per site: norm 2d, down d*r + r, up r*d + d
        PetlMethod::Bottleneck { r, config, .. } => {
            config.sites_per_layer() * l * (2 * d * r + r + 3 * d)
        }
        // per site: norm 2d, pw1 d*2r + 2r, conv r*k + r, batch norm 2r,
        // pw2 r*d + d
        PetlMethod::Conformer { r, k, config } => {
            config.sites_per_layer() * l * (3 * d + 3 * d * r + r * k + 5 * r)
        }
    }
}

/// Trainable share of the full model, as a ratio of `full_total`
/// (normally the backbone parameter count at full scale).
pub fn percent_of_full(method_params: usize, full_total: usize) -> Result<f64> {
    if full_total == 0 {
        return Err(Error::Config("full model size is zero".into()));
    }
    Ok(100.0 * method_params as f64 / full_total as f64)
}

/// Formats a ratio to two significant figures, e.g. `0.29` or `100`.
pub fn format_two_sig_figs(value: f64) -> String {
    if value == 0.0 {
        return "0.0".to_string();
    }
    let magnitude = value.abs().log10().floor() as i32;
    let decimals = (1 - magnitude).max(0) as usize;
    format!("{value:.decimals$}")
}

/// Largest rank (adapters, LoRA) or prompt length with a closed form not
/// exceeding `target`. Errors when even the smallest setting is over
/// budget or the method has no free size hyperparameter.
pub fn solve_budget(family: &PetlMethod, target: usize, cfg: &BackboneConfig) -> Result<usize> {
    let with_hyper = |h: usize| -> Result<PetlMethod> {
        Ok(match *family {
            PetlMethod::Lora { alpha, s, targets, .. } => PetlMethod::Lora { r: h, alpha, s, targets },
            PetlMethod::Bottleneck { config, mode, .. } => PetlMethod::Bottleneck { r: h, config, mode },
            PetlMethod::Conformer { k, config, .. } => PetlMethod::Conformer { r: h, k, config },
            PetlMethod::PromptShallow { .. } => PetlMethod::PromptShallow { p: h },
            PetlMethod::PromptDeep { .. } => PetlMethod::PromptDeep { p: h },
            PetlMethod::Prefix { .. } => PetlMethod::Prefix { p: h },
            ref other => {
                return Err(Error::Config(format!(
                    "{} has no size hyperparameter to solve for",
                    other.name()
                )))
            }
        })
    };
    let cost = |h: usize| -> Result<usize> { Ok(closed_form(&with_hyper(h)?, cfg)) };
    if cost(1)? > target {
        return Err(Error::Config(format!(
            "target {target} is below the minimum size of {} ({} params at the smallest setting)",
            family.name(),
            cost(1)?
        )));
    }
    // exponential bracket, then binary search on the monotone closed form
    let mut hi = 1usize;
    while cost(hi)? <= target {
        hi *= 2;
        if hi > 1 << 30 {
            return Err(Error::Config("budget target is unreasonably large".into()));
        }
    }
    let mut lo = hi / 2; // feasible
    while lo + 1 < hi {
        let mid = lo + (hi - lo) / 2;
        if cost(mid)? <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Human summary table of a report, one line per module group.
pub fn render_report(report: &ParamReport, full_total: usize) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let pct = percent_of_full(report.method_params, full_total).unwrap_or(f64::NAN);
    writeln!(out, "method           : {}", report.method.name()).unwrap();
    writeln!(out, "method params    : {}", report.method_params).unwrap();
    writeln!(out, "closed form      : {}", report.closed_form).unwrap();
    writeln!(out, "head params      : {}", report.head_params).unwrap();
    writeln!(out, "trainable total  : {}", report.trainable_params).unwrap();
    writeln!(out, "store total      : {}", report.total_params).unwrap();
    writeln!(
        out,
        "percent of full  : {}% of {} params",
        format_two_sig_figs(pct),
        full_total
    )
    .unwrap();
    if let Some(note) = &report.note {
        writeln!(out, "note             : {note}").unwrap();
    }
    writeln!(out, "per-module breakdown:").unwrap();
    for (module, count) in &report.per_module {
        writeln!(out, "  {module:<32} {count}").unwrap();
    }
    out
}
