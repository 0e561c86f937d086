//! Parameter-efficient adaptation methods and their injection plans.
//!
//! Every method follows the same lifecycle: [`build_plan`] turns a
//! [`PetlMethod`] into a per-layer, per-site [`InjectionPlan`];
//! [`inject`] freezes the backbone, creates the method's parameters in
//! the store, and marks exactly those (plus the classification head)
//! trainable. The backbone consults the plan during the forward pass.
//!
//! Methods that add modules (LoRA, bottleneck, conformer adapters) are
//! no-ops at initialization: their last projection starts at zero, so
//! step-0 logits equal the frozen model's logits exactly. Bias-only,
//! prompt, and prefix tuning alter the function immediately and are
//! exempt from that contract.

mod adapters;
mod bitfit;
pub(crate) mod lora;
pub(crate) mod prompts;

pub use adapters::{bottleneck_forward, conformer_adapter_forward, init_bottleneck, init_conformer};
pub use bitfit::apply_bitfit_mask;
pub use lora::{lora_delta, lora_merge, lora_qv_forward};
pub use prompts::{attach_prompts_deep, attach_prompts_shallow, prefix_kv};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{ids, BackboneConfig};
use crate::error::{Error, Result};
use crate::store::ParamStore;

/// Gaussian std for freshly created adaptation parameters.
pub const PETL_INIT_STD: f64 = 0.02;

/// Which projections LoRA updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LoraTargets {
    pub q: bool,
    pub v: bool,
}

impl Default for LoraTargets {
    fn default() -> Self {
        LoraTargets { q: true, v: true }
    }
}

impl LoraTargets {
    pub fn count(&self) -> usize {
        usize::from(self.q) + usize::from(self.v)
    }
}

/// Adapter placement: one site per layer (attention only) or two
/// (attention and feed-forward).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AdapterConfig {
    Pfeiffer,
    Houlsby,
}

impl AdapterConfig {
    pub fn sites_per_layer(&self) -> usize {
        match self {
            AdapterConfig::Pfeiffer => 1,
            AdapterConfig::Houlsby => 2,
        }
    }
}

/// Whether an adapter branches off the sub-layer's normalized input
/// (parallel) or the raw residual stream entering the block (sequential).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AdapterMode {
    Parallel,
    Sequential,
}

/// An adaptation method with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum PetlMethod {
    FullFineTune,
    LinearProbe,
    BitFit,
    Lora {
        r: usize,
        alpha: f64,
        s: f64,
        targets: LoraTargets,
    },
    PromptShallow {
        p: usize,
    },
    PromptDeep {
        p: usize,
    },
    Prefix {
        p: usize,
    },
    Bottleneck {
        r: usize,
        config: AdapterConfig,
        mode: AdapterMode,
    },
    Conformer {
        r: usize,
        k: usize,
        config: AdapterConfig,
    },
}

impl PetlMethod {
    /// Operating-point defaults: rank 6 for LoRA (scale 8), 12 for the
    /// bottleneck adapter, 8 for the conformer adapter (kernel 8 for
    /// audio-style tasks), 300/25/24 prompts for shallow/deep/prefix.
    pub fn lora_default() -> Self {
        PetlMethod::Lora { r: 6, alpha: 16.0, s: 8.0, targets: LoraTargets::default() }
    }

    pub fn bottleneck_default() -> Self {
        PetlMethod::Bottleneck { r: 12, config: AdapterConfig::Pfeiffer, mode: AdapterMode::Parallel }
    }

    pub fn conformer_default() -> Self {
        PetlMethod::Conformer { r: 8, k: 8, config: AdapterConfig::Pfeiffer }
    }

    pub fn prompt_shallow_default() -> Self {
        PetlMethod::PromptShallow { p: 300 }
    }

    pub fn prompt_deep_default() -> Self {
        PetlMethod::PromptDeep { p: 25 }
    }

    pub fn prefix_default() -> Self {
        PetlMethod::Prefix { p: 24 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PetlMethod::FullFineTune => "full",
            PetlMethod::LinearProbe => "linear",
            PetlMethod::BitFit => "bitfit",
            PetlMethod::Lora { .. } => "lora",
            PetlMethod::PromptShallow { .. } => "prompt-shallow",
            PetlMethod::PromptDeep { .. } => "prompt-deep",
            PetlMethod::Prefix { .. } => "prefix",
            PetlMethod::Bottleneck { .. } => "bottleneck",
            PetlMethod::Conformer { .. } => "conformer",
        }
    }

    /// Methods whose initialization leaves the model function unchanged.
    pub fn is_noop_at_init(&self) -> bool {
        matches!(
            self,
            PetlMethod::Lora { .. } | PetlMethod::Bottleneck { .. } | PetlMethod::Conformer { .. }
        )
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            PetlMethod::Lora { r, s, .. } => {
                if r < 1 {
                    return bad(format!("lora rank must be >= 1, got {r}"));
                }
                if s <= 0.0 {
                    return bad(format!("lora scale must be positive, got {s}"));
                }
            }
            PetlMethod::PromptShallow { p } | PetlMethod::PromptDeep { p } | PetlMethod::Prefix { p } => {
                if p < 1 {
                    return bad(format!("prompt length must be >= 1, got {p}"));
                }
            }
            PetlMethod::Bottleneck { r, .. } => {
                if r < 1 {
                    return bad(format!("bottleneck dim must be >= 1, got {r}"));
                }
            }
            PetlMethod::Conformer { r, k, .. } => {
                if r < 1 {
                    return bad(format!("bottleneck dim must be >= 1, got {r}"));
                }
                if k < 1 {
                    return bad(format!("kernel size must be >= 1, got {k}"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// LoRA attachment for one layer.
#[derive(Debug, Clone, Copy)]
pub struct LoraSite {
    pub r: usize,
    pub s: f64,
    pub targets: LoraTargets,
}

/// Adapter module flavor at a site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Bottleneck { r: usize },
    Conformer { r: usize, k: usize },
}

/// Per-layer attachment points.
#[derive(Debug, Clone, Copy, Default)]
pub struct LayerSites {
    pub lora: Option<LoraSite>,
    pub kv_prefix: Option<usize>,
    pub deep_prompt: Option<usize>,
    pub mhsa_parallel: Option<AdapterKind>,
    pub mhsa_sequential: Option<AdapterKind>,
    pub ff_parallel: Option<AdapterKind>,
    pub ff_sequential: Option<AdapterKind>,
}

/// Where every module attaches and which parameters become trainable.
#[derive(Debug, Clone)]
pub struct InjectionPlan {
    pub method: PetlMethod,
    pub shallow_prompt_len: Option<usize>,
    pub layers: Vec<LayerSites>,
}

impl InjectionPlan {
    /// Plan with no attachments (the frozen baseline / linear probing).
    pub fn none(cfg: &BackboneConfig) -> Self {
        InjectionPlan {
            method: PetlMethod::LinearProbe,
            shallow_prompt_len: None,
            layers: vec![LayerSites::default(); cfg.layers],
        }
    }

    pub fn sites(&self, layer: usize) -> &LayerSites {
        &self.layers[layer]
    }

    /// Sequence length each layer sees, CLS included.
    pub fn seq_len_at(&self, layer: usize, cfg: &BackboneConfig) -> usize {
        let base = cfg.seq_len() + self.shallow_prompt_len.unwrap_or(0);
        base + self.layers[layer].deep_prompt.unwrap_or(0)
    }
}

/// Site names used in parameter id paths.
pub(crate) const SITE_MHSA: &str = "mhsa";
pub(crate) const SITE_FF: &str = "ff";

pub(crate) fn adapter_prefix(layer: usize, kind: AdapterKind, site: &str) -> String {
    match kind {
        AdapterKind::Bottleneck { .. } => format!("layer.{layer}.adapter.{site}"),
        AdapterKind::Conformer { .. } => format!("layer.{layer}.conformer.{site}"),
    }
}

/// Builds the deterministic placement plan for a method.
///
/// Pfeiffer places one adapter per layer at the attention site; Houlsby
/// adds a second at the feed-forward site. Sequential placement is
/// supported for the bottleneck adapter only.
pub fn build_plan(method: PetlMethod, cfg: &BackboneConfig) -> Result<InjectionPlan> {
    method.validate()?;
    cfg.validate()?;
    let mut layers = vec![LayerSites::default(); cfg.layers];
    let mut shallow = None;
    match method {
        PetlMethod::FullFineTune | PetlMethod::LinearProbe | PetlMethod::BitFit => {}
        PetlMethod::Lora { r, s, targets, .. } => {
            if targets.count() == 0 {
                return Err(Error::Config("lora needs at least one target projection".into()));
            }
            for site in layers.iter_mut() {
                site.lora = Some(LoraSite { r, s, targets });
            }
        }
        PetlMethod::PromptShallow { p } => shallow = Some(p),
        PetlMethod::PromptDeep { p } => {
            for site in layers.iter_mut() {
                site.deep_prompt = Some(p);
            }
        }
        PetlMethod::Prefix { p } => {
            for site in layers.iter_mut() {
                site.kv_prefix = Some(p);
            }
        }
        PetlMethod::Bottleneck { r, config, mode } => {
            let kind = AdapterKind::Bottleneck { r };
            for site in layers.iter_mut() {
                match mode {
                    AdapterMode::Parallel => {
                        site.mhsa_parallel = Some(kind);
                        if config == AdapterConfig::Houlsby {
                            site.ff_parallel = Some(kind);
                        }
                    }
                    AdapterMode::Sequential => {
                        site.mhsa_sequential = Some(kind);
                        if config == AdapterConfig::Houlsby {
                            site.ff_sequential = Some(kind);
                        }
                    }
                }
            }
        }
        PetlMethod::Conformer { r, k, config } => {
            let kind = AdapterKind::Conformer { r, k };
            for site in layers.iter_mut() {
                site.mhsa_parallel = Some(kind);
                if config == AdapterConfig::Houlsby {
                    site.ff_parallel = Some(kind);
                }
            }
        }
    }
    Ok(InjectionPlan { method, shallow_prompt_len: shallow, layers })
}

/// Freezes the backbone, creates the plan's parameters, and marks them
/// (plus the classification head) trainable.
pub fn inject(plan: &InjectionPlan, store: &mut ParamStore, cfg: &BackboneConfig, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.freeze_all();

    match plan.method {
        PetlMethod::FullFineTune => {
            let ids: Vec<String> = store
                .iter()
                .filter(|(_, e)| e.role != crate::store::ParamRole::Buffer)
                .map(|(id, _)| id.clone())
                .collect();
            for id in ids {
                store.mark_trainable(&id)?;
            }
        }
        PetlMethod::BitFit => apply_bitfit_mask(store)?,
        _ => {}
    }

    if let Some(p) = plan.shallow_prompt_len {
        prompts::init_shallow_prompts(store, cfg, p, &mut rng)?;
    }
    for (layer, sites) in plan.layers.iter().enumerate() {
        if let Some(lo) = sites.lora {
            lora::init_lora(store, cfg, layer, lo, &mut rng)?;
        }
        if let Some(p) = sites.deep_prompt {
            prompts::init_deep_prompts(store, cfg, layer, p, &mut rng)?;
        }
        if let Some(p) = sites.kv_prefix {
            prompts::init_prefix(store, cfg, layer, p)?;
        }
        for (kind, site) in [
            (sites.mhsa_parallel, SITE_MHSA),
            (sites.mhsa_sequential, SITE_MHSA),
            (sites.ff_parallel, SITE_FF),
            (sites.ff_sequential, SITE_FF),
        ]
        .into_iter()
        .filter_map(|(k, s)| k.map(|k| (k, s)))
        {
            let prefix = adapter_prefix(layer, kind, site);
            match kind {
                AdapterKind::Bottleneck { r } => init_bottleneck(store, &prefix, cfg.d, r, &mut rng)?,
                AdapterKind::Conformer { r, k } => init_conformer(store, &prefix, cfg.d, r, k, &mut rng)?,
            }
        }
    }

    store.mark_trainable(&ids::head_weight())?;
    store.mark_trainable(&ids::head_bias())?;
    Ok(())
}
