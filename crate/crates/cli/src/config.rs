//! Flat experiment configuration: TOML file keys and CLI flags share one
//! schema; flags override file values, defaults fill the rest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use petl_core::backbone::BackboneConfig;
use petl_core::harness::{PatternFamily, SyntheticTaskSpec, TrainConfig};
use petl_core::petl::{AdapterConfig, AdapterMode, LoraTargets, PetlMethod};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "PETL_OUTPUT_ROOT";

/// The flat key set. Every field is optional; unknown keys are rejected.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    // run
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub backbone_ckpt: Option<PathBuf>,
    pub pretrain_epochs: Option<usize>,
    // backbone dims
    pub d: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ff_ratio: Option<usize>,
    pub freq_bins: Option<usize>,
    pub time_bins: Option<usize>,
    pub patch_h: Option<usize>,
    pub patch_w: Option<usize>,
    pub n_classes: Option<usize>,
    // method
    pub method: Option<String>,
    pub r: Option<usize>,
    pub k: Option<usize>,
    pub p: Option<usize>,
    pub alpha: Option<f64>,
    pub scale: Option<f64>,
    pub houlsby: Option<bool>,
    pub sequential: Option<bool>,
    // training
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub shots: Option<usize>,
    // task
    pub task_family: Option<String>,
    pub samples_per_class: Option<usize>,
    pub noise_std: Option<f64>,
    pub tone_count: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: FileConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Values from `other` win.
    pub fn overlay(mut self, other: &FileConfig) -> Self {
        macro_rules! take {
            ($($field:ident),* $(,)?) => {
                $(if other.$field.is_some() { self.$field = other.$field.clone(); })*
            };
        }
        take!(
            seed, output_dir, backbone_ckpt, pretrain_epochs, d, layers, heads, ff_ratio,
            freq_bins, time_bins, patch_h, patch_w, n_classes, method, r, k, p, alpha, scale,
            houlsby, sequential, lr, weight_decay, epochs, batch_size, shots, task_family,
            samples_per_class, noise_std, tone_count,
        );
        self
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub backbone_ckpt: Option<PathBuf>,
    pub pretrain_epochs: usize,
    pub backbone: BackboneConfig,
    pub method: PetlMethod,
    pub train: TrainConfig,
    pub task: SyntheticTaskSpec,
    pub shots: Option<usize>,
}

/// Desk-scale method defaults (ranks per the operating points; prompt
/// lengths scaled to the short desk token sequence).
pub fn desk_method(name: &str, file: &FileConfig) -> Result<PetlMethod> {
    let r = file.r;
    let k = file.k;
    let p = file.p;
    let alpha = file.alpha.unwrap_or(16.0);
    let scale = file.scale.unwrap_or(8.0);
    let config = if file.houlsby.unwrap_or(false) {
        AdapterConfig::Houlsby
    } else {
        AdapterConfig::Pfeiffer
    };
    let mode = if file.sequential.unwrap_or(false) {
        AdapterMode::Sequential
    } else {
        AdapterMode::Parallel
    };
    Ok(match name {
        "full" | "fft" => PetlMethod::FullFineTune,
        "linear" => PetlMethod::LinearProbe,
        "bitfit" => PetlMethod::BitFit,
        "lora" => PetlMethod::Lora {
            r: r.unwrap_or(6),
            alpha,
            s: scale,
            targets: LoraTargets::default(),
        },
        "prompt-shallow" | "spt" => PetlMethod::PromptShallow { p: p.unwrap_or(20) },
        "prompt-deep" | "dpt" => PetlMethod::PromptDeep { p: p.unwrap_or(8) },
        "prefix" => PetlMethod::Prefix { p: p.unwrap_or(8) },
        "bottleneck" => PetlMethod::Bottleneck { r: r.unwrap_or(12), config, mode },
        "conformer" => {
            if file.sequential.unwrap_or(false) {
                bail!("config error: the conformer adapter supports parallel placement only");
            }
            PetlMethod::Conformer { r: r.unwrap_or(8), k: k.unwrap_or(8), config }
        }
        other => bail!(
            "config error: unknown method {other:?} (expected full, linear, bitfit, lora, \
             prompt-shallow, prompt-deep, prefix, bottleneck, or conformer)"
        ),
    })
}

/// Full-scale method settings: the published operating points.
pub fn full_scale_method(name: &str, file: &FileConfig) -> Result<PetlMethod> {
    let mut with_defaults = file.clone();
    with_defaults.r = file.r.or(match name {
        "lora" => Some(6),
        "bottleneck" => Some(12),
        "conformer" => Some(8),
        _ => None,
    });
    with_defaults.k = file.k.or(Some(31));
    with_defaults.p = file.p.or(match name {
        "prompt-shallow" | "spt" => Some(300),
        "prompt-deep" | "dpt" => Some(25),
        "prefix" => Some(24),
        _ => None,
    });
    desk_method(name, &with_defaults)
}

pub fn resolve(file: &FileConfig, full_scale: bool) -> Result<ExperimentConfig> {
    let seed = file.seed.unwrap_or(42);
    let n_classes = file.n_classes.unwrap_or(8);

    let mut backbone = if full_scale {
        BackboneConfig::full_scale(n_classes, seed)
    } else {
        BackboneConfig::desk_scale(n_classes, seed)
    };
    macro_rules! dim {
        ($($field:ident),* $(,)?) => {
            $(if let Some(v) = file.$field { backbone.$field = v; })*
        };
    }
    dim!(d, layers, heads, ff_ratio, freq_bins, time_bins, patch_h, patch_w);
    backbone.validate().map_err(|e| anyhow::anyhow!("{e}"))?;

    let method_name = file.method.clone().unwrap_or_else(|| "conformer".to_string());
    let method = if full_scale {
        full_scale_method(&method_name, file)?
    } else {
        desk_method(&method_name, file)?
    };

    // prompt-style methods default to the higher published rate
    let default_lr = match method {
        PetlMethod::PromptShallow { .. } | PetlMethod::PromptDeep { .. } | PetlMethod::Prefix { .. } => 0.01,
        _ => 0.005,
    };
    let train = TrainConfig {
        lr: file.lr.unwrap_or(default_lr),
        weight_decay: file.weight_decay.unwrap_or(0.1),
        epochs: file.epochs.unwrap_or(25),
        batch_size: file.batch_size.unwrap_or(32),
        seed,
        ..TrainConfig::default()
    };
    train.validate().map_err(|e| anyhow::anyhow!("{e}"))?;

    let family = match file.task_family.as_deref().unwrap_or("chirps") {
        "bands" => PatternFamily::Bands,
        "chirps" => PatternFamily::Chirps,
        other => bail!("config error: unknown task family {other:?} (expected bands or chirps)"),
    };
    let task = SyntheticTaskSpec {
        n_classes,
        samples_per_class: file.samples_per_class.unwrap_or(60),
        freq_bins: backbone.freq_bins,
        time_bins: backbone.time_bins,
        family,
        tone_count: file.tone_count.unwrap_or(3),
        noise_std: file.noise_std.unwrap_or(0.3),
        seed: petl_core::harness::derive_seed(seed, 0x7461_736b),
    };
    task.validate().map_err(|e| anyhow::anyhow!("{e}"))?;

    let output_dir = file
        .output_dir
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));

    Ok(ExperimentConfig {
        seed,
        output_dir,
        backbone_ckpt: file.backbone_ckpt.clone(),
        pretrain_epochs: file.pretrain_epochs.unwrap_or(40),
        backbone,
        method,
        train,
        task,
        shots: file.shots.filter(|&s| s > 0),
    })
}

/// Flat snapshot of a resolved experiment, reloadable as a config file.
pub fn echo_file_config(cfg: &ExperimentConfig) -> FileConfig {
    let mut out = FileConfig {
        seed: Some(cfg.seed),
        output_dir: Some(cfg.output_dir.clone()),
        backbone_ckpt: cfg.backbone_ckpt.clone(),
        pretrain_epochs: Some(cfg.pretrain_epochs),
        d: Some(cfg.backbone.d),
        layers: Some(cfg.backbone.layers),
        heads: Some(cfg.backbone.heads),
        ff_ratio: Some(cfg.backbone.ff_ratio),
        freq_bins: Some(cfg.backbone.freq_bins),
        time_bins: Some(cfg.backbone.time_bins),
        patch_h: Some(cfg.backbone.patch_h),
        patch_w: Some(cfg.backbone.patch_w),
        n_classes: Some(cfg.backbone.n_classes),
        method: Some(cfg.method.name().to_string()),
        lr: Some(cfg.train.lr),
        weight_decay: Some(cfg.train.weight_decay),
        epochs: Some(cfg.train.epochs),
        batch_size: Some(cfg.train.batch_size),
        shots: cfg.shots,
        task_family: Some(
            match cfg.task.family {
                PatternFamily::Bands => "bands",
                PatternFamily::Chirps => "chirps",
            }
            .to_string(),
        ),
        samples_per_class: Some(cfg.task.samples_per_class),
        noise_std: Some(cfg.task.noise_std),
        tone_count: Some(cfg.task.tone_count),
        ..Default::default()
    };
    match cfg.method {
        PetlMethod::Lora { r, alpha, s, .. } => {
            out.r = Some(r);
            out.alpha = Some(alpha);
            out.scale = Some(s);
        }
        PetlMethod::PromptShallow { p } | PetlMethod::PromptDeep { p } | PetlMethod::Prefix { p } => {
            out.p = Some(p)
        }
        PetlMethod::Bottleneck { r, config, mode } => {
            out.r = Some(r);
            out.houlsby = Some(config == AdapterConfig::Houlsby);
            out.sequential = Some(mode == AdapterMode::Sequential);
        }
        PetlMethod::Conformer { r, k, config } => {
            out.r = Some(r);
            out.k = Some(k);
            out.houlsby = Some(config == AdapterConfig::Houlsby);
        }
        _ => {}
    }
    out
}
