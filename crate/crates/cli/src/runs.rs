//! Shared run pipeline: backbone acquisition, adaptation runs, CSV
//! emission.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use petl_core::backbone::{ids, Backbone};
use petl_core::checkpoint;
use petl_core::harness::{
    derive_seed, few_shot_subsample, gen_synthetic_task, train, Dataset, PatternFamily,
    SyntheticTaskSpec, TrainConfig, TrainOutput,
};
use petl_core::petl::{build_plan, inject, PetlMethod};
use petl_core::{ParamStore, Tensor};

use crate::config::ExperimentConfig;

/// Loads the checkpointed backbone, or initializes one from the config
/// seed. With `pretrain` set and no checkpoint, the fresh backbone is
/// fully fine-tuned on the companion band-pattern task first, so
/// adaptation runs start from meaningful features.
pub fn ensure_backbone(cfg: &ExperimentConfig, pretrain: bool) -> Result<(Backbone, ParamStore)> {
    let backbone = Backbone::new(cfg.backbone).map_err(|e| anyhow!("{e}"))?;
    if let Some(path) = &cfg.backbone_ckpt {
        let mut store = checkpoint::load_store(path)
            .with_context(|| format!("loading backbone checkpoint {}", path.display()))?;
        validate_backbone_store(&backbone, &mut store)?;
        return Ok((backbone, store));
    }
    let mut store = backbone.init_store().map_err(|e| anyhow!("{e}"))?;
    if pretrain && cfg.pretrain_epochs > 0 {
        let task = pretrain_task(cfg);
        let data = gen_synthetic_task(&task).map_err(|e| anyhow!("{e}"))?;
        let plan = build_plan(PetlMethod::FullFineTune, &cfg.backbone).map_err(|e| anyhow!("{e}"))?;
        inject(&plan, &mut store, &cfg.backbone, derive_seed(cfg.seed, 0x7072_6531))
            .map_err(|e| anyhow!("{e}"))?;
        let tc = TrainConfig {
            lr: 0.005,
            epochs: cfg.pretrain_epochs,
            batch_size: cfg.train.batch_size,
            seed: derive_seed(cfg.seed, 0x7072_6532),
            ..TrainConfig::default()
        };
        let out = train(&backbone, &mut store, &plan, &data, &tc).map_err(|e| anyhow!("{e}"))?;
        eprintln!(
            "pretrained backbone on {} band classes: val {:.3}, test {:.3}",
            task.n_classes, out.best_val_accuracy, out.test_accuracy
        );
    }
    Ok((backbone, store))
}

/// The companion pretraining task: band patterns at the same dimensions
/// and class count as the experiment task, lower noise.
pub fn pretrain_task(cfg: &ExperimentConfig) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        n_classes: cfg.backbone.n_classes,
        samples_per_class: cfg.task.samples_per_class.max(80),
        freq_bins: cfg.backbone.freq_bins,
        time_bins: cfg.backbone.time_bins,
        family: PatternFamily::Bands,
        tone_count: cfg.task.tone_count,
        noise_std: 0.15,
        seed: derive_seed(cfg.seed, 0x7072_6530),
    }
}

fn validate_backbone_store(backbone: &Backbone, store: &mut ParamStore) -> Result<()> {
    let cfg = &backbone.cfg;
    let probe = store
        .tensor(&ids::patch_weight())
        .map_err(|_| anyhow!("checkpoint is not a backbone store (missing patch projection)"))?;
    if probe.shape() != [cfg.patch_dim(), cfg.d] {
        bail!(
            "checkpoint patch projection {:?} does not fit configured dims [{}, {}]",
            probe.shape(),
            cfg.patch_dim(),
            cfg.d
        );
    }
    if !store.contains(&petl_core::backbone::ids::ln_gamma(cfg.layers - 1, "ln1")) {
        bail!("checkpoint has fewer layers than the configured {}", cfg.layers);
    }
    // adapting to a task with a different class count replaces the head
    let head_shape = store.tensor(&ids::head_weight()).map(|t| t.shape().to_vec());
    let needs_new_head = match head_shape {
        Ok(shape) => shape != [cfg.d, cfg.n_classes],
        Err(_) => true,
    };
    if needs_new_head {
        store
            .replace(&ids::head_weight(), Tensor::zeros(&[cfg.d, cfg.n_classes]))
            .map_err(|e| anyhow!("{e}"))?;
        store
            .replace(&ids::head_bias(), Tensor::zeros(&[cfg.n_classes]))
            .map_err(|e| anyhow!("{e}"))?;
        eprintln!("checkpoint head replaced for {} classes", cfg.n_classes);
    }
    Ok(())
}

/// Result of one adaptation run.
pub struct RunResult {
    pub output: TrainOutput,
    pub trainable_params: usize,
    pub method_params: usize,
}

/// Injects `method` into a clone of the pretrained store and trains on
/// `data`. Verifies the frozen backbone bytes did not move.
pub fn adapt_run(
    backbone: &Backbone,
    base_store: &ParamStore,
    method: PetlMethod,
    data: &Dataset,
    train_cfg: &TrainConfig,
    inject_seed: u64,
) -> Result<RunResult> {
    let mut store = base_store.clone();
    let plan = build_plan(method, &backbone.cfg).map_err(|e| anyhow!("{e}"))?;
    inject(&plan, &mut store, &backbone.cfg, inject_seed).map_err(|e| anyhow!("{e}"))?;
    let trainable_params = store.count_trainable();
    let head = store.count_trainable_prefix("head.");
    let frozen_before = store.frozen_hash();
    let output = train(backbone, &mut store, &plan, data, train_cfg).map_err(|e| anyhow!("{e}"))?;
    if store.frozen_hash() != frozen_before {
        bail!("frozen backbone parameters changed during training");
    }
    Ok(RunResult { output, trainable_params, method_params: trainable_params - head })
}

/// Applies the optional few-shot protocol to the training split.
pub fn maybe_few_shot(data: Dataset, shots: Option<usize>, seed: u64) -> Result<Dataset> {
    match shots {
        Some(shots) => few_shot_subsample(&data, shots, derive_seed(seed, 0x7368_6f74))
            .map_err(|e| anyhow!("{e}")),
        None => Ok(data),
    }
}

/// Writes a CSV with a schema comment line, a header, and rows.
pub fn write_csv(path: &Path, schema: &str, header: &str, rows: &[String]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(f, "# schema: {schema}")?;
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    f.flush()?;
    Ok(())
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64;
    (mean, var.sqrt())
}
