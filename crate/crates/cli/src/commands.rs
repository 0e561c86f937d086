//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use petl_core::accounting::{
    self, count_trainable, format_two_sig_figs, percent_of_full, render_report, solve_budget,
};
use petl_core::backbone::{backbone_param_count, Backbone, BackboneConfig};
use petl_core::checkpoint;
use petl_core::harness::{
    derive_seed, gen_synthetic_task, gradcheck_with_corruption, randomize_trainable, save_dataset,
    write_metrics_csv, Split, TrainConfig,
};
use petl_core::petl::{build_plan, inject, PetlMethod};
use rayon::prelude::*;

use crate::config::{desk_method, echo_file_config, ExperimentConfig, FileConfig};
use crate::runs::{
    adapt_run, ensure_backbone, maybe_few_shot, mean_std, write_csv,
};

/// Numeric failure (NaN loss, gradient mismatch): exit code 2.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for NumericFailure {}

// ── count ────────────────────────────────────────────────────────────

pub fn cmd_count(cfg: &ExperimentConfig, json: bool) -> Result<()> {
    let backbone = Backbone::new(cfg.backbone).map_err(|e| anyhow!("{e}"))?;
    let mut store = backbone.init_store().map_err(|e| anyhow!("{e}"))?;
    let plan = build_plan(cfg.method, &cfg.backbone).map_err(|e| anyhow!("{e}"))?;
    inject(&plan, &mut store, &cfg.backbone, derive_seed(cfg.seed, 0x636eـ74 as u64))
        .map_err(|e| anyhow!("{e}"))?;
    let report = count_trainable(&store, &plan, &cfg.backbone);
    if report.method_params != report.closed_form {
        bail!(
            "enumerated method parameters {} disagree with closed form {}",
            report.method_params,
            report.closed_form
        );
    }
    let full_total = backbone_param_count(&cfg.backbone);
    if json {
        let pct = percent_of_full(report.method_params, full_total).map_err(|e| anyhow!("{e}"))?;
        let mut value = serde_json::to_value(&report)?;
        let obj = value.as_object_mut().expect("report serializes to an object");
        obj.insert("full_total".into(), serde_json::json!(full_total));
        obj.insert("percent_of_full".into(), serde_json::json!(format_two_sig_figs(pct)));
        obj.insert("percent_of_full_raw".into(), serde_json::json!(pct));
        println!("{}", serde_json::to_string(&value)?);
    } else {
        print!("{}", render_report(&report, full_total));
    }
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

pub fn cmd_train(cfg: &ExperimentConfig, save_backbone: Option<&Path>, dataset_cache: Option<&Path>) -> Result<()> {
    let run_dir = run_dir(cfg)?;
    let (backbone, base_store) = ensure_backbone(cfg, false)?;

    let data = gen_synthetic_task(&cfg.task).map_err(|e| anyhow!("{e}"))?;
    if let Some(path) = dataset_cache {
        save_dataset(&data, path).map_err(|e| anyhow!("{e}"))?;
    }
    let data = maybe_few_shot(data, cfg.shots, cfg.seed)?;

    let result = adapt_run(
        &backbone,
        &base_store,
        cfg.method,
        &data,
        &cfg.train,
        derive_seed(cfg.seed, 0x696e_6a65),
    )?;

    std::fs::write(
        run_dir.join("config.toml"),
        toml::to_string(&echo_file_config(cfg))?,
    )?;
    write_metrics_csv(&run_dir.join("metrics.csv"), &result.output.metrics)
        .map_err(|e| anyhow!("{e}"))?;
    checkpoint::write_records(&run_dir.join("petl_best.ckpt"), &result.output.best_trainable)
        .map_err(|e| anyhow!("{e}"))?;
    if let Some(path) = save_backbone {
        // persist the full store (useful after a full-fine-tune run)
        let mut store = base_store.clone();
        let plan = build_plan(cfg.method, &cfg.backbone).map_err(|e| anyhow!("{e}"))?;
        inject(&plan, &mut store, &cfg.backbone, derive_seed(cfg.seed, 0x696e_6a65))
            .map_err(|e| anyhow!("{e}"))?;
        checkpoint::apply_records(&mut store, &result.output.best_trainable)
            .map_err(|e| anyhow!("{e}"))?;
        checkpoint::save_store(&store, path).map_err(|e| anyhow!("{e}"))?;
    }
    println!(
        "method {} trainable {} best-val {:.4} (epoch {}) test {:.4} -> {}",
        cfg.method.name(),
        result.trainable_params,
        result.output.best_val_accuracy,
        result.output.best_epoch,
        result.output.test_accuracy,
        run_dir.display()
    );
    Ok(())
}

fn run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(format!("{}-seed{}", cfg.method.name(), cfg.seed));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

// ── gradcheck ────────────────────────────────────────────────────────

fn all_methods(cfg: &ExperimentConfig) -> Vec<PetlMethod> {
    let f = FileConfig::default();
    [
        "full",
        "linear",
        "bitfit",
        "lora",
        "prompt-shallow",
        "prompt-deep",
        "prefix",
        "bottleneck",
        "conformer",
    ]
    .iter()
    .map(|name| desk_method(name, &f).expect("built-in method names parse"))
    .map(|m| match m {
        // keep the check quick at tiny dims
        PetlMethod::PromptShallow { .. } => PetlMethod::PromptShallow { p: 8 },
        other => other,
    })
    .collect::<Vec<_>>()
    .into_iter()
    .chain(std::iter::once(cfg.method).take(0))
    .collect()
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig, all: bool, probes: usize, corrupt: bool) -> Result<()> {
    let methods = if all { all_methods(cfg) } else { vec![cfg.method] };
    let data = gen_synthetic_task(&cfg.task).map_err(|e| anyhow!("{e}"))?;
    let batch = data
        .batches(Split::Train, 4)
        .map_err(|e| anyhow!("{e}"))?
        .into_iter()
        .next()
        .ok_or_else(|| anyhow!("task produced no data"))?;
    let backbone = Backbone::new(cfg.backbone).map_err(|e| anyhow!("{e}"))?;
    let mut failures = Vec::new();
    for method in methods {
        let mut store = backbone.init_store().map_err(|e| anyhow!("{e}"))?;
        let plan = build_plan(method, &cfg.backbone).map_err(|e| anyhow!("{e}"))?;
        inject(&plan, &mut store, &cfg.backbone, derive_seed(cfg.seed, 0x6763_6b31))
            .map_err(|e| anyhow!("{e}"))?;
        randomize_trainable(&mut store, 0.05, derive_seed(cfg.seed, 0x6763_6b32));
        let report = gradcheck_with_corruption(
            &backbone,
            &mut store,
            &plan,
            &batch,
            probes,
            derive_seed(cfg.seed, 0x6763_6b33),
            corrupt.then_some(1.5),
        )
        .map_err(|e| anyhow!("{e}"))?;
        let pass = report.max_rel_err < 1e-4;
        println!(
            "{} {:<14} probes {:>4} max rel err {:.3e}",
            if pass { "PASS" } else { "FAIL" },
            method.name(),
            report.probes,
            report.max_rel_err
        );
        if !pass {
            failures.push(format!("{}: {:.3e}", method.name(), report.max_rel_err));
        }
    }
    if !failures.is_empty() {
        return Err(NumericFailure(format!("gradient check failed: {}", failures.join(", "))).into());
    }
    Ok(())
}

// ── sweep-kernel ─────────────────────────────────────────────────────

pub fn cmd_sweep_kernel(
    cfg: &ExperimentConfig,
    k_list: &[usize],
    shots: usize,
    seeds: u64,
    jobs: usize,
) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let (backbone, base_store) = ensure_backbone(cfg, true)?;
    let data = gen_synthetic_task(&cfg.task).map_err(|e| anyhow!("{e}"))?;
    let (r, config) = match cfg.method {
        PetlMethod::Conformer { r, config, .. } => (r, config),
        _ => bail!("kernel sweeps apply to the conformer adapter; got {}", cfg.method.name()),
    };

    struct Cell {
        mode: &'static str,
        k: usize,
        seed: u64,
    }
    let mut cells = Vec::new();
    for &k in k_list {
        for seed in 0..seeds {
            cells.push(Cell { mode: "full", k, seed });
            cells.push(Cell { mode: "fewshot", k, seed });
        }
    }

    let run_cell = |cell: &Cell| -> Result<String> {
        let method = PetlMethod::Conformer { r, k: cell.k, config };
        let plan_params = accounting::closed_form(&method, &cfg.backbone);
        let mut data = data.clone();
        if cell.mode == "fewshot" {
            data = maybe_few_shot(data, Some(shots), derive_seed(cfg.seed, cell.seed))?;
        }
        let tc = TrainConfig { seed: derive_seed(cfg.seed, 0x6b73_0000 + cell.seed), ..cfg.train };
        let result = adapt_run(
            &backbone,
            &base_store,
            method,
            &data,
            &tc,
            derive_seed(cfg.seed, 0x6b69_0000 + cell.seed),
        )?;
        Ok(format!(
            "{},{},{},{},{:.6}",
            cell.mode, cell.k, cell.seed, plan_params, result.output.test_accuracy
        ))
    };

    let mut rows = run_parallel(&cells, jobs, run_cell)?;
    rows.sort();
    let path = cfg.output_dir.join("sweep_kernel.csv");
    write_csv(&path, "petl-sweep-kernel v1", "mode,k,seed,params,accuracy", &rows)?;
    println!("wrote {} rows -> {}", rows.len(), path.display());
    Ok(())
}

// ── sweep-budget ─────────────────────────────────────────────────────

pub fn default_budget_targets(cfg: &BackboneConfig) -> Vec<usize> {
    // 50K..1M, log-spaced, scaled by the desk/full parameter ratio
    let full = BackboneConfig::full_scale(cfg.n_classes, 0);
    let ratio = backbone_param_count(cfg) as f64 / backbone_param_count(&full) as f64;
    let lo: f64 = 50_000.0;
    let hi: f64 = 1_000_000.0;
    (0..5)
        .map(|i| lo * (hi / lo).powf(i as f64 / 4.0))
        .map(|t| (t * ratio).round() as usize)
        .collect()
}

pub fn cmd_sweep_budget(
    cfg: &ExperimentConfig,
    targets: &[usize],
    methods: &[String],
    jobs: usize,
) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let (backbone, base_store) = ensure_backbone(cfg, true)?;
    let data = gen_synthetic_task(&cfg.task).map_err(|e| anyhow!("{e}"))?;

    let file = FileConfig::default();
    let families: Vec<PetlMethod> = methods
        .iter()
        .map(|name| desk_method(name, &file))
        .collect::<Result<_>>()?;

    struct Cell {
        name: String,
        family: PetlMethod,
        target: usize,
        hyper: usize,
    }
    let mut cells = Vec::new();
    for family in &families {
        for &target in targets {
            match solve_budget(family, target, &cfg.backbone) {
                Ok(hyper) => cells.push(Cell {
                    name: family.name().to_string(),
                    family: *family,
                    target,
                    hyper,
                }),
                Err(e) => eprintln!("skipping {} at target {target}: {e}", family.name()),
            }
        }
    }

    let run_cell = |cell: &Cell| -> Result<String> {
        let method = match cell.family {
            PetlMethod::Lora { alpha, s, targets, .. } => {
                PetlMethod::Lora { r: cell.hyper, alpha, s, targets }
            }
            PetlMethod::Bottleneck { config, mode, .. } => {
                PetlMethod::Bottleneck { r: cell.hyper, config, mode }
            }
            PetlMethod::Conformer { k, config, .. } => {
                PetlMethod::Conformer { r: cell.hyper, k, config }
            }
            PetlMethod::PromptShallow { .. } => PetlMethod::PromptShallow { p: cell.hyper },
            PetlMethod::PromptDeep { .. } => PetlMethod::PromptDeep { p: cell.hyper },
            PetlMethod::Prefix { .. } => PetlMethod::Prefix { p: cell.hyper },
            other => bail!("{} cannot be budget-swept", other.name()),
        };
        let params = accounting::closed_form(&method, &cfg.backbone);
        debug_assert!(params <= cell.target);
        let result = adapt_run(
            &backbone,
            &base_store,
            method,
            &data,
            &cfg.train,
            derive_seed(cfg.seed, 0x6275_0000 + cell.target as u64),
        )?;
        Ok(format!(
            "{},{},{},{},{:.6}",
            cell.name, cell.target, cell.hyper, params, result.output.test_accuracy
        ))
    };

    let mut rows = run_parallel(&cells, jobs, run_cell)?;
    rows.sort();
    let path = cfg.output_dir.join("sweep_budget.csv");
    write_csv(&path, "petl-sweep-budget v1", "method,target,hyperparam,params,accuracy", &rows)?;
    println!("wrote {} rows -> {}", rows.len(), path.display());
    Ok(())
}

// ── fewshot ──────────────────────────────────────────────────────────

pub fn cmd_fewshot(cfg: &ExperimentConfig, shots_list: &[usize], seeds: u64, jobs: usize) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let (backbone, base_store) = ensure_backbone(cfg, true)?;
    let data = gen_synthetic_task(&cfg.task).map_err(|e| anyhow!("{e}"))?;

    struct Cell {
        shots: usize,
        seed: u64,
    }
    let mut cells = Vec::new();
    for &shots in shots_list {
        for seed in 0..seeds {
            cells.push(Cell { shots, seed });
        }
    }

    let run_cell = |cell: &Cell| -> Result<String> {
        let few = maybe_few_shot(data.clone(), Some(cell.shots), derive_seed(cfg.seed, cell.seed))?;
        let tc = TrainConfig { seed: derive_seed(cfg.seed, 0x6673_0000 + cell.seed), ..cfg.train };
        let result = adapt_run(
            &backbone,
            &base_store,
            cfg.method,
            &few,
            &tc,
            derive_seed(cfg.seed, 0x6669_0000 + cell.seed),
        )?;
        Ok(format!(
            "{},{},{},{:.6}",
            cell.shots, cell.seed, result.trainable_params, result.output.test_accuracy
        ))
    };

    let mut rows = run_parallel(&cells, jobs, run_cell)?;
    rows.sort_by_key(|row| {
        let mut it = row.split(',');
        let shots: usize = it.next().unwrap().parse().unwrap();
        let seed: u64 = it.next().unwrap().parse().unwrap();
        (shots, seed)
    });
    let path = cfg.output_dir.join("fewshot.csv");
    write_csv(&path, "petl-fewshot v1", "shots,seed,trainable_params,accuracy", &rows)?;

    // summary: mean and std over seeds per shot count
    let mut summary = Vec::new();
    for &shots in shots_list {
        let accs: Vec<f64> = rows
            .iter()
            .filter(|row| row.starts_with(&format!("{shots},")))
            .map(|row| row.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .collect();
        let (mean, std) = mean_std(&accs);
        summary.push(format!("{shots},{mean:.6},{std:.6}"));
    }
    let spath = cfg.output_dir.join("fewshot_summary.csv");
    write_csv(&spath, "petl-fewshot-summary v1", "shots,mean_accuracy,std_accuracy", &summary)?;
    println!("wrote {} rows -> {} (+ summary)", rows.len(), path.display());
    Ok(())
}

// ── shared ───────────────────────────────────────────────────────────

fn run_parallel<C: Sync, F: Fn(&C) -> Result<String> + Sync>(
    cells: &[C],
    jobs: usize,
    run_cell: F,
) -> Result<Vec<String>> {
    if jobs <= 1 {
        cells.iter().map(&run_cell).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .context("building worker pool")?;
        pool.install(|| cells.par_iter().map(&run_cell).collect())
    }
}
