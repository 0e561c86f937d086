//! The training loop: AdamW + cosine annealing over a frozen-or-not
//! backbone, per-epoch metrics, and a best-validation checkpoint of the
//! trainable state.

use std::path::Path;
use std::time::Instant;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::checkpoint::Record;
use crate::error::{Error, Result};
use crate::petl::InjectionPlan;
use crate::store::{ParamRole, ParamStore};
use crate::tape::Tape;

use super::optim::{cosine_lr, AdamW};
use super::synthetic::{Dataset, Split};
use super::derive_seed;

/// Optimization settings.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            weight_decay: 0.1,
            epochs: 20,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One metrics row.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub trainable_params: usize,
    /// Measured seconds since the run started. Excluded from the CSV to
    /// keep output files byte-reproducible; see [`write_metrics_csv`].
    pub wall_time: f64,
}

/// Everything a run produces.
pub struct TrainOutput {
    pub metrics: Vec<MetricsRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    /// Trainable parameters (plus batch-norm buffers) at the best
    /// validation epoch.
    pub best_trainable: Vec<Record>,
}

fn snapshot_trainable(store: &ParamStore) -> Vec<Record> {
    store
        .iter()
        .filter(|(id, e)| store.is_trainable(id) || e.role == ParamRole::Buffer)
        .map(|(id, e)| Record {
            id: id.clone(),
            role: e.role,
            trainable: store.is_trainable(id),
            shape: e.tensor.shape().to_vec(),
            data: e.tensor.data().to_vec(),
        })
        .collect()
}

fn restore_records(store: &mut ParamStore, records: &[Record]) -> Result<()> {
    for rec in records {
        store.tensor_mut(&rec.id)?.data_mut().copy_from_slice(&rec.data);
    }
    Ok(())
}

/// Mean loss and accuracy of a split under the current parameters.
pub fn evaluate(
    backbone: &Backbone,
    store: &mut ParamStore,
    plan: &InjectionPlan,
    data: &Dataset,
    split: Split,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let batches = data.batches(split, batch_size)?;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut count = 0usize;
    for batch in &batches {
        let mut tape = Tape::new();
        let logits = backbone.logits(&mut tape, store, &batch.x, plan, false)?;
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        loss_sum += tape.scalar(loss) * batch.len() as f64;
        correct += count_correct(tape.data(logits), &batch.labels);
        count += batch.len();
    }
    if count == 0 {
        return Err(Error::Contract("empty evaluation split".into()));
    }
    Ok((loss_sum / count as f64, correct as f64 / count as f64))
}

fn count_correct(logits: &[f64], labels: &[usize]) -> usize {
    let classes = logits.len() / labels.len();
    labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| {
            let row = &logits[i * classes..(i + 1) * classes];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            argmax == label
        })
        .count()
}

/// Trains the plan's parameters on the dataset. The backbone must already
/// be frozen/injected; frozen entries are never touched (the caller can
/// hash them to verify). Aborts with diagnostics when the loss turns NaN.
pub fn train(
    backbone: &Backbone,
    store: &mut ParamStore,
    plan: &InjectionPlan,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let started = Instant::now();
    let trainable_params = store.count_trainable();
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut optimizer = AdamW::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7368_7566));

    let mut metrics = Vec::new();
    let mut best = TrainOutput {
        metrics: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        test_accuracy: 0.0,
        best_trainable: snapshot_trainable(store),
    };

    let mut step = 0usize;
    let mut lr = cfg.lr;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let batches = data.batches_by_index(Split::Train, &order, cfg.batch_size)?;

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in &batches {
            lr = cosine_lr(step, total_steps, cfg.lr);
            let mut tape = Tape::new();
            let logits = backbone.logits(&mut tape, store, &batch.x, plan, true)?;
            let loss = tape.cross_entropy(logits, &batch.labels)?;
            let loss_value = tape.scalar(loss);
            tape.backward(loss)?;
            tape.write_grads(store)?;
            let grad_norm = optimizer.step(store, lr)?;
            store.clear_grads();
            if !loss_value.is_finite() {
                return Err(Error::NanLoss { epoch, step, lr, grad_norm });
            }
            loss_sum += loss_value * batch.len() as f64;
            correct += count_correct(tape.data(logits), &batch.labels);
            step += 1;
        }
        let train_loss = loss_sum / data.train.len() as f64;
        let train_acc = correct as f64 / data.train.len() as f64;
        metrics.push(MetricsRecord {
            epoch,
            split: Split::Train,
            loss: train_loss,
            accuracy: train_acc,
            lr,
            trainable_params,
            wall_time: started.elapsed().as_secs_f64(),
        });

        let (val_loss, val_acc) = evaluate(backbone, store, plan, data, Split::Val, cfg.batch_size)?;
        metrics.push(MetricsRecord {
            epoch,
            split: Split::Val,
            loss: val_loss,
            accuracy: val_acc,
            lr,
            trainable_params,
            wall_time: started.elapsed().as_secs_f64(),
        });
        if val_acc > best.best_val_accuracy {
            best.best_val_accuracy = val_acc;
            best.best_epoch = epoch;
            best.best_trainable = snapshot_trainable(store);
        }
    }

    // evaluate test with the best-validation parameters
    restore_records(store, &best.best_trainable)?;
    let (test_loss, test_acc) = evaluate(backbone, store, plan, data, Split::Test, cfg.batch_size)?;
    metrics.push(MetricsRecord {
        epoch: best.best_epoch,
        split: Split::Test,
        loss: test_loss,
        accuracy: test_acc,
        lr,
        trainable_params,
        wall_time: started.elapsed().as_secs_f64(),
    });

    best.test_accuracy = test_acc;
    best.metrics = metrics;
    Ok(best)
}

/// Writes the metrics CSV (schema `petl-metrics v1`).
///
/// The wall_time column is written as a constant `0.000`: run output must
/// be byte-identical for identical (config, seed), and elapsed time is
/// the one field that cannot be. Measured times stay available on
/// [`MetricsRecord::wall_time`] and in the run log.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# schema: petl-metrics v1")?;
    writeln!(f, "epoch,split,loss,accuracy,lr,trainable_params,wall_time")?;
    for r in records {
        writeln!(
            f,
            "{},{},{:.6},{:.6},{:.6e},{},0.000",
            r.epoch, r.split, r.loss, r.accuracy, r.lr, r.trainable_params
        )?;
    }
    f.flush()?;
    Ok(())
}
