//! Synthetic spectrogram classification tasks.
//!
//! Two pattern families stand in for pretraining and transfer data:
//! `Bands` places class-specific horizontal tone stacks, `Chirps` draws
//! class-specific sloped lines that sweep across time. Classes are
//! separable by construction; a nearest-centroid classifier confirms it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::SpectrogramBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pattern family a task draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PatternFamily {
    /// Horizontal tone stacks at class-specific rows, constant over time.
    Bands,
    /// Lines sweeping across time with class-specific slope and origin.
    Chirps,
}

/// Generator settings for one task.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SyntheticTaskSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub freq_bins: usize,
    pub time_bins: usize,
    pub family: PatternFamily,
    /// Parallel tones per pattern.
    pub tone_count: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("task needs classes and samples".into()));
        }
        if self.freq_bins == 0 || self.time_bins == 0 || self.tone_count == 0 {
            return Err(Error::Config("task dimensions must be positive".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise std must be non-negative".into()));
        }
        Ok(())
    }
}

/// One labeled spectrogram, flattened row-major `[F * T]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// A generated task with disjoint 70/15/15 splits, stratified per class.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> &[Sample] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn all_samples(&self) -> Vec<&Sample> {
        self.train.iter().chain(&self.val).chain(&self.test).collect()
    }

    /// Fixed-order batches of a split.
    pub fn batches(&self, which: Split, batch_size: usize) -> Result<Vec<SpectrogramBatch>> {
        let idx: Vec<usize> = (0..self.split(which).len()).collect();
        self.batches_by_index(which, &idx, batch_size)
    }

    /// Batches over an explicit index order (used for shuffled epochs).
    pub fn batches_by_index(
        &self,
        which: Split,
        order: &[usize],
        batch_size: usize,
    ) -> Result<Vec<SpectrogramBatch>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let samples = self.split(which);
        let (f, t) = (self.spec.freq_bins, self.spec.time_bins);
        let mut out = Vec::new();
        for chunk in order.chunks(batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * f * t);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                data.extend_from_slice(&samples[i].x);
                labels.push(samples[i].label);
            }
            let x = Tensor::new(data, &[chunk.len(), f, t])?;
            out.push(SpectrogramBatch::new(x, labels)?);
        }
        Ok(out)
    }
}

/// Deterministic task generation under the spec's seed.
pub fn gen_synthetic_task(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let n = spec.samples_per_class;
    let n_train = (n * 70) / 100;
    let n_val = (n * 15) / 100;
    for class in 0..spec.n_classes {
        for i in 0..n {
            let sample = gen_sample(spec, class, &mut rng);
            if i < n_train {
                train.push(sample);
            } else if i < n_train + n_val {
                val.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(Dataset { spec: *spec, train, val, test })
}

fn gen_sample(spec: &SyntheticTaskSpec, class: usize, rng: &mut ChaCha8Rng) -> Sample {
    let (f, t) = (spec.freq_bins, spec.time_bins);
    let mut x = vec![0.0; f * t];
    let row_jitter = rng.gen_range(-1i64..=1);
    let col_jitter = rng.gen_range(-1i64..=1);
    let amp = rng.gen_range(0.85..1.15);
    let tone_gap = 3usize;
    match spec.family {
        PatternFamily::Bands => {
            // dense stack inside the class's stripe of the frequency axis
            let base = (class * f) / spec.n_classes;
            for tone in 0..spec.tone_count {
                let row = wrap(base as i64 + tone as i64 + row_jitter, f);
                for col in 0..t {
                    x[row * t + col] += amp;
                }
            }
        }
        PatternFamily::Chirps => {
            // gentle sweeps: each class owns a frequency band plus a
            // slope direction, so both local and positional cues matter
            const SLOPES: [f64; 6] = [0.25, -0.25, 0.5, -0.5, 0.375, -0.375];
            let slope = SLOPES[class % SLOPES.len()];
            let anchor = ((class * f) / spec.n_classes + 2) % f;
            let pivot = t as f64 / 2.0;
            for tone in 0..spec.tone_count {
                for col in 0..t {
                    let center = anchor as f64
                        + (tone * tone_gap) as f64
                        + slope * ((col as i64 + col_jitter) as f64 - pivot);
                    let row = wrap(center.round() as i64 + row_jitter, f);
                    x[row * t + col] += amp;
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        use rand_distr::{Distribution, Normal};
        let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
        for v in x.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    Sample { x, label: class }
}

fn wrap(v: i64, modulus: usize) -> usize {
    v.rem_euclid(modulus as i64) as usize
}

/// Writes a dataset cache in the checkpoint record format: per split,
/// an `<split>.x` tensor `[N, F, T]` and a `<split>.y` label vector.
pub fn save_dataset(dataset: &Dataset, path: &std::path::Path) -> Result<()> {
    use crate::checkpoint::{write_records, Record};
    use crate::store::ParamRole;
    let spec = &dataset.spec;
    let family = match spec.family {
        PatternFamily::Bands => 0.0,
        PatternFamily::Chirps => 1.0,
    };
    let meta = vec![
        spec.n_classes as f64,
        spec.samples_per_class as f64,
        spec.freq_bins as f64,
        spec.time_bins as f64,
        family,
        spec.tone_count as f64,
        spec.noise_std,
        spec.seed as f64,
    ];
    let mut records = vec![Record {
        id: "meta.spec".into(),
        role: ParamRole::Buffer,
        trainable: false,
        shape: vec![meta.len()],
        data: meta,
    }];
    for (name, samples) in [("train", &dataset.train), ("val", &dataset.val), ("test", &dataset.test)] {
        let n = samples.len();
        let mut x = Vec::with_capacity(n * spec.freq_bins * spec.time_bins);
        let mut y = Vec::with_capacity(n);
        for s in samples {
            x.extend_from_slice(&s.x);
            y.push(s.label as f64);
        }
        records.push(Record {
            id: format!("{name}.x"),
            role: ParamRole::Buffer,
            trainable: false,
            shape: vec![n, spec.freq_bins, spec.time_bins],
            data: x,
        });
        records.push(Record {
            id: format!("{name}.y"),
            role: ParamRole::Buffer,
            trainable: false,
            shape: vec![n],
            data: y,
        });
    }
    write_records(path, &records)
}

/// Reads a dataset cache written by [`save_dataset`].
pub fn load_dataset(path: &std::path::Path) -> Result<Dataset> {
    use crate::checkpoint::read_records;
    let records = read_records(path)?;
    let find = |id: &str| {
        records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Format(format!("dataset cache missing {id:?}")))
    };
    let meta = &find("meta.spec")?.data;
    if meta.len() != 8 {
        return Err(Error::Format("dataset cache has malformed metadata".into()));
    }
    let spec = SyntheticTaskSpec {
        n_classes: meta[0] as usize,
        samples_per_class: meta[1] as usize,
        freq_bins: meta[2] as usize,
        time_bins: meta[3] as usize,
        family: if meta[4] == 0.0 { PatternFamily::Bands } else { PatternFamily::Chirps },
        tone_count: meta[5] as usize,
        noise_std: meta[6],
        seed: meta[7] as u64,
    };
    let mut splits = Vec::new();
    for name in ["train", "val", "test"] {
        let x = find(&format!("{name}.x"))?;
        let y = find(&format!("{name}.y"))?;
        let dim = spec.freq_bins * spec.time_bins;
        let samples: Vec<Sample> = y
            .data
            .iter()
            .enumerate()
            .map(|(i, &label)| Sample {
                x: x.data[i * dim..(i + 1) * dim].to_vec(),
                label: label as usize,
            })
            .collect();
        splits.push(samples);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset { spec, train, val, test })
}

/// Nearest-centroid classification accuracy: centroids from `train`,
/// evaluation on `test`. Used as the separability oracle.
pub fn nearest_centroid_accuracy(train: &[Sample], test: &[Sample], n_classes: usize) -> f64 {
    if train.is_empty() || test.is_empty() {
        return 0.0;
    }
    let dim = train[0].x.len();
    let mut centroids = vec![vec![0.0f64; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for s in train {
        counts[s.label] += 1;
        for (c, &v) in centroids[s.label].iter_mut().zip(&s.x) {
            *c += v;
        }
    }
    for (centroid, &count) in centroids.iter_mut().zip(&counts) {
        if count > 0 {
            for c in centroid.iter_mut() {
                *c /= count as f64;
            }
        }
    }
    let mut correct = 0usize;
    for s in test {
        let mut best = (f64::INFINITY, 0usize);
        for (label, centroid) in centroids.iter().enumerate() {
            let dist: f64 = centroid.iter().zip(&s.x).map(|(c, v)| (c - v) * (c - v)).sum();
            if dist < best.0 {
                best = (dist, label);
            }
        }
        if best.1 == s.label {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}
