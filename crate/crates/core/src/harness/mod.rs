//! Experiment machinery: synthetic tasks, optimization, training,
//! sampling protocols, and gradient verification.

mod gradcheck;
mod optim;
mod split;
mod synthetic;
mod train;

pub use gradcheck::{
    gradcheck, gradcheck_with_corruption, probe_coordinate, randomize_trainable, GradCheckReport,
    ProbeOutcome, FD_STEP,
};
pub use optim::{cosine_lr, AdamW};
pub use split::{few_shot_subsample, kfold_split, Fold};
pub use synthetic::{
    gen_synthetic_task, nearest_centroid_accuracy, Dataset, PatternFamily, Sample, Split,
    SyntheticTaskSpec,
};
pub use train::{train, write_metrics_csv, MetricsRecord, TrainConfig, TrainOutput};

/// Splitmix64 step; used to derive independent sub-seeds from a master
/// seed and a stream tag.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
