//! Few-shot subsampling and stratified k-fold splitting.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::synthetic::{Dataset, Sample};

/// Keeps exactly `shots` training samples per class (stratified,
/// deterministic under `seed`); validation and test splits are untouched.
pub fn few_shot_subsample(dataset: &Dataset, shots: usize, seed: u64) -> Result<Dataset> {
    if shots == 0 {
        return Err(Error::Config("shots must be >= 1".into()));
    }
    let n_classes = dataset.spec.n_classes;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, s) in dataset.train.iter().enumerate() {
        per_class[s.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(shots * n_classes);
    for (class, indices) in per_class.iter_mut().enumerate() {
        if indices.len() < shots {
            return Err(Error::Config(format!(
                "class {class} has only {} training samples, need {shots}",
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
        keep.extend(indices[..shots].iter().copied());
    }
    keep.sort_unstable();
    let train: Vec<Sample> = keep.into_iter().map(|i| dataset.train[i].clone()).collect();
    Ok(Dataset {
        spec: dataset.spec,
        train,
        val: dataset.val.clone(),
        test: dataset.test.clone(),
    })
}

/// One cross-validation fold.
#[derive(Debug, Clone)]
pub struct Fold {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Stratified k-fold split over all samples of the dataset. Folds are
/// disjoint, cover the data exactly once, and keep per-fold class
/// distributions within one item of the global distribution.
pub fn kfold_split(dataset: &Dataset, k: usize) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let n_classes = dataset.spec.n_classes;
    let all: Vec<&Sample> = dataset.all_samples();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, s) in all.iter().enumerate() {
        per_class[s.label].push(i);
    }
    if let Some((class, items)) = per_class.iter().enumerate().find(|(_, v)| v.len() < k) {
        return Err(Error::Config(format!(
            "class {class} has {} samples, fewer than {k} folds",
            items.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dataset.spec.seed ^ 0x6b66_6f6c_64);
    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for indices in per_class.iter_mut() {
        indices.shuffle(&mut rng);
        for (j, &i) in indices.iter().enumerate() {
            fold_members[j % k].push(i);
        }
    }
    let folds = fold_members
        .into_iter()
        .map(|members| {
            let in_fold: std::collections::BTreeSet<usize> = members.iter().copied().collect();
            Fold {
                train: all
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !in_fold.contains(i))
                    .map(|(_, s)| (*s).clone())
                    .collect(),
                test: members.iter().map(|&i| all[i].clone()).collect(),
            }
        })
        .collect();
    Ok(folds)
}
