use serde::{Deserialize, Serialize};

use crate::error::{MsmError, Result};
use crate::rng;

/// `folds` folds over subjects bundled into groups of `group_size`
/// consecutive items; a group is never split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub folds: usize,
    pub group_size: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { folds: 5, group_size: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles whole groups with `seed` and deals them round-robin into folds.
pub fn grouped_kfold(n_items: usize, split: &SplitSpec, seed: u64) -> Result<Vec<Fold>> {
    let SplitSpec { folds, group_size } = *split;
    if folds == 0 || group_size == 0 {
        return Err(MsmError::arg("folds and group_size must be positive"));
    }
    if n_items % group_size != 0 {
        return Err(MsmError::arg(format!("{n_items} items do not divide into groups of {group_size}")));
    }
    let n_groups = n_items / group_size;
    if n_groups < folds {
        return Err(MsmError::arg(format!("{n_groups} groups cannot fill {folds} folds")));
    }
    let mut groups: Vec<usize> = (0..n_groups).collect();
    rng::shuffle(&mut groups, &mut rng::substream(seed, 0xF01D));
    let mut owner = vec![0; n_groups];
    for (slot, &g) in groups.iter().enumerate() {
        owner[g] = slot % folds;
    }
    Ok((0..folds)
        .map(|k| {
            let (test, train) = (0..n_items).partition(|&i| owner[i / group_size] == k);
            Fold { index: k, train, test }
        })
        .collect())
}
