//! Stratified k-fold partitioning.

use rand::seq::SliceRandom;

use crate::error::{contract, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits indices `0..labels.len()` into `folds` stratified folds.
///
/// Each class's indices are shuffled, the classes are concatenated in label
/// order, and the sequence is dealt round-robin across folds. Per-class and
/// total fold sizes therefore differ by at most one. Index lists are sorted.
pub fn kfold_split(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<Fold>> {
    let n = labels.len();
    if folds < 2 {
        return Err(contract(format!("need at least 2 folds, got {folds}")));
    }
    if folds > n {
        return Err(contract(format!(
            "{folds} folds requested for {n} examples"
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = seeded(seed);
    let mut order = Vec::with_capacity(n);
    for mut members in by_class {
        members.shuffle(&mut rng);
        order.extend(members);
    }
    let mut assignment = vec![0; n];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = pos % folds;
    }
    Ok((0..folds)
        .map(|f| {
            let (test, train) = (0..n).partition(|&i| assignment[i] == f);
            Fold { train, test }
        })
        .collect())
}
