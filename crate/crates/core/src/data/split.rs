use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LabelAssignment, LabeledDataset};
use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Splits per full label tuple so every class keeps its proportion in each
/// partition, up to rounding. Examples keep their original order.
pub fn stratified_split(data: &LabeledDataset, test_frac: f64, val_frac: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&test_frac) || !(0.0..1.0).contains(&val_frac) || test_frac + val_frac >= 1.0 {
        bail!(
            Config,
            "split fractions test={} val={} must be non-negative and sum below 1",
            test_frac,
            val_frac
        );
    }
    let partitions = 1 + (test_frac > 0.0) as usize + (val_frac > 0.0) as usize;
    let mut groups: BTreeMap<&LabelAssignment, Vec<usize>> = BTreeMap::new();
    for (i, e) in data.examples.iter().enumerate() {
        groups.entry(&e.labels).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 0 train, 1 val, 2 test
    let mut assign = vec![0u8; data.len()];
    for (labels, mut idx) in groups {
        let n = idx.len();
        if n < partitions {
            bail!(
                Data,
                "class {:?} has {} items for {} partitions",
                labels.0,
                n,
                partitions
            );
        }
        idx.shuffle(&mut rng);
        let mut n_test = round_half_up(test_frac * n as f64);
        let mut n_val = round_half_up(val_frac * n as f64);
        if test_frac > 0.0 {
            n_test = n_test.max(1);
        }
        if val_frac > 0.0 {
            n_val = n_val.max(1);
        }
        while n_test + n_val >= n {
            if n_val >= n_test && n_val > 1 {
                n_val -= 1;
            } else {
                n_test -= 1;
            }
        }
        for &i in &idx[..n_test] {
            assign[i] = 2;
        }
        for &i in &idx[n_test..n_test + n_val] {
            assign[i] = 1;
        }
    }
    let pick = |which: u8| {
        let ex = data
            .examples
            .iter()
            .zip(&assign)
            .filter(|(_, a)| **a == which)
            .map(|(e, _)| e.clone())
            .collect();
        LabeledDataset {
            head_classes: data.head_classes.clone(),
            examples: ex,
        }
    };
    Ok(Split {
        train: pick(0),
        val: pick(1),
        test: pick(2),
    })
}
