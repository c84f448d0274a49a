use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Graph};
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for f in [self.train_fraction, self.val_fraction, self.test_fraction] {
            ensure!(f > 0.0 && f < 1.0, Argument, "split fraction {f} not in (0, 1)");
        }
        let total = self.train_fraction + self.val_fraction + self.test_fraction;
        ensure!((total - 1.0).abs() <= 1e-9, Argument, "split fractions sum to {total}, not 1");
        Ok(())
    }

    fn cut(&self, n: usize) -> (usize, usize) {
        let train = ((self.train_fraction * n as f64).round() as usize).min(n);
        let val = ((self.val_fraction * n as f64).round() as usize).min(n - train);
        (train, val)
    }
}

/// Disjoint train/val/test partition. Stratified mode splits every class
/// separately, so each split's class counts are within one graph of the
/// exact proportion.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        let counts = dataset.class_counts();
        if let Some((k, c)) = counts.iter().enumerate().find(|(_, &c)| c < 3) {
            return Err(crate::error::Error::Argument(format!(
                "class {k} has {c} graphs; stratified split needs at least 3"
            )));
        }
        (0..dataset.num_classes)
            .map(|k| (0..dataset.len()).filter(|&i| dataset.graphs[i].label == k).collect())
            .collect()
    } else {
        vec![(0..dataset.len()).collect()]
    };

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut idx in groups {
        idx.shuffle(&mut rng);
        let (n_train, n_val) = spec.cut(idx.len());
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    }
    let take = |mut idx: Vec<usize>| {
        idx.sort_unstable();
        dataset.with_graphs(idx.into_iter().map(|i| dataset.graphs[i].clone()).collect())
    };
    Ok((take(train), take(val), take(test)))
}

/// Iterator over batches of a dataset; one full pass, last batch may be short.
pub struct Minibatches<'a> {
    graphs: &'a [Graph],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Iterator for Minibatches<'a> {
    type Item = Vec<&'a Graph>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].iter().map(|&i| &self.graphs[i]).collect();
        self.pos = end;
        Some(batch)
    }
}

pub fn minibatch(dataset: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Minibatches<'_> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Minibatches {
        graphs: &dataset.graphs,
        order,
        batch_size: batch_size.max(1),
        pos: 0,
    }
}
