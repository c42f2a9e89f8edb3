//! Mini-batch index sampling.
//!
//! Draws are i.i.d. with replacement. Instance sampling picks an instance
//! uniformly, so class `j` is hit with probability `n_j / n`; class-balanced
//! sampling picks a class uniformly and then an instance uniformly inside it.

use serde::{Deserialize, Serialize};

use crate::data::{uniform_index, Dataset};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingKind {
    Instance,
    ClassBalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingStrategy {
    pub kind: SamplingKind,
    pub seed: u64,
}

/// Probability that a draw lands in each class.
pub fn class_probabilities(d: &Dataset, kind: SamplingKind) -> Vec<f64> {
    let counts = d.class_counts();
    match kind {
        SamplingKind::Instance => {
            let n = d.len() as f64;
            counts.iter().map(|&c| c as f64 / n).collect()
        }
        SamplingKind::ClassBalanced => vec![1.0 / counts.len() as f64; counts.len()],
    }
}

/// Endless stream of fixed-size index batches over one dataset.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    members: Vec<Vec<usize>>,
    batch_size: usize,
    strategy: SamplingStrategy,
    rng: Rng,
}

impl<'a> BatchIterator<'a> {
    pub fn new(
        dataset: &'a Dataset,
        batch_size: usize,
        strategy: SamplingStrategy,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if dataset.is_empty() {
            return Err(Error::Validation(
                "cannot sample from an empty dataset".into(),
            ));
        }
        let members = dataset.class_members();
        if strategy.kind == SamplingKind::ClassBalanced {
            if let Some(j) = members.iter().position(Vec::is_empty) {
                return Err(Error::Validation(format!(
                    "class-balanced sampling needs every class populated; class {j} is empty"
                )));
            }
        }
        Ok(BatchIterator {
            dataset,
            members,
            batch_size,
            strategy,
            rng: rng::rng_for(strategy.seed, rng::stream::SAMPLER),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// One draw.
    pub fn next_index(&mut self) -> usize {
        match self.strategy.kind {
            SamplingKind::Instance => uniform_index(&mut self.rng, self.dataset.len()),
            SamplingKind::ClassBalanced => {
                let class = uniform_index(&mut self.rng, self.members.len());
                let within = &self.members[class];
                within[uniform_index(&mut self.rng, within.len())]
            }
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        (0..self.batch_size).map(|_| self.next_index()).collect()
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

/// Number of batches that make up one epoch: `ceil(n / batch_size)`.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}
