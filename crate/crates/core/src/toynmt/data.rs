//! Synthetic sequence-to-sequence tasks over the toy vocabulary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::planner::FrequencyTable;

pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const FIRST_CONTENT_TOKEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
}

impl std::str::FromStr for Task {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            _ => Err(crate::Error::InvalidInput(format!("unknown task {s:?}"))),
        }
    }
}

/// One training pair: decoder input is `BOS + target`, decoder output is
/// `target + EOS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub task: Task,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl SyntheticTask {
    pub fn new(task: Task, vocab: usize) -> Self {
        Self { task, vocab, min_len: 3, max_len: 6 }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Example {
        let len = rng.random_range(self.min_len..=self.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.random_range(FIRST_CONTENT_TOKEN..self.vocab)).collect();
        let target: Vec<usize> = match self.task {
            Task::Copy => src.clone(),
            Task::Reverse => src.iter().rev().copied().collect(),
        };
        let mut tgt_in = Vec::with_capacity(len + 1);
        tgt_in.push(BOS);
        tgt_in.extend_from_slice(&target);
        let mut tgt_out = target;
        tgt_out.push(EOS);
        Example { src, tgt_in, tgt_out }
    }

    pub fn batch(&self, rng: &mut impl Rng, n: usize) -> Vec<Example> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// A fixed evaluation set drawn from its own seeded stream.
    pub fn eval_set(&self, seed: u64, n: usize) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
        self.batch(&mut rng, n)
    }

    /// Token counts over source and target sides of `examples`.
    pub fn frequency_table(&self, examples: &[Example]) -> FrequencyTable {
        let mut counts = vec![0u64; self.vocab];
        for e in examples {
            for &t in e.src.iter().chain(&e.tgt_out).chain(&e.tgt_in) {
                counts[t] += 1;
            }
        }
        FrequencyTable::from_counts(counts)
    }
}
