//! Position-sensitive synthetic sequence tasks.
//!
//! A sequence of length `seq` holds a uniformly random source half followed
//! by the target half: an exact copy, or the source reversed. Only
//! predictions of target tokens are scored, so solving either task requires
//! attending to a specific earlier position.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            other => Err(Error::Parameter(format!(
                "unknown synthetic task `{other}`"
            ))),
        }
    }
}

/// Target half for a given source half.
pub fn target_for(kind: TaskKind, source: &[usize]) -> Vec<usize> {
    match kind {
        TaskKind::Copy => source.to_vec(),
        TaskKind::Reverse => source.iter().rev().copied().collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seq: usize,
    pub vocab: usize,
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, seq: usize, vocab: usize) -> Result<Self> {
        if seq < 2 || !seq.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "task length must be even and >= 2, got {seq}"
            )));
        }
        if vocab < 4 {
            return Err(Error::Parameter(format!(
                "task vocab must be >= 4, got {vocab}"
            )));
        }
        Ok(SyntheticTask { kind, seq, vocab })
    }

    pub fn half(&self) -> usize {
        self.seq / 2
    }

    /// Targets for one sequence: position `p` predicts token `p + 1` when
    /// that token lies in the target half.
    pub fn targets(&self, tokens: &[usize]) -> Vec<Option<usize>> {
        (0..self.seq)
            .map(|p| (p + 1 >= self.half() && p + 1 < self.seq).then(|| tokens[p + 1]))
            .collect()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<usize> {
        let source: Vec<usize> = (0..self.half())
            .map(|_| rng.gen_range(0..self.vocab))
            .collect();
        let mut tokens = source.clone();
        tokens.extend(target_for(self.kind, &source));
        tokens
    }

    pub fn sample_batch(
        &self,
        batch: usize,
        rng: &mut impl Rng,
    ) -> Result<(TokenBatch, Vec<Option<usize>>)> {
        let mut ids = Vec::with_capacity(batch * self.seq);
        let mut targets = Vec::with_capacity(batch * self.seq);
        for _ in 0..batch {
            let tokens = self.sample(rng);
            targets.extend(self.targets(&tokens));
            ids.extend(tokens);
        }
        Ok((TokenBatch::new(batch, self.seq, ids)?, targets))
    }
}

/// `batch` examples of `kind` drawn from an rng seeded with `seed`.
pub fn make_synthetic_task(
    kind: TaskKind,
    seq: usize,
    vocab: usize,
    seed: u64,
    batch: usize,
) -> Result<(TokenBatch, Vec<Option<usize>>)> {
    use rand::SeedableRng;
    let task = SyntheticTask::new(kind, seq, vocab)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    task.sample_batch(batch, &mut rng)
}
