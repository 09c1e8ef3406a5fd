// Copyright 2026 The peftsearch Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Synthetic sequence-classification tasks standing in for real benchmarks.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Label is the first token modulo the class count.
    CopyClass,
    /// Label is the parity of the number of odd tokens.
    Parity,
    /// Label is the most frequent token class (`token % classes`), ties to
    /// the smaller class.
    Majority,
    /// The first token is a key that points at position
    /// `1 + key % (seq_len - 1)`; the label is that token modulo the class
    /// count.
    KeyedLookup,
}

impl TaskKind {
    pub fn max_classes(self, vocab_size: usize) -> usize {
        match self {
            TaskKind::Parity => 2,
            _ => vocab_size,
        }
    }

    pub fn label(self, tokens: &[usize], num_classes: usize) -> usize {
        match self {
            TaskKind::CopyClass => tokens[0] % num_classes,
            TaskKind::Parity => tokens.iter().filter(|&&t| t % 2 == 1).count() % 2,
            TaskKind::Majority => {
                let mut counts = vec![0usize; num_classes];
                for &t in tokens {
                    counts[t % num_classes] += 1;
                }
                let mut best = 0;
                for c in 1..num_classes {
                    if counts[c] > counts[best] {
                        best = c;
                    }
                }
                best
            }
            TaskKind::KeyedLookup => {
                let pos = 1 + tokens[0] % (tokens.len() - 1);
                tokens[pos] % num_classes
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, vocab_size: usize, seq_len: usize, num_classes: usize) -> Self {
        Self {
            kind,
            vocab_size,
            seq_len,
            num_classes,
            num_train: 1024,
            num_val: 256,
            num_test: 512,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("num_classes", self.num_classes),
            ("num_train", self.num_train),
            ("num_val", self.num_val),
            ("num_test", self.num_test),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("task {name} must be positive")));
        }
        let max = self.kind.max_classes(self.vocab_size);
        if self.num_classes > max {
            return Err(Error::TaskClasses {
                requested: self.num_classes,
                max,
            });
        }
        if self.num_classes < 2 {
            return Err(Error::Config("task needs at least 2 classes".into()));
        }
        if self.kind == TaskKind::KeyedLookup && self.seq_len < 2 {
            return Err(Error::Config("keyed-lookup needs seq_len >= 2".into()));
        }
        let total = self.num_train + self.num_val + self.num_test;
        let space = (self.vocab_size as f64).powi(self.seq_len as i32);
        if (total as f64) > space {
            return Err(Error::Config(format!(
                "{total} distinct sequences requested but only {space} exist"
            )));
        }
        Ok(())
    }
}

/// A labelled set of fixed-length token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    seq_len: usize,
    tokens: Vec<usize>,
    labels: Vec<usize>,
}

/// A batch ready for the backbone: `ids` is `[batch * seq_len]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn sequence(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut ids = Vec::with_capacity(indices.len() * self.seq_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            ids.extend_from_slice(self.sequence(i));
            labels.push(self.labels[i]);
        }
        Batch {
            ids,
            labels,
            seq_len: self.seq_len,
        }
    }

    /// Uniform draw with replacement.
    pub fn sample_batch(&self, rng: &mut StreamRng, size: usize) -> Batch {
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        self.batch(&idx)
    }

    /// Consecutive batches covering the whole set in order.
    pub fn batches(&self, size: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size.max(1)).map(|c| self.batch(c)).collect()
    }

    /// Splits into two halves (first half gets the extra element).
    pub fn halves(&self) -> (Dataset, Dataset) {
        let cut = self.len().div_ceil(2);
        let s = self.seq_len;
        (
            Dataset {
                seq_len: s,
                tokens: self.tokens[..cut * s].to_vec(),
                labels: self.labels[..cut].to_vec(),
            },
            Dataset {
                seq_len: s,
                tokens: self.tokens[cut * s..].to_vec(),
                labels: self.labels[cut..].to_vec(),
            },
        )
    }
}

/// Train / validation / test splits with no sequence shared between them.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn generate_task(task: &SyntheticTask) -> Result<SplitData> {
    task.validate()?;
    let mut rng = rng::stream(task.seed, "task");
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut draw = |n: usize| {
        let mut tokens = Vec::with_capacity(n * task.seq_len);
        let mut labels = Vec::with_capacity(n);
        while labels.len() < n {
            let seq: Vec<usize> = (0..task.seq_len)
                .map(|_| rng.random_range(0..task.vocab_size))
                .collect();
            if !seen.insert(seq.clone()) {
                continue;
            }
            labels.push(task.kind.label(&seq, task.num_classes));
            tokens.extend(seq);
        }
        Dataset {
            seq_len: task.seq_len,
            tokens,
            labels,
        }
    };
    let train = draw(task.num_train);
    let val = draw(task.num_val);
    let test = draw(task.num_test);
    Ok(SplitData { train, val, test })
}
