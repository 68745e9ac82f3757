//! Synthetic parallel corpora standing in for translation domains.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Pair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Token-wise substitution by a permutation derived from `key`.
    Cipher { key: u64 },
    /// Add `k` modulo the vocabulary.
    Shift { k: u32 },
    Sort,
}

impl TaskKind {
    pub fn label(&self) -> String {
        match self {
            TaskKind::Copy => "copy".into(),
            TaskKind::Reverse => "reverse".into(),
            TaskKind::Cipher { key } => format!("cipher({key})"),
            TaskKind::Shift { k } => format!("shift({k})"),
            TaskKind::Sort => "sort".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub task: TaskKind,
    /// Content tokens are `0..vocab_size`.
    pub vocab_size: u32,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Probability that a training-split target token is replaced by a random token.
    #[serde(default)]
    pub noise: f64,
}

impl SyntheticDomainSpec {
    pub fn new(name: &str, task: TaskKind, vocab_size: u32, len: (usize, usize), sizes: (usize, usize, usize)) -> Self {
        SyntheticDomainSpec {
            name: name.to_string(),
            task,
            vocab_size,
            min_len: len.0,
            max_len: len.1,
            train: sizes.0,
            dev: sizes.1,
            test: sizes.2,
            noise: 0.0,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::contract("domain name must be non-empty"));
        }
        if self.vocab_size == 0 {
            return Err(Error::contract("vocabulary must be non-empty"));
        }
        if let TaskKind::Cipher { .. } = self.task {
            if self.vocab_size < 2 {
                return Err(Error::contract("a substitution cipher needs at least two tokens"));
            }
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::contract(format!("noise {} outside [0, 1]", self.noise)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::contract(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        let needed = self.train + self.dev + self.test;
        let distinct = (self.min_len..=self.max_len)
            .map(|l| (self.vocab_size as f64).powi(l as i32))
            .sum::<f64>();
        // Rejection sampling stays cheap while the request is well below the population.
        if (needed as f64) > distinct / 2.0 {
            return Err(Error::contract(format!(
                "cannot draw {needed} distinct sentences from {distinct} possibilities"
            )));
        }
        Ok(())
    }
}

/// Train, dev and test splits, disjoint as sets of source sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCorpus {
    pub name: String,
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub test: Vec<Pair>,
}

fn cipher_table(vocab: u32, key: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut table: Vec<u32> = (0..vocab).collect();
    // A derangement keeps the cipher distinct from copying.
    loop {
        table.shuffle(&mut rng);
        if table.iter().enumerate().all(|(i, &t)| i as u32 != t) {
            return table;
        }
    }
}

pub fn apply_task(task: &TaskKind, vocab: u32, src: &[u32]) -> Vec<u32> {
    match *task {
        TaskKind::Copy => src.to_vec(),
        TaskKind::Reverse => src.iter().rev().copied().collect(),
        TaskKind::Cipher { key } => {
            let table = cipher_table(vocab, key);
            src.iter().map(|&t| table[t as usize]).collect()
        }
        TaskKind::Shift { k } => src.iter().map(|&t| (t + k) % vocab).collect(),
        TaskKind::Sort => {
            let mut v = src.to_vec();
            v.sort_unstable();
            v
        }
    }
}

pub fn gen_synthetic_domain(spec: &SyntheticDomainSpec, seed: u64) -> Result<DomainCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = match spec.task {
        TaskKind::Cipher { key } => Some(cipher_table(spec.vocab_size, key)),
        _ => None,
    };
    let needed = spec.train + spec.dev + spec.test;
    let mut seen = HashSet::with_capacity(needed);
    let mut pairs = Vec::with_capacity(needed);
    while pairs.len() < needed {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let src: Vec<u32> = (0..len).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
        if !seen.insert(src.clone()) {
            continue;
        }
        let tgt = match &table {
            Some(t) => src.iter().map(|&x| t[x as usize]).collect(),
            None => apply_task(&spec.task, spec.vocab_size, &src),
        };
        pairs.push(Pair::new(src, tgt));
    }
    let test = pairs.split_off(spec.train + spec.dev);
    let dev = pairs.split_off(spec.train);
    if spec.noise > 0.0 {
        for p in &mut pairs {
            for t in &mut p.tgt {
                if rng.gen_bool(spec.noise) {
                    *t = rng.gen_range(0..spec.vocab_size);
                }
            }
        }
    }
    Ok(DomainCorpus {
        name: spec.name.clone(),
        train: pairs,
        dev,
        test,
    })
}
