//! Labelled text records and their train/dev/test split.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::label_tree::CodeTree;
use crate::objectives::Task;
use crate::rng::{stream, Stream};
use crate::text_encoder::split_words;

pub const TEST_FRACTION: f64 = 0.20;
pub const DEV_FRACTION: f64 = 0.16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub text: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Statistics {
    pub num_records: usize,
    pub num_labels: usize,
    pub mean_tokens: f64,
    pub mean_labels: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub task: Task,
    pub splits: Splits,
}

impl Dataset {
    /// Validates `records` and splits them 64/16/20 with `seed`. Multi-class
    /// splits are stratified per label.
    pub fn new(records: Vec<Record>, task: Task, seed: u64) -> Result<Self> {
        validate_records(&records, task)?;
        let splits = split(&records, task, seed);
        let ds = Self {
            records,
            task,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_splits(records: Vec<Record>, task: Task, splits: Splits) -> Result<Self> {
        validate_records(&records, task)?;
        let ds = Self {
            records,
            task,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.splits.train,
            SplitName::Dev => &self.splits.dev,
            SplitName::Test => &self.splits.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_records(&self.records, self.task)?;
        let mut seen = alloc::vec![false; self.records.len()];
        for &i in self
            .splits
            .train
            .iter()
            .chain(&self.splits.dev)
            .chain(&self.splits.test)
        {
            if i >= seen.len() || seen[i] {
                return Err(Error::InvalidDataset("split indices do not partition the records".into()));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidDataset("split indices do not cover every record".into()));
        }
        Ok(())
    }

    /// Fails if any record carries a label that is not a tree target.
    pub fn check_labels(&self, tree: &CodeTree) -> Result<()> {
        for r in &self.records {
            for l in &r.labels {
                match tree.lookup(l) {
                    Some(id) if tree.node(id).is_target => {}
                    _ => return Err(Error::LabelNotTarget(l.clone())),
                }
            }
        }
        Ok(())
    }

    pub fn statistics(&self) -> Statistics {
        let n = self.records.len().max(1) as f64;
        let mut labels = BTreeMap::new();
        let (mut tokens, mut label_total) = (0usize, 0usize);
        for r in &self.records {
            tokens += split_words(&r.text).len();
            label_total += r.labels.len();
            for l in &r.labels {
                labels.insert(l.as_str(), ());
            }
        }
        Statistics {
            num_records: self.records.len(),
            num_labels: labels.len(),
            mean_tokens: tokens as f64 / n,
            mean_labels: label_total as f64 / n,
        }
    }

    /// Occurrences of each label among the given records.
    pub fn label_counts(&self, indices: &[usize]) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for &i in indices {
            for l in &self.records[i].labels {
                *counts.entry(l.clone()).or_default() += 1;
            }
        }
        counts
    }
}

fn validate_records(records: &[Record], task: Task) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if r.text.trim().is_empty() {
            return Err(Error::InvalidDataset(alloc::format!("record {i} has empty text")));
        }
        if r.labels.is_empty() {
            return Err(Error::InvalidDataset(alloc::format!("record {i} has no labels")));
        }
        if task == Task::MultiClass && r.labels.len() != 1 {
            return Err(Error::InvalidDataset(alloc::format!(
                "multi-class record {i} has {} labels",
                r.labels.len()
            )));
        }
    }
    Ok(())
}

fn cut(n: usize) -> (usize, usize) {
    let test = crate::math::round(n as f64 * TEST_FRACTION) as usize;
    let dev = crate::math::round(n as f64 * DEV_FRACTION) as usize;
    (test.min(n), dev.min(n - test.min(n)))
}

fn split(records: &[Record], task: Task, seed: u64) -> Splits {
    let mut rng = stream(seed, Stream::Split);
    let mut splits = Splits::default();
    let mut assign = |mut idx: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng| {
        idx.shuffle(rng);
        let (test, dev) = cut(idx.len());
        splits.test.extend_from_slice(&idx[..test]);
        splits.dev.extend_from_slice(&idx[test..test + dev]);
        splits.train.extend_from_slice(&idx[test + dev..]);
    };
    match task {
        Task::MultiClass => {
            let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, r) in records.iter().enumerate() {
                by_label.entry(r.labels[0].as_str()).or_default().push(i);
            }
            for (_, idx) in by_label {
                assign(idx, &mut rng);
            }
        }
        Task::MultiLabel => assign((0..records.len()).collect(), &mut rng),
    }
    splits.train.sort_unstable();
    splits.dev.sort_unstable();
    splits.test.sort_unstable();
    splits
}
