//! Synthetic long-tailed corpus over a synthetic code tree.
//!
//! Label frequencies follow a truncated power law whose exponent is fitted
//! so the ten most frequent labels hold a requested share of all label
//! occurrences. Each label owns a token pool; siblings share part of their
//! pools, so texts of nearby labels look alike.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::dataset::{Dataset, Record};
use crate::error::{Error, Result};
use crate::label_tree::{CodeTree, NodeId};
use crate::objectives::Task;
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    /// Children per node at each level; leaves sit at level `branching.len()`.
    pub branching: Vec<usize>,
    /// Classification targets, taken from the leaves in tree order.
    pub num_labels: usize,
    pub num_samples: usize,
    /// Share of label occurrences held by the 10 most frequent labels.
    pub skew: f64,
    pub tokens_per_label: usize,
    /// Fraction of a label's pool shared with its siblings.
    pub sibling_overlap: f64,
    pub background_tokens: usize,
    /// Probability that a token comes from the shared background pool.
    pub noise_fraction: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Mean labels per record (multi-label only).
    pub labels_per_record: f64,
    pub task: Task,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            branching: alloc::vec![2, 4, 5],
            num_labels: 40,
            num_samples: 5000,
            skew: 0.402,
            tokens_per_label: 16,
            sibling_overlap: 0.5,
            background_tokens: 200,
            noise_fraction: 0.85,
            min_len: 6,
            max_len: 14,
            labels_per_record: 1.0,
            task: Task::MultiClass,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGeneratorSpec(m));
        if self.branching.is_empty() || self.branching.contains(&0) {
            return bad("branching must be non-empty and positive".into());
        }
        let leaves: usize = self.branching.iter().product();
        if self.num_labels == 0 || self.num_labels > leaves {
            return bad(format!("{} labels requested, tree has {leaves} leaves", self.num_labels));
        }
        if self.num_labels < 10 {
            return bad("skew needs at least 10 labels".into());
        }
        if !(self.skew > 0.0 && self.skew < 1.0) {
            return bad(format!("skew {} outside (0, 1)", self.skew));
        }
        if self.skew < 10.0 / self.num_labels as f64 - 1e-12 {
            return bad(format!(
                "skew {} is below the uniform share {}",
                self.skew,
                10.0 / self.num_labels as f64
            ));
        }
        if !(0.0..=1.0).contains(&self.sibling_overlap) {
            return bad(format!("sibling overlap {} outside [0, 1]", self.sibling_overlap));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return bad(format!("noise fraction {} outside [0, 1]", self.noise_fraction));
        }
        if self.tokens_per_label == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return bad("token pool and text length must be positive".into());
        }
        if self.noise_fraction > 0.0 && self.background_tokens == 0 {
            return bad("noise needs background tokens".into());
        }
        if self.num_samples == 0 {
            return bad("no samples requested".into());
        }
        if self.task == Task::MultiLabel && self.labels_per_record < 1.0 {
            return bad("multi-label records need at least one label".into());
        }
        Ok(())
    }

    /// Tokens a label shares with its siblings.
    fn shared_tokens(&self) -> usize {
        crate::math::round(self.sibling_overlap * self.tokens_per_label as f64) as usize
    }
}

/// Label probabilities `p_r ~ r^-a` for ranks `1..=n`, with `a >= 0` chosen
/// so the top 10 ranks sum to `skew`.
pub fn power_law(n: usize, skew: f64) -> Vec<f64> {
    let probs = |a: f64| -> Vec<f64> {
        let w: Vec<f64> = (1..=n).map(|r| crate::math::powf(r as f64, -a)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    };
    let top = |a: f64| probs(a).iter().take(10).sum::<f64>();
    let (mut lo, mut hi) = (0.0, 1.0);
    while top(hi) < skew && hi < 64.0 {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if top(mid) < skew {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    probs(0.5 * (lo + hi))
}

fn build_tree(spec: &GeneratorSpec) -> Result<CodeTree> {
    let mut edges: Vec<(String, String)> = Vec::new();
    let mut frontier: Vec<String> = (0..spec.branching[0]).map(|i| format!("C{i:02}")).collect();
    for code in &frontier {
        edges.push((code.clone(), String::from(crate::label_tree::ROOT_ID)));
    }
    for &b in &spec.branching[1..] {
        let mut next = Vec::new();
        for parent in &frontier {
            for i in 0..b {
                let code = format!("{parent}.{i:02}");
                edges.push((code.clone(), parent.clone()));
                next.push(code);
            }
        }
        frontier = next;
    }
    let targets: Vec<String> = frontier.into_iter().take(spec.num_labels).collect();
    CodeTree::build_from_edges(&edges, &targets)
}

/// Generates a corpus and its label tree. Deterministic in `spec.seed`.
pub fn generate(spec: &GeneratorSpec) -> Result<(Dataset, CodeTree)> {
    spec.validate()?;
    let tree = build_tree(spec)?;
    let mut rng = stream(spec.seed, Stream::Generator);

    let targets: Vec<NodeId> = tree.targets().to_vec();
    let n_labels = targets.len();

    let (background, pools) = build_pools(spec, &tree);

    // Frequent ranks land on random labels.
    let probs = power_law(n_labels, spec.skew);
    let mut rank_to_label: Vec<usize> = (0..n_labels).collect();
    rank_to_label.shuffle(&mut rng);
    let mut label_weights = alloc::vec![0.0; n_labels];
    for (rank, &label) in rank_to_label.iter().enumerate() {
        label_weights[label] = probs[rank];
    }
    let picker = WeightedIndex::new(&label_weights).map_err(|e| Error::InvalidGeneratorSpec(format!("{e}")))?;
    let extra = match spec.task {
        Task::MultiLabel if spec.labels_per_record > 1.0 => Some(
            Poisson::new(spec.labels_per_record - 1.0).map_err(|e| Error::InvalidGeneratorSpec(format!("{e}")))?,
        ),
        _ => None,
    };

    let mut records = Vec::with_capacity(spec.num_samples);
    for _ in 0..spec.num_samples {
        let k = match &extra {
            Some(p) => (1 + p.sample(&mut rng) as usize).min(n_labels),
            None => 1,
        };
        let mut labels: Vec<usize> = Vec::with_capacity(k);
        while labels.len() < k {
            let l = picker.sample(&mut rng);
            if !labels.contains(&l) {
                labels.push(l);
            }
        }
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut words: Vec<&str> = Vec::with_capacity(len);
        for _ in 0..len {
            if rng.random::<f64>() < spec.noise_fraction {
                words.push(background.choose(&mut rng).expect("background pool"));
            } else {
                let l = labels[rng.random_range(0..labels.len())];
                words.push(pools[l].choose(&mut rng).expect("label pool"));
            }
        }
        records.push(Record {
            text: words.join(" "),
            labels: labels
                .iter()
                .map(|&l| tree.node(targets[l]).id.clone())
                .collect(),
        });
    }
    let dataset = Dataset::new(records, spec.task, spec.seed)?;
    Ok((dataset, tree))
}

/// Background pool and one pool per target: the parent's shared tokens
/// followed by the label's own tokens.
fn build_pools(spec: &GeneratorSpec, tree: &CodeTree) -> (Vec<String>, Vec<Vec<String>>) {
    let mut next_token = 0usize;
    let mut fresh = |count: usize| -> Vec<String> {
        let out = (0..count).map(|k| format!("w{}", next_token + k)).collect();
        next_token += count;
        out
    };
    let background = fresh(spec.background_tokens);
    let shared = spec.shared_tokens();
    let mut parent_pools: BTreeMap<NodeId, Vec<String>> = BTreeMap::new();
    let mut pools = Vec::with_capacity(tree.num_targets());
    for &t in tree.targets() {
        let parent = tree.parent(t).expect("targets are not ROOT");
        let mut pool = parent_pools.entry(parent).or_insert_with(|| fresh(shared)).clone();
        pool.extend(fresh(spec.tokens_per_label - shared));
        pools.push(pool);
    }
    (background, pools)
}

/// Token pools of every label, keyed by label code.
pub fn token_pools(spec: &GeneratorSpec) -> Result<BTreeMap<String, Vec<String>>> {
    spec.validate()?;
    let tree = build_tree(spec)?;
    let (_, pools) = build_pools(spec, &tree);
    Ok(tree.target_codes().into_iter().zip(pools).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_law_hits_skew() {
        let p = power_law(100, 0.402);
        assert!((p.iter().take(10).sum::<f64>() - 0.402).abs() < 1e-9);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn spec_validation() {
        let ok = GeneratorSpec::default();
        assert!(ok.validate().is_ok());
        let few = GeneratorSpec {
            branching: alloc::vec![3, 3],
            num_labels: 9,
            ..ok.clone()
        };
        assert!(few.validate().is_err());
        let overlap = GeneratorSpec {
            sibling_overlap: 1.5,
            ..ok.clone()
        };
        assert!(overlap.validate().is_err());
        let skew = GeneratorSpec { skew: 1.0, ..ok };
        assert!(skew.validate().is_err());
    }

    #[test]
    fn full_overlap_shares_pools() {
        let spec = GeneratorSpec {
            sibling_overlap: 1.0,
            ..Default::default()
        };
        let pools = token_pools(&spec).unwrap();
        assert_eq!(pools["C00.00.00"], pools["C00.00.01"]);
        assert_ne!(pools["C00.00.00"], pools["C00.01.00"]);
        let half = token_pools(&GeneratorSpec::default()).unwrap();
        let a = &half["C00.00.00"];
        let b = &half["C00.00.01"];
        assert_eq!(a.iter().filter(|t| b.contains(t)).count(), 8);
    }

    #[test]
    fn texts_use_only_own_pools() {
        let spec = GeneratorSpec {
            num_samples: 300,
            noise_fraction: 0.0,
            ..Default::default()
        };
        let pools = token_pools(&spec).unwrap();
        let (ds, _) = generate(&spec).unwrap();
        for r in &ds.records {
            let pool = &pools[&r.labels[0]];
            assert!(r.text.split(' ').all(|w| pool.iter().any(|p| p == w)));
        }
    }
}
