#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use text2tree_core::hlr::{EmbedInit, HlrParams};
use text2tree_core::label_tree::{CodeTree, NodeId};
use text2tree_core::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tree with `n` non-root nodes, each attached to a uniformly chosen
/// earlier node. Every non-root node is a target.
pub fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> CodeTree {
    let mut edges = Vec::new();
    for i in 0..n {
        let p = rng.random_range(0..=i);
        let parent = if p == 0 { "ROOT".to_string() } else { format!("N{}", p - 1) };
        edges.push((format!("N{i}"), parent));
    }
    let targets: Vec<String> = (0..n).map(|i| format!("N{i}")).collect();
    CodeTree::build_from_edges(&edges, &targets).unwrap()
}

/// Fixed 7-node tree: ROOT -> {A, B}, A -> {A1, A2}, B -> {B1, B2}.
pub fn seven_node_tree() -> CodeTree {
    let edges = [
        ("A", "ROOT"),
        ("B", "ROOT"),
        ("A1", "A"),
        ("A2", "A"),
        ("B1", "B"),
        ("B2", "B"),
    ];
    CodeTree::build_from_edges(&edges, &["A1", "A2", "B1", "B2"]).unwrap()
}

/// Random parameters with gate logits spread around zero so that some
/// siblings are dropped.
pub fn random_params(tree: &CodeTree, d: usize, rng: &mut ChaCha8Rng) -> HlrParams {
    let mut p = HlrParams::init(tree, d, rng, &EmbedInit::Random { std: 1.0 }, 1.0).unwrap();
    for v in p.gate_logits.as_mut_slice() {
        *v = rng.random_range(-2.0..2.0);
    }
    p
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `W x` with rows of `W` dotted against `x`.
fn project(w: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| dot(x, w.row(r))).collect()
}

/// Hard-mask cascade attention written directly from the definition:
/// keys are self, parent and every sibling whose gate logit is positive
/// after the sigmoid; ROOT keeps its embedding.
pub fn hard_mask_representations(tree: &CodeTree, p: &HlrParams) -> Matrix {
    let n = tree.len();
    let d = p.label_embeddings.cols();
    let scale = 1.0 / libm::sqrt(d as f64);
    let e = |i: usize| p.label_embeddings.row(i).to_vec();
    let mut h: Vec<Option<Vec<f64>>> = vec![None; n];
    h[0] = Some(e(0));
    for level in 1..=tree.max_level() {
        for &id in tree.level(level) {
            let i = id.0;
            let parent = tree.parent(id).unwrap().0;
            let hp = h[parent].clone().unwrap();
            let q = project(&p.w_q, &e(i));
            let mut kv: Vec<(Vec<f64>, Vec<f64>)> = vec![
                (project(&p.w_k, &e(i)), project(&p.w_v, &e(i))),
                (project(&p.w_k, &hp), project(&p.w_v, &hp)),
            ];
            for j in tree.siblings(id).unwrap() {
                let s = 1.0 / (1.0 + libm::exp(-p.gate_logits[(j.0, 0)]));
                if s > 0.5 {
                    kv.push((project(&p.w_k, &e(j.0)), project(&p.w_v, &e(j.0))));
                }
            }
            let scores: Vec<f64> = kv.iter().map(|(k, _)| dot(&q, k) * scale).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| libm::exp(s - max)).collect();
            let mut denom = 0.0;
            for x in &ex {
                denom += x;
            }
            let mut out = vec![0.0; d];
            for ((_, v), x) in kv.iter().zip(&ex) {
                let w = x / denom;
                for (o, vv) in out.iter_mut().zip(v) {
                    *o += w * vv;
                }
            }
            let ei = e(i);
            h[i] = Some(out.iter().zip(&ei).map(|(a, b)| a + b).collect());
        }
    }
    let data: Vec<f64> = h.into_iter().flat_map(|r| r.unwrap()).collect();
    Matrix::from_vec(n, d, data)
}

/// Nodes whose embeddings can reach `h_i`: `i`, its hard-selected siblings
/// and, recursively, the closure of its parent.
pub fn influence_closure(tree: &CodeTree, p: &HlrParams, i: NodeId) -> Vec<usize> {
    let mut out = vec![i.0];
    let mut cur = i;
    while let Some(parent) = tree.parent(cur) {
        for j in tree.siblings(cur).unwrap() {
            if text2tree_core::hlr::gate(p.gate_logits[(j.0, 0)]).hard == 1 {
                out.push(j.0);
            }
        }
        out.push(parent.0);
        cur = parent;
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Supervised contrastive loss straight from its definition, mean over
/// the batch.
pub fn scl_oracle(z: &Matrix, labels: &[usize], tau: f64) -> f64 {
    let n = z.rows();
    let mut total = 0.0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&a| a != i && labels[a] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let denom: f64 = (0..n)
            .filter(|&a| a != i)
            .map(|a| (dot(z.row(i), z.row(a)) / tau).exp())
            .sum();
        let term: f64 = positives
            .iter()
            .map(|&p| ((dot(z.row(i), z.row(p)) / tau).exp() / denom).ln())
            .sum();
        total += -term / positives.len() as f64;
    }
    total / n as f64
}

pub struct F1Oracle {
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub per_label: Vec<f64>,
}

/// Counts every (row, label) cell one at a time.
pub fn f1_oracle(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> F1Oracle {
    let c = gold[0].len();
    let f1 = |tp: f64, fp: f64, fn_: f64| {
        if tp + fp + fn_ == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    };
    let (mut all_tp, mut all_fp, mut all_fn) = (0.0, 0.0, 0.0);
    let mut per_label = Vec::new();
    for k in 0..c {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for r in 0..gold.len() {
            if pred[r][k] && gold[r][k] {
                tp += 1.0;
            }
            if pred[r][k] && !gold[r][k] {
                fp += 1.0;
            }
            if !pred[r][k] && gold[r][k] {
                fn_ += 1.0;
            }
        }
        all_tp += tp;
        all_fp += fp;
        all_fn += fn_;
        per_label.push(f1(tp, fp, fn_));
    }
    F1Oracle {
        macro_f1: per_label.iter().sum::<f64>() / c as f64,
        micro_f1: f1(all_tp, all_fp, all_fn),
        per_label,
    }
}

pub fn random_table(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Vec<Vec<bool>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random::<f64>() < p).collect())
        .collect()
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    text2tree_core::rng::gaussian_matrix(rng, rows, cols, 1.0)
}

pub fn one_hot(labels: &[usize], c: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), c);
    for (r, &l) in labels.iter().enumerate() {
        m[(r, l)] = 1.0;
    }
    m
}

pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
