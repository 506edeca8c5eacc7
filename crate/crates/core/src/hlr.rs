//! Hierarchy-aware label representations.
//!
//! Representations are built level by level. For a node `i` with parent `p`
//! at level `k >= 1`:
//!
//! ```text
//! q_i = W_q e_i
//! keys/values = { W_k e_i, W_k h_p } + { W_k e_j : j sibling of i, gate_j = 1 }
//! h_i = softmax(q_i . K / sqrt(d)) V + e_i
//! ```
//!
//! and `h_ROOT = e_ROOT`. The sibling gate is `sigmoid(s_j) > 0.5` in the
//! forward pass and backpropagates through `sigmoid(s_j)` (straight-through).
//! The projections are shared by every level.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::label_tree::{CodeTree, NodeId};
use crate::math;
use crate::matrix::Matrix;
use crate::rng::gaussian_matrix;
use crate::tape::{AttnKey, Tape, Var};
use crate::text_encoder::{tokenize, Vocabulary};

pub const DEFAULT_GATE_INIT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct HlrParams {
    /// One row per tree node, ROOT included.
    pub label_embeddings: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// `num_nodes x 1` sibling gate logits; the ROOT entry is unused.
    pub gate_logits: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRepresentations {
    /// One row per tree node.
    pub h: Matrix,
    /// Siblings that took part in each node's attention.
    pub selected_siblings: Vec<Vec<NodeId>>,
}

/// How label embeddings are initialised.
#[derive(Debug, Clone)]
pub enum EmbedInit<'a> {
    Random {
        std: f64,
    },
    /// Mean token embedding of each node's label text. ROOT, which has no
    /// text, and the projections are drawn with `std`.
    FromLabelText {
        vocab: &'a Vocabulary,
        token_embeddings: &'a Matrix,
        texts: &'a BTreeMap<String, String>,
        std: f64,
    },
}

/// Hard and soft value of a sibling gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub hard: u8,
    pub soft: f64,
}

/// `soft = sigmoid(logit)`, `hard = 1` iff `soft > 0.5`.
pub fn gate(logit: f64) -> Gate {
    let soft = math::sigmoid(logit);
    Gate {
        hard: u8::from(soft > 0.5),
        soft,
    }
}

/// Which gate value the forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    /// Hard 0/1 forward, sigmoid backward.
    #[default]
    StraightThrough,
    /// Sigmoid in both passes. Used as the smooth surrogate when checking
    /// gate-logit gradients.
    Soft,
}

impl HlrParams {
    pub fn init<R: rand::Rng + ?Sized>(
        tree: &CodeTree,
        d: usize,
        rng: &mut R,
        init: &EmbedInit<'_>,
        gate_init: f64,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("label dimension must be at least 1".into()));
        }
        let n = tree.len();
        let label_embeddings = match init {
            EmbedInit::Random { std } => gaussian_matrix(rng, n, d, *std),
            EmbedInit::FromLabelText {
                vocab,
                token_embeddings,
                texts,
                std,
            } => {
                if token_embeddings.cols() != d {
                    return Err(Error::Shape(alloc::format!(
                        "token embeddings have width {}, label dimension is {d}",
                        token_embeddings.cols()
                    )));
                }
                let mut e = gaussian_matrix(rng, 1, d, *std).into_vec();
                for node in &tree.nodes()[1..] {
                    let text = texts
                        .get(&node.id)
                        .ok_or_else(|| Error::MissingLabelText(node.id.clone()))?;
                    let ids = tokenize(text, vocab, usize::MAX);
                    let mut row = alloc::vec![0.0; d];
                    for &t in &ids {
                        for (r, v) in row.iter_mut().zip(token_embeddings.row(t)) {
                            *r += v;
                        }
                    }
                    for r in row.iter_mut() {
                        *r /= ids.len() as f64;
                    }
                    e.extend(row);
                }
                Matrix::from_vec(n, d, e)
            }
        };
        let std = match init {
            EmbedInit::Random { std } | EmbedInit::FromLabelText { std, .. } => *std,
        };
        Ok(Self {
            label_embeddings,
            w_q: gaussian_matrix(rng, d, d, std),
            w_k: gaussian_matrix(rng, d, d, std),
            w_v: gaussian_matrix(rng, d, d, std),
            gate_logits: Matrix::filled(n, 1, gate_init),
        })
    }

    pub fn dim(&self) -> usize {
        self.label_embeddings.cols()
    }

    pub fn validate(&self, tree: &CodeTree) -> Result<()> {
        let d = self.dim();
        let ok = d >= 1
            && self.label_embeddings.rows() == tree.len()
            && [&self.w_q, &self.w_k, &self.w_v].iter().all(|w| w.shape() == (d, d))
            && self.gate_logits.shape() == (tree.len(), 1);
        if !ok {
            return Err(Error::Shape(alloc::format!(
                "label parameters do not fit a tree of {} nodes",
                tree.len()
            )));
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> HlrVars {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        HlrVars {
            label_embeddings: leaf(&self.label_embeddings),
            w_q: leaf(&self.w_q),
            w_k: leaf(&self.w_k),
            w_v: leaf(&self.w_v),
            gate_logits: leaf(&self.gate_logits),
        }
    }

    /// Realised sibling set of every node under the hard gates.
    pub fn selected_siblings(&self, tree: &CodeTree) -> Vec<Vec<NodeId>> {
        (0..tree.len())
            .map(|i| {
                if i == 0 {
                    return Vec::new();
                }
                tree.siblings(NodeId(i))
                    .unwrap_or_default()
                    .into_iter()
                    .filter(|j| gate(self.gate_logits[(j.0, 0)]).hard == 1)
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HlrVars {
    pub label_embeddings: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub gate_logits: Var,
}

/// Records the cascade attention on a tape and returns the
/// `num_nodes x d` representation matrix, rows in tree node order.
pub fn representations_on_tape(tape: &mut Tape, tree: &CodeTree, vars: &HlrVars, mode: GateMode) -> Var {
    let e = vars.label_embeddings;
    let d = tape.value(e).cols();
    let scale = 1.0 / math::sqrt(d as f64);
    let n = tree.len();

    let q_all = tape.matmul_t(e, vars.w_q);
    let k_all = tape.matmul_t(e, vars.w_k);
    let v_all = tape.matmul_t(e, vars.w_v);
    let gates = match mode {
        GateMode::StraightThrough => tape.straight_through(vars.gate_logits),
        GateMode::Soft => tape.sigmoid(vars.gate_logits),
    };

    // position of every node inside its level block
    let mut pos = alloc::vec![0usize; n];
    for k in 0..=tree.max_level() {
        for (r, id) in tree.level(k).iter().enumerate() {
            pos[id.0] = r;
        }
    }

    let mut level_h = Vec::with_capacity(tree.max_level() + 1);
    level_h.push(tape.select_rows(e, &[tree.root().0]));
    for k in 1..=tree.max_level() {
        let nodes = tree.level(k);
        let ids: Vec<usize> = nodes.iter().map(|id| id.0).collect();
        let parent_rows: Vec<usize> = nodes
            .iter()
            .map(|&id| pos[tree.parent(id).expect("non-root node has a parent").0])
            .collect();
        let h_parent = tape.select_rows(level_h[k - 1], &parent_rows);
        let k_parent = tape.matmul_t(h_parent, vars.w_k);
        let v_parent = tape.matmul_t(h_parent, vars.w_v);
        let keys_mat = tape.concat_rows(&[k_all, k_parent]);
        let values_mat = tape.concat_rows(&[v_all, v_parent]);
        let q = tape.select_rows(q_all, &ids);
        let keys: Vec<Vec<AttnKey>> = nodes
            .iter()
            .enumerate()
            .map(|(r, &id)| {
                let mut row = alloc::vec![AttnKey::plain(id.0), AttnKey::plain(n + r)];
                for j in tree.siblings(id).expect("non-root node") {
                    row.push(AttnKey::gated(j.0, j.0));
                }
                row
            })
            .collect();
        let attended = tape.attention(q, keys_mat, values_mat, Some(gates), keys, scale);
        let own = tape.select_rows(e, &ids);
        level_h.push(tape.add(attended, own));
    }
    // Nodes are stored breadth-first, so level blocks concatenate into node order.
    tape.concat_rows(&level_h)
}

pub fn compute_representations(tree: &CodeTree, params: &HlrParams) -> Result<LabelRepresentations> {
    compute_representations_with(tree, params, GateMode::StraightThrough)
}

pub fn compute_representations_with(
    tree: &CodeTree,
    params: &HlrParams,
    mode: GateMode,
) -> Result<LabelRepresentations> {
    params.validate(tree)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let h = representations_on_tape(&mut tape, tree, &vars, mode);
    Ok(LabelRepresentations {
        h: tape.value(h).clone(),
        selected_siblings: params.selected_siblings(tree),
    })
}
