//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. [`Tape::backward`]
//! walks the record in reverse and accumulates gradients for every node that
//! depends on a parameter leaf. Operations are coarse (a whole attention
//! layer, a whole contrastive loss) so a training step records a few hundred
//! nodes at most.
//!
//! [`Tape::detach`] cuts gradient flow. For gradient checking a tape can be
//! put in replay mode, where the `k`-th detach returns the value recorded by
//! the `k`-th detach of an earlier tape; finite differences then see the
//! detached quantities as constants, exactly like the analytic gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::matrix::{dot, Matrix};
use crate::objectives::{self, Reduction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One key of an attention row: a row of the key/value matrices, optionally
/// multiplied by an entry of a gate column vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnKey {
    pub row: usize,
    pub gate: Option<usize>,
}

impl AttnKey {
    pub fn plain(row: usize) -> Self {
        Self { row, gate: None }
    }

    pub fn gated(row: usize, gate: usize) -> Self {
        Self {
            row,
            gate: Some(gate),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Detach,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    StraightThrough(Var),
    RowNormalize(Var),
    ConcatRows(Vec<Var>),
    RowMean(Var, Vec<Vec<usize>>),
    GatherEntries(Var, Vec<(usize, usize)>),
    RowMix(Var, Var, Vec<usize>),
    Cosine(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        gates: Option<Var>,
        keys: Vec<Vec<AttnKey>>,
        scale: f64,
    },
    Contrastive {
        z: Var,
        sim: Var,
        tau: f64,
        reduction: Reduction,
    },
    SoftmaxCe(Var, Var),
    BceLogits(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    detached: Vec<Matrix>,
    replay: Option<Vec<Matrix>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads[var.0].as_ref()
    }

    /// Gradient of `var`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Matrix {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose detach nodes return `values` in recording order.
    pub fn with_replay(values: Vec<Matrix>) -> Self {
        Self {
            replay: Some(values),
            ..Self::default()
        }
    }

    /// Values produced by every detach node so far, in order.
    pub fn detached_values(&self) -> &[Matrix] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let k = self.detached.len();
        let value = match &self.replay {
            Some(values) => values[k].clone(),
            None => self.value(x).clone(),
        };
        self.detached.push(value.clone());
        self.push(value, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds the `1 x c` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "add_row bias must be a row vector");
        assert_eq!(bias.cols(), self.value(x).cols(), "add_row width");
        let mut value = self.value(x).clone();
        let bias = bias.as_slice().to_vec();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let ng = self.ng(&[x, b]);
        self.push(value, Op::AddRow(x, b), ng)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let ng = self.ng(&[x]);
        self.push(value, Op::Affine(x, scale), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(math::tanh);
        let ng = self.ng(&[x]);
        self.push(value, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(math::sigmoid);
        let ng = self.ng(&[x]);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.ng(&[x]);
        self.push(value, Op::Relu(x), ng)
    }

    /// Hard `sigmoid(x) > 0.5` in the forward pass; the backward pass uses the
    /// derivative of `sigmoid(x)`.
    pub fn straight_through(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if math::sigmoid(v) > 0.5 { 1.0 } else { 0.0 });
        let ng = self.ng(&[x]);
        self.push(value, Op::StraightThrough(x), ng)
    }

    /// Divides every row by its L2 norm. Zero rows produce non-finite values;
    /// callers check norms first.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = math::sqrt(dot(row, row));
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::RowNormalize(x), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width");
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        let ng = self.ng(parts);
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    /// Output row `r` is the mean of the input rows listed in `groups[r]`.
    /// Singleton groups copy rows exactly.
    pub fn row_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let input = self.value(x);
        let cols = input.cols();
        let mut value = Matrix::zeros(groups.len(), cols);
        for (r, group) in groups.iter().enumerate() {
            assert!(!group.is_empty(), "row_mean group {r} is empty");
            let out = value.row_mut(r);
            for &i in group {
                for (o, v) in out.iter_mut().zip(input.row(i)) {
                    *o += v;
                }
            }
            if group.len() > 1 {
                let n = group.len() as f64;
                for o in out.iter_mut() {
                    *o /= n;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::RowMean(x, groups), ng)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        self.row_mean(x, rows.iter().map(|&r| vec![r]).collect())
    }

    /// Column vector of the listed `(row, col)` entries.
    pub fn gather_entries(&mut self, x: Var, entries: Vec<(usize, usize)>) -> Var {
        let m = self.value(x);
        let data = entries.iter().map(|&(r, c)| m[(r, c)]).collect();
        let value = Matrix::from_vec(entries.len(), 1, data);
        let ng = self.ng(&[x]);
        self.push(value, Op::GatherEntries(x, entries), ng)
    }

    /// `out[i] = lambda[i] * x[i] + (1 - lambda[i]) * x[pairing[i]]`.
    pub fn row_mix(&mut self, x: Var, lambda: Var, pairing: Vec<usize>) -> Var {
        let value = objectives::mix_rows(self.value(x), self.value(lambda).as_slice(), &pairing);
        let ng = self.ng(&[x, lambda]);
        self.push(value, Op::RowMix(x, lambda, pairing), ng)
    }

    /// Cosine similarity between all pairs of rows.
    pub fn cosine(&mut self, x: Var) -> Var {
        let value = crate::label_similarity::cosine_matrix(self.value(x));
        let ng = self.ng(&[x]);
        self.push(value, Op::Cosine(x), ng)
    }

    /// Gated single-head scaled dot-product attention.
    ///
    /// Row `r` of the output attends from query row `r` to the keys listed in
    /// `keys[r]`. A key's unnormalised weight `exp(score)` is multiplied by its
    /// gate value when it has one; keys whose gate is exactly zero are skipped
    /// in the forward pass, so a 0/1 gate vector behaves as a hard mask.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        gates: Option<Var>,
        keys: Vec<Vec<AttnKey>>,
        scale: f64,
    ) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qm.rows(), keys.len(), "attention query rows");
        assert_eq!(qm.cols(), km.cols(), "attention key width");
        assert_eq!(km.rows(), vm.rows(), "attention key/value rows");
        let gm = gates.map(|g| self.value(g).as_slice());
        let mut value = Matrix::zeros(qm.rows(), vm.cols());
        let mut scratch = AttnScratch::default();
        for (r, row_keys) in keys.iter().enumerate() {
            scratch.forward_row(qm.row(r), km, vm, gm, row_keys, scale);
            value.row_mut(r).copy_from_slice(&scratch.out);
        }
        let mut inputs = vec![q, k, v];
        inputs.extend(gates);
        let ng = self.ng(&inputs);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                gates,
                keys,
                scale,
            },
            ng,
        )
    }

    /// Similarity-weighted contrastive loss of the rows of `z`.
    pub fn contrastive(&mut self, z: Var, sim: Var, tau: f64, reduction: Reduction) -> Var {
        let loss = objectives::contrastive_value(self.value(z), self.value(sim), tau, reduction);
        let ng = self.ng(&[z, sim]);
        self.push(
            Matrix::scalar(loss),
            Op::Contrastive {
                z,
                sim,
                tau,
                reduction,
            },
            ng,
        )
    }

    /// Mean over rows of `-sum_k t_k log softmax(logits)_k`.
    pub fn softmax_ce(&mut self, logits: Var, targets: Var) -> Var {
        let loss = objectives::softmax_ce_value(self.value(logits), self.value(targets));
        let ng = self.ng(&[logits, targets]);
        self.push(Matrix::scalar(loss), Op::SoftmaxCe(logits, targets), ng)
    }

    /// Mean over all entries of the binary cross entropy with logits.
    pub fn bce_logits(&mut self, logits: Var, targets: Var) -> Var {
        let loss = objectives::bce_logits_value(self.value(logits), self.value(targets));
        let ng = self.ng(&[logits, targets]);
        self.push(Matrix::scalar(loss), Op::BceLogits(logits, targets), ng)
    }

    /// `sum_i w_i * x_i` over scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc = 0.0;
        for &(x, w) in terms {
            acc += w * self.value(x).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&vars);
        self.push(Matrix::scalar(acc), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn backward_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Detach => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.matmul_t(self.value(b)));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, self.value(a).t_matmul(g));
                }
            }
            &Op::MatMulT(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.matmul(self.value(b)));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.t_matmul(self.value(a)));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.scale(-1.0));
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y));
                }
            }
            &Op::AddRow(x, b) => {
                self.accumulate(grads, x, g.clone());
                if self.wants(b) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Affine(x, scale) => self.accumulate(grads, x, g.scale(scale)),
            &Op::Tanh(x) => {
                let gx = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                self.accumulate(grads, x, gx);
            }
            &Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, x, gx);
            }
            &Op::Relu(x) => {
                let gx = g.zip_map(self.value(x), |gv, v| if v > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, x, gx);
            }
            &Op::StraightThrough(x) => {
                let gx = g.zip_map(self.value(x), |gv, v| {
                    let s = math::sigmoid(v);
                    gv * s * (1.0 - s)
                });
                self.accumulate(grads, x, gx);
            }
            &Op::RowNormalize(x) => {
                let input = self.value(x);
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let n = math::sqrt(dot(input.row(r), input.row(r)));
                    let yg = dot(y.row(r), g.row(r));
                    for ((o, &yv), &gv) in gx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = (gv - yv * yg) / n;
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.wants(p) {
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        self.accumulate(grads, p, g.select_rows(&idx));
                    }
                    offset += rows;
                }
            }
            Op::RowMean(x, groups) => {
                let x = *x;
                if !self.wants(x) {
                    return;
                }
                let input = self.value(x);
                let mut gx = Matrix::zeros(input.rows(), input.cols());
                for (r, group) in groups.iter().enumerate() {
                    let w = 1.0 / group.len() as f64;
                    for &i in group {
                        for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += w * v;
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::GatherEntries(x, entries) => {
                let x = *x;
                let (rows, cols) = self.value(x).shape();
                let mut gx = Matrix::zeros(rows, cols);
                for (k, &(r, c)) in entries.iter().enumerate() {
                    gx[(r, c)] += g[(k, 0)];
                }
                self.accumulate(grads, x, gx);
            }
            Op::RowMix(x, lambda, pairing) => {
                let (x, lambda) = (*x, *lambda);
                let xm = self.value(x);
                let lm = self.value(lambda).as_slice();
                if self.wants(x) {
                    let mut gx = Matrix::zeros(xm.rows(), xm.cols());
                    for (i, &j) in pairing.iter().enumerate() {
                        let l = lm[i];
                        for c in 0..xm.cols() {
                            gx[(i, c)] += l * g[(i, c)];
                            gx[(j, c)] += (1.0 - l) * g[(i, c)];
                        }
                    }
                    self.accumulate(grads, x, gx);
                }
                if self.wants(lambda) {
                    let mut gl = Matrix::zeros(pairing.len(), 1);
                    for (i, &j) in pairing.iter().enumerate() {
                        let mut acc = 0.0;
                        for c in 0..xm.cols() {
                            acc += g[(i, c)] * (xm[(i, c)] - xm[(j, c)]);
                        }
                        gl[(i, 0)] = acc;
                    }
                    self.accumulate(grads, lambda, gl);
                }
            }
            &Op::Cosine(x) => {
                let input = self.value(x);
                let c = &node.value;
                let n = input.rows();
                let norms: Vec<f64> = (0..n).map(|i| crate::matrix::norm(input.row(i))).collect();
                let mut gx = Matrix::zeros(n, input.cols());
                for i in 0..n {
                    for j in 0..n {
                        let gij = g[(i, j)];
                        if gij == 0.0 || i == j || input.row(i) == input.row(j) {
                            continue;
                        }
                        let cij = c[(i, j)];
                        if cij.abs() >= 1.0 {
                            continue;
                        }
                        let inv = 1.0 / (norms[i] * norms[j]);
                        let (ri, rj) = (i * input.cols(), j * input.cols());
                        for t in 0..input.cols() {
                            let xi = input.as_slice()[ri + t];
                            let xj = input.as_slice()[rj + t];
                            gx.as_mut_slice()[ri + t] +=
                                gij * (xj * inv - cij * xi / (norms[i] * norms[i]));
                            gx.as_mut_slice()[rj + t] +=
                                gij * (xi * inv - cij * xj / (norms[j] * norms[j]));
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                gates,
                keys,
                scale,
            } => self.backward_attention(*q, *k, *v, *gates, keys, *scale, g, grads),
            &Op::Contrastive {
                z,
                sim,
                tau,
                reduction,
            } => {
                let (gz, gs) = objectives::contrastive_grad(
                    self.value(z),
                    self.value(sim),
                    tau,
                    reduction,
                    self.wants(sim),
                );
                let up = g.item();
                if self.wants(z) {
                    self.accumulate(grads, z, gz.scale(up));
                }
                if let Some(gs) = gs {
                    self.accumulate(grads, sim, gs.scale(up));
                }
            }
            &Op::SoftmaxCe(logits, targets) => {
                let (gl, gt) =
                    objectives::softmax_ce_grad(self.value(logits), self.value(targets));
                let up = g.item();
                self.accumulate(grads, logits, gl.scale(up));
                if self.wants(targets) {
                    self.accumulate(grads, targets, gt.scale(up));
                }
            }
            &Op::BceLogits(logits, targets) => {
                let (gl, gt) = objectives::bce_logits_grad(self.value(logits), self.value(targets));
                let up = g.item();
                self.accumulate(grads, logits, gl.scale(up));
                if self.wants(targets) {
                    self.accumulate(grads, targets, gt.scale(up));
                }
            }
            Op::WeightedSum(terms) => {
                let up = g.item();
                for &(x, w) in terms {
                    self.accumulate(grads, x, Matrix::scalar(w * up));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        gates: Option<Var>,
        keys: &[Vec<AttnKey>],
        scale: f64,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let gm = gates.map(|g| self.value(g).as_slice());
        let mut gq = Matrix::zeros(qm.rows(), qm.cols());
        let mut gk = Matrix::zeros(km.rows(), km.cols());
        let mut gv = Matrix::zeros(vm.rows(), vm.cols());
        let mut gg = gm.map(|s| Matrix::zeros(s.len(), 1));
        let mut scratch = AttnScratch::default();
        for (r, row_keys) in keys.iter().enumerate() {
            let qr = qm.row(r);
            let dout = g.row(r);
            scratch.forward_row(qr, km, vm, gm, row_keys, scale);
            let z = scratch.denom;
            for (slot, key) in row_keys.iter().enumerate() {
                let ex = scratch.unnormalized[slot];
                let gate = scratch.gate[slot];
                let vrow = vm.row(key.row);
                // u = dout . (v_j - out)
                let mut u = 0.0;
                for ((d, vv), o) in dout.iter().zip(vrow).zip(&scratch.out) {
                    u += d * (vv - o);
                }
                let weight = gate * ex / z;
                if let (Some(gi), Some(gg)) = (key.gate, gg.as_mut()) {
                    gg[(gi, 0)] += ex / z * u;
                }
                if weight == 0.0 {
                    continue;
                }
                for (o, d) in gv.row_mut(key.row).iter_mut().zip(dout) {
                    *o += weight * d;
                }
                let ds = weight * u * scale;
                let krow = km.row(key.row);
                for (o, kv) in gq.row_mut(r).iter_mut().zip(krow) {
                    *o += ds * kv;
                }
                for (o, qv) in gk.row_mut(key.row).iter_mut().zip(qr) {
                    *o += ds * qv;
                }
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
        if let (Some(gates), Some(gg)) = (gates, gg) {
            self.accumulate(grads, gates, gg);
        }
    }
}

const MAX_INACTIVE_EXPONENT: f64 = 600.0;

/// Per-row attention buffers shared by the forward and backward passes so
/// both see identical arithmetic.
#[derive(Default)]
struct AttnScratch {
    unnormalized: Vec<f64>,
    gate: Vec<f64>,
    out: Vec<f64>,
    denom: f64,
}

impl AttnScratch {
    fn forward_row(
        &mut self,
        q: &[f64],
        k: &Matrix,
        v: &Matrix,
        gates: Option<&[f64]>,
        keys: &[AttnKey],
        scale: f64,
    ) {
        self.unnormalized.clear();
        self.gate.clear();
        let mut max = f64::NEG_INFINITY;
        for key in keys {
            let gate = match key.gate {
                Some(gi) => gates.expect("gated key without gate vector")[gi],
                None => 1.0,
            };
            let score = dot(q, k.row(key.row)) * scale;
            if gate != 0.0 && score > max {
                max = score;
            }
            self.unnormalized.push(score);
            self.gate.push(gate);
        }
        let mut denom = 0.0;
        for (s, &gate) in self.unnormalized.iter_mut().zip(&self.gate) {
            // only inactive keys can exceed the max; keep their straight-through gradient finite
            *s = math::exp((*s - max).min(MAX_INACTIVE_EXPONENT));
            if gate != 0.0 {
                denom += gate * *s;
            }
        }
        self.denom = denom;
        self.out.clear();
        self.out.resize(v.cols(), 0.0);
        for ((key, &ex), &gate) in keys.iter().zip(&self.unnormalized).zip(&self.gate) {
            if gate == 0.0 {
                continue;
            }
            let w = gate * ex / denom;
            for (o, vv) in self.out.iter_mut().zip(v.row(key.row)) {
                *o += w * vv;
            }
        }
    }
}
