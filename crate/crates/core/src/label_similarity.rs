//! Sample-level label representations and their cosine similarities.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hlr::LabelRepresentations;
use crate::matrix::{dot, norm, Matrix};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClampMode {
    Raw,
    /// `max(0, sim)`.
    #[default]
    NonNegative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Matrix,
    pub clamp_mode: ClampMode,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }
}

/// Mean of the representations of the nodes in `label_set`.
pub fn sample_label_rep(label_set: &[usize], reps: &LabelRepresentations) -> Result<Vec<f64>> {
    if label_set.is_empty() {
        return Err(Error::EmptyLabelSet);
    }
    let h = &reps.h;
    let mut out = alloc::vec![0.0; h.cols()];
    for &id in label_set {
        if id >= h.rows() {
            return Err(Error::UnknownNode(alloc::format!("#{id}")));
        }
        for (o, v) in out.iter_mut().zip(h.row(id)) {
            *o += v;
        }
    }
    if label_set.len() > 1 {
        let n = label_set.len() as f64;
        for o in out.iter_mut() {
            *o /= n;
        }
    }
    Ok(out)
}

/// Cosine similarity of every pair of rows.
///
/// The diagonal, and any pair of bitwise-identical rows, is exactly 1;
/// other entries are clamped to `[-1, 1]`.
pub fn cosine_matrix(x: &Matrix) -> Matrix {
    let n = x.rows();
    let norms: Vec<f64> = (0..n).map(|i| norm(x.row(i))).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = 1.0;
        for j in i + 1..n {
            let c = if x.row(i) == x.row(j) {
                1.0
            } else {
                (dot(x.row(i), x.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            out[(i, j)] = c;
            out[(j, i)] = c;
        }
    }
    out
}

fn apply_clamp(values: Matrix, mode: ClampMode) -> Matrix {
    match mode {
        ClampMode::Raw => values,
        ClampMode::NonNegative => values.map(|v| if v > 0.0 { v } else { 0.0 }),
    }
}

/// Pairwise similarity of the label sets of a batch.
pub fn pairwise_sim(
    label_sets: &[Vec<usize>],
    reps: &LabelRepresentations,
    clamp_mode: ClampMode,
) -> Result<SimilarityMatrix> {
    if label_sets.is_empty() {
        return Err(Error::InvalidArgument("no label sets".into()));
    }
    let d = reps.h.cols();
    let mut data = Vec::with_capacity(label_sets.len() * d);
    for (i, set) in label_sets.iter().enumerate() {
        let rep = sample_label_rep(set, reps)?;
        if !(norm(&rep) > 0.0) {
            return Err(Error::ZeroNorm(i));
        }
        data.extend(rep);
    }
    let x = Matrix::from_vec(label_sets.len(), d, data);
    Ok(SimilarityMatrix {
        values: apply_clamp(cosine_matrix(&x), clamp_mode),
        clamp_mode,
    })
}

/// Records the raw cosine similarity between the label sets of a batch on a
/// tape. `h` is the node-representation matrix. Fails on a zero-norm sample
/// representation.
pub fn pairwise_sim_on_tape(tape: &mut Tape, h: Var, label_sets: &[Vec<usize>]) -> Result<Var> {
    let per_sample = tape.row_mean(h, label_sets.to_vec());
    let reps = tape.value(per_sample);
    for i in 0..reps.rows() {
        if !(norm(reps.row(i)) > 0.0) {
            return Err(Error::ZeroNorm(i));
        }
    }
    Ok(tape.cosine(per_sample))
}

/// Applies a clamp mode to a raw similarity node.
pub fn clamp_on_tape(tape: &mut Tape, raw: Var, mode: ClampMode) -> Var {
    match mode {
        ClampMode::Raw => raw,
        ClampMode::NonNegative => tape.relu(raw),
    }
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use alloc::vec;

    fn reps(rows: &[&[f64]]) -> LabelRepresentations {
        LabelRepresentations {
            h: Matrix::from_rows(rows),
            selected_siblings: vec![Vec::new(); rows.len()],
        }
    }

    #[test]
    fn sample_rep_cases() {
        let r = reps(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(sample_label_rep(&[1], &r).unwrap(), vec![1.0, 0.0]);
        assert_eq!(sample_label_rep(&[1, 2], &r).unwrap(), vec![0.5, 0.5]);
        assert_eq!(sample_label_rep(&[], &r), Err(Error::EmptyLabelSet));
        assert!(sample_label_rep(&[7], &r).is_err());
    }

    #[test]
    fn pairwise_cases() {
        let r = reps(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let s = pairwise_sim(&[vec![1], vec![1], vec![2], vec![3]], &r, ClampMode::Raw).unwrap();
        assert_eq!(s.get(0, 1), 1.0);
        assert_eq!(s.get(0, 2), 0.0);
        assert!((s.get(0, 3) - 0.70710678).abs() < 1e-8);
        assert_eq!(
            pairwise_sim(&[vec![0]], &r, ClampMode::Raw),
            Err(Error::ZeroNorm(0))
        );
    }

    #[test]
    fn clamp_modes() {
        let r = reps(&[&[1.0, 0.0], &[-1.0, 0.2]]);
        let raw = pairwise_sim(&[vec![0], vec![1]], &r, ClampMode::Raw).unwrap();
        assert!(raw.get(0, 1) < 0.0);
        let nn = pairwise_sim(&[vec![0], vec![1]], &r, ClampMode::NonNegative).unwrap();
        assert_eq!(nn.get(0, 1), 0.0);
        assert_eq!(nn.get(1, 1), 1.0);
    }
}
