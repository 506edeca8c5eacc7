//! Macro/micro F1, per-label F1 and F1 over frequency-ordered label groups.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::objectives::Task;

/// Labels per frequency group.
pub const GROUP_SIZE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    /// `2 tp / (2 tp + fp + fn)`, with `0/0 := 0`.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_macro_f1: f64,
    pub dev_micro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub per_label_f1: Vec<f64>,
    pub counts: Vec<Counts>,
    /// Class indices of each group, rarest group first.
    pub groups: Vec<Vec<usize>>,
    /// Macro F1 inside each group.
    pub group_f1: Vec<f64>,
    pub epoch_log: Vec<EpochLog>,
}

/// 0/1 predictions from logits: argmax for multi-class, `sigmoid > 0.5`
/// (logit > 0) for multi-label.
pub fn predict(logits: &Matrix, task: Task) -> Vec<Vec<bool>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            match task {
                Task::MultiClass => {
                    let mut best = 0;
                    for (c, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = c;
                        }
                    }
                    (0..row.len()).map(|c| c == best).collect()
                }
                Task::MultiLabel => row.iter().map(|&v| crate::math::sigmoid(v) > 0.5).collect(),
            }
        })
        .collect()
}

/// Classes ordered by increasing training frequency (ties by index), cut
/// into groups of [`GROUP_SIZE`].
pub fn frequency_groups(train_counts: &[usize]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..train_counts.len()).collect();
    order.sort_by_key(|&c| (train_counts[c], c));
    order.chunks(GROUP_SIZE).map(<[usize]>::to_vec).collect()
}

pub fn confusion(predictions: &[Vec<bool>], targets: &[Vec<bool>]) -> Result<Vec<Counts>> {
    if predictions.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Shape("prediction and target counts differ".into()));
    }
    let c = targets[0].len();
    let mut counts = alloc::vec![Counts::default(); c];
    for (p, t) in predictions.iter().zip(targets) {
        if p.len() != c || t.len() != c {
            return Err(Error::Shape("ragged prediction table".into()));
        }
        for k in 0..c {
            match (p[k], t[k]) {
                (true, true) => counts[k].tp += 1,
                (true, false) => counts[k].fp += 1,
                (false, true) => counts[k].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(counts)
}

/// Scores a prediction table. `groups` come from [`frequency_groups`].
pub fn score(predictions: &[Vec<bool>], targets: &[Vec<bool>], groups: &[Vec<usize>]) -> Result<MetricsReport> {
    let counts = confusion(predictions, targets)?;
    let per_label_f1: Vec<f64> = counts.iter().map(Counts::f1).collect();
    let macro_f1 = mean(&per_label_f1);
    let pooled = counts.iter().fold(Counts::default(), |acc, c| Counts {
        tp: acc.tp + c.tp,
        fp: acc.fp + c.fp,
        fn_: acc.fn_ + c.fn_,
    });
    let group_f1 = groups
        .iter()
        .map(|g| mean(&g.iter().map(|&c| per_label_f1[c]).collect::<Vec<_>>()))
        .collect();
    Ok(MetricsReport {
        macro_f1,
        micro_f1: pooled.f1(),
        per_label_f1,
        counts,
        groups: groups.to_vec(),
        group_f1,
        epoch_log: Vec::new(),
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// 0/1 target table from a target matrix.
pub fn target_table(targets: &Matrix) -> Vec<Vec<bool>> {
    (0..targets.rows())
        .map(|r| targets.row(r).iter().map(|&v| v > 0.5).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(rows: &[&[u8]]) -> Vec<Vec<bool>> {
        rows.iter().map(|r| r.iter().map(|&v| v == 1).collect()).collect()
    }

    #[test]
    fn perfect_and_all_wrong() {
        let y = t(&[&[1, 0, 0], &[0, 1, 0], &[0, 0, 1]]);
        let groups = frequency_groups(&[1, 1, 1]);
        let r = score(&y, &y, &groups).unwrap();
        assert_eq!((r.macro_f1, r.micro_f1), (1.0, 1.0));
        let wrong = t(&[&[0, 1, 0], &[0, 0, 1], &[1, 0, 0]]);
        let r = score(&wrong, &y, &groups).unwrap();
        assert_eq!((r.macro_f1, r.micro_f1), (0.0, 0.0));
    }

    #[test]
    fn hand_confusion() {
        // a: 2 TP; b: 1 TP, 1 FP; c: 1 FN
        let pred = t(&[&[1, 0, 0], &[1, 1, 0], &[0, 1, 0], &[0, 0, 0]]);
        let gold = t(&[&[1, 0, 0], &[1, 1, 0], &[0, 0, 0], &[0, 0, 1]]);
        let r = score(&pred, &gold, &frequency_groups(&[2, 1, 1])).unwrap();
        assert_eq!(r.counts[1], Counts { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(r.per_label_f1, vec![1.0, 2.0 / 3.0, 0.0]);
        assert!((r.macro_f1 - 5.0 / 9.0).abs() < 1e-15);
        assert_eq!(r.micro_f1, 0.75);
    }

    #[test]
    fn absent_label_scores_zero() {
        assert_eq!(Counts::default().f1(), 0.0);
    }

    #[test]
    fn groups_rarest_first() {
        let counts: Vec<usize> = (0..25).rev().collect();
        let g = frequency_groups(&counts);
        assert_eq!(g.len(), 3);
        assert_eq!(g[0][0], 24);
        assert_eq!(g[2], vec![4, 3, 2, 1, 0]);
    }

    #[test]
    fn predictions() {
        let logits = Matrix::from_rows(&[&[0.1, 2.0, -1.0], &[0.0, 0.0, 0.0]]);
        assert_eq!(predict(&logits, Task::MultiClass), t(&[&[0, 1, 0], &[1, 0, 0]]));
        assert_eq!(predict(&logits, Task::MultiLabel), t(&[&[1, 1, 0], &[0, 0, 0]]));
        assert!(score(&[], &[], &[]).is_err());
    }
}
