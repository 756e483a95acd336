//! Image-level AUROC, pixel-level average precision, and the continual
//! forgetting measure.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_lengths<T>(scores: &[T], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

fn by_score_desc<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// Area under the ROC curve as the Mann-Whitney statistic; tied pairs count 1/2.
pub fn auroc<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<T> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC"));
    }
    // Walk groups of equal score from the top; each positive beats every
    // negative strictly below it and ties half of those in its group.
    let order = by_score_desc(scores);
    let mut wins = 0.0f64;
    let mut neg_above = 0usize;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        let (mut gp, mut gn) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == s {
            if labels[order[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        let neg_below = neg - neg_above - gn;
        wins += gp as f64 * (neg_below as f64 + 0.5 * gn as f64);
        neg_above += gn;
        i = j;
    }
    Ok(T::of(wins / (pos as f64 * neg as f64)))
}

/// Average precision: sum over distinct thresholds of precision times the
/// recall gained at that threshold.
pub fn aupr<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<T> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPR"));
    }
    let order = by_score_desc(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let tp_before = tp;
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp > tp_before {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += precision * (tp - tp_before) as f64 / pos as f64;
        }
    }
    Ok(T::of(ap.min(1.0)))
}

/// Lower-triangular `k x k` table: entry `(stage, task)` is the metric for
/// `task` measured after training stage `stage`, defined for `task <= stage`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMatrix<T> {
    entries: Vec<Vec<Option<T>>>,
}

impl<T: Scalar> EvalMatrix<T> {
    pub fn new(stages: usize) -> Self {
        Self { entries: (0..stages).map(|l| vec![None; l + 1]).collect() }
    }

    /// Builds from rows where row `l` holds tasks `0..=l`.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (l, row) in rows.iter().enumerate() {
            if row.len() != l + 1 {
                return Err(Error::DimensionMismatch(format!("row {l} has {} entries, expected {}", row.len(), l + 1)));
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(l, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn stages(&self) -> usize {
        self.entries.len()
    }

    pub fn set(&mut self, stage: usize, task: usize, value: T) -> Result<()> {
        if stage >= self.stages() || task > stage {
            return Err(Error::InvalidArgument(format!("entry ({stage}, {task}) outside lower triangle")));
        }
        if !(value >= T::zero() && value <= T::one()) {
            return Err(Error::InvalidArgument(format!("metric {value} outside [0, 1]")));
        }
        self.entries[stage][task] = Some(value);
        Ok(())
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<T> {
        self.entries.get(stage).and_then(|r| r.get(task)).copied().flatten()
    }

    fn require(&self, stage: usize, task: usize) -> Result<T> {
        self.get(stage, task).ok_or(Error::MissingEntry { stage, task })
    }

    /// Final-stage row.
    pub fn last_row(&self) -> Result<Vec<T>> {
        let k = self.stages();
        if k == 0 {
            return Err(Error::InvalidArgument("empty evaluation matrix".into()));
        }
        (0..k).map(|j| self.require(k - 1, j)).collect()
    }
}

/// Average over tasks `j < k` of `max_l (T[l][j] - T[k][j])`, where `l` runs
/// over the earlier stages at which task `j` was defined.
pub fn forgetting_measure<T: Scalar>(matrix: &EvalMatrix<T>) -> Result<T> {
    let k = matrix.stages();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("forgetting needs at least 2 stages, got {k}")));
    }
    let last = k - 1;
    let mut total = T::zero();
    for j in 0..last {
        let fin = matrix.require(last, j)?;
        let mut worst = T::neg_infinity();
        for l in j..last {
            worst = worst.max(matrix.require(l, j)? - fin);
        }
        total += worst;
    }
    Ok(total / T::of(last as f64))
}
