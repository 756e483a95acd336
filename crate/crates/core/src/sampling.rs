//! Farthest point sampling and greedy k-center coreset selection.

use crate::error::{Error, Result};
use crate::kernels::squared_l2;
use crate::scalar::Scalar;
use crate::tensor::PatchSet;

/// How many rows to keep. Selection always starts from row 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingBudget {
    pub target_count: usize,
}

impl SamplingBudget {
    pub fn new(target_count: usize) -> Self {
        Self { target_count }
    }

    fn check(&self, available: usize) -> Result<()> {
        if self.target_count == 0 || self.target_count > available {
            return Err(Error::InvalidArgument(format!(
                "sampling budget {} outside 1..={available}",
                self.target_count
            )));
        }
        Ok(())
    }
}

/// Greedy max-min selection from row 0. Returns row indices in selection order.
/// Among equidistant candidates the lowest index wins.
pub fn farthest_point_indices<T: Scalar>(points: &PatchSet<T>, budget: SamplingBudget) -> Result<Vec<usize>> {
    budget.check(points.count())?;
    let n = points.count();
    let mut min_d = vec![T::infinity(); n];
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(budget.target_count);
    let mut current = 0;
    loop {
        taken[current] = true;
        order.push(current);
        if order.len() == budget.target_count {
            break;
        }
        let c = points.row(current);
        let mut best: Option<(usize, T)> = None;
        for j in 0..n {
            let d = squared_l2(points.row(j), c);
            if d < min_d[j] {
                min_d[j] = d;
            }
            if taken[j] {
                continue;
            }
            match best {
                Some((_, bd)) if min_d[j] <= bd => {}
                _ => best = Some((j, min_d[j])),
            }
        }
        current = best.expect("budget below point count leaves a candidate").0;
    }
    Ok(order)
}

/// Farthest point sampling; rows are copied verbatim in selection order.
pub fn fps<T: Scalar>(points: &PatchSet<T>, budget: SamplingBudget) -> Result<PatchSet<T>> {
    Ok(points.select(&farthest_point_indices(points, budget)?))
}

/// Greedy k-center coreset. The covering radius of the result is at most twice
/// that of the best subset of the same size.
pub fn coreset_select<T: Scalar>(points: &PatchSet<T>, budget: SamplingBudget) -> Result<PatchSet<T>> {
    fps(points, budget)
}

/// `max` over `all_points` of the distance to the nearest selected row.
pub fn covering_radius<T: Scalar>(selected: &PatchSet<T>, all_points: &PatchSet<T>) -> Result<T> {
    if selected.channels() != all_points.channels() {
        return Err(Error::DimensionMismatch(format!(
            "selected width {} vs points width {}",
            selected.channels(),
            all_points.channels()
        )));
    }
    let mut radius = T::zero();
    for p in all_points.rows() {
        let nearest = selected.rows().map(|s| squared_l2(p, s)).fold(T::infinity(), T::min);
        radius = radius.max(nearest);
    }
    Ok(radius.sqrt())
}
