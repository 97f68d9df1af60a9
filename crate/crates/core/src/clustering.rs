//! Localized divergence between nearest neighbours in the 1-D dual space.
//!
//! Dual values are sorted; at each interior cut rank `j` the `k` values to the
//! right (ranks `j..j+k`) form the numerator and the `k` values to the left
//! (ranks `j-k..j`) the denominator of a DV estimate. Cut ranks closer than
//! `k` to either end are skipped.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use crate::divergence::{dv_estimate, log_sum_exp, log_mean_exp};
use crate::error::{arg, Error, Result};
use crate::scalar::{ordered_sum, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct DualProfile<T> {
    pub sorted_values: Vec<T>,
    /// `sort_permutation[rank]` is the original index of the value at `rank`.
    pub sort_permutation: Vec<usize>,
    /// `d_knn[j - knn_k]` is the local divergence at cut rank `j`.
    pub d_knn: Vec<T>,
    pub knn_k: usize,
}

impl<T: Scalar> DualProfile<T> {
    pub fn len(&self) -> usize {
        self.sorted_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted_values.is_empty()
    }

    /// Cut rank of `d_knn[i]`.
    pub fn cut_rank(&self, i: usize) -> usize {
        i + self.knn_k
    }

    /// Local divergence at cut rank `rank`, if it is an interior cut.
    pub fn d_knn_at(&self, rank: usize) -> Option<T> {
        rank.checked_sub(self.knn_k).and_then(|i| self.d_knn.get(i).copied())
    }
}

/// Selected cut ranks, ascending. A cut at rank `j` separates sorted ranks
/// `< j` from ranks `>= j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CutPointSet {
    pub indices: Vec<usize>,
}

impl CutPointSet {
    pub fn count(&self) -> usize {
        self.indices.len()
    }
}

fn sorted_order<T: Scalar>(values: &[T]) -> Result<Vec<usize>> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("dual value {pos} is {}", values[pos])));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    Ok(order)
}

fn check_sizes(n: usize, knn_k: usize) -> Result<()> {
    if knn_k < 2 {
        return arg(format!("knn_k must be at least 2, got {knn_k}"));
    }
    if n < 2 * knn_k {
        return arg(format!("{n} dual values cannot support knn_k = {knn_k} (need at least {})", 2 * knn_k));
    }
    Ok(())
}

pub fn build_profile<T: Scalar>(dual_values: &[T], knn_k: usize) -> Result<DualProfile<T>> {
    let n = dual_values.len();
    check_sizes(n, knn_k)?;
    let order = sorted_order(dual_values)?;
    let sorted: Vec<T> = order.iter().map(|&i| dual_values[i]).collect();
    let d_knn = (knn_k..=n - knn_k)
        .map(|j| dv_estimate(&sorted[j..j + knn_k], &sorted[j - knn_k..j]))
        .collect::<Result<Vec<_>>>()?;
    Ok(DualProfile { sorted_values: sorted, sort_permutation: order, d_knn, knn_k })
}

/// `sum(d) - logsumexp(d)`.
pub fn clustering_loss<T: Scalar>(d_knn: &[T]) -> Result<T> {
    if d_knn.is_empty() {
        return arg("clustering loss needs at least one local divergence");
    }
    Ok(ordered_sum(d_knn) - log_sum_exp(d_knn)?)
}

/// Clustering loss of the profile of `dual_values` and its derivative with
/// respect to each dual value (in the original order). The sort permutation
/// is treated as locally constant.
pub fn clustering_loss_gradient<T: Scalar>(dual_values: &[T], knn_k: usize) -> Result<(T, Vec<T>)> {
    let profile = build_profile(dual_values, knn_k)?;
    let loss = clustering_loss(&profile.d_knn)?;
    let lse = log_sum_exp(&profile.d_knn)?;
    let k = T::from_usize_lossy(knn_k);
    let mut grad_sorted = vec![T::zero(); dual_values.len()];
    for (i, &d) in profile.d_knn.iter().enumerate() {
        let weight = T::one() - (d - lse).exp();
        let j = profile.cut_rank(i);
        for g in &mut grad_sorted[j..j + knn_k] {
            *g += weight / k;
        }
        let left = &profile.sorted_values[j - knn_k..j];
        let lme = log_mean_exp(left)?;
        for (g, &v) in grad_sorted[j - knn_k..j].iter_mut().zip(left) {
            *g -= weight * (v - lme).exp() / k;
        }
    }
    let mut grad = vec![T::zero(); dual_values.len()];
    for (rank, &orig) in profile.sort_permutation.iter().enumerate() {
        grad[orig] = grad_sorted[rank];
    }
    Ok((loss, grad))
}

/// The `c` cut ranks with the largest local divergence; ties go to the
/// smaller rank. Returned in ascending rank order.
pub fn select_cut_points<T: Scalar>(profile: &DualProfile<T>, c: usize) -> Result<CutPointSet> {
    if c == 0 {
        return arg("at least one cut point must be selected");
    }
    if c > profile.d_knn.len() {
        return arg(format!("{c} cut points requested but the profile has {}", profile.d_knn.len()));
    }
    let mut order: Vec<usize> = (0..profile.d_knn.len()).collect();
    order.sort_by(|&a, &b| {
        profile.d_knn[b].partial_cmp(&profile.d_knn[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    let mut indices: Vec<usize> = order[..c].iter().map(|&i| profile.cut_rank(i)).collect();
    indices.sort_unstable();
    Ok(CutPointSet { indices })
}

/// One row of an exported profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub rank: usize,
    pub dual_value: f64,
    pub original_index: usize,
    pub d_knn: Option<f64>,
}

pub const PROFILE_CSV_HEADER: &str = "rank,dual_value,original_index,d_knn";

/// Writes `rank,dual_value,original_index,d_knn`, one row per rank; `d_knn`
/// is empty for ranks that are not interior cuts.
pub fn write_profile_csv<T: Scalar, W: Write>(profile: &DualProfile<T>, mut out: W) -> Result<()> {
    writeln!(out, "{PROFILE_CSV_HEADER}")?;
    for (rank, (&v, &orig)) in profile.sorted_values.iter().zip(&profile.sort_permutation).enumerate() {
        match profile.d_knn_at(rank) {
            Some(d) => writeln!(out, "{rank},{},{orig},{}", v.as_f64(), d.as_f64())?,
            None => writeln!(out, "{rank},{},{orig},", v.as_f64())?,
        }
    }
    Ok(())
}

pub fn read_profile_csv<R: BufRead>(input: R) -> Result<Vec<ProfileRow>> {
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let row = i + 1;
        if i == 0 {
            if line.trim() != PROFILE_CSV_HEADER {
                return Err(Error::Csv { row, column: 1, detail: format!("expected header `{PROFILE_CSV_HEADER}`") });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            return Err(Error::Csv { row, column: cells.len().min(4), detail: format!("expected 4 cells, found {}", cells.len()) });
        }
        let bad = |column: usize| Error::Csv { row, column, detail: format!("cannot parse `{}`", cells[column - 1]) };
        let rank = cells[0].trim().parse().map_err(|_| bad(1))?;
        let dual_value = cells[1].trim().parse().map_err(|_| bad(2))?;
        let original_index = cells[2].trim().parse().map_err(|_| bad(3))?;
        let d_knn = match cells[3].trim() {
            "" => None,
            s => Some(s.parse().map_err(|_| bad(4))?),
        };
        rows.push(ProfileRow { rank, dual_value, original_index, d_knn });
    }
    Ok(rows)
}
