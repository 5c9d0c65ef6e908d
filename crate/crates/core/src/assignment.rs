//! Optimal bipartite matching.
//!
//! [`solve_min_cost`] is a shortest-augmenting-path Kuhn–Munkres solver with
//! row/column potentials, `O(n²m)` for an `n x m` matrix with `n ≤ m`.
//! Taller matrices are solved on their transpose.

use crate::error::{Error, Result};
use crate::matrix::{AffinityMatrix, Matrix};

/// A partial one-to-one matching between row and column indices.
///
/// `pairs` is sorted by row; both unmatched lists are ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Matching {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, rows: usize, cols: usize) -> Self {
        pairs.sort_unstable();
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        for &(r, c) in &pairs {
            row_used[r] = true;
            col_used[c] = true;
        }
        Matching {
            pairs,
            unmatched_rows: (0..rows).filter(|&r| !row_used[r]).collect(),
            unmatched_cols: (0..cols).filter(|&c| !col_used[c]).collect(),
        }
    }

    /// Column matched to `row`, if any.
    pub fn col_for_row(&self, row: usize) -> Option<usize> {
        self.pairs
            .binary_search_by_key(&row, |&(r, _)| r)
            .ok()
            .map(|k| self.pairs[k].1)
    }

    pub fn total_cost(&self, cost: &Matrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost[(r, c)]).sum()
    }
}

/// Minimum-cost matching of maximum cardinality (`min(rows, cols)` pairs).
///
/// Ties resolve deterministically: columns are scanned in ascending order and
/// the first strict minimum wins.
pub fn solve_min_cost(cost: &Matrix) -> Result<Matching> {
    if let Some(bad) = cost.as_slice().iter().find(|x| !x.is_finite()) {
        return Err(Error::invalid(
            "cost matrix",
            format!("entry {bad} is not finite"),
        ));
    }
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Ok(Matching::from_pairs(Vec::new(), n, m));
    }
    let pairs = if n <= m {
        hungarian(cost)
    } else {
        hungarian(&cost.transpose())
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect()
    };
    Ok(Matching::from_pairs(pairs, n, m))
}

/// Requires `rows ≤ cols`; every row gets a column.
fn hungarian(cost: &Matrix) -> Vec<(usize, usize)> {
    let (n, m) = cost.shape();
    debug_assert!(n <= m);
    // 1-based with a virtual column 0, following the classic formulation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect()
}

/// Hungarian matching on `1 - aff`, then gating.
///
/// A pair survives when `aff ≥ min_affinity`. With `min_affinity == 0` the
/// gate becomes `aff > 0`, so pairs with no overlap at all never match.
pub fn match_by_affinity(aff: &AffinityMatrix, min_affinity: f64) -> Matching {
    let (n, m) = aff.shape();
    let cost = aff.map(|a| 1.0 - a);
    // entries come from bounded similarity functions, never NaN
    let full = solve_min_cost(&cost).unwrap_or_default();
    let keep = |a: f64| {
        if min_affinity == 0.0 {
            a > 0.0
        } else {
            a >= min_affinity
        }
    };
    let pairs = full
        .pairs
        .into_iter()
        .filter(|&(r, c)| keep(aff[(r, c)]))
        .collect();
    Matching::from_pairs(pairs, n, m)
}
