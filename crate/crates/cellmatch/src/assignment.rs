//! Exact linear assignment with an unassignment option.
//!
//! The solver runs shortest augmenting paths (Jonker–Volgenant family) on an
//! implicit square augmentation of the rectangular cost table: every left node
//! gets a zero-cost dummy column, every right node a zero-cost dummy row, and
//! dummy-dummy edges are free. A minimum perfect matching on that square
//! system is exactly a minimum partial matching on the original table, so
//! "at most one" semantics come out of a standard LAP. +∞ entries never lie
//! on an augmenting path because the dummy edge is always available.

use serde::{Deserialize, Serialize};

use crate::costs::GmInstance;
use crate::scalar::Real;

/// A partial one-to-one matching between two index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    /// (left, right) pairs, sorted by left index.
    pub pairs: Vec<(usize, usize)>,
    pub n_left: usize,
    pub n_right: usize,
}

impl Matching {
    pub fn empty(n_left: usize, n_right: usize) -> Self {
        Self { pairs: Vec::new(), n_left, n_right }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// right index per left node, if matched.
    pub fn forward(&self) -> Vec<Option<usize>> {
        let mut f = vec![None; self.n_left];
        for &(i, s) in &self.pairs {
            f[i] = Some(s);
        }
        f
    }

    /// left index per right node, if matched.
    pub fn backward(&self) -> Vec<Option<usize>> {
        let mut b = vec![None; self.n_right];
        for &(i, s) in &self.pairs {
            b[s] = Some(i);
        }
        b
    }

    /// Uniqueness on both sides and indices in range.
    pub fn is_valid(&self) -> bool {
        let mut left_seen = vec![false; self.n_left];
        let mut right_seen = vec![false; self.n_right];
        for &(i, s) in &self.pairs {
            if i >= self.n_left || s >= self.n_right || left_seen[i] || right_seen[s] {
                return false;
            }
            left_seen[i] = true;
            right_seen[s] = true;
        }
        true
    }
}

/// Dense rectangular cost table; +∞ marks a forbidden assignment.
#[derive(Debug, Clone)]
pub struct CostTable<F: Real> {
    pub n_left: usize,
    pub n_right: usize,
    data: Vec<F>,
}

impl<F: Real> CostTable<F> {
    pub fn filled(n_left: usize, n_right: usize, value: F) -> Self {
        Self { n_left, n_right, data: vec![value; n_left * n_right] }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let n_left = rows.len();
        let n_right = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == n_right), "ragged cost table");
        Self { n_left, n_right, data: rows.iter().flatten().copied().collect() }
    }

    pub fn get(&self, i: usize, s: usize) -> F {
        self.data[i * self.n_right + s]
    }

    pub fn set(&mut self, i: usize, s: usize, value: F) {
        self.data[i * self.n_right + s] = value;
    }
}

/// Globally optimal partial assignment minimizing the sum of selected entries.
///
/// Ties between equally short augmenting paths break toward the lowest column
/// index, so the returned matching is deterministic.
pub fn solve_lap<F: Real>(table: &CostTable<F>) -> (Matching, F) {
    let nl = table.n_left;
    let nr = table.n_right;
    if nl == 0 || nr == 0 {
        return (Matching::empty(nl, nr), F::zero());
    }
    // Square augmentation: rows = real lefts + one dummy per right,
    // columns = real rights + one dummy per left.
    let n = nl + nr;
    let cost = |i: usize, j: usize| -> F {
        match (i < nl, j < nr) {
            (true, true) => table.get(i, j),
            (true, false) => {
                if j - nr == i {
                    F::zero()
                } else {
                    F::infinity()
                }
            }
            (false, true) => {
                if i - nl == j {
                    F::zero()
                } else {
                    F::infinity()
                }
            }
            (false, false) => F::zero(),
        }
    };

    let mut u = vec![F::zero(); n];
    let mut v = vec![F::zero(); n];
    let mut col4row = vec![usize::MAX; n];
    let mut row4col = vec![usize::MAX; n];
    let mut shortest = vec![F::infinity(); n];
    let mut path = vec![usize::MAX; n];
    let mut seen_row = vec![false; n];
    let mut seen_col = vec![false; n];

    // Dummy rows are inserted first so that real rows, processed in ascending
    // order afterwards, settle on the lowest right index among cost ties.
    let row_order = (nl..n).chain(0..nl);
    for cur_row in row_order {
        for x in shortest.iter_mut() {
            *x = F::infinity();
        }
        seen_row.iter_mut().for_each(|x| *x = false);
        seen_col.iter_mut().for_each(|x| *x = false);

        let mut min_val = F::zero();
        let mut i = cur_row;
        let sink = loop {
            seen_row[i] = true;
            let mut lowest = F::infinity();
            let mut index = usize::MAX;
            for j in 0..n {
                if seen_col[j] {
                    continue;
                }
                let c = cost(i, j);
                if c < F::infinity() {
                    let r = min_val + c - u[i] - v[j];
                    if r < shortest[j] {
                        shortest[j] = r;
                        path[j] = i;
                    }
                }
                if shortest[j] < lowest {
                    lowest = shortest[j];
                    index = j;
                }
            }
            // The dummy block guarantees a finite path from every row.
            debug_assert!(lowest < F::infinity(), "augmented LAP must stay feasible");
            min_val = lowest;
            let j = index;
            seen_col[j] = true;
            if row4col[j] == usize::MAX {
                break j;
            }
            i = row4col[j];
        };

        u[cur_row] = u[cur_row] + min_val;
        for r in 0..n {
            if seen_row[r] && r != cur_row {
                u[r] = u[r] + min_val - shortest[col4row[r]];
            }
        }
        for c in 0..n {
            if seen_col[c] {
                v[c] = v[c] - (min_val - shortest[c]);
            }
        }

        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            let prev = col4row[r];
            col4row[r] = j;
            if r == cur_row {
                break;
            }
            j = prev;
        }
    }

    let mut pairs = Vec::new();
    let mut objective = F::zero();
    for i in 0..nl {
        let j = col4row[i];
        if j < nr {
            pairs.push((i, j));
            objective = objective + table.get(i, j);
        }
    }
    (Matching { pairs, n_left: nl, n_right: nr }, objective)
}

/// Solve the linear part of a GM instance (quadratic costs ignored).
pub fn lap_from_instance<F: Real>(inst: &GmInstance<F>) -> (Matching, F) {
    let mut table = CostTable::filled(inst.n_left, inst.n_right, F::infinity());
    for (i, row) in inst.allowed.iter().enumerate() {
        for &(s, cost) in row {
            table.set(i, s, cost);
        }
    }
    solve_lap(&table)
}
