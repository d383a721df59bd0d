//! Optimal and k-best rectangular assignment.
//!
//! Costs are extended reals: `+∞` marks a forbidden pair. Every row must be
//! assigned to a distinct column, so a problem is feasible only when
//! `rows <= cols` and a perfect row matching over finite entries exists.
//!
//! The optimal solver is a shortest augmenting path Hungarian method working
//! directly on the rectangular matrix. Among several optimal assignments the
//! lexicographically smallest column vector is returned. The k-best solver is
//! Murty's partitioning scheme on top of it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{invalid, Error, Result};

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    /// Entries must be finite or `+∞`.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "cost matrix data has {} entries, expected {}",
                data.len(),
                rows * cols
            )));
        }
        if let Some(bad) = data.iter().find(|c| c.is_nan() || **c == f64::NEG_INFINITY) {
            return Err(invalid(format!("cost entries must be finite or +inf, got {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(invalid("ragged cost matrix"));
        }
        Self::new(r, c, rows.concat())
    }

    /// All-forbidden matrix.
    pub fn forbidden(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![f64::INFINITY; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Sets an entry; NaN and `-∞` are rejected.
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        assert!(!v.is_nan() && v != f64::NEG_INFINITY, "invalid cost {v}");
        self.data[r * self.cols + c] = v;
    }

    fn cost_of(&self, cols: &[usize]) -> f64 {
        cols.iter().enumerate().map(|(r, &c)| self.get(r, c)).sum()
    }
}

/// Row-to-column assignment with its total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Column assigned to each row.
    pub cols: Vec<usize>,
    pub cost: f64,
}

struct Solved {
    cols: Vec<usize>,
    cost: f64,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Hungarian method on the whole matrix, rows <= cols.
fn hungarian(c: &CostMatrix) -> Option<Solved> {
    let (n, m) = (c.rows, c.cols);
    if n == 0 {
        return Some(Solved {
            cols: Vec::new(),
            cost: 0.0,
            u: Vec::new(),
            v: vec![0.0; m],
        });
    }
    if n > m {
        return None;
    }
    // 1-based potentials; index 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0f64; m + 1];
    let mut used = vec![false; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &c.data[(i0 - 1) * m..i0 * m];
            let ui = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = usize::MAX;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cost = row[j - 1];
                if cost.is_finite() {
                    let cur = cost - ui - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if j1 == usize::MAX {
                return None;
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            cols[p[j] - 1] = j - 1;
        }
    }
    let cost = c.cost_of(&cols);
    Some(Solved {
        cols,
        cost,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    })
}

/// Subproblem over the free rows and columns. `fixed[r] = Some(c)` forces row
/// `r` onto column `c`; `banned` pairs become forbidden.
struct Reduced {
    matrix: CostMatrix,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn reduce(c: &CostMatrix, fixed: &[Option<usize>], banned: &[(usize, usize)]) -> Reduced {
    let mut col_taken = vec![false; c.cols];
    for f in fixed.iter().flatten() {
        col_taken[*f] = true;
    }
    let rows: Vec<usize> = (0..c.rows)
        .filter(|&r| fixed.get(r).copied().flatten().is_none())
        .collect();
    let cols: Vec<usize> = (0..c.cols).filter(|&j| !col_taken[j]).collect();
    let mut pos = vec![usize::MAX; c.cols];
    for (k, &j) in cols.iter().enumerate() {
        pos[j] = k;
    }
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        data.extend(cols.iter().map(|&j| c.get(r, j)));
    }
    let mut matrix = CostMatrix {
        rows: rows.len(),
        cols: cols.len(),
        data,
    };
    for &(r, j) in banned {
        if let (Ok(k), true) = (rows.binary_search(&r), pos[j] != usize::MAX) {
            matrix.data[k * matrix.cols + pos[j]] = f64::INFINITY;
        }
    }
    Reduced { matrix, rows, cols }
}

/// Full column vector from a reduced solution.
fn expand(c: &CostMatrix, red: &Reduced, fixed: &[Option<usize>], sub: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = (0..c.rows)
        .map(|r| fixed.get(r).copied().flatten().unwrap_or(usize::MAX))
        .collect();
    for (k, &r) in red.rows.iter().enumerate() {
        out[r] = red.cols[sub[k]];
    }
    out
}

fn tie_tolerance(c: &CostMatrix, cost: f64) -> f64 {
    let scale = c
        .data
        .iter()
        .filter(|x| x.is_finite())
        .fold(cost.abs(), |a, b| a.max(b.abs()));
    1e-12 * (1.0 + scale) * (c.rows.max(1) as f64)
}

/// True when another optimum may exist. With optimal duals every optimum
/// uses tight edges only and leaves unassigned only columns of zero
/// potential. So a second optimum means re-routing rows along tight edges:
/// either a cycle of moves, or a chain that frees a zero-potential column
/// and ends on an unassigned one. Moves are edges `a -> b` when the row on
/// column `a` has a tight edge to column `b`.
fn may_have_ties(c: &CostMatrix, s: &Solved) -> bool {
    let tol = tie_tolerance(c, s.cost);
    let mut owner = vec![usize::MAX; c.cols];
    for (r, &j) in s.cols.iter().enumerate() {
        owner[j] = r;
    }
    let moves = |a: usize| {
        let r = owner[a];
        let row = &c.data[r * c.cols..(r + 1) * c.cols];
        (0..c.cols).filter(move |&b| b != a && row[b].is_finite() && (row[b] - s.u[r] - s.v[b]).abs() <= tol)
    };
    // 0 unvisited, 1 on the DFS stack, 2 done.
    let mut state = vec![0u8; c.cols];
    for start in s.cols.iter().copied() {
        if state[start] != 0 {
            continue;
        }
        let mut stack: Vec<(usize, Vec<usize>)> = vec![(start, moves(start).collect())];
        state[start] = 1;
        while let Some((a, next)) = stack.last_mut() {
            match next.pop() {
                Some(b) if owner[b] == usize::MAX => continue,
                Some(b) if state[b] == 1 => return true,
                Some(b) if state[b] == 0 => {
                    state[b] = 1;
                    let nb = moves(b).collect();
                    stack.push((b, nb));
                }
                Some(_) => {}
                None => {
                    state[*a] = 2;
                    stack.pop();
                }
            }
        }
    }
    // Chains from a zero-potential assigned column to an unassigned one.
    let mut seen = vec![false; c.cols];
    let mut queue: Vec<usize> = s.cols.iter().copied().filter(|&a| s.v[a].abs() <= tol).collect();
    queue.iter().for_each(|&a| seen[a] = true);
    while let Some(a) = queue.pop() {
        for b in moves(a) {
            if owner[b] == usize::MAX {
                return true;
            }
            if !seen[b] {
                seen[b] = true;
                queue.push(b);
            }
        }
    }
    false
}

/// Optimal solve with lexicographic tie-breaking.
fn solve_plain(c: &CostMatrix) -> Option<Assignment> {
    let s = hungarian(c)?;
    if !may_have_ties(c, &s) {
        return Some(Assignment {
            cols: s.cols,
            cost: s.cost,
        });
    }
    let best = s.cost;
    let tol = tie_tolerance(c, best);
    let mut cols = s.cols;
    let mut fix: Vec<Option<usize>> = vec![None; c.rows];
    for r in 0..c.rows {
        for j in 0..cols[r] {
            if !c.get(r, j).is_finite() || fix.contains(&Some(j)) {
                continue;
            }
            fix[r] = Some(j);
            let red = reduce(c, &fix, &[]);
            match hungarian(&red.matrix) {
                Some(alt) if c.cost_of(&expand(c, &red, &fix, &alt.cols)) <= best + tol => {
                    cols = expand(c, &red, &fix, &alt.cols);
                    break;
                }
                _ => fix[r] = None,
            }
        }
        fix[r] = Some(cols[r]);
    }
    let cost = c.cost_of(&cols);
    Some(Assignment { cols, cost })
}

/// Optimal solve under constraints, with lexicographic tie-breaking.
fn solve_constrained(c: &CostMatrix, fixed: &[Option<usize>], banned: &[(usize, usize)]) -> Option<Assignment> {
    let red = reduce(c, fixed, banned);
    let sub = solve_plain(&red.matrix)?;
    let cols = expand(c, &red, fixed, &sub.cols);
    let cost = c.cost_of(&cols);
    Some(Assignment { cols, cost })
}

/// Minimum-cost assignment of every row to a distinct column.
pub fn solve_optimal(c: &CostMatrix) -> Result<Assignment> {
    solve_plain(c).ok_or(Error::NoSolution)
}

struct Node {
    solution: Assignment,
    fixed: Vec<Option<usize>>,
    banned: Vec<(usize, usize)>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // Reversed so that BinaryHeap pops the cheapest, then lexicographically
    // smallest, solution first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .solution
            .cost
            .total_cmp(&self.solution.cost)
            .then_with(|| other.solution.cols.cmp(&self.solution.cols))
    }
}

/// The `min(k, #feasible)` cheapest distinct assignments in nondecreasing
/// cost order (Murty's algorithm).
pub fn solve_k_best(c: &CostMatrix, k: usize) -> Result<Vec<Assignment>> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    // Columns forbidden for every row never appear in a solution; dropping
    // them keeps the order of the remaining ones, hence the lexicographic ties.
    let active: Vec<usize> = (0..c.cols)
        .filter(|&j| (0..c.rows).any(|r| c.get(r, j).is_finite()))
        .collect();
    if active.len() < c.cols {
        let mut data = Vec::with_capacity(c.rows * active.len());
        for r in 0..c.rows {
            data.extend(active.iter().map(|&j| c.get(r, j)));
        }
        let compact = CostMatrix {
            rows: c.rows,
            cols: active.len(),
            data,
        };
        let mut out = solve_k_best(&compact, k)?;
        for a in &mut out {
            a.cols.iter_mut().for_each(|j| *j = active[*j]);
            a.cost = c.cost_of(&a.cols);
        }
        return Ok(out);
    }
    let root = solve_optimal(c)?;
    let mut out = Vec::with_capacity(k);
    let mut heap = BinaryHeap::new();
    heap.push(Node {
        solution: root,
        fixed: vec![None; c.rows],
        banned: Vec::new(),
    });
    while let Some(node) = heap.pop() {
        let Node {
            solution,
            fixed,
            banned,
        } = node;
        out.push(solution.clone());
        if out.len() == k {
            break;
        }
        // Partition the remaining solution space of this node.
        let mut child_fixed = fixed.clone();
        for r in 0..c.rows {
            if child_fixed[r].is_some() {
                continue;
            }
            let mut child_banned = banned.clone();
            child_banned.push((r, solution.cols[r]));
            if let Some(sol) = solve_constrained(c, &child_fixed, &child_banned) {
                heap.push(Node {
                    solution: sol,
                    fixed: child_fixed.clone(),
                    banned: child_banned,
                });
            }
            child_fixed[r] = Some(solution.cols[r]);
        }
    }
    Ok(out)
}
