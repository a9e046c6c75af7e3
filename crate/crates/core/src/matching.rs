//! Feature similarity between dictionaries.
//!
//! A dictionary is a matrix whose rows are features. For an autoencoder
//! with tied weights that is the encoder matrix `W` itself (its rows are the
//! decoder columns). Every comparison here is by cosine similarity; a
//! zero-norm feature has similarity 0 with everything.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, matmul_nt, Matrix};

/// Cosine similarities, rows = features of `A`, columns = features of `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTable {
    pub sims: Matrix,
}

impl SimilarityTable {
    pub fn rows(&self) -> usize {
        self.sims.rows()
    }

    pub fn cols(&self) -> usize {
        self.sims.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sims.get(i, j)
    }
}

/// A partial bijection between the rows and columns of a table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(row, col, similarity)`, sorted by row.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Sum of paired similarities, in row order.
    pub fn total(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }

    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }
}

/// Rows scaled to unit length; zero rows stay zero.
pub fn normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = dot(row, row).sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

fn check_dims(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!(
            "dictionaries live in {} and {} dimensions",
            a.cols(),
            b.cols()
        )));
    }
    Ok(())
}

/// Cosine similarity of every feature of `a` against every feature of `b`.
pub fn cosine_table(a: &Matrix, b: &Matrix) -> Result<SimilarityTable> {
    check_dims(a, b)?;
    let sims = matmul_nt(&normalize_rows(a), &normalize_rows(b)).map(|v| v.clamp(-1.0, 1.0));
    Ok(SimilarityTable { sims })
}

/// Row-wise argmax of a table, lowest column index on ties.
///
/// An empty column set yields `(0, 0.0)` for every row.
pub fn row_max(table: &SimilarityTable) -> Vec<(usize, f64)> {
    table
        .sims
        .row_iter()
        .map(|row| {
            let mut best = (0, row.first().copied().unwrap_or(0.0));
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best.1 {
                    best = (j, v);
                }
            }
            best
        })
        .collect()
}

/// For each feature of `a`, its most similar feature in `b`.
///
/// This mapping is generally many-to-one; see [`hungarian`] for a
/// bijective pairing.
pub fn max_cosine_pairs(a: &Matrix, b: &Matrix) -> Result<Vec<(usize, f64)>> {
    Ok(row_max(&cosine_table(a, b)?))
}

/// Mean over the features of `a` of their best cosine similarity in `b`.
///
/// Not symmetric: features of `b` that no feature of `a` picks do not
/// count. See [`mmcs_symmetric`].
pub fn mmcs(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Dimension("mmcs of an empty dictionary".into()));
    }
    let best = max_cosine_pairs(a, b)?;
    Ok(best.iter().map(|p| p.1).sum::<f64>() / a.rows() as f64)
}

/// Average of `mmcs(a, b)` and `mmcs(b, a)`.
pub fn mmcs_symmetric(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(0.5 * (mmcs(a, b)? + mmcs(b, a)?))
}

/// Maximum-similarity one-to-one assignment.
///
/// Pairs `min(rows, cols)` features. The optimum is found with the
/// shortest-augmenting-path Hungarian method on negated similarities
/// (O(n³)); among co-optimal assignments the lexicographically smallest
/// row-to-column mapping is returned, found by re-routing along tight edges
/// of the final dual solution.
pub fn hungarian(table: &SimilarityTable) -> Result<Assignment> {
    let (n, m) = (table.rows(), table.cols());
    if let Some((i, j)) = table.sims.first_non_finite() {
        return Err(Error::Numeric(format!(
            "similarity table entry ({i}, {j}) is not finite"
        )));
    }
    if n == 0 || m == 0 {
        return Ok(Assignment { pairs: Vec::new() });
    }
    // Square cost matrix; padding rows or columns cost nothing.
    let size = n.max(m);
    let mut cost = vec![0.0; size * size];
    for i in 0..n {
        for j in 0..m {
            cost[i * size + j] = -table.get(i, j);
        }
    }
    let (mut col_of, u, v) = solve_min_cost(&cost, size);
    lexicographic_refine(&cost, size, &u, &v, &mut col_of);

    let pairs = (0..n)
        .filter(|&i| col_of[i] < m)
        .map(|i| (i, col_of[i], table.get(i, col_of[i])))
        .collect();
    Ok(Assignment { pairs })
}

/// Shortest augmenting path assignment on a square cost matrix.
///
/// Returns the row-to-column matching and the row and column potentials,
/// which satisfy `cost[i][j] - u[i] - v[j] >= 0` with equality on matched
/// pairs.
fn solve_min_cost(cost: &[f64], n: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based internally; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        if row_of_col[j] > 0 {
            col_of[row_of_col[j] - 1] = j - 1;
        }
    }
    (col_of, u[1..].to_vec(), v[1..].to_vec())
}

/// Moves an optimal matching to the lexicographically smallest optimal one.
///
/// Every optimal matching uses only edges that are tight under the optimal
/// potentials, and every perfect matching of tight edges is optimal. Rows
/// are fixed in order; each takes the smallest tight column reachable by an
/// alternating cycle through rows not yet fixed.
fn lexicographic_refine(cost: &[f64], n: usize, u: &[f64], v: &[f64], col_of: &mut [usize]) {
    let scale = cost.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-10 * scale;
    let tight = |i: usize, j: usize| cost[i * n + j] - u[i] - v[j] <= tol;

    let mut row_of = vec![0usize; n];
    for (i, &j) in col_of.iter().enumerate() {
        row_of[j] = i;
    }
    let mut fixed = vec![false; n];
    let mut prev = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    let mut queue = Vec::with_capacity(n);

    for r in 0..n {
        let target = col_of[r];
        for c in 0..target {
            if !tight(r, c) || fixed[row_of[c]] {
                continue;
            }
            // Find an alternating path from row_of[c] to column `target`
            // that avoids fixed rows and row r.
            seen.iter_mut().for_each(|s| *s = false);
            queue.clear();
            let start = row_of[c];
            seen[start] = true;
            queue.push(start);
            let mut head = 0;
            let mut reached = false;
            'bfs: while head < queue.len() {
                let row = queue[head];
                head += 1;
                for col in 0..n {
                    if col == col_of[row] || !tight(row, col) {
                        continue;
                    }
                    if col == target {
                        prev[col] = row;
                        reached = true;
                        break 'bfs;
                    }
                    let next = row_of[col];
                    if next == r || fixed[next] || seen[next] {
                        continue;
                    }
                    seen[next] = true;
                    prev[col] = row;
                    queue.push(next);
                }
            }
            if !reached {
                continue;
            }
            // Shift the path: each row on it takes the column recorded in
            // `prev`, walking back from `target`.
            let mut col = target;
            loop {
                let row = prev[col];
                let old = col_of[row];
                col_of[row] = col;
                row_of[col] = row;
                if row == start {
                    break;
                }
                col = old;
            }
            col_of[r] = c;
            row_of[c] = r;
            break;
        }
        fixed[r] = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn table(rows: &[&[f64]]) -> SimilarityTable {
        SimilarityTable {
            sims: Matrix::from_rows(rows).unwrap(),
        }
    }

    fn random_dict(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, 7);
        Matrix::from_vec(rows, cols, rng.gaussian_vec(rows * cols)).unwrap()
    }

    /// Exhaustive search over permutations (rows <= cols).
    fn brute_force(t: &SimilarityTable) -> (f64, Vec<usize>) {
        fn rec(
            t: &SimilarityTable,
            row: usize,
            used: &mut Vec<bool>,
            cur: &mut Vec<usize>,
            best: &mut (f64, Vec<usize>),
        ) {
            if row == t.rows() {
                let total: f64 = cur.iter().enumerate().map(|(i, &j)| t.get(i, j)).sum();
                if total > best.0 {
                    *best = (total, cur.clone());
                }
                return;
            }
            for j in 0..t.cols() {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    rec(t, row + 1, used, cur, best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (f64::NEG_INFINITY, Vec::new());
        rec(t, 0, &mut vec![false; t.cols()], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn cosine_examples() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(cosine_table(&a, &b).unwrap().get(0, 0), 0.0);
        let c = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let s = cosine_table(&c, &a).unwrap().get(0, 0);
        assert!((s - 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert!(matches!(
            cosine_table(&a, &Matrix::zeros(1, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn orthonormal_self_table_is_identity() {
        let t = cosine_table(&Matrix::identity(4), &Matrix::identity(4)).unwrap();
        assert_eq!(t.sims, Matrix::identity(4));
    }

    #[test]
    fn zero_feature_has_zero_similarity() {
        let a = Matrix::from_rows(&[[0.0, 0.0], [1.0, 2.0]]).unwrap();
        let b = random_dict(3, 2, 1);
        let pairs = max_cosine_pairs(&a, &b).unwrap();
        assert_eq!(pairs[0], (0, 0.0));
    }

    #[test]
    fn argmax_is_many_to_one() {
        let t = table(&[&[0.9, 0.1], &[0.8, 0.7]]);
        assert_eq!(row_max(&t), vec![(0, 0.9), (0, 0.8)]);
        let a = hungarian(&t).unwrap();
        assert_eq!(a.pairs, vec![(0, 0, 0.9), (1, 1, 0.7)]);
        assert!((a.total() - 1.6).abs() < 1e-15);
    }

    #[test]
    fn identity_pattern_gives_identity() {
        let d = random_dict(6, 5, 2);
        let a = hungarian(&cosine_table(&d, &d).unwrap()).unwrap();
        for (i, &(r, c, s)) in a.pairs.iter().enumerate() {
            assert_eq!((r, c), (i, i));
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_resolve_lexicographically() {
        // All-equal table: every permutation is optimal.
        let t = SimilarityTable {
            sims: Matrix::from_fn(5, 5, |_, _| 0.5),
        };
        let cols: Vec<usize> = hungarian(&t).unwrap().pairs.iter().map(|p| p.1).collect();
        assert_eq!(cols, vec![0, 1, 2, 3, 4]);
        // Anti-diagonal-favoured block with one tie.
        let t = table(&[&[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let cols: Vec<usize> = hungarian(&t).unwrap().pairs.iter().map(|p| p.1).collect();
        assert_eq!(cols, vec![0, 1, 2]);
    }

    #[test]
    fn rectangular_tables() {
        let wide = table(&[&[0.1, 0.9, 0.2], &[0.8, 0.85, 0.0]]);
        let a = hungarian(&wide).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a.pairs, vec![(0, 1, 0.9), (1, 0, 0.8)]);
        let tall = SimilarityTable {
            sims: wide.sims.transpose(),
        };
        let b = hungarian(&tall).unwrap();
        assert_eq!(b.len(), 2);
        assert!((b.total() - a.total()).abs() < 1e-15);
    }

    #[test]
    fn mmcs_examples() {
        let w = random_dict(7, 4, 3);
        assert!((mmcs(&w, &w).unwrap() - 1.0).abs() < 1e-12);
        let a = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0, 1.0, 0.0], [0.0, 0.0, -2.0]]).unwrap();
        assert_eq!(mmcs(&a, &b).unwrap(), 0.0);
        let a = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 1.0], [0.0, -1.0]]).unwrap();
        assert!((mmcs(&a, &b).unwrap() - 2f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn mmcs_is_asymmetric() {
        // a ⊂ b: every feature of a finds itself, b's extra feature does not.
        let a = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(mmcs(&a, &b).unwrap(), 1.0);
        assert!((mmcs(&b, &a).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((mmcs_symmetric(&a, &b).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn hungarian_matches_brute_force_small() {
        let mut rng = RngStream::new(99, 0);
        for trial in 0..300 {
            let n = 1 + trial % 6;
            let m = n + (trial / 6) % 2;
            let t = SimilarityTable {
                sims: Matrix::from_fn(n, m, |_, _| rng.uniform_range(-1.0, 1.0)),
            };
            let a = hungarian(&t).unwrap();
            let (best, perm) = brute_force(&t);
            assert_eq!(a.total(), best, "trial {trial}");
            let cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
            assert_eq!(cols, perm);
        }
    }

    proptest! {
        #[test]
        fn mmcs_scale_invariant(
            seed in 0u64..1000,
            scales in prop::collection::vec(0.01f64..100.0, 6),
        ) {
            let a = random_dict(6, 5, seed);
            let b = random_dict(4, 5, seed + 1);
            let mut a2 = a.clone();
            for (i, s) in scales.iter().enumerate() {
                a2.row_mut(i).iter_mut().for_each(|v| *v *= s);
            }
            let x = mmcs(&a, &b).unwrap();
            prop_assert!((x - mmcs(&a2, &b).unwrap()).abs() < 1e-12);
            prop_assert!((mmcs(&b, &a).unwrap() - mmcs(&b, &a2).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn mmcs_bounds_hungarian_and_argmax(seed in 0u64..1000) {
            let a = random_dict(8, 6, seed);
            let b = random_dict(8, 6, seed + 17);
            let t = cosine_table(&a, &b).unwrap();
            let h = hungarian(&t).unwrap();
            let m = mmcs(&a, &b).unwrap();
            prop_assert!(m + 1e-12 >= h.total() / 8.0);
            // Any bijection, including the identity pairing, scores at most
            // the optimum.
            let ident: f64 = (0..8).map(|i| t.get(i, i)).sum();
            prop_assert!(h.total() + 1e-12 >= ident);
        }
    }
}
