//! Rectangular linear assignment by shortest augmenting paths with dual
//! potentials (the Jonker-Volgenant scheme).
//!
//! Solves `min sum_i cost[i, a(i)]` over injective `a: rows -> cols` for
//! `n_rows <= n_cols`. One Dijkstra-style augmentation per row; the
//! potentials keep reduced costs nonnegative so each search is correct.

/// Solve the assignment problem for a dense row-major `n x m` cost matrix
/// with `n <= m`. Returns the assigned column per row and the total cost.
pub fn solve_assignment(cost: &[f64], n: usize, m: usize) -> (Vec<usize>, f64) {
    assert!(n <= m, "solve_assignment needs n_rows <= n_cols");
    assert_eq!(cost.len(), n * m);
    if n == 0 {
        return (Vec::new(), 0.0);
    }

    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; m];
    let mut col_of_row = vec![usize::MAX; n];
    let mut row_of_col = vec![usize::MAX; m];

    let mut shortest = vec![f64::INFINITY; m];
    let mut pred_row = vec![usize::MAX; m];
    let mut visited_col = vec![false; m];
    let mut visited_row = vec![false; n];

    for cur_row in 0..n {
        shortest.fill(f64::INFINITY);
        pred_row.fill(usize::MAX);
        visited_col.fill(false);
        visited_row.fill(false);

        let mut min_val = 0.0f64;
        let mut i = cur_row;
        let sink;
        loop {
            visited_row[i] = true;
            let mut lowest = f64::INFINITY;
            let mut index = usize::MAX;
            for j in 0..m {
                if visited_col[j] {
                    continue;
                }
                let reduced = min_val + cost[i * m + j] - u[i] - v[j];
                if reduced < shortest[j] {
                    shortest[j] = reduced;
                    pred_row[j] = i;
                }
                // Prefer an unassigned column on ties so paths terminate early.
                if shortest[j] < lowest
                    || (shortest[j] == lowest && row_of_col[j] == usize::MAX)
                {
                    lowest = shortest[j];
                    index = j;
                }
            }
            debug_assert!(lowest.is_finite(), "assignment search ran out of columns");
            min_val = lowest;
            let j = index;
            visited_col[j] = true;
            if row_of_col[j] == usize::MAX {
                sink = j;
                break;
            }
            i = row_of_col[j];
        }

        u[cur_row] += min_val;
        for r in 0..n {
            if visited_row[r] && r != cur_row {
                u[r] += min_val - shortest[col_of_row[r]];
            }
        }
        for j in 0..m {
            if visited_col[j] {
                v[j] -= min_val - shortest[j];
            }
        }

        // Augment: flip assignments back along the predecessor chain.
        let mut j = sink;
        loop {
            let i = pred_row[j];
            row_of_col[j] = i;
            let next = col_of_row[i];
            col_of_row[i] = j;
            if i == cur_row {
                break;
            }
            j = next;
        }
    }

    let total = (0..n).map(|i| cost[i * m + col_of_row[i]]).sum();
    (col_of_row, total)
}
