//! Optimal one-to-one assignment between ground truths and predictions.

use crate::error::{Error, Result};
use crate::geometry::{GroundTruth, Prediction};
use crate::losses::{foreground_loss, LossParams};
use crate::quality::QualityMatrix;

/// Injective map from ground-truth indices to prediction indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(gt_index, pred_index)` pairs, sorted by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    /// Total quality (maximization) or total cost (minimization) of the
    /// reported pairs, summed in ground-truth order.
    pub objective: f64,
    /// Ground truths left without a foreground sample.
    pub unmatched: Vec<usize>,
}

impl Assignment {
    /// Prediction index assigned to ground truth `gt`, if any.
    pub fn pred_for(&self, gt: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|&&(g, _)| g == gt)
            .map(|&(_, p)| p)
    }
}

/// Shortest-augmenting-path solver for the rectangular min-cost assignment,
/// `rows <= cols`. Returns the matched column per row.
///
/// Columns are scanned in ascending order with strict comparisons, which makes
/// tie-breaking deterministic and lexicographically biased.
fn solve_min(rows: usize, cols: usize, cost: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    debug_assert!(rows <= cols);
    // 1-indexed potentials; column 0 is the virtual source column.
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut matched_row = vec![0usize; cols + 1]; // row matched to column, 0 = free
    let mut way = vec![0usize; cols + 1];

    for i in 1..=rows {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut min_to = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < min_to[j] {
                    min_to[j] = cur;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        // Augment along the stored path.
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of_row = vec![usize::MAX; rows];
    for j in 1..=cols {
        let r = matched_row[j];
        if r > 0 {
            col_of_row[r - 1] = j - 1;
        }
    }
    col_of_row
}

fn finish_max(q: &QualityMatrix, col_of_row: Vec<usize>) -> Assignment {
    let n = q.cols();
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    let mut objective = 0.0;
    for (i, &j) in col_of_row.iter().enumerate() {
        // Dummy columns and zero-quality pairs both mean "no foreground
        // sample": a zero-quality match would only poison the loss.
        if j < n && q.get(i, j) > 0.0 {
            objective += q.get(i, j);
            pairs.push((i, j));
        } else {
            unmatched.push(i);
        }
    }
    Assignment {
        pairs,
        objective,
        unmatched,
    }
}

/// Quality-maximizing injective assignment, solved in O(G^2 N).
///
/// The matrix is implicitly padded with G zero-quality columns so rows whose
/// admissible qualities are all zero end up unmatched instead of being bound
/// to an arbitrary prediction.
pub fn hungarian_max(q: &QualityMatrix) -> Result<Assignment> {
    let (g, n) = (q.rows(), q.cols());
    if g > n {
        return Err(Error::NotEnoughColumns { rows: g, cols: n });
    }
    if g == 0 {
        return Ok(Assignment {
            pairs: vec![],
            objective: 0.0,
            unmatched: vec![],
        });
    }
    let cost = |i: usize, j: usize| if j < n { -q.get(i, j) } else { 0.0 };
    let col_of_row = solve_min(g, n + g, &cost);
    Ok(finish_max(q, col_of_row))
}

const BRUTE_FORCE_MAX_COLS: usize = 9;

/// Exhaustive optimum over all injections, for small instances only.
///
/// Injections are enumerated in lexicographic order and replaced only on a
/// strict improvement, so ties resolve to the lexicographically smallest
/// `(gt, pred)` sequence.
pub fn brute_force_match(q: &QualityMatrix) -> Result<Assignment> {
    let (g, n) = (q.rows(), q.cols());
    if g > n {
        return Err(Error::NotEnoughColumns { rows: g, cols: n });
    }
    if n > BRUTE_FORCE_MAX_COLS {
        return Err(Error::BruteForceCap {
            max: BRUTE_FORCE_MAX_COLS,
            got: n,
        });
    }
    if g == 0 {
        return Ok(Assignment {
            pairs: vec![],
            objective: 0.0,
            unmatched: vec![],
        });
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut current = Vec::with_capacity(g);
    let mut used = vec![false; n];
    fn recurse(
        q: &QualityMatrix,
        row: usize,
        current: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if row == q.rows() {
            let total: f64 = current.iter().enumerate().map(|(i, &j)| q.get(i, j)).sum();
            let better = match best {
                Some((b, _)) => total > *b,
                None => true,
            };
            if better {
                *best = Some((total, current.clone()));
            }
            return;
        }
        for j in 0..q.cols() {
            if used[j] {
                continue;
            }
            used[j] = true;
            current.push(j);
            recurse(q, row + 1, current, used, best);
            current.pop();
            used[j] = false;
        }
    }
    recurse(q, 0, &mut current, &mut used, &mut best);

    let (_, cols) = best.expect("at least one injection exists when G <= N");
    Ok(finish_max(q, cols))
}

/// Loss-minimizing assignment: pairwise cost is the foreground loss
/// (focal on the ground-truth class plus weighted GIoU loss).
///
/// Every ground truth is matched; unlike quality maximization there is no
/// zero-cost opt-out.
pub fn loss_cost_match(
    gts: &[GroundTruth],
    preds: &[Prediction],
    params: &LossParams,
) -> Result<Assignment> {
    let (g, n) = (gts.len(), preds.len());
    if g > n {
        return Err(Error::NotEnoughColumns { rows: g, cols: n });
    }
    if g == 0 {
        return Ok(Assignment {
            pairs: vec![],
            objective: 0.0,
            unmatched: vec![],
        });
    }
    let mut cost = vec![0.0f64; g * n];
    for (i, gt) in gts.iter().enumerate() {
        for (j, p) in preds.iter().enumerate() {
            cost[i * n + j] = foreground_loss(gt, p, params);
        }
    }
    let col_of_row = solve_min(g, n, &|i, j| cost[i * n + j]);
    let mut pairs = Vec::with_capacity(g);
    let mut objective = 0.0;
    for (i, &j) in col_of_row.iter().enumerate() {
        objective += cost[i * n + j];
        pairs.push((i, j));
    }
    Ok(Assignment {
        pairs,
        objective,
        unmatched: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qm(g: usize, n: usize, vals: &[f64]) -> QualityMatrix {
        QualityMatrix::new(g, n, vals.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_diagonal() {
        let q = qm(2, 2, &[0.9, 0.1, 0.2, 0.8]);
        let a = hungarian_max(&q).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert!((a.objective - 1.7).abs() < 1e-12);
    }

    #[test]
    fn single_row_takes_argmax() {
        let q = qm(1, 4, &[0.1, 0.5, 0.9, 0.3]);
        let a = hungarian_max(&q).unwrap();
        assert_eq!(a.pairs, vec![(0, 2)]);
    }

    #[test]
    fn rejects_more_rows_than_cols() {
        let q = qm(2, 1, &[0.5, 0.5]);
        assert!(matches!(
            hungarian_max(&q),
            Err(Error::NotEnoughColumns { .. })
        ));
    }

    #[test]
    fn all_zero_row_reported_unmatched() {
        let q = qm(2, 3, &[0.0, 0.0, 0.0, 0.1, 0.9, 0.2]);
        let a = hungarian_max(&q).unwrap();
        assert_eq!(a.pairs, vec![(1, 1)]);
        assert_eq!(a.unmatched, vec![0]);
        assert!((a.objective - 0.9).abs() < 1e-12);
    }

    #[test]
    fn brute_force_small_cases() {
        let q = qm(1, 1, &[0.5]);
        let a = brute_force_match(&q).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.objective, 0.5);

        let q = qm(2, 2, &[0.9, 0.1, 0.1, 0.9]);
        let a = brute_force_match(&q).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn brute_force_rejects_large() {
        let q = QualityMatrix::zeros(2, 10);
        assert!(matches!(
            brute_force_match(&q),
            Err(Error::BruteForceCap { .. })
        ));
    }

    #[test]
    fn hungarian_matches_brute_force_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let g = rng.random_range(1..=6);
            let n = rng.random_range(g..=8);
            let vals: Vec<f64> = (0..g * n).map(|_| rng.random::<f64>()).collect();
            let q = qm(g, n, &vals);
            let fast = hungarian_max(&q).unwrap();
            let slow = brute_force_match(&q).unwrap();
            assert_eq!(
                fast.objective, slow.objective,
                "objective mismatch on g={g} n={n}"
            );
            assert_eq!(fast.pairs, slow.pairs, "pair mismatch on g={g} n={n}");
        }
    }

    #[test]
    fn crowded_pair_falls_back_to_second_best() {
        // Both rows prefer column 1; the optimum shifts row 1 to column 2.
        let q = qm(2, 3, &[0.1, 0.9, 0.2, 0.1, 0.8, 0.7]);
        let a = hungarian_max(&q).unwrap();
        let b = brute_force_match(&q).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.pairs, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn scaling_keeps_pair_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let g = rng.random_range(1..=5);
            let n = rng.random_range(g..=8);
            let vals: Vec<f64> = (0..g * n).map(|_| rng.random::<f64>()).collect();
            let q = qm(g, n, &vals);
            let base = hungarian_max(&q).unwrap();
            // powers of two scale exactly, so comparisons are unchanged
            for factor in [0.5, 2.0, 4.0] {
                let scaled = hungarian_max(&q.scaled(factor)).unwrap();
                assert_eq!(base.pairs, scaled.pairs);
            }
        }
    }

    #[test]
    fn injectivity_always_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let g = rng.random_range(1..=6);
            let n = rng.random_range(g..=12);
            let vals: Vec<f64> = (0..g * n)
                .map(|_| {
                    if rng.random::<f64>() < 0.3 {
                        0.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect();
            let q = qm(g, n, &vals);
            let a = hungarian_max(&q).unwrap();
            let mut seen = std::collections::HashSet::new();
            for &(_, j) in &a.pairs {
                assert!(seen.insert(j), "prediction {j} assigned twice");
            }
        }
    }

    fn simple_gt(cat: usize, b: BBox) -> GroundTruth {
        GroundTruth {
            category: cat,
            bbox: b,
            id: 0,
        }
    }

    fn simple_pred(scores: Vec<f64>, b: BBox) -> Prediction {
        Prediction {
            scores,
            bbox: b,
            level: 0,
            cell: (0, 0),
            anchor: None,
        }
    }

    #[test]
    fn loss_cost_picks_perfect_column() {
        let params = LossParams::default();
        let gt = simple_gt(0, BBox::new(0.0, 0.0, 10.0, 10.0));
        let preds = vec![
            simple_pred(vec![0.1], BBox::new(30.0, 30.0, 40.0, 40.0)),
            simple_pred(vec![0.99], BBox::new(0.0, 0.0, 10.0, 10.0)),
            simple_pred(vec![0.2], BBox::new(2.0, 2.0, 12.0, 12.0)),
        ];
        let a = loss_cost_match(&[gt], &preds, &params).unwrap();
        assert_eq!(a.pairs, vec![(0, 1)]);
    }

    #[test]
    fn loss_cost_matches_enumeration() {
        let params = LossParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let gts: Vec<GroundTruth> = (0..2)
                .map(|i| {
                    let x = rng.random_range(0.0..50.0);
                    let y = rng.random_range(0.0..50.0);
                    let w = rng.random_range(5.0..30.0);
                    let h = rng.random_range(5.0..30.0);
                    GroundTruth {
                        category: i % 2,
                        bbox: BBox::new(x, y, x + w, y + h),
                        id: i as i64,
                    }
                })
                .collect();
            let preds: Vec<Prediction> = (0..3)
                .map(|_| {
                    let x = rng.random_range(0.0..50.0);
                    let y = rng.random_range(0.0..50.0);
                    let w = rng.random_range(5.0..30.0);
                    let h = rng.random_range(5.0..30.0);
                    simple_pred(
                        vec![rng.random::<f64>(), rng.random::<f64>()],
                        BBox::new(x, y, x + w, y + h),
                    )
                })
                .collect();

            let a = loss_cost_match(&gts, &preds, &params).unwrap();

            // Enumerate all injections of 2 rows into 3 columns, minimizing.
            let mut best = f64::INFINITY;
            let mut best_pairs = vec![];
            for j0 in 0..3 {
                for j1 in 0..3 {
                    if j0 == j1 {
                        continue;
                    }
                    let c = foreground_loss(&gts[0], &preds[j0], &params)
                        + foreground_loss(&gts[1], &preds[j1], &params);
                    if c < best {
                        best = c;
                        best_pairs = vec![(0, j0), (1, j1)];
                    }
                }
            }
            assert_eq!(a.pairs, best_pairs);
            assert!((a.objective - best).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_cost_identical_predictions_tie_break() {
        let params = LossParams::default();
        let gts = vec![
            simple_gt(0, BBox::new(0.0, 0.0, 10.0, 10.0)),
            simple_gt(0, BBox::new(0.0, 0.0, 10.0, 10.0)),
        ];
        let p = simple_pred(vec![0.5], BBox::new(1.0, 1.0, 9.0, 9.0));
        let preds = vec![p.clone(), p.clone(), p];
        let a = loss_cost_match(&gts, &preds, &params).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    }
}
