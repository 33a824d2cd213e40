//! Weighted 2-means: the split primitive that divides one ball into two
//! children while learning a per-dimension weight vector by inverse-scatter
//! normalization.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{GbError, Result};

/// Nonnegative per-dimension weights summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(GbError::invalid("empty weight vector"));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(GbError::invalid("weights must be finite and >= 0"));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GbError::invalid(format!("weights sum to {sum}, expected 1")));
        }
        Ok(WeightVector(w))
    }

    pub fn uniform(d: usize) -> Self {
        assert!(d > 0, "uniform weights need at least one dimension");
        WeightVector(vec![1.0 / d as f64; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Outcome of one binary split. Index sets are positions within the point
/// block that was split (the caller owns any global mapping).
#[derive(Debug, Clone)]
pub struct SplitResult {
    pub left_indices: Vec<usize>,
    pub right_indices: Vec<usize>,
    pub centroids: [Array1<f64>; 2],
    pub weight: WeightVector,
    pub objective: f64,
    pub iterations: usize,
    /// Objective after each full assign/centroid/weight round.
    pub objective_trace: Vec<f64>,
}

/// √(Σ_j w_j (z_j − c_j)²)
pub fn weighted_distance(z: ArrayView1<'_, f64>, c: ArrayView1<'_, f64>, w: &WeightVector) -> Result<f64> {
    if z.len() != c.len() || z.len() != w.len() {
        return Err(GbError::invalid("dimension mismatch"));
    }
    let mut s = 0.0;
    for j in 0..z.len() {
        let d = z[j] - c[j];
        s += w.as_slice()[j] * d * d;
    }
    Ok(s.sqrt())
}

fn weighted_sqdist_pow(row: ArrayView1<'_, f64>, c: &[f64], wpow: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..c.len() {
        let d = row[j] - c[j];
        s += wpow[j] * d * d;
    }
    s
}

/// Indices of the two seed points: the point farthest (weighted) from the
/// mean, then the point farthest from that one. Ties go to the lowest index.
fn farthest_pair_indices(points: ArrayView2<'_, f64>, w: &WeightVector) -> Result<(usize, usize)> {
    let (n, d) = points.dim();
    if n < 2 {
        return Err(GbError::invalid("unsplittable: fewer than 2 points"));
    }
    let wv = w.as_slice();
    let mut mean = vec![0.0; d];
    for row in points.rows() {
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let dist_to = |target: &[f64]| -> (usize, f64) {
        let mut best = (0usize, -1.0f64);
        for (i, row) in points.rows().into_iter().enumerate() {
            let mut s = 0.0;
            for j in 0..d {
                let diff = row[j] - target[j];
                s += wv[j] * diff * diff;
            }
            if s > best.1 {
                best = (i, s);
            }
        }
        best
    };
    let (i1, _) = dist_to(&mean);
    let c1: Vec<f64> = points.row(i1).to_vec();
    let (i2, _) = dist_to(&c1);
    Ok((i1, i2))
}

/// The two farthest-pair seed points. On a zero-diameter ball the seeds
/// coincide; that degenerate case makes the subsequent split fail closed.
pub fn farthest_pair_seed(
    points: ArrayView2<'_, f64>,
    w: &WeightVector,
    _rng_seed: u64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let (i1, i2) = farthest_pair_indices(points, w)?;
    Ok((points.row(i1).to_owned(), points.row(i2).to_owned()))
}

/// Inverse-scatter weight update. Zero-scatter dimensions get weight 0 and
/// the remaining weights renormalize over the positive-scatter dimensions;
/// an all-zero scatter vector yields uniform weights.
pub fn update_weights(scatters: &[f64], beta: f64, eps: f64) -> Result<WeightVector> {
    if scatters.is_empty() {
        return Err(GbError::invalid("empty scatter vector"));
    }
    if scatters.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(GbError::invalid("scatters must be finite and >= 0"));
    }
    if !(beta > 1.0) || !beta.is_finite() {
        return Err(GbError::invalid("beta must be > 1"));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(GbError::invalid("eps must be > 0"));
    }
    if scatters.iter().all(|&v| v == 0.0) {
        return Ok(WeightVector::uniform(scatters.len()));
    }
    let expo = -1.0 / (beta - 1.0);
    let p: Vec<f64> = scatters
        .iter()
        .map(|&v| if v == 0.0 { 0.0 } else { (v + eps).powf(expo) })
        .collect();
    let total: f64 = p.iter().sum();
    Ok(WeightVector(p.into_iter().map(|v| v / total).collect()))
}

struct AlternateOutcome {
    assign: Vec<bool>, // true → right cluster
    centroids: [Array1<f64>; 2],
    weight: WeightVector,
    objective: f64,
    iterations: usize,
    trace: Vec<f64>,
}

/// One full alternating run from the given initial centroids, starting from
/// uniform weights. Assignments, scatters, and the reported objective all use
/// the w_j^β metric of the split objective, so every block update descends it.
fn alternate(
    points: ArrayView2<'_, f64>,
    init: (Array1<f64>, Array1<f64>),
    beta: f64,
    eps: f64,
    max_iter: usize,
    tol: f64,
) -> AlternateOutcome {
    let (n, d) = points.dim();
    let mut c0: Vec<f64> = init.0.to_vec();
    let mut c1: Vec<f64> = init.1.to_vec();
    let mut w = WeightVector::uniform(d);
    let mut wpow: Vec<f64> = w.as_slice().iter().map(|v| v.powf(beta)).collect();
    let mut assign = vec![false; n];
    let mut prev_assign: Option<Vec<bool>> = None;
    let mut prev_obj = f64::INFINITY;
    let mut trace = Vec::new();
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        for (i, row) in points.rows().into_iter().enumerate() {
            let d0 = weighted_sqdist_pow(row, &c0, &wpow);
            let d1 = weighted_sqdist_pow(row, &c1, &wpow);
            assign[i] = d1 < d0;
        }
        let n_right = assign.iter().filter(|&&a| a).count();
        if n_right == 0 || n_right == n {
            // Empty-cluster repair: the point farthest from the nonempty
            // centroid moves into the empty cluster.
            let full = if n_right == 0 { &c0 } else { &c1 };
            let mut best = (0usize, -1.0f64);
            for (i, row) in points.rows().into_iter().enumerate() {
                let s = weighted_sqdist_pow(row, full, &wpow);
                if s > best.1 {
                    best = (i, s);
                }
            }
            assign[best.0] = n_right == 0;
        }
        let mut sums = [vec![0.0; d], vec![0.0; d]];
        let mut counts = [0usize, 0usize];
        for (i, row) in points.rows().into_iter().enumerate() {
            let side = assign[i] as usize;
            counts[side] += 1;
            for j in 0..d {
                sums[side][j] += row[j];
            }
        }
        for side in 0..2 {
            let c = if side == 0 { &mut c0 } else { &mut c1 };
            for j in 0..d {
                c[j] = sums[side][j] / counts[side] as f64;
            }
        }
        let mut scatters = vec![0.0; d];
        for (i, row) in points.rows().into_iter().enumerate() {
            let c = if assign[i] { &c1 } else { &c0 };
            for j in 0..d {
                let diff = row[j] - c[j];
                scatters[j] += diff * diff;
            }
        }
        w = update_weights(&scatters, beta, eps).expect("finite scatters");
        for (p, wv) in wpow.iter_mut().zip(w.as_slice()) {
            *p = wv.powf(beta);
        }
        let objective: f64 = wpow.iter().zip(&scatters).map(|(p, s)| p * s).sum();
        trace.push(objective);
        if prev_assign.as_deref() == Some(&assign) {
            break;
        }
        if it > 0 && (prev_obj - objective).abs() <= tol * prev_obj.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        prev_assign = Some(assign.clone());
        prev_obj = objective;
    }
    AlternateOutcome {
        assign,
        centroids: [Array1::from(c0), Array1::from(c1)],
        weight: w,
        objective: *trace.last().expect("at least one round"),
        iterations,
        trace,
    }
}

/// Best contiguous 2-split along the seed direction, evaluated with prefix
/// sums of the per-dimension sums and squares. Returns the side means.
fn sweep_init(
    points: ArrayView2<'_, f64>,
    i1: usize,
    i2: usize,
) -> Option<(Array1<f64>, Array1<f64>)> {
    let (n, d) = points.dim();
    if n < 3 {
        return None;
    }
    let dir: Vec<f64> = (0..d).map(|j| points[[i2, j]] - points[[i1, j]]).collect();
    if dir.iter().all(|&v| v == 0.0) {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    let proj: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(&dir).map(|(a, b)| a * b).sum())
        .collect();
    order.sort_by(|&a, &b| proj[a].partial_cmp(&proj[b]).unwrap().then(a.cmp(&b)));
    let mut sum = vec![0.0; (n + 1) * d];
    let mut sq = vec![0.0; (n + 1) * d];
    for (k, &idx) in order.iter().enumerate() {
        let row = points.row(idx);
        for j in 0..d {
            sum[(k + 1) * d + j] = sum[k * d + j] + row[j];
            sq[(k + 1) * d + j] = sq[k * d + j] + row[j] * row[j];
        }
    }
    let total = n;
    let mut best = (1usize, f64::INFINITY);
    for s in 1..total {
        let mut cost = 0.0;
        let (nl, nr) = (s as f64, (total - s) as f64);
        for j in 0..d {
            let sl = sum[s * d + j];
            let ql = sq[s * d + j];
            let sr = sum[total * d + j] - sl;
            let qr = sq[total * d + j] - ql;
            cost += (ql - sl * sl / nl) + (qr - sr * sr / nr);
        }
        if cost < best.1 {
            best = (s, cost);
        }
    }
    let s = best.0;
    let mut left = Array1::zeros(d);
    let mut right = Array1::zeros(d);
    for j in 0..d {
        left[j] = sum[s * d + j] / s as f64;
        right[j] = (sum[total * d + j] - sum[s * d + j]) / (total - s) as f64;
    }
    Some((left, right))
}

/// Splits a point block into two nonempty children by alternating
/// assignment, centroid, and weight updates from uniform weights. Two
/// deterministic initializations are tried (farthest-pair seeds and the best
/// contiguous split along the seed direction) and the lower final objective
/// wins, with ties kept on the farthest-pair run.
pub fn weighted_2means(
    points: ArrayView2<'_, f64>,
    beta: f64,
    eps: f64,
    max_iter: usize,
    tol: f64,
    _rng_seed: u64,
) -> Result<SplitResult> {
    let (n, d) = points.dim();
    if n < 2 {
        return Err(GbError::invalid("unsplittable: fewer than 2 points"));
    }
    if d == 0 {
        return Err(GbError::invalid("points must have at least one dimension"));
    }
    if !(beta > 1.0) || !beta.is_finite() {
        return Err(GbError::invalid("beta must be > 1"));
    }
    if max_iter < 1 {
        return Err(GbError::invalid("max_iter must be >= 1"));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(GbError::NonFinite("value in split input".into()));
    }
    let uniform = WeightVector::uniform(d);
    let (i1, i2) = farthest_pair_indices(points, &uniform)?;
    let diameter = weighted_distance(points.row(i2), points.row(i1), &uniform)?;
    if diameter == 0.0 {
        return Err(GbError::invalid("unsplittable: zero-diameter input"));
    }
    let seeds = (points.row(i1).to_owned(), points.row(i2).to_owned());
    let mut outcome = alternate(points, seeds, beta, eps, max_iter, tol);
    if let Some(init) = sweep_init(points, i1, i2) {
        let alt = alternate(points, init, beta, eps, max_iter, tol);
        if alt.objective < outcome.objective {
            outcome = alt;
        }
    }
    let mut left_indices = Vec::new();
    let mut right_indices = Vec::new();
    for (i, &side) in outcome.assign.iter().enumerate() {
        if side {
            right_indices.push(i);
        } else {
            left_indices.push(i);
        }
    }
    Ok(SplitResult {
        left_indices,
        right_indices,
        centroids: outcome.centroids,
        weight: outcome.weight,
        objective: outcome.objective,
        iterations: outcome.iterations,
        objective_trace: outcome.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn distance_of_point_to_itself_is_zero() {
        let z = array![1.5, -2.0];
        let w = WeightVector::uniform(2);
        assert_eq!(weighted_distance(z.view(), z.view(), &w).unwrap(), 0.0);
    }

    #[test]
    fn zero_weight_dimension_is_ignored() {
        let w = WeightVector::new(vec![1.0, 0.0]).unwrap();
        let z = array![0.0, 5.0];
        let c = array![0.0, 0.0];
        assert_eq!(weighted_distance(z.view(), c.view(), &w).unwrap(), 0.0);
    }

    #[test]
    fn half_weights_give_sqrt_two() {
        let w = WeightVector::new(vec![0.5, 0.5]).unwrap();
        let z = array![2.0, 0.0];
        let c = array![0.0, 0.0];
        assert_abs_diff_eq!(
            weighted_distance(z.view(), c.view(), &w).unwrap(),
            2.0f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn seeds_pick_extreme_then_farthest() {
        let pts = array![[0.0], [10.0], [1.0]];
        let (c1, c2) = farthest_pair_seed(pts.view(), &WeightVector::uniform(1), 0).unwrap();
        assert_eq!(c1[0], 10.0);
        assert_eq!(c2[0], 0.0);
    }

    #[test]
    fn seed_ties_break_to_lowest_index() {
        let pts = array![[0.0], [1.0], [2.0]];
        let (c1, c2) = farthest_pair_seed(pts.view(), &WeightVector::uniform(1), 0).unwrap();
        assert_eq!((c1[0], c2[0]), (0.0, 2.0));
    }

    #[test]
    fn identical_points_give_coincident_seeds() {
        let pts = array![[3.0, 3.0], [3.0, 3.0]];
        let (c1, c2) = farthest_pair_seed(pts.view(), &WeightVector::uniform(2), 0).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn single_point_is_unsplittable() {
        let pts = array![[1.0]];
        let err = farthest_pair_seed(pts.view(), &WeightVector::uniform(1), 0).unwrap_err();
        assert!(err.to_string().contains("unsplittable"));
    }

    #[test]
    fn equal_scatters_give_equal_weights() {
        let w = update_weights(&[1.0, 1.0], 2.0, 1e-12).unwrap();
        assert_abs_diff_eq!(w.as_slice()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w.as_slice()[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn inverse_scatter_ratio_with_unit_exponent() {
        let w = update_weights(&[1.0, 3.0], 2.0, 1e-12).unwrap();
        assert_abs_diff_eq!(w.as_slice()[0], 0.75, epsilon = 1e-9);
        assert_abs_diff_eq!(w.as_slice()[1], 0.25, epsilon = 1e-9);
    }

    #[test]
    fn zero_scatter_dimension_gets_zero_weight() {
        let w = update_weights(&[0.0, 5.0], 2.0, 1e-12).unwrap();
        assert_eq!(w.as_slice()[0], 0.0);
        assert_abs_diff_eq!(w.as_slice()[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn all_zero_scatters_fall_back_to_uniform() {
        let w = update_weights(&[0.0, 0.0, 0.0], 3.0, 1e-12).unwrap();
        for v in w.as_slice() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn updated_weights_always_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let d = rng.random_range(1..8);
            let scat: Vec<f64> = (0..d)
                .map(|_| {
                    if rng.random::<f64>() < 0.2 {
                        0.0
                    } else {
                        rng.random::<f64>() * 10.0
                    }
                })
                .collect();
            let beta = 1.2 + rng.random::<f64>() * 3.0;
            let w = update_weights(&scat, beta, 1e-12).unwrap();
            let sum: f64 = w.as_slice().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(w.as_slice().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn separated_pairs_split_cleanly() {
        let pts = array![[0.0], [0.1], [10.0], [10.1]];
        let r = weighted_2means(pts.view(), 2.0, 1e-12, 100, 1e-8, 0).unwrap();
        let mut sides = [r.left_indices.clone(), r.right_indices.clone()];
        sides.sort_by_key(|s| s[0]);
        assert_eq!(sides[0], vec![0, 1]);
        assert_eq!(sides[1], vec![2, 3]);
    }

    #[test]
    fn two_points_become_singletons_with_zero_objective() {
        let pts = array![[1.0, 0.0], [4.0, 2.0]];
        let r = weighted_2means(pts.view(), 2.0, 1e-12, 100, 1e-8, 0).unwrap();
        assert_eq!(r.left_indices.len(), 1);
        assert_eq!(r.right_indices.len(), 1);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn informative_dimension_gets_larger_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut rows = Vec::new();
        for i in 0..40 {
            let x = if i < 20 { 0.0 } else { 8.0 };
            rows.push(x + rng.random::<f64>() * 0.3);
            rows.push(rng.random::<f64>() * 4.0); // noise-only dimension
        }
        let pts = Array2::from_shape_vec((40, 2), rows).unwrap();
        let r = weighted_2means(pts.view(), 2.0, 1e-12, 100, 1e-8, 0).unwrap();
        assert!(r.weight.as_slice()[0] > r.weight.as_slice()[1]);
    }

    #[test]
    fn objective_trace_descends_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..50 {
            let n = rng.random_range(4..30);
            let d = rng.random_range(1..5);
            let pts = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 10.0);
            let r = weighted_2means(pts.view(), 2.0, 1e-12, 100, 1e-8, 0).unwrap();
            for pair in r.objective_trace.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-9, "{:?}", r.objective_trace);
            }
        }
    }

    #[test]
    fn split_is_deterministic_and_order_insensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let n = 24;
        let pts = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>() * 5.0);
        let a = weighted_2means(pts.view(), 2.0, 1e-12, 100, 1e-8, 0).unwrap();
        let b = weighted_2means(pts.view(), 2.0, 1e-12, 100, 1e-8, 0).unwrap();
        assert_eq!(a.left_indices, b.left_indices);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());

        // Reversing row order relabels indices but preserves the partition.
        let mut rev_rows = Vec::new();
        for i in (0..n).rev() {
            rev_rows.extend(pts.row(i).iter().cloned());
        }
        let rev = Array2::from_shape_vec((n, 3), rev_rows).unwrap();
        let c = weighted_2means(rev.view(), 2.0, 1e-12, 100, 1e-8, 0).unwrap();
        let translate = |v: &[usize]| {
            let mut t: Vec<usize> = v.iter().map(|&i| n - 1 - i).collect();
            t.sort_unstable();
            t
        };
        let mut original: [Vec<usize>; 2] = [a.left_indices.clone(), a.right_indices.clone()];
        let mut reversed: [Vec<usize>; 2] = [translate(&c.left_indices), translate(&c.right_indices)];
        original.sort_by(|x, y| x[0].cmp(&y[0]));
        reversed.sort_by(|x, y| x[0].cmp(&y[0]));
        assert_eq!(original, reversed);
    }

    #[test]
    fn zero_diameter_input_is_rejected() {
        let pts = array![[2.0, 2.0], [2.0, 2.0], [2.0, 2.0]];
        let err = weighted_2means(pts.view(), 2.0, 1e-12, 100, 1e-8, 0).unwrap_err();
        assert!(err.to_string().contains("unsplittable"));
    }

    #[test]
    fn children_partition_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        for _ in 0..30 {
            let n = rng.random_range(2..40);
            let d = rng.random_range(1..4);
            let pts = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 3.0);
            match weighted_2means(pts.view(), 2.0, 1e-12, 100, 1e-8, 0) {
                Ok(r) => {
                    assert!(!r.left_indices.is_empty() && !r.right_indices.is_empty());
                    let mut all: Vec<usize> =
                        r.left_indices.iter().chain(&r.right_indices).cloned().collect();
                    all.sort_unstable();
                    assert_eq!(all, (0..n).collect::<Vec<_>>());
                }
                Err(e) => assert!(e.to_string().contains("unsplittable")),
            }
        }
    }
}
