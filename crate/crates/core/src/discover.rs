//! Pseudo-domain discovery: reduce descriptors, divide into balls, cluster
//! ball centers, inherit labels, and keep labels consistent across epochs by
//! maximum-overlap alignment.

use ndarray::{Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GbError, Result};
use crate::featstats::DescriptorSet;
use crate::gbdivide::{self, BallSet, DivisionParams};
use crate::pca;

pub const KMEANS_RESTARTS: u64 = 8;
pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AssignmentSource {
    GbRepresentative,
    FallbackSampleKmeans,
    RandomBaseline,
    FlatKmeansBaseline,
}

impl std::fmt::Display for AssignmentSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AssignmentSource::GbRepresentative => "GB_REPRESENTATIVE",
            AssignmentSource::FallbackSampleKmeans => "FALLBACK_SAMPLE_KMEANS",
            AssignmentSource::RandomBaseline => "RANDOM_BASELINE",
            AssignmentSource::FlatKmeansBaseline => "FLAT_KMEANS_BASELINE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoDomainAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
    pub epoch: u32,
    pub source: AssignmentSource,
    pub ball_of_sample: Option<Vec<usize>>,
    pub permutation_applied: Option<Vec<usize>>,
}

impl PseudoDomainAssignment {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(GbError::invalid("cluster count must be >= 1"));
        }
        if self.labels.iter().any(|&l| l >= self.k) {
            return Err(GbError::invalid("label out of range"));
        }
        if let Some(b) = &self.ball_of_sample {
            if b.len() != self.labels.len() {
                return Err(GbError::invalid("ball map length mismatch"));
            }
        }
        Ok(())
    }
}

/// JSON sidecar written next to a label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMeta {
    #[serde(rename = "K")]
    pub k: usize,
    pub epoch: u32,
    pub source: AssignmentSource,
    pub permutation: Option<Vec<usize>>,
}

impl From<&PseudoDomainAssignment> for AssignmentMeta {
    fn from(a: &PseudoDomainAssignment) -> Self {
        AssignmentMeta {
            k: a.k,
            epoch: a.epoch,
            source: a.source,
            permutation: a.permutation_applied.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sqdist(a: ArrayView2<'_, f64>, i: usize, centers: &Array2<f64>, c: usize) -> f64 {
    let mut s = 0.0;
    for j in 0..a.ncols() {
        let d = a[[i, j]] - centers[[c, j]];
        s += d * d;
    }
    s
}

fn seed_centers(
    points: ArrayView2<'_, f64>,
    weights: &[f64],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let (m, d) = points.dim();
    let mut centers = Array2::zeros((k, d));
    let total_w: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total_w;
    let mut first = m - 1;
    for (i, &w) in weights.iter().enumerate() {
        x -= w;
        if x < 0.0 {
            first = i;
            break;
        }
    }
    centers.row_mut(0).assign(&points.row(first));
    let mut best_d2: Vec<f64> = (0..m).map(|i| sqdist(points, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = best_d2.iter().zip(weights).map(|(d2, w)| d2 * w).sum();
        let pick = if total > 0.0 {
            let mut x = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for i in 0..m {
                x -= best_d2[i] * weights[i];
                if x < 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining mass sits on already-chosen points.
            let mut chosen = 0;
            let mut hi = -1.0;
            for (i, &d2) in best_d2.iter().enumerate() {
                if d2 > hi {
                    hi = d2;
                    chosen = i;
                }
            }
            chosen
        };
        centers.row_mut(c).assign(&points.row(pick));
        for i in 0..m {
            best_d2[i] = best_d2[i].min(sqdist(points, i, &centers, c));
        }
    }
    centers
}

fn lloyd(
    points: ArrayView2<'_, f64>,
    weights: &[f64],
    k: usize,
    mut centers: Array2<f64>,
    max_iter: usize,
    tol: f64,
) -> KMeansResult {
    let (m, d) = points.dim();
    let mut labels = vec![0usize; m];
    let mut prev_labels: Option<Vec<usize>> = None;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        for i in 0..m {
            let mut best = (0usize, f64::INFINITY);
            for c in 0..k {
                let d2 = sqdist(points, i, &centers, c);
                if d2 < best.1 {
                    best = (c, d2);
                }
            }
            labels[i] = best.0;
        }
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed the empty cluster with the point farthest from its
                // current center; ties go to the lowest index.
                let mut far = (0usize, -1.0f64);
                for i in 0..m {
                    let d2 = sqdist(points, i, &centers, labels[i]);
                    if counts[labels[i]] > 1 && d2 > far.1 {
                        far = (i, d2);
                    }
                }
                counts[labels[far.0]] -= 1;
                labels[far.0] = c;
                counts[c] = 1;
            }
        }
        if prev_labels.as_deref() == Some(&labels) {
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut wsum = vec![0.0; k];
        for i in 0..m {
            let l = labels[i];
            wsum[l] += weights[i];
            for j in 0..d {
                sums[[l, j]] += weights[i] * points[[i, j]];
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            for j in 0..d {
                let new = sums[[c, j]] / wsum[c];
                shift = shift.max((new - centers[[c, j]]).abs());
                centers[[c, j]] = new;
            }
        }
        if prev_labels.is_some() && shift < tol {
            break;
        }
        prev_labels = Some(labels.clone());
    }
    let inertia: f64 = (0..m)
        .map(|i| weights[i] * sqdist(points, i, &centers, labels[i]))
        .sum();
    KMeansResult {
        labels,
        centers,
        inertia,
        iterations,
    }
}

fn kmeans_core(
    points: ArrayView2<'_, f64>,
    weights: &[f64],
    k: usize,
    rng_seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansResult> {
    let m = points.nrows();
    if k == 0 {
        return Err(GbError::invalid("cluster count must be >= 1"));
    }
    if m < k {
        return Err(GbError::invalid("insufficient points"));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(GbError::NonFinite("value in clustering input".into()));
    }
    if weights.len() != m || weights.iter().any(|&w| !w.is_finite() || w <= 0.0) {
        return Err(GbError::invalid("weights must be finite and > 0"));
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.set_stream(restart);
        let centers = seed_centers(points, weights, k, &mut rng);
        let run = lloyd(points, weights, k, centers, max_iter, tol);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Seeded k-means with a fixed number of restarts; the lowest inertia wins
/// and ties keep the earliest restart.
pub fn kmeans(
    points: ArrayView2<'_, f64>,
    k: usize,
    rng_seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansResult> {
    let weights = vec![1.0; points.nrows()];
    kmeans_core(points, &weights, k, rng_seed, max_iter, tol)
}

/// Ball representative matrix: row m is the mean of ball m's members, rows
/// ordered by ball_id.
pub fn ball_centers(ballset: &BallSet, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if ballset.n != z.nrows() {
        return Err(GbError::invalid("ball set does not match matrix size"));
    }
    let d = z.ncols();
    let mut order: Vec<usize> = (0..ballset.balls.len()).collect();
    order.sort_by_key(|&i| ballset.balls[i].ball_id);
    let mut centers = Array2::zeros((ballset.balls.len(), d));
    for (row, &bi) in order.iter().enumerate() {
        let ball = &ballset.balls[bi];
        if ball.indices.is_empty() {
            return Err(GbError::invalid("empty ball"));
        }
        for &i in &ball.indices {
            if i >= z.nrows() {
                return Err(GbError::invalid("ball index out of range"));
            }
            for j in 0..d {
                centers[[row, j]] += z[[i, j]];
            }
        }
        for j in 0..d {
            centers[[row, j]] /= ball.indices.len() as f64;
        }
    }
    Ok(centers)
}

/// PCA-reduce a descriptor set, clamping the target dimension to what the
/// sample count supports. A single row passes through unreduced.
pub fn reduce_descriptors(ds: &DescriptorSet, pca_d: usize) -> Result<Array2<f64>> {
    let z = ds.matrix();
    let n = z.nrows();
    if n < 2 {
        return Ok(z);
    }
    let d_eff = pca_d.min(z.ncols()).min(n - 1).max(1);
    let (_, reduced) = pca::pca_fit_transform(z.view(), d_eff)?;
    Ok(reduced)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DiscoverOptions {
    /// Weight each ball center by its member count in the final clustering.
    pub size_weighted_centers: bool,
}

/// Full discovery pass. Falls back to sample-level k-means when division
/// yields fewer balls than clusters; aligns to `prev` when given.
pub fn discover_with(
    ds: &DescriptorSet,
    k: usize,
    pca_d: usize,
    div: &DivisionParams,
    rng_seed: u64,
    prev: Option<&PseudoDomainAssignment>,
    opts: &DiscoverOptions,
) -> Result<PseudoDomainAssignment> {
    let n = ds.len();
    if k == 0 {
        return Err(GbError::invalid("cluster count must be >= 1"));
    }
    if n < k {
        return Err(GbError::invalid("insufficient points"));
    }
    let reduced = reduce_descriptors(ds, pca_d)?;
    let ballset = gbdivide::divide(reduced.view(), div)?;
    let epoch = prev.map_or(0, |p| p.epoch + 1);
    let assignment = if ballset.balls.len() < k {
        let run = kmeans(reduced.view(), k, rng_seed, KMEANS_MAX_ITER, KMEANS_TOL)?;
        PseudoDomainAssignment {
            labels: run.labels,
            k,
            epoch,
            source: AssignmentSource::FallbackSampleKmeans,
            ball_of_sample: None,
            permutation_applied: None,
        }
    } else {
        let centers = ball_centers(&ballset, reduced.view())?;
        let weights: Vec<f64> = if opts.size_weighted_centers {
            ballset.balls.iter().map(|b| b.indices.len() as f64).collect()
        } else {
            vec![1.0; ballset.balls.len()]
        };
        let run = kmeans_core(
            centers.view(),
            &weights,
            k,
            rng_seed,
            KMEANS_MAX_ITER,
            KMEANS_TOL,
        )?;
        let mut labels = vec![0usize; n];
        let mut ball_of = vec![0usize; n];
        for (m, ball) in ballset.balls.iter().enumerate() {
            for &i in &ball.indices {
                labels[i] = run.labels[m];
                ball_of[i] = ball.ball_id;
            }
        }
        PseudoDomainAssignment {
            labels,
            k,
            epoch,
            source: AssignmentSource::GbRepresentative,
            ball_of_sample: Some(ball_of),
            permutation_applied: None,
        }
    };
    match prev {
        Some(p) => align_labels(&assignment, p),
        None => Ok(assignment),
    }
}

pub fn discover(
    ds: &DescriptorSet,
    k: usize,
    pca_d: usize,
    div: &DivisionParams,
    rng_seed: u64,
    prev: Option<&PseudoDomainAssignment>,
) -> Result<PseudoDomainAssignment> {
    discover_with(ds, k, pca_d, div, rng_seed, prev, &DiscoverOptions::default())
}

/// Minimum-cost perfect assignment on a square cost matrix via the
/// shortest-augmenting-path potentials method.
fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
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
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Permutation π maximizing Σ_k weights[k][π(k)].
pub fn max_assignment_permutation(weights: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = weights.len();
    if n == 0 || weights.iter().any(|r| r.len() != n) {
        return Err(GbError::invalid("weight matrix must be square and nonempty"));
    }
    if weights.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GbError::NonFinite("value in assignment weights".into()));
    }
    let cost: Vec<Vec<f64>> = weights
        .iter()
        .map(|row| row.iter().map(|&v| -v).collect())
        .collect();
    Ok(hungarian_min(&cost))
}

/// Relabels `current` by the overlap-maximizing permutation against
/// `previous`. Exact overlap ties prefer the permutation closest to
/// identity, which makes repeated alignment a fixed point.
pub fn align_labels(
    current: &PseudoDomainAssignment,
    previous: &PseudoDomainAssignment,
) -> Result<PseudoDomainAssignment> {
    current.validate()?;
    previous.validate()?;
    if current.labels.len() != previous.labels.len() {
        return Err(GbError::invalid("label length mismatch"));
    }
    if current.k != previous.k {
        return Err(GbError::invalid("cluster count changed"));
    }
    let k = current.k;
    let mut overlap = vec![vec![0.0f64; k]; k];
    for (&c, &p) in current.labels.iter().zip(&previous.labels) {
        overlap[c][p] += 1.0;
    }
    // Integer overlaps differ by >= 1, so a sub-unit diagonal bonus only
    // breaks exact ties.
    let bonus = 1.0 / (2.0 * (k as f64 + 1.0) * (k as f64 + 1.0));
    for (c, row) in overlap.iter_mut().enumerate() {
        row[c] += bonus;
    }
    let pi = max_assignment_permutation(&overlap)?;
    let labels: Vec<usize> = current.labels.iter().map(|&l| pi[l]).collect();
    let permutation_applied = match &current.permutation_applied {
        Some(rho) => Some(rho.iter().map(|&r| pi[r]).collect()),
        None => Some(pi.clone()),
    };
    Ok(PseudoDomainAssignment {
        labels,
        k,
        epoch: current.epoch,
        source: current.source,
        ball_of_sample: current.ball_of_sample.clone(),
        permutation_applied,
    })
}

/// k0 = N^(1/4) and the integer candidates around it, clipped to >= 1.
pub fn suggest_k(n: usize) -> (f64, Vec<usize>) {
    assert!(n >= 1, "need at least one sample");
    let k0 = (n as f64).powf(0.25);
    let r = k0.round() as i64;
    let mut candidates: Vec<usize> = [r - 1, r, r + 1]
        .iter()
        .map(|&c| c.max(1) as usize)
        .collect();
    candidates.dedup();
    (k0, candidates)
}

/// `sample_id,label,ball_id` rows; the ball column stays empty when labels
/// did not come from balls.
pub fn assignment_to_csv(a: &PseudoDomainAssignment, ids: &[String]) -> Result<String> {
    a.validate()?;
    if ids.len() != a.labels.len() {
        return Err(GbError::invalid("id list length mismatch"));
    }
    let mut out = String::from("sample_id,label,ball_id\n");
    for (i, id) in ids.iter().enumerate() {
        out.push_str(id);
        out.push(',');
        out.push_str(&a.labels[i].to_string());
        out.push(',');
        if let Some(b) = &a.ball_of_sample {
            out.push_str(&b[i].to_string());
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn assignment_from_csv(text: &str) -> Result<(Vec<String>, Vec<usize>, Option<Vec<usize>>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| GbError::BadHeader("empty file".into()))?;
    if header.trim() != "sample_id,label,ball_id" {
        return Err(GbError::BadHeader(format!("unexpected columns {header:?}")));
    }
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut balls: Vec<Option<usize>> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(GbError::RowArity {
                line: lineno + 2,
                expected: 3,
                found: parts.len(),
            });
        }
        ids.push(parts[0].to_string());
        labels.push(parts[1].trim().parse::<usize>().map_err(|_| GbError::BadValue {
            line: lineno + 2,
            msg: format!("bad label {:?}", parts[1]),
        })?);
        let b = parts[2].trim();
        if b.is_empty() {
            balls.push(None);
        } else {
            balls.push(Some(b.parse::<usize>().map_err(|_| GbError::BadValue {
                line: lineno + 2,
                msg: format!("bad ball id {b:?}"),
            })?));
        }
    }
    let ball_vec = if balls.iter().all(|b| b.is_some()) {
        Some(balls.into_iter().map(|b| b.unwrap()).collect())
    } else if balls.iter().all(|b| b.is_none()) {
        None
    } else {
        return Err(GbError::invalid("mixed presence of ball ids"));
    };
    Ok((ids, labels, ball_vec))
}
