//! Desk-scale evaluation: stratification and agreement metrics, baseline
//! partitioners, a synthetic latent-domain generator with outlier and drift
//! injection, and the multi-seed stability sweep built on them.

use ndarray::{Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::discover::{
    self, align_labels, AssignmentSource, DiscoverOptions, PseudoDomainAssignment,
    KMEANS_MAX_ITER, KMEANS_TOL,
};
use crate::error::{GbError, Result};
use crate::featstats::DescriptorSet;
use crate::gbdivide::DivisionParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratificationReport {
    pub medians: Vec<f64>,
    pub delta_med: f64,
    pub sigma_med: f64,
}

/// Lower median: for even sizes the smaller of the two middle values.
fn lower_median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[(values.len() - 1) / 2]
}

/// Per-domain lower median of ground-truth counts, with the spread of those
/// medians (range and population standard deviation).
pub fn count_stratification(
    labels: &[usize],
    gt_counts: &[f64],
    k: usize,
) -> Result<StratificationReport> {
    if labels.len() != gt_counts.len() {
        return Err(GbError::invalid("label/count length mismatch"));
    }
    if k == 0 {
        return Err(GbError::invalid("cluster count must be >= 1"));
    }
    if labels.iter().any(|&l| l >= k) {
        return Err(GbError::invalid("label out of range"));
    }
    if gt_counts.iter().any(|v| !v.is_finite()) {
        return Err(GbError::NonFinite("ground-truth count".into()));
    }
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (&l, &c) in labels.iter().zip(gt_counts) {
        groups[l].push(c);
    }
    let empty: Vec<usize> = (0..k).filter(|&d| groups[d].is_empty()).collect();
    if !empty.is_empty() {
        return Err(GbError::invalid(format!("empty pseudo-domains: {empty:?}")));
    }
    let medians: Vec<f64> = groups.iter_mut().map(lower_median).collect();
    let hi = medians.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = medians.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = medians.iter().sum::<f64>() / k as f64;
    let var = medians.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / k as f64;
    Ok(StratificationReport {
        medians,
        delta_med: hi - lo,
        sigma_med: var.sqrt(),
    })
}

fn choose2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Standard adjusted Rand index from the contingency table. Degenerate
/// pairings with zero adjustment range score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GbError::invalid("label length mismatch"));
    }
    if a.is_empty() {
        return Err(GbError::invalid("empty label vectors"));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0.0f64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let n = a.len() as f64;
    let sum_cells: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let sum_cols: f64 = (0..kb)
        .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((sum_cells - expected) / (max_index - expected))
}

/// Mean fraction of samples whose label changes between consecutive epochs.
/// Every epoch after the first must carry alignment metadata.
pub fn label_churn(aligned_epochs: &[PseudoDomainAssignment]) -> Result<f64> {
    if aligned_epochs.len() < 2 {
        return Err(GbError::invalid("need at least 2 epochs"));
    }
    let n = aligned_epochs[0].labels.len();
    for (e, a) in aligned_epochs.iter().enumerate() {
        a.validate()?;
        if a.labels.len() != n {
            return Err(GbError::invalid("epoch sample counts differ"));
        }
        if e > 0 && a.permutation_applied.is_none() {
            return Err(GbError::invalid(format!("unaligned assignment at epoch {e}")));
        }
    }
    let mut total = 0.0;
    for pair in aligned_epochs.windows(2) {
        let changed = pair[0]
            .labels
            .iter()
            .zip(&pair[1].labels)
            .filter(|(a, b)| a != b)
            .count();
        total += changed as f64 / n as f64;
    }
    Ok(total / (aligned_epochs.len() - 1) as f64)
}

/// Shuffled split into K groups whose sizes differ by at most one.
pub fn random_partition(n: usize, k: usize, rng_seed: u64) -> Result<PseudoDomainAssignment> {
    if k == 0 {
        return Err(GbError::invalid("cluster count must be >= 1"));
    }
    if n < k {
        return Err(GbError::invalid("insufficient points"));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    labels.shuffle(&mut rng);
    Ok(PseudoDomainAssignment {
        labels,
        k,
        epoch: 0,
        source: AssignmentSource::RandomBaseline,
        ball_of_sample: None,
        permutation_applied: None,
    })
}

/// Sample-level k-means on the PCA-reduced descriptors; the clustering
/// baseline the representative path is compared against.
pub fn flat_kmeans_partition(
    ds: &DescriptorSet,
    k: usize,
    pca_d: usize,
    rng_seed: u64,
) -> Result<PseudoDomainAssignment> {
    if ds.len() < k {
        return Err(GbError::invalid("insufficient points"));
    }
    let reduced = discover::reduce_descriptors(ds, pca_d)?;
    let run = discover::kmeans(reduced.view(), k, rng_seed, KMEANS_MAX_ITER, KMEANS_TOL)?;
    Ok(PseudoDomainAssignment {
        labels: run.labels,
        k,
        epoch: 0,
        source: AssignmentSource::FlatKmeansBaseline,
        ball_of_sample: None,
        permutation_applied: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub center: Vec<f64>,
    pub scale: f64,
    pub n: usize,
    /// Median of the lognormal ground-truth count draw.
    pub count_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub domains: Vec<DomainSpec>,
    pub outlier_fraction: f64,
    pub drift_sigma: f64,
    pub rng_seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(GbError::invalid("need at least one domain"));
        }
        let dim = self.domains[0].center.len();
        if dim == 0 {
            return Err(GbError::invalid("domain centers need at least one dimension"));
        }
        for d in &self.domains {
            if d.center.len() != dim {
                return Err(GbError::invalid("domain center dimensions differ"));
            }
            if d.n < 1 {
                return Err(GbError::invalid("domain sample counts must be >= 1"));
            }
            if !(d.scale >= 0.0) || !d.scale.is_finite() {
                return Err(GbError::invalid("domain scale must be finite and >= 0"));
            }
            if !(d.count_mean > 0.0) || !d.count_mean.is_finite() {
                return Err(GbError::invalid("domain count_mean must be > 0"));
            }
            if d.center.iter().any(|v| !v.is_finite()) {
                return Err(GbError::NonFinite("domain center".into()));
            }
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(GbError::invalid("outlier_fraction must be in [0, 1)"));
        }
        if !(self.drift_sigma >= 0.0) || !self.drift_sigma.is_finite() {
            return Err(GbError::invalid("drift_sigma must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.domains[0].center.len()
    }

    pub fn total_n(&self) -> usize {
        self.domains.iter().map(|d| d.n).sum()
    }
}

const COUNT_LOG_SIGMA: f64 = 0.5;

/// Gaussian domains in domain-major order with lognormal per-domain count
/// regimes; a fraction of samples is replaced by uniform draws over a
/// 1.5x-inflated bounding box while keeping their true domain and count.
pub fn generate_mixture(spec: &SynthSpec) -> Result<(DescriptorSet, Vec<usize>)> {
    spec.validate()?;
    let dim = spec.dim();
    let n = spec.total_n();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut z = Array2::<f64>::zeros((n, dim));
    let mut counts = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut row = 0;
    for (dom, d) in spec.domains.iter().enumerate() {
        let log_mean = d.count_mean.ln();
        for _ in 0..d.n {
            for j in 0..dim {
                let g: f64 = StandardNormal.sample(&mut rng);
                z[[row, j]] = d.center[j] + d.scale * g;
            }
            let g: f64 = StandardNormal.sample(&mut rng);
            counts.push((log_mean + COUNT_LOG_SIGMA * g).exp());
            truth.push(dom);
            row += 1;
        }
    }
    let n_out = (spec.outlier_fraction * n as f64).round() as usize;
    if n_out > 0 {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for i in 0..n {
            for j in 0..dim {
                lo[j] = lo[j].min(z[[i, j]]);
                hi[j] = hi[j].max(z[[i, j]]);
            }
        }
        // Inflate the box 1.5x around its center; degenerate dims get a
        // unit box so outliers still move.
        let mut blo = vec![0.0; dim];
        let mut bhi = vec![0.0; dim];
        for j in 0..dim {
            let mid = 0.5 * (lo[j] + hi[j]);
            let half = 0.75 * (hi[j] - lo[j]).max(1.0);
            blo[j] = mid - half;
            bhi[j] = mid + half;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in order.iter().take(n_out) {
            for j in 0..dim {
                z[[i, j]] = blo[j] + rng.random::<f64>() * (bhi[j] - blo[j]);
            }
        }
    }
    let domains_i32: Vec<i32> = truth.iter().map(|&t| t as i32).collect();
    let set = DescriptorSet::from_matrix(&z, Some(&counts), Some(&domains_i32))?;
    Ok((set, truth))
}

/// Epoch-keyed smooth perturbation: a small rotation in one random plane
/// about the data mean, a shared translation, and light i.i.d. noise.
/// drift_sigma = 0 returns the input unchanged.
pub fn apply_drift(
    x: ArrayView2<'_, f64>,
    epoch: u32,
    drift_sigma: f64,
    rng_seed: u64,
) -> Result<Array2<f64>> {
    if !(drift_sigma >= 0.0) || !drift_sigma.is_finite() {
        return Err(GbError::invalid("drift_sigma must be finite and >= 0"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GbError::NonFinite("value in drift input".into()));
    }
    let mut out = x.to_owned();
    if drift_sigma == 0.0 {
        return Ok(out);
    }
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(epoch as u64);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += x[[i, j]];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var_sum = 0.0;
    for i in 0..n {
        for j in 0..d {
            let c = x[[i, j]] - mean[j];
            var_sum += c * c;
        }
    }
    let sigma_data = (var_sum / (n * d) as f64).sqrt();
    if d >= 2 {
        let mut u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nu > 0.0 {
            for a in &mut u {
                *a /= nu;
            }
            let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (b, a) in v.iter_mut().zip(&u) {
                *b -= dot * a;
            }
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nv > 0.0 {
                for b in &mut v {
                    *b /= nv;
                }
                let g: f64 = StandardNormal.sample(&mut rng);
                let theta = drift_sigma * g;
                let (sin, cos) = theta.sin_cos();
                for i in 0..n {
                    let mut a = 0.0;
                    let mut b = 0.0;
                    for j in 0..d {
                        let c = x[[i, j]] - mean[j];
                        a += c * u[j];
                        b += c * v[j];
                    }
                    let da = a * (cos - 1.0) - b * sin;
                    let db = a * sin + b * (cos - 1.0);
                    for j in 0..d {
                        out[[i, j]] += da * u[j] + db * v[j];
                    }
                }
            }
        }
    }
    let shift_scale = drift_sigma * sigma_data;
    let noise_scale = shift_scale / 2.0;
    let shift: Vec<f64> = (0..d)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            shift_scale * g
        })
        .collect();
    for i in 0..n {
        for j in 0..d {
            let g: f64 = StandardNormal.sample(&mut rng);
            out[[i, j]] += shift[j] + noise_scale * g;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub method: String,
    pub seed: u64,
    pub epoch: u32,
    /// Fraction of labels changed versus the previous epoch; 0 at epoch 0.
    pub changed_fraction: f64,
    pub delta_med: f64,
    pub sigma_med: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub median_churn: f64,
    pub median_delta_med: f64,
    pub median_sigma_med: f64,
}

pub const METHOD_GB: &str = "GB";
pub const METHOD_FLAT: &str = "FLAT";
pub const METHOD_RANDOM: &str = "RANDOM";

/// Runs GB discovery, flat k-means, and the random baseline over drifting
/// re-generations of the same mixture, aligning every epoch to the previous
/// one, and reports per-epoch records plus per-method medians across seeds.
pub fn run_stability_sweep(
    spec: &SynthSpec,
    k: usize,
    pca_d: usize,
    div: &DivisionParams,
    opts: &DiscoverOptions,
    epochs: u32,
    seeds: &[u64],
) -> Result<(Vec<SweepRecord>, Vec<MethodSummary>)> {
    spec.validate()?;
    if epochs < 2 {
        return Err(GbError::invalid("need at least 2 epochs"));
    }
    if seeds.is_empty() {
        return Err(GbError::invalid("need at least one seed"));
    }
    let mut records = Vec::new();
    let mut per_seed: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); 3];
    for &seed in seeds {
        let mut seeded = spec.clone();
        seeded.rng_seed = seed;
        let (ds, _) = generate_mixture(&seeded)?;
        let z0 = ds.matrix();
        let gt = ds
            .gt_counts()
            .ok_or_else(|| GbError::invalid("generator must produce counts"))?;
        let n = ds.len();
        let mut chains: [Vec<PseudoDomainAssignment>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for epoch in 0..epochs {
            let z_e = apply_drift(z0.view(), epoch, spec.drift_sigma, seed)?;
            let ds_e = DescriptorSet::from_matrix(&z_e, None, None)?;
            let mut div_e = div.clone();
            div_e.rng_seed = seed;

            let gb = discover::discover_with(&ds_e, k, pca_d, &div_e, seed, chains[0].last(), opts)?;
            chains[0].push(gb);

            let mut flat = flat_kmeans_partition(&ds_e, k, pca_d, seed)?;
            flat.epoch = epoch;
            let flat = match chains[1].last() {
                Some(prev) => align_labels(&flat, prev)?,
                None => flat,
            };
            chains[1].push(flat);

            let mut rnd = random_partition(n, k, seed.wrapping_mul(1000).wrapping_add(epoch as u64))?;
            rnd.epoch = epoch;
            let rnd = match chains[2].last() {
                Some(prev) => align_labels(&rnd, prev)?,
                None => rnd,
            };
            chains[2].push(rnd);
        }
        for (m, method) in [METHOD_GB, METHOD_FLAT, METHOD_RANDOM].iter().enumerate() {
            let chain = &chains[m];
            let mut deltas = Vec::new();
            let mut sigmas = Vec::new();
            for (e, a) in chain.iter().enumerate() {
                let strat = count_stratification(&a.labels, &gt, k)?;
                let changed = if e == 0 {
                    0.0
                } else {
                    chain[e - 1]
                        .labels
                        .iter()
                        .zip(&a.labels)
                        .filter(|(x, y)| x != y)
                        .count() as f64
                        / n as f64
                };
                deltas.push(strat.delta_med);
                sigmas.push(strat.sigma_med);
                records.push(SweepRecord {
                    method: method.to_string(),
                    seed,
                    epoch: e as u32,
                    changed_fraction: changed,
                    delta_med: strat.delta_med,
                    sigma_med: strat.sigma_med,
                });
            }
            let churn = label_churn(chain)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            per_seed[m].push((churn, mean(&deltas), mean(&sigmas)));
        }
    }
    let mut summaries = Vec::new();
    for (m, method) in [METHOD_GB, METHOD_FLAT, METHOD_RANDOM].iter().enumerate() {
        let mut churns: Vec<f64> = per_seed[m].iter().map(|t| t.0).collect();
        let mut deltas: Vec<f64> = per_seed[m].iter().map(|t| t.1).collect();
        let mut sigmas: Vec<f64> = per_seed[m].iter().map(|t| t.2).collect();
        summaries.push(MethodSummary {
            method: method.to_string(),
            median_churn: lower_median(&mut churns),
            median_delta_med: lower_median(&mut deltas),
            median_sigma_med: lower_median(&mut sigmas),
        });
    }
    Ok((records, summaries))
}

pub fn sweep_to_csv(records: &[SweepRecord]) -> String {
    let mut out = String::from("method,seed,epoch,changed_fraction,delta_med,sigma_med\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method, r.seed, r.epoch, r.changed_fraction, r.delta_med, r.sigma_med
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn assignment(labels: Vec<usize>, k: usize, perm: Option<Vec<usize>>) -> PseudoDomainAssignment {
        PseudoDomainAssignment {
            labels,
            k,
            epoch: 0,
            source: AssignmentSource::GbRepresentative,
            ball_of_sample: None,
            permutation_applied: perm,
        }
    }

    #[test]
    fn one_domain_has_no_spread() {
        let r = count_stratification(&[0, 0, 0], &[5.0, 9.0, 1.0], 1).unwrap();
        assert_eq!(r.delta_med, 0.0);
        assert_eq!(r.sigma_med, 0.0);
    }

    #[test]
    fn three_domain_medians_spread() {
        let labels = [0, 0, 1, 1, 2, 2];
        let counts = [10.0, 10.0, 50.0, 50.0, 100.0, 100.0];
        let r = count_stratification(&labels, &counts, 3).unwrap();
        assert_eq!(r.medians, vec![10.0, 50.0, 100.0]);
        assert_abs_diff_eq!(r.delta_med, 90.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.sigma_med, 36.8178, epsilon = 1e-3);
    }

    #[test]
    fn even_groups_take_the_lower_middle() {
        let r = count_stratification(&[0, 0, 0, 0], &[4.0, 1.0, 3.0, 2.0], 1).unwrap();
        assert_eq!(r.medians, vec![2.0]);
    }

    #[test]
    fn relabeling_preserves_the_spread() {
        let labels = [0usize, 1, 2, 0, 1, 2];
        let counts = [1.0, 20.0, 300.0, 3.0, 22.0, 280.0];
        let r1 = count_stratification(&labels, &counts, 3).unwrap();
        let mapped: Vec<usize> = labels.iter().map(|&l| [2, 0, 1][l]).collect();
        let r2 = count_stratification(&mapped, &counts, 3).unwrap();
        assert_eq!(r1.delta_med, r2.delta_med);
        assert_eq!(r1.sigma_med, r2.sigma_med);
    }

    #[test]
    fn missing_domains_are_named_in_the_error() {
        let err = count_stratification(&[0, 2, 0], &[1.0, 2.0, 3.0], 4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("empty pseudo-domains"));
        assert!(msg.contains('1') && msg.contains('3'));
    }

    #[test]
    fn identical_partitions_score_one() {
        let a = [0usize, 1, 1, 2, 0];
        assert_eq!(adjusted_rand_index(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn constant_versus_balanced_scores_zero() {
        let a = [0usize, 0, 0, 0];
        let b = [0usize, 0, 1, 1];
        assert_abs_diff_eq!(adjusted_rand_index(&a, &b).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ari_is_symmetric_and_name_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        for _ in 0..20 {
            let n = rng.random_range(2..30);
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let ab = adjusted_rand_index(&a, &b).unwrap();
            let ba = adjusted_rand_index(&b, &a).unwrap();
            assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
            let renamed: Vec<usize> = b.iter().map(|&l| [3, 2, 0, 1][l]).collect();
            let ren = adjusted_rand_index(&a, &renamed).unwrap();
            assert_abs_diff_eq!(ab, ren, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_pairs_and_bad_lengths() {
        assert!(adjusted_rand_index(&[0, 1], &[0]).is_err());
        assert_eq!(adjusted_rand_index(&[0, 0], &[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn identical_epochs_have_zero_churn() {
        let a = assignment(vec![0, 1, 2, 0], 3, None);
        let b = assignment(vec![0, 1, 2, 0], 3, Some(vec![0, 1, 2]));
        assert_eq!(label_churn(&[a, b]).unwrap(), 0.0);
    }

    #[test]
    fn one_changed_in_ten_is_a_tenth() {
        let mut l1 = vec![0usize; 10];
        l1[3] = 1;
        let mut l2 = l1.clone();
        l2[7] = 1;
        let a = assignment(l1, 2, None);
        let b = assignment(l2, 2, Some(vec![0, 1]));
        assert_abs_diff_eq!(label_churn(&[a, b]).unwrap(), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn later_epochs_must_be_aligned() {
        let a = assignment(vec![0, 1], 2, None);
        let b = assignment(vec![1, 0], 2, None);
        let err = label_churn(&[a, b]).unwrap_err();
        assert!(err.to_string().contains("unaligned"));
    }

    #[test]
    fn pure_relabeling_churns_nothing_after_alignment() {
        let base = assignment(vec![0, 0, 1, 1, 2, 2, 1], 3, None);
        let renamed = assignment(base.labels.iter().map(|&l| [2, 0, 1][l]).collect(), 3, None);
        let aligned = align_labels(&renamed, &base).unwrap();
        assert_eq!(label_churn(&[base, aligned]).unwrap(), 0.0);
    }

    #[test]
    fn balanced_split_sizes() {
        let a = random_partition(6, 3, 1).unwrap();
        let mut sizes = [0usize; 3];
        for &l in &a.labels {
            sizes[l] += 1;
        }
        assert_eq!(sizes, [2, 2, 2]);
        assert_eq!(a.source, AssignmentSource::RandomBaseline);

        let b = random_partition(7, 3, 1).unwrap();
        let mut sizes = vec![0usize; 3];
        for &l in &b.labels {
            sizes[l] += 1;
        }
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 3]);

        assert_eq!(
            random_partition(20, 4, 9).unwrap(),
            random_partition(20, 4, 9).unwrap()
        );
        assert!(random_partition(2, 3, 0).is_err());
    }

    fn blob_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            domains: vec![
                DomainSpec {
                    center: vec![0.0, 0.0],
                    scale: 0.5,
                    n: 40,
                    count_mean: 20.0,
                },
                DomainSpec {
                    center: vec![12.0, 0.0],
                    scale: 0.5,
                    n: 40,
                    count_mean: 200.0,
                },
                DomainSpec {
                    center: vec![0.0, 12.0],
                    scale: 0.5,
                    n: 40,
                    count_mean: 800.0,
                },
            ],
            outlier_fraction: 0.0,
            drift_sigma: 0.0,
            rng_seed: seed,
        }
    }

    #[test]
    fn flat_baseline_recovers_clean_blobs() {
        let (ds, truth) = generate_mixture(&blob_spec(91)).unwrap();
        let a = flat_kmeans_partition(&ds, 3, 2, 7).unwrap();
        assert_eq!(a.source, AssignmentSource::FlatKmeansBaseline);
        assert!(adjusted_rand_index(&a.labels, &truth).unwrap() >= 0.95);
        let one = flat_kmeans_partition(&ds, 1, 2, 7).unwrap();
        assert!(one.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn flat_baseline_equals_the_discovery_fallback() {
        let (ds, _) = generate_mixture(&blob_spec(92)).unwrap();
        let flat = flat_kmeans_partition(&ds, 3, 2, 13).unwrap();
        let params = DivisionParams {
            tau: 0.0,
            rng_seed: 13,
            ..DivisionParams::default()
        };
        let fallback = discover::discover(&ds, 3, 2, &params, 13, None).unwrap();
        assert_eq!(fallback.source, AssignmentSource::FallbackSampleKmeans);
        assert_eq!(flat.labels, fallback.labels);
    }

    #[test]
    fn generator_is_deterministic_and_labeled() {
        let spec = SynthSpec {
            outlier_fraction: 0.1,
            ..blob_spec(93)
        };
        let (a, truth_a) = generate_mixture(&spec).unwrap();
        let (b, truth_b) = generate_mixture(&spec).unwrap();
        assert_eq!(truth_a, truth_b);
        assert_eq!(a.matrix(), b.matrix());
        assert_eq!(a.len(), 120);
        assert_eq!(truth_a[0], 0);
        assert_eq!(truth_a[119], 2);
        let doms = a.true_domains().unwrap();
        assert_eq!(doms[50], 1);
        let counts = a.gt_counts().unwrap();
        assert!(counts.iter().all(|&c| c > 0.0));
    }

    #[test]
    fn outliers_leave_their_blob_but_keep_their_domain() {
        let clean = blob_spec(94);
        let dirty = SynthSpec {
            outlier_fraction: 0.25,
            ..clean.clone()
        };
        let (ds_clean, _) = generate_mixture(&clean).unwrap();
        let (ds_dirty, truth) = generate_mixture(&dirty).unwrap();
        assert_eq!(truth.len(), ds_dirty.len());
        let zc = ds_clean.matrix();
        let zd = ds_dirty.matrix();
        let moved = (0..120)
            .filter(|&i| (0..2).any(|j| (zc[[i, j]] - zd[[i, j]]).abs() > 1e-9))
            .count();
        assert_eq!(moved, 30);
    }

    #[test]
    fn zero_drift_is_the_identity() {
        let (ds, _) = generate_mixture(&blob_spec(95)).unwrap();
        let z = ds.matrix();
        let out = apply_drift(z.view(), 4, 0.0, 9).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn drift_is_epoch_keyed_and_deterministic() {
        let (ds, _) = generate_mixture(&blob_spec(96)).unwrap();
        let z = ds.matrix();
        let a = apply_drift(z.view(), 2, 0.1, 9).unwrap();
        let b = apply_drift(z.view(), 2, 0.1, 9).unwrap();
        let c = apply_drift(z.view(), 3, 0.1, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn stronger_drift_moves_points_farther() {
        let (ds, _) = generate_mixture(&blob_spec(97)).unwrap();
        let z = ds.matrix();
        let mean_disp = |sigma: f64| {
            let mut total = 0.0;
            for seed in 0..20u64 {
                let out = apply_drift(z.view(), 1, sigma, seed).unwrap();
                let mut s = 0.0;
                for i in 0..z.nrows() {
                    let mut d2 = 0.0;
                    for j in 0..z.ncols() {
                        let d = out[[i, j]] - z[[i, j]];
                        d2 += d * d;
                    }
                    s += d2.sqrt();
                }
                total += s / z.nrows() as f64;
            }
            total / 20.0
        };
        let d1 = mean_disp(0.05);
        let d2 = mean_disp(0.1);
        let d3 = mean_disp(0.2);
        assert!(d1 < d2 && d2 < d3, "{d1} {d2} {d3}");
    }

    #[test]
    fn sweep_produces_full_records_and_summaries() {
        let spec = SynthSpec {
            outlier_fraction: 0.1,
            drift_sigma: 0.1,
            ..blob_spec(98)
        };
        let (records, summaries) = run_stability_sweep(
            &spec,
            3,
            2,
            &DivisionParams::default(),
            &DiscoverOptions::default(),
            3,
            &[0, 1],
        )
        .unwrap();
        assert_eq!(records.len(), 3 * 2 * 3);
        assert_eq!(summaries.len(), 3);
        for r in &records {
            assert!((0.0..=1.0).contains(&r.changed_fraction));
            assert!(r.delta_med >= 0.0 && r.sigma_med >= 0.0);
        }
        let csv = sweep_to_csv(&records);
        assert!(csv.starts_with("method,seed,epoch,"));
        assert_eq!(csv.lines().count(), 1 + records.len());
    }
}
